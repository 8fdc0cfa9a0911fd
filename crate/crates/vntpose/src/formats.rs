//! Point-cloud files: whitespace-separated XYZ text, vertex-only PLY
//! (ASCII and binary) and the vertex records of Wavefront OBJ.
//!
//! Text formats print every coordinate with 17 significant digits, which
//! reproduces any `f64` exactly. Binary PLY stores `double` properties and
//! is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use vntpose_core::geometry::Point;
use vntpose_core::PointCloud;

use crate::error::{io_err, Error, Location, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
}

impl PlyEncoding {
    fn keyword(self) -> &'static str {
        match self {
            PlyEncoding::Ascii => "ascii",
            PlyEncoding::BinaryLittleEndian => "binary_little_endian",
            PlyEncoding::BinaryBigEndian => "binary_big_endian",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Xyz,
    Ply(PlyEncoding),
    Obj,
}

impl Format {
    /// Format implied by the file extension; PLY files are written as
    /// binary little-endian.
    pub fn from_path(path: &Path) -> Result<Format> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .unwrap_or_default();
        match ext.as_str() {
            "xyz" => Ok(Format::Xyz),
            "ply" => Ok(Format::Ply(PlyEncoding::BinaryLittleEndian)),
            "obj" => Ok(Format::Obj),
            _ => Err(Error::UnknownFormat {
                path: path.to_path_buf(),
                extension: ext,
            }),
        }
    }
}

type ParseResult<T> = std::result::Result<T, (Location, String)>;

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let format = Format::from_path(path)?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let parsed = match format {
        Format::Ply(_) => parse_ply(&bytes),
        Format::Xyz | Format::Obj => {
            let text = std::str::from_utf8(&bytes).map_err(|e| (Location::Offset(e.valid_up_to() as u64), "invalid UTF-8".into()));
            text.and_then(|t| if format == Format::Xyz { parse_xyz(t) } else { parse_obj(t) })
        }
    };
    let points = parsed.map_err(|(at, detail)| Error::parse(path, at, detail))?;
    PointCloud::new(points).map_err(|e| Error::parse(path, Location::Offset(0), e.to_string()))
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    save_cloud_as(cloud, path, Format::from_path(path)?)
}

pub fn save_cloud_as(cloud: &PointCloud, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Xyz => write_xyz(cloud).into_bytes(),
        Format::Obj => write_obj(cloud).into_bytes(),
        Format::Ply(enc) => write_ply(cloud, enc),
    };
    fs::write(path, bytes).map_err(io_err(path))
}

/// Scientific notation with 17 significant digits; parses back to the
/// same value.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(tok: &str, line: usize) -> ParseResult<f64> {
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err((Location::Line(line), format!("non-finite coordinate `{tok}`"))),
        Err(_) => Err((Location::Line(line), format!("invalid number `{tok}`"))),
    }
}

pub fn parse_xyz(text: &str) -> ParseResult<Vec<Point>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 3 {
            return Err((Location::Line(line), format!("expected 3 values, found {}", toks.len())));
        }
        out.push([parse_f64(toks[0], line)?, parse_f64(toks[1], line)?, parse_f64(toks[2], line)?]);
    }
    Ok(out)
}

pub fn write_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 72);
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", format_f64(p[0]), format_f64(p[1]), format_f64(p[2]));
    }
    s
}

/// Vertex positions of an OBJ file; every other record is ignored.
pub fn parse_obj(text: &str) -> ParseResult<Vec<Point>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut toks = raw.split_whitespace();
        if toks.next() != Some("v") {
            continue;
        }
        let coords: Vec<&str> = toks.collect();
        if coords.len() < 3 {
            return Err((Location::Line(line), "vertex needs three coordinates".into()));
        }
        out.push([parse_f64(coords[0], line)?, parse_f64(coords[1], line)?, parse_f64(coords[2], line)?]);
    }
    Ok(out)
}

pub fn write_obj(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 74);
    for p in cloud.points() {
        let _ = writeln!(s, "v {} {} {}", format_f64(p[0]), format_f64(p[1]), format_f64(p[2]));
    }
    s
}

pub fn write_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat {} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        encoding.keyword(),
        cloud.len()
    )
    .into_bytes();
    for p in cloud.points() {
        match encoding {
            PlyEncoding::Ascii => {
                out.extend_from_slice(format!("{} {} {}\n", format_f64(p[0]), format_f64(p[1]), format_f64(p[2])).as_bytes())
            }
            PlyEncoding::BinaryLittleEndian => p.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            PlyEncoding::BinaryBigEndian => p.iter().for_each(|v| out.extend_from_slice(&v.to_be_bytes())),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], little: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:literal) => {{
                let a: [u8; $n] = b[..$n].try_into().expect("sized");
                (if little { <$t>::from_le_bytes(a) } else { <$t>::from_be_bytes(a) }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
    /// Byte offset of the body.
    body: usize,
    /// Line number of the first body line.
    body_line: usize,
}

fn parse_header(bytes: &[u8]) -> ParseResult<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or((Location::Line(line_no + 1), "header is not terminated by end_header".to_string()))?;
        let raw = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| (Location::Line(line_no + 1), "header is not UTF-8".to_string()))?;
        let text = raw.trim_end_matches('\r').trim();
        pos += end + 1;
        line_no += 1;
        let at = Location::Line(line_no);
        let toks: Vec<&str> = text.split_whitespace().collect();
        if line_no == 1 {
            if text != "ply" {
                return Err((at, "missing `ply` magic".into()));
            }
            continue;
        }
        match toks.as_slice() {
            [] => continue,
            ["comment" | "obj_info", ..] => continue,
            ["format", kind, "1.0"] => {
                encoding = Some(match *kind {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    "binary_big_endian" => PlyEncoding::BinaryBigEndian,
                    other => return Err((at, format!("unknown format `{other}`"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| (at, format!("invalid element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements.last_mut().ok_or((at, "property before any element".to_string()))?;
                let count = Scalar::parse(count).ok_or((at, format!("unknown type `{count}`")))?;
                let item = Scalar::parse(item).ok_or((at, format!("unknown type `{item}`")))?;
                if matches!(count, Scalar::F32 | Scalar::F64) {
                    return Err((at, "list count must be an integer type".into()));
                }
                el.props.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or((at, "property before any element".to_string()))?;
                let ty = Scalar::parse(ty).ok_or((at, format!("unknown type `{ty}`")))?;
                el.props.push(Property::Scalar(name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => return Err((at, format!("unexpected header line `{text}`"))),
        }
    }
    let encoding = encoding.ok_or((Location::Line(line_no), "missing format line".to_string()))?;
    Ok(Header {
        encoding,
        elements,
        body: pos,
        body_line: line_no + 1,
    })
}

/// Positions of the `x`, `y`, `z` scalar properties of the vertex element.
fn xyz_slots(el: &Element) -> Option<[usize; 3]> {
    let find = |n: &str| el.props.iter().position(|p| matches!(p, Property::Scalar(name, _) if name == n));
    Some([find("x")?, find("y")?, find("z")?])
}

pub fn parse_ply(bytes: &[u8]) -> ParseResult<Vec<Point>> {
    let header = parse_header(bytes)?;
    let vertex = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or((Location::Line(header.body_line - 1), "no vertex element".to_string()))?;
    let slots = xyz_slots(&header.elements[vertex])
        .ok_or((Location::Line(header.body_line - 1), "vertex element lacks x, y or z".to_string()))?;
    let mut out = Vec::with_capacity(header.elements[vertex].count);
    match header.encoding {
        PlyEncoding::Ascii => read_ascii_body(bytes, &header, vertex, slots, &mut out)?,
        enc => read_binary_body(bytes, &header, vertex, slots, enc == PlyEncoding::BinaryLittleEndian, &mut out)?,
    }
    Ok(out)
}

fn read_ascii_body(bytes: &[u8], h: &Header, vertex: usize, slots: [usize; 3], out: &mut Vec<Point>) -> ParseResult<()> {
    let body = std::str::from_utf8(&bytes[h.body..]).map_err(|e| (Location::Offset((h.body + e.valid_up_to()) as u64), "body is not UTF-8".to_string()))?;
    let mut lines = body.lines().enumerate().map(|(i, l)| (h.body_line + i, l)).filter(|(_, l)| !l.trim().is_empty());
    for (ei, el) in h.elements.iter().enumerate() {
        for _ in 0..el.count {
            let (line, text) = lines.next().ok_or((Location::Line(h.body_line), format!("file ends inside element `{}`", el.name)))?;
            if ei != vertex {
                continue;
            }
            let toks: Vec<&str> = text.split_whitespace().collect();
            let mut vals = Vec::with_capacity(el.props.len());
            let mut k = 0;
            for p in &el.props {
                let tok = toks.get(k).ok_or((Location::Line(line), "too few values".to_string()))?;
                match p {
                    Property::Scalar(..) => {
                        vals.push(tok.parse::<f64>().map_err(|_| (Location::Line(line), format!("invalid number `{tok}`")))?);
                        k += 1;
                    }
                    Property::List { .. } => {
                        let n: usize = tok.parse().map_err(|_| (Location::Line(line), format!("invalid list length `{tok}`")))?;
                        vals.push(f64::NAN);
                        k += 1 + n;
                    }
                }
            }
            if k != toks.len() {
                return Err((Location::Line(line), format!("expected {k} values, found {}", toks.len())));
            }
            let p = slots.map(|s| vals[s]);
            if p.iter().any(|v| !v.is_finite()) {
                return Err((Location::Line(line), "non-finite coordinate".into()));
            }
            out.push(p);
        }
    }
    Ok(())
}

fn read_binary_body(bytes: &[u8], h: &Header, vertex: usize, slots: [usize; 3], little: bool, out: &mut Vec<Point>) -> ParseResult<()> {
    let mut pos = h.body;
    let take = |pos: &mut usize, n: usize| -> ParseResult<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or((Location::Offset(*pos as u64), "unexpected end of binary data".to_string()))?;
        *pos += n;
        Ok(s)
    };
    for (ei, el) in h.elements.iter().enumerate() {
        for _ in 0..el.count {
            let start = pos;
            let mut vals = [0.0; 3];
            for (pi, p) in el.props.iter().enumerate() {
                match p {
                    Property::Scalar(_, ty) => {
                        let v = ty.decode(take(&mut pos, ty.size())?, little);
                        if let Some(axis) = slots.iter().position(|&s| s == pi) {
                            vals[axis] = v;
                        }
                    }
                    Property::List { count, item } => {
                        let n = count.decode(take(&mut pos, count.size())?, little);
                        if n < 0.0 {
                            return Err((Location::Offset((pos - count.size()) as u64), "negative list length".into()));
                        }
                        take(&mut pos, n as usize * item.size())?;
                    }
                }
            }
            if ei == vertex {
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err((Location::Offset(start as u64), "non-finite coordinate".into()));
                }
                out.push(vals);
            }
        }
    }
    if pos != bytes.len() {
        return Err((Location::Offset(pos as u64), format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(())
}
