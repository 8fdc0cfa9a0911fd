//! Acceptance run: one line per criterion, then a non-zero exit if any
//! criterion failed. Runs without the libtest harness so the lines are
//! always shown.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vntpose::checkpoint::Checkpoint;
use vntpose::commands::{self, consistency_of, stability_of, verify_equivariance};
use vntpose::RunConfig;
use vntpose_core::augment::{fps_from, knn_removal_at, AugmentKind, AugmentSpec, ResampleSource};
use vntpose_core::data::{generate_instance, ShapeSample, SyntheticClassSpec};
use vntpose_core::geometry::{chamfer, closest_orthonormal, sample_uniform_rotation, Point};
use vntpose_core::layers::{vnt_maxpool, Mode, RowStochasticWeights, VectorFeature, VectorFeatureSet};
use vntpose_core::model::{DecoderConfig, Model, ModelConfig};
use vntpose_core::suite::total_loss_gradient_error;
use vntpose_core::train::{TrainConfig, Trainer};
use vntpose_core::{Mat3, PointCloud};

const EQUIVARIANCE_TRIALS: usize = 100;
const EQUIVARIANCE_TOL: f64 = 1e-9;
const EQUIVARIANCE_BUDGET: Duration = Duration::from_secs(120);
const STABILITY_INSTANCES: usize = 50;
const STABILITY_ROTATIONS: usize = 10;
const STABILITY_TOL_DEG: f64 = 0.01;
const STABILITY_BUDGET: Duration = Duration::from_secs(300);
const TRAIN_EPOCHS: usize = 50;
const REC_FACTOR: f64 = 5.0;
const ORTHO_TOL: f64 = 1e-2;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const HELD_OUT: usize = 50;
const CONSISTENCY_TOL_DEG: f64 = 40.0;
const GRADIENT_TOL: f64 = 1e-4;
const ORTHO_MATRICES: usize = 1000;
const ORTHO_CANDIDATES: usize = 1000;
const ORTHONORMAL_TOL: f64 = 1e-10;
const ORACLE_CASES: usize = 2000;
const ORACLE_MAX_N: usize = 8;

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(outcomes: &mut Vec<Outcome>, id: &'static str, name: &'static str, pass: bool, detail: String) {
    println!("[{}] {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    outcomes.push(Outcome { id, name, pass, detail });
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn desk_config(out: &Path) -> RunConfig {
    let text = r#"
seed = 2024

[train]
epochs = 50
batch_size = 32
points = 1024
lr = 1e-3
lr_drops = [25, 35]

[augment]
per_step = 1

[data.synthetic]
family = "winged"
instances = 200
points = 1024

[eval]
rotations = 10
"#;
    let mut cfg = RunConfig::from_toml(text, Path::new("desk.toml")).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn small_config(out: &Path) -> RunConfig {
    let text = r#"
seed = 5

[model]
channels = 4
wide_channels = 8
stn_hidden = [8]
frame_hidden = [8]
min_points = 16
[model.decoder]
patches = 2
hidden = 16
hidden_layers = 2
points = 64

[train]
epochs = 3
batch_size = 4
points = 64
lr = 0.01
lr_drops = [2]

[augment]
fps_range = [20, 40]
knn_count = 16

[data.synthetic]
family = "winged"
instances = 8
points = 64
dense_points = 128
"#;
    let mut cfg = RunConfig::from_toml(text, Path::new("small.toml")).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

/// Aligned instances of the configured class from a stream the training
/// data never uses.
fn held_out(cfg: &RunConfig) -> Vec<ShapeSample> {
    let spec = SyntheticClassSpec {
        instances: HELD_OUT,
        posed: false,
        ..cfg.data.synthetic.clone().unwrap()
    };
    let base = commands::data_seed(cfg) ^ 0x2a2a_2a2a;
    (0..HELD_OUT).map(|i| generate_instance(&spec, base, i).unwrap()).collect()
}

fn criterion_1(out: &mut Vec<Outcome>, untrained: &Model) {
    let t0 = Instant::now();
    let reports = verify_equivariance(untrained, EQUIVARIANCE_TRIALS, None, 1).unwrap();
    let took = t0.elapsed();
    let heads = ["encoder.z_s", "encoder.t", "encoder.r"];
    let head_worst = reports
        .iter()
        .filter(|r| heads.contains(&r.name.as_str()))
        .map(|r| r.max_residual)
        .fold(0.0f64, f64::max);
    let seen = heads.iter().filter(|h| reports.iter().any(|r| r.name == **h)).count();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let pass = seen == heads.len() && head_worst < EQUIVARIANCE_TOL && failed.is_empty() && took < EQUIVARIANCE_BUDGET;
    report(
        out,
        "1",
        "equivariance",
        pass,
        format!(
            "{} contracts x {EQUIVARIANCE_TRIALS} trials, worst head residual {head_worst:.2e} (< {EQUIVARIANCE_TOL:e}), failed {failed:?}, {:.1} s (< {} s)",
            reports.len(),
            secs(took),
            EQUIVARIANCE_BUDGET.as_secs()
        ),
    );
}

fn stability_pair(cfg: &RunConfig, untrained: &Model, trained: &Model, data: &[ShapeSample]) -> (f64, f64, Duration) {
    let mut cfg = cfg.clone();
    cfg.eval.rotations = STABILITY_ROTATIONS;
    let t0 = Instant::now();
    let a = stability_of(untrained, data, &cfg).unwrap();
    let b = stability_of(trained, data, &cfg).unwrap();
    (a, b, t0.elapsed())
}

fn criterion_2(out: &mut Vec<Outcome>, (a, b, took): (f64, f64, Duration)) {
    let pass = a < STABILITY_TOL_DEG && b < STABILITY_TOL_DEG && took < STABILITY_BUDGET;
    report(
        out,
        "2",
        "stability",
        pass,
        format!(
            "{STABILITY_INSTANCES} instances x {STABILITY_ROTATIONS} motions, untrained {a:.2e} deg, trained {b:.2e} deg (< {STABILITY_TOL_DEG} deg), {:.1} s (< {} s)",
            secs(took),
            STABILITY_BUDGET.as_secs()
        ),
    );
}

fn criterion_3(out: &mut Vec<Outcome>, cfg: &RunConfig) -> Model {
    let t0 = Instant::now();
    let summary = commands::train(cfg, None, |m, s| {
        println!("      epoch {:>2}  rec {:.4e}  ortho {:.4e}  aug {:.4e}  can {:.4e}  {s:.0} s", m.epoch, m.rec, m.ortho, m.aug, m.can);
    })
    .unwrap();
    let took = t0.elapsed();
    let (first, last) = (summary.first.unwrap(), summary.last.unwrap());
    let rec_ok = last.rec <= first.rec / REC_FACTOR;
    let ortho_ok = last.ortho <= ORTHO_TOL;
    let time_ok = took < TRAIN_BUDGET;
    report(
        out,
        "3",
        "desk-scale training",
        rec_ok && ortho_ok && time_ok && last.epoch == TRAIN_EPOCHS,
        format!(
            "rec {:.4e} -> {:.4e} (ratio {:.2}, need >= {REC_FACTOR}) {}; ortho {:.4e} (<= {ORTHO_TOL:e}) {}; {:.1} min (< {} min) {}",
            first.rec,
            last.rec,
            first.rec / last.rec,
            ok(rec_ok),
            last.ortho,
            ok(ortho_ok),
            secs(took) / 60.0,
            TRAIN_BUDGET.as_secs() / 60,
            ok(time_ok)
        ),
    );
    commands::load_model(&cfg.out.join(commands::CHECKPOINT_FILE)).unwrap().0
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "MISSED"
    }
}

fn criterion_4(out: &mut Vec<Outcome>, untrained: &Model, trained: &Model, held: &[ShapeSample]) {
    let base = consistency_of(untrained, held).unwrap().std_degrees;
    let got = consistency_of(trained, held).unwrap().std_degrees;
    let pass = got < CONSISTENCY_TOL_DEG && got < base / 2.0;
    report(
        out,
        "4",
        "consistency",
        pass,
        format!("{HELD_OUT} held-out aligned instances, trained {got:.2} deg (< {CONSISTENCY_TOL_DEG} and < {:.2} = half the untrained {base:.2})", base / 2.0),
    );
}

fn micro_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        channels: 2,
        wide_channels: 2,
        knn: 1,
        stn_hidden: vec![2],
        frame_hidden: vec![2],
        min_points: 1,
        decoder: DecoderConfig {
            patches: 1,
            hidden: 3,
            hidden_layers: 2,
            points: 2,
        },
        ..Default::default()
    };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn criterion_5(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let augment = AugmentSpec {
        fps_range: [1, 2],
        knn_count: 1,
        resample: ResampleSource::Bootstrap,
        enabled: AugmentKind::ALL.to_vec(),
        ..Default::default()
    };
    // differences also move the decoder through the re-encoded shape
    let config = TrainConfig {
        points: 2,
        detach_canonical: false,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    let mut params = 0;
    for seed in 0..5 {
        let mut model = micro_model(seed);
        params = model.store().params().iter().map(|p| p.value.numel()).sum();
        let sample = ShapeSample {
            cloud: random_cloud(&mut rng, 2),
            dense: None,
            canonical: None,
            true_pose: None,
            class_id: 0,
            instance_id: 0,
        };
        let e = total_loss_gradient_error(&mut model, &sample, &augment, &config, seed, 1e-4, 1e-4).unwrap();
        worst = worst.max(e);
    }
    report(
        out,
        "5",
        "gradient correctness",
        worst < GRADIENT_TOL,
        format!("5 micro-models x {params} parameters, worst relative error {worst:.2e} (< {GRADIENT_TOL:e})"),
    );
}

fn random_orthogonal(rng: &mut ChaCha8Rng) -> Mat3 {
    let r = sample_uniform_rotation(rng);
    if rng.random::<bool>() {
        r.scale(-1.0)
    } else {
        r
    }
}

fn criterion_6(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut worst_orth = 0.0f64;
    let mut beaten = 0usize;
    let mut closest_margin = f64::INFINITY;
    let mut done = 0;
    while done < ORTHO_MATRICES {
        let m = Mat3(std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))));
        if m.det().abs() < 1e-3 {
            continue;
        }
        done += 1;
        let r = closest_orthonormal(&m).unwrap();
        worst_orth = worst_orth.max(r.orthonormality_error());
        let d = (r - m).frobenius();
        for _ in 0..ORTHO_CANDIDATES {
            let q = random_orthogonal(&mut rng);
            let dq = (q - m).frobenius();
            if dq < d {
                beaten += 1;
            }
            closest_margin = closest_margin.min(dq - d);
        }
    }
    report(
        out,
        "6",
        "orthonormalization",
        worst_orth < ORTHONORMAL_TOL && beaten == 0,
        format!(
            "{ORTHO_MATRICES} matrices, max |R^T R - I| {worst_orth:.2e} (< {ORTHONORMAL_TOL:e}), beaten by {beaten} of {} candidates, smallest margin {closest_margin:.2e}",
            ORTHO_MATRICES * ORTHO_CANDIDATES
        ),
    );
}

fn sq(a: Point, b: Point) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn grid_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(-2i32..=2) as f64)).collect()
}

fn oracle_chamfer(x: &[Point], y: &[Point]) -> f64 {
    let side = |a: &[Point], b: &[Point]| {
        let mut total = 0.0;
        for p in a {
            let mut best = f64::INFINITY;
            for q in b {
                best = best.min(sq(*p, *q));
            }
            total += best;
        }
        total / a.len() as f64
    };
    side(x, y) + side(y, x)
}

/// Greedy farthest-point order from its definition; ties go to the lowest
/// index.
fn oracle_fps(pts: &[Point], k: usize, seed: usize) -> Vec<usize> {
    let mut chosen = vec![seed];
    while chosen.len() < k {
        let dist = |i: usize| chosen.iter().map(|&c| sq(pts[i], pts[c])).fold(f64::INFINITY, f64::min);
        let rest: Vec<usize> = (0..pts.len()).filter(|i| !chosen.contains(i)).collect();
        let far = rest.iter().map(|&i| dist(i)).fold(f64::NEG_INFINITY, f64::max);
        chosen.push(*rest.iter().find(|&&i| dist(i) == far).unwrap());
    }
    chosen
}

/// Keep set of the subset of size `n - k` whose removed points are all
/// at least as close to the anchor as every kept one, found by trying
/// every subset; ties resolved toward removing lower indices.
fn oracle_knn_removal(pts: &[Point], k: usize, anchor: usize) -> Vec<usize> {
    let n = pts.len();
    let d = |i: usize| sq(pts[i], pts[anchor]);
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let removed: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let kept: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 0).collect();
        let valid = removed.iter().all(|&r| kept.iter().all(|&q| d(r) < d(q) || (d(r) == d(q) && r < q)));
        if valid {
            assert!(best.is_none(), "two valid removals");
            best = Some(kept);
        }
    }
    best.unwrap()
}

fn oracle_maxpool(set: &[Vec<[f64; 3]>], k: &[f64], o: &[f64], c: usize) -> Vec<usize> {
    let mix = |w: &[f64], v: &[[f64; 3]], row: usize| -> [f64; 3] {
        std::array::from_fn(|i| (0..c).map(|j| w[row * c + j] * v[j][i]).sum())
    };
    (0..c)
        .map(|ch| {
            let scores: Vec<f64> = set
                .iter()
                .map(|v| {
                    let (kv, ov) = (mix(k, v, ch), mix(o, v, ch));
                    (0..3).map(|i| (v[ch][i] - ov[i]) * (kv[i] - ov[i])).sum()
                })
                .collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            scores.iter().position(|&s| s == top).unwrap()
        })
        .collect()
}

fn criterion_7(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = [0usize; 4];
    for _ in 0..ORACLE_CASES {
        let n = rng.random_range(1..=ORACLE_MAX_N);
        let a = grid_cloud(&mut rng, n);
        let m = rng.random_range(1..=ORACLE_MAX_N);
        let b = grid_cloud(&mut rng, m);
        let (x, y) = (PointCloud::new(a.clone()).unwrap(), PointCloud::new(b.clone()).unwrap());
        if chamfer(&x, &y) != oracle_chamfer(&a, &b) {
            mismatches[0] += 1;
        }

        let k = rng.random_range(1..=n);
        let seed = rng.random_range(0..n);
        let want: Vec<Point> = oracle_fps(&a, k, seed).iter().map(|&i| a[i]).collect();
        if fps_from(&x, k, seed).unwrap().points() != want.as_slice() {
            mismatches[1] += 1;
        }

        if n >= 2 {
            let k = rng.random_range(0..n);
            let anchor = rng.random_range(0..n);
            let want: Vec<Point> = oracle_knn_removal(&a, k, anchor).iter().map(|&i| a[i]).collect();
            if knn_removal_at(&x, k, anchor).unwrap().points() != want.as_slice() {
                mismatches[2] += 1;
            }
        }

        let c = rng.random_range(1..=4);
        let kw = RowStochasticWeights::random(c, c, &mut rng).unwrap();
        let ow = RowStochasticWeights::random(c, c, &mut rng).unwrap();
        let feats: Vec<Vec<[f64; 3]>> =
            (0..n).map(|_| (0..c).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()).collect();
        let set = VectorFeatureSet::new(feats.iter().map(|f| VectorFeature::new(f.clone()).unwrap()).collect()).unwrap();
        let sel = vnt_maxpool(&set, &kw, &ow).unwrap();
        let want = oracle_maxpool(&feats, kw.effective().data(), ow.effective().data(), c);
        let rows: Vec<[f64; 3]> = want.iter().enumerate().map(|(ch, &p)| feats[p][ch]).collect();
        if sel.selected != want || sel.feature.rows() != rows.as_slice() {
            mismatches[3] += 1;
        }
    }
    report(
        out,
        "7",
        "oracle equivalence",
        mismatches.iter().all(|&m| m == 0),
        format!(
            "{ORACLE_CASES} cases with N <= {ORACLE_MAX_N}, mismatches: chamfer {}, fps {}, knn_removal {}, vnt_maxpool {}",
            mismatches[0], mismatches[1], mismatches[2], mismatches[3]
        ),
    );
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn criterion_8(out: &mut Vec<Outcome>) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    commands::train(&small_config(a.path()), None, |_, _| {}).unwrap();
    commands::train(&small_config(b.path()), None, |_, _| {}).unwrap();
    let la = fs::read(a.path().join(commands::METRICS_FILE)).unwrap();
    let lb = fs::read(b.path().join(commands::METRICS_FILE)).unwrap();
    let logs_ok = !la.is_empty() && la == lb;

    let cfg = small_config(a.path());
    let data = commands::load_data(&cfg).unwrap();
    let mut t = Trainer::new(cfg.build_model().unwrap(), cfg.train_config(), cfg.augment.clone()).unwrap();
    t.run_epoch(&data).unwrap();
    let path = a.path().join("round_trip.ckpt");
    Checkpoint::capture(&cfg, &t.model, &t.adam, t.epoch).save(&path).unwrap();
    let (restored, adam) = Checkpoint::load(&path).unwrap().restore(&path).unwrap();
    let mut outputs_ok = adam == t.adam;
    for s in &data {
        for mode in [Mode::Train, Mode::Eval] {
            let (e1, e2) = (t.model.encode_cloud(&s.cloud, mode).unwrap(), restored.encode_cloud(&s.cloud, mode).unwrap());
            outputs_ok &= bits(&e1.z_s) == bits(&e2.z_s) && bits(&e1.r.flat()) == bits(&e2.r.flat()) && bits(&e1.t) == bits(&e2.t);
            let (d1, d2) = (t.model.decode_shape(&e1.z_s).unwrap(), restored.decode_shape(&e2.z_s).unwrap());
            outputs_ok &= bits(&d1.points.flat()) == bits(&d2.points.flat());
        }
    }
    report(
        out,
        "8",
        "determinism",
        logs_ok && outputs_ok,
        format!(
            "two training runs: metric logs {} ({} bytes); checkpoint round trip: forward outputs {}",
            if logs_ok { "identical" } else { "DIFFER" },
            la.len(),
            if outputs_ok { "bit-identical" } else { "DIFFER" }
        ),
    );
}

fn main() -> ExitCode {
    let mut out = Vec::new();
    criterion_6(&mut out);
    criterion_7(&mut out);
    criterion_5(&mut out);
    criterion_8(&mut out);

    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path());
    cfg.validate().unwrap();
    let untrained = cfg.build_model().unwrap();
    criterion_1(&mut out, &untrained);

    let trained = criterion_3(&mut out, &cfg);
    let data = commands::load_data(&cfg).unwrap();
    criterion_2(&mut out, stability_pair(&cfg, &untrained, &trained, &data[..STABILITY_INSTANCES]));
    criterion_4(&mut out, &untrained, &trained, &held_out(&cfg));

    out.sort_by_key(|o| o.id);
    println!();
    println!("acceptance summary");
    for o in &out {
        println!("  {} {:<22} {}", o.id, o.name, if o.pass { "PASS" } else { "FAIL" });
    }
    let failed: Vec<_> = out.iter().filter(|o| !o.pass).collect();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        for o in &failed {
            eprintln!("criterion {} ({}) failed: {}", o.id, o.name, o.detail);
        }
        ExitCode::FAILURE
    }
}
