//! The subcommands behind the `vntpose` binary, callable as a library.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use vntpose_core::data::{generate_instance, ShapeSample};
use vntpose_core::eval::{consistency, stability, ConsistencyReport, StabilityGroup};
use vntpose_core::geometry::{apply_transform, sample_rigid};
use vntpose_core::model::{Model, PoseEstimate};
use vntpose_core::suite::{run_contract, standard_cases, ContractReport, ProbeLayers};
use vntpose_core::train::{EpochMetrics, Trainer};
use vntpose_core::{PointCloud, RigidTransform};

use crate::checkpoint::Checkpoint;
use crate::config::{stream_rng, RunConfig, Stream};
use crate::error::{io_err, Error, Result};
use crate::formats::{format_f64, load_cloud, save_cloud, save_cloud_as, Format};
use crate::manifest::{load_dataset, ClassEntry, FileEntry, Manifest};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const POSES_FILE: &str = "poses.txt";
pub const HISTOGRAM_FILE: &str = "histogram.tsv";
pub const VERIFY_FILE: &str = "verify.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Samples named by the data section of `cfg`.
pub fn load_data(cfg: &RunConfig) -> Result<Vec<ShapeSample>> {
    match (&cfg.data.manifest, &cfg.data.synthetic) {
        (Some(m), _) => load_dataset(m),
        (None, Some(spec)) => {
            spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
            let seed = data_seed(cfg);
            Ok((0..spec.instances).map(|i| generate_instance(spec, seed, i)).collect::<std::result::Result<_, _>>()?)
        }
        (None, None) => Err(Error::Usage("no data source configured".into())),
    }
}

/// Base seed of the synthetic instances; 63 bits so that it fits a TOML
/// integer.
pub fn data_seed(cfg: &RunConfig) -> u64 {
    cfg.rng(Stream::Data).random::<u64>() >> 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenReport {
    pub manifest: PathBuf,
    pub files: usize,
}

/// Write the synthetic class of `cfg` to `cfg.out` as binary PLY files
/// plus a manifest. The samples equal those `load_data` generates in
/// memory for the same config.
pub fn gen_data(cfg: &RunConfig) -> Result<GenReport> {
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Usage("gen-data needs a [data.synthetic] spec".into()))?;
    spec.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let seed = data_seed(cfg);
    let class = format!("{:?}", spec.family).to_lowercase();
    let dir = cfg.out.join(&class);
    create_dir(&dir)?;
    let mut manifest = Manifest::new();
    manifest.classes.push(ClassEntry {
        name: class.clone(),
        seed,
        spec: spec.clone(),
    });
    for i in 0..spec.instances {
        let s = generate_instance(spec, seed, i)?;
        let rel = PathBuf::from(&class).join(format!("{i:04}.ply"));
        save_cloud(&s.cloud, &cfg.out.join(&rel))?;
        let dense = match &s.dense {
            Some(d) => {
                let rel = PathBuf::from(&class).join(format!("{i:04}.dense.ply"));
                save_cloud(d, &cfg.out.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        manifest.files.push(FileEntry {
            path: rel,
            dense,
            class_id: s.class_id,
            instance_id: s.instance_id,
            pose: s.true_pose.map(|g| g.to_array().to_vec()),
        });
    }
    let path = cfg.out.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(GenReport {
        manifest: path,
        files: spec.instances,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Timing {
    epoch: usize,
    seconds: f64,
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(io_err(path))?;
    Ok(BufWriter::new(f))
}

fn log_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("plain records serialize");
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub first: Option<EpochMetrics>,
    pub last: Option<EpochMetrics>,
    /// Completed epochs, counting those of a resumed checkpoint.
    pub epoch: usize,
}

/// Train under `cfg`, optionally continuing from a checkpoint.
///
/// Writes to `cfg.out`: the metric log (one JSON record per epoch), wall
/// times in a separate log, the effective config and a checkpoint after
/// every epoch. When a loss turns non-finite the error names the term and
/// the checkpoint on disk is the last finite state.
pub fn train(cfg: &RunConfig, resume: Option<(&Checkpoint, &Path)>, mut progress: impl FnMut(&EpochMetrics, f64)) -> Result<TrainSummary> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    let (model, adam, epoch) = match resume {
        Some((ckpt, path)) => {
            ckpt.check_compatible(cfg, path)?;
            let (m, a) = ckpt.restore(path)?;
            (m, Some(a), ckpt.epoch)
        }
        None => (cfg.build_model()?, None, 0),
    };
    let data = load_data(cfg)?;
    let mut trainer = Trainer::new(model, cfg.train_config(), cfg.augment.clone()).map_err(|e| Error::Usage(e.to_string()))?;
    if let Some(a) = adam {
        trainer.adam = a;
    }
    trainer.epoch = epoch;

    let config_path = cfg.out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;
    let metrics_path = cfg.out.join(METRICS_FILE);
    let timing_path = cfg.out.join(TIMING_FILE);
    let ckpt_path = cfg.out.join(CHECKPOINT_FILE);
    let mut metrics = open_log(&metrics_path, resume.is_some())?;
    let mut timing = open_log(&timing_path, resume.is_some())?;
    if resume.is_none() {
        Checkpoint::capture(cfg, &trainer.model, &trainer.adam, 0).save(&ckpt_path)?;
    }

    let mut summary = TrainSummary {
        first: None,
        last: None,
        epoch,
    };
    while !trainer.is_done() {
        let start = Instant::now();
        let m = trainer.run_epoch(&data)?;
        let seconds = start.elapsed().as_secs_f64();
        log_line(&mut metrics, &metrics_path, &m)?;
        log_line(&mut timing, &timing_path, &Timing { epoch: m.epoch, seconds })?;
        Checkpoint::capture(cfg, &trainer.model, &trainer.adam, trainer.epoch).save(&ckpt_path)?;
        summary.first.get_or_insert(m);
        summary.last = Some(m);
        summary.epoch = trainer.epoch;
        progress(&m, seconds);
    }
    Ok(summary)
}

/// Model and config of a checkpoint file.
pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, _) = ckpt.restore(path)?;
    Ok((model, ckpt))
}

/// Pose of a cloud and the cloud mapped back into the canonical frame by
/// the inverse of `(R̂, T̃)`.
pub fn align_cloud(model: &Model, cloud: &PointCloud) -> Result<(PoseEstimate, PointCloud)> {
    let pose = model.infer_pose(cloud)?;
    let g = RigidTransform::new(pose.r_hat, pose.t);
    Ok((pose, apply_transform(cloud, &g.inverse())))
}

/// One line of twelve numbers: `R̂` row-major, then `T̃`.
pub fn pose_line(pose: &PoseEstimate) -> String {
    let g = RigidTransform::new(pose.r_hat, pose.t);
    g.to_array().iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(" ")
}

/// Align each input; canonical clouds go to `out/<stem>.canonical.<ext>`
/// and the poses, one line per input in input order, to `out/poses.txt`.
pub fn align(model: &Model, inputs: &[PathBuf], out: &Path) -> Result<Vec<PoseEstimate>> {
    if inputs.is_empty() {
        return Err(Error::Usage("align needs at least one input cloud".into()));
    }
    create_dir(out)?;
    let mut lines = String::new();
    let mut poses = Vec::with_capacity(inputs.len());
    for input in inputs {
        let format = Format::from_path(input)?;
        let cloud = load_cloud(input)?;
        let (pose, canonical) = align_cloud(model, &cloud)?;
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
        let ext = input.extension().and_then(|s| s.to_str()).unwrap_or("ply");
        save_cloud_as(&canonical, &out.join(format!("{stem}.canonical.{ext}")), format)?;
        lines.push_str(&pose_line(&pose));
        lines.push('\n');
        poses.push(pose);
    }
    let path = out.join(POSES_FILE);
    fs::write(&path, lines).map_err(io_err(&path))?;
    Ok(poses)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Stability,
    Consistency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub degrees: f64,
    pub instances: usize,
    /// Rigid motions per instance, for stability.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compensate: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistency: Option<ConsistencyReport>,
}

/// Spread of the estimates over `rotations` random rigid motions of every
/// sample, averaged over samples.
pub fn stability_of(model: &Model, data: &[ShapeSample], cfg: &RunConfig) -> Result<f64> {
    let mut rng = cfg.rng(Stream::Eval);
    let mut groups = Vec::with_capacity(data.len());
    for s in data {
        let mut g = StabilityGroup {
            estimates: Vec::with_capacity(cfg.eval.rotations),
            applied: Vec::with_capacity(cfg.eval.rotations),
        };
        for _ in 0..cfg.eval.rotations {
            let motion = sample_rigid(&mut rng, cfg.eval.translation_range)?;
            let pose = model.infer_pose(&apply_transform(&s.cloud, &motion))?;
            g.estimates.push(pose.r_hat);
            g.applied.push(motion.rotation);
        }
        groups.push(g);
    }
    Ok(stability(&groups, cfg.eval.compensate)?)
}

/// Spread of the estimates over instances sitting in the shared canonical
/// frame; samples with a known pose are first mapped back by it.
pub fn consistency_of(model: &Model, data: &[ShapeSample]) -> Result<ConsistencyReport> {
    let poses = data
        .iter()
        .map(|s| model.infer_pose(s.canonical.as_ref().unwrap_or(&s.cloud)).map(|p| p.r_hat))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(consistency(&poses)?)
}

/// Evaluate `metric` on the data of `cfg`; the report goes to
/// `cfg.out/eval_<metric>.json` and, for consistency, the deviation
/// histogram to `cfg.out/histogram.tsv`.
pub fn eval(model: &Model, cfg: &RunConfig, metric: Metric) -> Result<EvalReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    create_dir(&cfg.out)?;
    let report = match metric {
        Metric::Stability => EvalReport {
            metric,
            degrees: stability_of(model, &data, cfg)?,
            instances: data.len(),
            rotations: Some(cfg.eval.rotations),
            compensate: Some(cfg.eval.compensate),
            consistency: None,
        },
        Metric::Consistency => {
            let rep = consistency_of(model, &data)?;
            let path = cfg.out.join(HISTOGRAM_FILE);
            let mut text = String::from("# bin_centre_degrees\tmass\n");
            for (c, m) in rep.histogram_rows() {
                text.push_str(&format!("{c}\t{}\n", format_f64(m)));
            }
            fs::write(&path, text).map_err(io_err(&path))?;
            EvalReport {
                metric,
                degrees: rep.std_degrees,
                instances: data.len(),
                rotations: None,
                compensate: None,
                consistency: Some(rep),
            }
        }
    };
    let name = match metric {
        Metric::Stability => "stability",
        Metric::Consistency => "consistency",
    };
    let path = cfg.out.join(format!("eval_{name}.json"));
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(report)
}

/// Run every layer and head contract of `model` with `trials` random
/// inputs each, spreading the cases over the available cores. Reports
/// come back in case order.
pub fn verify_equivariance(model: &Model, trials: usize, corrupt: Option<&str>, seed: u64) -> Result<Vec<ContractReport>> {
    if trials == 0 {
        return Err(Error::Usage("--trials must be at least 1".into()));
    }
    if let Some(name) = corrupt {
        if !model.encoder_layers().iter().any(|l| l.name() == name) {
            return Err(Error::Usage(format!("no encoder layer named `{name}`")));
        }
    }
    let mut rng = stream_rng(seed, Stream::Verify);
    let probes = ProbeLayers::new(model.config().channels, &mut rng)?;
    let cases: Vec<_> = standard_cases(model, &probes)
        .into_iter()
        .map(|c| c.trials(trials).corrupt(corrupt.map(String::from)))
        .collect();
    let seeds: Vec<u64> = cases.iter().map(|_| rng.next_u64()).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cases.len()).max(1);
    let mut reports: Vec<Option<ContractReport>> = vec![None; cases.len()];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (cases, seeds) = (&cases, &seeds);
                scope.spawn(move || {
                    (w..cases.len())
                        .step_by(workers)
                        .map(|i| (i, run_contract(&cases[i], seeds[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("contract worker panicked") {
                reports[i] = Some(r);
            }
        }
    });
    Ok(reports.into_iter().map(|r| r.expect("every case ran")).collect())
}

/// Write contract reports as JSON lines.
pub fn write_reports(reports: &[ContractReport], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r).expect("report serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}
