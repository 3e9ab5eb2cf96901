//! The subcommands, callable from tests without spawning a process.

use std::fs;
use std::path::{Path, PathBuf};

use hdistill_core::data::{
    generate, pretrain_mim_teacher, pretrain_supervised_teacher, probe_indices, Dataset, DataSpec,
    Split, TrainLog,
};
use hdistill_core::diagnostics::{self, model_report, LayerDelta, ReportSummary};
use hdistill_core::distill::{self, TargetCache, TeacherBundle};
use hdistill_core::vit::checkpoint::{self, CheckpointMeta};
use hdistill_core::vit::ViTParams;
use hdistill_core::{Element, Error, Result};
use sha2::{Digest, Sha256};

use crate::config::{Objective, Precision, RunConfig};
use crate::metrics::{MetricsLog, Record};

/// Images per teacher pass when building target caches and reports.
const CHUNK: usize = 64;

pub struct DataFiles {
    pub train: PathBuf,
    pub eval: PathBuf,
}

/// Dataset files are named by a digest of the data section alone, so runs
/// that differ only in training settings share them.
pub fn data_files(config: &RunConfig) -> DataFiles {
    let bytes = serde_json::to_vec(&config.data).expect("data spec serializes");
    let tag = &hex::encode(Sha256::digest(bytes))[..12];
    let dir = config.out_dir();
    DataFiles {
        train: dir.join(format!("train-{tag}.bin")),
        eval: dir.join(format!("eval-{tag}.bin")),
    }
}

pub fn teacher_path(config: &RunConfig, objective: Objective) -> PathBuf {
    config
        .out_dir()
        .join(format!("teacher_{}-{}.ckpt", objective.name(), config.short_digest()))
}

pub fn student_path(config: &RunConfig) -> PathBuf {
    config
        .out_dir()
        .join(format!("student-{}.ckpt", config.short_digest()))
}

pub fn metrics_path(config: &RunConfig) -> PathBuf {
    config
        .out_dir()
        .join(format!("metrics-{}.jsonl", config.short_digest()))
}

fn meta(config: &RunConfig, role: &str) -> CheckpointMeta {
    CheckpointMeta {
        config_digest: Some(config.digest()),
        role: Some(role.to_string()),
        frozen: false,
    }
}

pub fn gen_data(config: &RunConfig) -> Result<DataFiles> {
    let files = data_files(config);
    fs::create_dir_all(config.out_dir())?;
    for (split, path) in [(Split::Train, &files.train), (Split::Eval, &files.eval)] {
        let mut d = generate(&config.data, split)?;
        d.header.config_digest = Some(config.digest());
        d.save(path)?;
        log::info!("wrote {} ({} images)", path.display(), d.len());
    }
    Ok(files)
}

/// Loads a generated split and checks it was drawn from `spec`.
pub fn load_split(path: &Path, spec: &DataSpec, split: Split) -> Result<Dataset> {
    let d = Dataset::load(path)?;
    let h = &d.header;
    let expected = match split {
        Split::Train => spec.train_images,
        Split::Eval => spec.eval_images,
    };
    let matches = h.split == split
        && h.n == expected
        && h.seed == spec.seed
        && h.c == spec.channels
        && h.h == spec.image_size
        && h.w == spec.image_size
        && h.class_count == spec.class_count;
    if !matches {
        return Err(Error::Format(format!(
            "{} was not generated from this config's data section",
            path.display()
        )));
    }
    Ok(d)
}

fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let files = data_files(config);
    for p in [&files.train, &files.eval] {
        if !p.exists() {
            return Err(Error::Contract(format!(
                "{} not found; run gen-data with this config first",
                p.display()
            )));
        }
    }
    Ok((
        load_split(&files.train, &config.data, Split::Train)?,
        load_split(&files.eval, &config.data, Split::Eval)?,
    ))
}

/// Pretrains one teacher and writes its frozen checkpoint plus an epoch log.
pub fn train_teacher(config: &RunConfig, objective: Objective) -> Result<PathBuf> {
    match config.precision {
        Precision::F64 => train_teacher_as::<f64>(config, objective),
        Precision::F32 => train_teacher_as::<f32>(config, objective),
    }
}

fn train_teacher_as<E: Element>(config: &RunConfig, objective: Objective) -> Result<PathBuf> {
    let (train, _) = load_data(config)?;
    let model = config.teacher_config(objective);
    let (params, log): (ViTParams<E>, TrainLog) = match objective {
        Objective::Supervised => {
            pretrain_supervised_teacher(&model, &train, &config.teachers.supervised)?
        }
        Objective::Mim => {
            pretrain_mim_teacher(&model, &train, &config.teachers.recon, &config.teachers.mim)?
        }
    };
    let path = teacher_path(config, objective);
    checkpoint::save(&params, &meta(config, &format!("teacher_{}", objective.name())), &path)?;
    let mut metrics = MetricsLog::open(
        &path.with_extension("jsonl"),
        &config.digest(),
        &format!("train-teacher {}", objective.name()),
    )?;
    for (epoch, &mean_loss) in log.epoch_loss.iter().enumerate() {
        metrics.push(&Record::Epoch {
            epoch,
            mean_loss,
            layers: Vec::new(),
        })?;
    }
    metrics.finish()?;
    Ok(path)
}

pub struct DistillOutputs {
    pub student: PathBuf,
    pub metrics: PathBuf,
}

/// Distills a student from the two teacher checkpoints.
pub fn distill(config: &RunConfig, teacher_c: &Path, teacher_m: &Path) -> Result<DistillOutputs> {
    match config.precision {
        Precision::F64 => distill_as::<f64>(config, teacher_c, teacher_m),
        Precision::F32 => distill_as::<f32>(config, teacher_c, teacher_m),
    }
}

fn distill_as<E: Element>(
    config: &RunConfig,
    teacher_c: &Path,
    teacher_m: &Path,
) -> Result<DistillOutputs> {
    let (train, eval) = load_data(config)?;
    let (tc, _) = checkpoint::load::<E>(teacher_c)?;
    let (tm, _) = checkpoint::load::<E>(teacher_m)?;
    for t in [&tc, &tm] {
        if !t.config().same_encoder(&config.model) {
            return Err(Error::Asymmetric(
                "teacher encoder differs from the config's model".into(),
            ));
        }
    }
    let teachers = TeacherBundle::new(tc, tm)?;
    let student_config = config.distill.student_config(teachers.feature.config());
    let student = ViTParams::<E>::init(&student_config, config.student.seed)?;
    let cache = TargetCache::build(&teachers, &train, &config.distill, CHUNK)?;

    let probes = match config.analysis.snapshot_probes {
        0 => None,
        n => {
            let idx = probe_indices(config.analysis.probe_seed, eval.len(), n.min(eval.len()));
            Some(eval.images::<E>(&idx)?)
        }
    };
    let path = metrics_path(config);
    let mut metrics = MetricsLog::open(&path, &config.digest(), "distill")?;
    let per_epoch = train.len().div_ceil(config.student.batch_size);
    let mut loss_sum = 0.0;
    let student = distill::distill(
        student,
        &teachers,
        &train,
        &cache,
        &config.distill,
        &config.student,
        |record, student| {
            metrics.push(&Record::Step(record.clone()))?;
            loss_sum += record.total;
            if (record.step + 1) % per_epoch == 0 {
                let layers = match &probes {
                    Some(p) => {
                        let stats = model_report(student, p, false, CHUNK)?;
                        ReportSummary::new(&stats, student.config(), config.digest(), 0)
                            .per_layer_means
                    }
                    None => Vec::new(),
                };
                metrics.push(&Record::Epoch {
                    epoch: record.epoch,
                    mean_loss: loss_sum / per_epoch as f64,
                    layers,
                })?;
                loss_sum = 0.0;
            }
            Ok(())
        },
    )?;
    metrics.finish()?;
    let out = student_path(config);
    checkpoint::save(&student, &meta(config, "student"), &out)?;
    Ok(DistillOutputs {
        student: out,
        metrics: path,
    })
}

pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub summary: ReportSummary,
}

/// Attention diagnostics of a checkpoint over `probes` evaluation images.
/// Reports land next to the checkpoint unless `out_dir` is given.
pub fn analyze(
    checkpoint_path: &Path,
    dataset: &Path,
    probes: usize,
    probe_seed: u64,
    out_dir: Option<&Path>,
) -> Result<ReportFiles> {
    let (model, header) = checkpoint::load::<f64>(checkpoint_path)?;
    let data = Dataset::load(dataset)?;
    if probes == 0 || probes > data.len() {
        return Err(Error::Contract(format!(
            "probe count {probes} outside 1..={}",
            data.len()
        )));
    }
    let idx = probe_indices(probe_seed, data.len(), probes);
    let images = data.images::<f64>(&idx)?;
    let stats = model_report(&model, &images, true, CHUNK)?;
    let digest = header.meta.config_digest.unwrap_or_else(|| "none".into());
    let summary = ReportSummary::new(&stats, model.config(), digest, probe_seed);

    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => checkpoint_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    fs::create_dir_all(&dir)?;
    let stem = checkpoint_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let tag = &summary.config_digest[..summary.config_digest.len().min(12)];
    let stem = if stem.contains(tag) {
        stem.to_string()
    } else {
        format!("{stem}-{tag}")
    };
    let csv = dir.join(format!("{stem}.report.csv"));
    let json = dir.join(format!("{stem}.report.json"));
    diagnostics::write_csv(&stats, fs::File::create(&csv)?)?;
    fs::write(&json, serde_json::to_vec_pretty(&summary)?)?;
    Ok(ReportFiles { csv, json, summary })
}

pub fn load_report(path: &Path) -> Result<ReportSummary> {
    let text = fs::read(path)?;
    serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: not a report summary: {e}", path.display())))
}

/// Per-layer `b - a` between two JSON report summaries.
pub fn compare(a: &Path, b: &Path) -> Result<Vec<LayerDelta>> {
    diagnostics::compare(&load_report(a)?, &load_report(b)?)
}

pub fn write_deltas(deltas: &[LayerDelta], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["layer", "decoder", "d_avg_dist_patch", "d_avg_dist_px", "d_nmi"])
        .map_err(io)?;
    for d in deltas {
        w.write_record([
            d.layer.to_string(),
            d.decoder.to_string(),
            d.avg_dist_patch.to_string(),
            d.avg_dist_px.to_string(),
            d.nmi.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
