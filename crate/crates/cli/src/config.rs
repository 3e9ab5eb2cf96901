//! The run configuration: one JSON document that drives every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use hdistill_core::data::{DataSpec, ReconTarget, ReconTask, TrainParams};
use hdistill_core::distill::DistillConfig;
use hdistill_core::masking::MaskSchedule;
use hdistill_core::optim::OptimConfig;
use hdistill_core::vit::{DecoderKind, TaskHead, ViTConfig};
use hdistill_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Overrides `output_dir` when set.
pub const OUT_ENV: &str = "HDISTILL_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Exact mode used for verification.
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSettings {
    pub supervised: TrainParams,
    pub mim: TrainParams,
    pub recon: ReconTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Evaluation images used by `analyze` when `--probes` is not given.
    pub probes: usize,
    pub probe_seed: u64,
    /// Probe images for the per-epoch snapshots in the metrics log; 0 turns
    /// snapshots off.
    #[serde(default)]
    pub snapshot_probes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSpec,
    /// The shared encoder. Heads and decoders are set per role.
    pub model: ViTConfig,
    #[serde(default)]
    pub precision: Precision,
    pub teachers: TeacherSettings,
    pub distill: DistillConfig,
    /// Student optimization; `seed` drives both initialization and batch order.
    pub student: TrainParams,
    pub analysis: AnalysisSettings,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// The desk-scale experiment: 32x32 images, 64 tokens, 6 layers of width
    /// 96 with 4 heads.
    pub fn desk_scale() -> Self {
        let model = ViTConfig {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            depth: 6,
            heads: 4,
            dim: 96,
            mlp_ratio: 2,
            decoder: DecoderKind::None,
            task_head: TaskHead::None,
        };
        let depth = model.depth;
        RunConfig {
            data: DataSpec::default(),
            precision: Precision::F32,
            teachers: TeacherSettings {
                supervised: TrainParams {
                    epochs: 6,
                    batch_size: 32,
                    seed: 1,
                    optim: OptimConfig {
                        lr: 3e-3,
                        ..Default::default()
                    },
                },
                mim: TrainParams {
                    epochs: 6,
                    batch_size: 16,
                    seed: 2,
                    optim: OptimConfig {
                        lr: 3e-3,
                        ..Default::default()
                    },
                },
                recon: ReconTask {
                    mask_ratio: 0.5,
                    target: ReconTarget::Raw,
                    mask_block: 2,
                },
            },
            distill: DistillConfig::for_depth(depth).expect("depth 6 is valid"),
            student: TrainParams {
                epochs: 30,
                batch_size: 64,
                seed: 3,
                optim: OptimConfig::default(),
            },
            analysis: AnalysisSettings {
                probes: 256,
                probe_seed: 7,
                snapshot_probes: 0,
            },
            model,
            output_dir: PathBuf::from("runs/desk"),
        }
    }

    /// Parses JSON, naming the offending key path on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: path.into(),
                message,
            })
        };
        if let Err(e) = self.model.validate() {
            return bad("model", e.to_string());
        }
        if self.model.image_size != self.data.image_size || self.model.channels != self.data.channels {
            return bad(
                "model",
                "image_size and channels must match the data section".into(),
            );
        }
        if let Err(e) = self.distill.validate(self.model.depth) {
            return bad("distill", e.to_string());
        }
        if let Err(e) = self.student.optim.validate() {
            return bad("student.optim", e.to_string());
        }
        for (path, t) in [
            ("teachers.supervised", &self.teachers.supervised),
            ("teachers.mim", &self.teachers.mim),
            ("student", &self.student),
        ] {
            if t.batch_size == 0 {
                return bad(&format!("{path}.batch_size"), "must be positive".into());
            }
        }
        Ok(())
    }

    /// SHA-256 over the compact JSON form, as lowercase hex.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// First 12 hex digits of the digest, used in file names.
    pub fn short_digest(&self) -> String {
        self.digest()[..12].to_string()
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn teacher_config(&self, objective: Objective) -> ViTConfig {
        let head = match objective {
            Objective::Supervised => TaskHead::Classify(self.data.class_count),
            Objective::Mim => TaskHead::Reconstruct,
        };
        self.model.with_decoder(DecoderKind::None).with_head(head)
    }

    /// The same run with relation terms switched off.
    pub fn feature_only(&self) -> Self {
        RunConfig {
            distill: self.distill.feature_only(),
            ..self.clone()
        }
    }

    /// The drop schedule, or an identity schedule when masking is off.
    pub fn schedule(&self) -> MaskSchedule {
        self.distill.schedule.clone().unwrap_or_else(MaskSchedule::none)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Supervised,
    Mim,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Supervised => "supervised",
            Objective::Mim => "mim",
        }
    }
}
