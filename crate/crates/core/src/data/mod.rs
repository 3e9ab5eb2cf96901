//! Synthetic datasets, their binary file format, and teacher pretraining.
//!
//! File layout: one JSON header line, a newline, `n * c * h * w` image bytes
//! (image-major, then channel, row, column), then `n` little-endian `u16`
//! labels.

mod pretrain;
pub mod synth;

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub use pretrain::{
    accuracy, normalized_patch_targets, pretrain_mim_teacher, pretrain_supervised_teacher,
    recon_loss, ReconTarget, ReconTask, TrainLog, TrainParams,
};

pub const DATASET_VERSION: u32 = 1;

/// Stream offset separating evaluation images from training images drawn
/// with the same seed.
const EVAL_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub seed: u64,
    pub train_images: usize,
    pub eval_images: usize,
    pub image_size: usize,
    pub channels: usize,
    pub class_count: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            seed: 0,
            train_images: 4000,
            eval_images: 512,
            image_size: 32,
            channels: 1,
            class_count: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub class_count: usize,
    pub seed: u64,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub images: Vec<u8>,
    pub labels: Vec<u16>,
}

/// Draws `n` images. Image `i` uses its own ChaCha8 stream (stream id `i`,
/// offset for the evaluation split), so any prefix is reproducible alone.
/// Labels cycle through the classes, giving a balanced histogram.
pub fn generate(spec: &DataSpec, split: Split) -> Result<Dataset> {
    let n = match split {
        Split::Train => spec.train_images,
        Split::Eval => spec.eval_images,
    };
    if spec.class_count == 0 || spec.class_count > synth::MOTIFS || n < spec.class_count {
        return Err(Error::contract(format!(
            "need 1..={} classes and at least one image per class (n={n}, classes={})",
            synth::MOTIFS,
            spec.class_count
        )));
    }
    if spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::contract("image_size and channels must be positive"));
    }
    let offset = match split {
        Split::Train => 0,
        Split::Eval => EVAL_STREAM,
    };
    let mut images = Vec::with_capacity(n * spec.channels * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.class_count;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(offset + i as u64);
        synth::render(&mut rng, class, spec.channels, spec.image_size, &mut images);
        labels.push(class as u16);
    }
    Ok(Dataset {
        header: DatasetHeader {
            format_version: DATASET_VERSION,
            n,
            c: spec.channels,
            h: spec.image_size,
            w: spec.image_size,
            class_count: spec.class_count,
            seed: spec.seed,
            split,
            config_digest: None,
        },
        images,
        labels,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.header.n
    }

    pub fn is_empty(&self) -> bool {
        self.header.n == 0
    }

    fn image_len(&self) -> usize {
        self.header.c * self.header.h * self.header.w
    }

    /// `[B, C, H, W]` pixels mapped from `0..=255` to `[-1, 1]`.
    pub fn images<E: Element>(&self, indices: &[usize]) -> Result<Tensor<E>> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.header.n {
                return Err(Error::Index {
                    op: "Dataset::images",
                    index: i,
                    extent: self.header.n,
                });
            }
            data.extend(
                self.images[i * len..(i + 1) * len]
                    .iter()
                    .map(|&p| E::of(p as f64 / 127.5 - 1.0)),
            );
        }
        Tensor::new(
            vec![indices.len(), self.header.c, self.header.h, self.header.w],
            data,
        )
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.header.class_count];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.extend_from_slice(&self.images);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_reader(reader: impl Read) -> Result<Self> {
        let mut reader = BufReader::new(reader);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Format(
                "dataset header not newline-terminated".into(),
            ));
        }
        let value: serde_json::Value = serde_json::from_slice(&line)?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("dataset header lacks format_version".into()))?;
        if version != DATASET_VERSION as u64 {
            return Err(Error::FormatVersion {
                found: version as u32,
                expected: DATASET_VERSION,
            });
        }
        let header: DatasetHeader = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
        let mut rest = Vec::new();
        reader.read_to_end(&mut rest)?;
        let pixels = header.n * header.c * header.h * header.w;
        if rest.len() != pixels + 2 * header.n {
            return Err(Error::Format(format!(
                "dataset body has {} bytes, header implies {}",
                rest.len(),
                pixels + 2 * header.n
            )));
        }
        let labels: Vec<u16> = rest[pixels..]
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= header.class_count) {
            return Err(Error::Format(format!(
                "label {bad} outside {} classes",
                header.class_count
            )));
        }
        rest.truncate(pixels);
        Ok(Dataset {
            header,
            images: rest,
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(fs::File::open(path)?)
    }
}

/// Shuffled index order for one epoch, reproducible from `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Fixed probe subset of a dataset: the first `count` indices of a shuffle
/// seeded by `seed`.
pub fn probe_indices(seed: u64, n: usize, count: usize) -> Vec<usize> {
    let mut order = epoch_order(seed, usize::MAX >> 1, n);
    order.truncate(count.min(n));
    order
}

#[cfg(test)]
mod tests;
