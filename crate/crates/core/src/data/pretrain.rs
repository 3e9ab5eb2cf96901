//! Proxy teachers: a classifier and a masked-patch reconstructor.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::optim::{descend, AdamW, OptimConfig};
use crate::tensor::{Element, RowSelect, Tensor};
use crate::vit::{forward, patchify, ForwardOptions, TaskHead, ViTConfig, ViTParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl TrainParams {
    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// What the reconstruction head predicts for each patch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Pixels in `[-1, 1]`.
    Raw,
    /// Each patch shifted to zero mean and scaled to unit variance.
    #[default]
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconTask {
    /// Fraction of patches replaced by the mask embedding each step. Zero
    /// turns the task into plain autoencoding of every patch.
    pub mask_ratio: f64,
    #[serde(default)]
    pub target: ReconTarget,
    /// Side of the square patch blocks that are masked together.
    #[serde(default = "default_block")]
    pub mask_block: usize,
}

fn default_block() -> usize {
    1
}

impl Default for ReconTask {
    fn default() -> Self {
        ReconTask {
            mask_ratio: 0.5,
            target: ReconTarget::Normalized,
            mask_block: 1,
        }
    }
}

impl ReconTarget {
    pub fn of<E: Element>(self, patches: &Tensor<E>) -> Tensor<E> {
        match self {
            ReconTarget::Raw => patches.clone(),
            ReconTarget::Normalized => normalized_patch_targets(patches),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training accuracy per epoch (classification only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_accuracy: Vec<f64>,
}

fn check_inputs(config: &ViTConfig, data: &Dataset, train: &TrainParams) -> Result<()> {
    config.validate()?;
    train.optim.validate()?;
    if train.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let h = &data.header;
    if (h.c, h.h, h.w) != (config.channels, config.image_size, config.image_size) {
        return Err(Error::shape(
            "teacher data",
            &[h.c, h.h, h.w],
            &[config.channels, config.image_size, config.image_size],
        ));
    }
    Ok(())
}

/// Cross-entropy on mean-pooled features. Returns frozen parameters.
pub fn pretrain_supervised_teacher<E: Element>(
    config: &ViTConfig,
    data: &Dataset,
    train: &TrainParams,
) -> Result<(ViTParams<E>, TrainLog)> {
    check_inputs(config, data, train)?;
    if config.task_head != TaskHead::Classify(data.header.class_count) {
        return Err(Error::contract(format!(
            "supervised teacher needs task_head classify({})",
            data.header.class_count
        )));
    }
    let mut params = ViTParams::<E>::init(config, train.seed)?;
    let mut opt = AdamW::for_params(train.optim.clone(), &params)?;
    let n = data.len();
    let total = train.epochs * train.steps_per_epoch(n);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..train.epochs {
        let order = epoch_order(train.seed, epoch, n);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(train.batch_size) {
            let patches = patchify(&data.images::<E>(batch)?, config)?;
            let labels = data.labels(batch);
            let lr = train.optim.lr_at(step, total)?;
            let loss = descend(&mut params, &mut opt, lr, |tape, bound| {
                let out = forward(tape, bound, config, &patches, &ForwardOptions::default())?;
                let logits = out.head.expect("classify head present");
                correct += count_correct(tape.value(logits), &labels);
                tape.cross_entropy(logits, &labels)
            })?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        log.epoch_loss.push(loss_sum / n as f64);
        log.epoch_accuracy.push(correct as f64 / n as f64);
        log::info!(
            "supervised teacher epoch {}: loss {:.4} acc {:.3}",
            epoch + 1,
            loss_sum / n as f64,
            correct as f64 / n as f64
        );
    }
    Ok((params.freeze(), log))
}

fn count_correct<E: Element>(logits: &Tensor<E>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = (0..classes)
                .max_by(|&a, &b| {
                    row[a]
                        .partial_cmp(&row[b])
                        .expect("finite logits")
                        .then(b.cmp(&a))
                })
                .expect("at least one class");
            best == l
        })
        .count()
}

/// Classification accuracy of a classifier over `indices`.
pub fn accuracy<E: Element>(
    model: &ViTParams<E>,
    data: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    let mut correct = 0;
    for batch in indices.chunks(128) {
        let out = model.infer(
            &patchify(&data.images::<E>(batch)?, model.config())?,
            &ForwardOptions::default(),
        )?;
        let logits = out
            .head
            .ok_or_else(|| Error::contract("model has no classification head"))?;
        correct += count_correct(&logits, &data.labels(batch));
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Each patch row shifted to zero mean and scaled to unit variance.
pub fn normalized_patch_targets<E: Element>(patches: &Tensor<E>) -> Tensor<E> {
    let p = *patches.shape().last().expect("patch rows");
    let mut data = patches.data().to_vec();
    for row in data.chunks_exact_mut(p) {
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / p as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / p as f64;
        let scale = 1.0 / (var + 1e-6).sqrt();
        row.iter_mut()
            .for_each(|v| *v = E::of((v.as_f64() - mean) * scale));
    }
    Tensor::new(patches.shape().to_vec(), data).expect("same shape")
}

/// Masked patch indices for one step. The patch grid is tiled by
/// `block x block` cells; `round(ratio * cells)` distinct cells per image are
/// masked (at most all but one), and every patch of a masked cell is masked.
/// Indices come back ascending; empty sets mean "no masking".
fn draw_masks(rng: &mut ChaCha8Rng, batch: usize, grid: usize, block: usize, ratio: f64) -> Vec<Vec<usize>> {
    let side = grid.div_ceil(block);
    let cells = side * side;
    let count = ((ratio * cells as f64).round() as usize).min(cells - 1);
    (0..batch)
        .map(|_| {
            if count == 0 {
                return Vec::new();
            }
            let mut idx: Vec<usize> = sample(rng, cells, count)
                .into_iter()
                .flat_map(|c| {
                    let (r0, c0) = ((c / side) * block, (c % side) * block);
                    (r0..(r0 + block).min(grid))
                        .flat_map(move |r| (c0..(c0 + block).min(grid)).map(move |col| r * grid + col))
                })
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Reconstruction loss of one batch: MSE between predicted and target
/// pixels over masked patches (every patch when no patch is masked).
pub fn recon_loss<E: Element>(
    tape: &mut crate::tensor::Tape<E>,
    bound: &crate::vit::Bound,
    config: &ViTConfig,
    patches: &Tensor<E>,
    masked: &[Vec<usize>],
    target: ReconTarget,
) -> Result<crate::tensor::Var> {
    let (b, n) = (patches.shape()[0], patches.shape()[1]);
    let targets = target.of(patches);
    let autoencode = masked.iter().all(|m| m.is_empty());
    let opts = if autoencode {
        ForwardOptions::default()
    } else {
        let mut weights = vec![E::zero(); b * n];
        for (i, set) in masked.iter().enumerate() {
            set.iter().for_each(|&t| weights[i * n + t] = E::one());
        }
        ForwardOptions {
            mask_weights: Some(weights),
            ..Default::default()
        }
    };
    let out = forward(tape, bound, config, patches, &opts)?;
    let pred = out
        .head
        .ok_or_else(|| Error::contract("mim teacher needs a reconstruct head"))?;
    let target = tape.constant(targets);
    if autoencode {
        return tape.mse(pred, target);
    }
    let select = RowSelect::PerBatch(masked.to_vec());
    let pred = tape.gather_rows(pred, select.clone())?;
    let target = tape.gather_rows(target, select)?;
    tape.mse(pred, target)
}

/// SimMIM-style pretraining: masked patches enter as a learned embedding and
/// a linear head predicts their pixels. Returns frozen parameters.
pub fn pretrain_mim_teacher<E: Element>(
    config: &ViTConfig,
    data: &Dataset,
    recon: &ReconTask,
    train: &TrainParams,
) -> Result<(ViTParams<E>, TrainLog)> {
    check_inputs(config, data, train)?;
    if config.task_head != TaskHead::Reconstruct {
        return Err(Error::contract("mim teacher needs task_head reconstruct"));
    }
    if recon.mask_block == 0 {
        return Err(Error::contract("mask_block must be positive"));
    }
    if !(0.0..1.0).contains(&recon.mask_ratio) {
        return Err(Error::contract(format!(
            "mask ratio {} outside [0, 1)",
            recon.mask_ratio
        )));
    }
    let mut params = ViTParams::<E>::init(config, train.seed)?;
    let mut opt = AdamW::for_params(train.optim.clone(), &params)?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(train.seed);
    mask_rng.set_stream(1);
    let n = data.len();
    let total = train.epochs * train.steps_per_epoch(n);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..train.epochs {
        let order = epoch_order(train.seed, epoch, n);
        let mut loss_sum = 0.0;
        for batch in order.chunks(train.batch_size) {
            let patches = patchify(&data.images::<E>(batch)?, config)?;
            let masked = draw_masks(
                &mut mask_rng,
                batch.len(),
                config.grid(),
                recon.mask_block,
                recon.mask_ratio,
            );
            let lr = train.optim.lr_at(step, total)?;
            let loss = descend(&mut params, &mut opt, lr, |tape, bound| {
                recon_loss(tape, bound, config, &patches, &masked, recon.target)
            })?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        log.epoch_loss.push(loss_sum / n as f64);
        log::info!(
            "mim teacher epoch {}: loss {:.4}",
            epoch + 1,
            loss_sum / n as f64
        );
    }
    Ok((params.freeze(), log))
}
