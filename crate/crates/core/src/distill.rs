//! The hybrid distillation objective and training loop.
//!
//! `total = D(F_c, F_s) + alpha * sum_i D(R_m^i, R_s^i)`, where `D` is mean
//! smooth-L1 (beta = 1), `F` are final-layer features of the classification
//! teacher and the student, and `R^i` are per-head scaled relations
//! `Q K^T / sqrt(head_dim)` of the reconstruction teacher and the student at
//! the relation layers. Teachers always see the full token sequence; their
//! outputs are then restricted to the kept tokens. The student only ever sees
//! the kept tokens.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, Dataset, TrainParams};
use crate::error::{Error, Result};
use crate::masking::{
    apply_mask, apply_mask_square, batch_select, masks_from_traces, MaskSchedule, TokenMask,
};
use crate::optim::{descend, AdamW};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::vit::{
    forward, patchify, Bound, DecoderKind, ForwardOptions, LayerTrace, TaskHead, ViTConfig,
    ViTParams,
};

/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub alpha: f64,
    /// 1-based encoder layer whose output is matched to the feature teacher.
    pub feature_layer: usize,
    /// 1-based encoder layers whose relations are matched to the relation
    /// teacher.
    pub relation_layers: Vec<usize>,
    /// `None` disables masking entirely (every token, no row selection).
    pub schedule: Option<MaskSchedule>,
    #[serde(default)]
    pub decoder: DecoderKind,
}

impl DistillConfig {
    /// alpha 1, features at `L`, relations at `L-1` and `L-2`, and a 30% drop
    /// at layers `round(L * {0, 1/3, 2/3})`.
    pub fn for_depth(depth: usize) -> Result<Self> {
        let relation_layers = [depth.saturating_sub(1), depth.saturating_sub(2)]
            .into_iter()
            .filter(|&l| l >= 1)
            .collect();
        Ok(DistillConfig {
            alpha: 1.0,
            feature_layer: depth,
            relation_layers,
            schedule: Some(MaskSchedule::for_depth(depth, 0.3)?),
            decoder: DecoderKind::None,
        })
    }

    /// Feature-only distillation with the same masking.
    pub fn feature_only(&self) -> Self {
        DistillConfig {
            alpha: 0.0,
            relation_layers: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::contract(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        let in_range = |l: usize| (1..=depth).contains(&l);
        if !in_range(self.feature_layer) {
            return Err(Error::contract(format!(
                "feature layer {} outside 1..={depth}",
                self.feature_layer
            )));
        }
        if let Some(&l) = self.relation_layers.iter().find(|&&l| !in_range(l)) {
            return Err(Error::contract(format!(
                "relation layer {l} outside 1..={depth}"
            )));
        }
        if let Some(s) = &self.schedule {
            s.validate(depth)?;
        }
        if let DecoderKind::Attn(0) = self.decoder {
            return Err(Error::contract("attn decoder needs at least one block"));
        }
        Ok(())
    }

    /// Student architecture: the teacher encoder, no task head, plus the
    /// configured decoder.
    pub fn student_config(&self, teacher: &ViTConfig) -> ViTConfig {
        teacher.with_head(TaskHead::None).with_decoder(self.decoder)
    }
}

/// The two frozen teachers.
#[derive(Clone, Debug)]
pub struct TeacherBundle<E: Element = f64> {
    /// Classification teacher; supplies feature targets.
    pub feature: ViTParams<E>,
    /// Reconstruction teacher; supplies relation targets and token masks.
    pub relation: ViTParams<E>,
}

impl<E: Element> TeacherBundle<E> {
    /// Both teachers must be frozen and share one encoder geometry.
    pub fn new(feature: ViTParams<E>, relation: ViTParams<E>) -> Result<Self> {
        if !feature.is_frozen() || !relation.is_frozen() {
            return Err(Error::contract("teachers must be frozen"));
        }
        if !feature.config().same_encoder(relation.config()) {
            return Err(Error::Asymmetric(format!(
                "teachers differ: {:?} vs {:?}",
                feature.config(),
                relation.config()
            )));
        }
        Ok(TeacherBundle { feature, relation })
    }

    pub fn check_student(&self, student: &ViTConfig) -> Result<()> {
        if !self.feature.config().same_encoder(student) {
            return Err(Error::Asymmetric(format!(
                "student {student:?} does not match teacher {:?}",
                self.feature.config()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub feature_term: f64,
    pub relation_terms: Vec<f64>,
    /// Tokens per image the student processed.
    pub tokens_used: usize,
    pub keep_ratio: f64,
}

/// Distillation targets for one batch, already restricted to kept tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<E: Element = f64> {
    /// One per image; `None` when masking is disabled.
    pub masks: Option<Vec<TokenMask>>,
    /// `[B, n, d]`.
    pub features: Tensor<E>,
    /// `[B, H, n, n]`, one per relation layer.
    pub relations: Vec<Tensor<E>>,
}

impl<E: Element> Targets<E> {
    pub fn tokens(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Final-layer (or `layer`-th) features of a full-sequence forward, restricted
/// to kept rows.
pub fn feature_target<E: Element>(
    teacher: &ViTParams<E>,
    patches: &Tensor<E>,
    masks: Option<&[TokenMask]>,
    layer: usize,
) -> Result<Tensor<E>> {
    let out = teacher.infer(patches, &ForwardOptions::traced())?;
    let f = &out
        .layers
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| Error::contract(format!("feature layer {layer} outside teacher")))?
        .output;
    match masks {
        None => Ok(f.clone()),
        Some(m) => apply_mask(f, m),
    }
}

/// Per-head scaled relations at 1-based `layer` of a full-sequence forward,
/// restricted to kept rows and columns.
pub fn relation_target<E: Element>(
    teacher: &ViTParams<E>,
    patches: &Tensor<E>,
    masks: Option<&[TokenMask]>,
    layer: usize,
) -> Result<Tensor<E>> {
    let out = teacher.infer(patches, &ForwardOptions::traced())?;
    let r = &out
        .layers
        .get(layer.wrapping_sub(1))
        .ok_or_else(|| Error::contract(format!("relation layer {layer} outside teacher")))?
        .relation;
    match masks {
        None => Ok(r.clone()),
        Some(m) => apply_mask_square(r, m),
    }
}

/// Masks and targets for `[B, N, P]` patches: one traced pass per teacher.
pub fn compute_targets<E: Element>(
    teachers: &TeacherBundle<E>,
    patches: &Tensor<E>,
    config: &DistillConfig,
) -> Result<Targets<E>> {
    let tc = teachers.feature.config();
    config.validate(tc.depth)?;
    let (n, d) = (tc.tokens(), tc.dim);
    let batch = patches.shape()[0];
    let tm_out = teachers
        .relation
        .infer(patches, &ForwardOptions::traced())?;
    let masks = match &config.schedule {
        None => None,
        Some(s) if s.is_identity() => Some(vec![TokenMask::full(n); batch]),
        Some(s) => Some(masks_from_traces(&tm_out.layers, n, d, s)?),
    };
    let relations = relation_targets(&tm_out.layers, masks.as_deref(), config)?;
    drop(tm_out);
    let features = teacher_features(teachers, patches, masks.as_deref(), config)?;
    Ok(Targets {
        masks,
        features,
        relations,
    })
}

/// Targets under caller-chosen masks (`None` keeps every token unselected).
pub fn targets_with_masks<E: Element>(
    teachers: &TeacherBundle<E>,
    patches: &Tensor<E>,
    masks: Option<Vec<TokenMask>>,
    config: &DistillConfig,
) -> Result<Targets<E>> {
    config.validate(teachers.feature.config().depth)?;
    let tm_out = teachers
        .relation
        .infer(patches, &ForwardOptions::traced())?;
    let relations = relation_targets(&tm_out.layers, masks.as_deref(), config)?;
    let features = teacher_features(teachers, patches, masks.as_deref(), config)?;
    Ok(Targets {
        masks,
        features,
        relations,
    })
}

fn relation_targets<E: Element>(
    layers: &[LayerTrace<E>],
    masks: Option<&[TokenMask]>,
    config: &DistillConfig,
) -> Result<Vec<Tensor<E>>> {
    config
        .relation_layers
        .iter()
        .map(|&l| {
            let r = &layers[l - 1].relation;
            match masks {
                None => Ok(r.clone()),
                Some(m) => apply_mask_square(r, m),
            }
        })
        .collect()
}

fn teacher_features<E: Element>(
    teachers: &TeacherBundle<E>,
    patches: &Tensor<E>,
    masks: Option<&[TokenMask]>,
    config: &DistillConfig,
) -> Result<Tensor<E>> {
    let out = teachers.feature.infer(patches, &ForwardOptions::traced())?;
    let f = &out.layers[config.feature_layer - 1].output;
    match masks {
        None => Ok(f.clone()),
        Some(m) => apply_mask(f, m),
    }
}

/// Tape handles of one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub feature: Var,
    pub relations: Vec<Var>,
}

/// Records the student forward on kept tokens and the loss against
/// `targets`.
pub fn hybrid_loss_vars<E: Element>(
    tape: &mut Tape<E>,
    student: &Bound,
    student_config: &ViTConfig,
    patches: &Tensor<E>,
    targets: &Targets<E>,
    config: &DistillConfig,
) -> Result<LossVars> {
    let keep = match &targets.masks {
        None => None,
        Some(m) => Some(batch_select(m)?),
    };
    let opts = ForwardOptions {
        keep,
        trace: true,
        decoder: config.decoder != DecoderKind::None,
        ..Default::default()
    };
    let out = forward(tape, student, student_config, patches, &opts)?;
    let student_tokens = tape.shape(out.features)[1];
    if student_tokens != targets.tokens() {
        return Err(Error::contract(format!(
            "student processed {student_tokens} tokens, targets cover {}",
            targets.tokens()
        )));
    }
    let feature_var = match out.decoded {
        Some(dec) if config.feature_layer == student_config.depth => dec,
        _ => out.layers[config.feature_layer - 1].output,
    };
    let target = tape.constant(targets.features.clone());
    let feature = tape.smooth_l1(feature_var, target, SMOOTH_L1_BETA)?;

    let mut relations = Vec::with_capacity(config.relation_layers.len());
    for (&layer, target) in config.relation_layers.iter().zip(&targets.relations) {
        let t = tape.constant(target.clone());
        relations.push(tape.smooth_l1(out.layers[layer - 1].relation, t, SMOOTH_L1_BETA)?);
    }

    // With alpha = 0 the relation terms are reported but never enter the
    // total, so the graph from `total` is exactly the feature-only graph.
    let total = if config.alpha == 0.0 || relations.is_empty() {
        feature
    } else {
        let mut sum = relations[0];
        for &r in &relations[1..] {
            sum = tape.add(sum, r)?;
        }
        let weighted = tape.scale(sum, config.alpha)?;
        tape.add(feature, weighted)?
    };
    Ok(LossVars {
        total,
        feature,
        relations,
    })
}

fn breakdown<E: Element>(
    tape: &Tape<E>,
    vars: &LossVars,
    targets: &Targets<E>,
) -> Result<LossBreakdown> {
    let value = |v: Var| -> Result<f64> { Ok(tape.value(v).item()?.as_f64()) };
    let tokens = targets.tokens();
    let n = targets
        .masks
        .as_ref()
        .and_then(|m| m.first())
        .map_or(tokens, TokenMask::len);
    Ok(LossBreakdown {
        total: value(vars.total)?,
        feature_term: value(vars.feature)?,
        relation_terms: vars
            .relations
            .iter()
            .map(|&v| value(v))
            .collect::<Result<_>>()?,
        tokens_used: tokens,
        keep_ratio: tokens as f64 / n as f64,
    })
}

/// Evaluates the loss without recording gradients.
pub fn hybrid_loss<E: Element>(
    student: &ViTParams<E>,
    teachers: &TeacherBundle<E>,
    patches: &Tensor<E>,
    config: &DistillConfig,
) -> Result<LossBreakdown> {
    teachers.check_student(student.config())?;
    let targets = compute_targets(teachers, patches, config)?;
    loss_against(student, patches, &targets, config)
}

/// Loss of `student` against precomputed targets.
pub fn loss_against<E: Element>(
    student: &ViTParams<E>,
    patches: &Tensor<E>,
    targets: &Targets<E>,
    config: &DistillConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = student.bind(&mut tape, false);
    let vars = hybrid_loss_vars(
        &mut tape,
        &bound,
        student.config(),
        patches,
        targets,
        config,
    )?;
    breakdown(&tape, &vars, targets)
}

/// One optimizer step on the batch-mean loss.
pub fn distill_step<E: Element>(
    student: &mut ViTParams<E>,
    opt: &mut AdamW<E>,
    lr: f64,
    patches: &Tensor<E>,
    targets: &Targets<E>,
    config: &DistillConfig,
) -> Result<LossBreakdown> {
    let student_config = student.config().clone();
    let mut report = None;
    descend(student, opt, lr, |tape, bound| {
        let vars = hybrid_loss_vars(tape, bound, &student_config, patches, targets, config)?;
        report = Some(breakdown(tape, &vars, targets)?);
        Ok(vars.total)
    })?;
    Ok(report.expect("loss recorded"))
}

/// Teacher targets for every image of a dataset, keyed by image index.
///
/// Teachers are frozen and deterministic and images are not augmented, so
/// these are the same targets a per-step recomputation would produce.
#[derive(Clone, Debug)]
pub struct TargetCache<E: Element = f64> {
    masks: Option<Vec<TokenMask>>,
    tokens: usize,
    dim: usize,
    heads: usize,
    features: Vec<E>,
    relations: Vec<Vec<E>>,
}

impl<E: Element> TargetCache<E> {
    pub fn build(
        teachers: &TeacherBundle<E>,
        data: &Dataset,
        config: &DistillConfig,
        chunk: usize,
    ) -> Result<Self> {
        let tc = teachers.feature.config();
        let all: Vec<usize> = (0..data.len()).collect();
        let mut cache: Option<TargetCache<E>> = None;
        for idx in all.chunks(chunk.max(1)) {
            let patches = patchify(&data.images::<E>(idx)?, tc)?;
            let t = compute_targets(teachers, &patches, config)?;
            let c = cache.get_or_insert_with(|| TargetCache {
                masks: t.masks.as_ref().map(|_| Vec::with_capacity(data.len())),
                tokens: t.tokens(),
                dim: tc.dim,
                heads: tc.heads,
                features: Vec::new(),
                relations: vec![Vec::new(); t.relations.len()],
            });
            if t.tokens() != c.tokens {
                return Err(Error::contract("kept token count varies across images"));
            }
            if let (Some(all), Some(m)) = (c.masks.as_mut(), t.masks) {
                all.extend(m);
            }
            c.features.extend_from_slice(t.features.data());
            for (dst, r) in c.relations.iter_mut().zip(&t.relations) {
                dst.extend_from_slice(r.data());
            }
        }
        cache.ok_or_else(|| Error::contract("cannot build targets for an empty dataset"))
    }

    pub fn masks(&self) -> Option<&[TokenMask]> {
        self.masks.as_deref()
    }

    /// Targets for the images `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<Targets<E>> {
        let (n, d, h) = (self.tokens, self.dim, self.heads);
        let gather = |src: &[E], stride: usize| -> Vec<E> {
            indices
                .iter()
                .flat_map(|&i| src[i * stride..(i + 1) * stride].iter().copied())
                .collect()
        };
        Ok(Targets {
            masks: self
                .masks
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i].clone()).collect()),
            features: Tensor::new(vec![indices.len(), n, d], gather(&self.features, n * d))?,
            relations: self
                .relations
                .iter()
                .map(|r| Tensor::new(vec![indices.len(), h, n, n], gather(r, h * n * n)))
                .collect::<Result<_>>()?,
        })
    }
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub feature_term: f64,
    pub relation_terms: Vec<f64>,
    pub keep_ratio: f64,
    /// Kept token indices of the first image in the batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_mask: Option<Vec<usize>>,
}

/// Trains `student` against cached teacher targets for `train.epochs`
/// epochs. `on_step` sees every step's record.
pub fn distill<E: Element>(
    mut student: ViTParams<E>,
    teachers: &TeacherBundle<E>,
    data: &Dataset,
    cache: &TargetCache<E>,
    config: &DistillConfig,
    train: &TrainParams,
    mut on_step: impl FnMut(&StepRecord, &ViTParams<E>) -> Result<()>,
) -> Result<ViTParams<E>> {
    teachers.check_student(student.config())?;
    config.validate(student.config().depth)?;
    if train.batch_size == 0 {
        return Err(Error::contract("batch_size must be positive"));
    }
    let mut opt = AdamW::for_params(train.optim.clone(), &student)?;
    let n = data.len();
    let per_epoch = n.div_ceil(train.batch_size);
    let total = train.epochs * per_epoch;
    let mut step = 0;
    for epoch in 0..train.epochs {
        for batch in epoch_order(train.seed, epoch, n).chunks(train.batch_size) {
            let patches = patchify(&data.images::<E>(batch)?, student.config())?;
            let targets = cache.batch(batch)?;
            let lr = train.optim.lr_at(step, total)?;
            let loss = distill_step(&mut student, &mut opt, lr, &patches, &targets, config)?;
            let record = StepRecord {
                step,
                epoch,
                lr,
                total: loss.total,
                feature_term: loss.feature_term,
                relation_terms: loss.relation_terms,
                keep_ratio: loss.keep_ratio,
                sample_mask: targets.masks.as_ref().map(|m| m[0].kept_indices()),
            };
            on_step(&record, &student)?;
            step += 1;
        }
    }
    Ok(student)
}

#[cfg(test)]
mod tests;
