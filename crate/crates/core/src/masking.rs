//! Progressive redundant-token masking.
//!
//! At each scheduled layer of the mask teacher, the currently kept tokens
//! most similar (cosine) to their own mean are dropped. Drops only ever
//! remove tokens, so every stage's keep set is a subset of the previous one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, RowSelect, Tensor};
use crate::vit::{patchify, ForwardOptions, ViTParams};

/// Guards `floor(K * n)` against products like `0.3 * 180` landing a hair
/// below an integer.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSchedule {
    /// 0-based layer indices whose *input* tokens are scored. Layer 0 scores
    /// the embedded tokens.
    pub update_layers: Vec<usize>,
    /// Fraction `K` of the currently kept tokens dropped per update.
    pub drop_fraction: f64,
}

impl MaskSchedule {
    pub fn new(mut update_layers: Vec<usize>, drop_fraction: f64) -> Result<Self> {
        update_layers.sort_unstable();
        update_layers.dedup();
        let s = MaskSchedule {
            update_layers,
            drop_fraction,
        };
        s.check_fraction()?;
        Ok(s)
    }

    /// Keeps every token.
    pub fn none() -> Self {
        MaskSchedule {
            update_layers: Vec::new(),
            drop_fraction: 0.0,
        }
    }

    /// `round(L * {0, 1/3, 2/3})`, deduplicated.
    pub fn default_layers(depth: usize) -> Vec<usize> {
        let mut layers: Vec<usize> = [0.0, 1.0 / 3.0, 2.0 / 3.0]
            .iter()
            .map(|f| (depth as f64 * f).round() as usize)
            .filter(|&l| l < depth.max(1))
            .collect();
        layers.dedup();
        layers
    }

    pub fn for_depth(depth: usize, drop_fraction: f64) -> Result<Self> {
        Self::new(Self::default_layers(depth), drop_fraction)
    }

    fn check_fraction(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(Error::contract(format!(
                "drop fraction must lie in [0, 1), got {}",
                self.drop_fraction
            )));
        }
        Ok(())
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        self.check_fraction()?;
        if let Some(&l) = self.update_layers.iter().find(|&&l| l >= depth) {
            return Err(Error::contract(format!(
                "mask update layer {l} outside teacher depth {depth}"
            )));
        }
        if self.update_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract(
                "mask update layers must be strictly ascending",
            ));
        }
        Ok(())
    }

    /// True when no token can ever be dropped.
    pub fn is_identity(&self) -> bool {
        self.drop_fraction == 0.0 || self.update_layers.is_empty()
    }

    /// Kept count after each update, starting from `n` tokens.
    pub fn kept_counts(&self, n: usize) -> Vec<usize> {
        let mut kept = n;
        self.update_layers
            .iter()
            .map(|_| {
                kept -= drop_count(kept, self.drop_fraction).min(kept.saturating_sub(1));
                kept
            })
            .collect()
    }
}

/// Tokens dropped from `n` kept tokens: `floor(K * n)`.
pub fn drop_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + FLOOR_SLACK).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub layer: usize,
    /// Original token indices removed at this stage, ascending.
    pub dropped: Vec<usize>,
    /// Set when the requested drop would have emptied the mask and was cut
    /// back to leave one token.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

/// Keep/drop flags over `N` tokens plus the stages that produced them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    keep: Vec<bool>,
    history: Vec<StageRecord>,
}

impl TokenMask {
    pub fn full(n: usize) -> Self {
        TokenMask {
            keep: vec![true; n],
            history: Vec::new(),
        }
    }

    /// Replays drop records onto a full mask.
    pub fn from_history(n: usize, history: Vec<StageRecord>) -> Result<Self> {
        let mut keep = vec![true; n];
        for stage in &history {
            for &i in &stage.dropped {
                match keep.get_mut(i) {
                    None => {
                        return Err(Error::Index {
                            op: "TokenMask::from_history",
                            index: i,
                            extent: n,
                        })
                    }
                    Some(false) => return Err(Error::contract(format!("token {i} dropped twice"))),
                    Some(k) => *k = false,
                }
            }
        }
        if n > 0 && !keep.contains(&true) {
            return Err(Error::contract("mask keeps zero tokens"));
        }
        Ok(TokenMask { keep, history })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn history(&self) -> &[StageRecord] {
        &self.history
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn keep_ratio(&self) -> f64 {
        self.kept_count() as f64 / self.keep.len() as f64
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    /// Removes `dropped` (original indices) as one stage.
    fn drop_stage(&mut self, layer: usize, mut dropped: Vec<usize>, clamped: bool) {
        dropped.sort_unstable();
        for &i in &dropped {
            debug_assert!(self.keep[i]);
            self.keep[i] = false;
        }
        self.history.push(StageRecord {
            layer,
            dropped,
            clamped,
        });
    }
}

/// Row selection for a batch of masks. All masks must keep the same count.
pub fn batch_select(masks: &[TokenMask]) -> Result<RowSelect> {
    let sets: Vec<Vec<usize>> = masks.iter().map(TokenMask::kept_indices).collect();
    if sets.windows(2).any(|w| w[0].len() != w[1].len()) {
        return Err(Error::contract(
            "masks in a batch keep different token counts",
        ));
    }
    Ok(RowSelect::PerBatch(sets))
}

/// Kept rows of `[N, d]` (or `[B, N, d]` with one mask per image).
pub fn apply_mask<E: Element>(x: &Tensor<E>, masks: &[TokenMask]) -> Result<Tensor<E>> {
    check_len(x.shape(), x.ndim().saturating_sub(2), masks)?;
    x.select_rows(&select_for(x.shape(), masks)?)
}

/// Kept rows and columns of `[.., N, N]` relation tensors.
pub fn apply_mask_square<E: Element>(x: &Tensor<E>, masks: &[TokenMask]) -> Result<Tensor<E>> {
    let nd = x.ndim();
    if nd < 2 || x.shape()[nd - 1] != x.shape()[nd - 2] {
        return Err(Error::contract(format!(
            "square selection needs [.., N, N], got {:?}",
            x.shape()
        )));
    }
    check_len(x.shape(), nd - 2, masks)?;
    x.select_square(&select_for(x.shape(), masks)?)
}

fn check_len(shape: &[usize], axis: usize, masks: &[TokenMask]) -> Result<()> {
    let n = shape.get(axis).copied().unwrap_or(0);
    if let Some(m) = masks.iter().find(|m| m.len() != n) {
        return Err(Error::shape("apply_mask", &[m.len()], &[n]));
    }
    Ok(())
}

fn select_for(shape: &[usize], masks: &[TokenMask]) -> Result<RowSelect> {
    match masks {
        [m] if shape.len() == 2 => Ok(RowSelect::Shared(m.kept_indices())),
        _ => batch_select(masks),
    }
}

/// Cosine similarity of each row to the row mean. Falls back to the plain
/// dot product when the mean is the zero vector.
pub fn mean_similarity(rows: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut mean = vec![0.0; d];
    for row in rows.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    rows.chunks_exact(d)
        .map(|row| {
            let dot: f64 = row.iter().zip(&mean).map(|(a, b)| a * b).sum();
            if mean_norm == 0.0 {
                return dot;
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                0.0
            } else {
                dot / (norm * mean_norm)
            }
        })
        .collect()
}

/// Positions (within `rows`, `[n, d]` row-major) of the `floor(K * n)` rows
/// most similar to the mean row. Ties go to the lower index. Result is
/// ascending.
pub fn redundant_select(rows: &[f64], n: usize, d: usize, fraction: f64) -> Result<Vec<usize>> {
    if n == 0 || rows.len() != n * d {
        return Err(Error::shape("redundant_select", &[rows.len()], &[n, d]));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::contract(format!(
            "drop fraction {fraction} outside [0, 1)"
        )));
    }
    let count = drop_count(n, fraction);
    if count == 0 {
        return Ok(Vec::new());
    }
    let sim = mean_similarity(rows, n, d);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sim[b].total_cmp(&sim[a]).then(a.cmp(&b)));
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Builds one image's mask from the teacher's per-layer input tokens
/// (`layer_inputs[i]` is `[N, d]` for layer `i`).
pub fn mask_from_layer_inputs<E: Element>(
    layer_inputs: &[&[E]],
    n: usize,
    d: usize,
    schedule: &MaskSchedule,
) -> Result<TokenMask> {
    schedule.validate(layer_inputs.len())?;
    let mut mask = TokenMask::full(n);
    if schedule.drop_fraction == 0.0 {
        return Ok(mask);
    }
    for &layer in &schedule.update_layers {
        let x = layer_inputs[layer];
        if x.len() != n * d {
            return Err(Error::shape("mask_from_layer_inputs", &[x.len()], &[n, d]));
        }
        let kept = mask.kept_indices();
        let rows: Vec<f64> = kept
            .iter()
            .flat_map(|&t| x[t * d..(t + 1) * d].iter().map(|v| v.as_f64()))
            .collect();
        let mut local = redundant_select(&rows, kept.len(), d, schedule.drop_fraction)?;
        let clamped = local.len() >= kept.len();
        if clamped {
            log::warn!("mask stage at layer {layer} would drop every token; keeping one");
            local.truncate(kept.len() - 1);
        }
        mask.drop_stage(layer, local.iter().map(|&i| kept[i]).collect(), clamped);
    }
    Ok(mask)
}

/// Runs the frozen teacher on `[B, C, H, W]` images and returns one mask per
/// image.
pub fn progressive_mask<E: Element>(
    teacher: &ViTParams<E>,
    images: &Tensor<E>,
    schedule: &MaskSchedule,
) -> Result<Vec<TokenMask>> {
    let config = teacher.config();
    schedule.validate(config.depth)?;
    let patches = patchify(images, config)?;
    let batch = patches.shape()[0];
    let n = config.tokens();
    if schedule.is_identity() {
        return Ok(vec![TokenMask::full(n); batch]);
    }
    let out = teacher.infer(&patches, &ForwardOptions::traced())?;
    masks_from_traces(&out.layers, n, config.dim, schedule)
}

/// Per-image masks from a traced full-sequence forward over a batch.
pub fn masks_from_traces<E: Element>(
    layers: &[crate::vit::LayerTrace<E>],
    n: usize,
    d: usize,
    schedule: &MaskSchedule,
) -> Result<Vec<TokenMask>> {
    let batch = layers.first().map_or(0, |l| l.input.shape()[0]);
    (0..batch)
        .map(|b| {
            let inputs: Vec<&[E]> = layers
                .iter()
                .map(|l| &l.input.data()[b * n * d..(b + 1) * n * d])
                .collect();
            mask_from_layer_inputs(&inputs, n, d, schedule)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_fraction_selects_nothing() {
        assert!(redundant_select(&random_rows(5, 3, 1), 5, 3, 0.0)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn token_equal_to_mean_is_dropped_first() {
        // Rows 0, 1, 3 are spread out; row 2 equals the mean of all four.
        let rows = vec![
            3.0, 0.0, //
            0.0, 3.0, //
            1.0, 1.0, //
            0.0, 0.0,
        ];
        assert_eq!(redundant_select(&rows, 4, 2, 0.25).unwrap(), vec![2]);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let rows = vec![1.0; 4 * 2];
        assert_eq!(redundant_select(&rows, 4, 2, 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_mean_uses_dot_product() {
        let rows = vec![1.0, 0.0, -1.0, 0.0, 2.0, 0.0, -2.0, 0.0];
        // Mean is zero, so every dot product is zero and ties pick row 0.
        assert_eq!(redundant_select(&rows, 4, 2, 0.25).unwrap(), vec![0]);
    }

    #[test]
    fn selection_matches_sort_oracle() {
        let (n, d) = (16, 8);
        let rows = random_rows(n, d, 2);
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| rows[i * d + j]).sum::<f64>() / n as f64)
            .collect();
        let cos = |i: usize| {
            let r = &rows[i * d..(i + 1) * d];
            let dot: f64 = r.iter().zip(&mean).map(|(a, b)| a * b).sum();
            dot / (r.iter().map(|v| v * v).sum::<f64>().sqrt()
                * mean.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        let mut scored: Vec<(f64, usize)> = (0..n).map(|i| (cos(i), i)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut expect: Vec<usize> = scored[..4].iter().map(|s| s.1).collect();
        expect.sort();
        assert_eq!(redundant_select(&rows, n, d, 0.3).unwrap(), expect);
    }

    #[test]
    fn kept_counts_follow_floor_law() {
        let s = MaskSchedule::new(vec![0, 2, 4], 0.3).unwrap();
        assert_eq!(s.kept_counts(256), vec![180, 126, 89]);
        assert_eq!(s.kept_counts(16), vec![12, 9, 7]);
        assert_eq!(s.kept_counts(64), vec![45, 32, 23]);
    }

    #[test]
    fn default_layers_round_thirds() {
        assert_eq!(MaskSchedule::default_layers(6), vec![0, 2, 4]);
        assert_eq!(MaskSchedule::default_layers(12), vec![0, 4, 8]);
        assert_eq!(MaskSchedule::default_layers(2), vec![0, 1]);
        assert_eq!(MaskSchedule::default_layers(1), vec![0]);
    }

    #[test]
    fn schedule_validation() {
        assert!(MaskSchedule::new(vec![0], 1.0).is_err());
        assert!(MaskSchedule::new(vec![0], -0.1).is_err());
        assert!(MaskSchedule::new(vec![5], 0.3)
            .unwrap()
            .validate(4)
            .is_err());
    }

    #[test]
    fn zero_fraction_gives_full_mask() {
        let layer: Vec<f64> = random_rows(16, 4, 3);
        let s = MaskSchedule::new(vec![0], 0.0).unwrap();
        let m = mask_from_layer_inputs(&[&layer[..]], 16, 4, &s).unwrap();
        assert!(m.is_full());
        assert_eq!(m.keep_ratio(), 1.0);
    }

    #[test]
    fn layers_outside_schedule_leave_mask_unchanged() {
        let inputs: Vec<Vec<f64>> = (0..4).map(|s| random_rows(16, 4, 10 + s)).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(|v| &v[..]).collect();
        let m = mask_from_layer_inputs(&refs, 16, 4, &MaskSchedule::new(vec![1], 0.3).unwrap())
            .unwrap();
        assert_eq!(m.history().len(), 1);
        assert_eq!(m.history()[0].layer, 1);
        // Only layer 1's features matter.
        let mut other = inputs.clone();
        other[0] = random_rows(16, 4, 99);
        other[3] = random_rows(16, 4, 98);
        let refs: Vec<&[f64]> = other.iter().map(|v| &v[..]).collect();
        let m2 = mask_from_layer_inputs(&refs, 16, 4, &MaskSchedule::new(vec![1], 0.3).unwrap())
            .unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn drop_everything_is_clamped() {
        let layer = random_rows(1, 3, 4);
        let s = MaskSchedule::new(vec![0], 0.9999999999).unwrap();
        let m = mask_from_layer_inputs(&[&layer[..]], 1, 3, &s).unwrap();
        assert_eq!(m.kept_count(), 1);
        assert!(m.history()[0].clamped);
    }

    #[test]
    fn apply_mask_square_selects_submatrix() {
        let r = Tensor::new(vec![3, 3], (0..9).map(f64::from).collect()).unwrap();
        let m = TokenMask::from_history(
            3,
            vec![StageRecord {
                layer: 0,
                dropped: vec![1],
                clamped: false,
            }],
        )
        .unwrap();
        let sub = apply_mask_square(&r, std::slice::from_ref(&m)).unwrap();
        assert_eq!(sub.data(), &[0.0, 2.0, 6.0, 8.0]);
        let full = apply_mask(&r, &[TokenMask::full(3)]).unwrap();
        assert_eq!(full, r);
        assert!(apply_mask(&r, &[TokenMask::full(4)]).is_err());
    }

    #[test]
    fn history_reconstructs_mask() {
        let inputs: Vec<Vec<f64>> = (0..3).map(|s| random_rows(32, 6, 20 + s)).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(|v| &v[..]).collect();
        let s = MaskSchedule::new(vec![0, 1, 2], 0.25).unwrap();
        let m = mask_from_layer_inputs(&refs, 32, 6, &s).unwrap();
        let rebuilt = TokenMask::from_history(32, m.history().to_vec()).unwrap();
        assert_eq!(rebuilt, m);
        let x = Tensor::new(vec![32, 6], inputs[0].clone()).unwrap();
        let kept = apply_mask(&x, std::slice::from_ref(&m)).unwrap();
        for (row, &i) in m.kept_indices().iter().enumerate() {
            assert_eq!(
                &kept.data()[row * 6..(row + 1) * 6],
                &inputs[0][i * 6..(i + 1) * 6]
            );
        }
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<TokenMask>(&json).unwrap(), m);
    }

    #[test]
    fn bad_history_is_rejected() {
        let rec = |dropped: Vec<usize>| StageRecord {
            layer: 0,
            dropped,
            clamped: false,
        };
        assert!(TokenMask::from_history(3, vec![rec(vec![3])]).is_err());
        assert!(TokenMask::from_history(3, vec![rec(vec![1]), rec(vec![1])]).is_err());
        assert!(TokenMask::from_history(2, vec![rec(vec![0, 1])]).is_err());
    }

    proptest! {
        #[test]
        fn masks_are_monotone_and_obey_count_law(
            n in 1usize..80,
            d in 1usize..6,
            k in 0.0f64..0.95,
            raw_layers in proptest::collection::vec(0usize..6, 0..5),
            seed in any::<u64>(),
        ) {
            let inputs: Vec<Vec<f64>> = (0..6).map(|s| random_rows(n, d, seed ^ s)).collect();
            let refs: Vec<&[f64]> = inputs.iter().map(|v| &v[..]).collect();
            let s = MaskSchedule::new(raw_layers, k).unwrap();
            let m = mask_from_layer_inputs(&refs, n, d, &s).unwrap();
            let mut keep = vec![true; n];
            let mut kept = n;
            for (stage, expect) in m.history().iter().zip(s.kept_counts(n)) {
                for &i in &stage.dropped {
                    prop_assert!(keep[i]);
                    keep[i] = false;
                }
                kept -= stage.dropped.len();
                prop_assert_eq!(kept, expect);
            }
            prop_assert!(m.kept_count() >= 1);
            prop_assert_eq!(m.keep(), &keep[..]);
        }
    }
}
