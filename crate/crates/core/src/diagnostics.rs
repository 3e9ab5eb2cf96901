//! Attention diagnostics: average head distance and normalized mutual
//! information between query and key positions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use crate::vit::{patchify, ForwardOptions, ViTConfig, ViTParams};

/// Row sums further than this from 1 are rejected (f64 attention).
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Row-sum tolerance for attention computed in `E`: rounding grows with the
/// row length and the element precision.
pub fn row_sum_tol<E: Element>(n: usize) -> f64 {
    ROW_SUM_TOL.max(4.0 * n as f64 * E::epsilon().as_f64())
}

fn check_rows(attn: &[f64], n: usize) -> Result<()> {
    check_rows_tol(attn, n, ROW_SUM_TOL)
}

fn check_rows_tol(attn: &[f64], n: usize, tol: f64) -> Result<()> {
    if n == 0 || !attn.len().is_multiple_of(n * n) {
        return Err(Error::contract(format!(
            "attention of length {} is not a stack of {n}x{n} matrices",
            attn.len()
        )));
    }
    for (r, row) in attn.chunks_exact(n).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > tol || row.iter().any(|&v| v < 0.0) {
            return Err(Error::contract(format!(
                "attention row {r} is not a probability vector (sum {s})"
            )));
        }
    }
    Ok(())
}

/// Row-major `(row, col)` token centers of a square grid, in patch units.
pub fn grid_positions(grid: usize) -> Vec<(f64, f64)> {
    (0..grid * grid)
        .map(|t| ((t / grid) as f64, (t % grid) as f64))
        .collect()
}

/// Per-head `(1/N) sum_q sum_k A[q,k] * |pos_q - pos_k|` for `attn` laid
/// out `[H, N, N]` over arbitrary token positions.
pub fn avg_head_distance_at(attn: &[f64], positions: &[(f64, f64)]) -> Result<Vec<f64>> {
    let n = positions.len();
    check_rows(attn, n)?;
    let dist: Vec<f64> = positions
        .iter()
        .flat_map(|q| positions.iter().map(move |k| (q.0 - k.0).hypot(q.1 - k.1)))
        .collect();
    Ok(attn
        .chunks_exact(n * n)
        .map(|a| a.iter().zip(&dist).map(|(w, d)| w * d).sum::<f64>() / n as f64)
        .collect())
}

/// [`avg_head_distance_at`] on a `grid x grid` layout, in patch units.
pub fn avg_head_distance(attn: &[f64], grid: usize) -> Result<Vec<f64>> {
    avg_head_distance_at(attn, &grid_positions(grid))
}

/// Per-head normalized mutual information `I(q;k) / sqrt(H(q) H(k))` with a
/// uniform query distribution. Natural log; `0 log 0 = 0`; 0 when `H(k)` is 0.
pub fn nmi(attn: &[f64], n: usize) -> Result<Vec<f64>> {
    check_rows(attn, n)?;
    let h_q = (n as f64).ln();
    Ok(attn
        .chunks_exact(n * n)
        .map(|a| {
            let mut p_k = vec![0.0; n];
            for row in a.chunks_exact(n) {
                for (p, &v) in p_k.iter_mut().zip(row) {
                    *p += v / n as f64;
                }
            }
            let h_k: f64 = -p_k
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            if h_k <= 0.0 || h_q <= 0.0 {
                return 0.0;
            }
            let mut info = 0.0;
            for row in a.chunks_exact(n) {
                for (k, &v) in row.iter().enumerate() {
                    if v > 0.0 {
                        // p(q,k) / (p(q) p(k)) = A[q,k] / p(k)
                        info += v / n as f64 * (v / p_k[k]).ln();
                    }
                }
            }
            info / (h_q * h_k).sqrt()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub avg_dist_patch: f64,
    pub avg_dist_px: f64,
    pub nmi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// 1-based layer number; decoder layers continue after the encoder's.
    pub layer: usize,
    pub decoder: bool,
    pub heads: Vec<HeadStats>,
}

impl LayerStats {
    pub fn mean_dist_patch(&self) -> f64 {
        mean(self.heads.iter().map(|h| h.avg_dist_patch))
    }

    pub fn mean_dist_px(&self) -> f64 {
        mean(self.heads.iter().map(|h| h.avg_dist_px))
    }

    pub fn mean_nmi(&self) -> f64 {
        mean(self.heads.iter().map(|h| h.nmi))
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len() as f64;
    it.sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub grid: usize,
    pub patch_size: usize,
    pub probes: usize,
    pub layers: Vec<LayerStats>,
}

impl AttentionStats {
    pub fn encoder_layer(&self, layer: usize) -> Option<&LayerStats> {
        self.layers.iter().find(|l| !l.decoder && l.layer == layer)
    }
}

/// Sums per-head metrics of one `[B, H, N, N]` attention tensor into
/// `acc` (one `(dist, nmi)` pair per head).
fn accumulate<E: Element>(attn: &Tensor<E>, grid: usize, acc: &mut [(f64, f64)]) -> Result<()> {
    let n = grid * grid;
    let mut a = attn.to_f64_vec();
    check_rows_tol(&a, n, row_sum_tol::<E>(n))?;
    // Lower-precision rows are renormalized in f64 so the strict checks in
    // the per-matrix statistics apply. f64 rows pass through untouched.
    if E::epsilon().as_f64() > f64::EPSILON {
        for row in a.chunks_exact_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    let heads = acc.len();
    for img in a.chunks_exact(heads * n * n) {
        let d = avg_head_distance(img, grid)?;
        let m = nmi(img, n)?;
        for (slot, (d, m)) in acc.iter_mut().zip(d.into_iter().zip(m)) {
            slot.0 += d;
            slot.1 += m;
        }
    }
    Ok(())
}

/// Attention statistics averaged over `[B, C, H, W]` probe images. Probes
/// run through the model in chunks of `chunk` images.
pub fn model_report<E: Element>(
    model: &ViTParams<E>,
    probes: &Tensor<E>,
    include_decoder: bool,
    chunk: usize,
) -> Result<AttentionStats> {
    let config = model.config();
    let total = probes.shape().first().copied().unwrap_or(0);
    if probes.ndim() != 4 || total == 0 {
        return Err(Error::contract(
            "model_report needs a non-empty [B, C, H, W] probe set",
        ));
    }
    let grid = config.grid();
    let heads = config.heads;
    let per_image = probes.len() / total;
    let mut enc = vec![vec![(0.0, 0.0); heads]; config.depth];
    let mut dec: Vec<Vec<(f64, f64)>> = Vec::new();
    let opts = ForwardOptions {
        trace: true,
        decoder: include_decoder && config.decoder != crate::vit::DecoderKind::None,
        ..Default::default()
    };
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        let images = Tensor::new(
            vec![
                end - start,
                probes.shape()[1],
                probes.shape()[2],
                probes.shape()[3],
            ],
            probes.data()[start * per_image..end * per_image].to_vec(),
        )?;
        let out = model.infer(&patchify(&images, config)?, &opts)?;
        for (acc, l) in enc.iter_mut().zip(&out.layers) {
            accumulate(&l.attn, grid, acc)?;
        }
        dec.resize(out.decoder_layers.len(), vec![(0.0, 0.0); heads]);
        for (acc, l) in dec.iter_mut().zip(&out.decoder_layers) {
            accumulate(&l.attn, grid, acc)?;
        }
        start = end;
    }
    let finish = |acc: &Vec<(f64, f64)>| -> Vec<HeadStats> {
        acc.iter()
            .map(|&(d, m)| {
                let d = d / total as f64;
                HeadStats {
                    avg_dist_patch: d,
                    avg_dist_px: d * config.patch_size as f64,
                    nmi: m / total as f64,
                }
            })
            .collect()
    };
    let mut layers: Vec<LayerStats> = enc
        .iter()
        .enumerate()
        .map(|(i, acc)| LayerStats {
            layer: i + 1,
            decoder: false,
            heads: finish(acc),
        })
        .collect();
    layers.extend(dec.iter().enumerate().map(|(i, acc)| LayerStats {
        layer: config.depth + i + 1,
        decoder: true,
        heads: finish(acc),
    }));
    Ok(AttentionStats {
        grid,
        patch_size: config.patch_size,
        probes: total,
        layers,
    })
}

/// Head-averaged attention row of `query` at 1-based encoder `layer` for one
/// `[C, H, W]` image.
pub fn attention_query_map<E: Element>(
    model: &ViTParams<E>,
    image: &Tensor<E>,
    layer: usize,
    query: usize,
) -> Result<Vec<f64>> {
    let config = model.config();
    let n = config.tokens();
    if layer == 0 || layer > config.depth {
        return Err(Error::Index {
            op: "attention_query_map layer",
            index: layer,
            extent: config.depth,
        });
    }
    if query >= n {
        return Err(Error::Index {
            op: "attention_query_map query",
            index: query,
            extent: n,
        });
    }
    let out = model.infer(&patchify(image, config)?, &ForwardOptions::traced())?;
    let attn = out.layers[layer - 1].attn.to_f64_vec();
    let heads = config.heads;
    let mut row = vec![0.0; n];
    for h in 0..heads {
        let base = (h * n + query) * n;
        for (r, v) in row.iter_mut().zip(&attn[base..base + n]) {
            *r += v / heads as f64;
        }
    }
    Ok(row)
}

/// One CSV row per (layer, head).
pub fn write_csv(stats: &AttentionStats, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "head", "avg_dist_patch", "avg_dist_px", "nmi"])
        .map_err(csv_err)?;
    for l in &stats.layers {
        for (h, s) in l.heads.iter().enumerate() {
            w.write_record([
                l.layer.to_string(),
                h.to_string(),
                s.avg_dist_patch.to_string(),
                s.avg_dist_px.to_string(),
                s.nmi.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeans {
    pub layer: usize,
    pub decoder: bool,
    pub avg_dist_patch: f64,
    pub avg_dist_px: f64,
    pub nmi: f64,
}

/// JSON companion of the CSV report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub per_layer_means: Vec<LayerMeans>,
    pub config_digest: String,
    pub probe_seed: u64,
    pub probes: usize,
    pub model: ViTConfig,
}

impl ReportSummary {
    pub fn new(
        stats: &AttentionStats,
        model: &ViTConfig,
        config_digest: String,
        probe_seed: u64,
    ) -> Self {
        ReportSummary {
            per_layer_means: stats
                .layers
                .iter()
                .map(|l| LayerMeans {
                    layer: l.layer,
                    decoder: l.decoder,
                    avg_dist_patch: l.mean_dist_patch(),
                    avg_dist_px: l.mean_dist_px(),
                    nmi: l.mean_nmi(),
                })
                .collect(),
            config_digest,
            probe_seed,
            probes: stats.probes,
            model: model.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    pub decoder: bool,
    pub avg_dist_patch: f64,
    pub avg_dist_px: f64,
    pub nmi: f64,
}

/// Per-layer `b - a`. Reports must describe the same encoder geometry.
pub fn compare(a: &ReportSummary, b: &ReportSummary) -> Result<Vec<LayerDelta>> {
    if !a.model.same_encoder(&b.model) {
        return Err(Error::Asymmetric(
            "reports describe different model configs".into(),
        ));
    }
    a.per_layer_means
        .iter()
        .map(|la| {
            let lb = b
                .per_layer_means
                .iter()
                .find(|l| l.layer == la.layer && l.decoder == la.decoder)
                .ok_or_else(|| {
                    Error::contract(format!("layer {} missing from second report", la.layer))
                })?;
            Ok(LayerDelta {
                layer: la.layer,
                decoder: la.decoder,
                avg_dist_patch: lb.avg_dist_patch - la.avg_dist_patch,
                avg_dist_px: lb.avg_dist_px - la.avg_dist_px,
                nmi: lb.nmi - la.nmi,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{DecoderKind, TaskHead};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `(H(q) + H(k) - H(q,k)) / sqrt(H(q) H(k))` from the joint table.
    fn nmi_oracle(a: &[f64], n: usize) -> f64 {
        let joint: Vec<f64> = a.iter().map(|v| v / n as f64).collect();
        let h = |ps: &mut dyn Iterator<Item = f64>| -> f64 {
            ps.filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
        };
        let h_qk = h(&mut joint.iter().copied());
        let h_q = h(&mut (0..n).map(|q| (0..n).map(|k| joint[q * n + k]).sum::<f64>()));
        let h_k = h(&mut (0..n).map(|k| (0..n).map(|q| joint[q * n + k]).sum::<f64>()));
        if h_k == 0.0 || h_q == 0.0 {
            return 0.0;
        }
        (h_q + h_k - h_qk) / (h_q * h_k).sqrt()
    }

    fn random_stochastic(rng: &mut ChaCha8Rng, heads: usize, n: usize) -> Vec<f64> {
        let mut a: Vec<f64> = (0..heads * n * n)
            .map(|_| rng.gen_range(0.0..1.0f64).powi(3))
            .collect();
        for row in a.chunks_exact_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        a
    }

    #[test]
    fn identity_attention_has_zero_distance() {
        let mut a = vec![0.0; 16];
        for i in 0..4 {
            a[i * 4 + i] = 1.0;
        }
        assert_eq!(avg_head_distance(&a, 2).unwrap(), vec![0.0]);
    }

    #[test]
    fn uniform_two_by_two_distance() {
        let a = vec![0.25; 16];
        let expect = (0.0 + 1.0 + 1.0 + 2f64.sqrt()) / 4.0;
        assert!((avg_head_distance(&a, 2).unwrap()[0] - expect).abs() < 1e-15);
        assert!((expect - 0.85355).abs() < 1e-5);
    }

    #[test]
    fn swap_on_one_by_two_has_unit_distance() {
        let a = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(
            avg_head_distance_at(&a, &[(0.0, 0.0), (0.0, 1.0)]).unwrap(),
            vec![1.0]
        );
    }

    #[test]
    fn nmi_endpoints() {
        let n = 5;
        assert_eq!(nmi(&vec![1.0 / n as f64; n * n], n).unwrap(), vec![0.0]);
        let mut perm = vec![0.0; n * n];
        for (q, k) in [3, 0, 4, 1, 2].iter().enumerate() {
            perm[q * n + k] = 1.0;
        }
        assert!((nmi(&perm, n).unwrap()[0] - 1.0).abs() < 1e-15);
        // Every query on one key: H(k) = 0.
        let mut collapse = vec![0.0; n * n];
        for q in 0..n {
            collapse[q * n + 2] = 1.0;
        }
        assert_eq!(nmi(&collapse, n).unwrap(), vec![0.0]);
    }

    #[test]
    fn two_token_nmi_matches_oracle() {
        let a = [0.9, 0.1, 0.1, 0.9];
        let got = nmi(&a, 2).unwrap()[0];
        assert!((got - nmi_oracle(&a, 2)).abs() < 1e-12);
        assert!((got - 0.531).abs() < 1e-3);
    }

    #[test]
    fn bad_rows_are_rejected() {
        assert!(nmi(&[0.5, 0.4, 0.5, 0.5], 2).is_err());
        assert!(avg_head_distance(&[0.25; 15], 2).is_err());
    }

    proptest! {
        #[test]
        fn nmi_is_bounded_and_matches_oracle(n in 2usize..9, heads in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_stochastic(&mut rng, heads, n);
            let got = nmi(&a, n).unwrap();
            for (h, v) in got.iter().enumerate() {
                prop_assert!(*v >= -1e-9 && *v <= 1.0 + 1e-9);
                prop_assert!((v - nmi_oracle(&a[h * n * n..(h + 1) * n * n], n)).abs() < 1e-9);
            }
        }

        #[test]
        fn distance_is_within_grid_diameter(grid in 1usize..4, heads in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = grid * grid;
            let a = random_stochastic(&mut rng, heads, n);
            let diameter = ((grid - 1) as f64) * 2f64.sqrt();
            for d in avg_head_distance(&a, grid).unwrap() {
                prop_assert!(d >= 0.0 && d <= diameter + 1e-12);
            }
        }
    }

    fn small_model(decoder: DecoderKind) -> ViTParams {
        let config = ViTConfig {
            image_size: 8,
            patch_size: 2,
            channels: 1,
            depth: 2,
            heads: 2,
            dim: 8,
            mlp_ratio: 2,
            decoder,
            task_head: TaskHead::None,
        };
        let mut p = ViTParams::init(&config, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (_, t) in p.named_tensors_mut().unwrap() {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
        p
    }

    fn probes(count: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![count, 1, 8, 8],
            (0..count * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_probe_report_equals_direct_calls() {
        let model = small_model(DecoderKind::None);
        let img = probes(1, 7);
        let report = model_report(&model, &img, false, 8).unwrap();
        let out = model.infer_images(&img, true).unwrap();
        for (l, stats) in out.layers.iter().zip(&report.layers) {
            let a = l.attn.to_f64_vec();
            let d = avg_head_distance(&a, 4).unwrap();
            let m = nmi(&a, 16).unwrap();
            for h in 0..2 {
                assert_eq!(stats.heads[h].avg_dist_patch, d[h]);
                assert_eq!(stats.heads[h].avg_dist_px, d[h] * 2.0);
                assert_eq!(stats.heads[h].nmi, m[h]);
            }
        }
    }

    #[test]
    fn report_is_order_invariant_and_duplicate_weighted() {
        let model = small_model(DecoderKind::None);
        let set = probes(3, 8);
        let base = model_report(&model, &set, false, 2).unwrap();
        let mut rev = Vec::new();
        for i in (0..3).rev() {
            rev.extend_from_slice(&set.data()[i * 64..(i + 1) * 64]);
        }
        let rev = model_report(
            &model,
            &Tensor::new(vec![3, 1, 8, 8], rev).unwrap(),
            false,
            3,
        )
        .unwrap();
        // Doubling every probe leaves means unchanged.
        let mut doubled = set.data().to_vec();
        doubled.extend_from_slice(set.data());
        let doubled = model_report(
            &model,
            &Tensor::new(vec![6, 1, 8, 8], doubled).unwrap(),
            false,
            4,
        )
        .unwrap();
        for other in [&rev, &doubled] {
            for (a, b) in base.layers.iter().zip(&other.layers) {
                assert!((a.mean_nmi() - b.mean_nmi()).abs() < 1e-12);
                assert!((a.mean_dist_patch() - b.mean_dist_patch()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_layers_are_reported_after_encoder() {
        let model = small_model(DecoderKind::Attn(2));
        let report = model_report(&model, &probes(2, 9), true, 2).unwrap();
        let tags: Vec<(usize, bool)> = report.layers.iter().map(|l| (l.layer, l.decoder)).collect();
        assert_eq!(tags, vec![(1, false), (2, false), (3, true), (4, true)]);
        assert_eq!(
            model_report(&model, &probes(2, 9), false, 2)
                .unwrap()
                .layers
                .len(),
            2
        );
    }

    #[test]
    fn query_map_is_head_mean_of_trace() {
        let model = small_model(DecoderKind::None);
        let img = probes(1, 10);
        let row = attention_query_map(&model, &img, 2, 5).unwrap();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let a = model.infer_images(&img, true).unwrap().layers[1]
            .attn
            .to_f64_vec();
        for k in 0..16 {
            let expect = (a[5 * 16 + k] + a[(16 + 5) * 16 + k]) / 2.0;
            assert!((row[k] - expect).abs() < 1e-15);
        }
        assert!(attention_query_map(&model, &img, 3, 0).is_err());
        assert!(attention_query_map(&model, &img, 1, 16).is_err());
    }

    #[test]
    fn query_map_of_identity_attention_is_one_hot() {
        // One head, unit-gain norm: every normalized token has squared norm d,
        // so with Wq = c I and Wk = I the diagonal of Q K^T dominates by a
        // margin that grows with c.
        let config = ViTConfig {
            heads: 1,
            depth: 1,
            ..small_model(DecoderKind::None).config().clone()
        };
        let mut model = ViTParams::init(&config, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for name in ["patch_embed.weight", "pos_embed"] {
            let t = model.tensor_mut(name).unwrap();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let eye = |c: f64| {
            let mut data = vec![0.0; 64];
            (0..8).for_each(|i| data[i * 9] = c);
            Tensor::new(vec![8, 8], data).unwrap()
        };
        *model.tensor_mut("blocks.0.wq").unwrap() = eye(1e4);
        *model.tensor_mut("blocks.0.wk").unwrap() = eye(1.0);
        let row = attention_query_map(&model, &probes(1, 11), 1, 3).unwrap();
        for (k, v) in row.iter().enumerate() {
            let expect = if k == 3 { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-9, "key {k}: {v}");
        }
    }

    #[test]
    fn csv_has_layer_times_head_rows() {
        let model = small_model(DecoderKind::None);
        let report = model_report(&model, &probes(2, 12), false, 2).unwrap();
        let mut buf = Vec::new();
        write_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,head,avg_dist_patch,avg_dist_px,nmi");
        assert_eq!(lines.len(), 1 + 2 * 2);
    }

    #[test]
    fn compare_same_report_is_zero_and_checks_config() {
        let model = small_model(DecoderKind::None);
        let report = model_report(&model, &probes(2, 13), false, 2).unwrap();
        let s = ReportSummary::new(&report, model.config(), "d".into(), 1);
        for d in compare(&s, &s).unwrap() {
            assert_eq!((d.avg_dist_patch, d.avg_dist_px, d.nmi), (0.0, 0.0, 0.0));
        }
        let mut other = s.clone();
        other.model.depth = 3;
        assert!(matches!(compare(&s, &other), Err(Error::Asymmetric(_))));
    }
}
