use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DecoderKind, TaskHead, ViTConfig};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

/// One pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<E: Element = f64> {
    pub ln1_gain: Tensor<E>,
    pub ln1_bias: Tensor<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln2_gain: Tensor<E>,
    pub ln2_bias: Tensor<E>,
    pub mlp_w1: Tensor<E>,
    pub mlp_b1: Tensor<E>,
    pub mlp_w2: Tensor<E>,
    pub mlp_b2: Tensor<E>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams<E: Element = f64> {
    Classify {
        norm_gain: Tensor<E>,
        norm_bias: Tensor<E>,
        weight: Tensor<E>,
        bias: Tensor<E>,
    },
    Reconstruct {
        norm_gain: Tensor<E>,
        norm_bias: Tensor<E>,
        weight: Tensor<E>,
        bias: Tensor<E>,
        mask_token: Tensor<E>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecoderParams<E: Element = f64> {
    Linear { weight: Tensor<E>, bias: Tensor<E> },
    Attn(Vec<BlockParams<E>>),
}

/// Full parameter set of one transformer.
///
/// Tensors are addressed by stable dotted names (`blocks.3.wq`, ...); the
/// name order is the order used by the optimizer, checkpoints and seeded
/// initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<E: Element = f64> {
    pub(crate) config: ViTConfig,
    pub(crate) patch_weight: Tensor<E>,
    pub(crate) patch_bias: Tensor<E>,
    pub(crate) pos_embed: Tensor<E>,
    pub(crate) blocks: Vec<BlockParams<E>>,
    pub(crate) head: Option<HeadParams<E>>,
    pub(crate) decoder: Option<DecoderParams<E>>,
    frozen: bool,
}

impl<E: Element> BlockParams<E> {
    fn fields(&self) -> [(&'static str, &Tensor<E>); 16] {
        [
            ("ln1.gain", &self.ln1_gain),
            ("ln1.bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2.gain", &self.ln2_gain),
            ("ln2.bias", &self.ln2_bias),
            ("mlp.w1", &self.mlp_w1),
            ("mlp.b1", &self.mlp_b1),
            ("mlp.w2", &self.mlp_w2),
            ("mlp.b2", &self.mlp_b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<E>); 16] {
        [
            ("ln1.gain", &mut self.ln1_gain),
            ("ln1.bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2.gain", &mut self.ln2_gain),
            ("ln2.bias", &mut self.ln2_bias),
            ("mlp.w1", &mut self.mlp_w1),
            ("mlp.b1", &mut self.mlp_b1),
            ("mlp.w2", &mut self.mlp_w2),
            ("mlp.b2", &mut self.mlp_b2),
        ]
    }

    fn new(dim: usize, hidden: usize, init: &mut Init) -> Self {
        BlockParams {
            ln1_gain: Tensor::full(vec![dim], E::one()),
            ln1_bias: Tensor::zeros(vec![dim]),
            wq: init.weight(&[dim, dim]),
            bq: Tensor::zeros(vec![dim]),
            wk: init.weight(&[dim, dim]),
            bk: Tensor::zeros(vec![dim]),
            wv: init.weight(&[dim, dim]),
            bv: Tensor::zeros(vec![dim]),
            wo: init.weight(&[dim, dim]),
            bo: Tensor::zeros(vec![dim]),
            ln2_gain: Tensor::full(vec![dim], E::one()),
            ln2_bias: Tensor::zeros(vec![dim]),
            mlp_w1: init.weight(&[dim, hidden]),
            mlp_b1: Tensor::zeros(vec![hidden]),
            mlp_w2: init.weight(&[hidden, dim]),
            mlp_b2: Tensor::zeros(vec![dim]),
        }
    }
}

/// Seeded truncated-normal initializer (`std` 0.02, cut at two deviations).
struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    fn weight<E: Element>(&mut self, shape: &[usize]) -> Tensor<E> {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break E::of(v);
                }
            })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}

/// 2-D sine-cosine table over a `grid x grid` token layout: the first half
/// of the channels encodes the row, the second half the column, each as
/// interleaved-free `sin` then `cos` blocks over geometric frequencies.
/// `None` when `dim` is not a multiple of 4.
fn sincos_positions<E: Element>(grid: usize, dim: usize) -> Option<Tensor<E>> {
    if !dim.is_multiple_of(4) {
        return None;
    }
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for t in 0..grid * grid {
        for coord in [(t / grid) as f64, (t % grid) as f64] {
            let freqs = (0..quarter).map(|k| 10_000f64.powf(-(k as f64) / quarter as f64));
            let angles: Vec<f64> = freqs.map(|w| coord * w).collect();
            data.extend(angles.iter().map(|a| E::of(a.sin())));
            data.extend(angles.iter().map(|a| E::of(a.cos())));
        }
    }
    Some(Tensor::from_parts(vec![grid * grid, dim], data))
}

impl<E: Element> ViTParams<E> {
    /// Fresh parameters: truncated-normal weights, zero biases, unit norm
    /// gains. Identical seeds give bit-identical parameters.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let d = config.dim;
        let hidden = config.hidden_dim();
        let patch_weight = init.weight(&[config.patch_dim(), d]);
        let patch_bias = Tensor::zeros(vec![d]);
        let pos_embed = sincos_positions(config.grid(), d).unwrap_or_else(|| init.weight(&[config.tokens(), d]));
        let blocks = (0..config.depth)
            .map(|_| BlockParams::new(d, hidden, &mut init))
            .collect();
        let head = match config.task_head {
            TaskHead::None => None,
            TaskHead::Classify(classes) => Some(HeadParams::Classify {
                norm_gain: Tensor::full(vec![d], E::one()),
                norm_bias: Tensor::zeros(vec![d]),
                weight: init.weight(&[d, classes]),
                bias: Tensor::zeros(vec![classes]),
            }),
            TaskHead::Reconstruct => Some(HeadParams::Reconstruct {
                norm_gain: Tensor::full(vec![d], E::one()),
                norm_bias: Tensor::zeros(vec![d]),
                weight: init.weight(&[d, config.patch_dim()]),
                bias: Tensor::zeros(vec![config.patch_dim()]),
                mask_token: init.weight(&[d]),
            }),
        };
        let decoder = match config.decoder {
            DecoderKind::None => None,
            DecoderKind::Linear => Some(DecoderParams::Linear {
                weight: init.weight(&[d, d]),
                bias: Tensor::zeros(vec![d]),
            }),
            DecoderKind::Attn(k) => Some(DecoderParams::Attn(
                (0..k)
                    .map(|_| BlockParams::new(d, hidden, &mut init))
                    .collect(),
            )),
        };
        Ok(ViTParams {
            config: config.clone(),
            patch_weight,
            patch_bias,
            pos_embed,
            blocks,
            head,
            decoder,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockParams<E>] {
        &self.blocks
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the parameters read-only; every mutating accessor then fails.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// A mutable copy, used to start a student from a teacher.
    pub fn thawed_clone(&self) -> Self {
        let mut p = self.clone();
        p.frozen = false;
        p
    }

    /// Mutable parameters for `config` (same encoder, any head or decoder)
    /// holding this model's encoder weights. Tensors absent here come from a
    /// fresh initialization with `seed`.
    pub fn transplant(&self, config: &ViTConfig, seed: u64) -> Result<Self> {
        if !self.config.same_encoder(config) {
            return Err(Error::Asymmetric(format!(
                "cannot move {:?} weights into {config:?}",
                self.config
            )));
        }
        let mut out = Self::init(config, seed)?;
        let mine = self.named_tensors();
        for (name, slot) in out.named_tensors_mut()? {
            if name.starts_with("head.") || name.starts_with("decoder.") {
                continue;
            }
            if let Some((_, t)) = mine.iter().find(|(n, _)| *n == name) {
                *slot = (*t).clone();
            }
        }
        Ok(out)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("patch_embed.weight".into(), &self.patch_weight),
            ("patch_embed.bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.fields()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        match &self.head {
            None => {}
            Some(HeadParams::Classify {
                norm_gain,
                norm_bias,
                weight,
                bias,
            }) => out.extend([
                ("head.norm.gain".into(), norm_gain),
                ("head.norm.bias".into(), norm_bias),
                ("head.weight".into(), weight),
                ("head.bias".into(), bias),
            ]),
            Some(HeadParams::Reconstruct {
                norm_gain,
                norm_bias,
                weight,
                bias,
                mask_token,
            }) => out.extend([
                ("head.norm.gain".into(), norm_gain),
                ("head.norm.bias".into(), norm_bias),
                ("head.weight".into(), weight),
                ("head.bias".into(), bias),
                ("head.mask_token".into(), mask_token),
            ]),
        }
        match &self.decoder {
            None => {}
            Some(DecoderParams::Linear { weight, bias }) => out.extend([
                ("decoder.weight".into(), weight),
                ("decoder.bias".into(), bias),
            ]),
            Some(DecoderParams::Attn(blocks)) => {
                for (i, b) in blocks.iter().enumerate() {
                    out.extend(
                        b.fields()
                            .into_iter()
                            .map(|(n, t)| (format!("decoder.{i}.{n}"), t)),
                    );
                }
            }
        }
        out
    }

    /// Mutable access in [`named_tensors`](Self::named_tensors) order.
    /// Fails on frozen parameters.
    pub fn named_tensors_mut(&mut self) -> Result<Vec<(String, &mut Tensor<E>)>> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("patch_embed.weight".into(), &mut self.patch_weight),
            ("patch_embed.bias".into(), &mut self.patch_bias),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.fields_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("blocks.{i}.{n}"), t)),
            );
        }
        match &mut self.head {
            None => {}
            Some(HeadParams::Classify {
                norm_gain,
                norm_bias,
                weight,
                bias,
            }) => out.extend([
                ("head.norm.gain".into(), norm_gain),
                ("head.norm.bias".into(), norm_bias),
                ("head.weight".into(), weight),
                ("head.bias".into(), bias),
            ]),
            Some(HeadParams::Reconstruct {
                norm_gain,
                norm_bias,
                weight,
                bias,
                mask_token,
            }) => out.extend([
                ("head.norm.gain".into(), norm_gain),
                ("head.norm.bias".into(), norm_bias),
                ("head.weight".into(), weight),
                ("head.bias".into(), bias),
                ("head.mask_token".into(), mask_token),
            ]),
        }
        match &mut self.decoder {
            None => {}
            Some(DecoderParams::Linear { weight, bias }) => out.extend([
                ("decoder.weight".into(), weight),
                ("decoder.bias".into(), bias),
            ]),
            Some(DecoderParams::Attn(blocks)) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    out.extend(
                        b.fields_mut()
                            .into_iter()
                            .map(|(n, t)| (format!("decoder.{i}.{n}"), t)),
                    );
                }
            }
        }
        Ok(out)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<E>> {
        self.named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.named_tensors_mut()?
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every tensor as a tape leaf, in name order.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> Bound {
        let mut leaf = |t: &Tensor<E>| tape.leaf(t.clone(), requires_grad);
        let patch_weight = leaf(&self.patch_weight);
        let patch_bias = leaf(&self.patch_bias);
        let pos_embed = leaf(&self.pos_embed);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock::bind(b, &mut leaf))
            .collect();
        let head = self.head.as_ref().map(|h| match h {
            HeadParams::Classify {
                norm_gain,
                norm_bias,
                weight,
                bias,
            } => BoundHead {
                norm_gain: leaf(norm_gain),
                norm_bias: leaf(norm_bias),
                weight: leaf(weight),
                bias: leaf(bias),
                mask_token: None,
            },
            HeadParams::Reconstruct {
                norm_gain,
                norm_bias,
                weight,
                bias,
                mask_token,
            } => BoundHead {
                norm_gain: leaf(norm_gain),
                norm_bias: leaf(norm_bias),
                weight: leaf(weight),
                bias: leaf(bias),
                mask_token: Some(leaf(mask_token)),
            },
        });
        let decoder = self.decoder.as_ref().map(|d| match d {
            DecoderParams::Linear { weight, bias } => BoundDecoder::Linear {
                weight: leaf(weight),
                bias: leaf(bias),
            },
            DecoderParams::Attn(blocks) => BoundDecoder::Attn(
                blocks
                    .iter()
                    .map(|b| BoundBlock::bind(b, &mut leaf))
                    .collect(),
            ),
        });
        Bound {
            patch_weight,
            patch_bias,
            pos_embed,
            blocks,
            head,
            decoder,
        }
    }
}

/// Tape handles for one block's parameters.
#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl BoundBlock {
    fn bind<E: Element>(b: &BlockParams<E>, leaf: &mut impl FnMut(&Tensor<E>) -> Var) -> Self {
        BoundBlock {
            ln1_gain: leaf(&b.ln1_gain),
            ln1_bias: leaf(&b.ln1_bias),
            wq: leaf(&b.wq),
            bq: leaf(&b.bq),
            wk: leaf(&b.wk),
            bk: leaf(&b.bk),
            wv: leaf(&b.wv),
            bv: leaf(&b.bv),
            wo: leaf(&b.wo),
            bo: leaf(&b.bo),
            ln2_gain: leaf(&b.ln2_gain),
            ln2_bias: leaf(&b.ln2_bias),
            mlp_w1: leaf(&b.mlp_w1),
            mlp_b1: leaf(&b.mlp_b1),
            mlp_w2: leaf(&b.mlp_w2),
            mlp_b2: leaf(&b.mlp_b2),
        }
    }

    fn vars(&self) -> [Var; 16] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gain,
            self.ln2_bias,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BoundHead {
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub weight: Var,
    pub bias: Var,
    pub mask_token: Option<Var>,
}

#[derive(Clone, Debug)]
pub enum BoundDecoder {
    Linear { weight: Var, bias: Var },
    Attn(Vec<BoundBlock>),
}

/// A parameter set recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BoundBlock>,
    pub head: Option<BoundHead>,
    pub decoder: Option<BoundDecoder>,
}

impl Bound {
    /// All leaves in [`ViTParams::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_weight, self.patch_bias, self.pos_embed];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        if let Some(h) = &self.head {
            out.extend([h.norm_gain, h.norm_bias, h.weight, h.bias]);
            out.extend(h.mask_token);
        }
        match &self.decoder {
            None => {}
            Some(BoundDecoder::Linear { weight, bias }) => out.extend([*weight, *bias]),
            Some(BoundDecoder::Attn(blocks)) => {
                for b in blocks {
                    out.extend(b.vars());
                }
            }
        }
        out
    }
}
