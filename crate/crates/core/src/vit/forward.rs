use super::config::{ViTConfig, LAYER_NORM_EPS};
use super::params::{Bound, BoundBlock, BoundDecoder, ViTParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, RowSelect, Tape, Tensor, Var};

/// Cuts `[B, C, H, W]` (or `[C, H, W]`) images into `[B, N, C*p*p]` patch
/// rows. Tokens run row-major over the patch grid; each row is ordered
/// channel, then pixel row, then pixel column.
pub fn patchify<E: Element>(images: &Tensor<E>, config: &ViTConfig) -> Result<Tensor<E>> {
    let shape = images.shape();
    let (batch, c, h, w) = match *shape {
        [c, h, w] => (1, c, h, w),
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(Error::shape(
                "patchify",
                shape,
                &[config.channels, config.image_size, config.image_size],
            ))
        }
    };
    if c != config.channels || h != config.image_size || w != config.image_size {
        return Err(Error::shape(
            "patchify",
            shape,
            &[config.channels, config.image_size, config.image_size],
        ));
    }
    let p = config.patch_size;
    let grid = config.grid();
    let data = images.data();
    let mut out = Vec::with_capacity(data.len());
    for b in 0..batch {
        let img = &data[b * c * h * w..(b + 1) * c * h * w];
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = (ch * h + gy * p + dy) * w + gx * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![batch, config.tokens(), config.patch_dim()],
        out,
    ))
}

/// What a forward pass should do beyond the plain encoder.
#[derive(Clone, Debug)]
pub struct ForwardOptions<E> {
    /// Tokens fed to the first block, per image. Positions are added before
    /// selection so each kept token keeps its own positional embedding.
    pub keep: Option<RowSelect>,
    /// `[B * N]` weights in {0, 1}; 1 replaces the patch embedding with the
    /// learned mask token (reconstruction heads only).
    pub mask_weights: Option<Vec<E>>,
    pub trace: bool,
    pub decoder: bool,
}

impl<E> Default for ForwardOptions<E> {
    fn default() -> Self {
        ForwardOptions {
            keep: None,
            mask_weights: None,
            trace: false,
            decoder: false,
        }
    }
}

impl<E> ForwardOptions<E> {
    pub fn traced() -> Self {
        ForwardOptions {
            trace: true,
            ..Default::default()
        }
    }
}

/// Tape handles for one layer's attention quantities.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    /// Block input `[B, N', d]`.
    pub input: Var,
    /// `[B, H, N', head_dim]`.
    pub q: Var,
    pub k: Var,
    /// Scaled pre-softmax relations `Q K^T / sqrt(head_dim)`, `[B, H, N', N']`.
    pub relation: Var,
    /// Row-stochastic attention, `softmax(relation)`.
    pub attn: Var,
    /// Block output `[B, N', d]`.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Embedded tokens entering block 0.
    pub embedded: Var,
    /// One entry per encoder block when tracing.
    pub layers: Vec<LayerVars>,
    /// Final encoder features `[B, N', d]`.
    pub features: Var,
    pub decoder_layers: Vec<LayerVars>,
    pub decoded: Option<Var>,
    pub head: Option<Var>,
}

/// Owned copy of one layer's traced tensors.
#[derive(Clone, Debug)]
pub struct LayerTrace<E: Element = f64> {
    pub input: Tensor<E>,
    pub q: Tensor<E>,
    pub k: Tensor<E>,
    pub relation: Tensor<E>,
    pub attn: Tensor<E>,
    pub output: Tensor<E>,
}

impl<E: Element> LayerTrace<E> {
    fn capture(tape: &Tape<E>, v: &LayerVars) -> Self {
        LayerTrace {
            input: tape.value(v.input).clone(),
            q: tape.value(v.q).clone(),
            k: tape.value(v.k).clone(),
            relation: tape.value(v.relation).clone(),
            attn: tape.value(v.attn).clone(),
            output: tape.value(v.output).clone(),
        }
    }
}

/// Result of a gradient-free forward pass.
#[derive(Clone, Debug)]
pub struct Inference<E: Element = f64> {
    pub embedded: Tensor<E>,
    pub layers: Vec<LayerTrace<E>>,
    pub features: Tensor<E>,
    pub decoder_layers: Vec<LayerTrace<E>>,
    pub decoded: Option<Tensor<E>>,
    pub head: Option<Tensor<E>>,
}

/// Patch projection plus positional embedding, then optional token selection.
pub fn patch_embed<E: Element>(
    tape: &mut Tape<E>,
    params: &Bound,
    patches: Var,
    opts: &ForwardOptions<E>,
) -> Result<Var> {
    let x = tape.matmul(patches, params.patch_weight)?;
    let mut x = tape.add(x, params.patch_bias)?;
    if let Some(weights) = &opts.mask_weights {
        let token = params
            .head
            .as_ref()
            .and_then(|h| h.mask_token)
            .ok_or_else(|| Error::contract("mask weights need a reconstruction head"))?;
        x = tape.blend_rows(x, token, weights.clone())?;
    }
    let x = tape.add(x, params.pos_embed)?;
    match &opts.keep {
        None => Ok(x),
        Some(keep) => tape.gather_rows(x, keep.clone()),
    }
}

/// One pre-norm block:
/// `x1 = x + MSA(LN1(x))`, `out = x1 + MLP(LN2(x1))`.
pub fn block_forward<E: Element>(
    tape: &mut Tape<E>,
    block: &BoundBlock,
    x: Var,
    heads: usize,
) -> Result<(Var, LayerVars)> {
    let shape = tape.shape(x).to_vec();
    let [b, n, d] = shape[..] else {
        return Err(Error::contract(format!(
            "block input must be [B, N, d], got {shape:?}"
        )));
    };
    let hd = d / heads;

    let h = tape.layer_norm(x, block.ln1_gain, block.ln1_bias, LAYER_NORM_EPS)?;
    let split = |w: Var, bias: Var, tape: &mut Tape<E>| -> Result<Var> {
        let y = tape.matmul(h, w)?;
        let y = tape.add(y, bias)?;
        let y = tape.reshape(y, &[b, n, heads, hd])?;
        tape.transpose(y, 1, 2)
    };
    let q = split(block.wq, block.bq, tape)?;
    let k = split(block.wk, block.bk, tape)?;
    let v = split(block.wv, block.bv, tape)?;

    let kt = tape.transpose(k, 2, 3)?;
    let qk = tape.matmul(q, kt)?;
    let relation = tape.scale(qk, 1.0 / (hd as f64).sqrt())?;
    let attn = tape.softmax(relation, 3)?;
    let o = tape.matmul(attn, v)?;
    let o = tape.transpose(o, 1, 2)?;
    let o = tape.reshape(o, &[b, n, d])?;
    let o = tape.matmul(o, block.wo)?;
    let msa = tape.add(o, block.bo)?;
    let x1 = tape.add(x, msa)?;

    let h2 = tape.layer_norm(x1, block.ln2_gain, block.ln2_bias, LAYER_NORM_EPS)?;
    let m = tape.matmul(h2, block.mlp_w1)?;
    let m = tape.add(m, block.mlp_b1)?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, block.mlp_w2)?;
    let m = tape.add(m, block.mlp_b2)?;
    let output = tape.add(x1, m)?;

    Ok((
        output,
        LayerVars {
            input: x,
            q,
            k,
            relation,
            attn,
            output,
        },
    ))
}

/// Runs the student decoder on encoder features.
pub fn decoder_forward<E: Element>(
    tape: &mut Tape<E>,
    params: &Bound,
    heads: usize,
    features: Var,
) -> Result<(Var, Vec<LayerVars>)> {
    match &params.decoder {
        None => Err(Error::contract("decoder_forward called without a decoder")),
        Some(BoundDecoder::Linear { weight, bias }) => {
            let y = tape.matmul(features, *weight)?;
            Ok((tape.add(y, *bias)?, Vec::new()))
        }
        Some(BoundDecoder::Attn(blocks)) => {
            let mut x = features;
            let mut layers = Vec::with_capacity(blocks.len());
            for block in blocks {
                let (y, trace) = block_forward(tape, block, x, heads)?;
                layers.push(trace);
                x = y;
            }
            Ok((x, layers))
        }
    }
}

/// Encoder, optional decoder, optional task head.
pub fn forward<E: Element>(
    tape: &mut Tape<E>,
    params: &Bound,
    config: &ViTConfig,
    patches: &Tensor<E>,
    opts: &ForwardOptions<E>,
) -> Result<ForwardVars> {
    let expect = [config.tokens(), config.patch_dim()];
    if patches.ndim() != 3 || patches.shape()[1..] != expect {
        return Err(Error::shape("forward", patches.shape(), &expect));
    }
    if let Some(RowSelect::PerBatch(sets)) = &opts.keep {
        if sets.iter().any(|s| s.is_empty()) {
            return Err(Error::contract("token mask keeps zero tokens"));
        }
    }
    let patches = tape.constant(patches.clone());
    let embedded = patch_embed(tape, params, patches, opts)?;

    let mut x = embedded;
    let mut layers = Vec::new();
    for block in &params.blocks {
        let (y, trace) = block_forward(tape, block, x, config.heads)?;
        if opts.trace {
            layers.push(trace);
        }
        x = y;
    }
    let features = x;

    let (decoded, decoder_layers) = if opts.decoder {
        let (y, layers) = decoder_forward(tape, params, config.heads, features)?;
        (Some(y), if opts.trace { layers } else { Vec::new() })
    } else {
        (None, Vec::new())
    };

    let head = match (&params.head, config.task_head) {
        (Some(h), super::TaskHead::Classify(_)) => {
            let pooled = tape.mean_axis(features, 1)?;
            let z = tape.layer_norm(pooled, h.norm_gain, h.norm_bias, LAYER_NORM_EPS)?;
            let z = tape.matmul(z, h.weight)?;
            Some(tape.add(z, h.bias)?)
        }
        (Some(h), super::TaskHead::Reconstruct) => {
            let z = tape.layer_norm(features, h.norm_gain, h.norm_bias, LAYER_NORM_EPS)?;
            let z = tape.matmul(z, h.weight)?;
            Some(tape.add(z, h.bias)?)
        }
        _ => None,
    };

    Ok(ForwardVars {
        embedded,
        layers,
        features,
        decoder_layers,
        decoded,
        head,
    })
}

impl<E: Element> ViTParams<E> {
    /// Gradient-free forward pass over `[B, N, P]` patch rows.
    pub fn infer(&self, patches: &Tensor<E>, opts: &ForwardOptions<E>) -> Result<Inference<E>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = forward(&mut tape, &bound, &self.config, patches, opts)?;
        Ok(Inference {
            embedded: tape.value(out.embedded).clone(),
            layers: out
                .layers
                .iter()
                .map(|l| LayerTrace::capture(&tape, l))
                .collect(),
            features: tape.value(out.features).clone(),
            decoder_layers: out
                .decoder_layers
                .iter()
                .map(|l| LayerTrace::capture(&tape, l))
                .collect(),
            decoded: out.decoded.map(|v| tape.value(v).clone()),
            head: out.head.map(|v| tape.value(v).clone()),
        })
    }

    /// Convenience: traced inference on `[B, C, H, W]` images.
    pub fn infer_images(&self, images: &Tensor<E>, trace: bool) -> Result<Inference<E>> {
        let patches = patchify(images, &self.config)?;
        let opts = ForwardOptions {
            trace,
            ..Default::default()
        };
        self.infer(&patches, &opts)
    }
}
