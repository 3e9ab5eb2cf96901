//! AdamW with decoupled weight decay, and a warmup + cosine learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};
use crate::vit::{Bound, ViTParams};

/// Linear ramp from 0 to `base` over `warmup` steps, then cosine decay to
/// `min` at `total`.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, base: f64, min: f64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::contract(format!(
            "total steps {total} must exceed warmup steps {warmup}"
        )));
    }
    if step > total {
        return Err(Error::contract(format!("step {step} beyond total {total}")));
    }
    if step < warmup {
        return Ok(base * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(min + 0.5 * (base - min) * (1.0 + (PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
    /// Warmup as a fraction of total steps.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

fn default_warmup() -> f64 {
    0.05
}

impl Default for OptimConfig {
    /// Desk-scale defaults (batch 64).
    fn default() -> Self {
        OptimConfig {
            lr: 1.5e-3,
            lr_min: 0.0,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: 0.05,
            warmup_fraction: default_warmup(),
        }
    }
}

impl OptimConfig {
    /// Large-batch recipe: lr 6e-4 at batch 1024, weight decay 0.05.
    pub fn large_batch_preset() -> Self {
        OptimConfig {
            lr: 6e-4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::contract("need 0 <= lr_min <= lr"));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::contract("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::contract("need eps > 0 and weight_decay >= 0"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::contract("warmup_fraction must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_fraction * total as f64).round() as usize
    }

    /// Learning rate for a 0-based step out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> Result<f64> {
        let warmup = self.warmup_steps(total).min(total.saturating_sub(1));
        cosine_lr(step, warmup, total.max(1), self.lr, self.lr_min)
    }
}

/// Moment buffers for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW<E: Element = f64> {
    config: OptimConfig,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    decay: Vec<bool>,
}

impl<E: Element> AdamW<E> {
    /// One slot per tensor in `shapes` order. Tensors of rank < 2 (biases,
    /// norm gains, mask embeddings) are exempt from weight decay.
    pub fn new(config: OptimConfig, shapes: &[&[usize]]) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            decay: shapes.iter().map(|s| s.len() >= 2).collect(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn decays(&self) -> &[bool] {
        &self.decay
    }

    /// One bias-corrected update at learning rate `lr`. All gradients are
    /// checked before any parameter moves.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<E>],
        grads: &[Tensor<E>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape("AdamW::step", g.shape(), self.m[i].shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of parameter slot {i}"),
                });
            }
        }

        self.step += 1;
        let (b1, b2) = self.config.betas;
        let t = self.step as i32;
        let c1 = E::of(1.0 - b1.powi(t));
        let c2 = E::of(1.0 - b2.powi(t));
        let (b1, b2) = (E::of(b1), E::of(b2));
        let (one, eps, lr_e) = (E::one(), E::of(self.config.eps), E::of(lr));
        let shrink = E::of(1.0 - lr * self.config.weight_decay);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if self.decay[i] { shrink } else { one };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p * decay - lr_e * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("AdamW update of parameter slot {i}"),
                });
            }
        }
        Ok(())
    }
}

impl<E: Element> AdamW<E> {
    /// One slot per tensor of `params`, in name order.
    pub fn for_params(config: OptimConfig, params: &ViTParams<E>) -> Result<Self> {
        let named = params.named_tensors();
        let shapes: Vec<&[usize]> = named.iter().map(|(_, t)| t.shape()).collect();
        Self::new(config, &shapes)
    }

    pub fn step_params(
        &mut self,
        params: &mut ViTParams<E>,
        grads: &[Tensor<E>],
        lr: f64,
    ) -> Result<()> {
        let mut slots: Vec<&mut Tensor<E>> = params
            .named_tensors_mut()?
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        self.step(&mut slots, grads, lr)
    }
}

/// Records `params` on a fresh tape, builds a scalar loss with `loss_fn`,
/// and applies one optimizer step. Returns the loss value.
pub fn descend<E: Element>(
    params: &mut ViTParams<E>,
    opt: &mut AdamW<E>,
    lr: f64,
    loss_fn: impl FnOnce(&mut Tape<E>, &Bound) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = loss_fn(&mut tape, &bound)?;
    let value = tape.value(loss).item()?.as_f64();
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Tensor<E>> = bound.vars().into_iter().map(|v| grads.take(v)).collect();
    drop(tape);
    opt.step_params(params, &grads, lr)?;
    Ok(value)
}
