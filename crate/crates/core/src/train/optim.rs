//! AdamW with decoupled weight decay, global-norm clipping and a cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Maximum global L2 norm of the gradient; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
        }
    }
}

/// First and second moments per parameter plus the number of updates taken.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<F: Float = f32> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> OptimState<F> {
    pub fn new(params: &[Tensor<F>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, params: &[Tensor<F>]) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape())
    }
}

/// Learning rate at `step` of a half-cosine decay from `peak` to `floor`.
pub fn cosine_lr(step: u64, total_steps: u64, peak: f64, floor: f64) -> f64 {
    let frac = if total_steps == 0 {
        1.0
    } else {
        (step.min(total_steps)) as f64 / total_steps as f64
    };
    floor + 0.5 * (peak - floor) * (1.0 + (PI * frac).cos())
}

pub fn global_norm<F: Float>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One bias-corrected AdamW update. Gradients are clipped first; a non-finite
/// gradient aborts the step without touching parameters or state.
pub fn adamw_step<F: Float>(
    params: &mut [Tensor<F>],
    grads: &mut [Tensor<F>],
    state: &mut OptimState<F>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<StepStats> {
    if params.len() != grads.len() || !state.matches(params) {
        return Err(Error::shape(
            "adamw_step",
            "parameters, gradients and optimizer state disagree",
        ));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    let grad_norm = match cfg.grad_clip {
        Some(max) => clip_grad_norm(grads, max),
        None => global_norm(grads),
    };
    let clipped_norm = global_norm(grads);

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1f, b2f) = (F::of(b1), F::of(b2));
    let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
    let step_size = F::of(lr / bc1);
    let bc2_sqrt = F::of(bc2.sqrt());
    let eps = F::of(cfg.eps);
    let decay = F::of(1.0 - lr * cfg.weight_decay);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1f * *mi + one_b1 * gi;
            *vi = b2f * *vi + one_b2 * gi * gi;
            if cfg.weight_decay != 0.0 {
                *w *= decay;
            }
            *w -= step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(StepStats {
        grad_norm,
        clipped_norm,
    })
}
