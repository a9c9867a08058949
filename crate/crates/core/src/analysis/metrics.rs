//! Divergence and sparsity measures.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{is_gate_param, Hook, Model, ParamSet, Site};
use crate::tensor::{Float, Tensor};

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// `KL(softmax(p) || softmax(q))` in nats, for one row of logits.
pub fn kl_divergence<F: Float>(p_logits: &[F], q_logits: &[F]) -> Result<f64> {
    if p_logits.len() != q_logits.len() || p_logits.is_empty() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{} vs {} logits", p_logits.len(), q_logits.len()),
        ));
    }
    let lp = log_softmax(&p_logits.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
    let lq = log_softmax(&q_logits.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(&a, &b)| {
            if a == f64::NEG_INFINITY {
                0.0
            } else {
                a.exp() * (a - b)
            }
        })
        .sum();
    // rounding can leave a tiny negative value for identical inputs
    Ok(kl.max(0.0))
}

/// Mean absolute value over every non-gate parameter.
pub fn weight_l1<F: Float>(params: &ParamSet<F>) -> f64 {
    let (sum, n) =
        params
            .iter()
            .filter(|(name, _)| !is_gate_param(name))
            .fold((0.0, 0usize), |(s, n), (_, t)| {
                (
                    s + t.data().iter().map(|v| v.as_f64().abs()).sum::<f64>(),
                    n + t.numel(),
                )
            });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Default)]
struct AbsMean {
    sum: f64,
    count: usize,
}

impl<F: Float> Hook<F> for AbsMean {
    fn visit(&mut self, _layer: usize, site: Site, value: &Tensor<F>) -> Result<Option<Tensor<F>>> {
        if matches!(site, Site::AttnOut | Site::MlpOut) {
            self.sum += value.data().iter().map(|v| v.as_f64().abs()).sum::<f64>();
            self.count += value.numel();
        }
        Ok(None)
    }
}

/// Mean absolute value of attention and MLP block outputs over `batches`,
/// all layers pooled.
pub fn activation_l1<F: Float>(model: &Model<F>, batches: &[Batch]) -> Result<f64> {
    let mut acc = AbsMean::default();
    for b in batches {
        model.forward_with_hook(&b.inputs, &mut acc)?;
    }
    if acc.count == 0 {
        return Err(Error::InvalidArgument("no activations recorded".into()));
    }
    Ok(acc.sum / acc.count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]).unwrap(), 0.0);
        // one-hot against uniform over two classes
        let kl = kl_divergence(&[0.0, -1e9], &[0.0, 0.0]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);
        assert!(kl_divergence(&[1.0f32], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weight_l1_examples() {
        let mut p = ParamSet::<f64>::new();
        p.push("w", Tensor::from_f64([4], &[0.5, -0.5, 0.5, -0.5]).unwrap());
        p.push("gate.0.mlp.w", Tensor::from_f64([1], &[100.0]).unwrap());
        assert_eq!(weight_l1(&p), 0.5);
        let zero = ParamSet::<f64>::new();
        assert_eq!(weight_l1(&zero), 0.0);
    }
}
