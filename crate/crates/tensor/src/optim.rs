//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use crate::error::{shape_err, Result, TensorError};
use crate::{Real, Tensor};

/// Optimizer state: one first/second moment buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    /// Learning rate used by the last step.
    pub lr: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &[Tensor<T>], weight_decay: f64) -> Self {
        Self::with_betas(params, weight_decay, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(
        params: &[Tensor<T>],
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        AdamW {
            weight_decay,
            beta1,
            beta2,
            eps,
            t: 0,
            lr: 0.0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One update. Rejects non-finite gradients without touching any state.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return shape_err(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            );
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return shape_err(
                    "adamw_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                );
            }
            if !g.is_finite() {
                return Err(TensorError::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.t += 1;
        self.lr = lr;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let decay = T::of(lr * self.weight_decay);
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((theta, &g), (m, v)) in it {
                let decayed = *theta - decay * *theta;
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let denom = (*v * inv_bc2).sqrt() + eps;
                *theta = decayed - step * *m / denom;
            }
        }
        Ok(())
    }
}

/// Outcome of [`clip_grad_global_norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub norm_before: f64,
    pub norm_after: f64,
    pub scale: f64,
}

fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
///
/// After rounding to `T` the rescaled norm is rechecked, and the factor is
/// nudged down until the bound holds exactly.
pub fn clip_grad_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> ClipReport {
    let norm = global_norm(grads);
    if norm.is_nan() || norm <= max_norm {
        return ClipReport {
            norm_before: norm,
            norm_after: norm,
            scale: 1.0,
        };
    }
    let original: Vec<Tensor<T>> = grads.to_vec();
    let mut scale = max_norm / norm;
    loop {
        let s = T::of(scale);
        for (g, o) in grads.iter_mut().zip(&original) {
            for (a, &b) in g.data_mut().iter_mut().zip(o.data()) {
                *a = b * s;
            }
        }
        let after = global_norm(grads);
        if after <= max_norm {
            return ClipReport {
                norm_before: norm,
                norm_after: after,
                scale,
            };
        }
        scale *= 1.0 - f32::EPSILON as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_first_step_hand_trace() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let g = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = AdamW::new(&p, 1e-4);
        opt.step(&mut p, &g, 1e-3).unwrap();
        let expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 1e-4 * 1.0;
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.99899990001).abs() < 1e-12);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let mut p = vec![Tensor::<f32>::from_fn(&[5], |i| i as f32 - 2.0)];
        let before = p.clone();
        let g = vec![Tensor::<f32>::zeros(&[5])];
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..3 {
            opt.step(&mut p, &g, 1e-3).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adamw_rejects_nan_and_keeps_state() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = AdamW::new(&p, 1e-4);
        let snapshot = opt.clone();
        let bad = vec![Tensor::<f64>::scalar(f64::NAN)];
        assert!(matches!(
            opt.step(&mut p, &bad, 1e-3),
            Err(TensorError::NonFinite(_))
        ));
        assert_eq!(opt, snapshot);
        assert_eq!(p[0].data()[0], 1.0);
    }

    #[test]
    fn adamw_identical_params_get_identical_updates() {
        let mut p = vec![Tensor::<f32>::scalar(0.3), Tensor::<f32>::scalar(0.3)];
        let g = vec![Tensor::<f32>::scalar(-0.7), Tensor::<f32>::scalar(-0.7)];
        let mut opt = AdamW::new(&p, 1e-4);
        for _ in 0..5 {
            opt.step(&mut p, &g, 1e-3).unwrap();
        }
        assert_eq!(p[0].data()[0].to_bits(), p[1].data()[0].to_bits());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Tensor::<f64>::new(&[2], vec![3.0, 4.0]).unwrap()];
        let r = clip_grad_global_norm(&mut g, 1.0);
        assert_eq!(r.norm_before, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[0].data()[1] - 0.8).abs() < 1e-12);
        assert!(r.norm_after <= 1.0);

        let mut g = vec![Tensor::<f64>::new(&[2], vec![0.3, 0.4]).unwrap()];
        let before = g.clone();
        clip_grad_global_norm(&mut g, 1.0);
        assert_eq!(g, before);

        let mut g = vec![Tensor::<f32>::zeros(&[3])];
        let r = clip_grad_global_norm(&mut g, 1.0);
        assert_eq!(r.scale, 1.0);
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }
}
