use super::Op;
use crate::error::{shape_err, Result};
use crate::{Real, Tape, Tensor, Var};

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

fn channel_planes(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2] * shape[3])
}

pub(super) fn grad_input<T: Real>(
    g: &[T],
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
) -> Vec<T> {
    let (n, c, hw) = channel_planes(shape);
    let mut d = vec![T::zero(); g.len()];
    let m = (n * hw) as f64;
    for ch in 0..c {
        let idx = |b: usize| (b * c + ch) * hw;
        let (gm, is) = (gamma[ch], inv_std[ch]);
        if !batch_stats {
            for b in 0..n {
                let o = idx(b);
                for i in o..o + hw {
                    d[i] = g[i] * gm * is;
                }
            }
            continue;
        }
        let (mut sum_dx, mut sum_dx_xhat) = (0.0f64, 0.0f64);
        for b in 0..n {
            let o = idx(b);
            for i in o..o + hw {
                let dxh = (g[i] * gm).as_f64();
                sum_dx += dxh;
                sum_dx_xhat += dxh * xhat[i].as_f64();
            }
        }
        let (mean_dx, mean_dx_xhat) = (sum_dx / m, sum_dx_xhat / m);
        let is64 = is.as_f64();
        for b in 0..n {
            let o = idx(b);
            for i in o..o + hw {
                let dxh = (g[i] * gm).as_f64();
                d[i] = T::of(is64 * (dxh - mean_dx - xhat[i].as_f64() * mean_dx_xhat));
            }
        }
    }
    d
}

pub(super) fn grad_gamma<T: Real>(g: &[T], shape: &[usize], xhat: &[T]) -> Vec<T> {
    let (n, c, hw) = channel_planes(shape);
    (0..c)
        .map(|ch| {
            let mut acc = 0.0f64;
            for b in 0..n {
                let o = (b * c + ch) * hw;
                for i in o..o + hw {
                    acc += (g[i] * xhat[i]).as_f64();
                }
            }
            T::of(acc)
        })
        .collect()
}

pub(super) fn grad_beta<T: Real>(g: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, hw) = channel_planes(shape);
    (0..c)
        .map(|ch| {
            let mut acc = 0.0f64;
            for b in 0..n {
                let o = (b * c + ch) * hw;
                acc += g[o..o + hw].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            T::of(acc)
        })
        .collect()
}

impl<T: Real> Tape<T> {
    /// Per-channel batch normalisation of an `NCHW` tensor.
    ///
    /// With `train` set, normalises with the batch mean and (biased) variance
    /// and folds them into `stats` with the given momentum (the running
    /// variance uses the unbiased estimate). Otherwise `stats` is used as is.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        input: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: &mut BatchNormStats<T>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var<T>> {
        let [n, c, h, w] = input.value().dims4()?;
        if gamma.value().numel() != c || beta.value().numel() != c {
            return shape_err(
                "batchnorm2d",
                format!(
                    "gamma/beta have {}/{} entries for {c} channels",
                    gamma.value().numel(),
                    beta.value().numel()
                ),
            );
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return shape_err("batchnorm2d", "running stats channel count");
        }
        let hw = h * w;
        let x = input.data();
        let (gv, bv) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(c);
        let m = (n * hw) as f64;
        for ch in 0..c {
            let planes = || (0..n).map(move |b| (b * c + ch) * hw);
            let (mean, var) = if train {
                let mut s = 0.0f64;
                for o in planes() {
                    s += x[o..o + hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = s / m;
                let mut sq = 0.0f64;
                for o in planes() {
                    sq += x[o..o + hw]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / m;
                let unbiased = if m > 1.0 { sq / (m - 1.0) } else { var };
                stats.mean[ch] =
                    T::of((1.0 - momentum) * stats.mean[ch].as_f64() + momentum * mean);
                stats.var[ch] =
                    T::of((1.0 - momentum) * stats.var[ch].as_f64() + momentum * unbiased);
                (mean, var)
            } else {
                (stats.mean[ch].as_f64(), stats.var[ch].as_f64())
            };
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(T::of(is));
            for o in planes() {
                for i in o..o + hw {
                    let xh = T::of((x[i].as_f64() - mean) * is);
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let out = Tensor::new(input.shape(), out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input: input.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
                batch_stats: train,
            },
        ))
    }
}
