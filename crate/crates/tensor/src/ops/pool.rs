use super::Op;
use crate::error::{arg_err, shape_err, Result};
use crate::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolPadding {
    /// No padding; windows must tile the input exactly.
    Valid,
    /// Pad by `(k-1)/2` on every side, repeating the edge values.
    Replicate,
}

/// Returns the pooled values and, for each output, the flat input index of
/// the selected element (first in row-major window order on ties).
fn forward<T: Real>(
    x: &Tensor<T>,
    mode: PoolMode,
    k: usize,
    stride: usize,
    padding: PoolPadding,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if k == 0 {
        return arg_err("pool2d", "window size must be positive");
    }
    if stride == 0 {
        return arg_err("pool2d", "stride must be positive");
    }
    let [n, c, h, w] = x.dims4()?;
    let pad = match padding {
        PoolPadding::Valid => 0,
        PoolPadding::Replicate => {
            if k.is_multiple_of(2) {
                return arg_err("pool2d", "replicate padding needs an odd window");
            }
            (k - 1) / 2
        }
    };
    if h + 2 * pad < k || w + 2 * pad < k {
        return shape_err("pool2d", format!("window {k} larger than input {h}x{w}"));
    }
    if !(h + 2 * pad - k).is_multiple_of(stride) || !(w + 2 * pad - k).is_multiple_of(stride) {
        return shape_err(
            "pool2d",
            format!("input {h}x{w} not tiled by window {k} with stride {stride}"),
        );
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let clampi = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = usize::MAX;
                let mut best = T::zero();
                for di in 0..k {
                    let iy = clampi((oy * stride + di) as isize - pad as isize, h);
                    for dj in 0..k {
                        let ix = clampi((ox * stride + dj) as isize - pad as isize, w);
                        let idx = base + iy * w + ix;
                        let v = data[idx];
                        let better = match mode {
                            PoolMode::Max => v > best,
                            PoolMode::Min => v < best,
                        };
                        if best_idx == usize::MAX || better {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(&[n, c, ho, wo], out)?, arg))
}

pub(super) fn backward<T: Real>(g: &[T], argidx: &[usize], numel: usize) -> Vec<T> {
    let mut d = vec![T::zero(); numel];
    for (&gv, &i) in g.iter().zip(argidx) {
        d[i] += gv;
    }
    d
}

impl<T: Real> Tape<T> {
    /// Max or min pooling over `k x k` windows.
    pub fn pool2d(
        &self,
        input: &Var<T>,
        mode: PoolMode,
        k: usize,
        stride: usize,
        padding: PoolPadding,
    ) -> Result<Var<T>> {
        let (out, argidx) = forward(input.value(), mode, k, stride, padding)?;
        Ok(self.push(
            out,
            Op::Pool {
                input: input.clone(),
                argidx,
            },
        ))
    }

    pub fn max_pool2d(&self, input: &Var<T>, k: usize) -> Result<Var<T>> {
        self.pool2d(input, PoolMode::Max, k, k, PoolPadding::Valid)
    }
}
