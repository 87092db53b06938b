use super::Op;
use crate::error::{arg_err, Result};
use crate::{Real, Tape, Tensor, Var};

/// Source taps for one output coordinate under the half-pixel-centre rule.
#[derive(Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn taps<T: Real>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            Tap {
                i0,
                i1,
                frac: T::of(src - i0 as f64),
            }
        })
        .collect()
}

/// Bilinear resize of every plane of an `NCHW` tensor.
///
/// Source coordinate is `(i + 0.5) * in / out - 0.5`, clamped to the edge.
/// Interpolation is written as `a + f * (b - a)` so constants are preserved
/// exactly.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return arg_err("upsample_bilinear", "output size must be at least 1x1");
    }
    let [n, c, h, w] = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let (ty, tx) = (taps::<T>(h, out_h), taps::<T>(w, out_w));
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for p in 0..n * c {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for y in &ty {
            let (r0, r1) = (&plane[y.i0 * w..][..w], &plane[y.i1 * w..][..w]);
            for xt in &tx {
                let top = r0[xt.i0] + xt.frac * (r0[xt.i1] - r0[xt.i0]);
                let bot = r1[xt.i0] + xt.frac * (r1[xt.i1] - r1[xt.i0]);
                out.push(top + y.frac * (bot - top));
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

pub(super) fn backward<T: Real>(g: &[T], input: &Tensor<T>, out_shape: &[usize]) -> Vec<T> {
    let [n, c, h, w] = input.dims4().expect("validated in forward");
    let (oh, ow) = (out_shape[2], out_shape[3]);
    if h == oh && w == ow {
        return g.to_vec();
    }
    let (ty, tx) = (taps::<T>(h, oh), taps::<T>(w, ow));
    let mut d = vec![T::zero(); n * c * h * w];
    let one = T::one();
    for p in 0..n * c {
        let dp = &mut d[p * h * w..(p + 1) * h * w];
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        for (oy, y) in ty.iter().enumerate() {
            for (ox, xt) in tx.iter().enumerate() {
                let gv = gp[oy * ow + ox];
                let (wy1, wx1) = (y.frac, xt.frac);
                let (wy0, wx0) = (one - wy1, one - wx1);
                dp[y.i0 * w + xt.i0] += gv * wy0 * wx0;
                dp[y.i0 * w + xt.i1] += gv * wy0 * wx1;
                dp[y.i1 * w + xt.i0] += gv * wy1 * wx0;
                dp[y.i1 * w + xt.i1] += gv * wy1 * wx1;
            }
        }
    }
    d
}

impl<T: Real> Tape<T> {
    /// Bilinear resampling to `out_h x out_w`; same-size calls return `input`.
    pub fn upsample_bilinear(&self, input: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let [_, _, h, w] = input.value().dims4()?;
        if out_h == 0 || out_w == 0 {
            return arg_err("upsample_bilinear", "output size must be at least 1x1");
        }
        if h == out_h && w == out_w {
            return Ok(input.clone());
        }
        let out = bilinear_resize(input.value(), out_h, out_w)?;
        Ok(self.push(
            out,
            Op::Upsample {
                input: input.clone(),
            },
        ))
    }
}
