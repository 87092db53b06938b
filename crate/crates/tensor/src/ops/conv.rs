use rayon::prelude::*;

use super::Op;
use crate::error::{arg_err, shape_err, Result};
use crate::{Real, Tape, Tensor, Var};

/// Output rows processed together so an output block stays cache resident.
const ROW_BLOCK: usize = 16;

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pad: usize,
    stride: usize,
}

fn geometry(
    xs: &[usize],
    ws: &[usize],
    bias_len: usize,
    pad: usize,
    stride: usize,
) -> Result<Geometry> {
    let (&[n, c, h, w], &[o, wc, kh, kw]) = (xs, ws) else {
        return shape_err(
            "conv2d",
            format!("expected NCHW input and OCkk kernel, got {xs:?} and {ws:?}"),
        );
    };
    if wc != c {
        return shape_err(
            "conv2d",
            format!("kernel expects {wc} input channels, input has {c}"),
        );
    }
    if bias_len != o {
        return shape_err(
            "conv2d",
            format!("bias has {bias_len} entries for {o} outputs"),
        );
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return arg_err("conv2d", format!("kernel {kh}x{kw} must have odd sides"));
    }
    if stride == 0 {
        return arg_err("conv2d", "stride must be at least 1");
    }
    let span_h = (h + 2 * pad).checked_sub(kh);
    let span_w = (w + 2 * pad).checked_sub(kw);
    let (Some(sh), Some(sw)) = (span_h, span_w) else {
        return shape_err(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded {h}x{w}"),
        );
    };
    if sh % stride != 0 || sw % stride != 0 {
        return shape_err(
            "conv2d",
            format!("({h}+2*{pad}-{kh}) or ({w}+2*{pad}-{kw}) not divisible by stride {stride}"),
        );
    }
    Ok(Geometry {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho: sh / stride + 1,
        wo: sw / stride + 1,
        pad,
        stride,
    })
}

/// Range of output columns `ox` for which `ox*stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // ox*stride + k >= pad  and  ox*stride + k < len + pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi_excl = if len + pad > k {
        (len + pad - k).div_ceil(stride)
    } else {
        0
    };
    (lo.min(out_len), hi_excl.min(out_len).max(lo.min(out_len)))
}

/// Accumulates one kernel row into one output row.
///
/// Each output element receives its taps in ascending kernel-column order,
/// which keeps the summation order identical to a plain nested loop.
#[inline]
fn accumulate_row<T: Real>(orow: &mut [T], xrow: &[T], wrow: &[T], pad: usize, stride: usize) {
    let (w, wo) = (xrow.len(), orow.len());
    if stride == 1 && wrow.len() == 3 && pad == 1 && w == wo && w >= 2 {
        let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
        orow[0] = (orow[0] + w1 * xrow[0]) + w2 * xrow[1];
        for ox in 1..wo - 1 {
            orow[ox] = ((orow[ox] + w0 * xrow[ox - 1]) + w1 * xrow[ox]) + w2 * xrow[ox + 1];
        }
        orow[wo - 1] = (orow[wo - 1] + w0 * xrow[wo - 2]) + w1 * xrow[wo - 1];
        return;
    }
    if stride == 1 {
        for (kj, &wv) in wrow.iter().enumerate() {
            let (lo, hi) = valid_range(kj, pad, 1, w, wo);
            if lo >= hi {
                continue;
            }
            let off = lo + kj - pad;
            for (o, &x) in orow[lo..hi].iter_mut().zip(&xrow[off..off + (hi - lo)]) {
                *o += wv * x;
            }
        }
        return;
    }
    for (ox, o) in orow.iter_mut().enumerate() {
        for (kj, &wv) in wrow.iter().enumerate() {
            let ix = (ox * stride + kj) as isize - pad as isize;
            if ix >= 0 && (ix as usize) < w {
                *o += wv * xrow[ix as usize];
            }
        }
    }
}

/// Direct 2-D convolution (cross-correlation) with zero padding.
///
/// Every output element starts at its bias and accumulates taps in
/// `(channel, kernel row, kernel column)` order.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = geometry(input.shape(), kernel.shape(), bias.numel(), padding, stride)?;
    let (x, wt, b) = (input.data(), kernel.data(), bias.data());
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.o * plane];
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, oplane)| {
            let (n, o) = (idx / g.o, idx % g.o);
            oplane.fill(b[o]);
            for rb in (0..g.ho).step_by(ROW_BLOCK) {
                let re = (rb + ROW_BLOCK).min(g.ho);
                for c in 0..g.c {
                    let xp = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for ki in 0..g.kh {
                        let wrow = &wt[((o * g.c + c) * g.kh + ki) * g.kw..][..g.kw];
                        for oy in rb..re {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy as usize >= g.h {
                                continue;
                            }
                            let iy = iy as usize;
                            accumulate_row(
                                &mut oplane[oy * g.wo..(oy + 1) * g.wo],
                                &xp[iy * g.w..(iy + 1) * g.w],
                                wrow,
                                g.pad,
                                g.stride,
                            );
                        }
                    }
                }
            }
        });
    Tensor::new(&[g.n, g.o, g.ho, g.wo], out)
}

pub(super) fn grad_input<T: Real>(
    gout: &[T],
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Vec<T> {
    let g = geometry(
        input.shape(),
        kernel.shape(),
        kernel.shape()[0],
        pad,
        stride,
    )
    .expect("validated in forward");
    let wt = kernel.data();
    let plane = g.h * g.w;
    let oplane = g.ho * g.wo;
    let mut dx = vec![T::zero(); g.n * g.c * plane];
    dx.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dplane)| {
            let (n, c) = (idx / g.c, idx % g.c);
            for o in 0..g.o {
                let gp = &gout[(n * g.o + o) * oplane..][..oplane];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = wt[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        let (lo, hi) = valid_range(kj, g.pad, g.stride, g.w, g.wo);
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy as usize >= g.h {
                                continue;
                            }
                            let drow = &mut dplane[iy as usize * g.w..][..g.w];
                            let grow = &gp[oy * g.wo..][..g.wo];
                            for ox in lo..hi {
                                drow[ox * g.stride + kj - g.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        });
    dx
}

pub(super) fn grad_kernel<T: Real>(
    gout: &[T],
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Vec<T> {
    let g = geometry(
        input.shape(),
        kernel.shape(),
        kernel.shape()[0],
        pad,
        stride,
    )
    .expect("validated in forward");
    let x = input.data();
    let oplane = g.ho * g.wo;
    let per_o = g.c * g.kh * g.kw;
    let mut dw = vec![T::zero(); g.o * per_o];
    dw.par_chunks_mut(per_o).enumerate().for_each(|(o, dwo)| {
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let (lo, hi) = valid_range(kj, g.pad, g.stride, g.w, g.wo);
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let gp = &gout[(n * g.o + o) * oplane..][..oplane];
                        let xp = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..g.ho {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy as usize >= g.h {
                                continue;
                            }
                            let xrow = &xp[iy as usize * g.w..][..g.w];
                            let grow = &gp[oy * g.wo..][..g.wo];
                            let mut row = T::zero();
                            for ox in lo..hi {
                                row += grow[ox] * xrow[ox * g.stride + kj - g.pad];
                            }
                            acc += row;
                        }
                    }
                    dwo[(c * g.kh + ki) * g.kw + kj] = acc;
                }
            }
        }
    });
    dw
}

pub(super) fn grad_bias<T: Real>(
    gout: &[T],
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    pad: usize,
    stride: usize,
) -> Vec<T> {
    let g = geometry(
        input.shape(),
        kernel.shape(),
        kernel.shape()[0],
        pad,
        stride,
    )
    .expect("validated in forward");
    let oplane = g.ho * g.wo;
    (0..g.o)
        .map(|o| {
            let mut acc = 0.0f64;
            for n in 0..g.n {
                acc += gout[(n * g.o + o) * oplane..][..oplane]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            T::of(acc)
        })
        .collect()
}

impl<T: Real> Tape<T> {
    /// 2-D convolution of `[N,C,H,W]` input with `[O,C,kh,kw]` kernel.
    pub fn conv2d(
        &self,
        input: &Var<T>,
        kernel: &Var<T>,
        bias: &Var<T>,
        padding: usize,
        stride: usize,
    ) -> Result<Var<T>> {
        let out = conv2d_forward(input.value(), kernel.value(), bias.value(), padding, stride)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input: input.clone(),
                kernel: kernel.clone(),
                bias: bias.clone(),
                padding,
                stride,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1..8 {
            for pad in 0..3 {
                for stride in 1..3 {
                    for k in 0..5 {
                        let out_len = 9;
                        let (lo, hi) = valid_range(k, pad, stride, len, out_len);
                        for ox in 0..out_len {
                            let ix = (ox * stride + k) as isize - pad as isize;
                            let ok = ix >= 0 && (ix as usize) < len;
                            assert_eq!(
                                ok,
                                ox >= lo && ox < hi,
                                "len {len} pad {pad} s {stride} k {k} ox {ox}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernels() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1]);
        assert!(conv2d_forward(&x, &w, &b, 1, 1).is_err());
        let w = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d_forward(&x, &w, &b, 0, 1).is_err());
    }

    #[test]
    fn rejects_non_integral_output() {
        let x = Tensor::<f64>::zeros(&[1, 1, 6, 6]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1]);
        // (6 - 3) / 2 is not integral
        assert!(conv2d_forward(&x, &w, &b, 0, 2).is_err());
        assert!(conv2d_forward(&x, &w, &b, 1, 2).is_err());
        assert_eq!(
            conv2d_forward(&x, &w, &b, 0, 3).unwrap().shape(),
            &[1, 1, 2, 2]
        );
    }
}
