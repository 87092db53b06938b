use super::Op;
use crate::error::{shape_err, Result};
use crate::{Real, Tape, Tensor, Var};

pub(super) fn softmax_backward<T: Real>(g: &[T], y: &[T]) -> Vec<T> {
    let dot: f64 = g.iter().zip(y).map(|(&g, &y)| (g * y).as_f64()).sum();
    g.iter()
        .zip(y)
        .map(|(&g, &y)| T::of(y.as_f64() * (g.as_f64() - dot)))
        .collect()
}

pub(super) fn split_channels<T: Real>(g: &[T], out_shape: &[usize], xs: &[Var<T>]) -> Vec<Vec<T>> {
    let (n, hw) = (out_shape[0], out_shape[2] * out_shape[3]);
    let ctot = out_shape[1];
    let mut parts: Vec<Vec<T>> = xs
        .iter()
        .map(|x| Vec::with_capacity(x.value().numel()))
        .collect();
    for b in 0..n {
        let mut c0 = 0;
        for (x, part) in xs.iter().zip(parts.iter_mut()) {
            let c = x.shape()[1];
            let start = (b * ctot + c0) * hw;
            part.extend_from_slice(&g[start..start + c * hw]);
            c0 += c;
        }
    }
    parts
}

impl<T: Real> Tape<T> {
    /// Softmax of a 1-D vector, computed with the max subtracted.
    pub fn softmax(&self, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 1 {
            return shape_err("softmax", format!("expected a vector, got {:?}", x.shape()));
        }
        let v = x.value().to_f64_vec();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|&a| (a - max).exp()).collect();
        let s: f64 = e.iter().sum();
        let out = Tensor::from_f64(x.shape(), &e.iter().map(|a| a / s).collect::<Vec<_>>())?;
        Ok(self.push(out, Op::Softmax(x.clone())))
    }

    /// Element `index` of `x` (flat order) as a `[1]` value.
    pub fn select(&self, x: &Var<T>, index: usize) -> Result<Var<T>> {
        if index >= x.value().numel() {
            return shape_err(
                "select",
                format!("index {index} out of {}", x.value().numel()),
            );
        }
        Ok(self.push(
            Tensor::scalar(x.data()[index]),
            Op::Select {
                input: x.clone(),
                index,
            },
        ))
    }

    /// Concatenates `NCHW` tensors along the channel axis.
    pub fn concat_channels(&self, xs: &[Var<T>]) -> Result<Var<T>> {
        let Some(first) = xs.first() else {
            return shape_err("concat_channels", "no inputs");
        };
        let [n, _, h, w] = first.value().dims4()?;
        let mut ctot = 0;
        for x in xs {
            let [xn, xc, xh, xw] = x.value().dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", x.shape(), first.shape()),
                );
            }
            ctot += xc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for x in xs {
                let c = x.shape()[1];
                data.extend_from_slice(&x.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[n, ctot, h, w], data)?;
        Ok(self.push(out, Op::ConcatChannels(xs.to_vec())))
    }

    /// Batch item `n` of an `NCHW` tensor, shaped `[1, C, H, W]`.
    pub fn batch_item(&self, x: &Var<T>, n: usize) -> Result<Var<T>> {
        let out = x.value().batch_item(n)?;
        Ok(self.push(
            out,
            Op::BatchItem {
                input: x.clone(),
                n,
            },
        ))
    }
}
