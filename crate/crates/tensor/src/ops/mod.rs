//! Differentiable operations. Each submodule holds the forward kernel, its
//! backward rule and the `Tape` method that records it.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod resample;
mod structural;

pub use conv::conv2d_forward;
pub use norm::BatchNormStats;
pub use pool::{PoolMode, PoolPadding};
pub use resample::bilinear_resize;

use crate::{Real, Tensor, Var};

pub(crate) enum Op<T: Real> {
    Conv2d {
        input: Var<T>,
        kernel: Var<T>,
        bias: Var<T>,
        padding: usize,
        stride: usize,
    },
    Pool {
        input: Var<T>,
        argidx: Vec<usize>,
    },
    Upsample {
        input: Var<T>,
    },
    BatchNorm {
        input: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var<T>),
    Sigmoid(Var<T>),
    Log(Var<T>),
    Clamp {
        input: Var<T>,
        lo: T,
        hi: T,
    },
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Div(Var<T>, Var<T>),
    AddScalar(Var<T>),
    MulScalar(Var<T>, T),
    Scale {
        input: Var<T>,
        factor: Var<T>,
    },
    Sum(Var<T>),
    Mean(Var<T>),
    Softmax(Var<T>),
    Select {
        input: Var<T>,
        index: usize,
    },
    ConcatChannels(Vec<Var<T>>),
    BatchItem {
        input: Var<T>,
        n: usize,
    },
}

impl<T: Real> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<&Var<T>> {
        use Op::*;
        match self {
            Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![input, kernel, bias],
            BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Pool { input, .. }
            | Upsample { input }
            | Clamp { input, .. }
            | Select { input, .. }
            | BatchItem { input, .. } => vec![input],
            Relu(x)
            | Sigmoid(x)
            | Log(x)
            | AddScalar(x)
            | MulScalar(x, _)
            | Sum(x)
            | Mean(x)
            | Softmax(x) => vec![x],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            Scale { input, factor } => vec![input, factor],
            ConcatChannels(xs) => xs.iter().collect(),
        }
    }

    /// Vector-Jacobian products for every input that requires a gradient.
    pub(crate) fn backward(&self, out: &Tensor<T>, g: &[T]) -> Vec<(Var<T>, Vec<T>)> {
        use Op::*;
        let mut res = Vec::new();
        let mut put = |v: &Var<T>, f: &mut dyn FnMut() -> Vec<T>| {
            if v.requires_grad() {
                res.push((v.clone(), f()));
            }
        };
        match self {
            Conv2d {
                input,
                kernel,
                bias,
                padding,
                stride,
            } => {
                let (x, w) = (input.value(), kernel.value());
                put(input, &mut || conv::grad_input(g, x, w, *padding, *stride));
                put(kernel, &mut || {
                    conv::grad_kernel(g, x, w, *padding, *stride)
                });
                put(bias, &mut || conv::grad_bias(g, x, w, *padding, *stride));
            }
            Pool { input, argidx } => put(input, &mut || {
                pool::backward(g, argidx, input.value().numel())
            }),
            Upsample { input } => put(input, &mut || {
                resample::backward(g, input.value(), out.shape())
            }),
            BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = input.value().shape();
                let gv = gamma.value().data();
                put(input, &mut || {
                    norm::grad_input(g, shape, gv, xhat, inv_std, *batch_stats)
                });
                put(gamma, &mut || norm::grad_gamma(g, shape, xhat));
                put(beta, &mut || norm::grad_beta(g, shape));
            }
            Relu(x) => put(x, &mut || elementwise::relu_backward(g, x.data())),
            Sigmoid(x) => put(x, &mut || elementwise::sigmoid_backward(g, out.data())),
            Log(x) => put(x, &mut || elementwise::log_backward(g, x.data())),
            Clamp { input, lo, hi } => put(input, &mut || {
                elementwise::clamp_backward(g, input.data(), *lo, *hi)
            }),
            Add(a, b) => {
                put(a, &mut || g.to_vec());
                put(b, &mut || g.to_vec());
            }
            Sub(a, b) => {
                put(a, &mut || g.to_vec());
                put(b, &mut || g.iter().map(|&v| -v).collect());
            }
            Mul(a, b) => {
                put(a, &mut || mul_slices(g, b.data()));
                put(b, &mut || mul_slices(g, a.data()));
            }
            Div(a, b) => {
                let (av, bv) = (a.data(), b.data());
                put(a, &mut || g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
                put(b, &mut || {
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect()
                });
            }
            AddScalar(x) => put(x, &mut || g.to_vec()),
            MulScalar(x, s) => put(x, &mut || g.iter().map(|&v| v * *s).collect()),
            Scale { input, factor } => {
                let f = factor.item();
                put(input, &mut || g.iter().map(|&v| v * f).collect());
                put(factor, &mut || {
                    let s: f64 = g
                        .iter()
                        .zip(input.data())
                        .map(|(&g, &x)| (g * x).as_f64())
                        .sum();
                    vec![T::of(s)]
                });
            }
            Sum(x) => put(x, &mut || vec![g[0]; x.value().numel()]),
            Mean(x) => put(x, &mut || {
                let n = x.value().numel();
                vec![g[0] / T::of(n as f64); n]
            }),
            Softmax(x) => put(x, &mut || structural::softmax_backward(g, out.data())),
            Select { input, index } => put(input, &mut || {
                let mut d = vec![T::zero(); input.value().numel()];
                d[*index] = g[0];
                d
            }),
            ConcatChannels(xs) => {
                let parts = structural::split_channels(g, out.shape(), xs);
                for (x, part) in xs.iter().zip(parts) {
                    let mut part = Some(part);
                    put(x, &mut || part.take().unwrap_or_default());
                }
            }
            BatchItem { input, n } => put(input, &mut || {
                let mut d = vec![T::zero(); input.value().numel()];
                let len = g.len();
                d[n * len..(n + 1) * len].copy_from_slice(g);
                d
            }),
        }
        res
    }
}

fn mul_slices<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&a, &b)| a * b).collect()
}
