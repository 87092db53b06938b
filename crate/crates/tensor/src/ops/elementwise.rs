use super::Op;
use crate::error::{shape_err, Result};
use crate::{Real, Tape, Tensor, Var};

/// Lower clamp applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-12;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(super) fn relu_backward<T: Real>(g: &[T], x: &[T]) -> Vec<T> {
    g.iter()
        .zip(x)
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

pub(super) fn sigmoid_backward<T: Real>(g: &[T], y: &[T]) -> Vec<T> {
    g.iter()
        .zip(y)
        .map(|(&g, &y)| g * y * (T::one() - y))
        .collect()
}

pub(super) fn log_backward<T: Real>(g: &[T], x: &[T]) -> Vec<T> {
    let floor = T::of(LOG_FLOOR);
    g.iter()
        .zip(x)
        .map(|(&g, &x)| if x >= floor { g / x } else { T::zero() })
        .collect()
}

pub(super) fn clamp_backward<T: Real>(g: &[T], x: &[T], lo: T, hi: T) -> Vec<T> {
    g.iter()
        .zip(x)
        .map(|(&g, &x)| if x >= lo && x <= hi { g } else { T::zero() })
        .collect()
}

fn same_shape<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_with<T: Real>(a: &Var<T>, b: &Var<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl<T: Real> Tape<T> {
    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x.clone()))
    }

    /// Logistic function, evaluated in the branch form that never overflows.
    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(sigmoid);
        self.push(out, Op::Sigmoid(x.clone()))
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&self, x: &Var<T>) -> Var<T> {
        let floor = T::of(LOG_FLOOR);
        let out = x.value().map(|v| v.max(floor).ln());
        self.push(out, Op::Log(x.clone()))
    }

    pub fn clamp(&self, x: &Var<T>, lo: f64, hi: f64) -> Var<T> {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = x.value().map(|v| v.max(lo).min(hi));
        self.push(
            out,
            Op::Clamp {
                input: x.clone(),
                lo,
                hi,
            },
        )
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("add", a, b)?;
        Ok(self.push(zip_with(a, b, |x, y| x + y), Op::Add(a.clone(), b.clone())))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("sub", a, b)?;
        Ok(self.push(zip_with(a, b, |x, y| x - y), Op::Sub(a.clone(), b.clone())))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("mul", a, b)?;
        Ok(self.push(zip_with(a, b, |x, y| x * y), Op::Mul(a.clone(), b.clone())))
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        same_shape("div", a, b)?;
        Ok(self.push(zip_with(a, b, |x, y| x / y), Op::Div(a.clone(), b.clone())))
    }

    pub fn add_scalar(&self, x: &Var<T>, s: f64) -> Var<T> {
        let s = T::of(s);
        self.push(x.value().map(|v| v + s), Op::AddScalar(x.clone()))
    }

    pub fn mul_scalar(&self, x: &Var<T>, s: f64) -> Var<T> {
        let s = T::of(s);
        self.push(x.value().map(|v| v * s), Op::MulScalar(x.clone(), s))
    }

    /// `1 - x`.
    pub fn one_minus(&self, x: &Var<T>) -> Var<T> {
        let neg = self.mul_scalar(x, -1.0);
        self.add_scalar(&neg, 1.0)
    }

    /// Multiplies every element of `x` by the single value held in `factor`.
    pub fn scale(&self, x: &Var<T>, factor: &Var<T>) -> Result<Var<T>> {
        if factor.value().numel() != 1 {
            return shape_err(
                "scale",
                format!("factor must be scalar, got {:?}", factor.shape()),
            );
        }
        let f = factor.item();
        Ok(self.push(
            x.value().map(|v| v * f),
            Op::Scale {
                input: x.clone(),
                factor: factor.clone(),
            },
        ))
    }

    /// Sum of all elements (accumulated in `f64`), shaped `[1]`.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let s = x.value().sum_f64();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x.clone()))
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let s = x.value().sum_f64() / x.value().numel() as f64;
        self.push(Tensor::scalar(T::of(s)), Op::Mean(x.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!(sigmoid(-100.0f32).is_finite());
    }

    #[test]
    fn log_is_clamped() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[2], vec![0.0, -3.0]).unwrap());
        let y = tape.log(&x);
        assert!(y.data().iter().all(|v| (v - LOG_FLOOR.ln()).abs() < 1e-12));
        let l = tape.sum(&y);
        let g = tape.backward(&l).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0]);
    }
}
