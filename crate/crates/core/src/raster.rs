//! Plain image containers and non-differentiable resampling helpers.

use hmsv_tensor::ops::bilinear_resize;
use hmsv_tensor::Tensor;

use crate::error::{Error, Result};

/// 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width * 3 != data.len() {
            return Err(Error::invalid(format!(
                "rgb buffer of {} bytes for {height}x{width}",
                data.len()
            )));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            height,
            width,
            data: rgb
                .iter()
                .copied()
                .cycle()
                .take(height * width * 3)
                .collect(),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// One channel scaled to `[0, 1]`.
    pub fn channel(&self, c: usize) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .chunks_exact(3)
                .map(|p| p[c] as f64 / 255.0)
                .collect(),
        }
    }
}

/// Single-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::invalid(format!(
                "plane buffer of {} values for {height}x{width}",
                data.len()
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Plane {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear resize with the same convention as the network's upsampling.
    pub fn resize(&self, height: usize, width: usize) -> Plane {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let t =
            Tensor::new(&[1, 1, self.height, self.width], self.data.clone()).expect("plane dims");
        let r = bilinear_resize(&t, height, width).expect("non-zero target size");
        Plane {
            height,
            width,
            data: r.into_data(),
        }
    }

    /// Resize a binary plane: bilinear, then threshold at 0.5 (inclusive).
    pub fn resize_binary(&self, height: usize, width: usize) -> Plane {
        self.resize(height, width)
            .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
    }
}

/// Reflect-101 index: `... c b | a b c ... | b a ...`, any offset.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalised 1-D Gaussian taps of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with reflect-101 borders.
pub fn gaussian_blur(p: &Plane, size: usize, sigma: f64) -> Plane {
    let k = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (p.height, p.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &p.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * row[reflect_index(x as isize + t as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect_index(y as isize + t as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Plane {
        height: h,
        width: w,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_examples() {
        let seq: Vec<usize> = (-4..9).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(seq, vec![4, 3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn blur_preserves_constants() {
        let p = Plane::filled(7, 9, 0.3);
        let b = gaussian_blur(&p, 51, 8.5);
        assert!(b.data.iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }
}
