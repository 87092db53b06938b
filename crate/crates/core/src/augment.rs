//! Training-time augmentation (spatial, photometric, mixup) and the
//! eight-element dihedral group used for test-time augmentation.

use hmsv_tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::clahe;
use crate::raster::{gaussian_blur, reflect_index, Plane};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_rot90: f64,
    pub p_shift_scale_rotate: f64,
    pub shift_limit: f64,
    pub scale_limit: f64,
    /// Degrees.
    pub rotate_limit: f64,
    pub p_elastic: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub p_brightness_contrast: f64,
    pub brightness_limit: f64,
    pub contrast_limit: f64,
    pub p_hsv: f64,
    pub hue_shift: f64,
    pub sat_shift: f64,
    pub val_shift: f64,
    pub p_clahe: f64,
    pub clahe_clip: f64,
    pub p_gamma: f64,
    pub gamma_range: (f64, f64),
    pub p_noise: f64,
    pub noise_sigma: f64,
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
    pub p_mixup: f64,
    pub mixup_alpha: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_rot90: 0.5,
            p_shift_scale_rotate: 0.5,
            shift_limit: 0.1,
            scale_limit: 0.1,
            rotate_limit: 30.0,
            p_elastic: 0.25,
            elastic_alpha: 120.0,
            elastic_sigma: 6.0,
            p_brightness_contrast: 0.5,
            brightness_limit: 0.3,
            contrast_limit: 0.3,
            p_hsv: 0.3,
            hue_shift: 0.02,
            sat_shift: 0.1,
            val_shift: 0.1,
            p_clahe: 0.2,
            clahe_clip: 4.0,
            p_gamma: 0.3,
            gamma_range: (0.8, 1.2),
            p_noise: 0.2,
            noise_sigma: 0.02,
            p_blur: 0.1,
            blur_sigma: (0.3, 1.0),
            p_mixup: 0.5,
            mixup_alpha: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn none() -> Self {
        AugmentConfig {
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_rot90: 0.0,
            p_shift_scale_rotate: 0.0,
            p_elastic: 0.0,
            p_brightness_contrast: 0.0,
            p_hsv: 0.0,
            p_clahe: 0.0,
            p_gamma: 0.0,
            p_noise: 0.0,
            p_blur: 0.0,
            p_mixup: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("augment.p_hflip", self.p_hflip),
            ("augment.p_vflip", self.p_vflip),
            ("augment.p_rot90", self.p_rot90),
            ("augment.p_shift_scale_rotate", self.p_shift_scale_rotate),
            ("augment.p_elastic", self.p_elastic),
            ("augment.p_brightness_contrast", self.p_brightness_contrast),
            ("augment.p_hsv", self.p_hsv),
            ("augment.p_clahe", self.p_clahe),
            ("augment.p_gamma", self.p_gamma),
            ("augment.p_noise", self.p_noise),
            ("augment.p_blur", self.p_blur),
            ("augment.p_mixup", self.p_mixup),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(
                    name,
                    format!("probability {p} outside [0, 1]"),
                ));
            }
        }
        let ranges = [
            ("augment.gamma_range", self.gamma_range),
            ("augment.blur_sigma", self.blur_sigma),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::config(
                    name,
                    format!("ill-ordered range ({lo}, {hi})"),
                ));
            }
        }
        let nonneg = [
            ("augment.shift_limit", self.shift_limit),
            ("augment.scale_limit", self.scale_limit),
            ("augment.rotate_limit", self.rotate_limit),
            ("augment.elastic_alpha", self.elastic_alpha),
            ("augment.brightness_limit", self.brightness_limit),
            ("augment.contrast_limit", self.contrast_limit),
            ("augment.hue_shift", self.hue_shift),
            ("augment.sat_shift", self.sat_shift),
            ("augment.val_shift", self.val_shift),
            ("augment.noise_sigma", self.noise_sigma),
        ];
        for (name, v) in nonneg {
            if v.is_nan() || v < 0.0 {
                return Err(Error::config(name, "must be nonnegative"));
            }
        }
        if !(self.elastic_sigma > 0.0 && self.clahe_clip > 0.0 && self.mixup_alpha > 0.0) {
            return Err(Error::config(
                "augment",
                "elastic_sigma, clahe_clip and mixup_alpha must be positive",
            ));
        }
        if self.scale_limit >= 1.0 {
            return Err(Error::config("augment.scale_limit", "must be below 1"));
        }
        Ok(())
    }
}

/// One training example at native resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Enhanced R, G, B and green planes.
    pub image: Vec<Plane>,
    /// Ground truth, binary unless produced by mixup.
    pub mask: Plane,
    pub weight: Plane,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    fn map_geometry(&self, f: impl Fn(&Plane) -> Plane) -> Sample {
        Sample {
            image: self.image.iter().map(&f).collect(),
            mask: f(&self.mask),
            weight: f(&self.weight),
        }
    }
}

pub fn hflip(p: &Plane) -> Plane {
    let mut out = Vec::with_capacity(p.data.len());
    for row in p.data.chunks_exact(p.width) {
        out.extend(row.iter().rev());
    }
    Plane {
        data: out,
        ..p.clone()
    }
}

pub fn vflip(p: &Plane) -> Plane {
    let mut out = Vec::with_capacity(p.data.len());
    for row in p.data.chunks_exact(p.width).rev() {
        out.extend_from_slice(row);
    }
    Plane {
        data: out,
        ..p.clone()
    }
}

/// Counter-clockwise quarter turn; swaps height and width.
pub fn rot90(p: &Plane) -> Plane {
    let (h, w) = (p.height, p.width);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..w {
        for x in 0..h {
            out.push(p.at(x, w - 1 - y));
        }
    }
    Plane {
        height: w,
        width: h,
        data: out,
    }
}

/// Bilinear sample at a fractional position with reflect-101 borders.
pub fn sample_bilinear(p: &Plane, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |yy: isize, xx: isize| p.at(reflect_index(yy, p.height), reflect_index(xx, p.width));
    let top = at(y0, x0) + fx * (at(y0, x0 + 1) - at(y0, x0));
    let bot = at(y0 + 1, x0) + fx * (at(y0 + 1, x0 + 1) - at(y0 + 1, x0));
    top + fy * (bot - top)
}

pub fn sample_nearest(p: &Plane, y: f64, x: f64) -> f64 {
    p.at(
        reflect_index(y.round() as isize, p.height),
        reflect_index(x.round() as isize, p.width),
    )
}

/// Resamples a sample through a backward coordinate map `(y, x) -> source`.
/// Image and weights are bilinear, the mask nearest-neighbour.
fn warp(s: &Sample, map: impl Fn(usize, usize) -> (f64, f64)) -> Sample {
    let (h, w) = (s.height(), s.width());
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| map(y, x))
        .collect();
    let resample = |p: &Plane, f: fn(&Plane, f64, f64) -> f64| Plane {
        height: h,
        width: w,
        data: coords.iter().map(|&(sy, sx)| f(p, sy, sx)).collect(),
    };
    Sample {
        image: s
            .image
            .iter()
            .map(|p| resample(p, sample_bilinear))
            .collect(),
        mask: resample(&s.mask, sample_nearest),
        weight: resample(&s.weight, sample_bilinear),
    }
}

/// Shift (fraction of size), isotropic scale and rotation (degrees) about
/// the image centre.
pub fn shift_scale_rotate(s: &Sample, shift: (f64, f64), scale: f64, degrees: f64) -> Sample {
    let (h, w) = (s.height() as f64, s.width() as f64);
    let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (ty, tx) = (shift.0 * h, shift.1 * w);
    warp(s, |y, x| {
        let dy = y as f64 - cy - ty;
        let dx = x as f64 - cx - tx;
        let sy = (cos * dy - sin * dx) / scale;
        let sx = (sin * dy + cos * dx) / scale;
        (cy + sy, cx + sx)
    })
}

/// Smoothed random displacement fields `(dy, dx)`.
pub fn elastic_field<R: Rng>(
    h: usize,
    w: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> (Plane, Plane) {
    let size = 2 * (3.0 * sigma).ceil() as usize + 1;
    let mut field = || {
        let noise = Plane {
            height: h,
            width: w,
            data: (0..h * w).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        };
        gaussian_blur(&noise, size, sigma).map(|v| v * alpha)
    };
    let dy = field();
    let dx = field();
    (dy, dx)
}

pub fn elastic(s: &Sample, dy: &Plane, dx: &Plane) -> Sample {
    warp(s, |y, x| (y as f64 + dy.at(y, x), x as f64 + dx.at(y, x)))
}

/// Random geometric transform applied identically to image, mask and
/// weights.
pub fn spatial_augment<R: Rng>(s: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut out = s.clone();
    if rng.random::<f64>() < cfg.p_hflip {
        out = out.map_geometry(hflip);
    }
    if rng.random::<f64>() < cfg.p_vflip {
        out = out.map_geometry(vflip);
    }
    if rng.random::<f64>() < cfg.p_rot90 {
        for _ in 0..rng.random_range(1..=3) {
            out = out.map_geometry(rot90);
        }
    }
    if rng.random::<f64>() < cfg.p_shift_scale_rotate {
        let sl = cfg.shift_limit;
        let shift = (rng.random_range(-sl..=sl), rng.random_range(-sl..=sl));
        let scale = 1.0 + rng.random_range(-cfg.scale_limit..=cfg.scale_limit);
        let deg = rng.random_range(-cfg.rotate_limit..=cfg.rotate_limit);
        out = shift_scale_rotate(&out, shift, scale, deg);
    }
    if rng.random::<f64>() < cfg.p_elastic {
        let (dy, dx) = elastic_field(
            out.height(),
            out.width(),
            cfg.elastic_alpha,
            cfg.elastic_sigma,
            rng,
        );
        out = elastic(&out, &dy, &dx);
    }
    out
}

/// `v (1 + contrast) + brightness`, clamped.
pub fn brightness_contrast(p: &Plane, brightness: f64, contrast: f64) -> Plane {
    p.map(|v| (v * (1.0 + contrast) + brightness).clamp(0.0, 1.0))
}

pub fn gamma(p: &Plane, g: f64) -> Plane {
    if g == 1.0 {
        return p.clone();
    }
    p.map(|v| v.clamp(0.0, 1.0).powf(g))
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Shifts hue (fraction of a turn), saturation and value of the first three
/// planes.
pub fn hsv_shift(image: &mut [Plane], dh: f64, ds: f64, dv: f64) {
    for i in 0..image[0].data.len() {
        let [h, s, v] = rgb_to_hsv([image[0].data[i], image[1].data[i], image[2].data[i]]);
        let rgb = hsv_to_rgb([h + dh, (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0)]);
        for c in 0..3 {
            image[c].data[i] = rgb[c].clamp(0.0, 1.0);
        }
    }
}

/// Random intensity transforms of the image planes; output in `[0, 1]`.
pub fn photometric_augment<R: Rng>(
    image: &[Plane],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Vec<Plane> {
    let mut img = image.to_vec();
    if rng.random::<f64>() < cfg.p_brightness_contrast {
        let b = rng.random_range(-cfg.brightness_limit..=cfg.brightness_limit);
        let c = rng.random_range(-cfg.contrast_limit..=cfg.contrast_limit);
        img = img.iter().map(|p| brightness_contrast(p, b, c)).collect();
    }
    if rng.random::<f64>() < cfg.p_hsv && img.len() >= 3 {
        let dh = rng.random_range(-cfg.hue_shift..=cfg.hue_shift);
        let ds = rng.random_range(-cfg.sat_shift..=cfg.sat_shift);
        let dv = rng.random_range(-cfg.val_shift..=cfg.val_shift);
        hsv_shift(&mut img, dh, ds, dv);
    }
    if rng.random::<f64>() < cfg.p_clahe {
        img = img
            .iter()
            .map(|p| clahe(p, cfg.clahe_clip, (8, 8)))
            .collect();
    }
    if rng.random::<f64>() < cfg.p_gamma {
        let g = rng.random_range(cfg.gamma_range.0..=cfg.gamma_range.1);
        img = img.iter().map(|p| gamma(p, g)).collect();
    }
    if rng.random::<f64>() < cfg.p_noise && cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
        for p in &mut img {
            for v in &mut p.data {
                *v += n.sample(rng);
            }
        }
    }
    if rng.random::<f64>() < cfg.p_blur {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        let size = 2 * (3.0 * sigma).ceil() as usize + 1;
        img = img.iter().map(|p| gaussian_blur(p, size, sigma)).collect();
    }
    for p in &mut img {
        p.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    img
}

/// Draws a mixup coefficient from `Beta(alpha, alpha)`.
pub fn sample_lambda<R: Rng>(alpha: f64, rng: &mut R) -> f64 {
    Beta::new(alpha, alpha).expect("positive alpha").sample(rng)
}

/// `lambda a + (1 - lambda) b` for image, target and weights.
pub fn mixup(a: &Sample, b: &Sample, lambda: f64) -> Sample {
    let mix = |x: &Plane, y: &Plane| Plane {
        height: x.height,
        width: x.width,
        data: x
            .data
            .iter()
            .zip(&y.data)
            .map(|(&u, &v)| lambda * u + (1.0 - lambda) * v)
            .collect(),
    };
    Sample {
        image: a
            .image
            .iter()
            .zip(&b.image)
            .map(|(x, y)| mix(x, y))
            .collect(),
        mask: mix(&a.mask, &b.mask),
        weight: mix(&a.weight, &b.weight),
    }
}

/// Element of the dihedral group of the square: `x -> R^k F^f x`, where `F`
/// mirrors columns and `R` is a counter-clockwise quarter turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct D4 {
    pub rot: u8,
    pub flip: bool,
}

impl D4 {
    pub const IDENTITY: D4 = D4 {
        rot: 0,
        flip: false,
    };

    pub fn all() -> [D4; 8] {
        let mut out = [D4::IDENTITY; 8];
        for (i, e) in out.iter_mut().enumerate() {
            *e = D4 {
                rot: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }

    /// `self` after `other`.
    pub fn compose(self, other: D4) -> D4 {
        let k2 = if self.flip {
            (4 - other.rot) % 4
        } else {
            other.rot
        };
        D4 {
            rot: (self.rot + k2) % 4,
            flip: self.flip ^ other.flip,
        }
    }

    pub fn inverse(self) -> D4 {
        if self.flip {
            self
        } else {
            D4 {
                rot: (4 - self.rot) % 4,
                flip: false,
            }
        }
    }

    /// Applies the transform to every `n x n` plane of a row-major buffer.
    pub fn apply_planes<T: Copy>(self, data: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(data.len());
        for plane in data.chunks_exact(n * n) {
            for y in 0..n {
                for x in 0..n {
                    // undo the rotation, then the flip
                    let (mut sy, mut sx) = (y, x);
                    for _ in 0..self.rot {
                        (sy, sx) = (sx, n - 1 - sy);
                    }
                    if self.flip {
                        sx = n - 1 - sx;
                    }
                    out.push(plane[sy * n + sx]);
                }
            }
        }
        out
    }

    pub fn apply<T: Real>(self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let n = square_side(t)?;
        Ok(Tensor::new(t.shape(), self.apply_planes(t.data(), n))?)
    }
}

fn square_side<T: Real>(t: &Tensor<T>) -> Result<usize> {
    let s = t.shape();
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::invalid(format!(
            "test-time augmentation needs square input, got {s:?}"
        )));
    }
    Ok(s[s.len() - 1])
}

/// The eight transformed copies of a square image.
pub fn tta_expand<T: Real>(x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    D4::all().iter().map(|e| e.apply(x)).collect()
}

/// Maps each prediction back through its transform and averages.
pub fn tta_fold<T: Real>(preds: &[Tensor<T>]) -> Result<Tensor<T>> {
    if preds.len() != 8 {
        return Err(Error::invalid(format!(
            "expected 8 predictions, got {}",
            preds.len()
        )));
    }
    let back: Vec<Vec<f64>> = D4::all()
        .iter()
        .zip(preds)
        .map(|(e, p)| Ok(e.inverse().apply(p)?.to_f64_vec()))
        .collect::<Result<_>>()?;
    // pairwise sums, so eight equal predictions average back exactly
    let mean: Vec<f64> = (0..back[0].len())
        .map(|i| {
            let v: [f64; 8] = std::array::from_fn(|k| back[k][i]);
            (((v[0] + v[1]) + (v[2] + v[3])) + ((v[4] + v[5]) + (v[6] + v[7]))) / 8.0
        })
        .collect();
    Ok(Tensor::from_f64(preds[0].shape(), &mean)?)
}
