//! Fundus preprocessing: LAB and green-channel CLAHE paths, optic-disc
//! localisation and the peripheral loss weight map.

use hmsv_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::raster::{gaussian_blur, Plane, RgbImage};

const XN: f64 = 0.95047;
const YN: f64 = 1.0;
const ZN: f64 = 1.08883;
const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_finv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// CIE L*a*b* (D65) of one sRGB triple with components in `[0, 1]`.
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let (fx, fy, fz) = (lab_f(x / XN), lab_f(y / YN), lab_f(z / ZN));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab_pixel`], clamped to `[0, 1]`.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let (x, y, z) = (XN * lab_finv(fx), YN * lab_finv(fy), ZN * lab_finv(fz));
    let r = 3.240_454_2 * x - 1.537_138_5 * y - 0.498_531_4 * z;
    let g = -0.969_266_0 * x + 1.876_010_8 * y + 0.041_556_0 * z;
    let b = 0.055_643_4 * x - 0.204_025_9 * y + 1.057_225_2 * z;
    [r, g, b].map(|c| linear_to_srgb(c.clamp(0.0, 1.0)).clamp(0.0, 1.0))
}

/// Planar `[L, a, b]` image.
pub fn rgb_to_lab(img: &RgbImage) -> [Plane; 3] {
    let n = img.height * img.width;
    let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        let lab = rgb_to_lab_pixel([px[0], px[1], px[2]].map(|v| v as f64 / 255.0));
        for c in 0..3 {
            planes[c][i] = lab[c];
        }
    }
    planes.map(|data| Plane {
        height: img.height,
        width: img.width,
        data,
    })
}

/// Planar LAB back to planar RGB in `[0, 1]`.
pub fn lab_to_rgb(lab: &[Plane; 3]) -> [Plane; 3] {
    let (h, w) = (lab[0].height, lab[0].width);
    let mut planes = [
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
        Vec::with_capacity(h * w),
    ];
    for ((&l, &a), &b) in lab[0].data.iter().zip(&lab[1].data).zip(&lab[2].data) {
        let rgb = lab_to_rgb_pixel([l, a, b]);
        for (plane, v) in planes.iter_mut().zip(rgb) {
            plane.push(v);
        }
    }
    planes.map(|data| Plane {
        height: h,
        width: w,
        data,
    })
}

/// Quantises a value in `[0, 1]` to its 8-bit histogram bin.
#[inline]
pub fn bin_of(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Per-tile equalisation mapping.
#[derive(Debug, Clone, PartialEq)]
pub enum TileMap {
    /// Constant tile: values pass through unchanged.
    Identity,
    /// Output level (`0..=255`) per input bin.
    Table(Box<[f64; 256]>),
}

impl TileMap {
    /// Maps a value in `[0, 1]` to `[0, 1]`.
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            TileMap::Identity => v,
            TileMap::Table(t) => t[bin_of(v)] / 255.0,
        }
    }
}

/// Clipped-histogram equalisation mapping for the pixels of one tile.
pub fn tile_mapping(values: impl Iterator<Item = f64>, clip_limit: f64) -> TileMap {
    let mut hist = [0u64; 256];
    let mut count = 0u64;
    for v in values {
        hist[bin_of(v)] += 1;
        count += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return TileMap::Identity;
    }
    let p = count as f64;
    let limit = clip_limit * p / 256.0;
    let mut clipped = [0.0f64; 256];
    let mut excess = 0.0;
    for (c, &h) in clipped.iter_mut().zip(&hist) {
        let h = h as f64;
        *c = h.min(limit);
        excess += h - *c;
    }
    let share = excess / 256.0;
    let vmin = hist.iter().position(|&c| c > 0).expect("non-empty tile");
    let mut cdf = [0.0f64; 256];
    let mut acc = 0.0;
    for (b, c) in cdf.iter_mut().enumerate() {
        acc += clipped[b] + share;
        *c = acc;
    }
    let cdf_min = cdf[vmin];
    let denom = p - cdf_min;
    let mut table = Box::new([0.0f64; 256]);
    for (t, &c) in table.iter_mut().zip(&cdf) {
        *t = (255.0 * (c - cdf_min) / denom).round().clamp(0.0, 255.0);
    }
    TileMap::Table(table)
}

/// Tile boundaries along one axis: tile size by ceiling division, with the
/// tile count recomputed so that no tile is empty.
fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    let size = len.div_ceil(tiles.clamp(1, len));
    (0..len.div_ceil(size))
        .map(|i| (i * size, ((i + 1) * size).min(len)))
        .collect()
}

/// Interpolation neighbours and weight of coordinate `p` between tile
/// centres.
fn locate(p: f64, centres: &[f64]) -> (usize, usize, f64) {
    let last = centres.len() - 1;
    if p <= centres[0] {
        return (0, 0, 0.0);
    }
    if p >= centres[last] {
        return (last, last, 0.0);
    }
    let i = centres.partition_point(|&c| c <= p) - 1;
    (i, i + 1, (p - centres[i]) / (centres[i + 1] - centres[i]))
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        a
    } else {
        a + t * (b - a)
    }
}

/// Contrast-limited adaptive histogram equalisation of a `[0, 1]` plane.
///
/// Values are binned to 8 bits; mappings of the four surrounding tiles are
/// blended bilinearly between tile centres.
pub fn clahe(p: &Plane, clip_limit: f64, tiles: (usize, usize)) -> Plane {
    let ybounds = tile_bounds(p.height, tiles.0);
    let xbounds = tile_bounds(p.width, tiles.1);
    let mut maps = Vec::with_capacity(ybounds.len() * xbounds.len());
    for &(y0, y1) in &ybounds {
        for &(x0, x1) in &xbounds {
            let vals = (y0..y1).flat_map(|y| (x0..x1).map(move |x| p.at(y, x)));
            maps.push(tile_mapping(vals, clip_limit));
        }
    }
    let centre = |&(a, b): &(usize, usize)| (a + b - 1) as f64 / 2.0;
    let cy: Vec<f64> = ybounds.iter().map(centre).collect();
    let cx: Vec<f64> = xbounds.iter().map(centre).collect();
    let nx = xbounds.len();
    let mut out = Vec::with_capacity(p.data.len());
    for y in 0..p.height {
        let (i0, i1, fy) = locate(y as f64, &cy);
        for x in 0..p.width {
            let (j0, j1, fx) = locate(x as f64, &cx);
            let v = p.at(y, x);
            let top = lerp(maps[i0 * nx + j0].apply(v), maps[i0 * nx + j1].apply(v), fx);
            let bot = lerp(maps[i1 * nx + j0].apply(v), maps[i1 * nx + j1].apply(v), fx);
            out.push(lerp(top, bot, fy).clamp(0.0, 1.0));
        }
    }
    Plane {
        height: p.height,
        width: p.width,
        data: out,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub enabled: bool,
    pub lab_clip: f64,
    pub green_clip: f64,
    pub tiles: (usize, usize),
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            enabled: true,
            lab_clip: 2.0,
            green_clip: 3.0,
            tiles: (8, 8),
        }
    }
}

/// Four planes at native resolution: enhanced R, G, B and enhanced green.
pub fn enhance(img: &RgbImage, cfg: &PreprocessConfig) -> [Plane; 4] {
    if !cfg.enabled {
        let g = img.channel(1);
        return [img.channel(0), g.clone(), img.channel(2), g];
    }
    let [l, a, b] = rgb_to_lab(img);
    let l = clahe(&l.map(|v| v / 100.0), cfg.lab_clip, cfg.tiles).map(|v| v * 100.0);
    let [r, g, bl] = lab_to_rgb(&[l, a, b]);
    let green = clahe(&img.channel(1), cfg.green_clip, cfg.tiles);
    [r, g, bl, green]
}

/// Stacks planes into a `[C, H, W]` tensor.
pub fn planes_to_tensor(planes: &[Plane]) -> Tensor<f32> {
    let (h, w) = (planes[0].height, planes[0].width);
    let data = planes
        .iter()
        .flat_map(|p| p.data.iter().map(|&v| v as f32))
        .collect();
    Tensor::new(&[planes.len(), h, w], data).expect("plane sizes agree")
}

/// The network input `[4, H, W]` with values in `[0, 1]`.
pub fn assemble_four_channel(
    img: &RgbImage,
    cfg: &PreprocessConfig,
    target: (usize, usize),
) -> Tensor<f32> {
    let planes = enhance(img, cfg).map(|p| p.resize(target.0, target.1).map(|v| v.clamp(0.0, 1.0)));
    planes_to_tensor(&planes)
}

/// Blur kernel size for the disc detector: 51, or the largest odd size that
/// fits a smaller image.
pub fn disc_kernel_size(height: usize, width: usize) -> usize {
    let m = height.min(width).max(1);
    let odd = if m % 2 == 1 { m } else { m - 1 };
    odd.min(51)
}

/// Arg-maximum of the blurred lightness channel, earliest row-major on ties.
pub fn locate_optic_disc(img: &RgbImage) -> (usize, usize) {
    let [l, _, _] = rgb_to_lab(img);
    let k = disc_kernel_size(img.height, img.width);
    let blurred = gaussian_blur(&l, k, k as f64 / 6.0);
    let mut best = 0;
    for (i, &v) in blurred.data.iter().enumerate() {
        if v > blurred.data[best] {
            best = i;
        }
    }
    (best / img.width, best % img.width)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub center: (usize, usize),
    /// Normalised distance to the disc centre, `[0, 1]`.
    pub distance: Plane,
    /// `1 + 2 d`.
    pub weights: Plane,
}

pub fn weight_map(center: (usize, usize), height: usize, width: usize) -> WeightMap {
    let (cy, cx) = (center.0 as f64, center.1 as f64);
    let dist = |y: f64, x: f64| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
    let (ly, lx) = ((height - 1) as f64, (width - 1) as f64);
    let dmax = [(0.0, 0.0), (0.0, lx), (ly, 0.0), (ly, lx)]
        .iter()
        .map(|&(y, x)| dist(y, x))
        .fold(0.0, f64::max);
    let mut d = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            d.push(if dmax > 0.0 {
                (dist(y as f64, x as f64) / dmax).min(1.0)
            } else {
                0.0
            });
        }
    }
    let distance = Plane {
        height,
        width,
        data: d,
    };
    let weights = distance.map(|v| 1.0 + 2.0 * v);
    WeightMap {
        center,
        distance,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_bounds_cover_axis() {
        assert_eq!(
            tile_bounds(10, 8),
            vec![(0, 2), (2, 4), (4, 6), (6, 8), (8, 10)]
        );
        assert_eq!(tile_bounds(64, 8).len(), 8);
        assert_eq!(tile_bounds(3, 8), vec![(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn locate_clamps_outside_centres() {
        let c = [1.5, 5.5];
        assert_eq!(locate(0.0, &c), (0, 0, 0.0));
        assert_eq!(locate(7.0, &c), (1, 1, 0.0));
        assert_eq!(locate(3.5, &c), (0, 1, 0.5));
    }

    #[test]
    fn disc_kernel_for_small_images() {
        assert_eq!(disc_kernel_size(64, 64), 51);
        assert_eq!(disc_kernel_size(40, 64), 39);
        assert_eq!(disc_kernel_size(33, 50), 33);
    }
}
