//! Procedural vessel trees on a fundus-like background, plus the hard
//! skeleton tools used to count centreline breaks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::RgbImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    /// Branching levels below each root segment of a three-root tree; trees
    /// with fewer roots branch one level deeper per missing root.
    pub depth: usize,
    pub root_width: f64,
    pub width_decay: f64,
    /// Darkening of the green channel at the canvas centre, `(0, 1]`.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Maximum heading change per step, radians.
    pub tortuosity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            depth: 3,
            root_width: 3.0,
            width_decay: 0.7,
            contrast: 0.5,
            noise_sigma: 0.02,
            tortuosity: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Segment advances along columns; rows are the minor axis.
    Horizontal,
    Vertical,
}

/// One rendered stroke: a polyline monotone along its major axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// `(row, col)` centreline points.
    pub points: Vec<(f64, f64)>,
    pub width: usize,
    pub axis: Axis,
    pub leaf: bool,
    pub parent: Option<usize>,
    pub root: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    /// Row-major `{0, 1}` mask.
    pub mask: Vec<u8>,
    pub segments: Vec<Segment>,
    pub disc: (f64, f64),
}

impl SynthSample {
    pub fn vessel_fraction(&self) -> f64 {
        self.mask.iter().map(|&v| v as f64).sum::<f64>() / self.mask.len() as f64
    }
}

/// Heading in radians; 0 points along +col, pi/2 along +row.
fn axis_of(theta: f64) -> Axis {
    if theta.cos().abs() >= theta.sin().abs() {
        Axis::Horizontal
    } else {
        Axis::Vertical
    }
}

/// Keeps a heading within 40 degrees of the axis direction it started on.
fn clamp_heading(theta: f64, anchor: f64) -> f64 {
    let lim = 40f64.to_radians();
    let d = (theta - anchor + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
        - std::f64::consts::PI;
    anchor + d.clamp(-lim, lim)
}

/// Pixels covered by a segment, with their anti-aliased coverage.
///
/// For every integer step along the major axis the centreline's minor
/// coordinate `m` is interpolated; a pixel belongs to the stroke when its
/// minor offset lies in `(-w/2, w/2]`.
pub fn render_segment(seg: &Segment, size: usize) -> Vec<(usize, usize, f64)> {
    let key = |p: &(f64, f64)| match seg.axis {
        Axis::Horizontal => (p.1, p.0),
        Axis::Vertical => (p.0, p.1),
    };
    let mut pts: Vec<(f64, f64)> = seg.points.iter().map(key).collect();
    if pts.first().map(|p| p.0) > pts.last().map(|p| p.0) {
        pts.reverse();
    }
    let half = seg.width as f64 / 2.0;
    let mut out = Vec::new();
    let (lo, hi) = (pts[0].0.ceil() as i64, pts[pts.len() - 1].0.floor() as i64);
    let mut k = 0;
    for t in lo..=hi {
        let tf = t as f64;
        while k + 1 < pts.len() - 1 && pts[k + 1].0 < tf {
            k += 1;
        }
        let m = if pts.len() == 1 || pts[k + 1].0 == pts[k].0 {
            pts[k].1
        } else {
            let f = ((tf - pts[k].0) / (pts[k + 1].0 - pts[k].0)).clamp(0.0, 1.0);
            pts[k].1 + f * (pts[k + 1].1 - pts[k].1)
        };
        let first = (m - half).floor() as i64 + 1;
        let last = (m + half).floor() as i64;
        for u in first..=last {
            if t < 0 || u < 0 || t >= size as i64 || u >= size as i64 {
                continue;
            }
            let off = (u as f64 - m).abs();
            let cov = (half + 0.5 - off).clamp(0.0, 1.0);
            let (r, c) = match seg.axis {
                Axis::Horizontal => (u as usize, t as usize),
                Axis::Vertical => (t as usize, u as usize),
            };
            out.push((r, c, cov.max(0.5)));
        }
    }
    out
}

struct Walker<'a, R: Rng> {
    cfg: &'a SynthConfig,
    rng: &'a mut R,
    depth: usize,
    segments: Vec<Segment>,
}

impl<R: Rng> Walker<'_, R> {
    fn grow(
        &mut self,
        start: (f64, f64),
        theta: f64,
        level: usize,
        parent: Option<usize>,
        root: usize,
    ) {
        let cfg = self.cfg;
        let leaf = level == self.depth;
        let width = if leaf {
            1
        } else {
            (cfg.root_width * cfg.width_decay.powi(level as i32))
                .round()
                .max(1.0) as usize
        };
        let s = cfg.size as f64;
        let length = s * self.rng.random_range(0.28..0.40) * 0.8f64.powi(level as i32);
        let steps = length.ceil().max(2.0) as usize;
        let inside = |d: f64| {
            let (y, x) = (start.0 + d * theta.sin(), start.1 + d * theta.cos());
            y >= 0.0 && x >= 0.0 && y <= s - 1.0 && x <= s - 1.0
        };
        let theta = if inside(3.0) {
            theta
        } else {
            theta + std::f64::consts::PI
        };
        let axis = axis_of(theta);
        let anchor = match axis {
            Axis::Horizontal => {
                if theta.cos() >= 0.0 {
                    0.0
                } else {
                    std::f64::consts::PI
                }
            }
            Axis::Vertical => {
                if theta.sin() >= 0.0 {
                    std::f64::consts::FRAC_PI_2
                } else {
                    -std::f64::consts::FRAC_PI_2
                }
            }
        };
        let mut heading = clamp_heading(theta, anchor);
        let mut points = vec![start];
        let mut p = start;
        let mut truncated = false;
        for _ in 0..steps {
            heading = clamp_heading(
                heading + self.rng.random_range(-cfg.tortuosity..=cfg.tortuosity),
                anchor,
            );
            p = (p.0 + heading.sin(), p.1 + heading.cos());
            if p.0 < 0.0 || p.1 < 0.0 || p.0 > s - 1.0 || p.1 > s - 1.0 {
                truncated = true;
                break;
            }
            points.push(p);
        }
        let id = self.segments.len();
        // a walk cut short by the canvas edge branches from its middle
        let fork = if truncated {
            points[points.len() * 3 / 5]
        } else {
            *points.last().expect("start point")
        };
        let grew = points.len() > 1;
        self.segments.push(Segment {
            points,
            width,
            axis,
            leaf,
            parent,
            root,
        });
        if leaf || !grew {
            self.segments[id].leaf = true;
            self.segments[id].width = 1;
            return;
        }
        let spread = self.rng.random_range(0.35..0.75);
        for sign in [-1.0, 1.0] {
            self.grow(fork, heading + sign * spread, level + 1, Some(id), root);
        }
    }
}

/// Draws one sample. Pure in `(cfg, rng)`.
pub fn generate<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> SynthSample {
    let n = cfg.size;
    let s = n as f64;
    let disc = (
        s / 2.0 + rng.random_range(-0.15..0.15) * s,
        s / 2.0 + rng.random_range(-0.15..0.15) * s,
    );
    let roots = rng.random_range(1..=3usize);
    let base = rng.random_range(0.0..std::f64::consts::TAU);
    let mut walker = Walker {
        cfg,
        rng,
        // sparser trees branch deeper
        depth: cfg.depth + 3 - roots,
        segments: Vec::new(),
    };
    for r in 0..roots {
        let theta = base + r as f64 * std::f64::consts::TAU / roots as f64;
        walker.grow(disc, theta, 0, None, r);
    }
    let segments = walker.segments;
    let rng = walker.rng;

    let mut mask = vec![0u8; n * n];
    let mut cover = vec![0.0f64; n * n];
    for seg in &segments {
        for (r, c, a) in render_segment(seg, n) {
            mask[r * n + c] = 1;
            cover[r * n + c] = f64::max(cover[r * n + c], a);
        }
    }

    let rmax = (2.0f64).sqrt() * s / 2.0;
    let disc_r = s / 10.0;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).expect("finite sigma");
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64, x as f64);
            let rc = ((yf - s / 2.0).powi(2) + (xf - s / 2.0).powi(2)).sqrt() / rmax;
            let vignette = 1.0 - 0.35 * rc * rc;
            let dd = ((yf - disc.0).powi(2) + (xf - disc.1).powi(2)) / (disc_r * disc_r);
            let glow = 0.35 * (-dd / 2.0).exp();
            let k = cfg.contrast * (1.0 - 0.6 * rc.min(1.0)) * cover[y * n + x];
            let base = [0.78, 0.42, 0.22];
            let dark = [0.45, 1.0, 0.6];
            for c in 0..3 {
                let v = (base[c] * vignette + glow) * (1.0 - dark[c] * k);
                let v = v + noise.sample(rng);
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    SynthSample {
        image: RgbImage {
            height: n,
            width: n,
            data,
        },
        mask,
        segments,
        disc,
    }
}

/// Zhang-Suen thinning of a binary row-major image, followed by removal of
/// pixels left in 2×2 blocks wherever that keeps their neighbourhood
/// 8-connected.
pub fn thin(mask: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut img: Vec<u8> = mask.iter().map(|&v| (v != 0) as u8).collect();
    let at = |img: &[u8], y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
            0
        } else {
            img[y as usize * width + x as usize]
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..height as isize {
                for x in 0..width as isize {
                    if at(&img, y, x) == 0 {
                        continue;
                    }
                    // p2..p9 clockwise from north
                    let nb = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b: u8 = nb.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8)
                        .filter(|&i| nb[i] == 0 && nb[(i + 1) % 8] == 1)
                        .count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (nb[0], nb[2], nb[4], nb[6]);
                    let ok = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if ok {
                        remove.push(y as usize * width + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                img[i] = 0;
            }
        }
        if !changed {
            break;
        }
    }
    while let Some(i) = removable_block_pixel(&img, height, width) {
        img[i] = 0;
    }
    img
}

const RING: [(isize, isize); 8] = [
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
];

/// First pixel of a 2×2 foreground block whose foreground neighbours form
/// a single 8-connected group.
fn removable_block_pixel(img: &[u8], height: usize, width: usize) -> Option<usize> {
    let on = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && img[y as usize * width + x as usize] == 1
    };
    for y in 0..height.saturating_sub(1) as isize {
        for x in 0..width.saturating_sub(1) as isize {
            if !(on(y, x) && on(y, x + 1) && on(y + 1, x) && on(y + 1, x + 1)) {
                continue;
            }
            for (py, px) in [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)] {
                let nb: Vec<(isize, isize)> = RING
                    .iter()
                    .map(|&(dy, dx)| (py + dy, px + dx))
                    .filter(|&(a, b)| on(a, b))
                    .collect();
                if neighbour_groups(&nb) == 1 {
                    return Some(py as usize * width + px as usize);
                }
            }
        }
    }
    None
}

fn neighbour_groups(nb: &[(isize, isize)]) -> usize {
    let mut group: Vec<usize> = (0..nb.len()).collect();
    fn root(g: &mut [usize], mut i: usize) -> usize {
        while g[i] != i {
            i = g[i];
        }
        i
    }
    for i in 0..nb.len() {
        for j in i + 1..nb.len() {
            if (nb[i].0 - nb[j].0).abs() <= 1 && (nb[i].1 - nb[j].1).abs() <= 1 {
                let (a, b) = (root(&mut group, i), root(&mut group, j));
                group[a] = b;
            }
        }
    }
    (0..nb.len()).filter(|&i| root(&mut group, i) == i).count()
}

/// Number of 8-connected foreground components.
pub fn count_components8(mask: &[u8], height: usize, width: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / width) as isize, (i % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let j = ny as usize * width + nx as usize;
                    if mask[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

/// Extra centreline fragments induced by `pred`:
/// `max(0, CC8(skel(g) & pred) - CC8(skel(g)))`.
pub fn skeleton_breaks(pred: &[u8], g: &[u8], height: usize, width: usize) -> usize {
    assert_eq!(pred.len(), g.len(), "mask sizes differ");
    let skel = thin(g, height, width);
    let base = count_components8(&skel, height, width);
    let kept: Vec<u8> = skel
        .iter()
        .zip(pred)
        .map(|(&s, &p)| (s != 0 && p != 0) as u8)
        .collect();
    count_components8(&kept, height, width).saturating_sub(base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_of_diagonal_and_split() {
        let m = [1, 0, 0, 0, 1, 0, 0, 0, 1];
        assert_eq!(count_components8(&m, 3, 3), 1);
        let m = [1, 0, 1, 0, 0, 0, 1, 0, 1];
        assert_eq!(count_components8(&m, 3, 3), 4);
    }

    #[test]
    fn thinning_keeps_one_pixel_line() {
        let mut m = vec![0u8; 5 * 7];
        for x in 1..6 {
            m[2 * 7 + x] = 1;
        }
        assert_eq!(thin(&m, 5, 7), m);
    }

    #[test]
    fn width_one_segment_is_one_pixel_across() {
        let seg = Segment {
            points: vec![(3.2, 0.0), (5.7, 8.0)],
            width: 1,
            axis: Axis::Horizontal,
            leaf: true,
            parent: None,
            root: 0,
        };
        let px = render_segment(&seg, 16);
        assert_eq!(px.len(), 9);
    }
}
