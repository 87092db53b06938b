//! Image files and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::{Plane, RgbImage};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Reads an 8-bit RGB image (PNG, PNM or baseline TIFF).
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(h as usize, w as usize, img.into_raw())
}

/// Reads a vessel mask; any grey level above 127 is foreground.
pub fn read_mask(path: &Path) -> Result<Plane> {
    let img = image::open(path)
        .map_err(|e| image_err(path, e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| (v > 127) as u8 as f64)
        .collect();
    Plane::new(h as usize, w as usize, data)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    image::save_buffer(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| image_err(path, e))
}

/// Writes a `[0, 1]` plane as an 8-bit greyscale image.
pub fn write_gray(path: &Path, p: &Plane) -> Result<()> {
    let bytes: Vec<u8> = p
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        p.width as u32,
        p.height as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| image_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub dataset: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

impl ManifestEntry {
    /// Image file stem.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Tab-separated list of samples with a `dataset image mask` header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: &str = "dataset\timage\tmask";

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::invalid(format!(
                    "manifest header must be `{MANIFEST_HEADER}`"
                )))
            }
        }
        let mut entries = Vec::new();
        for (no, line) in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::invalid(format!(
                    "manifest line {}: expected 3 columns, found {}",
                    no + 1,
                    cols.len()
                )));
            }
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                dataset: cols[0].to_string(),
                image: resolve(cols[1]),
                mask: resolve(cols[2]),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&read_text(path)?, base)
    }

    /// Serialises with paths relative to `base` where possible.
    pub fn render(&self, base: &Path) -> String {
        let rel = |p: &Path| {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.dataset,
                rel(&e.image),
                rel(&e.mask)
            ));
        }
        out
    }

    /// Distinct dataset tags in first-appearance order.
    pub fn datasets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.dataset) {
                out.push(e.dataset.clone());
            }
        }
        out
    }

    /// `dataset/id` label of entry `i`.
    pub fn label(&self, i: usize) -> String {
        format!("{}/{}", self.entries[i].dataset, self.entries[i].id())
    }

    /// Synthetic manifest with the given per-dataset counts.
    pub fn dummy(composition: &[(&str, usize)]) -> Self {
        let mut entries = Vec::new();
        for &(name, n) in composition {
            for i in 0..n {
                entries.push(ManifestEntry {
                    dataset: name.to_string(),
                    image: PathBuf::from(format!("{name}/{i:03}.png")),
                    mask: PathBuf::from(format!("{name}/{i:03}_mask.png")),
                });
            }
        }
        Manifest { entries }
    }
}
