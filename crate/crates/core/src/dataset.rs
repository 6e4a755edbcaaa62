//! PNG image I/O and dataset ingestion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Every tenth image (in sorted order) goes to the validation split.
pub const VAL_EVERY: usize = 10;

/// Reads a PNG as a `[1, 3, H, W]` tensor in `[0, 1]`. Other formats are
/// refused so that distortion is always measured against lossless input.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path)?;
    match image::guess_format(&bytes) {
        Ok(ImageFormat::Png) => {}
        _ => return Err(Error::Input(format!("{} is not a PNG file", path.display()))),
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        T::c(f64::from(raw[p * 3 + c]) / 255.0)
    })
}

/// 8-bit levels of a `[0, 1]` tensor (clamped, rounded), same layout.
pub fn to_u8<T: Scalar>(x: &Tensor<T>) -> Vec<u8> {
    x.data().iter().map(|v| (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn tensor_to_rgb<T: Scalar>(x: &Tensor<T>) -> Result<RgbImage> {
    let (n, c, h, w) = x.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("expected [1, 3, H, W], got {:?}", x.shape())));
    }
    let levels = to_u8(x);
    let mut raw = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for p in 0..h * w {
            raw[p * 3 + ch] = levels[ch * h * w + p];
        }
    }
    RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("image buffer size".into()))
}

pub fn save_png<T: Scalar>(x: &Tensor<T>, path: &Path) -> Result<()> {
    tensor_to_rgb(x)?.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Sorted list of `.png` files under `dir` (recursive).
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Ingest(format!("{} is not a directory", dir.display())));
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Ingest(e.to_string()))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p.to_path_buf());
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    TextChartsGraphics,
    AnimationMovieGame,
    MixedNsSc,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::TextChartsGraphics, Category::AnimationMovieGame, Category::MixedNsSc];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::TextChartsGraphics => "text-charts-graphics",
            Category::AnimationMovieGame => "animation-movie-game",
            Category::MixedNsSc => "mixed-ns-sc",
        }
    }

    /// Guess from a directory name, e.g. `Text_Charts`, `anime`, `mixed`.
    pub fn infer(name: &str) -> Option<Category> {
        let n = name.to_ascii_lowercase();
        if n == Category::MixedNsSc.as_str() || ["mix", "natural"].iter().any(|k| n.contains(k)) {
            Some(Category::MixedNsSc)
        } else if ["text", "chart", "graphic", "document", "slide"].iter().any(|k| n.contains(k)) {
            Some(Category::TextChartsGraphics)
        } else if ["anim", "movie", "game", "cartoon"].iter().any(|k| n.contains(k)) {
            Some(Category::AnimationMovieGame)
        } else {
            None
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub category: Category,
    pub width: u32,
    pub height: u32,
    /// Smaller than the training patch in either dimension.
    pub undersized: bool,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub min_size: u32,
    pub entries: Vec<ManifestEntry>,
}

/// Optional category overrides: relative path prefix to category. The
/// longest matching prefix wins.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CategoryMap {
    pub categories: BTreeMap<String, Category>,
}

impl CategoryMap {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn lookup(&self, rel: &str) -> Option<Category> {
        self.categories
            .iter()
            .filter(|(prefix, _)| rel.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map(|(_, &c)| c)
    }
}

fn relative(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

/// Scans `root` for PNGs and builds a manifest. Images whose category
/// cannot be determined, or that fail to decode, are skipped with a
/// warning.
pub fn ingest_dataset(root: &Path, map: Option<&CategoryMap>, min_size: u32) -> Result<DatasetManifest> {
    let files = list_pngs(root)?;
    if files.is_empty() {
        return Err(Error::Ingest(format!("no PNG images under {}", root.display())));
    }
    let mut entries = Vec::new();
    for p in &files {
        let rel = relative(root, p);
        let category = map.and_then(|m| m.lookup(&rel)).or_else(|| {
            let parts: Vec<&str> = rel.split('/').collect();
            parts[..parts.len() - 1].iter().rev().find_map(|d| Category::infer(d))
        });
        let Some(category) = category else {
            warn!("{rel}: no category from directory names or manifest, skipped");
            continue;
        };
        let dims = std::fs::read(p).map_err(Error::from).and_then(|bytes| {
            if image::guess_format(&bytes).ok() != Some(ImageFormat::Png) {
                return Err(Error::Input("not a PNG".into()));
            }
            let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?;
            Ok((img.width(), img.height()))
        });
        let (width, height) = match dims {
            Ok(d) => d,
            Err(e) => {
                warn!("{rel}: unreadable ({e}), skipped");
                continue;
            }
        };
        entries.push(ManifestEntry {
            path: rel,
            category,
            width,
            height,
            undersized: width < min_size || height < min_size,
            split: Split::Train,
        });
    }
    if entries.is_empty() {
        return Err(Error::Ingest(format!("no usable images under {}", root.display())));
    }
    for (i, e) in entries.iter_mut().enumerate() {
        if i % VAL_EVERY == VAL_EVERY - 1 {
            e.split = Split::Val;
        }
    }
    Ok(DatasetManifest { root: root.to_path_buf(), min_size, entries })
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn count(&self, c: Category) -> usize {
        self.entries.iter().filter(|e| e.category == c).count()
    }

    /// Absolute paths of the usable (not undersized) images of a split.
    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.split == split && !e.undersized)
            .map(|e| self.root.join(&e.path))
            .collect()
    }
}
