//! Slide directories: `level_<j>.png`, `mask.png` (0/255) and `meta.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};

use super::SlidePyramid;
use crate::error::{Error, Result};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_slide(slide: &SlidePyramid, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (j, level) in slide.levels().iter().enumerate() {
        let path = dir.join(format!("level_{j}.png"));
        level
            .save_with_format(&path, ImageFormat::Png)
            .map_err(|e| image_err(&path, e))?;
    }
    let mask = slide.mask();
    let scaled = GrayImage::from_raw(
        mask.width(),
        mask.height(),
        mask.as_raw().iter().map(|&v| v * 255).collect(),
    )
    .expect("mask buffer");
    let path = dir.join("mask.png");
    scaled
        .save_with_format(&path, ImageFormat::Png)
        .map_err(|e| image_err(&path, e))?;
    let (w, h) = slide.dimensions();
    let meta = format!(
        "id={}\nseed={}\nlevels={}\nmpp_0={}\nwidth_0={w}\nheight_0={h}\n",
        slide.id,
        slide.seed,
        slide.level_count(),
        slide.mpp(0)
    );
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

fn parse_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("{}: malformed line '{line}'", path.display())))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<T> {
    let raw = meta
        .get(key)
        .ok_or_else(|| Error::Data(format!("{}: missing key '{key}'", path.display())))?;
    raw.parse()
        .map_err(|_| Error::Data(format!("{}: bad value for '{key}': {raw}", path.display())))
}

pub fn read_slide(dir: &Path) -> Result<SlidePyramid> {
    let meta_path = dir.join("meta.txt");
    let meta = parse_meta(&meta_path)?;
    let id: String = field(&meta, "id", &meta_path)?;
    let seed: u64 = field(&meta, "seed", &meta_path)?;
    let count: usize = field(&meta, "levels", &meta_path)?;
    let mpp0: f64 = field(&meta, "mpp_0", &meta_path)?;
    let width: u32 = field(&meta, "width_0", &meta_path)?;
    let height: u32 = field(&meta, "height_0", &meta_path)?;
    let mut levels: Vec<RgbImage> = Vec::with_capacity(count);
    for j in 0..count {
        let path = dir.join(format!("level_{j}.png"));
        let img = image::open(&path).map_err(|e| image_err(&path, e))?;
        levels.push(img.into_rgb8());
    }
    if levels.first().map(|l| l.dimensions()) != Some((width, height)) {
        return Err(Error::Data(format!(
            "{}: level 0 does not match width_0={width}, height_0={height}",
            dir.display()
        )));
    }
    let path = dir.join("mask.png");
    let mask = image::open(&path).map_err(|e| image_err(&path, e))?.into_luma8();
    if mask.as_raw().iter().any(|&v| v != 0 && v != 255) {
        return Err(Error::Data(format!("{}: mask must be 0/255", path.display())));
    }
    let mask = GrayImage::from_raw(
        mask.width(),
        mask.height(),
        mask.as_raw().iter().map(|&v| v / 255).collect(),
    )
    .expect("mask buffer");
    SlidePyramid::from_levels(id, seed, mpp0, levels, mask)
}

/// Reads every slide directory (one containing `meta.txt`) below `root`,
/// sorted by directory name.
pub fn read_slide_dir(root: &Path) -> Result<Vec<SlidePyramid>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.txt").is_file())
        .collect();
    if root.join("meta.txt").is_file() {
        dirs.push(root.to_path_buf());
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no slides found under {}", root.display())));
    }
    dirs.iter().map(|d| read_slide(d)).collect()
}
