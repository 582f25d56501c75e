//! Tile, predict and stitch a whole slide.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::wsi::{extract_patch_pyramid, SlidePyramid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileConfig {
    /// Tiles per forward pass.
    pub batch: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig { batch: 8 }
    }
}

/// Per-pixel probabilities at level-0 resolution, with the number of tile
/// predictions that contributed to each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub coverage: Vec<u32>,
}

impl ProbabilityMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// 16-bit grayscale PNG with value `round(p * 65535)`.
    pub fn write_png16(&self, path: &Path) -> Result<()> {
        let data: Vec<u16> = self
            .values
            .iter()
            .map(|&p| (p as f64 * 65535.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, data)
                .expect("map buffer");
        img.save_with_format(path, ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// One text line `width height`, then little-endian `f32` values.
    pub fn write_f32(&self, path: &Path) -> Result<()> {
        let mut out = format!("{} {}\n", self.width, self.height).into_bytes();
        out.reserve(4 * self.values.len());
        for v in &self.values {
            out.write_all(&v.to_le_bytes()).expect("vec write");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_f32(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Data(format!("{}: missing header", path.display())))?;
        let header = std::str::from_utf8(&bytes[..nl]).unwrap_or("");
        let dims: Vec<usize> = header
            .split_whitespace()
            .filter_map(|t| t.parse().ok())
            .collect();
        let body = &bytes[nl + 1..];
        match dims[..] {
            [w, h] if body.len() == 4 * w * h => Ok(ProbabilityMap {
                width: w,
                height: h,
                values: body
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                coverage: vec![1; w * h],
            }),
            _ => Err(Error::Data(format!("{}: malformed map file", path.display()))),
        }
    }
}

/// Tile origins along one axis: stride `size / 2` from 0, plus a final tile
/// flush with the far edge when the stride does not land on it.
pub fn tile_starts(extent: usize, size: usize) -> Vec<usize> {
    let stride = (size / 2).max(1);
    let mut starts: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&s| s + size <= extent)
        .collect();
    if extent >= size && starts.last() != Some(&(extent - size)) {
        starts.push(extent - size);
    }
    starts
}

/// Predicts every tile in infer mode and stitches the central half of each
/// tile's probabilities. Residual overlaps between central regions (near the
/// far edges) are averaged. The strips of width `size / 4` along the slide
/// border that no central region reaches are filled by mirroring the stitched
/// map across the covered boundary.
///
/// Models trained at a coarser level predict on that level's grid; the result
/// is bilinearly resampled to level 0.
pub fn predict_slide<T: Scalar>(
    model: &Model<T>,
    slide: &SlidePyramid,
    tiles: &TileConfig,
) -> Result<ProbabilityMap> {
    let cfg = model.config();
    let (size, level) = (cfg.input_size, cfg.input_level);
    if level + cfg.resolutions > slide.level_count() {
        return Err(Error::Data(format!(
            "model needs {} levels from level {level}; slide {} has {}",
            cfg.resolutions,
            slide.id,
            slide.level_count()
        )));
    }
    if size < 4 {
        return Err(Error::Config(format!("tile size {size} is too small")));
    }
    let (w, h) = (
        slide.level(level).width() as usize,
        slide.level(level).height() as usize,
    );
    if size > w || size > h {
        return Err(Error::Data(format!(
            "tile size {size} exceeds level {level} of slide {} ({w}x{h})",
            slide.id
        )));
    }
    let xs = tile_starts(w, size);
    let ys = tile_starts(h, size);
    let grid: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();

    let batch = tiles.batch.max(1);
    let predictions: Vec<Vec<Tensor<T>>> = grid
        .par_chunks(batch)
        .map(|chunk| -> Result<Vec<Tensor<T>>> {
            let examples = chunk
                .iter()
                .map(|&(x, y)| {
                    let center = ((x + size / 2) << level, (y + size / 2) << level);
                    extract_patch_pyramid::<T>(slide, center, size, cfg.resolutions, level)
                })
                .collect::<Result<Vec<_>>>()?;
            let inputs = (0..cfg.resolutions)
                .map(|j| Tensor::stack(&examples.iter().map(|e| &e.x[j]).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            let probs = ops::sigmoid(&model.predict(&inputs)?);
            Ok((0..chunk.len()).map(|i| probs.batch_slice(i, 1)).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u32; w * h];
    let (q, hi) = (size / 4, size - size / 4);
    for (&(x0, y0), p) in grid.iter().zip(predictions.iter().flatten()) {
        let data = p.data();
        for r in q..hi {
            let row = (y0 + r) * w + x0;
            for c in q..hi {
                sum[row + c] += data[r * size + c].to_f64().unwrap();
                count[row + c] += 1;
            }
        }
    }
    let col = covered_range(&xs, size, w);
    let row = covered_range(&ys, size, h);
    let mut values = vec![0.0f64; w * h];
    let mut coverage = vec![0u32; w * h];
    for y in 0..h {
        let sy = reflect_into(y, row);
        for x in 0..w {
            let sx = reflect_into(x, col);
            let i = sy * w + sx;
            debug_assert!(count[i] > 0);
            values[y * w + x] = sum[i] / count[i] as f64;
            coverage[y * w + x] = count[i];
        }
    }

    let (w0, h0) = slide.dimensions();
    if level == 0 {
        return Ok(ProbabilityMap {
            width: w,
            height: h,
            values: values.into_iter().map(|v| v as f32).collect(),
            coverage,
        });
    }
    Ok(upsample_map(&values, &coverage, w, h, w0, h0, 1 << level))
}

/// Half-open span covered by central tile regions.
fn covered_range(starts: &[usize], size: usize, extent: usize) -> (usize, usize) {
    let lo = starts[0] + size / 4;
    let hi = (starts[starts.len() - 1] + size - size / 4).min(extent);
    (lo, hi)
}

fn reflect_into(i: usize, (lo, hi): (usize, usize)) -> usize {
    if i < lo {
        (2 * lo - 1 - i).min(hi - 1)
    } else if i >= hi {
        (2 * hi - 1).saturating_sub(i).max(lo)
    } else {
        i
    }
}

/// Half-pixel-center bilinear resampling by `factor`, clamped at borders.
fn upsample_map(
    values: &[f64],
    coverage: &[u32],
    w: usize,
    h: usize,
    w0: usize,
    h0: usize,
    factor: usize,
) -> ProbabilityMap {
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let tx = taps(w0, w);
    let ty = taps(h0, h);
    let mut out = Vec::with_capacity(w0 * h0);
    let mut cov = Vec::with_capacity(w0 * h0);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
            let ny = if fy < 0.5 { y0 } else { y1 };
            let nx = if fx < 0.5 { x0 } else { x1 };
            cov.push(coverage[ny * w + nx]);
        }
    }
    ProbabilityMap {
        width: w0,
        height: h0,
        values: out,
        coverage: cov,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        assert_eq!(tile_starts(1024, 128).len(), 15);
        assert_eq!(tile_starts(128, 128), vec![0]);
        assert_eq!(tile_starts(200, 128), vec![0, 64, 72]);
    }

    #[test]
    fn reflection_fills_borders() {
        let range = covered_range(&tile_starts(1024, 128), 128, 1024);
        assert_eq!(range, (32, 992));
        assert_eq!(reflect_into(0, range), 63);
        assert_eq!(reflect_into(31, range), 32);
        assert_eq!(reflect_into(992, range), 991);
        assert_eq!(reflect_into(1023, range), 960);
        assert_eq!(reflect_into(500, range), 500);
    }
}
