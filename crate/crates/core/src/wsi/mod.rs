//! Pyramidal slides, the synthetic slide generator, concentric patch
//! extraction and dataset sampling.

mod sampler;
mod store;
mod synth;

pub use sampler::{sample_dataset, sample_sites, DatasetSplit, SampleSite, SamplerConfig};
pub use store::{read_slide, read_slide_dir, write_slide};
pub use synth::{generate_synthetic_slide, slide_seed, SyntheticParams};

use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// A multi-resolution slide: level `j` has half the extent and twice the
/// pixel size of level `j - 1`. The mask is stored as 0/1 at level 0; coarser
/// masks are derived on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidePyramid {
    pub id: String,
    pub seed: u64,
    mpp0: f64,
    levels: Vec<RgbImage>,
    masks: Vec<GrayImage>,
}

impl SlidePyramid {
    /// Builds `count` levels from `level0` by repeated 2x2 box averaging.
    pub fn from_level0(
        id: String,
        seed: u64,
        mpp0: f64,
        level0: RgbImage,
        mask: GrayImage,
        count: usize,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Data("a slide needs at least one level".into()));
        }
        let mut levels = vec![level0];
        for _ in 1..count {
            let next = downsample(levels.last().unwrap());
            levels.push(next);
        }
        Self::from_levels(id, seed, mpp0, levels, mask)
    }

    /// Wraps precomputed levels after checking the pyramid invariants.
    pub fn from_levels(
        id: String,
        seed: u64,
        mpp0: f64,
        levels: Vec<RgbImage>,
        mask: GrayImage,
    ) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Data(format!("slide {id}: no levels")))?;
        let (w, h) = first.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::Data(format!("slide {id}: empty level 0")));
        }
        if !(mpp0 > 0.0 && mpp0.is_finite()) {
            return Err(Error::Data(format!("slide {id}: invalid mpp {mpp0}")));
        }
        for (j, pair) in levels.windows(2).enumerate() {
            let (pw, ph) = pair[0].dimensions();
            if pair[1].dimensions() != (pw / 2, ph / 2) || pw / 2 == 0 || ph / 2 == 0 {
                return Err(Error::Data(format!(
                    "slide {id}: level {} is {:?}, expected {:?}",
                    j + 1,
                    pair[1].dimensions(),
                    (pw / 2, ph / 2)
                )));
            }
        }
        if mask.dimensions() != (w, h) {
            return Err(Error::Data(format!(
                "slide {id}: mask is {:?} but level 0 is {:?}",
                mask.dimensions(),
                (w, h)
            )));
        }
        if mask.as_raw().iter().any(|&v| v > 1) {
            return Err(Error::Data(format!("slide {id}: mask values must be 0 or 1")));
        }
        let masks = (0..levels.len())
            .map(|j| {
                let (lw, lh) = levels[j].dimensions();
                derive_mask(&mask, j, lw, lh)
            })
            .collect();
        Ok(SlidePyramid {
            id,
            seed,
            mpp0,
            levels,
            masks,
        })
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, j: usize) -> &RgbImage {
        &self.levels[j]
    }

    pub fn levels(&self) -> &[RgbImage] {
        &self.levels
    }

    /// Micrometers per pixel at level `j`.
    pub fn mpp(&self, j: usize) -> f64 {
        self.mpp0 * (1u64 << j) as f64
    }

    /// `(width, height)` of level 0.
    pub fn dimensions(&self) -> (usize, usize) {
        let (w, h) = self.levels[0].dimensions();
        (w as usize, h as usize)
    }

    /// Level-0 ground truth with values in `{0, 1}`.
    pub fn mask(&self) -> &GrayImage {
        &self.masks[0]
    }

    /// Ground truth at level `j`: a pixel is positive when at least half of
    /// its level-0 footprint is.
    pub fn mask_at(&self, j: usize) -> &GrayImage {
        &self.masks[j]
    }

    pub fn positive_fraction(&self) -> f64 {
        let m = self.mask().as_raw();
        m.iter().filter(|&&v| v == 1).count() as f64 / m.len() as f64
    }
}

/// 2x2 box mean with round-half-up; odd trailing rows and columns are dropped.
pub fn downsample(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width() / 2, img.height() / 2);
    let src = img.as_raw();
    let row = img.width() as usize * 3;
    let mut out = vec![0u8; w as usize * h as usize * 3];
    for y in 0..h as usize {
        let top = 2 * y * row;
        let bottom = top + row;
        for x in 0..w as usize {
            for c in 0..3 {
                let a = src[top + 6 * x + c] as u32;
                let b = src[top + 6 * x + 3 + c] as u32;
                let d = src[bottom + 6 * x + c] as u32;
                let e = src[bottom + 6 * x + 3 + c] as u32;
                out[(y * w as usize + x) * 3 + c] = ((a + b + d + e + 2) / 4) as u8;
            }
        }
    }
    RgbImage::from_raw(w, h, out).expect("downsample buffer")
}

fn derive_mask(mask: &GrayImage, level: usize, w: u32, h: u32) -> GrayImage {
    if level == 0 {
        return mask.clone();
    }
    let f = 1usize << level;
    let mw = mask.width() as usize;
    let src = mask.as_raw();
    let mut out = vec![0u8; w as usize * h as usize];
    for y in 0..h as usize {
        for x in 0..w as usize {
            let mut count = 0;
            for dy in 0..f {
                let r = (y * f + dy) * mw + x * f;
                count += src[r..r + f].iter().filter(|&&v| v == 1).count();
            }
            out[y * w as usize + x] = u8::from(2 * count >= f * f);
        }
    }
    GrayImage::from_raw(w, h, out).expect("mask buffer")
}

/// Reflects an out-of-range coordinate back into `0..n` (edge pixel repeated,
/// so `-1 -> 0` and `n -> n - 1`). Periodic with period `2n`.
pub fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// One training or evaluation example: `J` concentric patches, highest
/// resolution first, and the mask window aligned with the first patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPyramidExample<T> {
    pub x: Vec<Tensor<T>>,
    pub y: Tensor<T>,
    /// Level-0 `(x, y)` coordinate shared by all patches.
    pub center: (usize, usize),
    pub slide_id: String,
}

impl<T: Scalar> PatchPyramidExample<T> {
    pub fn has_positive(&self) -> bool {
        self.y.data().iter().any(|&v| v > T::zero())
    }
}

/// Start of the `size`-wide window of level `level` that is centered on the
/// level-0 coordinate `center`.
pub fn window_origin(center: (usize, usize), level: usize, size: usize) -> (isize, isize) {
    (
        (center.0 >> level) as isize - (size / 2) as isize,
        (center.1 >> level) as isize - (size / 2) as isize,
    )
}

/// Copies a mirror-padded `size x size` RGB window into `out` as values in
/// `[0, 1]`.
pub(crate) fn read_window<T: Scalar>(
    img: &RgbImage,
    origin: (isize, isize),
    size: usize,
    out: &mut [T],
) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let scale = T::lit(1.0 / 255.0);
    let cols: Vec<usize> = (0..size)
        .map(|i| mirror_index(origin.0 + i as isize, w))
        .collect();
    for r in 0..size {
        let sy = mirror_index(origin.1 + r as isize, h);
        let src = &raw[sy * w * 3..(sy + 1) * w * 3];
        let dst = &mut out[r * size * 3..(r + 1) * size * 3];
        for (i, &sx) in cols.iter().enumerate() {
            for c in 0..3 {
                dst[i * 3 + c] = T::from_u8(src[sx * 3 + c]).unwrap() * scale;
            }
        }
    }
}

fn read_mask_window<T: Scalar>(mask: &GrayImage, origin: (isize, isize), size: usize) -> Vec<T> {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let raw = mask.as_raw();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let sy = mirror_index(origin.1 + r as isize, h);
        for i in 0..size {
            let sx = mirror_index(origin.0 + i as isize, w);
            out.push(T::from_u8(raw[sy * w + sx]).unwrap());
        }
    }
    out
}

/// Extracts the concentric patch pyramid around the level-0 point `center`.
/// Patch `j` (0-based) is read from level `base_level + j`; the mask comes
/// from `base_level`. Single-resolution baselines at coarser magnification
/// use `base_level > 0`.
pub fn extract_patch_pyramid<T: Scalar>(
    slide: &SlidePyramid,
    center: (usize, usize),
    size: usize,
    resolutions: usize,
    base_level: usize,
) -> Result<PatchPyramidExample<T>> {
    if resolutions == 0 || size == 0 {
        return Err(Error::Data("patch size and resolution count must be positive".into()));
    }
    if base_level + resolutions > slide.level_count() {
        return Err(Error::Data(format!(
            "slide {} has {} levels; {} resolutions from level {} requested",
            slide.id,
            slide.level_count(),
            resolutions,
            base_level
        )));
    }
    let (w0, h0) = slide.dimensions();
    if center.0 >= w0 || center.1 >= h0 {
        return Err(Error::Data(format!(
            "center {center:?} outside slide {} of {w0}x{h0}",
            slide.id
        )));
    }
    let mut x = Vec::with_capacity(resolutions);
    for j in 0..resolutions {
        let level = base_level + j;
        let img = slide.level(level);
        if size > img.width() as usize || size > img.height() as usize {
            return Err(Error::Data(format!(
                "patch size {size} exceeds level {level} of slide {} ({}x{})",
                slide.id,
                img.width(),
                img.height()
            )));
        }
        let mut data = vec![T::zero(); size * size * 3];
        read_window(img, window_origin(center, level, size), size, &mut data);
        x.push(Tensor::from_vec(Shape::new(1, size, size, 3), data)?);
    }
    let y = read_mask_window(
        slide.mask_at(base_level),
        window_origin(center, base_level, size),
        size,
    );
    Ok(PatchPyramidExample {
        x,
        y: Tensor::from_vec(Shape::new(1, size, size, 1), y)?,
        center,
        slide_id: slide.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_slide(size: u32, levels: usize) -> SlidePyramid {
        let img = RgbImage::from_fn(size, size, |x, y| {
            image::Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8])
        });
        let mask = GrayImage::from_fn(size, size, |x, _| image::Luma([u8::from(x < size / 2)]));
        SlidePyramid::from_level0("ramp".into(), 0, 0.5, img, mask, levels).unwrap()
    }

    #[test]
    fn mirror_reflects_with_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| mirror_index(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }

    #[test]
    fn pyramid_dimensions_and_mpp() {
        let s = ramp_slide(64, 3);
        assert_eq!(s.level(1).dimensions(), (32, 32));
        assert_eq!(s.level(2).dimensions(), (16, 16));
        assert_eq!(s.mpp(2), 2.0);
        assert_eq!(s.mask_at(2).get_pixel(3, 0).0, [1]);
        assert_eq!(s.mask_at(2).get_pixel(8, 0).0, [0]);
    }

    #[test]
    fn corner_center_is_mirror_padded() {
        // tiny 16x16 oracle: the upper-left quadrant mirrors the slide corner
        let s = ramp_slide(16, 1);
        let ex = extract_patch_pyramid::<f64>(&s, (0, 0), 8, 1, 0).unwrap();
        assert_eq!(ex.x[0].shape(), Shape::new(1, 8, 8, 3));
        for r in 0..8 {
            for i in 0..8 {
                let sx = if i < 4 { 3 - i } else { i - 4 };
                let sy = if r < 4 { 3 - r } else { r - 4 };
                let p = s.level(0).get_pixel(sx as u32, sy as u32).0;
                for c in 0..3 {
                    assert_eq!(ex.x[0].get([0, r, i, c]), p[c] as f64 / 255.0);
                }
            }
        }
    }

    #[test]
    fn extraction_errors() {
        let s = ramp_slide(32, 2);
        assert!(extract_patch_pyramid::<f32>(&s, (16, 16), 8, 3, 0).is_err());
        assert!(extract_patch_pyramid::<f32>(&s, (16, 16), 32, 2, 0).is_err());
        assert!(extract_patch_pyramid::<f32>(&s, (40, 16), 8, 1, 0).is_err());
    }
}
