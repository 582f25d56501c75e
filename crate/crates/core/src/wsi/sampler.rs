//! Class-balanced center sampling and the train/validation split.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{extract_patch_pyramid, PatchPyramidExample, SlidePyramid};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub size: usize,
    pub resolutions: usize,
    /// Pyramid level of the first patch (0 except for coarse baselines).
    pub base_level: usize,
    pub n_per_slide: usize,
    /// Minimum fraction of examples per slide whose level-0 `size` window
    /// contains positive pixels.
    pub balance: f64,
    pub validation_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            size: 128,
            resolutions: 3,
            base_level: 0,
            n_per_slide: 10,
            balance: 0.5,
            validation_fraction: 0.2,
        }
    }
}

/// A sampled patch location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSite {
    pub slide: usize,
    pub center: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<PatchPyramidExample<T>>,
    pub validation: Vec<PatchPyramidExample<T>>,
    pub validation_fraction: f64,
    pub seed: u64,
}

fn slide_rng(seed: u64, slide: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slide as u64 + 1);
    rng
}

const MAX_REDRAWS: usize = 64;

/// Draws `n_per_slide` distinct centers per slide. Centers are multiples of
/// `2^(levels - 1)` of the shallowest slide so that windows of every level
/// align with the pixel grid. The first `ceil(balance * n)` centers of each
/// slide are anchored on a random positive pixel; the rest are uniform.
/// Sites depend only on `(seed, slide index)`, not on model settings, so
/// models compared against each other see the same tissue.
pub fn sample_sites(
    slides: &[SlidePyramid],
    n_per_slide: usize,
    size: usize,
    balance: f64,
    seed: u64,
) -> Result<Vec<SampleSite>> {
    if n_per_slide == 0 {
        return Err(Error::Config("n_per_slide must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&balance) {
        return Err(Error::Config(format!("balance {balance} outside [0, 1]")));
    }
    let levels = slides.iter().map(|s| s.level_count()).min().unwrap_or(1);
    let align = 1usize << (levels - 1);
    if size < 2 * align {
        return Err(Error::Config(format!(
            "patch size {size} must be at least {} for {levels}-level slides",
            2 * align
        )));
    }
    let anchored = (balance * n_per_slide as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut sites = Vec::with_capacity(slides.len() * n_per_slide);
    for (k, slide) in slides.iter().enumerate() {
        let mut rng = slide_rng(seed, k);
        let (w, h) = slide.dimensions();
        let positives: Vec<usize> = if anchored > 0 {
            slide
                .mask()
                .as_raw()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1)
                .map(|(i, _)| i)
                .collect()
        } else {
            Vec::new()
        };
        if anchored > 0 && positives.is_empty() {
            return Err(Error::Data(format!(
                "slide {} has no positive pixels but balance {balance} was requested",
                slide.id
            )));
        }
        let mut seen = HashSet::new();
        for i in 0..n_per_slide {
            let mut draw = || {
                if i < anchored {
                    // window [c - size/2, c + size/2) contains p since c <= p < c + align
                    let p = positives[rng.random_range(0..positives.len())];
                    ((p % w) / align * align, (p / w) / align * align)
                } else {
                    (
                        rng.random_range(0..w / align) * align,
                        rng.random_range(0..h / align) * align,
                    )
                }
            };
            // sites are drawn without replacement; a tiny positive region may
            // leave no choice, so give up after a bounded number of redraws
            let mut center = draw();
            for _ in 0..MAX_REDRAWS {
                if !seen.contains(&center) {
                    break;
                }
                center = draw();
            }
            seen.insert(center);
            sites.push(SampleSite { slide: k, center });
        }
    }
    Ok(sites)
}

/// Samples sites, shuffles them with `seed` and splits by example into
/// training and validation parts, then extracts the patch pyramids.
pub fn sample_dataset<T: Scalar>(
    slides: &[SlidePyramid],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    if slides.is_empty() {
        return Err(Error::Data("no slides to sample from".into()));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Config(format!(
            "validation fraction {} outside [0, 1)",
            cfg.validation_fraction
        )));
    }
    let mut sites = sample_sites(slides, cfg.n_per_slide, cfg.size, cfg.balance, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sites.shuffle(&mut rng);
    let n_val = (sites.len() as f64 * cfg.validation_fraction).round() as usize;
    let extract = |s: &SampleSite| {
        extract_patch_pyramid(
            &slides[s.slide],
            s.center,
            cfg.size,
            cfg.resolutions,
            cfg.base_level,
        )
    };
    let validation = sites[..n_val].iter().map(extract).collect::<Result<Vec<_>>>()?;
    let train = sites[n_val..].iter().map(extract).collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit {
        train,
        validation,
        validation_fraction: cfg.validation_fraction,
        seed,
    })
}
