//! Synthetic slides whose labels depend on wide context.
//!
//! Cells are small disks carrying a one-pixel checkerboard texture laid over
//! aligned 2x2 blocks. Every block of a cell sums to the same value as the
//! underlying background block, so box downsampling erases cells exactly:
//! they are only visible at level 0. A cell is positive when its center lies
//! within `context_radius` of a landmark, a large dark structure visible at
//! every level. With the default radius, most positive cells have no landmark
//! inside a level-0 patch but do inside the footprint of coarser patches.

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SlidePyramid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub levels: usize,
    pub mpp0: f64,
    /// Cell radius in level-1 pixels (cells are drawn on the level-1 grid).
    pub cell_radius: usize,
    /// Target fraction of the slide area covered by cells.
    pub cell_coverage: f64,
    /// Checkerboard amplitude per RGB channel.
    pub texture_amplitude: [u8; 3],
    pub pixel_noise: f64,
    /// When false, cells are labeled by a coin flip independent of the image.
    pub context: bool,
    /// Label probability of a cell when `context` is off.
    pub random_positive_rate: f64,
    /// Level-0 distance from a landmark center within which cells are positive.
    pub context_radius: f64,
    pub landmark_radius: f64,
    pub landmarks_per_megapixel: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            levels: 3,
            mpp0: 0.5,
            cell_radius: 3,
            cell_coverage: 0.38,
            texture_amplitude: [40, 32, 40],
            pixel_noise: 8.0,
            context: true,
            random_positive_rate: 0.33,
            context_radius: 200.0,
            landmark_radius: 16.0,
            landmarks_per_megapixel: 2.8,
        }
    }
}

const BACKGROUND: [f64; 3] = [196.0, 148.0, 182.0];
const LANDMARK: [f64; 3] = [72.0, 44.0, 112.0];
/// Background values are clamped this far from 0 and 255 so texture never
/// saturates and block sums are preserved exactly.
const MAX_AMPLITUDE: u8 = 40;
const TINT_SPACING: usize = 128;
const TINT_AMPLITUDE: f64 = 16.0;

/// Seed of slide `index` in a collection generated from `base`
/// (SplitMix64 of the pair), so slides can be produced in any order.
pub fn slide_seed(base: u64, index: usize) -> u64 {
    let mut z = base
        .wrapping_add((index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Cell {
    /// Level-0 center.
    center: (f64, f64),
    positive: bool,
}

/// Deterministic square slide of `base_size` pixels at level 0.
pub fn generate_synthetic_slide(
    seed: u64,
    base_size: usize,
    params: &SyntheticParams,
) -> Result<SlidePyramid> {
    validate(base_size, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = base_size;
    let half = n / 2;

    let landmarks = place_landmarks(&mut rng, n, params);

    // cell occupancy on the level-1 grid: 0 = background, k = cell k - 1
    let mut owner = vec![0u32; half * half];
    let mut blocked = vec![false; half * half];
    let reserve = params.landmark_radius / 2.0 + 2.0;
    for &(lx, ly) in &landmarks {
        let (cx, cy) = (lx / 2.0, ly / 2.0);
        for_disk(cx, cy, reserve, half, |i| blocked[i] = true);
    }
    let r = params.cell_radius as f64;
    let target = (params.cell_coverage * (half * half) as f64) as usize;
    let cell_area = disk_offsets(r).len().max(1);
    let max_attempts = 30 * (target / cell_area + 1);
    let mut covered = 0;
    let mut cells: Vec<Cell> = Vec::new();
    let offsets = disk_offsets(r);
    for _ in 0..max_attempts {
        if covered >= target {
            break;
        }
        let u = rng.random_range(0..half) as isize;
        let v = rng.random_range(0..half) as isize;
        let free = offsets.iter().all(|&(dx, dy)| {
            let (x, y) = (u + dx, v + dy);
            x >= 0
                && y >= 0
                && (x as usize) < half
                && (y as usize) < half
                && owner[y as usize * half + x as usize] == 0
                && !blocked[y as usize * half + x as usize]
        });
        if !free {
            continue;
        }
        cells.push(Cell {
            center: (2.0 * u as f64 + 1.0, 2.0 * v as f64 + 1.0),
            positive: false,
        });
        let id = cells.len() as u32;
        for &(dx, dy) in &offsets {
            owner[(v + dy) as usize * half + (u + dx) as usize] = id;
        }
        covered += offsets.len();
    }
    let r2 = params.context_radius * params.context_radius;
    // labels draw from their own stream so the image is the same either way
    let mut coin = ChaCha8Rng::seed_from_u64(seed);
    coin.set_stream(1);
    for cell in &mut cells {
        cell.positive = if params.context {
            landmarks.iter().any(|&(lx, ly)| {
                let (dx, dy) = (cell.center.0 - lx, cell.center.1 - ly);
                dx * dx + dy * dy <= r2
            })
        } else {
            coin.random_bool(params.random_positive_rate)
        };
    }

    let tint = tint_field(&mut rng, n);
    let noise = Normal::new(0.0, params.pixel_noise.max(0.0))
        .map_err(|e| Error::Config(format!("pixel noise: {e}")))?;
    let amp = params.texture_amplitude.map(f64::from);
    let (lo, hi) = (MAX_AMPLITUDE as f64, 255.0 - MAX_AMPLITUDE as f64);
    let lr2 = params.landmark_radius * params.landmark_radius;
    let mut img = RgbImage::new(n as u32, n as u32);
    let mut mask = GrayImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let mut px = [0u8; 3];
            let in_landmark = landmarks.iter().any(|&(lx, ly)| {
                let (dx, dy) = (x as f64 + 0.5 - lx, y as f64 + 0.5 - ly);
                dx * dx + dy * dy <= lr2
            });
            let id = owner[(y / 2) * half + x / 2];
            let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
            for c in 0..3 {
                let base = if in_landmark { LANDMARK[c] } else { BACKGROUND[c] + tint[c][y * n + x] };
                let mut v = (base + noise.sample(&mut rng)).round().clamp(lo, hi);
                if id > 0 && !in_landmark {
                    v += sign * amp[c];
                }
                px[c] = v as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
            if id > 0 && !in_landmark && cells[id as usize - 1].positive {
                mask.put_pixel(x as u32, y as u32, image::Luma([1]));
            }
        }
    }
    SlidePyramid::from_level0(
        format!("synthetic-{seed}"),
        seed,
        params.mpp0,
        img,
        mask,
        params.levels,
    )
}

fn validate(base_size: usize, params: &SyntheticParams) -> Result<()> {
    if params.levels == 0 || params.levels > 16 {
        return Err(Error::Config(format!("level count {} out of range", params.levels)));
    }
    let factor = 1usize << (params.levels - 1).max(1);
    if base_size == 0 || !base_size.is_multiple_of(factor) {
        return Err(Error::Config(format!(
            "slide size {base_size} must be a positive multiple of {factor} for {} levels",
            params.levels
        )));
    }
    if !(0.0..=1.0).contains(&params.cell_coverage)
        || !(0.0..=1.0).contains(&params.random_positive_rate)
        || !(params.mpp0 > 0.0)
        || params.texture_amplitude.iter().any(|&a| a > MAX_AMPLITUDE)
    {
        return Err(Error::Config(format!("invalid synthetic parameters {params:?}")));
    }
    Ok(())
}

fn place_landmarks(rng: &mut ChaCha8Rng, n: usize, params: &SyntheticParams) -> Vec<(f64, f64)> {
    if params.landmarks_per_megapixel <= 0.0 {
        return Vec::new();
    }
    let count = ((params.landmarks_per_megapixel * (n * n) as f64 / 1e6).round() as usize).max(1);
    let margin = params.landmark_radius.min(n as f64 / 4.0);
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(count);
    // spread landmarks out so slides do not collapse into a single field
    let mut spacing = params.context_radius;
    while out.len() < count {
        let mut placed = false;
        for _ in 0..200 {
            let p = (
                rng.random_range(margin..n as f64 - margin),
                rng.random_range(margin..n as f64 - margin),
            );
            if out
                .iter()
                .all(|q| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2) >= spacing * spacing)
            {
                out.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            spacing /= 2.0;
        }
    }
    out
}

fn disk_offsets(r: f64) -> Vec<(isize, isize)> {
    let ri = r.ceil() as isize;
    let mut out = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dx * dx + dy * dy) as f64) <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

fn for_disk(cx: f64, cy: f64, r: f64, n: usize, mut f: impl FnMut(usize)) {
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(n));
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(n));
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                f(y * n + x);
            }
        }
    }
}

/// Slowly varying per-channel color offset, unrelated to the labels:
/// smoothstep interpolation of a coarse random lattice.
fn tint_field(rng: &mut ChaCha8Rng, n: usize) -> [Vec<f64>; 3] {
    let cells = n / TINT_SPACING + 2;
    let lattice: Vec<f64> = (0..3 * cells * cells)
        .map(|_| rng.random_range(-TINT_AMPLITUDE..TINT_AMPLITUDE))
        .collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    std::array::from_fn(|c| {
        let lat = &lattice[c * cells * cells..(c + 1) * cells * cells];
        let mut out = vec![0.0; n * n];
        for y in 0..n {
            let gy = y as f64 / TINT_SPACING as f64;
            let (iy, ty) = (gy as usize, smooth(gy.fract()));
            for x in 0..n {
                let gx = x as f64 / TINT_SPACING as f64;
                let (ix, tx) = (gx as usize, smooth(gx.fract()));
                let at = |i: usize, j: usize| lat[j * cells + i];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                out[y * n + x] = top * (1.0 - ty) + bottom * ty;
            }
        }
        out
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_slide() {
        let p = SyntheticParams::default();
        let a = generate_synthetic_slide(11, 256, &p).unwrap();
        let b = generate_synthetic_slide(11, 256, &p).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_slide(12, 256, &p).unwrap();
        assert_ne!(a.level(0), c.level(0));
    }

    #[test]
    fn size_must_divide_levels() {
        let p = SyntheticParams {
            levels: 4,
            ..SyntheticParams::default()
        };
        assert!(generate_synthetic_slide(0, 100, &p).is_err());
        assert!(generate_synthetic_slide(0, 96, &p).is_ok());
    }

    #[test]
    fn cells_vanish_under_downsampling() {
        // With zero pixel noise the coarse levels are identical with and
        // without cell texture.
        let quiet = SyntheticParams {
            pixel_noise: 0.0,
            ..SyntheticParams::default()
        };
        let bare = SyntheticParams {
            texture_amplitude: [0, 0, 0],
            ..quiet.clone()
        };
        let a = generate_synthetic_slide(5, 256, &quiet).unwrap();
        let b = generate_synthetic_slide(5, 256, &bare).unwrap();
        assert_ne!(a.level(0), b.level(0));
        assert_eq!(a.mask(), b.mask());
        assert_eq!(a.level(1), b.level(1));
        assert_eq!(a.level(2), b.level(2));
    }
}
