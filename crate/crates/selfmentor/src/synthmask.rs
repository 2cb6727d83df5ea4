//! Synthetic region masks for referee training: random distorted ellipses
//! and their corrupted counterparts.
//!
//! Corruption keeps only an inner contour ring of the mask (core removal by
//! erosion) and adds Gaussian noise, producing the imperfect/correct pairs
//! the referee learns to fix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::seed;

/// A corrupted/clean training pair for the referee. The clean mask is binary;
/// the corrupted image lives in `[0,1]`.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub corrupted: Image,
    pub clean: Image,
}

/// Core-removal settings: ring thickness is drawn uniformly from
/// `[thickness_min, thickness_max]` pixels, then zero-mean Gaussian noise of
/// `noise_sigma` is added and the result clamped to `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionConfig {
    pub thickness_min: usize,
    pub thickness_max: usize,
    pub noise_sigma: f32,
}

impl CorruptionConfig {
    /// Defaults for a `d x d` canvas: thickness in `[2, max(3, d/8)]`,
    /// noise sigma 0.2.
    pub fn for_side(d: usize) -> CorruptionConfig {
        CorruptionConfig {
            thickness_min: 2,
            thickness_max: (d / 8).max(3),
            noise_sigma: 0.2,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.thickness_min == 0
            || self.thickness_min > self.thickness_max
            || self.thickness_max > d / 2
        {
            return Err(Error::Contract(format!(
                "corruption thickness range [{}, {}] invalid for side {d} (need 0 < min <= max <= d/2)",
                self.thickness_min, self.thickness_max
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Contract(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Semi-axes are drawn from `[0.03*d, 0.6*d]`, center uniformly inside the
/// canvas, orientation uniformly in `[0, pi)`.
#[derive(Debug, Clone, Copy)]
pub struct EllipseParams {
    pub center_x: f64,
    pub center_y: f64,
    pub angle: f64,
    pub semi_a: f64,
    pub semi_b: f64,
}

pub fn sample_ellipse_params(d: usize, rng: &mut impl Rng) -> EllipseParams {
    let side = d as f64;
    let lo = 0.03 * side;
    let hi = 0.6 * side;
    EllipseParams {
        center_x: rng.gen_range(0.0..side),
        center_y: rng.gen_range(0.0..side),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
        semi_a: rng.gen_range(lo..hi),
        semi_b: rng.gen_range(lo..hi),
    }
}

/// Rasterizes an ellipse on a `d x d` canvas: a pixel is positive when its
/// center lies inside the ellipse.
pub fn rasterize_ellipse(d: usize, p: &EllipseParams) -> Image {
    let (sin, cos) = p.angle.sin_cos();
    let inv_a2 = 1.0 / (p.semi_a * p.semi_a);
    let inv_b2 = 1.0 / (p.semi_b * p.semi_b);
    Image::from_fn(d, d, |y, x| {
        let dx = x as f64 + 0.5 - p.center_x;
        let dy = y as f64 + 0.5 - p.center_y;
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        if u * u * inv_a2 + v * v * inv_b2 <= 1.0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Grid size of the random displacement field used for elastic distortion.
const DISTORT_GRID: usize = 4;

/// Warps a binary mask with a coarse random displacement field: a
/// `4 x 4` grid of control points, each displaced uniformly in `+-d/32`,
/// bilinearly interpolated, nearest-neighbour resampled and re-binarized.
pub fn elastic_distort(mask: &Image, rng: &mut impl Rng) -> Image {
    let h = mask.height();
    let w = mask.width();
    let amp = w as f64 / 32.0;
    let n = DISTORT_GRID;
    let mut disp = vec![(0.0f64, 0.0f64); n * n];
    for d in disp.iter_mut() {
        *d = (rng.gen_range(-amp..amp), rng.gen_range(-amp..amp));
    }
    let cell_h = (h - 1) as f64 / (n - 1) as f64;
    let cell_w = (w - 1) as f64 / (n - 1) as f64;
    let warped = Image::from_fn(h, w, |y, x| {
        let gy = (y as f64 / cell_h).min((n - 2) as f64);
        let gx = (x as f64 / cell_w).min((n - 2) as f64);
        let iy = gy.floor() as usize;
        let ix = gx.floor() as usize;
        let fy = gy - iy as f64;
        let fx = gx - ix as f64;
        let p00 = disp[iy * n + ix];
        let p01 = disp[iy * n + ix + 1];
        let p10 = disp[(iy + 1) * n + ix];
        let p11 = disp[(iy + 1) * n + ix + 1];
        let dx = (p00.0 * (1.0 - fy) + p10.0 * fy) * (1.0 - fx)
            + (p01.0 * (1.0 - fy) + p11.0 * fy) * fx;
        let dy = (p00.1 * (1.0 - fy) + p10.1 * fy) * (1.0 - fx)
            + (p01.1 * (1.0 - fy) + p11.1 * fy) * fx;
        let sx = (x as f64 + dx).round() as isize;
        let sy = (y as f64 + dy).round() as isize;
        if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
            0.0
        } else {
            mask.get(sy as usize, sx as usize)
        }
    });
    warped.binarize(0.5)
}

/// Binary erosion with a square structuring element of side `2t+1`,
/// separable into a horizontal and a vertical pass. Pixels outside the image
/// count as background.
pub fn erode(mask: &Image, t: usize) -> Image {
    if t == 0 {
        return mask.clone();
    }
    let h = mask.height();
    let w = mask.width();
    let ti = t as isize;
    // Horizontal pass: a pixel survives when every pixel within +-t in its
    // row is positive.
    let mut horiz = Image::zeros(h, w);
    for y in 0..h {
        let mut run = 0usize; // consecutive positives ending at x
        for x in 0..w {
            if mask.get(y, x) > 0.0 {
                run += 1;
            } else {
                run = 0;
            }
            // Window for output x-t is [x-2t, x]; it is all-ones when the
            // run is at least 2t+1 and the window fits in the image.
            if run > 2 * t {
                horiz.set(y, x - t, 1.0);
            }
        }
    }
    // Border columns can never host a full window, and the run-based pass
    // already leaves them zero. Vertical pass on the horizontal result.
    let mut out = Image::zeros(h, w);
    for x in 0..w {
        let mut run = 0usize;
        for y in 0..h {
            if horiz.get(y, x) > 0.0 {
                run += 1;
            } else {
                run = 0;
            }
            if run > 2 * t {
                out.set((y as isize - ti) as usize, x, 1.0);
            }
        }
    }
    out
}

const MAX_MASK_ATTEMPTS: usize = 100;

/// Draws a clean mask: a random ellipse, optionally elastically distorted,
/// re-sampled until it rasterizes to at least one positive pixel.
pub fn sample_clean_mask(d: usize, rng: &mut impl Rng, distort: bool) -> Result<Image> {
    assert!(d >= 16, "mask side must be at least 16, got {d}");
    for _ in 0..MAX_MASK_ATTEMPTS {
        let params = sample_ellipse_params(d, rng);
        let mut mask = rasterize_ellipse(d, &params);
        if distort {
            mask = elastic_distort(&mask, rng);
        }
        if mask.count_positive() >= 1 {
            return Ok(mask);
        }
    }
    Err(Error::Domain(format!(
        "no non-empty mask produced in {MAX_MASK_ATTEMPTS} attempts (side {d})"
    )))
}

/// Core removal plus noise: keeps the inner contour ring of thickness
/// `t ~ U[min,max]` (mask minus its erosion by `t`), multiplies it with the
/// mask, adds Gaussian noise and clamps to `[0,1]`.
pub fn corrupt_mask(mask: &Image, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Image {
    debug_assert!(mask.is_binary(), "corrupt_mask expects a binary mask");
    let t = rng.gen_range(cfg.thickness_min..=cfg.thickness_max);
    let eroded = erode(mask, t);
    let mut out = Image::from_fn(mask.height(), mask.width(), |y, x| {
        let ring = mask.get(y, x) * (1.0 - eroded.get(y, x));
        ring * mask.get(y, x)
    });
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma).expect("sigma validated");
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    out.clamp_unit();
    out
}

/// One corrupted/clean pair from a distorted ellipse.
pub fn sample_pair(d: usize, cfg: &CorruptionConfig, rng: &mut impl Rng) -> Result<MaskPair> {
    let clean = sample_clean_mask(d, rng, true)?;
    let corrupted = corrupt_mask(&clean, cfg, rng);
    Ok(MaskPair { corrupted, clean })
}

/// `n` independent pairs, reproducible from `seed`. Pairs are generated in
/// parallel from per-index substreams, so the result does not depend on
/// thread scheduling.
pub fn sample_pair_set(
    n: usize,
    d: usize,
    cfg: &CorruptionConfig,
    seed: u64,
) -> Result<Vec<MaskPair>> {
    cfg.validate(d)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed, i as u64));
            sample_pair(d, cfg, &mut rng)
        })
        .collect()
}
