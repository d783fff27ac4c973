//! Seeded stochastic patch augmentation: rotation, translation and vertical
//! mirroring, unbiased gamma, and Gaussian blur or sharpening.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Patch;
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Filter {
    None,
    Blur { sigma: f64 },
    Sharpen { sigma: f64, delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub theta: f64,
    pub shift_mm: f64,
    pub direction: f64,
    pub mirror: bool,
    pub alpha: f64,
    pub beta: f64,
    pub z: f64,
    pub filter: Filter,
}

impl AugmentParams {
    /// Parameters under which the pipeline reduces to a center crop.
    pub fn identity() -> Self {
        AugmentParams {
            theta: 0.0,
            shift_mm: 0.0,
            direction: 0.0,
            mirror: false,
            alpha: 1.0,
            beta: 0.0,
            z: 0.0,
            filter: Filter::None,
        }
    }
}

/// Sampling ranges. `Default` gives the canonical distributions; the
/// translation bound is configurable for small patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub max_shift_mm: f64,
    pub mirror_prob: f64,
    pub blur_prob: f64,
    pub sharpen_prob: f64,
    /// Flips the sign of the sharpening term, turning it into unsharp masking.
    pub unsharp: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_shift_mm: 0.2,
            mirror_prob: 0.5,
            blur_prob: 0.25,
            sharpen_prob: 0.25,
            unsharp: false,
        }
    }
}

pub const SIGMA_RANGE: (f64, f64) = (0.125, 1.0);
pub const DELTA_RANGE: (f64, f64) = (0.5, 1.5);
pub const Z_RANGE: (f64, f64) = (-0.05, 0.05);

/// Draws every field in a fixed order. A single uniform decides the filter:
/// blur below `blur_prob`, sharpen in the next `sharpen_prob`, else none.
pub fn draw_params_with(ranges: &AugmentRanges, rng: &mut impl Rng) -> AugmentParams {
    let theta = rng.random_range(-PI..=PI);
    let shift_mm = rng.random_range(0.0..=ranges.max_shift_mm);
    let direction = rng.random_range(-PI..PI);
    let mirror = rng.random::<f64>() < ranges.mirror_prob;
    let alpha = rng.random_range(0.9..=1.0);
    let beta = rng.random_range(-0.1..=0.1);
    let z = rng.random_range(Z_RANGE.0..=Z_RANGE.1);
    let sigma = rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1);
    let sigma_u = rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1);
    let delta = rng.random_range(DELTA_RANGE.0..=DELTA_RANGE.1);
    let u = rng.random::<f64>();
    let filter = if u < ranges.blur_prob {
        Filter::Blur { sigma }
    } else if u < ranges.blur_prob + ranges.sharpen_prob {
        Filter::Sharpen {
            sigma: sigma_u,
            delta,
        }
    } else {
        Filter::None
    };
    AugmentParams {
        theta,
        shift_mm,
        direction,
        mirror,
        alpha,
        beta,
        z,
        filter,
    }
}

pub fn draw_params(seed: u64) -> AugmentParams {
    draw_params_with(&AugmentRanges::default(), &mut rng_for(seed, &[0xA06]))
}

// ------------------------------------------------------------------ gamma

/// `γ = log(0.5 + Z/√2) / log(0.5 − Z/√2)`; equals 1 at `Z = 0`.
pub fn gamma_exponent(z: f64) -> Result<f64> {
    if !(Z_RANGE.0..=Z_RANGE.1).contains(&z) {
        return Err(Error::Parameter(format!(
            "gamma parameter Z = {z} outside [{}, {}]",
            Z_RANGE.0, Z_RANGE.1
        )));
    }
    Ok((0.5 + FRAC_1_SQRT_2 * z).ln() / (0.5 - FRAC_1_SQRT_2 * z).ln())
}

/// Per pixel `clamp(α·x^γ + β, 0, 1)`.
pub fn gamma_augment(patch: &Patch, alpha: f64, beta: f64, z: f64) -> Result<Patch> {
    let gamma = gamma_exponent(z)?;
    let pixels = patch
        .pixels()
        .iter()
        .map(|&x| {
            let x = x as f64;
            let y = if gamma == 1.0 { x } else { x.powf(gamma) };
            (alpha * y + beta).clamp(0.0, 1.0) as f32
        })
        .collect();
    Patch::new(patch.side(), pixels, patch.resolution_um())
}

// ------------------------------------------------------------------ geometry

pub fn shift_pixels(shift_mm: f64, resolution_um: f64) -> f64 {
    shift_mm * 1000.0 / resolution_um
}

/// Smallest source side that fits a `target` crop rotated by any angle and
/// translated by `shift_px`.
pub fn required_source_side(target: usize, shift_px: f64) -> f64 {
    target as f64 * SQRT_2 + 2.0 * shift_px
}

fn bilinear(src: &Patch, y: f64, x: f64) -> f64 {
    let max = (src.side() - 1) as f64;
    let y = y.clamp(0.0, max);
    let x = x.clamp(0.0, max);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(src.side() - 1), (x0 + 1).min(src.side() - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let a = src.at(y0, x0) as f64 * (1.0 - fx) + src.at(y0, x1) as f64 * fx;
    let b = src.at(y1, x0) as f64 * (1.0 - fx) + src.at(y1, x1) as f64 * fx;
    a * (1.0 - fy) + b * fy
}

/// Bilinear resample of `target`×`target` pixels around the source center
/// shifted by `shift_mm` along `direction`, rotated by `theta`; the vertical
/// mirror is applied after rotation.
pub fn rotate_mirror_translate(
    source: &Patch,
    theta: f64,
    mirror: bool,
    shift_mm: f64,
    direction: f64,
    target: usize,
) -> Result<Patch> {
    let shift = shift_pixels(shift_mm, source.resolution_um());
    let need = required_source_side(target, shift);
    if (source.side() as f64) < need {
        return Err(Error::Geometry(format!(
            "source side {} too small for a {target}-pixel target shifted by {shift:.2} px; need at least {}",
            source.side(),
            need.ceil()
        )));
    }
    let c = (source.side() as f64 - 1.0) / 2.0;
    let (cy, cx) = (c + shift * direction.sin(), c + shift * direction.cos());
    let half = (target as f64 - 1.0) / 2.0;
    let (s, co) = theta.sin_cos();
    let mut pixels = Vec::with_capacity(target * target);
    for r in 0..target {
        let mut dy = r as f64 - half;
        if mirror {
            dy = -dy;
        }
        for col in 0..target {
            let dx = col as f64 - half;
            let sx = cx + co * dx - s * dy;
            let sy = cy + s * dx + co * dy;
            pixels.push(bilinear(source, sy, sx).clamp(0.0, 1.0) as f32);
        }
    }
    Patch::new(target, pixels, source.resolution_um())
}

// ------------------------------------------------------------------ filters

/// Normalized 1-d Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("blur sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_plane(pixels: &[f64], side: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                acc += w * pixels[r * side + reflect(c as isize + t as isize - radius, side)];
            }
            tmp[r * side + c] = acc;
        }
    }
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                acc += w * tmp[reflect(r as isize + t as isize - radius, side) * side + c];
            }
            out[r * side + c] = acc;
        }
    }
    out
}

fn to_f64(p: &Patch) -> Vec<f64> {
    p.pixels().iter().map(|&v| v as f64).collect()
}

pub fn gaussian_blur(patch: &Patch, sigma: f64) -> Result<Patch> {
    let kernel = gaussian_kernel(sigma)?;
    let out = blur_plane(&to_f64(patch), patch.side(), &kernel);
    Patch::new(
        patch.side(),
        out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        patch.resolution_um(),
    )
}

/// `clamp(x + δ·(G_σ(x) − x), 0, 1)`; with `unsharp` the sign of the
/// correction term is flipped.
pub fn sharpen(patch: &Patch, sigma: f64, delta: f64, unsharp: bool) -> Result<Patch> {
    if !(DELTA_RANGE.0..=DELTA_RANGE.1).contains(&delta) {
        return Err(Error::Parameter(format!(
            "sharpen delta {delta} outside [{}, {}]",
            DELTA_RANGE.0, DELTA_RANGE.1
        )));
    }
    let kernel = gaussian_kernel(sigma)?;
    let x = to_f64(patch);
    let g = blur_plane(&x, patch.side(), &kernel);
    let sign = if unsharp { -1.0 } else { 1.0 };
    let pixels = x
        .iter()
        .zip(&g)
        .map(|(&xv, &gv)| (xv + sign * delta * (gv - xv)).clamp(0.0, 1.0) as f32)
        .collect();
    Patch::new(patch.side(), pixels, patch.resolution_um())
}

/// Geometric transform, then gamma, then the optional filter.
pub fn apply_pipeline(source: &Patch, params: &AugmentParams, target: usize, unsharp: bool) -> Result<Patch> {
    let geo = rotate_mirror_translate(
        source,
        params.theta,
        params.mirror,
        params.shift_mm,
        params.direction,
        target,
    )?;
    let photo = gamma_augment(&geo, params.alpha, params.beta, params.z)?;
    match params.filter {
        Filter::None => Ok(photo),
        Filter::Blur { sigma } => gaussian_blur(&photo, sigma),
        Filter::Sharpen { sigma, delta } => sharpen(&photo, sigma, delta, unsharp),
    }
}

/// Central `target`-pixel crop.
pub fn center_crop(source: &Patch, target: usize) -> Result<Patch> {
    if target > source.side() {
        return Err(Error::Geometry(format!(
            "cannot crop {target} pixels from a {}-pixel patch",
            source.side()
        )));
    }
    let off = (source.side() - target) / 2;
    Patch::from_fn(target, source.resolution_um(), |r, c| source.at(r + off, c + off))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(side: usize) -> Patch {
        Patch::from_fn(side, 2.0, |r, c| ((r * side + c) % 97) as f32 / 96.0).unwrap()
    }

    #[test]
    fn gamma_identity_and_endpoints() {
        assert_eq!(gamma_exponent(0.0).unwrap(), 1.0);
        let p = ramp(9);
        assert_eq!(gamma_augment(&p, 1.0, 0.0, 0.0).unwrap(), p);
        let ones = Patch::new(8, vec![1.0; 64], 2.0).unwrap();
        for z in [-0.05, -0.01, 0.03, 0.05] {
            let out = gamma_augment(&ones, 0.93, 0.04, z).unwrap();
            assert!(out.pixels().iter().all(|&v| (v - 0.97).abs() < 1e-6));
        }
        assert!(gamma_augment(&p, 1.0, 0.0, 0.06).is_err());
    }

    #[test]
    fn gamma_at_z_max() {
        let g = gamma_exponent(0.05).unwrap();
        assert!((g - 0.8152).abs() < 1e-4, "{g}");
    }

    #[test]
    fn identity_geometry_is_center_crop() {
        let src = ramp(40);
        let out = rotate_mirror_translate(&src, 0.0, false, 0.0, 0.0, 20).unwrap();
        assert_eq!(out, center_crop(&src, 20).unwrap());
    }

    #[test]
    fn insufficient_margin_is_reported() {
        let src = ramp(20);
        let err = rotate_mirror_translate(&src, 0.0, false, 0.0, 0.0, 16).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
        assert!(err.to_string().contains("23"), "{err}");
    }

    #[test]
    fn shift_conversion() {
        assert!((shift_pixels(0.2, 2.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_normalized() {
        for s in [0.125, 0.4, 1.0, 2.5] {
            let k = gaussian_kernel(s).unwrap();
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
        }
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_blur(&ramp(8), -1.0).is_err());
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn constant_patch_is_invariant_under_filters() {
        let p = Patch::new(10, vec![0.37; 100], 2.0).unwrap();
        let b = gaussian_blur(&p, 0.8).unwrap();
        let s = sharpen(&p, 0.8, 1.2, false).unwrap();
        for (&x, (&y, &z)) in p.pixels().iter().zip(b.pixels().iter().zip(s.pixels())) {
            assert!((x - y).abs() < 1e-6 && (x - z).abs() < 1e-6);
        }
    }

    #[test]
    fn sharpen_unit_delta_is_blur() {
        let p = ramp(12);
        let a = sharpen(&p, 0.7, 1.0, false).unwrap();
        let b = gaussian_blur(&p, 0.7).unwrap();
        for (x, y) in a.pixels().iter().zip(b.pixels()) {
            assert!((x - y).abs() <= 1e-7);
        }
    }

    #[test]
    fn draw_is_deterministic() {
        assert_eq!(draw_params(5), draw_params(5));
    }
}
