//! Hyperspectral RandAugment.
//!
//! Patches are `s x s x B`, band-fastest, values in `[0, 1]`. Geometric ops
//! resample every band with the same coordinate map (bilinear, mirror
//! padding); photometric ops interpolate between the patch and a degenerate
//! reference image, generalized from RGB to `B` bands.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::reflect_index;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const MAX_MAGNITUDE: u32 = 30;
pub const SHEAR_MAX: f64 = 0.3;
/// Translation at full magnitude, as a fraction of the patch size.
pub const TRANSLATE_MAX: f64 = 0.33;
pub const ROTATE_MAX_DEG: f64 = 30.0;
pub const PHOTOMETRIC_MAX: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugOp {
    Identity,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    Brightness,
    Color,
    Contrast,
    Sharpness,
    AutoContrast,
}

impl AugOp {
    pub const ALL: [AugOp; 11] = [
        AugOp::Identity,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::Rotate,
        AugOp::Brightness,
        AugOp::Color,
        AugOp::Contrast,
        AugOp::Sharpness,
        AugOp::AutoContrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::Identity => "Identity",
            AugOp::ShearX => "ShearX",
            AugOp::ShearY => "ShearY",
            AugOp::TranslateX => "TranslateX",
            AugOp::TranslateY => "TranslateY",
            AugOp::Rotate => "Rotate",
            AugOp::Brightness => "Brightness",
            AugOp::Color => "Color",
            AugOp::Contrast => "Contrast",
            AugOp::Sharpness => "Sharpness",
            AugOp::AutoContrast => "AutoContrast",
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, AugOp::ShearX | AugOp::ShearY | AugOp::TranslateX | AugOp::TranslateY | AugOp::Rotate)
    }

    /// Whether the op's strength depends on the magnitude.
    pub fn is_parameterized(self) -> bool {
        !matches!(self, AugOp::Identity | AugOp::AutoContrast)
    }

    /// Physical parameter for a signed magnitude on the `0..=30` scale:
    /// shear factor, translation in pixels, rotation in degrees, or the
    /// photometric interpolation offset `m'`.
    pub fn parameter(self, signed_magnitude: i32, patch_size: usize) -> f64 {
        let m = signed_magnitude as f64 / MAX_MAGNITUDE as f64;
        match self {
            AugOp::Identity | AugOp::AutoContrast => 0.0,
            AugOp::ShearX | AugOp::ShearY => m * SHEAR_MAX,
            AugOp::TranslateX | AugOp::TranslateY => m * TRANSLATE_MAX * patch_size as f64,
            AugOp::Rotate => m * ROTATE_MAX_DEG,
            AugOp::Brightness | AugOp::Color | AugOp::Contrast | AugOp::Sharpness => m * PHOTOMETRIC_MAX,
        }
    }
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugOp::ALL
            .into_iter()
            .find(|op| op.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation op `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaPolicy {
    pub pool: Vec<AugOp>,
    pub n_ops: usize,
    pub magnitude: u32,
    pub seed: u64,
}

impl Default for RaPolicy {
    fn default() -> Self {
        Self { pool: AugOp::ALL.to_vec(), n_ops: 2, magnitude: 14, seed: 0 }
    }
}

impl RaPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.pool.is_empty() {
            return Err(Error::InvalidArgument("augmentation pool is empty".into()));
        }
        if self.n_ops == 0 {
            return Err(Error::InvalidArgument("n_ops must be at least 1".into()));
        }
        if self.magnitude > MAX_MAGNITUDE {
            return Err(Error::InvalidArgument(format!("magnitude {} exceeds {MAX_MAGNITUDE}", self.magnitude)));
        }
        Ok(())
    }
}

/// Draws `n_ops` ops uniformly from the pool (with replacement), each with a
/// random sign on the policy magnitude.
pub fn sample_policy(policy: &RaPolicy, rng: &mut Rng) -> Result<Vec<(AugOp, i32)>> {
    policy.validate()?;
    Ok((0..policy.n_ops)
        .map(|_| {
            let op = policy.pool[rng.random_range(0..policy.pool.len())];
            let sign = if rng.random_bool(0.5) { 1 } else { -1 };
            (op, sign * policy.magnitude as i32)
        })
        .collect())
}

fn check_patch(patch: &[f32], s: usize, bands: usize) -> Result<()> {
    if patch.is_empty() || s == 0 || bands == 0 {
        return Err(Error::Empty("patch"));
    }
    if patch.len() != s * s * bands {
        return Err(Error::shape("augment", format!("patch of {} values is not {s}x{s}x{bands}", patch.len())));
    }
    Ok(())
}

/// Applies `op` at `magnitude` with a random sign drawn from `rng`.
pub fn apply_augment(patch: &[f32], s: usize, bands: usize, op: AugOp, magnitude: u32, rng: &mut Rng) -> Result<Vec<f32>> {
    let sign = if rng.random_bool(0.5) { 1 } else { -1 };
    apply_signed(patch, s, bands, op, sign * magnitude as i32)
}

/// Deterministic form of [`apply_augment`].
pub fn apply_signed(patch: &[f32], s: usize, bands: usize, op: AugOp, signed_magnitude: i32) -> Result<Vec<f32>> {
    check_patch(patch, s, bands)?;
    if signed_magnitude.unsigned_abs() > MAX_MAGNITUDE {
        return Err(Error::InvalidArgument(format!("magnitude {signed_magnitude} outside -30..=30")));
    }
    if op == AugOp::Identity || (op.is_parameterized() && signed_magnitude == 0) {
        return Ok(patch.to_vec());
    }
    let p = op.parameter(signed_magnitude, s);
    let c = (s as f64 - 1.0) / 2.0;
    let mut out = match op {
        AugOp::Identity => unreachable!(),
        AugOp::ShearX => warp(patch, s, bands, |y, x| (y, x + p * (y - c))),
        AugOp::ShearY => warp(patch, s, bands, |y, x| (y + p * (x - c), x)),
        AugOp::TranslateX => warp(patch, s, bands, |y, x| (y, x - p)),
        AugOp::TranslateY => warp(patch, s, bands, |y, x| (y - p, x)),
        AugOp::Rotate => {
            let (sin, cos) = p.to_radians().sin_cos();
            warp(patch, s, bands, |y, x| {
                let (dy, dx) = (y - c, x - c);
                (c - sin * dx + cos * dy, c + cos * dx + sin * dy)
            })
        }
        AugOp::Brightness => blend(&vec![0.0; patch.len()], patch, 1.0 + p),
        AugOp::Color => blend(&spectral_mean(patch, bands), patch, 1.0 + p),
        AugOp::Contrast => blend(&band_mean_plane(patch, bands), patch, 1.0 + p),
        AugOp::Sharpness => blend(&box_blur(patch, s, bands), patch, 1.0 + p),
        AugOp::AutoContrast => auto_contrast(patch, bands),
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Applies a sampled policy sequence.
pub fn randaugment(patch: &[f32], s: usize, bands: usize, policy: &RaPolicy, rng: &mut Rng) -> Result<Vec<f32>> {
    check_patch(patch, s, bands)?;
    let mut out = patch.to_vec();
    for (op, m) in sample_policy(policy, rng)? {
        out = apply_signed(&out, s, bands, op, m)?;
    }
    Ok(out)
}

/// Resamples every band through `src(y, x) -> (y', x')`, mapping output
/// coordinates to input coordinates.
fn warp(patch: &[f32], s: usize, bands: usize, src: impl Fn(f64, f64) -> (f64, f64)) -> Vec<f32> {
    let mut out = vec![0.0f32; patch.len()];
    for y in 0..s {
        for x in 0..s {
            let (sy, sx) = src(y as f64, x as f64);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ];
            let dst = &mut out[(y * s + x) * bands..(y * s + x + 1) * bands];
            for (b, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for &(ty, tx, w) in &taps {
                    if w != 0.0 {
                        let pix = reflect_index(ty, s) * s + reflect_index(tx, s);
                        acc += w * patch[pix * bands + b] as f64;
                    }
                }
                *d = acc as f32;
            }
        }
    }
    out
}

/// `reference + factor * (patch - reference)`.
fn blend(reference: &[f32], patch: &[f32], factor: f64) -> Vec<f32> {
    reference
        .iter()
        .zip(patch)
        .map(|(&r, &v)| (r as f64 + factor * (v as f64 - r as f64)) as f32)
        .collect()
}

fn spectral_mean(patch: &[f32], bands: usize) -> Vec<f32> {
    patch
        .chunks_exact(bands)
        .flat_map(|px| {
            let m = px.iter().map(|&v| v as f64).sum::<f64>() / bands as f64;
            std::iter::repeat_n(m as f32, bands)
        })
        .collect()
}

fn band_mean_plane(patch: &[f32], bands: usize) -> Vec<f32> {
    let pixels = patch.len() / bands;
    let mut mean = vec![0.0f64; bands];
    for px in patch.chunks_exact(bands) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|m| (m / pixels as f64) as f32).collect();
    mean.iter().copied().cycle().take(patch.len()).collect()
}

/// 3x3 box filter per band with edge replication.
pub fn box_blur(patch: &[f32], s: usize, bands: usize) -> Vec<f32> {
    let clamp = |i: isize| i.clamp(0, s as isize - 1) as usize;
    let mut out = vec![0.0f32; patch.len()];
    for y in 0..s {
        for x in 0..s {
            for b in 0..bands {
                let mut acc = 0.0f64;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let pix = clamp(y as isize + dy) * s + clamp(x as isize + dx);
                        acc += patch[pix * bands + b] as f64;
                    }
                }
                out[(y * s + x) * bands + b] = (acc / 9.0) as f32;
            }
        }
    }
    out
}

/// Per-band min-max rescale to `[0, 1]`; constant bands are left unchanged.
pub fn auto_contrast(patch: &[f32], bands: usize) -> Vec<f32> {
    let mut lo = vec![f32::INFINITY; bands];
    let mut hi = vec![f32::NEG_INFINITY; bands];
    for px in patch.chunks_exact(bands) {
        for (b, &v) in px.iter().enumerate() {
            lo[b] = lo[b].min(v);
            hi[b] = hi[b].max(v);
        }
    }
    let mut out = patch.to_vec();
    for px in out.chunks_exact_mut(bands) {
        for (b, v) in px.iter_mut().enumerate() {
            if hi[b] > lo[b] {
                *v = ((*v as f64 - lo[b] as f64) / (hi[b] as f64 - lo[b] as f64)) as f32;
            }
        }
    }
    out
}
