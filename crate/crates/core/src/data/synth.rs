use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HsiCube;
use crate::error::{Error, Result};
use crate::rng;

/// A class prototype: piecewise-linear control points `(band, raw value)`
/// spanning band 0 to band B-1, optionally blended toward another class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub name: String,
    pub prototype: Vec<[f64; 2]>,
    /// `(class id, weight)`: the prototype becomes
    /// `(1 - weight) * own + weight * prototype(class id)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blend: Option<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Layout {
    /// Square tiles assigned to classes in a Latin-square pattern; the last
    /// `gutter` rows and columns of every tile stay unlabeled.
    Tiles { tile: usize, gutter: usize },
}

/// Spatially smooth random offset added to a band range, e.g. canopy vigor
/// or soil moisture varying across the scene. It is a sum of random plane
/// waves with unit variance, scaled by `sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothField {
    /// First and last affected band, inclusive.
    pub bands: [usize; 2],
    pub sigma: f64,
    /// Typical wavelength of the variation in pixels.
    pub wavelength: f64,
}

const FIELD_WAVES: usize = 8;

impl SmoothField {
    /// Field value per pixel, row-major.
    pub fn sample(&self, height: usize, width: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::rng_for(seed, &[rng::name_hash("field")]);
        let waves: Vec<(f64, f64, f64)> = (0..FIELD_WAVES)
            .map(|_| {
                let theta = r.random_range(0.0..std::f64::consts::TAU);
                let len = self.wavelength * r.random_range(0.75..1.25);
                let k = std::f64::consts::TAU / len;
                (k * theta.cos(), k * theta.sin(), r.random_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        let norm = (2.0 / FIELD_WAVES as f64).sqrt();
        (0..height)
            .flat_map(|y| (0..width).map(move |x| (y as f64, x as f64)))
            .map(|(y, x)| norm * waves.iter().map(|&(kx, ky, phi)| (kx * x + ky * y + phi).cos()).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Wavelength of the first and last band in nm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelength_range: Option<[f64; 2]>,
    /// Standard deviation of the per-value Gaussian noise, raw units.
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<SmoothField>,
    pub layout: Layout,
    pub classes: Vec<SynthClass>,
}

impl SynthSpec {
    /// Four-class scene modelled on the Pavia University spectra: a
    /// vegetation class with a low visible range and a steep near-infrared
    /// rise, a flat bare-soil class, and a close variant of each.
    pub fn pavia_mini() -> Self {
        let bands = 64;
        let meadows = vec![
            [0.0, 700.0],
            [10.0, 900.0],
            [16.0, 1150.0],
            [22.0, 850.0],
            [43.0, 800.0],
            [50.0, 2800.0],
            [63.0, 3000.0],
        ];
        let soil = vec![[0.0, 1700.0], [20.0, 2100.0], [43.0, 2300.0], [63.0, 2050.0]];
        let meadows_b = vec![
            [0.0, 765.0],
            [10.0, 965.0],
            [16.0, 1215.0],
            [22.0, 915.0],
            [43.0, 865.0],
            [50.0, 2250.0],
            [63.0, 2450.0],
        ];
        let soil_b = vec![[0.0, 1765.0], [20.0, 2165.0], [43.0, 2365.0], [45.0, 2100.0], [50.0, 1700.0], [63.0, 1500.0]];
        SynthSpec {
            height: 52,
            width: 52,
            bands,
            wavelength_range: Some([430.0, 860.0]),
            noise_sigma: 80.0,
            field: Some(SmoothField { bands: [44, 63], sigma: 300.0, wavelength: 16.0 }),
            layout: Layout::Tiles { tile: 13, gutter: 1 },
            classes: vec![
                SynthClass { name: "Meadows".into(), prototype: meadows, blend: None },
                SynthClass { name: "Bare soil".into(), prototype: soil, blend: None },
                SynthClass { name: "Meadows (dry)".into(), prototype: meadows_b, blend: None },
                SynthClass { name: "Bare soil (wet)".into(), prototype: soil_b, blend: None },
            ],
        }
    }

    /// Per-class prototype curves after blending, one value per band.
    pub fn prototypes(&self) -> Result<Vec<Vec<f64>>> {
        let own: Vec<Vec<f64>> = self
            .classes
            .iter()
            .map(|c| interpolate(&c.name, &c.prototype, self.bands))
            .collect::<Result<_>>()?;
        self.classes
            .iter()
            .zip(&own)
            .map(|(c, curve)| match c.blend {
                None => Ok(curve.clone()),
                Some((id, w)) => {
                    let other = id
                        .checked_sub(1)
                        .and_then(|i| own.get(i))
                        .ok_or(Error::ClassRange { id, classes: own.len() })?;
                    Ok(curve.iter().zip(other).map(|(a, b)| (1.0 - w) * a + w * b).collect())
                }
            })
            .collect()
    }

    /// Label map implied by the layout.
    pub fn label_map(&self) -> Vec<u16> {
        let c = self.classes.len();
        let Layout::Tiles { tile, gutter } = self.layout;
        let tile = tile.max(1);
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |col| (r, col)))
            .map(|(r, col)| {
                let (ty, tx) = (r / tile, col / tile);
                let (iy, ix) = (r % tile, col % tile);
                if c == 0 || iy + gutter >= tile || ix + gutter >= tile {
                    0
                } else {
                    ((tx + ty) % c) as u16 + 1
                }
            })
            .collect()
    }

    /// Class owning each pixel, including unlabeled gutter pixels.
    fn material_map(&self) -> Vec<usize> {
        let c = self.classes.len().max(1);
        let Layout::Tiles { tile, .. } = self.layout;
        let tile = tile.max(1);
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |col| ((col / tile) + (r / tile)) % c))
            .collect()
    }
}

fn interpolate(name: &str, points: &[[f64; 2]], bands: usize) -> Result<Vec<f64>> {
    let span = points.last().map(|p| p[0] + 1.0).unwrap_or(0.0);
    if points.is_empty() || points[0][0] != 0.0 || span != bands as f64 {
        return Err(Error::PrototypeBands { class: name.to_string(), expected: bands, found: span.max(0.0) as usize });
    }
    if points.windows(2).any(|w| w[1][0] <= w[0][0]) {
        return Err(Error::InvalidArgument(format!("control points of {name:?} must have increasing bands")));
    }
    Ok((0..bands)
        .map(|b| {
            let x = b as f64;
            let k = points.windows(2).position(|w| x <= w[1][0]).unwrap_or(0);
            if points.len() == 1 {
                return points[0][1];
            }
            let ([x0, y0], [x1, y1]) = (points[k], points[k + 1]);
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        })
        .collect())
}

/// Prototype plus the optional smooth field plus i.i.d. Gaussian noise per
/// value, clipped at zero. The label layout does not depend on `seed`.
pub fn synthesize_dataset(spec: &SynthSpec, seed: u64) -> Result<HsiCube> {
    if spec.classes.is_empty() || spec.bands == 0 {
        return Err(Error::InvalidArgument("synthetic scene needs classes and bands".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma {}", spec.noise_sigma)));
    }
    let protos = spec.prototypes()?;
    let field = match &spec.field {
        Some(f) if f.bands[0] > f.bands[1] || f.bands[1] >= spec.bands || f.sigma.is_nan() || f.sigma < 0.0 || f.wavelength.is_nan() || f.wavelength <= 0.0 => {
            return Err(Error::InvalidArgument(format!("smooth field {f:?} for {} bands", spec.bands)));
        }
        Some(f) => Some((f, f.sample(spec.height, spec.width, seed))),
        None => None,
    };
    let mut r = rng::rng_from(seed);
    let mut intensities = Vec::with_capacity(spec.height * spec.width * spec.bands);
    for (pix, class) in spec.material_map().into_iter().enumerate() {
        for (b, &v) in protos[class].iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut r);
            let offset = match &field {
                Some((f, values)) if (f.bands[0]..=f.bands[1]).contains(&b) => f.sigma * values[pix],
                _ => 0.0,
            };
            intensities.push((v + offset + spec.noise_sigma * noise).max(0.0) as f32);
        }
    }
    let wavelengths = spec.wavelength_range.map(|[lo, hi]| {
        let step = if spec.bands > 1 { (hi - lo) / (spec.bands - 1) as f64 } else { 0.0 };
        (0..spec.bands).map(|b| lo + step * b as f64).collect()
    });
    let cube = HsiCube {
        height: spec.height,
        width: spec.width,
        bands: spec.bands,
        intensities,
        wavelengths,
        labels: spec.label_map(),
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
    };
    cube.validate()?;
    Ok(cube)
}
