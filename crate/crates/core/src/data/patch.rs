use super::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Per-band min-max rescale to `[0, 1]`. Constant bands map to zero.
pub fn normalize_per_band(cube: &HsiCube) -> HsiCube {
    let b = cube.bands;
    let mut lo = vec![f64::INFINITY; b];
    let mut hi = vec![f64::NEG_INFINITY; b];
    for px in cube.intensities.chunks_exact(b.max(1)) {
        for (k, &v) in px.iter().enumerate() {
            lo[k] = lo[k].min(v as f64);
            hi[k] = hi[k].max(v as f64);
        }
    }
    let mut out = cube.clone();
    for px in out.intensities.chunks_exact_mut(b.max(1)) {
        for (k, v) in px.iter_mut().enumerate() {
            let range = hi[k] - lo[k];
            *v = if range > 0.0 { ((*v as f64 - lo[k]) / range) as f32 } else { 0.0 };
        }
    }
    out
}

/// Reflects `i` into `0..len` without repeating the edge sample
/// (`-1 -> 1`, `len -> len - 2`).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Patches centred on labeled pixels.
///
/// Each patch is `s x s x B`, band-fastest, values in `[0, 1]`. Labels are
/// class ids `1..=C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub patch_size: usize,
    pub bands: usize,
    pub num_classes: usize,
    pub patches: Vec<f32>,
    pub labels: Vec<u16>,
    pub centers: Vec<(usize, usize)>,
    pub class_names: Vec<String>,
    pub wavelengths: Option<Vec<f64>>,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.bands
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        &self.patches[i * self.patch_len()..(i + 1) * self.patch_len()]
    }

    /// Spectrum of the labeled center pixel of patch `i`.
    pub fn center_spectrum(&self, i: usize) -> &[f32] {
        let c = self.patch_size / 2;
        let start = (c * self.patch_size + c) * self.bands;
        &self.patch(i)[start..start + self.bands]
    }

    /// Zero-based class indices used by the model and the losses.
    pub fn targets(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize - 1).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&l| counts[l as usize - 1] += 1);
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> PatchDataset {
        let mut patches = Vec::with_capacity(indices.len() * self.patch_len());
        indices.iter().for_each(|&i| patches.extend_from_slice(self.patch(i)));
        PatchDataset {
            patches,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            centers: indices.iter().map(|&i| self.centers[i]).collect(),
            ..self.empty_like()
        }
    }

    pub(crate) fn empty_like(&self) -> PatchDataset {
        PatchDataset {
            patch_size: self.patch_size,
            bands: self.bands,
            num_classes: self.num_classes,
            patches: Vec::new(),
            labels: Vec::new(),
            centers: Vec::new(),
            class_names: self.class_names.clone(),
            wavelengths: self.wavelengths.clone(),
        }
    }

    /// Model input `[N, B, s, s]` for the given sample indices.
    pub fn batch<T: Float>(&self, indices: &[usize]) -> Tensor<T> {
        let patches: Vec<&[f32]> = indices.iter().map(|&i| self.patch(i)).collect();
        patches_to_batch(&patches, self.patch_size, self.bands)
    }
}

/// Converts band-fastest `s x s x B` patches into a channel-first batch.
pub fn patches_to_batch<T: Float, P: AsRef<[f32]>>(patches: &[P], s: usize, bands: usize) -> Tensor<T> {
    let plane = s * s;
    let mut data = vec![T::zero(); patches.len() * bands * plane];
    for (n, p) in patches.iter().enumerate() {
        let dst = &mut data[n * bands * plane..(n + 1) * bands * plane];
        for (pix, spectrum) in p.as_ref().chunks_exact(bands).enumerate() {
            for (b, &v) in spectrum.iter().enumerate() {
                dst[b * plane + pix] = T::from_f(v as f64);
            }
        }
    }
    Tensor::new(vec![patches.len(), bands, s, s], data).expect("batch shape")
}

/// One patch per labeled pixel, mirror-padded at the scene border.
pub fn extract_patches(cube: &HsiCube, patch_size: usize) -> Result<PatchDataset> {
    if patch_size == 0 || patch_size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("patch size must be odd, got {patch_size}")));
    }
    let half = (patch_size / 2) as isize;
    let b = cube.bands;
    let labeled: Vec<(usize, usize)> = (0..cube.height)
        .flat_map(|r| (0..cube.width).map(move |c| (r, c)))
        .filter(|&(r, c)| cube.label(r, c) > 0)
        .collect();
    let mut patches = Vec::with_capacity(labeled.len() * patch_size * patch_size * b);
    for &(r, c) in &labeled {
        for dy in -half..=half {
            let rr = reflect_index(r as isize + dy, cube.height);
            for dx in -half..=half {
                let cc = reflect_index(c as isize + dx, cube.width);
                patches.extend_from_slice(cube.pixel(rr, cc));
            }
        }
    }
    Ok(PatchDataset {
        patch_size,
        bands: b,
        num_classes: cube.num_classes(),
        patches,
        labels: labeled.iter().map(|&(r, c)| cube.label(r, c)).collect(),
        centers: labeled,
        class_names: cube.class_names.clone(),
        wavelengths: cube.wavelengths.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_cube(h: usize, w: usize, b: usize) -> HsiCube {
        HsiCube {
            height: h,
            width: w,
            bands: b,
            intensities: (0..h * w * b).map(|v| v as f32).collect(),
            wavelengths: None,
            labels: vec![1; h * w],
            class_names: vec!["x".into()],
        }
    }

    #[test]
    fn normalize_endpoints_and_degenerate() {
        let mut cube = ramp_cube(2, 1, 2);
        cube.intensities = vec![1000.0, 5.0, 3000.0, 5.0];
        let n = normalize_per_band(&cube);
        assert_eq!(n.intensities, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut cube = ramp_cube(4, 3, 5);
        cube.intensities.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7919) % 113) as f32 * 13.0);
        let once = normalize_per_band(&cube);
        assert_eq!(normalize_per_band(&once), once);
    }

    #[test]
    fn reflection() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(9, 5), 1);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn unit_patch_is_pixel() {
        let cube = ramp_cube(3, 3, 4);
        let ds = extract_patches(&cube, 1).unwrap();
        assert_eq!(ds.len(), 9);
        for i in 0..9 {
            let (r, c) = ds.centers[i];
            assert_eq!(ds.patch(i), cube.pixel(r, c));
        }
    }

    #[test]
    fn even_size_rejected() {
        assert!(extract_patches(&ramp_cube(3, 3, 1), 4).is_err());
    }

    #[test]
    fn batch_layout_roundtrip() {
        let cube = ramp_cube(4, 4, 3);
        let ds = extract_patches(&cube, 3).unwrap();
        let batch: Tensor<f64> = ds.batch(&[5, 2]);
        assert_eq!(batch.shape(), &[2, 3, 3, 3]);
        let (row, patch) = (batch.row(1), ds.patch(2));
        for pix in 0..9 {
            for b in 0..3 {
                assert_eq!(row[b * 9 + pix] as f32, patch[pix * 3 + b]);
            }
        }
    }
}
