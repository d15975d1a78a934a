use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"HSC1";

/// Height x width x bands intensity volume with a per-pixel label map.
///
/// Intensities are stored band-fastest: pixel `(r, c)` occupies
/// `intensities[(r * width + c) * bands..][..bands]`. Label 0 means
/// unlabeled, `1..=C` are class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub intensities: Vec<f32>,
    pub wavelengths: Option<Vec<f64>>,
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
}

impl HsiCube {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.bands;
        &self.intensities[start..start + self.bands]
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    /// Number of labeled pixels per class, index 0 = class 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in self.labels.iter().filter(|&&l| l > 0) {
            counts[l as usize - 1] += 1;
        }
        counts
    }

    /// Checks every structural invariant of the cube.
    pub fn validate(&self) -> Result<()> {
        let pixels = self
            .height
            .checked_mul(self.width)
            .ok_or_else(|| Error::DimensionOverflow(format!("{} x {}", self.height, self.width)))?;
        let values = pixels
            .checked_mul(self.bands)
            .ok_or_else(|| Error::DimensionOverflow(format!("{pixels} pixels x {} bands", self.bands)))?;
        if self.intensities.len() != values {
            return Err(Error::InvalidCube(format!(
                "{} intensities for {}x{}x{}",
                self.intensities.len(),
                self.height,
                self.width,
                self.bands
            )));
        }
        if self.labels.len() != pixels {
            return Err(Error::InvalidCube(format!("{} labels for {pixels} pixels", self.labels.len())));
        }
        if let Some(i) = self.intensities.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "intensities", index: i });
        }
        if let Some(i) = self.intensities.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidCube(format!("negative intensity at index {i}")));
        }
        if let Some(w) = &self.wavelengths {
            if w.len() != self.bands {
                return Err(Error::InvalidCube(format!("{} wavelengths for {} bands", w.len(), self.bands)));
            }
            if let Some(i) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "wavelengths", index: i });
            }
            if w.windows(2).any(|p| p[1] <= p[0]) {
                return Err(Error::InvalidCube("wavelengths must be strictly increasing".into()));
            }
        }
        let classes = self.num_classes();
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l as usize > classes) {
            return Err(Error::LabelRange { label: l as u32, index: i, classes });
        }
        Ok(())
    }
}

pub fn write_cube<W: Write>(cube: &HsiCube, mut w: W) -> Result<()> {
    cube.validate()?;
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::DimensionOverflow(format!("{what} = {v} does not fit in u32")))
    };
    let mut buf = Vec::with_capacity(21 + cube.intensities.len() * 4 + cube.labels.len() * 2);
    buf.extend_from_slice(&MAGIC);
    for (v, what) in [(cube.height, "height"), (cube.width, "width"), (cube.bands, "bands"), (cube.num_classes(), "classes")] {
        buf.extend_from_slice(&dim(v, what)?.to_le_bytes());
    }
    match &cube.wavelengths {
        Some(ws) => {
            buf.push(1);
            ws.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        }
        None => buf.push(0),
    }
    cube.intensities.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    cube.labels.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    for name in &cube.class_names {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::DimensionOverflow(format!("class name of {} bytes", name.len())))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn read_cube<R: Read>(mut r: R) -> Result<HsiCube> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<HsiCube> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::MagicMismatch { expected: MAGIC, found: magic });
    }
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let bands = r.u32("bands")? as usize;
    let classes = r.u32("classes")? as usize;
    let pixels = height
        .checked_mul(width)
        .ok_or_else(|| Error::DimensionOverflow(format!("{height} x {width}")))?;
    let values = pixels
        .checked_mul(bands)
        .filter(|v| v.checked_mul(4).is_some())
        .ok_or_else(|| Error::DimensionOverflow(format!("{pixels} pixels x {bands} bands")))?;
    let wavelengths = match r.take(1, "wavelength flag")?[0] {
        0 => None,
        1 => {
            let raw = r.take(bands.checked_mul(8).ok_or_else(|| Error::DimensionOverflow("wavelengths".into()))?, "wavelengths")?;
            Some(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>())
        }
        f => return Err(Error::InvalidCube(format!("wavelength flag {f}"))),
    };
    let raw = r.take(values * 4, "intensities")?;
    let intensities: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = intensities.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "intensities", index: i });
    }
    let raw = r.take(pixels.checked_mul(2).ok_or_else(|| Error::DimensionOverflow("labels".into()))?, "labels")?;
    let labels: Vec<u16> = raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l as usize > classes) {
        return Err(Error::LabelRange { label: l as u32, index: i, classes });
    }
    let mut class_names = Vec::with_capacity(classes.min(1 << 16));
    for _ in 0..classes {
        let len = r.u16("class name length")? as usize;
        let raw = r.take(len, "class name")?;
        class_names.push(
            String::from_utf8(raw.to_vec()).map_err(|_| Error::InvalidCube("class name is not UTF-8".into()))?,
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingBytes { count: bytes.len() - r.pos });
    }
    let cube = HsiCube { height, width, bands, intensities, wavelengths, labels, class_names };
    cube.validate()?;
    Ok(cube)
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    parse(&fs::read(path)?)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_cube(cube, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HsiCube {
        HsiCube {
            height: 2,
            width: 1,
            bands: 2,
            intensities: vec![1.0, 2.0, 3.0, 4.0],
            wavelengths: Some(vec![430.0, 860.0]),
            labels: vec![1, 0],
            class_names: vec!["a".into()],
        }
    }

    fn encode(c: &HsiCube) -> Vec<u8> {
        let mut v = Vec::new();
        write_cube(c, &mut v).unwrap();
        v
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = encode(&tiny());
        assert_eq!(&bytes[..4], b"HSC1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(bytes[20], 1);
        assert_eq!(&bytes[21..29], &430.0f64.to_le_bytes());
        assert_eq!(&bytes[37..41], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[53..55], &1u16.to_le_bytes());
        assert_eq!(&bytes[57..59], &1u16.to_le_bytes());
        assert_eq!(bytes[59], b'a');
        assert_eq!(bytes.len(), 60);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&tiny());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(parse(&bad), Err(Error::MagicMismatch { .. })));
        assert!(matches!(parse(&good[..good.len() - 3]), Err(Error::Truncated(_))));
        let mut label = good.clone();
        label[53] = 2;
        assert!(matches!(parse(&label), Err(Error::LabelRange { label: 2, .. })));
        let mut nan = good.clone();
        nan[37..41].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(parse(&nan), Err(Error::NonFinite { what: "intensities", .. })));
        let mut huge = good.clone();
        huge[4..16].copy_from_slice(&[0xff; 12]);
        assert!(matches!(parse(&huge), Err(Error::DimensionOverflow(_)) | Err(Error::Truncated(_))));
        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(parse(&trailing), Err(Error::TrailingBytes { count: 1 })));
    }
}
