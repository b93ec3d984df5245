//! The hyperspectral image type and its on-disk `HSC1` format.
//!
//! A [`HyperCube`] is an `H x W x N` radiance volume stored band-innermost
//! (row, col, band) in row-major order, with one wavelength in nanometers
//! per band. Values are held as `f64` in memory; the file stores `f32`.

use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};

pub const HSC_MAGIC: [u8; 4] = *b"HSC1";

#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    wavelengths: Vec<f64>,
    data: Vec<f64>,
}

/// The band values of one pixel, in wavelength order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralVector(pub Vec<f64>);

impl Deref for SpectralVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_wavelengths(wavelengths: &[f64]) -> Result<()> {
    if let Some(i) = wavelengths.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    for (i, pair) in wavelengths.windows(2).enumerate() {
        if pair[1] <= pair[0] {
            return Err(Error::NonIncreasingWavelengths { index: i + 1 });
        }
    }
    Ok(())
}

impl HyperCube {
    pub fn new(height: usize, width: usize, wavelengths: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        if wavelengths.is_empty() {
            return Err(Error::Shape("a cube needs at least one band".into()));
        }
        check_wavelengths(&wavelengths)?;
        let expected = height * width * wavelengths.len();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{height}x{width}x{} cube needs {expected} values, got {}",
                wavelengths.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self {
            height,
            width,
            wavelengths,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, wavelengths: Vec<f64>) -> Result<Self> {
        Self::filled(height, width, wavelengths, 0.0)
    }

    pub fn filled(height: usize, width: usize, wavelengths: Vec<f64>, value: f64) -> Result<Self> {
        let n = height * width * wavelengths.len();
        Self::new(height, width, wavelengths, vec![value; n])
    }

    /// Builds a cube from `f(row, col, band)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        wavelengths: Vec<f64>,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let bands = wavelengths.len();
        let mut data = Vec::with_capacity(height * width * bands);
        for r in 0..height {
            for c in 0..width {
                for b in 0..bands {
                    data.push(f(r, c, b));
                }
            }
        }
        Self::new(height, width, wavelengths, data)
    }

    /// Same shape and wavelengths, new payload.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.wavelengths.clone(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, band: usize) -> usize {
        (row * self.width + col) * self.bands() + band
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data[self.index(row, col, band)]
    }

    pub fn pixel_spectrum(&self, row: usize, col: usize) -> Result<SpectralVector> {
        if row >= self.height || col >= self.width {
            return Err(Error::OutOfBounds(format!(
                "pixel ({row}, {col}) outside {}x{} cube",
                self.height, self.width
            )));
        }
        let start = self.index(row, col, 0);
        Ok(SpectralVector(self.data[start..start + self.bands()].to_vec()))
    }

    /// Borrowed spectrum of the pixel with flat index `pixel`.
    #[inline]
    pub fn spectrum_at(&self, pixel: usize) -> &[f64] {
        let n = self.bands();
        &self.data[pixel * n..(pixel + 1) * n]
    }

    pub fn same_shape(&self, other: &HyperCube) -> bool {
        self.height == other.height && self.width == other.width && self.bands() == other.bands()
    }

    pub fn ensure_same_shape(&self, other: &HyperCube) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.height,
                self.width,
                self.bands(),
                other.height,
                other.width,
                other.bands()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            wavelengths: self.wavelengths.clone(),
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Encodes the cube in `HSC1` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.bands() + self.data.len()));
        out.extend_from_slice(&HSC_MAGIC);
        for dim in [self.height, self.width, self.bands()] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &w in &self.wavelengths {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != HSC_MAGIC {
            return Err(Error::BadMagic {
                expected: HSC_MAGIC,
                found: magic,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, n) = (dim(0), dim(1), dim(2));
        let expected = h
            .checked_mul(w)
            .and_then(|hw| hw.checked_mul(n))
            .and_then(|v| v.checked_add(n))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(16))
            .ok_or_else(|| Error::Shape(format!("header dimensions overflow: {h}x{w}x{n}")))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes {
                expected,
                found: bytes.len(),
            });
        }
        let floats: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let (wl, data) = floats.split_at(n);
        if n == 0 {
            return Err(Error::Shape("cube declares zero bands".into()));
        }
        Self::new(h, w, wl.to_vec(), data.to_vec())
    }
}

pub fn write_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&cube.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    HyperCube::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> HyperCube {
        HyperCube::from_fn(2, 2, vec![400.0, 500.0, 600.0], |r, c, b| (r * 6 + c * 3 + b) as f64 * 0.125)
            .unwrap()
    }

    #[test]
    fn file_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.hsc");
        let c = small();
        write_cube(&c, &p).unwrap();
        let back = read_cube(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.wavelengths(), &[400.0, 500.0, 600.0]);
    }

    #[test]
    fn writes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.hsc"), dir.path().join("b.hsc"));
        write_cube(&small(), &a).unwrap();
        write_cube(&small(), &b).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn single_value_layout() {
        let c = HyperCube::new(1, 1, vec![550.0], vec![0.5]).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[0..4], b"HSC1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &550f32.to_le_bytes());
        assert_eq!(&bytes[20..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = small().to_bytes();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(HyperCube::from_bytes(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_truncated_and_trailing() {
        let bytes = small().to_bytes();
        assert!(matches!(
            HyperCube::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(HyperCube::from_bytes(&longer), Err(Error::TrailingBytes { .. })));
    }

    #[test]
    fn rejects_non_increasing_wavelengths() {
        let mut bytes = small().to_bytes();
        bytes[20..24].copy_from_slice(&400f32.to_le_bytes());
        assert!(matches!(
            HyperCube::from_bytes(&bytes),
            Err(Error::NonIncreasingWavelengths { index: 1 })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let mut bytes = small().to_bytes();
        let at = 16 + 4 * 3 + 4 * 5;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(HyperCube::from_bytes(&bytes), Err(Error::NonFinite { index: 5 })));
        assert!(matches!(
            HyperCube::new(1, 1, vec![500.0], vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn pixel_spectrum_indexing() {
        let c = HyperCube::filled(3, 2, vec![1.0, 2.0, 3.0, 4.0], 0.7).unwrap();
        assert_eq!(c.pixel_spectrum(2, 1).unwrap().0, vec![0.7; 4]);
        let c = HyperCube::from_fn(3, 2, vec![1.0, 2.0, 3.0, 4.0], |_, _, b| b as f64).unwrap();
        assert_eq!(c.pixel_spectrum(1, 0).unwrap().0, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(matches!(c.pixel_spectrum(3, 0), Err(Error::OutOfBounds(_))));
        assert!(matches!(c.pixel_spectrum(0, 2), Err(Error::OutOfBounds(_))));
    }

    proptest! {
        #[test]
        fn round_trip_any_f32_cube(h in 1usize..5, w in 1usize..5, n in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let wl: Vec<f64> = (0..n).map(|i| 400.0 + 10.0 * i as f64).collect();
            let data: Vec<f64> = (0..h * w * n).map(|_| (rng.gen::<f32>() * 3.0) as f64).collect();
            let c = HyperCube::new(h, w, wl, data).unwrap();
            let back = HyperCube::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            for r in 0..h {
                for k in 0..w {
                    let s = c.pixel_spectrum(r, k).unwrap();
                    for b in 0..n {
                        prop_assert_eq!(s[b], c.data()[r * w * n + k * n + b]);
                    }
                }
            }
        }
    }
}
