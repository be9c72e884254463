//! CT scan ingestion: the [`ScanVolume`] container, the raw sidecar format,
//! DICOM series reading and intensity normalization.

mod dicom;
mod raw;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dicom::{read_dicom_series, DicomSlice};
pub use raw::{read_raw, write_raw};

/// Stored-value range of the synthetic volumes and the normalization default.
pub const DEFAULT_RANGE: (i16, i16) = (-1024, 3071);

/// One axial slice, stored losslessly as signed 16-bit values in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<i16>,
    pub slice_index: usize,
}

impl SliceImage {
    pub fn new(height: usize, width: usize, pixels: Vec<i16>, slice_index: usize) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "slice {slice_index}: {} pixels for {height}x{width}",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            slice_index,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> i16 {
        self.pixels[y * self.width + x]
    }
}

/// An immutable stack of slices sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanVolume {
    scan_id: String,
    slices: Vec<SliceImage>,
    slice_spacing_mm: f64,
    pixel_value_range: (i16, i16),
}

impl ScanVolume {
    pub fn new(
        scan_id: impl Into<String>,
        slices: Vec<SliceImage>,
        slice_spacing_mm: f64,
        pixel_value_range: (i16, i16),
    ) -> Result<Self> {
        let scan_id = scan_id.into();
        let first = slices
            .first()
            .ok_or_else(|| Error::Inconsistent(format!("{scan_id}: no slices")))?;
        let (h, w) = (first.height, first.width);
        if !(slice_spacing_mm > 0.0 && slice_spacing_mm.is_finite()) {
            return Err(Error::Inconsistent(format!(
                "{scan_id}: slice spacing {slice_spacing_mm} must be positive"
            )));
        }
        let (lo, hi) = pixel_value_range;
        if lo > hi {
            return Err(Error::Inconsistent(format!(
                "{scan_id}: range ({lo}, {hi})"
            )));
        }
        for s in &slices {
            if s.height != h || s.width != w {
                return Err(Error::Inconsistent(format!(
                    "{scan_id}: slice {} is {}x{}, expected {h}x{w}",
                    s.slice_index, s.height, s.width
                )));
            }
            if let Some(p) = s.pixels.iter().find(|&&p| p < lo || p > hi) {
                return Err(Error::Inconsistent(format!(
                    "{scan_id}: slice {} has value {p} outside ({lo}, {hi})",
                    s.slice_index
                )));
            }
        }
        Ok(Self {
            scan_id,
            slices,
            slice_spacing_mm,
            pixel_value_range,
        })
    }

    pub fn scan_id(&self) -> &str {
        &self.scan_id
    }

    pub fn slices(&self) -> &[SliceImage] {
        &self.slices
    }

    pub fn slice(&self, index: usize) -> Option<&SliceImage> {
        self.slices.get(index)
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height
    }

    pub fn width(&self) -> usize {
        self.slices[0].width
    }

    pub fn slice_spacing_mm(&self) -> f64 {
        self.slice_spacing_mm
    }

    pub fn pixel_value_range(&self) -> (i16, i16) {
        self.pixel_value_range
    }

    /// Same geometry and metadata under a different identifier.
    pub fn with_scan_id(mut self, scan_id: impl Into<String>) -> Self {
        self.scan_id = scan_id.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanFormat {
    DicomSeries,
    RawVolume,
}

/// Load a scan from disk. `path` is a series directory for DICOM, or the
/// pixel file (or its `.meta` sidecar) for the raw format.
pub fn load_scan(path: &Path, format: ScanFormat) -> Result<ScanVolume> {
    match format {
        ScanFormat::RawVolume => read_raw(path),
        ScanFormat::DicomSeries => read_dicom_series(path),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// `[lo, hi] -> [0, 1]`
    LinearUnit,
    /// `[lo, hi] -> [-1, 1]`
    LinearSigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationSpec {
    pub lo: i32,
    pub hi: i32,
    pub mode: NormalizationMode,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self {
            lo: DEFAULT_RANGE.0 as i32,
            hi: DEFAULT_RANGE.1 as i32,
            mode: NormalizationMode::LinearUnit,
        }
    }
}

impl NormalizationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hi <= self.lo {
            return Err(Error::Config(format!(
                "normalization range ({}, {}) needs hi > lo",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, value: i16) -> f64 {
        let t =
            ((value as f64 - self.lo as f64) / (self.hi as f64 - self.lo as f64)).clamp(0.0, 1.0);
        match self.mode {
            NormalizationMode::LinearUnit => t,
            NormalizationMode::LinearSigned => 2.0 * t - 1.0,
        }
    }
}

/// Dense real-valued raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

pub fn normalize_slice(slice: &SliceImage, spec: &NormalizationSpec) -> Result<Plane> {
    spec.validate()?;
    Ok(Plane {
        height: slice.height,
        width: slice.width,
        data: slice.pixels.iter().map(|&p| spec.apply(p)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice_of(values: &[i16]) -> SliceImage {
        SliceImage::new(1, values.len(), values.to_vec(), 0).unwrap()
    }

    #[test]
    fn normalize_boundaries_and_midpoint() {
        let spec = NormalizationSpec {
            lo: -1000,
            hi: 3000,
            mode: NormalizationMode::LinearUnit,
        };
        let out = normalize_slice(&slice_of(&[-1000, 3000, 1000]), &spec).unwrap();
        assert_eq!(out.data, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn normalize_clamps_and_signed_mode() {
        let mut spec = NormalizationSpec {
            lo: 0,
            hi: 100,
            mode: NormalizationMode::LinearSigned,
        };
        let out = normalize_slice(&slice_of(&[-50, 0, 50, 100, 200]), &spec).unwrap();
        assert_eq!(out.data, vec![-1.0, -1.0, 0.0, 1.0, 1.0]);
        spec.hi = 0;
        assert!(matches!(
            normalize_slice(&slice_of(&[1]), &spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn volume_rejects_mixed_geometry_and_out_of_range() {
        let a = SliceImage::new(2, 2, vec![0; 4], 0).unwrap();
        let b = SliceImage::new(2, 3, vec![0; 6], 1).unwrap();
        assert!(matches!(
            ScanVolume::new("s", vec![a.clone(), b], 1.0, (0, 10)),
            Err(Error::Inconsistent(_))
        ));
        let c = SliceImage::new(2, 2, vec![0, 0, 0, 11], 1).unwrap();
        assert!(ScanVolume::new("s", vec![a.clone(), c], 1.0, (0, 10)).is_err());
        assert!(ScanVolume::new("s", vec![a.clone()], 0.0, (0, 10)).is_err());
        assert!(ScanVolume::new("s", vec![], 1.0, (0, 10)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_monotone_and_bounded(a in i16::MIN..i16::MAX, b in i16::MIN..i16::MAX) {
            let spec = NormalizationSpec::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (x, y) = (spec.apply(lo), spec.apply(hi));
            proptest::prop_assert!(x <= y);
            proptest::prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        }
    }
}
