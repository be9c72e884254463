//! Gray-level co-occurrence features of quantized heatmaps.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::Label;

/// Pixel offsets `(dx, dy)` for 0, 45, 90 and 135 degrees at distance 1,
/// with y growing downward.
pub const ANGLE_OFFSETS: [(i32, i32); 4] = [(1, 0), (1, -1), (0, 1), (-1, 1)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlcmSpec {
    pub gray_levels: usize,
    pub distance: usize,
    /// Angles in degrees; each must be one of 0, 45, 90, 135.
    pub angles: Vec<u32>,
}

impl Default for GlcmSpec {
    fn default() -> Self {
        Self {
            gray_levels: 100,
            distance: 1,
            angles: vec![0, 45, 90, 135],
        }
    }
}

impl GlcmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gray_levels == 0 || self.gray_levels > 101 {
            return Err(Error::Config(format!(
                "gray_levels {} not in 1..=101",
                self.gray_levels
            )));
        }
        if self.distance == 0 {
            return Err(Error::Config("GLCM distance must be positive".into()));
        }
        if self.angles.is_empty() {
            return Err(Error::Config("at least one GLCM angle is required".into()));
        }
        self.offsets().map(|_| ())
    }

    pub fn offsets(&self) -> Result<Vec<(i32, i32)>> {
        let d = self.distance as i32;
        self.angles
            .iter()
            .map(|a| {
                let (dx, dy) = match a {
                    0 => ANGLE_OFFSETS[0],
                    45 => ANGLE_OFFSETS[1],
                    90 => ANGLE_OFFSETS[2],
                    135 => ANGLE_OFFSETS[3],
                    other => return Err(Error::Config(format!("unsupported GLCM angle {other}"))),
                };
                Ok((dx * d, dy * d))
            })
            .collect()
    }

    pub fn feature_len(&self) -> usize {
        self.gray_levels * self.gray_levels * self.angles.len()
    }
}

/// Integer gray levels on the heatmap lattice, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelMap {
    pub height: usize,
    pub width: usize,
    pub levels: Vec<u16>,
}

impl LevelMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.levels[y * self.width + x]
    }
}

/// `min(round(p * 100), 99)` for one probability, computed at the heatmap's
/// single precision.
pub fn quantize_value(p: f32) -> Result<u16> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("heatmap value {p} outside [0, 1]")));
    }
    Ok(((p * 100.0).round() as u16).min(99))
}

pub fn quantize(heatmap: &Heatmap) -> Result<LevelMap> {
    Ok(LevelMap {
        height: heatmap.size(),
        width: heatmap.size(),
        levels: heatmap
            .values()
            .iter()
            .map(|&p| quantize_value(p))
            .collect::<Result<_>>()?,
    })
}

/// Non-symmetric co-occurrence counts: for every `(x, y)` whose neighbour
/// `(x + a, y + b)` is in bounds, `M[q(x, y)][q(x + a, y + b)] += 1`.
/// Returned row-major as a `g x g` matrix.
pub fn glcm(qmap: &LevelMap, offset: (i32, i32), g: usize) -> Result<Vec<u32>> {
    if let Some(l) = qmap.levels.iter().find(|&&l| l as usize >= g) {
        return Err(Error::Domain(format!("level {l} >= gray levels {g}")));
    }
    let mut m = vec![0u32; g * g];
    let (a, b) = offset;
    let (w, h) = (qmap.width as i64, qmap.height as i64);
    // restrict the raster to pixels whose neighbour is in bounds
    let x_range = (0i64.max(-a as i64))..(w.min(w - a as i64));
    let y_range = (0i64.max(-b as i64))..(h.min(h - b as i64));
    for y in y_range {
        let row = (y * w) as usize;
        let nrow = ((y + b as i64) * w) as usize;
        for x in x_range.clone() {
            let g1 = qmap.levels[row + x as usize] as usize;
            let g2 = qmap.levels[nrow + (x + a as i64) as usize] as usize;
            m[g1 * g + g2] += 1;
        }
    }
    Ok(m)
}

/// Stacked co-occurrence counts, flattened in `(level1, level2, angle)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlcmFeature {
    pub gray_levels: usize,
    pub angles: usize,
    pub counts: Vec<u32>,
}

impl GlcmFeature {
    /// The `g x g` matrix of one angle, row-major.
    pub fn angle_matrix(&self, angle: usize) -> Vec<u32> {
        self.counts
            .iter()
            .skip(angle)
            .step_by(self.angles)
            .copied()
            .collect()
    }

    pub fn angle_total(&self, angle: usize) -> u64 {
        self.counts
            .iter()
            .skip(angle)
            .step_by(self.angles)
            .map(|&c| c as u64)
            .sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

pub fn feature_vector(heatmap: &Heatmap, spec: &GlcmSpec) -> Result<GlcmFeature> {
    spec.validate()?;
    let q = quantize(heatmap)?;
    let g = spec.gray_levels;
    let offsets = spec.offsets()?;
    let mats = offsets
        .iter()
        .map(|&o| glcm(&q, o, g))
        .collect::<Result<Vec<_>>>()?;
    let n = offsets.len();
    let mut counts = vec![0u32; g * g * n];
    for (angle, m) in mats.iter().enumerate() {
        for (cell, &c) in m.iter().enumerate() {
            counts[cell * n + angle] = c;
        }
    }
    Ok(GlcmFeature {
        gray_levels: g,
        angles: n,
        counts,
    })
}

/// Index row of the feature store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndexRecord {
    pub scan_id: String,
    pub slice_index: usize,
    pub label: Label,
    pub row: usize,
}

const STORE_MAGIC: &[u8; 4] = b"GLCF";

/// Binary matrix of counts: magic, rows, cols, then `rows * cols` u32 values.
pub fn write_feature_matrix<W: Write>(features: &[GlcmFeature], out: W) -> Result<()> {
    let cols = features.first().map_or(0, |f| f.counts.len());
    let mut w = binio::Writer::new(out, "feature matrix");
    w.magic(STORE_MAGIC)?;
    w.u32(features.len() as u32)?;
    w.u32(cols as u32)?;
    for f in features {
        if f.counts.len() != cols {
            return Err(Error::Shape(format!(
                "feature of length {} in a {cols}-column store",
                f.counts.len()
            )));
        }
        w.u32s(&f.counts)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_feature_matrix<R: Read>(input: R, spec: &GlcmSpec) -> Result<Vec<GlcmFeature>> {
    let mut r = binio::Reader::new(input, "feature matrix");
    r.expect_magic(STORE_MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if rows > 0 && cols != spec.feature_len() {
        return Err(Error::Shape(format!(
            "store has {cols} columns, spec implies {}",
            spec.feature_len()
        )));
    }
    (0..rows)
        .map(|_| {
            Ok(GlcmFeature {
                gray_levels: spec.gray_levels,
                angles: spec.angles.len(),
                counts: r.u32s(cols)?,
            })
        })
        .collect()
}

pub fn write_feature_index<W: Write>(records: &[FeatureIndexRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("feature index", e))?;
    Ok(())
}

pub fn read_feature_index<R: Read>(input: R) -> Result<Vec<FeatureIndexRecord>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}
