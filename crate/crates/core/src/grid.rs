//! Sliding-window geometry over the inscribed circle of a slice, patch
//! extraction, and the training-sample augmentation scheme.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Plane;
use crate::Label;

/// Window geometry: frame size, window size and stride, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub ct_size: usize,
    pub img_size: usize,
    pub stride: usize,
    /// Evaluate the row equations exactly as printed (right half only,
    /// half-chord measured from the top edge) instead of the symmetric chord.
    #[serde(default)]
    pub literal_equations: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            ct_size: 512,
            img_size: 32,
            stride: 4,
            literal_equations: false,
        }
    }
}

impl GridSpec {
    pub fn new(ct_size: usize, img_size: usize, stride: usize) -> Self {
        Self {
            ct_size,
            img_size,
            stride,
            literal_equations: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_size == 0 || !self.img_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "img_size {} must be even and positive",
                self.img_size
            )));
        }
        if self.img_size > self.ct_size {
            return Err(Error::Config(format!(
                "img_size {} exceeds ct_size {}",
                self.img_size, self.ct_size
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Side length of the stride lattice, `(ct_size - img_size) / stride + 1`.
    pub fn lattice_size(&self) -> usize {
        (self.ct_size - self.img_size) / self.stride + 1
    }

    pub fn half(&self) -> usize {
        self.img_size / 2
    }
}

/// Row y-coordinates: `img_size/2 + i*stride`.
pub fn row_centers(spec: &GridSpec) -> Vec<usize> {
    (0..spec.lattice_size())
        .map(|i| spec.half() + i * spec.stride)
        .collect()
}

/// x-coordinates of the windows on row `y` that fit inside the chord of the
/// inscribed circle at that row.
pub fn row_x_centers(y: usize, spec: &GridSpec) -> Vec<usize> {
    let c = spec.ct_size / 2;
    let r2 = (c * c) as i64;
    if spec.literal_equations {
        let h2 = (y * y) as i64;
        if h2 > r2 {
            return Vec::new();
        }
        let w = isqrt((r2 - h2) as u64) as usize;
        if w < spec.img_size {
            return Vec::new();
        }
        let jmax = (w - spec.img_size) / (2 * spec.stride);
        return (0..=jmax).map(|j| c + j * spec.stride).collect();
    }
    let dy = y.abs_diff(c) as i64;
    if dy * dy > r2 {
        return Vec::new();
    }
    let w = 2 * isqrt((r2 - dy * dy) as u64) as usize;
    if w < spec.img_size {
        return Vec::new();
    }
    let jmax = (w - spec.img_size) / (2 * spec.stride);
    let mut xs: Vec<usize> = (1..=jmax).map(|j| c - j * spec.stride).collect();
    xs.reverse();
    xs.extend((0..=jmax).map(|j| c + j * spec.stride));
    xs
}

fn isqrt(v: u64) -> u64 {
    let mut r = (v as f64).sqrt() as u64;
    while r * r > v {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= v {
        r += 1;
    }
    r
}

/// Window centers grouped by row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CenterCoords {
    pub rows: Vec<(usize, Vec<usize>)>,
}

impl CenterCoords {
    /// `(x, y)` pairs in raster order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows
            .iter()
            .flat_map(|(y, xs)| xs.iter().map(move |&x| (x, *y)))
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(|(_, xs)| xs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn full_grid(spec: &GridSpec) -> CenterCoords {
    CenterCoords {
        rows: row_centers(spec)
            .into_iter()
            .map(|y| (y, row_x_centers(y, spec)))
            .filter(|(_, xs)| !xs.is_empty())
            .collect(),
    }
}

/// A square window cut from a normalized slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub values: Vec<f64>,
    pub center: (usize, usize),
    pub label: Option<Label>,
    pub source: Option<(String, usize)>,
}

fn check_window(
    center: (usize, usize),
    img_size: usize,
    height: usize,
    width: usize,
) -> Result<()> {
    let half = img_size / 2;
    let (x, y) = center;
    if x < half || y < half || x + half > width || y + half > height {
        return Err(Error::Geometry(format!(
            "window of size {img_size} at ({x}, {y}) leaves the {width}x{height} frame"
        )));
    }
    Ok(())
}

pub fn extract_patch(slice: &Plane, center: (usize, usize), img_size: usize) -> Result<Patch> {
    check_window(center, img_size, slice.height, slice.width)?;
    let half = img_size / 2;
    let (x0, y0) = (center.0 - half, center.1 - half);
    let mut values = Vec::with_capacity(img_size * img_size);
    for r in 0..img_size {
        let start = (y0 + r) * slice.width + x0;
        values.extend_from_slice(&slice.data[start..start + img_size]);
    }
    Ok(Patch {
        size: img_size,
        values,
        center,
        label: None,
        source: None,
    })
}

/// Inclusive rectangle of `(dx, dy)` offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl OffsetBox {
    pub const fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Offsets in raster order (rows of dy, then dx).
    pub fn offsets(&self) -> Vec<(i32, i32)> {
        (self.y0..=self.y1)
            .flat_map(|dy| (self.x0..=self.x1).map(move |dx| (dx, dy)))
            .collect()
    }

    pub fn point_count(&self) -> usize {
        ((self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub positive_shift_box: OffsetBox,
    pub negative_near_box: OffsetBox,
    pub negatives_random_per_slice: usize,
    /// Near-box negatives taken per real slice (the box is scanned in raster order).
    pub negative_ratio_n: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            positive_shift_box: OffsetBox::new(-2, -2, 2, 2),
            negative_near_box: OffsetBox::new(-2, -2, -1, 2),
            negatives_random_per_slice: 15,
            negative_ratio_n: 10,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("positive_shift_box", self.positive_shift_box),
            ("negative_near_box", self.negative_near_box),
        ] {
            if b.x1 < b.x0 || b.y1 < b.y0 {
                return Err(Error::Config(format!("{name} has negative extent")));
            }
        }
        if self.negative_ratio_n == 0 {
            return Err(Error::Config("negative_ratio_n must be at least 1".into()));
        }
        Ok(())
    }
}

/// What a training slice is, and where its tampering sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceRole {
    Fake {
        tamper_center: (usize, usize),
    },
    Real {
        paired_center: Option<(usize, usize)>,
    },
}

fn shifted(center: (usize, usize), off: (i32, i32), spec: &GridSpec) -> Result<(usize, usize)> {
    let x = center.0 as i64 + off.0 as i64;
    let y = center.1 as i64 + off.1 as i64;
    let half = spec.half() as i64;
    if x < half || y < half || x + half > spec.ct_size as i64 || y + half > spec.ct_size as i64 {
        return Err(Error::Geometry(format!(
            "offset ({}, {}) from ({}, {}) puts the window outside the frame",
            off.0, off.1, center.0, center.1
        )));
    }
    Ok((x as usize, y as usize))
}

/// Labeled training centers for one slice. Deterministic in `seed`.
pub fn sample_training_centers(
    role: SliceRole,
    sampler: &SamplerSpec,
    spec: &GridSpec,
    seed: u64,
) -> Result<Vec<((usize, usize), Label)>> {
    sampler.validate()?;
    spec.validate()?;
    match role {
        SliceRole::Fake { tamper_center } => sampler
            .positive_shift_box
            .offsets()
            .into_iter()
            .map(|off| shifted(tamper_center, off, spec).map(|c| (c, Label::Fake)))
            .collect(),
        SliceRole::Real { paired_center } => {
            let mut taken = BTreeSet::new();
            let mut out = Vec::new();
            if let Some(center) = paired_center {
                for off in sampler
                    .negative_near_box
                    .offsets()
                    .into_iter()
                    .take(sampler.negative_ratio_n)
                {
                    let c = shifted(center, off, spec)?;
                    if taken.insert(c) {
                        out.push((c, Label::Real));
                    }
                }
            }
            let pool: Vec<(usize, usize)> = full_grid(spec)
                .iter()
                .filter(|c| !taken.contains(c))
                .collect();
            let want = sampler.negatives_random_per_slice.min(pool.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = sample(&mut rng, pool.len(), want).into_vec();
            picks.sort_unstable();
            out.extend(picks.into_iter().map(|i| (pool[i], Label::Real)));
            Ok(out)
        }
    }
}

pub fn sample_training_patches(
    slice: &Plane,
    role: SliceRole,
    sampler: &SamplerSpec,
    spec: &GridSpec,
    seed: u64,
) -> Result<Vec<Patch>> {
    sample_training_centers(role, sampler, spec, seed)?
        .into_iter()
        .map(|(c, label)| {
            let mut p = extract_patch(slice, c, spec.img_size)?;
            p.label = Some(label);
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainLocal,
    ValLocal,
    TrainGlobal,
    Test,
}

/// One patch of the dataset; pixels are re-cut from the volume on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub scan_id: String,
    pub slice_index: usize,
    pub x: usize,
    pub y: usize,
    pub label: Label,
    pub split: Split,
}

pub fn write_manifest<W: Write>(records: &[ManifestRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("manifest", e))?;
    Ok(())
}

pub fn read_manifest<R: Read>(input: R) -> Result<Vec<ManifestRecord>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|rec| rec.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_centers_examples() {
        let r = row_centers(&GridSpec::new(512, 32, 4));
        assert_eq!((r[0], *r.last().unwrap(), r.len()), (16, 496, 121));
        assert_eq!(row_centers(&GridSpec::new(512, 32, 480)), vec![16, 496]);
        assert_eq!(
            row_centers(&GridSpec::new(64, 32, 4)),
            vec![16, 20, 24, 28, 32, 36, 40, 44, 48]
        );
    }

    #[test]
    fn row_x_centers_center_and_top_rows() {
        let spec = GridSpec::new(512, 32, 4);
        let mid = row_x_centers(256, &spec);
        assert_eq!((mid[0], *mid.last().unwrap(), mid.len()), (16, 496, 121));
        let top = row_x_centers(16, &spec);
        assert_eq!((top[0], *top.last().unwrap(), top.len()), (184, 328, 37));
        assert!(top.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn row_without_room_is_empty() {
        // at y = 16 of a 64 frame the chord is 2*floor(sqrt(32^2-16^2)) = 54 >= 32,
        // at y = 2 it is 2*floor(sqrt(1024-900)) = 22 < 32
        let spec = GridSpec::new(64, 32, 4);
        assert!(row_x_centers(2, &spec).is_empty());
        assert!(!row_x_centers(16, &spec).is_empty());
    }

    #[test]
    fn window_equal_to_frame_has_single_center() {
        let g = full_grid(&GridSpec::new(64, 64, 4));
        assert_eq!(g.iter().collect::<Vec<_>>(), vec![(32, 32)]);
    }

    #[test]
    fn literal_equations_cover_only_right_half() {
        let spec = GridSpec {
            literal_equations: true,
            ..GridSpec::new(512, 32, 4)
        };
        let g = full_grid(&spec);
        assert!(g.iter().all(|(x, y)| x >= 256 && y <= 256));
        assert!(g.len() < full_grid(&GridSpec::new(512, 32, 4)).len() / 2);
    }

    #[test]
    fn extract_patch_examples() {
        let plane = Plane::filled(128, 128, 0.3);
        let p = extract_patch(&plane, (64, 64), 32).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.3));

        let mut delta = Plane::filled(200, 200, 0.0);
        delta.set(100, 100, 1.0);
        let p = extract_patch(&delta, (100, 100), 32).unwrap();
        assert_eq!(p.values[16 * 32 + 16], 1.0);
        assert_eq!(p.values.iter().filter(|&&v| v != 0.0).count(), 1);

        assert!(matches!(
            extract_patch(&delta, (10, 10), 32),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn fake_slice_yields_five_by_five_lattice() {
        let spec = GridSpec::new(512, 32, 4);
        let c = sample_training_centers(
            SliceRole::Fake {
                tamper_center: (256, 256),
            },
            &SamplerSpec::default(),
            &spec,
            1,
        )
        .unwrap();
        assert_eq!(c.len(), 25);
        assert!(c.iter().all(|(_, l)| *l == Label::Fake));
        let xs: BTreeSet<_> = c.iter().map(|((x, _), _)| *x).collect();
        let ys: BTreeSet<_> = c.iter().map(|((_, y), _)| *y).collect();
        assert_eq!(
            xs.into_iter().collect::<Vec<_>>(),
            vec![254, 255, 256, 257, 258]
        );
        assert_eq!(
            ys.into_iter().collect::<Vec<_>>(),
            vec![254, 255, 256, 257, 258]
        );
    }

    #[test]
    fn real_slice_near_and_random_negatives() {
        let spec = GridSpec::new(512, 32, 4);
        let role = SliceRole::Real {
            paired_center: Some((256, 256)),
        };
        let c = sample_training_centers(role, &SamplerSpec::default(), &spec, 7).unwrap();
        assert_eq!(c.len(), 25);
        let unique: BTreeSet<_> = c.iter().map(|(p, _)| *p).collect();
        assert_eq!(unique.len(), 25);
        assert!(c[..10]
            .iter()
            .all(|((x, y), _)| (254..=255).contains(x) && (254..=258).contains(y)));
        assert!(c.iter().all(|(_, l)| *l == Label::Real));
        assert_eq!(
            c,
            sample_training_centers(role, &SamplerSpec::default(), &spec, 7).unwrap()
        );
        assert_ne!(
            c,
            sample_training_centers(role, &SamplerSpec::default(), &spec, 8).unwrap()
        );
    }

    #[test]
    fn tamper_center_near_edge_is_geometry_error() {
        let spec = GridSpec::new(512, 32, 4);
        let role = SliceRole::Fake {
            tamper_center: (17, 256),
        };
        assert!(matches!(
            sample_training_centers(role, &SamplerSpec::default(), &spec, 0),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn sample_patches_cut_from_slice() {
        let spec = GridSpec::new(128, 32, 4);
        let mut plane = Plane::filled(128, 128, 0.0);
        for (i, v) in plane.data.iter_mut().enumerate() {
            *v = i as f64;
        }
        let patches = sample_training_patches(
            &plane,
            SliceRole::Fake {
                tamper_center: (64, 64),
            },
            &SamplerSpec::default(),
            &spec,
            3,
        )
        .unwrap();
        assert_eq!(patches.len(), 25);
        let p = &patches[0];
        assert_eq!(p.center, (62, 62));
        assert_eq!(p.values[0], (46 * 128 + 46) as f64);
        assert_eq!(p.label, Some(Label::Fake));
    }

    #[test]
    fn manifest_csv_round_trip() {
        let recs = vec![
            ManifestRecord {
                scan_id: "scan0001".into(),
                slice_index: 3,
                x: 64,
                y: 60,
                label: Label::Fake,
                split: Split::TrainLocal,
            },
            ManifestRecord {
                scan_id: "scan0002".into(),
                slice_index: 0,
                x: 16,
                y: 64,
                label: Label::Real,
                split: Split::Test,
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scan_id,slice_index,x,y,label,split\n"));
        assert!(text.contains("scan0001,3,64,60,fake,train_local"));
        assert_eq!(read_manifest(&buf[..]).unwrap(), recs);
    }
}
