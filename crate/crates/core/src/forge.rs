//! Synthetic CT-like volumes and small local forgeries for end-to-end runs.
//!
//! The phantom is a thorax disc with two lung cavities, a spine and drifting
//! vessels. A forgery edits a cuboid of `region_size` pixels square spanning
//! a few slices, leaving everything outside it bit-identical, and stamps a
//! statistical signature on the edited content: a period-2 grid like the
//! artifacts of learned up-sampling, or a low-pass residual.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    full_grid, sample_training_centers, GridSpec, ManifestRecord, SamplerSpec, SliceRole, Split,
};
use crate::volume::{write_raw, ScanVolume, SliceImage, DEFAULT_RANGE};
use crate::Label;

const AIR: f64 = -1000.0;
const TISSUE: f64 = 40.0;
const LUNG: f64 = -850.0;
const BONE: f64 = 650.0;
const VESSEL: f64 = -250.0;
const NOISE_SIGMA: f64 = 12.0;

/// splitmix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn clamp_i16(v: f64) -> i16 {
    v.round()
        .clamp(DEFAULT_RANGE.0 as f64, DEFAULT_RANGE.1 as f64) as i16
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn inside(&self, x: f64, y: f64, scale: f64) -> bool {
        let dx = (x - self.cx) / (self.ax * scale);
        let dy = (y - self.cy) / (self.ay * scale);
        dx * dx + dy * dy <= 1.0
    }
}

struct Vessel {
    x: f64,
    y: f64,
    dx: f64,
    dy: f64,
    r: f64,
}

/// Lung phantom of `depth` slices of `size x size` pixels.
pub fn synth_volume(depth: usize, size: usize, seed: u64) -> Result<ScanVolume> {
    if depth < 10 || size < 64 {
        return Err(Error::Config(format!(
            "phantom needs depth >= 10 and size >= 64, got {depth} x {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let c = s / 2.0;
    let body = Ellipse {
        cx: c,
        cy: c + rng.random_range(-0.01..0.01) * s,
        ax: rng.random_range(0.40..0.44) * s,
        ay: rng.random_range(0.33..0.37) * s,
    };
    let lung_dx = rng.random_range(0.17..0.19) * s;
    let lungs = [-1.0, 1.0].map(|side| Ellipse {
        cx: c + side * lung_dx,
        cy: c - 0.02 * s,
        ax: rng.random_range(0.11..0.13) * s,
        ay: rng.random_range(0.19..0.22) * s,
    });
    let spine = (c, body.cy + body.ay * 0.72, 0.055 * s);
    let period = rng.random_range(60.0..90.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut vessels = Vec::new();
    for lung in &lungs {
        for _ in 0..rng.random_range(6..10) {
            let (a, r) = (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..0.75f64).sqrt(),
            );
            vessels.push(Vessel {
                x: lung.cx + r * lung.ax * a.cos(),
                y: lung.cy + r * lung.ay * a.sin(),
                dx: rng.random_range(-0.3..0.3),
                dy: rng.random_range(-0.3..0.3),
                r: rng.random_range(1.0..2.5) * s / 128.0,
            });
        }
    }
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let slices = (0..depth)
        .map(|z| {
            let zf = z as f64;
            let breathe = 1.0 + 0.06 * (std::f64::consts::TAU * zf / period + phase).sin();
            let mut px = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut v = if body.inside(xf, yf, 1.0) {
                        TISSUE
                    } else {
                        AIR
                    };
                    if lungs.iter().any(|l| l.inside(xf, yf, breathe)) {
                        v = LUNG;
                        for ves in &vessels {
                            let (vx, vy) = (ves.x + ves.dx * zf, ves.y + ves.dy * zf);
                            let d2 = (xf - vx).powi(2) + (yf - vy).powi(2);
                            v += (VESSEL - LUNG) * (-d2 / (2.0 * ves.r * ves.r)).exp();
                        }
                    }
                    if (xf - spine.0).powi(2) + (yf - spine.1).powi(2) <= spine.2 * spine.2 {
                        v = BONE;
                    }
                    px.push(clamp_i16(v + noise.sample(&mut rng)));
                }
            }
            SliceImage::new(size, size, px, z)
        })
        .collect::<Result<Vec<_>>>()?;
    ScanVolume::new(format!("synth{seed}"), slices, 1.0, DEFAULT_RANGE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeMode {
    InjectBlob,
    RemoveBlob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSignature {
    /// Edited content is low-pass filtered, removing the sensor noise.
    Smoothed,
    /// A zero-mean period-2 grid is added to the edited content.
    Checker,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeSpec {
    pub region_size: usize,
    pub mode: ForgeMode,
    pub blend_sigma: f64,
    pub noise_signature: NoiseSignature,
    /// Peak height of the checker grid in stored units.
    pub signature_amplitude: f64,
    /// Fixed in-plane center; drawn inside a lung when absent.
    pub center: Option<(usize, usize)>,
    /// Fixed central slice; the middle slice when absent.
    pub central_slice: Option<usize>,
    /// Slices edited on each side of the central slice; derived from
    /// `region_size` when absent.
    pub depth_radius: Option<usize>,
    pub seed: u64,
}

impl Default for ForgeSpec {
    fn default() -> Self {
        Self {
            region_size: 32,
            mode: ForgeMode::InjectBlob,
            blend_sigma: 2.0,
            noise_signature: NoiseSignature::Checker,
            signature_amplitude: 40.0,
            center: None,
            central_slice: None,
            depth_radius: None,
            seed: 0,
        }
    }
}

impl ForgeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(4..=32).contains(&self.region_size) {
            return Err(Error::Config(format!(
                "region_size {} not in 4..=32",
                self.region_size
            )));
        }
        if self.depth_radius == Some(0) {
            return Err(Error::Config("depth_radius must be at least 1".into()));
        }
        if !(self.blend_sigma > 0.0) || !(self.signature_amplitude >= 0.0) {
            return Err(Error::Config(
                "blend_sigma must be positive and amplitude non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Slices edited on each side of the central slice.
    pub fn half_depth(&self) -> usize {
        self.depth_radius
            .unwrap_or_else(|| ((self.region_size as f64 / 8.0).round() as usize).clamp(1, 4))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperRecord {
    pub scan_id: String,
    pub slice_index: usize,
    pub x: usize,
    pub y: usize,
    pub mode: ForgeMode,
    pub region_size: usize,
    pub half_depth: usize,
}

impl TamperRecord {
    /// `[x0, x1) x [y0, y1) x [z0, z1]` of the edited cuboid.
    pub fn cuboid(&self) -> ((usize, usize), (usize, usize), (usize, usize)) {
        let h = self.region_size / 2;
        (
            (self.x - h, self.x - h + self.region_size),
            (self.y - h, self.y - h + self.region_size),
            (
                self.slice_index - self.half_depth,
                self.slice_index + self.half_depth,
            ),
        )
    }

    pub fn contains_slice(&self, z: usize) -> bool {
        z.abs_diff(self.slice_index) <= self.half_depth
    }
}

fn box_in_circle(cx: usize, cy: usize, r: usize, size: usize) -> bool {
    let h = r / 2;
    if cx < h || cy < h || cx - h + r > size || cy - h + r > size {
        return false;
    }
    let c = size as f64 / 2.0;
    let (x0, x1) = ((cx - h) as f64, (cx - h + r) as f64);
    let (y0, y1) = ((cy - h) as f64, (cy - h + r) as f64);
    [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
        .iter()
        .all(|(x, y)| (x - c).powi(2) + (y - c).powi(2) <= c * c)
}

fn pick_center(
    vol: &ScanVolume,
    z: usize,
    r: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    let size = vol.width();
    let slice = vol.slice(z).expect("central slice in range");
    let mut fallback = None;
    for _ in 0..2000 {
        let (cx, cy) = (rng.random_range(0..size), rng.random_range(0..size));
        if !box_in_circle(cx, cy, r + 8, size) {
            continue;
        }
        fallback.get_or_insert((cx, cy));
        let h = r / 2;
        let mut sum = 0.0;
        for y in cy - h..cy - h + r {
            for x in cx - h..cx - h + r {
                sum += slice.get(y, x) as f64;
            }
        }
        if sum / ((r * r) as f64) < -600.0 {
            return Ok((cx, cy));
        }
    }
    fallback.ok_or_else(|| {
        Error::Geometry("no room for the forgery inside the inscribed circle".into())
    })
}

/// Edits one local cuboid. Returns the forged volume (same scan id) and its record.
pub fn apply_forgery(volume: &ScanVolume, spec: &ForgeSpec) -> Result<(ScanVolume, TamperRecord)> {
    spec.validate()?;
    let (h, w, d) = (volume.height(), volume.width(), volume.depth());
    if h != w {
        return Err(Error::Geometry(format!(
            "forgery needs square slices, got {h}x{w}"
        )));
    }
    let r = spec.region_size;
    let hz = spec.half_depth();
    let z = spec.central_slice.unwrap_or(d / 2);
    if z < hz || z + hz >= d {
        return Err(Error::Geometry(format!(
            "central slice {z} leaves no room for +-{hz} slices in a depth of {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (cx, cy) = match spec.center {
        Some(c) => c,
        None => pick_center(volume, z, r, &mut rng)?,
    };
    if !box_in_circle(cx, cy, r, w) {
        return Err(Error::Geometry(format!(
            "{r}x{r} footprint at ({cx}, {cy}) leaves the inscribed circle"
        )));
    }
    let record = TamperRecord {
        scan_id: volume.scan_id().to_string(),
        slice_index: z,
        x: cx,
        y: cy,
        mode: spec.mode,
        region_size: r,
        half_depth: hz,
    };
    let ((x0, x1), (y0, y1), (z0, z1)) = record.cuboid();
    let sigma = spec.blend_sigma;
    let edge = |p: usize, lo: usize, hi: usize| {
        let d = (p - lo).min(hi - 1 - p) as f64 + 0.5;
        1.0 - (-d * d / (2.0 * sigma * sigma)).exp()
    };
    let nodule_r = r as f64 / 4.0;
    let amp = spec.signature_amplitude;

    let mut slices: Vec<SliceImage> = volume.slices().to_vec();
    for (zi, slice) in slices.iter_mut().enumerate().take(z1 + 1).skip(z0) {
        let src = &volume.slices()[zi];
        let orig = |x: usize, y: usize| src.get(y, x) as f64;
        let ring: Vec<f64> = (x0..x1)
            .flat_map(|x| [orig(x, y0), orig(x, y1 - 1)])
            .chain((y0..y1).flat_map(|y| [orig(x0, y), orig(x1 - 1, y)]))
            .collect();
        let ring_mean = ring.iter().sum::<f64>() / ring.len() as f64;
        let dz = (zi as f64 - z as f64) / (hz as f64 + 1.0);
        let mut target = vec![0.0; r * r];
        for y in y0..y1 {
            for x in x0..x1 {
                let o = orig(x, y);
                let t = match spec.mode {
                    ForgeMode::InjectBlob => {
                        let dx = (x as f64 + 0.5 - cx as f64) / nodule_r;
                        let dy = (y as f64 + 0.5 - cy as f64) / nodule_r;
                        let g = (-2.0 * (dx * dx + dy * dy + dz * dz)).exp();
                        o + (TISSUE - o) * g
                    }
                    // keep the sensor noise of the original, drop its structure
                    ForgeMode::RemoveBlob => {
                        ring_mean - 10.0
                            + (o - ring_mean).clamp(-2.0 * NOISE_SIGMA, 2.0 * NOISE_SIGMA) * 0.5
                    }
                };
                target[(y - y0) * r + (x - x0)] = t;
            }
        }
        if spec.noise_signature == NoiseSignature::Smoothed {
            let src = target.clone();
            for ty in 0..r {
                for tx in 0..r {
                    let (mut s, mut n) = (0.0, 0.0);
                    for yy in ty.saturating_sub(1)..(ty + 2).min(r) {
                        for xx in tx.saturating_sub(1)..(tx + 2).min(r) {
                            s += src[yy * r + xx];
                            n += 1.0;
                        }
                    }
                    target[ty * r + tx] = s / n;
                }
            }
        }
        for y in y0..y1 {
            for x in x0..x1 {
                let mut t = target[(y - y0) * r + (x - x0)];
                if spec.noise_signature == NoiseSignature::Checker {
                    t += if x % 2 == 0 && y % 2 == 0 {
                        amp
                    } else {
                        -amp / 3.0
                    };
                }
                let wgt = edge(x, x0, x1) * edge(y, y0, y1);
                let o = orig(x, y);
                slice.pixels[y * w + x] = clamp_i16(o + wgt * (t - o));
            }
        }
    }
    let forged = ScanVolume::new(
        volume.scan_id(),
        slices,
        volume.slice_spacing_mm(),
        volume.pixel_value_range(),
    )?;
    Ok((forged, record))
}

/// Scan-level entry of a generated dataset. Tampered scans also keep their
/// pre-forgery volume under `pristine_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub scan_id: String,
    pub split: Split,
    pub tampered: bool,
    pub pristine_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_scans: usize,
    pub tamper_fraction: f64,
    pub depth: usize,
    /// Slices sampled per scan: tampered scans give `2 * fake_radius + 1`
    /// forged slices and as many pre-forgery ones; clean scans give the same
    /// total at random positions.
    pub fake_radius: usize,
    /// Fractions of scans per split, in the order train_local, val_local,
    /// train_global, test.
    pub split_fractions: [f64; 4],
    /// Configured separately in the pipeline file.
    #[serde(skip)]
    pub forge: ForgeSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_scans: 60,
            tamper_fraction: 0.5,
            depth: 24,
            fake_radius: 2,
            split_fractions: [0.4, 0.1, 0.25, 0.25],
            forge: ForgeSpec::default(),
        }
    }
}

pub const SPLITS: [Split; 4] = [
    Split::TrainLocal,
    Split::ValLocal,
    Split::TrainGlobal,
    Split::Test,
];

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.forge.validate()?;
        if !(0.0..=1.0).contains(&self.tamper_fraction) {
            return Err(Error::Config(format!(
                "tamper_fraction {} not in [0, 1]",
                self.tamper_fraction
            )));
        }
        if self.split_fractions.iter().any(|f| !(*f >= 0.0))
            || (self.split_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(
                "split fractions must be non-negative and sum to 1".into(),
            ));
        }
        if self.fake_radius > self.forge.half_depth() {
            return Err(Error::Config(format!(
                "fake_radius {} exceeds the forged depth +-{}",
                self.fake_radius,
                self.forge.half_depth()
            )));
        }
        Ok(())
    }

    pub fn slices_per_scan(&self) -> usize {
        2 * (2 * self.fake_radius + 1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub scans: Vec<ScanEntry>,
    pub tampers: Vec<TamperRecord>,
    pub manifest: Vec<ManifestRecord>,
    /// Every volume by scan id, including pre-forgery copies.
    pub volumes: BTreeMap<String, ScanVolume>,
}

impl Dataset {
    pub fn tamper_of(&self, scan_id: &str) -> Option<&TamperRecord> {
        self.tampers.iter().find(|t| t.scan_id == scan_id)
    }

    pub fn scans_in(&self, split: Split) -> impl Iterator<Item = &ScanEntry> {
        self.scans.iter().filter(move |s| s.split == split)
    }

    /// Writes `volumes/<id>.raw`, `manifest.csv`, `scans.csv` and `tampers.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let vdir = dir.join("volumes");
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        for (id, v) in &self.volumes {
            write_raw(v, &vdir.join(format!("{id}.raw")))?;
        }
        let csv_out = |name: &str| -> Result<csv::Writer<fs::File>> {
            let p = dir.join(name);
            Ok(csv::Writer::from_writer(
                fs::File::create(&p).map_err(|e| Error::io(&p, e))?,
            ))
        };
        let mpath = dir.join("manifest.csv");
        crate::grid::write_manifest(
            &self.manifest,
            fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?,
        )?;
        let mut w = csv_out("scans.csv")?;
        for s in &self.scans {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(dir.join("scans.csv"), e))?;
        let mut w = csv_out("tampers.csv")?;
        for t in &self.tampers {
            w.serialize(t)?;
        }
        w.flush()
            .map_err(|e| Error::io(dir.join("tampers.csv"), e))?;
        Ok(())
    }

    /// Reads the tables written by [`Dataset::write`]; volumes are left on disk.
    pub fn read_tables(dir: &Path) -> Result<Dataset> {
        let open = |name: &str| {
            let p = dir.join(name);
            fs::File::open(&p).map_err(|e| Error::io(&p, e))
        };
        let scans = csv::Reader::from_reader(open("scans.csv")?)
            .deserialize()
            .collect::<std::result::Result<Vec<ScanEntry>, _>>()?;
        let tampers = csv::Reader::from_reader(open("tampers.csv")?)
            .deserialize()
            .collect::<std::result::Result<Vec<TamperRecord>, _>>()?;
        let manifest = crate::grid::read_manifest(open("manifest.csv")?)?;
        Ok(Dataset {
            scans,
            tampers,
            manifest,
            volumes: BTreeMap::new(),
        })
    }
}

fn allocate(n: usize, fractions: &[f64; 4]) -> [usize; 4] {
    let mut counts = [0usize; 4];
    let mut rem: Vec<(f64, usize)> = Vec::new();
    for (i, f) in fractions.iter().enumerate() {
        let exact = f * n as f64;
        counts[i] = exact.floor() as usize;
        rem.push((exact - exact.floor(), i));
    }
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = n - counts.iter().sum::<usize>();
    for (_, i) in rem {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Generates `n_scans` phantoms, forges a `tamper_fraction` of them and
/// samples labeled patch centers. Splits are drawn per class so every split
/// sees both clean and tampered scans when possible.
pub fn build_dataset(
    spec: &DatasetSpec,
    grid: &GridSpec,
    sampler: &SamplerSpec,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    grid.validate()?;
    sampler.validate()?;
    let n_tampered = (spec.n_scans as f64 * spec.tamper_fraction).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_scans).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let tampered: BTreeSet<usize> = order[..n_tampered].iter().copied().collect();

    let mut split_of = vec![Split::Test; spec.n_scans];
    for class in [true, false] {
        let mut ids: Vec<usize> = (0..spec.n_scans)
            .filter(|i| tampered.contains(i) == class)
            .collect();
        ids.shuffle(&mut rng);
        let counts = allocate(ids.len(), &spec.split_fractions);
        let mut it = ids.into_iter();
        for (split, &c) in SPLITS.iter().zip(&counts) {
            for i in it.by_ref().take(c) {
                split_of[i] = *split;
            }
        }
    }
    for (split, f) in SPLITS.iter().zip(&spec.split_fractions) {
        let present: BTreeSet<bool> = (0..spec.n_scans)
            .filter(|&i| split_of[i] == *split)
            .map(|i| tampered.contains(&i))
            .collect();
        let needs_both = matches!(split, Split::TrainLocal | Split::TrainGlobal);
        if *f > 0.0 && (present.is_empty() || (needs_both && present.len() < 2)) {
            return Err(Error::Config(format!(
                "{} scans at tamper fraction {} are too few to populate the {split:?} split",
                spec.n_scans, spec.tamper_fraction
            )));
        }
    }

    let pool: Vec<(usize, usize)> = full_grid(grid).iter().collect();
    let per_scan: Vec<_> = (0..spec.n_scans)
        .into_par_iter()
        .map(|i| -> Result<_> {
            let scan_seed = derive_seed(seed, i as u64, 0);
            let id = format!("scan{i:04}");
            let base = synth_volume(spec.depth, grid.ct_size, scan_seed)?.with_scan_id(&id);
            let split = split_of[i];
            let k = spec.fake_radius;
            let mut rows = Vec::new();
            let mut push = |scan: &str, z: usize, role: SliceRole| -> Result<()> {
                let centers = sample_training_centers(
                    role,
                    sampler,
                    grid,
                    derive_seed(scan_seed, z as u64, 1),
                )?;
                rows.extend(centers.into_iter().map(|((x, y), label)| ManifestRecord {
                    scan_id: scan.to_string(),
                    slice_index: z,
                    x,
                    y,
                    label,
                    split,
                }));
                Ok(())
            };
            if tampered.contains(&i) {
                let forge = ForgeSpec {
                    seed: derive_seed(scan_seed, 0, 2),
                    ..spec.forge
                };
                let (forged, record) = apply_forgery(&base, &forge)?;
                let pre_id = format!("{id}_pre");
                let c = (record.x, record.y);
                for z in record.slice_index - k..=record.slice_index + k {
                    push(&id, z, SliceRole::Fake { tamper_center: c })?;
                }
                for z in record.slice_index - k..=record.slice_index + k {
                    push(
                        &pre_id,
                        z,
                        SliceRole::Real {
                            paired_center: Some(c),
                        },
                    )?;
                }
                let entry = ScanEntry {
                    scan_id: id.clone(),
                    split,
                    tampered: true,
                    pristine_id: Some(pre_id.clone()),
                };
                Ok((
                    entry,
                    Some(record),
                    rows,
                    vec![
                        (id, forged),
                        (
                            pre_id,
                            base.clone().with_scan_id(format!("{}_pre", base.scan_id())),
                        ),
                    ],
                ))
            } else {
                let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(scan_seed, 0, 3));
                let mut zs: Vec<usize> = (0..spec.depth).collect();
                zs.shuffle(&mut srng);
                let mut zs: Vec<usize> = zs.into_iter().take(spec.slices_per_scan()).collect();
                zs.sort_unstable();
                for z in zs {
                    // a pseudo site keeps the per-slice patch yield equal to tampered scans
                    let site = loop {
                        let c = pool[srng.random_range(0..pool.len())];
                        if sample_training_centers(
                            SliceRole::Real {
                                paired_center: Some(c),
                            },
                            sampler,
                            grid,
                            0,
                        )
                        .is_ok()
                        {
                            break c;
                        }
                    };
                    push(
                        &id,
                        z,
                        SliceRole::Real {
                            paired_center: Some(site),
                        },
                    )?;
                }
                let entry = ScanEntry {
                    scan_id: id.clone(),
                    split,
                    tampered: false,
                    pristine_id: None,
                };
                Ok((entry, None, rows, vec![(id, base)]))
            }
        })
        .collect::<Result<_>>()?;

    let mut ds = Dataset::default();
    for (entry, record, rows, vols) in per_scan {
        ds.scans.push(entry);
        ds.tampers.extend(record);
        ds.manifest.extend(rows);
        ds.volumes.extend(vols);
    }
    Ok(ds)
}

fn dicom_element(out: &mut Vec<u8>, group: u16, elem: u16, vr: &[u8; 2], value: &[u8]) {
    let mut v = value.to_vec();
    if v.len() % 2 == 1 {
        v.push(if vr == b"UI" || vr == b"OB" { 0 } else { b' ' });
    }
    out.extend_from_slice(&group.to_le_bytes());
    out.extend_from_slice(&elem.to_le_bytes());
    out.extend_from_slice(vr);
    if matches!(vr, b"OB" | b"OW" | b"SQ" | b"UN" | b"UT") {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(v.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(&v);
}

/// Writes one explicit-VR little-endian file per slice. File names are
/// drawn from `name_seed` so they carry no ordering information.
pub fn write_dicom_series(volume: &ScanVolume, dir: &Path, name_seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed);
    let series_uid = format!("1.2.826.0.1.3680043.9.7{}", name_seed % 100_000);
    let (lo, hi) = volume.pixel_value_range();
    for s in volume.slices() {
        let mut meta = Vec::new();
        dicom_element(&mut meta, 0x0002, 0x0001, b"OB", &[0, 1]);
        dicom_element(
            &mut meta,
            0x0002,
            0x0002,
            b"UI",
            b"1.2.840.10008.5.1.4.1.1.2",
        );
        dicom_element(
            &mut meta,
            0x0002,
            0x0003,
            b"UI",
            format!("{series_uid}.{}", s.slice_index).as_bytes(),
        );
        dicom_element(&mut meta, 0x0002, 0x0010, b"UI", b"1.2.840.10008.1.2.1");
        let mut buf = vec![0u8; 128];
        buf.extend_from_slice(b"DICM");
        dicom_element(
            &mut buf,
            0x0002,
            0x0000,
            b"UL",
            &(meta.len() as u32).to_le_bytes(),
        );
        buf.extend_from_slice(&meta);
        let z = s.slice_index as f64 * volume.slice_spacing_mm();
        let us = |v: u16| v.to_le_bytes();
        dicom_element(&mut buf, 0x0010, 0x0020, b"LO", volume.scan_id().as_bytes());
        dicom_element(
            &mut buf,
            0x0018,
            0x0050,
            b"DS",
            format!("{}", volume.slice_spacing_mm()).as_bytes(),
        );
        dicom_element(&mut buf, 0x0020, 0x000E, b"UI", series_uid.as_bytes());
        dicom_element(
            &mut buf,
            0x0020,
            0x0013,
            b"IS",
            format!("{}", s.slice_index + 1).as_bytes(),
        );
        dicom_element(
            &mut buf,
            0x0020,
            0x0032,
            b"DS",
            format!("0\\0\\{z}").as_bytes(),
        );
        dicom_element(&mut buf, 0x0028, 0x0002, b"US", &us(1));
        dicom_element(&mut buf, 0x0028, 0x0010, b"US", &us(s.height as u16));
        dicom_element(&mut buf, 0x0028, 0x0011, b"US", &us(s.width as u16));
        dicom_element(&mut buf, 0x0028, 0x0100, b"US", &us(16));
        dicom_element(&mut buf, 0x0028, 0x0101, b"US", &us(16));
        dicom_element(&mut buf, 0x0028, 0x0102, b"US", &us(15));
        dicom_element(&mut buf, 0x0028, 0x0103, b"US", &us(1));
        dicom_element(&mut buf, 0x0028, 0x0106, b"SS", &lo.to_le_bytes());
        dicom_element(&mut buf, 0x0028, 0x0107, b"SS", &hi.to_le_bytes());
        let px: Vec<u8> = s.pixels.iter().flat_map(|p| p.to_le_bytes()).collect();
        dicom_element(&mut buf, 0x7FE0, 0x0010, b"OW", &px);
        let name: String = (0..12)
            .map(|_| rng.random_range(b'a'..=b'z') as char)
            .collect();
        let path = dir.join(format!("{name}.dcm"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Ground-truth slice label for evaluation: fake inside the forged depth.
pub fn slice_truth(tamper: Option<&TamperRecord>, z: usize) -> Label {
    Label::from_fake(tamper.is_some_and(|t| t.contains_slice(z)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pearson(a: &[i16], b: &[i16]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (
            a.iter().map(|&v| v as f64).sum::<f64>() / n,
            b.iter().map(|&v| v as f64).sum::<f64>() / n,
        );
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b) {
            let (dx, dy) = (x as f64 - ma, y as f64 - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn phantom_is_deterministic_and_in_range() {
        let a = synth_volume(10, 64, 5).unwrap();
        assert_eq!(a, synth_volume(10, 64, 5).unwrap());
        assert_ne!(a, synth_volume(10, 64, 6).unwrap());
        let (lo, hi) = a.pixel_value_range();
        assert!(a
            .slices()
            .iter()
            .all(|s| s.pixels.iter().all(|p| (lo..=hi).contains(p))));
        for w in a.slices().windows(2) {
            assert!(pearson(&w[0].pixels, &w[1].pixels) > 0.9);
        }
    }

    #[test]
    fn degenerate_dimensions() {
        assert!(matches!(synth_volume(9, 128, 0), Err(Error::Config(_))));
        assert!(matches!(synth_volume(12, 32, 0), Err(Error::Config(_))));
    }

    #[test]
    fn forgery_is_local() {
        let v = synth_volume(12, 128, 1).unwrap();
        let (f, t) = apply_forgery(&v, &ForgeSpec::default()).unwrap();
        let ((x0, x1), (y0, y1), (z0, z1)) = t.cuboid();
        let mut changed = 0;
        for z in 0..v.depth() {
            for y in 0..128 {
                for x in 0..128 {
                    let (a, b) = (v.slice(z).unwrap().get(y, x), f.slice(z).unwrap().get(y, x));
                    let inside =
                        (x0..x1).contains(&x) && (y0..y1).contains(&y) && (z0..=z1).contains(&z);
                    if !inside {
                        assert_eq!(a, b);
                    } else if a != b {
                        changed += 1;
                    }
                }
            }
        }
        assert!(changed > 0);
        assert_eq!((z0, z1), (2, 10));
    }

    #[test]
    fn footprint_outside_circle_is_geometry_error() {
        let v = synth_volume(12, 128, 1).unwrap();
        let spec = ForgeSpec {
            center: Some((20, 20)),
            ..Default::default()
        };
        assert!(matches!(apply_forgery(&v, &spec), Err(Error::Geometry(_))));
        let spec = ForgeSpec {
            central_slice: Some(2),
            ..Default::default()
        };
        assert!(matches!(apply_forgery(&v, &spec), Err(Error::Geometry(_))));
    }

    #[test]
    fn small_dataset_bookkeeping() {
        let grid = GridSpec::new(64, 32, 4);
        let spec = DatasetSpec {
            n_scans: 20,
            depth: 12,
            forge: ForgeSpec {
                region_size: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = build_dataset(&spec, &grid, &SamplerSpec::default(), 3).unwrap();
        assert_eq!(ds.scans.iter().filter(|s| s.tampered).count(), 10);
        assert_eq!(ds.manifest.len(), 20 * spec.slices_per_scan() * 25);
        let mut split_of = BTreeMap::new();
        for r in &ds.manifest {
            let base = r.scan_id.trim_end_matches("_pre").to_string();
            assert_eq!(*split_of.entry(base).or_insert(r.split), r.split);
        }
    }
}
