//! Per-slice tamper-probability maps on the stride lattice.

use std::collections::HashSet;
use std::io::{Read, Write};

use crate::binio;
use crate::error::{Error, Result};
use crate::grid::GridSpec;

const MAGIC: &[u8; 4] = b"HMAP";
const VERSION: u32 = 1;

/// `G x G` probabilities, one cell per lattice position. Cells never
/// evaluated (outside the inscribed circle) hold exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    spec: GridSpec,
    size: usize,
    grid: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(spec: &GridSpec) -> Self {
        let size = spec.lattice_size();
        Self {
            spec: *spec,
            size,
            grid: vec![0.0; size * size],
        }
    }

    /// Build from a row-major `size x size` grid; values must lie in `[0, 1]`.
    pub fn from_grid(spec: &GridSpec, grid: Vec<f32>) -> Result<Self> {
        let size = spec.lattice_size();
        if grid.len() != size * size {
            return Err(Error::Shape(format!(
                "heatmap of {} cells for a {size}x{size} lattice",
                grid.len()
            )));
        }
        if let Some(v) = grid.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self {
            spec: *spec,
            size,
            grid,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// Lattice side length `G`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f32] {
        &self.grid
    }

    #[inline]
    pub fn get(&self, gx: usize, gy: usize) -> f32 {
        self.grid[gy * self.size + gx]
    }

    pub fn transposed(&self) -> Self {
        let n = self.size;
        let mut grid = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                grid[x * n + y] = self.grid[y * n + x];
            }
        }
        Self {
            spec: self.spec,
            size: n,
            grid,
        }
    }

    /// Location of the strongest response: the 5x5 neighbourhood with the
    /// largest total probability, refined to its probability-weighted
    /// centroid. `None` for an all-zero map.
    pub fn peak_cell(&self) -> Option<(usize, usize)> {
        let n = self.size as isize;
        let window = |cx: isize, cy: isize| {
            let mut sum = 0.0f64;
            let (mut sx, mut sy) = (0.0f64, 0.0f64);
            for y in (cy - 2).max(0)..=(cy + 2).min(n - 1) {
                for x in (cx - 2).max(0)..=(cx + 2).min(n - 1) {
                    let v = self.grid[(y * n + x) as usize] as f64;
                    sum += v;
                    sx += v * x as f64;
                    sy += v * y as f64;
                }
            }
            (sum, sx, sy)
        };
        let mut sums = Vec::with_capacity((n * n) as usize);
        for cy in 0..n {
            for cx in 0..n {
                sums.push(window(cx, cy));
            }
        }
        let best = sums.iter().map(|w| w.0).fold(0.0, f64::max);
        if best <= 0.0 {
            return None;
        }
        // windows tied with the maximum (plateaus) share the vote equally
        let (mut px, mut py, mut k) = (0.0, 0.0, 0.0);
        for (s, sx, sy) in sums.iter().filter(|w| w.0 >= best * (1.0 - 1e-9)) {
            px += sx / s;
            py += sy / s;
            k += 1.0;
        }
        Some(((px / k).round() as usize, (py / k).round() as usize))
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = binio::Writer::new(out, "heatmap");
        w.magic(MAGIC)?;
        w.u32(VERSION)?;
        w.u32(self.spec.ct_size as u32)?;
        w.u32(self.spec.img_size as u32)?;
        w.u32(self.spec.stride as u32)?;
        w.u32(self.size as u32)?;
        w.f32s(&self.grid)?;
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = binio::Reader::new(input, "heatmap");
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corruption(format!("heatmap version {version}")));
        }
        let spec = GridSpec::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        spec.validate()?;
        let size = r.u32()? as usize;
        if size != spec.lattice_size() {
            return Err(Error::Corruption(format!(
                "heatmap declares G = {size}, lattice implies {}",
                spec.lattice_size()
            )));
        }
        let grid = r.f32s(size * size)?;
        Self::from_grid(&spec, grid)
    }

    /// 8-bit binary PGM, one pixel per cell scaled by `upscale`.
    pub fn write_pgm<W: Write>(&self, mut out: W, upscale: usize) -> Result<()> {
        let k = upscale.max(1);
        let side = self.size * k;
        let mut buf = format!("P5\n{side} {side}\n255\n").into_bytes();
        for y in 0..side {
            for x in 0..side {
                buf.push((self.get(x / k, y / k) * 255.0).round() as u8);
            }
        }
        out.write_all(&buf).map_err(|e| Error::io("heatmap.pgm", e))
    }
}

fn cell_of(center: (usize, usize), spec: &GridSpec) -> Result<(usize, usize)> {
    let (x, y) = center;
    let half = spec.half();
    let aligned = |v: usize| v >= half && (v - half).is_multiple_of(spec.stride);
    if !aligned(x) || !aligned(y) {
        return Err(Error::Alignment { x, y });
    }
    let (gx, gy) = ((x - half) / spec.stride, (y - half) / spec.stride);
    let size = spec.lattice_size();
    if gx >= size || gy >= size {
        return Err(Error::Bounds { gx, gy, size });
    }
    Ok((gx, gy))
}

/// Scatter per-window probabilities onto the lattice.
pub fn assemble(results: &[((usize, usize), f64)], spec: &GridSpec) -> Result<Heatmap> {
    spec.validate()?;
    let mut map = Heatmap::zeros(spec);
    let mut seen = HashSet::with_capacity(results.len());
    for &(center, p) in results {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("probability {p} at {center:?}")));
        }
        let (gx, gy) = cell_of(center, spec)?;
        if !seen.insert((gx, gy)) {
            return Err(Error::Duplicate {
                x: center.0,
                y: center.1,
            });
        }
        map.grid[gy * map.size + gx] = p as f32;
    }
    Ok(map)
}

/// Lattice cell whose window center is nearest to an arbitrary pixel.
pub fn nearest_cell(pixel: (usize, usize), spec: &GridSpec) -> (usize, usize) {
    let last = spec.lattice_size() - 1;
    let f = |v: usize| {
        let rel = v as f64 - spec.half() as f64;
        ((rel / spec.stride as f64).round().max(0.0) as usize).min(last)
    };
    (f(pixel.0), f(pixel.1))
}

/// Pixel center of a lattice cell; inverse of the cell mapping in [`assemble`].
pub fn to_overlay_coords(cell: (usize, usize), spec: &GridSpec) -> Result<(usize, usize)> {
    let size = spec.lattice_size();
    let (gx, gy) = cell;
    if gx >= size || gy >= size {
        return Err(Error::Bounds { gx, gy, size });
    }
    Ok((
        spec.half() + gx * spec.stride,
        spec.half() + gy * spec.stride,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::full_grid;

    fn full_size() -> GridSpec {
        GridSpec::new(512, 32, 4)
    }

    #[test]
    fn empty_results_all_zero_121() {
        let h = assemble(&[], &full_size()).unwrap();
        assert_eq!(h.size(), 121);
        assert!(h.values().iter().all(|&v| v == 0.0));
        assert_eq!(h.peak_cell(), None);
    }

    #[test]
    fn single_result_maps_to_origin_cell() {
        let h = assemble(&[((16, 16), 0.9)], &full_size()).unwrap();
        assert_eq!(h.get(0, 0), 0.9);
        assert_eq!(h.values().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn full_grid_of_ones_matches_grid_cardinality() {
        let spec = full_size();
        let results: Vec<_> = full_grid(&spec).iter().map(|c| (c, 1.0)).collect();
        let h = assemble(&results, &spec).unwrap();
        assert_eq!(
            h.values().iter().filter(|&&v| v != 0.0).count(),
            full_grid(&spec).len()
        );
    }

    #[test]
    fn misaligned_duplicate_and_bad_probability() {
        let spec = full_size();
        assert!(matches!(
            assemble(&[((17, 16), 0.5)], &spec),
            Err(Error::Alignment { .. })
        ));
        assert!(matches!(
            assemble(&[((16, 16), 0.5), ((16, 16), 0.4)], &spec),
            Err(Error::Duplicate { .. })
        ));
        assert!(matches!(
            assemble(&[((16, 16), 1.5)], &spec),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn overlay_coords_examples_and_round_trip() {
        let spec = full_size();
        assert_eq!(to_overlay_coords((0, 0), &spec).unwrap(), (16, 16));
        assert_eq!(to_overlay_coords((120, 120), &spec).unwrap(), (496, 496));
        assert!(matches!(
            to_overlay_coords((121, 0), &spec),
            Err(Error::Bounds { .. })
        ));
        for gy in 0..121 {
            for gx in 0..121 {
                let c = to_overlay_coords((gx, gy), &spec).unwrap();
                assert_eq!(cell_of(c, &spec).unwrap(), (gx, gy));
            }
        }
    }

    #[test]
    fn peak_cell_is_center_of_plateau() {
        let spec = GridSpec::new(128, 32, 4);
        let results: Vec<_> = full_grid(&spec)
            .iter()
            .map(|(x, y)| {
                let (gx, gy) = ((x - 16) / 4, (y - 16) / 4);
                let p = if gx.abs_diff(10) <= 3 && gy.abs_diff(14) <= 3 {
                    0.99
                } else {
                    0.01
                };
                ((x, y), p)
            })
            .collect();
        let h = assemble(&results, &spec).unwrap();
        assert_eq!(h.peak_cell(), Some((10, 14)));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let spec = full_size();
        let results: Vec<_> = full_grid(&spec)
            .iter()
            .enumerate()
            .map(|(i, c)| (c, (i % 97) as f64 / 96.0))
            .collect();
        let h = assemble(&results, &spec).unwrap();
        let mut buf = Vec::new();
        h.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 5 * 4 + 121 * 121 * 4);
        assert_eq!(Heatmap::read_from(&buf[..]).unwrap(), h);
        buf[0] = b'X';
        assert!(matches!(
            Heatmap::read_from(&buf[..]),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn pgm_export_header() {
        let h = assemble(&[((16, 16), 1.0)], &GridSpec::new(64, 32, 4)).unwrap();
        let mut buf = Vec::new();
        h.write_pgm(&mut buf, 2).unwrap();
        assert!(buf.starts_with(b"P5\n18 18\n255\n"));
        assert_eq!(buf.len(), 13 + 18 * 18);
    }

    proptest::proptest! {
        #[test]
        fn assembly_is_order_invariant(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let spec = GridSpec::new(128, 32, 4);
            let mut results: Vec<_> = full_grid(&spec)
                .iter()
                .enumerate()
                .map(|(i, c)| (c, ((i as u64 * 31 + seed) % 101) as f64 / 100.0))
                .collect();
            let a = assemble(&results, &spec).unwrap();
            results.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert_eq!(a, assemble(&results, &spec).unwrap());
        }
    }
}
