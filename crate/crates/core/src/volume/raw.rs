//! Little-endian int16 pixel file plus a `key: value` sidecar.
//!
//! The sidecar lives next to the pixel file with the extension `.meta` and
//! carries `scan_id`, `depth`, `height`, `width`, `spacing_mm`, `lo`, `hi`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ScanVolume, SliceImage};
use crate::error::{Error, Result};

fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "meta") {
        (path.with_extension("raw"), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.with_extension("meta"))
    }
}

pub fn read_raw(path: &Path) -> Result<ScanVolume> {
    let (pixel_path, meta_path) = sidecar_paths(path);
    let meta_text =
        fs::read_to_string(&meta_path).map_err(|e| Error::load(&meta_path, e.to_string()))?;
    let mut meta = BTreeMap::new();
    for (lineno, line) in meta_text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| {
            Error::load(
                &meta_path,
                format!("line {}: expected key: value", lineno + 1),
            )
        })?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let field = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| Error::load(&meta_path, format!("missing key {key}")))
    };
    fn parse<T: std::str::FromStr>(path: &Path, key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::load(path, format!("bad value for {key}: {v:?}")))
    }
    let scan_id = field("scan_id")?.clone();
    let depth: usize = parse(&meta_path, "depth", field("depth")?)?;
    let height: usize = parse(&meta_path, "height", field("height")?)?;
    let width: usize = parse(&meta_path, "width", field("width")?)?;
    let spacing: f64 = parse(&meta_path, "spacing_mm", field("spacing_mm")?)?;
    let lo: i16 = parse(&meta_path, "lo", field("lo")?)?;
    let hi: i16 = parse(&meta_path, "hi", field("hi")?)?;

    let bytes = fs::read(&pixel_path).map_err(|e| Error::load(&pixel_path, e.to_string()))?;
    let plane = height * width;
    if bytes.len() != depth * plane * 2 {
        return Err(Error::load(
            &pixel_path,
            format!(
                "{} bytes, expected {} for {depth}x{height}x{width} int16",
                bytes.len(),
                depth * plane * 2
            ),
        ));
    }
    let slices = bytes
        .chunks_exact(plane * 2)
        .enumerate()
        .map(|(i, chunk)| {
            let pixels = chunk
                .chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]))
                .collect();
            SliceImage::new(height, width, pixels, i)
        })
        .collect::<Result<Vec<_>>>()?;
    ScanVolume::new(scan_id, slices, spacing, (lo, hi))
}

/// Write `volume` as `<path>` (pixels) and `<path>.meta` (sidecar).
pub fn write_raw(volume: &ScanVolume, path: &Path) -> Result<()> {
    let (pixel_path, meta_path) = sidecar_paths(path);
    let mut bytes = Vec::with_capacity(volume.depth() * volume.height() * volume.width() * 2);
    for s in volume.slices() {
        for p in &s.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
    }
    let (lo, hi) = volume.pixel_value_range();
    let meta = format!(
        "scan_id: {}\ndepth: {}\nheight: {}\nwidth: {}\nspacing_mm: {}\nlo: {lo}\nhi: {hi}\n",
        volume.scan_id(),
        volume.depth(),
        volume.height(),
        volume.width(),
        volume.slice_spacing_mm(),
    );
    fs::write(&pixel_path, bytes).map_err(|e| Error::io(&pixel_path, e))?;
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(depth: usize, size: usize) -> ScanVolume {
        let slices = (0..depth)
            .map(|z| {
                let pixels = (0..size * size)
                    .map(|i| ((i * 7 + z * 131) % 4096) as i16 - 1024)
                    .collect();
                SliceImage::new(size, size, pixels, z).unwrap()
            })
            .collect();
        ScanVolume::new("vol-a", slices, 1.25, (-1024, 3071)).unwrap()
    }

    #[test]
    fn five_slice_512_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.raw");
        let v = volume(5, 512);
        write_raw(&v, &path).unwrap();
        let back = read_raw(&path).unwrap();
        assert_eq!(back.depth(), 5);
        assert_eq!(back.pixel_value_range(), (-1024, 3071));
        assert_eq!(back, v);
        // either file may name the volume
        assert_eq!(read_raw(&path.with_extension("meta")).unwrap(), v);
    }

    #[test]
    fn truncated_pixels_and_missing_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.raw");
        write_raw(&volume(2, 8), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_raw(&path), Err(Error::Load { .. })));

        write_raw(&volume(2, 8), &path).unwrap();
        let meta = fs::read_to_string(path.with_extension("meta")).unwrap();
        fs::write(path.with_extension("meta"), meta.replace("depth: 2\n", "")).unwrap();
        let err = read_raw(&path).unwrap_err();
        assert!(err.to_string().contains("depth"), "{err}");
    }

    #[test]
    fn reading_leaves_files_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.raw");
        write_raw(&volume(3, 16), &path).unwrap();
        let before = fs::read(&path).unwrap();
        read_raw(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), before);
    }
}
