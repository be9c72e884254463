use tempfile::TempDir;

use ctforensics::forge::{
    apply_forgery, synth_volume, write_dicom_series, ForgeMode, ForgeSpec, NoiseSignature,
    TamperRecord,
};
use ctforensics::volume::{load_scan, read_dicom_series, read_raw, write_raw, ScanFormat};
use ctforensics::ScanVolume;

fn same_voxels(a: &ScanVolume, b: &ScanVolume) {
    assert_eq!(a.depth(), b.depth());
    for (s, t) in a.slices().iter().zip(b.slices()) {
        assert_eq!(s.slice_index, t.slice_index);
        assert_eq!(s.pixels, t.pixels);
    }
}

#[test]
fn dicom_series_reads_back_in_slice_order() {
    let vol = synth_volume(10, 64, 11).unwrap().with_scan_id("phantom");
    let dir = TempDir::new().unwrap();
    write_dicom_series(&vol, dir.path(), 77).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 10);
    let back = read_dicom_series(dir.path()).unwrap();
    same_voxels(&vol, &back);
    assert!((back.slice_spacing_mm() - vol.slice_spacing_mm()).abs() < 1e-6);
    same_voxels(
        &vol,
        &load_scan(dir.path(), ScanFormat::DicomSeries).unwrap(),
    );
}

#[test]
fn raw_volume_round_trips() {
    let vol = synth_volume(10, 64, 2).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("v.raw");
    write_raw(&vol, &path).unwrap();
    let back = read_raw(&path).unwrap();
    same_voxels(&vol, &back);
    assert_eq!(back.pixel_value_range(), vol.pixel_value_range());
}

#[test]
fn truncated_raw_volume_is_rejected() {
    let vol = synth_volume(10, 64, 3).unwrap();
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("v.raw");
    write_raw(&vol, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(read_raw(&path).is_err());
}

fn cuboid_mean(vol: &ScanVolume, rec: &TamperRecord) -> f64 {
    let ((x0, x1), (y0, y1), (z0, z1)) = rec.cuboid();
    let mut sum = 0.0;
    let mut n = 0.0;
    for z in z0..=z1 {
        let s = vol.slice(z).unwrap();
        for y in y0..y1 {
            for x in x0..x1 {
                sum += s.get(y, x) as f64;
                n += 1.0;
            }
        }
    }
    sum / n
}

fn forge(mode: ForgeMode) -> (ScanVolume, ScanVolume, TamperRecord) {
    let vol = synth_volume(16, 128, 5).unwrap();
    let spec = ForgeSpec {
        mode,
        seed: 3,
        ..ForgeSpec::default()
    };
    let (out, rec) = apply_forgery(&vol, &spec).unwrap();
    (vol, out, rec)
}

#[test]
fn injection_brightens_the_cuboid() {
    let (before, after, rec) = forge(ForgeMode::InjectBlob);
    assert!(cuboid_mean(&after, &rec) > cuboid_mean(&before, &rec) + 10.0);
}

#[test]
fn removal_erases_an_injected_nodule() {
    let (_, injected, rec) = forge(ForgeMode::InjectBlob);
    let spec = ForgeSpec {
        mode: ForgeMode::RemoveBlob,
        noise_signature: NoiseSignature::Smoothed,
        center: Some((rec.x, rec.y)),
        seed: 3,
        ..ForgeSpec::default()
    };
    let (removed, rec2) = apply_forgery(&injected, &spec).unwrap();
    assert_eq!(
        (rec2.x, rec2.y, rec2.slice_index),
        (rec.x, rec.y, rec.slice_index)
    );
    let peak = |v: &ScanVolume| v.slice(rec.slice_index).unwrap().get(rec.y, rec.x) as f64;
    assert!(
        peak(&injected) - peak(&removed) > 200.0,
        "{} -> {}",
        peak(&injected),
        peak(&removed)
    );
}

#[test]
fn slices_outside_the_slab_are_untouched() {
    let (before, after, rec) = forge(ForgeMode::InjectBlob);
    for z in 0..before.depth() {
        if !rec.contains_slice(z) {
            assert_eq!(
                before.slice(z).unwrap().pixels,
                after.slice(z).unwrap().pixels,
                "slice {z}"
            );
        }
    }
}

#[test]
fn forgery_is_reproducible() {
    let (_, a, ra) = forge(ForgeMode::InjectBlob);
    let (_, b, rb) = forge(ForgeMode::InjectBlob);
    assert_eq!(ra, rb);
    same_voxels(&a, &b);
}
