//! Minimal DICOM Part 10 reader for uncompressed single-frame CT series.
//!
//! Only the attributes needed to rebuild a volume are decoded; everything
//! else (including nested sequences) is skipped. Supported transfer syntaxes
//! are implicit and explicit VR little endian.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ScanVolume, SliceImage};
use crate::error::{Error, Result};

const IMPLICIT_LE: &str = "1.2.840.10008.1.2";
const EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";
const UNDEFINED: u32 = 0xFFFF_FFFF;

type Tag = (u16, u16);

const TRANSFER_SYNTAX: Tag = (0x0002, 0x0010);
const PATIENT_ID: Tag = (0x0010, 0x0020);
const SLICE_THICKNESS: Tag = (0x0018, 0x0050);
const SERIES_UID: Tag = (0x0020, 0x000E);
const INSTANCE_NUMBER: Tag = (0x0020, 0x0013);
const IMAGE_POSITION: Tag = (0x0020, 0x0032);
const SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002);
const ROWS: Tag = (0x0028, 0x0010);
const COLUMNS: Tag = (0x0028, 0x0011);
const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
const BITS_STORED: Tag = (0x0028, 0x0101);
const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
const SMALLEST_PIXEL: Tag = (0x0028, 0x0106);
const LARGEST_PIXEL: Tag = (0x0028, 0x0107);
const PIXEL_DATA: Tag = (0x7FE0, 0x0010);
const ITEM: Tag = (0xFFFE, 0xE000);
const ITEM_END: Tag = (0xFFFE, 0xE00D);
const SEQUENCE_END: Tag = (0xFFFE, 0xE0DD);

/// Decoded attributes of one DICOM image file.
#[derive(Debug, Clone, Default)]
pub struct DicomSlice {
    pub path: PathBuf,
    pub patient_id: Option<String>,
    pub series_uid: Option<String>,
    pub instance_number: Option<i64>,
    pub position: Option<[f64; 3]>,
    pub slice_thickness: Option<f64>,
    pub rows: usize,
    pub columns: usize,
    pub bits_allocated: u16,
    pub bits_stored: u16,
    pub signed: bool,
    pub smallest: Option<i16>,
    pub largest: Option<i16>,
    pub pixels: Vec<i16>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::load(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }
}

struct Element<'a> {
    tag: Tag,
    vr: [u8; 2],
    len: u32,
    value: &'a [u8],
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB"
            | b"OD"
            | b"OF"
            | b"OL"
            | b"OV"
            | b"OW"
            | b"SQ"
            | b"SV"
            | b"UC"
            | b"UN"
            | b"UR"
            | b"UT"
            | b"UV"
    )
}

/// Reads the next element header and value. Undefined-length values are
/// skipped by walking nested items, and come back with an empty value.
fn next_element<'a>(c: &mut Cursor<'a>, explicit: bool) -> Result<Element<'a>> {
    let tag = (c.u16()?, c.u16()?);
    if tag.0 == 0xFFFE {
        let len = c.u32()?;
        return Ok(Element {
            tag,
            vr: *b"  ",
            len,
            value: &[],
        });
    }
    let (vr, len) = if explicit {
        let v = c.take(2)?;
        let vr = [v[0], v[1]];
        if has_long_length(&vr) {
            c.take(2)?;
            (vr, c.u32()?)
        } else {
            (vr, c.u16()? as u32)
        }
    } else {
        (*b"  ", c.u32()?)
    };
    if len == UNDEFINED {
        if tag == PIXEL_DATA {
            return Err(Error::load(
                c.path,
                "encapsulated (compressed) pixel data is not supported",
            ));
        }
        skip_undefined(c, explicit)?;
        return Ok(Element {
            tag,
            vr,
            len,
            value: &[],
        });
    }
    let value = c.take(len as usize)?;
    Ok(Element {
        tag,
        vr,
        len,
        value,
    })
}

fn skip_undefined(c: &mut Cursor<'_>, explicit: bool) -> Result<()> {
    loop {
        let el = next_element(c, explicit)?;
        match el.tag {
            SEQUENCE_END | ITEM_END => return Ok(()),
            ITEM if el.len != UNDEFINED => {
                c.take(el.len as usize)?;
            }
            ITEM => skip_undefined(c, explicit)?,
            _ => {}
        }
    }
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value)
        .trim_matches(|ch: char| ch == '\0' || ch.is_whitespace())
        .to_string()
}

fn le_u16(value: &[u8]) -> u16 {
    if value.len() >= 2 {
        u16::from_le_bytes([value[0], value[1]])
    } else {
        0
    }
}

pub(crate) fn parse_dicom(path: &Path, buf: &[u8]) -> Result<DicomSlice> {
    if buf.len() < 132 || &buf[128..132] != b"DICM" {
        return Err(Error::load(path, "missing DICM preamble"));
    }
    let mut c = Cursor {
        buf,
        pos: 132,
        path,
    };
    let mut out = DicomSlice {
        path: path.to_path_buf(),
        bits_allocated: 16,
        bits_stored: 16,
        ..Default::default()
    };
    let mut transfer = None;
    // file meta group is always explicit VR little endian
    while !c.done() {
        let save = c.pos;
        let group = c.u16()?;
        c.pos = save;
        if group != 0x0002 {
            break;
        }
        let el = next_element(&mut c, true)?;
        if el.tag == TRANSFER_SYNTAX {
            transfer = Some(text(el.value));
        }
    }
    let explicit = match transfer.as_deref() {
        Some(EXPLICIT_LE) => true,
        Some(IMPLICIT_LE) | None => false,
        Some(other) => {
            return Err(Error::load(
                path,
                format!("unsupported transfer syntax {other}"),
            ));
        }
    };
    let mut samples = 1u16;
    let mut pixel_bytes: Option<&[u8]> = None;
    while !c.done() {
        let el = next_element(&mut c, explicit)?;
        let v = el.value;
        match el.tag {
            PATIENT_ID => out.patient_id = Some(text(v)),
            SERIES_UID => out.series_uid = Some(text(v)),
            INSTANCE_NUMBER => out.instance_number = text(v).parse().ok(),
            SLICE_THICKNESS => out.slice_thickness = text(v).parse().ok(),
            IMAGE_POSITION => {
                let parts: Vec<f64> = text(v)
                    .split('\\')
                    .filter_map(|p| p.trim().parse().ok())
                    .collect();
                if parts.len() == 3 {
                    out.position = Some([parts[0], parts[1], parts[2]]);
                } else {
                    return Err(Error::load(path, "malformed ImagePositionPatient"));
                }
            }
            SAMPLES_PER_PIXEL => samples = le_u16(v),
            ROWS => out.rows = le_u16(v) as usize,
            COLUMNS => out.columns = le_u16(v) as usize,
            BITS_ALLOCATED => out.bits_allocated = le_u16(v),
            BITS_STORED => out.bits_stored = le_u16(v),
            PIXEL_REPRESENTATION => out.signed = le_u16(v) == 1,
            SMALLEST_PIXEL => out.smallest = Some(le_u16(v) as i16),
            LARGEST_PIXEL => out.largest = Some(le_u16(v) as i16),
            PIXEL_DATA => pixel_bytes = Some(v),
            _ => {}
        }
        let _ = el.vr;
    }
    if samples != 1 {
        return Err(Error::load(
            path,
            format!("{samples} samples per pixel; expected 1"),
        ));
    }
    if out.bits_allocated != 16 {
        return Err(Error::load(
            path,
            format!(
                "{} bits allocated; only 16 is supported",
                out.bits_allocated
            ),
        ));
    }
    let bytes = pixel_bytes.ok_or_else(|| Error::load(path, "no pixel data"))?;
    let n = out.rows * out.columns;
    if n == 0 || bytes.len() < n * 2 {
        return Err(Error::load(
            path,
            format!(
                "pixel data holds {} bytes for {}x{}",
                bytes.len(),
                out.rows,
                out.columns
            ),
        ));
    }
    out.pixels = Vec::with_capacity(n);
    for b in bytes[..n * 2].chunks_exact(2) {
        let raw = u16::from_le_bytes([b[0], b[1]]);
        let value = if out.signed {
            // sign-extend from bits_stored
            let shift = 16 - out.bits_stored.clamp(1, 16);
            ((raw << shift) as i16) >> shift
        } else {
            i16::try_from(raw).map_err(|_| {
                Error::load(
                    path,
                    format!("unsigned value {raw} does not fit signed 16-bit storage"),
                )
            })?
        };
        out.pixels.push(value);
    }
    Ok(out)
}

fn stored_range(s: &DicomSlice) -> (i16, i16) {
    if let (Some(lo), Some(hi)) = (s.smallest, s.largest) {
        if s.signed {
            return (lo, hi);
        }
    }
    let bits = s.bits_stored.clamp(1, 16) as u32;
    if s.signed {
        let half = 1i32 << (bits - 1);
        (-half as i16, (half - 1) as i16)
    } else {
        let top = ((1u32 << bits) - 1).min(i16::MAX as u32);
        (0, top as i16)
    }
}

/// Read every file in `dir` as one series and order slices along the scan axis.
pub fn read_dicom_series(dir: &Path) -> Result<ScanVolume> {
    let entries = fs::read_dir(dir).map_err(|e| Error::load(dir, e.to_string()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::load(dir, "directory contains no DICOM files"));
    }
    let mut parsed = Vec::with_capacity(files.len());
    for f in &files {
        let buf = fs::read(f).map_err(|e| Error::load(f, e.to_string()))?;
        parsed.push(parse_dicom(f, &buf)?);
    }
    let first_series = parsed[0].series_uid.clone();
    for s in &parsed {
        if s.series_uid != first_series {
            return Err(Error::Inconsistent(format!(
                "{} belongs to series {:?}, expected {:?}",
                s.path.display(),
                s.series_uid,
                first_series
            )));
        }
        if (s.rows, s.columns) != (parsed[0].rows, parsed[0].columns) {
            return Err(Error::Inconsistent(format!(
                "{} is {}x{}, expected {}x{}",
                s.path.display(),
                s.rows,
                s.columns,
                parsed[0].rows,
                parsed[0].columns
            )));
        }
    }

    let key = |s: &DicomSlice| -> Result<f64> {
        match (s.position, s.instance_number) {
            (Some(p), _) => Ok(p[2]),
            (None, Some(n)) => Ok(n as f64),
            (None, None) => Err(Error::Ordering(format!(
                "{} has neither ImagePositionPatient nor InstanceNumber",
                s.path.display()
            ))),
        }
    };
    let mut keyed = parsed
        .into_iter()
        .map(|s| key(&s).map(|k| (k, s)))
        .collect::<Result<Vec<_>>>()?;
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in keyed.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(Error::Ordering(format!(
                "{} and {} share position {}",
                w[0].1.path.display(),
                w[1].1.path.display(),
                w[0].0
            )));
        }
    }

    let spacing = if keyed.len() > 1 {
        let mut diffs: Vec<f64> = keyed.windows(2).map(|w| w[1].0 - w[0].0).collect();
        diffs.sort_by(f64::total_cmp);
        diffs[diffs.len() / 2]
    } else {
        keyed[0].1.slice_thickness.unwrap_or(1.0)
    };
    let range = stored_range(&keyed[0].1);
    let scan_id = keyed[0]
        .1
        .patient_id
        .clone()
        .filter(|s| !s.is_empty())
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "scan".to_string());
    let slices = keyed
        .into_iter()
        .enumerate()
        .map(|(i, (_, s))| SliceImage::new(s.rows, s.columns, s.pixels, i))
        .collect::<Result<Vec<_>>>()?;
    ScanVolume::new(scan_id, slices, spacing, range)
}
