//! RVOL volume files and the CSV dataset manifest.
//!
//! RVOL layout (little endian): `"RVOL"`, `u8` version = 1, `u32` D, H, W,
//! then D·H·W `f32` intensities, then D·H·W `u8` mask values in {0,1}.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::volume::{CystClass, Volume};
use crate::error::{Error, Result};

pub const RVOL_MAGIC: &[u8; 4] = b"RVOL";
pub const RVOL_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 12;

pub fn encode_rvol(dims: [usize; 3], intensities: &[f32], mask: &[u8]) -> Vec<u8> {
    let n = dims.iter().product::<usize>();
    assert_eq!(intensities.len(), n);
    assert_eq!(mask.len(), n);
    let mut out = Vec::with_capacity(HEADER_LEN + 5 * n);
    out.extend_from_slice(RVOL_MAGIC);
    out.push(RVOL_VERSION);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in intensities {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(mask);
    out
}

pub fn decode_rvol(bytes: &[u8]) -> Result<([usize; 3], Vec<f32>, Vec<u8>)> {
    let parse = |offset: usize, message: String| Error::Parse { offset, message };
    if bytes.len() < 4 || &bytes[..4] != RVOL_MAGIC {
        let found = &bytes[..bytes.len().min(4)];
        return Err(parse(0, format!("bad magic {found:?}, expected \"RVOL\"")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(parse(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[4] != RVOL_VERSION {
        return Err(parse(
            4,
            format!("unsupported RVOL version {}, expected {RVOL_VERSION}", bytes[4]),
        ));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let dims = [dim(0), dim(1), dim(2)];
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| parse(5, format!("invalid extents {dims:?}")))?;
    let expected = n
        .checked_mul(5)
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| parse(5, format!("extents {dims:?} overflow")))?;
    if bytes.len() < expected {
        return Err(parse(
            bytes.len(),
            format!(
                "truncated payload: {} of {expected} bytes for extents {dims:?}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(parse(
            expected,
            format!("{} trailing bytes after payload", bytes.len() - expected),
        ));
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + 4 * n];
    let intensities = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask_start = HEADER_LEN + 4 * n;
    let mask = bytes[mask_start..].to_vec();
    if let Some(pos) = mask.iter().position(|&m| m > 1) {
        return Err(parse(
            mask_start + pos,
            format!("mask value {} is not 0 or 1", mask[pos]),
        ));
    }
    Ok((dims, intensities, mask))
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let bytes = encode_rvol(volume.dims(), &volume.intensities, &volume.mask);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path, patient_id: &str, label: CystClass) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, intensities, mask) = decode_rvol(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })?;
    Volume::new(patient_id, label, dims, intensities, mask)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub label: CystClass,
    /// As written in the manifest; relative paths resolve against its directory.
    pub path: PathBuf,
}

pub const MANIFEST_HEADER: [&str; 3] = ["patient_id", "label", "path"];

pub fn read_manifest(manifest: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest)
        .map_err(|e| csv_error(manifest, e, 0))?;
    let header = reader.headers().map_err(|e| csv_error(manifest, e, 0))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest {
            row: 0,
            message: format!(
                "header must be `patient_id,label,path`, got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(manifest, e, row))?;
        let (id, label, path) = (&record[0], &record[1], &record[2]);
        let label = CystClass::parse(label).ok_or_else(|| Error::Manifest {
            row,
            message: format!("unknown label {label:?} (expected IPMN, MCN, SCN or SPT)"),
        })?;
        if id.is_empty() {
            return Err(Error::Manifest {
                row,
                message: "empty patient_id".into(),
            });
        }
        entries.push(ManifestEntry {
            patient_id: id.to_string(),
            label,
            path: PathBuf::from(path),
        });
    }
    Ok(entries)
}

fn csv_error(path: &Path, e: csv::Error, row: usize) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Manifest {
            row,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

pub fn write_manifest(manifest: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(manifest).map_err(|e| csv_error(manifest, e, 0))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(manifest, e, 0))?;
    for (i, e) in entries.iter().enumerate() {
        w.write_record([e.patient_id.as_str(), e.label.name(), &e.path.to_string_lossy()])
            .map_err(|err| csv_error(manifest, err, i + 1))?;
    }
    w.flush().map_err(|e| Error::io(manifest, e))
}

/// Reads every volume listed in the manifest.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Volume>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| read_volume(&base.join(&e.path), &e.patient_id, e.label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let n = 2 * 3 * 4;
        let intensities = (0..n).map(|i| (i as f32 * 0.37).sin() * 1000.0).collect();
        let mask = (0..n).map(|i| (i % 3 == 0) as u8).collect();
        Volume::new("p1", CystClass::Scn, [2, 3, 4], intensities, mask).unwrap()
    }

    #[test]
    fn corrupted_magic_names_expected_tag() {
        let mut bytes = encode_rvol([1, 1, 1], &[0.0], &[0]);
        bytes[0] = b'X';
        let err = decode_rvol(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
        assert!(err.to_string().contains("\"RVOL\""));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_rvol([2, 2, 2], &[1.0; 8], &[1; 8]);
        let err = decode_rvol(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, bytes.len() - 3),
            other => panic!("{other:?}"),
        }
        assert!(decode_rvol(&bytes[..10]).is_err());
    }

    #[test]
    fn bad_mask_value_rejected() {
        let mut bytes = encode_rvol([1, 1, 2], &[0.0, 0.0], &[0, 1]);
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(matches!(decode_rvol(&bytes), Err(Error::Parse { offset, .. }) if offset == last));
    }

    #[test]
    fn manifest_maps_labels_and_reads_files() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        let mut entries = Vec::new();
        for (i, class) in CystClass::ALL.iter().enumerate() {
            let name = format!("v{i}.rvol");
            write_volume(&v, &dir.path().join(&name)).unwrap();
            entries.push(ManifestEntry {
                patient_id: format!("p{i}"),
                label: *class,
                path: PathBuf::from(name),
            });
        }
        let manifest = dir.path().join("manifest.csv");
        write_manifest(&manifest, &entries).unwrap();
        let vols = load_dataset(&manifest).unwrap();
        assert_eq!(vols.len(), 4);
        let labels: Vec<usize> = vols.iter().map(|v| v.label.index()).collect();
        assert_eq!(labels, vec![0, 1, 2, 3]);
        assert_eq!(vols[2].intensities, v.intensities);
    }

    #[test]
    fn unknown_label_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.csv");
        fs::write(&manifest, "patient_id,label,path\na,IPMN,a.rvol\nb,XYZ,b.rvol\n").unwrap();
        match read_manifest(&manifest) {
            Err(Error::Manifest { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("XYZ"));
            }
            other => panic!("{other:?}"),
        }
    }
}
