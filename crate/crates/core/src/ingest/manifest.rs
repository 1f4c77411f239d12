use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_slice_png, save_slice_png, PlaneLabel, SliceRecord, SourceKind, TumorLabel};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 6] = [
    "path",
    "plane_label",
    "volume_id",
    "slice_index",
    "source_kind",
    "tumor_label",
];

/// One manifest line. `path` is relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: PathBuf,
    #[serde(with = "display_fromstr")]
    pub plane_label: PlaneLabel,
    pub volume_id: String,
    pub slice_index: usize,
    #[serde(with = "display_fromstr")]
    pub source_kind: SourceKind,
    #[serde(with = "opt_tumor")]
    pub tumor_label: Option<TumorLabel>,
}

impl ManifestRow {
    pub fn resolve(&self, manifest_dir: &Path) -> PathBuf {
        if self.path.is_absolute() {
            self.path.clone()
        } else {
            manifest_dir.join(&self.path)
        }
    }
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Manifest(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(MANIFEST_HEADER)
            .map_err(|e| Error::Manifest(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| Error::Manifest(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest(format!(
            "{}: header must be {}",
            path.display(),
            MANIFEST_HEADER.join(",")
        )));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Manifest(format!("{} line {}: {e}", path.display(), i + 2))))
        .collect()
}

/// Directory, relative to the manifest, that holds slice PNGs.
pub const SLICE_DIR: &str = "slices";

/// Writes each record as a 16-bit PNG under `dir/slices` plus
/// `dir/<manifest_name>` listing them in record order.
pub fn write_slice_dataset(dir: &Path, manifest_name: &str, records: &[SliceRecord]) -> Result<Vec<ManifestRow>> {
    let slice_dir = dir.join(SLICE_DIR);
    std::fs::create_dir_all(&slice_dir).map_err(|e| Error::io(&slice_dir, e))?;
    let rows: Vec<ManifestRow> = records
        .iter()
        .map(|r| {
            let rel = PathBuf::from(SLICE_DIR).join(format!("{}.png", r.record_id()));
            save_slice_png(&r.pixels, &dir.join(&rel))?;
            Ok(ManifestRow {
                path: rel,
                plane_label: r.plane,
                volume_id: r.volume_id.clone(),
                slice_index: r.slice_index,
                source_kind: r.source_kind,
                tumor_label: r.tumor_label,
            })
        })
        .collect::<Result<_>>()?;
    write_manifest(&dir.join(manifest_name), &rows)?;
    Ok(rows)
}

/// Loads the slices a manifest lists, keeping stored intensities as they are.
pub fn load_slice_dataset(manifest: &Path) -> Result<Vec<SliceRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            Ok(SliceRecord {
                pixels: load_slice_png(&row.resolve(base))?,
                plane: row.plane_label,
                volume_id: row.volume_id,
                slice_index: row.slice_index,
                source_kind: row.source_kind,
                tumor_label: row.tumor_label,
            })
        })
        .collect()
}

mod display_fromstr {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

mod opt_tumor {
    use serde::{de, Deserialize, Deserializer, Serializer};

    use super::TumorLabel;

    pub fn serialize<S: Serializer>(v: &Option<TumorLabel>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(t) => s.collect_str(t),
            None => s.serialize_str(""),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<TumorLabel>, D::Error> {
        let s = String::deserialize(d)?;
        if s.trim().is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(de::Error::custom)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn slice_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<SliceRecord> = (0..3)
            .map(|i| SliceRecord {
                pixels: Array2::from_shape_fn((5, 7), |(r, c)| ((r * 7 + c + i) % 11) as f32 / 10.0),
                plane: PlaneLabel::ALL[i],
                volume_id: "v".into(),
                slice_index: i * 10,
                source_kind: SourceKind::Native3D,
                tumor_label: (i == 1).then_some(TumorLabel::Glioma),
            })
            .collect();
        write_slice_dataset(dir.path(), "manifest.csv", &records).unwrap();
        let back = load_slice_dataset(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(
                (a.plane, a.slice_index, a.tumor_label),
                (b.plane, b.slice_index, b.tumor_label)
            );
            let worst = a
                .pixels
                .iter()
                .zip(b.pixels.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 0.5 / 65535.0 + 1e-7, "{worst}");
        }
    }

    #[test]
    fn rows_round_trip_with_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![
            ManifestRow {
                path: "slices/a.png".into(),
                plane_label: PlaneLabel::Sagittal,
                volume_id: "vol1".into(),
                slice_index: 30,
                source_kind: SourceKind::Native3D,
                tumor_label: None,
            },
            ManifestRow {
                path: "b.png".into(),
                plane_label: PlaneLabel::Axial,
                volume_id: "img2".into(),
                slice_index: 0,
                source_kind: SourceKind::Native2D,
                tumor_label: Some(TumorLabel::NoTumor),
            },
        ];
        write_manifest(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("path,plane_label,volume_id,slice_index,source_kind,tumor_label\n"));
        assert!(text.contains("slices/a.png,sagittal,vol1,30,native3d,\n"));
        assert_eq!(read_manifest(&p).unwrap(), rows);
    }

    #[test]
    fn missing_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "a.png,axial,v,0,native2d,\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Manifest(_))));
    }

    #[test]
    fn bad_label_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(
            &p,
            "path,plane_label,volume_id,slice_index,source_kind,tumor_label\na.png,oblique,v,0,native2d,\n",
        )
        .unwrap();
        let err = read_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
