//! Split manifests: one CSV row per sample plus a JSON sidecar holding what
//! the fixed column set cannot (split seed/mode/ratios and the third image's
//! full label set).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metadata::ViewPosition;
use crate::samples::{DatasetSplit, Partition, SampleSet, SplitMode, SplitRatios};
use crate::shuffle::SHUFFLE_ALGORITHM;
use crate::vocab::{Label, LabelSet, VOCABULARY_VERSION};

pub const MANIFEST_COLUMNS: [&str; 11] = [
    "sample_id",
    "patient_id",
    "view",
    "followup_1",
    "followup_2",
    "followup_3",
    "image_1",
    "image_2",
    "image_3",
    "target_label",
    "split_partition",
];

const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{path} line {line}: {reason}")]
    Invalid {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    vocabulary_version: u32,
    shuffle_algorithm: String,
    seed: u64,
    mode: SplitMode,
    ratios: SplitRatios,
    /// sample_id → third image's full label field.
    third_labels: BTreeMap<u64, String>,
}

pub fn sidecar_path(manifest: &Path) -> PathBuf {
    let mut name = manifest.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes train, test, then validation rows, plus the sidecar.
pub fn write_manifest(split: &DatasetSplit, path: &Path) -> Result<(), ManifestError> {
    let io = |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let csv_err = |source| ManifestError::Csv {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(io)?));
    w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    let mut third_labels = BTreeMap::new();
    for (partition, s) in split.iter() {
        w.write_record([
            s.sample_id.to_string(),
            s.patient_id.to_string(),
            s.view.to_string(),
            s.source_followups[0].to_string(),
            s.source_followups[1].to_string(),
            s.source_followups[2].to_string(),
            s.images[0].clone(),
            s.images[1].clone(),
            s.images[2].clone(),
            s.target_label.name().to_string(),
            partition.as_str().to_string(),
        ])
        .map_err(csv_err)?;
        third_labels.insert(s.sample_id, s.original_third_labels.to_field());
    }
    w.flush().map_err(io)?;

    let sidecar = Sidecar {
        version: SIDECAR_VERSION,
        vocabulary_version: VOCABULARY_VERSION,
        shuffle_algorithm: SHUFFLE_ALGORITHM.to_string(),
        seed: split.seed,
        mode: split.mode,
        ratios: split.ratios,
        third_labels,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|source| ManifestError::Io { path: side, source })
}

/// Reads a manifest. Without a sidecar the split metadata falls back to
/// defaults and each sample's third-label set is just its target.
pub fn read_manifest(path: &Path) -> Result<DatasetSplit, ManifestError> {
    let csv_err = |source| ManifestError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let side = sidecar_path(path);
    let sidecar: Option<Sidecar> = match fs::read_to_string(&side) {
        Ok(text) => Some(serde_json::from_str(&text).map_err(|e| {
            ManifestError::SchemaMismatch(format!("{}: {e}", side.display()))
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(source) => return Err(ManifestError::Io { path: side, source }),
    };
    if let Some(sc) = &sidecar {
        if sc.vocabulary_version != VOCABULARY_VERSION {
            return Err(ManifestError::SchemaMismatch(format!(
                "label vocabulary version {} (expected {VOCABULARY_VERSION})",
                sc.vocabulary_version
            )));
        }
    }

    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(MANIFEST_COLUMNS.iter().copied()) {
        let missing: Vec<_> = MANIFEST_COLUMNS
            .iter()
            .filter(|c| !headers.iter().any(|h| h == **c))
            .collect();
        return Err(ManifestError::SchemaMismatch(if missing.is_empty() {
            format!("columns out of order in {}", path.display())
        } else {
            format!("{} lacks columns {missing:?}", path.display())
        }));
    }

    let mut split = match &sidecar {
        Some(sc) => DatasetSplit::empty(sc.seed, sc.mode, sc.ratios),
        None => DatasetSplit::empty(0, SplitMode::default(), SplitRatios::default()),
    };
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let invalid = |reason: String| ManifestError::Invalid {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let int = |i: usize| -> Result<u64, ManifestError> {
            row[i]
                .parse()
                .map_err(|_| invalid(format!("{} {:?} is not an integer", MANIFEST_COLUMNS[i], &row[i])))
        };
        let sample_id = int(0)?;
        let patient_id = int(1)? as u32;
        let view: ViewPosition = row[2].parse().map_err(invalid)?;
        let followups = [int(3)? as u32, int(4)? as u32, int(5)? as u32];
        let images = [row[6].to_string(), row[7].to_string(), row[8].to_string()];
        let target_label: Label = row[9].parse().map_err(|e| invalid(format!("{e}")))?;
        let partition: Partition = row[10].parse().map_err(invalid)?;
        let original_third_labels = match &sidecar {
            Some(sc) => {
                let field = sc
                    .third_labels
                    .get(&sample_id)
                    .ok_or_else(|| invalid(format!("sample {sample_id} missing from sidecar")))?;
                LabelSet::parse_field(field).map_err(|e| invalid(format!("{e}")))?
            }
            None => LabelSet::single(target_label),
        };
        if !original_third_labels.contains(target_label) {
            return Err(invalid(format!(
                "target label {target_label} not among third image labels {}",
                original_third_labels.to_field()
            )));
        }
        let sample = SampleSet {
            sample_id,
            patient_id,
            view,
            images,
            source_followups: followups,
            target_label,
            original_third_labels,
        };
        match partition {
            Partition::Train => split.train.push(sample),
            Partition::Test => split.test.push(sample),
            Partition::Validation => split.validation.push(sample),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::fixtures::sample;
    use crate::samples::split_train_test_val;

    fn twelve() -> DatasetSplit {
        let mut samples: Vec<_> = (0..12)
            .map(|i| sample(i, (i / 2) as u32 + 1, "Mass", if i % 3 == 0 { ViewPosition::AP } else { ViewPosition::PA }))
            .collect();
        samples[4].original_third_labels = LabelSet::parse_field("Mass|Nodule").unwrap();
        split_train_test_val(&samples, 5, SplitMode::ByPatient).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let split = twelve();
        write_manifest(&split, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), split);
        let header = fs::read_to_string(&path).unwrap();
        assert!(header.starts_with(&MANIFEST_COLUMNS.join(",")));
    }

    #[test]
    fn empty_split_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ap.csv");
        let split = DatasetSplit::empty(1, SplitMode::BySample, SplitRatios::default());
        write_manifest(&split, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
        assert_eq!(read_manifest(&path).unwrap(), split);
    }

    #[test]
    fn missing_column_is_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "sample_id,patient_id,view\n1,1,PA\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(ManifestError::SchemaMismatch(_))));
    }

    #[test]
    fn target_outside_third_labels_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_manifest(&twelve(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = lines[1].replace(",Mass,", ",Edema,");
        fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(read_manifest(&path), Err(ManifestError::Invalid { line: 2, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_manifest(Path::new("/nonexistent/m.csv")),
            Err(ManifestError::Io { .. })
        ));
    }
}
