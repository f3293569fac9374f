//! NIH-schema metadata ingest and the two cohort filters.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::vocab::{Label, LabelSet};

pub const COL_IMAGE_INDEX: &str = "Image Index";
pub const COL_FINDING_LABELS: &str = "Finding Labels";
pub const COL_FOLLOWUP: &str = "Follow-up #";
pub const COL_PATIENT_ID: &str = "Patient ID";
pub const COL_AGE: &str = "Patient Age";
pub const COL_GENDER: &str = "Patient Gender";
pub const COL_VIEW: &str = "View Position";

pub const REQUIRED_COLUMNS: [&str; 7] = [
    COL_IMAGE_INDEX,
    COL_FINDING_LABELS,
    COL_FOLLOWUP,
    COL_PATIENT_ID,
    COL_AGE,
    COL_GENDER,
    COL_VIEW,
];

/// Minimum number of X-ray records a patient needs to survive the first filter.
/// Follow-up numbering starts at 0 and a sample window spans three records.
pub const MIN_RECORDS_PER_PATIENT: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum MetadataError {
    #[error("metadata header lacks required column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: unknown finding label {label:?}")]
    UnknownLabel { line: u64, label: String },
    #[error("line {line}: malformed row: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("patient {patient_id} has more than one record with follow-up #{followup}")]
    DuplicateFollowup { patient_id: u32, followup: u32 },
    #[error("failed to read metadata: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewPosition {
    PA,
    AP,
}

impl ViewPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewPosition::PA => "PA",
            ViewPosition::AP => "AP",
        }
    }
}

impl fmt::Display for ViewPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewPosition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "PA" | "pa" => Ok(ViewPosition::PA),
            "AP" | "ap" => Ok(ViewPosition::AP),
            other => Err(format!("unknown view position {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::M => "M",
            Gender::F => "F",
        }
    }
}

/// One metadata row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XrayRecord {
    pub image_index: String,
    pub patient_id: u32,
    pub followup_num: u32,
    pub labels: LabelSet,
    pub view: ViewPosition,
    pub age: u32,
    pub gender: Gender,
    /// Unused columns (image size, pixel spacing, ...) kept verbatim as
    /// `(header, value)` pairs so the table can be written back out.
    pub extra: Vec<(String, String)>,
    pub image_path: Option<PathBuf>,
}

/// All records of one patient, in the order sample windows are taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientGroup {
    pub patient_id: u32,
    pub records: Vec<XrayRecord>,
}

impl PatientGroup {
    /// The single view shared by every record, if there is one.
    pub fn consistent_view(&self) -> Option<ViewPosition> {
        let first = self.records.first()?.view;
        self.records.iter().all(|r| r.view == first).then_some(first)
    }
}

/// How records are ordered inside a patient group.
///
/// The 2017 metadata release numbers follow-ups by the image file suffix, so
/// both orders coincide there. The 2020 revision renumbered `Follow-up #` for
/// a few thousand patients; `ImageIndex` reproduces the original ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordOrder {
    #[default]
    Followup,
    ImageIndex,
}

impl FromStr for RecordOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "followup" => Ok(RecordOrder::Followup),
            "image_index" | "image-index" => Ok(RecordOrder::ImageIndex),
            other => Err(format!("unknown record order {other:?}")),
        }
    }
}

fn parse_leading_int(field: &str) -> Option<u32> {
    let trimmed = field.trim();
    let end = trimmed
        .find(|c: char| !c.is_ascii_digit())
        .unwrap_or(trimmed.len());
    trimmed[..end].parse().ok()
}

/// Parses NIH-schema metadata. Extra columns are kept, row order preserved.
pub fn parse_metadata<R: Read>(reader: R) -> Result<Vec<XrayRecord>, MetadataError> {
    let mut csv = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::Headers)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let mut positions = [0usize; REQUIRED_COLUMNS.len()];
    for (slot, name) in positions.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MetadataError::MissingColumn(name.to_string()))?;
    }
    let extra_columns: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| !positions.contains(i) && !h.is_empty())
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut records = Vec::new();
    for row in csv.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let malformed = |reason: String| MetadataError::MalformedRow { line, reason };
        let field = |i: usize| row.get(positions[i]).unwrap_or("");

        let image_index = field(0).trim().to_string();
        if image_index.is_empty() {
            return Err(malformed("empty image index".into()));
        }
        let mut labels = LabelSet::empty();
        for token in field(1).split('|') {
            let label = Label::parse(token).ok_or_else(|| MetadataError::UnknownLabel {
                line,
                label: token.trim().to_string(),
            })?;
            labels.insert(label);
        }
        if labels.contains(Label::NO_FINDING) && labels.len() > 1 {
            return Err(malformed("\"No Finding\" combined with other labels".into()));
        }
        let followup_num: u32 = field(2)
            .trim()
            .parse()
            .map_err(|_| malformed(format!("follow-up {:?} is not an integer", field(2))))?;
        let patient_id: u32 = field(3)
            .trim()
            .parse()
            .ok()
            .filter(|id| *id > 0)
            .ok_or_else(|| malformed(format!("patient id {:?} is not a positive integer", field(3))))?;
        let age = parse_leading_int(field(4))
            .ok_or_else(|| malformed(format!("age {:?} is not an integer", field(4))))?;
        let gender = match field(5).trim() {
            "M" => Gender::M,
            "F" => Gender::F,
            other => return Err(malformed(format!("unknown gender {other:?}"))),
        };
        let view = field(6).parse().map_err(malformed)?;
        let extra = extra_columns
            .iter()
            .map(|(i, h)| (h.clone(), row.get(*i).unwrap_or("").to_string()))
            .collect();
        records.push(XrayRecord {
            image_index,
            patient_id,
            followup_num,
            labels,
            view,
            age,
            gender,
            extra,
            image_path: None,
        });
    }
    Ok(records)
}

/// Opens a metadata file, transparently decompressing `.gz`.
pub fn read_metadata_file(path: &Path) -> Result<Vec<XrayRecord>, MetadataError> {
    let file = File::open(path).map_err(|source| MetadataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        parse_metadata(flate2::read::GzDecoder::new(reader))
    } else {
        parse_metadata(reader)
    }
}

/// Writes records back out in the NIH schema. Extra columns follow the
/// required ones, named after the first record's extras.
pub fn write_metadata<W: Write>(records: &[XrayRecord], writer: W) -> Result<(), MetadataError> {
    let mut csv = csv::Writer::from_writer(writer);
    let extra_names: Vec<&str> = records
        .first()
        .map(|r| r.extra.iter().map(|(h, _)| h.as_str()).collect())
        .unwrap_or_default();
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.extend(&extra_names);
    csv.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.image_index.clone(),
            r.labels.to_field(),
            r.followup_num.to_string(),
            r.patient_id.to_string(),
            r.age.to_string(),
            r.gender.as_str().to_string(),
            r.view.as_str().to_string(),
        ];
        row.extend(r.extra.iter().map(|(_, v)| v.clone()));
        csv.write_record(&row)?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn group_patients(records: Vec<XrayRecord>) -> Result<Vec<PatientGroup>, MetadataError> {
    group_patients_by(records, RecordOrder::Followup)
}

/// Groups records by patient (ascending patient id) and orders each group.
pub fn group_patients_by(
    records: Vec<XrayRecord>,
    order: RecordOrder,
) -> Result<Vec<PatientGroup>, MetadataError> {
    let mut by_patient: BTreeMap<u32, Vec<XrayRecord>> = BTreeMap::new();
    for r in records {
        by_patient.entry(r.patient_id).or_default().push(r);
    }
    by_patient
        .into_iter()
        .map(|(patient_id, mut records)| {
            records.sort_by_key(|r| r.followup_num);
            if let Some(w) = records.windows(2).find(|w| w[0].followup_num == w[1].followup_num) {
                return Err(MetadataError::DuplicateFollowup {
                    patient_id,
                    followup: w[0].followup_num,
                });
            }
            if order == RecordOrder::ImageIndex {
                records.sort_by(|a, b| a.image_index.cmp(&b.image_index));
            }
            Ok(PatientGroup {
                patient_id,
                records,
            })
        })
        .collect()
}

/// Filter 1: drop patients with fewer than three X-ray records.
pub fn filter_min_followups(groups: Vec<PatientGroup>) -> Vec<PatientGroup> {
    groups
        .into_iter()
        .filter(|g| g.records.len() >= MIN_RECORDS_PER_PATIENT)
        .collect()
}

/// Filter 2: drop patients whose records mix PA and AP views.
pub fn filter_consistent_view(groups: Vec<PatientGroup>) -> Vec<PatientGroup> {
    groups
        .into_iter()
        .filter(|g| g.consistent_view().is_some())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Image Index,Finding Labels,Follow-up #,Patient ID,Patient Age,Patient Gender,View Position,OriginalImage[Width,Height]\n";

    fn parse(rows: &str) -> Result<Vec<XrayRecord>, MetadataError> {
        parse_metadata(format!("{HEADER}{rows}").as_bytes())
    }

    fn rec(patient_id: u32, followup: u32, view: ViewPosition) -> XrayRecord {
        XrayRecord {
            image_index: format!("{patient_id:08}_{followup:03}.png"),
            patient_id,
            followup_num: followup,
            labels: LabelSet::single(Label::NO_FINDING),
            view,
            age: 40,
            gender: Gender::F,
            extra: vec![],
            image_path: None,
        }
    }

    #[test]
    fn parses_figure_six_row() {
        let records =
            parse("00000013_023.png,Infiltration|Mass|Pneumothorax,0,13,60,M,PA,1024,1024\n").unwrap();
        let r = &records[0];
        assert_eq!(r.followup_num, 0);
        assert_eq!(r.patient_id, 13);
        assert_eq!(r.labels.to_field(), "Infiltration|Mass|Pneumothorax");
        assert_eq!(r.view, ViewPosition::PA);
        assert_eq!(
            r.extra,
            vec![
                ("OriginalImage[Width".to_string(), "1024".to_string()),
                ("Height]".to_string(), "1024".to_string())
            ]
        );
    }

    #[test]
    fn no_finding_is_a_singleton() {
        let records = parse("a.png,No Finding,0,1,30,F,AP,1,1\n").unwrap();
        assert_eq!(records[0].labels, LabelSet::single(Label::NO_FINDING));
        assert!(matches!(
            parse("a.png,No Finding|Mass,0,1,30,F,AP,1,1\n"),
            Err(MetadataError::MalformedRow { .. })
        ));
    }

    #[test]
    fn rejects_unknown_label() {
        match parse("a.png,Covid,0,1,30,F,AP,1,1\n") {
            Err(MetadataError::UnknownLabel { label, line }) => {
                assert_eq!(label, "Covid");
                assert_eq!(line, 2);
            }
            other => panic!("expected UnknownLabel, got {other:?}"),
        }
    }

    #[test]
    fn rejects_missing_column() {
        let err = parse_metadata("Image Index,Finding Labels,Patient ID\n".as_bytes()).unwrap_err();
        assert!(matches!(err, MetadataError::MissingColumn(c) if c == "Follow-up #"));
    }

    #[test]
    fn rejects_malformed_fields() {
        for row in [
            "a.png,Mass,x,1,30,F,PA,1,1\n",
            "a.png,Mass,0,abc,30,F,PA,1,1\n",
            "a.png,Mass,0,0,30,F,PA,1,1\n",
            "a.png,Mass,0,1,30,F,LL,1,1\n",
            "a.png,Mass,0,1,old,F,PA,1,1\n",
        ] {
            assert!(matches!(parse(row), Err(MetadataError::MalformedRow { .. })), "{row}");
        }
    }

    #[test]
    fn age_with_unit_suffix_uses_leading_integer() {
        let records = parse("a.png,Mass,0,1,058Y,F,PA,1,1\n").unwrap();
        assert_eq!(records[0].age, 58);
    }

    #[test]
    fn groups_sort_by_followup() {
        let records = vec![
            rec(13, 2, ViewPosition::PA),
            rec(13, 0, ViewPosition::PA),
            rec(13, 1, ViewPosition::PA),
        ];
        let groups = group_patients(records).unwrap();
        assert_eq!(groups.len(), 1);
        let order: Vec<u32> = groups[0].records.iter().map(|r| r.followup_num).collect();
        assert_eq!(order, vec![0, 1, 2]);
    }

    #[test]
    fn groups_split_by_patient() {
        let groups =
            group_patients(vec![rec(2, 0, ViewPosition::PA), rec(1, 0, ViewPosition::AP)]).unwrap();
        assert_eq!(groups.iter().map(|g| g.patient_id).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn duplicate_followup_is_an_error() {
        let err =
            group_patients(vec![rec(5, 0, ViewPosition::PA), rec(5, 0, ViewPosition::PA)]).unwrap_err();
        assert!(matches!(err, MetadataError::DuplicateFollowup { patient_id: 5, followup: 0 }));
    }

    #[test]
    fn image_index_order_can_differ_from_followup_order() {
        let mut a = rec(3, 7, ViewPosition::PA);
        a.image_index = "00000003_000.png".into();
        let mut b = rec(3, 0, ViewPosition::PA);
        b.image_index = "00000003_001.png".into();
        let by_followup = group_patients(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(by_followup[0].records[0].followup_num, 0);
        let by_index = group_patients_by(vec![a, b], RecordOrder::ImageIndex).unwrap();
        assert_eq!(by_index[0].records[0].followup_num, 7);
    }

    #[test]
    fn filters_apply_thresholds() {
        let groups = group_patients(vec![
            rec(1, 0, ViewPosition::PA),
            rec(1, 1, ViewPosition::PA),
            rec(1, 2, ViewPosition::PA),
            rec(2, 0, ViewPosition::PA),
            rec(2, 1, ViewPosition::PA),
            rec(3, 0, ViewPosition::PA),
            rec(3, 1, ViewPosition::PA),
            rec(3, 2, ViewPosition::AP),
        ])
        .unwrap();
        let f1 = filter_min_followups(groups);
        assert_eq!(f1.iter().map(|g| g.patient_id).collect::<Vec<_>>(), vec![1, 3]);
        let f2 = filter_consistent_view(f1);
        assert_eq!(f2.iter().map(|g| g.patient_id).collect::<Vec<_>>(), vec![1]);
    }
}
