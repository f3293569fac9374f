//! Sample-set construction: sliding three-record windows, multi-label
//! explosion, view separation and the train/test/validation split.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metadata::{PatientGroup, ViewPosition, XrayRecord};
use crate::shuffle;
use crate::vocab::{Label, LabelSet, NUM_LABELS};

pub const WINDOW: usize = 3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SampleError {
    #[error("patient {patient_id} has {records} records; a window needs {WINDOW}")]
    TooFewRecords { patient_id: u32, records: usize },
    #[error("cannot split an empty sample list")]
    EmptyInput,
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    BadRatios([f64; 3]),
}

/// One training example: three consecutive X-rays of a patient and a single
/// target label taken from the third.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub sample_id: u64,
    pub patient_id: u32,
    pub view: ViewPosition,
    pub images: [String; WINDOW],
    pub source_followups: [u32; WINDOW],
    pub target_label: Label,
    pub original_third_labels: LabelSet,
}

pub type Window<'a> = [&'a XrayRecord; WINDOW];

/// Width-3, stride-1 windows over the group's records (n records → n − 2 windows).
pub fn build_windows(group: &PatientGroup) -> Result<Vec<Window<'_>>, SampleError> {
    let records = &group.records;
    if records.len() < WINDOW {
        return Err(SampleError::TooFewRecords {
            patient_id: group.patient_id,
            records: records.len(),
        });
    }
    Ok(records
        .windows(WINDOW)
        .map(|w| [&w[0], &w[1], &w[2]])
        .collect())
}

/// One sample per label of the window's third record, ids drawn from `next_id`
/// in vocabulary order.
pub fn explode_multilabel(window: &Window<'_>, next_id: &mut u64) -> Vec<SampleSet> {
    let third = window[2];
    third
        .labels
        .iter()
        .map(|target_label| {
            let sample_id = *next_id;
            *next_id += 1;
            SampleSet {
                sample_id,
                patient_id: third.patient_id,
                view: third.view,
                images: window.map(|r| r.image_index.clone()),
                source_followups: window.map(|r| r.followup_num),
                target_label,
                original_third_labels: third.labels,
            }
        })
        .collect()
}

/// Windows and explodes every group. Ids follow (group order, window order,
/// vocabulary order), starting at 0.
pub fn build_samples(groups: &[PatientGroup]) -> Result<Vec<SampleSet>, SampleError> {
    let mut next_id = 0u64;
    let mut out = Vec::new();
    for group in groups {
        for window in build_windows(group)? {
            out.extend(explode_multilabel(&window, &mut next_id));
        }
    }
    Ok(out)
}

/// Partitions samples by view, keeping relative order.
pub fn split_by_view(samples: Vec<SampleSet>) -> (Vec<SampleSet>, Vec<SampleSet>) {
    samples.into_iter().partition(|s| s.view == ViewPosition::PA)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    BySample,
    ByPatient,
}

impl FromStr for SplitMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "by_sample" | "by-sample" => Ok(SplitMode::BySample),
            "by_patient" | "by-patient" => Ok(SplitMode::ByPatient),
            other => Err(format!("unknown split mode {other:?}")),
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::BySample => "by_sample",
            SplitMode::ByPatient => "by_patient",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            test: 0.2,
            validation: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), SampleError> {
        let parts = [self.train, self.test, self.validation];
        let ok = parts.iter().all(|r| (0.0..=1.0).contains(r))
            && (parts.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(SampleError::BadRatios(parts))
        }
    }

    /// (train, test, validation) sizes: floor, floor, remainder.
    pub fn cut(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let test = floor(self.test).min(n - train);
        (train, test, n - train - test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Test,
    Validation,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Test => "test",
            Partition::Validation => "validation",
        }
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "test" => Ok(Partition::Test),
            "validation" => Ok(Partition::Validation),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SampleSet>,
    pub test: Vec<SampleSet>,
    pub validation: Vec<SampleSet>,
    pub seed: u64,
    pub mode: SplitMode,
    pub ratios: SplitRatios,
}

impl DatasetSplit {
    pub fn empty(seed: u64, mode: SplitMode, ratios: SplitRatios) -> DatasetSplit {
        DatasetSplit {
            train: vec![],
            test: vec![],
            validation: vec![],
            seed,
            mode,
            ratios,
        }
    }

    pub fn partition(&self, p: Partition) -> &[SampleSet] {
        match p {
            Partition::Train => &self.train,
            Partition::Test => &self.test,
            Partition::Validation => &self.validation,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.test.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Partition, &SampleSet)> {
        [Partition::Train, Partition::Test, Partition::Validation]
            .into_iter()
            .flat_map(move |p| self.partition(p).iter().map(move |s| (p, s)))
    }
}

pub fn split_train_test_val(
    samples: &[SampleSet],
    seed: u64,
    mode: SplitMode,
) -> Result<DatasetSplit, SampleError> {
    split_with_ratios(samples, seed, mode, SplitRatios::default())
}

/// Seeded shuffle then a contiguous cut. In `ByPatient` mode whole patients
/// are shuffled and cut by patient count, so partitions are patient-disjoint.
pub fn split_with_ratios(
    samples: &[SampleSet],
    seed: u64,
    mode: SplitMode,
    ratios: SplitRatios,
) -> Result<DatasetSplit, SampleError> {
    if samples.is_empty() {
        return Err(SampleError::EmptyInput);
    }
    ratios.validate()?;
    let mut split = DatasetSplit::empty(seed, mode, ratios);
    match mode {
        SplitMode::BySample => {
            let order = shuffle::shuffled_indices(samples.len(), seed);
            let (n_train, n_test, _) = ratios.cut(samples.len());
            for (rank, &i) in order.iter().enumerate() {
                let dest = if rank < n_train {
                    &mut split.train
                } else if rank < n_train + n_test {
                    &mut split.test
                } else {
                    &mut split.validation
                };
                dest.push(samples[i].clone());
            }
        }
        SplitMode::ByPatient => {
            let mut patients: Vec<u32> = Vec::new();
            let mut by_patient: HashMap<u32, Vec<&SampleSet>> = HashMap::new();
            for s in samples {
                by_patient
                    .entry(s.patient_id)
                    .or_insert_with(|| {
                        patients.push(s.patient_id);
                        Vec::new()
                    })
                    .push(s);
            }
            let order = shuffle::shuffled_indices(patients.len(), seed);
            let (n_train, n_test, _) = ratios.cut(patients.len());
            for (rank, &i) in order.iter().enumerate() {
                let dest = if rank < n_train {
                    &mut split.train
                } else if rank < n_train + n_test {
                    &mut split.test
                } else {
                    &mut split.validation
                };
                dest.extend(by_patient[&patients[i]].iter().map(|s| (*s).clone()));
            }
        }
    }
    Ok(split)
}

/// Counts used for cohort tables.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CohortStats {
    pub patients: usize,
    pub samples: usize,
    pub per_label: [usize; NUM_LABELS],
    pub pa_samples: usize,
    pub ap_samples: usize,
    pub pa_patients: usize,
    pub ap_patients: usize,
}

impl CohortStats {
    pub fn label_count(&self, label: Label) -> usize {
        self.per_label[label.index()]
    }
}

pub fn cohort_stats(samples: &[SampleSet]) -> CohortStats {
    let mut stats = CohortStats::default();
    let mut patients = BTreeSet::new();
    let mut pa = BTreeSet::new();
    let mut ap = BTreeSet::new();
    for s in samples {
        stats.samples += 1;
        stats.per_label[s.target_label.index()] += 1;
        patients.insert(s.patient_id);
        match s.view {
            ViewPosition::PA => {
                stats.pa_samples += 1;
                pa.insert(s.patient_id);
            }
            ViewPosition::AP => {
                stats.ap_samples += 1;
                ap.insert(s.patient_id);
            }
        }
    }
    stats.patients = patients.len();
    stats.pa_patients = pa.len();
    stats.ap_patients = ap.len();
    stats
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_counts() {
        let g3 = group(1, 3, ViewPosition::PA);
        let w = build_windows(&g3).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].map(|r| r.followup_num), [0, 1, 2]);

        let g5 = group(1, 5, ViewPosition::PA);
        let w: Vec<[u32; 3]> = build_windows(&g5)
            .unwrap()
            .iter()
            .map(|w| w.map(|r| r.followup_num))
            .collect();
        assert_eq!(w, vec![[0, 1, 2], [1, 2, 3], [2, 3, 4]]);

        let g2 = group(9, 2, ViewPosition::PA);
        assert_eq!(
            build_windows(&g2).unwrap_err(),
            SampleError::TooFewRecords { patient_id: 9, records: 2 }
        );
    }

    /// Brute-force enumeration: every start index whose three successors exist.
    fn enumerate_windows(counts: &[u32]) -> usize {
        let mut total = 0;
        for &n in counts {
            for start in 0..n {
                if start + 2 < n {
                    total += 1;
                }
            }
        }
        total
    }

    #[test]
    fn window_fixture_matches_enumeration() {
        let counts = [3, 3, 4, 5, 7];
        let expected = enumerate_windows(&counts);
        assert_eq!(expected, 12);
        let groups: Vec<_> = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| group(i as u32 + 1, n, ViewPosition::PA))
            .collect();
        assert_eq!(build_samples(&groups).unwrap().len(), expected);
    }

    #[test]
    fn explosion_follows_third_record() {
        let g = PatientGroup {
            patient_id: 13,
            records: vec![
                record(13, 0, "Infiltration|Mass|Pneumothorax", ViewPosition::PA),
                record(13, 1, "Mass", ViewPosition::PA),
                record(13, 2, "Cardiomegaly|Infiltration", ViewPosition::PA),
            ],
        };
        let windows = build_windows(&g).unwrap();
        let mut next = 0;
        let samples = explode_multilabel(&windows[0], &mut next);
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].target_label.name(), "Cardiomegaly");
        assert_eq!(samples[1].target_label.name(), "Infiltration");
        assert_eq!(samples[0].images, samples[1].images);
        assert_eq!(samples[0].sample_id, 0);
        assert_eq!(samples[1].sample_id, 1);
        assert_eq!(next, 2);
        for s in &samples {
            assert!(s.original_third_labels.contains(s.target_label));
        }

        let single = PatientGroup {
            patient_id: 1,
            records: vec![
                record(1, 0, "No Finding", ViewPosition::AP),
                record(1, 1, "No Finding", ViewPosition::AP),
                record(1, 2, "Mass", ViewPosition::AP),
            ],
        };
        let s = explode_multilabel(&build_windows(&single).unwrap()[0], &mut next);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].target_label.name(), "Mass");

        let triple = PatientGroup {
            patient_id: 2,
            records: vec![
                record(2, 0, "Mass", ViewPosition::AP),
                record(2, 1, "Mass", ViewPosition::AP),
                record(2, 2, "Edema|Mass|Nodule", ViewPosition::AP),
            ],
        };
        assert_eq!(explode_multilabel(&build_windows(&triple).unwrap()[0], &mut next).len(), 3);
    }

    #[test]
    fn view_split_partitions() {
        let mut samples: Vec<_> = (0..5).map(|i| sample(i, 1, "Mass", ViewPosition::PA)).collect();
        samples.extend((5..8).map(|i| sample(i, 2, "Mass", ViewPosition::AP)));
        let (pa, ap) = split_by_view(samples);
        assert_eq!((pa.len(), ap.len()), (5, 3));

        let (pa, ap) = split_by_view((0..4).map(|i| sample(i, 1, "Mass", ViewPosition::PA)).collect());
        assert_eq!(pa.len(), 4);
        assert!(ap.is_empty());
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let samples: Vec<_> = (0..100).map(|i| sample(i, i as u32 + 1, "Mass", ViewPosition::PA)).collect();
        let s = split_train_test_val(&samples, 1, SplitMode::BySample).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.validation.len()), (70, 20, 10));

        let s = split_train_test_val(&samples[..10], 1, SplitMode::BySample).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.validation.len()), (7, 2, 1));

        assert_eq!(SplitRatios::default().cut(7), (4, 1, 2));
        assert_eq!(
            split_train_test_val(&[], 1, SplitMode::BySample).unwrap_err(),
            SampleError::EmptyInput
        );
    }

    #[test]
    fn split_is_deterministic() {
        let samples: Vec<_> = (0..37).map(|i| sample(i, (i / 3) as u32 + 1, "Mass", ViewPosition::PA)).collect();
        for mode in [SplitMode::BySample, SplitMode::ByPatient] {
            let a = split_train_test_val(&samples, 77, mode).unwrap();
            let b = split_train_test_val(&samples, 77, mode).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bad_ratios_rejected() {
        let samples = vec![sample(0, 1, "Mass", ViewPosition::PA)];
        let r = SplitRatios { train: 0.7, test: 0.2, validation: 0.2 };
        assert!(matches!(
            split_with_ratios(&samples, 0, SplitMode::BySample, r),
            Err(SampleError::BadRatios(_))
        ));
    }

    #[test]
    fn stats_counts() {
        assert_eq!(cohort_stats(&[]), CohortStats::default());
        let s = cohort_stats(&[
            sample(0, 1, "Mass", ViewPosition::PA),
            sample(1, 1, "Mass", ViewPosition::PA),
        ]);
        assert_eq!(s.label_count("Mass".parse().unwrap()), 2);
        assert_eq!((s.patients, s.samples, s.pa_samples, s.ap_samples), (1, 2, 2, 0));
    }

    fn arb_groups() -> impl Strategy<Value = Vec<PatientGroup>> {
        let labels = prop::sample::subsequence(
            vec!["Atelectasis", "Edema", "Mass", "Nodule", "Hernia"],
            1..4,
        );
        prop::collection::vec((3u32..8, labels, any::<bool>()), 1..12).prop_map(|specs| {
            specs
                .into_iter()
                .enumerate()
                .map(|(i, (n, labels, pa))| {
                    let view = if pa { ViewPosition::PA } else { ViewPosition::AP };
                    let pid = i as u32 + 1;
                    PatientGroup {
                        patient_id: pid,
                        records: (0..n).map(|f| record(pid, f, &labels.join("|"), view)).collect(),
                    }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn explosion_conserves_label_counts(groups in arb_groups()) {
            let samples = build_samples(&groups).unwrap();
            let expected: usize = groups
                .iter()
                .flat_map(|g| g.records[2..].iter().map(|r| r.labels.len()))
                .sum();
            prop_assert_eq!(samples.len(), expected);
            let ids: BTreeSet<u64> = samples.iter().map(|s| s.sample_id).collect();
            prop_assert_eq!(ids.len(), samples.len());
            for s in &samples {
                let g = groups.iter().find(|g| g.patient_id == s.patient_id).unwrap();
                let pos = g.records.iter().position(|r| r.followup_num == s.source_followups[0]).unwrap();
                prop_assert_eq!(g.records[pos + 1].followup_num, s.source_followups[1]);
                prop_assert_eq!(g.records[pos + 2].followup_num, s.source_followups[2]);
                prop_assert!(s.original_third_labels.contains(s.target_label));
            }
        }

        #[test]
        fn splits_partition_input(groups in arb_groups(), seed in any::<u64>(), by_patient in any::<bool>()) {
            let samples = build_samples(&groups).unwrap();
            let mode = if by_patient { SplitMode::ByPatient } else { SplitMode::BySample };
            let split = split_train_test_val(&samples, seed, mode).unwrap();
            let mut ids: Vec<u64> = split.iter().map(|(_, s)| s.sample_id).collect();
            ids.sort();
            prop_assert_eq!(ids, samples.iter().map(|s| s.sample_id).collect::<Vec<_>>());
            if mode == SplitMode::BySample {
                let n = samples.len() as f64;
                prop_assert!((split.train.len() as f64 - 0.7 * n).abs() <= 1.0);
                prop_assert!((split.test.len() as f64 - 0.2 * n).abs() <= 1.0);
            } else {
                let pats = |v: &[SampleSet]| v.iter().map(|s| s.patient_id).collect::<BTreeSet<_>>();
                let (a, b, c) = (pats(&split.train), pats(&split.test), pats(&split.validation));
                prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            }
        }

        #[test]
        fn view_split_is_exhaustive(groups in arb_groups()) {
            let samples = build_samples(&groups).unwrap();
            let n = samples.len();
            let (pa, ap) = split_by_view(samples);
            prop_assert_eq!(pa.len() + ap.len(), n);
            prop_assert!(pa.iter().all(|s| s.view == ViewPosition::PA));
            prop_assert!(ap.iter().all(|s| s.view == ViewPosition::AP));
        }
    }
}
