//! Synthetic follow-up cohorts: a bright disc on a noisy background whose
//! class is encoded only in how it changes across a patient's images.
//!
//! For the grow and shrink motifs the radius of the *last* image is drawn from
//! the same distribution for every class and earlier radii are derived from
//! it, so the image a single-image model sees is identically distributed
//! across classes while the first-to-last change separates them perfectly.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::auc_score;
use crate::imaging::{load_grayscale, ImageError};
use crate::metadata::{
    filter_consistent_view, filter_min_followups, group_patients, read_metadata_file, write_metadata, Gender,
    MetadataError, ViewPosition, XrayRecord,
};
use crate::samples::{build_samples, SampleError, SampleSet, WINDOW};
use crate::vocab::{Label, LabelSet, NUM_LABELS};

pub const METADATA_FILE: &str = "metadata.csv";
pub const IMAGES_DIR: &str = "images";
pub const TALLY_FILE: &str = "tally.csv";
pub const STAGES_FILE: &str = "stages.csv";
pub const SPEC_FILE: &str = "spec.json";

/// Geometry is specified for a 128-pixel canvas and scaled with the image.
const REFERENCE_SIZE: f64 = 128.0;
const BACKGROUND: f64 = 0.2;
const BLOB_CONTRAST: f64 = 0.6;
/// Intensity threshold of the area oracle.
pub const AREA_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic cohort spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: cannot encode image: {message}")]
    Encode { path: PathBuf, message: String },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Samples(#[from] SampleError),
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifKind {
    Grow,
    Shrink,
    Drift,
    Static,
}

impl MotifKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MotifKind::Grow => "grow",
            MotifKind::Shrink => "shrink",
            MotifKind::Drift => "drift",
            MotifKind::Static => "static",
        }
    }

    pub fn default_label(self) -> Label {
        let name = match self {
            MotifKind::Grow => "Mass",
            MotifKind::Shrink => "Nodule",
            MotifKind::Drift => "Infiltration",
            MotifKind::Static => "No Finding",
        };
        Label::parse(name).expect("vocabulary label")
    }
}

impl fmt::Display for MotifKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MotifKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grow" => Ok(MotifKind::Grow),
            "shrink" => Ok(MotifKind::Shrink),
            "drift" => Ok(MotifKind::Drift),
            "static" => Ok(MotifKind::Static),
            other => Err(format!("unknown motif {other:?} (grow, shrink, drift, static)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Motif {
    pub kind: MotifKind,
    pub label: Label,
}

impl Motif {
    pub fn new(kind: MotifKind) -> Motif {
        Motif {
            kind,
            label: kind.default_label(),
        }
    }
}

/// `grow` or `grow=Mass`.
impl FromStr for Motif {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('=') {
            None => Ok(Motif::new(s.trim().parse()?)),
            Some((kind, label)) => Ok(Motif {
                kind: kind.trim().parse()?,
                label: label.parse().map_err(|e| format!("{e}"))?,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub followups_per_patient: usize,
    /// Patients are assigned to classes round-robin.
    pub classes: Vec<Motif>,
    pub image_size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise_level: f64,
    pub seed: u64,
    /// Probability that a patient is PA (otherwise AP).
    pub view_mix: f64,
    /// Radius range of the last image, in 128-pixel units.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Radius change per follow-up (grow/shrink) or centre shift (drift).
    pub step: f64,
    /// Extra patients with only two images, removed by the follow-up filter.
    pub short_patients: usize,
    /// Extra patients alternating PA/AP, removed by the view filter.
    pub mixed_view_patients: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_patients: 200,
            followups_per_patient: 3,
            classes: vec![Motif::new(MotifKind::Grow), Motif::new(MotifKind::Shrink)],
            image_size: 128,
            noise_level: 0.05,
            seed: 0,
            view_mix: 1.0,
            radius_min: 14.0,
            radius_max: 30.0,
            step: 6.0,
            short_patients: 0,
            mixed_view_patients: 0,
        }
    }
}

impl SynthSpec {
    /// All four motifs with their default labels.
    pub fn four_motifs() -> Vec<Motif> {
        [MotifKind::Grow, MotifKind::Shrink, MotifKind::Drift, MotifKind::Static]
            .into_iter()
            .map(Motif::new)
            .collect()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Spec(m));
        if self.n_patients == 0 {
            return fail("n_patients must be at least 1".into());
        }
        if self.followups_per_patient < WINDOW {
            return fail(format!("followups_per_patient must be at least {WINDOW}"));
        }
        if self.classes.is_empty() {
            return fail("at least one class motif is required".into());
        }
        for (i, a) in self.classes.iter().enumerate() {
            if self.classes[..i].iter().any(|b| b.label == a.label) {
                return fail(format!("label {} is used by more than one motif", a.label.name()));
            }
        }
        if self.image_size < 16 {
            return fail(format!("image_size {} is too small", self.image_size));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return fail("noise_level must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.view_mix) {
            return fail("view_mix must be in [0, 1]".into());
        }
        if !(self.radius_min > 0.0 && self.radius_min < self.radius_max) || self.step < 0.0 {
            return fail("need 0 < radius_min < radius_max and step >= 0".into());
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.image_size as f64 / REFERENCE_SIZE
    }

    pub fn total_patients(&self) -> usize {
        self.n_patients + self.short_patients + self.mixed_view_patients
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PatientKind {
    Regular,
    Short,
    MixedView,
}

#[derive(Debug, Clone)]
struct PatientPlan {
    patient_id: u32,
    kind: PatientKind,
    motif: Motif,
    view: ViewPosition,
    records: usize,
}

fn plans(spec: &SynthSpec) -> Vec<PatientPlan> {
    let mut view_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    view_rng.set_stream(u64::MAX);
    (0..spec.total_patients())
        .map(|i| {
            let kind = if i < spec.n_patients {
                PatientKind::Regular
            } else if i < spec.n_patients + spec.short_patients {
                PatientKind::Short
            } else {
                PatientKind::MixedView
            };
            let view = if view_rng.random::<f64>() < spec.view_mix {
                ViewPosition::PA
            } else {
                ViewPosition::AP
            };
            PatientPlan {
                patient_id: i as u32 + 1,
                kind,
                motif: spec.classes[i % spec.classes.len()],
                view,
                records: if kind == PatientKind::Short {
                    WINDOW - 1
                } else {
                    spec.followups_per_patient
                },
            }
        })
        .collect()
}

/// Per-frame disc geometry (centre x, centre y, radius) in pixels.
fn trajectory(spec: &SynthSpec, motif: MotifKind, frames: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64, f64)> {
    let s = spec.scale();
    let size = spec.image_size as f64;
    let r_last = rng.random_range(spec.radius_min..spec.radius_max) * s;
    let margin = size * 0.3;
    let (cx, cy) = (rng.random_range(margin..size - margin), rng.random_range(margin..size - margin));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let last = (frames - 1) as f64;
    (0..frames)
        .map(|k| {
            let back = last - k as f64;
            match motif {
                MotifKind::Grow => (cx, cy, (r_last - spec.step * s * back).max(1.0)),
                MotifKind::Shrink => (cx, cy, r_last + spec.step * s * back),
                MotifKind::Drift => {
                    let d = spec.step * s * back;
                    (cx - d * angle.cos(), cy - d * angle.sin(), r_last)
                }
                MotifKind::Static => (cx, cy, r_last),
            }
        })
        .collect()
}

fn render(size: usize, (cx, cy, r): (f64, f64, f64), noise: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let edge = (size as f64 / REFERENCE_SIZE).max(1.0);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
        let disc = 1.0 / (1.0 + ((d - r) / edge).exp());
        let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
        let v = (BACKGROUND + BLOB_CONTRAST * disc + n).clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

/// Ground truth declared by the generator from its own patient plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub generated_patients: usize,
    pub images: usize,
    pub after_filter_1: usize,
    pub after_filter_2: usize,
    pub pa_patients: usize,
    pub pa_samples: usize,
    pub ap_patients: usize,
    pub ap_samples: usize,
    /// Expected samples per label after both filters, vocabulary order.
    pub per_label: Vec<usize>,
}

impl Tally {
    fn from_plans(plans: &[PatientPlan]) -> Tally {
        let mut t = Tally {
            generated_patients: plans.len(),
            images: plans.iter().map(|p| p.records).sum(),
            after_filter_1: 0,
            after_filter_2: 0,
            pa_patients: 0,
            pa_samples: 0,
            ap_patients: 0,
            ap_samples: 0,
            per_label: vec![0; NUM_LABELS],
        };
        for p in plans {
            if p.records < WINDOW {
                continue;
            }
            t.after_filter_1 += 1;
            if p.kind == PatientKind::MixedView {
                continue;
            }
            t.after_filter_2 += 1;
            // One single-label sample per window.
            let samples = p.records - WINDOW + 1;
            t.per_label[p.motif.label.index()] += samples;
            match p.view {
                ViewPosition::PA => {
                    t.pa_patients += 1;
                    t.pa_samples += samples;
                }
                ViewPosition::AP => {
                    t.ap_patients += 1;
                    t.ap_samples += samples;
                }
            }
        }
        t
    }

    pub fn expected_samples(&self, label: Label) -> usize {
        self.per_label[label.index()]
    }

    pub fn total_samples(&self) -> usize {
        self.per_label.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub dir: PathBuf,
    pub spec: SynthSpec,
    pub tally: Tally,
}

impl Cohort {
    pub fn metadata_path(&self) -> PathBuf {
        self.dir.join(METADATA_FILE)
    }

    pub fn images_dir(&self) -> PathBuf {
        self.dir.join(IMAGES_DIR)
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn image_name(patient_id: u32, followup: usize) -> String {
    format!("{patient_id:08}_{followup:03}.png")
}

fn patient_records(spec: &SynthSpec, p: &PatientPlan, rng: &mut ChaCha8Rng) -> Vec<XrayRecord> {
    let age = rng.random_range(20..80);
    let gender = if rng.random::<bool>() { Gender::M } else { Gender::F };
    let size = spec.image_size.to_string();
    (0..p.records)
        .map(|k| {
            let view = match p.kind {
                PatientKind::MixedView if k % 2 == 1 => match p.view {
                    ViewPosition::PA => ViewPosition::AP,
                    ViewPosition::AP => ViewPosition::PA,
                },
                _ => p.view,
            };
            XrayRecord {
                image_index: image_name(p.patient_id, k),
                patient_id: p.patient_id,
                followup_num: k as u32,
                labels: LabelSet::single(p.motif.label),
                view,
                age,
                gender,
                extra: vec![
                    ("OriginalImage[Width".into(), size.clone()),
                    ("Height]".into(), size.clone()),
                    ("OriginalImagePixelSpacing[x".into(), "0.143".into()),
                    ("y]".into(), "0.143".into()),
                ],
                image_path: None,
            }
        })
        .collect()
}

/// Writes `metadata.csv`, `images/*.png`, `tally.csv`, `stages.csv` and
/// `spec.json` under `out_dir`. Every byte is a function of the spec.
pub fn generate_cohort(spec: &SynthSpec, out_dir: &Path) -> Result<Cohort, SynthError> {
    spec.validate()?;
    let images_dir = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    let plans = plans(spec);

    let records: Vec<Vec<XrayRecord>> = plans
        .par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(u64::from(p.patient_id));
            let records = patient_records(spec, p, &mut rng);
            let path_of = trajectory(spec, p.motif.kind, p.records, &mut rng);
            for (r, geom) in records.iter().zip(path_of) {
                let img = render(spec.image_size, geom, spec.noise_level, &mut rng);
                let path = images_dir.join(&r.image_index);
                img.save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| SynthError::Encode {
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
            }
            Ok(records)
        })
        .collect::<Result<_, SynthError>>()?;
    let records: Vec<XrayRecord> = records.into_iter().flatten().collect();

    let meta_path = out_dir.join(METADATA_FILE);
    let f = fs::File::create(&meta_path).map_err(io_err(&meta_path))?;
    write_metadata(&records, io::BufWriter::new(f))?;

    let tally = Tally::from_plans(&plans);
    let mut text = String::from("label,expected_samples\n");
    for m in &spec.classes {
        text.push_str(&format!("{},{}\n", m.label.name(), tally.expected_samples(m.label)));
    }
    let tally_path = out_dir.join(TALLY_FILE);
    fs::write(&tally_path, text).map_err(io_err(&tally_path))?;

    let stages = format!(
        "stage,count\ngenerated_patients,{}\nimages,{}\nafter_filter_1,{}\nafter_filter_2,{}\npa_patients,{}\npa_samples,{}\nap_patients,{}\nap_samples,{}\n",
        tally.generated_patients,
        tally.images,
        tally.after_filter_1,
        tally.after_filter_2,
        tally.pa_patients,
        tally.pa_samples,
        tally.ap_patients,
        tally.ap_samples
    );
    let stages_path = out_dir.join(STAGES_FILE);
    fs::write(&stages_path, stages).map_err(io_err(&stages_path))?;

    let spec_path = out_dir.join(SPEC_FILE);
    let json = serde_json::to_string_pretty(spec).expect("spec serializes") + "\n";
    fs::write(&spec_path, json).map_err(io_err(&spec_path))?;

    Ok(Cohort {
        dir: out_dir.to_path_buf(),
        spec: spec.clone(),
        tally,
    })
}

/// Reads a generated cohort's spec back and recomputes its tally.
pub fn open_cohort(dir: &Path) -> Result<Cohort, SynthError> {
    let spec_path = dir.join(SPEC_FILE);
    let text = fs::read_to_string(&spec_path).map_err(io_err(&spec_path))?;
    let spec: SynthSpec =
        serde_json::from_str(&text).map_err(|e| SynthError::Spec(format!("{}: {e}", spec_path.display())))?;
    spec.validate()?;
    let tally = Tally::from_plans(&plans(&spec));
    Ok(Cohort {
        dir: dir.to_path_buf(),
        spec,
        tally,
    })
}

/// Metadata → groups → both filters → samples, as the real pipeline does.
pub fn cohort_samples(cohort: &Cohort) -> Result<Vec<SampleSet>, SynthError> {
    let records = read_metadata_file(&cohort.metadata_path())?;
    let groups = filter_consistent_view(filter_min_followups(group_patients(records)?));
    Ok(build_samples(&groups)?)
}

/// Number of pixels brighter than [`AREA_THRESHOLD`].
pub fn blob_area(path: &Path) -> Result<usize, ImageError> {
    let raw = load_grayscale(path)?;
    let cut = AREA_THRESHOLD * f64::from(raw.max_value);
    Ok(raw.pixels.iter().filter(|&&p| f64::from(p) > cut).count())
}

/// AUCs of two hand-made scores for separating the first motif's label from
/// every other sample: the blob area of the last image of each window, and
/// the area change from the first image to the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleAucs {
    pub single_frame_auc: Option<f64>,
    pub delta_feature_auc: Option<f64>,
}

pub fn oracle_separability(cohort: &Cohort) -> Result<OracleAucs, SynthError> {
    let samples = cohort_samples(cohort)?;
    let positive = cohort.spec.classes[0].label;
    let images = cohort.images_dir();
    let areas: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|s| {
            let first = blob_area(&images.join(&s.images[0]))? as f64;
            let last = blob_area(&images.join(&s.images[WINDOW - 1]))? as f64;
            Ok((last, last - first))
        })
        .collect::<Result<_, ImageError>>()?;
    let truth: Vec<bool> = samples.iter().map(|s| s.target_label == positive).collect();
    let single: Vec<f64> = areas.iter().map(|a| a.0).collect();
    let delta: Vec<f64> = areas.iter().map(|a| a.1).collect();
    Ok(OracleAucs {
        single_frame_auc: auc_score(&single, &truth).expect("equal lengths"),
        delta_feature_auc: auc_score(&delta, &truth).expect("equal lengths"),
    })
}
