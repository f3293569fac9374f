//! End-to-end workflow stages driven by a TOML config: preprocess,
//! build-samples, train, evaluate and synth. Every stage reads and writes
//! files under the work directory so each can be rerun on its own.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::eval::{evaluate_model, render_report, EvalError, EvalReport, RenderedFiles};
use crate::imaging::{DirectoryImageSource, ImageError, TensorCache};
use crate::manifest::{read_manifest, write_manifest, ManifestError};
use crate::metadata::{
    filter_consistent_view, filter_min_followups, group_patients_by, read_metadata_file, write_metadata,
    MetadataError, PatientGroup, RecordOrder, ViewPosition,
};
use crate::model::{build_model, BuiltModel, ModelConfig, ModelDescriptor, ModelError, ParameterCounts};
use crate::nn::BackboneKind;
use crate::samples::{
    build_samples, split_by_view, split_with_ratios, DatasetSplit, SampleError, SampleSet, SplitMode, SplitRatios,
};
use crate::synth::{generate_cohort, Cohort, SynthError, SynthSpec};
use crate::train::{train_and_save, TrainConfig, TrainError, TrainHistory};

pub const COHORT_FILE: &str = "cohort.csv";
pub const MODELS_DIR: &str = "models";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("input not found: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{0}")]
    Config(String),
    #[error("checkpoint {checkpoint} was trained on {trained}, but {requested} data was requested")]
    ViewMismatch {
        checkpoint: PathBuf,
        trained: ModelDescriptor,
        requested: ModelDescriptor,
    },
    #[error("the {view} test partition is empty")]
    EmptyTestSplit { view: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Samples(#[from] SampleError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    /// Short machine-readable category, printed as `error[kind]: ...`.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::MissingInput(_) => "missing-input",
            PipelineError::Config(_) => "config",
            PipelineError::ViewMismatch { .. } => "view-mismatch",
            PipelineError::EmptyTestSplit { .. } => "empty-split",
            PipelineError::Io { .. } => "io",
            PipelineError::Metadata(_) => "metadata",
            PipelineError::Samples(_) => "samples",
            PipelineError::Manifest(_) => "manifest",
            PipelineError::Image(_) => "image",
            PipelineError::Model(_) => "model",
            PipelineError::Train(TrainError::NumericalError { .. }) => "numerical",
            PipelineError::Train(_) => "train",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Eval(_) => "eval",
            PipelineError::Synth(_) => "synth",
        }
    }

    /// 2 for missing inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::MissingInput(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingInput(path.to_path_buf()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub metadata: PathBuf,
    pub image_root: PathBuf,
    pub work_dir: PathBuf,
    /// Directory for cached resized tensors; none when unset.
    pub tensor_cache: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            metadata: PathBuf::from("Data_Entry_2017.csv"),
            image_root: PathBuf::from("images"),
            work_dir: PathBuf::from("work"),
            tensor_cache: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub order_by: RecordOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub train: f64,
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let r = SplitRatios::default();
        SplitConfig {
            mode: SplitMode::BySample,
            train: r.train,
            test: r.test,
            validation: r.validation,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            test: self.test,
            validation: self.validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Relative paths are taken under the work directory.
    pub output_dir: PathBuf,
    pub batch_size: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            output_dir: PathBuf::from("reports"),
            batch_size: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds the split, model initialization, training and synthesis.
    pub seed: u64,
    pub paths: PathsConfig,
    pub filter: FilterConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig, PipelineError> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig, PipelineError> {
        require(path)?;
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.split
            .ratios()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.model
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.training
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.evaluation.batch_size == 0 {
            return Err(PipelineError::Config("evaluation.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn work_dir(&self) -> &Path {
        &self.paths.work_dir
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.work_dir().join(COHORT_FILE)
    }

    pub fn manifest_path(&self, view: ViewPosition) -> PathBuf {
        self.work_dir().join(format!("manifest_{}.csv", view.as_str().to_lowercase()))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.work_dir().join(MODELS_DIR)
    }

    pub fn checkpoint_path(&self, descriptor: &ModelDescriptor) -> PathBuf {
        self.models_dir().join(format!("{}.ckpt", descriptor.stem()))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.work_dir().join(&self.evaluation.output_dir)
    }

    fn image_source(&self) -> Result<DirectoryImageSource, PipelineError> {
        require(&self.paths.image_root)?;
        let mut source =
            DirectoryImageSource::new(&self.paths.image_root, self.model.channels)?.with_size(self.model.input_size);
        if let Some(dir) = &self.paths.tensor_cache {
            source = source.with_cache(TensorCache::new(dir));
        }
        Ok(source)
    }
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PreprocessSummary {
    pub records: usize,
    pub patients: usize,
    pub after_filter_1: usize,
    pub after_filter_2: usize,
}

/// parse → group → Filter 1 (≥ 3 records) → Filter 2 (single view); writes
/// the surviving records to `work_dir/cohort.csv`.
pub fn cmd_preprocess(config: &PipelineConfig) -> Result<PreprocessSummary, PipelineError> {
    let (summary, groups) = filtered_groups(config)?;
    ensure_dir(config.work_dir())?;
    let records: Vec<_> = groups.into_iter().flat_map(|g| g.records).collect();
    let path = config.cohort_path();
    let f = fs::File::create(&path).map_err(io_err(&path))?;
    write_metadata(&records, io::BufWriter::new(f))?;
    Ok(summary)
}

fn filtered_groups(config: &PipelineConfig) -> Result<(PreprocessSummary, Vec<PatientGroup>), PipelineError> {
    require(&config.paths.metadata)?;
    let records = read_metadata_file(&config.paths.metadata)?;
    let n_records = records.len();
    let groups = group_patients_by(records, config.filter.order_by)?;
    let patients = groups.len();
    let groups = filter_min_followups(groups);
    let after_filter_1 = groups.len();
    let groups = filter_consistent_view(groups);
    Ok((
        PreprocessSummary {
            records: n_records,
            patients,
            after_filter_1,
            after_filter_2: groups.len(),
        },
        groups,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ViewCounts {
    pub patients: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub pa: ViewCounts,
    pub ap: ViewCounts,
}

fn view_counts(samples: &[SampleSet]) -> ViewCounts {
    let mut patients: Vec<u32> = samples.iter().map(|s| s.patient_id).collect();
    patients.sort_unstable();
    patients.dedup();
    ViewCounts {
        patients: patients.len(),
        samples: samples.len(),
    }
}

/// Windows, explosion, view split and train/test/validation split of the
/// preprocessed cohort; writes `manifest_pa.csv` and `manifest_ap.csv`.
pub fn cmd_build_samples(config: &PipelineConfig) -> Result<BuildSummary, PipelineError> {
    let cohort = config.cohort_path();
    require(&cohort)?;
    let groups = group_patients_by(read_metadata_file(&cohort)?, config.filter.order_by)?;
    let (pa, ap) = split_by_view(build_samples(&groups)?);
    let summary = BuildSummary {
        pa: view_counts(&pa),
        ap: view_counts(&ap),
    };
    for (view, samples) in [(ViewPosition::PA, pa), (ViewPosition::AP, ap)] {
        let split = if samples.is_empty() {
            DatasetSplit::empty(config.seed, config.split.mode, config.split.ratios())
        } else {
            split_with_ratios(&samples, config.seed, config.split.mode, config.split.ratios())?
        };
        write_manifest(&split, &config.manifest_path(view))?;
    }
    Ok(summary)
}

/// Command-line overrides for one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOptions {
    pub view: Option<ViewPosition>,
    pub backbone: Option<BackboneKind>,
    pub use_lstm: Option<bool>,
    pub branches: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub descriptor: ModelDescriptor,
    pub parameters: ParameterCounts,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_validation_loss: Option<f64>,
}

pub fn model_config_for(config: &PipelineConfig, options: &TrainOptions) -> ModelConfig {
    let mut m = config.model.clone();
    if let Some(b) = options.backbone {
        m.backbone = b;
    }
    if let Some(l) = options.use_lstm {
        m.use_lstm = l;
    }
    if let Some(b) = options.branches {
        m.branches = b;
    }
    m
}

/// Trains one model on a view's train partition and writes
/// `models/{stem}.ckpt` with its `.history.json` and `.log.jsonl`.
pub fn cmd_train(config: &PipelineConfig, options: &TrainOptions) -> Result<TrainSummary, PipelineError> {
    let view = options.view.unwrap_or(ViewPosition::PA);
    let model_config = model_config_for(config, options);
    let mut model = build_model(&model_config, config.seed)?;
    let manifest = config.manifest_path(view);
    require(&manifest)?;
    let split = read_manifest(&manifest)?;
    let source = config.image_source()?;
    ensure_dir(&config.models_dir())?;
    let descriptor = model.descriptor(view.as_str());
    let checkpoint = config.checkpoint_path(&descriptor);
    let training = TrainConfig {
        seed: config.seed,
        ..config.training.clone()
    };
    let history = train_and_save(&mut model, &split.train, &split.validation, &source, &training, &checkpoint)?;
    let last = history.epochs.last().expect("at least one epoch");
    Ok(TrainSummary {
        checkpoint,
        descriptor: history.descriptor.clone(),
        parameters: model.count_parameters(),
        epochs: history.len(),
        final_train_loss: last.train_loss,
        final_validation_loss: last.validation_loss,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub reports: Vec<EvalReport>,
    pub files: RenderedFiles,
}

/// Checkpoints under `work_dir/models`, sorted by name.
pub fn list_checkpoints(config: &PipelineConfig) -> Result<Vec<PathBuf>, PipelineError> {
    let dir = config.models_dir();
    require(&dir)?;
    let mut out: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    out.sort();
    Ok(out)
}

fn check_view(model: &BuiltModel, checkpoint: &Path, view: ViewPosition) -> Result<(), PipelineError> {
    match model.trained_view.as_deref() {
        Some(trained) if trained != view.as_str() => Err(PipelineError::ViewMismatch {
            checkpoint: checkpoint.to_path_buf(),
            trained: model.descriptor(trained),
            requested: model.descriptor(view.as_str()),
        }),
        _ => Ok(()),
    }
}

/// Evaluates each checkpoint on the test partition of its view (or of
/// `view`, which must then match the training view) and renders tables and
/// plots into the reports directory.
pub fn cmd_evaluate(
    config: &PipelineConfig,
    checkpoints: &[PathBuf],
    view: Option<ViewPosition>,
) -> Result<EvaluateSummary, PipelineError> {
    let checkpoints = if checkpoints.is_empty() {
        list_checkpoints(config)?
    } else {
        checkpoints.to_vec()
    };
    if checkpoints.is_empty() {
        return Err(PipelineError::MissingInput(config.models_dir().join("*.ckpt")));
    }
    let source = config.image_source()?;
    let mut reports = Vec::new();
    let mut histories = Vec::new();
    for ckpt in &checkpoints {
        require(ckpt)?;
        let model = load_checkpoint(ckpt)?;
        let trained = model.trained_view.as_deref().and_then(|v| v.parse::<ViewPosition>().ok());
        let view = match view {
            Some(v) => {
                check_view(&model, ckpt, v)?;
                v
            }
            None => trained.unwrap_or(ViewPosition::PA),
        };
        let manifest = config.manifest_path(view);
        require(&manifest)?;
        let split = read_manifest(&manifest)?;
        if split.test.is_empty() {
            return Err(PipelineError::EmptyTestSplit {
                view: view.as_str().into(),
            });
        }
        reports.push(evaluate_model(&model, &split.test, &source, config.evaluation.batch_size)?);
        let history = ckpt.with_extension("history.json");
        if history.exists() {
            histories.push(TrainHistory::load(&history)?);
        }
    }
    let files = render_report(&reports, &histories, &config.reports_dir())?;
    Ok(EvaluateSummary { reports, files })
}

/// Generates a synthetic cohort (default location `work_dir/synth`).
pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path) -> Result<Cohort, PipelineError> {
    Ok(generate_cohort(spec, out_dir)?)
}

/// A config pointing at a generated cohort.
pub fn config_for_cohort(cohort: &Cohort, work_dir: &Path) -> PipelineConfig {
    PipelineConfig {
        seed: cohort.spec.seed,
        paths: PathsConfig {
            metadata: cohort.metadata_path(),
            image_root: cohort.images_dir(),
            work_dir: work_dir.to_path_buf(),
            tensor_cache: None,
        },
        ..PipelineConfig::default()
    }
}
