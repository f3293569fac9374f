//! Model construction: one shared frozen backbone applied to each follow-up
//! image, followed by the trainable head.

use std::fmt;

use ndarray::{Array2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imaging::{ImageTensor, TripletBatch, INPUT_SIZE};
use crate::metadata::ViewPosition;
use crate::nn::head::{Head, SequenceMode};
use crate::nn::ops::FeatureMap;
use crate::nn::{Backbone, BackboneKind};
use crate::vocab::NUM_LABELS;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("unknown backbone {0:?} (expected densenet169, resnet50v2, mobilenetv2 or tiny)")]
    UnknownBackbone(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub fn parse_backbone(name: &str) -> Result<BackboneKind, ModelError> {
    name.parse().map_err(ModelError::UnknownBackbone)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub use_lstm: bool,
    pub lstm_units: usize,
    pub lstm_sequence_mode: SequenceMode,
    pub dropout_rate: f64,
    pub input_size: usize,
    pub channels: usize,
    pub num_outputs: usize,
    pub branches: usize,
    pub pretrained: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::Tiny,
            use_lstm: false,
            lstm_units: 50,
            lstm_sequence_mode: SequenceMode::PerImage,
            dropout_rate: 0.2,
            input_size: INPUT_SIZE,
            channels: 1,
            num_outputs: NUM_LABELS,
            branches: 3,
            pretrained: false,
        }
    }
}

impl ModelConfig {
    pub fn new(backbone: BackboneKind, use_lstm: bool, branches: usize) -> ModelConfig {
        ModelConfig {
            backbone,
            use_lstm,
            branches,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.use_lstm && self.lstm_units == 0 {
            return fail("lstm_units must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.num_outputs != NUM_LABELS {
            return fail(format!("num_outputs must equal the {NUM_LABELS}-label vocabulary"));
        }
        if ![1, 3].contains(&self.branches) {
            return fail(format!("branches must be 1 or 3, got {}", self.branches));
        }
        if self.branches == 1 && self.use_lstm {
            return fail("the single-image model has no LSTM".into());
        }
        if ![1, 3].contains(&self.channels) {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.pretrained {
            return fail("pretrained weights are not supported; backbones are randomly initialized".into());
        }
        let min_size = if self.backbone == BackboneKind::Tiny { 8 } else { 32 };
        if self.input_size < min_size {
            return fail(format!("input_size {} too small for {}", self.input_size, self.backbone));
        }
        Ok(())
    }
}

/// What a model is, for tables and file names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub view: String,
    pub backbone: BackboneKind,
    pub use_lstm: bool,
    pub branches: usize,
}

impl ModelDescriptor {
    /// `{view}_{backbone}_{lstm|nolstm}_{branches}img`
    pub fn stem(&self) -> String {
        format!(
            "{}_{}_{}_{}img",
            self.view,
            self.backbone,
            if self.use_lstm { "lstm" } else { "nolstm" },
            self.branches
        )
    }
}

impl fmt::Display for ModelDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.stem())
    }
}

/// View label for a set of samples: "PA", "AP", "mixed" or "none".
pub fn view_label<'a>(views: impl IntoIterator<Item = &'a ViewPosition>) -> String {
    let mut it = views.into_iter();
    match it.next() {
        None => "none".into(),
        Some(first) => {
            if it.all(|v| v == first) {
                first.to_string()
            } else {
                "mixed".into()
            }
        }
    }
}

#[derive(Debug)]
pub struct BuiltModel {
    pub config: ModelConfig,
    pub seed: u64,
    pub backbone: Backbone,
    pub head: Head,
    /// View of the data the model was trained on, once trained.
    pub trained_view: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub frozen: usize,
    pub trainable: usize,
    pub total: usize,
}

/// Stream offset separating head initialization from backbone initialization.
const HEAD_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

fn build(config: &ModelConfig, seed: u64) -> Result<BuiltModel, ModelError> {
    config.validate()?;
    let backbone = Backbone::new(config.backbone, config.channels, config.input_size, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(HEAD_SEED_OFFSET));
    let head = Head::new(
        &mut rng,
        config.branches,
        backbone.feature_dim(),
        config.use_lstm.then_some(config.lstm_units),
        config.lstm_sequence_mode,
        config.dropout_rate,
        config.num_outputs,
    );
    Ok(BuiltModel {
        config: config.clone(),
        seed,
        backbone,
        head,
        trained_view: None,
    })
}

pub fn build_backbone(kind: &str, channels: usize, seed: u64) -> Result<Backbone, ModelError> {
    let kind = parse_backbone(kind)?;
    Ok(Backbone::new(kind, channels, INPUT_SIZE, seed))
}

/// The three-branch model. The backbone instance is shared by all three
/// follow-up positions and all of its parameters are frozen.
pub fn build_sequence_model(config: &ModelConfig, seed: u64) -> Result<BuiltModel, ModelError> {
    if config.branches != 3 {
        return Err(ModelError::Config(format!(
            "sequence model needs 3 branches, got {}",
            config.branches
        )));
    }
    build(config, seed)
}

/// The single-image baseline: backbone → flatten → dropout → dense-15.
pub fn build_single_image_model(config: &ModelConfig, seed: u64) -> Result<BuiltModel, ModelError> {
    if config.branches != 1 {
        return Err(ModelError::Config(format!(
            "single-image model needs 1 branch, got {}",
            config.branches
        )));
    }
    build(config, seed)
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<BuiltModel, ModelError> {
    match config.branches {
        1 => build_single_image_model(config, seed),
        _ => build_sequence_model(config, seed),
    }
}

pub fn count_parameters(model: &BuiltModel) -> ParameterCounts {
    let frozen = model.backbone.num_parameters();
    let trainable = model.head.num_parameters();
    ParameterCounts {
        frozen,
        trainable,
        total: frozen + trainable,
    }
}

impl BuiltModel {
    pub fn count_parameters(&self) -> ParameterCounts {
        count_parameters(self)
    }

    pub fn descriptor(&self, view: impl Into<String>) -> ModelDescriptor {
        ModelDescriptor {
            view: view.into(),
            backbone: self.config.backbone,
            use_lstm: self.config.use_lstm,
            branches: self.config.branches,
        }
    }

    /// Which follow-up positions (0-based) feed the head.
    pub fn positions(&self) -> &'static [usize] {
        if self.config.branches == 1 {
            &[2]
        } else {
            &[0, 1, 2]
        }
    }

    /// Flattened backbone features of each image, one row per image.
    pub fn image_features(&self, images: &[&ImageTensor]) -> Array2<f64> {
        let dim = self.backbone.feature_dim();
        let rows: Vec<Vec<f32>> = images.par_iter().map(|img| self.backbone.extract(img)).collect();
        let mut out = Array2::<f64>::zeros((images.len(), dim));
        for (mut row, feats) in out.rows_mut().into_iter().zip(rows) {
            row.iter_mut().zip(feats).for_each(|(d, s)| *d = f64::from(s));
        }
        out
    }

    fn stack_features(&self, stack: ArrayView3<f32>) -> Vec<f32> {
        let (h, w, c) = stack.dim();
        let data: Vec<f32> = stack.iter().copied().collect();
        self.backbone.forward_map(FeatureMap::new(h, w, c, data)).flatten()
    }

    /// Per-branch feature matrices for a batch, in head input order.
    pub fn batch_features(&self, batch: &TripletBatch) -> Result<Vec<Array2<f64>>, ModelError> {
        let (size, channels) = (self.config.input_size, self.config.channels);
        let dim = self.backbone.feature_dim();
        let positions = batch.positions();
        self.positions()
            .iter()
            .map(|&p| {
                let stack = positions[p];
                let shape = stack.shape();
                if shape[1] != size || shape[2] != size || shape[3] != channels {
                    return Err(ModelError::ShapeMismatch(format!(
                        "batch images are {}x{}x{}, model expects {size}x{size}x{channels}",
                        shape[1], shape[2], shape[3]
                    )));
                }
                let rows: Vec<Vec<f32>> = (0..shape[0])
                    .into_par_iter()
                    .map(|i| self.stack_features(stack.index_axis(Axis(0), i)))
                    .collect();
                let mut out = Array2::<f64>::zeros((shape[0], dim));
                for (mut row, feats) in out.rows_mut().into_iter().zip(rows) {
                    row.iter_mut().zip(feats).for_each(|(d, s)| *d = f64::from(s));
                }
                Ok(out)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny_config(use_lstm: bool, branches: usize) -> ModelConfig {
        ModelConfig {
            input_size: 32,
            ..ModelConfig::new(BackboneKind::Tiny, use_lstm, branches)
        }
    }

    fn random_batch(n: usize, size: usize, seed: u64) -> TripletBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stack = || Array4::from_shape_simple_fn((n, size, size, 1), || rand::Rng::random::<f32>(&mut rng));
        TripletBatch {
            first: stack(),
            second: stack(),
            third: stack(),
            targets: Array2::zeros((n, NUM_LABELS)),
            sample_ids: (0..n as u64).collect(),
        }
    }

    #[test]
    fn unknown_backbone_is_rejected() {
        assert_eq!(
            build_backbone("vgg16", 1, 0).unwrap_err(),
            ModelError::UnknownBackbone("vgg16".into())
        );
        assert!(build_backbone("tiny", 1, 0).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(false, 3);
        assert!(c.validate().is_ok());
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(true, 3);
        c.lstm_units = 0;
        assert!(c.validate().is_err());
        assert!(build_single_image_model(&tiny_config(true, 1), 0).is_err());
        assert!(build_sequence_model(&tiny_config(false, 1), 0).is_err());
        let mut c = tiny_config(false, 3);
        c.pretrained = true;
        assert!(matches!(build_model(&c, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn outputs_are_probabilities() {
        for (lstm, branches) in [(false, 3), (true, 3), (false, 1)] {
            let model = build_model(&tiny_config(lstm, branches), 1).unwrap();
            let batch = random_batch(4, 32, 2);
            let probs = model.head.predict(&model.batch_features(&batch).unwrap());
            assert_eq!(probs.dim(), (4, 15));
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn lstm_parameter_count_matches_formula() {
        let model = build_model(&tiny_config(true, 3), 0).unwrap();
        let d = model.backbone.feature_dim();
        let lstm = model.head.lstm.as_ref().unwrap().num_parameters();
        assert_eq!(lstm, 4 * (50 * (d + 50) + 50));
        let counts = model.count_parameters();
        assert_eq!(counts.trainable, lstm + 50 * 15 + 15);
    }

    #[test]
    fn freezing_partition() {
        let three = build_model(&tiny_config(false, 3), 0).unwrap();
        let one = build_model(&tiny_config(false, 1), 0).unwrap();
        let (c3, c1) = (three.count_parameters(), one.count_parameters());
        assert_eq!(c3.total, c3.frozen + c3.trainable);
        assert_eq!(c3.frozen, three.backbone.num_parameters());
        let d = three.backbone.feature_dim();
        assert_eq!(c3.trainable, 3 * d * 15 + 15);
        assert_eq!(c1.trainable, d * 15 + 15);
        assert_eq!(c1.frozen, c3.frozen);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&tiny_config(true, 3), 11).unwrap();
        let b = build_model(&tiny_config(true, 3), 11).unwrap();
        assert_eq!(a.backbone.digest(), b.backbone.digest());
        assert_eq!(a.head, b.head);
        let c = build_model(&tiny_config(true, 3), 12).unwrap();
        assert_ne!(a.head, c.head);
    }

    #[test]
    fn shared_backbone_gives_identical_branch_features() {
        let model = build_model(&tiny_config(false, 3), 3).unwrap();
        let mut batch = random_batch(2, 32, 5);
        batch.second = batch.first.clone();
        batch.third = batch.first.clone();
        let f = model.batch_features(&batch).unwrap();
        assert_eq!(f[0], f[1]);
        assert_eq!(f[1], f[2]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = build_model(&tiny_config(false, 3), 3).unwrap();
        let batch = random_batch(1, 16, 5);
        assert!(matches!(model.batch_features(&batch), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn descriptor_stem() {
        let model = build_model(&tiny_config(true, 3), 0).unwrap();
        assert_eq!(model.descriptor("PA").stem(), "PA_tiny_lstm_3img");
        assert_eq!(view_label(&[ViewPosition::AP, ViewPosition::AP]), "AP");
        assert_eq!(view_label(&[ViewPosition::AP, ViewPosition::PA]), "mixed");
    }
}
