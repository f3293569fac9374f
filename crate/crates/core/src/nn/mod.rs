//! Neural-network pieces: frozen convolutional backbones and the trainable
//! head.

pub mod backbones;
pub mod head;
pub mod ops;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use backbones::BackboneKind;
use backbones::{DenseNet, MobileNetV2, Network, ResNet50V2, Tiny};
use ops::{FeatureMap, NamedTensor, ParamStore};

use crate::imaging::ImageTensor;

/// A headless CNN with randomly initialized, permanently frozen weights.
pub struct Backbone {
    kind: BackboneKind,
    channels: usize,
    input_size: usize,
    store: ParamStore,
    net: Box<dyn Network>,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("kind", &self.kind)
            .field("channels", &self.channels)
            .field("input_size", &self.input_size)
            .field("parameters", &self.num_parameters())
            .finish()
    }
}

impl Backbone {
    /// Builds `kind` for `input_size`² × `channels` inputs. Weights are drawn
    /// from a ChaCha8 stream seeded with `seed` (Glorot-uniform kernels, zero
    /// biases, identity batch-norm statistics).
    pub fn new(kind: BackboneKind, channels: usize, input_size: usize, seed: u64) -> Backbone {
        let mut store = ParamStore::new(ChaCha8Rng::seed_from_u64(seed));
        let net: Box<dyn Network> = match kind {
            BackboneKind::DenseNet169 => Box::new(DenseNet::new_169(&mut store, channels)),
            BackboneKind::ResNet50V2 => Box::new(ResNet50V2::new(&mut store, channels)),
            BackboneKind::MobileNetV2 => Box::new(MobileNetV2::new(&mut store, channels)),
            BackboneKind::Tiny => Box::new(Tiny::new(&mut store, channels)),
        };
        Backbone {
            kind,
            channels,
            input_size,
            store,
            net,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// (h, w, c) of the spatial feature map.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.net.output_shape(self.input_size)
    }

    /// Length of the flattened feature vector.
    pub fn feature_dim(&self) -> usize {
        let (h, w, c) = self.output_shape();
        h * w * c
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        self.store.tensors()
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        self.store.tensors_mut()
    }

    pub fn forward_map(&self, x: FeatureMap) -> FeatureMap {
        self.net.forward(&self.store, x)
    }

    /// Flattened features of one image.
    pub fn extract(&self, image: &ImageTensor) -> Vec<f32> {
        assert_eq!(
            (image.size, image.channels),
            (self.input_size, self.channels),
            "image does not match backbone input"
        );
        let x = FeatureMap::new(image.size, image.size, image.channels, image.data.clone());
        self.forward_map(x).flatten()
    }

    /// SHA-256 over every parameter name, shape and value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in self.store.tensors() {
            h.update(t.name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
