//! The trainable classification head: optional LSTM over the branch feature
//! vectors, dropout, and a sigmoid dense output layer. Forward and backward
//! passes are written out by hand; only head parameters ever receive
//! gradients.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// How branch features are fed to the LSTM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// One time step per image, in follow-up order.
    #[default]
    PerImage,
    /// The concatenated feature vector as a single time step.
    ConcatFirst,
}

impl std::str::FromStr for SequenceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_image" | "per-image" => Ok(SequenceMode::PerImage),
            "concat_first" | "concat-first" => Ok(SequenceMode::ConcatFirst),
            other => Err(format!("unknown LSTM sequence mode {other:?}")),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Keeps probabilities strictly inside (0, 1) even when the logistic
/// saturates in floating point.
pub const PROBABILITY_MARGIN: f64 = 1e-15;

pub fn probability(z: f64) -> f64 {
    sigmoid(z).clamp(PROBABILITY_MARGIN, 1.0 - PROBABILITY_MARGIN)
}

fn glorot_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

/// Matrix with orthonormal rows (or columns, whichever is shorter), via
/// Gram–Schmidt on a Gaussian matrix.
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut q = Array2::from_shape_simple_fn((tall, short), || StandardNormal.sample(rng));
    for j in 0..short {
        for k in 0..j {
            let dot: f64 = q.column(j).dot(&q.column(k));
            let qk = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-dot, &qk);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    if rows < cols {
        q.reversed_axes().as_standard_layout().into_owned()
    } else {
        q
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// (inputs, outputs)
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn new(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Dense {
        Dense {
            weight: glorot_uniform(rng, inputs, outputs),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// LSTM with tanh cell activation and sigmoid recurrent activation; gate
/// blocks ordered input, forget, cell, output. Returns the last hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub units: usize,
    /// (inputs, 4·units)
    pub kernel: Array2<f64>,
    /// (units, 4·units)
    pub recurrent: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Lstm {
    pub fn new(rng: &mut ChaCha8Rng, inputs: usize, units: usize) -> Lstm {
        let mut bias = Array1::zeros(4 * units);
        bias.slice_mut(s![units..2 * units]).fill(1.0);
        Lstm {
            units,
            kernel: glorot_uniform(rng, inputs, 4 * units),
            recurrent: orthogonal(rng, units, 4 * units),
            bias,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.kernel.len() + self.recurrent.len() + self.bias.len()
    }
}

struct LstmStep {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub branches: usize,
    pub feature_dim: usize,
    pub mode: SequenceMode,
    pub lstm: Option<Lstm>,
    pub dropout_rate: f64,
    pub dense: Dense,
}

/// Gradients with the same layout as [`Head`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub dense_weight: Array2<f64>,
    pub dense_bias: Array1<f64>,
    pub lstm: Option<(Array2<f64>, Array2<f64>, Array1<f64>)>,
}

impl HeadGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.dense_weight.as_slice().unwrap(), self.dense_bias.as_slice().unwrap()];
        if let Some((k, r, b)) = &self.lstm {
            out.extend([k.as_slice().unwrap(), r.as_slice().unwrap(), b.as_slice().unwrap()]);
        }
        out
    }
}

/// Intermediate values of a forward pass, needed for the backward pass.
pub struct HeadPass {
    steps: Vec<LstmStep>,
    dense_input: Array2<f64>,
    mask: Option<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl HeadPass {
    pub fn probabilities(&self) -> Array2<f64> {
        self.logits.mapv(probability)
    }
}

/// Mean binary cross-entropy over batch and labels, computed from logits.
pub fn bce_from_logits(logits: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

/// Mean binary cross-entropy of probabilities (clamped away from 0 and 1).
pub fn bce_from_probabilities(probs: &ArrayView2<f64>, targets: &ArrayView2<f64>) -> f64 {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(PROBABILITY_MARGIN, 1.0 - PROBABILITY_MARGIN);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

impl Head {
    pub fn new(
        rng: &mut ChaCha8Rng,
        branches: usize,
        feature_dim: usize,
        lstm_units: Option<usize>,
        mode: SequenceMode,
        dropout_rate: f64,
        outputs: usize,
    ) -> Head {
        let lstm = lstm_units.map(|units| {
            let inputs = match mode {
                SequenceMode::PerImage => feature_dim,
                SequenceMode::ConcatFirst => branches * feature_dim,
            };
            Lstm::new(rng, inputs, units)
        });
        let dense_in = lstm.as_ref().map_or(branches * feature_dim, |l| l.units);
        Head {
            branches,
            feature_dim,
            mode,
            lstm,
            dropout_rate,
            dense: Dense::new(rng, dense_in, outputs),
        }
    }

    pub fn dense_inputs(&self) -> usize {
        self.dense.weight.nrows()
    }

    pub fn num_parameters(&self) -> usize {
        self.dense.num_parameters() + self.lstm.as_ref().map_or(0, Lstm::num_parameters)
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.dense.weight.as_slice().unwrap(), self.dense.bias.as_slice().unwrap()];
        if let Some(l) = &self.lstm {
            out.extend([l.kernel.as_slice().unwrap(), l.recurrent.as_slice().unwrap(), l.bias.as_slice().unwrap()]);
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.dense.weight.as_slice_mut().unwrap(),
            self.dense.bias.as_slice_mut().unwrap(),
        ];
        if let Some(l) = &mut self.lstm {
            out.push(l.kernel.as_slice_mut().unwrap());
            out.push(l.recurrent.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        out
    }

    /// Samples an inverted-dropout mask for a batch (entries 0 or 1/(1−rate)).
    pub fn dropout_mask(&self, rng: &mut ChaCha8Rng, batch: usize) -> Option<Array2<f64>> {
        if self.dropout_rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.dropout_rate;
        Some(Array2::from_shape_simple_fn((batch, self.dense_inputs()), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        }))
    }

    fn check_inputs(&self, branch_features: &[Array2<f64>]) {
        assert_eq!(branch_features.len(), self.branches, "branch count");
        for f in branch_features {
            assert_eq!(f.ncols(), self.feature_dim, "feature dimension");
        }
    }

    /// Forward pass. `mask` is the dropout mask (training) or `None` (inference).
    pub fn forward(&self, branch_features: &[Array2<f64>], mask: Option<&Array2<f64>>) -> HeadPass {
        self.check_inputs(branch_features);
        let batch = branch_features[0].nrows();
        let concat = || {
            let views: Vec<_> = branch_features.iter().map(|f| f.view()).collect();
            concatenate(Axis(1), &views).unwrap()
        };
        let mut steps = Vec::new();
        let dense_input = match &self.lstm {
            None => concat(),
            Some(lstm) => {
                let inputs: Vec<Array2<f64>> = match self.mode {
                    SequenceMode::PerImage => branch_features.to_vec(),
                    SequenceMode::ConcatFirst => vec![concat()],
                };
                let u = lstm.units;
                let mut h = Array2::zeros((batch, u));
                let mut c = Array2::zeros((batch, u));
                for x in inputs {
                    let z = x.dot(&lstm.kernel) + h.dot(&lstm.recurrent) + &lstm.bias;
                    let i = z.slice(s![.., 0..u]).mapv(sigmoid);
                    let f = z.slice(s![.., u..2 * u]).mapv(sigmoid);
                    let g = z.slice(s![.., 2 * u..3 * u]).mapv(f64::tanh);
                    let o = z.slice(s![.., 3 * u..4 * u]).mapv(sigmoid);
                    let c_new = &f * &c + &i * &g;
                    let tanh_c = c_new.mapv(f64::tanh);
                    let h_new = &o * &tanh_c;
                    steps.push(LstmStep {
                        x,
                        h_prev: h,
                        c_prev: c,
                        i,
                        f,
                        g,
                        o,
                        tanh_c,
                    });
                    h = h_new;
                    c = c_new;
                }
                h
            }
        };
        let dropped = match mask {
            Some(m) => &dense_input * m,
            None => dense_input.clone(),
        };
        let logits = dropped.dot(&self.dense.weight) + &self.dense.bias;
        HeadPass {
            steps,
            dense_input,
            mask: mask.cloned(),
            logits,
        }
    }

    pub fn predict(&self, branch_features: &[Array2<f64>]) -> Array2<f64> {
        self.forward(branch_features, None).probabilities()
    }

    /// Mean BCE loss of a pass and its gradients with respect to every head
    /// parameter.
    pub fn backward(&self, pass: &HeadPass, targets: &ArrayView2<f64>) -> (f64, HeadGrads) {
        let loss = bce_from_logits(&pass.logits.view(), targets);
        let n = pass.logits.len() as f64;
        let dlogits = (pass.logits.mapv(sigmoid) - targets) / n;
        let dropped = match &pass.mask {
            Some(m) => &pass.dense_input * m,
            None => pass.dense_input.clone(),
        };
        let dense_weight = dropped.t().dot(&dlogits);
        let dense_bias = dlogits.sum_axis(Axis(0));
        let lstm = self.lstm.as_ref().map(|lstm| {
            let u = lstm.units;
            let mut dh = dlogits.dot(&self.dense.weight.t());
            if let Some(m) = &pass.mask {
                dh *= m;
            }
            let mut dc = Array2::<f64>::zeros(dh.raw_dim());
            let mut dk = Array2::<f64>::zeros(lstm.kernel.raw_dim());
            let mut dr = Array2::<f64>::zeros(lstm.recurrent.raw_dim());
            let mut db = Array1::<f64>::zeros(lstm.bias.raw_dim());
            for st in pass.steps.iter().rev() {
                let d_o = &dh * &st.tanh_c;
                dc = dc + &dh * &st.o * st.tanh_c.mapv(|t| 1.0 - t * t);
                let di = &dc * &st.g;
                let dg = &dc * &st.i;
                let df = &dc * &st.c_prev;
                let mut dz = Array2::<f64>::zeros((dh.nrows(), 4 * u));
                dz.slice_mut(s![.., 0..u]).assign(&(&di * &st.i * st.i.mapv(|v| 1.0 - v)));
                dz.slice_mut(s![.., u..2 * u]).assign(&(&df * &st.f * st.f.mapv(|v| 1.0 - v)));
                dz.slice_mut(s![.., 2 * u..3 * u]).assign(&(&dg * st.g.mapv(|v| 1.0 - v * v)));
                dz.slice_mut(s![.., 3 * u..4 * u]).assign(&(&d_o * &st.o * st.o.mapv(|v| 1.0 - v)));
                dk = dk + st.x.t().dot(&dz);
                dr = dr + st.h_prev.t().dot(&dz);
                db = db + dz.sum_axis(Axis(0));
                dh = dz.dot(&lstm.recurrent.t());
                dc *= &st.f;
            }
            (dk, dr, db)
        });
        (
            loss,
            HeadGrads {
                dense_weight,
                dense_bias,
                lstm,
            },
        )
    }
}
