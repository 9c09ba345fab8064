//! From-scratch MLP: dense / leaky-ReLU / dropout layers with a softmax
//! cross-entropy head, hand-differentiated, trained by SGD with classical
//! momentum and weight decay. Single-threaded and fully deterministic given
//! the seeds, in 64-bit arithmetic throughout.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::data::{ImageTensor, LabeledDataset, NormStats};
use crate::imageops;
use crate::trigger::TriggerTensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged: loss became NaN at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },
    #[error("layer index {0} out of range")]
    BadLayerIndex(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        /// Shape (in_dim, out_dim).
        weights: Array2<f64>,
        biases: Array1<f64>,
    },
    LeakyRelu { slope: f64 },
    Dropout { p: f64 },
    /// Softmax head; cross-entropy is taken against it during training.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    /// Input normalization applied before the first dense layer.
    pub norm: NormStats,
}

/// Gradients of the mean cross-entropy, congruent with the dense layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dense: Vec<(Array2<f64>, Array1<f64>)>,
}

/// Optimizer hyperparameters and seeds for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub normalization: NormStats,
    /// Per-sample data augmentation applied each epoch, when set.
    pub augment: Option<AugmentConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Random crop padding; 0 disables cropping.
    pub crop_pad: usize,
    /// Rotation range in degrees, drawn uniform from [-r, r]; 0 disables.
    pub rotate_deg: f64,
    /// Flip each sample horizontally with probability 1/2.
    pub hflip: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.learning_rate <= 0.0 {
            return Err(NnError::BadSpec(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::BadSpec(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(NnError::BadSpec("negative weight decay".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::BadSpec("batch size must be positive".into()));
        }
        Ok(())
    }
}

fn init_dense(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Layer {
    // fan-in scaled uniform init
    let bound = 1.0 / (in_dim as f64).sqrt();
    let weights = Array2::from_shape_fn((in_dim, out_dim), |_| rng.gen_range(-bound..bound));
    let biases = Array1::zeros(out_dim);
    Layer::Dense { weights, biases }
}

/// dense -> leaky_relu -> dropout -> dense -> leaky_relu -> dropout -> dense
/// -> softmax, with fan-in scaled uniform weight init from the seed.
pub fn build_mlp(
    input_dim: usize,
    hidden_dims: (usize, usize),
    num_classes: usize,
    slope: f64,
    dropout: f64,
    seed: u64,
) -> Result<Mlp, NnError> {
    if input_dim == 0 || hidden_dims.0 == 0 || hidden_dims.1 == 0 || num_classes == 0 {
        return Err(NnError::BadSpec("all layer widths must be positive".into()));
    }
    if !(0.0..1.0).contains(&slope) || slope == 0.0 {
        return Err(NnError::BadSpec(format!("leaky slope {slope} outside (0, 1)")));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(NnError::BadSpec(format!("dropout {dropout} outside [0, 1)")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let layers = vec![
        init_dense(input_dim, hidden_dims.0, &mut rng),
        Layer::LeakyRelu { slope },
        Layer::Dropout { p: dropout },
        init_dense(hidden_dims.0, hidden_dims.1, &mut rng),
        Layer::LeakyRelu { slope },
        Layer::Dropout { p: dropout },
        init_dense(hidden_dims.1, num_classes, &mut rng),
        Layer::Softmax,
    ];
    Ok(Mlp {
        layers,
        norm: NormStats::identity(1),
    })
}

impl Mlp {
    pub fn input_dim(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense { weights, .. } => Some(weights.nrows()),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { weights, .. } => Some(weights.ncols()),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weights, biases } => weights.len() + biases.len(),
                _ => 0,
            })
            .sum()
    }

    /// Index of the last activation before the output dense layer; the
    /// feature point used by the representation-space defenses.
    pub fn penultimate_activation_index(&self) -> Option<usize> {
        let last_dense = self.layers.iter().rposition(|l| matches!(l, Layer::Dense { .. }))?;
        self.layers[..last_dense]
            .iter()
            .rposition(|l| matches!(l, Layer::LeakyRelu { .. }))
    }

    /// Flattens images into normalized rows: `(px - mean[ch]) / stddev[ch]`.
    pub fn features(&self, images: &[ImageTensor]) -> Result<Array2<f64>, NnError> {
        let dim = self.input_dim();
        let mut out = Array2::zeros((images.len(), dim));
        for (i, img) in images.iter().enumerate() {
            if img.len() != dim {
                return Err(NnError::ShapeMismatch(format!(
                    "image {} has {} cells, network expects {}",
                    i,
                    img.len(),
                    dim
                )));
            }
            if img.channels != self.norm.mean.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "image has {} channels, normalization has {}",
                    img.channels,
                    self.norm.mean.len()
                )));
            }
            for (j, &px) in img.pixels.iter().enumerate() {
                let ch = j % img.channels;
                out[[i, j]] = (px as f64 - self.norm.mean[ch]) / self.norm.stddev[ch];
            }
        }
        Ok(out)
    }

    /// Forward pass over pre-normalized features, collecting the output of
    /// every layer. Dropout draws masks from `rng` in train mode (inverted
    /// dropout: kept cells scale by 1/(1-p)) and is the identity in eval.
    fn forward_trace(
        &self,
        input: &Array2<f64>,
        mode: Mode,
        mut rng: Option<&mut ChaCha20Rng>,
    ) -> (Vec<Array2<f64>>, Vec<Option<Array2<f64>>>) {
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut masks: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let mut mask = None;
            x = match layer {
                Layer::Dense { weights, biases } => x.dot(weights) + biases,
                Layer::LeakyRelu { slope } => x.mapv(|v| if v > 0.0 { v } else { slope * v }),
                Layer::Dropout { p } => {
                    if mode == Mode::Train && *p > 0.0 {
                        let rng = rng
                            .as_deref_mut()
                            .expect("train-mode forward requires an rng for dropout");
                        let keep = 1.0 - p;
                        let m = Array2::from_shape_fn(x.raw_dim(), |_| {
                            if rng.gen::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        });
                        let y = &x * &m;
                        mask = Some(m);
                        y
                    } else {
                        x
                    }
                }
                Layer::Softmax => softmax_rows(&x),
            };
            outputs.push(x.clone());
            masks.push(mask);
        }
        (outputs, masks)
    }

    /// Class-probability rows for pre-normalized features.
    pub fn forward(&self, input: &Array2<f64>, mode: Mode, rng: Option<&mut ChaCha20Rng>) -> Array2<f64> {
        let (outputs, _) = self.forward_trace(input, mode, rng);
        outputs.last().cloned().unwrap_or_else(|| input.clone())
    }

    /// Class-probability rows for a batch of raw images.
    pub fn forward_images(&self, images: &[ImageTensor], mode: Mode, rng: Option<&mut ChaCha20Rng>) -> Result<Array2<f64>, NnError> {
        let x = self.features(images)?;
        Ok(self.forward(&x, mode, rng))
    }

    /// Mean cross-entropy of the batch; draws the same dropout mask stream
    /// as [`Mlp::loss_and_grads`] when given a clone of the same rng.
    pub fn loss(&self, input: &Array2<f64>, labels: &[usize], mode: Mode, rng: Option<&mut ChaCha20Rng>) -> Result<f64, NnError> {
        let probs = self.forward(input, mode, rng);
        mean_cross_entropy(&probs, labels)
    }

    /// Exact gradients of the mean cross-entropy w.r.t. every dense layer's
    /// weights and biases.
    pub fn loss_and_grads(
        &self,
        input: &Array2<f64>,
        labels: &[usize],
        mode: Mode,
        rng: Option<&mut ChaCha20Rng>,
    ) -> Result<(f64, Gradients), NnError> {
        if input.nrows() != labels.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} rows vs {} labels",
                input.nrows(),
                labels.len()
            )));
        }
        let (outputs, masks) = self.forward_trace(input, mode, rng);
        let probs = outputs.last().expect("network has layers");
        let loss = mean_cross_entropy(probs, labels)?;

        let n = input.nrows() as f64;
        // softmax + cross-entropy shortcut: dL/dlogits = (p - onehot) / n
        let mut delta = probs.clone();
        for (i, &label) in labels.iter().enumerate() {
            delta[[i, label]] -= 1.0;
        }
        delta /= n;

        let mut dense_grads_rev: Vec<(Array2<f64>, Array1<f64>)> = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let layer_input = if idx == 0 { input } else { &outputs[idx - 1] };
            match layer {
                Layer::Softmax => {
                    // folded into the delta initialization
                }
                Layer::Dense { weights, .. } => {
                    let dw = layer_input.t().dot(&delta);
                    let db = delta.sum_axis(Axis(0));
                    dense_grads_rev.push((dw, db));
                    delta = delta.dot(&weights.t());
                }
                Layer::LeakyRelu { slope } => {
                    delta = &delta * &layer_input.mapv(|v| if v > 0.0 { 1.0 } else { *slope });
                }
                Layer::Dropout { .. } => {
                    if let Some(mask) = &masks[idx] {
                        delta = &delta * mask;
                    }
                }
            }
        }
        dense_grads_rev.reverse();
        Ok((loss, Gradients { dense: dense_grads_rev }))
    }

    /// Eval-mode activations captured after `layers[layer_index]`.
    pub fn hidden_activations(&self, dataset: &LabeledDataset, layer_index: usize) -> Result<Array2<f64>, NnError> {
        if layer_index >= self.layers.len() {
            return Err(NnError::BadLayerIndex(layer_index));
        }
        let x = self.features(&dataset.images)?;
        let (outputs, _) = self.forward_trace(&x, Mode::Eval, None);
        Ok(outputs[layer_index].clone())
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn mean_cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> Result<f64, NnError> {
    if probs.nrows() != labels.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} probability rows vs {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= probs.ncols() {
            return Err(NnError::ShapeMismatch(format!("label {label} exceeds {} classes", probs.ncols())));
        }
        let p = probs[[i, label]];
        // clamp only genuine underflow; NaN must propagate so training aborts
        let p = if p < 1e-300 { 1e-300 } else { p };
        total += -p.ln();
    }
    Ok(total / labels.len() as f64)
}

/// Global gradient-norm ceiling. Momentum SGD on this architecture can enter
/// a blow-up cycle when a late batch produces a very confident wrong logit;
/// rescaling oversized gradients bounds the step without changing the
/// direction, and leaves well-behaved runs untouched.
const GRAD_CLIP_NORM: f64 = 5.0;

/// SGD with classical momentum: `v <- mu v - lr (g + wd theta)`,
/// `theta <- theta + v`, with gradients rescaled to a global L2 norm of at
/// most [`GRAD_CLIP_NORM`]. Deterministic given the config seed; returns the
/// trained network and the per-epoch mean loss history.
pub fn train(model: &Mlp, dataset: &LabeledDataset, config: &TrainConfig) -> Result<(Mlp, Vec<f64>), NnError> {
    config.validate()?;
    let mut model = Mlp {
        layers: model.layers.clone(),
        norm: config.normalization.clone(),
    };
    if config.epochs == 0 || dataset.is_empty() {
        return Ok((model, Vec::new()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut velocity: Vec<(Array2<f64>, Array1<f64>)> = model
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Dense { weights, biases } => {
                Some((Array2::zeros(weights.raw_dim()), Array1::zeros(biases.raw_dim())))
            }
            _ => None,
        })
        .collect();

    let base_features = model.features(&dataset.images)?;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // per-epoch augmented view of the data
        let features = match &config.augment {
            None => base_features.clone(),
            Some(aug) => {
                let mut augmented: Vec<ImageTensor> = Vec::with_capacity(dataset.len());
                for img in &dataset.images {
                    let mut x = img.clone();
                    if aug.hflip && rng.gen::<bool>() {
                        x = imageops::horizontal_flip(&x);
                    }
                    if aug.rotate_deg > 0.0 {
                        let deg = rng.gen_range(-aug.rotate_deg..=aug.rotate_deg);
                        x = imageops::rotate(&x, deg);
                    }
                    if aug.crop_pad > 0 {
                        x = imageops::random_crop(&x, aug.crop_pad, &mut rng);
                    }
                    augmented.push(x);
                }
                model.features(&augmented)?
            }
        };

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        // seeded Fisher-Yates shuffle
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = Array2::zeros((chunk.len(), features.ncols()));
            let mut labels = Vec::with_capacity(chunk.len());
            for (bi, &i) in chunk.iter().enumerate() {
                batch.row_mut(bi).assign(&features.row(i));
                labels.push(dataset.labels[i]);
            }
            let (loss, grads) = model.loss_and_grads(&batch, &labels, Mode::Train, Some(&mut rng))?;
            if loss.is_nan() {
                return Err(NnError::NanLoss { epoch, step });
            }
            let grad_sq: f64 = grads
                .dense
                .iter()
                .map(|(dw, db)| dw.iter().map(|g| g * g).sum::<f64>() + db.iter().map(|g| g * g).sum::<f64>())
                .sum();
            let clip_scale = if grad_sq > GRAD_CLIP_NORM * GRAD_CLIP_NORM {
                GRAD_CLIP_NORM / grad_sq.sqrt()
            } else {
                1.0
            };
            let mut di = 0;
            for layer in model.layers.iter_mut() {
                if let Layer::Dense { weights, biases } = layer {
                    let (dw, db) = &grads.dense[di];
                    let (vw, vb) = &mut velocity[di];
                    *vw = &*vw * config.momentum
                        - (&(dw * clip_scale) + &(&*weights * config.weight_decay)) * config.learning_rate;
                    *vb = &*vb * config.momentum
                        - (&(db * clip_scale) + &(&*biases * config.weight_decay)) * config.learning_rate;
                    *weights += &*vw;
                    *biases += &*vb;
                    di += 1;
                }
            }
            epoch_loss += loss;
            steps += 1;
        }
        history.push(epoch_loss / steps as f64);
    }
    Ok((model, history))
}

/// Identical to [`train`] but named for the defender's use: continue
/// training the received model on clean data.
pub fn fine_tune(model: &Mlp, clean_subset: &LabeledDataset, config: &TrainConfig) -> Result<(Mlp, Vec<f64>), NnError> {
    train(model, clean_subset, config)
}

/// Clean accuracy and per-sample argmax predictions (lowest index wins ties).
pub fn evaluate(model: &Mlp, dataset: &LabeledDataset) -> Result<(f64, Vec<usize>), NnError> {
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut correct = 0usize;
    for chunk_start in (0..dataset.len()).step_by(512) {
        let end = (chunk_start + 512).min(dataset.len());
        let probs = model.forward_images(&dataset.images[chunk_start..end], Mode::Eval, None)?;
        for (i, row) in probs.rows().into_iter().enumerate() {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            predictions.push(best);
            if best == dataset.labels[chunk_start + i] {
                correct += 1;
            }
        }
    }
    Ok((correct as f64 / dataset.len() as f64, predictions))
}

/// Zeroes the least-active hidden neurons (ascending mean post-activation
/// magnitude over the clean set), stopping before the first step whose
/// cumulative clean-accuracy drop exceeds the budget. Returns the pruned
/// network and the number of neurons removed.
pub fn prune_neurons(model: &Mlp, clean: &LabeledDataset, budget: f64) -> Result<(Mlp, usize), NnError> {
    if clean.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let act_index = model
        .penultimate_activation_index()
        .ok_or_else(|| NnError::BadSpec("network has no hidden activation to prune".into()))?;
    let out_dense = model
        .layers
        .iter()
        .rposition(|l| matches!(l, Layer::Dense { .. }))
        .ok_or_else(|| NnError::BadSpec("network has no dense layers".into()))?;
    let hidden_dense = model.layers[..out_dense]
        .iter()
        .rposition(|l| matches!(l, Layer::Dense { .. }))
        .ok_or_else(|| NnError::BadSpec("network has a single dense layer".into()))?;

    let acts = model.hidden_activations(clean, act_index)?;
    let n = acts.nrows() as f64;
    let mut dormancy: Vec<(usize, f64)> = acts
        .columns()
        .into_iter()
        .enumerate()
        .map(|(j, col)| (j, col.iter().map(|v| v.abs()).sum::<f64>() / n))
        .collect();
    dormancy.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));

    let (baseline, _) = evaluate(model, clean)?;
    let mut pruned_model = model.clone();
    let mut pruned = 0usize;
    for &(neuron, _) in &dormancy {
        // snapshot the outgoing row and the neuron's bias, then zero them
        let saved_row = match &pruned_model.layers[out_dense] {
            Layer::Dense { weights, .. } => weights.row(neuron).to_owned(),
            _ => unreachable!(),
        };
        let saved_bias = match &pruned_model.layers[hidden_dense] {
            Layer::Dense { biases, .. } => biases[neuron],
            _ => unreachable!(),
        };
        if let Layer::Dense { weights, .. } = &mut pruned_model.layers[out_dense] {
            weights.row_mut(neuron).fill(0.0);
        }
        if let Layer::Dense { biases, .. } = &mut pruned_model.layers[hidden_dense] {
            biases[neuron] = 0.0;
        }
        let (acc, _) = evaluate(&pruned_model, clean)?;
        if baseline - acc > budget {
            // revert the overshooting step and stop
            if let Layer::Dense { weights, .. } = &mut pruned_model.layers[out_dense] {
                weights.row_mut(neuron).assign(&saved_row);
            }
            if let Layer::Dense { biases, .. } = &mut pruned_model.layers[hidden_dense] {
                biases[neuron] = saved_bias;
            }
            break;
        }
        pruned += 1;
    }
    Ok((pruned_model, pruned))
}

/// The hand-constructed linear trigger detector: weights equal the realized
/// trigger values, bias is `-m^2 M / 2`. A positive score means "trigger
/// present".
#[derive(Debug, Clone)]
pub struct PerceptronDetector {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl PerceptronDetector {
    pub fn from_trigger(trigger: &TriggerTensor) -> Self {
        let m = trigger.magnitude;
        let bias = -m * m * trigger.layout.m_effective as f64 / 2.0;
        PerceptronDetector {
            weights: trigger.values.clone(),
            bias,
        }
    }

    pub fn score_u8(&self, pixels: &[u8]) -> f64 {
        self.weights
            .iter()
            .zip(pixels)
            .map(|(&w, &x)| w * x as f64)
            .sum::<f64>()
            + self.bias
    }

    pub fn score_f64(&self, pixels: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(pixels)
            .map(|(&w, &x)| w * x)
            .sum::<f64>()
            + self.bias
    }

    pub fn detect(&self, pixels: &[u8]) -> bool {
        self.score_u8(pixels) > 0.0
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointLayer {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    biases: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    norm: NormStats,
    layers: Vec<CheckpointLayer>,
}

pub fn save_checkpoint(model: &Mlp, path: impl AsRef<Path>) -> Result<(), NnError> {
    let path = path.as_ref();
    let layers = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Dense { weights, biases } => CheckpointLayer {
                kind: "dense".into(),
                slope: None,
                p: None,
                in_dim: Some(weights.nrows()),
                out_dim: Some(weights.ncols()),
                weights: Some(weights.iter().cloned().collect()),
                biases: Some(biases.to_vec()),
            },
            Layer::LeakyRelu { slope } => CheckpointLayer {
                kind: "leaky_relu".into(),
                slope: Some(*slope),
                p: None,
                in_dim: None,
                out_dim: None,
                weights: None,
                biases: None,
            },
            Layer::Dropout { p } => CheckpointLayer {
                kind: "dropout".into(),
                slope: None,
                p: Some(*p),
                in_dim: None,
                out_dim: None,
                weights: None,
                biases: None,
            },
            Layer::Softmax => CheckpointLayer {
                kind: "softmax".into(),
                slope: None,
                p: None,
                in_dim: None,
                out_dim: None,
                weights: None,
                biases: None,
            },
        })
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        norm: model.norm.clone(),
        layers,
    };
    let text = serde_json::to_string(&ckpt).map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Mlp, NnError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NnError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(NnError::BadVersion(ckpt.version));
    }
    let mut layers = Vec::with_capacity(ckpt.layers.len());
    for cl in ckpt.layers {
        let layer = match cl.kind.as_str() {
            "dense" => {
                let in_dim = cl.in_dim.ok_or_else(|| NnError::MalformedCheckpoint("dense layer missing in_dim".into()))?;
                let out_dim = cl.out_dim.ok_or_else(|| NnError::MalformedCheckpoint("dense layer missing out_dim".into()))?;
                let w = cl.weights.ok_or_else(|| NnError::MalformedCheckpoint("dense layer missing weights".into()))?;
                let b = cl.biases.ok_or_else(|| NnError::MalformedCheckpoint("dense layer missing biases".into()))?;
                let weights = Array2::from_shape_vec((in_dim, out_dim), w)
                    .map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
                if b.len() != out_dim {
                    return Err(NnError::MalformedCheckpoint("bias length mismatch".into()));
                }
                Layer::Dense { weights, biases: Array1::from_vec(b) }
            }
            "leaky_relu" => Layer::LeakyRelu {
                slope: cl.slope.ok_or_else(|| NnError::MalformedCheckpoint("leaky_relu missing slope".into()))?,
            },
            "dropout" => Layer::Dropout {
                p: cl.p.ok_or_else(|| NnError::MalformedCheckpoint("dropout missing p".into()))?,
            },
            "softmax" => Layer::Softmax,
            other => return Err(NnError::MalformedCheckpoint(format!("unknown layer kind {other:?}"))),
        };
        layers.push(layer);
    }
    Ok(Mlp { layers, norm: ckpt.norm })
}
