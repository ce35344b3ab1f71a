//! Dense feed-forward networks with ReLU hidden layers, trained by
//! mini-batch back-propagation and Adamax with decoupled weight decay.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdsError};
use crate::preprocess::{add_noise, NoiseConfig};

/// Hidden widths of the trap-count classifier.
pub const CLASSIFIER_HIDDEN: [usize; 4] = [256, 128, 64, 32];

/// Hidden widths of a regressor before multiplication by its output count.
pub const REGRESSOR_HIDDEN_BASE: [usize; 5] = [64, 64, 32, 16, 8];

/// Smallest probability passed to the logarithm in cross-entropy.
pub const PROBABILITY_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Identity,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    MeanSquared,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `inputs × outputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub head: Head,
    pub layers: Vec<Dense>,
}

/// Full layer widths `[n_in, hidden..., n_out]` of a regressor for `n_out` outputs.
pub fn regressor_widths(n_in: usize, n_out: usize) -> Vec<usize> {
    std::iter::once(n_in)
        .chain(REGRESSOR_HIDDEN_BASE.iter().map(|w| w * n_out))
        .chain(std::iter::once(n_out))
        .collect()
}

/// Full layer widths of a classifier over `n_classes`.
pub fn classifier_widths(n_in: usize, n_classes: usize) -> Vec<usize> {
    std::iter::once(n_in)
        .chain(CLASSIFIER_HIDDEN)
        .chain(std::iter::once(n_classes))
        .collect()
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Parameter gradients in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// He-uniform hidden weights, Glorot-uniform output weights, zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(TdsError::invalid(
                "widths",
                format!("need at least input and output widths, all positive; got {widths:?}"),
            ));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let limit = if i == last {
                    (6.0 / (w[0] + w[1]) as f64).sqrt()
                } else {
                    (6.0 / w[0] as f64).sqrt()
                };
                Dense {
                    weights: uniform_matrix(w[0], w[1], limit, rng),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { head, layers })
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().expect("at least one layer").weights.ncols()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.n_inputs())
            .chain(self.layers.iter().map(|l| l.weights.ncols()))
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks the layer shape chain and parameter finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(TdsError::InconsistentData("network has no layers".into()));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].weights.ncols() != pair[1].weights.nrows() {
                return Err(TdsError::ShapeMismatch {
                    expected: format!("layer {} input width {}", i + 1, pair[0].weights.ncols()),
                    got: format!("{}", pair[1].weights.nrows()),
                });
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.bias.len() != layer.weights.ncols() {
                return Err(TdsError::ShapeMismatch {
                    expected: format!("layer {i} bias of length {}", layer.weights.ncols()),
                    got: format!("{}", layer.bias.len()),
                });
            }
            if layer.weights.iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(TdsError::InconsistentData(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(())
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.n_inputs() {
            return Err(TdsError::ShapeMismatch {
                expected: format!("{} input features", self.n_inputs()),
                got: format!("{cols}"),
            });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry is the head output.
    fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weights) + &layer.bias;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            } else if self.head == Head::Softmax {
                softmax_rows(&mut z);
            }
            activations.push(z);
        }
        activations
    }

    /// Outputs for a batch, one row per sample.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.forward_cached(x).pop().expect("output layer"))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Array1<f64>> {
        let row = ArrayView2::from_shape((1, x.len()), x).expect("single row");
        Ok(self.forward_batch(row)?.row(0).to_owned())
    }

    /// Batch loss and its exact gradient with respect to every parameter.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f64>,
        target: ArrayView2<'_, f64>,
        loss: LossKind,
    ) -> Result<(f64, Gradients)> {
        self.check_input(x.ncols())?;
        if target.dim() != (x.nrows(), self.n_outputs()) {
            return Err(TdsError::ShapeMismatch {
                expected: format!("targets of shape ({}, {})", x.nrows(), self.n_outputs()),
                got: format!("{:?}", target.dim()),
            });
        }
        let activations = self.forward_cached(x);
        let output = activations.last().expect("output layer");
        let value = loss_value(output.view(), target, loss);
        let batch = x.nrows() as f64;
        let mut delta = match (loss, self.head) {
            (LossKind::MeanSquared, Head::Identity) => {
                (output - &target) * (2.0 / (batch * self.n_outputs() as f64))
            }
            (LossKind::CrossEntropy, Head::Softmax) => (output - &target) / batch,
            _ => {
                return Err(TdsError::invalid(
                    "loss",
                    format!("{loss:?} is not paired with the {:?} head", self.head),
                ))
            }
        };
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &activations[i];
            grads.push(Dense {
                weights: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut upstream = delta.dot(&layer.weights.t());
                ndarray::Zip::from(&mut upstream)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                delta = upstream;
            }
        }
        grads.reverse();
        Ok((value, Gradients { layers: grads }))
    }
}

/// Mean squared error over every element, or mean cross-entropy over rows.
pub fn loss_value(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, loss: LossKind) -> f64 {
    match loss {
        LossKind::MeanSquared => {
            let diff = &pred - &target;
            diff.mapv(|d| d * d).sum() / pred.len() as f64
        }
        LossKind::CrossEntropy => {
            let total: f64 = pred
                .iter()
                .zip(target.iter())
                .map(|(&p, &y)| if y == 0.0 { 0.0 } else { -y * p.max(PROBABILITY_CLIP).ln() })
                .sum();
            total / pred.nrows() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamaxConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// Moment and infinity-norm accumulators shaped like the network.
#[derive(Debug, Clone)]
pub struct Adamax {
    pub config: AdamaxConfig,
    pub step: u64,
    moment: Vec<Dense>,
    norm: Vec<Dense>,
}

fn zeros_like(mlp: &Mlp) -> Vec<Dense> {
    mlp.layers
        .iter()
        .map(|l| Dense {
            weights: Array2::zeros(l.weights.raw_dim()),
            bias: Array1::zeros(l.bias.raw_dim()),
        })
        .collect()
}

impl Adamax {
    pub fn new(mlp: &Mlp, config: AdamaxConfig) -> Self {
        Self {
            config,
            step: 0,
            moment: zeros_like(mlp),
            norm: zeros_like(mlp),
        }
    }

    pub fn apply(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let c = self.config;
        let rate = c.learning_rate / (1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32));
        let decay = 1.0 - c.learning_rate * c.weight_decay;
        let update = |p: &mut f64, m: &mut f64, u: &mut f64, g: f64| {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *u = (c.beta2 * *u).max(g.abs());
            *p -= rate * *m / (*u + c.epsilon);
            *p *= decay;
        };
        for (((layer, m), u), g) in mlp
            .layers
            .iter_mut()
            .zip(&mut self.moment)
            .zip(&mut self.norm)
            .zip(&grads.layers)
        {
            ndarray::Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut u.weights)
                .and(&g.weights)
                .for_each(|p, m, u, &g| update(p, m, u, g));
            ndarray::Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut u.bias)
                .and(&g.bias)
                .for_each(|p, m, u, &g| update(p, m, u, g));
        }
    }

    /// Largest infinity-norm accumulator entry.
    pub fn max_norm(&self) -> f64 {
        self.norm
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(0.0, |a, &b| a.max(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Gaussian noise added to training inputs, redrawn every epoch.
    pub noise: NoiseConfig,
    pub optimizer: AdamaxConfig,
}

impl TrainConfig {
    /// Defaults for a classifier over `n_out` classes.
    pub fn classifier(n_out: usize, seed: u64) -> Self {
        Self {
            batch_size: 32,
            epochs: 100 * n_out,
            validation_fraction: 0.2,
            seed,
            loss: LossKind::CrossEntropy,
            noise: NoiseConfig { sigma: 0.0, seed },
            optimizer: AdamaxConfig::default(),
        }
    }

    /// Defaults for a regressor with `n_out` outputs.
    pub fn regressor(n_out: usize, seed: u64) -> Self {
        Self {
            epochs: 200 * n_out,
            loss: LossKind::MeanSquared,
            ..Self::classifier(n_out, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(TdsError::invalid("batch_size", "must be at least 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(TdsError::invalid("validation_fraction", "must lie strictly between 0 and 1"));
        }
        self.noise.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean batch loss per epoch, on noisy training inputs.
    pub train_loss: Vec<f64>,
    /// Loss on the clean validation split per epoch.
    pub validation_loss: Vec<f64>,
}

impl History {
    pub fn final_validation_loss(&self) -> Option<f64> {
        self.validation_loss.last().copied()
    }
}

/// Deterministic shuffled split of `n` row indices into (train, validation).
pub fn split_indices(n: usize, validation_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * validation_fraction).round() as usize).min(n.saturating_sub(1));
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Mini-batch training with a shuffled held-out validation split.
pub fn train(mlp: &mut Mlp, x: &Array2<f64>, y: &Array2<f64>, cfg: &TrainConfig) -> Result<History> {
    check_rows(x, y)?;
    if x.nrows() < 2 {
        return Err(TdsError::invalid("training set", "needs at least 2 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = split_indices(x.nrows(), cfg.validation_fraction, &mut rng);
    train_with_validation(
        mlp,
        (&x.select(Axis(0), &train_idx), &y.select(Axis(0), &train_idx)),
        (&x.select(Axis(0), &val_idx), &y.select(Axis(0), &val_idx)),
        cfg,
    )
}

fn check_rows(x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(TdsError::ShapeMismatch {
            expected: format!("{} target rows", x.nrows()),
            got: format!("{}", y.nrows()),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TdsError::invalid("training set", "inputs must be finite"));
    }
    Ok(())
}

/// Mini-batch training on `(inputs, targets)` with loss tracked on a fixed
/// validation pair. Noise touches training batches only.
pub fn train_with_validation(
    mlp: &mut Mlp,
    training: (&Array2<f64>, &Array2<f64>),
    validation: (&Array2<f64>, &Array2<f64>),
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    let (x, y) = training;
    let (x_val, y_val) = validation;
    check_rows(x, y)?;
    check_rows(x_val, y_val)?;
    if x.nrows() == 0 {
        return Err(TdsError::invalid("training set", "is empty"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed);
    noise_rng.set_stream(2);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut optimizer = Adamax::new(mlp, cfg.optimizer);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut xb = x.select(Axis(0), chunk);
            add_noise(&mut xb, cfg.noise.sigma, &mut noise_rng)?;
            let yb = y.select(Axis(0), chunk);
            let (loss, grads) = mlp.backward(xb.view(), yb.view(), cfg.loss)?;
            if !loss.is_finite() {
                return Err(TdsError::NonFiniteLoss { epoch, batch, loss });
            }
            optimizer.apply(mlp, &grads);
            total += loss;
            batches += 1;
        }
        history.train_loss.push(total / batches as f64);
        let val_loss = if x_val.nrows() == 0 {
            f64::NAN
        } else {
            loss_value(mlp.forward_batch(x_val.view())?.view(), y_val.view(), cfg.loss)
        };
        history.validation_loss.push(val_loss);
        if epoch % 50 == 0 || epoch + 1 == cfg.epochs {
            log::debug!(
                "epoch {}/{}: train {:.4e}, validation {:.4e}",
                epoch + 1,
                cfg.epochs,
                history.train_loss[epoch],
                val_loss
            );
        }
    }
    Ok(history)
}

/// One-hot rows for zero-based class labels.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), n_classes));
    for (row, &label) in labels.iter().enumerate() {
        y[[row, label]] = 1.0;
    }
    y
}
