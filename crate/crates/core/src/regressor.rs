//! Multi-head MLP score regressor.
//!
//! Every head is an independent three-layer perceptron
//! `input -> tanh(h1) -> tanh(h2) -> scalar` reading the same feature vector.
//! Training minimises the per-head combined loss averaged across heads with
//! plain mini-batch SGD and restores the parameters of the best validation
//! epoch.

use log::{debug, info};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{combined_loss, LossConfig};
use crate::pairing::{build_pair_set, DEFAULT_TIE_TOLERANCE};

pub const DEFAULT_HIDDEN_DIMS: [usize; 2] = [128, 64];

/// One affine layer, `weights` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        Self {
            weights: Array2::from_shape_simple_fn((outputs, inputs), || dist.sample(rng)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    fn affine(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.bias
    }

    fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

/// Parameters of one prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub name: String,
    pub layers: [Dense; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub input_dim: usize,
    pub hidden_dims: [usize; 2],
    pub heads: Vec<Head>,
    pub seed: u64,
}

/// Parameter gradients laid out like [`Regressor::heads`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub heads: Vec<[Dense; 3]>,
}

impl Gradients {
    pub fn is_zero(&self) -> bool {
        self.heads
            .iter()
            .flatten()
            .all(|d| d.weights.iter().chain(d.bias.iter()).all(|&v| v == 0.0))
    }
}

struct HeadActivations {
    hidden1: Array2<f64>,
    hidden2: Array2<f64>,
    output: Array1<f64>,
}

impl Regressor {
    /// Glorot-uniform weights, zero hidden biases, and the output bias set to
    /// `output_bias` (typically the midpoint of the rating scale).
    pub fn new<S: AsRef<str>>(
        input_dim: usize,
        head_names: &[S],
        hidden_dims: [usize; 2],
        output_bias: f64,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::domain("input_dim must be >= 1"));
        }
        if hidden_dims.contains(&0) {
            return Err(Error::domain("hidden layer widths must be >= 1"));
        }
        if head_names.is_empty() {
            return Err(Error::domain("at least one head is required"));
        }
        for (k, name) in head_names.iter().enumerate() {
            if head_names[..k].iter().any(|n| n.as_ref() == name.as_ref()) {
                return Err(Error::domain(format!(
                    "duplicate head name {:?}",
                    name.as_ref()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = head_names
            .iter()
            .map(|name| {
                let mut out = Dense::glorot(hidden_dims[1], 1, &mut rng);
                out.bias.fill(output_bias);
                Head {
                    name: name.as_ref().to_string(),
                    layers: [
                        Dense::glorot(input_dim, hidden_dims[0], &mut rng),
                        Dense::glorot(hidden_dims[0], hidden_dims[1], &mut rng),
                        out,
                    ],
                }
            })
            .collect();
        Ok(Self {
            input_dim,
            hidden_dims,
            heads,
            seed,
        })
    }

    pub fn head_names(&self) -> Vec<&str> {
        self.heads.iter().map(|h| h.name.as_str()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.heads
            .iter()
            .flat_map(|h| &h.layers)
            .all(Dense::is_finite)
    }

    fn check_features(&self, features: ArrayView2<'_, f64>) -> Result<()> {
        if features.ncols() != self.input_dim {
            return Err(Error::domain(format!(
                "feature width {} does not match input_dim {}",
                features.ncols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn activations(head: &Head, features: ArrayView2<'_, f64>) -> HeadActivations {
        let [l1, l2, l3] = &head.layers;
        let hidden1 = l1.affine(features).mapv_into(f64::tanh);
        let hidden2 = l2.affine(hidden1.view()).mapv_into(f64::tanh);
        let output = l3.affine(hidden2.view()).column(0).to_owned();
        HeadActivations {
            hidden1,
            hidden2,
            output,
        }
    }

    /// Predicted scores, one vector per head (in head order).
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Result<Vec<Array1<f64>>> {
        self.check_features(features)?;
        Ok(self
            .heads
            .iter()
            .map(|h| Self::activations(h, features).output)
            .collect())
    }

    fn backward_head(
        head: &Head,
        features: ArrayView2<'_, f64>,
        acts: &HeadActivations,
        grad_out: &Array1<f64>,
    ) -> [Dense; 3] {
        let [_, l2, l3] = &head.layers;
        let g_out = grad_out.view().insert_axis(Axis(1));

        let d3 = Dense {
            weights: g_out.t().dot(&acts.hidden2),
            bias: g_out.sum_axis(Axis(0)),
        };
        let mut g2 = g_out.dot(&l3.weights);
        g2.zip_mut_with(&acts.hidden2, |g, &a| *g *= 1.0 - a * a);
        let d2 = Dense {
            weights: g2.t().dot(&acts.hidden1),
            bias: g2.sum_axis(Axis(0)),
        };
        let mut g1 = g2.dot(&l2.weights);
        g1.zip_mut_with(&acts.hidden1, |g, &a| *g *= 1.0 - a * a);
        let d1 = Dense {
            weights: g1.t().dot(&features),
            bias: g1.sum_axis(Axis(0)),
        };
        [d1, d2, d3]
    }

    /// Back-propagates per-head output gradients `dL/d(prediction)` to every
    /// parameter.
    pub fn backward(
        &self,
        features: ArrayView2<'_, f64>,
        output_grads: &[Array1<f64>],
    ) -> Result<Gradients> {
        self.check_features(features)?;
        if output_grads.len() != self.heads.len()
            || output_grads.iter().any(|g| g.len() != features.nrows())
        {
            return Err(Error::domain(
                "output gradients must have one vector per head, each with one entry per sample",
            ));
        }
        let heads = self
            .heads
            .iter()
            .zip(output_grads)
            .map(|(head, g)| {
                let acts = Self::activations(head, features);
                Self::backward_head(head, features, &acts, g)
            })
            .collect();
        Ok(Gradients { heads })
    }

    fn zero_gradients(&self) -> Gradients {
        Gradients {
            heads: self
                .heads
                .iter()
                .map(|h| {
                    h.layers
                        .clone()
                        .map(|d| Dense::zeros(d.inputs(), d.outputs()))
                })
                .collect(),
        }
    }

    /// `param -= lr * velocity`, with `velocity = momentum * velocity + grad`.
    fn apply_update(
        &mut self,
        grads: &Gradients,
        velocity: &mut Gradients,
        lr: f64,
        momentum: f64,
    ) {
        for ((head, g_head), v_head) in self
            .heads
            .iter_mut()
            .zip(&grads.heads)
            .zip(&mut velocity.heads)
        {
            for ((layer, g), v) in head.layers.iter_mut().zip(g_head).zip(v_head.iter_mut()) {
                if momentum == 0.0 {
                    layer.weights.scaled_add(-lr, &g.weights);
                    layer.bias.scaled_add(-lr, &g.bias);
                } else {
                    v.weights
                        .zip_mut_with(&g.weights, |vv, &gg| *vv = momentum * *vv + gg);
                    v.bias
                        .zip_mut_with(&g.bias, |vv, &gg| *vv = momentum * *vv + gg);
                    layer.weights.scaled_add(-lr, &v.weights);
                    layer.bias.scaled_add(-lr, &v.bias);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// SGD momentum; 0 gives plain SGD.
    #[serde(default)]
    pub momentum: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 0.0005,
            patience: 20,
            max_epochs: 1000,
            momentum: 0.0,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::domain("batch_size must be >= 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(
                "learning_rate must be a positive finite number",
            ));
        }
        if self.patience < 1 {
            return Err(Error::domain("patience must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::domain("momentum must lie in [0, 1)"));
        }
        self.loss.validate()
    }
}

/// Features plus one ground-truth vector per head, aligned by row.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub targets: &'a [Vec<f64>],
}

impl<'a> Batch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, targets: &'a [Vec<f64>]) -> Result<Self> {
        if targets.iter().any(|t| t.len() != features.nrows()) {
            return Err(Error::domain(
                "every target vector needs one entry per feature row",
            ));
        }
        Ok(Self { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadLoss {
    pub head: String,
    pub huber: f64,
    pub ranking: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean over batches of the head-averaged combined loss.
    pub train_total: f64,
    pub heads: Vec<HeadLoss>,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map(|e| e.val_loss)
    }

    /// Long-form CSV: `epoch,head,train_huber,train_ranking,train_total,val_loss`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "epoch",
            "head",
            "train_huber",
            "train_ranking",
            "train_total",
            "val_loss",
        ])?;
        for e in &self.epochs {
            for h in &e.heads {
                w.write_record([
                    e.epoch.to_string(),
                    h.head.clone(),
                    h.huber.to_string(),
                    h.ranking.to_string(),
                    e.train_total.to_string(),
                    e.val_loss.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Head-averaged combined loss on a batch, with per-head components and
/// per-head output gradients (already divided by the head count).
pub fn batch_loss(
    reg: &Regressor,
    batch: &Batch<'_>,
    loss: &LossConfig,
) -> Result<(f64, Vec<HeadLoss>, Vec<Array1<f64>>)> {
    if batch.targets.len() != reg.heads.len() {
        return Err(Error::domain(format!(
            "{} target vectors for {} heads",
            batch.targets.len(),
            reg.heads.len()
        )));
    }
    let preds = reg.forward(batch.features)?;
    let scale = 1.0 / reg.heads.len() as f64;
    let mut total = 0.0;
    let mut parts = Vec::with_capacity(reg.heads.len());
    let mut grads = Vec::with_capacity(reg.heads.len());
    for ((head, y), pred) in reg.heads.iter().zip(batch.targets).zip(&preds) {
        let pairs = build_pair_set(y, DEFAULT_TIE_TOLERANCE);
        let pred = pred.as_slice().expect("forward output is contiguous");
        let out = combined_loss(y, pred, &pairs, loss)?;
        total += out.total.value * scale;
        parts.push(HeadLoss {
            head: head.name.clone(),
            huber: out.huber,
            ranking: out.ranking,
        });
        grads.push(Array1::from_iter(
            out.total.grad.into_iter().map(|g| g * scale),
        ));
    }
    Ok((total, parts, grads))
}

/// One SGD step on a batch; returns the pre-step loss and its components.
pub fn sgd_step(
    reg: &mut Regressor,
    batch: &Batch<'_>,
    config: &TrainConfig,
) -> Result<(f64, Vec<HeadLoss>)> {
    let mut velocity = reg.zero_gradients();
    let (value, parts, grads) = batch_loss(reg, batch, &config.loss)?;
    let g = reg.backward(batch.features, &grads)?;
    reg.apply_update(&g, &mut velocity, config.learning_rate, 0.0);
    Ok((value, parts))
}

fn select_rows(batch: &Batch<'_>, rows: &[usize]) -> (Array2<f64>, Vec<Vec<f64>>) {
    let features = batch.features.select(Axis(0), rows);
    let targets = batch
        .targets
        .iter()
        .map(|t| rows.iter().map(|&r| t[r]).collect())
        .collect();
    (features, targets)
}

/// Trains with shuffled mini-batches until `max_epochs` or until the
/// validation loss has not improved for `patience` epochs, then restores the
/// best-validation parameters.
pub fn train(
    mut reg: Regressor,
    train_set: &Batch<'_>,
    val_set: &Batch<'_>,
    config: &TrainConfig,
) -> Result<(Regressor, TrainLog)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::domain(
            "training and validation sets must be nonempty",
        ));
    }
    for (targets, features) in [
        (train_set.targets, train_set.features),
        (val_set.targets, val_set.features),
    ] {
        if targets.len() != reg.heads.len() {
            return Err(Error::domain(
                "target vectors do not match the number of heads",
            ));
        }
        reg.check_features(features)?;
    }

    let mut log = TrainLog::default();
    let mut best = reg.clone();
    let mut best_val = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut velocity = reg.zero_gradients();
    let n_heads = reg.heads.len() as f64;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut head_sums = vec![(0.0, 0.0); reg.heads.len()];
        let mut n_batches = 0usize;
        for rows in order.chunks(config.batch_size) {
            let (features, targets) = select_rows(train_set, rows);
            let batch = Batch::new(features.view(), &targets)?;
            let (value, parts, grads) = batch_loss(&reg, &batch, &config.loss)?;
            let g = reg.backward(batch.features, &grads)?;
            reg.apply_update(&g, &mut velocity, config.learning_rate, config.momentum);
            epoch_total += value;
            for (sum, part) in head_sums.iter_mut().zip(&parts) {
                sum.0 += part.huber;
                sum.1 += part.ranking;
            }
            n_batches += 1;
        }
        if !reg.is_finite() {
            return Err(Error::domain(format!(
                "parameters diverged to non-finite values in epoch {epoch}; lower the learning rate"
            )));
        }
        let (val_loss, _, _) = batch_loss(&reg, val_set, &config.loss)?;
        let nb = n_batches as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train_total: epoch_total / nb,
            heads: reg
                .heads
                .iter()
                .zip(&head_sums)
                .map(|(h, s)| HeadLoss {
                    head: h.name.clone(),
                    huber: s.0 / nb,
                    ranking: s.1 / nb,
                })
                .collect(),
            val_loss,
        });
        log.stopped_epoch = epoch;
        debug!(
            "epoch {epoch}: train {:.6} val {val_loss:.6} ({} heads)",
            epoch_total / nb,
            n_heads
        );
        if val_loss < best_val {
            best_val = val_loss;
            best = reg.clone();
            log.best_epoch = epoch;
        } else if epoch - log.best_epoch >= config.patience {
            info!(
                "early stop at epoch {epoch}; best epoch {} (val {best_val:.6})",
                log.best_epoch
            );
            break;
        }
    }
    if log.best_epoch == 0 {
        return Ok((reg, log));
    }
    Ok((best, log))
}
