//! Training the classifier on the current labeled set, plus batch inference.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{cyborg_sample, CyborgItem, LossConfig};
use crate::nn::{to_chw, BackboneConfig, Gradients, Network};
use crate::probe::{cam_raw, downsample_area, mask_to_map, normalize, normalize_backward};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale minibatch gradients to at most this global L2 norm; 0 disables.
    pub grad_clip: f64,
    pub optimizer: OptimizerKind,
    /// Seeds both the initial weights and the minibatch order, so every
    /// retrain starts from the same parameters.
    pub seed: u64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub backbone: BackboneConfig,
    pub ssim_window: usize,
    pub ssim_raw: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip: 0.0,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
            patience: 5,
            backbone: BackboneConfig::default(),
            ssim_window: 7,
            ssim_raw: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            ssim_window: self.ssim_window,
            ssim_raw: self.ssim_raw,
            ..LossConfig::default()
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        TrainConfig {
            alpha,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.backbone.validate()?;
        self.loss_config().validate()
    }
}

/// A sample prepared for the network: channel-major input and, when the
/// sample carries a mask, that mask area-averaged to feature resolution.
#[derive(Debug, Clone)]
pub struct TrainItem<T> {
    pub input: Array3<T>,
    pub label: usize,
    pub mask: Option<Array2<T>>,
}

impl<T: Scalar> TrainItem<T> {
    pub fn from_sample(sample: &Sample, feature_size: (usize, usize)) -> Self {
        TrainItem {
            input: to_chw(&sample.image),
            label: sample.label,
            mask: sample
                .training_mask()
                .map(|m| downsample_area(mask_to_map::<T>(m).view(), feature_size)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub loss: f64,
    pub cross_entropy: f64,
    pub saliency: f64,
    pub masked: usize,
    pub clamped: usize,
}

fn sample_objective<T: Scalar>(
    net: &Network<T>,
    item: &TrainItem<T>,
    config: &LossConfig,
    grads: Option<&mut Gradients<T>>,
) -> Result<crate::loss::SampleLoss<T>> {
    let trace = net.forward(item.input.view());
    let class_weights = net.head_weight.row(item.label).to_owned();
    let raw = cam_raw(trace.features.view(), &class_weights)?;
    let map = normalize(raw.view());
    let cy = CyborgItem {
        human: item.mask.as_ref().map(|m| m.view()),
        model: map.view(),
        true_prob: trace.probs[item.label],
    };
    let want_grad = grads.is_some();
    let s = cyborg_sample(&cy, config, want_grad)?;
    let Some(grads) = grads else {
        return Ok(s);
    };

    // ∂ log p_y / ∂ logits = onehot(y) − p
    let mut grad_logits: Array1<T> = trace.probs.mapv(|p| -p * s.grad_log_prob);
    grad_logits[item.label] = grad_logits[item.label] + s.grad_log_prob;
    let mut grad_features = net.head_backward(&trace, &grad_logits, grads);

    if let Some(grad_map) = &s.grad_map {
        let grad_raw = normalize_backward(raw.view(), grad_map.view());
        for (k, fmap) in trace.features.axis_iter(Axis(0)).enumerate() {
            let wk = class_weights[k];
            grad_features.index_axis_mut(Axis(0), k).scaled_add(wk, &grad_raw);
            let gw = (&grad_raw * &fmap).sum();
            grads.head_weight[[item.label, k]] = grads.head_weight[[item.label, k]] + gw;
        }
    }
    net.backward(&trace, grad_features, grads);
    Ok(s)
}

fn accumulate<T: Scalar>(stats: &mut ObjectiveStats, s: &crate::loss::SampleLoss<T>) {
    stats.loss += s.loss.as_f64();
    stats.cross_entropy += s.cross_entropy.as_f64();
    if let Some(ls) = s.saliency {
        stats.saliency += ls.as_f64();
        stats.masked += 1;
    }
    stats.clamped += s.clamped as usize;
}

/// Batch-mean objective without gradients.
pub fn batch_objective<T: Scalar>(net: &Network<T>, batch: &[TrainItem<T>], config: &LossConfig) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut total = T::zero();
    for item in batch {
        total = total + sample_objective(net, item, config, None)?.loss;
    }
    Ok(total / T::from_usize_lossy(batch.len()))
}

/// Batch-mean objective and its gradient with respect to every parameter.
pub fn batch_objective_grad<T: Scalar>(
    net: &Network<T>,
    batch: &[TrainItem<T>],
    config: &LossConfig,
) -> Result<(T, Gradients<T>, ObjectiveStats)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut grads = net.zero_grad();
    let mut stats = ObjectiveStats::default();
    let mut total = T::zero();
    for item in batch {
        let s = sample_objective(net, item, config, Some(&mut grads))?;
        total = total + s.loss;
        accumulate(&mut stats, &s);
    }
    let n = T::from_usize_lossy(batch.len());
    grads.scale(T::one() / n);
    stats.loss /= batch.len() as f64;
    stats.cross_entropy /= batch.len() as f64;
    if stats.masked > 0 {
        stats.saliency /= stats.masked as f64;
    }
    Ok((total / n, grads, stats))
}

enum Optimizer<T> {
    Sgd { velocity: Vec<Vec<T>> },
    Adam { m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: i32 },
}

impl<T: Scalar> Optimizer<T> {
    fn new(kind: OptimizerKind, net: &mut Network<T>) -> Self {
        let zeros: Vec<Vec<T>> = net.param_slices_mut().iter().map(|s| vec![T::zero(); s.len()]).collect();
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { velocity: zeros },
            OptimizerKind::Adam => Optimizer::Adam {
                m: zeros.clone(),
                v: zeros,
                step: 0,
            },
        }
    }

    fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, config: &TrainConfig) {
        let lr = T::lit(config.learning_rate);
        let decay = T::lit(config.weight_decay);
        let params = net.param_slices_mut();
        let grads = grads.slices();
        match self {
            Optimizer::Sgd { velocity } => {
                let mu = T::lit(config.momentum);
                for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
                    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        let g = g + decay * *p;
                        *v = mu * *v + g;
                        *p = *p - lr * *v;
                    }
                }
            }
            Optimizer::Adam { m, v, step } => {
                *step += 1;
                let (b1, b2, eps) = (T::lit(0.9), T::lit(0.999), T::lit(1e-8));
                let c1 = T::one() - b1.powi(*step);
                let c2 = T::one() - b2.powi(*step);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g + decay * *p;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *p = *p - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: ObjectiveStats,
    pub val_accuracy: Option<f64>,
    pub val_cross_entropy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Network<T>,
    /// Epoch (1-based) of the returned checkpoint.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub log: Vec<EpochLog>,
}

fn evaluate<T: Scalar>(net: &Network<T>, items: &[TrainItem<T>]) -> (f64, f64) {
    let mut correct = 0usize;
    let mut ce = 0.0;
    for item in items {
        let probs = net.forward(item.input.view()).probs;
        if argmax(&probs) == item.label {
            correct += 1;
        }
        ce -= probs[item.label].as_f64().max(1e-12).ln();
    }
    let n = items.len() as f64;
    (correct as f64 / n, ce / n)
}

pub(crate) fn argmax<T: Scalar>(row: &Array1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains from the fixed initialisation in `config.seed`, minimising the
/// saliency-guided objective at `config.alpha`, and returns the checkpoint
/// with the best validation accuracy (ties go to lower validation
/// cross-entropy).
pub fn train_model<T: Scalar>(
    labeled: &[Sample],
    val: &[Sample],
    num_classes: usize,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let first = labeled
        .first()
        .ok_or_else(|| Error::Config("cannot train on an empty labeled set".into()))?;
    let (h, w, c) = first.image.dim();
    let mut net = Network::<T>::new(c, num_classes, &config.backbone, config.seed)?;
    let feature_size = config.backbone.feature_size(h, w);
    let loss_cfg = config.loss_config();

    let items: Vec<TrainItem<T>> = labeled.iter().map(|s| TrainItem::from_sample(s, feature_size)).collect();
    let val_items: Vec<TrainItem<T>> = val.iter().map(|s| TrainItem::from_sample(s, feature_size)).collect();
    if items.iter().any(|i| i.input.dim() != (c, h, w)) {
        return Err(Error::Config("labeled images differ in size".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5A17_u64.rotate_left(40));
    let mut opt = Optimizer::new(config.optimizer, &mut net);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut best: Option<(f64, f64, usize, Network<T>)> = None;
    let mut since_best = 0;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut stats = ObjectiveStats::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainItem<T>> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, mut grads, s) = batch_objective_grad(&net, &batch, &loss_cfg)?;
            let norm = grads.norm();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch} (alpha {}, lr {}, batch ce {:.4}, saliency {:.4})",
                    config.alpha, config.learning_rate, s.cross_entropy, s.saliency
                )));
            }
            let clip = T::lit(config.grad_clip);
            if config.grad_clip > 0.0 && norm > clip {
                grads.scale(clip / norm);
            }
            opt.step(&mut net, &grads, config);
            stats.loss += s.loss;
            stats.cross_entropy += s.cross_entropy;
            stats.saliency += s.saliency;
            stats.masked += s.masked;
            stats.clamped += s.clamped;
            batches += 1;
        }
        stats.loss /= batches as f64;
        stats.cross_entropy /= batches as f64;
        stats.saliency /= batches as f64;
        if net.has_non_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after epoch {epoch}")));
        }

        let (val_acc, val_ce) = if val_items.is_empty() {
            (None, None)
        } else {
            let (a, ce) = evaluate(&net, &val_items);
            (Some(a), Some(ce))
        };
        log::debug!(
            "epoch {epoch}: loss {:.4} ce {:.4} sal {:.4} val_acc {val_acc:?}",
            stats.loss,
            stats.cross_entropy,
            stats.saliency
        );
        log.push(EpochLog {
            epoch,
            train: stats,
            val_accuracy: val_acc,
            val_cross_entropy: val_ce,
        });

        let Some(acc) = val_acc else { continue };
        let ce = val_ce.unwrap_or(f64::INFINITY);
        let improved = match &best {
            None => true,
            Some((ba, bce, _, _)) => acc > *ba || (acc == *ba && ce < *bce),
        };
        if improved {
            best = Some((acc, ce, epoch, net.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }

    Ok(match best {
        Some((acc, _, epoch, model)) => TrainOutcome {
            model,
            best_epoch: epoch,
            best_val_accuracy: Some(acc),
            log,
        },
        None => TrainOutcome {
            best_epoch: log.len(),
            model: net,
            best_val_accuracy: None,
            log,
        },
    })
}

/// Row-stochastic probability matrix, rows aligned with `samples`.
pub fn predict_probs<T: Scalar>(model: &Network<T>, samples: &[&Sample]) -> Array2<T> {
    let mut out = Array2::zeros((samples.len(), model.head_weight.nrows()));
    for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
        row.assign(&model.forward_image(&s.image).probs);
    }
    out
}

/// Pooled embedding matrix, rows aligned with `samples`.
pub fn embed<T: Scalar>(model: &Network<T>, samples: &[&Sample]) -> Array2<T> {
    let mut out = Array2::zeros((samples.len(), model.embedding_dim()));
    for (mut row, s) in out.rows_mut().into_iter().zip(samples) {
        row.assign(&model.forward_image(&s.image).embedding);
    }
    out
}

/// Probabilities and embeddings from a single forward pass per sample.
pub fn predict_and_embed<T: Scalar>(model: &Network<T>, samples: &[&Sample]) -> (Array2<T>, Array2<T>) {
    let mut probs = Array2::zeros((samples.len(), model.head_weight.nrows()));
    let mut emb = Array2::zeros((samples.len(), model.embedding_dim()));
    for (i, s) in samples.iter().enumerate() {
        let t = model.forward_image(&s.image);
        probs.row_mut(i).assign(&t.probs);
        emb.row_mut(i).assign(&t.embedding);
    }
    (probs, emb)
}
