//! Optimization: AdamW, cosine learning-rate schedule, the per-bag training
//! step and the epoch loop with best-checkpoint selection.

mod adamw;
mod log;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adamw::AdamW;
pub use log::{EpochRecord, TrainLog};

use crate::error::{Error, Result};
use crate::eval::{auc_binary, auc_macro};
use crate::model::{abmil_forward, AbmilState, Checkpointable, ModelState, PreparedGraph};
use crate::objective::{classification_loss, srmil_objective, LossBreakdown, LossWeights};
use crate::rng::{stream, Stream};
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMetric {
    /// Highest validation AUC, ties broken by lower validation loss.
    ValAuc,
    /// Lowest validation loss, ties broken by higher validation AUC.
    ValLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub eta_min: f64,
    pub loss_weights: LossWeights,
    pub mask_ratio: f64,
    pub seed: u64,
    pub checkpoint_metric: CheckpointMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 100,
            eta_min: 0.0,
            loss_weights: LossWeights::default(),
            mask_ratio: 0.7,
            seed: 0,
            checkpoint_metric: CheckpointMetric::ValAuc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.eta_min.is_finite() && (0.0..=self.lr).contains(&self.eta_min)) {
            return Err(Error::Config(format!("eta_min must lie in [0, lr], got {}", self.eta_min)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio must lie in [0, 1], got {}", self.mask_ratio)));
        }
        self.loss_weights.validate()
    }
}

/// `eta_min + ½(lr_max − eta_min)(1 + cos(πt/T))`, with `t` clamped to `[0, T]`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, eta_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let frac = t.min(total) as f64 / total as f64;
    eta_min + 0.5 * (lr_max - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One bag's recorded training loss.
#[derive(Clone, Debug)]
pub struct StepGraph {
    /// Parameter handles in the model's traversal order.
    pub params: Vec<TensorId>,
    pub total: TensorId,
    pub breakdown: LossBreakdown,
}

/// Complete-view prediction for one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction {
    pub logits: Vec<f64>,
    /// The pooling attention row used for diagnostics.
    pub attention: Vec<f64>,
}

/// A bag classifier the training loop can optimize.
pub trait MilModel: Checkpointable + Clone + Send + Sync {
    fn record_objective(
        &self,
        tape: &mut Tape,
        graph: &PreparedGraph,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepGraph>;

    fn predict(&self, graph: &PreparedGraph) -> Result<BagPrediction>;
}

impl MilModel for ModelState {
    fn record_objective(
        &self,
        tape: &mut Tape,
        graph: &PreparedGraph,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepGraph> {
        let obj = srmil_objective(tape, self, graph, cfg.mask_ratio, &cfg.loss_weights, rng)?;
        Ok(StepGraph {
            params: obj.params.flatten(),
            total: obj.total,
            breakdown: obj.breakdown,
        })
    }

    fn predict(&self, graph: &PreparedGraph) -> Result<BagPrediction> {
        let out = self.forward_bag(graph)?;
        Ok(BagPrediction {
            logits: out.logits,
            attention: out.global_attention,
        })
    }
}

impl MilModel for AbmilState {
    fn record_objective(
        &self,
        tape: &mut Tape,
        graph: &PreparedGraph,
        _cfg: &TrainConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<StepGraph> {
        let p = self.bind(tape, true);
        let x = tape.constant(graph.features.clone());
        let out = abmil_forward(tape, &p, x)?;
        let total = classification_loss(tape, out.logits, graph.label)?;
        let loss = tape.value(total).item();
        Ok(StepGraph {
            params: vec![
                p.embed_weight,
                p.embed_bias,
                p.attn_weight,
                p.attn_bias,
                p.attn_vector,
                p.cls_weight,
                p.cls_bias,
            ],
            total,
            breakdown: LossBreakdown {
                comp: loss,
                total: loss,
                ..LossBreakdown::default()
            },
        })
    }

    fn predict(&self, graph: &PreparedGraph) -> Result<BagPrediction> {
        let (logits, attention, _) = self.forward_bag(&graph.features)?;
        Ok(BagPrediction { logits, attention })
    }
}

/// Forward, backward and one optimizer update on a single bag.
pub fn train_step<M: MilModel>(
    model: &mut M,
    opt: &mut AdamW,
    graph: &PreparedGraph,
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let step = model.record_objective(&mut tape, graph, cfg, rng)?;
    let grads = tape.backward(step.total)?;
    let grads: Vec<Tensor> = step.params.iter().map(|&id| grads.get_or_zeros(id, &tape)).collect();
    opt.step(model, &grads, lr)?;
    Ok(step.breakdown)
}

/// Validation summary on the complete graphs, without masking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub loss: f64,
    pub auc: Option<f64>,
    pub accuracy: f64,
    /// Share of bags whose largest attention weight is at least 0.5.
    pub high_attention_share: f64,
}

/// Predictions for every bag, computed in parallel and returned in input order.
pub fn predict_all<M: MilModel>(model: &M, graphs: &[PreparedGraph]) -> Result<Vec<BagPrediction>> {
    graphs.par_iter().map(|g| model.predict(g)).collect()
}

fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    (lse - logits[label]).max(0.0)
}

pub fn validate<M: MilModel>(model: &M, graphs: &[PreparedGraph]) -> Result<ValMetrics> {
    if graphs.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let preds = predict_all(model, graphs)?;
    let n = graphs.len() as f64;
    let labels: Vec<usize> = graphs.iter().map(|g| g.label).collect();
    let loss = preds
        .iter()
        .zip(&labels)
        .map(|(p, &y)| cross_entropy_value(&p.logits, y))
        .sum::<f64>()
        / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    let correct = preds
        .iter()
        .zip(&labels)
        .filter(|(p, &y)| crate::model::argmax(&p.logits) == y)
        .count();
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| crate::model::softmax(&p.logits)).collect();
    let auc = if probs[0].len() == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        auc_binary(&scores, &positive).ok()
    } else {
        auc_macro(&probs, &labels).ok()
    };
    let high = preds
        .iter()
        .filter(|p| p.attention.iter().copied().fold(0.0, f64::max) >= 0.5)
        .count();
    Ok(ValMetrics {
        loss,
        auc,
        accuracy: correct as f64 / n,
        high_attention_share: high as f64 / n,
    })
}

/// Whether `cand` beats `best` under `metric`.
pub fn improves(metric: CheckpointMetric, cand: &ValMetrics, best: &ValMetrics) -> bool {
    let auc_order = match (cand.auc, best.auc) {
        (Some(a), Some(b)) => a.partial_cmp(&b),
        (Some(_), None) => Some(std::cmp::Ordering::Greater),
        (None, Some(_)) => Some(std::cmp::Ordering::Less),
        (None, None) => Some(std::cmp::Ordering::Equal),
    };
    let lower_loss = cand.loss < best.loss;
    match metric {
        CheckpointMetric::ValAuc => match auc_order {
            Some(std::cmp::Ordering::Greater) => true,
            Some(std::cmp::Ordering::Equal) => lower_loss,
            _ => false,
        },
        CheckpointMetric::ValLoss => {
            lower_loss || (cand.loss == best.loss && auc_order == Some(std::cmp::Ordering::Greater))
        }
    }
}

/// Trains from `model` and returns the best validation snapshot with its log.
pub fn fit<M: MilModel>(
    model: M,
    train: &[PreparedGraph],
    val: &[PreparedGraph],
    cfg: &TrainConfig,
) -> Result<(M, TrainLog)> {
    fit_with(model, train, val, cfg, &mut |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<M: MilModel>(
    mut model: M,
    train: &[PreparedGraph],
    val: &[PreparedGraph],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(M, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and validation splits (got {} and {})",
            train.len(),
            val.len()
        )));
    }
    let mut opt = AdamW::new(&model, cfg.weight_decay);
    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut mask_rng = stream(cfg.seed, Stream::Mask);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(M, ValMetrics)> = None;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.eta_min);
        order.shuffle(&mut shuffle_rng);
        let mut losses = Vec::with_capacity(order.len());
        for &i in &order {
            let step = train_step(&mut model, &mut opt, &train[i], cfg, lr, &mut mask_rng).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch}, bag {}: {what}", train[i].bag_id)),
                other => other,
            })?;
            losses.push(step);
        }
        let metrics = validate(&model, val)?;
        let better = best
            .as_ref()
            .is_none_or(|(_, b)| improves(cfg.checkpoint_metric, &metrics, b));
        if better {
            best = Some((model.clone(), metrics));
            log.best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train: LossBreakdown::mean(&losses),
            val: metrics,
        };
        on_epoch(&record);
        log.epochs.push(record);
        log.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    let (best, _) = best.expect("at least one epoch ran");
    Ok((best, log))
}
