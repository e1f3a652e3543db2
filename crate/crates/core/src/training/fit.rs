use std::collections::HashMap;
use std::time::Instant;

use ndarray::{ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{detection_loss_graph, domain_loss_graph, LossBreakdown};
use super::targets::{assign_targets, ImageTargets};
use crate::data::Sample;
use crate::detector::Model;
use crate::error::{MarsError, Result};
use crate::graph::{apply_bn_updates, BnUpdate, Graph, Mode};
use crate::params::{ParamId, Tensor};

/// Momentum of the batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the domain cross-entropy in the total loss.
    pub domain_loss_weight: f64,
    pub seed: u64,
    pub ignore_iou_threshold: f64,
    /// Train the domain branch through a gradient-reversal layer.
    pub adversarial_domain: bool,
    pub grad_clip: Option<f64>,
    /// Checkpoint every this many epochs (the final epoch is always emitted).
    pub checkpoint_interval: Option<usize>,
    /// Evaluate mAP every this many epochs, when an evaluator is supplied.
    pub eval_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 300,
            domain_loss_weight: 0.1,
            seed: 0,
            ignore_iou_threshold: 0.5,
            adversarial_domain: false,
            grad_clip: None,
            checkpoint_interval: None,
            eval_interval: None,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            v.push("train.epochs must be >= 1".into());
        }
        if !(self.domain_loss_weight >= 0.0) {
            v.push("train.domain_loss_weight must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.ignore_iou_threshold) {
            v.push("train.ignore_iou_threshold must lie in [0, 1]".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            v.push("train.grad_clip must be > 0 when set".into());
        }
        if self.checkpoint_interval == Some(0) || self.eval_interval == Some(0) {
            v.push("train intervals must be >= 1 when set".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MarsError::Config(v))
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map: Option<f64>,
    pub wall_time_s: f64,
}

/// Hooks invoked by [`fit`].
pub trait TrainObserver {
    fn epoch_end(&mut self, _record: &EpochRecord, _model: &Model) -> Result<()> {
        Ok(())
    }

    /// Called at the checkpoint interval and after the last epoch.
    fn checkpoint(&mut self, _epoch: usize, _model: &Model, _optimizer: &Adam) -> Result<()> {
        Ok(())
    }

    /// Periodic mAP; `None` when no evaluator is attached.
    fn evaluate(&mut self, _model: &Model) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Observer that does nothing.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Stack `[3, S, S]` images into `[N, 3, S, S]`.
pub fn stack_images(batch: &[&Sample]) -> Result<ArrayD<f64>> {
    let views: Vec<_> = batch.iter().map(|s| s.image.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views).map_err(|e| MarsError::Structural(e.to_string()))?;
    Ok(stacked.into_dyn())
}

/// Loss, parameter gradients and running-stat updates for one batch in
/// train mode. The model is not modified.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: HashMap<ParamId, Tensor>,
    pub bn_updates: Vec<BnUpdate>,
}

pub fn compute_gradients(model: &Model, batch: &[&Sample], cfg: &TrainConfig) -> Result<StepResult> {
    let images = stack_images(batch)?;
    let mut g = Graph::new();
    let x = g.input(images);
    let reverse = cfg.adversarial_domain.then_some(1.0);
    let fv = model.forward_graph(&mut g, x, Mode::Train, reverse)?;
    let items: Vec<ImageTargets<'_>> = batch
        .iter()
        .map(|s| ImageTargets {
            image_id: &s.id,
            objects: &s.objects,
        })
        .collect();
    let targets = assign_targets(&items, model.config(), cfg.ignore_iou_threshold)?;
    let (det, lb) = detection_loss_graph(&mut g, fv.raw, &targets)?;
    let (total, lb) = match fv.domain_logits {
        Some(logits) => {
            let labels: Vec<usize> = batch.iter().map(|s| s.domain_id).collect();
            let dom = domain_loss_graph(&mut g, &logits, &labels)?;
            let dval = g.value(dom).sum();
            let total = g.combine(&[(det, 1.0), (dom, cfg.domain_loss_weight)]);
            (total, lb.with_domain(dval, cfg.domain_loss_weight))
        }
        None => (det, lb),
    };
    g.backward(total)?;
    Ok(StepResult {
        loss: lb,
        grads: g.param_grads(),
        bn_updates: g.bn_updates().to_vec(),
    })
}

/// One optimisation step on `batch`.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    batch: &[&Sample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let r = compute_gradients(model, batch, cfg)?;
    if !r.loss.is_finite() {
        return Err(MarsError::Diverged(format!(
            "non-finite loss {:?} on batch [{}]",
            r.loss,
            batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(", ")
        )));
    }
    optimizer.step(model.store_mut(), &r.grads, cfg.grad_clip);
    apply_bn_updates(model.store_mut(), &r.bn_updates, BN_MOMENTUM);
    Ok(r.loss)
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let k = 1.0 / parts.len().max(1) as f64;
    parts
        .iter()
        .fold(LossBreakdown::default(), |acc, p| LossBreakdown {
            box_loss: acc.box_loss + k * p.box_loss,
            objectness_loss: acc.objectness_loss + k * p.objectness_loss,
            class_loss: acc.class_loss + k * p.class_loss,
            domain_loss: acc.domain_loss + k * p.domain_loss,
            total: acc.total + k * p.total,
        })
}

#[derive(Debug, Clone)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub steps: usize,
}

/// Train for `cfg.epochs` epochs of `ceil(N / batch_size)` steps each.
///
/// The sample order is reshuffled every epoch from a generator seeded with
/// `cfg.seed`, so two runs with the same inputs produce the same parameters.
pub fn fit(
    model: &mut Model,
    data: &[Sample],
    cfg: &TrainConfig,
    optimizer: &mut Adam,
    observer: &mut dyn TrainObserver,
) -> Result<History> {
    if data.is_empty() {
        return Err(MarsError::Data("training set is empty".into()));
    }
    cfg.validate()?;
    optimizer.learning_rate = cfg.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let lb = train_step(model, optimizer, &batch, cfg).map_err(|e| match e {
                MarsError::Diverged(m) => MarsError::Diverged(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            })?;
            parts.push(lb);
            steps += 1;
        }
        let map = match cfg.eval_interval {
            Some(k) if epoch % k == 0 || epoch == cfg.epochs => observer.evaluate(model)?,
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            loss: mean_breakdown(&parts),
            map,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        observer.epoch_end(&record, model)?;
        records.push(record);
        let due = cfg.checkpoint_interval.is_some_and(|k| epoch % k == 0);
        if due || epoch == cfg.epochs {
            observer.checkpoint(epoch, model, optimizer)?;
        }
    }
    Ok(History { records, steps })
}
