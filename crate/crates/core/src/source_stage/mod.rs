//! Source pre-training with a calibration term, checkpoint selection by
//! validation ECE, and value-net training on the frozen selected model.

mod valuenet;

use std::fmt::Write as _;

use rand::seq::SliceRandom;

pub use valuenet::{train_value_net, value_metrics_csv, ValueConfig, ValueEpoch, ValueReport};

use crate::autodiff::{Graph, Scalar, Var};
use crate::calibration::{diff_ece_loss, ece_per_image, CalibConfig};
use crate::datagen::{augment, batch_tensor, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{poly_lr, set_stage_masks, ParamSet, Pass, SegModel, Sgd, Stage};
use crate::rng;
use crate::target_stage::ConfusionMatrix;
use crate::IGNORE_LABEL;

/// Mean pixel cross-entropy over non-ignored pixels of `N x C x H x W` logits.
pub fn seg_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[u8]) -> Result<Var> {
    let (n, c, inner) = g.value(logits).class_layout()?;
    if labels.len() != n * inner {
        return Err(Error::Shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            n * inner
        )));
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::Empty("every pixel carries the ignore label".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let index = labels
        .iter()
        .map(|&l| if l == IGNORE_LABEL { 0 } else { l as usize })
        .collect();
    let picked = g.gather(logits, index)?;
    let lse = g.logsumexp(logits, 1.0)?;
    let nll = g.sub(lse, picked)?;
    let w = S::of(1.0 / valid as f64);
    let weights = labels
        .iter()
        .map(|&l| if l == IGNORE_LABEL { S::zero() } else { w })
        .collect();
    g.weighted_sum(nll, weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceConfig {
    /// Weight of the differentiable ECE term.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub poly_power: f64,
    /// Epochs of pure cross-entropy before the ECE term joins.
    pub ece_warmup_epochs: usize,
    pub calib: CalibConfig,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epochs: 20,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr: 5e-4,
            poly_power: 0.9,
            ece_warmup_epochs: 2,
            calib: CalibConfig::default(),
        }
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "epochs must be positive and batch size at least 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.poly_power > 0.0) || !(self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate, power, momentum and decay must be positive".into(),
            ));
        }
        self.calib.validate()
    }
}

/// Summary of per-image ECE over a validation subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EceStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

impl EceStats {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("no per-image ECE values".into()));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self { mean, max, min })
    }

    /// Selection score: penalizes the average and both extremes.
    pub fn score(&self) -> f64 {
        self.mean + self.max + self.min
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceMetrics {
    pub seg_loss: f64,
    pub ece_loss: f64,
    pub source_miou: f64,
}

/// One saved model state with the statistics used to select it.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub stage: Stage,
    /// 1-based.
    pub epoch: usize,
    pub params: ParamSet<f32>,
    pub val_ece: EceStats,
    pub metrics: SourceMetrics,
}

/// Splits a shuffled order into batches of `size`; a trailing batch of one
/// joins the previous batch because batch statistics need two samples.
pub(crate) fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

pub(crate) fn epoch_batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::SHUFFLE, epoch as u64));
    batches(&order, size)
}

pub(crate) fn check_finite(v: f64, epoch: usize, iteration: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            iteration,
            detail: format!("{what} became {v}"),
        })
    }
}

/// Per-image validation ECE and mIoU of the current model.
pub fn evaluate_source(model: &SegModel<f32>, val: &[LabeledImage], bins: usize) -> Result<(EceStats, f64)> {
    let out = model.infer_images(val, 8, false)?;
    let mut eces = Vec::with_capacity(val.len());
    let mut confusion = ConfusionMatrix::new(model.arch.classes);
    for (logits, img) in out.logits.iter().zip(val) {
        eces.extend(ece_per_image(logits, &img.labels, bins)?);
        let pred = crate::calibration::confidence_and_prediction(logits)?.prediction;
        confusion.push(&pred, &img.labels)?;
    }
    Ok((EceStats::from_values(&eces)?, confusion.report().mean))
}

/// Trains on `L_seg + alpha * L_ECE` (the ECE term only after the warm-up
/// epochs) and returns one checkpoint per epoch.
pub fn train_source(
    train: &Dataset,
    val: &Dataset,
    model: &mut SegModel<f32>,
    cfg: &SourceConfig,
    seed: u64,
) -> Result<Vec<CheckpointRecord>> {
    cfg.validate()?;
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Empty(
            "source training needs at least two training and one validation image".into(),
        ));
    }
    set_stage_masks(model, None, Stage::Source);
    let per_epoch = batches(&(0..train.len()).collect::<Vec<_>>(), cfg.batch_size).len();
    let max_iter = per_epoch * cfg.epochs;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut pool = Vec::with_capacity(cfg.epochs);
    let mut iter = 0;
    for epoch in 1..=cfg.epochs {
        let use_ece = cfg.alpha > 0.0 && epoch > cfg.ece_warmup_epochs;
        let mut flips = rng::stream(seed, rng::AUGMENT, epoch as u64);
        let (mut seg_sum, mut ece_sum, mut count) = (0.0, 0.0, 0usize);
        for batch in epoch_batches(train.len(), cfg.batch_size, seed, epoch) {
            let imgs: Vec<LabeledImage> = batch.iter().map(|&i| augment(&train.images[i], &mut flips)).collect();
            let refs: Vec<&LabeledImage> = imgs.iter().collect();
            let (x, labels) = batch_tensor(&refs)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let out = model.forward(&mut g, xv, Pass::Train)?;
            if !g.value(out.logits).all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iteration: iter,
                    detail: "non-finite logits".into(),
                });
            }
            let seg = seg_loss(&mut g, out.logits, &labels)?;
            let ece = diff_ece_loss(&mut g, out.logits, &labels, &cfg.calib)?;
            let loss = if use_ece {
                let scaled = g.unary(ece, crate::autodiff::UnaryKind::Scale(cfg.alpha));
                g.add(seg, scaled)?
            } else {
                seg
            };
            let (seg_v, ece_v) = (g.value(seg).data()[0] as f64, g.value(ece).data()[0] as f64);
            check_finite(seg_v, epoch, iter, "segmentation loss")?;
            check_finite(ece_v, epoch, iter, "calibration loss")?;
            let grads = g.backward(loss)?;
            let lr = poly_lr(cfg.lr, iter, max_iter, cfg.poly_power);
            sgd.step(&mut model.params, &out.leaves, &grads, lr);
            seg_sum += seg_v;
            ece_sum += ece_v;
            count += 1;
            iter += 1;
        }
        let (val_ece, source_miou) = evaluate_source(model, &val.images, cfg.calib.bins)?;
        pool.push(CheckpointRecord {
            stage: Stage::Source,
            epoch,
            params: model.params.clone(),
            val_ece,
            metrics: SourceMetrics {
                seg_loss: seg_sum / count as f64,
                ece_loss: ece_sum / count as f64,
                source_miou,
            },
        });
    }
    Ok(pool)
}

/// Index of the statistics with the smallest `mean + max + min`; the earliest
/// wins ties.
pub fn select_by_ece_stats(stats: &[EceStats]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in stats.iter().enumerate() {
        let score = s.score();
        if best.is_none_or(|(_, b)| score < b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Empty("checkpoint pool is empty".into()))
}

pub fn select_source_checkpoint(pool: &[CheckpointRecord]) -> Result<&CheckpointRecord> {
    let stats: Vec<EceStats> = pool.iter().map(|r| r.val_ece).collect();
    Ok(&pool[select_by_ece_stats(&stats)?])
}

pub const SOURCE_CSV_HEADER: &str = "epoch,L_seg,L_ECE_diff,val_ece_mean,val_ece_max,val_ece_min,source_miou";

pub fn source_metrics_csv(pool: &[CheckpointRecord]) -> String {
    let mut s = String::from(SOURCE_CSV_HEADER);
    s.push('\n');
    for r in pool {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.metrics.seg_loss,
            r.metrics.ece_loss,
            r.val_ece.mean,
            r.val_ece.max,
            r.val_ece.min,
            r.metrics.source_miou
        );
    }
    s
}
