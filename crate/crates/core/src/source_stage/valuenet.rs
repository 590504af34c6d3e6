use std::fmt::Write as _;

use crate::autodiff::{BnMode, Graph, Tensor, UnaryKind};
use crate::calibration::ece_per_image;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{concat_batch, poly_lr, SegModel, Sgd, ValueNet};

use super::{check_finite, epoch_batches};

/// Shuffle streams of the value net sit above those of the source stage.
const STREAM_OFFSET: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub bins: usize,
}

impl Default for ValueConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            bins: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEpoch {
    pub epoch: usize,
    pub train_match: f64,
    pub val_match: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueReport {
    pub epochs: Vec<ValueEpoch>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Variance of the validation targets: the loss of the best constant.
    pub val_variance: f64,
    pub val_targets: Vec<f64>,
}

impl ValueReport {
    pub fn best_val_match(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_match
    }
}

fn mse(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

fn predict(value: &ValueNet<f32>, features: &[Tensor<f32>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(8) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        out.extend(value.infer(&concat_batch(&refs)?)?);
    }
    Ok(out)
}

/// Features at the tap and per-image ECE targets of a frozen model.
fn targets(seg: &SegModel<f32>, data: &Dataset, bins: usize) -> Result<(Vec<Tensor<f32>>, Vec<f64>)> {
    let out = seg.infer_images(&data.images, 8, true)?;
    let mut eces = Vec::with_capacity(data.len());
    for (logits, img) in out.logits.iter().zip(&data.images) {
        eces.extend(ece_per_image(logits, &img.labels, bins)?);
    }
    Ok((out.features, eces))
}

/// Fits the value net to per-image ECE of the frozen segmentation model and
/// keeps the epoch with the lowest validation matching loss.
pub fn train_value_net(
    train: &Dataset,
    val: &Dataset,
    seg: &SegModel<f32>,
    value: &mut ValueNet<f32>,
    cfg: &ValueConfig,
    seed: u64,
) -> Result<ValueReport> {
    if seg.params.trainable_count() != 0 {
        return Err(Error::StageMask(
            "segmentation parameters must be frozen while the value net trains".into(),
        ));
    }
    if cfg.epochs == 0 || cfg.batch_size < 2 || !(cfg.lr > 0.0) {
        return Err(Error::Config(
            "value net needs positive epochs, learning rate and batch size >= 2".into(),
        ));
    }
    if train.len() < 2 || val.is_empty() {
        return Err(Error::Empty(
            "value net needs at least two training and one validation image".into(),
        ));
    }
    let (train_x, train_y) = targets(seg, train, cfg.bins)?;
    let (val_x, val_y) = targets(seg, val, cfg.bins)?;
    let val_mean = val_y.iter().sum::<f64>() / val_y.len() as f64;
    let val_variance = val_y.iter().map(|v| (v - val_mean) * (v - val_mean)).sum::<f64>() / val_y.len() as f64;

    // Start from the best constant predictor of the training targets.
    let train_mean = (train_y.iter().sum::<f64>() / train_y.len() as f64).clamp(1e-3, 1.0 - 1e-3);
    value.set_head_bias((train_mean / (1.0 - train_mean)).ln());

    let per_epoch = epoch_batches(train.len(), cfg.batch_size, seed, STREAM_OFFSET).len();
    let max_iter = per_epoch * cfg.epochs;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ValueNet<f32>)> = None;
    let mut iter = 0;
    for epoch in 1..=cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in epoch_batches(train.len(), cfg.batch_size, seed, STREAM_OFFSET + epoch) {
            let parts: Vec<&Tensor<f32>> = batch.iter().map(|&i| &train_x[i]).collect();
            let target: Vec<f64> = batch.iter().map(|&i| train_y[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(concat_batch(&parts)?);
            let out = value.forward(&mut g, x, BnMode::Train)?;
            let t = g.constant(Tensor::from_f64(&[batch.len()], &target)?);
            let diff = g.sub(out.ece_hat, t)?;
            let sq = g.unary(diff, UnaryKind::Square);
            let loss = g.mean(sq);
            let lv = g.value(loss).data()[0] as f64;
            check_finite(lv, epoch, iter, "matching loss")?;
            let grads = g.backward(loss)?;
            sgd.step(
                &mut value.params,
                &out.leaves,
                &grads,
                poly_lr(cfg.lr, iter, max_iter, cfg.poly_power),
            );
            sum += lv * batch.len() as f64;
            count += batch.len();
            iter += 1;
        }
        let val_match = mse(&predict(value, &val_x)?, &val_y);
        check_finite(val_match, epoch, iter, "validation matching loss")?;
        history.push(ValueEpoch {
            epoch,
            train_match: sum / count as f64,
            val_match,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_match < *b) {
            best = Some((epoch, val_match, value.clone()));
        }
    }
    let (best_epoch, _, kept) = best.expect("at least one epoch");
    *value = kept;
    Ok(ValueReport {
        epochs: history,
        best_epoch,
        val_variance,
        val_targets: val_y,
    })
}

pub fn value_metrics_csv(report: &ValueReport) -> String {
    let mut s = String::from("epoch,train_L_match,val_L_match\n");
    for e in &report.epochs {
        let _ = writeln!(s, "{},{},{}", e.epoch, e.train_match, e.val_match);
    }
    s
}
