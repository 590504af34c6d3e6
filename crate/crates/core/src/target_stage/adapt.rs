use std::fmt::Write as _;

use crate::autodiff::{BnMode, Graph};
use crate::calibration::confidence_and_prediction;
use crate::datagen::{augment, batch_tensor, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{poly_lr, set_stage_masks, ParamSet, Pass, SegModel, Sgd, Stage, ValueNet};
use crate::rng;
use crate::source_stage::{check_finite, epoch_batches};

use super::losses::target_loss;
use super::ECE_HAT_RANGE;
use super::{adjusted_confidence, assign_pseudo_labels, compute_class_thresholds, ClassThresholds, PseudoLabelMap};

/// Shuffle and flip streams of the target stage sit above the source stage's.
const STREAM_OFFSET: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetConfig {
    /// Fraction of each class's most confident pixels that get pseudo-labels.
    pub delta: f64,
    /// Weight of the weighted cross-entropy inside the symmetric loss.
    pub epsilon: f64,
    /// Weight of the entropy regularizer.
    pub eta: f64,
    pub rounds: usize,
    /// Epochs per round, the first of which is the statistic warm-up.
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            delta: 0.15,
            epsilon: 0.1,
            eta: 0.005,
            rounds: 3,
            epochs_per_round: 3,
            batch_size: 4,
            lr: 5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
        }
    }
}

impl TargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1], got {}", self.delta)));
        }
        if !(self.epsilon >= 0.0 && self.eta >= 0.0) {
            return Err(Error::Config("epsilon and eta must be non-negative".into()));
        }
        if self.epochs_per_round == 0 || self.batch_size < 2 || !(self.lr > 0.0) {
            return Err(Error::Config(
                "epochs per round, batch size >= 2 and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pseudo-labels of one round with the quantities they were derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundLabels {
    pub round: usize,
    pub ece_hat: Vec<f64>,
    pub thresholds: ClassThresholds,
    pub maps: Vec<PseudoLabelMap>,
    /// Per class: labeled pixels over pixels predicted as that class.
    pub labeled_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEpoch {
    pub round: usize,
    /// 1-based within the round; epoch 1 is the warm-up.
    pub epoch: usize,
    pub sce: f64,
    pub neg: f64,
    pub ent: f64,
    /// Evaluation-mode mean per-pixel prediction entropy over the target set.
    pub mean_entropy: f64,
    pub labeled_fraction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetCheckpoint {
    pub round: usize,
    pub epoch: usize,
    pub params: ParamSet<f32>,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub epochs: Vec<TargetEpoch>,
    pub pool: Vec<TargetCheckpoint>,
    /// Index into `pool`; `None` when no adaptation ran.
    pub selected: Option<usize>,
    pub rounds: Vec<RoundLabels>,
}

/// Earliest index of the smallest entropy.
pub fn select_min_entropy(entropies: &[f64]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &e) in entropies.iter().enumerate() {
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((i, e));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Empty("no target checkpoints to select from".into()))
}

/// Mean per-pixel entropy of evaluation-mode predictions.
pub fn mean_entropy(seg: &SegModel<f32>, data: &Dataset) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in data.images.chunks(8) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (x, _) = batch_tensor(&refs)?;
        let (logits, _) = seg.infer(&x)?;
        let (n, c, inner) = logits.class_layout()?;
        let z = logits.data();
        for b in 0..n {
            for s in 0..inner {
                let at = |k: usize| z[(b * c + k) * inner + s] as f64;
                let mx = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = (0..c).map(|k| (at(k) - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                total -= exps
                    .iter()
                    .map(|e| {
                        let p = e / sum;
                        if p > 0.0 {
                            p * p.ln()
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no target pixels".into()));
    }
    Ok(total / count as f64)
}

/// Scores every target pixel with the current models and assigns this
/// round's pseudo-labels.
pub fn pseudo_label_round(
    seg: &SegModel<f32>,
    value: &ValueNet<f32>,
    data: &Dataset,
    delta: f64,
    round: usize,
) -> Result<RoundLabels> {
    let classes = seg.arch.classes;
    let mut ece_hat = Vec::with_capacity(data.len());
    let mut adjusted: Vec<Vec<f64>> = Vec::with_capacity(data.len());
    let mut preds: Vec<Vec<u8>> = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(8) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let (x, _) = batch_tensor(&refs)?;
        let (logits, feature) = seg.infer(&x)?;
        let hats = value.infer(&feature)?;
        let scored = confidence_and_prediction(&logits)?;
        let per = scored.pixels_per_image;
        for (i, &h) in hats.iter().enumerate() {
            let h = h.clamp(ECE_HAT_RANGE.0, ECE_HAT_RANGE.1);
            ece_hat.push(h);
            let range = i * per..(i + 1) * per;
            adjusted.push(
                scored.confidence[range.clone()]
                    .iter()
                    .map(|&p| adjusted_confidence(p, h))
                    .collect(),
            );
            preds.push(scored.prediction[range].to_vec());
        }
    }
    let all_adjusted: Vec<f64> = adjusted.iter().flatten().copied().collect();
    let all_preds: Vec<u8> = preds.iter().flatten().copied().collect();
    let thresholds = compute_class_thresholds(&all_adjusted, &all_preds, classes, delta)?;
    let maps = adjusted
        .iter()
        .zip(&preds)
        .map(|(a, p)| assign_pseudo_labels(a, p, &thresholds, delta))
        .collect::<Result<Vec<_>>>()?;
    let mut predicted = vec![0usize; classes];
    let mut labeled = vec![0usize; classes];
    for (m, p) in maps.iter().zip(&preds) {
        for (&l, &c) in m.labels.iter().zip(p) {
            predicted[c as usize] += 1;
            labeled[c as usize] += (l == c) as usize;
        }
    }
    let labeled_fraction = labeled
        .iter()
        .zip(&predicted)
        .map(|(&l, &p)| if p == 0 { 0.0 } else { l as f64 / p as f64 })
        .collect();
    Ok(RoundLabels {
        round,
        ece_hat,
        thresholds,
        maps,
        labeled_fraction,
    })
}

struct EpochCtx<'a> {
    data: &'a Dataset,
    labels: &'a RoundLabels,
    cfg: &'a TargetConfig,
    seed: u64,
    /// Global epoch counter, used to key random streams.
    stream: usize,
    iter: &'a mut usize,
    max_iter: usize,
    sgd: &'a mut Sgd,
}

fn run_epoch(
    seg: &mut SegModel<f32>,
    mut value: Option<&mut ValueNet<f32>>,
    pass: Pass,
    ctx: EpochCtx<'_>,
) -> Result<(f64, f64, f64)> {
    let EpochCtx {
        data,
        labels,
        cfg,
        seed,
        stream,
        iter,
        max_iter,
        sgd,
    } = ctx;
    let key = STREAM_OFFSET + stream;
    let mut flips = rng::stream(seed, rng::AUGMENT, key as u64);
    let mut negatives = rng::stream(seed, rng::NEGATIVE_SAMPLING, stream as u64);
    let (mut sce_sum, mut neg_sum, mut ent_sum) = (0.0, 0.0, 0.0);
    let (mut labeled_batches, mut batches) = (0usize, 0usize);
    for batch in epoch_batches(data.len(), cfg.batch_size, seed, key) {
        let imgs: Vec<LabeledImage> = batch
            .iter()
            .map(|&i| {
                let with_pseudo = LabeledImage {
                    labels: labels.maps[i].labels.clone(),
                    ..data.images[i].clone()
                };
                augment(&with_pseudo, &mut flips)
            })
            .collect();
        let refs: Vec<&LabeledImage> = imgs.iter().collect();
        let (x, pseudo) = batch_tensor(&refs)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = seg.forward(&mut g, xv, pass)?;
        if let Some(v) = value.as_deref_mut() {
            v.forward(&mut g, out.feature, BnMode::StatOnly)?;
        }
        if !g.value(out.logits).all_finite() {
            return Err(Error::Diverged {
                epoch: stream + 1,
                iteration: *iter,
                detail: "non-finite logits during adaptation".into(),
            });
        }
        let loss = target_loss(
            &mut g,
            out.logits,
            &pseudo,
            &labels.thresholds.w,
            cfg.epsilon,
            cfg.eta,
            &mut negatives,
        )?;
        let total = g.value(loss.total).data()[0] as f64;
        check_finite(total, stream + 1, *iter, "target loss")?;
        if let (Some(s), Some(n)) = (loss.sce, loss.neg) {
            sce_sum += g.value(s).data()[0] as f64;
            neg_sum += g.value(n).data()[0] as f64;
            labeled_batches += 1;
        }
        ent_sum += g.value(loss.ent).data()[0] as f64;
        batches += 1;
        let grads = g.backward(loss.total)?;
        let lr = poly_lr(cfg.lr, *iter, max_iter, cfg.poly_power);
        sgd.step(&mut seg.params, &out.leaves, &grads, lr);
        *iter += 1;
    }
    let avg = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((
        avg(sce_sum, labeled_batches),
        avg(neg_sum, labeled_batches),
        avg(ent_sum, batches),
    ))
}

fn require_warmup_mask(seg: &SegModel<f32>, value: &ValueNet<f32>) -> Result<()> {
    let ok = |set: &ParamSet<f32>| set.params.iter().all(|p| p.trainable == p.role.is_bn_affine());
    if ok(&seg.params) && ok(&value.params) {
        Ok(())
    } else {
        Err(Error::StageMask(
            "statistic warm-up requires the warmup stage mask".into(),
        ))
    }
}

/// One epoch that refreshes batch-norm running statistics of both networks
/// and steps only the batch-norm affine parameters on the target loss.
///
/// Returns the batch-averaged `(L_sce, L_neg, L_ent)`.
pub fn statistic_warmup(
    seg: &mut SegModel<f32>,
    value: &mut ValueNet<f32>,
    data: &Dataset,
    labels: &RoundLabels,
    cfg: &TargetConfig,
    lr: f64,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    require_warmup_mask(seg, value)?;
    let mut iter = 0;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let flat = TargetConfig {
        poly_power: 1.0,
        lr,
        ..cfg.clone()
    };
    run_epoch(
        seg,
        Some(value),
        Pass::Warmup,
        EpochCtx {
            data,
            labels,
            cfg: &flat,
            seed,
            stream: 0,
            iter: &mut iter,
            max_iter: 0,
            sgd: &mut sgd,
        },
    )
}

/// Rounds of pseudo-labeling, warm-up and self-training. The model is left at
/// the checkpoint with the lowest mean prediction entropy.
pub fn adapt(
    data: &Dataset,
    seg: &mut SegModel<f32>,
    value: &mut ValueNet<f32>,
    cfg: &TargetConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Empty("adaptation needs at least two target images".into()));
    }
    let per_epoch = epoch_batches(data.len(), cfg.batch_size, seed, 0).len();
    let max_iter = per_epoch * cfg.epochs_per_round * cfg.rounds;
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut iter = 0;
    let mut out = AdaptOutcome {
        epochs: Vec::new(),
        pool: Vec::new(),
        selected: None,
        rounds: Vec::new(),
    };
    let mut stream = 0;
    for round in 1..=cfg.rounds {
        let labels = pseudo_label_round(seg, value, data, cfg.delta, round)?;
        for epoch in 1..=cfg.epochs_per_round {
            let warm = epoch == 1;
            set_stage_masks(seg, Some(value), if warm { Stage::Warmup } else { Stage::Adapt });
            let ctx = EpochCtx {
                data,
                labels: &labels,
                cfg,
                seed,
                stream,
                iter: &mut iter,
                max_iter,
                sgd: &mut sgd,
            };
            let (sce, neg, ent) = if warm {
                require_warmup_mask(seg, value)?;
                run_epoch(seg, Some(value), Pass::Warmup, ctx)?
            } else {
                run_epoch(seg, None, Pass::Adapt, ctx)?
            };
            stream += 1;
            let entropy = mean_entropy(seg, data)?;
            out.epochs.push(TargetEpoch {
                round,
                epoch,
                sce,
                neg,
                ent,
                mean_entropy: entropy,
                labeled_fraction: labels.labeled_fraction.clone(),
            });
            out.pool.push(TargetCheckpoint {
                round,
                epoch,
                params: seg.params.clone(),
                mean_entropy: entropy,
            });
        }
        out.rounds.push(labels);
    }
    set_stage_masks(seg, Some(value), Stage::Adapt);
    if !out.pool.is_empty() {
        let entropies: Vec<f64> = out.pool.iter().map(|c| c.mean_entropy).collect();
        let best = select_min_entropy(&entropies)?;
        seg.params.load_from(&out.pool[best].params)?;
        out.selected = Some(best);
    }
    Ok(out)
}

pub fn target_metrics_csv(epochs: &[TargetEpoch], classes: usize) -> String {
    let mut s = String::from("round,epoch,L_sce,L_neg,L_ent,mean_entropy");
    for c in 0..classes {
        let _ = write!(s, ",labeled_frac_{c}");
    }
    s.push('\n');
    for e in epochs {
        let _ = write!(
            s,
            "{},{},{},{},{},{}",
            e.round, e.epoch, e.sce, e.neg, e.ent, e.mean_entropy
        );
        for f in &e.labeled_fraction {
            let _ = write!(s, ",{f}");
        }
        s.push('\n');
    }
    s
}
