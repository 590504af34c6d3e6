//! Calibration-aware self-training on the unlabeled target domain.
//!
//! Each round scores every target pixel by its confidence scaled with the
//! value net's per-image calibration estimate, keeps the top fraction per
//! class as pseudo-labels, warms up batch-norm statistics for one epoch, and
//! then trains the layers above the feature tap on the pseudo-labels.

mod adapt;
mod losses;
mod metrics;

pub use adapt::{
    adapt, mean_entropy, pseudo_label_round, select_min_entropy, statistic_warmup, target_metrics_csv, AdaptOutcome,
    RoundLabels, TargetCheckpoint, TargetConfig, TargetEpoch,
};
pub use losses::{entropy_loss, negative_loss, sce_loss, target_loss, TargetLoss, NEG_PROB_CAP, RCE_LOG_FLOOR};
pub use metrics::{miou, ConfusionMatrix, MiouReport};

use crate::error::{Error, Result};
use crate::IGNORE_LABEL;

/// Bounds applied to value-net estimates before they scale confidences.
pub const ECE_HAT_RANGE: (f64, f64) = (0.01, 0.99);

/// Confidence discounted by the image's estimated calibration error.
pub fn adjusted_confidence(p: f64, ece_hat: f64) -> f64 {
    (1.0 - ece_hat) * p
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassThresholds {
    /// Per-class threshold on adjusted confidence, in [0, 1].
    pub xi: Vec<f64>,
    /// Softmax of `xi`.
    pub w: Vec<f64>,
}

impl ClassThresholds {
    pub fn from_xi(xi: Vec<f64>) -> Self {
        let max = xi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xi.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let w = exps.iter().map(|e| e / total).collect();
        Self { xi, w }
    }
}

/// Per-class thresholds from adjusted confidences and predicted classes.
///
/// Class `c` with `m` member pixels sorted descending into `R` gets
/// `xi_c = R[min(floor(delta * m), m - 1)]`; classes never predicted get 1.
pub fn compute_class_thresholds(adjusted: &[f64], pred: &[u8], classes: usize, delta: f64) -> Result<ClassThresholds> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidArgument(format!("delta must be in (0, 1], got {delta}")));
    }
    if adjusted.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} confidences for {} predictions",
            adjusted.len(),
            pred.len()
        )));
    }
    if adjusted.is_empty() {
        return Err(Error::Empty("no predictions to threshold".into()));
    }
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); classes];
    for (&p, &c) in adjusted.iter().zip(pred) {
        let bucket = members
            .get_mut(c as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("predicted class {c} out of range for {classes} classes")))?;
        bucket.push(p);
    }
    let xi = members
        .into_iter()
        .map(|mut r| {
            if r.is_empty() {
                return 1.0;
            }
            r.sort_by(|a, b| b.total_cmp(a));
            let m = r.len();
            let k = ((delta * m as f64).floor() as usize).min(m - 1);
            r[k]
        })
        .collect();
    Ok(ClassThresholds::from_xi(xi))
}

/// Which thresholds a pixel passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Provenance {
    Unlabeled = 0,
    Global = 1,
    Local = 2,
    Both = 3,
}

impl Provenance {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Provenance::Unlabeled,
            1 => Provenance::Global,
            2 => Provenance::Local,
            3 => Provenance::Both,
            _ => return None,
        })
    }

    pub fn passed_global(self) -> bool {
        matches!(self, Provenance::Global | Provenance::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    /// Predicted class where a threshold passed, the ignore label elsewhere.
    pub labels: Vec<u8>,
    pub provenance: Vec<Provenance>,
}

impl PseudoLabelMap {
    pub fn labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

/// Pseudo-labels for one image: a pixel predicted as `c` keeps `c` when its
/// adjusted confidence is strictly above the global `xi_c` or above the same
/// top-`delta` threshold computed from this image alone.
pub fn assign_pseudo_labels(
    adjusted: &[f64],
    pred: &[u8],
    global: &ClassThresholds,
    delta: f64,
) -> Result<PseudoLabelMap> {
    let classes = global.xi.len();
    let local = compute_class_thresholds(adjusted, pred, classes, delta)?;
    let mut labels = Vec::with_capacity(pred.len());
    let mut provenance = Vec::with_capacity(pred.len());
    for (&p, &c) in adjusted.iter().zip(pred) {
        let g = p > global.xi[c as usize];
        let l = p > local.xi[c as usize];
        let flag = match (g, l) {
            (true, true) => Provenance::Both,
            (true, false) => Provenance::Global,
            (false, true) => Provenance::Local,
            (false, false) => Provenance::Unlabeled,
        };
        labels.push(if g || l { c } else { IGNORE_LABEL });
        provenance.push(flag);
    }
    Ok(PseudoLabelMap { labels, provenance })
}
