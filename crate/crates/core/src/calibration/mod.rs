//! Expected calibration error, reliability diagrams, and a differentiable
//! ECE surrogate for training.
//!
//! Confidences are binned into `M` fixed-width bins `((m-1)/M, m/M]`, with a
//! confidence of exactly 0 going to the first bin. The ECE is
//! `sum_m |B_m|/n * |acc(B_m) - conf(B_m)|`.
//!
//! ```
//! use calsfda::calibration::compute_ece;
//!
//! let (ece, diagram) = compute_ece(&[0.9, 0.8, 0.7, 0.6], &[true, true, false, false], 1).unwrap();
//! assert!((ece - 0.25).abs() < 1e-12);
//! assert_eq!(diagram.n, 4);
//! ```

mod export;

pub use export::{export_reliability, read_reliability_csv, render_reliability_svg};

use crate::autodiff::{Graph, Scalar, Tensor, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::IGNORE_LABEL;

/// Calibration settings shared by measurement and the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibConfig {
    /// Number of confidence bins.
    pub bins: usize,
    /// Logsumexp temperature used to smooth the max over class probabilities.
    pub temperature: f64,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            temperature: 1e-5,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::InvalidArgument("bin count must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence, 0 for an empty bin.
    pub conf: f64,
    /// Accuracy, 0 for an empty bin.
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityDiagram {
    pub bins: Vec<Bin>,
    /// Total sample count, equal to the sum of bin counts.
    pub n: usize,
}

impl ReliabilityDiagram {
    pub fn ece(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let n = self.n as f64;
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * (b.acc - b.conf).abs())
            .sum()
    }
}

/// Index of the bin `((m-1)/M, m/M]` holding `conf`, clamped into range.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let m = bins as f64;
    let mut idx = (conf * m).ceil().clamp(1.0, m) as usize;
    if idx > 1 && conf <= (idx - 1) as f64 / m {
        idx -= 1;
    }
    idx - 1
}

/// Streaming accumulation of a reliability diagram.
#[derive(Debug, Clone)]
pub struct EceAccumulator {
    count: Vec<usize>,
    conf_sum: Vec<f64>,
    correct: Vec<usize>,
}

impl EceAccumulator {
    pub fn new(bins: usize) -> Self {
        Self {
            count: vec![0; bins],
            conf_sum: vec![0.0; bins],
            correct: vec![0; bins],
        }
    }

    pub fn push(&mut self, conf: f64, correct: bool) {
        let b = bin_index(conf, self.count.len());
        self.count[b] += 1;
        self.conf_sum[b] += conf;
        self.correct[b] += correct as usize;
    }

    pub fn total(&self) -> usize {
        self.count.iter().sum()
    }

    pub fn finish(&self) -> ReliabilityDiagram {
        let m = self.count.len();
        let bins = (0..m)
            .map(|i| {
                let c = self.count[i];
                let (conf, acc) = if c == 0 {
                    (0.0, 0.0)
                } else {
                    (self.conf_sum[i] / c as f64, self.correct[i] as f64 / c as f64)
                };
                Bin {
                    lo: i as f64 / m as f64,
                    hi: (i + 1) as f64 / m as f64,
                    count: c,
                    conf,
                    acc,
                }
            })
            .collect();
        ReliabilityDiagram { bins, n: self.total() }
    }
}

/// ECE and reliability diagram of a set of predictions.
pub fn compute_ece(confidence: &[f64], correct: &[bool], bins: usize) -> Result<(f64, ReliabilityDiagram)> {
    if confidence.is_empty() {
        return Err(Error::Empty("no samples to measure calibration on".into()));
    }
    if confidence.len() != correct.len() {
        return Err(Error::Shape(format!(
            "{} confidences but {} correctness flags",
            confidence.len(),
            correct.len()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bin count must be at least 1".into()));
    }
    let mut acc = EceAccumulator::new(bins);
    for (&c, &ok) in confidence.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
        }
        acc.push(c, ok);
    }
    let diagram = acc.finish();
    Ok((diagram.ece(), diagram))
}

/// Per-pixel maximum softmax probability and arg-max class, ordered `(n, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelPredictions {
    pub confidence: Vec<f64>,
    pub prediction: Vec<u8>,
    pub images: usize,
    pub pixels_per_image: usize,
}

/// Confidence is the maximum class probability; ties go to the lowest class.
pub fn confidence_and_prediction<S: Scalar>(logits: &Tensor<S>) -> Result<PixelPredictions> {
    let (n, c, inner) = logits.class_layout()?;
    if c == 0 || c > 255 {
        return Err(Error::Shape(format!("class axis of size {c} unsupported")));
    }
    let z = logits.data();
    let mut confidence = Vec::with_capacity(n * inner);
    let mut prediction = Vec::with_capacity(n * inner);
    for b in 0..n {
        for s in 0..inner {
            let at = |k: usize| z[(b * c + k) * inner + s].as_f64();
            let mut best = 0;
            for k in 1..c {
                if at(k) > at(best) {
                    best = k;
                }
            }
            let mx = at(best);
            let total: f64 = (0..c).map(|k| (at(k) - mx).exp()).sum();
            confidence.push(1.0 / total);
            prediction.push(best as u8);
        }
    }
    Ok(PixelPredictions {
        confidence,
        prediction,
        images: n,
        pixels_per_image: inner,
    })
}

/// Differentiable ECE over the non-ignored pixels of a batch.
///
/// Each pixel's confidence is the tempered logsumexp of its softmax
/// probabilities, a smooth upper bound on the max within `t ln C`. Bin
/// membership and per-bin accuracy are fixed from the forward values; the
/// gradient flows through the per-bin mean confidences.
pub fn diff_ece_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[u8], cfg: &CalibConfig) -> Result<Var> {
    cfg.validate()?;
    let (n, c, inner) = g.value(logits).class_layout()?;
    if labels.len() != n * inner {
        return Err(Error::Shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            n * inner
        )));
    }
    let probs = g.softmax(logits)?;
    let conf = g.logsumexp(probs, cfg.temperature)?;

    let p = g.value(probs).data();
    let cv = g.value(conf).data();
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(Error::Empty("every pixel carries the ignore label".into()));
    }
    let inv_n = 1.0 / valid as f64;

    let mut member = vec![usize::MAX; n * inner];
    let mut count = vec![0usize; cfg.bins];
    let mut correct = vec![0usize; cfg.bins];
    for (pos, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        if label as usize >= c {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let (b, s) = (pos / inner, pos % inner);
        let mut best = 0;
        for k in 1..c {
            if p[(b * c + k) * inner + s] > p[(b * c + best) * inner + s] {
                best = k;
            }
        }
        let bin = bin_index(cv[pos].as_f64().clamp(0.0, 1.0), cfg.bins);
        member[pos] = bin;
        count[bin] += 1;
        correct[bin] += (best == label as usize) as usize;
    }

    let mut total: Option<Var> = None;
    for bin in 0..cfg.bins {
        if count[bin] == 0 {
            continue;
        }
        let weights = member
            .iter()
            .map(|&m| if m == bin { S::of(inv_n) } else { S::zero() })
            .collect();
        // (1/n) sum_{i in B} conf_i - |B|/n * acc(B)
        let conf_mass = g.weighted_sum(conf, weights)?;
        let acc_mass = correct[bin] as f64 * inv_n;
        let gap = g.unary(conf_mass, UnaryKind::AddConst(-acc_mass));
        let term = g.unary(gap, UnaryKind::Abs);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("at least one non-empty bin"))
}

/// ECE computed independently for every image of an `N x C x H x W` batch.
pub fn ece_per_image<S: Scalar>(logits: &Tensor<S>, labels: &[u8], bins: usize) -> Result<Vec<f64>> {
    let preds = confidence_and_prediction(logits)?;
    let per = preds.pixels_per_image;
    if labels.len() != preds.images * per {
        return Err(Error::Shape(format!(
            "{} labels for {} pixels",
            labels.len(),
            preds.images * per
        )));
    }
    (0..preds.images)
        .map(|i| {
            let range = i * per..(i + 1) * per;
            let mut acc = EceAccumulator::new(bins);
            for pos in range {
                if labels[pos] == IGNORE_LABEL {
                    continue;
                }
                acc.push(preds.confidence[pos], preds.prediction[pos] == labels[pos]);
            }
            if acc.total() == 0 {
                return Err(Error::Empty(format!("image {i} has no labeled pixels")));
            }
            Ok(acc.finish().ece())
        })
        .collect()
}
