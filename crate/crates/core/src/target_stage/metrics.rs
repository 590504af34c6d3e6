use crate::error::{Error, Result};
use crate::IGNORE_LABEL;

/// Pixel confusion counts, `counts[truth][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Adds one prediction map; pixels whose label is the ignore value are skipped.
    pub fn push(&mut self, pred: &[u8], labels: &[u8]) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                labels.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(labels) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(Error::InvalidArgument(format!(
                    "class index {} out of range for {} classes",
                    p.max(t),
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Per-class IoU; `None` for classes absent from both prediction and truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let fn_: u64 = (0..c).filter(|&j| j != k).map(|j| self.count(k, j)).sum();
                let fp: u64 = (0..c).filter(|&j| j != k).map(|j| self.count(j, k)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn report(&self) -> MiouReport {
        let iou = self.iou();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { iou, mean }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub iou: Vec<Option<f64>>,
    /// Mean over classes present in prediction or truth.
    pub mean: f64,
}

pub fn miou(pred: &[u8], labels: &[u8], classes: usize) -> Result<MiouReport> {
    let mut m = ConfusionMatrix::new(classes);
    m.push(pred, labels)?;
    Ok(m.report())
}
