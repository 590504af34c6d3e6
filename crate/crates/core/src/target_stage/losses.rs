use rand::Rng;

use crate::autodiff::{Graph, Scalar, UnaryKind, Var};
use crate::error::{Error, Result};
use crate::IGNORE_LABEL;

/// Floor on the one-hot target inside the reverse cross-entropy logarithm.
pub const RCE_LOG_FLOOR: f64 = 1e-4;
/// Cap on a complementary-class probability inside `-ln(1 - f)`.
pub const NEG_PROB_CAP: f64 = 1.0 - 1e-7;

fn labeled_count(pseudo: &[u8]) -> Result<usize> {
    match pseudo.iter().filter(|&&l| l != IGNORE_LABEL).count() {
        0 => Err(Error::Empty("no pseudo-labeled pixels".into())),
        n => Ok(n),
    }
}

fn check_labels<S: Scalar>(g: &Graph<S>, x: Var, pseudo: &[u8]) -> Result<(usize, usize, usize)> {
    let (n, c, inner) = g.value(x).class_layout()?;
    if pseudo.len() != n * inner {
        return Err(Error::Shape(format!(
            "{} pseudo-labels for {} pixels",
            pseudo.len(),
            n * inner
        )));
    }
    if let Some(&bad) = pseudo.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= c) {
        return Err(Error::InvalidArgument(format!(
            "pseudo-label {bad} out of range for {c} classes"
        )));
    }
    Ok((n, c, inner))
}

/// `epsilon * L_wCE + L_rCE` over pseudo-labeled pixels of `N x C x ...`
/// logits, both averaged over the labeled pixel count.
///
/// The weighted term is `-w_c ln f_c`, computed in log-softmax form. The
/// reverse term is `-sum_k f_k ln y_k` with `ln 0` floored at
/// `ln RCE_LOG_FLOOR`, which reduces to `-ln(RCE_LOG_FLOOR) * (1 - f_c)`.
pub fn sce_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, pseudo: &[u8], w: &[f64], epsilon: f64) -> Result<Var> {
    let (_, c, _) = check_labels(g, logits, pseudo)?;
    if w.len() != c {
        return Err(Error::Shape(format!("{} class weights for {c} classes", w.len())));
    }
    let n = labeled_count(pseudo)? as f64;
    let index: Vec<usize> = pseudo
        .iter()
        .map(|&l| if l == IGNORE_LABEL { 0 } else { l as usize })
        .collect();

    let picked_logit = g.gather(logits, index.clone())?;
    let lse = g.logsumexp(logits, 1.0)?;
    let nll = g.sub(lse, picked_logit)?;
    let wce_weights = pseudo
        .iter()
        .map(|&l| {
            if l == IGNORE_LABEL {
                S::zero()
            } else {
                S::of(w[l as usize] / n)
            }
        })
        .collect();
    let wce = g.weighted_sum(nll, wce_weights)?;

    let a = -RCE_LOG_FLOOR.ln();
    let probs = g.softmax(logits)?;
    let picked_prob = g.gather(probs, index)?;
    let rce_weights = pseudo
        .iter()
        .map(|&l| if l == IGNORE_LABEL { S::zero() } else { S::of(-a / n) })
        .collect();
    let rce = g.weighted_sum(picked_prob, rce_weights)?;
    let rce = g.unary(rce, UnaryKind::AddConst(a));

    let wce = g.unary(wce, UnaryKind::Scale(epsilon));
    g.add(wce, rce)
}

/// Mean over pixels of `-sum_k f_k ln f_k`, with `0 ln 0 = 0`.
pub fn entropy_loss<S: Scalar>(g: &mut Graph<S>, probs: Var) -> Result<Var> {
    let (n, _, inner) = g.value(probs).class_layout()?;
    let xlx = g.unary(probs, UnaryKind::XLogX);
    let len = g.value(xlx).len();
    g.weighted_sum(xlx, vec![S::of(-1.0 / (n * inner) as f64); len])
}

/// Mean over pseudo-labeled pixels of `-ln(1 - f_neg)`, where the negative
/// class is drawn uniformly from the classes other than the pseudo-label.
pub fn negative_loss<S: Scalar, R: Rng>(g: &mut Graph<S>, probs: Var, pseudo: &[u8], rng: &mut R) -> Result<Var> {
    let (_, c, _) = check_labels(g, probs, pseudo)?;
    if c < 2 {
        return Err(Error::InvalidArgument(
            "negative learning needs at least two classes".into(),
        ));
    }
    let n = labeled_count(pseudo)? as f64;
    let index = pseudo
        .iter()
        .map(|&l| {
            if l == IGNORE_LABEL {
                return 0;
            }
            let k = rng.random_range(0..c - 1);
            if k >= l as usize {
                k + 1
            } else {
                k
            }
        })
        .collect();
    let picked = g.gather(probs, index)?;
    let flipped = g.unary(picked, UnaryKind::Scale(-1.0));
    let complement = g.unary(flipped, UnaryKind::AddConst(1.0));
    let log = g.unary(complement, UnaryKind::LogFloor(1.0 - NEG_PROB_CAP));
    let weights = pseudo
        .iter()
        .map(|&l| if l == IGNORE_LABEL { S::zero() } else { S::of(-1.0 / n) })
        .collect();
    g.weighted_sum(log, weights)
}

/// Terms of the adaptation objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct TargetLoss {
    /// `L_sce + L_neg + eta * L_ent`.
    pub total: Var,
    /// Absent when the batch carries no pseudo-labels.
    pub sce: Option<Var>,
    pub neg: Option<Var>,
    pub ent: Var,
}

pub fn target_loss<S: Scalar, R: Rng>(
    g: &mut Graph<S>,
    logits: Var,
    pseudo: &[u8],
    w: &[f64],
    epsilon: f64,
    eta: f64,
    rng: &mut R,
) -> Result<TargetLoss> {
    let probs = g.softmax(logits)?;
    let ent = entropy_loss(g, probs)?;
    let reg = g.unary(ent, UnaryKind::Scale(eta));
    if pseudo.iter().all(|&l| l == IGNORE_LABEL) {
        return Ok(TargetLoss {
            total: reg,
            sce: None,
            neg: None,
            ent,
        });
    }
    let sce = sce_loss(g, logits, pseudo, w, epsilon)?;
    let neg = negative_loss(g, probs, pseudo, rng)?;
    let sum = g.add(sce, neg)?;
    let total = g.add(sum, reg)?;
    Ok(TargetLoss {
        total,
        sce: Some(sce),
        neg: Some(neg),
        ent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng;

    fn two_class_pixel() -> (Graph<f64>, Var) {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![1, 2, 1], vec![4f64.ln(), 0.0]).unwrap());
        (g, z)
    }

    #[test]
    fn sce_hand_example() {
        let (mut g, z) = two_class_pixel();
        let v = sce_loss(&mut g, z, &[0], &[0.5, 0.5], 0.1).unwrap();
        assert!((g.value(v).data()[0] - 1.853225251960947).abs() < 1e-6);
        let (mut g, z) = two_class_pixel();
        let wce = sce_loss(&mut g, z, &[0], &[0.5, 0.5], 1.0).unwrap();
        let (mut g2, z2) = two_class_pixel();
        let rce = sce_loss(&mut g2, z2, &[0], &[0.5, 0.5], 0.0).unwrap();
        let (wce, rce) = (g.value(wce).data()[0], g2.value(rce).data()[0]);
        assert!((rce - 1.842068074395237).abs() < 1e-12);
        assert!((wce - rce - 0.11157177565710488).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::new(vec![2, 2, 1], vec![80.0, 0.0, 0.0, 80.0]).unwrap());
        let sce = sce_loss(&mut g, z, &[0, 1], &[0.3, 0.7], 0.1).unwrap();
        let p = g.softmax(z).unwrap();
        let ent = entropy_loss(&mut g, p).unwrap();
        assert!(g.value(sce).data()[0].abs() < 1e-12);
        assert!(g.value(ent).data()[0].abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(vec![1, 2, 1], vec![0.8, 0.2]).unwrap());
        let e = entropy_loss(&mut g, p).unwrap();
        assert!((g.value(e).data()[0] - 0.5004024235381879).abs() < 1e-12);
        let u = g.constant(Tensor::full(&[3, 4, 2], 0.25));
        let e = entropy_loss(&mut g, u).unwrap();
        assert!((g.value(e).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn negative_loss_examples() {
        let mut r = rng::stream(0, rng::NEGATIVE_SAMPLING, 0);
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(vec![1, 2, 1], vec![0.95, 0.05]).unwrap());
        let v = negative_loss(&mut g, p, &[0], &mut r).unwrap();
        assert!((g.value(v).data()[0] - 0.05129329438755053).abs() < 1e-12);
        let p = g.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap());
        let v = negative_loss(&mut g, p, &[0], &mut r).unwrap();
        assert_eq!(g.value(v).data()[0], 0.0);
        let p = g.constant(Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap());
        let v = negative_loss(&mut g, p, &[0], &mut r).unwrap();
        assert!((g.value(v).data()[0] - 1e-7f64.ln().abs()).abs() < 1e-9);
        let one = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
        assert!(negative_loss(&mut g, one, &[0], &mut r).is_err());
    }

    #[test]
    fn losses_need_labeled_pixels() {
        let (mut g, z) = two_class_pixel();
        assert!(matches!(
            sce_loss(&mut g, z, &[IGNORE_LABEL], &[0.5, 0.5], 0.1),
            Err(Error::Empty(_))
        ));
        let mut r = rng::stream(0, rng::NEGATIVE_SAMPLING, 0);
        let t = target_loss(&mut g, z, &[IGNORE_LABEL], &[0.5, 0.5], 0.1, 0.005, &mut r).unwrap();
        assert!(t.sce.is_none() && t.neg.is_none());
    }
}
