//! Checks shared by the focused integration tests and the acceptance run.
//! Each returns `Ok(detail)` on success and `Err(reason)` otherwise.
#![allow(dead_code)]

use calsfda::autodiff::{BinaryKind, BnMode, ChannelStats, Graph, Tensor, UnaryKind, Var};
use calsfda::calibration::{compute_ece, confidence_and_prediction, diff_ece_loss, CalibConfig};
use calsfda::datagen::{generate_domain, DomainSpec};
use calsfda::model::{set_stage_masks, SegArch, SegModel, Stage, ValueArch, ValueNet};
use calsfda::rng;
use calsfda::source_stage::{select_by_ece_stats, train_value_net, EceStats, ValueConfig};
use calsfda::target_stage::{
    assign_pseudo_labels, compute_class_thresholds, entropy_loss, pseudo_label_round, sce_loss, select_min_entropy,
    statistic_warmup, TargetConfig, RCE_LOG_FLOOR,
};
use calsfda::IGNORE_LABEL;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

fn ensure(ok: bool, reason: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(reason())
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Values in `[lo, hi]` kept at least `gap` away from `kink`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kink: f64, gap: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if (v - kink).abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> calsfda::Result<Var>;

/// Worst relative error `|a - n| / max(|a|, |n|)` (vector norms) between
/// reverse-mode and central-difference gradients, over the inputs listed in
/// `check`.
pub fn gradient_error(inputs: &[Tensor<f64>], check: &[usize], h: f64, build: &Build) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for &i in check {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            numeric.push((up - down) / (2.0 * h));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        worst = worst.max(if scale < 1e-12 { diff } else { diff / scale });
    }
    worst
}

/// Contracts `out` with fixed random weights so every output element
/// contributes to the scalar loss.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> calsfda::Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = (0..g.value(out).len()).map(|_| r.random_range(-1.0..1.0)).collect();
    g.weighted_sum(out, w)
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    /// Inputs whose gradient is compared.
    pub check: Vec<usize>,
    pub build: Box<Build>,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, check: Vec<usize>, build: Box<Build>) -> OpCase {
    OpCase {
        name,
        inputs,
        check,
        build,
    }
}

fn unary_case(name: &'static str, x: Tensor<f64>, kind: UnaryKind, seed: u64) -> OpCase {
    case(
        name,
        vec![x],
        vec![0],
        Box::new(move |g, v| {
            let y = g.unary(v[0], kind);
            project(g, y, seed)
        }),
    )
}

fn binary_case(name: &'static str, a: Tensor<f64>, b: Tensor<f64>, kind: BinaryKind, seed: u64) -> OpCase {
    case(
        name,
        vec![a, b],
        vec![0, 1],
        Box::new(move |g, v| {
            let y = g.binary(v[0], v[1], kind)?;
            project(g, y, seed)
        }),
    )
}

fn bn_case(name: &'static str, rng: &mut ChaCha8Rng, mode: BnMode, check: Vec<usize>, seed: u64) -> OpCase {
    let x = random_tensor(rng, &[2, 3, 3, 2], -2.0, 2.0);
    let gamma = random_tensor(rng, &[3], 0.5, 1.5);
    let beta = random_tensor(rng, &[3], -0.5, 0.5);
    let running = ChannelStats {
        mean: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
        var: (0..3).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    case(
        name,
        vec![x, gamma, beta],
        check,
        Box::new(move |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], &running, mode, 1e-5)?;
            project(g, y, seed)
        }),
    )
}

/// One random instance of every operator, drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let s = seed.wrapping_mul(31);
    let shape = [2, 3, 2, 2];
    let mut out = Vec::new();

    let x = random_tensor(&mut r, &[2, 2, 4, 4], -1.0, 1.0);
    let w = random_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let b = random_tensor(&mut r, &[3], -0.5, 0.5);
    out.push(case(
        "conv2d",
        vec![x.clone(), w.clone(), b],
        vec![0, 1, 2],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            project(g, y, s)
        }),
    ));
    out.push(case(
        "conv2d without bias",
        vec![x, w],
        vec![0, 1],
        Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], None)?;
            project(g, y, s)
        }),
    ));
    out.push(bn_case("batch_norm train", &mut r, BnMode::Train, vec![0, 1, 2], s));
    out.push(bn_case("batch_norm eval", &mut r, BnMode::Eval, vec![0, 1, 2], s));
    // Batch statistics are constants by design, so only the affine
    // parameters have a true derivative to compare against.
    out.push(bn_case(
        "batch_norm stat-only affine",
        &mut r,
        BnMode::StatOnly,
        vec![1, 2],
        s,
    ));

    out.push(unary_case(
        "relu",
        away_from(&mut r, &shape, -2.0, 2.0, 0.0, 1e-2),
        UnaryKind::Relu,
        s,
    ));
    out.push(unary_case(
        "sigmoid",
        random_tensor(&mut r, &shape, -4.0, 4.0),
        UnaryKind::Sigmoid,
        s,
    ));
    out.push(unary_case(
        "abs",
        away_from(&mut r, &shape, -2.0, 2.0, 0.0, 1e-2),
        UnaryKind::Abs,
        s,
    ));
    out.push(unary_case(
        "square",
        random_tensor(&mut r, &shape, -2.0, 2.0),
        UnaryKind::Square,
        s,
    ));
    let k = r.random_range(-3.0..3.0);
    out.push(unary_case(
        "scale",
        random_tensor(&mut r, &shape, -2.0, 2.0),
        UnaryKind::Scale(k),
        s,
    ));
    out.push(unary_case(
        "add_const",
        random_tensor(&mut r, &shape, -2.0, 2.0),
        UnaryKind::AddConst(k),
        s,
    ));
    out.push(unary_case(
        "log_floor",
        away_from(&mut r, &shape, 0.01, 2.0, 0.1, 1e-2),
        UnaryKind::LogFloor(0.1),
        s,
    ));
    out.push(unary_case(
        "x_log_x",
        random_tensor(&mut r, &shape, 0.05, 2.0),
        UnaryKind::XLogX,
        s,
    ));

    for (name, kind) in [
        ("add", BinaryKind::Add),
        ("sub", BinaryKind::Sub),
        ("mul", BinaryKind::Mul),
    ] {
        let a = random_tensor(&mut r, &shape, -2.0, 2.0);
        let b = random_tensor(&mut r, &shape, -2.0, 2.0);
        out.push(binary_case(name, a, b, kind, s));
    }

    out.push(case(
        "softmax",
        vec![random_tensor(&mut r, &shape, -3.0, 3.0)],
        vec![0],
        Box::new(move |g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, s)
        }),
    ));
    let t = r.random_range(0.2..2.0);
    out.push(case(
        "logsumexp",
        vec![random_tensor(&mut r, &shape, -3.0, 3.0)],
        vec![0],
        Box::new(move |g, v| {
            let y = g.logsumexp(v[0], t)?;
            project(g, y, s)
        }),
    ));
    let index: Vec<usize> = (0..8).map(|_| r.random_range(0..3)).collect();
    out.push(case(
        "gather",
        vec![random_tensor(&mut r, &shape, -2.0, 2.0)],
        vec![0],
        Box::new(move |g, v| {
            let y = g.gather(v[0], index.clone())?;
            project(g, y, s)
        }),
    ));
    out.push(case(
        "weighted_sum",
        vec![random_tensor(&mut r, &shape, -2.0, 2.0)],
        vec![0],
        Box::new(move |g, v| project(g, v[0], s)),
    ));
    out.push(case(
        "sum of squares",
        vec![random_tensor(&mut r, &shape, -2.0, 2.0)],
        vec![0],
        Box::new(|g, v| {
            let sq = g.unary(v[0], UnaryKind::Square);
            Ok(g.sum(sq))
        }),
    ));
    out.push(case(
        "mean of squares",
        vec![random_tensor(&mut r, &shape, -2.0, 2.0)],
        vec![0],
        Box::new(|g, v| {
            let sq = g.unary(v[0], UnaryKind::Square);
            Ok(g.mean(sq))
        }),
    ));
    out.push(case(
        "linear",
        vec![
            random_tensor(&mut r, &[3, 4], -1.0, 1.0),
            random_tensor(&mut r, &[2, 4], -1.0, 1.0),
            random_tensor(&mut r, &[2], -1.0, 1.0),
        ],
        vec![0, 1, 2],
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            project(g, y, s)
        }),
    ));
    out.push(case(
        "global_avg_pool",
        vec![random_tensor(&mut r, &[2, 3, 3, 2], -2.0, 2.0)],
        vec![0],
        Box::new(move |g, v| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y, s)
        }),
    ));
    out.push(case(
        "reshape",
        vec![random_tensor(&mut r, &shape, -2.0, 2.0)],
        vec![0],
        Box::new(move |g, v| {
            let y = g.reshape(v[0], vec![4, 6])?;
            let y = g.unary(y, UnaryKind::Square);
            project(g, y, s)
        }),
    ));
    out
}

pub const OP_TOLERANCE: f64 = 1e-5;
pub const ECE_GRAD_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

/// Every operator on `instances` random draws.
pub fn check_operator_gradients(instances: u64) -> Check {
    let mut worst = (0.0, "");
    for seed in 0..instances {
        for c in op_cases(seed) {
            let err = gradient_error(&c.inputs, &c.check, FD_STEP, &*c.build);
            ensure(err <= OP_TOLERANCE, || {
                format!("{} instance {seed}: relative error {err:.3e}", c.name)
            })?;
            if err > worst.0 {
                worst = (err, c.name);
            }
        }
    }
    let ops = op_cases(0).len();
    Ok(format!(
        "{ops} operators x {instances} instances, worst {:.2e} ({})",
        worst.0, worst.1
    ))
}

/// Logits whose confidences sit clear of bin edges and whose top two
/// probabilities differ by at least `min_gap`, so small perturbations move
/// no pixel across a bin or an argmax boundary.
pub fn well_separated_logits(
    r: &mut ChaCha8Rng,
    shape: [usize; 4],
    bins: usize,
    min_gap: f64,
    t: f64,
) -> (Tensor<f64>, Vec<u8>) {
    let [n, c, h, w] = shape;
    let inner = h * w;
    let mut data = vec![0.0; n * c * inner];
    let mut labels = vec![0u8; n * inner];
    for b in 0..n {
        for p in 0..inner {
            loop {
                let z: Vec<f64> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
                let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                let mut probs: Vec<f64> = e.iter().map(|v| v / tot).collect();
                probs.sort_by(|a, b| b.total_cmp(a));
                let lse_conf = probs[0] + t * probs.iter().map(|q| ((q - probs[0]) / t).exp()).sum::<f64>().ln();
                let edge = (lse_conf * bins as f64).round() / bins as f64;
                if probs[0] - probs[1] >= min_gap && (lse_conf - edge).abs() > 1e-3 {
                    for k in 0..c {
                        data[(b * c + k) * inner + p] = z[k];
                    }
                    labels[b * inner + p] = r.random_range(0..c) as u8;
                    break;
                }
            }
        }
    }
    (Tensor::new(vec![n, c, h, w], data).unwrap(), labels)
}

pub fn check_diff_ece_gradient(instances: u64) -> Check {
    let cfg = CalibConfig {
        bins: 10,
        temperature: 1e-2,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (logits, labels) = well_separated_logits(&mut r, [2, 3, 3, 3], cfg.bins, 0.05, cfg.temperature);
        let build = move |g: &mut Graph<f64>, v: &[Var]| diff_ece_loss(g, v[0], &labels, &cfg);
        let err = gradient_error(&[logits], &[0], FD_STEP, &build);
        ensure(err <= ECE_GRAD_TOLERANCE, || {
            format!("instance {seed}: relative error {err:.3e}")
        })?;
        worst = worst.max(err);
    }
    Ok(format!("{instances} instances at t = 1e-2, worst {worst:.2e}"))
}

pub fn check_ece_oracles() -> Check {
    let (e, _) = compute_ece(&[0.9, 0.8, 0.7, 0.6], &[true, true, false, false], 1).map_err(|e| e.to_string())?;
    ensure((e - 0.25).abs() <= 1e-9, || format!("M=1 quartet gave {e}"))?;
    let (e, _) = compute_ece(&[0.95, 0.95], &[true, false], 10).map_err(|e| e.to_string())?;
    ensure((e - 0.45).abs() <= 1e-9, || format!("M=10 pair gave {e}"))?;
    let (e, _) = compute_ece(&[1.0; 7], &[true; 7], 10).map_err(|e| e.to_string())?;
    ensure(e == 0.0, || format!("all-correct confidence 1 gave {e}"))?;
    // Bin (0.7, 0.8] at confidence 0.75 with 3 of 4 correct; bin (0.4, 0.5]
    // at 0.45 with 9 of 20 correct.
    let mut conf = vec![0.75; 4];
    let mut ok = vec![true, true, true, false];
    conf.extend(std::iter::repeat_n(0.45, 20));
    ok.extend((0..20).map(|i| i < 9));
    let (e, _) = compute_ece(&conf, &ok, 10).map_err(|e| e.to_string())?;
    ensure(e.abs() <= 1e-12, || format!("calibrated fixture gave {e}"))?;
    Ok("quartet 0.25, pair 0.45, calibrated fixtures 0".into())
}

pub fn check_diff_ece_consistency(batches: u64) -> Check {
    let cfg = CalibConfig {
        bins: 10,
        temperature: 1e-5,
    };
    let mut worst: f64 = 0.0;
    for seed in 0..batches {
        let mut r = ChaCha8Rng::seed_from_u64(5000 + seed);
        let (logits, labels) = well_separated_logits(&mut r, [2, 4, 4, 4], cfg.bins, 0.01, cfg.temperature);
        let preds = confidence_and_prediction(&logits).map_err(|e| e.to_string())?;
        let correct: Vec<bool> = preds.prediction.iter().zip(&labels).map(|(p, l)| p == l).collect();
        let (hard, _) = compute_ece(&preds.confidence, &correct, cfg.bins).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let z = g.constant(logits);
        let soft = diff_ece_loss(&mut g, z, &labels, &cfg).map_err(|e| e.to_string())?;
        let gap = (g.value(soft).data()[0] - hard).abs();
        ensure(gap <= 1e-3, || format!("batch {seed}: |diff - hard| = {gap:.3e}"))?;
        worst = worst.max(gap);
    }
    Ok(format!("{batches} batches, worst gap {worst:.2e}"))
}

/// Distinct adjusted confidences spread over several images.
fn random_prediction_set(r: &mut ChaCha8Rng, classes: usize) -> (Vec<Vec<f64>>, Vec<Vec<u8>>) {
    let images = r.random_range(1..5);
    let per = r.random_range(8..40);
    let mut values: Vec<f64> = (0..images * per)
        .map(|i| (i as f64 + 0.5) / (images * per) as f64)
        .collect();
    values.shuffle(r);
    let conf: Vec<Vec<f64>> = values.chunks(per).map(<[f64]>::to_vec).collect();
    let pred = (0..images)
        .map(|_| (0..per).map(|_| r.random_range(0..classes) as u8).collect())
        .collect();
    (conf, pred)
}

pub fn check_pseudo_label_ratio(sets: u64) -> Check {
    let classes = 4;
    for seed in 0..sets {
        let mut r = ChaCha8Rng::seed_from_u64(9000 + seed);
        let (conf, pred) = random_prediction_set(&mut r, classes);
        let flat_c: Vec<f64> = conf.concat();
        let flat_p: Vec<u8> = pred.concat();
        for delta in [0.15, 0.5, 1.0] {
            let global = compute_class_thresholds(&flat_c, &flat_p, classes, delta).map_err(|e| e.to_string())?;
            let mut labeled = vec![0usize; classes];
            for (c, p) in conf.iter().zip(&pred) {
                let map = assign_pseudo_labels(c, p, &global, delta).map_err(|e| e.to_string())?;
                for (flag, &cls) in map.provenance.iter().zip(p) {
                    labeled[cls as usize] += flag.passed_global() as usize;
                }
            }
            for (c, &got) in labeled.iter().enumerate() {
                let m = flat_p.iter().filter(|&&p| p as usize == c).count();
                let expect = if m == 0 {
                    0
                } else {
                    ((delta * m as f64).floor() as usize).min(m - 1)
                };
                ensure(got == expect, || {
                    format!("set {seed}, delta {delta}, class {c}: {got} labeled, expected {expect} of {m}")
                })?;
            }
        }
    }
    Ok(format!("{sets} prediction sets x delta in {{0.15, 0.5, 1.0}}"))
}

pub fn check_loss_identities() -> Check {
    let value = |f: &dyn Fn(&mut Graph<f64>, Var) -> calsfda::Result<Var>, logits: &Tensor<f64>| {
        let mut g = Graph::new();
        let z = g.constant(logits.clone());
        let v = f(&mut g, z).unwrap();
        g.value(v).data()[0]
    };
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let a = -RCE_LOG_FLOOR.ln();
    for _ in 0..20 {
        let logits = random_tensor(&mut r, &[2, 3, 2, 2], -3.0, 3.0);
        let labels: Vec<u8> = (0..8)
            .map(|_| {
                if r.random_bool(0.25) {
                    IGNORE_LABEL
                } else {
                    r.random_range(0..3)
                }
            })
            .collect();
        if labels.iter().all(|&l| l == IGNORE_LABEL) {
            continue;
        }
        let w = [0.2, 0.3, 0.5];
        let sce0 = value(&|g, z| sce_loss(g, z, &labels, &w, 0.0), &logits);
        let preds = {
            let mut g = Graph::new();
            let z = g.constant(logits.clone());
            let p = g.softmax(z).unwrap();
            g.value(p).to_f64_vec()
        };
        let (n, inner) = (2, 4);
        let mut rce = 0.0;
        let mut count = 0.0;
        for b in 0..n {
            for s in 0..inner {
                let l = labels[b * inner + s];
                if l != IGNORE_LABEL {
                    rce += a * (1.0 - preds[(b * 3 + l as usize) * inner + s]);
                    count += 1.0;
                }
            }
        }
        let rce = rce / count;
        ensure((sce0 - rce).abs() <= 1e-12, || {
            format!("epsilon 0 gave {sce0}, reverse CE alone {rce}")
        })?;
    }

    let onehot = Tensor::from_f64(&[2, 2, 1, 1], &[80.0, 0.0, 0.0, 80.0]).unwrap();
    let labels = [0u8, 1];
    let w = [0.4, 0.6];
    let rce = value(&|g, z| sce_loss(g, z, &labels, &w, 0.0), &onehot);
    let wce = value(&|g, z| sce_loss(g, z, &labels, &w, 1.0), &onehot) - rce;
    let ent = value(
        &|g, z| {
            let p = g.softmax(z)?;
            entropy_loss(g, p)
        },
        &onehot,
    );
    ensure(rce.abs() < 1e-12 && wce.abs() < 1e-12 && ent.abs() < 1e-12, || {
        format!("one-hot fixture gave wCE {wce}, rCE {rce}, entropy {ent}")
    })?;

    let pixel = Tensor::from_f64(&[1, 2, 1], &[4f64.ln(), 0.0]).unwrap();
    let sce = value(&|g, z| sce_loss(g, z, &[0], &[0.5, 0.5], 0.1), &pixel);
    ensure(
        (sce - 1.85322).abs() <= 1e-5 && (sce - 1.853225251960947).abs() <= 1e-6,
        || format!("two-class example gave {sce}"),
    )?;
    Ok(format!(
        "epsilon 0 identity on 20 batches, one-hot zeros, worked example {sce:.6}"
    ))
}

fn tiny_domain(n: usize, seed: u64, target: bool) -> calsfda::datagen::Dataset {
    let base = if target {
        DomainSpec::target(n, seed)
    } else {
        DomainSpec::source(n, seed)
    };
    generate_domain(&DomainSpec {
        height: 16,
        width: 16,
        ..base
    })
    .unwrap()
}

pub fn check_stage_masks() -> Check {
    let mut seg =
        SegModel::<f32>::new(SegArch::default(), &mut rng::stream(4, rng::INIT, 0)).map_err(|e| e.to_string())?;
    let mut value =
        ValueNet::<f32>::new(ValueArch::default(), &mut rng::stream(4, rng::INIT, 1)).map_err(|e| e.to_string())?;
    let train = tiny_domain(6, 1, false);
    let val = tiny_domain(3, 2, false);

    let theta_before = (seg.params.checksum(|_| true), seg.params.bn_stats_checksum());
    set_stage_masks(&mut seg, Some(&mut value), Stage::ValueNet);
    let phi_before = value.params.checksum(|_| true);
    let cfg = ValueConfig {
        epochs: 2,
        ..ValueConfig::default()
    };
    train_value_net(&train, &val, &seg, &mut value, &cfg, 4).map_err(|e| e.to_string())?;
    let theta_after = (seg.params.checksum(|_| true), seg.params.bn_stats_checksum());
    ensure(theta_before == theta_after, || {
        "value-net training changed the segmentation model".into()
    })?;
    ensure(phi_before != value.params.checksum(|_| true), || {
        "value net did not train".into()
    })?;

    let target = tiny_domain(6, 3, true);
    let labels = pseudo_label_round(&seg, &value, &target, 0.5, 1).map_err(|e| e.to_string())?;
    set_stage_masks(&mut seg, Some(&mut value), Stage::Warmup);
    let non_bn = |p: &calsfda::model::Param<f32>| !p.role.is_bn_affine();
    let before = (seg.params.checksum(non_bn), value.params.checksum(non_bn));
    let affine_before = seg.params.checksum(|p| p.role.is_bn_affine());
    let stats_before = seg.params.bn_stats_checksum();
    statistic_warmup(
        &mut seg,
        &mut value,
        &target,
        &labels,
        &TargetConfig::default(),
        1e-3,
        4,
    )
    .map_err(|e| e.to_string())?;
    let after = (seg.params.checksum(non_bn), value.params.checksum(non_bn));
    ensure(before == after, || "statistic warm-up changed non-BN parameters".into())?;
    ensure(stats_before != seg.params.bn_stats_checksum(), || {
        "warm-up left BN statistics untouched".into()
    })?;
    ensure(affine_before != seg.params.checksum(|p| p.role.is_bn_affine()), || {
        "warm-up left BN affine untouched".into()
    })?;

    set_stage_masks(&mut seg, Some(&mut value), Stage::Adapt);
    let refused = statistic_warmup(
        &mut seg,
        &mut value,
        &target,
        &labels,
        &TargetConfig::default(),
        1e-3,
        4,
    )
    .is_err();
    ensure(refused, || "warm-up ran under the adapt mask".into())?;
    Ok("selected source weights fixed by value-net training; non-BN checksums fixed by warm-up".into())
}

fn brute_force_argmin(stats: &[EceStats]) -> usize {
    let mut best = 0;
    for i in 1..stats.len() {
        if stats[i].mean + stats[i].max + stats[i].min < stats[best].mean + stats[best].max + stats[best].min {
            best = i;
        }
    }
    best
}

pub fn check_selection(pools: u64) -> Check {
    let mut r = ChaCha8Rng::seed_from_u64(123);
    for p in 0..pools {
        let len = r.random_range(1..30);
        // Coarse values make ties common.
        let q = |r: &mut ChaCha8Rng| r.random_range(0..20) as f64 / 100.0;
        let stats: Vec<EceStats> = (0..len)
            .map(|_| {
                let (a, b) = (q(&mut r), q(&mut r));
                let (min, max) = (a.min(b), a.max(b));
                EceStats {
                    mean: (min + max) / 2.0,
                    max,
                    min,
                }
            })
            .collect();
        let got = select_by_ece_stats(&stats).map_err(|e| e.to_string())?;
        let want = brute_force_argmin(&stats);
        ensure(got == want, || format!("pool {p}: selected {got}, brute force {want}"))?;
    }
    ensure(select_by_ece_stats(&[]).is_err(), || "empty pool accepted".into())?;

    let logged = [0.62, 0.51, 0.48, 0.49, 0.48, 0.55];
    let got = select_min_entropy(&logged).map_err(|e| e.to_string())?;
    ensure(got == 2, || format!("entropy fixture selected {got}"))?;
    let got = select_min_entropy(&[0.3]).map_err(|e| e.to_string())?;
    ensure(got == 0, || "single-entry fixture".into())?;
    Ok(format!(
        "{pools} random pools match brute force; entropy fixtures pick the earliest minimum"
    ))
}
