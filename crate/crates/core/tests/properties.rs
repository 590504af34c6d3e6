//! Randomized invariants.

use calsfda::autodiff::{Graph, Tensor};
use calsfda::calibration::{compute_ece, confidence_and_prediction};
use calsfda::cli::{CheckpointFile, RunConfig};
use calsfda::datagen::{generate_domain, split_validation, DomainSpec};
use calsfda::model::{poly_lr, SegArch, SegModel, Stage};
use calsfda::rng;
use calsfda::target_stage::{
    adjusted_confidence, assign_pseudo_labels, compute_class_thresholds, entropy_loss, miou, negative_loss, sce_loss,
    ClassThresholds, Provenance,
};
use calsfda::IGNORE_LABEL;
use proptest::prelude::*;

fn logits_strategy(n: usize, c: usize, inner: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-6.0f64..6.0, n * c * inner).prop_map(move |d| Tensor::new(vec![n, c, inner], d).unwrap())
}

fn labels_strategy(len: usize, c: u8) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![4 => 0..c, 1 => Just(IGNORE_LABEL)], len)
}

proptest! {
    #[test]
    fn ece_is_a_weighted_gap_in_unit_interval(
        samples in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
        bins in 1usize..20,
    ) {
        let (conf, ok): (Vec<f64>, Vec<bool>) = samples.iter().copied().unzip();
        let (e, diagram) = compute_ece(&conf, &ok, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(diagram.bins.iter().map(|b| b.count).sum::<usize>(), conf.len());
        let mut rev_c = conf.clone();
        let mut rev_o = ok.clone();
        rev_c.reverse();
        rev_o.reverse();
        let (e2, _) = compute_ece(&rev_c, &rev_o, bins).unwrap();
        prop_assert!((e - e2).abs() < 1e-12);
    }

    #[test]
    fn confidence_bounds_and_shift_invariance(z in logits_strategy(2, 4, 3), shift in -20.0f64..20.0) {
        let p = confidence_and_prediction(&z).unwrap();
        prop_assert!(p.confidence.iter().all(|&c| (0.25 - 1e-12..=1.0 + 1e-12).contains(&c)));
        let moved = Tensor::new(z.shape().to_vec(), z.data().iter().map(|v| v + shift).collect()).unwrap();
        let q = confidence_and_prediction(&moved).unwrap();
        prop_assert_eq!(&p.prediction, &q.prediction);
        for (a, b) in p.confidence.iter().zip(&q.confidence) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_and_logsumexp_bounds(z in logits_strategy(1, 5, 4), t in 0.01f64..3.0) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(z.clone());
        let p = g.softmax(x).unwrap();
        let l = g.logsumexp(x, t).unwrap();
        let (pv, lv) = (g.value(p).data(), g.value(l).data());
        for s in 0..4 {
            let col: Vec<f64> = (0..5).map(|k| z.data()[k * 4 + s]).collect();
            let mx = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(((0..5).map(|k| pv[k * 4 + s]).sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(lv[s] >= mx - 1e-12 && lv[s] <= mx + t * 5f64.ln() + 1e-12);
        }
    }

    #[test]
    fn poly_lr_decays_from_base_to_zero(base in 1e-5f64..1.0, max_iter in 1usize..500, power in 0.1f64..3.0) {
        prop_assert_eq!(poly_lr(base, 0, max_iter, power), base);
        prop_assert!(poly_lr(base, max_iter, max_iter, power).abs() < 1e-15);
        let mut prev = base;
        for i in 1..=max_iter {
            let lr = poly_lr(base, i, max_iter, power);
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn thresholds_label_the_top_delta(
        conf in prop::collection::hash_set(0u32..1_000_000, 1..120),
        delta in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let adjusted: Vec<f64> = conf.into_iter().map(|v| v as f64 / 1e6).collect();
        let pred: Vec<u8> = (0..adjusted.len()).map(|i| ((seed >> (i % 60)) & 3) as u8 % 3).collect();
        let t = compute_class_thresholds(&adjusted, &pred, 3, delta).unwrap();
        prop_assert!((t.w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let map = assign_pseudo_labels(&adjusted, &pred, &t, delta).unwrap();
        for c in 0..3u8 {
            let m = pred.iter().filter(|&&p| p == c).count();
            let global = map.provenance.iter().zip(&pred).filter(|(f, &p)| p == c && f.passed_global()).count();
            let expect = if m == 0 { 0 } else { ((delta * m as f64).floor() as usize).min(m - 1) };
            prop_assert_eq!(global, expect);
        }
        for (i, &l) in map.labels.iter().enumerate() {
            prop_assert_eq!(l == IGNORE_LABEL, map.provenance[i] == Provenance::Unlabeled);
            if l != IGNORE_LABEL {
                prop_assert_eq!(l, pred[i]);
            }
        }
    }

    #[test]
    fn adjusted_confidence_never_exceeds_raw(p in 0.0f64..=1.0, e in 0.0f64..=1.0) {
        let a = adjusted_confidence(p, e);
        prop_assert!((0.0..=p).contains(&a));
    }

    #[test]
    fn target_losses_are_bounded(z in logits_strategy(1, 3, 6), labels in labels_strategy(6, 3), seed in any::<u64>()) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(z);
        let probs = g.softmax(x).unwrap();
        let ent = entropy_loss(&mut g, probs).unwrap();
        let e = g.value(ent).data()[0];
        prop_assert!(e >= -1e-12 && e <= 3f64.ln() + 1e-12);
        if labels.iter().any(|&l| l != IGNORE_LABEL) {
            let w = ClassThresholds::from_xi(vec![0.9, 0.5, 0.7]).w;
            let sce = sce_loss(&mut g, x, &labels, &w, 0.1).unwrap();
            let mut r = rng::stream(seed, rng::NEGATIVE_SAMPLING, 0);
            let neg = negative_loss(&mut g, probs, &labels, &mut r).unwrap();
            prop_assert!(g.value(sce).data()[0] >= 0.0);
            prop_assert!(g.value(neg).data()[0] >= 0.0 && g.value(neg).data()[0] <= -(1e-7f64.ln()) + 1e-9);
        }
    }

    #[test]
    fn miou_is_symmetric_and_perfect_on_identity(a in labels_strategy(40, 4), b in prop::collection::vec(0u8..4, 40)) {
        let same = a.iter().map(|&l| if l == IGNORE_LABEL { 0 } else { l }).collect::<Vec<_>>();
        if let Ok(r) = miou(&same, &same, 4) {
            prop_assert_eq!(r.mean, 1.0);
        }
        let ab = miou(&same, &b, 4).unwrap();
        let ba = miou(&b, &same, 4).unwrap();
        prop_assert!((ab.mean - ba.mean).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.mean));
    }

    #[test]
    fn config_round_trips_through_its_echo(
        seed in any::<u64>(),
        alpha in 0.0f64..4.0,
        delta in 0.01f64..=1.0,
        rounds in 1usize..6,
        hue in -0.5f64..0.5,
    ) {
        let mut cfg = RunConfig { seed, ..RunConfig::default() };
        cfg.source.alpha = alpha;
        cfg.target.delta = delta;
        cfg.target.rounds = rounds;
        cfg.data.shift.hue = hue;
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), perturb in prop::collection::vec(-1e3f32..1e3, 4)) {
        let arch = SegArch { widths: vec![4, 4], tap: 1, ..SegArch::default() };
        let mut m = SegModel::<f32>::new(arch, &mut rng::stream(seed, rng::INIT, 0)).unwrap();
        for (p, v) in m.params.params.iter_mut().zip(&perturb) {
            p.value.data_mut()[0] = *v;
        }
        m.params.bn[0].running.var[0] = seed as f64 / u64::MAX as f64;
        let ckpt = CheckpointFile::new(Stage::Source, m.params.clone()).with_metric("seed", seed as f64);
        let back = CheckpointFile::from_bytes(&ckpt.to_bytes(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn validation_split_partitions_the_domain(n in 3usize..20, seed in any::<u64>(), frac in 0.1f64..0.9) {
        let data = generate_domain(&DomainSpec { height: 16, width: 16, ..DomainSpec::source(n, seed) }).unwrap();
        if let Ok((train, val)) = split_validation(&data, frac, seed) {
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert_eq!(train.spec.n_images, train.len());
            prop_assert_eq!(val.spec.n_images, val.len());
            for img in train.images.iter().chain(&val.images) {
                prop_assert!(data.images.contains(img));
            }
        }
    }

    #[test]
    fn generated_labels_stay_in_range(seed in any::<u64>(), hue in -0.5f64..0.5) {
        let mut spec = DomainSpec { height: 16, width: 16, ..DomainSpec::target(2, seed) };
        spec.shift.hue = hue;
        let data = generate_domain(&spec).unwrap();
        for img in &data.images {
            prop_assert!(img.labels.iter().all(|&l| (l as usize) < spec.classes));
            prop_assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
