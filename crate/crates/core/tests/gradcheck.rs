//! Reverse-mode gradients against double-precision central differences.

mod support;

#[test]
fn every_operator_matches_finite_differences() {
    let detail = support::check_operator_gradients(20).unwrap();
    println!("{detail}");
}

#[test]
fn differentiable_ece_matches_finite_differences() {
    let detail = support::check_diff_ece_gradient(20).unwrap();
    println!("{detail}");
}

#[test]
fn stat_only_batch_norm_blocks_gradient_through_statistics() {
    use calsfda::autodiff::{BnMode, ChannelStats, Graph, Tensor};
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 6.0]).unwrap());
    let gamma = g.param(Tensor::from_f64(&[1], &[1.0]).unwrap());
    let beta = g.param(Tensor::from_f64(&[1], &[0.0]).unwrap());
    let running = ChannelStats {
        mean: vec![0.0],
        var: vec![1.0],
    };
    let (y, stats) = g.batch_norm(x, gamma, beta, &running, BnMode::StatOnly, 1e-5).unwrap();
    assert_eq!(stats.unwrap().mean, vec![3.0]);
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    // With constant statistics each input's gradient is gamma / sigma.
    let dx = grads.get(x).unwrap().to_f64_vec();
    let expect = 1.0 / (3.5f64 + 1e-5).sqrt();
    assert!(dx.iter().all(|d| (d - expect).abs() < 1e-12), "{dx:?}");
}
