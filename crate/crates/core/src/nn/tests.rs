use super::*;
use crate::oracle;
use crate::rng::StreamKey;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = StreamKey::new(1).rng();
    let x = t(&[1, 4, 5], &(0..20).map(|v| v as f64 * 0.37 - 2.0).collect::<Vec<_>>());
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let mut g = Graph::new();
    let xv = g.input(x.clone(), false);
    let w = g.constant(t(&[1, 1, 3, 3], &k));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g
        .forward_layer(
            &LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 1,
                kernel: 3,
            },
            xv,
            &[w, b],
            Mode::DetInfer,
            &mut rng,
        )
        .unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn relu_clips_negatives() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]), false);
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 4, 4]), false);
    let w = g.constant(Tensor::zeros(&[3, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None), Err(crate::Error::Shape(_))));
    let a = g.constant(Tensor::zeros(&[2]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.add(a, b).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1e308, 1e308]), false);
    let y = g.input(t(&[2], &[1e308, 1e308]), false);
    assert!(g.mul(x, y).unwrap_err().is_numerical());
}

#[test]
fn inverted_dropout_statistics() {
    let n = 100_000;
    let mut rng = StreamKey::new(3).rng();
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[n], 1.0), false);
    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let d = g.value(y).data();
    assert!(d.iter().all(|&v| v == 0.0 || v == 2.0));
    let mean = d.iter().sum::<f64>() / n as f64;
    assert!((0.98..=1.02).contains(&mean), "mean {mean}");
}

#[test]
fn dropout_zero_is_identity_and_infer_is_identity() {
    let mut rng = StreamKey::new(3).rng();
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[0.1, -0.2, 0.3]), false);
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.4, Mode::DetInfer.stochastic(), &mut rng).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
}

#[test]
fn backward_linear_map_gives_input() {
    let mut ps = ParamSet::new();
    let wid = ps.add("w", t(&[3], &[0.5, -1.0, 2.0]));
    let xs = [3.0, 4.0, -5.0];
    let mut g = Graph::new();
    let w = g.param(&ps, wid);
    let x = g.constant(t(&[3], &xs));
    let m = g.mul(w, x).unwrap();
    let l = g.sum(m).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &xs);
    assert!(grads.wrt(x).is_none());
    drop(g);
    ps.accumulate(&grads, 1.0).unwrap();
    assert_eq!(ps.get(wid).grad().unwrap(), &xs);
}

#[test]
fn backward_errors() {
    let g = Graph::new();
    assert!(matches!(g.backward(Var::default_for_tests()), Err(crate::Error::Backward(_))));
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]), true);
    let y = g.relu(x).unwrap();
    assert!(matches!(g.backward(y), Err(crate::Error::Backward(_))));
}

#[test]
fn softmax_cross_entropy_gradient_is_p_minus_y() {
    let z = t(&[2, 1, 3], &[0.3, -1.2, 2.0, 0.1, 0.5, -0.7]);
    let y = t(&[2, 1, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    let mut g = Graph::new();
    let zv = g.input(z, true);
    let p = g.softmax(zv).unwrap();
    let l = g.cross_entropy(p, &y, None).unwrap();
    let probs = g.value(p).data().to_vec();
    let grads = g.backward(l).unwrap();
    let gz = grads.wrt(zv).unwrap();
    for i in 0..6 {
        let expected = (probs[i] - y.data()[i]) / 3.0;
        assert!((gz[i] - expected).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_values() {
    let ce = |p: &[f64], y: &[f64]| {
        let mut g = Graph::new();
        let pv = g.input(t(&[2, 1], p), false);
        let l = g.cross_entropy(pv, &t(&[2, 1], y), None).unwrap();
        g.value(l).item().unwrap()
    };
    assert_eq!(ce(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
    assert!((ce(&[0.5, 0.5], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((ce(&[0.8, 0.2], &[1.0, 0.0]) - 0.223_143_551_314_209_7).abs() < 1e-12);
    // saturated wrong prediction is clamped, not infinite
    assert!((ce(&[1.0, 0.0], &[0.0, 1.0]) + 1e-12f64.ln()).abs() < 1e-9);
    let mut g = Graph::new();
    let pv = g.input(Tensor::full(&[2, 2], 0.5), false);
    assert!(g.cross_entropy(pv, &Tensor::zeros(&[2, 3]), None).is_err());
}

fn labels_2x(pixels: usize) -> Tensor {
    let mut y = Tensor::zeros(&[2, 1, pixels]);
    for i in 0..pixels {
        let c = i % 2;
        y.data_mut()[c * pixels + i] = 1.0;
    }
    y
}

#[test]
fn aleatoric_loss_reduces_to_cross_entropy_when_variance_vanishes() {
    let pixels = 64;
    let mut rng = StreamKey::new(11).rng();
    let zdata: Vec<f64> = (0..2 * pixels).map(|i| ((i * 7919) % 13) as f64 * 0.3 - 1.8).collect();
    let z = t(&[2, 1, pixels], &zdata);
    let y = labels_2x(pixels);
    let mut g = Graph::new();
    let zv = g.input(z, false);
    let s = g.input(Tensor::full(&[1, 1, pixels], -1e9), false);
    let la = g.aleatoric_loss(zv, s, &y, 50, &mut rng, None).unwrap();
    let p = g.softmax(zv).unwrap();
    let lc = g.cross_entropy(p, &y, None).unwrap();
    let (a, c) = (g.value(la).item().unwrap(), g.value(lc).item().unwrap());
    assert!((a - c).abs() < 1e-6, "{a} vs {c}");
}

#[test]
fn aleatoric_loss_symmetric_logits_converge_to_ln2() {
    let mut rng = StreamKey::new(12).rng();
    let y = labels_2x(1);
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[2, 1, 1]), false);
    let s = g.input(Tensor::full(&[1, 1, 1], 2.0), false);
    let l = g.aleatoric_loss(z, s, &y, 10_000, &mut rng, None).unwrap();
    let v = g.value(l).item().unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 0.01, "{v}");
}

#[test]
fn aleatoric_loss_rejects_zero_samples_and_soft_labels() {
    let mut rng = StreamKey::new(1).rng();
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[2, 1, 1]), false);
    let s = g.input(Tensor::zeros(&[1, 1, 1]), false);
    assert!(g.aleatoric_loss(z, s, &labels_2x(1), 0, &mut rng, None).is_err());
    let soft = Tensor::full(&[2, 1, 1], 0.5);
    assert!(g.aleatoric_loss(z, s, &soft, 4, &mut rng, None).is_err());
}

#[test]
fn aleatoric_loss_is_bit_reproducible() {
    let run = || {
        let mut rng = StreamKey::new(99).named("al").rng();
        let mut g = Graph::new();
        let z = g.input(t(&[2, 1, 2], &[0.3, -0.4, 1.0, 0.2]), true);
        let s = g.input(t(&[1, 1, 2], &[0.5, -1.0]), true);
        let l = g.aleatoric_loss(z, s, &labels_2x(2), 20, &mut rng, None).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).item().unwrap(), grads.wrt(s).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn log_variance_gradient_matches_finite_differences() {
    let z = t(&[2, 2, 2], &[0.4, -0.3, 1.1, 0.0, -0.5, 0.2, 0.3, 0.9]);
    let s = t(&[1, 2, 2], &[-0.5, 0.7, 1.2, -1.5]);
    let mut y = Tensor::zeros(&[2, 2, 2]);
    for (i, c) in [0usize, 1, 1, 0].iter().enumerate() {
        y.data_mut()[c * 4 + i] = 1.0;
    }
    let err = oracle::gradient_check(&[z, s], |g, v| {
        let mut r = StreamKey::new(5).named("crn").rng();
        g.aleatoric_loss(v[0], v[1], &y, 16, &mut r, None)
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradient_suite_passes_for_a_few_seeds() {
    for seed in 0..3 {
        for case in oracle::gradient_suite(seed).unwrap() {
            assert!(
                case.max_rel_error < 1e-4,
                "seed {seed} {}: {}",
                case.name,
                case.max_rel_error
            );
        }
    }
}

#[test]
fn max_pool_ceil_extent() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 64, 64]), false);
    let mut shape = vec![];
    let mut v = x;
    for _ in 0..4 {
        v = g.max_pool(v, 3, 3).unwrap();
        shape.push(g.value(v).shape()[1]);
    }
    assert_eq!(shape, vec![22, 8, 3, 1]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-10.0f64..10.0, 3 * 5)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 5], values).unwrap(), false);
        let y = g.softmax(x).unwrap();
        let d = g.value(y).data();
        for i in 0..5 {
            let s: f64 = (0..3).map(|c| d[c * 5 + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for c in 0..3 {
                prop_assert!(d[c * 5 + i] > 0.0 && d[c * 5 + i] < 1.0);
            }
        }
    }
}
