//! Training-engine checks: analytic gradients against central differences,
//! initialization and split determinism, small end-to-end regressions, and
//! fixed-point evaluation.

use ndarray::{Array1, Array2};
use neon::nn::{
    backward, calibrate_frac_bits, cosine_similarity, mse, quantize_eval, train, xavier_uniform,
    Activation, FcNet, Layer, QuantSpec, TrainConfig,
};
use neon::rng::stream;
use rand::Rng;

fn fill_normal(rng: &mut impl Rng, rows: usize, cols: usize, mean: f64, sd: f64) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let d = Normal::new(mean, sd).unwrap();
    Array2::from_shape_fn((rows, cols), |_| d.sample(rng))
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = stream(11, "gradcheck");
    let mut net = FcNet::new_seeded(&[3, 5, 2], Activation::Tanh, &mut rng);
    // Nonzero biases so their gradient path is exercised too.
    for l in &mut net.layers {
        l.b = Array1::from_shape_fn(l.b.len(), |i| 0.05 * (i as f64 + 1.0));
    }
    let x = fill_normal(&mut rng, 4, 3, 0.0, 1.0);
    let y = fill_normal(&mut rng, 4, 2, 0.0, 1.0);

    let cache = net.forward_cached(&x);
    let grads = backward(&net, &cache, &y);

    let h = 1e-5;
    let mut checked = 0usize;
    for k in 0..net.layers.len() {
        let (rows, cols) = net.layers[k].w.dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = net.layers[k].w[[i, j]];
                net.layers[k].w[[i, j]] = orig + h;
                let lp = mse(&net.forward(&x), &y);
                net.layers[k].w[[i, j]] = orig - h;
                let lm = mse(&net.forward(&x), &y);
                net.layers[k].w[[i, j]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.w[k][[i, j]];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-6,
                    "w[{k}][{i},{j}]: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        for i in 0..net.layers[k].b.len() {
            let orig = net.layers[k].b[i];
            net.layers[k].b[i] = orig + h;
            let lp = mse(&net.forward(&x), &y);
            net.layers[k].b[i] = orig - h;
            let lm = mse(&net.forward(&x), &y);
            net.layers[k].b[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.b[k][i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-6, "b[{k}][{i}]");
            checked += 1;
        }
    }
    assert_eq!(checked, 3 * 5 + 5 + 5 * 2 + 2);
}

#[test]
fn frozen_layers_report_zero_gradient_but_propagate() {
    let mut rng = stream(12, "freeze");
    let mut net = FcNet::new_seeded(&[4, 6, 6, 3], Activation::Tanh, &mut rng);
    net.frozen[1] = true;
    let x = fill_normal(&mut rng, 8, 4, 0.0, 1.0);
    let y = fill_normal(&mut rng, 8, 3, 0.0, 1.0);
    let cache = net.forward_cached(&x);
    let g = backward(&net, &cache, &y);
    assert!(g.w[1].iter().all(|&v| v == 0.0));
    assert!(g.b[1].iter().all(|&v| v == 0.0));
    // Gradient still flows through the frozen layer to the one below.
    assert!(g.w[0].iter().any(|&v| v != 0.0));
}

#[test]
fn xavier_draws_stay_in_bound_and_replay() {
    let (out_dim, in_dim) = (37, 91);
    let limit = (6.0 / (out_dim + in_dim) as f64).sqrt();
    let a = xavier_uniform(&mut stream(5, "xavier"), out_dim, in_dim);
    assert!(a.iter().all(|&v| v.abs() <= limit));
    // A uniform draw this large lands close to the corners somewhere.
    let max_seen = a.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_seen > 0.9 * limit);
    let b = xavier_uniform(&mut stream(5, "xavier"), out_dim, in_dim);
    assert_eq!(a, b);
    let c = xavier_uniform(&mut stream(6, "xavier"), out_dim, in_dim);
    assert_ne!(a, c);
}

#[test]
fn seeded_nets_start_with_zero_bias_linear_head() {
    let net = FcNet::new_seeded(&[8, 128, 128, 8], Activation::Tanh, &mut stream(1, "init"));
    assert_eq!(net.hidden_layer_count(), 2);
    assert_eq!(net.param_count(), 8 * 128 + 128 + 128 * 128 + 128 + 128 * 8 + 8);
    for l in &net.layers {
        assert!(l.b.iter().all(|&v| v == 0.0));
    }
    assert_eq!(net.layers.last().unwrap().act, Activation::Linear);
    assert!(net.layers[..2].iter().all(|l| l.act == Activation::Tanh));
    assert!(net.frozen.iter().all(|&f| !f));
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let mut rng = stream(21, "det:data");
    let xs = fill_normal(&mut rng, 600, 4, 0.0, 1.0);
    let ys = xs.mapv(|v| v.tanh());
    let cfg = TrainConfig {
        num_epochs: 5,
        batch_size: 128,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut run = |seed: u64| {
        let mut net = FcNet::new_seeded(&[4, 16, 4], Activation::Tanh, &mut stream(seed, "det:init"));
        let r = train(&mut net, &xs, &ys, &TrainConfig { seed, ..cfg.clone() }).unwrap();
        (r.loss_curve, net.layers[0].w.clone())
    };
    let (curve_a, w_a) = run(9);
    let (curve_b, w_b) = run(9);
    assert_eq!(curve_a, curve_b);
    assert_eq!(w_a, w_b);
    let (curve_c, _) = run(10);
    assert_ne!(curve_a, curve_c);
}

#[test]
fn one_dim_tanh_regression_converges() {
    let mut rng = stream(31, "tanh1d:data");
    let xs = Array2::from_shape_fn((2048, 1), |_| rng.gen_range(-2.5..2.5));
    let ys = xs.mapv(f64::tanh);
    let mut net = FcNet::new_seeded(&[1, 32, 1], Activation::Tanh, &mut stream(31, "tanh1d:init"));
    let cfg = TrainConfig {
        num_epochs: 300,
        batch_size: 256,
        learning_rate: 1e-2,
        weight_decay: 0.0,
        seed: 31,
        ..TrainConfig::default()
    };
    let r = train(&mut net, &xs, &ys, &cfg).unwrap();
    assert!(r.val_mse <= 1e-5, "val mse {}", r.val_mse);
    // Spot-check the fit away from the training grid.
    let probe = Array2::from_shape_vec((3, 1), vec![-1.7, 0.2, 2.2]).unwrap();
    let got = net.forward(&probe);
    for i in 0..3 {
        assert!((got[[i, 0]] - probe[[i, 0]].tanh()).abs() < 0.01);
    }
}

#[test]
fn constant_target_collapses_onto_bias() {
    let mut rng = stream(32, "const:data");
    let xs = fill_normal(&mut rng, 1024, 4, 0.0, 1.0);
    let ys = Array2::from_elem((1024, 2), 0.3);
    let mut net = FcNet::new_seeded(&[4, 16, 2], Activation::Tanh, &mut stream(32, "const:init"));
    let cfg = TrainConfig {
        num_epochs: 800,
        batch_size: 256,
        learning_rate: 1e-2,
        weight_decay: 1e-3,
        seed: 32,
        ..TrainConfig::default()
    };
    let r = train(&mut net, &xs, &ys, &cfg).unwrap();
    assert!(r.val_mse <= 1e-8, "val mse {}", r.val_mse);
}

#[test]
fn loss_curve_tracks_epochs_and_weight_decay_shrinks_weights() {
    let mut rng = stream(33, "wd:data");
    let xs = fill_normal(&mut rng, 512, 3, 0.0, 1.0);
    let ys = Array2::zeros((512, 3));
    let mk = || FcNet::new_seeded(&[3, 8, 3], Activation::Tanh, &mut stream(33, "wd:init"));
    let mut free = mk();
    let mut decayed = mk();
    let base = TrainConfig {
        num_epochs: 40,
        batch_size: 128,
        learning_rate: 1e-3,
        seed: 33,
        ..TrainConfig::default()
    };
    let r = train(&mut free, &xs, &ys, &TrainConfig { weight_decay: 0.0, ..base.clone() }).unwrap();
    assert_eq!(r.epochs_run, 40);
    assert_eq!(r.loss_curve.len(), 40);
    assert_eq!(r.val_mse, *r.loss_curve.last().unwrap());
    train(&mut decayed, &xs, &ys, &TrainConfig { weight_decay: 0.5, ..base }).unwrap();
    let norm = |n: &FcNet| -> f64 { n.layers.iter().map(|l| l.w.iter().map(|v| v * v).sum::<f64>()).sum() };
    assert!(norm(&decayed) < norm(&free));
}

#[test]
fn train_rejects_degenerate_data() {
    let mut net = FcNet::new_seeded(&[2, 4, 2], Activation::Tanh, &mut stream(1, "err"));
    let cfg = TrainConfig::default();
    assert!(train(&mut net, &Array2::zeros((0, 2)), &Array2::zeros((0, 2)), &cfg).is_err());
    assert!(train(&mut net, &Array2::zeros((8, 2)), &Array2::zeros((7, 2)), &cfg).is_err());
    assert!(train(&mut net, &Array2::zeros((8, 3)), &Array2::zeros((8, 2)), &cfg).is_err());
}

// ---------------------------------------------------------------------------
// Fixed point

#[test]
fn frac_bit_calibration_maximizes_precision_without_overflow() {
    assert_eq!(calibrate_frac_bits(16, 1.99), 14);
    assert_eq!(calibrate_frac_bits(16, 0.5), 15);
    assert_eq!(calibrate_frac_bits(16, 300.0), 6);
    // Clamped at the bottom even for huge ranges.
    assert_eq!(calibrate_frac_bits(16, 1e9), 1);
}

#[test]
fn quant_spec_ranges() {
    let s = QuantSpec { bits: 16, frac_bits: 12 };
    assert_eq!(s.qmax(), 32767);
    assert_eq!(s.qmin(), -32768);
    assert_eq!(s.scale(), 4096.0);
}

#[test]
fn exactly_representable_net_quantizes_losslessly() {
    let net = FcNet {
        layers: vec![Layer {
            w: Array2::from_shape_vec((1, 1), vec![0.5]).unwrap(),
            b: Array1::from_vec(vec![0.25]),
            act: Activation::Linear,
        }],
        frozen: vec![false],
    };
    let x = Array2::from_shape_vec((2, 1), vec![1.0, -2.0]).unwrap();
    let (y, sat) = quantize_eval(&net, QuantSpec { bits: 16, frac_bits: 12 }, &x);
    assert_eq!(y[[0, 0]], 0.75);
    assert_eq!(y[[1, 0]], -0.75);
    assert_eq!(sat.weights + sat.activations, 0);
}

#[test]
fn saturation_is_counted_not_silent() {
    let net = FcNet {
        layers: vec![Layer {
            w: Array2::from_shape_vec((1, 1), vec![100.0]).unwrap(),
            b: Array1::from_vec(vec![0.0]),
            act: Activation::Linear,
        }],
        frozen: vec![false],
    };
    let spec = QuantSpec { bits: 8, frac_bits: 4 };
    let x = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
    let (y, sat) = quantize_eval(&net, spec, &x);
    assert!(sat.weights >= 1);
    // Output pinned at the representable ceiling.
    assert_eq!(y[[0, 0]], 127.0 / 16.0);
}

#[test]
fn table_activations_track_their_functions() {
    let net = FcNet {
        layers: vec![Layer {
            w: Array2::from_shape_vec((1, 1), vec![1.0]).unwrap(),
            b: Array1::from_vec(vec![0.0]),
            act: Activation::Tanh,
        }],
        frozen: vec![false],
    };
    let spec = QuantSpec { bits: 16, frac_bits: 12 };
    let xs = Array2::from_shape_fn((81, 1), |(i, _)| -4.0 + i as f64 * 0.1);
    let (y, _) = quantize_eval(&net, spec, &xs);
    for i in 0..81 {
        let want = xs[[i, 0]].tanh();
        assert!((y[[i, 0]] - want).abs() < 2e-3, "x={} got {} want {want}", xs[[i, 0]], y[[i, 0]]);
    }
}

#[test]
fn quantization_preserves_a_trained_replacement_net() {
    // End to end: train a softmax surrogate, then run it in 16-bit fixed
    // point and require the same accuracy the float net delivers.
    let mut rng = stream(41, "quant:data");
    let xs = fill_normal(&mut rng, 10_000, 8, 0.0, 0.55);
    let ys = neon::graph::softmax_rows(&xs);
    let mut net = FcNet::new_seeded(&[8, 128, 8], Activation::Tanh, &mut stream(41, "quant:init"));
    let r = train(&mut net, &xs, &ys, &TrainConfig { seed: 41, ..TrainConfig::default() }).unwrap();
    // Loose float sanity bound; the tight convergence targets live with the
    // locked benchmark datasets. Here the claim under test is that fixed
    // point tracks whatever the float net computes.
    assert!(r.val_mse <= 1e-3, "float training fell short: {}", r.val_mse);

    let probe = fill_normal(&mut rng, 512, 8, 0.0, 0.55);
    let float_out = net.forward(&probe);
    let max_abs = net
        .layers
        .iter()
        .map(|l| l.w.iter().chain(l.b.iter()).fold(0.0f64, |m, v| m.max(v.abs())))
        .fold(0.0f64, f64::max)
        .max(probe.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let spec = QuantSpec { bits: 16, frac_bits: calibrate_frac_bits(16, max_abs) };
    let (q_out, _) = quantize_eval(&net, spec, &probe);
    let err = mse(&q_out, &float_out);
    assert!(err <= 1e-4, "quantization error {err}");
    assert!(cosine_similarity(&q_out, &float_out) >= 0.999);
}

#[test]
fn cosine_similarity_edges() {
    let z = Array2::zeros((1, 3));
    assert_eq!(cosine_similarity(&z, &z), 1.0);
    let a = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(cosine_similarity(&a, &z), 0.0);
    assert!((cosine_similarity(&a, &a) - 1.0).abs() < 1e-15);
    let neg = a.mapv(|v| -v);
    assert!((cosine_similarity(&a, &neg) + 1.0).abs() < 1e-15);
}
