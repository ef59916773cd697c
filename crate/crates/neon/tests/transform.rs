//! Replacement-pipeline checks: the exact sigmoid rewrite, operand capture,
//! splice topology, end-to-end determinism, and the collapsed backward pass
//! used for recovery training.

mod common;

use ndarray::{Array1, Array2};
use neon::graph::{run_graph, softmax_rows, squash_rows, Graph, Node, NodeOrigin, OpKind, Payload};
use neon::nn::{Activation, FcNet, Layer, TrainConfig};
use neon::rng::stream;
use neon::transform::{
    apply_replacement, capture, delineate, extract_bounds, fine_tune, rewrite_sigmoid,
    sample_inputs, transform_graph, true_op_vjp, BoundSpec, InputDist, NeonNet, TrainingMeta,
    TransformConfig,
};
use rand::Rng;

fn tiny_tcfg(capture_samples: usize, epochs: usize) -> TransformConfig {
    TransformConfig {
        train: TrainConfig {
            num_epochs: epochs,
            max_layers: 1,
            ..TrainConfig::default()
        },
        capture_samples,
        ..TransformConfig::default()
    }
}

#[test]
fn sigmoid_rewrite_is_exact_not_approximate() {
    let g = common::build_attn_mini();
    let rewritten = rewrite_sigmoid(&g).unwrap();
    assert!(rewritten.nodes.iter().all(|n| n.op != OpKind::Sigmoid));
    let fresh: Vec<_> = rewritten
        .nodes
        .iter()
        .filter(|n| n.origin == NodeOrigin::IdentityRewrite { source: "gate".into() })
        .collect();
    assert_eq!(fresh.len(), 4);

    let mut rng = stream(3, "sigmoid:probe");
    let x = Array2::from_shape_fn((64, 128), |_| rng.gen_range(-20.0..20.0));
    let want = run_graph(&g, &x).unwrap();
    let got = run_graph(&rewritten, &x).unwrap();
    let max_err = (&want - &got)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_err <= 1e-12, "rewrite drifted by {max_err}");
}

#[test]
fn rewrite_without_sigmoids_is_identity() {
    let g = common::build_capsule_mini();
    let rewritten = rewrite_sigmoid(&g).unwrap();
    assert_eq!(g.nodes.len(), rewritten.nodes.len());
}

#[test]
fn capture_records_the_operands_each_target_sees() {
    let g = common::build_capsule_mini();
    let mut rng = stream(4, "capture:probe");
    let entry = Array2::from_shape_fn((500, 64), |_| rng.gen_range(-1.0..1.0));
    let ids = vec!["squash0".to_string(), "softmax0".to_string()];
    let ds = capture(&g, &ids, &entry).unwrap();

    let squash = &ds["squash0"];
    assert_eq!(squash.inputs.dim(), (500, 8));
    // The recorded pairs satisfy the operator exactly.
    let err = (&squash_rows(&squash.inputs) - &squash.outputs)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-12);

    let soft = &ds["softmax0"];
    assert_eq!(soft.inputs.dim(), (500, 16));
    let err = (&softmax_rows(&soft.inputs) - &soft.outputs)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-12);

    // And the recorded operand is what the upstream layer produces.
    let pose_w = match &g.node("pose").unwrap().weights {
        Some(Payload::Matrix(w)) => w.clone(),
        _ => unreachable!(),
    };
    let want_in = entry.dot(&pose_w);
    let err = (&want_in - &squash.inputs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-12);
}

#[test]
fn capture_rejects_multi_input_targets() {
    let w = Array2::from_elem((2, 2), 1.0);
    let g = Graph::new(
        vec![
            Node {
                id: "input".into(),
                op: OpKind::Identity,
                inputs: vec![],
                output_shape: vec![2],
                weights: None,
                origin: NodeOrigin::Workload,
            },
            Node {
                id: "m".into(),
                op: OpKind::Matmul,
                inputs: vec!["input".into()],
                output_shape: vec![2],
                weights: Some(Payload::Matrix(w)),
                origin: NodeOrigin::Workload,
            },
            Node {
                id: "p".into(),
                op: OpKind::MulElementwise,
                inputs: vec!["input".into(), "m".into()],
                output_shape: vec![2],
                weights: None,
                origin: NodeOrigin::Workload,
            },
        ],
        "input".into(),
        "p".into(),
    )
    .unwrap();
    assert!(capture(&g, &["p".to_string()], &Array2::zeros((4, 2))).is_err());
}

fn handmade_replacement(source: &str, d: usize) -> NeonNet {
    let mut rng = stream(7, "handmade");
    NeonNet {
        source_id: source.to_string(),
        source_op: OpKind::Squash { dim: d },
        net: FcNet {
            layers: vec![
                Layer {
                    w: Array2::from_shape_fn((16, d), |_| rng.gen_range(-0.3..0.3)),
                    b: Array1::zeros(16),
                    act: Activation::Tanh,
                },
                Layer {
                    w: Array2::from_shape_fn((d, 16), |_| rng.gen_range(-0.3..0.3)),
                    b: Array1::zeros(d),
                    act: Activation::Linear,
                },
            ],
            frozen: vec![false, false],
        },
        bounds: BoundSpec {
            input_min: -4.0,
            input_max: 4.0,
            output_min: -1.0,
            output_max: 1.0,
        },
        meta: TrainingMeta {
            hidden_layers: 1,
            val_mse: 0.0,
            epochs_total: 0,
            converged: true,
        },
    }
}

#[test]
fn splice_rewires_topology_and_tags_origins() {
    let g = common::build_capsule_mini();
    let nn = handmade_replacement("squash0", 8);
    let g2 = apply_replacement(&g, "squash0", &nn).unwrap();

    assert!(g2.node("squash0").is_none());
    let origin = NodeOrigin::NeonNet { source: "squash0".into() };
    let spliced: Vec<_> = g2.nodes.iter().filter(|n| n.origin == origin).collect();
    // clamp_in, two matmul/bias pairs, one tanh, clamp_out.
    assert_eq!(spliced.len(), 7);

    // Downstream consumer reads the output clamp now.
    let route = g2.node("route").unwrap();
    assert_eq!(route.inputs, vec!["squash0__clamp_out".to_string()]);

    // The spliced region computes clamp(net(clamp(x))).
    let mut rng = stream(8, "splice:probe");
    let x = Array2::from_shape_fn((9, 64), |_| rng.gen_range(-1.0..1.0));
    let got = run_graph(&g2, &x).unwrap();
    assert!(got.iter().all(|v| v.is_finite()));

    let pose_w = match &g.node("pose").unwrap().weights {
        Some(Payload::Matrix(w)) => w.clone(),
        _ => unreachable!(),
    };
    let pre = x.dot(&pose_w).mapv(|v| v.clamp(-4.0, 4.0));
    let replaced = nn.net.forward(&pre).mapv(|v| v.clamp(-1.0, 1.0));
    let route_w = match &route.weights {
        Some(Payload::Matrix(w)) => w.clone(),
        _ => unreachable!(),
    };
    let want = softmax_rows(&replaced.dot(&route_w));
    let err = (&want - &got).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-12);
}

#[test]
fn splice_rejects_dimension_mismatch() {
    let g = common::build_capsule_mini();
    let nn = handmade_replacement("softmax0", 8); // softmax0 yields 16
    assert!(apply_replacement(&g, "softmax0", &nn).is_err());
}

#[test]
fn transformed_graphs_are_a_fixpoint() {
    let g = common::build_capsule_mini();
    let tcfg = tiny_tcfg(512, 2);
    let out = transform_graph(&g, &tcfg, 99, 1).unwrap();
    assert_eq!(out.report.candidates.len(), 2);
    assert!(delineate(&out.graph, &tcfg.supported_ops).is_empty());

    let again = transform_graph(&out.graph, &tcfg, 99, 1).unwrap();
    assert!(again.report.candidates.is_empty());
    assert!(again.report.sigmoid_rewrites.is_empty());
    assert_eq!(again.graph.nodes.len(), out.graph.nodes.len());
}

#[test]
fn transform_is_deterministic_in_the_master_seed() {
    let g = common::build_capsule_mini();
    let tcfg = tiny_tcfg(512, 2);
    let a = transform_graph(&g, &tcfg, 5, 2).unwrap();
    let b = transform_graph(&g, &tcfg, 5, 1).unwrap();
    // Same seed, different worker counts: bit-identical reports and weights.
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    for (na, nb) in a.graph.nodes.iter().zip(&b.graph.nodes) {
        assert_eq!(na.id, nb.id);
        match (&na.weights, &nb.weights) {
            (Some(Payload::Matrix(x)), Some(Payload::Matrix(y))) => assert_eq!(x, y),
            (Some(Payload::Vector(x)), Some(Payload::Vector(y))) => assert_eq!(x, y),
            (None, None) => {}
            _ => panic!("weight presence diverged on {}", na.id),
        }
    }

    let c = transform_graph(&g, &tcfg, 6, 1).unwrap();
    let mse_a: Vec<f64> = a.report.candidates.iter().map(|c| c.val_mse).collect();
    let mse_c: Vec<f64> = c.report.candidates.iter().map(|c| c.val_mse).collect();
    assert_ne!(mse_a, mse_c);
}

#[test]
fn candidate_training_data_ranges_become_clamps() {
    let g = common::build_capsule_mini();
    let tcfg = tiny_tcfg(512, 2);
    let out = transform_graph(&g, &tcfg, 99, 1).unwrap();
    for cand in &out.report.candidates {
        let clamp_in = out
            .graph
            .node(&format!("{}__clamp_in", cand.node_id))
            .expect("input clamp exists");
        match clamp_in.op {
            OpKind::Clamp { min, max } => {
                assert_eq!(min, cand.bounds.input_min);
                assert_eq!(max, cand.bounds.input_max);
                assert!(min < max);
            }
            _ => panic!("expected clamp"),
        }
    }
}

#[test]
fn vjp_matches_finite_differences() {
    let mut rng = stream(17, "vjp");
    let cases: Vec<(OpKind, bool)> = vec![
        (OpKind::Softmax { dim: 5 }, false),
        (OpKind::Squash { dim: 5 }, false),
        (OpKind::LeakyRelu { alpha: 0.1 }, false),
        (OpKind::SqrtElementwise, true),
        (OpKind::Tanh, false),
        (OpKind::Sigmoid, false),
    ];
    for (op, positive) in cases {
        let x = Array2::from_shape_fn((3, 5), |_| {
            let v: f64 = rng.gen_range(0.2..2.0);
            if positive { v } else { v - 1.1 }
        });
        let gout = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let analytic = true_op_vjp(&op, &x, &gout);

        let apply = |x: &Array2<f64>| -> Array2<f64> {
            match &op {
                OpKind::Softmax { .. } => softmax_rows(x),
                OpKind::Squash { .. } => squash_rows(x),
                OpKind::LeakyRelu { alpha } => x.mapv(|v| if v > 0.0 { v } else { alpha * v }),
                OpKind::SqrtElementwise => x.mapv(f64::sqrt),
                OpKind::Tanh => x.mapv(f64::tanh),
                OpKind::Sigmoid => x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
                _ => unreachable!(),
            }
        };
        let h = 1e-6;
        for r in 0..3 {
            for c in 0..5 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let lp = (&apply(&xp) * &gout).sum();
                let lm = (&apply(&xm) * &gout).sum();
                let fd = (lp - lm) / (2.0 * h);
                let an = analytic[[r, c]];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "{}: fd {fd} vs analytic {an} at ({r},{c})",
                    op.tag()
                );
            }
        }
    }
}

#[test]
fn bounds_widen_degenerate_spans() {
    let ds = neon::transform::CaptureDataset {
        node_id: "x".into(),
        inputs: Array2::from_elem((4, 2), 1.5),
        outputs: Array2::from_elem((4, 2), 0.25),
    };
    let b = extract_bounds(&ds);
    assert!(b.input_min < 1.5 && b.input_max > 1.5);
    assert!(b.output_min < 0.25 && b.output_max > 0.25);
}

#[test]
fn sampled_distributions_have_the_stated_shape() {
    let mut rng = stream(23, "dist");
    let n = 20_000;

    let x = sample_inputs(&InputDist::IidNormal { mean: 0.5, std: 0.2 }, n, 4, &mut rng);
    let mean = x.sum() / x.len() as f64;
    assert!((mean - 0.5).abs() < 0.01);

    let u = sample_inputs(&InputDist::IidUniform { lo: -1.0, hi: 3.0 }, n, 2, &mut rng);
    assert!(u.iter().all(|&v| (-1.0..3.0).contains(&v)));

    let s = sample_inputs(
        &InputDist::ShellMixture { components: 64, radius: 1.0, std: 0.01 },
        n,
        8,
        &mut rng,
    );
    // Row norms hug the shell radius.
    let mut mean_norm = 0.0;
    for r in s.rows() {
        mean_norm += r.dot(&r).sqrt();
    }
    mean_norm /= n as f64;
    assert!((mean_norm - 1.0).abs() < 0.05, "mean norm {mean_norm}");
}

#[test]
fn recovery_training_moves_only_the_adjacent_layers() {
    // A replacement region whose net is exact (tanh is representable as
    // one identity-weighted hidden layer) so the collapsed backward is the
    // true gradient; recovery from a corrupted adjacent layer must work.
    let mut rng = stream(42, "finetune:build");
    let w0 = Array2::from_shape_fn((6, 12), |_| rng.gen_range(-0.5..0.5));
    let w1 = Array2::from_shape_fn((12, 6), |_| rng.gen_range(-0.5..0.5));
    let mk = |id: &str, op: OpKind, inputs: Vec<&str>, shape: usize, w: Option<Payload>| Node {
        id: id.into(),
        op,
        inputs: inputs.into_iter().map(String::from).collect(),
        output_shape: vec![shape],
        weights: w,
        origin: NodeOrigin::Workload,
    };
    let g = Graph::new(
        vec![
            mk("input", OpKind::Identity, vec![], 6, None),
            mk("expand", OpKind::Matmul, vec!["input"], 12, Some(Payload::Matrix(w0))),
            mk("t", OpKind::Tanh, vec!["expand"], 12, None),
            mk("contract", OpKind::Matmul, vec!["t"], 6, Some(Payload::Matrix(w1))),
        ],
        "input".into(),
        "contract".into(),
    )
    .unwrap();

    let eye = Array2::from_diag(&Array1::from_elem(12, 1.0));
    let exact = NeonNet {
        source_id: "t".into(),
        source_op: OpKind::Tanh,
        net: FcNet {
            layers: vec![
                Layer { w: eye.clone(), b: Array1::zeros(12), act: Activation::Tanh },
                Layer { w: eye, b: Array1::zeros(12), act: Activation::Linear },
            ],
            frozen: vec![false, false],
        },
        bounds: BoundSpec { input_min: -10.0, input_max: 10.0, output_min: -1.0, output_max: 1.0 },
        meta: TrainingMeta { hidden_layers: 1, val_mse: 0.0, epochs_total: 0, converged: true },
    };
    let transformed = apply_replacement(&g, "t", &exact).unwrap();

    let xs = Array2::from_shape_fn((768, 6), |_| rng.gen_range(-1.0..1.0));
    let ys = run_graph(&g, &xs).unwrap();
    // Exactness of the region: transformed graph reproduces the original.
    let same = run_graph(&transformed, &xs).unwrap();
    assert!((&same - &ys).iter().all(|v| v.abs() < 1e-12));

    // Knock an adjacent workload layer off its reference point.
    let mut tuned = transformed.clone();
    let idx = tuned.nodes.iter().position(|n| n.id == "expand").unwrap();
    if let Some(Payload::Matrix(w)) = &mut tuned.nodes[idx].weights {
        *w *= 1.3;
    }
    let spoiled = neon::nn::mse(&run_graph(&tuned, &xs).unwrap(), &ys);

    let regions: std::collections::BTreeMap<String, OpKind> =
        [("t".to_string(), OpKind::Tanh)].into_iter().collect();
    let cfg = TrainConfig { learning_rate: 1e-3, seed: 42, ..TrainConfig::default() };
    let rep = fine_tune(&mut tuned, &regions, &xs, &ys, 40, &cfg).unwrap();

    assert_eq!(rep.mse_before, spoiled);
    assert!(
        rep.mse_after < 0.25 * rep.mse_before,
        "weak recovery: {} -> {}",
        rep.mse_before,
        rep.mse_after
    );
    assert!(rep.tuned_nodes.contains(&"expand".to_string()));
    for id in &rep.tuned_nodes {
        let n = tuned.node(id).unwrap();
        assert_eq!(n.origin, NodeOrigin::Workload, "{id} is not a workload layer");
    }
    // Replacement weights themselves are untouched.
    for n in &tuned.nodes {
        if matches!(n.origin, NodeOrigin::NeonNet { .. }) {
            let before = transformed.node(&n.id).unwrap();
            match (&n.weights, &before.weights) {
                (Some(Payload::Matrix(a)), Some(Payload::Matrix(b))) => assert_eq!(a, b),
                (Some(Payload::Vector(a)), Some(Payload::Vector(b))) => assert_eq!(a, b),
                (None, None) => {}
                _ => panic!("weights changed shape on {}", n.id),
            }
        }
    }
}
