//! Shared fixture builders and helpers for the integration tests.
//!
//! Fixture graphs are committed under `fixtures/`; the builders here are
//! the source of truth and a non-ignored test asserts the committed files
//! still match them byte for byte.

#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use neon::graph::{Graph, Node, NodeOrigin, OpKind, Payload};
use neon::rng;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture_path(name: &str) -> PathBuf {
    fixture_dir().join(format!("{name}.json"))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps fixture weights independent of rand_distr internals.
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn weight_matrix(seed_label: &str, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut r = rng::stream(42, seed_label);
    let mut w = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            w[[i, j]] = std * gauss(&mut r);
        }
    }
    w
}

fn bias_vector(seed_label: &str, len: usize, std: f64) -> Array1<f64> {
    let mut r = rng::stream(42, seed_label);
    Array1::from_iter((0..len).map(|_| std * gauss(&mut r)))
}

pub fn entry(id: &str, dim: usize) -> Node {
    Node {
        id: id.into(),
        op: OpKind::Identity,
        inputs: vec![],
        output_shape: vec![dim],
        weights: None,
        origin: NodeOrigin::Workload,
    }
}

pub fn matmul(id: &str, input: &str, w: Array2<f64>) -> Node {
    let out = w.ncols();
    Node {
        id: id.into(),
        op: OpKind::Matmul,
        inputs: vec![input.into()],
        output_shape: vec![out],
        weights: Some(Payload::Matrix(w)),
        origin: NodeOrigin::Workload,
    }
}

pub fn bias(id: &str, input: &str, b: Array1<f64>) -> Node {
    let out = b.len();
    Node {
        id: id.into(),
        op: OpKind::BiasAdd,
        inputs: vec![input.into()],
        output_shape: vec![out],
        weights: Some(Payload::Vector(b)),
        origin: NodeOrigin::Workload,
    }
}

pub fn unary(id: &str, input: &str, op: OpKind, dim: usize) -> Node {
    Node {
        id: id.into(),
        op,
        inputs: vec![input.into()],
        output_shape: vec![dim],
        weights: None,
        origin: NodeOrigin::Workload,
    }
}

/// Norm-then-route toy: squash on an 8-dim pose vector, then a routing
/// softmax. Weight scales keep squash inputs near unit norm and softmax
/// logits spread a few units apart.
pub fn build_capsule_mini() -> Graph {
    let w1 = weight_matrix("fixture:capsule:m1", 64, 8, 1.0 / (512f64).sqrt());
    let w2 = weight_matrix("fixture:capsule:m2", 8, 16, 2.8);
    Graph::new(
        vec![
            entry("input", 64),
            matmul("pose", "input", w1),
            unary("squash0", "pose", OpKind::Squash { dim: 8 }, 8),
            matmul("route", "squash0", w2),
            unary("softmax0", "route", OpKind::Softmax { dim: 16 }, 16),
        ],
        "input".into(),
        "softmax0".into(),
    )
    .expect("capsule_mini is well formed")
}

/// Attention-shaped toy: score softmax over 64 keys between two
/// projections, with a sigmoid gate on the output.
pub fn build_attn_mini() -> Graph {
    let wq = weight_matrix("fixture:attn:q", 128, 64, 0.55 / (128f64).sqrt());
    let wo = weight_matrix("fixture:attn:o", 64, 128, 8.0);
    Graph::new(
        vec![
            entry("input", 128),
            matmul("scores", "input", wq),
            unary("softmax0", "scores", OpKind::Softmax { dim: 64 }, 64),
            matmul("mix", "softmax0", wo),
            unary("gate", "mix", OpKind::Sigmoid, 128),
        ],
        "input".into(),
        "gate".into(),
    )
    .expect("attn_mini is well formed")
}

/// Wide-softmax MLP: the 256-way softmax dominates fixed-function latency.
pub fn build_mlp_mini() -> Graph {
    let w1 = weight_matrix("fixture:mlp:fc1", 128, 256, 0.55 / (128f64).sqrt());
    let w2 = weight_matrix("fixture:mlp:fc2", 256, 16, 1.0 / 16.0);
    Graph::new(
        vec![
            entry("input", 128),
            matmul("fc1", "input", w1),
            unary("softmax0", "fc1", OpKind::Softmax { dim: 256 }, 256),
            matmul("fc2", "softmax0", w2),
        ],
        "input".into(),
        "fc2".into(),
    )
    .expect("mlp_mini is well formed")
}

/// Deep stack of wide affine layers ending in a small squash: enough
/// workload weight volume that programming one replacement network is
/// amortized far below a single inference pass.
pub fn build_deep_mini() -> Graph {
    let dims = [4096usize, 2048, 2048, 4096, 1024, 8];
    let mut nodes = vec![entry("input", dims[0])];
    let mut prev = "input".to_string();
    for (k, pair) in dims.windows(2).enumerate() {
        let (din, dout) = (pair[0], pair[1]);
        let wid = format!("fc{k}");
        let bid = format!("b{k}");
        nodes.push(matmul(
            &wid,
            &prev,
            weight_matrix(&format!("fixture:deep:w{k}"), din, dout, 1.0 / (din as f64).sqrt()),
        ));
        nodes.push(bias(
            &bid,
            &wid,
            bias_vector(&format!("fixture:deep:b{k}"), dout, 0.01),
        ));
        prev = bid;
    }
    nodes.push(unary("squash0", &prev, OpKind::Squash { dim: 8 }, 8));
    Graph::new(nodes, "input".into(), "squash0".into()).expect("deep_mini is well formed")
}

pub const FIXTURES: [(&str, fn() -> Graph); 3] = [
    ("capsule_mini", build_capsule_mini),
    ("attn_mini", build_attn_mini),
    ("mlp_mini", build_mlp_mini),
];
