//! End-to-end operator replacement on a small graph: candidate
//! delineation, operand capture, replacement training, and splicing,
//! followed by a numeric check of the transformed graph against the
//! original on fresh probes.
//!
//!     cargo run --release --example transform_pipeline

use neon::graph::{run_graph, Graph, Node, NodeOrigin, OpKind, Payload};
use neon::rng;
use neon::transform::{sample_inputs, transform_graph, InputDist, TransformConfig};

fn main() -> neon::Result<()> {
    // A toy attention head: project 16 scores down to 8, normalize them,
    // then mix back up to 16. Only the softmax needs replacement; the
    // matmuls are native crossbar work.
    let mut wr = rng::stream(7, "example:weights");
    let w_in = sample_inputs(&InputDist::IidNormal { mean: 0.0, std: 0.14 }, 16, 8, &mut wr);
    let w_out = sample_inputs(&InputDist::IidNormal { mean: 0.0, std: 0.3 }, 8, 16, &mut wr);
    let g = Graph::new(
        vec![
            Node {
                id: "input".into(),
                op: OpKind::Identity,
                inputs: vec![],
                output_shape: vec![16],
                weights: None,
                origin: NodeOrigin::Workload,
            },
            Node {
                id: "scores".into(),
                op: OpKind::Matmul,
                inputs: vec!["input".into()],
                output_shape: vec![8],
                weights: Some(Payload::Matrix(w_in)),
                origin: NodeOrigin::Workload,
            },
            Node {
                id: "attn".into(),
                op: OpKind::Softmax { dim: 8 },
                inputs: vec!["scores".into()],
                output_shape: vec![8],
                weights: None,
                origin: NodeOrigin::Workload,
            },
            Node {
                id: "mix".into(),
                op: OpKind::Matmul,
                inputs: vec!["attn".into()],
                output_shape: vec![16],
                weights: Some(Payload::Matrix(w_out)),
                origin: NodeOrigin::Workload,
            },
        ],
        "input".into(),
        "mix".into(),
    )?;

    let mut cfg = TransformConfig::default();
    cfg.capture_samples = 8192;
    cfg.train.num_epochs = 100;
    cfg.train.max_layers = 2;
    // A demo-sized target; production runs hold the default and spend the
    // epochs it takes.
    cfg.train.epsilon = 1e-3;
    let out = transform_graph(&g, &cfg, 0, 1)?;

    for cand in &out.report.candidates {
        println!(
            "replaced '{}' ({}) with {} hidden layer(s), val MSE {:.3e}{}",
            cand.node_id,
            cand.op,
            cand.hidden_layers,
            cand.val_mse,
            if cand.converged { "" } else { " [not converged]" }
        );
        println!(
            "  operand range [{:.3}, {:.3}], output range [{:.3}, {:.3}]",
            cand.bounds.input_min,
            cand.bounds.input_max,
            cand.bounds.output_min,
            cand.bounds.output_max
        );
    }
    println!(
        "graph grew from {} to {} nodes",
        g.nodes.len(),
        out.graph.nodes.len()
    );

    // Fresh probes the capture never saw.
    let mut pr = rng::stream(7, "example:probes");
    let probes = sample_inputs(&InputDist::IidNormal { mean: 0.0, std: 1.0 }, 2048, 16, &mut pr);
    let want = run_graph(&g, &probes)?;
    let got = run_graph(&out.graph, &probes)?;
    let err = (&want - &got).mapv(|v| v * v).mean().unwrap();
    println!("end-to-end MSE against the original graph: {err:.3e}");
    Ok(())
}
