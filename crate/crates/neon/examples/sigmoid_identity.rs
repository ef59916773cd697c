//! Sigmoid never needs a trained replacement: it rewrites exactly into
//! scale, tanh, rescale, and lift nodes that are all crossbar or
//! fixed-function native. This prints the expansion and measures the
//! error, which is floating-point roundoff, not approximation.
//!
//!     cargo run --example sigmoid_identity

use neon::graph::{run_graph, Graph, Node, NodeOrigin, OpKind};
use neon::rng;
use neon::transform::{rewrite_sigmoid, sample_inputs, InputDist};

fn main() -> neon::Result<()> {
    let g = Graph::new(
        vec![
            Node {
                id: "x".into(),
                op: OpKind::Identity,
                inputs: vec![],
                output_shape: vec![4],
                weights: None,
                origin: NodeOrigin::Workload,
            },
            Node {
                id: "gate".into(),
                op: OpKind::Sigmoid,
                inputs: vec!["x".into()],
                output_shape: vec![4],
                weights: None,
                origin: NodeOrigin::Workload,
            },
        ],
        "x".into(),
        "gate".into(),
    )?;

    let rewritten = rewrite_sigmoid(&g)?;
    println!("sigmoid 'gate' expands to:");
    for n in rewritten.nodes.iter().filter(|n| n.id != "x") {
        println!("  {} ({})", n.id, n.op.tag());
    }

    let mut r = rng::stream(0, "example:sigmoid");
    let xs = sample_inputs(&InputDist::IidUniform { lo: -20.0, hi: 20.0 }, 50_000, 4, &mut r);
    let got = run_graph(&rewritten, &xs)?;
    let worst = xs
        .iter()
        .zip(got.iter())
        .map(|(&x, &y)| (y - 1.0 / (1.0 + (-x).exp())).abs())
        .fold(0.0f64, f64::max);
    println!("max abs deviation over 2e5 points in [-20, 20]: {worst:.3e}");
    Ok(())
}
