//! Replacing an operator perturbs everything downstream of it. A short
//! recovery pass retrains only the layers adjacent to each replacement,
//! running forward through the spliced network but backward through the
//! true operator's gradient, and pulls a classifier back to its original
//! accuracy.
//!
//!     cargo run --release --example finetune_recovery

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;

use neon::graph::{run_graph, Graph, Node, NodeOrigin, OpKind, Payload};
use neon::nn::{train, Activation, FcNet, TrainConfig};
use neon::rng;
use neon::transform::{
    classification_accuracy, fine_tune, sample_inputs, transform_graph, InputDist,
    TransformConfig,
};

/// Three overlapping Gaussian blobs with one-hot labels.
fn blobs(means: &Array2<f64>, n: usize, label: &str) -> (Array2<f64>, Array2<f64>) {
    let mut r = rng::stream(0, label);
    let ks: Vec<usize> = (0..n).map(|_| r.gen_range(0..means.nrows())).collect();
    let mut xs = sample_inputs(&InputDist::IidNormal { mean: 0.0, std: 1.5 }, n, means.ncols(), &mut r);
    let mut ys = Array2::zeros((n, means.nrows()));
    for i in 0..n {
        for j in 0..means.ncols() {
            xs[[i, j]] += means[[ks[i], j]];
        }
        ys[[i, ks[i]]] = 1.0;
    }
    (xs, ys)
}

fn main() -> neon::Result<()> {
    let mut mr = rng::stream(0, "example:recover:means");
    let means = sample_inputs(&InputDist::IidNormal { mean: 0.0, std: 1.4 }, 3, 8, &mut mr);
    let (train_xs, train_ys) = blobs(&means, 6000, "example:recover:train");
    let (eval_xs, eval_ys) = blobs(&means, 2000, "example:recover:eval");

    // Fit a small classifier, then freeze it into a graph with a softmax
    // head. The softmax is the only op that needs replacement.
    let mut ir = rng::stream(0, "example:recover:init");
    let mut net = FcNet::new_seeded(&[8, 16, 3], Activation::Tanh, &mut ir);
    let mut fit = TrainConfig::default();
    fit.seed = rng::derive_seed(0, "example:recover:fit");
    fit.num_epochs = 200;
    fit.learning_rate = 1e-2;
    fit.weight_decay = 0.0;
    fit.batch_size = 256;
    train(&mut net, &train_xs, &train_ys, &fit)?;

    let l0 = &net.layers[0];
    let l1 = &net.layers[1];
    let node = |id: &str, op: OpKind, input: &str, dim: usize, w: Option<Payload>| Node {
        id: id.into(),
        op,
        inputs: if input.is_empty() { vec![] } else { vec![input.into()] },
        output_shape: vec![dim],
        weights: w,
        origin: NodeOrigin::Workload,
    };
    let g = Graph::new(
        vec![
            node("input", OpKind::Identity, "", 8, None),
            node("mm1", OpKind::Matmul, "input", 16, Some(Payload::Matrix(l0.w.t().to_owned()))),
            node("b1", OpKind::BiasAdd, "mm1", 16, Some(Payload::Vector(l0.b.clone()))),
            node("h1", OpKind::Tanh, "b1", 16, None),
            node("mm2", OpKind::Matmul, "h1", 3, Some(Payload::Matrix(l1.w.t().to_owned()))),
            node("b2", OpKind::BiasAdd, "mm2", 3, Some(Payload::Vector(l1.b.clone()))),
            node("sm0", OpKind::Softmax { dim: 3 }, "b2", 3, None),
        ],
        "input".into(),
        "sm0".into(),
    )?;

    let acc = |g: &Graph| -> neon::Result<f64> {
        Ok(classification_accuracy(&run_graph(g, &eval_xs)?, &eval_ys))
    };
    let base_acc = acc(&g)?;

    let mut tcfg = TransformConfig::default();
    tcfg.capture_samples = 8192;
    tcfg.train.max_layers = 1;
    tcfg.entry_dist = InputDist::IidNormal { mean: 0.0, std: 2.1 };
    let out = transform_graph(&g, &tcfg, 0, 1)?;
    let mut transformed = out.graph;
    let raw_acc = acc(&transformed)?;
    println!(
        "softmax head replaced at val MSE {:.3e}",
        out.report.candidates[0].val_mse
    );

    // Recover against the original graph's outputs; ten epochs touching
    // only the layers next to the replacement.
    let reference = run_graph(&g, &train_xs)?;
    let mut ft = TrainConfig::default();
    ft.seed = rng::derive_seed(0, "example:recover:tune");
    ft.learning_rate = 1e-3;
    ft.weight_decay = 0.0;
    ft.batch_size = 256;
    let regions: BTreeMap<String, OpKind> =
        [("sm0".to_string(), OpKind::Softmax { dim: 3 })].into();
    let report = fine_tune(&mut transformed, &regions, &train_xs, &reference, 10, &ft)?;

    println!("baseline accuracy:     {:.2}%", 100.0 * base_acc);
    println!("after replacement:     {:.2}%", 100.0 * raw_acc);
    println!("after 10-epoch tuning: {:.2}%", 100.0 * acc(&transformed)?);
    println!(
        "reference MSE {:.3e} -> {:.3e}, tuned layers: {:?}",
        report.mse_before, report.mse_after, report.tuned_nodes
    );
    Ok(())
}
