//! Picks the hidden activation for replacement networks by training one
//! single-hidden-layer candidate per activation on the same data, same
//! seed, and ranking by validation MSE. On a softmax target tanh comes
//! out ahead of relu, and sigmoid trails both by a wide margin. Takes
//! about a minute; the three candidates train on 50k samples each.
//!
//!     cargo run --release --example activation_search

use neon::graph::softmax_rows;
use neon::nn::{Activation, TrainConfig};
use neon::rng;
use neon::transform::{activation_grid_search, sample_inputs, InputDist};

fn main() -> neon::Result<()> {
    let mut r = rng::stream(0, "example:grid:data");
    let xs = sample_inputs(&InputDist::IidNormal { mean: 0.0, std: 4.0 }, 50_000, 4, &mut r);
    let ys = softmax_rows(&xs);

    let mut cfg = TrainConfig::default();
    cfg.seed = rng::derive_seed(0, "example:grid:train");

    let entries = activation_grid_search(
        &xs,
        &ys,
        &[Activation::Tanh, Activation::Relu, Activation::Sigmoid],
        &cfg,
        1,
    )?;

    println!("softmax-4 fit, 50k samples, {} epochs:", cfg.num_epochs);
    for (rank, e) in entries.iter().enumerate() {
        println!("  {}. {:?} val MSE {:.4e}", rank + 1, e.activation, e.val_mse);
    }
    Ok(())
}
