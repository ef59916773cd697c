//! Crossbar cells hold fixed-point conductances, so a trained replacement
//! only survives deployment if it still tracks its target after 16-bit
//! quantization of weights and table-interpolated activations. Trains a
//! small softmax replacement, calibrates the fixed-point format against
//! the largest magnitude in play, and compares float vs quantized output.
//!
//!     cargo run --release --example quantized_inference

use neon::graph::softmax_rows;
use neon::nn::{
    calibrate_frac_bits, cosine_similarity, mse, quantize_eval, QuantSpec, TrainConfig,
};
use neon::rng;
use neon::transform::{grow_structure, sample_inputs, InputDist};

fn main() -> neon::Result<()> {
    let mut r = rng::stream(0, "example:quant:data");
    let xs = sample_inputs(&InputDist::IidNormal { mean: 0.0, std: 0.55 }, 10_000, 8, &mut r);
    let ys = softmax_rows(&xs);

    let mut cfg = TrainConfig::default();
    cfg.seed = rng::derive_seed(0, "example:quant:train");
    cfg.max_layers = 1;
    // Looser float target: the subject here is fixed point, not the last
    // decade of float MSE.
    cfg.epsilon = 1e-3;
    let (net, meta) = grow_structure(&xs, &ys, &cfg)?;
    println!(
        "replacement: {} hidden layer(s), float val MSE {:.3e}",
        meta.hidden_layers, meta.val_mse
    );

    // Probes from the training distribution, never seen in training.
    let mut pr = rng::stream(0, "example:quant:probe");
    let probes = sample_inputs(&InputDist::IidNormal { mean: 0.0, std: 0.55 }, 4096, 8, &mut pr);
    let float_out = net.forward(&probes);

    let max_abs = net
        .layers
        .iter()
        .flat_map(|l| l.w.iter().chain(l.b.iter()))
        .chain(probes.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let spec = QuantSpec {
        bits: 16,
        frac_bits: calibrate_frac_bits(16, max_abs),
    };
    println!(
        "largest magnitude {max_abs:.3} -> Q{}.{} fixed point",
        spec.bits - spec.frac_bits,
        spec.frac_bits
    );

    let (fixed_out, sat) = quantize_eval(&net, spec, &probes);
    println!(
        "quantized vs float: MSE {:.3e}, cosine {:.6}",
        mse(&fixed_out, &float_out),
        cosine_similarity(&fixed_out, &float_out)
    );
    println!(
        "quantized vs true softmax: MSE {:.3e}",
        mse(&fixed_out, &softmax_rows(&probes))
    );
    println!(
        "saturations: {} weight(s), {} activation(s)",
        sat.weights, sat.activations
    );
    Ok(())
}
