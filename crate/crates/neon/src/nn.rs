//! Fully-connected nets and the trainer used to fit operator replacements.
//!
//! Conventions that the rest of the crate relies on:
//! - layer weights are stored `out x in`, biases start at zero,
//! - weight init is Xavier-uniform drawn row-major from the given stream,
//! - the loss is mean squared error over every output element,
//! - weight decay applies to weight matrices only, never biases,
//! - the train/val split and batch order are functions of `TrainConfig.seed`
//!   alone, so identical configs reproduce identical nets bit for bit.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(&self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Linear => z.clone(),
        }
    }

    /// Derivative as a function of pre-activation z and activation a.
    fn deriv(&self, z: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => a.mapv(|v| 1.0 - v * v),
            Activation::Relu => z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Sigmoid => a.mapv(|v| v * (1.0 - v)),
            Activation::Linear => Array2::ones(z.raw_dim()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `out x in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct FcNet {
    pub layers: Vec<Layer>,
    /// Frozen layers keep their parameters through training.
    pub frozen: Vec<bool>,
}

pub fn xavier_uniform(rng: &mut impl Rng, out_dim: usize, in_dim: usize) -> Array2<f64> {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let mut w = Array2::zeros((out_dim, in_dim));
    for o in 0..out_dim {
        for i in 0..in_dim {
            w[[o, i]] = limit * (2.0 * rng.gen::<f64>() - 1.0);
        }
    }
    w
}

impl FcNet {
    /// `dims` lists layer widths input-first; hidden layers use `hidden`,
    /// the output layer is linear.
    pub fn new_seeded(dims: &[usize], hidden: Activation, rng: &mut impl Rng) -> FcNet {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let act = if k + 1 == dims.len() - 1 {
                Activation::Linear
            } else {
                hidden
            };
            layers.push(Layer {
                w: xavier_uniform(rng, dims[k + 1], dims[k]),
                b: Array1::zeros(dims[k + 1]),
                act,
            });
        }
        let n = layers.len();
        FcNet {
            layers,
            frozen: vec![false; n],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.w.ncols()).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.w.nrows()).unwrap_or(0)
    }

    pub fn hidden_layer_count(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.clone();
        for l in &self.layers {
            let z = a.dot(&l.w.t()) + &l.b.view().insert_axis(Axis(0));
            a = l.act.apply(&z);
        }
        a
    }

    pub fn forward_one(&self, x: &Array1<f64>) -> Array1<f64> {
        let b = x.view().insert_axis(Axis(0)).to_owned();
        self.forward(&b).index_axis(Axis(0), 0).to_owned()
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> Cache {
        let mut acts = vec![x.clone()];
        let mut zs = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let z = acts.last().unwrap().dot(&l.w.t()) + &l.b.view().insert_axis(Axis(0));
            let a = l.act.apply(&z);
            zs.push(z);
            acts.push(a);
        }
        Cache { acts, zs }
    }

    pub fn mse_on(&self, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
        mse(&self.forward(x), y)
    }
}

pub struct Cache {
    /// acts[0] is the input batch; acts[k+1] the output of layer k.
    acts: Vec<Array2<f64>>,
    zs: Vec<Array2<f64>>,
}

/// Mean squared error over all elements.
pub fn mse(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    assert_eq!(pred.raw_dim(), truth.raw_dim());
    let d = pred - truth;
    d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
}

pub struct Grads {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

/// dL/dparams for MSE against `y`. Frozen layers still propagate gradient
/// but report zero for their own parameters.
pub fn backward(net: &FcNet, cache: &Cache, y: &Array2<f64>) -> Grads {
    let pred = cache.acts.last().unwrap();
    let scale = 2.0 / pred.len() as f64;
    let mut gout = (pred - y) * scale;
    let mut gw = Vec::with_capacity(net.layers.len());
    let mut gb = Vec::with_capacity(net.layers.len());
    for (k, l) in net.layers.iter().enumerate().rev() {
        let dz = &gout * &l.act.deriv(&cache.zs[k], &cache.acts[k + 1]);
        if net.frozen[k] {
            gw.push(Array2::zeros(l.w.raw_dim()));
            gb.push(Array1::zeros(l.b.raw_dim()));
        } else {
            gw.push(dz.t().dot(&cache.acts[k]));
            gb.push(dz.sum_axis(Axis(0)));
        }
        gout = dz.dot(&l.w);
    }
    gw.reverse();
    gb.reverse();
    Grads { w: gw, b: gb }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Validation-MSE target the structure search trains toward.
    pub epsilon: f64,
    /// Hidden-layer budget for the structure search.
    pub max_layers: usize,
    pub num_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Width of every hidden layer; equals the crossbar dimension so a
    /// hidden layer occupies full tile rows.
    pub xbar_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epsilon: 1e-4,
            max_layers: 100,
            num_epochs: 100,
            batch_size: 1024,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            seed: 0,
            xbar_size: 128,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct AdamHp {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
}

struct AdamState {
    mw: Vec<Array2<f64>>,
    vw: Vec<Array2<f64>>,
    mb: Vec<Array1<f64>>,
    vb: Vec<Array1<f64>>,
    t: u64,
}

impl AdamState {
    fn new(net: &FcNet) -> AdamState {
        AdamState {
            mw: net.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            vw: net.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            mb: net.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
            vb: net.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut FcNet, g: &Grads, hp: AdamHp) {
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for k in 0..net.layers.len() {
            if net.frozen[k] {
                continue;
            }
            // Decay enters through the gradient, weights only.
            let gw = &g.w[k] + &(&net.layers[k].w * hp.wd);
            self.mw[k] = &self.mw[k] * hp.beta1 + &gw * (1.0 - hp.beta1);
            self.vw[k] = &self.vw[k] * hp.beta2 + &gw.mapv(|v| v * v) * (1.0 - hp.beta2);
            let upd = (&self.mw[k] / bc1) / ((&self.vw[k] / bc2).mapv(f64::sqrt) + hp.eps);
            net.layers[k].w = &net.layers[k].w - &(upd * hp.lr);

            let gb = &g.b[k];
            self.mb[k] = &self.mb[k] * hp.beta1 + gb * (1.0 - hp.beta1);
            self.vb[k] = &self.vb[k] * hp.beta2 + &gb.mapv(|v| v * v) * (1.0 - hp.beta2);
            let updb = (&self.mb[k] / bc1) / ((&self.vb[k] / bc2).mapv(f64::sqrt) + hp.eps);
            net.layers[k].b = &net.layers[k].b - &(updb * hp.lr);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainResult {
    /// Validation MSE after each epoch.
    pub loss_curve: Vec<f64>,
    /// Final validation MSE.
    pub val_mse: f64,
    pub epochs_run: usize,
}

/// Trains `net` in place with Adam for `cfg.num_epochs` epochs.
///
/// The data is split 90/10 train/validation by a permutation drawn from
/// `cfg.seed`; at least one sample lands in each side when possible. A
/// dataset smaller than one batch trains as a single full batch.
pub fn train(net: &mut FcNet, xs: &Array2<f64>, ys: &Array2<f64>, cfg: &TrainConfig) -> Result<TrainResult> {
    let n = xs.nrows();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    if ys.nrows() != n {
        return Err(Error::Dim(format!(
            "{} inputs vs {} targets",
            n,
            ys.nrows()
        )));
    }
    if xs.ncols() != net.in_dim() || ys.ncols() != net.out_dim() {
        return Err(Error::Dim(format!(
            "net is {}->{}, data is {}->{}",
            net.in_dim(),
            net.out_dim(),
            xs.ncols(),
            ys.ncols()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let nval = ((n as f64) * 0.1).round().max(1.0) as usize;
    let (val_idx, tr_idx) = if nval >= n {
        // Degenerate split: validate on the training points.
        (idx.clone(), idx.clone())
    } else {
        (idx[..nval].to_vec(), idx[nval..].to_vec())
    };

    let take = |ids: &[usize], a: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), a.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&a.row(i));
        }
        out
    };
    let xval = take(&val_idx, xs);
    let yval = take(&val_idx, ys);

    let hp = AdamHp {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        wd: cfg.weight_decay,
    };
    let mut adam = AdamState::new(net);
    let mut order = tr_idx.clone();
    let mut curve = Vec::with_capacity(cfg.num_epochs);
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.num_epochs {
        order.shuffle(&mut rng);
        let mut at = 0;
        while at < order.len() {
            let hi = (at + batch).min(order.len());
            let xb = take(&order[at..hi], xs);
            let yb = take(&order[at..hi], ys);
            let cache = net.forward_cached(&xb);
            let grads = backward(net, &cache, &yb);
            adam.step(net, &grads, hp);
            at = hi;
        }
        curve.push(net.mse_on(&xval, &yval));
    }
    let val_mse = *curve.last().unwrap_or(&f64::INFINITY);
    Ok(TrainResult {
        epochs_run: curve.len(),
        loss_curve: curve,
        val_mse,
    })
}

// ---------------------------------------------------------------------------
// Fixed-point evaluation

/// Two's-complement fixed point: `bits` total, `frac_bits` fractional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    pub frac_bits: u32,
}

impl QuantSpec {
    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    pub fn qmin(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn scale(&self) -> f64 {
        (1u64 << self.frac_bits) as f64
    }
}

/// Largest fractional width (clamped to [1, bits-1]) that still represents
/// `max_abs` without overflow in `bits`-bit two's complement.
pub fn calibrate_frac_bits(bits: u32, max_abs: f64) -> u32 {
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    let mut f = bits - 1;
    while f > 1 && max_abs * (1u64 << f) as f64 > qmax {
        f -= 1;
    }
    f
}

#[derive(Debug, Default, Clone, Copy, Serialize, Deserialize)]
pub struct SaturationCount {
    pub weights: u64,
    pub activations: u64,
}

fn quantize_value(v: f64, spec: QuantSpec, sat: &mut u64) -> i64 {
    let q = (v * spec.scale()).round();
    let qi = q as i64;
    if qi > spec.qmax() {
        *sat += 1;
        spec.qmax()
    } else if qi < spec.qmin() {
        *sat += 1;
        spec.qmin()
    } else {
        qi
    }
}

/// Nonlinearities under quantization go through a lookup table over the
/// fixed-point input grid: `1 << frac_bits` evenly spaced entries spanning
/// the activation's saturation window, linearly interpolated, with the
/// result re-quantized. Inputs beyond the window clamp to the edge entries.
struct ActTable {
    lo: f64,
    hi: f64,
    values: Vec<f64>,
}

impl ActTable {
    fn build(act: Activation, spec: QuantSpec) -> Option<ActTable> {
        let (lo, hi, f): (f64, f64, fn(f64) -> f64) = match act {
            Activation::Tanh => (-8.0, 8.0, f64::tanh),
            Activation::Sigmoid => (-16.0, 16.0, |v| 1.0 / (1.0 + (-v).exp())),
            Activation::Relu | Activation::Linear => return None,
        };
        let n = 1usize << spec.frac_bits;
        let values = (0..n)
            .map(|i| f(lo + (hi - lo) * i as f64 / (n - 1) as f64))
            .collect();
        Some(ActTable { lo, hi, values })
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let t = ((x - self.lo) / (self.hi - self.lo) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
        let i = t.floor() as usize;
        if i + 1 >= n {
            return self.values[n - 1];
        }
        let frac = t - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
}

/// Runs the net in `spec` fixed point: weights, biases, and activations are
/// quantized, matmuls accumulate in 64-bit at doubled fractional width, and
/// every requantization saturates (saturations are counted, never silent).
/// Returns the dequantized output batch.
pub fn quantize_eval(net: &FcNet, spec: QuantSpec, x: &Array2<f64>) -> (Array2<f64>, SaturationCount) {
    let mut sat = SaturationCount::default();
    let f = spec.frac_bits;
    // One-time weight quantization.
    let qnet: Vec<(Array2<i64>, Array1<i64>)> = net
        .layers
        .iter()
        .map(|l| {
            (
                l.w.mapv(|v| quantize_value(v, spec, &mut sat.weights)),
                l.b.mapv(|v| quantize_value(v, spec, &mut sat.weights)),
            )
        })
        .collect();

    let mut qa = x.mapv(|v| quantize_value(v, spec, &mut sat.activations));
    for (l, (qw, qb)) in net.layers.iter().zip(&qnet) {
        let (bsz, in_dim) = qa.dim();
        let out_dim = qw.nrows();
        let mut qz = Array2::<i64>::zeros((bsz, out_dim));
        for r in 0..bsz {
            for o in 0..out_dim {
                // Products carry 2f fractional bits; the bias is lifted to match.
                let mut acc: i64 = qb[o] << f;
                for i in 0..in_dim {
                    acc += qw[[o, i]] * qa[[r, i]];
                }
                // Round-to-nearest back to f fractional bits; the floor
                // shift makes `acc + half` round halves up for both signs.
                let half = 1i64 << (f - 1);
                let rounded = (acc + half) >> f;
                qz[[r, o]] = if rounded > spec.qmax() {
                    sat.activations += 1;
                    spec.qmax()
                } else if rounded < spec.qmin() {
                    sat.activations += 1;
                    spec.qmin()
                } else {
                    rounded
                };
            }
        }
        qa = match l.act {
            Activation::Linear => qz,
            Activation::Relu => qz.mapv(|v| v.max(0)),
            act => {
                let table = ActTable::build(act, spec).expect("table activation");
                qz.mapv(|q| quantize_value(table.eval(q as f64 / spec.scale()), spec, &mut sat.activations))
            }
        };
    }
    (qa.mapv(|q| q as f64 / spec.scale()), sat)
}

/// Mean over rows of the cosine similarity between corresponding rows.
/// Two zero rows count as 1, a single zero row as 0.
pub fn cosine_similarity(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.raw_dim(), b.raw_dim());
    let mut total = 0.0;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let na = ra.dot(&ra).sqrt();
        let nb = rb.dot(&rb).sqrt();
        total += if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            ra.dot(&rb) / (na * nb)
        };
    }
    total / a.nrows() as f64
}
