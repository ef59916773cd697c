//! The replacement pipeline: find operators the hardware cannot run, fit a
//! small tanh network to each over a captured operand distribution, and
//! splice the trained network back into the graph between safety clamps.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    classify_op, execute_batch, Graph, Node, NodeOrigin, OpKind, Payload, SupportClass,
};
use crate::nn::{train, Activation, FcNet, TrainConfig};
use crate::rng;

// ---------------------------------------------------------------------------
// Operand sampling

/// Distribution of graph-entry samples during capture. Exposed in run
/// configs; replacement quality is very sensitive to it, so it is part of
/// the reproducible run description rather than a hardcoded choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDist {
    IidNormal { mean: f64, std: f64 },
    IidUniform { lo: f64, hi: f64 },
    /// Equal-weight mixture; each component is iid normal per element.
    GaussianMixture { components: Vec<MixtureComponent> },
    /// Components centered at seeded random directions of fixed norm;
    /// keeps samples near a shell of the given radius.
    ShellMixture { components: usize, radius: f64, std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl Default for InputDist {
    fn default() -> Self {
        InputDist::IidNormal { mean: 0.0, std: 1.0 }
    }
}

/// Draws `n x d` samples. The draw order is fixed (row-major, mixture
/// component chosen before its offsets) so a given stream always yields the
/// same dataset.
pub fn sample_inputs(dist: &InputDist, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Array2::zeros((n, d));
    match dist {
        InputDist::IidNormal { mean, std } => {
            for r in 0..n {
                for c in 0..d {
                    out[[r, c]] = mean + std * std_normal.sample(rng);
                }
            }
        }
        InputDist::IidUniform { lo, hi } => {
            for r in 0..n {
                for c in 0..d {
                    out[[r, c]] = lo + (hi - lo) * rng.gen::<f64>();
                }
            }
        }
        InputDist::GaussianMixture { components } => {
            assert!(!components.is_empty(), "mixture needs components");
            let total: f64 = components.iter().map(|c| c.weight).sum();
            for r in 0..n {
                let mut pick = rng.gen::<f64>() * total;
                let mut comp = &components[components.len() - 1];
                for c in components {
                    if pick < c.weight {
                        comp = c;
                        break;
                    }
                    pick -= c.weight;
                }
                for c in 0..d {
                    out[[r, c]] = comp.mean + comp.std * std_normal.sample(rng);
                }
            }
        }
        InputDist::ShellMixture { components, radius, std } => {
            assert!(*components > 0, "mixture needs components");
            let mut centers = Array2::zeros((*components, d));
            for k in 0..*components {
                let mut norm2 = 0.0;
                for c in 0..d {
                    let g: f64 = std_normal.sample(rng);
                    centers[[k, c]] = g;
                    norm2 += g * g;
                }
                let scale = radius / norm2.sqrt().max(1e-12);
                for c in 0..d {
                    centers[[k, c]] *= scale;
                }
            }
            for r in 0..n {
                let k = rng.gen_range(0..*components);
                for c in 0..d {
                    out[[r, c]] = centers[[k, c]] + std * std_normal.sample(rng);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Capture

#[derive(Debug, Clone)]
pub struct CaptureDataset {
    pub node_id: String,
    pub inputs: Array2<f64>,
    pub outputs: Array2<f64>,
}

/// Runs the graph over `entry_inputs` and records the operand/result pairs
/// seen by each listed node. Executes in chunks so only the requested
/// node data is retained.
pub fn capture(
    g: &Graph,
    node_ids: &[String],
    entry_inputs: &Array2<f64>,
) -> Result<BTreeMap<String, CaptureDataset>> {
    for id in node_ids {
        let n = g
            .node(id)
            .ok_or_else(|| Error::Schema(format!("capture target '{id}' not in graph")))?;
        if n.op.arity() != 1 {
            return Err(Error::Schema(format!(
                "capture target '{id}' is not single-input"
            )));
        }
    }
    let total = entry_inputs.nrows();
    let mut ins: BTreeMap<String, Vec<Array2<f64>>> = BTreeMap::new();
    let mut outs: BTreeMap<String, Vec<Array2<f64>>> = BTreeMap::new();
    let chunk = 2048;
    let mut at = 0;
    while at < total {
        let hi = (at + chunk).min(total);
        let block = entry_inputs.slice(ndarray::s![at..hi, ..]).to_owned();
        let traces = execute_batch(g, &block)?;
        for id in node_ids {
            let t = &traces[g.node_index(id).unwrap()];
            ins.entry(id.clone()).or_default().push(t.inputs[0].clone());
            outs.entry(id.clone()).or_default().push(t.output.clone());
        }
        at = hi;
    }
    let mut result = BTreeMap::new();
    for id in node_ids {
        let stack = |parts: &[Array2<f64>]| {
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("same widths")
        };
        result.insert(
            id.clone(),
            CaptureDataset {
                node_id: id.clone(),
                inputs: stack(&ins[id]),
                outputs: stack(&outs[id]),
            },
        );
    }
    Ok(result)
}

// ---------------------------------------------------------------------------
// Delineation and the sigmoid rewrite

/// Ids of workload nodes that need a trained replacement, in topo order.
/// Nodes emitted by earlier replacement passes are never candidates.
pub fn delineate(g: &Graph, supported: &BTreeSet<String>) -> Vec<String> {
    g.topo_order()
        .iter()
        .map(|&i| &g.nodes[i])
        .filter(|n| {
            n.origin == NodeOrigin::Workload
                && classify_op(&n.op, supported) == SupportClass::TransformCandidate
        })
        .map(|n| n.id.clone())
        .collect()
}

fn diag_matrix(d: usize, v: f64) -> Array2<f64> {
    Array2::from_diag(&Array1::from_elem(d, v))
}

/// Replaces every sigmoid with the exact identity
/// `sigmoid(x) = 0.5 + 0.5 * tanh(x / 2)`, expressed as
/// scale-by-half, tanh, scale-by-half, bias. No training involved.
pub fn rewrite_sigmoid(g: &Graph) -> Result<Graph> {
    let targets: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| n.op == OpKind::Sigmoid)
        .map(|n| n.id.clone())
        .collect();
    if targets.is_empty() {
        return Ok(g.clone());
    }
    let mut nodes = g.nodes.clone();
    let mut entry = g.entry.clone();
    let mut exit = g.exit.clone();
    for id in &targets {
        let pos = nodes.iter().position(|n| &n.id == id).unwrap();
        let old = nodes.remove(pos);
        let d = old.output_shape.iter().product::<usize>();
        let origin = NodeOrigin::IdentityRewrite { source: id.clone() };
        let pre = format!("{id}__halve");
        let th = format!("{id}__tanh");
        let post = format!("{id}__rescale");
        let lift = format!("{id}__lift");
        let shape = old.output_shape.clone();
        nodes.push(Node {
            id: pre.clone(),
            op: OpKind::Matmul,
            inputs: old.inputs.clone(),
            output_shape: shape.clone(),
            weights: Some(Payload::Matrix(diag_matrix(d, 0.5))),
            origin: origin.clone(),
        });
        nodes.push(Node {
            id: th.clone(),
            op: OpKind::Tanh,
            inputs: vec![pre.clone()],
            output_shape: shape.clone(),
            weights: None,
            origin: origin.clone(),
        });
        nodes.push(Node {
            id: post.clone(),
            op: OpKind::Matmul,
            inputs: vec![th.clone()],
            output_shape: shape.clone(),
            weights: Some(Payload::Matrix(diag_matrix(d, 0.5))),
            origin: origin.clone(),
        });
        nodes.push(Node {
            id: lift.clone(),
            op: OpKind::BiasAdd,
            inputs: vec![post.clone()],
            output_shape: shape,
            weights: Some(Payload::Vector(Array1::from_elem(d, 0.5))),
            origin,
        });
        for n in nodes.iter_mut() {
            for inp in n.inputs.iter_mut() {
                if inp == id {
                    *inp = lift.clone();
                }
            }
        }
        if &entry == id {
            entry = pre.clone();
        }
        if &exit == id {
            exit = lift.clone();
        }
    }
    Graph::new(nodes, entry, exit)
}

// ---------------------------------------------------------------------------
// Structure growth

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Hidden layers in the final (accepted or last-attempted) net.
    pub hidden_layers: usize,
    pub val_mse: f64,
    /// Epochs summed over all growth attempts.
    pub epochs_total: usize,
    pub converged: bool,
}

/// Grows a tanh net for the captured pairs: start at one hidden layer of
/// `xbar_size`, train the full epoch budget, accept when validation MSE
/// reaches `epsilon`, otherwise add a layer and restart from a fresh init
/// and fresh optimizer state, up to `max_layers`.
pub fn grow_structure(
    inputs: &Array2<f64>,
    outputs: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(FcNet, TrainingMeta)> {
    use rand_chacha::rand_core::SeedableRng;
    let in_dim = inputs.ncols();
    let out_dim = outputs.ncols();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs_total = 0;
    let mut last: Option<(FcNet, f64)> = None;
    for layers in 1..=cfg.max_layers.max(1) {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(cfg.xbar_size).take(layers));
        dims.push(out_dim);
        let mut net = FcNet::new_seeded(&dims, Activation::Tanh, &mut init_rng);
        let res = train(&mut net, inputs, outputs, cfg)?;
        epochs_total += res.epochs_run;
        let converged = res.val_mse <= cfg.epsilon;
        last = Some((net, res.val_mse));
        if converged {
            break;
        }
    }
    let (net, val_mse) = last.expect("at least one attempt");
    let hidden = net.hidden_layer_count();
    Ok((
        net,
        TrainingMeta {
            hidden_layers: hidden,
            val_mse,
            epochs_total,
            converged: val_mse <= cfg.epsilon,
        },
    ))
}

// ---------------------------------------------------------------------------
// Bounds and replacement

/// Scalar operand/result ranges observed during capture. Degenerate ranges
/// are widened so the emitted clamps never pin to a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSpec {
    pub input_min: f64,
    pub input_max: f64,
    pub output_min: f64,
    pub output_max: f64,
}

pub fn extract_bounds(ds: &CaptureDataset) -> BoundSpec {
    fn span(a: &Array2<f64>) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in a.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            lo -= 1e-6;
            hi += 1e-6;
        }
        (lo, hi)
    }
    let (input_min, input_max) = span(&ds.inputs);
    let (output_min, output_max) = span(&ds.outputs);
    BoundSpec {
        input_min,
        input_max,
        output_min,
        output_max,
    }
}

/// A trained replacement for one operator instance.
#[derive(Debug, Clone)]
pub struct NeonNet {
    pub source_id: String,
    pub source_op: OpKind,
    pub net: FcNet,
    pub bounds: BoundSpec,
    pub meta: TrainingMeta,
}

/// Splices `nn` into the graph in place of `node_id`:
/// input clamp, then the net's layers as matmul/bias/tanh nodes, then an
/// output clamp. Emitted nodes carry a `NeonNet` origin so later passes
/// leave them alone.
pub fn apply_replacement(g: &Graph, node_id: &str, nn: &NeonNet) -> Result<Graph> {
    let old = g
        .node(node_id)
        .ok_or_else(|| Error::Schema(format!("replacement target '{node_id}' not in graph")))?;
    if old.op.arity() != 1 {
        return Err(Error::Schema(format!(
            "replacement target '{node_id}' is not single-input"
        )));
    }
    let in_d = nn.net.in_dim();
    let out_d = nn.net.out_dim();
    if old.out_elems() != out_d {
        return Err(Error::Dim(format!(
            "net yields {out_d} elements, node '{node_id}' yields {}",
            old.out_elems()
        )));
    }
    let origin = NodeOrigin::NeonNet {
        source: node_id.to_string(),
    };
    let mut nodes: Vec<Node> = g.nodes.iter().filter(|n| n.id != node_id).cloned().collect();
    let clamp_in = format!("{node_id}__clamp_in");
    let clamp_out = format!("{node_id}__clamp_out");
    nodes.push(Node {
        id: clamp_in.clone(),
        op: OpKind::Clamp {
            min: nn.bounds.input_min,
            max: nn.bounds.input_max,
        },
        inputs: old.inputs.clone(),
        output_shape: vec![in_d],
        weights: None,
        origin: origin.clone(),
    });
    let mut prev = clamp_in.clone();
    for (k, layer) in nn.net.layers.iter().enumerate() {
        let width = layer.w.nrows();
        let mm = format!("{node_id}__l{k}_mm");
        nodes.push(Node {
            id: mm.clone(),
            op: OpKind::Matmul,
            inputs: vec![prev.clone()],
            output_shape: vec![width],
            weights: Some(Payload::Matrix(layer.w.t().to_owned())),
            origin: origin.clone(),
        });
        let bias = format!("{node_id}__l{k}_bias");
        nodes.push(Node {
            id: bias.clone(),
            op: OpKind::BiasAdd,
            inputs: vec![mm],
            output_shape: vec![width],
            weights: Some(Payload::Vector(layer.b.clone())),
            origin: origin.clone(),
        });
        prev = bias;
        if layer.act == Activation::Tanh {
            let th = format!("{node_id}__l{k}_tanh");
            nodes.push(Node {
                id: th.clone(),
                op: OpKind::Tanh,
                inputs: vec![prev.clone()],
                output_shape: vec![width],
                weights: None,
                origin: origin.clone(),
            });
            prev = th;
        }
    }
    nodes.push(Node {
        id: clamp_out.clone(),
        op: OpKind::Clamp {
            min: nn.bounds.output_min,
            max: nn.bounds.output_max,
        },
        inputs: vec![prev],
        output_shape: old.output_shape.clone(),
        weights: None,
        origin,
    });
    for n in nodes.iter_mut() {
        for inp in n.inputs.iter_mut() {
            if inp == node_id {
                *inp = clamp_out.clone();
            }
        }
    }
    let entry = if g.entry == node_id { clamp_in } else { g.entry.clone() };
    let exit = if g.exit == node_id { clamp_out } else { g.exit.clone() };
    Graph::new(nodes, entry, exit)
}

// ---------------------------------------------------------------------------
// Activation grid search

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridEntry {
    pub activation: Activation,
    pub val_mse: f64,
}

/// Trains one single-hidden-layer net per candidate activation on the same
/// data with the same seed (identical split, batch order, and init stream)
/// and ranks them by validation MSE, best first. Ties keep candidate order.
pub fn activation_grid_search(
    inputs: &Array2<f64>,
    outputs: &Array2<f64>,
    candidates: &[Activation],
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<Vec<GridEntry>> {
    use rand_chacha::rand_core::SeedableRng;
    let runs: Vec<Activation> = candidates.to_vec();
    let results = parallel_map(jobs, runs, |act| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut net = FcNet::new_seeded(
            &[inputs.ncols(), cfg.xbar_size, outputs.ncols()],
            act,
            &mut rng,
        );
        let res = train(&mut net, inputs, outputs, cfg)?;
        Ok::<GridEntry, Error>(GridEntry {
            activation: act,
            val_mse: res.val_mse,
        })
    });
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        entries.push(r?);
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[a]
            .val_mse
            .partial_cmp(&entries[b].val_mse)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order.into_iter().map(|i| entries[i].clone()).collect())
}

/// Maps `f` over `items` on up to `jobs` worker threads, preserving order.
pub fn parallel_map<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let slots: Vec<Mutex<Option<T>>> = items.into_iter().map(|t| Mutex::new(Some(t))).collect();
    let out: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let item = slots[i].lock().unwrap().take().unwrap();
                *out[i].lock().unwrap() = Some(f(item));
            });
        }
    });
    out.into_iter()
        .map(|m| m.into_inner().unwrap().unwrap())
        .collect()
}

// ---------------------------------------------------------------------------
// Whole-graph transform

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformConfig {
    pub train: TrainConfig,
    /// Graph-entry samples drawn for capture.
    pub capture_samples: usize,
    pub entry_dist: InputDist,
    /// Ops the digital side executes natively (tag strings).
    pub supported_ops: BTreeSet<String>,
}

impl Default for TransformConfig {
    fn default() -> Self {
        TransformConfig {
            train: TrainConfig::default(),
            capture_samples: 50_000,
            entry_dist: InputDist::default(),
            supported_ops: crate::graph::default_supported_ops(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    pub node_id: String,
    pub op: String,
    pub hidden_layers: usize,
    pub val_mse: f64,
    pub epochs_total: usize,
    pub converged: bool,
    pub bounds: BoundSpec,
    pub train_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformReport {
    pub sigmoid_rewrites: Vec<String>,
    pub candidates: Vec<CandidateReport>,
    /// True when every candidate reached its target.
    pub all_converged: bool,
}

pub struct TransformOutcome {
    pub graph: Graph,
    pub report: TransformReport,
    pub nets: Vec<NeonNet>,
}

/// Full pipeline over one graph: exact sigmoid rewrites, candidate
/// delineation, capture, per-candidate training (seeded independently from
/// the master seed and the node id), and replacement splicing.
///
/// Candidates that never reach the target are still spliced and reported
/// with `converged: false`; callers decide whether that flags the run.
pub fn transform_graph(
    g: &Graph,
    tcfg: &TransformConfig,
    master_seed: u64,
    jobs: usize,
) -> Result<TransformOutcome> {
    let sigmoid_rewrites: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| n.op == OpKind::Sigmoid)
        .map(|n| n.id.clone())
        .collect();
    let g1 = rewrite_sigmoid(g)?;
    let targets = delineate(&g1, &tcfg.supported_ops);

    let mut capture_rng = rng::stream(master_seed, "capture");
    let entry_inputs = sample_inputs(
        &tcfg.entry_dist,
        tcfg.capture_samples,
        g1.input_elems(),
        &mut capture_rng,
    );
    let datasets = capture(&g1, &targets, &entry_inputs)?;

    struct Job {
        id: String,
        op: OpKind,
        ds: CaptureDataset,
        cfg: TrainConfig,
    }
    let jobs_list: Vec<Job> = targets
        .iter()
        .map(|id| {
            let mut cfg = tcfg.train.clone();
            cfg.seed = rng::derive_seed(master_seed, &format!("train:{id}"));
            Job {
                id: id.clone(),
                op: g1.node(id).unwrap().op.clone(),
                ds: datasets[id].clone(),
                cfg,
            }
        })
        .collect();

    let trained = parallel_map(jobs, jobs_list, |job| {
        let (net, meta) = grow_structure(&job.ds.inputs, &job.ds.outputs, &job.cfg)?;
        let bounds = extract_bounds(&job.ds);
        Ok::<(NeonNet, u64), Error>((
            NeonNet {
                source_id: job.id.clone(),
                source_op: job.op.clone(),
                net,
                bounds,
                meta,
            },
            job.cfg.seed,
        ))
    });

    let mut graph = g1;
    let mut nets = Vec::new();
    let mut candidates = Vec::new();
    for r in trained {
        let (nn, train_seed) = r?;
        graph = apply_replacement(&graph, &nn.source_id, &nn)?;
        candidates.push(CandidateReport {
            node_id: nn.source_id.clone(),
            op: nn.source_op.tag().to_string(),
            hidden_layers: nn.meta.hidden_layers,
            val_mse: nn.meta.val_mse,
            epochs_total: nn.meta.epochs_total,
            converged: nn.meta.converged,
            bounds: nn.bounds,
            train_seed,
        });
        nets.push(nn);
    }
    let all_converged = candidates.iter().all(|c| c.converged);
    Ok(TransformOutcome {
        graph,
        report: TransformReport {
            sigmoid_rewrites,
            candidates,
            all_converged,
        },
        nets,
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning a transformed graph

/// One spliced-in replacement region inside a transformed graph.
#[derive(Debug, Clone)]
struct Region {
    source: String,
    clamp_in: usize,
    clamp_out: usize,
    members: Vec<usize>,
}

fn find_regions(g: &Graph) -> Result<Vec<Region>> {
    let mut by_source: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if let NodeOrigin::NeonNet { source } = &n.origin {
            by_source.entry(source.clone()).or_default().push(i);
        }
    }
    let mut regions = Vec::new();
    for (source, members) in by_source {
        let in_region = |id: &str| {
            members
                .iter()
                .any(|&i| g.nodes[i].id == id)
        };
        let mut clamp_in = None;
        let mut clamp_out = None;
        for &i in &members {
            let n = &g.nodes[i];
            if !matches!(n.op, OpKind::Clamp { .. }) {
                continue;
            }
            let reads_outside = n.inputs.is_empty() || n.inputs.iter().any(|x| !in_region(x));
            if reads_outside {
                clamp_in = Some(i);
            } else {
                clamp_out = Some(i);
            }
        }
        let (clamp_in, clamp_out) = match (clamp_in, clamp_out) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Schema(format!(
                    "replacement region '{source}' lacks its clamp pair"
                )))
            }
        };
        regions.push(Region {
            source,
            clamp_in,
            clamp_out,
            members,
        });
    }
    Ok(regions)
}

/// Nearest trainable layer (matmul plus adjacent bias_add) strictly before
/// the region and strictly after it. Walks through elementwise ops.
fn adjacent_trainable(g: &Graph, region: &Region) -> Vec<usize> {
    let mut picked = Vec::new();
    // Upstream: follow single-input chain from the input clamp's producer.
    let mut cur = g.nodes[region.clamp_in].inputs.first().cloned();
    while let Some(id) = cur {
        let i = g.node_index(&id).unwrap();
        let n = &g.nodes[i];
        if n.origin != NodeOrigin::Workload {
            break;
        }
        match n.op {
            OpKind::BiasAdd => {
                picked.push(i);
                cur = n.inputs.first().cloned();
                // A bias usually sits on a matmul; take that too and stop.
                if let Some(pid) = &cur {
                    let pi = g.node_index(pid).unwrap();
                    if g.nodes[pi].op == OpKind::Matmul
                        && g.nodes[pi].origin == NodeOrigin::Workload
                    {
                        picked.push(pi);
                    }
                }
                break;
            }
            OpKind::Matmul => {
                picked.push(i);
                break;
            }
            OpKind::MulElementwise => break,
            _ => {
                cur = n.inputs.first().cloned();
            }
        }
    }
    // Downstream: follow sole consumers from the output clamp.
    let mut cur = Some(g.nodes[region.clamp_out].id.clone());
    while let Some(id) = cur {
        let consumers = g.consumers(&id);
        if consumers.len() != 1 {
            break;
        }
        let n = consumers[0];
        if n.origin != NodeOrigin::Workload {
            break;
        }
        match n.op {
            OpKind::Matmul => {
                picked.push(g.node_index(&n.id).unwrap());
                let more = g.consumers(&n.id);
                if more.len() == 1
                    && more[0].op == OpKind::BiasAdd
                    && more[0].origin == NodeOrigin::Workload
                {
                    picked.push(g.node_index(&more[0].id).unwrap());
                }
                break;
            }
            OpKind::BiasAdd => {
                picked.push(g.node_index(&n.id).unwrap());
                break;
            }
            OpKind::MulElementwise => break,
            _ => {
                cur = Some(n.id.clone());
            }
        }
    }
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Vector-Jacobian product of the true operator the region replaced,
/// evaluated at the recorded pre-clamp operands.
pub fn true_op_vjp(op: &OpKind, x: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    match op {
        OpKind::Softmax { .. } => {
            let y = crate::graph::softmax_rows(x);
            let inner = (grad_out * &y).sum_axis(Axis(1)).insert_axis(Axis(1));
            &y * &(grad_out - &inner)
        }
        OpKind::Squash { .. } => {
            let mut out = Array2::zeros(x.raw_dim());
            for r in 0..x.nrows() {
                let v = x.row(r);
                let gg = grad_out.row(r);
                let n2: f64 = v.dot(&v);
                if n2 == 0.0 {
                    continue;
                }
                let n = n2.sqrt();
                let rr = n / (1.0 + n2);
                let rp = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2));
                let vg = v.dot(&gg);
                let coef = rp / n * vg;
                for c in 0..x.ncols() {
                    out[[r, c]] = gg[c] * rr + v[c] * coef;
                }
            }
            out
        }
        OpKind::Relu => grad_out * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        OpKind::LeakyRelu { alpha } => {
            let a = *alpha;
            grad_out * &x.mapv(|v| if v > 0.0 { 1.0 } else { a })
        }
        OpKind::SqrtElementwise => {
            grad_out * &x.mapv(|v| if v > 0.0 { 0.5 / v.sqrt() } else { 0.0 })
        }
        OpKind::Sigmoid => {
            let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
            grad_out * &(&y * &y.mapv(|v| 1.0 - v))
        }
        OpKind::Tanh => {
            let y = x.mapv(f64::tanh);
            grad_out * &y.mapv(|v| 1.0 - v * v)
        }
        _ => grad_out.clone(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub mse_before: f64,
    pub mse_after: f64,
    pub epochs: usize,
    /// Ids of the layers that were allowed to move.
    pub tuned_nodes: Vec<String>,
}

struct NodeAdam {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Recovery training on a transformed graph against reference targets.
///
/// Every parameter is frozen except the trainable layer immediately before
/// and after each replacement region; the replacement networks themselves
/// never move. Forward runs the transformed graph as-is; backward treats
/// each region as the original operator, differentiated at the operands
/// the region actually saw (recorded before the input clamp).
pub fn fine_tune(
    g: &mut Graph,
    regions_ops: &BTreeMap<String, OpKind>,
    xs: &Array2<f64>,
    ys: &Array2<f64>,
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<FineTuneReport> {
    use rand::seq::SliceRandom;
    use rand_chacha::rand_core::SeedableRng;

    let regions = find_regions(g)?;
    for r in &regions {
        if !regions_ops.contains_key(&r.source) {
            return Err(Error::Config(format!(
                "no original operator recorded for region '{}'",
                r.source
            )));
        }
    }
    let mut tunable: Vec<usize> = regions
        .iter()
        .flat_map(|r| adjacent_trainable(g, r))
        .collect();
    tunable.sort_unstable();
    tunable.dedup();

    let mse_before = {
        let out = crate::graph::run_graph(g, xs)?;
        crate::nn::mse(&out, ys)
    };

    // Region membership and collapse map: internal region nodes are skipped
    // during backward; the region's clamps delimit it.
    let mut region_of: HashMap<usize, usize> = HashMap::new();
    for (ri, r) in regions.iter().enumerate() {
        for &m in &r.members {
            region_of.insert(m, ri);
        }
    }

    let mut adam: BTreeMap<usize, NodeAdam> = tunable
        .iter()
        .map(|&i| {
            let len = g.nodes[i].weights.as_ref().unwrap().len();
            (i, NodeAdam { m: vec![0.0; len], v: vec![0.0; len] })
        })
        .collect();
    let mut t = 0u64;
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut order: Vec<usize> = (0..xs.nrows()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x66696e65);
    let batch = cfg.batch_size.max(1);
    for _ in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut at = 0;
        while at < order.len() {
            let hi = (at + batch).min(order.len());
            let mut xb = Array2::zeros((hi - at, xs.ncols()));
            let mut yb = Array2::zeros((hi - at, ys.ncols()));
            for (r, &i) in order[at..hi].iter().enumerate() {
                xb.row_mut(r).assign(&xs.row(i));
                yb.row_mut(r).assign(&ys.row(i));
            }
            at = hi;

            let traces = execute_batch(g, &xb)?;
            let exit_idx = g.node_index(&g.exit).unwrap();
            let pred = &traces[exit_idx].output;
            let scale = 2.0 / pred.len() as f64;

            // Gradient w.r.t. each node's output.
            let mut grads: Vec<Option<Array2<f64>>> = vec![None; g.nodes.len()];
            grads[exit_idx] = Some((pred - &yb) * scale);
            let mut wgrads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();

            for &i in g.topo_order().iter().rev() {
                let Some(gout) = grads[i].take() else { continue };
                let n = &g.nodes[i];
                if let Some(&ri) = region_of.get(&i) {
                    // Only the output clamp of a region carries gradient in;
                    // collapse the whole region into the true op's VJP.
                    let r = &regions[ri];
                    if i != r.clamp_out {
                        continue;
                    }
                    let cin = &g.nodes[r.clamp_in];
                    if cin.id == g.entry {
                        continue;
                    }
                    let x_rec = &traces[r.clamp_in].inputs[0];
                    let gin = true_op_vjp(&regions_ops[&r.source], x_rec, &gout);
                    let src = g.node_index(&cin.inputs[0]).unwrap();
                    accumulate(&mut grads[src], gin);
                    continue;
                }
                let ins = &traces[i].inputs;
                let out = &traces[i].output;
                match &n.op {
                    OpKind::Matmul => {
                        let Some(Payload::Matrix(w)) = &n.weights else { unreachable!() };
                        if tunable.contains(&i) {
                            let gw = ins[0].t().dot(&gout);
                            wgrads.insert(i, gw.iter().copied().collect());
                        }
                        if n.id != g.entry {
                            let gin = gout.dot(&w.t());
                            let src = g.node_index(&n.inputs[0]).unwrap();
                            accumulate(&mut grads[src], gin);
                        }
                    }
                    OpKind::BiasAdd => {
                        if tunable.contains(&i) {
                            let gb = gout.sum_axis(Axis(0));
                            wgrads.insert(i, gb.iter().copied().collect());
                        }
                        if n.id != g.entry {
                            let src = g.node_index(&n.inputs[0]).unwrap();
                            accumulate(&mut grads[src], gout);
                        }
                    }
                    OpKind::MulElementwise => {
                        let g0 = &gout * &ins[1];
                        let g1 = &gout * &ins[0];
                        let s0 = g.node_index(&n.inputs[0]).unwrap();
                        let s1 = g.node_index(&n.inputs[1]).unwrap();
                        accumulate(&mut grads[s0], g0);
                        accumulate(&mut grads[s1], g1);
                    }
                    OpKind::Clamp { min, max } => {
                        if n.id == g.entry {
                            continue;
                        }
                        let (lo, hi2) = (*min, *max);
                        let mask = ins[0].mapv(|v| if v >= lo && v <= hi2 { 1.0 } else { 0.0 });
                        let src = g.node_index(&n.inputs[0]).unwrap();
                        accumulate(&mut grads[src], &gout * &mask);
                    }
                    OpKind::Tanh => {
                        if n.id == g.entry {
                            continue;
                        }
                        let gin = &gout * &out.mapv(|v| 1.0 - v * v);
                        let src = g.node_index(&n.inputs[0]).unwrap();
                        accumulate(&mut grads[src], gin);
                    }
                    op => {
                        if n.id == g.entry {
                            continue;
                        }
                        let gin = true_op_vjp(op, &ins[0], &gout);
                        let src = g.node_index(&n.inputs[0]).unwrap();
                        accumulate(&mut grads[src], gin);
                    }
                }
            }

            // Adam update on the unfrozen layers, weight decay on matrices.
            t += 1;
            let bc1 = 1.0 - beta1.powi(t as i32);
            let bc2 = 1.0 - f64::powi(beta2, t as i32);
            for (&i, gvals) in &wgrads {
                let st = adam.get_mut(&i).unwrap();
                let node = &mut g.nodes[i];
                let is_matrix = matches!(node.weights, Some(Payload::Matrix(_)));
                let wd = if is_matrix { cfg.weight_decay } else { 0.0 };
                match node.weights.as_mut().unwrap() {
                    Payload::Matrix(m) => {
                        for (k, w) in m.iter_mut().enumerate() {
                            let gk = gvals[k] + wd * *w;
                            st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * gk;
                            st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * gk * gk;
                            *w -= cfg.learning_rate * (st.m[k] / bc1)
                                / ((st.v[k] / bc2).sqrt() + eps);
                        }
                    }
                    Payload::Vector(v) => {
                        for (k, w) in v.iter_mut().enumerate() {
                            let gk = gvals[k];
                            st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * gk;
                            st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * gk * gk;
                            *w -= cfg.learning_rate * (st.m[k] / bc1)
                                / ((st.v[k] / bc2).sqrt() + eps);
                        }
                    }
                }
            }
        }
    }

    let mse_after = {
        let out = crate::graph::run_graph(g, xs)?;
        crate::nn::mse(&out, ys)
    };
    Ok(FineTuneReport {
        mse_before,
        mse_after,
        epochs,
        tuned_nodes: tunable.iter().map(|&i| g.nodes[i].id.clone()).collect(),
    })
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc = &*acc + &g,
        None => *slot = Some(g),
    }
}

/// Fraction of rows whose argmax matches the target argmax. Ties resolve
/// to the lowest index on both sides.
pub fn classification_accuracy(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
    assert_eq!(pred.nrows(), truth.nrows());
    let argmax = |row: ndarray::ArrayView1<f64>| {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    };
    let hits = pred
        .rows()
        .into_iter()
        .zip(truth.rows())
        .filter(|(p, t)| argmax(p.view()) == argmax(t.view()))
        .count();
    hits as f64 / pred.nrows() as f64
}
