//! Operator graph: a small single-entry single-exit dataflow IR over flat
//! f64 vectors, with JSON serialization and an f32 weight sidecar.
//!
//! Shapes are carried per node but execution flattens every tensor to its
//! element count; `softmax`/`squash` normalize over the whole vector and
//! their `dim` attribute must equal the element count.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Matmul,
    BiasAdd,
    Tanh,
    Sigmoid,
    Relu,
    MulElementwise,
    Softmax { dim: usize },
    Squash { dim: usize },
    SqrtElementwise,
    LeakyRelu { alpha: f64 },
    Identity,
    /// Saturation to a fixed interval. Not part of the workload op set;
    /// emitted by the replacement pass to pin operands inside the range a
    /// replacement network was trained on.
    Clamp { min: f64, max: f64 },
}

impl OpKind {
    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::BiasAdd => "bias_add",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::MulElementwise => "mul_elementwise",
            OpKind::Softmax { .. } => "softmax",
            OpKind::Squash { .. } => "squash",
            OpKind::SqrtElementwise => "sqrt_elementwise",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Identity => "identity",
            OpKind::Clamp { .. } => "clamp",
        }
    }

    /// Number of upstream edges the op consumes.
    pub fn arity(&self) -> usize {
        match self {
            OpKind::MulElementwise => 2,
            _ => 1,
        }
    }

    pub fn needs_weights(&self) -> bool {
        matches!(self, OpKind::Matmul | OpKind::BiasAdd)
    }
}

/// Where a node came from. Replacement passes tag what they emit so later
/// passes skip their own output and the mapper can segregate tile pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeOrigin {
    Workload,
    NeonNet { source: String },
    IdentityRewrite { source: String },
}

impl Default for NodeOrigin {
    fn default() -> Self {
        NodeOrigin::Workload
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Matmul weights, `in x out`; output j of sample x is `sum_i x[i]*w[i,j]`.
    Matrix(Array2<f64>),
    /// Bias vector.
    Vector(Array1<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Matrix(m) => m.len(),
            Payload::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_values<'a>(&'a self) -> Box<dyn Iterator<Item = f64> + 'a> {
        match self {
            Payload::Matrix(m) => Box::new(m.iter().copied()),
            Payload::Vector(v) => Box::new(v.iter().copied()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter_values().fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
    pub output_shape: Vec<usize>,
    pub weights: Option<Payload>,
    pub origin: NodeOrigin,
}

impl Node {
    pub fn out_elems(&self) -> usize {
        self.output_shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub entry: String,
    pub exit: String,
    index: HashMap<String, usize>,
    topo: Vec<usize>,
}

impl Graph {
    /// Validates and freezes a node list. Checks id uniqueness, edge targets,
    /// acyclicity, arity, and weight/shape consistency.
    pub fn new(nodes: Vec<Node>, entry: String, exit: String) -> Result<Graph> {
        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Schema(format!("duplicate node id '{}'", n.id)));
            }
        }
        if !index.contains_key(&entry) {
            return Err(Error::Schema(format!("entry '{entry}' is not a node")));
        }
        if !index.contains_key(&exit) {
            return Err(Error::Schema(format!("exit '{exit}' is not a node")));
        }
        for n in &nodes {
            for inp in &n.inputs {
                if !index.contains_key(inp) {
                    return Err(Error::DanglingInput {
                        node: n.id.clone(),
                        input: inp.clone(),
                    });
                }
            }
            if n.id == entry {
                if !n.inputs.is_empty() {
                    return Err(Error::Schema(format!(
                        "entry '{}' must not read other nodes",
                        n.id
                    )));
                }
            } else if n.inputs.len() != n.op.arity() {
                return Err(Error::Shape {
                    node: n.id.clone(),
                    msg: format!(
                        "{} expects {} input(s), got {}",
                        n.op.tag(),
                        n.op.arity(),
                        n.inputs.len()
                    ),
                });
            }
            if n.op.needs_weights() != n.weights.is_some() {
                return Err(Error::Weights {
                    node: n.id.clone(),
                    msg: if n.weights.is_some() {
                        format!("{} takes no weights", n.op.tag())
                    } else {
                        format!("{} requires weights", n.op.tag())
                    },
                });
            }
            if n.out_elems() == 0 {
                return Err(Error::Shape {
                    node: n.id.clone(),
                    msg: "empty output shape".into(),
                });
            }
        }

        let topo = toposort(&nodes, &index)?;
        let g = Graph {
            nodes,
            entry,
            exit,
            index,
            topo,
        };
        g.check_shapes()?;
        Ok(g)
    }

    fn check_shapes(&self) -> Result<()> {
        for n in &self.nodes {
            let out = n.out_elems();
            match &n.op {
                OpKind::Matmul => {
                    let Some(Payload::Matrix(w)) = &n.weights else {
                        return Err(Error::Weights {
                            node: n.id.clone(),
                            msg: "matmul weights must be a matrix".into(),
                        });
                    };
                    if w.ncols() != out {
                        return Err(Error::Shape {
                            node: n.id.clone(),
                            msg: format!(
                                "weight matrix is {}x{} but output has {} elements",
                                w.nrows(),
                                w.ncols(),
                                out
                            ),
                        });
                    }
                    if let Some(fan_in) = self.producer_elems(n) {
                        if w.nrows() != fan_in {
                            return Err(Error::Shape {
                                node: n.id.clone(),
                                msg: format!(
                                    "weight matrix expects {} inputs but producer yields {}",
                                    w.nrows(),
                                    fan_in
                                ),
                            });
                        }
                    }
                }
                OpKind::BiasAdd => {
                    let Some(Payload::Vector(b)) = &n.weights else {
                        return Err(Error::Weights {
                            node: n.id.clone(),
                            msg: "bias_add weights must be a vector".into(),
                        });
                    };
                    if b.len() != out {
                        return Err(Error::Shape {
                            node: n.id.clone(),
                            msg: format!("bias has {} elements, output {}", b.len(), out),
                        });
                    }
                    self.expect_input_elems(n, out)?;
                }
                OpKind::Softmax { dim } | OpKind::Squash { dim } => {
                    if *dim != out {
                        return Err(Error::Shape {
                            node: n.id.clone(),
                            msg: format!("dim attribute {dim} != {out} output elements"),
                        });
                    }
                    self.expect_input_elems(n, out)?;
                }
                OpKind::MulElementwise => {
                    for inp in &n.inputs {
                        let p = &self.nodes[self.index[inp]];
                        if p.out_elems() != out {
                            return Err(Error::Shape {
                                node: n.id.clone(),
                                msg: format!(
                                    "operand '{}' has {} elements, output {}",
                                    inp,
                                    p.out_elems(),
                                    out
                                ),
                            });
                        }
                    }
                }
                _ => self.expect_input_elems(n, out)?,
            }
        }
        Ok(())
    }

    fn producer_elems(&self, n: &Node) -> Option<usize> {
        let inp = n.inputs.first()?;
        Some(self.nodes[self.index[inp]].out_elems())
    }

    fn expect_input_elems(&self, n: &Node, want: usize) -> Result<()> {
        if let Some(got) = self.producer_elems(n) {
            if got != want {
                return Err(Error::Shape {
                    node: n.id.clone(),
                    msg: format!("input has {got} elements, output declares {want}"),
                });
            }
        }
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Node indices in a deterministic topological order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Element count the external input must have.
    pub fn input_elems(&self) -> usize {
        let e = &self.nodes[self.index[&self.entry]];
        match (&e.op, &e.weights) {
            (OpKind::Matmul, Some(Payload::Matrix(w))) => w.nrows(),
            _ => e.out_elems(),
        }
    }

    pub fn output_elems(&self) -> usize {
        self.nodes[self.index[&self.exit]].out_elems()
    }

    /// Consumers of each node, in topo order of the consumer.
    pub fn consumers(&self, id: &str) -> Vec<&Node> {
        self.topo
            .iter()
            .map(|&i| &self.nodes[i])
            .filter(|n| n.inputs.iter().any(|x| x == id))
            .collect()
    }
}

fn toposort(nodes: &[Node], index: &HashMap<String, usize>) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indeg = vec![0usize; n];
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for inp in &node.inputs {
            let j = index[inp];
            out_edges[j].push(i);
            indeg[i] += 1;
        }
    }
    // Kahn's algorithm with an ordered frontier for stable output.
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        order.push(i);
        for &j in &out_edges[i] {
            indeg[j] -= 1;
            if indeg[j] == 0 {
                ready.insert(j);
            }
        }
    }
    if order.len() != n {
        let mut stuck: Vec<String> = (0..n)
            .filter(|&i| indeg[i] > 0)
            .map(|i| nodes[i].id.clone())
            .collect();
        stuck.sort();
        return Err(Error::Cycle(stuck));
    }
    Ok(order)
}

// ---------------------------------------------------------------------------
// Reference execution

/// Per-node record of what flowed through during reference execution.
#[derive(Debug, Clone)]
pub struct NodeTrace {
    pub node_id: String,
    pub inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Runs the graph on a batch (rows are samples) in f64, recording every
/// node's operand and result batches. Fails on non-finite intermediates.
pub fn execute_batch(g: &Graph, x: &Array2<f64>) -> Result<Vec<NodeTrace>> {
    if x.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    if x.ncols() != g.input_elems() {
        return Err(Error::Dim(format!(
            "graph expects {} input elements, got {}",
            g.input_elems(),
            x.ncols()
        )));
    }
    let mut traces: Vec<Option<NodeTrace>> = vec![None; g.nodes.len()];
    for &i in g.topo_order() {
        let n = &g.nodes[i];
        let ins: Vec<Array2<f64>> = if n.id == g.entry {
            vec![x.clone()]
        } else {
            n.inputs
                .iter()
                .map(|inp| {
                    traces[g.node_index(inp).unwrap()]
                        .as_ref()
                        .unwrap()
                        .output
                        .clone()
                })
                .collect()
        };
        let out = eval_op(n, &ins)?;
        if let Some(sample) = first_nonfinite_row(&out) {
            return Err(Error::NonFinite {
                node: n.id.clone(),
                sample,
            });
        }
        traces[i] = Some(NodeTrace {
            node_id: n.id.clone(),
            inputs: ins,
            output: out,
        });
    }
    Ok(traces.into_iter().map(|t| t.unwrap()).collect())
}

/// Graph output for a batch.
pub fn run_graph(g: &Graph, x: &Array2<f64>) -> Result<Array2<f64>> {
    let traces = execute_batch(g, x)?;
    let i = g.node_index(&g.exit).unwrap();
    Ok(traces[i].output.clone())
}

fn first_nonfinite_row(a: &Array2<f64>) -> Option<usize> {
    for (r, row) in a.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Some(r);
        }
    }
    None
}

fn eval_op(n: &Node, ins: &[Array2<f64>]) -> Result<Array2<f64>> {
    let a = &ins[0];
    Ok(match &n.op {
        OpKind::Matmul => {
            let Some(Payload::Matrix(w)) = &n.weights else {
                unreachable!("validated")
            };
            if a.ncols() != w.nrows() {
                return Err(Error::Shape {
                    node: n.id.clone(),
                    msg: format!("matmul fed {} elements, weights expect {}", a.ncols(), w.nrows()),
                });
            }
            a.dot(w)
        }
        OpKind::BiasAdd => {
            let Some(Payload::Vector(b)) = &n.weights else {
                unreachable!("validated")
            };
            a + &b.view().insert_axis(Axis(0))
        }
        OpKind::Tanh => a.mapv(f64::tanh),
        OpKind::Sigmoid => a.mapv(|v| 1.0 / (1.0 + (-v).exp())),
        OpKind::Relu => a.mapv(|v| v.max(0.0)),
        OpKind::Identity => a.clone(),
        OpKind::LeakyRelu { alpha } => {
            let al = *alpha;
            a.mapv(|v| if v > 0.0 { v } else { al * v })
        }
        OpKind::SqrtElementwise => a.mapv(|v| v.max(0.0).sqrt()),
        OpKind::Clamp { min, max } => {
            let (lo, hi) = (*min, *max);
            a.mapv(|v| v.clamp(lo, hi))
        }
        OpKind::MulElementwise => a * &ins[1],
        OpKind::Softmax { .. } => softmax_rows(a),
        OpKind::Squash { .. } => squash_rows(a),
    })
}

/// Row-wise softmax, max-subtracted for stability.
pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise squash `v * |v| / (1 + |v|^2)`; the zero vector maps to itself.
pub fn squash_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n2: f64 = row.iter().map(|v| v * v).sum();
        let n = n2.sqrt();
        let scale = if n == 0.0 { 0.0 } else { n / (1.0 + n2) };
        row.mapv_inplace(|v| v * scale);
    }
    out
}

// ---------------------------------------------------------------------------
// Support classification

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportClass {
    /// MAC work that maps straight onto crossbar tiles.
    CrossbarNative,
    /// Executable on a provisioned fixed-function unit.
    DlcNative,
    /// Exactly expressible through natively supported ops.
    IdentityRewrite,
    /// Needs a trained replacement.
    TransformCandidate,
}

/// Fixed-function ops the digital side can execute. The baseline accelerator
/// ships tanh and elementwise-multiply units; clamp and identity are free in
/// the datapath.
pub fn default_supported_ops() -> BTreeSet<String> {
    ["tanh", "mul_elementwise", "clamp", "identity"]
        .into_iter()
        .map(str::to_string)
        .collect()
}

pub fn classify_op(op: &OpKind, supported: &BTreeSet<String>) -> SupportClass {
    match op {
        OpKind::Matmul | OpKind::BiasAdd => SupportClass::CrossbarNative,
        OpKind::Sigmoid => {
            if supported.contains("sigmoid") {
                SupportClass::DlcNative
            } else {
                SupportClass::IdentityRewrite
            }
        }
        other => {
            if supported.contains(other.tag()) {
                SupportClass::DlcNative
            } else {
                SupportClass::TransformCandidate
            }
        }
    }
}

/// Classification for every node, keyed by id.
pub fn classify_nodes(g: &Graph, supported: &BTreeSet<String>) -> BTreeMap<String, SupportClass> {
    g.nodes
        .iter()
        .map(|n| (n.id.clone(), classify_op(&n.op, supported)))
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization: JSON document + f32 sidecar (little-endian), weights
// referenced by element offset and count. The sidecar lives next to the
// JSON file with the extension swapped to `.bin`.

#[derive(Debug, Serialize, Deserialize)]
struct GraphDoc {
    version: u32,
    /// Hash of the run manifest that produced this file, when written by
    /// the pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    manifest_hash: Option<String>,
    entry: String,
    exit: String,
    nodes: Vec<NodeDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    op: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, serde_json::Value>,
    inputs: Vec<String>,
    output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights_ref: Option<WeightsRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<NodeOrigin>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct WeightsRef {
    /// Element offset into the sidecar (f32 units, not bytes).
    offset: usize,
    count: usize,
}

pub fn sidecar_path(json_path: &Path) -> std::path::PathBuf {
    json_path.with_extension("bin")
}

fn op_to_doc(op: &OpKind) -> (String, BTreeMap<String, serde_json::Value>) {
    let mut attrs = BTreeMap::new();
    match op {
        OpKind::Softmax { dim } | OpKind::Squash { dim } => {
            attrs.insert("dim".into(), serde_json::json!(dim));
        }
        OpKind::LeakyRelu { alpha } => {
            attrs.insert("alpha".into(), serde_json::json!(alpha));
        }
        OpKind::Clamp { min, max } => {
            attrs.insert("min".into(), serde_json::json!(min));
            attrs.insert("max".into(), serde_json::json!(max));
        }
        _ => {}
    }
    (op.tag().to_string(), attrs)
}

fn op_from_doc(
    id: &str,
    op: &str,
    attrs: &BTreeMap<String, serde_json::Value>,
) -> Result<OpKind> {
    let need_usize = |key: &str| -> Result<usize> {
        attrs
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Schema(format!("node '{id}': {op} needs integer attr '{key}'")))
    };
    let need_f64 = |key: &str| -> Result<f64> {
        attrs
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Schema(format!("node '{id}': {op} needs numeric attr '{key}'")))
    };
    Ok(match op {
        "matmul" => OpKind::Matmul,
        "bias_add" => OpKind::BiasAdd,
        "tanh" => OpKind::Tanh,
        "sigmoid" => OpKind::Sigmoid,
        "relu" => OpKind::Relu,
        "mul_elementwise" => OpKind::MulElementwise,
        "softmax" => OpKind::Softmax { dim: need_usize("dim")? },
        "squash" => OpKind::Squash { dim: need_usize("dim")? },
        "sqrt_elementwise" => OpKind::SqrtElementwise,
        "leaky_relu" => OpKind::LeakyRelu { alpha: need_f64("alpha")? },
        "identity" => OpKind::Identity,
        "clamp" => OpKind::Clamp { min: need_f64("min")?, max: need_f64("max")? },
        other => return Err(Error::Schema(format!("node '{id}': unknown op '{other}'"))),
    })
}

pub fn save_graph(g: &Graph, json_path: &Path) -> Result<()> {
    save_graph_tagged(g, json_path, None)
}

/// `save_graph` with an optional run-manifest hash embedded in the JSON.
pub fn save_graph_tagged(g: &Graph, json_path: &Path, manifest_hash: Option<&str>) -> Result<()> {
    let mut blob: Vec<f32> = Vec::new();
    let mut docs = Vec::with_capacity(g.nodes.len());
    for n in &g.nodes {
        let weights_ref = n.weights.as_ref().map(|p| {
            let offset = blob.len();
            blob.extend(p.iter_values().map(|v| v as f32));
            WeightsRef { offset, count: p.len() }
        });
        let (op, attrs) = op_to_doc(&n.op);
        docs.push(NodeDoc {
            id: n.id.clone(),
            op,
            attrs,
            inputs: n.inputs.clone(),
            output_shape: n.output_shape.clone(),
            weights_ref,
            origin: match &n.origin {
                NodeOrigin::Workload => None,
                other => Some(other.clone()),
            },
        });
    }
    let doc = GraphDoc {
        version: SCHEMA_VERSION,
        manifest_hash: manifest_hash.map(str::to_string),
        entry: g.entry.clone(),
        exit: g.exit.clone(),
        nodes: docs,
    };
    let mut json = serde_json::to_string_pretty(&doc)?;
    json.push('\n');
    std::fs::write(json_path, json)?;
    let mut bytes = Vec::with_capacity(blob.len() * 4);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(sidecar_path(json_path), bytes)?;
    Ok(())
}

pub fn load_graph(json_path: &Path) -> Result<Graph> {
    let doc: GraphDoc = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    if doc.version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "unsupported schema version {}",
            doc.version
        )));
    }
    let side = sidecar_path(json_path);
    let blob: Vec<f32> = if side.exists() {
        let bytes = std::fs::read(&side)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Schema(format!(
                "weight sidecar {} is not a whole number of f32s",
                side.display()
            )));
        }
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        Vec::new()
    };

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    // Pre-index output element counts so matmul row counts can be derived.
    let elems_by_id: HashMap<String, usize> = doc
        .nodes
        .iter()
        .map(|d| (d.id.clone(), d.output_shape.iter().product()))
        .collect();
    for d in &doc.nodes {
        let op = op_from_doc(&d.id, &d.op, &d.attrs)?;
        let weights = match (&op, d.weights_ref) {
            (_, None) => None,
            (op, Some(r)) => {
                let end = r.offset.checked_add(r.count).ok_or_else(|| Error::Weights {
                    node: d.id.clone(),
                    msg: "weights_ref overflows".into(),
                })?;
                if end > blob.len() {
                    return Err(Error::Weights {
                        node: d.id.clone(),
                        msg: format!(
                            "weights_ref [{}, {}) exceeds sidecar length {}",
                            r.offset,
                            end,
                            blob.len()
                        ),
                    });
                }
                let vals: Vec<f64> = blob[r.offset..end].iter().map(|&v| v as f64).collect();
                let out: usize = d.output_shape.iter().product();
                Some(match op {
                    OpKind::Matmul => {
                        if out == 0 || r.count % out != 0 {
                            return Err(Error::Weights {
                                node: d.id.clone(),
                                msg: format!("{} weights do not tile {} outputs", r.count, out),
                            });
                        }
                        let rows = r.count / out;
                        if let Some(inp) = d.inputs.first() {
                            if let Some(&fan_in) = elems_by_id.get(inp) {
                                if fan_in != rows {
                                    return Err(Error::Shape {
                                        node: d.id.clone(),
                                        msg: format!(
                                            "weights imply {rows} inputs, producer yields {fan_in}"
                                        ),
                                    });
                                }
                            }
                        }
                        Payload::Matrix(
                            Array2::from_shape_vec((rows, out), vals).expect("len checked"),
                        )
                    }
                    OpKind::BiasAdd => Payload::Vector(Array1::from_vec(vals)),
                    _ => {
                        return Err(Error::Weights {
                            node: d.id.clone(),
                            msg: format!("{} takes no weights", op.tag()),
                        })
                    }
                })
            }
        };
        nodes.push(Node {
            id: d.id.clone(),
            op,
            inputs: d.inputs.clone(),
            output_shape: d.output_shape.clone(),
            weights,
            origin: d.origin.clone().unwrap_or_default(),
        });
    }
    Graph::new(nodes, doc.entry, doc.exit)
}
