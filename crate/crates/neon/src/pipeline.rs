//! Run orchestration shared by the binary and the examples: config files,
//! flag overrides, run manifests, and deterministic artifact writing.
//!
//! Every artifact of a run names the manifest hash that produced it, and
//! reports embed the full resolved manifest. Two runs with equal manifests
//! write byte-identical reports; wall-clock timings go to a separate
//! `timings.json` that is never part of that guarantee.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{
    compare_configs, evaluate, geomean, operator_scaling_sweep, Arch, CompareReport,
    ComponentCatalog, CostReport, DlcProvisioning, LatencyModel, MetricRatios, ScalingCurve,
};
use crate::error::{Error, Result};
use crate::graph::{load_graph, save_graph_tagged, softmax_rows, squash_rows};
use crate::mapping::HardwareConfig;
use crate::nn::Activation;
use crate::rng;
use crate::transform::{
    activation_grid_search, sample_inputs, transform_graph, GridEntry, InputDist, NeonNet,
    TransformConfig, TransformReport,
};

/// Dataset recipe for the standalone activation grid search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Target op tag: softmax, squash, sqrt_elementwise, leaky_relu, relu.
    pub op: String,
    pub dim: usize,
    pub samples: usize,
    pub dist: InputDist,
    pub activations: Vec<Activation>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            op: "softmax".into(),
            dim: 4,
            samples: 50_000,
            dist: InputDist::IidNormal { mean: 0.0, std: 4.0 },
            activations: vec![Activation::Tanh, Activation::Relu, Activation::Sigmoid],
        }
    }
}

/// One structured config file covers every stage; any subset of fields may
/// be present, the rest take defaults. Flags override file values.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub transform: TransformConfig,
    pub hw: HardwareConfig,
    pub catalog: ComponentCatalog,
    pub latency: LatencyModel,
    pub provisioning: DlcProvisioning,
    pub grid: GridSpec,
}

pub fn load_config(path: &Path) -> Result<AppConfig> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Flag-level overrides; `None` keeps the config-file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub epsilon: Option<f64>,
    /// Sets the hidden width and the crossbar dimensions together.
    pub xbar_size: Option<usize>,
}

pub fn apply_overrides(cfg: &mut AppConfig, ov: &Overrides) {
    if let Some(e) = ov.epsilon {
        cfg.transform.train.epsilon = e;
    }
    if let Some(x) = ov.xbar_size {
        cfg.transform.train.xbar_size = x;
        cfg.hw.xbar_rows = x;
        cfg.hw.xbar_cols = x;
    }
}

/// Complete description of one run: inputs, resolved configuration, and
/// every knob that affects outputs. Reports embed it; its hash names it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub subcommand: String,
    pub graphs: Vec<String>,
    pub config_path: Option<String>,
    pub seed: u64,
    pub jobs: usize,
    pub arch: Option<String>,
    pub counts: Option<Vec<usize>>,
    pub config: AppConfig,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: AppConfig) -> RunManifest {
        RunManifest {
            tool: "neon".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            graphs: Vec::new(),
            config_path: None,
            seed: 0,
            jobs: 1,
            arch: None,
            counts: None,
            config,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("manifest serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }
}

/// Output directory of one run: owns the manifest, tags every file it
/// writes, and collects stage timings.
pub struct RunDir {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub hash: String,
    timings: BTreeMap<String, f64>,
}

impl RunDir {
    pub fn create(dir: &Path, manifest: RunManifest) -> Result<RunDir> {
        fs::create_dir_all(dir)?;
        let hash = manifest.hash();
        let rd = RunDir {
            dir: dir.to_path_buf(),
            manifest,
            hash,
            timings: BTreeMap::new(),
        };
        rd.write_json("manifest", &serde_json::json!({}))?;
        Ok(rd)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `<name>.json` embedding the manifest hash, the manifest, and
    /// the payload under a `report` key.
    pub fn write_json<T: Serialize>(&self, name: &str, payload: &T) -> Result<PathBuf> {
        let doc = serde_json::json!({
            "manifest_hash": self.hash,
            "manifest": self.manifest,
            "report": payload,
        });
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        let path = self.dir.join(format!("{name}.json"));
        fs::write(&path, text)?;
        Ok(path)
    }

    /// Writes `<name>.csv` with a leading `# manifest <hash>` comment line.
    pub fn write_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<PathBuf> {
        let mut text = format!("# manifest {}\n{header}\n", self.hash);
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        let path = self.dir.join(format!("{name}.csv"));
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn record_timing(&mut self, stage: &str, started: Instant) {
        self.timings
            .insert(stage.to_string(), started.elapsed().as_secs_f64());
    }

    /// Wall-clock stage durations; deliberately outside the deterministic
    /// output set, so it does not embed the manifest body.
    pub fn write_timings(&self) -> Result<()> {
        let doc = serde_json::json!({
            "manifest_hash": self.hash,
            "stages_s": self.timings,
        });
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        fs::write(self.dir.join("timings.json"), text)?;
        Ok(())
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "graph".into())
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

// ---------------------------------------------------------------------------
// Replacement-network serialization

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetLayerDoc {
    rows: usize,
    cols: usize,
    activation: Activation,
    /// f32 element offsets into the net's .bin sidecar.
    w_offset: usize,
    b_offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetDoc {
    manifest_hash: String,
    source_id: String,
    source_op: String,
    hidden_layers: usize,
    val_mse: f64,
    epochs_total: usize,
    converged: bool,
    input_min: f64,
    input_max: f64,
    output_min: f64,
    output_max: f64,
    layers: Vec<NetLayerDoc>,
}

/// Writes one trained replacement network as JSON metadata plus an f32
/// little-endian weight sidecar (row-major weights, then biases, per
/// layer). Returns the JSON path.
pub fn save_neon_net(rd: &RunDir, nn: &NeonNet) -> Result<PathBuf> {
    let mut blob: Vec<f32> = Vec::new();
    let mut layers = Vec::with_capacity(nn.net.layers.len());
    for l in &nn.net.layers {
        let w_offset = blob.len();
        blob.extend(l.w.iter().map(|&v| v as f32));
        let b_offset = blob.len();
        blob.extend(l.b.iter().map(|&v| v as f32));
        layers.push(NetLayerDoc {
            rows: l.w.nrows(),
            cols: l.w.ncols(),
            activation: l.act,
            w_offset,
            b_offset,
        });
    }
    let doc = NetDoc {
        manifest_hash: rd.hash.clone(),
        source_id: nn.source_id.clone(),
        source_op: nn.source_op.tag().to_string(),
        hidden_layers: nn.meta.hidden_layers,
        val_mse: nn.meta.val_mse,
        epochs_total: nn.meta.epochs_total,
        converged: nn.meta.converged,
        input_min: nn.bounds.input_min,
        input_max: nn.bounds.input_max,
        output_min: nn.bounds.output_min,
        output_max: nn.bounds.output_max,
        layers,
    };
    let base = format!("neon_net_{}", safe_name(&nn.source_id));
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    let json_path = rd.path(&format!("{base}.json"));
    fs::write(&json_path, text)?;
    let mut bytes = Vec::with_capacity(blob.len() * 4);
    for v in blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(rd.path(&format!("{base}.bin")), bytes)?;
    Ok(json_path)
}

// ---------------------------------------------------------------------------
// Subcommands

/// Transform one graph: writes `transformed.json`/`.bin`, the per-candidate
/// report, and one serialized replacement network per trained candidate.
pub fn run_transform(rd: &mut RunDir, graph_path: &Path) -> Result<TransformReport> {
    let started = Instant::now();
    let g = load_graph(graph_path)?;
    let cfg = rd.manifest.config.clone();
    let outcome = transform_graph(&g, &cfg.transform, rd.manifest.seed, rd.manifest.jobs)?;
    save_graph_tagged(&outcome.graph, &rd.path("transformed.json"), Some(&rd.hash))?;
    for nn in &outcome.nets {
        save_neon_net(rd, nn)?;
    }
    rd.write_json("transform_report", &outcome.report)?;
    rd.record_timing("transform", started);
    rd.write_timings()?;
    Ok(outcome.report)
}

fn cost_csv_rows(r: &CostReport) -> (String, Vec<String>) {
    let header = "node,op,route,start_cycle,end_cycle,energy_uj".to_string();
    let rows = r
        .per_node
        .iter()
        .map(|n| {
            format!(
                "{},{},{},{},{},{}",
                n.id, n.op, n.route, n.start_cycle, n.end_cycle, n.energy_uj
            )
        })
        .collect();
    (header, rows)
}

/// Map and cost one graph under the configuration named in the manifest.
pub fn run_simulate(rd: &mut RunDir, graph_path: &Path) -> Result<CostReport> {
    let started = Instant::now();
    let g = load_graph(graph_path)?;
    let cfg = &rd.manifest.config;
    let arch: Arch = rd
        .manifest
        .arch
        .as_deref()
        .unwrap_or("dlc")
        .parse()?;
    let report = evaluate(
        &g,
        &cfg.hw,
        &cfg.catalog,
        &cfg.latency,
        &cfg.provisioning,
        arch,
    )?;
    let name = format!("cost_{}", arch.tag());
    rd.write_json(&name, &report)?;
    let (header, rows) = cost_csv_rows(&report);
    rd.write_csv(&name, &header, &rows)?;
    rd.record_timing("simulate", started);
    rd.write_timings()?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteComparison {
    /// Keyed by graph file stem.
    pub per_graph: BTreeMap<String, CompareReport>,
    /// Geomean of the per-graph ratios, keyed by config.
    pub geomean_vs_dlc: BTreeMap<String, MetricRatios>,
    pub all_converged: bool,
}

/// Transform every graph, evaluate all three configurations, and emit
/// DLC-normalized ratios per graph plus the suite geomean.
pub fn run_compare(rd: &mut RunDir, graph_paths: &[PathBuf]) -> Result<SuiteComparison> {
    if graph_paths.is_empty() {
        return Err(Error::Config("compare needs at least one graph".into()));
    }
    let started = Instant::now();
    let cfg = rd.manifest.config.clone();
    let mut per_graph = BTreeMap::new();
    let mut all_converged = true;
    for path in graph_paths {
        let stem = file_stem(path);
        let g = load_graph(path)?;
        let outcome = transform_graph(&g, &cfg.transform, rd.manifest.seed, rd.manifest.jobs)?;
        all_converged &= outcome.report.all_converged;
        save_graph_tagged(
            &outcome.graph,
            &rd.path(&format!("transformed_{stem}.json")),
            Some(&rd.hash),
        )?;
        let report = compare_configs(
            &g,
            &outcome.graph,
            &cfg.hw,
            &cfg.catalog,
            &cfg.latency,
            &cfg.provisioning,
        )?;
        per_graph.insert(stem, report);
    }

    let mut geomean_vs_dlc = BTreeMap::new();
    for config in ["dlc", "lut", "neon"] {
        let collect = |f: &dyn Fn(&MetricRatios) -> f64| -> f64 {
            let vals: Vec<f64> = per_graph
                .values()
                .map(|r| f(&r.ratios_vs_dlc[config]))
                .collect();
            geomean(&vals)
        };
        geomean_vs_dlc.insert(
            config.to_string(),
            MetricRatios {
                latency: collect(&|m| m.latency),
                energy: collect(&|m| m.energy),
                area: collect(&|m| m.area),
                avg_power: collect(&|m| m.avg_power),
                edp: collect(&|m| m.edp),
            },
        );
    }

    let summary = SuiteComparison {
        per_graph,
        geomean_vs_dlc,
        all_converged,
    };
    rd.write_json("comparison", &summary)?;

    let header = "graph,config,latency_cycles,latency_s,energy_uj,edp_uj_s,area_um2,\
                  static_power_mw,peak_power_mw,avg_power_mw,init_energy_uj,\
                  ratio_latency,ratio_energy,ratio_area,ratio_avg_power,ratio_edp";
    let mut rows = Vec::new();
    for (stem, cr) in &summary.per_graph {
        for config in ["dlc", "lut", "neon"] {
            let r = &cr.reports[config];
            let m = &cr.ratios_vs_dlc[config];
            rows.push(format!(
                "{stem},{config},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.latency_cycles,
                r.latency_s,
                r.energy_uj,
                r.edp_uj_s,
                r.area_um2,
                r.static_power_mw,
                r.peak_power_mw,
                r.avg_power_mw,
                fmt_opt(r.init_energy_uj),
                m.latency,
                m.energy,
                m.area,
                m.avg_power,
                m.edp
            ));
        }
    }
    for (config, m) in &summary.geomean_vs_dlc {
        rows.push(format!(
            "(geomean),{config},,,,,,,,,,{},{},{},{},{}",
            m.latency, m.energy, m.area, m.avg_power, m.edp
        ));
    }
    rd.write_csv("comparison", header, &rows)?;
    rd.record_timing("compare", started);
    rd.write_timings()?;
    Ok(summary)
}

pub fn default_scaling_counts() -> Vec<usize> {
    (0..10).map(|k| 1usize << k).collect()
}

/// Analytic operator-scaling sweep to CSV and JSON.
pub fn run_scaling(rd: &mut RunDir) -> Result<ScalingCurve> {
    let started = Instant::now();
    let cfg = &rd.manifest.config;
    let counts = rd
        .manifest
        .counts
        .clone()
        .unwrap_or_else(default_scaling_counts);
    let curve = operator_scaling_sweep(&cfg.hw, &cfg.catalog, &cfg.latency, &counts)?;
    rd.write_json("scaling", &curve)?;
    let header = "n,dlc_energy_uj,dlc_latency_s,dlc_edp_uj_s,neon_subarrays,neon_energy_uj,\
                  neon_latency_s,neon_edp_uj_s,lut_feasible,lut_log2_bytes,lut_edp_uj_s";
    let rows: Vec<String> = curve
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.n,
                r.dlc_energy_uj,
                r.dlc_latency_s,
                r.dlc_edp_uj_s,
                r.neon_subarrays,
                r.neon_energy_uj,
                r.neon_latency_s,
                r.neon_edp_uj_s,
                r.lut_feasible,
                r.lut_log2_bytes,
                fmt_opt(r.lut_edp_uj_s)
            )
        })
        .collect();
    rd.write_csv("scaling", header, &rows)?;
    rd.record_timing("scaling", started);
    rd.write_timings()?;
    Ok(curve)
}

fn grid_targets(op: &str, dim: usize, xs: &ndarray::Array2<f64>) -> Result<ndarray::Array2<f64>> {
    Ok(match op {
        "softmax" => softmax_rows(xs),
        "squash" => squash_rows(xs),
        "sqrt_elementwise" => xs.mapv(|v| if v > 0.0 { v.sqrt() } else { 0.0 }),
        "relu" => xs.mapv(|v| v.max(0.0)),
        "leaky_relu" => xs.mapv(|v| if v >= 0.0 { v } else { 0.1 * v }),
        other => {
            return Err(Error::Config(format!(
                "grid search target '{other}' not supported (dim {dim})"
            )))
        }
    })
}

/// Trains the same fixed-structure net under each candidate activation on
/// one shared seeded dataset and ranks by validation MSE.
pub fn run_gridsearch(rd: &mut RunDir) -> Result<Vec<GridEntry>> {
    let started = Instant::now();
    let cfg = rd.manifest.config.clone();
    let spec = &cfg.grid;
    let mut data_rng = rng::stream(rd.manifest.seed, "gridsearch:data");
    let xs = sample_inputs(&spec.dist, spec.samples, spec.dim, &mut data_rng);
    let ys = grid_targets(&spec.op, spec.dim, &xs)?;
    let mut tcfg = cfg.transform.train.clone();
    tcfg.seed = rng::derive_seed(rd.manifest.seed, "gridsearch:train");
    let entries = activation_grid_search(&xs, &ys, &spec.activations, &tcfg, rd.manifest.jobs)?;
    rd.write_json("gridsearch", &entries)?;
    rd.record_timing("gridsearch", started);
    rd.write_timings()?;
    Ok(entries)
}
