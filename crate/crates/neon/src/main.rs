use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neon::pipeline::{
    self, apply_overrides, load_config, AppConfig, Overrides, RunDir, RunManifest,
};

#[derive(Parser)]
#[command(
    name = "neon",
    version,
    about = "Replace unsupported nonlinear ops with crossbar-mapped networks and cost the result"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Structured JSON config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for reports and artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed; all stage and per-candidate seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Max concurrent trainings (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the training target validation MSE.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override hidden width and crossbar dimensions together.
    #[arg(long)]
    xbar_size: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train replacement networks for every unsupported op in a graph.
    Transform {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Map a graph and report latency/energy/power/area for one config.
    Simulate {
        #[arg(long)]
        graph: PathBuf,
        /// Hardware configuration to cost.
        #[arg(long, value_parser = ["dlc", "lut", "neon"], default_value = "dlc")]
        arch: String,
        #[command(flatten)]
        common: Common,
    },
    /// Transform, evaluate all three configs, and emit DLC-normalized ratios.
    Compare {
        /// One or more graphs; ratios are reported per graph plus geomean.
        #[arg(long, required = true, num_args = 1..)]
        graph: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic EDP sweep of one operator against its input count.
    Scaling {
        /// Ascending operator counts (default: powers of two 1..512).
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
    /// Rank candidate activations on a shared seeded dataset.
    Gridsearch {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, subcommand: &str) -> anyhow::Result<(RunManifest, usize)> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => AppConfig::default(),
    };
    apply_overrides(
        &mut cfg,
        &Overrides {
            epsilon: common.epsilon,
            xbar_size: common.xbar_size,
        },
    );
    let jobs = common.jobs.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let mut manifest = RunManifest::new(subcommand, cfg);
    manifest.seed = common.seed;
    manifest.jobs = jobs;
    manifest.config_path = common
        .config
        .as_ref()
        .map(|p| p.to_string_lossy().into_owned());
    Ok((manifest, jobs))
}

fn run() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    let mut flagged = false;
    match cli.cmd {
        Cmd::Transform { graph, common } => {
            let (mut manifest, _) = resolve(&common, "transform")?;
            manifest.graphs = vec![graph.to_string_lossy().into_owned()];
            let mut rd = RunDir::create(&common.out, manifest)?;
            let report = pipeline::run_transform(&mut rd, &graph)?;
            for c in &report.candidates {
                println!(
                    "{}: {} hidden layer(s), val mse {:.3e}{}",
                    c.node_id,
                    c.hidden_layers,
                    c.val_mse,
                    if c.converged { "" } else { "  [not_converged]" }
                );
            }
            if report.candidates.is_empty() {
                println!("no replacement candidates; graph copied unchanged");
            }
            if !report.all_converged {
                eprintln!("warning: some candidates missed the target (flagged, exit 0)");
                flagged = true;
            }
            println!("artifacts in {}", rd.dir.display());
        }
        Cmd::Simulate { graph, arch, common } => {
            let (mut manifest, _) = resolve(&common, "simulate")?;
            manifest.graphs = vec![graph.to_string_lossy().into_owned()];
            manifest.arch = Some(arch.clone());
            let mut rd = RunDir::create(&common.out, manifest)?;
            let r = pipeline::run_simulate(&mut rd, &graph)?;
            println!(
                "{}: {} cycles, {:.6} uJ, {:.1} um^2, peak {:.3} mW, avg {:.3} mW",
                r.config, r.latency_cycles, r.energy_uj, r.area_um2, r.peak_power_mw, r.avg_power_mw
            );
            if let Some(e) = r.init_energy_uj {
                println!("init energy {:.6} uJ", e);
            }
            println!("artifacts in {}", rd.dir.display());
        }
        Cmd::Compare { graph, common } => {
            let (mut manifest, _) = resolve(&common, "compare")?;
            manifest.graphs = graph
                .iter()
                .map(|p| p.to_string_lossy().into_owned())
                .collect();
            let mut rd = RunDir::create(&common.out, manifest)?;
            let summary = pipeline::run_compare(&mut rd, &graph)?;
            println!("geomean ratios vs dlc (latency, energy, area, avg power, edp):");
            for (config, m) in &summary.geomean_vs_dlc {
                println!(
                    "  {config}: {:.4} {:.4} {:.4} {:.4} {:.4}",
                    m.latency, m.energy, m.area, m.avg_power, m.edp
                );
            }
            if !summary.all_converged {
                eprintln!("warning: some candidates missed the target (flagged, exit 0)");
                flagged = true;
            }
            println!("artifacts in {}", rd.dir.display());
        }
        Cmd::Scaling { counts, common } => {
            let (mut manifest, _) = resolve(&common, "scaling")?;
            manifest.counts = Some(counts.unwrap_or_else(pipeline::default_scaling_counts));
            let mut rd = RunDir::create(&common.out, manifest)?;
            let curve = pipeline::run_scaling(&mut rd)?;
            match curve.neon_break_at {
                Some(n) => println!("neon slope break at N = {n}"),
                None => println!("no neon slope break in range"),
            }
            let infeasible: Vec<usize> = curve
                .rows
                .iter()
                .filter(|r| !r.lut_feasible)
                .map(|r| r.n)
                .collect();
            if !infeasible.is_empty() {
                println!("lut infeasible at N = {infeasible:?} (flagged, exit 0)");
                flagged = true;
            }
            println!("artifacts in {}", rd.dir.display());
        }
        Cmd::Gridsearch { common } => {
            let (manifest, _) = resolve(&common, "gridsearch")?;
            let mut rd = RunDir::create(&common.out, manifest)?;
            let entries = pipeline::run_gridsearch(&mut rd)?;
            println!("activation ranking (best first):");
            for e in &entries {
                println!("  {:?}: val mse {:.4e}", e.activation, e.val_mse);
            }
            println!("artifacts in {}", rd.dir.display());
        }
    }
    Ok(flagged)
}

fn main() -> ExitCode {
    match run() {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
