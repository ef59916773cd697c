//! Evaluates workloads under all three backends: fixed-function digital
//! units, lookup tables, and trained replacement networks co-resident on
//! the crossbars. Which one wins depends on what dominates the graph, so
//! this runs two fixtures: a squash-heavy one where the digital units
//! keep their lead, and a wide-softmax one where the replacement networks
//! take it.
//!
//!     cargo run --release --example arch_comparison

use std::path::Path;

use neon::cost::{compare_configs, ComponentCatalog, DlcProvisioning, LatencyModel};
use neon::graph::load_graph;
use neon::mapping::HardwareConfig;
use neon::transform::{transform_graph, TransformConfig};

fn main() -> neon::Result<()> {
    let hw = HardwareConfig::default();
    let catalog = ComponentCatalog::default();
    let model = LatencyModel::default();

    for name in ["capsule_mini", "mlp_mini"] {
        let fixture =
            Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("fixtures/{name}.json"));
        let g = load_graph(&fixture)?;

        // Short training: the cost picture depends on replacement
        // topology, not on squeezing out the last decade of MSE.
        let mut tcfg = TransformConfig::default();
        tcfg.capture_samples = 4096;
        tcfg.train.num_epochs = 30;
        tcfg.train.max_layers = 1;
        let transformed = transform_graph(&g, &tcfg, 0, 1)?.graph;

        let cmp =
            compare_configs(&g, &transformed, &hw, &catalog, &model, &DlcProvisioning::Single)?;

        println!("workload: {name} ({} nodes)", g.nodes.len());
        println!(
            "{:<6} {:>12} {:>12} {:>14} {:>12}",
            "config", "latency us", "energy uJ", "area mm2", "avg power mW"
        );
        for (cfg_name, rep) in &cmp.reports {
            println!(
                "{:<6} {:>12.3} {:>12.4} {:>14.4} {:>12.2}",
                cfg_name,
                rep.latency_s * 1e6,
                rep.energy_uj,
                rep.area_um2 / 1e6,
                rep.avg_power_mw
            );
        }
        println!("ratios vs the fixed-function config:");
        for (cfg_name, r) in &cmp.ratios_vs_dlc {
            println!(
                "  {:<5} latency x{:.3}  energy x{:.3}  area x{:.3}  avg power x{:.3}",
                cfg_name, r.latency, r.energy, r.area, r.avg_power
            );
        }
        println!();
    }
    Ok(())
}
