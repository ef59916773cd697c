//! Shows how weight-bearing nodes land on crossbar tiles: kernels
//! unrolled per output channel, split into sign planes and 2-bit slices,
//! packed first-fit into per-pool tiles. Also sizes the lookup-table
//! alternative for the normalizing op, which is why tables stop scaling.
//!
//!     cargo run --example crossbar_mapping

use std::path::Path;

use neon::graph::load_graph;
use neon::mapping::{lut_footprint, map_graph, HardwareConfig};

fn main() -> neon::Result<()> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/attn_mini.json");
    let g = load_graph(&fixture)?;
    let hw = HardwareConfig::default();

    let plan = map_graph(&g, &hw)?;
    println!("{} tiles, mean utilization {:.1}%", plan.tiles.len(), 100.0 * plan.mean_utilization(&hw));
    println!(
        "{:>4} {:<10} {:>4} {:>10} {:>12} {:>6}",
        "tile", "pool", "sign", "used cols", "cells", "util"
    );
    for (i, t) in plan.tiles.iter().enumerate() {
        println!(
            "{:>4} {:<10} {:>4} {:>10} {:>12} {:>5.1}%",
            i,
            t.pool,
            format!("{:?}", t.sign),
            t.used_cols,
            t.occupied_cells,
            100.0 * t.utilization(&hw)
        );
    }

    println!("\nper-node placement:");
    for (id, nm) in &plan.nodes {
        println!(
            "  {:<10} {} kernel(s) of {} element(s), {} column(s) over tiles {:?}, {} frac bits",
            id, nm.kernels, nm.kernel_len, nm.columns_placed, nm.tile_indices, nm.frac_bits
        );
    }

    let softmax = g.nodes.iter().find(|n| n.op.tag() == "softmax").unwrap();
    let fp = lut_footprint(softmax, &hw);
    println!(
        "\nlookup-table alternative for '{}': {} instance(s) x {} subarray(s) = {} bytes",
        fp.node_id, fp.instances, fp.subarrays_per_instance, fp.bytes
    );
    Ok(())
}
