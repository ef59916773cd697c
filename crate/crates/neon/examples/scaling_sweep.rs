//! Energy-delay scaling as the number of concurrent normalizer instances
//! grows. Fixed-function EDP doubles with every doubling of instances;
//! replacement networks ride spare subarray parallelism until the array
//! budget runs out, and table lookups stop being storable almost
//! immediately.
//!
//!     cargo run --example scaling_sweep

use neon::cost::{operator_scaling_sweep, ComponentCatalog, LatencyModel};
use neon::mapping::HardwareConfig;

fn main() -> neon::Result<()> {
    let hw = HardwareConfig::default();
    let catalog = ComponentCatalog::default();
    let model = LatencyModel::default();
    let counts: Vec<usize> = (0..10).map(|k| 1usize << k).collect();

    let curve = operator_scaling_sweep(&hw, &catalog, &model, &counts)?;

    println!("{:>5} {:>14} {:>14} {:>12}", "N", "dlc EDP uJ*s", "neon EDP uJ*s", "lut EDP uJ*s");
    for row in &curve.rows {
        let lut = match row.lut_edp_uj_s {
            Some(v) => format!("{v:.3e}"),
            None => "infeasible".to_string(),
        };
        println!(
            "{:>5} {:>14.3e} {:>14.3e} {:>12}",
            row.n, row.dlc_edp_uj_s, row.neon_edp_uj_s, lut
        );
    }

    match curve.neon_break_at {
        Some(n) => println!("\nneon EDP slope breaks at N = {n} (subarray budget exhausted)"),
        None => println!("\nno neon slope break in range"),
    }
    Ok(())
}
