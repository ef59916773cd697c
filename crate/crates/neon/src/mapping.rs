//! Placement of weight-bearing nodes onto RRAM crossbar tiles.
//!
//! Every matmul output channel becomes one kernel (the column of weights
//! feeding that output). Kernel values are quantized per node to 16-bit
//! fixed point, split by sign into positive/negative magnitude planes, and
//! bit-sliced across `value_bits / cell_bits` adjacent columns. Kernels
//! longer than a tile's rows split into row groups that are activated
//! sequentially and recombined digitally.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeOrigin, OpKind, Payload};
use crate::nn::calibrate_frac_bits;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HardwareConfig {
    pub xbar_rows: usize,
    pub xbar_cols: usize,
    pub cell_bits: u32,
    pub value_bits: u32,
    /// Bits driven onto a wordline per cycle; input streaming takes
    /// `value_bits / dac_bits` cycles.
    pub dac_bits: u32,
    pub adc_per_subarray: usize,
    pub cycle_ns: f64,
    /// Cell write energy as a multiple of cell read energy.
    pub write_read_energy_ratio: f64,
    /// Storage capacity of one subarray when used as lookup memory.
    pub subarray_bytes: usize,
    /// Largest single lookup table considered implementable.
    pub lut_cap_bytes: u64,
    pub supported_dlc_ops: BTreeSet<String>,
}

impl Default for HardwareConfig {
    fn default() -> Self {
        HardwareConfig {
            xbar_rows: 128,
            xbar_cols: 128,
            cell_bits: 2,
            value_bits: 16,
            dac_bits: 1,
            adc_per_subarray: 8,
            cycle_ns: 10.0,
            write_read_energy_ratio: 1000.0,
            subarray_bytes: 4096,
            lut_cap_bytes: 1 << 30,
            supported_dlc_ops: crate::graph::default_supported_ops(),
        }
    }
}

impl HardwareConfig {
    pub fn slices(&self) -> usize {
        (self.value_bits as usize).div_ceil(self.cell_bits as usize)
    }

    pub fn tile_cells(&self) -> usize {
        self.xbar_rows * self.xbar_cols
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Pos,
    Neg,
}

/// One contiguous run of kernels on one tile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Block {
    pub node: usize,
    pub row_group: u32,
    pub sign: Sign,
    pub kernel_start: u32,
    pub kernel_count: u32,
    pub slices: u32,
    pub rows: u32,
    pub start_col: u32,
}

impl Block {
    pub fn cols(&self) -> usize {
        (self.kernel_count * self.slices) as usize
    }

    pub fn cells(&self) -> usize {
        self.cols() * self.rows as usize
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tile {
    /// Allocation pool: "workload" or "neon:<source>". Replacement networks
    /// never share tiles with workload weights.
    pub pool: String,
    pub sign: Sign,
    pub blocks: Vec<Block>,
    pub used_cols: usize,
    pub occupied_cells: usize,
}

impl Tile {
    pub fn utilization(&self, hw: &HardwareConfig) -> f64 {
        self.occupied_cells as f64 / hw.tile_cells() as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeMapping {
    pub node_id: String,
    pub frac_bits: u32,
    pub kernels: usize,
    pub kernel_len: usize,
    pub row_groups: usize,
    /// Columns placed across all tiles, both sign planes.
    pub columns_placed: usize,
    pub tile_indices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingPlan {
    pub tiles: Vec<Tile>,
    pub nodes: BTreeMap<String, NodeMapping>,
    pub total_occupied_cells: usize,
    /// Occupied cells in replacement-network pools only.
    pub neon_occupied_cells: usize,
}

impl MappingPlan {
    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn mean_utilization(&self, hw: &HardwareConfig) -> f64 {
        if self.tiles.is_empty() {
            return 0.0;
        }
        self.tiles.iter().map(|t| t.utilization(hw)).sum::<f64>() / self.tiles.len() as f64
    }
}

fn pool_of(n: &Node) -> String {
    match &n.origin {
        NodeOrigin::NeonNet { source } => format!("neon:{source}"),
        _ => "workload".to_string(),
    }
}

/// Kernels of a weight-bearing node: one per output channel, each listing
/// the weights that feed it. Bias vectors become length-1 kernels.
pub fn unroll_kernels(n: &Node) -> Result<Vec<Vec<f64>>> {
    match (&n.op, &n.weights) {
        (OpKind::Matmul, Some(Payload::Matrix(w))) => Ok((0..w.ncols())
            .map(|j| w.column(j).to_vec())
            .collect()),
        (OpKind::BiasAdd, Some(Payload::Vector(b))) => {
            Ok(b.iter().map(|&v| vec![v]).collect())
        }
        _ => Err(Error::Weights {
            node: n.id.clone(),
            msg: "node has no crossbar payload".into(),
        }),
    }
}

/// Per-cell conductance levels for one kernel on one sign plane:
/// `out[slice][row]`, each in `[0, 2^cell_bits)`.
pub fn slice_kernel(kernel: &[f64], sign: Sign, frac_bits: u32, hw: &HardwareConfig) -> Vec<Vec<u16>> {
    let scale = (1u64 << frac_bits) as f64;
    let qmax = (1i64 << (hw.value_bits - 1)) - 1;
    let mask = (1u32 << hw.cell_bits) - 1;
    let mags: Vec<u32> = kernel
        .iter()
        .map(|&v| {
            let q = (v * scale).round() as i64;
            let q = q.clamp(-qmax, qmax);
            match sign {
                Sign::Pos => q.max(0) as u32,
                Sign::Neg => (-q).max(0) as u32,
            }
        })
        .collect();
    (0..hw.slices())
        .map(|s| {
            let shift = s as u32 * hw.cell_bits;
            mags.iter().map(|&m| ((m >> shift) & mask) as u16).collect()
        })
        .collect()
}

/// Reassembles the signed fixed-point value held by a kernel row from its
/// positive and negative sliced cells. Exact inverse of `slice_kernel`.
pub fn reconstruct_value(
    pos_cells: &[u16],
    neg_cells: &[u16],
    frac_bits: u32,
    hw: &HardwareConfig,
) -> f64 {
    let weigh = |cells: &[u16]| -> i64 {
        cells
            .iter()
            .enumerate()
            .map(|(s, &c)| (c as i64) << (s as u32 * hw.cell_bits))
            .sum()
    };
    (weigh(pos_cells) - weigh(neg_cells)) as f64 / (1u64 << frac_bits) as f64
}

/// Places every weight-bearing node onto tiles: greedy first-fit over the
/// node's pool, one column group per kernel and sign, row groups split at
/// tile height. Placement order is the graph's topo order, so plans are
/// deterministic.
pub fn map_graph(g: &Graph, hw: &HardwareConfig) -> Result<MappingPlan> {
    let slices = hw.slices();
    let mut tiles: Vec<Tile> = Vec::new();
    let mut pools: HashMap<(String, Sign), Vec<usize>> = HashMap::new();
    let mut nodes_out: BTreeMap<String, NodeMapping> = BTreeMap::new();

    for &ni in g.topo_order() {
        let n = &g.nodes[ni];
        if !n.op.needs_weights() {
            continue;
        }
        let payload = n.weights.as_ref().unwrap();
        let frac_bits = calibrate_frac_bits(hw.value_bits, payload.max_abs());
        let (kernels, kernel_len) = match payload {
            Payload::Matrix(w) => (w.ncols(), w.nrows()),
            Payload::Vector(b) => (b.len(), 1),
        };
        let row_groups = kernel_len.div_ceil(hw.xbar_rows);
        let pool = pool_of(n);
        let mut columns_placed = 0usize;
        let mut touched: Vec<usize> = Vec::new();

        for rg in 0..row_groups {
            let rows = if rg + 1 == row_groups {
                kernel_len - rg * hw.xbar_rows
            } else {
                hw.xbar_rows
            };
            for sign in [Sign::Pos, Sign::Neg] {
                let pool_tiles = pools.entry((pool.clone(), sign)).or_default();
                let mut placed = 0usize;
                while placed < kernels {
                    let mut target = None;
                    for &ti in pool_tiles.iter() {
                        if hw.xbar_cols - tiles[ti].used_cols >= slices {
                            target = Some(ti);
                            break;
                        }
                    }
                    let ti = match target {
                        Some(ti) => ti,
                        None => {
                            tiles.push(Tile {
                                pool: pool.clone(),
                                sign,
                                blocks: Vec::new(),
                                used_cols: 0,
                                occupied_cells: 0,
                            });
                            let ti = tiles.len() - 1;
                            pool_tiles.push(ti);
                            ti
                        }
                    };
                    let tile = &mut tiles[ti];
                    let fit = ((hw.xbar_cols - tile.used_cols) / slices)
                        .min(kernels - placed);
                    debug_assert!(fit > 0);
                    let block = Block {
                        node: ni,
                        row_group: rg as u32,
                        sign,
                        kernel_start: placed as u32,
                        kernel_count: fit as u32,
                        slices: slices as u32,
                        rows: rows as u32,
                        start_col: tile.used_cols as u32,
                    };
                    tile.used_cols += block.cols();
                    tile.occupied_cells += block.cells();
                    columns_placed += block.cols();
                    tile.blocks.push(block);
                    if !touched.contains(&ti) {
                        touched.push(ti);
                    }
                    placed += fit;
                }
            }
        }
        nodes_out.insert(
            n.id.clone(),
            NodeMapping {
                node_id: n.id.clone(),
                frac_bits,
                kernels,
                kernel_len,
                row_groups,
                columns_placed,
                tile_indices: touched,
            },
        );
    }

    let total_occupied_cells = tiles.iter().map(|t| t.occupied_cells).sum();
    let neon_occupied_cells = tiles
        .iter()
        .filter(|t| t.pool.starts_with("neon:"))
        .map(|t| t.occupied_cells)
        .sum();
    Ok(MappingPlan {
        tiles,
        nodes: nodes_out,
        total_occupied_cells,
        neon_occupied_cells,
    })
}

// ---------------------------------------------------------------------------
// Lookup-table footprints

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LutFootprint {
    pub node_id: String,
    pub op: String,
    /// Parallel single-input table instances (one per element, plus one
    /// combine table for normalizing ops).
    pub instances: usize,
    pub subarrays_per_instance: usize,
    pub total_subarrays: usize,
    pub bytes: u64,
}

/// Size of the lookup storage needed to run one candidate op at full
/// element parallelism: each instance tabulates a single-input function
/// over the whole `value_bits` input grid.
pub fn lut_footprint(n: &Node, hw: &HardwareConfig) -> LutFootprint {
    let d = n.out_elems();
    let instances = match n.op {
        // Elementwise stage plus one shared combine table.
        OpKind::Softmax { .. } | OpKind::Squash { .. } => d + 1,
        _ => d,
    };
    let entries: u64 = 1u64 << hw.value_bits;
    let bytes_per_instance = entries * (hw.value_bits as u64 / 8).max(1);
    let subarrays_per_instance =
        (bytes_per_instance as usize).div_ceil(hw.subarray_bytes);
    LutFootprint {
        node_id: n.id.clone(),
        op: n.op.tag().to_string(),
        instances,
        subarrays_per_instance,
        total_subarrays: instances * subarrays_per_instance,
        bytes: instances as u64 * bytes_per_instance,
    }
}

/// Hierarchical access latency for one lookup: two cycles for the first
/// subarray, two more per additional subarray traversed.
pub fn lut_access_cycles(subarrays_per_instance: usize) -> u64 {
    2 + 2 * (subarrays_per_instance.saturating_sub(1)) as u64
}
