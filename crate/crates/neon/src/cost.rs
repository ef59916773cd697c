//! Latency, energy, power, area, and EDP estimation for a mapped graph
//! under the three hardware configurations:
//!
//! - `dlc`:  candidates run on provisioned fixed-function units,
//! - `lut`:  candidates run from lookup tables stored in subarrays,
//! - `neon`: candidates have been replaced by crossbar-mapped networks.
//!
//! Unit and LUT cycle counts are configuration, not ground truth; area and
//! power come from the component catalog. Crossbar timing follows the
//! bit-serial formula: input streaming cycles, ADC cycles by column group,
//! then shift-and-add per slice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{classify_op, Graph, OpKind, SupportClass};
use crate::mapping::{lut_access_cycles, lut_footprint, map_graph, HardwareConfig, MappingPlan};
use crate::transform::rewrite_sigmoid;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ComponentCatalog {
    pub subarray_mw: f64,
    pub subarray_um2: f64,
    pub bank_mw: f64,
    pub bank_um2: f64,
    pub exp_mw: f64,
    pub exp_um2: f64,
    pub div_sqrt_mw: f64,
    pub div_sqrt_um2: f64,
    pub mul_mw: f64,
    pub mul_um2: f64,
    /// No published numbers; defaults proxy the exponent unit.
    pub tanh_mw: f64,
    pub tanh_um2: f64,
}

impl Default for ComponentCatalog {
    fn default() -> Self {
        ComponentCatalog {
            subarray_mw: 24.08,
            subarray_um2: 13_120.0,
            bank_mw: 360.79,
            bank_um2: 484_940.0,
            exp_mw: 7.424,
            exp_um2: 5_017.0,
            div_sqrt_mw: 26.88,
            div_sqrt_um2: 23_869.0,
            mul_mw: 0.0047,
            mul_um2: 236.0,
            tanh_mw: 7.424,
            tanh_um2: 5_017.0,
        }
    }
}

impl ComponentCatalog {
    pub fn unit_power(&self, k: UnitKind) -> f64 {
        match k {
            UnitKind::Exp => self.exp_mw,
            UnitKind::DivSqrt => self.div_sqrt_mw,
            UnitKind::Mul => self.mul_mw,
            UnitKind::Tanh => self.tanh_mw,
        }
    }

    pub fn unit_area(&self, k: UnitKind) -> f64 {
        match k {
            UnitKind::Exp => self.exp_um2,
            UnitKind::DivSqrt => self.div_sqrt_um2,
            UnitKind::Mul => self.mul_um2,
            UnitKind::Tanh => self.tanh_um2,
        }
    }

    /// Plain average over the fixed-function unit powers, surfaced in
    /// comparison reports for inspection against externally quoted
    /// averages (which do not state their weighting).
    pub fn fixed_function_avg_power_mw(&self) -> f64 {
        (self.exp_mw + self.div_sqrt_mw + self.mul_mw) / 3.0
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.subarray_mw,
            self.subarray_um2,
            self.bank_mw,
            self.bank_um2,
            self.exp_mw,
            self.exp_um2,
            self.div_sqrt_mw,
            self.div_sqrt_um2,
            self.mul_mw,
            self.mul_um2,
            self.tanh_mw,
            self.tanh_um2,
        ];
        if vals.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("catalog entries must be positive".into()));
        }
        Ok(())
    }
}

/// Per-op cycle counts for the fixed-function units. Invented defaults,
/// exposed as configuration rather than asserted as ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DlcOpCycles {
    pub exp: u64,
    pub div: u64,
    pub sqrt: u64,
    pub mul: u64,
    pub tanh: u64,
}

impl Default for DlcOpCycles {
    fn default() -> Self {
        DlcOpCycles { exp: 10, div: 20, sqrt: 20, mul: 4, tanh: 8 }
    }
}

impl DlcOpCycles {
    fn validate(&self) -> Result<()> {
        if [self.exp, self.div, self.sqrt, self.mul, self.tanh]
            .iter()
            .any(|&c| c == 0)
        {
            return Err(Error::Config("unit op cycles must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub dlc_op_cycles: DlcOpCycles,
    pub shift_add_cycles_per_slice: u64,
    /// Lookup access: base cycles plus step per additional subarray
    /// traversed in the hierarchy. See `lut_access_cycles`.
    pub lut_base_cycles: u64,
    pub lut_step_cycles: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            dlc_op_cycles: DlcOpCycles::default(),
            shift_add_cycles_per_slice: 1,
            lut_base_cycles: 2,
            lut_step_cycles: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Dlc,
    Lut,
    Neon,
}

impl Arch {
    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Dlc => "dlc",
            Arch::Lut => "lut",
            Arch::Neon => "neon",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "dlc" => Ok(Arch::Dlc),
            "lut" => Ok(Arch::Lut),
            "neon" => Ok(Arch::Neon),
            other => Err(Error::Config(format!("unknown config '{other}'"))),
        }
    }
}

/// How many instances of each fixed-function unit the dlc and lut
/// configurations get. The neon configuration always integrates exactly
/// one unit per kind in use, regardless of this setting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DlcProvisioning {
    /// One unit of each kind in use.
    Single,
    /// Half the widest operand dimension per kind. This is the
    /// provisioning the 1152-dim softmax static-power figure assumes
    /// (576 exp + 576 div units).
    HalfDim,
    Fixed {
        exp: usize,
        div_sqrt: usize,
        mul: usize,
        tanh: usize,
    },
}

impl Default for DlcProvisioning {
    fn default() -> Self {
        DlcProvisioning::Single
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Exp,
    DivSqrt,
    Mul,
    Tanh,
}

impl UnitKind {
    pub fn tag(&self) -> &'static str {
        match self {
            UnitKind::Exp => "exp",
            UnitKind::DivSqrt => "div_sqrt",
            UnitKind::Mul => "mul",
            UnitKind::Tanh => "tanh",
        }
    }
}

/// One sequential phase of a unit-routed node: `ops` elemental operations
/// at `cy_per_op` cycles each, executed round-robin over the provisioned
/// instances of `kind`.
#[derive(Debug, Clone)]
struct Stage {
    kind: UnitKind,
    ops: u64,
    cy_per_op: u64,
}

#[derive(Debug, Clone)]
enum Route {
    Crossbar,
    Units(Vec<Stage>),
    Lut {
        subarrays_per_instance: usize,
        instances: usize,
        /// Sequential lookup phases; normalizing ops take two (elementwise
        /// pass, then combine).
        lookup_stages: u64,
        mul_ops: u64,
    },
    /// Comparators and range clamps: folded into the datapath, no cost.
    Passthrough,
}

fn route_name(r: &Route) -> &'static str {
    match r {
        Route::Crossbar => "crossbar",
        Route::Units(_) => "units",
        Route::Lut { .. } => "lut",
        Route::Passthrough => "passthrough",
    }
}

fn unit_stages(op: &OpKind, d: u64, cy: &DlcOpCycles) -> Vec<Stage> {
    match op {
        OpKind::Softmax { .. } => vec![
            Stage { kind: UnitKind::Exp, ops: d, cy_per_op: cy.exp },
            Stage { kind: UnitKind::DivSqrt, ops: d, cy_per_op: cy.div },
        ],
        OpKind::Squash { .. } => vec![
            Stage { kind: UnitKind::Mul, ops: d, cy_per_op: cy.mul },
            Stage { kind: UnitKind::DivSqrt, ops: 1, cy_per_op: cy.sqrt },
            Stage { kind: UnitKind::DivSqrt, ops: 1, cy_per_op: cy.div },
            Stage { kind: UnitKind::Mul, ops: d, cy_per_op: cy.mul },
        ],
        OpKind::SqrtElementwise => {
            vec![Stage { kind: UnitKind::DivSqrt, ops: d, cy_per_op: cy.sqrt }]
        }
        OpKind::LeakyRelu { .. } => vec![Stage { kind: UnitKind::Mul, ops: d, cy_per_op: cy.mul }],
        OpKind::Tanh => vec![Stage { kind: UnitKind::Tanh, ops: d, cy_per_op: cy.tanh }],
        OpKind::MulElementwise => vec![Stage { kind: UnitKind::Mul, ops: d, cy_per_op: cy.mul }],
        // Comparator-only ops and rewired plumbing.
        _ => vec![],
    }
}

fn route_node(
    n: &crate::graph::Node,
    arch: Arch,
    hw: &HardwareConfig,
    model: &LatencyModel,
) -> Result<Route> {
    let d = n.out_elems() as u64;
    let class = classify_op(&n.op, &hw.supported_dlc_ops);
    Ok(match class {
        SupportClass::CrossbarNative => Route::Crossbar,
        SupportClass::DlcNative => {
            let stages = unit_stages(&n.op, d, &model.dlc_op_cycles);
            if stages.is_empty() {
                Route::Passthrough
            } else {
                Route::Units(stages)
            }
        }
        SupportClass::IdentityRewrite => {
            // Sigmoids are rewritten before routing; reaching one here
            // means the caller skipped the rewrite.
            return Err(Error::Unroutable {
                node: n.id.clone(),
                arch: arch.tag().into(),
            });
        }
        SupportClass::TransformCandidate => match (&n.op, arch) {
            // Relu is a comparator, not a catalog unit.
            (OpKind::Relu, Arch::Dlc) => Route::Passthrough,
            (op, Arch::Dlc) => Route::Units(unit_stages(op, d, &model.dlc_op_cycles)),
            (op, Arch::Lut) => {
                let fp = lut_footprint(n, hw);
                let (lookup_stages, mul_ops) = match op {
                    OpKind::Softmax { .. } | OpKind::Squash { .. } => (2, d),
                    _ => (1, 0),
                };
                Route::Lut {
                    subarrays_per_instance: fp.subarrays_per_instance,
                    instances: fp.instances,
                    lookup_stages,
                    mul_ops,
                }
            }
            (_, Arch::Neon) => {
                return Err(Error::Unroutable {
                    node: n.id.clone(),
                    arch: arch.tag().into(),
                })
            }
        },
    })
}

fn input_cycles(hw: &HardwareConfig) -> u64 {
    (hw.value_bits as u64).div_ceil(hw.dac_bits as u64)
}

/// Cycles for one wordline-group activation reading `active_cols` columns:
/// bit-serial input streaming, ADC conversion by column group, then one
/// shift-and-add pass per bit slice.
pub fn crossbar_round_cycles(hw: &HardwareConfig, model: &LatencyModel, active_cols: usize) -> u64 {
    input_cycles(hw)
        + active_cols.div_ceil(hw.adc_per_subarray) as u64
        + hw.slices() as u64 * model.shift_add_cycles_per_slice
}

// ---------------------------------------------------------------------------
// Scheduling

/// Busy interval of one crossbar tile: (tile index, start, end).
pub type TileBusy = (usize, u64, u64);
/// Busy interval of a unit pool: (kind, start, end, instances active).
pub type UnitBusy = (UnitKind, u64, u64, usize);
/// Busy interval of lookup storage: (start, end, subarrays active).
pub type LutBusy = (u64, u64, usize);

#[derive(Debug, Clone)]
pub struct ScheduledNode {
    pub id: String,
    pub op: String,
    pub route: String,
    pub start: u64,
    pub end: u64,
    pub energy_pj: f64,
    pub tile_busy: Vec<TileBusy>,
    pub unit_busy: Vec<UnitBusy>,
    pub lut_busy: Vec<LutBusy>,
}

#[derive(Debug, Clone)]
pub struct Schedule {
    /// The graph actually costed: sigmoids rewritten through the exact
    /// tanh identity, so every configuration shares one datapath for them.
    pub graph: Graph,
    pub plan: MappingPlan,
    pub unit_counts: BTreeMap<UnitKind, usize>,
    pub lut_subarrays: usize,
    pub nodes: Vec<ScheduledNode>,
    pub makespan: u64,
}

/// Topological list schedule. Tiles and unit pools are booked exclusively
/// per node; independent nodes overlap when their resources are disjoint.
/// Multi-tile nodes run their tiles concurrently, so a node's crossbar
/// latency is the max over its tiles of that tile's summed round cycles.
pub fn schedule(
    g: &Graph,
    hw: &HardwareConfig,
    catalog: &ComponentCatalog,
    model: &LatencyModel,
    provisioning: &DlcProvisioning,
    arch: Arch,
) -> Result<Schedule> {
    catalog.validate()?;
    model.dlc_op_cycles.validate()?;
    let g = rewrite_sigmoid(g)?;
    let plan = map_graph(&g, hw)?;

    let mut routes: Vec<Route> = Vec::with_capacity(g.nodes.len());
    for n in &g.nodes {
        routes.push(route_node(n, arch, hw, model)?);
    }

    // Unit provisioning: kinds actually used, counts per policy.
    let mut widest: BTreeMap<UnitKind, usize> = BTreeMap::new();
    for (n, r) in g.nodes.iter().zip(&routes) {
        match r {
            Route::Units(stages) => {
                for s in stages {
                    let e = widest.entry(s.kind).or_insert(0);
                    *e = (*e).max(n.out_elems());
                }
            }
            Route::Lut { mul_ops, .. } if *mul_ops > 0 => {
                let e = widest.entry(UnitKind::Mul).or_insert(0);
                *e = (*e).max(n.out_elems());
            }
            _ => {}
        }
    }
    let mut unit_counts: BTreeMap<UnitKind, usize> = BTreeMap::new();
    for (&kind, &dim) in &widest {
        let count = match arch {
            Arch::Neon => 1,
            _ => match provisioning {
                DlcProvisioning::Single => 1,
                DlcProvisioning::HalfDim => dim.div_ceil(2).max(1),
                DlcProvisioning::Fixed { exp, div_sqrt, mul, tanh } => match kind {
                    UnitKind::Exp => *exp,
                    UnitKind::DivSqrt => *div_sqrt,
                    UnitKind::Mul => *mul,
                    UnitKind::Tanh => *tanh,
                },
            },
        };
        if count == 0 {
            let user = g
                .nodes
                .iter()
                .zip(&routes)
                .find(|(_, r)| match r {
                    Route::Units(st) => st.iter().any(|s| s.kind == kind),
                    Route::Lut { mul_ops, .. } => kind == UnitKind::Mul && *mul_ops > 0,
                    _ => false,
                })
                .map(|(n, _)| n.id.clone())
                .unwrap_or_default();
            return Err(Error::Unroutable {
                node: user,
                arch: format!("{} (no {} unit instantiated)", arch.tag(), kind.tag()),
            });
        }
        unit_counts.insert(kind, count);
    }

    // Per-node, per-tile busy cycles: blocks sharing a tile serialize.
    let mut node_tiles: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    for (ti, tile) in plan.tiles.iter().enumerate() {
        for b in &tile.blocks {
            let busy = crossbar_round_cycles(hw, model, b.cols());
            *node_tiles.entry(b.node).or_default().entry(ti).or_insert(0) += busy;
        }
    }

    let mut tile_free: Vec<u64> = vec![0; plan.tiles.len()];
    let mut unit_free: BTreeMap<UnitKind, u64> = unit_counts.keys().map(|&k| (k, 0)).collect();
    let mut finish: Vec<u64> = vec![0; g.nodes.len()];
    let mut out_nodes: Vec<ScheduledNode> = Vec::with_capacity(g.nodes.len());
    let mut lut_subarrays_total = 0usize;

    for &i in g.topo_order() {
        let n = &g.nodes[i];
        let mut start = n
            .inputs
            .iter()
            .map(|inp| finish[g.node_index(inp).unwrap()])
            .max()
            .unwrap_or(0);
        let mut energy_pj = 0.0;
        let mut tile_busy = Vec::new();
        let mut unit_busy = Vec::new();
        let mut lut_busy = Vec::new();
        let end;
        match &routes[i] {
            Route::Crossbar => {
                let tiles = node_tiles.get(&i).cloned().unwrap_or_default();
                for (&ti, _) in &tiles {
                    start = start.max(tile_free[ti]);
                }
                let mut dur = 1;
                for (&ti, &busy) in &tiles {
                    dur = dur.max(busy);
                    tile_free[ti] = start + busy;
                    energy_pj += catalog.subarray_mw * busy as f64 * hw.cycle_ns;
                    tile_busy.push((ti, start, start + busy));
                }
                end = start + dur;
            }
            Route::Units(stages) => {
                for s in stages {
                    start = start.max(unit_free[&s.kind]);
                }
                let mut t = start;
                for s in stages {
                    let count = unit_counts[&s.kind] as u64;
                    let dur = s.ops.div_ceil(count) * s.cy_per_op;
                    energy_pj += s.ops as f64
                        * catalog.unit_power(s.kind)
                        * s.cy_per_op as f64
                        * hw.cycle_ns;
                    unit_busy.push((s.kind, t, t + dur, s.ops.min(count) as usize));
                    t += dur;
                }
                for s in stages {
                    let e = unit_free.get_mut(&s.kind).unwrap();
                    *e = (*e).max(t);
                }
                end = t;
            }
            Route::Lut {
                subarrays_per_instance,
                instances,
                lookup_stages,
                mul_ops,
            } => {
                lut_subarrays_total += instances * subarrays_per_instance;
                let access = lut_access_cycles(*subarrays_per_instance).max(model.lut_base_cycles);
                let mut t = start;
                for _ in 0..*lookup_stages {
                    // One subarray per instance is active at a time while
                    // the access walks the hierarchy.
                    energy_pj +=
                        catalog.subarray_mw * *instances as f64 * access as f64 * hw.cycle_ns;
                    lut_busy.push((t, t + access, *instances));
                    t += access;
                }
                if *mul_ops > 0 {
                    let count = unit_counts[&UnitKind::Mul] as u64;
                    let t0 = t.max(unit_free[&UnitKind::Mul]);
                    let dur = mul_ops.div_ceil(count) * model.dlc_op_cycles.mul;
                    energy_pj += *mul_ops as f64
                        * catalog.mul_mw
                        * model.dlc_op_cycles.mul as f64
                        * hw.cycle_ns;
                    unit_busy.push((UnitKind::Mul, t0, t0 + dur, (*mul_ops).min(count) as usize));
                    *unit_free.get_mut(&UnitKind::Mul).unwrap() = t0 + dur;
                    t = t0 + dur;
                }
                end = t;
            }
            Route::Passthrough => {
                end = start;
            }
        }
        finish[i] = end;
        out_nodes.push(ScheduledNode {
            id: n.id.clone(),
            op: n.op.tag().to_string(),
            route: route_name(&routes[i]).to_string(),
            start,
            end,
            energy_pj,
            tile_busy,
            unit_busy,
            lut_busy,
        });
    }

    let makespan = finish.iter().copied().max().unwrap_or(0);
    Ok(Schedule {
        graph: g,
        plan,
        unit_counts,
        lut_subarrays: lut_subarrays_total,
        nodes: out_nodes,
        makespan,
    })
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeCost {
    pub id: String,
    pub op: String,
    pub route: String,
    pub start_cycle: u64,
    pub end_cycle: u64,
    pub energy_uj: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub config: String,
    pub latency_cycles: u64,
    pub latency_s: f64,
    pub energy_uj: f64,
    /// energy × latency, in µJ·s.
    pub edp_uj_s: f64,
    pub area_um2: f64,
    /// Sum over all instantiated components (provisioning envelope).
    pub static_power_mw: f64,
    /// Max over the timeline of concurrently active component power.
    pub peak_power_mw: f64,
    /// energy / makespan.
    pub avg_power_mw: f64,
    /// Programming the replacement-network cells; neon config only.
    pub init_energy_uj: Option<f64>,
    pub crossbar_tiles: usize,
    pub lut_subarrays: usize,
    pub unit_counts: BTreeMap<String, usize>,
    pub mean_tile_utilization: f64,
    pub total_occupied_cells: usize,
    pub neon_occupied_cells: usize,
    pub per_node: Vec<NodeCost>,
}

/// Write energy for the replacement-network cells in the plan. Per-cell
/// read energy is one subarray-cycle of energy spread over the tile's
/// cells; a write costs `write_read_energy_ratio` reads.
pub fn init_energy_uj(plan: &MappingPlan, hw: &HardwareConfig, catalog: &ComponentCatalog) -> f64 {
    let read_pj = catalog.subarray_mw * hw.cycle_ns / hw.tile_cells() as f64;
    plan.neon_occupied_cells as f64 * read_pj * hw.write_read_energy_ratio / 1e6
}

/// Schedules the graph under one configuration and aggregates the report.
pub fn evaluate(
    g: &Graph,
    hw: &HardwareConfig,
    catalog: &ComponentCatalog,
    model: &LatencyModel,
    provisioning: &DlcProvisioning,
    arch: Arch,
) -> Result<CostReport> {
    let sched = schedule(g, hw, catalog, model, provisioning, arch)?;
    Ok(report_from_schedule(&sched, hw, catalog, arch))
}

pub fn report_from_schedule(
    sched: &Schedule,
    hw: &HardwareConfig,
    catalog: &ComponentCatalog,
    arch: Arch,
) -> CostReport {
    let mut total_energy_pj = 0.0;
    let mut per_node = Vec::with_capacity(sched.nodes.len());
    let mut edges: Vec<(u64, f64)> = Vec::new();
    for sn in &sched.nodes {
        total_energy_pj += sn.energy_pj;
        per_node.push(NodeCost {
            id: sn.id.clone(),
            op: sn.op.clone(),
            route: sn.route.clone(),
            start_cycle: sn.start,
            end_cycle: sn.end,
            energy_uj: sn.energy_pj / 1e6,
        });
        for &(_, s, e) in &sn.tile_busy {
            edges.push((s, catalog.subarray_mw));
            edges.push((e, -catalog.subarray_mw));
        }
        for &(k, s, e, active) in &sn.unit_busy {
            let p = catalog.unit_power(k) * active as f64;
            edges.push((s, p));
            edges.push((e, -p));
        }
        for &(s, e, active) in &sn.lut_busy {
            let p = catalog.subarray_mw * active as f64;
            edges.push((s, p));
            edges.push((e, -p));
        }
    }
    edges.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut cur = 0.0;
    let mut peak = 0.0f64;
    for (_, dp) in edges {
        cur += dp;
        peak = peak.max(cur);
    }

    let unit_area: f64 = sched
        .unit_counts
        .iter()
        .map(|(&k, &c)| catalog.unit_area(k) * c as f64)
        .sum();
    let unit_power: f64 = sched
        .unit_counts
        .iter()
        .map(|(&k, &c)| catalog.unit_power(k) * c as f64)
        .sum();
    let subarrays = sched.plan.tiles.len() + sched.lut_subarrays;
    let area_um2 = subarrays as f64 * catalog.subarray_um2 + unit_area;
    let static_power_mw = subarrays as f64 * catalog.subarray_mw + unit_power;

    let energy_uj = total_energy_pj / 1e6;
    let latency_cycles = sched.makespan;
    let latency_s = latency_cycles as f64 * hw.cycle_ns * 1e-9;
    let makespan_ns = latency_cycles as f64 * hw.cycle_ns;
    let avg_power_mw = if makespan_ns > 0.0 {
        total_energy_pj / makespan_ns
    } else {
        0.0
    };
    let init = match arch {
        Arch::Neon => Some(init_energy_uj(&sched.plan, hw, catalog)),
        _ => None,
    };

    CostReport {
        config: arch.tag().to_string(),
        latency_cycles,
        latency_s,
        energy_uj,
        edp_uj_s: energy_uj * latency_s,
        area_um2,
        static_power_mw,
        peak_power_mw: peak,
        avg_power_mw,
        init_energy_uj: init,
        crossbar_tiles: sched.plan.tiles.len(),
        lut_subarrays: sched.lut_subarrays,
        unit_counts: sched
            .unit_counts
            .iter()
            .map(|(k, &c)| (k.tag().to_string(), c))
            .collect(),
        mean_tile_utilization: sched.plan.mean_utilization(hw),
        total_occupied_cells: sched.plan.total_occupied_cells,
        neon_occupied_cells: sched.plan.neon_occupied_cells,
        per_node,
    }
}

// ---------------------------------------------------------------------------
// Comparison

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRatios {
    pub latency: f64,
    pub energy: f64,
    pub area: f64,
    pub avg_power: f64,
    pub edp: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub reports: BTreeMap<String, CostReport>,
    /// config metric / dlc metric; the dlc row is exactly 1.0.
    pub ratios_vs_dlc: BTreeMap<String, MetricRatios>,
    /// Catalog average fixed-function unit power, for inspection.
    pub fixed_function_avg_power_mw: f64,
}

/// Evaluates dlc and lut on the original graph and neon on the transformed
/// graph, normalizing every metric to the dlc row.
pub fn compare_configs(
    g_original: &Graph,
    g_transformed: &Graph,
    hw: &HardwareConfig,
    catalog: &ComponentCatalog,
    model: &LatencyModel,
    provisioning: &DlcProvisioning,
) -> Result<CompareReport> {
    let dlc = evaluate(g_original, hw, catalog, model, provisioning, Arch::Dlc)?;
    let lut = evaluate(g_original, hw, catalog, model, provisioning, Arch::Lut)?;
    let neon = evaluate(g_transformed, hw, catalog, model, provisioning, Arch::Neon)?;
    let ratio = |r: &CostReport| MetricRatios {
        latency: r.latency_s / dlc.latency_s,
        energy: r.energy_uj / dlc.energy_uj,
        area: r.area_um2 / dlc.area_um2,
        avg_power: r.avg_power_mw / dlc.avg_power_mw,
        edp: r.edp_uj_s / dlc.edp_uj_s,
    };
    let mut ratios = BTreeMap::new();
    ratios.insert("dlc".to_string(), ratio(&dlc));
    ratios.insert("lut".to_string(), ratio(&lut));
    ratios.insert("neon".to_string(), ratio(&neon));
    let mut reports = BTreeMap::new();
    reports.insert("dlc".to_string(), dlc);
    reports.insert("lut".to_string(), lut);
    reports.insert("neon".to_string(), neon);
    Ok(CompareReport {
        reports,
        ratios_vs_dlc: ratios,
        fixed_function_avg_power_mw: catalog.fixed_function_avg_power_mw(),
    })
}

/// Geometric mean, for aggregating ratios across a benchmark set.
pub fn geomean(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

// ---------------------------------------------------------------------------
// Operator scaling sweep

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleRow {
    pub n: usize,
    pub dlc_energy_uj: f64,
    pub dlc_latency_s: f64,
    pub dlc_edp_uj_s: f64,
    pub neon_subarrays: usize,
    pub neon_energy_uj: f64,
    pub neon_latency_s: f64,
    pub neon_edp_uj_s: f64,
    pub lut_feasible: bool,
    pub lut_log2_bytes: f64,
    pub lut_edp_uj_s: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingCurve {
    pub rows: Vec<ScaleRow>,
    /// EDP(2N)/EDP(N) per consecutive doubling, keyed by the lower N.
    pub dlc_doubling: Vec<(usize, f64)>,
    pub neon_doubling: Vec<(usize, f64)>,
    /// Lower N of the first doubling step whose ratio jumps by more than
    /// 1.25x over the previous step.
    pub neon_break_at: Option<usize>,
}

/// Analytic sweep of one normalizing operator (exp stage + divide stage)
/// against its input count N.
///
/// dlc replicates one exp and one div unit per element: latency constant,
/// energy linear in N, so EDP doubles exactly per doubling. neon drives N
/// wordlines of a subarray and adds a subarray each time N exceeds the
/// tile rows: EDP is flat until the boundary, then steps. lut treats the
/// operator as one N-input table of 2^(N·value_bits) entries, infeasible
/// once the byte footprint exceeds the configured cap.
pub fn operator_scaling_sweep(
    hw: &HardwareConfig,
    catalog: &ComponentCatalog,
    model: &LatencyModel,
    counts: &[usize],
) -> Result<ScalingCurve> {
    if counts.is_empty() || counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "counts must be strictly ascending and positive".into(),
        ));
    }
    let cyc = hw.cycle_ns;
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let dlc_cycles = model.dlc_op_cycles.exp + model.dlc_op_cycles.div;
        let dlc_latency_s = dlc_cycles as f64 * cyc * 1e-9;
        let dlc_energy_uj = n as f64
            * (catalog.exp_mw * model.dlc_op_cycles.exp as f64
                + catalog.div_sqrt_mw * model.dlc_op_cycles.div as f64)
            * cyc
            / 1e6;

        let subarrays = n.div_ceil(hw.xbar_rows);
        let neon_cycles = crossbar_round_cycles(hw, model, hw.xbar_cols);
        let neon_latency_s = neon_cycles as f64 * cyc * 1e-9;
        let neon_energy_uj =
            subarrays as f64 * catalog.subarray_mw * neon_cycles as f64 * cyc / 1e6;

        let lut_log2_bytes =
            n as f64 * hw.value_bits as f64 + (hw.value_bits as f64 / 8.0).log2();
        let lut_feasible = lut_log2_bytes <= (hw.lut_cap_bytes as f64).log2();
        let lut_edp_uj_s = if lut_feasible {
            let bytes = 2f64.powf(lut_log2_bytes) as usize;
            let sub = bytes.div_ceil(hw.subarray_bytes);
            let cycles = lut_access_cycles(sub);
            let lat = cycles as f64 * cyc * 1e-9;
            let e = catalog.subarray_mw * cycles as f64 * cyc / 1e6;
            Some(e * lat)
        } else {
            None
        };

        rows.push(ScaleRow {
            n,
            dlc_energy_uj,
            dlc_latency_s,
            dlc_edp_uj_s: dlc_energy_uj * dlc_latency_s,
            neon_subarrays: subarrays,
            neon_energy_uj,
            neon_latency_s,
            neon_edp_uj_s: neon_energy_uj * neon_latency_s,
            lut_feasible,
            lut_log2_bytes,
            lut_edp_uj_s,
        });
    }

    let doubling = |f: &dyn Fn(&ScaleRow) -> f64| -> Vec<(usize, f64)> {
        rows.windows(2)
            .filter(|w| w[1].n == 2 * w[0].n)
            .map(|w| (w[0].n, f(&w[1]) / f(&w[0])))
            .collect()
    };
    let dlc_doubling = doubling(&|r| r.dlc_edp_uj_s);
    let neon_doubling = doubling(&|r| r.neon_edp_uj_s);
    let mut neon_break_at = None;
    for k in 1..neon_doubling.len() {
        if neon_doubling[k].1 > 1.25 * neon_doubling[k - 1].1 {
            neon_break_at = Some(neon_doubling[k].0);
            break;
        }
    }
    Ok(ScalingCurve {
        rows,
        dlc_doubling,
        neon_doubling,
        neon_break_at,
    })
}
