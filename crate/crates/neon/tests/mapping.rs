//! Crossbar placement invariants, checked structurally on the plans the
//! greedy mapper emits and by property tests over random layer shapes.

mod common;

use ndarray::Array2;
use neon::graph::{Graph, Node, NodeOrigin, OpKind, Payload};
use neon::mapping::{
    lut_access_cycles, lut_footprint, map_graph, reconstruct_value, slice_kernel, HardwareConfig,
    Sign,
};
use neon::nn::calibrate_frac_bits;
use proptest::prelude::*;

fn single_matmul(rows: usize, cols: usize) -> Graph {
    let w = Array2::from_shape_fn((rows, cols), |(i, j)| {
        ((i * 37 + j * 11 + 3) as f64).sin() * 1.7
    });
    Graph::new(
        vec![
            Node {
                id: "input".into(),
                op: OpKind::Identity,
                inputs: vec![],
                output_shape: vec![rows],
                weights: None,
                origin: NodeOrigin::Workload,
            },
            Node {
                id: "m".into(),
                op: OpKind::Matmul,
                inputs: vec!["input".into()],
                output_shape: vec![cols],
                weights: Some(Payload::Matrix(w)),
                origin: NodeOrigin::Workload,
            },
        ],
        "input".into(),
        "m".into(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn occupied_cells_count_every_sliced_weight(rows in 1usize..300, cols in 1usize..200) {
        let hw = HardwareConfig::default();
        let g = single_matmul(rows, cols);
        let plan = map_graph(&g, &hw).unwrap();
        // Every weight appears once per slice on each of the two sign planes.
        let want = 2 * hw.slices() * rows * cols;
        prop_assert_eq!(plan.total_occupied_cells, want);
        let from_tiles: usize = plan.tiles.iter().map(|t| t.occupied_cells).sum();
        prop_assert_eq!(from_tiles, want);
    }

    #[test]
    fn tiles_never_overflow_their_columns(rows in 1usize..300, cols in 1usize..200) {
        let hw = HardwareConfig::default();
        let g = single_matmul(rows, cols);
        let plan = map_graph(&g, &hw).unwrap();
        for t in &plan.tiles {
            prop_assert!(t.used_cols <= hw.xbar_cols);
            let cols_from_blocks: usize = t.blocks.iter().map(|b| b.cols()).sum();
            prop_assert_eq!(cols_from_blocks, t.used_cols);
            let u = t.utilization(&hw);
            prop_assert!(u > 0.0 && u <= 1.0, "utilization {u}");
            // Column ranges of blocks within a tile are disjoint.
            let mut spans: Vec<(u32, u32)> = t
                .blocks
                .iter()
                .map(|b| (b.start_col, b.start_col + b.cols() as u32))
                .collect();
            spans.sort();
            for w in spans.windows(2) {
                prop_assert!(w[0].1 <= w[1].0, "overlapping blocks {spans:?}");
            }
            // A tile holds a single sign plane.
            prop_assert!(t.blocks.iter().all(|b| b.sign == t.sign));
        }
    }

    #[test]
    fn slice_reconstruct_round_trips(v in -200.0f64..200.0, max_abs in 1.0f64..256.0) {
        let hw = HardwareConfig::default();
        let f = calibrate_frac_bits(hw.value_bits, max_abs);
        let qmax = ((1i64 << (hw.value_bits - 1)) - 1) as f64;
        let pos = slice_kernel(&[v], Sign::Pos, f, &hw);
        let neg = slice_kernel(&[v], Sign::Neg, f, &hw);
        let pos_cells: Vec<u16> = pos.iter().map(|s| s[0]).collect();
        let neg_cells: Vec<u16> = neg.iter().map(|s| s[0]).collect();
        let got = reconstruct_value(&pos_cells, &neg_cells, f, &hw);
        let scale = (1u64 << f) as f64;
        let want = (v * scale).round().clamp(-qmax, qmax) / scale;
        prop_assert_eq!(got, want);
    }
}

#[test]
fn pools_never_share_tiles() {
    let mut g = common::build_capsule_mini();
    // Pretend one layer came out of a replacement net for "squash0".
    let idx = g.nodes.iter().position(|n| n.id == "route").unwrap();
    g.nodes[idx].origin = NodeOrigin::NeonNet {
        source: "squash0".into(),
    };
    let g = Graph::new(g.nodes, g.entry.clone(), g.exit.clone()).unwrap();
    let hw = HardwareConfig::default();
    let plan = map_graph(&g, &hw).unwrap();

    let pools: std::collections::BTreeSet<_> =
        plan.tiles.iter().map(|t| t.pool.clone()).collect();
    assert!(pools.contains("workload"));
    assert!(pools.contains("neon:squash0"));
    for t in &plan.tiles {
        for b in &t.blocks {
            let origin_pool = match &g.nodes[b.node].origin {
                NodeOrigin::NeonNet { source } => format!("neon:{source}"),
                _ => "workload".to_string(),
            };
            assert_eq!(origin_pool, t.pool, "block from wrong pool on tile");
        }
    }
    assert!(plan.neon_occupied_cells > 0);
    assert!(plan.neon_occupied_cells < plan.total_occupied_cells);
}

#[test]
fn mean_utilization_never_rises_with_tile_size() {
    let g = common::build_attn_mini();
    let mut prev = f64::INFINITY;
    for size in [64usize, 128, 256, 512] {
        let hw = HardwareConfig {
            xbar_rows: size,
            xbar_cols: size,
            ..HardwareConfig::default()
        };
        let plan = map_graph(&g, &hw).unwrap();
        let u = plan.mean_utilization(&hw);
        assert!(
            u <= prev + 1e-12,
            "utilization rose from {prev} to {u} at {size}"
        );
        prev = u;
    }
}

#[test]
fn row_groups_split_tall_kernels() {
    let hw = HardwareConfig::default();
    let g = single_matmul(300, 4);
    let plan = map_graph(&g, &hw).unwrap();
    let nm = &plan.nodes["m"];
    assert_eq!(nm.row_groups, 3); // 300 rows over 128-row tiles
    assert_eq!(nm.kernels, 4);
    let rows_seen: usize = plan
        .tiles
        .iter()
        .flat_map(|t| &t.blocks)
        .filter(|b| b.sign == Sign::Pos && b.kernel_start == 0)
        .map(|b| b.rows as usize)
        .sum();
    assert_eq!(rows_seen, 300);
}

#[test]
fn bias_vectors_map_as_unit_kernels() {
    let hw = HardwareConfig::default();
    let b = ndarray::Array1::from_vec(vec![0.5; 24]);
    let g = Graph::new(
        vec![
            Node {
                id: "input".into(),
                op: OpKind::Identity,
                inputs: vec![],
                output_shape: vec![24],
                weights: None,
                origin: NodeOrigin::Workload,
            },
            Node {
                id: "b".into(),
                op: OpKind::BiasAdd,
                inputs: vec!["input".into()],
                output_shape: vec![24],
                weights: Some(Payload::Vector(b)),
                origin: NodeOrigin::Workload,
            },
        ],
        "input".into(),
        "b".into(),
    )
    .unwrap();
    let plan = map_graph(&g, &hw).unwrap();
    let nm = &plan.nodes["b"];
    assert_eq!((nm.kernels, nm.kernel_len, nm.row_groups), (24, 1, 1));
    assert_eq!(plan.total_occupied_cells, 2 * hw.slices() * 24);
}

#[test]
fn lut_storage_for_normalizing_ops_has_combine_table() {
    let hw = HardwareConfig::default();
    let n = Node {
        id: "s".into(),
        op: OpKind::Softmax { dim: 64 },
        inputs: vec!["input".into()],
        output_shape: vec![64],
        weights: None,
        origin: NodeOrigin::Workload,
    };
    let fp = lut_footprint(&n, &hw);
    assert_eq!(fp.instances, 65);
    // 2^16 entries at two bytes each.
    assert_eq!(fp.bytes, 65 * 131_072);
    assert_eq!(fp.subarrays_per_instance, 32);
    assert_eq!(fp.total_subarrays, 65 * 32);
    assert_eq!(lut_access_cycles(fp.subarrays_per_instance), 64);
    assert_eq!(lut_access_cycles(1), 2);
}
