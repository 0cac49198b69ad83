mod common;

use std::collections::HashMap;

use frustra::graph_builder::{assemble, expand_conv, symmetrize, SignedSparseGraph, NO_PARAM};
use frustra::model_ir::synthetic::{generate_synthetic, Template};
use frustra::model_ir::{ConvGeometry, LayerKind, LayerOp, Model};
use proptest::prelude::*;

/// Number of kernel taps of output `(oy, ox)` that land inside the input.
fn in_bounds_taps(
    (oy, ox): (usize, usize),
    (in_h, in_w): (usize, usize),
    (k_h, k_w): (usize, usize),
    (s_h, s_w): (usize, usize),
    (p_t, p_l): (usize, usize),
) -> usize {
    let mut count = 0;
    for ky in 0..k_h {
        for kx in 0..k_w {
            let y = (oy * s_h + ky) as isize - p_t as isize;
            let x = (ox * s_w + kx) as isize - p_l as isize;
            if (0..in_h as isize).contains(&y) && (0..in_w as isize).contains(&x) {
                count += 1;
            }
        }
    }
    count
}

/// Edge count of a whole model derived from layer geometry alone.
fn receptive_field_count(model: &Model) -> usize {
    let m = &model.manifest;
    let mut total = 0;
    for idx in 0..m.layers().len() {
        total += match m.op(idx) {
            LayerOp::Conv(g) => {
                let mut per_map = 0;
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        per_map += in_bounds_taps(
                            (oy, ox),
                            (g.in_h, g.in_w),
                            (g.kernel_h, g.kernel_w),
                            (g.stride_h, g.stride_w),
                            (g.pad_top, g.pad_left),
                        );
                    }
                }
                per_map * g.out_c * (g.in_c / g.groups)
            }
            LayerOp::Dense { inputs, units } => inputs * units,
            LayerOp::Pool { geometry: p, .. } => {
                let mut per_map = 0;
                for oy in 0..p.out_h {
                    for ox in 0..p.out_w {
                        per_map += in_bounds_taps(
                            (oy, ox),
                            (p.in_h, p.in_w),
                            (p.window_h, p.window_w),
                            (p.stride_h, p.stride_w),
                            (p.pad_top, p.pad_left),
                        );
                    }
                }
                per_map * p.channels
            }
            LayerOp::Add => m.shape(idx).len() * m.inputs_of(idx).len(),
            _ => 0,
        };
    }
    total
}

#[test]
fn tiny_cnn_nnz_matches_receptive_field_enumeration() {
    let model = generate_synthetic(1, Template::TinyCnn).unwrap();
    for (id, blob) in model.store.iter() {
        assert!(
            blob.data.iter().all(|&w| w != 0.0),
            "{id} holds a zero weight"
        );
    }
    let graph = assemble(&model).unwrap();
    assert_eq!(graph.edge_count(), receptive_field_count(&model));
}

#[test]
fn every_template_matches_receptive_field_enumeration() {
    for template in Template::ALL {
        let model = generate_synthetic(5, template).unwrap();
        let graph = assemble(&model).unwrap();
        assert_eq!(
            graph.edge_count(),
            receptive_field_count(&model),
            "{template}"
        );
        assert!(graph.is_strictly_lower_triangular(), "{template}");
    }
}

#[test]
fn shared_parameters_carry_identical_weights() {
    for template in Template::ALL {
        let graph = assemble(&generate_synthetic(2, template).unwrap()).unwrap();
        let mut seen: HashMap<(u32, u32), u64> = HashMap::new();
        for (k, (_, _, w)) in graph.edges().enumerate() {
            let p = graph.provenance(k);
            if p.param == NO_PARAM {
                continue;
            }
            let bits = *seen.entry((p.layer, p.param)).or_insert(w.to_bits());
            assert_eq!(bits, w.to_bits(), "{template}: slot {p:?}");
        }
    }
}

#[test]
fn pooling_edges_use_the_fixed_positive_weight() {
    let model = generate_synthetic(0, Template::TinyCnn).unwrap();
    let graph = assemble(&model).unwrap();
    for block in graph.layers() {
        if matches!(block.kind, LayerKind::MaxPool | LayerKind::AvgPool) {
            for row in block.nodes.clone() {
                for k in graph.row_range(row) {
                    assert_eq!(graph.weights()[k], 0.005);
                }
            }
        }
    }
}

#[test]
fn symmetrized_view_identities() {
    for template in Template::ALL {
        let graph = assemble(&generate_synthetic(3, template).unwrap()).unwrap();
        let view = symmetrize(&graph);
        assert!((view.total_abs() - 2.0 * graph.abs_weight_sum()).abs() <= 1e-9 * view.total_abs());
        for i in 0..view.node_count() {
            assert_eq!(view.get(i, i), 0.0);
            for (j, w) in view.neighbors(i) {
                assert_eq!(view.get(j, i), w);
            }
        }
        for (row, col, w) in graph.edges() {
            assert_eq!(view.get(row, col), w);
        }
    }
}

#[test]
fn graph_file_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    for template in Template::ALL {
        let graph = assemble(&generate_synthetic(4, template).unwrap()).unwrap();
        let path = dir.path().join(format!("{template}.fsg"));
        graph.write(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"FRUSTGR1");
        assert_eq!(
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            graph.node_count() as u64
        );
        assert_eq!(
            u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            graph.edge_count() as u64
        );
        assert_eq!(SignedSparseGraph::read(&path).unwrap(), graph);
    }
    let bad = dir.path().join("bad.fsg");
    std::fs::write(&bad, b"NOTAGRAPH0000000").unwrap();
    assert!(SignedSparseGraph::read(&bad).unwrap_err().is_validation());
}

proptest! {
    #[test]
    fn conv_edges_per_output_equal_in_bounds_taps(
        in_h in 1usize..9, in_w in 1usize..9, in_c in 1usize..3, out_c in 1usize..3,
        k_h in 1usize..4, k_w in 1usize..4, s_h in 1usize..3, s_w in 1usize..3,
        pad in proptest::array::uniform4(0usize..3),
    ) {
        let Ok(g) = ConvGeometry::new((in_h, in_w, in_c), out_c, [k_h, k_w], [s_h, s_w], pad, 1, false) else {
            return Ok(());
        };
        let kernel = vec![1.0f32; out_c * in_c * k_h * k_w];
        let block = expand_conv(&g, &kernel).unwrap();
        prop_assert_eq!(block.n_rows, g.out_h * g.out_w * out_c);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let taps = in_bounds_taps((oy, ox), (in_h, in_w), (k_h, k_w), (s_h, s_w), (pad[0], pad[2]));
                for c in 0..out_c {
                    let row = (oy * g.out_w + ox) * out_c + c;
                    prop_assert_eq!(block.row(row).count(), taps * in_c);
                }
            }
        }
    }

    #[test]
    fn edge_list_order_does_not_change_the_graph(
        raw in proptest::collection::btree_map((1usize..12, 0usize..12), -3.0f64..3.0, 1..30),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let edges: Vec<(usize, usize, f64)> = raw
            .into_iter()
            .filter(|((r, c), w)| c < r && *w != 0.0)
            .map(|((r, c), w)| (r, c, w))
            .collect();
        let mut shuffled = edges.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = SignedSparseGraph::from_edges(12, &edges).unwrap();
        let b = SignedSparseGraph::from_edges(12, &shuffled).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn assembly_is_deterministic(seed in 0u64..50) {
        let model = generate_synthetic(seed, Template::ResidualCnn).unwrap();
        prop_assert_eq!(assemble(&model).unwrap(), assemble(&model).unwrap());
    }
}
