//! Expansion of a network into its weighted signed adjacency matrix `A`.
//!
//! Convolutions become generalized Toeplitz blocks, pooling windows become
//! blocks of identical fixed weights, add layers contribute unit edges from
//! every summand. Element-wise layers contribute nothing. Biases are not part
//! of `A`.

mod graph;
mod symmetric;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model_ir::{ConvGeometry, ElementMap, LayerOp, Model, PoolGeometry};

pub use graph::{LayerBlock, Provenance, SignedSparseGraph, GRAPH_MAGIC, NO_PARAM};
pub use symmetric::{symmetrize, SymmetrizedView};

/// Local CSR block of one layer: rows are output elements, columns are input
/// element indices, `params` holds the weight-blob index of each entry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EdgeBlock {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub weights: Vec<f64>,
    pub params: Vec<u32>,
}

impl EdgeBlock {
    fn with_rows(n_rows: usize, n_cols: usize, capacity: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        row_ptr.push(0);
        Self {
            n_rows,
            n_cols,
            row_ptr,
            cols: Vec::with_capacity(capacity),
            weights: Vec::with_capacity(capacity),
            params: Vec::with_capacity(capacity),
        }
    }

    fn push(&mut self, col: usize, weight: f64, param: u32) {
        self.cols.push(col as u32);
        self.weights.push(weight);
        self.params.push(param);
    }

    fn end_row(&mut self) {
        self.row_ptr.push(self.cols.len());
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64, u32)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1])
            .map(move |k| (self.cols[k] as usize, self.weights[k], self.params[k]))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, row) in dense.iter_mut().enumerate() {
            for (c, w, _) in self.row(r) {
                row[c] = w;
            }
        }
        dense
    }
}

/// Toeplitz expansion of a (grouped, optionally shuffled) convolution.
///
/// Kernel layout is `[out_c, kernel_h, kernel_w, in_c / groups]`. Padded
/// positions and zero-valued parameters produce no edge.
pub fn expand_conv(g: &ConvGeometry, kernel: &[f32]) -> Result<EdgeBlock> {
    if kernel.len() != g.kernel_len() {
        return Err(Error::BlobLength {
            blob: "kernel".into(),
            expected: g.kernel_len(),
            actual: kernel.len(),
        });
    }
    let cin_g = g.in_c_per_group();
    let cout_g = g.out_c_per_group();
    let per_row = g.kernel_h * g.kernel_w * cin_g;
    let mut block = EdgeBlock::with_rows(g.out_len(), g.in_len(), g.out_len() * per_row);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for position in 0..g.out_c {
                let filter = g.filter_at(position);
                let first_channel = (filter / cout_g) * cin_g;
                for ky in 0..g.kernel_h {
                    let Some(iy) = (oy * g.stride_h + ky).checked_sub(g.pad_top) else {
                        continue;
                    };
                    if iy >= g.in_h {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let Some(ix) = (ox * g.stride_w + kx).checked_sub(g.pad_left) else {
                            continue;
                        };
                        if ix >= g.in_w {
                            continue;
                        }
                        let base = (iy * g.in_w + ix) * g.in_c + first_channel;
                        for ci in 0..cin_g {
                            let param = g.param_index(filter, ky, kx, ci);
                            let w = kernel[param];
                            if w != 0.0 {
                                block.push(base + ci, f64::from(w), param as u32);
                            }
                        }
                    }
                }
                block.end_row();
            }
        }
    }
    Ok(block)
}

/// Grouped convolution: block-diagonal over channel groups, rows permuted by
/// the channel shuffle when enabled.
pub fn expand_grouped_conv(g: &ConvGeometry, kernel: &[f32]) -> Result<EdgeBlock> {
    if g.groups == 0 || !g.in_c.is_multiple_of(g.groups) || !g.out_c.is_multiple_of(g.groups) {
        return Err(Error::InvalidArgument(format!(
            "channels ({} in, {} out) not divisible by {} groups",
            g.in_c, g.out_c, g.groups
        )));
    }
    expand_conv(g, kernel)
}

/// Pooling block: every output connects to its window with weight `0.01 / p`.
/// Max and average pooling give the same block.
pub fn expand_pool(g: &PoolGeometry) -> EdgeBlock {
    let weight = g.edge_weight();
    let mut block = EdgeBlock::with_rows(
        g.out_len(),
        g.in_len(),
        g.out_len() * g.window_h * g.window_w,
    );
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for c in 0..g.channels {
                for ky in 0..g.window_h {
                    let Some(iy) = (oy * g.stride_h + ky).checked_sub(g.pad_top) else {
                        continue;
                    };
                    if iy >= g.in_h {
                        continue;
                    }
                    for kx in 0..g.window_w {
                        let Some(ix) = (ox * g.stride_w + kx).checked_sub(g.pad_left) else {
                            continue;
                        };
                        if ix < g.in_w {
                            block.push((iy * g.in_w + ix) * g.channels + c, weight, NO_PARAM);
                        }
                    }
                }
                block.end_row();
            }
        }
    }
    block
}

/// Dense block from a row-major `[units, inputs]` matrix.
pub fn expand_dense(inputs: usize, units: usize, w: &[f32]) -> Result<EdgeBlock> {
    if w.len() != inputs * units {
        return Err(Error::BlobLength {
            blob: "dense".into(),
            expected: inputs * units,
            actual: w.len(),
        });
    }
    let mut block = EdgeBlock::with_rows(units, inputs, w.len());
    for o in 0..units {
        for i in 0..inputs {
            let param = o * inputs + i;
            if w[param] != 0.0 {
                block.push(i, f64::from(w[param]), param as u32);
            }
        }
        block.end_row();
    }
    Ok(block)
}

fn identity_block(len: usize) -> EdgeBlock {
    let mut block = EdgeBlock::with_rows(len, len, len);
    for i in 0..len {
        block.push(i, 1.0, NO_PARAM);
        block.end_row();
    }
    block
}

struct LayerRows {
    row_lens: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    provenance: Vec<Provenance>,
}

/// Builds `A` for a validated model.
///
/// Node numbering follows the canonical topological layer order, then raster
/// order within each layer, so the result does not depend on the order in
/// which layers are listed.
pub fn assemble(model: &Model) -> Result<SignedSparseGraph> {
    let manifest = &model.manifest;
    let layout = manifest.layout();
    let owners = layout.owners();

    let per_layer: Vec<LayerRows> = owners
        .par_iter()
        .enumerate()
        .map(|(block_idx, (layer, nodes))| {
            let inputs = manifest.inputs_of(*layer);
            let blocks: Vec<(EdgeBlock, &ElementMap)> = match manifest.op(*layer) {
                LayerOp::Input => Vec::new(),
                LayerOp::Conv(g) => {
                    let kernel = model.weights(*layer).expect("validated weights");
                    vec![(expand_conv(g, kernel)?, layout.elements(inputs[0]))]
                }
                LayerOp::Dense {
                    inputs: n_in,
                    units,
                } => {
                    let w = model.weights(*layer).expect("validated weights");
                    vec![(expand_dense(*n_in, *units, w)?, layout.elements(inputs[0]))]
                }
                LayerOp::Pool { geometry, .. } => {
                    vec![(expand_pool(geometry), layout.elements(inputs[0]))]
                }
                LayerOp::Add => inputs
                    .iter()
                    .map(|&src| (identity_block(nodes.len()), layout.elements(src)))
                    .collect(),
                other => unreachable!("{other:?} does not own nodes"),
            };
            Ok(collect_rows(block_idx as u32, nodes.clone(), &blocks))
        })
        .collect::<Result<_>>()?;

    let n = layout.node_count();
    let nnz: usize = per_layer.iter().map(|l| l.cols.len()).sum();
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut cols = Vec::with_capacity(nnz);
    let mut weights = Vec::with_capacity(nnz);
    let mut provenance = Vec::with_capacity(nnz);
    for rows in per_layer {
        for len in rows.row_lens {
            row_ptr.push(row_ptr.last().unwrap() + len);
        }
        cols.extend(rows.cols);
        weights.extend(rows.weights);
        provenance.extend(rows.provenance);
    }
    let layers = owners
        .iter()
        .map(|(layer, nodes)| {
            let spec = manifest.layer(*layer);
            LayerBlock {
                id: spec.id.clone(),
                kind: spec.kind,
                nodes: nodes.clone(),
            }
        })
        .collect();
    let graph =
        SignedSparseGraph::from_parts(n, row_ptr, cols, weights, Some(provenance), layers, None)?;
    debug_assert!(graph.is_strictly_lower_triangular());
    Ok(graph)
}

fn collect_rows(
    block_idx: u32,
    nodes: std::ops::Range<usize>,
    blocks: &[(EdgeBlock, &ElementMap)],
) -> LayerRows {
    let nnz: usize = blocks.iter().map(|(b, _)| b.nnz()).sum();
    let mut out = LayerRows {
        row_lens: Vec::with_capacity(nodes.len()),
        cols: Vec::with_capacity(nnz),
        weights: Vec::with_capacity(nnz),
        provenance: Vec::with_capacity(nnz),
    };
    let mut row: Vec<(u32, f64, u32)> = Vec::new();
    for r in 0..nodes.len() {
        row.clear();
        for (block, map) in blocks {
            row.extend(block.row(r).map(|(c, w, p)| (map.node(c) as u32, w, p)));
        }
        row.sort_unstable_by_key(|e| e.0);
        out.row_lens.push(row.len());
        for &(c, w, param) in &row {
            out.cols.push(c);
            out.weights.push(w);
            out.provenance.push(Provenance {
                layer: block_idx,
                param,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::synthetic::{generate_synthetic, Template};
    use crate::model_ir::LayerKind;

    fn conv_1d(len: usize, kernel: usize, pad: usize) -> ConvGeometry {
        ConvGeometry::new(
            (1, len, 1),
            1,
            [1, kernel],
            [1, 1],
            [0, 0, pad, pad],
            1,
            false,
        )
        .unwrap()
    }

    #[test]
    fn one_dimensional_toeplitz() {
        let block = expand_conv(&conv_1d(4, 2, 0), &[2.0, 3.0]).unwrap();
        assert_eq!(
            block.to_dense(),
            vec![
                vec![2.0, 3.0, 0.0, 0.0],
                vec![0.0, 2.0, 3.0, 0.0],
                vec![0.0, 0.0, 2.0, 3.0],
            ]
        );
    }

    #[test]
    fn padded_positions_produce_no_edges() {
        let block = expand_conv(&conv_1d(4, 2, 1), &[2.0, 3.0]).unwrap();
        let dense = block.to_dense();
        assert_eq!(dense.len(), 5);
        assert_eq!(dense[0], vec![3.0, 0.0, 0.0, 0.0]);
        assert_eq!(dense[4], vec![0.0, 0.0, 0.0, 2.0]);
        assert_eq!(block.row(0).count(), 1);
    }

    #[test]
    fn strided_three_by_three() {
        let g = ConvGeometry::new((5, 5, 1), 1, [3, 3], [2, 2], [0; 4], 1, false).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 2));
        let block = expand_conv(&g, &[1.0; 9]).unwrap();
        assert_eq!(block.nnz(), 4 * 9);
    }

    #[test]
    fn grouped_identity_is_block_diagonal() {
        let g = ConvGeometry::new((1, 1, 4), 4, [1, 1], [1, 1], [0; 4], 2, false).unwrap();
        // Two input channels per group: filter f sees channels of its group.
        let kernel = [1.0, 0.5, 0.25, 1.0, 1.0, 0.5, 0.25, 1.0];
        let dense = expand_grouped_conv(&g, &kernel).unwrap().to_dense();
        for (r, row) in dense.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                if r / 2 != c / 2 {
                    assert_eq!(w, 0.0, "({r},{c})");
                } else {
                    assert_ne!(w, 0.0, "({r},{c})");
                }
            }
        }
    }

    #[test]
    fn shuffle_reorders_rows() {
        let plain = ConvGeometry::new((1, 1, 4), 4, [1, 1], [1, 1], [0; 4], 2, false).unwrap();
        let shuffled = ConvGeometry {
            shuffle: true,
            ..plain
        };
        let kernel: Vec<f32> = (1..=8).map(|v| v as f32).collect();
        let a = expand_conv(&plain, &kernel).unwrap().to_dense();
        let b = expand_conv(&shuffled, &kernel).unwrap().to_dense();
        assert_eq!(
            b,
            vec![a[0].clone(), a[2].clone(), a[1].clone(), a[3].clone()]
        );
    }

    #[test]
    fn single_group_matches_plain_conv() {
        let g1 = ConvGeometry::new((4, 4, 2), 3, [3, 3], [1, 1], [1; 4], 1, false).unwrap();
        let kernel: Vec<f32> = (0..g1.kernel_len()).map(|i| i as f32 - 20.0).collect();
        assert_eq!(
            expand_grouped_conv(&g1, &kernel).unwrap(),
            expand_conv(&g1, &kernel).unwrap()
        );
    }

    #[test]
    fn pool_blocks() {
        let g = PoolGeometry::new((4, 4, 1), [2, 2], None, [0; 4]).unwrap();
        let block = expand_pool(&g);
        assert!(block.weights.iter().all(|&w| w == 0.005));
        let g = PoolGeometry::new((5, 5, 1), [3, 3], Some([1, 1]), [0; 4]).unwrap();
        let block = expand_pool(&g);
        assert!((0..block.n_rows).all(|r| block.row(r).count() == 9));
        let g = PoolGeometry::new((2, 3, 2), [1, 1], None, [0; 4]).unwrap();
        let dense = expand_pool(&g).to_dense();
        for (r, row) in dense.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                assert_eq!(w, if r == c { 0.01 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dense_chain_has_block_shift_layout() {
        let model = generate_synthetic(3, Template::TinyMlp).unwrap();
        let graph = assemble(&model).unwrap();
        assert_eq!(graph.node_count(), 18);
        let dense = graph.to_dense();
        let blocks: Vec<_> = graph.layers().iter().map(|b| b.nodes.clone()).collect();
        for (r, row) in dense.iter().enumerate() {
            let rb = blocks.iter().position(|b| b.contains(&r)).unwrap();
            for (c, &w) in row.iter().enumerate() {
                let cb = blocks.iter().position(|b| b.contains(&c)).unwrap();
                if w != 0.0 {
                    assert_eq!(rb, cb + 1, "edge outside the sub-diagonal band");
                }
            }
        }
        let fc2 = model.manifest.layer_index("fc2").unwrap();
        let w = model.weights(fc2).unwrap();
        // fc2 rows are nodes 10..15, its inputs fc1 nodes 4..10.
        assert_eq!(dense[10][4], f64::from(w[0]));
        assert_eq!(dense[14][9], f64::from(w[4 * 6 + 5]));
    }

    #[test]
    fn residual_edges_fall_below_the_band() {
        let model = generate_synthetic(1, Template::ResidualCnn).unwrap();
        let graph = assemble(&model).unwrap();
        let block_of = |v: usize| {
            graph
                .layers()
                .iter()
                .position(|b| b.nodes.contains(&v))
                .unwrap()
        };
        let far = graph
            .edges()
            .filter(|&(r, c, _)| block_of(r) > block_of(c) + 1)
            .count();
        assert!(far > 0);
        let add = graph.layer_block("res").unwrap();
        assert_eq!(add.kind, LayerKind::Add);
        for v in add.nodes.clone() {
            let row: Vec<f64> = graph.row_range(v).map(|k| graph.weights()[k]).collect();
            assert_eq!(row, vec![1.0, 1.0]);
        }
    }

    #[test]
    fn shared_parameters_carry_identical_weights() {
        for template in Template::ALL {
            let model = generate_synthetic(5, template).unwrap();
            let graph = assemble(&model).unwrap();
            let mut seen = std::collections::HashMap::new();
            for (k, (_, _, w)) in graph.edges().enumerate() {
                let p = graph.provenance(k);
                if p.param == NO_PARAM {
                    continue;
                }
                let prev = seen.entry(p).or_insert(w);
                assert_eq!(prev.to_bits(), w.to_bits());
            }
        }
    }
}
