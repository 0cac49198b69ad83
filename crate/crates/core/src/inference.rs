//! Forward evaluation, active subnetworks and the Jacobian sign check.
//!
//! Every graph node has one state `z`: the value at the end of the chain of
//! element-wise layers applied to it (softmax excluded). A node is inactive
//! when a ReLU on that chain receives a non-positive input.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::SignedSparseGraph;
use crate::model_ir::{read_blob, LayerKind, LayerOp, Model, TensorShape};

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    /// Output tensor of every layer, indexed like the manifest layers.
    pub outputs: Vec<Vec<f64>>,
    /// State of every graph node.
    pub node_states: Vec<f64>,
    /// Activity indicator of every graph node.
    pub active: Vec<bool>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    /// True when several outputs share the maximal logit; the lowest index wins.
    pub predicted_tie: bool,
}

/// Reads an input tensor stored in the blob format.
pub fn load_input(path: impl AsRef<Path>, shape: &TensorShape) -> Result<Vec<f64>> {
    let blob = read_blob(path)?;
    if blob.data.len() != shape.len() {
        return Err(Error::BlobLength {
            blob: "input".into(),
            expected: shape.len(),
            actual: blob.data.len(),
        });
    }
    Ok(blob.data.iter().map(|&v| f64::from(v)).collect())
}

fn as_f64(values: Option<&[f32]>) -> Vec<f64> {
    values
        .map(|v| v.iter().map(|&x| f64::from(x)).collect())
        .unwrap_or_default()
}

/// Evaluates one layer from its input tensors.
fn eval_layer(model: &Model, layer: usize, inputs: &[&[f64]]) -> Vec<f64> {
    let manifest = &model.manifest;
    match manifest.op(layer) {
        LayerOp::Input => inputs[0].to_vec(),
        LayerOp::Conv(g) => {
            let w = model.weights(layer).expect("validated weights");
            let bias = model.bias(layer);
            let x = inputs[0];
            let cin_g = g.in_c_per_group();
            let cout_g = g.out_c_per_group();
            let mut out = Vec::with_capacity(g.out_len());
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for position in 0..g.out_c {
                        let filter = g.filter_at(position);
                        let first = (filter / cout_g) * cin_g;
                        let mut acc = bias.map_or(0.0, |b| f64::from(b[filter]));
                        for ky in 0..g.kernel_h {
                            let iy = (oy * g.stride_h + ky) as isize - g.pad_top as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            for kx in 0..g.kernel_w {
                                let ix = (ox * g.stride_w + kx) as isize - g.pad_left as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                let pixel = (iy as usize * g.in_w + ix as usize) * g.in_c + first;
                                for ci in 0..cin_g {
                                    acc += f64::from(w[g.param_index(filter, ky, kx, ci)])
                                        * x[pixel + ci];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
            out
        }
        LayerOp::Dense {
            inputs: n_in,
            units,
        } => {
            let w = model.weights(layer).expect("validated weights");
            let bias = model.bias(layer);
            let x = inputs[0];
            (0..*units)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let dot: f64 = row.iter().zip(x).map(|(&a, &b)| f64::from(a) * b).sum();
                    dot + bias.map_or(0.0, |b| f64::from(b[o]))
                })
                .collect()
        }
        LayerOp::Pool { geometry: g, max } => {
            let x = inputs[0];
            let mut out = Vec::with_capacity(g.out_len());
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for c in 0..g.channels {
                        let mut best = f64::NEG_INFINITY;
                        let mut sum = 0.0;
                        let mut count = 0usize;
                        for ky in 0..g.window_h {
                            let iy = (oy * g.stride_h + ky) as isize - g.pad_top as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            for kx in 0..g.window_w {
                                let ix = (ox * g.stride_w + kx) as isize - g.pad_left as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                let v = x[(iy as usize * g.in_w + ix as usize) * g.channels + c];
                                best = best.max(v);
                                sum += v;
                                count += 1;
                            }
                        }
                        out.push(match (count, *max) {
                            (0, _) => 0.0,
                            (_, true) => best,
                            (_, false) => sum / count as f64,
                        });
                    }
                }
            }
            out
        }
        LayerOp::Relu => inputs[0].iter().map(|&v| v.max(0.0)).collect(),
        LayerOp::BatchNorm { channels, epsilon } => {
            let stats = as_f64(model.weights(layer));
            let c = *channels;
            inputs[0]
                .iter()
                .enumerate()
                .map(|(e, &q)| {
                    let k = e % c;
                    let (gamma, beta, mean, var) =
                        (stats[k], stats[c + k], stats[2 * c + k], stats[3 * c + k]);
                    gamma * (q - mean) / (var + epsilon).sqrt() + beta
                })
                .collect()
        }
        LayerOp::Lrn { channels, params } => {
            let c = *channels;
            let half = params.size / 2;
            let x = inputs[0];
            let mut out = vec![0.0; x.len()];
            for (pixel, chunk) in x.chunks(c).enumerate() {
                for k in 0..c {
                    let lo = k.saturating_sub(half);
                    let hi = (k + half).min(c - 1);
                    let ss: f64 = chunk[lo..=hi].iter().map(|v| v * v).sum();
                    let scale = params.k + params.alpha / params.size as f64 * ss;
                    out[pixel * c + k] = chunk[k] / scale.powf(params.beta);
                }
            }
            out
        }
        LayerOp::Softmax => softmax(inputs[0]),
        LayerOp::Dropout => inputs[0].to_vec(),
        LayerOp::Add => {
            let mut out = inputs[0].to_vec();
            for other in &inputs[1..] {
                out.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += b);
            }
            out
        }
        LayerOp::Concat => {
            let srcs = manifest.inputs_of(layer);
            if manifest.shape(layer).rank() == 1 {
                return inputs.concat();
            }
            let pixels = manifest.shape(layer).len() / manifest.shape(layer).channels();
            let mut out = Vec::with_capacity(manifest.shape(layer).len());
            for p in 0..pixels {
                for (src, x) in srcs.iter().zip(inputs) {
                    let c = manifest.shape(*src).channels();
                    out.extend_from_slice(&x[p * c..(p + 1) * c]);
                }
            }
            out
        }
    }
}

pub fn softmax(q: &[f64]) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = q.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / total).collect()
}

/// Runs the network on `x` (flattened, channels-last).
pub fn forward(model: &Model, x: &[f64]) -> Result<ActivationTrace> {
    let manifest = &model.manifest;
    let input_len = manifest.input_shape().len();
    if x.len() != input_len {
        return Err(Error::shape(
            &manifest.layer(manifest.input_layer()).id,
            format!("input has {} values, expected {input_len}", x.len()),
        ));
    }
    let layout = manifest.layout();
    let mut outputs: Vec<Vec<f64>> = vec![Vec::new(); manifest.layers().len()];
    let mut node_states = vec![0.0; layout.node_count()];
    let mut active = vec![true; layout.node_count()];

    for &layer in manifest.order() {
        let srcs = manifest.inputs_of(layer);
        let out = if srcs.is_empty() {
            x.to_vec()
        } else {
            let ins: Vec<&[f64]> = srcs.iter().map(|&s| outputs[s].as_slice()).collect();
            eval_layer(model, layer, &ins)
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: manifest.layer(layer).id.clone(),
            });
        }
        let kind = manifest.layer(layer).kind;
        if kind != LayerKind::Softmax {
            let map = layout.elements(layer);
            for (e, &v) in out.iter().enumerate() {
                node_states[map.node(e)] = v;
            }
            if kind == LayerKind::Relu {
                for (e, &q) in outputs[srcs[0]].iter().enumerate() {
                    if q <= 0.0 {
                        active[map.node(e)] = false;
                    }
                }
            }
        }
        outputs[layer] = out;
    }

    let logits = outputs[manifest.logits_layer()].clone();
    let probabilities = if manifest.layer(manifest.sink()).kind == LayerKind::Softmax {
        outputs[manifest.sink()].clone()
    } else {
        softmax(&logits)
    };
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let predicted_class = logits.iter().position(|&v| v == max).unwrap_or(0);
    let predicted_tie = logits.iter().filter(|&&v| v == max).count() > 1;
    Ok(ActivationTrace {
        outputs,
        node_states,
        active,
        logits,
        probabilities,
        predicted_class,
        predicted_tie,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSubgraph {
    pub graph: SignedSparseGraph,
    /// Index of the retained output node in `graph`.
    pub output_node: usize,
    /// Index of the retained output node in the full graph.
    pub output_origin: usize,
}

/// Restricts `graph` to the part of the network that carries signal for the
/// traced input: active nodes, max-pool argmax edges, and only nodes with a
/// directed path to the predicted output.
pub fn extract_active(
    model: &Model,
    graph: &SignedSparseGraph,
    trace: &ActivationTrace,
) -> Result<ActiveSubgraph> {
    let layout = model.manifest.layout();
    let n = graph.node_count();
    if n != layout.node_count() || trace.active.len() != n {
        return Err(Error::InvalidArgument(format!(
            "graph has {n} nodes, model layout has {}",
            layout.node_count()
        )));
    }
    let output = layout
        .elements(model.manifest.logits_layer())
        .node(trace.predicted_class);
    let outputs: Vec<usize> = layout
        .elements(model.manifest.logits_layer())
        .nodes()
        .collect();

    let mut candidate = trace.active.clone();
    for &o in &outputs {
        candidate[o] = o == output;
    }
    let z = &trace.node_states;
    let mut edge_ok = vec![true; graph.edge_count()];
    for block in graph
        .layers()
        .iter()
        .filter(|b| b.kind == LayerKind::MaxPool)
    {
        for row in block.nodes.clone() {
            let range = graph.row_range(row);
            let best = range
                .clone()
                .map(|k| z[graph.cols()[k] as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            for k in range {
                edge_ok[k] = z[graph.cols()[k] as usize] == best;
            }
        }
    }

    let mut reached = vec![false; n];
    let mut queue = VecDeque::from([output]);
    reached[output] = true;
    while let Some(i) = queue.pop_front() {
        for k in graph.row_range(i) {
            let j = graph.cols()[k] as usize;
            if edge_ok[k] && candidate[j] && !reached[j] {
                reached[j] = true;
                queue.push_back(j);
            }
        }
    }
    let cols = graph.cols();
    let row_of: Vec<usize> = (0..n)
        .flat_map(|i| std::iter::repeat_n(i, graph.row_range(i).len()))
        .collect();
    let sub = graph.subgraph(&reached, |k| {
        edge_ok[k] && reached[row_of[k]] && reached[cols[k] as usize]
    })?;
    let output_node = reached[..output].iter().filter(|&&r| r).count();
    Ok(ActiveSubgraph {
        graph: sub,
        output_node,
        output_origin: output,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianConfig {
    pub step: f64,
    pub tolerance: f64,
    pub max_attempts: usize,
    /// Half-width of the uniform jitter added when resampling an input.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for JacobianConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-6,
            max_attempts: 100,
            jitter: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignViolation {
    pub layer: String,
    pub row: usize,
    pub col: usize,
    pub expected: i8,
    pub finite_difference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub checked_entries: usize,
    pub nonzero_entries: usize,
    pub violations: Vec<SignViolation>,
    /// Layers whose normalization couples nodes within the layer.
    pub skipped_layers: Vec<String>,
    /// Number of inputs tried, including the accepted one.
    pub attempts: usize,
    pub input: Vec<f64>,
}

impl JacobianReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Element-wise layers applied in place to `layer`'s nodes, excluding softmax.
fn alias_chain(model: &Model, layer: usize) -> Vec<usize> {
    let manifest = &model.manifest;
    let mut chain = Vec::new();
    let mut current = layer;
    loop {
        match manifest.consumers_of(current) {
            [next]
                if manifest.layer(*next).kind.is_elementwise()
                    && manifest.layer(*next).kind != LayerKind::Softmax =>
            {
                chain.push(*next);
                current = *next;
            }
            _ => return chain,
        }
    }
}

fn bn_scale(model: &Model, layer: usize) -> f64 {
    match model.manifest.op(layer) {
        LayerOp::BatchNorm { channels, epsilon } => {
            let stats = as_f64(model.weights(layer));
            (0..*channels)
                .map(|k| stats[k].abs() / (stats[3 * channels + k] + epsilon).sqrt())
                .fold(0.0, f64::max)
        }
        _ => 1.0,
    }
}

/// Checks that no ReLU input or max-pool window of the traced input lies
/// within reach of a finite-difference step.
fn kink_free(model: &Model, graph: &SignedSparseGraph, trace: &ActivationTrace, h: f64) -> bool {
    let manifest = &model.manifest;
    let layout = manifest.layout();
    for &(owner, ref nodes) in layout.owners() {
        let mut scale = 1.0;
        for layer in alias_chain(model, owner) {
            scale *= bn_scale(model, layer);
            if manifest.layer(layer).kind != LayerKind::Relu {
                continue;
            }
            let pre = &trace.outputs[manifest.inputs_of(layer)[0]];
            for (e, &q) in pre.iter().enumerate() {
                let row = nodes.start + e;
                let max_w = graph
                    .row_range(row)
                    .map(|k| graph.weights()[k].abs())
                    .fold(0.0, f64::max);
                let margin = 4.0 * h * max_w.max(1.0) * scale;
                if q.abs() <= margin {
                    return false;
                }
            }
        }
        if let LayerOp::Pool { max: true, .. } = manifest.op(owner) {
            for row in nodes.clone() {
                let mut vals: Vec<f64> = graph
                    .row_range(row)
                    .map(|k| trace.node_states[graph.cols()[k] as usize])
                    .collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals.len() > 1 {
                    let gap = vals[0] - vals[1];
                    if gap != 0.0 && gap <= 4.0 * h {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Compares central finite differences of every layer-to-layer map against
/// `sgn(diag(I(z)) A)`, with non-argmax max-pool edges counted as zero.
///
/// Expected nonzero entries must match in sign; expected zero entries must
/// stay within `tolerance`. When `x` sits near a ReLU kink or a max-pool
/// near-tie it is jittered and retried.
pub fn jacobian_sign_check(
    model: &Model,
    graph: &SignedSparseGraph,
    x: &[f64],
    config: &JacobianConfig,
) -> Result<JacobianReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut input = x.to_vec();
    let mut attempts = 1;
    let trace = loop {
        let trace = forward(model, &input)?;
        if kink_free(model, graph, &trace, config.step) {
            break trace;
        }
        if attempts >= config.max_attempts {
            return Err(Error::NoKinkFreePoint { attempts });
        }
        attempts += 1;
        input = x
            .iter()
            .map(|&v| v + rng.random_range(-config.jitter..=config.jitter))
            .collect();
    };

    let manifest = &model.manifest;
    let layout = manifest.layout();
    let h = config.step;
    let mut report = JacobianReport {
        checked_entries: 0,
        nonzero_entries: 0,
        violations: Vec::new(),
        skipped_layers: Vec::new(),
        attempts,
        input,
    };

    for &(owner, ref nodes) in layout.owners() {
        let srcs = manifest.inputs_of(owner);
        if srcs.is_empty() {
            continue;
        }
        let chain = alias_chain(model, owner);
        if chain
            .iter()
            .any(|&l| manifest.layer(l).kind == LayerKind::Lrn)
        {
            report.skipped_layers.push(manifest.layer(owner).id.clone());
            continue;
        }
        let is_max_pool = matches!(manifest.op(owner), LayerOp::Pool { max: true, .. });
        let evaluate = |ins: &[&[f64]]| {
            let mut out = eval_layer(model, owner, ins);
            for &l in &chain {
                out = eval_layer(model, l, &[&out]);
            }
            out
        };
        let window_max: Vec<f64> = nodes
            .clone()
            .map(|row| {
                graph
                    .row_range(row)
                    .map(|k| trace.node_states[graph.cols()[k] as usize])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();

        for (slot, &src) in srcs.iter().enumerate() {
            let map = layout.elements(src);
            for e in 0..map.len() {
                let col = map.node(e);
                let mut plus: Vec<Vec<f64>> =
                    srcs.iter().map(|&s| trace.outputs[s].clone()).collect();
                let mut minus = plus.clone();
                plus[slot][e] += h;
                minus[slot][e] -= h;
                let up = evaluate(&plus.iter().map(Vec::as_slice).collect::<Vec<_>>());
                let down = evaluate(&minus.iter().map(Vec::as_slice).collect::<Vec<_>>());
                for (r, row) in nodes.clone().enumerate() {
                    let d = (up[r] - down[r]) / (2.0 * h);
                    let a = graph.get(row, col);
                    let masked = is_max_pool && trace.node_states[col] != window_max[r];
                    let expected = if !trace.active[row] || masked || a == 0.0 {
                        0
                    } else if a > 0.0 {
                        1
                    } else {
                        -1
                    };
                    report.checked_entries += 1;
                    let ok = if expected == 0 {
                        d.abs() <= config.tolerance
                    } else {
                        report.nonzero_entries += 1;
                        d * f64::from(expected) > 0.0
                    };
                    if !ok {
                        report.violations.push(SignViolation {
                            layer: manifest.layer(owner).id.clone(),
                            row,
                            col,
                            expected,
                            finite_difference: d,
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_builder::assemble;
    use crate::model_ir::synthetic::{generate_synthetic, Template};

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let model = generate_synthetic(0, Template::TinyMlp).unwrap();
        assert!(matches!(
            forward(&model, &[0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn relu_zeroes_negative_preactivations() {
        let model = generate_synthetic(0, Template::TinyMlp).unwrap();
        let trace = forward(&model, &[0.3, -1.0, 0.8, 0.1]).unwrap();
        let m = &model.manifest;
        let relu = m.layer_index("relu1").unwrap();
        let pre = &trace.outputs[m.layer_index("fc1").unwrap()];
        for (q, z) in pre.iter().zip(&trace.outputs[relu]) {
            assert_eq!(*z, q.max(0.0));
        }
        let fc1 = m
            .layout()
            .owned_range(m.layer_index("fc1").unwrap())
            .unwrap();
        for (e, node) in fc1.enumerate() {
            assert_eq!(trace.active[node], pre[e] > 0.0);
        }
        assert_eq!(trace.logits.len(), 3);
        assert!((trace.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn active_subgraph_keeps_one_output() {
        let model = generate_synthetic(4, Template::TinyMlp).unwrap();
        let graph = assemble(&model).unwrap();
        let trace = forward(&model, &[0.5, 0.2, -0.4, 0.9]).unwrap();
        let act = extract_active(&model, &graph, &trace).unwrap();
        let origin = act.graph.origin().unwrap();
        assert_eq!(origin[act.output_node], act.output_origin);
        let outputs = graph.layer_block("fc3").unwrap().nodes.clone();
        assert_eq!(origin.iter().filter(|o| outputs.contains(o)).count(), 1);
    }

    #[test]
    fn tiny_mlp_sign_law_holds() {
        let model = generate_synthetic(6, Template::TinyMlp).unwrap();
        let graph = assemble(&model).unwrap();
        let report = jacobian_sign_check(
            &model,
            &graph,
            &[0.4, -0.2, 0.7, 0.1],
            &JacobianConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.violations);
        assert_eq!(report.checked_entries, 4 * 6 + 6 * 5 + 5 * 3);
    }
}
