//! Randomized baselines: within-layer parameter shuffle (N1), global weight
//! shuffle (N2) and re-initialization (N3). Pooling weights are never touched.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_builder::{SignedSparseGraph, NO_PARAM};
use crate::model_ir::{Blob, LayerOp, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    XavierUniform,
    HeNormal,
}

impl InitScheme {
    pub fn name(self) -> &'static str {
        match self {
            InitScheme::XavierUniform => "xavier_uniform",
            InitScheme::HeNormal => "he_normal",
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xavier" | "xavier_uniform" => Ok(InitScheme::XavierUniform),
            "he" | "he_normal" => Ok(InitScheme::HeNormal),
            other => Err(Error::InvalidArgument(format!(
                "unknown init scheme `{other}` (expected xavier or he)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NullModelKind {
    N1,
    N2,
    N3,
}

impl FromStr for NullModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "n1" => Ok(NullModelKind::N1),
            "n2" => Ok(NullModelKind::N2),
            "n3" => Ok(NullModelKind::N3),
            other => Err(Error::InvalidArgument(format!(
                "unknown null model `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullModelSpec {
    pub kind: NullModelKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n3_init: Option<InitScheme>,
}

impl NullModelSpec {
    pub fn new(kind: NullModelKind, seed: u64, n3_init: Option<InitScheme>) -> Result<Self> {
        if (kind == NullModelKind::N3) != n3_init.is_some() {
            return Err(Error::InvalidArgument(
                "an init scheme is required for n3 and only for n3".into(),
            ));
        }
        Ok(Self {
            kind,
            seed,
            n3_init,
        })
    }
}

/// Applies `spec` and returns the randomized graph. N3 re-initializes the
/// model and rebuilds the graph from it.
pub fn generate_null(
    model: &Model,
    graph: &SignedSparseGraph,
    spec: &NullModelSpec,
) -> Result<SignedSparseGraph> {
    match spec.kind {
        NullModelKind::N1 => n1_shuffle(graph, spec.seed),
        NullModelKind::N2 => n2_shuffle(graph, spec.seed),
        NullModelKind::N3 => {
            let init = spec
                .n3_init
                .ok_or_else(|| Error::InvalidArgument("n3 needs an init scheme".into()))?;
            crate::graph_builder::assemble(&n3_reinit(model, init, spec.seed)?)
        }
    }
}

/// Layer block index of every edge, by the layer owning its target row.
fn edge_blocks(graph: &SignedSparseGraph) -> Result<Vec<usize>> {
    if graph.layers().is_empty() {
        return Err(Error::InvalidArgument(
            "graph carries no layer blocks".into(),
        ));
    }
    let mut blocks = vec![usize::MAX; graph.edge_count()];
    for (b, block) in graph.layers().iter().enumerate() {
        for row in block.nodes.clone() {
            for k in graph.row_range(row) {
                blocks[k] = b;
            }
        }
    }
    Ok(blocks)
}

/// Permutes each conv/dense layer's parameter values over its parameter
/// slots. Every Toeplitz copy of a slot receives the same new value.
pub fn n1_shuffle(graph: &SignedSparseGraph, seed: u64) -> Result<SignedSparseGraph> {
    let provenance = graph
        .provenance_slice()
        .ok_or(Error::MissingProvenance { edge: 0 })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = graph.weights().to_vec();
    if graph.layers().is_empty() {
        return Err(Error::InvalidArgument(
            "graph carries no layer blocks".into(),
        ));
    }

    for block in graph.layers() {
        if !block.kind.is_parametric() {
            continue;
        }
        let mut slot_of: HashMap<u32, usize> = HashMap::new();
        let mut slots: Vec<(u32, f64)> = Vec::new();
        let edges: Vec<usize> = block
            .nodes
            .clone()
            .flat_map(|r| graph.row_range(r))
            .collect();
        for &k in &edges {
            let param = provenance[k].param;
            if param == NO_PARAM {
                return Err(Error::MissingProvenance { edge: k });
            }
            slot_of.entry(param).or_insert_with(|| {
                slots.push((param, weights[k]));
                slots.len() - 1
            });
        }
        slots.sort_unstable_by_key(|s| s.0);
        for (i, s) in slots.iter().enumerate() {
            slot_of.insert(s.0, i);
        }
        let mut values: Vec<f64> = slots.iter().map(|s| s.1).collect();
        values.shuffle(&mut rng);
        for &k in &edges {
            weights[k] = values[slot_of[&provenance[k].param]];
        }
    }
    graph.with_weights(weights)
}

/// Permutes the conv/dense edge weights of the whole graph over the same
/// edge positions, destroying parameter sharing.
pub fn n2_shuffle(graph: &SignedSparseGraph, seed: u64) -> Result<SignedSparseGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = edge_blocks(graph)?;
    let layers = graph.layers();
    let positions: Vec<usize> = (0..graph.edge_count())
        .filter(|&k| blocks[k] != usize::MAX && layers[blocks[k]].kind.is_parametric())
        .collect();
    let mut values: Vec<f64> = positions.iter().map(|&k| graph.weights()[k]).collect();
    values.shuffle(&mut rng);
    let mut weights = graph.weights().to_vec();
    for (&k, v) in positions.iter().zip(values) {
        weights[k] = v;
    }
    graph.with_weights(weights)
}

/// `(fan_in, fan_out)` of a parametric layer; convolution fans count
/// kernel elements times the input channels of one group and times all
/// output channels.
pub fn fans(op: &LayerOp) -> Option<(usize, usize)> {
    match op {
        LayerOp::Conv(g) => {
            let k = g.kernel_h * g.kernel_w;
            Some((k * g.in_c_per_group(), k * g.out_c))
        }
        LayerOp::Dense { inputs, units } => Some((*inputs, *units)),
        _ => None,
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn draw_nonzero(rng: &mut ChaCha8Rng, dist: &impl Distribution<f64>) -> f32 {
    loop {
        let v = dist.sample(rng) as f32;
        if v != 0.0 {
            return v;
        }
    }
}

/// Redraws every conv/dense weight blob from `init` and zeroes their biases.
/// Batch-norm statistics are kept.
pub fn n3_reinit(model: &Model, init: InitScheme, seed: u64) -> Result<Model> {
    let manifest = &model.manifest;
    let mut store = model.store.clone();
    for &layer in manifest.order() {
        let Some((fan_in, fan_out)) = fans(manifest.op(layer)) else {
            continue;
        };
        let spec = manifest.layer(layer);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ layer_seed(&spec.id));
        if let Some(id) = &spec.weight_ref {
            let blob = store.get(id).expect("validated weight blob");
            let data: Vec<f32> = match init {
                InitScheme::XavierUniform => {
                    let bound = xavier_bound(fan_in, fan_out);
                    let dist = Uniform::new_inclusive(-bound, bound)
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    (0..blob.data.len())
                        .map(|_| draw_nonzero(&mut rng, &dist))
                        .collect()
                }
                InitScheme::HeNormal => {
                    let dist = Normal::new(0.0, he_std(fan_in))
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    (0..blob.data.len())
                        .map(|_| draw_nonzero(&mut rng, &dist))
                        .collect()
                }
            };
            let shape = blob.shape.clone();
            store.insert(id.clone(), Blob::new(shape, data)?)?;
        }
        if let Some(id) = &spec.params.bias_ref {
            let blob = store.get_mut(id).expect("validated bias blob");
            blob.data.iter_mut().for_each(|b| *b = 0.0);
        }
    }
    model.with_store(store)
}

fn layer_seed(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
