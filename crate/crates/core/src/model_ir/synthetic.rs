//! Seeded synthetic networks used as desk-scale stand-ins for trained CNNs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Blob, ConvGeometry, LayerKind, LayerOp, LayerSpec, Model, NetworkManifest, PoolGeometry,
    TensorShape, WeightStore,
};
use crate::error::{Error, Result};
use crate::graph_builder::{assemble, NO_PARAM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Template {
    /// `4 -> dense 6 -> relu -> dense 5 -> relu -> dense 3 -> softmax` (18 nodes).
    TinyMlp,
    /// Conv, batch norm, max and average pooling, dense; 1000 output classes.
    TinyCnn,
    /// Small CNN with one residual `add` block.
    ResidualCnn,
    /// Small CNN with a grouped convolution followed by channel shuffle.
    GroupedCnn,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::TinyMlp,
        Template::TinyCnn,
        Template::ResidualCnn,
        Template::GroupedCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::TinyMlp => "tiny_mlp",
            Template::TinyCnn => "tiny_cnn",
            Template::ResidualCnn => "residual_cnn",
            Template::GroupedCnn => "grouped_cnn",
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTemplate(s.to_string()))
    }
}

/// Deterministic network for `(seed, template)`.
pub fn generate_synthetic(seed: u64, template: Template) -> Result<Model> {
    let mut b = Builder::new(seed);
    match template {
        Template::TinyMlp => {
            b.input("x", TensorShape::vector(4));
            b.dense("fc1", "x", 6);
            b.unary("relu1", LayerKind::Relu, "fc1");
            b.dense("fc2", "relu1", 5);
            b.unary("relu2", LayerKind::Relu, "fc2");
            b.dense("fc3", "relu2", 3);
            b.unary("prob", LayerKind::Softmax, "fc3");
        }
        Template::TinyCnn => {
            b.input("x", TensorShape::image(10, 10, 3));
            b.conv("conv1", "x", 6, [3, 3], [1, 1], [1; 4], 1, false);
            b.batch_norm("bn1", "conv1");
            b.unary("relu1", LayerKind::Relu, "bn1");
            b.pool("pool1", "relu1", true, [2, 2], None);
            b.conv("conv2", "pool1", 8, [3, 3], [1, 1], [0; 4], 1, false);
            b.unary("relu2", LayerKind::Relu, "conv2");
            b.pool("pool2", "relu2", false, [2, 2], Some([1, 1]));
            b.dense("fc1", "pool2", 16);
            b.unary("relu3", LayerKind::Relu, "fc1");
            b.dense("fc2", "relu3", 1000);
            b.unary("prob", LayerKind::Softmax, "fc2");
        }
        Template::ResidualCnn => {
            b.input("x", TensorShape::image(6, 6, 2));
            b.conv("conv1", "x", 4, [3, 3], [1, 1], [1; 4], 1, false);
            b.unary("relu1", LayerKind::Relu, "conv1");
            b.conv("conv2", "relu1", 4, [3, 3], [1, 1], [1; 4], 1, false);
            b.batch_norm("bn2", "conv2");
            b.add("res", &["bn2", "relu1"]);
            b.unary("relu2", LayerKind::Relu, "res");
            b.pool("pool", "relu2", true, [2, 2], None);
            b.dense("fc", "pool", 10);
            b.unary("prob", LayerKind::Softmax, "fc");
        }
        Template::GroupedCnn => {
            b.input("x", TensorShape::image(6, 6, 4));
            b.conv("gconv1", "x", 4, [3, 3], [1, 1], [1; 4], 2, true);
            b.unary("relu1", LayerKind::Relu, "gconv1");
            b.conv("conv2", "relu1", 4, [1, 1], [1, 1], [0; 4], 1, false);
            b.unary("relu2", LayerKind::Relu, "conv2");
            b.pool("pool", "relu2", false, [2, 2], None);
            b.dense("fc", "pool", 10);
            b.unary("prob", LayerKind::Softmax, "fc");
        }
    }
    b.finish()
}

struct Builder {
    rng: ChaCha8Rng,
    input_shape: Option<TensorShape>,
    layers: Vec<LayerSpec>,
    store: WeightStore,
    shapes: HashMap<String, TensorShape>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            input_shape: None,
            layers: Vec::new(),
            store: WeightStore::default(),
            shapes: HashMap::new(),
        }
    }

    fn push(&mut self, layer: LayerSpec, shape: TensorShape) {
        self.shapes.insert(layer.id.clone(), shape);
        self.layers.push(layer);
    }

    fn blob(&mut self, id: String, shape: Vec<usize>, bound: f32) -> String {
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.store
            .insert(id.clone(), Blob::new(shape, data).unwrap())
            .unwrap();
        id
    }

    fn input(&mut self, id: &str, shape: TensorShape) {
        self.input_shape = Some(shape.clone());
        self.push(LayerSpec::new(id, LayerKind::Input, &[]), shape);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        input: &str,
        out_c: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 4],
        groups: usize,
        shuffle: bool,
    ) {
        let hwc = self.shapes[input].hwc().unwrap();
        let g = ConvGeometry::new(hwc, out_c, kernel, stride, padding, groups, shuffle).unwrap();
        let kind = if groups > 1 {
            LayerKind::GroupedConv
        } else {
            LayerKind::Conv
        };
        let mut layer = LayerSpec::new(id, kind, &[input]);
        layer.params.kernel = Some(kernel);
        layer.params.out_channels = Some(out_c);
        layer.params.stride = Some(stride);
        layer.params.padding = Some(padding);
        if groups > 1 {
            layer.params.groups = Some(groups);
            layer.params.shuffle = Some(shuffle);
        }
        let k = kernel[0] * kernel[1];
        let fan_in = k * g.in_c_per_group();
        let fan_out = k * out_c;
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let dims = vec![out_c, kernel[0], kernel[1], g.in_c_per_group()];
        layer.weight_ref = Some(self.blob(format!("{id}_w"), dims, bound));
        layer.params.bias_ref = Some(self.blob(format!("{id}_b"), vec![out_c], 0.1));
        self.push(layer, TensorShape::image(g.out_h, g.out_w, out_c));
    }

    fn dense(&mut self, id: &str, input: &str, units: usize) {
        let inputs = self.shapes[input].len();
        let mut layer = LayerSpec::new(id, LayerKind::Dense, &[input]);
        layer.params.units = Some(units);
        let bound = (6.0 / (inputs + units) as f32).sqrt();
        layer.weight_ref = Some(self.blob(format!("{id}_w"), vec![units, inputs], bound));
        layer.params.bias_ref = Some(self.blob(format!("{id}_b"), vec![units], 0.1));
        self.push(layer, TensorShape::vector(units));
    }

    fn pool(
        &mut self,
        id: &str,
        input: &str,
        max: bool,
        window: [usize; 2],
        stride: Option<[usize; 2]>,
    ) {
        let hwc = self.shapes[input].hwc().unwrap();
        let g = PoolGeometry::new(hwc, window, stride, [0; 4]).unwrap();
        let kind = if max {
            LayerKind::MaxPool
        } else {
            LayerKind::AvgPool
        };
        let mut layer = LayerSpec::new(id, kind, &[input]);
        layer.params.window = Some(window);
        layer.params.stride = stride;
        self.push(layer, TensorShape::image(g.out_h, g.out_w, g.channels));
    }

    fn batch_norm(&mut self, id: &str, input: &str) {
        let shape = self.shapes[input].clone();
        let c = shape.channels();
        let mut data = Vec::with_capacity(4 * c);
        data.extend((0..c).map(|_| self.rng.random_range(0.5f32..1.5)));
        data.extend((0..c).map(|_| self.rng.random_range(-0.1f32..0.1)));
        data.extend((0..c).map(|_| self.rng.random_range(-0.1f32..0.1)));
        data.extend((0..c).map(|_| self.rng.random_range(0.5f32..1.5)));
        let blob_id = format!("{id}_stats");
        self.store
            .insert(blob_id.clone(), Blob::new(vec![4, c], data).unwrap())
            .unwrap();
        let mut layer = LayerSpec::new(id, LayerKind::BatchNorm, &[input]);
        layer.weight_ref = Some(blob_id);
        self.push(layer, shape);
    }

    fn unary(&mut self, id: &str, kind: LayerKind, input: &str) {
        let shape = self.shapes[input].clone();
        self.push(LayerSpec::new(id, kind, &[input]), shape);
    }

    fn add(&mut self, id: &str, inputs: &[&str]) {
        let shape = self.shapes[inputs[0]].clone();
        self.push(LayerSpec::new(id, LayerKind::Add, inputs), shape);
    }

    fn finish(self) -> Result<Model> {
        let manifest = NetworkManifest::new(self.input_shape.unwrap(), self.layers, &self.store)?;
        Ok(Model::new(manifest, self.store))
    }
}

/// Rewrites a network into a structurally balanced one.
///
/// All weights take their absolute value, then every node receives a sign so
/// that each adjacency entry becomes `sign_i * |w_ij| * sign_j`. Signs are
/// constant per convolution channel (so kernels stay shared) and equal across
/// pooling and add edges (which are fixed positive). Returns the new model and
/// the per-node gauge signs, which form an exact balancing signature.
pub fn gauge_all_positive(model: &Model, seed: u64) -> Result<(Model, Vec<i8>)> {
    let manifest = &model.manifest;
    let layout = manifest.layout();
    let graph = assemble(model)?;
    let n = graph.node_count();
    let mut classes = UnionFind::new(n);

    for (edge, (row, col, _)) in graph.edges().enumerate() {
        if graph.provenance(edge).param == NO_PARAM {
            classes.union(row, col);
        }
    }
    for &(layer, _) in layout.owners() {
        if let LayerOp::Conv(g) = manifest.op(layer) {
            let input = manifest.inputs_of(layer)[0];
            union_channels(
                &mut classes,
                layout.elements(input),
                g.in_h * g.in_w,
                g.in_c,
            );
            union_channels(
                &mut classes,
                layout.elements(layer),
                g.out_h * g.out_w,
                g.out_c,
            );
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut root_sign: HashMap<usize, i8> = HashMap::new();
    let signs: Vec<i8> = (0..n)
        .map(|v| {
            let root = classes.find(v);
            *root_sign
                .entry(root)
                .or_insert_with(|| if rng.random::<bool>() { 1 } else { -1 })
        })
        .collect();

    let mut store = model.store.clone();
    for &(layer, _) in layout.owners() {
        let spec = manifest.layer(layer);
        let input = manifest.inputs_of(layer).first().copied();
        let out_map = layout.elements(layer);
        match *manifest.op(layer) {
            LayerOp::Conv(g) => {
                let in_map = layout.elements(input.unwrap());
                let cin_g = g.in_c_per_group();
                let mut filter_sign = vec![0i8; g.out_c];
                for position in 0..g.out_c {
                    filter_sign[g.filter_at(position)] = signs[out_map.node(position)];
                }
                let w = store.get_mut(spec.weight_ref.as_deref().unwrap()).unwrap();
                let per_filter = g.kernel_h * g.kernel_w * cin_g;
                for (idx, value) in w.data.iter_mut().enumerate() {
                    let filter = idx / per_filter;
                    let ci = idx % cin_g;
                    let group = filter / g.out_c_per_group();
                    let in_sign = signs[in_map.node(group * cin_g + ci)];
                    *value = value.abs() * f32::from(filter_sign[filter] * in_sign);
                }
                if let Some(bias) = spec.params.bias_ref.as_deref() {
                    for (f, b) in store.get_mut(bias).unwrap().data.iter_mut().enumerate() {
                        *b = b.abs() * f32::from(filter_sign[f]);
                    }
                }
            }
            LayerOp::Dense { inputs, .. } => {
                let in_map = layout.elements(input.unwrap());
                let w = store.get_mut(spec.weight_ref.as_deref().unwrap()).unwrap();
                for (idx, value) in w.data.iter_mut().enumerate() {
                    let (o, i) = (idx / inputs, idx % inputs);
                    let s = signs[out_map.node(o)] * signs[in_map.node(i)];
                    *value = value.abs() * f32::from(s);
                }
                if let Some(bias) = spec.params.bias_ref.as_deref() {
                    for (o, b) in store.get_mut(bias).unwrap().data.iter_mut().enumerate() {
                        *b = b.abs() * f32::from(signs[out_map.node(o)]);
                    }
                }
            }
            _ => {}
        }
    }
    // Batch-norm scale must stay positive for the activation to be monotone.
    for (idx, spec) in manifest.layers().iter().enumerate() {
        if let LayerOp::BatchNorm { channels, .. } = *manifest.op(idx) {
            let stats = store.get_mut(spec.weight_ref.as_deref().unwrap()).unwrap();
            for gamma in &mut stats.data[..channels] {
                *gamma = gamma.abs();
            }
        }
    }
    Ok((model.with_store(store)?, signs))
}

fn union_channels(
    classes: &mut UnionFind,
    map: &super::ElementMap,
    pixels: usize,
    channels: usize,
) {
    for c in 0..channels {
        let first = map.node(c);
        for p in 1..pixels {
            classes.union(first, map.node(p * channels + c));
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest_json(model: &Model) -> String {
        serde_json::to_string(&model.manifest.to_document()).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        for template in Template::ALL {
            let a = generate_synthetic(1, template).unwrap();
            let b = generate_synthetic(1, template).unwrap();
            assert_eq!(manifest_json(&a), manifest_json(&b));
            assert_eq!(a.store, b.store);
        }
        let c = generate_synthetic(2, Template::TinyMlp).unwrap();
        assert_ne!(
            generate_synthetic(1, Template::TinyMlp).unwrap().store,
            c.store
        );
    }

    #[test]
    fn residual_template_has_two_input_add() {
        let m = generate_synthetic(1, Template::ResidualCnn).unwrap();
        let adds: Vec<_> = m
            .manifest
            .layers()
            .iter()
            .filter(|l| l.kind == LayerKind::Add)
            .collect();
        assert!(!adds.is_empty());
        assert!(adds.iter().all(|l| l.inputs.len() == 2));
    }

    #[test]
    fn grouped_template_channels_divide_groups() {
        let m = generate_synthetic(2, Template::GroupedCnn).unwrap();
        let idx = m.manifest.layer_index("gconv1").unwrap();
        let LayerOp::Conv(g) = *m.manifest.op(idx) else {
            panic!("not a conv")
        };
        assert_eq!(g.groups, 2);
        assert!(g.shuffle);
        assert_eq!(g.in_c % g.groups, 0);
        assert_eq!(g.out_c % g.groups, 0);
    }

    #[test]
    fn tiny_cnn_covers_required_kinds() {
        let m = generate_synthetic(1, Template::TinyCnn).unwrap();
        let kinds: Vec<LayerKind> = m.manifest.layers().iter().map(|l| l.kind).collect();
        for k in [
            LayerKind::Conv,
            LayerKind::MaxPool,
            LayerKind::AvgPool,
            LayerKind::Relu,
            LayerKind::BatchNorm,
            LayerKind::Dense,
            LayerKind::Softmax,
        ] {
            assert!(kinds.contains(&k), "missing {k:?}");
        }
        assert_eq!(m.manifest.output_size(), 1000);
    }

    #[test]
    fn unknown_template_name() {
        assert!(matches!(
            "vgg".parse::<Template>(),
            Err(Error::UnknownTemplate(_))
        ));
        assert_eq!("tiny_cnn".parse::<Template>().unwrap(), Template::TinyCnn);
    }

    #[test]
    fn gauged_network_is_balanced_by_its_signs() {
        for template in Template::ALL {
            let base = generate_synthetic(4, template).unwrap();
            let (gauged, signs) = gauge_all_positive(&base, 9).unwrap();
            let graph = assemble(&gauged).unwrap();
            for (row, col, w) in graph.edges() {
                let s = f64::from(signs[row] * signs[col]);
                assert!(s * w > 0.0, "{template}: edge {col}->{row} weight {w}");
            }
        }
    }
}
