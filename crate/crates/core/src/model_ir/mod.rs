//! Network interchange representation.
//!
//! A model is a JSON manifest describing a DAG of layers plus one binary blob
//! per weight tensor. Tensors are channels-last: image activations have shape
//! `[height, width, channels]` and are vectorized in row-major raster order.
//!
//! Blob layouts expected by each weighted layer kind:
//!
//! | kind                    | `weight_ref` shape                      | `bias_ref` shape |
//! |-------------------------|-----------------------------------------|------------------|
//! | `conv`, `grouped_conv`  | `[out_c, kernel_h, kernel_w, in_c / g]` | `[out_c]`        |
//! | `dense`                 | `[units, inputs]`                       | `[units]`        |
//! | `batch_norm`            | `[4, channels]` rows gamma, beta, mean, var | -            |
//!
//! Element-wise layers (`relu`, `batch_norm`, `lrn`, `softmax`, `dropout`) and
//! `concat` do not own graph nodes: they act on the nodes of their input. Only
//! `input`, convolutions, `dense`, pooling and `add` layers own nodes.

mod layout;
mod store;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layout::{ElementMap, NodeLayout};
pub use store::{read_blob, write_blob, Blob, WeightStore, BLOB_MAGIC};

/// Default LRN parameters (alpha, beta, K, window).
pub const LRN_DEFAULTS: (f64, f64, f64, usize) = (1e-4, 0.75, 1.0, 5);
pub const BATCH_NORM_DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be nonempty and positive, got {dims:?}"
            )));
        }
        Ok(Self(dims))
    }

    pub fn vector(len: usize) -> Self {
        Self(vec![len.max(1)])
    }

    pub fn image(height: usize, width: usize, channels: usize) -> Self {
        Self(vec![height.max(1), width.max(1), channels.max(1)])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(height, width, channels)` for rank-3 shapes.
    pub fn hwc(&self) -> Option<(usize, usize, usize)> {
        match self.0[..] {
            [h, w, c] => Some((h, w, c)),
            _ => None,
        }
    }

    /// Channel count: last dim for images, every element for vectors.
    pub fn channels(&self) -> usize {
        match self.rank() {
            3 => self.0[2],
            _ => self.len(),
        }
    }
}

impl TryFrom<Vec<usize>> for TensorShape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        TensorShape::new(dims)
    }
}

impl From<TensorShape> for Vec<usize> {
    fn from(shape: TensorShape) -> Self {
        shape.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv,
    GroupedConv,
    Dense,
    MaxPool,
    AvgPool,
    Relu,
    BatchNorm,
    Lrn,
    Softmax,
    Add,
    Concat,
    Dropout,
}

impl LayerKind {
    pub const ALL: [LayerKind; 13] = [
        LayerKind::Input,
        LayerKind::Conv,
        LayerKind::GroupedConv,
        LayerKind::Dense,
        LayerKind::MaxPool,
        LayerKind::AvgPool,
        LayerKind::Relu,
        LayerKind::BatchNorm,
        LayerKind::Lrn,
        LayerKind::Softmax,
        LayerKind::Add,
        LayerKind::Concat,
        LayerKind::Dropout,
    ];

    /// Layers whose outputs are distinct graph nodes.
    pub fn owns_nodes(self) -> bool {
        matches!(
            self,
            LayerKind::Input
                | LayerKind::Conv
                | LayerKind::GroupedConv
                | LayerKind::Dense
                | LayerKind::MaxPool
                | LayerKind::AvgPool
                | LayerKind::Add
        )
    }

    /// Activations applied in place to the nodes of their single input.
    pub fn is_elementwise(self) -> bool {
        matches!(
            self,
            LayerKind::Relu
                | LayerKind::BatchNorm
                | LayerKind::Lrn
                | LayerKind::Softmax
                | LayerKind::Dropout
        )
    }

    /// Layers carrying trainable weight matrices that enter the adjacency matrix.
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::GroupedConv | LayerKind::Dense
        )
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::MaxPool | LayerKind::AvgPool)
    }

    pub fn code(self) -> u8 {
        LayerKind::ALL.iter().position(|&k| k == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        LayerKind::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv => "conv",
            LayerKind::GroupedConv => "grouped_conv",
            LayerKind::Dense => "dense",
            LayerKind::MaxPool => "max_pool",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Lrn => "lrn",
            LayerKind::Softmax => "softmax",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::Dropout => "dropout",
        }
    }
}

/// Kind-specific layer parameters. Unused fields stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<[usize; 2]>,
    /// `[top, bottom, left, right]` zero padding.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub params: LayerParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_ref: Option<String>,
}

impl LayerSpec {
    pub fn new(id: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: LayerParams::default(),
            weight_ref: None,
        }
    }
}

/// On-disk manifest document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDocument {
    pub input_shape: TensorShape,
    pub layers: Vec<LayerSpec>,
}

/// Geometry of a (possibly grouped) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub groups: usize,
    pub shuffle: bool,
}

impl ConvGeometry {
    pub fn new(
        in_shape: (usize, usize, usize),
        out_c: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 4],
        groups: usize,
        shuffle: bool,
    ) -> std::result::Result<Self, String> {
        let (in_h, in_w, in_c) = in_shape;
        if kernel.contains(&0) || stride.contains(&0) || out_c == 0 || groups == 0 {
            return Err("kernel, stride, out_channels and groups must be positive".into());
        }
        if in_c % groups != 0 || !out_c.is_multiple_of(groups) {
            return Err(format!(
                "channels ({in_c} in, {out_c} out) not divisible by {groups} groups"
            ));
        }
        let out_h = out_extent(in_h, padding[0] + padding[1], kernel[0], stride[0])
            .ok_or_else(|| format!("kernel height {} exceeds padded input", kernel[0]))?;
        let out_w = out_extent(in_w, padding[2] + padding[3], kernel[1], stride[1])
            .ok_or_else(|| format!("kernel width {} exceeds padded input", kernel[1]))?;
        Ok(Self {
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            kernel_h: kernel[0],
            kernel_w: kernel[1],
            stride_h: stride[0],
            stride_w: stride[1],
            pad_top: padding[0],
            pad_left: padding[2],
            groups,
            shuffle,
        })
    }

    pub fn in_c_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn out_c_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    pub fn kernel_len(&self) -> usize {
        self.out_c * self.kernel_h * self.kernel_w * self.in_c_per_group()
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    /// Filter index computed at output channel position `position`.
    ///
    /// With channel shuffle, position `j * g + i` holds channel `j` of group
    /// `i`; without it this is the identity.
    pub fn filter_at(&self, position: usize) -> usize {
        if !self.shuffle || self.groups == 1 {
            return position;
        }
        let g = self.groups;
        let m = self.out_c_per_group();
        (position % g) * m + position / g
    }

    /// Flat kernel index of `(filter, ky, kx, ci)`.
    pub fn param_index(&self, filter: usize, ky: usize, kx: usize, ci: usize) -> usize {
        ((filter * self.kernel_h + ky) * self.kernel_w + kx) * self.in_c_per_group() + ci
    }
}

/// Geometry of a depthwise pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl PoolGeometry {
    pub fn new(
        in_shape: (usize, usize, usize),
        window: [usize; 2],
        stride: Option<[usize; 2]>,
        padding: [usize; 4],
    ) -> std::result::Result<Self, String> {
        let (in_h, in_w, channels) = in_shape;
        if window.contains(&0) {
            return Err("pool window must be positive".into());
        }
        let stride = stride.unwrap_or(window);
        if stride.contains(&0) {
            return Err("pool stride must be positive".into());
        }
        let out_h = out_extent(in_h, padding[0] + padding[1], window[0], stride[0])
            .ok_or_else(|| format!("pool window {window:?} larger than padded input"))?;
        let out_w = out_extent(in_w, padding[2] + padding[3], window[1], stride[1])
            .ok_or_else(|| format!("pool window {window:?} larger than padded input"))?;
        Ok(Self {
            in_h,
            in_w,
            channels,
            out_h,
            out_w,
            window_h: window[0],
            window_w: window[1],
            stride_h: stride[0],
            stride_w: stride[1],
            pad_top: padding[0],
            pad_left: padding[2],
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w * self.channels
    }

    /// Fixed adjacency weight of every pooling edge: `0.01 / p` for a `p x p`
    /// window (geometric mean side for rectangular windows).
    pub fn edge_weight(&self) -> f64 {
        0.01 / ((self.window_h * self.window_w) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    pub alpha: f64,
    pub beta: f64,
    pub k: f64,
    pub size: usize,
}

/// Resolved per-layer operation with all shapes checked.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Input,
    Conv(ConvGeometry),
    Dense { inputs: usize, units: usize },
    Pool { geometry: PoolGeometry, max: bool },
    Relu,
    BatchNorm { channels: usize, epsilon: f64 },
    Lrn { channels: usize, params: LrnParams },
    Softmax,
    Dropout,
    Add,
    Concat,
}

fn out_extent(len: usize, pad: usize, window: usize, stride: usize) -> Option<usize> {
    let padded = len + pad;
    (padded >= window).then(|| (padded - window) / stride + 1)
}

/// A validated network: layers, shapes, topological order and node layout.
///
/// Immutable once constructed.
#[derive(Clone, Debug)]
pub struct NetworkManifest {
    input_shape: TensorShape,
    layers: Vec<LayerSpec>,
    index: HashMap<String, usize>,
    order: Vec<usize>,
    shapes: Vec<TensorShape>,
    ops: Vec<LayerOp>,
    consumers: Vec<Vec<usize>>,
    input_layer: usize,
    sink: usize,
    logits_layer: usize,
    layout: NodeLayout,
}

impl NetworkManifest {
    /// Validates a layer list against a weight store.
    pub fn new(
        input_shape: TensorShape,
        layers: Vec<LayerSpec>,
        store: &WeightStore,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            if layer.id.is_empty() {
                return Err(Error::schema("", "layer id must be nonempty"));
            }
            if index.insert(layer.id.clone(), i).is_some() {
                return Err(Error::schema(&layer.id, "duplicate layer id"));
            }
        }

        let inputs_of: Vec<Vec<usize>> = layers
            .iter()
            .map(|layer| {
                layer
                    .inputs
                    .iter()
                    .map(|name| {
                        index.get(name).copied().ok_or_else(|| {
                            Error::schema(&layer.id, format!("unknown input layer `{name}`"))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;

        let input_layers: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Input)
            .map(|(i, _)| i)
            .collect();
        let input_layer = match input_layers[..] {
            [one] => one,
            [] => return Err(Error::schema("", "manifest has no input layer")),
            [_, second, ..] => {
                return Err(Error::schema(
                    &layers[second].id,
                    "manifest has more than one input layer",
                ))
            }
        };

        for (i, layer) in layers.iter().enumerate() {
            let n_inputs = inputs_of[i].len();
            let arity_ok = match layer.kind {
                LayerKind::Input => n_inputs == 0,
                LayerKind::Add => n_inputs >= 2,
                LayerKind::Concat => n_inputs >= 1,
                _ => n_inputs == 1,
            };
            if !arity_ok {
                return Err(Error::schema(
                    &layer.id,
                    format!("{} layer cannot take {n_inputs} inputs", layer.kind.name()),
                ));
            }
            let distinct: BTreeSet<_> = inputs_of[i].iter().collect();
            if distinct.len() != n_inputs {
                return Err(Error::schema(&layer.id, "duplicate input reference"));
            }
        }

        let mut consumers = vec![Vec::new(); layers.len()];
        for (i, ins) in inputs_of.iter().enumerate() {
            for &src in ins {
                consumers[src].push(i);
            }
        }

        let order = topological_order(&layers, &inputs_of, &consumers)?;

        // Shapes and resolved ops, in dependency order.
        let mut shapes: Vec<Option<TensorShape>> = vec![None; layers.len()];
        let mut ops: Vec<Option<LayerOp>> = vec![None; layers.len()];
        for &i in &order {
            let in_shapes: Vec<&TensorShape> = inputs_of[i]
                .iter()
                .map(|&s| shapes[s].as_ref().expect("topological order"))
                .collect();
            let (op, shape) = resolve_layer(&layers[i], &input_shape, &in_shapes)?;
            check_weights(&layers[i], &op, store)?;
            shapes[i] = Some(shape);
            ops[i] = Some(op);
        }
        let shapes: Vec<TensorShape> = shapes.into_iter().map(Option::unwrap).collect();
        let ops: Vec<LayerOp> = ops.into_iter().map(Option::unwrap).collect();

        check_alias_exclusive(&layers, &inputs_of, &consumers)?;

        let sinks: Vec<usize> = (0..layers.len())
            .filter(|&i| consumers[i].is_empty())
            .collect();
        let sink = match sinks[..] {
            [one] => one,
            _ => {
                let ids: Vec<&str> = sinks.iter().map(|&i| layers[i].id.as_str()).collect();
                return Err(Error::schema(
                    ids.first().copied().unwrap_or(""),
                    format!("network must have exactly one output layer, found {ids:?}"),
                ));
            }
        };
        for (i, layer) in layers.iter().enumerate() {
            if layer.kind == LayerKind::Softmax && i != sink {
                return Err(Error::schema(&layer.id, "softmax must be the final layer"));
            }
        }
        let logits_layer = if layers[sink].kind == LayerKind::Softmax {
            inputs_of[sink][0]
        } else {
            sink
        };

        let layout = NodeLayout::new(&layers, &inputs_of, &order, &shapes);

        Ok(Self {
            input_shape,
            layers,
            index,
            order,
            shapes,
            ops,
            consumers,
            input_layer,
            sink,
            logits_layer,
            layout,
        })
    }

    pub fn from_document(doc: ManifestDocument, store: &WeightStore) -> Result<Self> {
        Self::new(doc.input_shape, doc.layers, store)
    }

    pub fn to_document(&self) -> ManifestDocument {
        ManifestDocument {
            input_shape: self.input_shape.clone(),
            layers: self.layers.clone(),
        }
    }

    pub fn input_shape(&self) -> &TensorShape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &LayerSpec {
        &self.layers[idx]
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Indices of the layers feeding `idx`, in declared order.
    pub fn inputs_of(&self, idx: usize) -> Vec<usize> {
        self.layers[idx]
            .inputs
            .iter()
            .map(|name| self.index[name])
            .collect()
    }

    pub fn consumers_of(&self, idx: usize) -> &[usize] {
        &self.consumers[idx]
    }

    /// Canonical topological order (ties broken by layer id).
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn shape(&self, idx: usize) -> &TensorShape {
        &self.shapes[idx]
    }

    pub fn op(&self, idx: usize) -> &LayerOp {
        &self.ops[idx]
    }

    pub fn input_layer(&self) -> usize {
        self.input_layer
    }

    pub fn sink(&self) -> usize {
        self.sink
    }

    /// Layer whose values are the pre-softmax outputs.
    pub fn logits_layer(&self) -> usize {
        self.logits_layer
    }

    /// Number of outputs `n_h`.
    pub fn output_size(&self) -> usize {
        self.shapes[self.logits_layer].len()
    }

    pub fn layout(&self) -> &NodeLayout {
        &self.layout
    }
}

fn topological_order(
    layers: &[LayerSpec],
    inputs_of: &[Vec<usize>],
    consumers: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let mut indegree: Vec<usize> = inputs_of.iter().map(Vec::len).collect();
    let mut ready: BTreeSet<(&str, usize)> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| (layers[i].id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(layers.len());
    while let Some(next) = ready.pop_first() {
        let i = next.1;
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert((layers[c].id.as_str(), c));
            }
        }
    }
    if order.len() != layers.len() {
        let stuck = (0..layers.len())
            .filter(|&i| indegree[i] > 0)
            .min_by(|&a, &b| layers[a].id.cmp(&layers[b].id))
            .unwrap();
        return Err(Error::Cycle {
            layer: layers[stuck].id.clone(),
        });
    }
    Ok(order)
}

fn resolve_layer(
    layer: &LayerSpec,
    input_shape: &TensorShape,
    in_shapes: &[&TensorShape],
) -> Result<(LayerOp, TensorShape)> {
    let id = layer.id.as_str();
    let p = &layer.params;
    let require_hwc = |shape: &TensorShape| {
        shape.hwc().ok_or_else(|| {
            Error::shape(
                id,
                format!(
                    "expected a [height, width, channels] input, got {:?}",
                    shape.dims()
                ),
            )
        })
    };

    let resolved = match layer.kind {
        LayerKind::Input => (LayerOp::Input, input_shape.clone()),
        LayerKind::Conv | LayerKind::GroupedConv => {
            let hwc = require_hwc(in_shapes[0])?;
            let kernel = p
                .kernel
                .ok_or_else(|| Error::schema(id, "missing params.kernel"))?;
            let out_c = p
                .out_channels
                .ok_or_else(|| Error::schema(id, "missing params.out_channels"))?;
            let groups = match layer.kind {
                LayerKind::GroupedConv => p
                    .groups
                    .ok_or_else(|| Error::schema(id, "grouped_conv requires params.groups"))?,
                _ => p.groups.unwrap_or(1),
            };
            let shuffle = p.shuffle.unwrap_or(false);
            if shuffle && layer.kind != LayerKind::GroupedConv {
                return Err(Error::schema(id, "channel shuffle requires grouped_conv"));
            }
            let geometry = ConvGeometry::new(
                hwc,
                out_c,
                kernel,
                p.stride.unwrap_or([1, 1]),
                p.padding.unwrap_or([0; 4]),
                groups,
                shuffle,
            )
            .map_err(|m| Error::shape(id, m))?;
            let shape = TensorShape::image(geometry.out_h, geometry.out_w, out_c);
            (LayerOp::Conv(geometry), shape)
        }
        LayerKind::Dense => {
            let units = p
                .units
                .filter(|&u| u > 0)
                .ok_or_else(|| Error::schema(id, "missing or zero params.units"))?;
            let op = LayerOp::Dense {
                inputs: in_shapes[0].len(),
                units,
            };
            (op, TensorShape::vector(units))
        }
        LayerKind::MaxPool | LayerKind::AvgPool => {
            let hwc = require_hwc(in_shapes[0])?;
            let window = p
                .window
                .ok_or_else(|| Error::schema(id, "missing params.window"))?;
            let geometry = PoolGeometry::new(hwc, window, p.stride, p.padding.unwrap_or([0; 4]))
                .map_err(|m| Error::shape(id, m))?;
            let shape = TensorShape::image(geometry.out_h, geometry.out_w, geometry.channels);
            let op = LayerOp::Pool {
                geometry,
                max: layer.kind == LayerKind::MaxPool,
            };
            (op, shape)
        }
        LayerKind::Relu => (LayerOp::Relu, in_shapes[0].clone()),
        LayerKind::Softmax => (LayerOp::Softmax, in_shapes[0].clone()),
        LayerKind::Dropout => (LayerOp::Dropout, in_shapes[0].clone()),
        LayerKind::BatchNorm => {
            let epsilon = p.epsilon.unwrap_or(BATCH_NORM_DEFAULT_EPSILON);
            if !(epsilon.is_finite() && epsilon >= 0.0) {
                return Err(Error::schema(
                    id,
                    "batch_norm epsilon must be finite and >= 0",
                ));
            }
            let op = LayerOp::BatchNorm {
                channels: in_shapes[0].channels(),
                epsilon,
            };
            (op, in_shapes[0].clone())
        }
        LayerKind::Lrn => {
            let (_, _, c) = require_hwc(in_shapes[0])?;
            let (alpha, beta, k, size) = LRN_DEFAULTS;
            let params = LrnParams {
                alpha: p.alpha.unwrap_or(alpha),
                beta: p.beta.unwrap_or(beta),
                k: p.k.unwrap_or(k),
                size: p.size.unwrap_or(size),
            };
            if params.size == 0 || !(params.alpha > 0.0 && params.beta > 0.0 && params.k > 0.0) {
                return Err(Error::schema(id, "lrn parameters must be positive"));
            }
            (
                LayerOp::Lrn {
                    channels: c,
                    params,
                },
                in_shapes[0].clone(),
            )
        }
        LayerKind::Add => {
            let first = in_shapes[0];
            if let Some(other) = in_shapes.iter().find(|s| *s != &first) {
                return Err(Error::shape(
                    id,
                    format!(
                        "add inputs must have equal shapes, got {:?} and {:?}",
                        first.dims(),
                        other.dims()
                    ),
                ));
            }
            (LayerOp::Add, first.clone())
        }
        LayerKind::Concat => {
            let rank = in_shapes[0].rank();
            if in_shapes.iter().any(|s| s.rank() != rank) {
                return Err(Error::shape(id, "concat inputs must have equal rank"));
            }
            let shape = match rank {
                3 => {
                    let (h, w, _) = in_shapes[0].hwc().unwrap();
                    let mut channels = 0;
                    for s in in_shapes {
                        let (sh, sw, sc) = s.hwc().unwrap();
                        if (sh, sw) != (h, w) {
                            return Err(Error::shape(
                                id,
                                format!(
                                    "concat spatial dims differ: {:?} vs {:?}",
                                    (h, w),
                                    (sh, sw)
                                ),
                            ));
                        }
                        channels += sc;
                    }
                    TensorShape::image(h, w, channels)
                }
                1 => TensorShape::vector(in_shapes.iter().map(|s| s.len()).sum()),
                _ => return Err(Error::shape(id, "concat supports rank 1 or 3 tensors")),
            };
            (LayerOp::Concat, shape)
        }
    };
    Ok(resolved)
}

/// Expected `(weight dims, bias len)` for a resolved layer.
pub fn expected_weight_dims(op: &LayerOp) -> Option<(Vec<usize>, Option<usize>)> {
    match *op {
        LayerOp::Conv(g) => Some((
            vec![g.out_c, g.kernel_h, g.kernel_w, g.in_c_per_group()],
            Some(g.out_c),
        )),
        LayerOp::Dense { inputs, units } => Some((vec![units, inputs], Some(units))),
        LayerOp::BatchNorm { channels, .. } => Some((vec![4, channels], None)),
        _ => None,
    }
}

fn check_weights(layer: &LayerSpec, op: &LayerOp, store: &WeightStore) -> Result<()> {
    let id = layer.id.as_str();
    let Some((dims, bias_len)) = expected_weight_dims(op) else {
        if layer.weight_ref.is_some() || layer.params.bias_ref.is_some() {
            return Err(Error::schema(
                id,
                format!("{} layer takes no weights", layer.kind.name()),
            ));
        }
        return Ok(());
    };
    let weight_ref = layer
        .weight_ref
        .as_deref()
        .ok_or_else(|| Error::schema(id, "missing weight_ref"))?;
    check_blob(id, weight_ref, &dims, store)?;
    match (&layer.params.bias_ref, bias_len) {
        (Some(bias), Some(len)) => check_blob(id, bias, &[len], store)?,
        (Some(_), None) => return Err(Error::schema(id, "layer takes no bias")),
        (None, _) => {}
    }
    if layer.kind == LayerKind::BatchNorm {
        let blob = store.get(weight_ref).unwrap();
        let c = dims[1];
        let var = &blob.data[3 * c..4 * c];
        if var.iter().any(|&v| v < 0.0) {
            return Err(Error::schema(id, "batch_norm variance must be nonnegative"));
        }
    }
    Ok(())
}

fn check_blob(layer: &str, blob_id: &str, dims: &[usize], store: &WeightStore) -> Result<()> {
    let blob = store.get(blob_id).ok_or_else(|| Error::DanglingRef {
        layer: layer.to_string(),
        blob: blob_id.to_string(),
    })?;
    let expected: usize = dims.iter().product();
    if blob.data.len() != expected {
        return Err(Error::BlobLength {
            blob: blob_id.to_string(),
            expected,
            actual: blob.data.len(),
        });
    }
    if blob.shape != dims {
        return Err(Error::shape(
            layer,
            format!(
                "blob `{blob_id}` has shape {:?}, expected {dims:?}",
                blob.shape
            ),
        ));
    }
    Ok(())
}

/// An element-wise layer rewrites the state of its input's nodes, so nothing
/// else may read the pre-activation values of those nodes.
fn check_alias_exclusive(
    layers: &[LayerSpec],
    inputs_of: &[Vec<usize>],
    consumers: &[Vec<usize>],
) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        if !layer.kind.is_elementwise() {
            continue;
        }
        let mut stack = vec![inputs_of[i][0]];
        while let Some(src) = stack.pop() {
            if consumers[src].len() != 1 {
                return Err(Error::schema(
                    &layer.id,
                    format!(
                        "input `{}` of an element-wise layer is also consumed elsewhere",
                        layers[src].id
                    ),
                ));
            }
            if layers[src].kind == LayerKind::Concat {
                stack.extend(&inputs_of[src]);
            }
        }
    }
    Ok(())
}

/// A validated manifest together with its weights.
#[derive(Clone, Debug)]
pub struct Model {
    pub manifest: NetworkManifest,
    pub store: WeightStore,
}

impl Model {
    pub fn new(manifest: NetworkManifest, store: WeightStore) -> Self {
        Self { manifest, store }
    }

    /// Revalidates the manifest against a replacement store.
    pub fn with_store(&self, store: WeightStore) -> Result<Self> {
        let manifest = NetworkManifest::from_document(self.manifest.to_document(), &store)?;
        Ok(Self { manifest, store })
    }

    /// Blob data of the layer's `weight_ref`.
    pub fn weights(&self, idx: usize) -> Option<&[f32]> {
        let layer = self.manifest.layer(idx);
        layer
            .weight_ref
            .as_deref()
            .and_then(|r| self.store.get(r))
            .map(|b| b.data.as_slice())
    }

    pub fn bias(&self, idx: usize) -> Option<&[f32]> {
        let layer = self.manifest.layer(idx);
        layer
            .params
            .bias_ref
            .as_deref()
            .and_then(|r| self.store.get(r))
            .map(|b| b.data.as_slice())
    }

    /// Loads `manifest.json`; blobs are resolved as `<id>.blob` next to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_manifest(path)
    }

    /// Writes the manifest to `path` and one blob per weight tensor beside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dir = blob_dir(path);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let json = serde_json::to_string_pretty(&self.manifest.to_document())?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
        for (id, blob) in self.store.iter() {
            write_blob(dir.join(format!("{id}.blob")), blob)?;
        }
        Ok(())
    }
}

fn blob_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads and validates a manifest and every blob it references.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDocument = serde_json::from_str(&text)?;
    let dir = blob_dir(path);

    let mut refs = BTreeMap::new();
    for layer in &doc.layers {
        for r in [&layer.weight_ref, &layer.params.bias_ref]
            .into_iter()
            .flatten()
        {
            refs.entry(r.clone()).or_insert_with(|| layer.id.clone());
        }
    }
    let mut store = WeightStore::default();
    for (blob_id, layer_id) in refs {
        store::check_blob_id(&blob_id)?;
        let file = dir.join(format!("{blob_id}.blob"));
        if !file.exists() {
            return Err(Error::DanglingRef {
                layer: layer_id,
                blob: blob_id,
            });
        }
        store.insert(blob_id, read_blob(&file)?)?;
    }
    let manifest = NetworkManifest::from_document(doc, &store)?;
    Ok(Model { manifest, store })
}
