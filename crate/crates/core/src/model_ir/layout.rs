use std::ops::Range;
use std::sync::Arc;

use super::{LayerKind, LayerSpec, TensorShape};

/// Element index of a layer's output tensor -> graph node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ElementMap {
    Range { start: usize, len: usize },
    Gather(Arc<Vec<u32>>),
}

impl ElementMap {
    pub fn node(&self, element: usize) -> usize {
        match self {
            ElementMap::Range { start, len } => {
                debug_assert!(element < *len);
                start + element
            }
            ElementMap::Gather(nodes) => nodes[element] as usize,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ElementMap::Range { len, .. } => *len,
            ElementMap::Gather(nodes) => nodes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(move |e| self.node(e))
    }
}

/// Node numbering: node-owning layers in topological order, raster order
/// within each layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeLayout {
    n: usize,
    maps: Vec<ElementMap>,
    owners: Vec<(usize, Range<usize>)>,
}

impl NodeLayout {
    pub(super) fn new(
        layers: &[LayerSpec],
        inputs_of: &[Vec<usize>],
        order: &[usize],
        shapes: &[TensorShape],
    ) -> Self {
        let mut maps: Vec<Option<ElementMap>> = vec![None; layers.len()];
        let mut owners = Vec::new();
        let mut next = 0usize;
        for &i in order {
            let map = if layers[i].kind.owns_nodes() {
                let len = shapes[i].len();
                owners.push((i, next..next + len));
                let map = ElementMap::Range { start: next, len };
                next += len;
                map
            } else if layers[i].kind == LayerKind::Concat {
                let parts: Vec<&ElementMap> = inputs_of[i]
                    .iter()
                    .map(|&s| maps[s].as_ref().unwrap())
                    .collect();
                let part_shapes: Vec<&TensorShape> =
                    inputs_of[i].iter().map(|&s| &shapes[s]).collect();
                ElementMap::Gather(Arc::new(concat_nodes(&parts, &part_shapes)))
            } else {
                maps[inputs_of[i][0]].clone().unwrap()
            };
            maps[i] = Some(map);
        }
        Self {
            n: next,
            maps: maps.into_iter().map(Option::unwrap).collect(),
            owners,
        }
    }

    /// Total node count `n`.
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn elements(&self, layer: usize) -> &ElementMap {
        &self.maps[layer]
    }

    /// `(layer index, node range)` of every node-owning layer, in node order.
    pub fn owners(&self) -> &[(usize, Range<usize>)] {
        &self.owners
    }

    pub fn owned_range(&self, layer: usize) -> Option<Range<usize>> {
        self.owners
            .iter()
            .find(|(l, _)| *l == layer)
            .map(|(_, r)| r.clone())
    }

    /// Layer owning `node`.
    pub fn owner_of(&self, node: usize) -> usize {
        let pos = self.owners.partition_point(|(_, r)| r.end <= node);
        self.owners[pos].0
    }
}

fn concat_nodes(parts: &[&ElementMap], shapes: &[&TensorShape]) -> Vec<u32> {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut nodes = Vec::with_capacity(total);
    match shapes[0].hwc() {
        Some((h, w, _)) => {
            for pixel in 0..h * w {
                for (part, shape) in parts.iter().zip(shapes) {
                    let c = shape.channels();
                    for ch in 0..c {
                        nodes.push(part.node(pixel * c + ch) as u32);
                    }
                }
            }
        }
        None => {
            for part in parts {
                nodes.extend(part.nodes().map(|n| n as u32));
            }
        }
    }
    nodes
}
