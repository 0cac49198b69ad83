use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model_ir::LayerKind;

pub const GRAPH_MAGIC: &[u8; 8] = b"FRUSTGR1";

/// Marks edges that carry no trainable parameter (pooling, add).
pub const NO_PARAM: u32 = u32::MAX;

/// Origin of an edge: index into [`SignedSparseGraph::layers`] and flat index
/// of the parameter inside that layer's weight blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Provenance {
    pub layer: u32,
    pub param: u32,
}

/// Contiguous node range owned by one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerBlock {
    pub id: String,
    pub kind: LayerKind,
    pub nodes: Range<usize>,
}

/// Weighted signed adjacency matrix in CSR layout.
///
/// Row `i` lists the sources `j` of edges `j -> i`, i.e. the nonzeros
/// `A[i][j]`, sorted by column. Graphs built from networks are strictly
/// lower triangular.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedSparseGraph {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    provenance: Option<Vec<Provenance>>,
    layers: Vec<LayerBlock>,
    origin: Option<Vec<usize>>,
}

impl SignedSparseGraph {
    pub(crate) fn from_parts(
        n: usize,
        row_ptr: Vec<usize>,
        cols: Vec<u32>,
        weights: Vec<f64>,
        provenance: Option<Vec<Provenance>>,
        layers: Vec<LayerBlock>,
        origin: Option<Vec<usize>>,
    ) -> Result<Self> {
        let graph = Self {
            n,
            row_ptr,
            cols,
            weights,
            provenance,
            layers,
            origin,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Builds a graph from `(row, col, weight)` triplets, meaning `col -> row`.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted = edges.to_vec();
        sorted.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut weights = Vec::with_capacity(sorted.len());
        for &(r, c, w) in &sorted {
            if r >= n || c >= n {
                return Err(Error::InvalidArgument(format!(
                    "edge ({r}, {c}) out of range"
                )));
            }
            row_ptr[r + 1] += 1;
            cols.push(c as u32);
            weights.push(w);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self::from_parts(n, row_ptr, cols, weights, None, Vec::new(), None)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(Error::Format {
                what: "graph",
                message: m,
            })
        };
        if self.row_ptr.len() != self.n + 1
            || self.row_ptr[0] != 0
            || *self.row_ptr.last().unwrap() != self.cols.len()
            || self.cols.len() != self.weights.len()
        {
            return bad("inconsistent CSR arrays".into());
        }
        if let Some(p) = &self.provenance {
            if p.len() != self.cols.len() {
                return bad("provenance length differs from edge count".into());
            }
        }
        if let Some(o) = &self.origin {
            if o.len() != self.n {
                return bad("origin length differs from node count".into());
            }
        }
        for i in 0..self.n {
            let (start, end) = (self.row_ptr[i], self.row_ptr[i + 1]);
            if start > end {
                return bad(format!("row {i} has decreasing offsets"));
            }
            let mut prev: Option<u32> = None;
            for k in start..end {
                let c = self.cols[k];
                let w = self.weights[k];
                if c as usize >= self.n {
                    return bad(format!("column {c} out of range in row {i}"));
                }
                if c as usize == i {
                    return bad(format!("self-loop at node {i}"));
                }
                if prev.is_some_and(|p| p >= c) {
                    return bad(format!("row {i} has unsorted or duplicate columns"));
                }
                if !w.is_finite() || w == 0.0 {
                    return bad(format!("edge {c}->{i} has weight {w}"));
                }
                prev = Some(c);
            }
        }
        for block in &self.layers {
            if block.nodes.end > self.n || block.nodes.start > block.nodes.end {
                return bad(format!("layer `{}` node range out of bounds", block.id));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.cols.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn cols(&self) -> &[u32] {
        &self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Edge index range of row `i`.
    pub fn row_range(&self, i: usize) -> Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    /// `(row, col, weight)` for every edge, in storage order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            self.row_range(i)
                .map(move |k| (i, self.cols[k] as usize, self.weights[k]))
        })
    }

    pub fn has_provenance(&self) -> bool {
        self.provenance.is_some()
    }

    /// Provenance of edge `k`. Panics on graphs without provenance.
    pub fn provenance(&self, edge: usize) -> Provenance {
        self.provenance.as_ref().expect("graph has no provenance")[edge]
    }

    pub fn provenance_slice(&self) -> Option<&[Provenance]> {
        self.provenance.as_deref()
    }

    pub fn layers(&self) -> &[LayerBlock] {
        &self.layers
    }

    pub fn layer_block(&self, id: &str) -> Option<&LayerBlock> {
        self.layers.iter().find(|b| b.id == id)
    }

    /// Original node ids when this graph is an extracted subgraph.
    pub fn origin(&self) -> Option<&[usize]> {
        self.origin.as_deref()
    }

    /// Same structure with every edge weight replaced.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.weights.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} weights, got {}",
                self.weights.len(),
                weights.len()
            )));
        }
        let mut graph = self.clone();
        graph.weights = weights;
        graph.validate()?;
        Ok(graph)
    }

    /// Value of `A[row][col]`, zero when absent.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let range = self.row_range(row);
        match self.cols[range.clone()].binary_search(&(col as u32)) {
            Ok(k) => self.weights[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// True when every edge goes from a lower to a higher node index.
    pub fn is_strictly_lower_triangular(&self) -> bool {
        self.edges().all(|(r, c, _)| c < r)
    }

    /// Sum of absolute edge weights.
    pub fn abs_weight_sum(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    /// Keeps the nodes flagged in `keep_node` and the edges accepted by
    /// `keep_edge` whose endpoints are both kept. Node order is preserved, so
    /// layer blocks stay contiguous.
    pub fn subgraph(&self, keep_node: &[bool], keep_edge: impl Fn(usize) -> bool) -> Result<Self> {
        assert_eq!(keep_node.len(), self.n);
        let mut new_id = vec![usize::MAX; self.n];
        let mut origin = Vec::new();
        for (v, _) in keep_node.iter().enumerate().filter(|(_, &k)| k) {
            new_id[v] = origin.len();
            origin.push(self.origin.as_ref().map_or(v, |o| o[v]));
        }
        let mut row_ptr = vec![0usize];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut provenance = self.provenance.as_ref().map(|_| Vec::new());
        for i in (0..self.n).filter(|&i| keep_node[i]) {
            for k in self.row_range(i) {
                let c = self.cols[k] as usize;
                if keep_node[c] && keep_edge(k) {
                    cols.push(new_id[c] as u32);
                    weights.push(self.weights[k]);
                    if let (Some(out), Some(src)) = (provenance.as_mut(), self.provenance.as_ref())
                    {
                        out.push(src[k]);
                    }
                }
            }
            row_ptr.push(cols.len());
        }
        let layers = self
            .layers
            .iter()
            .map(|b| {
                let start = keep_node[..b.nodes.start].iter().filter(|&&k| k).count();
                let len = keep_node[b.nodes.clone()].iter().filter(|&&k| k).count();
                LayerBlock {
                    id: b.id.clone(),
                    kind: b.kind,
                    nodes: start..start + len,
                }
            })
            .collect();
        Self::from_parts(
            origin.len(),
            row_ptr,
            cols,
            weights,
            provenance,
            layers,
            Some(origin),
        )
    }

    /// Dense row-major copy of `A`, for small graphs.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n]; self.n];
        for (r, c, w) in self.edges() {
            dense[r][c] = w;
        }
        dense
    }

    /// Writes the binary graph format.
    ///
    /// Layout (little-endian): magic `FRUSTGR1`, u64 n, u64 nnz,
    /// u64 row_ptr[n + 1], u32 col[nnz], f64 weight[nnz],
    /// u8 has_provenance, then (u32 layer, u32 param)[nnz] if set,
    /// u64 layer count, per layer (u32 id length, id bytes, u8 kind,
    /// u64 start, u64 len), u8 has_origin, then u64 origin[n] if set.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut buf: Vec<u8> = Vec::with_capacity(64 + self.cols.len() * 20);
        buf.extend_from_slice(GRAPH_MAGIC);
        buf.extend((self.n as u64).to_le_bytes());
        buf.extend((self.cols.len() as u64).to_le_bytes());
        for &p in &self.row_ptr {
            buf.extend((p as u64).to_le_bytes());
        }
        for &c in &self.cols {
            buf.extend(c.to_le_bytes());
        }
        for &w in &self.weights {
            buf.extend(w.to_le_bytes());
        }
        match &self.provenance {
            Some(prov) => {
                buf.push(1);
                for p in prov {
                    buf.extend(p.layer.to_le_bytes());
                    buf.extend(p.param.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        buf.extend((self.layers.len() as u64).to_le_bytes());
        for b in &self.layers {
            buf.extend((b.id.len() as u32).to_le_bytes());
            buf.extend(b.id.as_bytes());
            buf.push(b.kind.code());
            buf.extend((b.nodes.start as u64).to_le_bytes());
            buf.extend((b.nodes.len() as u64).to_le_bytes());
        }
        match &self.origin {
            Some(origin) => {
                buf.push(1);
                for &o in origin {
                    buf.extend((o as u64).to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        out.write_all(&buf).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(8)? != GRAPH_MAGIC {
            return Err(Error::Format {
                what: "graph",
                message: format!("{}: missing FRUSTGR1 header", path.display()),
            });
        }
        let n = r.u64()? as usize;
        let nnz = r.u64()? as usize;
        r.check_remaining((n + 1) * 8 + nnz * 12)?;
        let row_ptr = (0..=n)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let cols = (0..nnz).map(|_| r.u32()).collect::<Result<_>>()?;
        let weights = (0..nnz).map(|_| r.f64()).collect::<Result<_>>()?;
        let provenance = match r.u8()? {
            0 => None,
            _ => {
                r.check_remaining(nnz * 8)?;
                Some(
                    (0..nnz)
                        .map(|_| {
                            Ok(Provenance {
                                layer: r.u32()?,
                                param: r.u32()?,
                            })
                        })
                        .collect::<Result<_>>()?,
                )
            }
        };
        let n_layers = r.u64()? as usize;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let len = r.u32()? as usize;
            let id = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format {
                what: "graph",
                message: "layer id is not utf-8".into(),
            })?;
            let kind = LayerKind::from_code(r.u8()?).ok_or_else(|| Error::Format {
                what: "graph",
                message: "unknown layer kind code".into(),
            })?;
            let start = r.u64()? as usize;
            let len = r.u64()? as usize;
            layers.push(LayerBlock {
                id,
                kind,
                nodes: start..start + len,
            });
        }
        let origin = match r.u8()? {
            0 => None,
            _ => Some(
                (0..n)
                    .map(|_| r.u64().map(|v| v as usize))
                    .collect::<Result<_>>()?,
            ),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format {
                what: "graph",
                message: "trailing bytes".into(),
            });
        }
        Self::from_parts(n, row_ptr, cols, weights, provenance, layers, origin)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn check_remaining(&self, len: usize) -> Result<()> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format {
                what: "graph",
                message: "truncated file".into(),
            });
        }
        Ok(())
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        self.check_remaining(len)?;
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
