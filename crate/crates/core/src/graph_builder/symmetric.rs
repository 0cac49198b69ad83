use super::SignedSparseGraph;

/// CSR form of the undirected matrix `A_u = A + A^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetrizedView {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
    total_abs: f64,
}

impl SymmetrizedView {
    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Number of stored entries, counting both `(i, j)` and `(j, i)`.
    pub fn entry_count(&self) -> usize {
        self.cols.len()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1])
            .map(move |k| (self.cols[k] as usize, self.weights[k]))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
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

    pub fn row_abs(&self, i: usize) -> f64 {
        self.neighbors(i).map(|(_, w)| w.abs()).sum()
    }

    /// `sum_ij |A_u[i][j]|`.
    pub fn total_abs(&self) -> f64 {
        self.total_abs
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&(j as u32)) {
            Ok(k) => self.weights[range.start + k],
            Err(_) => 0.0,
        }
    }
}

/// Symmetrizes `graph`, merging reciprocal edges and dropping entries that
/// cancel exactly.
pub fn symmetrize(graph: &SignedSparseGraph) -> SymmetrizedView {
    let n = graph.node_count();
    let mut degree = vec![0usize; n];
    for (i, j, _) in graph.edges() {
        degree[i] += 1;
        degree[j] += 1;
    }
    let mut row_ptr = vec![0usize; n + 1];
    for i in 0..n {
        row_ptr[i + 1] = row_ptr[i] + degree[i];
    }
    let mut fill = row_ptr[..n].to_vec();
    let mut entries = vec![(0u32, 0.0f64); row_ptr[n]];
    for (i, j, w) in graph.edges() {
        entries[fill[i]] = (j as u32, w);
        fill[i] += 1;
        entries[fill[j]] = (i as u32, w);
        fill[j] += 1;
    }

    let mut out_ptr = Vec::with_capacity(n + 1);
    out_ptr.push(0);
    let mut cols = Vec::with_capacity(entries.len());
    let mut weights = Vec::with_capacity(entries.len());
    for i in 0..n {
        let row = &mut entries[row_ptr[i]..row_ptr[i + 1]];
        row.sort_unstable_by_key(|e| e.0);
        let mut k = 0;
        while k < row.len() {
            let col = row[k].0;
            let mut w = 0.0;
            while k < row.len() && row[k].0 == col {
                w += row[k].1;
                k += 1;
            }
            if w != 0.0 {
                cols.push(col);
                weights.push(w);
            }
        }
        out_ptr.push(cols.len());
    }
    let total_abs = weights.iter().map(|w: &f64| w.abs()).sum();
    SymmetrizedView {
        n,
        row_ptr: out_ptr,
        cols,
        weights,
        total_abs,
    }
}
