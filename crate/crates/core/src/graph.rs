//! Undirected graphs and the symmetric normalization used by the GC encoder.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Binary symmetric adjacency without self-loops.
///
/// Each undirected edge is stored once as `(i, j)` with `i < j`; a
/// row-compressed neighbour index with sorted columns is kept alongside for
/// lookups and products.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseAdjacency {
    n: usize,
    edges: Vec<(usize, usize)>,
    row_ptr: Vec<usize>,
    neighbors: Vec<usize>,
}

impl SparseAdjacency {
    pub fn empty(n: usize) -> Self {
        Self::build(n, BTreeSet::new())
    }

    /// Duplicate pairs and either orientation of the same pair collapse into
    /// one edge. Self-loops and out-of-range ids are rejected.
    pub fn from_edges<I>(n: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Config(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::Config(format!("self-loop on node {i}")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self::build(n, set))
    }

    fn build(n: usize, set: BTreeSet<(usize, usize)>) -> Self {
        let edges: Vec<_> = set.into_iter().collect();
        let mut degree = vec![0usize; n];
        for &(i, j) in &edges {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut row_ptr = vec![0usize; n + 1];
        for i in 0..n {
            row_ptr[i + 1] = row_ptr[i] + degree[i];
        }
        let mut fill = row_ptr.clone();
        let mut neighbors = vec![0usize; row_ptr[n]];
        for &(i, j) in &edges {
            neighbors[fill[i]] = j;
            fill[i] += 1;
            neighbors[fill[j]] = i;
            fill[j] += 1;
        }
        for i in 0..n {
            neighbors[row_ptr[i]..row_ptr[i + 1]].sort_unstable();
        }
        SparseAdjacency {
            n,
            edges,
            row_ptr,
            neighbors,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Undirected edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.neighbors(i).binary_search(&j).is_ok()
    }

    /// `Σ_ij A_ij / N²`, counting both orientations of every edge.
    pub fn density(&self) -> f64 {
        let n = self.n as f64;
        2.0 * self.edges.len() as f64 / (n * n)
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃_ii = Σ_j (A + I)_ij`.
    pub fn normalize(&self) -> NormalizedAdjacency {
        let deg: Vec<f64> = (0..self.n).map(|i| (self.degree(i) + 1) as f64).collect();
        let mut row_ptr = Vec::with_capacity(self.n + 1);
        let mut cols = Vec::with_capacity(self.neighbors.len() + self.n);
        let mut vals = Vec::with_capacity(self.neighbors.len() + self.n);
        row_ptr.push(0);
        for i in 0..self.n {
            let nbrs = self.neighbors(i);
            let split = nbrs.partition_point(|&j| j < i);
            let row = nbrs[..split]
                .iter()
                .copied()
                .chain(std::iter::once(i))
                .chain(nbrs[split..].iter().copied());
            for j in row {
                cols.push(j);
                vals.push(1.0 / (deg[i] * deg[j]).sqrt());
            }
            row_ptr.push(cols.len());
        }
        NormalizedAdjacency {
            n: self.n,
            row_ptr,
            cols,
            vals,
        }
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> SparseAdjacency {
        assert_eq!(perm.len(), self.n);
        let set = self
            .edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (perm[i], perm[j]);
                (a.min(b), a.max(b))
            })
            .collect();
        Self::build(self.n, set)
    }

    /// Copy with the given undirected pairs removed.
    pub fn without_edges(&self, removed: &[(usize, usize)]) -> SparseAdjacency {
        let drop: BTreeSet<(usize, usize)> =
            removed.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        let set = self
            .edges
            .iter()
            .copied()
            .filter(|e| !drop.contains(e))
            .collect();
        Self::build(self.n, set)
    }

    /// Subgraph induced by `keep`; node `keep[k]` becomes node `k`.
    pub fn induced(&self, keep: &[usize]) -> SparseAdjacency {
        let mut index = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            index[old] = new;
        }
        let set = self
            .edges
            .iter()
            .filter_map(|&(i, j)| {
                let (a, b) = (index[i], index[j]);
                (a != usize::MAX && b != usize::MAX).then(|| (a.min(b), a.max(b)))
            })
            .collect();
        Self::build(keep.len(), set)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for &(i, j) in &self.edges {
            m.set(i, j, 1.0);
            m.set(j, i, 1.0);
        }
        m
    }

    /// Writes the `i j` edge-list format with a `# nodes N` header comment so
    /// isolated trailing nodes survive a round trip.
    pub fn write_edge_list(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "# nodes {}", self.n).map_err(io)?;
        for &(i, j) in &self.edges {
            writeln!(w, "{i} {j}").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads the edge-list format. The node count comes from `n` when given,
    /// else from a `# nodes N` comment, else from the largest id seen.
    pub fn read_edge_list(path: &Path, n: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edge_list(&text, n).map_err(|(line, msg)| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        })
    }

    pub fn parse_edge_list(text: &str, n: Option<usize>) -> Result<Self, (usize, String)> {
        let mut declared = None;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let mut words = comment.split_whitespace();
                if words.next() == Some("nodes") {
                    declared = words.next().and_then(|w| w.parse::<usize>().ok());
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err((lineno + 1, format!("expected 2 fields, got {}", fields.len())));
            }
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| (lineno + 1, format!("bad node id {s:?}: {e}")))
            };
            pairs.push((parse(fields[0])?, parse(fields[1])?));
        }
        let max_id = pairs.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0);
        let n = n.or(declared).unwrap_or(max_id);
        SparseAdjacency::from_edges(n, pairs).map_err(|e| (0, e.to_string()))
    }
}

/// `Â` stored row-compressed with sorted columns; pattern is that of `A + I`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[span.clone()].binary_search(&j) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// Sparse-dense product `Â · m`; rows are reduced in column order.
    pub fn spmm(&self, m: &DenseMatrix) -> Result<DenseMatrix> {
        if m.rows() != self.n {
            return Err(Error::dim("spmm", self.n, m.rows()));
        }
        let mut out = DenseMatrix::zeros(self.n, m.cols());
        for i in 0..self.n {
            let span = self.row_ptr[i]..self.row_ptr[i + 1];
            let dst = out.row_mut(i);
            for (&j, &w) in self.cols[span.clone()].iter().zip(&self.vals[span]) {
                for (d, s) in dst.iter_mut().zip(m.row(j)) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                d.set(i, j, v);
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path3() -> SparseAdjacency {
        SparseAdjacency::from_edges(3, [(0, 1), (2, 1)]).unwrap()
    }

    #[test]
    fn isolated_node_normalizes_to_identity() {
        let a = SparseAdjacency::empty(1).normalize();
        assert_eq!(a.to_dense(), DenseMatrix::from_rows(&[&[1.0]]));
    }

    #[test]
    fn single_edge_normalization() {
        let a = SparseAdjacency::from_edges(2, [(0, 1)]).unwrap().normalize();
        assert_eq!(
            a.to_dense(),
            DenseMatrix::from_rows(&[&[0.5, 0.5], &[0.5, 0.5]])
        );
    }

    #[test]
    fn path_normalization() {
        let a = path3().normalize();
        assert!((a.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((a.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((a.get(0, 1) - 0.40825).abs() < 1e-5);
        assert_eq!(a.get(0, 2), 0.0);
        assert_eq!(a.nnz(), 7);
    }

    #[test]
    fn density_examples() {
        assert_eq!(SparseAdjacency::empty(3).density(), 0.0);
        assert_eq!(
            SparseAdjacency::from_edges(2, [(0, 1)]).unwrap().density(),
            0.5
        );
    }

    #[test]
    fn spmm_examples() {
        let iso = SparseAdjacency::empty(3).normalize();
        let m = DenseMatrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(iso.spmm(&m).unwrap(), m);

        let a = SparseAdjacency::from_edges(2, [(0, 1)]).unwrap().normalize();
        let x = DenseMatrix::from_rows(&[&[1.0], &[3.0]]);
        assert_eq!(
            a.spmm(&x).unwrap(),
            DenseMatrix::from_rows(&[&[2.0], &[2.0]])
        );
        assert!(a.spmm(&m).is_err());
    }

    #[test]
    fn regular_graph_entries() {
        // 5-cycle: 2-regular, so every stored entry is 1/3.
        let a = SparseAdjacency::from_edges(5, (0..5).map(|i| (i, (i + 1) % 5)))
            .unwrap()
            .normalize();
        for i in 0..5 {
            for (_, v) in a.row(i) {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rejects_self_loops_and_dedups() {
        assert!(SparseAdjacency::from_edges(2, [(1, 1)]).is_err());
        assert!(SparseAdjacency::from_edges(2, [(0, 2)]).is_err());
        let a = SparseAdjacency::from_edges(3, [(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(a.num_edges(), 1);
        assert!(a.has_edge(1, 0));
    }

    #[test]
    fn edge_list_parsing() {
        let text = "# nodes 5\n# a comment\n0 1\n\n3 2\n";
        let a = SparseAdjacency::parse_edge_list(text, None).unwrap();
        assert_eq!(a.n(), 5);
        assert_eq!(a.edges(), &[(0, 1), (2, 3)]);
        let b = SparseAdjacency::parse_edge_list("0 1\n1 3\n", None).unwrap();
        assert_eq!(b.n(), 4);
        let err = SparseAdjacency::parse_edge_list("0 1\n1 2 3\n", None).unwrap_err();
        assert_eq!(err.0, 2);
    }

    #[test]
    fn edge_list_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.txt");
        let a = SparseAdjacency::from_edges(6, [(0, 4), (1, 2)]).unwrap();
        a.write_edge_list(&path).unwrap();
        assert_eq!(SparseAdjacency::read_edge_list(&path, None).unwrap(), a);
    }

    fn arb_graph(max_n: usize) -> impl Strategy<Value = SparseAdjacency> {
        (1..=max_n).prop_flat_map(|n| {
            proptest::collection::vec((0..n, 0..n), 0..(n * n)).prop_map(move |pairs| {
                SparseAdjacency::from_edges(n, pairs.into_iter().filter(|(i, j)| i != j))
                    .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn normalized_is_symmetric_and_bounded(a in arb_graph(20)) {
            let s = a.normalize();
            let d = s.to_dense();
            prop_assert!(d.max_abs_diff(&d.transpose()) == 0.0);
            for i in 0..a.n() {
                for (j, v) in s.row(i) {
                    prop_assert!(v > 0.0 && v <= 1.0);
                    prop_assert!(i == j || a.has_edge(i, j));
                }
                prop_assert_eq!(s.row(i).count(), a.degree(i) + 1);
            }
        }

        #[test]
        fn spmm_matches_dense_oracle(a in arb_graph(50), cols in 1usize..5, seed in any::<u64>()) {
            let s = a.normalize();
            let mut state = seed;
            let m = DenseMatrix::from_fn(a.n(), cols, |_, _| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            });
            let dense = s.to_dense();
            let oracle = DenseMatrix::from_fn(a.n(), cols, |i, j| {
                (0..a.n()).map(|k| dense.get(i, k) * m.get(k, j)).sum()
            });
            prop_assert!(s.spmm(&m).unwrap().max_abs_diff(&oracle) < 1e-12);
        }

        #[test]
        fn density_is_permutation_invariant(a in arb_graph(15), seed in any::<u64>()) {
            let n = a.n();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut state = seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                perm.swap(i, (state >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(a.permute(&perm).density(), a.density());
        }
    }
}
