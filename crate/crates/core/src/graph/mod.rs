//! Undirected graphs in compressed sparse row form, plus generators and
//! graph-functional diagnostics.

mod adjacency;
mod diagnostics;
mod generators;
pub mod io;

pub use adjacency::Adjacency;
pub use diagnostics::{
    dirichlet_energy, eccentricity, graph_gradient, is_connected, mad, poincare_check,
    EdgeGradient, PoincareReport,
};
pub use generators::{
    edge_homophily, synthetic_homophily, synthetic_multiscale, Labels, LabeledDataset, SplitMasks,
};

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};

/// Immutable undirected graph. Each edge `{i, j}` is stored as `j` in row
/// `i` and `i` in row `j`; rows are sorted and free of duplicates and
/// self-loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Duplicates and
    /// reversed duplicates collapse into one edge.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::invalid(format!(
                    "edge ({i}, {j}) out of range for {num_nodes} nodes"
                )));
            }
            if i == j {
                return Err(Error::invalid(format!("self-loop at node {i} is not allowed")));
            }
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut row_offsets = Vec::with_capacity(num_nodes + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for row in &mut adj {
            row.sort_unstable();
            row.dedup();
            col_indices.extend_from_slice(row);
            row_offsets.push(col_indices.len());
        }
        Ok(Graph { num_nodes, row_offsets, col_indices })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of undirected edges `e`.
    pub fn num_edges(&self) -> usize {
        self.col_indices.len() / 2
    }

    /// Number of stored directed entries, `2e`.
    pub fn num_directed(&self) -> usize {
        self.col_indices.len()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]]
    }

    #[inline]
    pub fn degree(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|i| self.degree(i)).collect()
    }

    /// Largest degree, `d̄`.
    pub fn max_degree(&self) -> usize {
        self.degrees().into_iter().max().unwrap_or(0)
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes)
            .flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
            .filter(|(i, j)| i < j)
    }

    /// Breadth-first distances from `source`; `None` marks unreachable nodes.
    pub fn bfs_distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.num_nodes];
        let mut queue = VecDeque::new();
        dist[source] = Some(0);
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &w in self.neighbors(u) {
                if dist[w].is_none() {
                    dist[w] = Some(du + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Relabels nodes: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.num_nodes {
            return Err(Error::invalid("permutation length differs from node count"));
        }
        let edges: Vec<_> = self.edges().map(|(i, j)| (perm[i], perm[j])).collect();
        Graph::from_edges(self.num_nodes, &edges)
    }
}

/// `side x side` grid with 4-neighbour connectivity and no wraparound.
pub fn grid2d(side: usize) -> Result<Graph> {
    if side < 2 {
        return Err(Error::invalid(format!("grid side must be at least 2, got {side}")));
    }
    let idx = |r: usize, c: usize| r * side + c;
    let mut edges = Vec::with_capacity(2 * side * (side - 1));
    for r in 0..side {
        for c in 0..side {
            if c + 1 < side {
                edges.push((idx(r, c), idx(r, c + 1)));
            }
            if r + 1 < side {
                edges.push((idx(r, c), idx(r + 1, c)));
            }
        }
    }
    Graph::from_edges(side * side, &edges)
}

pub fn path_graph(n: usize) -> Result<Graph> {
    let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
    Graph::from_edges(n, &edges)
}

pub fn cycle_graph(n: usize) -> Result<Graph> {
    if n < 3 {
        return Err(Error::invalid(format!("a cycle needs at least 3 nodes, got {n}")));
    }
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    Graph::from_edges(n, &edges)
}

pub fn complete_graph(n: usize) -> Result<Graph> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j));
        }
    }
    Graph::from_edges(n, &edges)
}

/// Random connected graph: a random spanning tree plus each remaining pair
/// independently with probability `extra_p`.
pub fn random_connected<R: Rng + ?Sized>(n: usize, extra_p: f64, rng: &mut R) -> Result<Graph> {
    if n == 0 {
        return Err(Error::invalid("graph needs at least one node"));
    }
    let mut edges = Vec::new();
    for i in 1..n {
        let parent = rng.random_range(0..i);
        edges.push((parent, i));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < extra_p {
                edges.push((i, j));
            }
        }
    }
    Graph::from_edges(n, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_invariants(g: &Graph) {
        assert_eq!(g.row_offsets()[0], 0);
        assert_eq!(*g.row_offsets().last().unwrap(), g.num_directed());
        for i in 0..g.num_nodes() {
            let row = g.neighbors(i);
            assert!(row.windows(2).all(|w| w[0] < w[1]), "row {i} not strictly increasing");
            for &j in row {
                assert_ne!(i, j);
                assert!(g.has_edge(j, i), "asymmetric entry {i}->{j}");
            }
        }
    }

    #[test]
    fn grid_counts() {
        let g = grid2d(10).unwrap();
        assert_eq!(g.num_nodes(), 100);
        // horizontal + vertical adjacencies, enumerated independently
        let mut count = 0;
        for r in 0..10 {
            for c in 0..10 {
                if c < 9 {
                    count += 1;
                }
                if r < 9 {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 180);
        assert_eq!(g.num_edges(), 180);
        check_invariants(&g);

        let g2 = grid2d(2).unwrap();
        assert_eq!(g2.num_nodes(), 4);
        assert_eq!(g2.num_edges(), 4);
        assert!(g2.degrees().iter().all(|&d| d == 2));

        let g3 = grid2d(3).unwrap();
        assert_eq!(g3.degree(4), 4);
        assert_eq!(g3.degree(0), 2);
        assert_eq!(g3.degree(1), 3);
    }

    #[test]
    fn grid_rejects_small_side() {
        assert!(matches!(grid2d(1), Err(Error::InvalidArgument(_))));
        assert!(grid2d(0).is_err());
    }

    #[test]
    fn from_edges_dedups_and_symmetrizes() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 0), (2, 1), (0, 1)]).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.neighbors(1), &[0, 2]);
        check_invariants(&g);
        assert!(Graph::from_edges(2, &[(0, 0)]).is_err());
        assert!(Graph::from_edges(2, &[(0, 2)]).is_err());
    }

    #[test]
    fn random_connected_is_connected() {
        let mut rng = crate::rng::rng_for(1, &[]);
        for _ in 0..20 {
            let g = random_connected(15, 0.1, &mut rng).unwrap();
            check_invariants(&g);
            assert!(is_connected(&g));
        }
    }
}
