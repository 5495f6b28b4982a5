use crate::error::{Error, Result};
use crate::matrix::Matrix;

use super::Graph;

/// Graph gradient `(∇y)_ij = y_j − y_i`, one value per stored directed
/// entry, aligned with [`Graph::col_indices`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGradient {
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl EdgeGradient {
    /// Value at the ordered pair `(i, j)`, or `None` if `i` and `j` are not adjacent.
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let row = &self.col_indices[self.row_offsets[i]..self.row_offsets[i + 1]];
        row.binary_search(&j).ok().map(|k| self.values[self.row_offsets[i] + k])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.row_offsets.len() - 1).flat_map(move |i| {
            (self.row_offsets[i]..self.row_offsets[i + 1])
                .map(move |k| (i, self.col_indices[k], self.values[k]))
        })
    }
}

fn check_rows(graph: &Graph, rows: usize, what: &str) -> Result<()> {
    if rows != graph.num_nodes() {
        return Err(Error::invalid(format!(
            "{what} has {rows} rows but the graph has {} nodes",
            graph.num_nodes()
        )));
    }
    Ok(())
}

pub fn graph_gradient(graph: &Graph, y: &[f64]) -> Result<EdgeGradient> {
    check_rows(graph, y.len(), "node field")?;
    let mut values = Vec::with_capacity(graph.num_directed());
    for i in 0..graph.num_nodes() {
        for &j in graph.neighbors(i) {
            values.push(y[j] - y[i]);
        }
    }
    Ok(EdgeGradient {
        row_offsets: graph.row_offsets().to_vec(),
        col_indices: graph.col_indices().to_vec(),
        values,
    })
}

/// `(1/v) Σ_i Σ_{j∈N_i} ‖X_i − X_j‖²` over ordered pairs.
pub fn dirichlet_energy(graph: &Graph, x: &Matrix) -> Result<f64> {
    check_rows(graph, x.rows(), "feature matrix")?;
    let v = graph.num_nodes();
    if v == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..v {
        let xi = x.row(i);
        for &j in graph.neighbors(i) {
            total += xi.iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(total / v as f64)
}

/// Relative cutoff below which a row counts as degenerate for [`mad`].
const MAD_DEGENERATE_REL: f64 = 1e-12;

/// Mean cosine distance over adjacent ordered pairs.
///
/// A row is degenerate when it is exactly zero or its norm is at most
/// `1e-12` times the largest row norm. Two degenerate rows are at distance
/// 0, a degenerate and a regular row at distance 1. Graphs without edges
/// have MAD 0.
pub fn mad(graph: &Graph, x: &Matrix) -> Result<f64> {
    check_rows(graph, x.rows(), "feature matrix")?;
    let norms: Vec<f64> =
        (0..x.rows()).map(|i| x.row(i).iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    let degenerate: Vec<bool> =
        norms.iter().map(|&n| n == 0.0 || n <= MAD_DEGENERATE_REL * max_norm).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..graph.num_nodes() {
        for &j in graph.neighbors(i) {
            count += 1;
            total += match (degenerate[i], degenerate[j]) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                (false, false) => {
                    let dot: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
                    (1.0 - dot / (norms[i] * norms[j])).clamp(0.0, 2.0)
                }
            };
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn is_connected(graph: &Graph) -> bool {
    graph.num_nodes() == 0 || graph.bfs_distances(0).iter().all(Option::is_some)
}

/// Largest BFS distance from `node`. Fails with a domain error naming an
/// unreachable node when the graph is disconnected.
pub fn eccentricity(graph: &Graph, node: usize) -> Result<usize> {
    if node >= graph.num_nodes() {
        return Err(Error::invalid(format!(
            "node {node} out of range for {} nodes",
            graph.num_nodes()
        )));
    }
    let dist = graph.bfs_distances(node);
    let mut ecc = 0;
    for (k, d) in dist.iter().enumerate() {
        match d {
            Some(d) => ecc = ecc.max(*d),
            None => {
                return Err(Error::Domain(format!(
                    "graph is disconnected: node {k} unreachable from node {node}"
                )))
            }
        }
    }
    Ok(ecc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincareReport {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `Σ y_i² ≤ d̄ Δ_anchor Σ_i Σ_{j∈N_i} (y_j − y_i)²` for a field
/// vanishing at `anchor`.
pub fn poincare_check(graph: &Graph, y: &[f64], anchor: usize) -> Result<PoincareReport> {
    check_rows(graph, y.len(), "node field")?;
    let ecc = eccentricity(graph, anchor)?;
    if y[anchor] != 0.0 {
        return Err(Error::Precondition(format!(
            "field must vanish at the anchor node {anchor}, found {}",
            y[anchor]
        )));
    }
    let lhs: f64 = y.iter().map(|a| a * a).sum();
    let mut grad_sq = 0.0;
    for i in 0..graph.num_nodes() {
        for &j in graph.neighbors(i) {
            grad_sq += (y[j] - y[i]) * (y[j] - y[i]);
        }
    }
    let rhs = graph.max_degree() as f64 * ecc as f64 * grad_sq;
    Ok(PoincareReport { lhs, rhs, holds: lhs <= rhs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{complete_graph, grid2d, path_graph};

    #[test]
    fn gradient_examples() {
        let g = path_graph(2).unwrap();
        let grad = graph_gradient(&g, &[3.0, 5.0]).unwrap();
        assert_eq!(grad.get(0, 1), Some(2.0));
        assert_eq!(grad.get(1, 0), Some(-2.0));

        let tri = complete_graph(3).unwrap();
        let grad = graph_gradient(&tri, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(grad.get(0, 1), Some(1.0));
        assert_eq!(grad.get(0, 2), Some(2.0));
        assert_eq!(grad.get(1, 2), Some(1.0));
        assert_eq!(grad.get(2, 0), Some(-2.0));
        assert!(graph_gradient(&tri, &[0.0]).is_err());
    }

    #[test]
    fn energy_triangle() {
        let tri = complete_graph(3).unwrap();
        let x = Matrix::column(vec![0.0, 1.0, 2.0]);
        assert!((dirichlet_energy(&tri, &x).unwrap() - 4.0).abs() < 1e-15);
        assert_eq!(dirichlet_energy(&tri, &Matrix::filled(3, 2, 1.5)).unwrap(), 0.0);
    }

    #[test]
    fn mad_examples() {
        let g = path_graph(2).unwrap();
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((mad(&g, &x).unwrap() - 1.0).abs() < 1e-15);
        let c = Matrix::filled(2, 3, 0.7);
        assert!(mad(&g, &c).unwrap().abs() < 1e-15);
        assert_eq!(mad(&g, &Matrix::zeros(2, 3)).unwrap(), 0.0);
        let half = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(mad(&g, &half).unwrap(), 1.0);
    }

    #[test]
    fn eccentricity_examples() {
        assert_eq!(eccentricity(&path_graph(5).unwrap(), 0).unwrap(), 4);
        assert_eq!(eccentricity(&complete_graph(4).unwrap(), 2).unwrap(), 1);
        assert_eq!(eccentricity(&grid2d(10).unwrap(), 0).unwrap(), 18);
        let split = Graph::from_edges(3, &[(0, 1)]).unwrap();
        assert!(matches!(eccentricity(&split, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn poincare_examples() {
        let p3 = path_graph(3).unwrap();
        let r = poincare_check(&p3, &[0.0, 1.0, 2.0], 0).unwrap();
        assert_eq!((r.lhs, r.rhs, r.holds), (5.0, 16.0, true));
        let r = poincare_check(&p3, &[0.0; 3], 1).unwrap();
        assert_eq!((r.lhs, r.rhs, r.holds), (0.0, 0.0, true));
        assert!(matches!(poincare_check(&p3, &[1.0, 0.0, 0.0], 0), Err(Error::Precondition(_))));
    }
}
