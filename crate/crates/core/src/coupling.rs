//! Local coupling functions: GCN convolution, single-head GAT attention,
//! GraphSAGE aggregation, and fixed right-stochastic matrices.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Aggregation, Endpoint, ParamId, ParamStore, Tape, Value};
use crate::error::{Error, Result};
use crate::graph::{Adjacency, Graph};
use crate::matrix::Matrix;
use crate::rng::rng_for;

pub const GAT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Gcn,
    Gat,
    Sage,
}

impl std::fmt::Display for CouplingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CouplingKind::Gcn => "gcn",
            CouplingKind::Gat => "gat",
            CouplingKind::Sage => "sage",
        })
    }
}

fn default_aggregation() -> Aggregation {
    Aggregation::Mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub kind: CouplingKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Neighbor aggregation for SAGE.
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    /// GAT attention width; must equal `out_dim` when given.
    #[serde(default)]
    pub attention_dim: Option<usize>,
}

impl CouplingConfig {
    pub fn new(kind: CouplingKind, in_dim: usize, out_dim: usize) -> Self {
        CouplingConfig { kind, in_dim, out_dim, aggregation: Aggregation::Mean, attention_dim: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid("coupling dimensions must be at least 1"));
        }
        if let Some(a) = self.attention_dim {
            if a != self.out_dim {
                return Err(Error::invalid(format!(
                    "attention_dim {a} must equal out_dim {} for single-head attention",
                    self.out_dim
                )));
            }
        }
        Ok(())
    }

    /// Number of scalar parameters the coupling owns.
    pub fn param_count(&self) -> usize {
        match self.kind {
            CouplingKind::Gcn => self.in_dim * self.out_dim,
            CouplingKind::Gat => self.in_dim * self.out_dim + 2 * self.out_dim,
            CouplingKind::Sage => 2 * self.in_dim * self.out_dim,
        }
    }
}

/// Graph-derived structures shared by every layer on one graph.
#[derive(Debug, Clone)]
pub struct GraphContext {
    graph: Graph,
    neighbors: Arc<Adjacency>,
    with_self: Arc<Adjacency>,
    gcn_weights: Arc<Vec<f64>>,
}

impl GraphContext {
    pub fn new(graph: Graph) -> Self {
        let neighbors = Arc::new(Adjacency::new(&graph, false));
        let with_self = Arc::new(Adjacency::new(&graph, true));
        let deg = graph.degrees();
        let gcn_weights = (0..with_self.num_entries())
            .map(|e| {
                let (i, j) = (with_self.target(e), with_self.source(e));
                1.0 / (((deg[i] + 1) * (deg[j] + 1)) as f64).sqrt()
            })
            .collect();
        GraphContext { graph, neighbors, with_self, gcn_weights: Arc::new(gcn_weights) }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    /// `N_i`, without self-loops.
    pub fn neighbors(&self) -> &Arc<Adjacency> {
        &self.neighbors
    }

    /// `N_i ∪ {i}`.
    pub fn with_self_loops(&self) -> &Arc<Adjacency> {
        &self.with_self
    }

    /// Entries of `D^{-1/2}(A + I)D^{-1/2}` aligned with [`Self::with_self_loops`].
    pub fn gcn_weights(&self) -> &Arc<Vec<f64>> {
        &self.gcn_weights
    }
}

/// Parameter handles of one coupling instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub config: CouplingConfig,
    params: Vec<ParamId>,
}

/// A coupling whose parameters are recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundCoupling {
    config: CouplingConfig,
    values: Vec<Value>,
}

impl Coupling {
    /// Registers Glorot-uniform weights under `prefix` in `store`.
    pub fn init<R: Rng + ?Sized>(
        config: CouplingConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (i, o) = (config.in_dim, config.out_dim);
        let params = match config.kind {
            CouplingKind::Gcn => vec![store.add(format!("{prefix}.w"), Matrix::glorot(i, o, rng))],
            CouplingKind::Gat => {
                let w = store.add(format!("{prefix}.w"), Matrix::glorot(i, o, rng));
                let a = Matrix::glorot(2 * o, 1, rng).into_vec();
                let a_dst = store.add(format!("{prefix}.a_dst"), Matrix::column(a[..o].to_vec()));
                let a_src = store.add(format!("{prefix}.a_src"), Matrix::column(a[o..].to_vec()));
                vec![w, a_dst, a_src]
            }
            CouplingKind::Sage => vec![
                store.add(format!("{prefix}.w_self"), Matrix::glorot(i, o, rng)),
                store.add(format!("{prefix}.w_neigh"), Matrix::glorot(i, o, rng)),
            ],
        };
        Ok(Coupling { config, params })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> BoundCoupling {
        BoundCoupling { config: self.config.clone(), values: self.params.iter().map(|&p| tape.param(store, p)).collect() }
    }
}

impl BoundCoupling {
    pub fn config(&self) -> &CouplingConfig {
        &self.config
    }

    /// Attention coefficients over `N_i ∪ {i}` as an entry column (GAT only).
    pub fn attention(&self, tape: &mut Tape, ctx: &GraphContext, x: Value) -> Result<Value> {
        if self.config.kind != CouplingKind::Gat {
            return Err(Error::invalid("attention coefficients exist only for gat"));
        }
        let h = tape.matmul(x, self.values[0])?;
        self.attention_from(tape, ctx, h)
    }

    fn attention_from(&self, tape: &mut Tape, ctx: &GraphContext, h: Value) -> Result<Value> {
        let adj = ctx.with_self_loops();
        let s_dst = tape.matmul(h, self.values[1])?;
        let s_src = tape.matmul(h, self.values[2])?;
        let e_dst = tape.gather(s_dst, adj, Endpoint::Target)?;
        let e_src = tape.gather(s_src, adj, Endpoint::Source)?;
        let logits = tape.add(e_dst, e_src)?;
        let logits = tape.leaky_relu(logits, GAT_LEAKY_SLOPE);
        tape.segment_softmax(logits, adj)
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &GraphContext, x: Value) -> Result<Value> {
        if x.cols() != self.config.in_dim || x.rows() != ctx.num_nodes() {
            return Err(Error::invalid(format!(
                "coupling expects {}x{} input, got {:?}",
                ctx.num_nodes(),
                self.config.in_dim,
                x.shape()
            )));
        }
        match self.config.kind {
            CouplingKind::Gcn => {
                let h = tape.matmul(x, self.values[0])?;
                tape.sparse_matmul(ctx.with_self_loops(), ctx.gcn_weights(), h)
            }
            CouplingKind::Gat => {
                let h = tape.matmul(x, self.values[0])?;
                let alpha = self.attention_from(tape, ctx, h)?;
                tape.edge_weighted_aggregate(alpha, h, ctx.with_self_loops())
            }
            CouplingKind::Sage => {
                let own = tape.matmul(x, self.values[0])?;
                let agg = tape.neighbor_aggregate(x, ctx.neighbors(), self.config.aggregation)?;
                let neigh = tape.matmul(agg, self.values[1])?;
                tape.add(own, neigh)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StochasticMode {
    Uniform,
    /// Row-normalized draws from `U[0.1, 1]`.
    Random { seed: u64 },
}

/// Right-stochastic coupling over neighborhoods, one weight per stored
/// directed edge aligned with [`Graph::col_indices`]. Diagonal entries are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMatrix {
    graph: Graph,
    weights: Vec<f64>,
}

pub fn make_right_stochastic(graph: &Graph, mode: StochasticMode) -> Result<StochasticMatrix> {
    if let Some(i) = (0..graph.num_nodes()).find(|&i| graph.degree(i) == 0) {
        return Err(Error::invalid(format!("node {i} is isolated; its row cannot sum to 1")));
    }
    let mut weights = Vec::with_capacity(graph.num_directed());
    match mode {
        StochasticMode::Uniform => {
            for i in 0..graph.num_nodes() {
                let w = 1.0 / graph.degree(i) as f64;
                weights.extend(std::iter::repeat_n(w, graph.degree(i)));
            }
        }
        StochasticMode::Random { seed } => {
            let mut rng = rng_for(seed, &[]);
            for i in 0..graph.num_nodes() {
                let raw: Vec<f64> = (0..graph.degree(i)).map(|_| rng.random_range(0.1..=1.0)).collect();
                let z: f64 = raw.iter().sum();
                weights.extend(raw.iter().map(|r| r / z));
            }
        }
    }
    Ok(StochasticMatrix { graph: graph.clone(), weights })
}

impl StochasticMatrix {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Weights of row `i`, aligned with `graph.neighbors(i)`.
    pub fn row(&self, i: usize) -> &[f64] {
        let o = self.graph.row_offsets();
        &self.weights[o[i]..o[i + 1]]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self.graph.neighbors(i).binary_search(&j) {
            Ok(k) => self.row(i)[k],
            Err(_) => 0.0,
        }
    }

    /// `ā`, the smallest stored entry.
    pub fn min_entry(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.graph.num_nodes()).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.graph.edges().all(|(i, j)| (self.get(i, j) - self.get(j, i)).abs() <= tol)
    }

    /// `Y_i = Σ_{j∈N_i} A_ij x_j` for a node column.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.graph.neighbors(i).iter().zip(self.row(i)).map(|(&j, &a)| a * x[j]).sum();
        }
    }
}
