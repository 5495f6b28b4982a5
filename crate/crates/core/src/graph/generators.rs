//! Seeded synthetic datasets for node classification and regression.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{rng_for, stream};

use super::Graph;

/// Per-node supervision.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes { labels: Vec<usize>, num_classes: usize },
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { labels, .. } => labels.len(),
            Labels::Targets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    /// Every node in exactly one split.
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.train.len() != num_nodes || self.val.len() != num_nodes || self.test.len() != num_nodes
        {
            return Err(Error::invalid("split masks must have one entry per node"));
        }
        for i in 0..num_nodes {
            let n = self.train[i] as u8 + self.val[i] as u8 + self.test[i] as u8;
            if n != 1 {
                return Err(Error::invalid(format!("node {i} belongs to {n} splits")));
            }
        }
        Ok(())
    }

    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub graph: Graph,
    pub features: Matrix,
    pub labels: Labels,
    pub splits: SplitMasks,
}

impl LabeledDataset {
    pub fn validate(&self) -> Result<()> {
        let v = self.graph.num_nodes();
        if self.features.rows() != v || self.labels.len() != v {
            return Err(Error::invalid("features and labels must have one row per node"));
        }
        if let Labels::Classes { labels, num_classes } = &self.labels {
            if let Some(&bad) = labels.iter().find(|&&c| c >= *num_classes) {
                return Err(Error::invalid(format!("label {bad} exceeds class count {num_classes}")));
            }
        }
        self.splits.validate(v)
    }

    /// Fraction of undirected edges whose endpoints share a class. `None`
    /// for regression datasets or edgeless graphs.
    pub fn edge_homophily(&self) -> Option<f64> {
        match &self.labels {
            Labels::Classes { labels, .. } => edge_homophily(&self.graph, labels),
            Labels::Targets(_) => None,
        }
    }
}

pub fn edge_homophily(graph: &Graph, labels: &[usize]) -> Option<f64> {
    let (mut same, mut total) = (0usize, 0usize);
    for (i, j) in graph.edges() {
        total += 1;
        same += (labels[i] == labels[j]) as usize;
    }
    (total > 0).then(|| same as f64 / total as f64)
}

/// Mean degree of the planted-partition graphs.
const MEAN_DEGREE: usize = 8;
const MAX_REDRAWS: usize = 1000;

/// Planted partition with an exact intra-class edge budget.
///
/// `nodes * MEAN_DEGREE / 2` edges are drawn; edge `k` starts at node
/// `k mod nodes`, so every node owns at least `MEAN_DEGREE / 2` edges. A
/// random subset of `round(h * E)` draws picks its partner inside the class,
/// the rest outside it. Duplicate draws are redrawn.
fn planted_graph<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    target_h: f64,
    rng: &mut R,
) -> Result<Graph> {
    let n = labels.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let total = n * MEAN_DEGREE / 2;
    let intra = (target_h * total as f64).round() as usize;
    let intra_capacity: usize = members.iter().map(|m| m.len() * m.len().saturating_sub(1) / 2).sum();
    if intra > intra_capacity {
        return Err(Error::Construction(format!(
            "homophily {target_h} needs {intra} intra-class edges but only {intra_capacity} exist"
        )));
    }
    if intra < total && num_classes < 2 {
        return Err(Error::Construction("cross-class edges need at least two classes".into()));
    }
    let mut kinds: Vec<bool> = (0..total).map(|k| k < intra).collect();
    kinds.shuffle(rng);

    let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(total);
    let mut edges = Vec::with_capacity(total);
    for (k, &is_intra) in kinds.iter().enumerate() {
        let mut u = k % n;
        let mut placed = false;
        for attempt in 0..MAX_REDRAWS {
            if attempt > 0 && attempt % 10 == 0 {
                // the owner may be saturated; move the draw elsewhere
                u = rng.random_range(0..n);
            }
            let cu = labels[u];
            let w = if is_intra {
                let pool = &members[cu];
                if pool.len() < 2 {
                    continue;
                }
                pool[rng.random_range(0..pool.len())]
            } else {
                let other = (cu + 1 + rng.random_range(0..num_classes - 1)) % num_classes;
                let pool = &members[other];
                if pool.is_empty() {
                    continue;
                }
                pool[rng.random_range(0..pool.len())]
            };
            if w == u {
                continue;
            }
            let key = (u.min(w), u.max(w));
            if seen.insert(key) {
                edges.push(key);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Construction(format!(
                "could not place edge {k} after {MAX_REDRAWS} draws"
            )));
        }
    }
    Graph::from_edges(n, &edges)
}

/// Stratified 48/32/20 split: within each stratum, shuffled members are
/// cut at `round(0.48 n)` and `round(0.80 n)`.
pub(crate) fn stratified_split<R: Rng + ?Sized>(
    strata: &[usize],
    num_strata: usize,
    rng: &mut R,
) -> SplitMasks {
    let n = strata.len();
    let mut masks = SplitMasks { train: vec![false; n], val: vec![false; n], test: vec![false; n] };
    for s in 0..num_strata {
        let mut members: Vec<usize> = (0..n).filter(|&i| strata[i] == s).collect();
        members.shuffle(rng);
        let cnt = members.len() as f64;
        let a = (0.48 * cnt).round() as usize;
        let b = (0.80 * cnt).round() as usize;
        for (k, &i) in members.iter().enumerate() {
            if k < a {
                masks.train[i] = true;
            } else if k < b {
                masks.val[i] = true;
            } else {
                masks.test[i] = true;
            }
        }
    }
    masks
}

pub fn synthetic_homophily(
    classes: usize,
    nodes: usize,
    target_h: f64,
    feat_dim: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 1 || feat_dim < 1 {
        return Err(Error::invalid("classes and feat_dim must be at least 1"));
    }
    if nodes < 10 * classes {
        return Err(Error::invalid(format!(
            "need at least {} nodes for {classes} classes, got {nodes}",
            10 * classes
        )));
    }
    if !(0.0..=1.0).contains(&target_h) {
        return Err(Error::invalid(format!("target homophily {target_h} outside [0, 1]")));
    }
    let labels: Vec<usize> = (0..nodes).map(|i| i % classes).collect();
    let graph = planted_graph(&labels, classes, target_h, &mut rng_for(seed, &[stream::GRAPH]))?;

    let mut frng = rng_for(seed, &[stream::FEATURES]);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Matrix::zeros(nodes, feat_dim);
    for i in 0..nodes {
        let hot = labels[i] % feat_dim;
        for (k, x) in features.row_mut(i).iter_mut().enumerate() {
            *x = if k == hot { 3.0 } else { 0.0 } + noise.sample(&mut frng);
        }
    }
    let splits = stratified_split(&labels, classes, &mut rng_for(seed, &[stream::SPLIT]));
    Ok(LabeledDataset { graph, features, labels: Labels::Classes { labels, num_classes: classes }, splits })
}

/// Latent target bins wired together by the planted-partition generator.
const MULTISCALE_BINS: usize = 5;
const MULTISCALE_HOMOPHILY: f64 = 0.22;
const MULTISCALE_FEATURES: usize = 16;

/// Regression dataset with targets spread log-uniformly over five decades,
/// normalized by their maximum into `(0, 1]`.
pub fn synthetic_multiscale(nodes: usize, seed: u64) -> Result<LabeledDataset> {
    if nodes < 100 {
        return Err(Error::invalid(format!("need at least 100 nodes, got {nodes}")));
    }
    let mut trng = rng_for(seed, &[stream::TARGETS]);
    let raw: Vec<f64> = (0..nodes).map(|_| 10f64.powf(trng.random_range(-5.0..=0.0))).collect();
    let top = raw.iter().copied().fold(0.0, f64::max);
    let targets: Vec<f64> = raw.iter().map(|t| t / top).collect();

    let mut order: Vec<usize> = (0..nodes).collect();
    order.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]).then(a.cmp(&b)));
    let mut bins = vec![0usize; nodes];
    for (rank, &i) in order.iter().enumerate() {
        bins[i] = rank * MULTISCALE_BINS / nodes;
    }
    let graph = planted_graph(
        &bins,
        MULTISCALE_BINS,
        MULTISCALE_HOMOPHILY,
        &mut rng_for(seed, &[stream::GRAPH]),
    )?;

    let mut frng = rng_for(seed, &[stream::FEATURES]);
    let signal_noise = Normal::new(0.0, 0.5).expect("valid normal");
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Matrix::zeros(nodes, MULTISCALE_FEATURES);
    for i in 0..nodes {
        let row = features.row_mut(i);
        row[0] = targets[i].log10() + signal_noise.sample(&mut frng);
        for x in &mut row[1..] {
            *x = noise.sample(&mut frng);
        }
    }
    let splits = stratified_split(&bins, MULTISCALE_BINS, &mut rng_for(seed, &[stream::SPLIT]));
    Ok(LabeledDataset { graph, features, labels: Labels::Targets(targets), splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homophily_knob_is_respected() {
        for &h in &[0.0, 0.3, 0.6, 0.99] {
            let ds = synthetic_homophily(5, 500, h, 16, 7).unwrap();
            ds.validate().unwrap();
            let got = ds.edge_homophily().unwrap();
            assert!((got - h).abs() <= 0.02, "target {h}, realized {got}");
        }
        let ds = synthetic_homophily(2, 200, 0.0, 4, 1).unwrap();
        assert!(ds.edge_homophily().unwrap() <= 0.02);
    }

    #[test]
    fn classes_balanced_and_splits_stratified() {
        let ds = synthetic_homophily(5, 503, 0.5, 8, 3).unwrap();
        let Labels::Classes { labels, .. } = &ds.labels else { panic!() };
        let mut counts = [0usize; 5];
        for &c in labels {
            counts[c] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let train = ds.splits.train.iter().filter(|&&m| m).count() as f64;
        assert!((train / 503.0 - 0.48).abs() < 0.01);
    }

    #[test]
    fn infeasible_and_invalid_inputs() {
        assert!(matches!(synthetic_homophily(5, 40, 0.5, 4, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(synthetic_homophily(1, 20, 0.5, 4, 0), Err(Error::Construction(_))));
        assert!(synthetic_multiscale(99, 0).is_err());
    }

    #[test]
    fn multiscale_ranges() {
        let ds = synthetic_multiscale(1000, 11).unwrap();
        ds.validate().unwrap();
        let Labels::Targets(t) = &ds.labels else { panic!() };
        assert!(t.iter().all(|&y| (0.0..=1.0).contains(&y)));
        let max = t.iter().copied().fold(0.0, f64::max);
        let min = t.iter().copied().fold(1.0, f64::min);
        assert!(max / min >= 1e4);
    }
}
