//! Training sweeps: datasets, hyperparameter grids, records and replay.

use std::collections::BTreeMap;
use std::time::Instant;

use gradgate::gating::G2Config;
use gradgate::graph::{synthetic_homophily, synthetic_multiscale, LabeledDataset};
use gradgate::training::{grid_search, train, GridPoint, Task, TrainConfig, TrainResult};
use gradgate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Homophily { classes: usize, nodes: usize, h: f64, feat_dim: usize, seed: u64 },
    Multiscale { nodes: usize, seed: u64 },
}

impl DatasetSpec {
    pub fn build(&self) -> Result<LabeledDataset> {
        match *self {
            DatasetSpec::Homophily { classes, nodes, h, feat_dim, seed } => {
                synthetic_homophily(classes, nodes, h, feat_dim, seed)
            }
            DatasetSpec::Multiscale { nodes, seed } => synthetic_multiscale(nodes, seed),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            DatasetSpec::Homophily { .. } => Task::Classification,
            DatasetSpec::Multiscale { .. } => Task::Regression,
        }
    }
}

/// Axes searched per sweep point; the best validation metric wins.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperAxes {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub dropout_out: Vec<f64>,
    /// Only expanded for gated modes.
    pub p: Vec<f64>,
}

impl HyperAxes {
    /// Cartesian product over the axes, in lr, weight decay, dropout, p order.
    pub fn expand(&self, model: &G2Config, train: &TrainConfig) -> Vec<GridPoint> {
        let ps: Vec<f64> = if model.mode.is_gated() { self.p.clone() } else { vec![model.p] };
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &wd in &self.weight_decay {
                for &d in &self.dropout_out {
                    for &p in &ps {
                        let mut m = model.clone();
                        m.p = p;
                        let mut t = train.clone();
                        t.lr = lr;
                        t.weight_decay = wd;
                        t.dropout_out = d;
                        out.push(GridPoint { model: m, train: t });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub test_metric: f64,
    pub epochs_run: usize,
    pub param_count: usize,
}

impl From<&TrainResult> for Metrics {
    fn from(r: &TrainResult) -> Self {
        Metrics {
            best_val_metric: r.best_val_metric,
            best_epoch: r.best_epoch,
            test_metric: r.test_metric,
            epochs_run: r.epochs_run,
            param_count: r.param_count,
        }
    }
}

/// One trained sweep point. `dataset`, `model` and `train` are the
/// selected configuration and reproduce `metrics` when fed back to
/// [`replay`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub seed: u64,
    /// Sweep coordinates of this point, e.g. `{"h": 0.3, "model": "gcn"}`.
    pub point: BTreeMap<String, Json>,
    pub dataset: DatasetSpec,
    pub model: G2Config,
    pub train: TrainConfig,
    /// Grid size searched for this point.
    pub candidates: usize,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub experiment: String,
    pub seed: u64,
    pub point: BTreeMap<String, Json>,
    pub dataset: DatasetSpec,
    pub candidates: Vec<GridPoint>,
}

pub fn run_point(pt: &SweepPoint, timing: bool) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let data = pt.dataset.build()?;
    let (chosen, result) = match pt.candidates.as_slice() {
        [] => return Err(Error::InvalidArgument("sweep point has no candidates".into())),
        [only] => (only.clone(), train(&only.model, &data, &only.train)?),
        many => {
            let g = grid_search(many, &data, 1)?;
            let top = g.leaderboard.into_iter().next().expect("grid is non-empty");
            (top.point, top.result)
        }
    };
    Ok(ExperimentRecord {
        experiment: pt.experiment.clone(),
        seed: pt.seed,
        point: pt.point.clone(),
        dataset: pt.dataset.clone(),
        model: chosen.model,
        train: chosen.train,
        candidates: pt.candidates.len(),
        metrics: Metrics::from(&result),
        wall_time_ms: timing.then(|| start.elapsed().as_millis() as u64),
    })
}

/// Runs every point on `jobs` workers; records come back in input order.
pub fn run_sweep(points: &[SweepPoint], jobs: usize, timing: bool) -> Result<Vec<ExperimentRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| points.par_iter().map(|p| run_point(p, timing)).collect())
}

/// Retrains the record's echoed configuration; true iff every metric
/// matches bit for bit.
pub fn replay(record: &ExperimentRecord) -> Result<bool> {
    let data = record.dataset.build()?;
    let r = train(&record.model, &data, &record.train)?;
    let m = Metrics::from(&r);
    let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
    Ok(same(m.best_val_metric, record.metrics.best_val_metric)
        && same(m.test_metric, record.metrics.test_metric)
        && m.best_epoch == record.metrics.best_epoch
        && m.epochs_run == record.metrics.epochs_run
        && m.param_count == record.metrics.param_count)
}

pub fn to_json_lines(records: &[ExperimentRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_json_lines(text: &str) -> Result<Vec<ExperimentRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
