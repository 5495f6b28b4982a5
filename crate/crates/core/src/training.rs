//! Full-batch training of encoder → gated stack → decoder networks.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Value};
use crate::coupling::GraphContext;
use crate::error::{Error, Result};
use crate::gating::{G2Config, GatedStack};
use crate::graph::{LabeledDataset, Labels, SplitMasks};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

fn default_lr() -> f64 {
    5e-3
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_epochs() -> usize {
    1000
}
fn default_patience() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub dropout_in: f64,
    #[serde(default)]
    pub dropout_out: f64,
    pub hidden_dim: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    pub task: Task,
}

impl TrainConfig {
    pub fn new(task: Task, hidden_dim: usize) -> Self {
        TrainConfig {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            dropout_in: 0.0,
            dropout_out: 0.0,
            hidden_dim,
            epochs: default_epochs(),
            patience: default_patience(),
            seed: 0,
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        for d in [self.dropout_in, self.dropout_out] {
            if !(0.0..=0.9).contains(&d) {
                return Err(Error::invalid(format!("dropout must lie in [0, 0.9], got {d}")));
            }
        }
        if self.epochs == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("epochs and hidden_dim must be at least 1"));
        }
        Ok(())
    }
}

/// Dropout applied in a training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DropoutPlan {
    pub input: f64,
    pub output: f64,
    pub seed: u64,
}

/// `relu(X·W_enc + b_enc)` → gated stack → `X·W_dec + b_dec`.
#[derive(Debug, Clone)]
pub struct Network {
    pub stack: GatedStack,
    enc_w: ParamId,
    enc_b: ParamId,
    dec_w: ParamId,
    dec_b: ParamId,
}

impl Network {
    pub fn init<R: Rng + ?Sized>(
        stack: G2Config,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("network dimensions must be at least 1"));
        }
        let m = stack.width();
        let enc_w = store.add("enc.w", Matrix::glorot(in_dim, m, rng));
        let enc_b = store.add("enc.b", Matrix::zeros(1, m));
        let stack = GatedStack::init(stack, store, "stack", rng)?;
        let dec_w = store.add("dec.w", Matrix::glorot(m, out_dim, rng));
        let dec_b = store.add("dec.b", Matrix::zeros(1, out_dim));
        Ok(Network { stack, enc_w, enc_b, dec_w, dec_b })
    }

    pub fn param_count(stack: &G2Config, in_dim: usize, out_dim: usize) -> usize {
        let m = stack.width();
        in_dim * m + m + stack.param_count() + m * out_dim + out_dim
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &GraphContext,
        x: &Matrix,
        dropout: Option<DropoutPlan>,
    ) -> Result<Value> {
        let train = dropout.is_some();
        let plan = dropout.unwrap_or(DropoutPlan { input: 0.0, output: 0.0, seed: 0 });
        let mut h = tape.constant(x.clone());
        h = tape.dropout(h, plan.input, derive_seed(plan.seed, &[0]), train)?;
        let w = tape.param(store, self.enc_w);
        let b = tape.param(store, self.enc_b);
        h = tape.matmul(h, w)?;
        h = tape.add(h, b)?;
        h = tape.relu(h);
        let bound = self.stack.bind(tape, store);
        h = bound.forward(tape, ctx, h)?;
        h = tape.dropout(h, plan.output, derive_seed(plan.seed, &[1]), train)?;
        let w = tape.param(store, self.dec_w);
        let b = tape.param(store, self.dec_b);
        let out = tape.matmul(h, w)?;
        tape.add(out, b)
    }
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |p: &crate::autodiff::Parameter| Matrix::zeros(p.value.rows(), p.value.cols());
        AdamState { m: store.iter().map(zeros).collect(), v: store.iter().map(zeros).collect(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

/// One Adam update from the accumulated gradients, with weight decay
/// decoupled from the moment estimates.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid("optimizer state does not match the parameter store"));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let g = store.grad(id).clone();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if m.shape() != g.shape() {
            return Err(Error::invalid("optimizer state shape mismatch"));
        }
        let w = store.value_mut(id);
        for (((w, &g), m), v) in
            w.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let step = (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            *w -= lr * (step + weight_decay * *w);
        }
    }
    Ok(())
}

/// Training loss: mean cross-entropy for classification, NMSE for regression.
pub fn loss(tape: &mut Tape, out: Value, labels: &Labels, mask: &[usize]) -> Result<Value> {
    let idx = Arc::new(mask.to_vec());
    match labels {
        Labels::Classes { labels, .. } => tape.cross_entropy(out, &Arc::new(labels.clone()), &idx),
        Labels::Targets(t) => tape.nmse(out, &Arc::new(t.clone()), &idx),
    }
}

/// Fraction of rows in `mask` whose arg-max (lowest index on ties) hits the label.
pub fn accuracy(logits: &Matrix, labels: &[usize], mask: &[usize]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let hits = mask
        .iter()
        .filter(|&&i| {
            let row = logits.row(i);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best == labels[i]
        })
        .count();
    hits as f64 / mask.len() as f64
}

/// `Σ(ŷ − y)² / Σ(y − ȳ)²` over `mask`, with `ȳ` the masked mean.
pub fn nmse_value(pred: &[f64], targets: &[f64], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("nmse over an empty mask"));
    }
    let mean = mask.iter().map(|&i| targets[i]).sum::<f64>() / mask.len() as f64;
    let denom: f64 = mask.iter().map(|&i| (targets[i] - mean).powi(2)).sum();
    if !(denom > 0.0) {
        return Err(Error::invalid("nmse undefined for constant targets"));
    }
    let num: f64 = mask.iter().map(|&i| (pred[i] - targets[i]).powi(2)).sum();
    Ok(num / denom)
}

fn metric(task: Task, out: &Matrix, labels: &Labels, mask: &[usize]) -> Result<f64> {
    match (task, labels) {
        (Task::Classification, Labels::Classes { labels, .. }) => Ok(accuracy(out, labels, mask)),
        (Task::Regression, Labels::Targets(t)) => nmse_value(out.as_slice(), t, mask),
        _ => Err(Error::invalid("task does not match the dataset labels")),
    }
}

/// Higher is better: accuracy as is, NMSE negated.
fn score(task: Task, m: f64) -> f64 {
    match task {
        Task::Classification => m,
        Task::Regression => -m,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    /// Accuracy for classification, NMSE for regression.
    pub best_val_metric: f64,
    pub best_epoch: usize,
    /// Test metric of the best-validation epoch.
    pub test_metric: f64,
    pub epochs_run: usize,
    pub param_count: usize,
    pub metric_per_epoch: Vec<EpochMetrics>,
}

pub fn train(model: &G2Config, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    data.validate()?;
    if model.width() != cfg.hidden_dim {
        return Err(Error::invalid(format!(
            "stack width {} differs from hidden_dim {}",
            model.width(),
            cfg.hidden_dim
        )));
    }
    let out_dim = match (&data.labels, cfg.task) {
        (Labels::Classes { num_classes, .. }, Task::Classification) => *num_classes,
        (Labels::Targets(_), Task::Regression) => 1,
        _ => return Err(Error::invalid("task does not match the dataset labels")),
    };
    let in_dim = data.features.cols();
    let train_idx = SplitMasks::indices(&data.splits.train);
    let val_idx = SplitMasks::indices(&data.splits.val);
    let test_idx = SplitMasks::indices(&data.splits.test);
    if train_idx.is_empty() || val_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::invalid("every split must hold at least one node"));
    }

    let ctx = GraphContext::new(data.graph.clone());
    let mut store = ParamStore::new();
    let net = Network::init(model.clone(), in_dim, out_dim, &mut store, &mut rng_for(cfg.seed, &[stream::INIT]))?;
    let param_count = store.num_elements();
    let mut adam = AdamState::new(&store);

    let mut history = Vec::new();
    let (mut best_val, mut best_test, mut best_epoch) = (f64::NAN, f64::NAN, 0);
    for epoch in 0..cfg.epochs {
        let plan = DropoutPlan {
            input: cfg.dropout_in,
            output: cfg.dropout_out,
            seed: derive_seed(cfg.seed, &[stream::DROPOUT, epoch as u64]),
        };
        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &store, &ctx, &data.features, Some(plan))?;
        let l = loss(&mut tape, out, &data.labels, &train_idx)?;
        let train_loss = tape.value(l).get(0, 0);
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: train_loss });
        }
        store.zero_grads();
        tape.backward_into(l, &mut store)?;
        drop(tape);
        adam_step(&mut store, &mut adam, cfg.lr, cfg.weight_decay)?;

        let mut tape = Tape::new();
        let out = net.forward(&mut tape, &store, &ctx, &data.features, None)?;
        let out = tape.value(out);
        if !out.all_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let val = metric(cfg.task, out, &data.labels, &val_idx)?;
        history.push(EpochMetrics { epoch, train_loss, val_metric: val });
        if best_val.is_nan() || score(cfg.task, val) > score(cfg.task, best_val) {
            best_val = val;
            best_epoch = epoch;
            best_test = metric(cfg.task, out, &data.labels, &test_idx)?;
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    Ok(TrainResult {
        best_val_metric: best_val,
        best_epoch,
        test_metric: best_test,
        epochs_run: history.len(),
        param_count,
        metric_per_epoch: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub model: G2Config,
    pub train: TrainConfig,
}

impl GridPoint {
    fn sort_key(&self) -> String {
        serde_json::to_string(self).expect("grid points serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub point: GridPoint,
    pub result: TrainResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridPoint,
    /// Best validation metric first; ties in lexicographic order of the
    /// serialized point.
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// Trains every point on up to `jobs` threads and ranks by validation metric.
pub fn grid_search(points: &[GridPoint], data: &LabeledDataset, jobs: usize) -> Result<GridResult> {
    if points.is_empty() {
        return Err(Error::invalid("grid is empty"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<TrainResult>> =
        pool.install(|| points.par_iter().map(|p| train(&p.model, data, &p.train)).collect());
    let mut board = Vec::with_capacity(points.len());
    for (p, r) in points.iter().zip(results) {
        board.push((p.sort_key(), LeaderboardEntry { point: p.clone(), result: r? }));
    }
    board.sort_by(|(ka, a), (kb, b)| {
        let (sa, sb) = (
            score(a.point.train.task, a.result.best_val_metric),
            score(b.point.train.task, b.result.best_val_metric),
        );
        sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| ka.cmp(kb))
    });
    let leaderboard: Vec<_> = board.into_iter().map(|(_, e)| e).collect();
    Ok(GridResult { best: leaderboard[0].point.clone(), leaderboard })
}

/// Search ranges: endpoints and midpoints (geometric for log-uniform axes).
#[derive(Debug, Clone, PartialEq)]
pub struct HpGrid {
    pub lr: Vec<f64>,
    pub hidden_dim: Vec<usize>,
    pub dropout: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub p: Vec<f64>,
    pub use_separate_fhat: Vec<bool>,
}

impl Default for HpGrid {
    fn default() -> Self {
        HpGrid {
            lr: vec![1e-4, 1e-3, 1e-2],
            hidden_dim: vec![32, 64, 128, 256, 512],
            dropout: vec![0.0, 0.45, 0.9],
            weight_decay: vec![1e-8, 1e-5, 1e-2],
            p: vec![1.0, 3.0, 5.0],
            use_separate_fhat: vec![false, true],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{CouplingConfig, CouplingKind};
    use crate::gating::LayerMode;
    use crate::graph::synthetic_homophily;

    #[test]
    fn adam_fixed_point_and_descent() {
        let mut s = ParamStore::new();
        let w = s.add("w", Matrix::filled(1, 1, 1.0));
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(s.value(w).get(0, 0), 1.0);
        // f(w) = w², gradient 2w
        s.zero_grads();
        s.accumulate(w, &Matrix::filled(1, 1, 2.0));
        adam_step(&mut s, &mut st, 0.1, 0.0).unwrap();
        assert!(s.value(w).get(0, 0) < 1.0);
    }

    #[test]
    fn metrics() {
        let t = vec![1.0, 2.0, 3.0, 6.0];
        let idx = [0, 1, 2, 3];
        assert_eq!(nmse_value(&t, &t, &idx).unwrap(), 0.0);
        assert_eq!(nmse_value(&[3.0; 4], &t, &idx).unwrap(), 1.0);
        assert!(nmse_value(&t, &t, &[]).is_err());
        let logits = Matrix::from_vec(2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1], &[0, 1]), 1.0);
        let mut tape = Tape::new();
        let l = tape.constant(Matrix::zeros(1, 2));
        let labels = Labels::Classes { labels: vec![1], num_classes: 2 };
        let ce = loss(&mut tape, l, &labels, &[0]).unwrap();
        assert!((tape.value(ce).get(0, 0) - 2f64.ln()).abs() < 1e-15);
    }

    fn small() -> (G2Config, LabeledDataset, TrainConfig) {
        let data = synthetic_homophily(3, 60, 0.7, 4, 3).unwrap();
        let model = G2Config::new(LayerMode::G2, CouplingConfig::new(CouplingKind::Gcn, 8, 8), 2);
        let mut cfg = TrainConfig::new(Task::Classification, 8);
        cfg.epochs = 30;
        cfg.patience = 10;
        cfg.dropout_in = 0.2;
        (model, data, cfg)
    }

    #[test]
    fn training_is_reproducible_and_counts_params() {
        let (model, data, cfg) = small();
        let a = train(&model, &data, &cfg).unwrap();
        let b = train(&model, &data, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.param_count, Network::param_count(&model, 4, 3));
        let best = a.metric_per_epoch.iter().map(|e| e.val_metric).fold(f64::MIN, f64::max);
        assert_eq!(best, a.best_val_metric);
    }

    #[test]
    fn singleton_grid() {
        let (model, data, cfg) = small();
        let point = GridPoint { model, train: cfg };
        let r = grid_search(std::slice::from_ref(&point), &data, 1).unwrap();
        assert_eq!(r.best, point);
        assert!(grid_search(&[], &data, 1).is_err());
    }

    #[test]
    fn hidden_dim_must_match() {
        let (model, data, mut cfg) = small();
        cfg.hidden_dim = 9;
        assert!(train(&model, &data, &cfg).is_err());
    }
}
