//! Finite-difference checks of whole networks on small random graphs.

use std::fmt;
use std::str::FromStr;

use gradgate::autodiff::{grad_check, Aggregation, ComponentReport, GradCheckReport, ParamStore, Tape};
use gradgate::coupling::GraphContext;
use gradgate::gating::{Activation, LayerMode};
use gradgate::graph::{random_connected, Labels};
use gradgate::rng::{rng_for, stream};
use gradgate::training::{loss, Network};
use gradgate::{Matrix, Result};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::models::ModelId;

pub const INSTANCE_NODES: usize = 8;
const IN_DIM: usize = 3;
const WIDTH: usize = 4;
const CLASSES: usize = 3;
const LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum CheckModel {
    /// `sum((X·W) ⊙ R)` on dyadic data, exact under finite differences.
    Linear,
    Network(ModelId),
}

impl fmt::Display for CheckModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckModel::Linear => f.write_str("linear"),
            CheckModel::Network(m) => m.fmt(f),
        }
    }
}

impl FromStr for CheckModel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "linear" {
            Ok(CheckModel::Linear)
        } else {
            s.parse().map(CheckModel::Network).map_err(|e| format!("{e}, or linear"))
        }
    }
}

impl From<CheckModel> for String {
    fn from(m: CheckModel) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for CheckModel {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub model: CheckModel,
    /// Layer mode; defaults to the family's own (plain or gated).
    pub mode: Option<LayerMode>,
    pub p: f64,
    pub alpha: f64,
    /// SAGE neighbor aggregation.
    pub aggregation: Aggregation,
    /// Aggregation of the gating sum.
    pub gate_aggregation: Aggregation,
    pub activation: Activation,
    pub use_separate_fhat: bool,
    pub seed: u64,
    pub tolerance: f64,
}

impl CheckConfig {
    pub fn new(model: CheckModel, p: f64, seed: u64) -> Self {
        CheckConfig {
            model,
            mode: None,
            p,
            alpha: 0.5,
            aggregation: Aggregation::Mean,
            gate_aggregation: Aggregation::Sum,
            activation: Activation::Relu,
            use_separate_fhat: false,
            seed,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstComponent {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl From<ComponentReport> for WorstComponent {
    fn from(c: ComponentReport) -> Self {
        WorstComponent { param: c.param, index: c.index, analytic: c.analytic, numeric: c.numeric, rel_err: c.rel_err }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub experiment: String,
    pub config: CheckConfig,
    pub pass: bool,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Sampled components excluded as kinks.
    pub skipped: usize,
    /// Ties and zero crossings met by the unperturbed forward pass.
    pub nondiff_events: usize,
    pub worst: Option<WorstComponent>,
}

fn outcome(cfg: &CheckConfig, r: GradCheckReport, nondiff_events: usize) -> CheckOutcome {
    CheckOutcome {
        experiment: "gradcheck".into(),
        config: cfg.clone(),
        pass: r.pass,
        max_rel_err: r.max_rel_err,
        checked: r.checked,
        skipped: r.skipped,
        nondiff_events,
        worst: r.worst.map(Into::into),
    }
}

pub fn run(cfg: &CheckConfig) -> Result<CheckOutcome> {
    match cfg.model {
        CheckModel::Linear => run_linear(cfg),
        CheckModel::Network(id) => run_network(cfg, id),
    }
}

fn run_linear(cfg: &CheckConfig) -> Result<CheckOutcome> {
    let dyadic = |i: usize, j: usize| ((i * 7 + j * 3 + cfg.seed as usize) % 4 + 1) as f64 / 4.0;
    let mut store = ParamStore::new();
    let w = store.add("w", Matrix::from_fn(IN_DIM + 3, WIDTH, |i, j| dyadic(i + 1, j) - 0.5));
    let x = Matrix::from_fn(INSTANCE_NODES, IN_DIM + 3, dyadic);
    let r = Matrix::from_fn(INSTANCE_NODES, WIDTH, |i, j| dyadic(j, i));
    let forward = |t: &mut Tape, s: &ParamStore| {
        let xv = t.constant(x.clone());
        let wv = t.param(s, w);
        let y = t.matmul(xv, wv)?;
        let rv = t.constant(r.clone());
        let z = t.hadamard(y, rv)?;
        Ok(t.sum(z))
    };
    let report = grad_check(&mut store, forward, cfg.tolerance, cfg.seed)?;
    Ok(outcome(cfg, report, 0))
}

fn run_network(cfg: &CheckConfig, id: ModelId) -> Result<CheckOutcome> {
    let graph = random_connected(INSTANCE_NODES, 0.3, &mut rng_for(cfg.seed, &[stream::GRAPH]))?;
    let ctx = GraphContext::new(graph);
    let x = Matrix::uniform(INSTANCE_NODES, IN_DIM, -1.0, 1.0, &mut rng_for(cfg.seed, &[stream::FEATURES]));
    let mut trng = rng_for(cfg.seed, &[stream::TARGETS]);
    let labels = Labels::Classes {
        labels: (0..INSTANCE_NODES).map(|_| trng.random_range(0..CLASSES)).collect(),
        num_classes: CLASSES,
    };
    let mask: Vec<usize> = (0..INSTANCE_NODES).collect();

    let mut model = id.config(WIDTH, LAYERS);
    if let Some(mode) = cfg.mode {
        model.mode = mode;
    }
    model.p = cfg.p;
    model.alpha = cfg.alpha;
    model.coupling.aggregation = cfg.aggregation;
    model.aggregation = cfg.gate_aggregation;
    model.activation = cfg.activation;
    model.use_separate_fhat = cfg.use_separate_fhat;
    model.share_weights = false;

    let mut store = ParamStore::new();
    let net = Network::init(model, IN_DIM, CLASSES, &mut store, &mut rng_for(cfg.seed, &[stream::INIT]))?;
    // nonzero biases so every parameter influences the loss generically
    let mut brng = rng_for(cfg.seed, &[stream::INIT, 1]);
    for pid in store.ids().collect::<Vec<_>>() {
        if store.get(pid).name.ends_with(".b") {
            for v in store.value_mut(pid).as_mut_slice() {
                *v = brng.random_range(-0.5..0.5);
            }
        }
    }
    let forward = |t: &mut Tape, s: &ParamStore| {
        let out = net.forward(t, s, &ctx, &x, None)?;
        loss(t, out, &labels, &mask)
    };
    let nondiff_events = {
        let mut t = Tape::new();
        forward(&mut t, &store)?;
        t.nondiff_events()
    };
    let report = grad_check(&mut store, forward, cfg.tolerance, cfg.seed)?;
    Ok(outcome(cfg, report, nondiff_events))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact() {
        let r = run(&CheckConfig::new(CheckModel::Linear, 2.0, 0)).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
    }

    #[test]
    fn g2_gcn_p3_passes() {
        let r = run(&CheckConfig::new(CheckModel::Network(ModelId::G2Gcn), 3.0, 0)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn names_parse() {
        assert_eq!("linear".parse::<CheckModel>().unwrap(), CheckModel::Linear);
        assert_eq!("g2-sage".parse::<CheckModel>().unwrap(), CheckModel::Network(ModelId::G2Sage));
        assert!("mlp".parse::<CheckModel>().is_err());
    }
}
