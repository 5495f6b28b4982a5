//! Layer-wise smoothness of untrained deep stacks on a grid graph.

use gradgate::autodiff::ParamStore;
use gradgate::coupling::GraphContext;
use gradgate::dynamics::{oversmoothing_verdict, Verdict};
use gradgate::gating::{propagate, GatedStack};
use gradgate::graph::{dirichlet_energy, grid2d, mad};
use gradgate::rng::{rng_for, stream};
use gradgate::{Matrix, Result};
use serde::{Deserialize, Serialize};

use crate::models::ModelId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dirichlet,
    Mad,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dirichlet => "dirichlet",
            Metric::Mad => "mad",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub model: ModelId,
    pub layers: usize,
    pub grid_side: usize,
    pub width: usize,
    /// Gating exponent; ignored by plain models.
    pub p: f64,
    pub seed: u64,
}

impl EnergyConfig {
    pub fn new(model: ModelId, layers: usize) -> Self {
        EnergyConfig { model, layers, grid_side: 10, width: 16, p: 2.0, seed: 0 }
    }
}

/// Both smoothness metrics at every depth; index 0 is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSeries {
    pub dirichlet: Vec<f64>,
    pub mad: Vec<f64>,
}

impl LayerSeries {
    pub fn get(&self, metric: Metric) -> &[f64] {
        match metric {
            Metric::Dirichlet => &self.dirichlet,
            Metric::Mad => &self.mad,
        }
    }

    pub fn verdict(&self, metric: Metric) -> Verdict {
        let s = self.get(metric);
        let t: Vec<f64> = (0..s.len()).map(|l| l as f64).collect();
        oversmoothing_verdict(&t, s)
    }

    /// `layer,<metric>` rows for layers 1..=N.
    pub fn to_csv(&self, metric: Metric) -> String {
        let mut out = format!("layer,{}\n", metric.name());
        for (l, v) in self.get(metric).iter().enumerate().skip(1) {
            out.push_str(&format!("{l},{v:?}\n"));
        }
        out
    }
}

/// `X₀ ~ U[0,1]` on the grid, fresh Glorot weights at every layer, relu.
pub fn layerwise(cfg: &EnergyConfig) -> Result<LayerSeries> {
    let ctx = GraphContext::new(grid2d(cfg.grid_side)?);
    let v = ctx.num_nodes();
    let x0 = Matrix::uniform(v, cfg.width, 0.0, 1.0, &mut rng_for(cfg.seed, &[stream::INPUT]));
    let mut model = cfg.model.config(cfg.width, cfg.layers);
    model.p = cfg.p;
    model.share_weights = false;
    let mut store = ParamStore::new();
    let stack = GatedStack::init(model, &mut store, "stack", &mut rng_for(cfg.seed, &[stream::INIT]))?;

    let g = ctx.graph().clone();
    let mut series = LayerSeries { dirichlet: vec![dirichlet_energy(&g, &x0)?], mad: vec![mad(&g, &x0)?] };
    let mut failure = None;
    propagate(&stack, &store, &ctx, &x0, cfg.layers, |_, x| {
        if failure.is_some() {
            return;
        }
        match (dirichlet_energy(&g, x), mad(&g, x)) {
            (Ok(e), Ok(m)) => {
                series.dirichlet.push(e);
                series.mad.push(m);
            }
            (Err(e), _) | (_, Err(e)) => failure = Some(e),
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(series),
    }
}

/// Summary printed by the `energy` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub experiment: String,
    pub config: EnergyConfig,
    pub metric: Metric,
    pub initial: f64,
    pub last: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub verdict: Verdict,
}

pub fn summarize(cfg: &EnergyConfig, series: &LayerSeries, metric: Metric) -> EnergySummary {
    let s = series.get(metric);
    let e0 = s[0];
    let ratio = |e: f64| if e0 > 0.0 { e / e0 } else { f64::NAN };
    let (min_ratio, max_ratio) = s[1..]
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| (lo.min(ratio(e)), hi.max(ratio(e))));
    EnergySummary {
        experiment: "energy".into(),
        config: cfg.clone(),
        metric,
        initial: e0,
        last: *s.last().expect("series holds the input"),
        min_ratio,
        max_ratio,
        verdict: series.verdict(metric),
    }
}
