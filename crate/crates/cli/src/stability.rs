//! Perturbation runs around a constant steady state and their decay fits.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use gradgate::coupling::{make_right_stochastic, StochasticMode};
use gradgate::dynamics::{
    algebraic_envelope, fit_decay, linear_envelope, oversmoothing_verdict, quasilinear_k, DecayFit, DecayModel,
    EnergySeries, PerturbationResult, PerturbationRun, Verdict,
};
use gradgate::graph::{cycle_graph, grid2d, io::parse_edge_list, is_connected, path_graph};
use gradgate::{Error, Graph, Result};
use serde::{Deserialize, Serialize};

/// Envelope slack: `E(t) ≤ 1.05 · bound(t)` at every sample.
pub const ENVELOPE_SLACK: f64 = 1.05;

/// `cycle:N`, `path:N`, `grid:S` or `edges:FILE`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphSpec {
    Cycle(usize),
    Path(usize),
    Grid(usize),
    Edges(PathBuf),
}

impl GraphSpec {
    pub fn build(&self) -> Result<Graph> {
        match self {
            GraphSpec::Cycle(n) => cycle_graph(*n),
            GraphSpec::Path(n) => path_graph(*n),
            GraphSpec::Grid(s) => grid2d(*s),
            GraphSpec::Edges(p) => parse_edge_list(&std::fs::read_to_string(p)?, None),
        }
    }
}

impl fmt::Display for GraphSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphSpec::Cycle(n) => write!(f, "cycle:{n}"),
            GraphSpec::Path(n) => write!(f, "path:{n}"),
            GraphSpec::Grid(s) => write!(f, "grid:{s}"),
            GraphSpec::Edges(p) => write!(f, "edges:{}", p.display()),
        }
    }
}

impl FromStr for GraphSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, arg) = s.split_once(':').ok_or_else(|| format!("graph spec `{s}` lacks `kind:arg`"))?;
        let count = || arg.parse::<usize>().map_err(|_| format!("`{arg}` is not a node count"));
        match kind {
            "cycle" => Ok(GraphSpec::Cycle(count()?)),
            "path" => Ok(GraphSpec::Path(count()?)),
            "grid" => Ok(GraphSpec::Grid(count()?)),
            "edges" if !arg.is_empty() => Ok(GraphSpec::Edges(PathBuf::from(arg))),
            _ => Err(format!("unknown graph spec `{s}` (expected cycle:N, path:N, grid:S or edges:FILE)")),
        }
    }
}

impl Serialize for GraphSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GraphSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub p: f64,
    /// Coupled with uniform weights `1/deg(i)`, so it must be regular.
    pub graph: GraphSpec,
    pub dt: f64,
    pub horizon: f64,
    pub epsilon: f64,
    pub clamp: usize,
    pub c: f64,
    pub seed: u64,
}

impl StabilityConfig {
    pub fn new(p: f64, graph: GraphSpec, horizon: f64) -> Self {
        StabilityConfig {
            p,
            graph,
            dt: 1e-3,
            horizon,
            epsilon: 1e-3,
            clamp: 0,
            c: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    /// `linear` or `algebraic`.
    pub kind: String,
    /// Largest `E(t) / bound(t)` over the samples.
    pub max_ratio: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub experiment: String,
    pub config: StabilityConfig,
    pub a_min: f64,
    pub max_degree: usize,
    pub eccentricity: usize,
    pub clamp_drift: f64,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Exponential fit over the whole run.
    pub exponential: Option<DecayFit>,
    /// Fits over the last decade `[horizon/10, horizon]`.
    pub power_law_last_decade: Option<DecayFit>,
    pub exponential_last_decade: Option<DecayFit>,
    pub envelope: Envelope,
    /// Fraction of samples where the indefinite coupling term is positive.
    pub t1_positive_fraction: Option<f64>,
    pub verdict: Verdict,
}

pub fn run(cfg: &StabilityConfig) -> Result<(EnergySeries, StabilitySummary)> {
    if !(cfg.p >= 0.0) || !cfg.p.is_finite() {
        return Err(Error::InvalidArgument(format!("p must be non-negative, got {}", cfg.p)));
    }
    let graph = cfg.graph.build()?;
    if !is_connected(&graph) {
        return Err(Error::Domain(format!("graph {} is disconnected", cfg.graph)));
    }
    let a = make_right_stochastic(&graph, StochasticMode::Uniform)?;
    let run = PerturbationRun {
        a,
        c: cfg.c,
        p: cfg.p,
        clamped_node: cfg.clamp,
        epsilon: cfg.epsilon,
        dt: cfg.dt,
        horizon: cfg.horizon,
        seed: cfg.seed,
    };
    let res = run.simulate()?;
    let summary = summarize(cfg, &res, graph.num_nodes());
    Ok((res.series, summary))
}

fn summarize(cfg: &StabilityConfig, res: &PerturbationResult, v: usize) -> StabilitySummary {
    let s = &res.series;
    let e0 = res.initial_energy();
    let all = (0.0, cfg.horizon);
    let last = (cfg.horizon / 10.0, cfg.horizon);
    let (dbar, ecc) = (res.max_degree as f64, res.eccentricity as f64);
    let bound = |t: f64| {
        if cfg.p == 0.0 {
            linear_envelope(e0, res.a_min, dbar, ecc, t)
        } else {
            algebraic_envelope(e0, cfg.p, quasilinear_k(res.a_min, dbar, v as f64, ecc, cfg.p), t)
        }
    };
    let max_ratio = s.t.iter().zip(&s.energy).map(|(&t, &e)| e / bound(t)).fold(0.0, f64::max);
    let t1_positive_fraction =
        (!res.t1.is_empty()).then(|| res.t1.iter().filter(|&&x| x > 0.0).count() as f64 / res.t1.len() as f64);
    StabilitySummary {
        experiment: "stability".into(),
        config: cfg.clone(),
        a_min: res.a_min,
        max_degree: res.max_degree,
        eccentricity: res.eccentricity,
        clamp_drift: res.clamp_drift,
        initial_energy: e0,
        final_energy: *s.energy.last().expect("series holds t = 0"),
        exponential: fit_decay(&s.t, &s.energy, DecayModel::Exponential, all).ok(),
        power_law_last_decade: fit_decay(&s.t, &s.energy, DecayModel::PowerLaw, last).ok(),
        exponential_last_decade: fit_decay(&s.t, &s.energy, DecayModel::Exponential, last).ok(),
        envelope: Envelope {
            kind: if cfg.p == 0.0 { "linear" } else { "algebraic" }.into(),
            max_ratio,
            holds: max_ratio <= ENVELOPE_SLACK,
        },
        t1_positive_fraction,
        verdict: oversmoothing_verdict(&s.t, &s.energy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn graph_specs_parse() {
        assert_eq!("cycle:6".parse::<GraphSpec>().unwrap(), GraphSpec::Cycle(6));
        assert_eq!("grid:4".parse::<GraphSpec>().unwrap(), GraphSpec::Grid(4));
        assert_eq!("grid:4".parse::<GraphSpec>().unwrap().to_string(), "grid:4");
        for bad in ["cycle", "cycle:x", "star:5", "edges:"] {
            assert!(bad.parse::<GraphSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn negative_p_is_rejected() {
        let cfg = StabilityConfig::new(-1.0, GraphSpec::Cycle(6), 1.0);
        assert!(matches!(run(&cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn disconnected_graph_is_a_domain_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.txt");
        std::fs::write(&path, "0 1\n1 2\n2 0\n3 4\n4 5\n5 3\n").unwrap();
        let cfg = StabilityConfig::new(0.0, GraphSpec::Edges(path), 1.0);
        assert!(matches!(run(&cfg), Err(Error::Domain(_))));
    }
}
