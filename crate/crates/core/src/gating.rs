//! The gated layer family: plain and residual message passing, multi-rate
//! updates with learned rates, and gradient gating with its ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Aggregation, ParamStore, Tape, Value};
use crate::coupling::{BoundCoupling, Coupling, CouplingConfig, GraphContext};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// `X + σ(F(X))`
    Residual,
    /// Rates `τ = logistic(F̂(X))` without gating.
    Multirate,
    G2,
    /// `σ(F(X))`
    Plain,
    /// Gated rates raised to the power `alpha`.
    G2Alpha,
    /// One rate per node from the p-norm of the rate-field gradient.
    G2SingleRate,
}

impl LayerMode {
    /// Modes whose update is a convex combination of `X` and `σ(F(X))`.
    pub fn is_rate_based(self) -> bool {
        matches!(self, LayerMode::Multirate | LayerMode::G2 | LayerMode::G2Alpha | LayerMode::G2SingleRate)
    }

    /// Modes whose rates come from gradient gating.
    pub fn is_gated(self) -> bool {
        matches!(self, LayerMode::G2 | LayerMode::G2Alpha | LayerMode::G2SingleRate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

fn default_p() -> f64 {
    2.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_aggregation() -> Aggregation {
    Aggregation::Sum
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct G2Config {
    pub mode: LayerMode,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Aggregation of the gating sum over neighbors.
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub use_separate_fhat: bool,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub num_layers: usize,
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub coupling_hat: Option<CouplingConfig>,
    /// One set of layer weights reused at every depth.
    #[serde(default = "default_true")]
    pub share_weights: bool,
}

impl G2Config {
    pub fn new(mode: LayerMode, coupling: CouplingConfig, num_layers: usize) -> Self {
        G2Config {
            mode,
            p: 2.0,
            alpha: 1.0,
            aggregation: Aggregation::Sum,
            use_separate_fhat: false,
            activation: Activation::Relu,
            num_layers,
            coupling,
            coupling_hat: None,
            share_weights: true,
        }
    }

    pub fn width(&self) -> usize {
        self.coupling.out_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.coupling.validate()?;
        if self.coupling.in_dim != self.coupling.out_dim {
            return Err(Error::invalid(format!(
                "layers keep a constant width; coupling maps {} -> {}",
                self.coupling.in_dim, self.coupling.out_dim
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers must be at least 1"));
        }
        if self.mode.is_gated() && !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::invalid(format!("gating exponent p must be positive, got {}", self.p)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if let Some(hat) = &self.coupling_hat {
            hat.validate()?;
            if hat.in_dim != self.width() || hat.out_dim != self.width() {
                return Err(Error::invalid("coupling_hat must match the layer width"));
            }
        }
        Ok(())
    }

    fn hat_config(&self) -> CouplingConfig {
        self.coupling_hat.clone().unwrap_or_else(|| self.coupling.clone())
    }

    fn needs_hat(&self) -> bool {
        self.mode.is_rate_based() && self.use_separate_fhat
    }

    fn distinct_layers(&self) -> usize {
        if self.share_weights {
            1
        } else {
            self.num_layers
        }
    }

    /// Scalar parameter count of the layer stack.
    pub fn param_count(&self) -> usize {
        let per = self.coupling.param_count() + if self.needs_hat() { self.hat_config().param_count() } else { 0 };
        per * self.distinct_layers()
    }
}

/// Parameters of a stack of gated layers.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedStack {
    pub config: G2Config,
    f: Vec<Coupling>,
    f_hat: Vec<Coupling>,
}

/// Layer couplings recorded on a tape.
pub struct BoundStack<'a> {
    config: &'a G2Config,
    f: Vec<BoundCoupling>,
    f_hat: Vec<BoundCoupling>,
}

/// Replaces the computed rates of one layer step.
#[derive(Debug, Clone)]
pub enum RateOverride {
    None,
    Tau(Matrix),
}

impl GatedStack {
    pub fn init<R: Rng + ?Sized>(config: G2Config, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut f = Vec::new();
        let mut f_hat = Vec::new();
        for l in 0..config.distinct_layers() {
            f.push(Coupling::init(config.coupling.clone(), store, &format!("{prefix}.{l}.f"), rng)?);
            if config.needs_hat() {
                f_hat.push(Coupling::init(config.hat_config(), store, &format!("{prefix}.{l}.f_hat"), rng)?);
            }
        }
        Ok(GatedStack { config, f, f_hat })
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape, store: &ParamStore) -> BoundStack<'a> {
        BoundStack {
            config: &self.config,
            f: self.f.iter().map(|c| c.bind(tape, store)).collect(),
            f_hat: self.f_hat.iter().map(|c| c.bind(tape, store)).collect(),
        }
    }

    /// Binds only the weights of `layer`, for layer-by-layer inference.
    pub fn bind_layer<'a>(&'a self, tape: &mut Tape, store: &ParamStore, layer: usize) -> BoundStack<'a> {
        let k = if self.config.share_weights { 0 } else { layer };
        BoundStack {
            config: &self.config,
            f: vec![self.f[k].bind(tape, store)],
            f_hat: self.f_hat.get(k).map(|c| c.bind(tape, store)).into_iter().collect(),
        }
    }
}

impl BoundStack<'_> {
    fn slot(&self, layer: usize) -> usize {
        if self.f.len() == 1 {
            0
        } else {
            layer
        }
    }

    fn activate(&self, tape: &mut Tape, v: Value) -> Value {
        match self.config.activation {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
        }
    }

    /// `(F(X), F̂(X))`, sharing the evaluation when `F̂ = F`.
    fn couplings(&self, tape: &mut Tape, ctx: &GraphContext, layer: usize, x: Value) -> Result<(Value, Value)> {
        let s = self.slot(layer);
        let fx = self.f[s].forward(tape, ctx, x)?;
        let fhx = match self.f_hat.get(s) {
            Some(h) => h.forward(tape, ctx, x)?,
            None => fx,
        };
        Ok((fx, fhx))
    }

    fn rates_from(&self, tape: &mut Tape, ctx: &GraphContext, fhx: Value) -> Result<(Value, Value)> {
        let cfg = self.config;
        let tau_hat = tape.sigmoid(fhx);
        let tau = match cfg.mode {
            LayerMode::Multirate => tau_hat,
            LayerMode::G2 | LayerMode::G2Alpha => {
                let agg = tape.gate_diff(tau_hat, ctx.neighbors(), cfg.p, cfg.aggregation)?;
                let tau = tape.tanh(agg);
                if cfg.mode == LayerMode::G2Alpha {
                    if cfg.alpha == 0.0 {
                        tape.constant(Matrix::filled(tau.rows(), tau.cols(), 1.0))
                    } else {
                        tape.abs_pow(tau, cfg.alpha)?
                    }
                } else {
                    tau
                }
            }
            LayerMode::G2SingleRate => {
                let agg = tape.gate_diff_norm(tau_hat, ctx.neighbors(), cfg.p, cfg.aggregation)?;
                tape.tanh(agg)
            }
            LayerMode::Plain | LayerMode::Residual => {
                return Err(Error::invalid(format!("{:?} mode has no rates", cfg.mode)));
            }
        };
        Ok((tau_hat, tau))
    }

    /// `(τ̂, τ)` for the rate-based modes.
    pub fn compute_rates(&self, tape: &mut Tape, ctx: &GraphContext, layer: usize, x: Value) -> Result<(Value, Value)> {
        let (_, fhx) = self.couplings(tape, ctx, layer, x)?;
        self.rates_from(tape, ctx, fhx)
    }

    /// `(τ, σ(F(X)))`, the two ingredients of a rate-based step.
    pub fn rates_and_target(&self, tape: &mut Tape, ctx: &GraphContext, layer: usize, x: Value) -> Result<(Value, Value)> {
        let (fx, fhx) = self.couplings(tape, ctx, layer, x)?;
        let s = self.activate(tape, fx);
        let (_, tau) = self.rates_from(tape, ctx, fhx)?;
        Ok((tau, s))
    }

    pub fn layer_step(&self, tape: &mut Tape, ctx: &GraphContext, layer: usize, x: Value) -> Result<Value> {
        self.layer_step_with(tape, ctx, layer, x, &RateOverride::None)
    }

    /// One layer; `rates` may pin `τ` in rate-based modes.
    pub fn layer_step_with(
        &self,
        tape: &mut Tape,
        ctx: &GraphContext,
        layer: usize,
        x: Value,
        rates: &RateOverride,
    ) -> Result<Value> {
        if x.cols() != self.config.width() {
            return Err(Error::invalid(format!(
                "layer width is {}, input has {} columns",
                self.config.width(),
                x.cols()
            )));
        }
        let (fx, fhx) = self.couplings(tape, ctx, layer, x)?;
        let s = self.activate(tape, fx);
        match self.config.mode {
            LayerMode::Plain => Ok(s),
            LayerMode::Residual => tape.add(x, s),
            _ => {
                let tau = match rates {
                    RateOverride::Tau(t) => tape.constant(t.clone()),
                    RateOverride::None => self.rates_from(tape, ctx, fhx)?.1,
                };
                tape.blend(tau, x, s)
            }
        }
    }

    /// Runs every layer on the tape and returns the final features.
    pub fn forward(&self, tape: &mut Tape, ctx: &GraphContext, x: Value) -> Result<Value> {
        let mut h = x;
        for l in 0..self.config.num_layers {
            h = self.layer_step(tape, ctx, l, h)?;
        }
        Ok(h)
    }
}

/// Runs `layers` steps without recording gradients, one short-lived tape
/// per layer. `observe` sees every layer output `X^1..X^layers`.
pub fn propagate(
    stack: &GatedStack,
    store: &ParamStore,
    ctx: &GraphContext,
    x0: &Matrix,
    layers: usize,
    mut observe: impl FnMut(usize, &Matrix),
) -> Result<Matrix> {
    if layers == 0 {
        return Err(Error::invalid("propagate needs at least one layer"));
    }
    if !stack.config.share_weights && layers > stack.config.num_layers {
        return Err(Error::invalid(format!(
            "stack holds weights for {} layers, {layers} requested",
            stack.config.num_layers
        )));
    }
    let mut x = x0.clone();
    for l in 0..layers {
        let mut tape = Tape::new();
        let bound = stack.bind_layer(&mut tape, store, l);
        let xv = tape.constant(x);
        let y = bound.layer_step(&mut tape, ctx, 0, xv)?;
        let out = tape.value(y).clone();
        if !out.all_finite() {
            return Err(Error::Propagation { layer: l + 1 });
        }
        observe(l + 1, &out);
        x = out;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPrincipleReport {
    pub min_seen: f64,
    pub max_seen: f64,
    pub holds: bool,
}

pub const MAX_PRINCIPLE_SLACK: f64 = 1e-12;

/// Propagates and records the global extrema of every layer, including the
/// input. `holds` iff all entries stay in `[-1, 1]` up to `1e-12`.
pub fn max_principle_check(
    stack: &GatedStack,
    store: &ParamStore,
    ctx: &GraphContext,
    x0: &Matrix,
    layers: usize,
) -> Result<MaxPrincipleReport> {
    let (mut lo, mut hi) = (x0.min(), x0.max());
    propagate(stack, store, ctx, x0, layers, |_, x| {
        lo = lo.min(x.min());
        hi = hi.max(x.max());
    })?;
    let holds = lo >= -1.0 - MAX_PRINCIPLE_SLACK && hi <= 1.0 + MAX_PRINCIPLE_SLACK;
    Ok(MaxPrincipleReport { min_seen: lo, max_seen: hi, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingKind;
    use crate::graph::path_graph;
    use crate::rng::rng_for;

    #[test]
    fn two_node_rate_by_hand() {
        // τ̂ = [0.2, 0.7] on a single edge: τ = tanh(0.5²) at both ends
        let ctx = GraphContext::new(path_graph(2).unwrap());
        let mut tape = Tape::new();
        let th = tape.constant(Matrix::column(vec![0.2, 0.7]));
        let agg = tape.gate_diff(th, ctx.neighbors(), 2.0, Aggregation::Sum).unwrap();
        let tau = tape.tanh(agg);
        for i in 0..2 {
            assert!((tape.value(tau).get(i, 0) - 0.25f64.tanh()).abs() < 1e-15);
        }
        assert!((0.25f64.tanh() - 0.244919).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let c = CouplingConfig::new(CouplingKind::Gcn, 4, 4);
        let mut cfg = G2Config::new(LayerMode::G2, c.clone(), 2);
        assert!(cfg.validate().is_ok());
        cfg.p = 0.0;
        assert!(cfg.validate().is_err());
        cfg.p = 2.0;
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        let bad = G2Config::new(LayerMode::G2, CouplingConfig::new(CouplingKind::Gcn, 3, 4), 2);
        assert!(bad.validate().is_err());
        let json = r#"{"mode":"g2","num_layers":2,"coupling":{"kind":"gcn","in_dim":4,"out_dim":4},"bogus":1}"#;
        assert!(serde_json::from_str::<G2Config>(json).is_err());
    }

    #[test]
    fn single_layer_propagate_equals_layer_step() {
        let ctx = GraphContext::new(path_graph(5).unwrap());
        let mut store = ParamStore::new();
        let mut rng = rng_for(4, &[]);
        let cfg = G2Config::new(LayerMode::G2, CouplingConfig::new(CouplingKind::Gat, 3, 3), 1);
        let stack = GatedStack::init(cfg, &mut store, "s", &mut rng).unwrap();
        let x0 = Matrix::uniform(5, 3, 0.0, 1.0, &mut rng);
        let out = propagate(&stack, &store, &ctx, &x0, 1, |_, _| {}).unwrap();
        let mut tape = Tape::new();
        let b = stack.bind(&mut tape, &store);
        let xv = tape.constant(x0);
        let y = b.layer_step(&mut tape, &ctx, 0, xv).unwrap();
        assert!(tape.value(y).bitwise_eq(&out));
    }
}
