//! Continuous-time view of the gated layers: explicit Euler stepping,
//! perturbation dynamics around a constant steady state, decay fits and the
//! oversmoothing verdict.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{blend_scalar, ParamStore, Tape};
use crate::coupling::{GraphContext, StochasticMatrix};
use crate::error::{Error, Result};
use crate::gating::GatedStack;
use crate::graph::{eccentricity, is_connected};
use crate::matrix::Matrix;
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct OdeState {
    pub t: f64,
    pub step: usize,
    pub x: Matrix,
}

impl OdeState {
    pub fn new(x: Matrix) -> Self {
        OdeState { t: 0.0, step: 0, x }
    }
}

/// Right-hand side in gated form `dX/dt = τ ⊙ (target − X)`.
pub trait GatedRhs {
    /// Returns `(τ, target)`, both shaped like `x`.
    fn eval(&mut self, x: &Matrix) -> Result<(Matrix, Matrix)>;
}

impl<F: FnMut(&Matrix) -> Result<(Matrix, Matrix)>> GatedRhs for F {
    fn eval(&mut self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self(x)
    }
}

/// `X ← (1 − dt·τ)⊙X + dt·τ⊙target`.
pub fn euler_step(state: &mut OdeState, dt: f64, rhs: &mut impl GatedRhs) -> Result<()> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(Error::invalid(format!("time step must lie in (0, 1], got {dt}")));
    }
    let (tau, target) = rhs.eval(&state.x)?;
    if tau.shape() != state.x.shape() || target.shape() != state.x.shape() {
        return Err(Error::invalid("rates and target must match the state shape"));
    }
    let data = state
        .x
        .as_slice()
        .iter()
        .zip(tau.as_slice())
        .zip(target.as_slice())
        .map(|((&x, &t), &s)| blend_scalar(dt * t, x, s))
        .collect();
    let next = Matrix::from_vec(state.x.rows(), state.x.cols(), data)?;
    state.step += 1;
    if !next.all_finite() {
        return Err(Error::Integration { step: state.step });
    }
    state.x = next;
    state.t = state.step as f64 * dt;
    Ok(())
}

/// The gated layer as an ODE right-hand side: `τ` from the rate field and
/// `target = σ(F(X))`. Rates of the single-rate mode are broadcast.
pub struct G2Rhs<'a> {
    pub stack: &'a GatedStack,
    pub store: &'a ParamStore,
    pub ctx: &'a GraphContext,
    pub layer: usize,
}

impl GatedRhs for G2Rhs<'_> {
    fn eval(&mut self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if !self.stack.config.mode.is_rate_based() {
            return Err(Error::invalid("the gated right-hand side needs a rate-based mode"));
        }
        let mut tape = Tape::new();
        let bound = self.stack.bind_layer(&mut tape, self.store, self.layer);
        let xv = tape.constant(x.clone());
        let (tau, target) = bound.rates_and_target(&mut tape, self.ctx, 0, xv)?;
        let tau = tape.value(tau);
        let tau = if tau.cols() == x.cols() {
            tau.clone()
        } else {
            Matrix::from_fn(x.rows(), x.cols(), |i, _| tau.get(i, 0))
        };
        Ok((tau, tape.value(target).clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayModel {
    Exponential,
    PowerLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model: DecayModel,
    /// Decay rate `C` of `E ≈ A e^{−Ct}`, or exponent `q` of `E ≈ A t^q`.
    pub value: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

pub const MIN_FIT_SAMPLES: usize = 10;

/// Least squares on `(t, ln E)` or `(ln t, ln E)` over samples with
/// `t_lo ≤ t ≤ t_hi`.
pub fn fit_decay(t: &[f64], energy: &[f64], model: DecayModel, window: (f64, f64)) -> Result<DecayFit> {
    if t.len() != energy.len() {
        return Err(Error::invalid("time and energy series differ in length"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&ti, &ei) in t.iter().zip(energy) {
        if ti < window.0 || ti > window.1 {
            continue;
        }
        if !(ei > 0.0) || !ei.is_finite() {
            return Err(Error::Fit(format!("non-positive energy {ei} at t = {ti}")));
        }
        let x = match model {
            DecayModel::Exponential => ti,
            DecayModel::PowerLaw => {
                if !(ti > 0.0) {
                    return Err(Error::Fit("power-law fit needs t > 0".into()));
                }
                ti.ln()
            }
        };
        xs.push(x);
        ys.push(ei.ln());
    }
    if xs.len() < MIN_FIT_SAMPLES {
        return Err(Error::Fit(format!(
            "{} samples in window, at least {MIN_FIT_SAMPLES} required",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("window holds a single abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
    let value = match model {
        DecayModel::Exponential => -slope,
        DecayModel::PowerLaw => slope,
    };
    Ok(DecayFit { model, value, intercept, r_squared, window, samples: xs.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ExponentialDecay,
    AlgebraicDecay,
    NonDecaying,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::ExponentialDecay => "exponential_decay",
            Verdict::AlgebraicDecay => "algebraic_decay",
            Verdict::NonDecaying => "non_decaying",
        })
    }
}

pub const VERDICT_EXP_R2: f64 = 0.95;
pub const VERDICT_EXP_RATIO: f64 = 1e-4;
pub const VERDICT_FLAT_RANGE: (f64, f64) = (0.1, 10.0);
pub const VERDICT_POWER_R2: f64 = 0.9;
/// The exponential fit stops where the series first falls below this
/// fraction of its initial value; deeper samples sit on roundoff floors.
pub const FIT_FLOOR_RATIO: f64 = 1e-12;

/// Classifies a decay series.
///
/// 1. exponential if the exponential fit has `r² ≥ 0.95` and the terminal
///    ratio is below `1e-4`;
/// 2. non-decaying if the terminal ratio lies in `[0.1, 10]`;
/// 3. algebraic if the power-law fit has `r² ≥ 0.9`;
/// 4. otherwise non-decaying for growth above 10, else the better fit.
///
/// The exponential fit runs from the start until the series first drops
/// below [`FIT_FLOOR_RATIO`] of its initial value (at least 10 samples).
pub fn oversmoothing_verdict(t: &[f64], energy: &[f64]) -> Verdict {
    let e0 = energy.first().copied().unwrap_or(0.0);
    let last = energy.last().copied().unwrap_or(0.0);
    if !(e0 > 0.0) {
        return Verdict::NonDecaying;
    }
    let ratio = last / e0;
    let alive = energy.iter().position(|&e| !(e > FIT_FLOOR_RATIO * e0)).unwrap_or(energy.len());
    let exp_end = alive.max(MIN_FIT_SAMPLES).min(energy.len());
    let exp_fit = (exp_end > 0)
        .then(|| fit_decay(&t[..exp_end], &energy[..exp_end], DecayModel::Exponential, (f64::NEG_INFINITY, f64::INFINITY)))
        .and_then(Result::ok);
    if let Some(f) = &exp_fit {
        if f.r_squared >= VERDICT_EXP_R2 && ratio < VERDICT_EXP_RATIO {
            return Verdict::ExponentialDecay;
        }
    }
    if (VERDICT_FLAT_RANGE.0..=VERDICT_FLAT_RANGE.1).contains(&ratio) {
        return Verdict::NonDecaying;
    }
    let t_pos = t.iter().position(|&x| x > 0.0).unwrap_or(t.len());
    let pow_end = alive.max(t_pos + MIN_FIT_SAMPLES).min(energy.len());
    let pow_fit = (t_pos < pow_end)
        .then(|| fit_decay(&t[t_pos..pow_end], &energy[t_pos..pow_end], DecayModel::PowerLaw, (0.0, f64::INFINITY)))
        .and_then(Result::ok);
    if let Some(f) = &pow_fit {
        if f.r_squared >= VERDICT_POWER_R2 {
            return Verdict::AlgebraicDecay;
        }
    }
    if ratio > VERDICT_FLAT_RANGE.1 {
        return Verdict::NonDecaying;
    }
    match (exp_fit, pow_fit) {
        (Some(e), Some(p)) if p.r_squared > e.r_squared => Verdict::AlgebraicDecay,
        (Some(_), _) => Verdict::ExponentialDecay,
        (None, Some(_)) => Verdict::AlgebraicDecay,
        (None, None) => Verdict::NonDecaying,
    }
}

/// Upper bound `E(0)·exp(−ā t / (d̄ Δ₁))` for the linearized system.
pub fn linear_envelope(e0: f64, a_min: f64, max_degree: f64, ecc: f64, t: f64) -> f64 {
    e0 * (-a_min * t / (max_degree * ecc)).exp()
}

/// `K = ā / (d̄^{p+1} v^{p/2} Δ₁^{(p+2)/2})`.
pub fn quasilinear_k(a_min: f64, max_degree: f64, v: f64, ecc: f64, p: f64) -> f64 {
    a_min / (max_degree.powf(p + 1.0) * v.powf(p / 2.0) * ecc.powf((p + 2.0) / 2.0))
}

/// Solution of `y' = −K y^{(p+2)/2}` from `y(0) = e0`:
/// `e0 · (1 + (p/2)·K·t·e0^{p/2})^{−2/p}`.
pub fn algebraic_envelope(e0: f64, p: f64, k: f64, t: f64) -> f64 {
    e0 * (1.0 + 0.5 * p * k * t * e0.powf(p / 2.0)).powf(-2.0 / p)
}

pub const MAX_EPSILON: f64 = 1e-2;

/// Perturbation of a constant steady state `c` on a graph coupled by a
/// symmetric right-stochastic matrix, with one node held at the steady state.
#[derive(Debug, Clone)]
pub struct PerturbationRun {
    pub a: StochasticMatrix,
    pub c: f64,
    /// 0 selects the linearized system, `p > 0` the gated one.
    pub p: f64,
    pub clamped_node: usize,
    pub epsilon: f64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySeries {
    pub t: Vec<f64>,
    pub energy: Vec<f64>,
}

impl EnergySeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// CSV with header `<axis>,energy`; values use the shortest round-trip form.
    pub fn to_csv(&self, axis: &str) -> String {
        let mut out = format!("{axis},energy\n");
        for (t, e) in self.t.iter().zip(&self.energy) {
            out.push_str(&format!("{t:?},{e:?}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult {
    pub series: EnergySeries,
    /// Indefinite-sign coupling term `½ Σ_i Σ_j A_ij (τ̄_i − τ̄_j)(X̂_j² − X̂_i²)`
    /// at each sample; empty for the linearized system.
    pub t1: Vec<f64>,
    /// Largest `|X̂|` seen at the clamped node (0 when the clamp holds).
    pub clamp_drift: f64,
    pub a_min: f64,
    pub max_degree: usize,
    pub eccentricity: usize,
}

impl PerturbationResult {
    pub fn initial_energy(&self) -> f64 {
        self.series.energy[0]
    }
}

/// Sample steps: 20 per decade on a log grid plus 1000 evenly spaced, deduplicated.
fn sample_steps(total: usize) -> Vec<usize> {
    let mut steps = vec![0, total];
    if total > 0 {
        let decades = (total as f64).log10();
        let n = (decades * 20.0).ceil() as usize;
        for k in 0..=n {
            steps.push(10f64.powf(k as f64 / 20.0).round() as usize);
        }
        for k in 1..1000 {
            steps.push(((k as f64 / 1000.0) * total as f64).round() as usize);
        }
    }
    steps.retain(|&s| s <= total);
    steps.sort_unstable();
    steps.dedup();
    steps
}

impl PerturbationRun {
    fn validate(&self) -> Result<(usize, usize)> {
        let g = self.a.graph();
        if self.clamped_node >= g.num_nodes() {
            return Err(Error::invalid(format!("clamped node {} out of range", self.clamped_node)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= MAX_EPSILON) {
            return Err(Error::invalid(format!(
                "perturbation scale must lie in (0, {MAX_EPSILON}], got {}",
                self.epsilon
            )));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) || !self.dt.is_finite() || !self.horizon.is_finite() {
            return Err(Error::invalid("time step and horizon must be positive"));
        }
        if !(self.p >= 0.0) || !self.p.is_finite() {
            return Err(Error::invalid(format!("p must be non-negative, got {}", self.p)));
        }
        if !self.a.is_symmetric(1e-12) {
            return Err(Error::Precondition("the coupling matrix must be symmetric".into()));
        }
        if !is_connected(g) {
            return Err(Error::Domain("the perturbation graph is disconnected".into()));
        }
        let ecc = eccentricity(g, self.clamped_node)?;
        Ok((g.max_degree(), ecc))
    }

    /// Euler-integrates `dX̂_i/dt = τ_i Σ_j A_ij (X̂_j − X̂_i)` where `τ_i = 1`
    /// for `p = 0` and `τ_i = Σ_{j∈N_i} |X̂_j − X̂_i|^p` otherwise; the
    /// clamped node has `τ = 0`. Returns `Σ_i X̂_i²` at the sample times.
    pub fn simulate(&self) -> Result<PerturbationResult> {
        let (max_degree, ecc) = self.validate()?;
        let g = self.a.graph();
        let v = g.num_nodes();
        let mut rng = rng_for(self.seed, &[stream::PERTURBATION]);
        let mut x: Vec<f64> = (0..v).map(|_| rng.random_range(-self.epsilon..=self.epsilon)).collect();
        x[self.clamped_node] = 0.0;

        let total = (self.horizon / self.dt).round() as usize;
        let samples = sample_steps(total);
        let gated = self.p > 0.0;
        let mut series = EnergySeries { t: Vec::with_capacity(samples.len()), energy: Vec::with_capacity(samples.len()) };
        let mut t1 = Vec::new();
        let mut tau = vec![1.0; v];
        let mut target = vec![0.0; v];
        let mut next_sample = 0;
        let mut clamp_drift: f64 = 0.0;
        let int_p = (self.p.fract() == 0.0 && self.p <= 32.0).then_some(self.p as i32);

        for step in 0..=total {
            if gated {
                for (i, t) in tau.iter_mut().enumerate() {
                    *t = g
                        .neighbors(i)
                        .iter()
                        .map(|&j| {
                            let d = (x[j] - x[i]).abs();
                            match int_p {
                                Some(k) => d.powi(k),
                                None => d.powf(self.p),
                            }
                        })
                        .sum();
                }
            }
            tau[self.clamped_node] = 0.0;
            if samples[next_sample] == step {
                series.t.push(step as f64 * self.dt);
                series.energy.push(x.iter().map(|a| a * a).sum());
                if gated {
                    t1.push(self.t1_term(&x, &tau));
                }
                next_sample += 1;
            }
            if step == total {
                break;
            }
            self.a.apply(&x, &mut target);
            for i in 0..v {
                let r = self.dt * tau[i];
                if r > 1.0 {
                    return Err(Error::Integration { step: step + 1 });
                }
                x[i] = blend_scalar(r, x[i], target[i]);
            }
            clamp_drift = clamp_drift.max(x[self.clamped_node].abs());
            if x.iter().any(|a| !a.is_finite()) {
                return Err(Error::Integration { step: step + 1 });
            }
        }
        Ok(PerturbationResult { series, t1, clamp_drift, a_min: self.a.min_entry(), max_degree, eccentricity: ecc })
    }

    fn t1_term(&self, x: &[f64], tau: &[f64]) -> f64 {
        let g = self.a.graph();
        let mut s = 0.0;
        for i in 0..g.num_nodes() {
            for (&j, &a) in g.neighbors(i).iter().zip(self.a.row(i)) {
                s += a * (tau[i] - tau[j]) * (x[j] * x[j] - x[i] * x[i]);
            }
        }
        0.5 * s
    }
}

pub fn simulate_linearized(run: &PerturbationRun) -> Result<PerturbationResult> {
    if run.p != 0.0 {
        return Err(Error::invalid("the linearized system takes p = 0"));
    }
    run.simulate()
}

pub fn simulate_quasilinear(run: &PerturbationRun) -> Result<PerturbationResult> {
    if !(run.p > 0.0) {
        return Err(Error::invalid("the quasi-linearized system needs p > 0"));
    }
    run.simulate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{make_right_stochastic, StochasticMode};
    use crate::graph::cycle_graph;

    #[test]
    fn euler_linear_decay() {
        let mut s = OdeState::new(Matrix::filled(1, 1, 1.0));
        let mut rhs = |x: &Matrix| Ok((Matrix::filled(1, 1, 1.0), Matrix::zeros(x.rows(), x.cols())));
        for _ in 0..10 {
            euler_step(&mut s, 0.1, &mut rhs).unwrap();
        }
        let want = 0.9f64.powi(10);
        assert!((s.x.get(0, 0) - want).abs() < 1e-15);
        assert!((want - 0.348678).abs() < 1e-6);
        assert_eq!(s.step, 10);
    }

    #[test]
    fn euler_zero_rate_is_identity() {
        let x0 = Matrix::from_vec(2, 1, vec![0.3, -0.7]).unwrap();
        let mut s = OdeState::new(x0.clone());
        let mut rhs = |x: &Matrix| Ok((Matrix::zeros(2, 1), x.map(|v| v + 5.0)));
        euler_step(&mut s, 0.5, &mut rhs).unwrap();
        assert!(s.x.bitwise_eq(&x0));
        assert!(euler_step(&mut s, 0.0, &mut rhs).is_err());
    }

    #[test]
    fn euler_reports_non_finite() {
        let mut s = OdeState::new(Matrix::filled(1, 1, 1.0));
        let mut rhs = |_: &Matrix| Ok((Matrix::filled(1, 1, 1.0), Matrix::filled(1, 1, f64::NAN)));
        assert!(matches!(euler_step(&mut s, 0.5, &mut rhs), Err(Error::Integration { step: 1 })));
    }

    #[test]
    fn exact_fits() {
        let t: Vec<f64> = (0..=200).map(|k| k as f64 * 0.01).collect();
        let e: Vec<f64> = t.iter().map(|t| (-3.0 * t).exp()).collect();
        let f = fit_decay(&t, &e, DecayModel::Exponential, (0.0, 2.0)).unwrap();
        assert!((f.value - 3.0).abs() < 1e-6);
        let t: Vec<f64> = (0..=100).map(|k| 10f64.powf(k as f64 / 50.0)).collect();
        let e: Vec<f64> = t.iter().map(|t| 1.0 / t).collect();
        let f = fit_decay(&t, &e, DecayModel::PowerLaw, (1.0, 100.0)).unwrap();
        assert!((f.value + 1.0).abs() < 1e-6);
        assert!(f.r_squared > 0.999_999);
        let mut bad = e.clone();
        bad[3] = 0.0;
        assert!(matches!(fit_decay(&t, &bad, DecayModel::PowerLaw, (1.0, 100.0)), Err(Error::Fit(_))));
        assert!(fit_decay(&t[..5], &e[..5], DecayModel::PowerLaw, (1.0, 100.0)).is_err());
    }

    #[test]
    fn verdict_rules() {
        let t: Vec<f64> = (0..100).map(|k| k as f64).collect();
        let exp: Vec<f64> = t.iter().map(|t| (-1.5 * t).exp()).collect();
        assert_eq!(oversmoothing_verdict(&t, &exp), Verdict::ExponentialDecay);
        let flat: Vec<f64> = t.iter().map(|t| 1.0 + 0.1 * (t * 0.3).sin()).collect();
        assert_eq!(oversmoothing_verdict(&t, &flat), Verdict::NonDecaying);
        let tp: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
        let alg: Vec<f64> = tp.iter().map(|t| 1.0 / t).collect();
        assert_eq!(oversmoothing_verdict(&tp, &alg), Verdict::AlgebraicDecay);
        assert_eq!(oversmoothing_verdict(&t, &vec![0.0; 100]), Verdict::NonDecaying);
    }

    #[test]
    fn clamp_holds_exactly() {
        let a = make_right_stochastic(&cycle_graph(6).unwrap(), StochasticMode::Uniform).unwrap();
        let run = PerturbationRun { a, c: 0.5, p: 0.0, clamped_node: 0, epsilon: 1e-3, dt: 1e-2, horizon: 1.0, seed: 0 };
        let r = simulate_linearized(&run).unwrap();
        assert!(r.series.energy.iter().all(|&e| e > 0.0));
        assert_eq!(r.clamp_drift, 0.0);
        assert!(simulate_quasilinear(&run).is_err());
    }

    #[test]
    fn preconditions() {
        let p3 = crate::graph::path_graph(3).unwrap();
        let a = make_right_stochastic(&p3, StochasticMode::Uniform).unwrap();
        let run = PerturbationRun { a, c: 0.0, p: 0.0, clamped_node: 0, epsilon: 1e-3, dt: 1e-3, horizon: 1.0, seed: 0 };
        assert!(matches!(run.simulate(), Err(Error::Precondition(_))));
        let a = make_right_stochastic(&cycle_graph(6).unwrap(), StochasticMode::Uniform).unwrap();
        let run = PerturbationRun { a, c: 0.0, p: 0.0, clamped_node: 0, epsilon: 0.5, dt: 1e-3, horizon: 1.0, seed: 0 };
        assert!(run.simulate().is_err());
    }

    #[test]
    fn envelope_forms() {
        assert_eq!(algebraic_envelope(2.0, 2.0, 0.3, 0.0), 2.0);
        // p = 2: y' = −K y² has y = y0 / (1 + K y0 t)
        let (y0, k, t) = (0.5, 0.2, 7.0);
        assert!((algebraic_envelope(y0, 2.0, k, t) - y0 / (1.0 + k * y0 * t)).abs() < 1e-15);
        assert!((quasilinear_k(0.5, 2.0, 6.0, 3.0, 2.0) - 0.5 / 432.0).abs() < 1e-18);
        assert!((linear_envelope(1.0, 0.5, 2.0, 3.0, 12.0) - (-1.0f64).exp()).abs() < 1e-15);
    }
}
