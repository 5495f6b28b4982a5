use gradgate::autodiff::{Aggregation, ParamStore, Tape};
use gradgate::coupling::{CouplingConfig, CouplingKind, GraphContext};
use gradgate::dynamics::{euler_step, G2Rhs, OdeState};
use gradgate::gating::{
    max_principle_check, propagate, Activation, G2Config, GatedStack, LayerMode, RateOverride,
};
use gradgate::graph::random_connected;
use gradgate::rng::rng_for;
use gradgate::{Graph, Matrix};
use proptest::prelude::*;
use rand::Rng as _;

const KINDS: [CouplingKind; 3] = [CouplingKind::Gcn, CouplingKind::Gat, CouplingKind::Sage];
const RATE_MODES: [LayerMode; 4] = [LayerMode::Multirate, LayerMode::G2, LayerMode::G2Alpha, LayerMode::G2SingleRate];
const ALL_MODES: [LayerMode; 6] = [
    LayerMode::Plain,
    LayerMode::Residual,
    LayerMode::Multirate,
    LayerMode::G2,
    LayerMode::G2Alpha,
    LayerMode::G2SingleRate,
];

fn config(kind: CouplingKind, mode: LayerMode, width: usize, p: f64) -> G2Config {
    let mut c = G2Config::new(mode, CouplingConfig::new(kind, width, width), 1);
    c.p = p;
    c.alpha = 0.5;
    c
}

fn stack(cfg: G2Config, seed: u64) -> (GatedStack, ParamStore) {
    let mut store = ParamStore::new();
    let s = GatedStack::init(cfg, &mut store, "s", &mut rng_for(seed, &[5])).unwrap();
    (s, store)
}

fn step(s: &GatedStack, store: &ParamStore, ctx: &GraphContext, x: &Matrix, rates: &RateOverride) -> Matrix {
    let mut tape = Tape::new();
    let bound = s.bind(&mut tape, store);
    let xv = tape.constant(x.clone());
    let y = bound.layer_step_with(&mut tape, ctx, 0, xv, rates).unwrap();
    tape.value(y).clone()
}

fn graph(seed: u64, n: usize) -> Graph {
    random_connected(n, 0.25, &mut rng_for(seed, &[1])).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rates_lie_in_unit_interval(seed in any::<u64>(), n in 2..20usize, p in 0.5..4.0f64, k in 0..3usize, m in 0..4usize) {
        let ctx = GraphContext::new(graph(seed, n));
        let (s, store) = stack(config(KINDS[k], RATE_MODES[m], 4, p), seed);
        let x = Matrix::uniform(n, 4, -3.0, 3.0, &mut rng_for(seed, &[2]));
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, &store);
        let xv = tape.constant(x);
        let (tau_hat, tau) = bound.compute_rates(&mut tape, &ctx, 0, xv).unwrap();
        for v in [tau_hat, tau] {
            let t = tape.value(v);
            prop_assert!(t.as_slice().iter().all(|&r| (0.0..=1.0).contains(&r)));
        }
    }

    #[test]
    fn layer_step_is_permutation_equivariant(seed in any::<u64>(), n in 2..16usize, k in 0..3usize, m in 0..6usize) {
        let g = graph(seed, n);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = rng_for(seed, &[3]);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let (s, store) = stack(config(KINDS[k], ALL_MODES[m], 3, 2.0), seed);
        let x = Matrix::uniform(n, 3, -1.0, 1.0, &mut rng_for(seed, &[4]));
        let y = step(&s, &store, &GraphContext::new(g.clone()), &x, &RateOverride::None);
        let yp = step(&s, &store, &GraphContext::new(g.permuted(&perm).unwrap()), &x.select_rows(&inv), &RateOverride::None);
        let expect = y.select_rows(&inv);
        for (a, b) in expect.as_slice().iter().zip(yp.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn unit_rates_reproduce_the_plain_layer(seed in any::<u64>(), n in 2..16usize, k in 0..3usize) {
        let ctx = GraphContext::new(graph(seed, n));
        let x = Matrix::uniform(n, 4, -1.0, 1.0, &mut rng_for(seed, &[4]));
        let (g2, g2_store) = stack(config(KINDS[k], LayerMode::G2, 4, 2.0), seed);
        let (plain, plain_store) = stack(config(KINDS[k], LayerMode::Plain, 4, 2.0), seed);
        let forced = step(&g2, &g2_store, &ctx, &x, &RateOverride::Tau(Matrix::filled(n, 4, 1.0)));
        let reference = step(&plain, &plain_store, &ctx, &x, &RateOverride::None);
        prop_assert!(forced.bitwise_eq(&reference));
    }

    #[test]
    fn constant_rate_field_freezes_the_state(seed in any::<u64>(), n in 2..16usize, k in 0..3usize, p in 0.5..4.0f64) {
        // zero weights in F̂ make τ̂ = 1/2 everywhere, so every gradient and rate vanishes
        let ctx = GraphContext::new(graph(seed, n));
        let mut cfg = config(KINDS[k], LayerMode::G2, 4, p);
        cfg.use_separate_fhat = true;
        let (s, mut store) = stack(cfg, seed);
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.contains("f_hat") {
                store.value_mut(id).fill(0.0);
            }
        }
        let x = Matrix::uniform(n, 4, -1.0, 1.0, &mut rng_for(seed, &[4]));
        let y = step(&s, &store, &ctx, &x, &RateOverride::None);
        prop_assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn unit_euler_step_is_a_layer(seed in any::<u64>(), n in 2..16usize, k in 0..3usize, m in 0..4usize) {
        let ctx = GraphContext::new(graph(seed, n));
        let (s, store) = stack(config(KINDS[k], RATE_MODES[m], 4, 2.0), seed);
        let x = Matrix::uniform(n, 4, -1.0, 1.0, &mut rng_for(seed, &[4]));
        let layer = propagate(&s, &store, &ctx, &x, 1, |_, _| {}).unwrap();
        let mut state = OdeState::new(x);
        euler_step(&mut state, 1.0, &mut G2Rhs { stack: &s, store: &store, ctx: &ctx, layer: 0 }).unwrap();
        prop_assert!(state.x.bitwise_eq(&layer));
    }
}

#[test]
fn max_principle_on_short_runs() {
    for seed in 0..20u64 {
        let mut rng = rng_for(seed, &[6]);
        let n = rng.random_range(5..30);
        let ctx = GraphContext::new(graph(seed, n));
        let mut cfg = config(KINDS[seed as usize % 3], LayerMode::G2, 4, rng.random_range(1.0..4.0));
        cfg.activation = Activation::Tanh;
        cfg.aggregation = [Aggregation::Sum, Aggregation::Mean, Aggregation::Max][seed as usize % 3];
        let (s, store) = stack(cfg, seed);
        let x0 = Matrix::uniform(n, 4, -1.0, 1.0, &mut rng);
        let r = max_principle_check(&s, &store, &ctx, &x0, 100).unwrap();
        assert!(r.holds, "seed {seed}: [{}, {}]", r.min_seen, r.max_seen);
    }
}
