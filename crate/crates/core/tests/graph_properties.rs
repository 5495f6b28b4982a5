use gradgate::coupling::{make_right_stochastic, StochasticMode};
use gradgate::graph::{
    dirichlet_energy, eccentricity, edge_homophily, graph_gradient, io, is_connected, mad, poincare_check,
    random_connected, synthetic_homophily, synthetic_multiscale, Labels,
};
use gradgate::rng::rng_for;
use gradgate::{Graph, Matrix};
use proptest::prelude::*;
use rand::Rng as _;

fn graph_strategy(max_nodes: usize) -> impl Strategy<Value = Graph> {
    (2..=max_nodes, 0.0..0.5f64, any::<u64>())
        .prop_map(|(n, p, seed)| random_connected(n, p, &mut rng_for(seed, &[])).unwrap())
}

fn features(n: usize, d: usize, seed: u64) -> Matrix {
    Matrix::uniform(n, d, -2.0, 2.0, &mut rng_for(seed, &[1]))
}

/// All-pairs shortest paths by Floyd–Warshall.
fn apsp(g: &Graph) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
        for &j in g.neighbors(i) {
            row[j] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

proptest! {
    #[test]
    fn energy_is_translation_invariant(g in graph_strategy(20), seed in any::<u64>(), shift in -5.0..5.0f64) {
        let x = features(g.num_nodes(), 3, seed);
        let e = dirichlet_energy(&g, &x).unwrap();
        let moved = x.map(|v| v + shift);
        let e2 = dirichlet_energy(&g, &moved).unwrap();
        prop_assert!((e - e2).abs() <= 1e-9 * e.max(1.0));
    }

    #[test]
    fn energy_vanishes_exactly_on_constants(g in graph_strategy(20), c in -3.0..3.0f64, seed in any::<u64>()) {
        let n = g.num_nodes();
        let constant = Matrix::from_fn(n, 2, |_, j| c + j as f64);
        prop_assert_eq!(dirichlet_energy(&g, &constant).unwrap(), 0.0);
        let x = features(n, 2, seed);
        prop_assert!(dirichlet_energy(&g, &x).unwrap() > 0.0);
    }

    #[test]
    fn energy_matches_edge_sum(g in graph_strategy(15), seed in any::<u64>()) {
        // each undirected edge counted in both directions
        let x = features(g.num_nodes(), 2, seed);
        let mut s = 0.0;
        for (i, j) in g.edges() {
            for k in 0..2 {
                let d = x.get(i, k) - x.get(j, k);
                s += 2.0 * d * d;
            }
        }
        let expect = s / g.num_nodes() as f64;
        let e = dirichlet_energy(&g, &x).unwrap();
        prop_assert!((e - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn gradient_is_antisymmetric(g in graph_strategy(20), seed in any::<u64>()) {
        let y: Vec<f64> = features(g.num_nodes(), 1, seed).into_vec();
        let grad = graph_gradient(&g, &y).unwrap();
        for (i, j, v) in grad.iter() {
            prop_assert_eq!(v, y[j] - y[i]);
            prop_assert_eq!(grad.get(j, i).unwrap(), -v);
        }
    }

    #[test]
    fn eccentricity_matches_floyd_warshall(g in graph_strategy(25)) {
        let d = apsp(&g);
        for i in 0..g.num_nodes() {
            prop_assert_eq!(eccentricity(&g, i).unwrap(), *d[i].iter().max().unwrap());
        }
    }

    #[test]
    fn energy_and_mad_are_permutation_invariant(g in graph_strategy(15), seed in any::<u64>()) {
        let n = g.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = rng_for(seed, &[2]);
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let x = features(n, 3, seed);
        // node i moves to perm[i], so row perm[i] of the new matrix is row i
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let gp = g.permuted(&perm).unwrap();
        let xp = x.select_rows(&inv);
        let (e, ep) = (dirichlet_energy(&g, &x).unwrap(), dirichlet_energy(&gp, &xp).unwrap());
        prop_assert!((e - ep).abs() <= 1e-12 * e.max(1.0));
        let (m, mp) = (mad(&g, &x).unwrap(), mad(&gp, &xp).unwrap());
        prop_assert!((m - mp).abs() <= 1e-12);
    }

    #[test]
    fn mad_lies_in_unit_range(g in graph_strategy(15), seed in any::<u64>()) {
        let m = mad(&g, &features(g.num_nodes(), 4, seed)).unwrap();
        prop_assert!((0.0..=2.0).contains(&m));
    }

    #[test]
    fn stochastic_rows_sum_to_one(g in graph_strategy(20), seed in any::<u64>()) {
        for mode in [StochasticMode::Uniform, StochasticMode::Random { seed }] {
            let a = make_right_stochastic(&g, mode).unwrap();
            for (i, s) in a.row_sums().into_iter().enumerate() {
                prop_assert!((s - 1.0).abs() <= 1e-12, "row {} sums to {}", i, s);
                prop_assert!(a.row(i).iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn edge_list_round_trips(g in graph_strategy(20)) {
        let text = io::write_edge_list(&g);
        let back = io::parse_edge_list(&text, Some(g.num_nodes())).unwrap();
        prop_assert_eq!(back, g);
    }
}

/// Poincaré inequality on 1000 random connected graphs with up to 50 nodes.
#[test]
fn poincare_holds_on_random_graphs() {
    let mut violations = 0;
    for trial in 0..1000u64 {
        let mut rng = rng_for(trial, &[3]);
        let n = rng.random_range(2..=50);
        let p = rng.random_range(0.0..0.3);
        let g = random_connected(n, p, &mut rng).unwrap();
        let anchor = rng.random_range(0..n);
        let mut y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        y[anchor] = 0.0;
        if !poincare_check(&g, &y, anchor).unwrap().holds {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn poincare_rejects_nonzero_anchor() {
    let g = random_connected(6, 0.2, &mut rng_for(0, &[])).unwrap();
    assert!(poincare_check(&g, &[1.0; 6], 0).is_err());
}

#[test]
fn generators_are_deterministic_and_hit_homophily() {
    for &h in &[0.0, 0.3, 0.6, 0.9] {
        let a = synthetic_homophily(5, 300, h, 5, 11).unwrap();
        let b = synthetic_homophily(5, 300, h, 5, 11).unwrap();
        assert_eq!(a.graph, b.graph);
        assert!(a.features.bitwise_eq(&b.features));
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.splits, b.splits);
        let Labels::Classes { labels, .. } = &a.labels else { panic!("classification labels") };
        let got = edge_homophily(&a.graph, labels).unwrap();
        assert!((got - h).abs() <= 0.02, "h = {h}: measured {got}");
        assert!(is_connected(&a.graph) || h == 1.0);
    }
    let c = synthetic_homophily(5, 300, 0.3, 5, 12).unwrap();
    let d = synthetic_homophily(5, 300, 0.3, 5, 11).unwrap();
    assert_ne!(c.graph, d.graph);

    let m1 = synthetic_multiscale(200, 3).unwrap();
    let m2 = synthetic_multiscale(200, 3).unwrap();
    assert_eq!(m1.labels, m2.labels);
    assert!(m1.features.bitwise_eq(&m2.features));
}

#[test]
fn dataset_bundle_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for ds in [synthetic_homophily(3, 60, 0.5, 4, 1).unwrap(), synthetic_multiscale(120, 2).unwrap()] {
        io::save_bundle(&ds, dir.path()).unwrap();
        let back = io::load_bundle(dir.path()).unwrap();
        assert_eq!(back.graph, ds.graph);
        assert!(back.features.bitwise_eq(&ds.features));
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.splits, ds.splits);
    }
}
