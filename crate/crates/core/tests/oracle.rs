mod common;

use common::{dense_p2, set};
use whitney_core::clustering::{build_cluster_tree, ClusterConfig};
use whitney_core::cz::decompose;
use whitney_core::interpolant::extend;
use whitney_core::interpolant::AffinePolynomial;
use whitney_core::oracle::{
    discrete_seminorm, grid_minimal_extension, perturbation_gap, restrict, sample_test_function, AnalyticTestFunction,
    GridFunction, GridSpec, OracleConfig, RadialBump, TestFunctionConfig,
};

#[test]
fn p2_matches_dense_linear_solve() {
    let s = set(4, 1);
    for seed in 0..3 {
        let g = sample_test_function(seed, &TestFunctionConfig::default()).unwrap();
        let f = restrict(&g, &s);
        let cfg = OracleConfig {
            per_delta: 1,
            ..OracleConfig::default()
        };
        let r = grid_minimal_extension(&f, &s, 2.0, &cfg).unwrap();
        let (u, obj) = dense_p2(&s, &f, 1);
        let scale = u.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let err = r
            .grid
            .values
            .iter()
            .zip(&u)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-8 * scale, "seed {seed}: {err:e}");
        assert!(
            (r.objective - obj).abs() <= 1e-8 * obj.max(1e-300),
            "{} vs {obj}",
            r.objective
        );
    }
}

#[test]
fn minimizer_dominates_extension_and_perturbations() {
    let s = set(4, 1);
    let d = decompose(&s).unwrap();
    let t = build_cluster_tree(&s, ClusterConfig::relaxed()).unwrap();
    for p in [1.2, 1.5, 1.9] {
        for seed in 0..2 {
            let g = sample_test_function(seed, &TestFunctionConfig::default()).unwrap();
            let f = restrict(&g, &s);
            let r = grid_minimal_extension(&f, &s, p, &OracleConfig::default()).unwrap();
            let (ext, _, _) = extend(&f, &d, &t, p, 1e-10).unwrap();
            let fg = GridFunction::with_data(r.grid.spec, &s, &f, |x| ext.value(x)).unwrap();
            assert!(r.objective <= discrete_seminorm(&fg, p), "p {p} seed {seed}");
            let gap = perturbation_gap(&r, 20, 1e-3, seed);
            assert!(gap >= -1e-12 * r.objective, "p {p} seed {seed}: gap {gap:e}");
            for w in r.stage_objectives.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "stages {:?}", r.stage_objectives);
            }
        }
    }
}

#[test]
fn discrete_seminorm_refines_toward_continuum() {
    let s = set(4, 1);
    let g = AnalyticTestFunction {
        affine: AffinePolynomial::new(0.3, -0.2, 0.1),
        bumps: vec![RadialBump {
            center: [0.4, -0.3],
            radius: 1.5,
            amplitude: 0.7,
        }],
    };
    let exact = g.seminorm_pow(2.0);
    let f = restrict(&g, &s);
    let values: Vec<f64> = [2, 4]
        .iter()
        .map(|&m| {
            let spec = GridSpec::new(s.params(), m, 4097).unwrap();
            let gf = GridFunction::with_data(spec, &s, &f, |x| g.value(x)).unwrap();
            discrete_seminorm(&gf, 2.0)
        })
        .collect();
    assert!((values[0] - values[1]).abs() < 0.05 * values[1], "{values:?}");
    assert!(
        (values[1] - exact).abs() < (values[0] - exact).abs(),
        "{values:?} vs {exact}"
    );
    assert!((values[1] - exact).abs() < 0.05 * exact);
}

#[test]
fn quadratic_sample_example() {
    // g = x1², p = 2: every second difference is exact
    let s = set(4, 1);
    let spec = GridSpec::new(s.params(), 1, 4097).unwrap();
    let f: Vec<f64> = s.points_f64().iter().map(|x| x[0] * x[0]).collect();
    let g = GridFunction::with_data(spec, &s, &f, |x| x[0] * x[0]).unwrap();
    let h = spec.h();
    assert!((discrete_seminorm(&g, 2.0) - 4.0 * (spec.side * spec.side) as f64 * h * h).abs() < 1e-9);
    let lambda = -2.5;
    let mut scaled = g.clone();
    scaled.values.iter_mut().for_each(|v| *v *= lambda);
    for p in [1.2, 1.5, 2.0] {
        let ratio = discrete_seminorm(&scaled, p) / discrete_seminorm(&g, p);
        assert!((ratio - f64::abs(lambda).powf(p)).abs() < 1e-12 * ratio);
    }
}
