use std::f64::consts::PI;

use proptest::prelude::*;
use weylscope::geometry::ManifoldModel;
use weylscope::hamflow::*;

fn pp(x: &[f64], xi: &[f64]) -> PhasePoint {
    PhasePoint::new(x.to_vec(), xi.to_vec())
}

fn embed(x: &[f64]) -> [f64; 3] {
    [x[0].sin() * x[1].cos(), x[0].sin() * x[1].sin(), x[0].cos()]
}

#[test]
fn field_of_free_symbol() {
    let a = FnSymbol::new(|_x: &[f64], xi: &[f64]| xi[0] * xi[0] + xi[1] * xi[1]);
    let (dx, dxi) = hamilton_field(&a, &pp(&[0.0, 0.0], &[1.0, 0.0])).unwrap();
    assert!((dx[0] - 2.0).abs() < 1e-9 && dx[1].abs() < 1e-9);
    assert!(dxi.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn field_of_bilinear_symbol() {
    let a = FnSymbol::new(|x: &[f64], xi: &[f64]| x[0] * xi[0]);
    let (dx, dxi) = hamilton_field(&a, &pp(&[2.0], &[3.0])).unwrap();
    assert!((dx[0] - 2.0).abs() < 1e-9);
    assert!((dxi[0] + 3.0).abs() < 1e-9);
}

#[test]
fn metric_symbol_matches_finite_differences() {
    let model = ManifoldModel::preset("plane").unwrap();
    let exact = MetricSymbol::squared(&model);
    let m2 = model.clone();
    let fd = FnSymbol::new(move |x: &[f64], xi: &[f64]| m2.cosymbol(x, xi).unwrap());
    for q in [pp(&[0.0, 0.0], &[0.7, -1.1]), pp(&[0.3, 0.2], &[1.0, 0.5]), pp(&[-0.5, 0.6], &[-0.2, 2.0])] {
        let (a, b) = hamilton_field(&exact, &q).unwrap();
        let (c, d) = hamilton_field(&fd, &q).unwrap();
        for i in 0..2 {
            assert!((a[i] - c[i]).abs() < 1e-8, "{a:?} {c:?}");
            assert!((b[i] - d[i]).abs() < 1e-8, "{b:?} {d:?}");
        }
        let h1 = exact.hessian(&q).unwrap();
        let h2 = MetricSymbol::squared(&model);
        let fdh = FnSymbol::with_step(|x: &[f64], xi: &[f64]| h2.value(&pp(x, xi)).unwrap(), 1e-4).hessian(&q).unwrap();
        assert!((h1 - fdh).amax() < 1e-5);
    }
}

#[test]
fn norm_symbol_hessian_matches_finite_differences() {
    for name in ["ellipsoid", "sphere", "peanut"] {
        let model = ManifoldModel::preset(name).unwrap();
        let s = MetricSymbol::norm(&model);
        let q = pp(&[1.1, 0.4], &[0.3, -0.8]);
        let fd = FnSymbol::with_step(|x: &[f64], xi: &[f64]| s.value(&pp(x, xi)).unwrap(), 1e-4);
        assert!((s.hessian(&q).unwrap() - fd.hessian(&q).unwrap()).amax() < 1e-6, "{name}");
    }
}

#[test]
fn canonical_pair_bracket() {
    let xi1 = FnSymbol::new(|_x: &[f64], xi: &[f64]| xi[0]);
    let x1 = FnSymbol::new(|x: &[f64], _xi: &[f64]| x[0]);
    for q in [pp(&[0.0, 0.0], &[0.0, 0.0]), pp(&[3.0, -1.0], &[2.0, 5.0])] {
        assert!((poisson_bracket(&xi1, &x1, &q).unwrap() - 1.0).abs() < 1e-9);
    }
}

fn radial_momentum(x: &[f64], xi: &[f64]) -> f64 {
    (x[0] * xi[0] + x[1] * xi[1]) / x[0].hypot(x[1])
}

#[test]
fn morawetz_bracket_closed_form() {
    let f = FnSymbol::new(|_x: &[f64], xi: &[f64]| xi[0] * xi[0] + xi[1] * xi[1]);
    let g = FnSymbol::new(radial_momentum);
    let v = poisson_bracket(&f, &g, &pp(&[1.0, 0.0], &[0.0, 1.0])).unwrap();
    assert!((v - 2.0).abs() < 1e-8);
    let q = pp(&[0.4, -1.3], &[1.2, 0.7]);
    let r = q.x[0].hypot(q.x[1]);
    let k2 = q.xi[0].powi(2) + q.xi[1].powi(2);
    let rad = radial_momentum(&q.x, &q.xi);
    let expect = 2.0 / r * (k2 - rad * rad);
    assert!((poisson_bracket(&f, &g, &q).unwrap() - expect).abs() < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn bracket_antisymmetry(x0 in -2.0..2.0f64, x1 in 0.5..2.0f64, k0 in -2.0..2.0f64, k1 in -2.0..2.0f64) {
        let f = FnSymbol::new(|x: &[f64], xi: &[f64]| x[0] * xi[1] * xi[1] + x[1].sin() * xi[0]);
        let g = FnSymbol::new(radial_momentum);
        let q = pp(&[x0, x1], &[k0, k1]);
        let s = poisson_bracket(&f, &g, &q).unwrap() + poisson_bracket(&g, &f, &q).unwrap();
        prop_assert!(s.abs() < 1e-12);
    }

    #[test]
    fn reversal_returns_to_start(x0 in -1.0..1.0f64, x1 in -1.0..1.0f64, ang in 0.0..std::f64::consts::TAU) {
        let model = ManifoldModel::preset("plane").unwrap();
        let h = MetricSymbol::norm(&model);
        let q0 = PhasePoint::normalized(&model, vec![x0, x1], vec![ang.cos(), ang.sin()]).unwrap();
        let fwd = integrate_bicharacteristic(&h, Some(&model), &q0, 3.0, StepControl::default()).unwrap();
        let back = integrate_bicharacteristic(&h, Some(&model), &fwd.end().point, -3.0, StepControl::default()).unwrap();
        prop_assert!(phase_distance(&model, &back.end().point, &q0) < 1e-9);
    }
}

#[test]
fn euclidean_rays_are_straight() {
    let model = ManifoldModel::preset("euclidean").unwrap();
    let h = MetricSymbol::norm(&model);
    let q0 = pp(&[1.0, -2.0], &[0.6, 0.8]);
    let tr = integrate_bicharacteristic(&h, Some(&model), &q0, 5.0, StepControl::default()).unwrap();
    for s in &tr.samples {
        assert!((s.point.x[0] - 1.0 - 0.6 * s.s).abs() < 1e-12);
        assert!((s.point.x[1] + 2.0 - 0.8 * s.s).abs() < 1e-12);
    }
    assert!(tr.samples.windows(2).all(|w| w[1].s > w[0].s));
}

#[test]
fn sphere_equator_closes() {
    let model = ManifoldModel::sphere(1.0);
    let h = MetricSymbol::norm(&model);
    let q0 = pp(&[PI / 2.0, 0.0], &[0.0, 1.0]);
    let tr = integrate_bicharacteristic(&h, Some(&model), &q0, 2.0 * PI, StepControl::default()).unwrap();
    assert!(phase_distance(&model, &tr.end().point, &q0) < 1e-8);
}

#[test]
fn sphere_meridian_crosses_poles_via_chart_switch() {
    let model = ManifoldModel::sphere(1.0);
    let h = MetricSymbol::norm(&model);
    let q0 = pp(&[PI / 2.0, 0.3], &[-1.0, 0.0]);
    let tr = integrate_bicharacteristic(&h, Some(&model), &q0, 2.0 * PI, StepControl::default()).unwrap();
    assert!(tr.chart_switches >= 1);
    assert!(tr.hamiltonian_drift < 1e-9);
    let e = embed(&q0.x);
    let north = [0.0, 0.0, 1.0];
    for s in tr.samples.iter().filter(|s| s.chart == 0) {
        let p = embed(&s.point.x);
        let want: Vec<f64> = (0..3).map(|i| s.s.cos() * e[i] + s.s.sin() * north[i]).collect();
        let err = (0..3).map(|i| (p[i] - want[i]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "s = {} err {err}", s.s);
    }
    assert!(phase_distance(&model, &tr.end().point, &q0) < 1e-8);
}

#[test]
fn torus_diagonal_closes() {
    let model = ManifoldModel::preset("torus-2pi").unwrap();
    let h = MetricSymbol::norm(&model);
    let r = 0.5f64.sqrt();
    let q0 = pp(&[0.0, 0.0], &[r, r]);
    let tr = integrate_bicharacteristic(&h, Some(&model), &q0, 2.0 * PI * 2f64.sqrt(), StepControl::default()).unwrap();
    let end = &tr.end().point;
    assert!((end.x[0] - 2.0 * PI).abs() < 1e-10 && (end.x[1] - 2.0 * PI).abs() < 1e-10);
    assert!(phase_distance(&model, end, &q0) < 1e-10);
}

#[test]
fn drift_is_fourth_order() {
    let model = ManifoldModel::preset("plane").unwrap();
    let h = MetricSymbol::squared(&model);
    let q0 = pp(&[-2.0, 0.35], &[1.0, 0.0]);
    let drift = |dt: f64| integrate_bicharacteristic(&h, Some(&model), &q0, 2.0, StepControl::Fixed(dt)).unwrap().hamiltonian_drift;
    let (d1, d2) = (drift(0.02), drift(0.01));
    assert!(d1 / d2 >= 8.0, "{d1:e} {d2:e}");
}

#[test]
fn norm_is_conserved_along_flow() {
    for name in ["ellipsoid", "plane", "peanut"] {
        let model = ManifoldModel::preset(name).unwrap();
        let h = MetricSymbol::norm(&model);
        let x = if name == "plane" { vec![-1.5, 0.2] } else { vec![1.2, 0.0] };
        let q0 = PhasePoint::normalized(&model, x, vec![0.4, 0.9]).unwrap();
        let tr = integrate_bicharacteristic(&h, Some(&model), &q0, 3.0, StepControl::default()).unwrap();
        for s in &tr.samples {
            assert!((model.cosymbol(&s.point.x, &s.point.xi).unwrap().sqrt() - 1.0).abs() < 1e-9, "{name}");
        }
    }
}

#[test]
fn csv_export_has_header_and_rows() {
    let model = ManifoldModel::preset("euclidean").unwrap();
    let tr =
        integrate_bicharacteristic(&MetricSymbol::norm(&model), Some(&model), &pp(&[0.0, 0.0], &[1.0, 0.0]), 1.0, StepControl::Fixed(0.25))
            .unwrap();
    let csv = tr.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "s,x1,x2,xi1,xi2,h_value");
    assert_eq!(lines.len(), 6);
}

#[test]
fn torus_closed_geodesics_match_enumeration() {
    let model = ManifoldModel::preset("torus-2pi").unwrap();
    let list = find_closed_geodesics(&model, 10.0).unwrap();
    let got: Vec<(f64, usize)> = list.iter().map(|g| (g.length, g.multiplicity)).collect();
    assert_eq!(got.len(), 2);
    assert!((got[0].0 - 2.0 * PI).abs() < 1e-12 && got[0].1 == 4);
    assert!((got[1].0 - 2.0 * PI * 2f64.sqrt()).abs() < 1e-12 && got[1].1 == 4);

    let list = find_closed_geodesics(&model, 40.0).unwrap();
    let mut brute: Vec<f64> = Vec::new();
    for a in -10i64..=10 {
        for b in -10i64..=10 {
            let l = 2.0 * PI * ((a * a + b * b) as f64).sqrt();
            if (a, b) != (0, 0) && l <= 40.0 {
                brute.push(l);
            }
        }
    }
    assert_eq!(list.iter().map(|g| g.multiplicity).sum::<usize>(), brute.len());
    for g in &list {
        let count = brute.iter().filter(|l| (*l - g.length).abs() < 1e-9).count();
        assert_eq!(count, g.multiplicity);
    }
}

#[test]
fn sphere_and_ellipsoid_catalogs() {
    let list = find_closed_geodesics(&ManifoldModel::sphere(1.0), 7.0).unwrap();
    assert_eq!(list.len(), 1);
    assert!((list[0].length - 2.0 * PI).abs() < 1e-12);
    assert_eq!(list[0].multiplicity_note, "family");

    let model = ManifoldModel::preset("ellipsoid").unwrap();
    let list = find_closed_geodesics(&model, 8.0).unwrap();
    let ManifoldModel::SurfaceOfRevolution(prof) = &model else { unreachable!() };
    let s = prof.length().unwrap();
    assert!(list.iter().any(|g| (g.length - 2.0 * PI).abs() < 1e-9 && (g.start.x[0] - PI / 2.0).abs() < 1e-9));
    assert!(list.iter().any(|g| (g.length - 2.0 * s).abs() < 1e-9));
    assert!(list.windows(2).all(|w| w[0].length <= w[1].length));
}

#[test]
fn closed_orbits_return_to_start() {
    for name in ["torus-2pi", "sphere", "ellipsoid", "peanut"] {
        let model = ManifoldModel::preset(name).unwrap();
        let h = MetricSymbol::norm(&model);
        for g in find_closed_geodesics(&model, 7.0).unwrap().iter().filter(|g| g.multiplicity_note != "family" || name != "peanut") {
            if matches!(model, ManifoldModel::SurfaceOfRevolution(_)) && g.start.xi[1] == 0.0 {
                continue;
            }
            let tr = integrate_bicharacteristic(&h, Some(&model), &g.start, g.length, StepControl::default()).unwrap();
            assert!(phase_distance(&model, &tr.end().point, &g.start) < 1e-8, "{name} {}", g.length);
        }
    }
}

fn mono(name: &str, pick: impl Fn(&ClosedGeodesic) -> bool) -> ClosedGeodesic {
    let model = ManifoldModel::preset(name).unwrap();
    let g = find_closed_geodesics(&model, 10.0).unwrap().into_iter().find(|g| pick(g)).unwrap();
    monodromy(&model, &g, StepControl::default()).unwrap()
}

#[test]
fn torus_monodromy_is_a_shear() {
    let g = mono("torus-2pi", |_| true);
    let dp = g.monodromy.as_ref().unwrap();
    assert!(g.det_factor.unwrap().abs() < 1e-8);
    assert!((dp.trace() - 2.0).abs() < 1e-8);
    assert!((dp.determinant() - 1.0).abs() < 1e-8);
    assert_eq!(g.conj_count, Some(0));
}

#[test]
fn sphere_monodromy_is_identity() {
    let g = mono("sphere", |_| true);
    let dp = g.monodromy.as_ref().unwrap();
    assert!((dp - nalgebra::DMatrix::<f64>::identity(2, 2)).amax() < 1e-8, "{dp}");
    assert!(g.det_factor.unwrap().abs() < 1e-8);
    assert_eq!(g.conj_count, Some(2));
}

#[test]
fn ellipsoid_equator_matches_jacobi_oracle() {
    let g = mono("ellipsoid", |g| g.start.xi[0] == 0.0);
    let k = 1.0 / 1.3f64.powi(2);
    let want = 2.0 - 2.0 * (k.sqrt() * g.length).cos();
    assert!((g.det_factor.unwrap() - want).abs() < 1e-4, "{:?} {want}", g.det_factor);
    assert!((g.monodromy.as_ref().unwrap().determinant() - 1.0).abs() < 1e-8);
    assert_eq!(g.conj_count, Some(1));
}

#[test]
fn peanut_waist_is_hyperbolic() {
    let model = ManifoldModel::preset("peanut").unwrap();
    let ManifoldModel::SurfaceOfRevolution(prof) = &model else { unreachable!() };
    let g = mono("peanut", |g| g.start.xi[0] == 0.0 && (g.start.x[0] - PI / 2.0).abs() < 1e-9);
    let k = prof.gauss_curvature(PI / 2.0);
    assert!(k < 0.0);
    let want = 2.0 - 2.0 * ((-k).sqrt() * g.length).cosh();
    assert!((g.det_factor.unwrap() - want).abs() < 1e-4 * want.abs(), "{:?} {want}", g.det_factor);
    assert_eq!(g.conj_count, Some(0));
    assert!((g.monodromy.as_ref().unwrap().determinant() - 1.0).abs() < 1e-8);
}

#[test]
fn euclidean_plane_everything_escapes() {
    let model = ManifoldModel::preset("euclidean").unwrap();
    for (x, xi) in [([0.0, 0.0], [1.0, 0.0]), ([0.5, -0.3], [-0.2, 1.0]), ([3.0, 4.0], [0.6, 0.8])] {
        let r = classify_trapping(&model, &pp(&x, &xi), 100.0, 8.0).unwrap();
        assert!(!r.forward.is_trapped() && !r.backward.is_trapped());
    }
}

#[test]
fn outgoing_far_point_escapes_immediately() {
    let model = ManifoldModel::preset("plane").unwrap();
    let r = classify_trapping(&model, &pp(&[6.0, 8.0], &[0.6, 0.8]), 100.0, 8.0).unwrap();
    let Fate::Escaped { time } = r.forward else { panic!() };
    assert!(time < 0.05);
}

#[test]
fn deep_well_traps_tangential_launch() {
    let model = ManifoldModel::preset("plane-well").unwrap();
    // f(r) = r sqrt(e(r)); tangential launches where f decreases are confined.
    let f = |r: f64| r * model.metric_at(&[r, 0.0]).unwrap().g[(0, 0)].sqrt();
    let rs: Vec<f64> = (1..3000).map(|i| i as f64 / 1000.0).collect();
    let i = (1..rs.len() - 1).find(|&i| f(rs[i]) > f(rs[i - 1]) && f(rs[i]) > f(rs[i + 1])).expect("local max");
    let j = (i + 1..rs.len() - 1).find(|&j| f(rs[j]) < f(rs[j - 1]) && f(rs[j]) < f(rs[j + 1])).expect("local min");
    let r0 = 0.5 * (rs[i] + rs[j]);
    let r = classify_trapping(&model, &pp(&[r0, 0.0], &[0.0, 1.0]), 500.0, 8.0).unwrap();
    assert!(r.forward.is_trapped() && r.backward.is_trapped(), "{r:?}");
}

#[test]
fn trapping_rejects_other_models() {
    let e = classify_trapping(&ManifoldModel::sphere(1.0), &pp(&[1.0, 0.0], &[0.0, 1.0]), 1.0, 8.0).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}
