use std::sync::OnceLock;

use num_complex::Complex64;
use proptest::prelude::*;
use weylscope::error::Error;
use weylscope::geometry::{ManifoldModel, PlaneBump};
use weylscope::parametrix::*;
use weylscope::schrodinger::GridField;
use weylscope::wavefront::halfwave;

fn bump(model: &ManifoldModel) -> PlaneBump {
    match model {
        ManifoldModel::PerturbedPlane(b) => *b,
        _ => unreachable!(),
    }
}

fn tables(model: &ManifoldModel, h: f64, dt: f64) -> (PhaseTable, AmplitudeTable) {
    let grid = TableGrid::around(&bump(model), 0.3, dt, h, 8);
    let phase = solve_eikonal(model, &grid).unwrap();
    let amps = solve_transport(model, &phase, -1).unwrap();
    (phase, amps)
}

fn perturbed() -> &'static (PhaseTable, AmplitudeTable) {
    static T: OnceLock<(PhaseTable, AmplitudeTable)> = OnceLock::new();
    T.get_or_init(|| tables(&ManifoldModel::plane(0.05), 0.2, 0.1))
}

fn flat() -> &'static (PhaseTable, AmplitudeTable) {
    static T: OnceLock<(PhaseTable, AmplitudeTable)> = OnceLock::new();
    T.get_or_init(|| tables(&ManifoldModel::plane(0.0), 0.2, 0.1))
}

fn rel(a: &GridField, b: &GridField) -> f64 {
    let (a, b) = (a.to_position(), b.to_position());
    let num: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.values.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

#[test]
fn phase_starts_at_x_dot_eta() {
    let (p, _) = perturbed();
    let l = p.zero_level();
    for d in 0..p.angles.len() {
        let eta = p.direction(d);
        for i in 0..p.n {
            for j in 0..p.n {
                let x = p.node(i, j);
                assert!((p.phi[p.index(d, l, i, j)] - (x[0] * eta[0] + x[1] * eta[1])).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn time_derivative_keeps_the_negative_sign() {
    let (p, _) = perturbed();
    for d in 0..p.angles.len() {
        for l in 0..p.t_grid.len() {
            for i in 0..p.n {
                for j in 0..p.n {
                    let k = p.index(d, l, i, j);
                    let e = p.bump.conformal_jet(p.node(i, j)).e;
                    let g = p.grad_x_phi[k];
                    let norm = ((g[0] * g[0] + g[1] * g[1]) / e).sqrt();
                    assert!(p.dt_phi[k] < 0.0);
                    assert!((p.dt_phi[k] + norm).abs() < 1e-9, "{} {norm}", p.dt_phi[k]);
                }
            }
        }
    }
    assert!(p.cached_eikonal_residual() < 1e-9);
    assert!(p.min_jacobian() > MIN_JACOBIAN);
}

#[test]
fn pointwise_eikonal_residual_is_small() {
    let model = ManifoldModel::plane(0.05);
    let d = 1e-3;
    for (t, x, ang) in [(0.3, [0.2, -0.4], 0.3f64), (0.25, [-0.6, 0.5], 2.0), (0.15, [1.1, 0.1], 4.0)] {
        let eta = [ang.cos(), ang.sin()];
        let phi = |t: f64, x: [f64; 2]| phase_at(&model, t, x, eta, 0.01).unwrap().phi;
        let pt = (phi(t + d, x) - phi(t - d, x)) / (2.0 * d);
        let px = (phi(t, [x[0] + d, x[1]]) - phi(t, [x[0] - d, x[1]])) / (2.0 * d);
        let py = (phi(t, [x[0], x[1] + d]) - phi(t, [x[0], x[1] - d])) / (2.0 * d);
        let e = bump(&model).conformal_jet(x).e;
        assert!((pt * pt - (px * px + py * py) / e).abs() < 1e-6);
    }
}

#[test]
fn phase_is_constant_along_rays() {
    let model = ManifoldModel::plane(0.05);
    let eta = [0.8f64.cos(), 0.8f64.sin()];
    let y = [-0.7, -0.2];
    let times = [0.1, 0.2, 0.3];
    for (s, &t) in trace_ray(&model, y, eta, &times, 0.1).unwrap().iter().zip(&times) {
        let p = phase_at(&model, t, s.x, eta, 0.1).unwrap();
        assert!((p.phi - (y[0] * eta[0] + y[1] * eta[1])).abs() < 1e-10);
        assert!((p.source[0] - y[0]).abs() < 1e-9 && (p.source[1] - y[1]).abs() < 1e-9);
    }
}

#[test]
fn leading_amplitude_matches_ray_spreading() {
    // a_0 = sqrt(e(y) / (J e(x))) from the conserved flux along the ray tube.
    let (p, a) = perturbed();
    let mut checked = 0;
    for d in 0..p.angles.len() {
        for l in p.zero_level()..p.t_grid.len() {
            for i in 0..p.n {
                for j in 0..p.n {
                    let k = p.index(d, l, i, j);
                    let ey = p.bump.conformal_jet(p.source[k]).e;
                    let ex = p.bump.conformal_jet(p.node(i, j)).e;
                    let oracle = (ey / (p.jacobian[k] * ex)).sqrt();
                    assert!((a.a0[k] - oracle).abs() < 1e-6, "{} {oracle}", a.a0[k]);
                    checked += (a.a0[k] != 1.0) as usize;
                }
            }
        }
    }
    assert!(checked > 1000);
}

#[test]
fn amplitudes_start_from_their_initial_data() {
    let (p, a) = perturbed();
    let l = p.zero_level();
    for d in 0..p.angles.len() {
        for i in 0..p.n {
            for j in 0..p.n {
                let k = p.index(d, l, i, j);
                assert!((a.a0[k] - 1.0).abs() < 1e-12);
                assert!(a.am1[k].norm() < 1e-12);
            }
        }
    }
}

#[test]
fn pointwise_amplitude_agrees_with_table() {
    let model = ManifoldModel::plane(0.05);
    let (p, a) = perturbed();
    let l = p.level_of(0.3).unwrap();
    let (i, j) = (p.n / 2 + 2, p.n / 2 - 3);
    let k = p.index(1, l, i, j);
    let v = amplitude_at(&model, 0.3, p.node(i, j), p.direction(1), p.grid.dt).unwrap();
    assert!((v - a.a0[k]).abs() < 1e-9);
}

#[test]
fn residuals_refine_at_second_order() {
    let model = ManifoldModel::plane(0.05);
    let (p1, a1) = perturbed();
    let (p2, a2) = tables(&model, 0.1, 0.05);
    let eik = p1.difference_eikonal_residual() / p2.difference_eikonal_residual();
    let tr = a1.transport_residual(p1) / a2.transport_residual(&p2);
    assert!((3.2..=4.8).contains(&eik), "eikonal ratio {eik}");
    assert!((3.2..=4.8).contains(&tr), "transport ratio {tr}");
}

#[test]
fn euclidean_gate_holds() {
    let (p, a) = flat();
    assert!(p.phi.iter().zip(&p.dt_phi).all(|(_, &dt)| dt == -1.0));
    assert!(a.a0.iter().all(|&v| v == 1.0));
    assert!(a.am1.iter().all(|v| v.norm() == 0.0));
    assert!(a.box_phi.iter().all(|&v| v == 0.0));
}

#[test]
fn euclidean_parametrix_is_the_multiplier() {
    let (p, a) = flat();
    let f = band_packet(8.0, 64, [0.3, -0.2], 0.4).unwrap();
    let exact = halfwave(&f, 0.3);
    for order in [AmplitudeOrder::Leading, AmplitudeOrder::Corrected] {
        let u = apply_parametrix(p, a, &f, 0.3, [8.0, 16.0], order).unwrap();
        assert!(rel(&u, &exact) < 1e-8);
    }
}

#[test]
fn time_zero_reproduces_data() {
    let (p, a) = perturbed();
    let f = band_packet(8.0, 64, [-0.5, 0.2], 0.4).unwrap();
    let u = apply_parametrix(p, a, &f, 0.0, [8.0, 16.0], AmplitudeOrder::Corrected).unwrap();
    assert!(rel(&u, &f) < 1e-8);
}

#[test]
fn band_and_time_are_checked() {
    let (p, a) = perturbed();
    let f = band_packet(8.0, 64, [0.0, 0.0], 0.4).unwrap();
    let e = apply_parametrix(p, a, &f, 0.3, [12.0, 24.0], AmplitudeOrder::Leading).unwrap_err();
    assert!(matches!(e, Error::BandOutOfRange(_)));
    let e = apply_parametrix(p, a, &f, 0.25, [8.0, 16.0], AmplitudeOrder::Leading).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn strong_well_reaches_a_caustic() {
    let model = ManifoldModel::PerturbedPlane(PlaneBump::well(0.3));
    let grid = TableGrid::around(&bump(&model), 3.0, 0.5, 0.5, 8);
    let e = solve_eikonal(&model, &grid).unwrap_err();
    assert!(matches!(e, Error::CausticReached { .. }), "{e:?}");
}

#[test]
fn other_models_are_unsupported() {
    let e = phase_at(&ManifoldModel::sphere(1.0), 0.1, [1.0, 1.0], [1.0, 0.0], 0.1).unwrap_err();
    assert!(matches!(e, Error::Unsupported(_)));
}

#[test]
fn tables_round_trip_through_files() {
    let (p, a) = perturbed();
    let dir = tempfile::tempdir().unwrap();
    let (pp, ap) = (dir.path().join("phase.bin"), dir.path().join("amp.bin"));
    p.save(&pp).unwrap();
    a.save(p, &ap).unwrap();
    let q = PhaseTable::load(&pp).unwrap();
    assert_eq!(&q, p);
    assert_eq!(&AmplitudeTable::load(&q, &ap).unwrap(), a);
    let bytes = std::fs::read(&pp).unwrap();
    assert!(bytes.starts_with(TABLE_TAG.as_bytes()));
    std::fs::write(&pp, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(PhaseTable::load(&pp), Err(Error::Io(_))));
    assert!(matches!(PhaseTable::load(&ap), Err(Error::Io(_))));
}

#[test]
fn krylov_reference_matches_multiplier_when_flat() {
    let f = band_packet(8.0, 64, [0.3, -0.2], 0.4).unwrap();
    let r = reference_halfwave(&ManifoldModel::plane(0.0), &f, 0.3, 1e-12).unwrap();
    assert!(rel(&r.field, &halfwave(&f, 0.3)) < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]
    #[test]
    fn parametrix_is_linear(re in -2.0..2.0f64, im in -2.0..2.0f64, x0 in -1.0..1.0f64, x1 in -1.0..1.0f64) {
        let (p, a) = perturbed();
        let c = Complex64::new(re, im);
        let f = band_packet(8.0, 32, [x0, x1], 0.4).unwrap();
        let g = band_packet(8.0, 32, [x1, x0], 0.6).unwrap();
        let mut comb = f.clone();
        for (v, w) in comb.values.iter_mut().zip(&g.values) {
            *v = c * *v + w;
        }
        let band = [8.0, 16.0];
        let uf = apply_parametrix(p, a, &f, 0.3, band, AmplitudeOrder::Corrected).unwrap().to_position();
        let ug = apply_parametrix(p, a, &g, 0.3, band, AmplitudeOrder::Corrected).unwrap().to_position();
        let uc = apply_parametrix(p, a, &comb, 0.3, band, AmplitudeOrder::Corrected).unwrap().to_position();
        let scale: f64 = uc.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for ((x, y), z) in uf.values.iter().zip(&ug.values).zip(&uc.values) {
            prop_assert!((c * x + y - z).norm() <= 1e-12 * scale.max(1.0));
        }
    }
}
