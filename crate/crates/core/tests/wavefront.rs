use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64;
use proptest::prelude::*;
use weylscope::error::Error;
use weylscope::geometry::Lattice;
use weylscope::schrodinger::GridField;
use weylscope::wavefront::*;

const CELLS: usize = 2048;
const SIDE: f64 = 4.0;
const WINDOW: f64 = 0.2;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

fn disc() -> &'static GridField {
    static DISC: OnceLock<GridField> = OnceLock::new();
    DISC.get_or_init(|| disc_indicator(CELLS, SIDE, 1.0).unwrap())
}

fn thresholds() -> Thresholds {
    static CAL: OnceLock<Calibration> = OnceLock::new();
    CAL.get_or_init(|| calibrate(CELLS, SIDE, WINDOW).unwrap()).thresholds
}

fn polar(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

fn max_gap(a: &GridField, b: &GridField) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn identity_symbol_is_identity() {
    let f = GridField::from_fn(&[16, 8], Lattice::scaled_identity(2, 3.0), |x| Complex64::new(x[0].sin(), x[1] * x[0])).unwrap();
    let g = quantize_symbol(&GridSymbol::multiplier(|_| c(1.0)), &f).unwrap();
    assert!(max_gap(&f, &g) < 1e-13);
}

#[test]
fn momentum_symbol_differentiates_plane_waves() {
    let lat = Lattice::scaled_identity(2, 2.0 * PI);
    let f = GridField::from_fn(&[16, 16], lat, |x| Complex64::from_polar(1.0, 3.0 * x[0] - 2.0 * x[1])).unwrap();
    let g = quantize_symbol(&GridSymbol::multiplier(|k| c(k[0])), &f).unwrap();
    for (a, b) in f.values.iter().zip(&g.values) {
        assert!((b - 3.0 * a).norm() < 1e-12);
    }
}

#[test]
fn position_symbol_multiplies() {
    let lat = Lattice::scaled_identity(2, 2.0);
    let f = GridField::from_fn(&[8, 16], lat, |x| Complex64::new(1.0 + x[1], x[0])).unwrap();
    let chi = |x: &[f64]| c((-x[0] * x[0] - 2.0 * x[1] * x[1]).exp());
    let g = quantize_symbol(&GridSymbol::multiplication(chi), &f).unwrap();
    for idx in 0..f.len() {
        let x = f.position(idx);
        assert!((g.values[idx] - chi(&x) * f.values[idx]).norm() < 1e-13);
    }
}

#[test]
fn fast_and_direct_quantization_agree() {
    let lat = Lattice::scaled_identity(2, 2.0 * PI);
    let f = GridField::from_fn(&[32, 32], lat, |x| Complex64::new((x[0] - 0.3).tanh() * (-x[1] * x[1]).exp(), x[1].cos())).unwrap();
    let sep = GridSymbol::separable(vec![
        (Box::new(|x: &[f64]| c(x[0].sin())), Box::new(|k: &[f64]| c(k[0]))),
        (Box::new(|x: &[f64]| Complex64::new(0.0, x[1].cos())), Box::new(|k: &[f64]| c((1.0 + k[0] * k[0] + k[1] * k[1]).sqrt()))),
        (Box::new(|_: &[f64]| c(1.0)), Box::new(|_: &[f64]| c(0.5))),
    ]);
    let fast = quantize_symbol(&sep, &f).unwrap();
    let direct = quantize_symbol_direct(&sep, &f).unwrap();
    let scale = fast.sup_norm();
    assert!(max_gap(&fast, &direct) < 1e-10 * scale, "gap {}", max_gap(&fast, &direct));
    let general =
        GridSymbol::general(|x, k| c(x[0].sin() * k[0]) + Complex64::new(0.0, x[1].cos()) * (1.0 + k[0] * k[0] + k[1] * k[1]).sqrt() + 0.5);
    let via_general = quantize_symbol(&general, &f).unwrap();
    assert!(max_gap(&fast, &via_general) < 1e-10 * scale);
}

#[test]
fn direct_quantization_refuses_large_grids() {
    let f = GridField::zeros(&[128, 64], Lattice::scaled_identity(2, 1.0)).unwrap();
    let a = GridSymbol::general(|_, _| c(1.0));
    assert!(matches!(quantize_symbol(&a, &f), Err(Error::Config(_))));
}

#[test]
fn calibration_separates_jump_from_gaussian() {
    let cal = calibrate(CELLS, SIDE, WINDOW).unwrap();
    assert!((cal.heaviside_exponent - 1.0).abs() < 0.1, "{cal:?}");
    assert!(cal.gaussian_exponent > 8.0, "{cal:?}");
    assert!((cal.thresholds.p_sing - 1.5).abs() < 0.1);
    assert_eq!(cal.thresholds.p_smooth, 4.0);
}

#[test]
fn coarse_grids_lack_shells() {
    let f = periodic_step(128, SIDE).unwrap();
    assert!(matches!(ConeProbe::new(&f, &[0.0], &[1.0], WINDOW), Err(Error::InsufficientShells { needed: 4, .. })));
}

#[test]
fn probe_validation() {
    let f = periodic_step(CELLS, SIDE).unwrap();
    let p = ConeProbe::new(&f, &[0.0], &[1.0], WINDOW).unwrap();
    let mut wide = p.clone();
    wide.angular_width = PI / 2.0;
    assert!(matches!(wavefront_scan(&f, &[wide], &Thresholds::default()), Err(Error::Config(_))));
    assert!(matches!(ConeProbe::new(&f, &[0.0], &[0.0], WINDOW), Err(Error::Config(_))));
    assert!(matches!(ConeProbe::new(&f, &[0.0], &[1.0], 3.0), Err(Error::Config(_))));
}

#[test]
fn gaussian_bump_is_smooth_in_every_direction() {
    let f =
        GridField::from_fn(&[CELLS, CELLS], Lattice::scaled_identity(2, SIDE), |x| c((-(x[0] * x[0] + x[1] * x[1]) / 0.5).exp())).unwrap();
    let base = ConeProbe::new(&f, &[0.2, -0.1], &[1.0, 0.0], WINDOW).unwrap();
    let probes: Vec<ConeProbe> = (0..8).map(|i| base.toward(&polar(PI * i as f64 / 4.0)).unwrap()).collect();
    for r in wavefront_scan(&f, &probes, &thresholds()).unwrap() {
        assert_eq!(r.class, Verdict::Smooth, "{r:?}");
    }
}

#[test]
fn disc_boundary_is_singular_along_normals_only() {
    let d = disc();
    let th = thresholds();
    let mut correct = 0;
    let total = 24;
    for i in 0..total {
        let theta = 2.0 * PI * (i as f64 + 0.3) / total as f64;
        let x0 = polar(theta);
        let base = ConeProbe::new(d, &x0, &x0, WINDOW).unwrap();
        let probes = [
            base.clone(),
            base.toward(&[-x0[0], -x0[1]]).unwrap(),
            base.toward(&[-x0[1], x0[0]]).unwrap(),
            base.toward(&[x0[1], -x0[0]]).unwrap(),
        ];
        let r = wavefront_scan(d, &probes, &th).unwrap();
        let ok = r[0].class == Verdict::Singular
            && r[1].class == Verdict::Singular
            && r[2].class == Verdict::Smooth
            && r[3].class == Verdict::Smooth;
        correct += ok as usize;
        assert!(r[0].exponent < 1.3 && r[0].residual < 0.3, "{:?}", r[0]);
    }
    assert!(correct * 100 >= 95 * total, "{correct}/{total}");
}

#[test]
fn disc_interior_and_exterior_are_smooth() {
    let d = disc();
    let th = thresholds();
    for x0 in [[0.0, 0.0], [0.5, -0.3], [1.5, 0.4], [-1.4, -1.2]] {
        let base = ConeProbe::new(d, &x0, &[1.0, 0.0], WINDOW).unwrap();
        let probes: Vec<ConeProbe> = (0..4).map(|i| base.toward(&polar(PI * i as f64 / 2.0 + 0.4)).unwrap()).collect();
        for r in wavefront_scan(d, &probes, &th).unwrap() {
            assert_eq!(r.class, Verdict::Smooth, "{r:?}");
        }
    }
}

#[test]
fn line_delta_is_singular_in_its_conormals() {
    let side = SIDE;
    let f = from_coefficients(&[CELLS, CELLS], Lattice::scaled_identity(2, side), |k| if k[1] == 0.0 { c(1.0 / side) } else { c(0.0) })
        .unwrap();
    let base = ConeProbe::new(&f, &[0.0, 0.3], &[1.0, 0.0], WINDOW).unwrap();
    let probes: Vec<ConeProbe> = (0..8).map(|i| base.toward(&polar(PI * i as f64 / 4.0)).unwrap()).collect();
    let r = wavefront_scan(&f, &probes, &thresholds()).unwrap();
    for (i, rep) in r.iter().enumerate() {
        let want = if i % 4 == 0 { Verdict::Singular } else { Verdict::Smooth };
        assert_eq!(rep.class, want, "direction {i}: {rep:?}");
    }
    assert!(r[0].exponent.abs() < 0.2, "{:?}", r[0]);
    let off = wavefront_scan(&f, &[base.at(&[0.5, 0.3])], &thresholds()).unwrap();
    assert_eq!(off[0].class, Verdict::Smooth);
}

#[test]
fn step_singularities_travel_forward() {
    let f = periodic_step(CELLS, SIDE).unwrap();
    let th = thresholds();
    let p = ConeProbe::new(&f, &[0.0], &[1.0], WINDOW).unwrap();
    let probes = [p.clone(), p.toward(&[-1.0]).unwrap()];
    for t in [0.25, 0.5] {
        let rep = halfwave_transport_check(&f, &probes, t, &th).unwrap();
        assert!((rep.entries[0].located[0] - t).abs() < 1e-6);
        assert!((rep.entries[1].located[0] + t).abs() < 1e-6);
    }
    let moved = halfwave(&f, 0.5);
    let ahead = wavefront_scan(&moved, &[p.at(&[0.5]), p.at(&[0.5]).toward(&[-1.0]).unwrap()], &th).unwrap();
    assert_eq!(ahead[0].class, Verdict::Singular);
    assert_ne!(ahead[1].class, Verdict::Singular);
}

#[test]
fn disc_ring_moves_along_normals() {
    let d = disc();
    let th = thresholds();
    let mut probes = vec![];
    for i in 0..6 {
        let x0 = polar(2.0 * PI * (i as f64 + 0.5) / 6.0);
        let p = ConeProbe::new(d, &x0, &x0, WINDOW).unwrap();
        probes.push(p.toward(&[-x0[0], -x0[1]]).unwrap());
        probes.push(p);
    }
    for t in [0.25, 0.5] {
        let rep = halfwave_transport_check(d, &probes, t, &th).unwrap();
        for e in &rep.entries {
            let r = (e.located[0].powi(2) + e.located[1].powi(2)).sqrt();
            let want = if e.probe % 2 == 0 { 1.0 - t } else { 1.0 + t };
            assert!((r - want).abs() <= rep.cell, "{e:?}");
        }
    }
}

#[test]
fn zero_time_transport_is_identity() {
    let d = disc();
    let th = thresholds();
    let x0 = polar(0.7);
    let p = ConeProbe::new(d, &x0, &x0, WINDOW).unwrap();
    let probes = [p.clone(), p.toward(&[-x0[1], x0[0]]).unwrap()];
    let before = wavefront_scan(d, &probes, &th).unwrap();
    let after = wavefront_scan(&halfwave(d, 0.0), &probes, &th).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.class, b.class);
        assert!((a.exponent - b.exponent).abs() < 1e-9);
    }
    let rep = halfwave_transport_check(d, &probes[..1], 0.0, &th).unwrap();
    assert!(rep.entries[0].offset < 0.25 * rep.cell, "{:?}", rep.entries[0]);
}

#[test]
fn wrong_direction_is_a_mismatch() {
    let d = disc();
    let x0 = polar(1.1);
    let inward = ConeProbe::new(d, &x0, &[-x0[0], -x0[1]], WINDOW).unwrap();
    let mut lying = inward.clone();
    lying.xi_hat0 = x0.to_vec();
    let evolved_back = halfwave(d, -0.5);
    match halfwave_transport_check(&evolved_back, &[inward, lying], 0.5, &thresholds()) {
        Err(Error::TransportMismatch(bad)) => assert_eq!(bad, vec![0, 1]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn conic_cutoff_keeps_only_its_directions() {
    let d = disc();
    let th = thresholds();
    let bump = |s: f64| if s.abs() >= 1.0 { 0.0 } else { (1.0 - 1.0 / (1.0 - s * s)).exp() };
    let a = GridSymbol::multiplier(move |k: &[f64]| {
        let q = (k[0] * k[0] + k[1] * k[1]).sqrt();
        if q == 0.0 {
            return c(0.0);
        }
        let chord = ((k[0] / q - 1.0).powi(2) + (k[1] / q).powi(2)).sqrt();
        c(bump(chord / 0.5) * (1.0 - bump((q / 2.0).min(1.0))))
    });
    let filtered = quantize_symbol(&a, d).unwrap();
    let mut singular_seen = 0;
    for i in 0..12 {
        let x0 = polar(2.0 * PI * i as f64 / 12.0);
        let base = ConeProbe::new(d, &x0, &x0, WINDOW).unwrap();
        let probes: Vec<ConeProbe> = (0..8).map(|m| base.toward(&polar(PI * m as f64 / 4.0)).unwrap()).collect();
        let before = wavefront_scan(d, &probes, &th).unwrap();
        let after = wavefront_scan(&filtered, &probes, &th).unwrap();
        for (b, f) in before.iter().zip(&after) {
            if f.class == Verdict::Singular {
                singular_seen += 1;
                assert_eq!(b.class, Verdict::Singular, "{f:?}");
                let chord = ((f.direction[0] - 1.0).powi(2) + f.direction[1].powi(2)).sqrt();
                let slack = 2.0 * (DEFAULT_ANGULAR_WIDTH / 2.0).sin();
                assert!(chord < 0.5 + slack, "{f:?}");
            }
        }
    }
    assert!(singular_seen > 0);
}

#[test]
fn halving_the_window_keeps_smooth_points_smooth() {
    let d = disc();
    let th = thresholds();
    for x0 in [[0.0, 0.0], [0.6, 0.2], [-0.3, 0.7], [1.4, -0.2]] {
        for m in 0..4 {
            let dir = polar(PI * m as f64 / 2.0 + 0.3);
            let wide = ConeProbe::new(d, &x0, &dir, WINDOW).unwrap();
            let narrow = ConeProbe::new(d, &x0, &dir, WINDOW / 2.0).unwrap();
            let r = wavefront_scan(d, &[wide, narrow], &th).unwrap();
            assert_eq!(r[0].class, Verdict::Smooth);
            assert_ne!(r[1].class, Verdict::Singular, "{:?}", r[1]);
        }
    }
}

#[test]
fn report_csv_layout() {
    let f = periodic_step(CELLS, SIDE).unwrap();
    let p = ConeProbe::new(&f, &[0.0], &[-1.0], WINDOW).unwrap();
    let csv = reports_csv(&wavefront_scan(&f, &[p], &thresholds()).unwrap());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x0_1,x0_2,dir_angle,exponent,residual,class");
    let cols: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cols.len(), 6);
    assert!((cols[2].parse::<f64>().unwrap() - PI).abs() < 1e-6);
    assert_eq!(cols[5], "singular");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn halfwave_is_a_unitary_group(s in -2.0..2.0f64, t in -2.0..2.0f64, shift in -1.0..1.0f64) {
        let f = GridField::from_fn(&[64, 32], Lattice::scaled_identity(2, 5.0), |x| Complex64::new((-(x[0] - shift).powi(2)).exp(), x[1].sin() * 0.1)).unwrap();
        let a = halfwave(&halfwave(&f, s), t);
        let b = halfwave(&f, s + t);
        prop_assert!(max_gap(&a, &b) < 1e-12);
        prop_assert!((a.l2_norm() - f.l2_norm()).abs() < 1e-12 * f.l2_norm());
    }

    #[test]
    fn smooth_data_stays_smooth(t in -1.5..1.5f64, center in -0.5..0.5f64, at in -1.0..1.0f64) {
        let f = GridField::from_fn(&[CELLS], Lattice::scaled_identity(1, SIDE), |x| c((-(x[0] - center).powi(2) / 0.05).exp())).unwrap();
        let g = halfwave(&f, t);
        let p = ConeProbe::new(&g, &[at], &[1.0], WINDOW).unwrap();
        for r in wavefront_scan(&g, &[p.clone(), p.toward(&[-1.0]).unwrap()], &thresholds()).unwrap() {
            prop_assert_eq!(r.class, Verdict::Smooth);
        }
    }

    #[test]
    fn exponents_are_scale_invariant(power in -12..12i32, at in -0.3..0.3f64) {
        let scale = 2f64.powi(power);
        let f = periodic_step(CELLS, SIDE).unwrap();
        let mut g = f.clone();
        for v in &mut g.values { *v *= scale; }
        let p = ConeProbe::new(&f, &[at], &[1.0], WINDOW).unwrap();
        let a = wavefront_scan(&f, std::slice::from_ref(&p), &thresholds()).unwrap();
        let b = wavefront_scan(&g, &[p], &thresholds()).unwrap();
        prop_assert!((a[0].exponent - b[0].exponent).abs() < 1e-9);
        prop_assert_eq!(a[0].class, b[0].class);
    }
}
