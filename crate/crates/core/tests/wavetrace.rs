use std::f64::consts::PI;

use num_complex::Complex64;
use weylscope::geometry::{Lattice, ManifoldModel};
use weylscope::hamflow::{find_closed_geodesics, monodromy, StepControl};
use weylscope::spectrum::*;
use weylscope::wavetrace::*;

fn torus_table(lmax: f64) -> SpectrumTable {
    torus_spectrum(&Lattice::scaled_identity(2, 2.0 * PI), lmax, DEFAULT_ENTRY_CAP).unwrap()
}

/// `(2 pi)^{-1/2} sum_k h rho(k h) e^{-i t k h}`: exact for `|t| < pi/h - delta`.
fn rho_hat_by_trapezoid(k: &SmoothingKernel, t: f64) -> f64 {
    let h = 0.5 / k.delta;
    let w = k.half_width(1e-13);
    let n = (w / h).ceil() as i64;
    let mut s = k.rho_exact(0.0);
    for j in 1..=n {
        let l = j as f64 * h;
        s += 2.0 * k.rho_exact(l) * (t * l).cos();
    }
    s * h / (2.0 * PI).sqrt()
}

#[test]
fn kernel_normalization_and_support() {
    for delta in [0.8, 2.0] {
        let k = build_rho(delta).unwrap();
        assert!((k.rho_hat_center_value() - 1.0).abs() < 1e-14);
        assert_eq!(k.rho_hat_support(), (-delta, delta));
        assert!((rho_hat_by_trapezoid(&k, 0.0) - 1.0).abs() < 1e-10);
        for t in [0.3 * delta, 0.7 * delta] {
            assert!((rho_hat_by_trapezoid(&k, t) - k.rho_hat(t)).abs() < 1e-10);
            assert!((k.rho_hat(t) - k.rho_hat(-t)).abs() < 1e-14);
        }
        for t in [1.05 * delta, 1.5 * delta, 2.5 * delta] {
            assert!(rho_hat_by_trapezoid(&k, t).abs() < 1e-10, "t = {t}");
        }
    }
}

#[test]
fn kernel_mass_is_root_two_pi() {
    let k = build_rho(1.0).unwrap();
    let w = k.half_width(1e-14);
    let mass = weylscope::quad::integrate(|l| k.rho(l), -w, w, 1e-12).unwrap();
    assert!((mass - (2.0 * PI).sqrt()).abs() < 1e-7, "{mass}");
}

#[test]
fn kernel_is_positive_and_even() {
    let k = build_rho(0.8).unwrap();
    for i in 0..10_000 {
        let l = -50.0 + 100.0 * i as f64 / 9999.0;
        let v = k.rho(l);
        assert!(v > 0.0, "rho({l}) = {v}");
        assert_eq!(v, k.rho(-l));
    }
}

#[test]
fn interpolated_kernel_matches_quadrature_and_fft() {
    let k = build_rho(1.5).unwrap();
    for l in [0.0, 0.37, 2.9, 11.3, 25.0] {
        let (a, b) = (k.rho(l), k.rho_exact(l));
        assert!((a - b).abs() <= 1e-8 * k.rho_exact(0.0), "{l}: {a} {b}");
    }
    let tab = k.tabulate_fft(0.05, 16384);
    for &(l, v) in tab.iter().step_by(97).filter(|p| p.0.abs() < 60.0) {
        assert!((v - k.rho_exact(l)).abs() < 1e-10, "{l}: {v}");
    }
}

#[test]
fn density_of_lone_constant_mode_vanishes_far_away() {
    let t = SpectrumTable { model_id: "x".into(), descriptor: "{}".into(), entries: vec![(0.0, 1)], lambda_max: 1e4 };
    let k = build_rho(5.0).unwrap();
    assert!(smoothed_density(&t, &k, 200.0).unwrap() < 1e-12);
    assert!(smoothed_density(&t, &k, 0.0).unwrap() > 0.1);
}

#[test]
fn density_needs_table_headroom() {
    let k = build_rho(5.0).unwrap();
    let e = smoothed_density(&torus_table(50.0), &k, 45.0).unwrap_err();
    assert!(matches!(e, weylscope::Error::BeyondCutoff { .. }));
}

#[test]
fn sphere_density_averages_to_leading_term() {
    let table = sphere_spectrum(1.0, 240.0).unwrap();
    let k = build_rho(5.0).unwrap();
    let mut acc = 0.0;
    let n = 400;
    for i in 0..n {
        let l = 100.0 + 100.0 * (i as f64 + 0.5) / n as f64;
        acc += smoothed_density(&table, &k, l).unwrap() / l;
    }
    let ratio = acc / n as f64 / k.mass();
    assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
}

#[test]
fn trace_at_zero_and_hermitian_symmetry() {
    let table = torus_table(120.0);
    let sig = trace_signal(&table, TimeGrid::symmetric(3.0, 300), 30.0, TraceWeight::Gaussian, TraceMethod::Direct).unwrap();
    let s0: f64 = table.entries.iter().map(|&(l, m)| m as f64 * (-(l / 30.0).powi(2)).exp()).sum();
    let mid = sig.values[300];
    assert!((mid.re - s0).abs() < 1e-9 * s0 && mid.im.abs() < 1e-9 * s0);
    let n = sig.values.len();
    for k in 0..n {
        let d = sig.values[k] - sig.values[n - 1 - k].conj();
        assert!(d.norm() < 1e-12 * s0);
    }
}

#[test]
fn trace_rejects_coarse_grid_and_short_table() {
    let table = torus_table(120.0);
    let e = trace_signal(&table, TimeGrid::new(0.5, 15.0, 100), 30.0, TraceWeight::Gaussian, TraceMethod::Auto).unwrap_err();
    assert!(matches!(e, weylscope::Error::NyquistViolation { .. }));
    let e = trace_signal(&table, TimeGrid::new(0.5, 15.0, 5000), 60.0, TraceWeight::Gaussian, TraceMethod::Auto).unwrap_err();
    assert!(matches!(e, weylscope::Error::BeyondCutoff { .. }));
}

#[test]
fn binned_path_matches_direct_sum() {
    let entries: Vec<(f64, usize)> = (0..1000).map(|j| (0.04 * j as f64 + 0.013 * ((j * 7919) % 13) as f64, 1 + j % 3)).collect();
    let table = SpectrumTable { model_id: "t".into(), descriptor: "{}".into(), entries, lambda_max: 45.0 };
    let grid = TimeGrid::new(0.4, 12.0, 3001);
    let a = trace_signal(&table, grid, 10.0, TraceWeight::Gaussian, TraceMethod::Direct).unwrap();
    let b = trace_signal(&table, grid, 10.0, TraceWeight::Gaussian, TraceMethod::Binned).unwrap();
    let scale = a.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).norm() < 1e-8 * scale, "{x} {y}");
    }
}

fn lengths(name: &str) -> Vec<f64> {
    find_closed_geodesics(&ManifoldModel::preset(name).unwrap(), 20.0).unwrap().iter().map(|g| g.length).collect()
}

#[test]
fn torus_peaks_sit_on_lattice_lengths() {
    let table = torus_table(240.0);
    let sig = trace_signal(&table, TimeGrid::new(0.4, 15.5, 4000), 60.0, TraceWeight::Gaussian, TraceMethod::Auto).unwrap();
    let peaks = detect_singular_support(&sig.window(1.0, 15.0), DEFAULT_THRESHOLD_FACTOR).unwrap();
    let ls = lengths("torus-2pi");
    let rep = detection_report(&peaks, &ls);
    assert!(rep.peaks.iter().all(|p| p.gap.unwrap() < 0.05), "{}", rep.to_json());
    for want in [2.0 * PI, 2.0 * PI * 2f64.sqrt(), 4.0 * PI] {
        assert!(peaks.iter().any(|p| (p.t - want).abs() < 0.05), "missing {want}");
    }
    let first = peaks.iter().find(|p| (p.t - 2.0 * PI).abs() < 0.05).unwrap();
    assert!((first.t - 2.0 * PI).abs() < sig.grid.step);
    assert!(detect_singular_support(&sig.window(0.5, 5.0), 6.0).unwrap().is_empty());
}

#[test]
fn time_reversal_gives_same_peaks() {
    let table = torus_table(240.0);
    let sig = trace_signal(&table, TimeGrid::new(-15.0, -1.0, 3000), 60.0, TraceWeight::Gaussian, TraceMethod::Auto).unwrap();
    let fwd = trace_signal(&table, TimeGrid::new(1.0, 15.0, 3000), 60.0, TraceWeight::Gaussian, TraceMethod::Auto).unwrap();
    let a = detect_singular_support(&sig.time_reversed(), 5.0).unwrap();
    let b = detect_singular_support(&fwd, 5.0).unwrap();
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(&b) {
        assert!((p.t - q.t).abs() < 1e-9);
    }
}

#[test]
fn sphere_peaks_at_great_circle_iterates() {
    let table = sphere_spectrum(1.0, 240.0).unwrap();
    let sig = trace_signal(&table, TimeGrid::new(1.0, 15.0, 4000), 60.0, TraceWeight::Gaussian, TraceMethod::Auto).unwrap();
    let peaks = detect_singular_support(&sig, DEFAULT_THRESHOLD_FACTOR).unwrap();
    assert_eq!(peaks.len(), 2, "{peaks:?}");
    assert!((peaks[0].t - 2.0 * PI).abs() < 0.05 && (peaks[1].t - 4.0 * PI).abs() < 0.05);
}

#[test]
fn detection_window_must_avoid_origin() {
    let table = torus_table(120.0);
    let sig = trace_signal(&table, TimeGrid::new(0.1, 5.0, 2000), 30.0, TraceWeight::Gaussian, TraceMethod::Auto).unwrap();
    assert!(detect_singular_support(&sig, 5.0).is_err());
}

#[test]
fn trace_csv_has_four_columns() {
    let table = torus_table(20.0);
    let sig = trace_signal(&table, TimeGrid::new(1.0, 2.0, 11), 5.0, TraceWeight::Gaussian, TraceMethod::Direct).unwrap();
    let csv = sig.to_csv();
    assert!(csv.starts_with("t,re,im,abs\n"));
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 4));
    let _ = Complex64::new(0.0, 0.0);
}

#[test]
fn flat_torus_orbits_are_degenerate_for_dg() {
    let model = ManifoldModel::preset("torus-2pi").unwrap();
    let cat = find_closed_geodesics(&model, 8.0).unwrap();
    let g = monodromy(&model, &cat[0], StepControl::default()).unwrap();
    let e = dg_amplitude_check(&model, &torus_table(100.0), &g, &cat, DgOptions::default()).unwrap_err();
    assert!(matches!(e, weylscope::Error::Degenerate { .. }));
}

#[test]
fn dg_rejects_crowded_window() {
    let model = ManifoldModel::preset("ellipsoid").unwrap();
    let cat = find_closed_geodesics(&model, 8.0).unwrap();
    let g = monodromy(&model, &cat[0], StepControl::default()).unwrap();
    let table = SpectrumTable { model_id: "e".into(), descriptor: "{}".into(), entries: vec![(0.0, 1)], lambda_max: 1e3 };
    let opts = DgOptions { delta: 1.5, ..Default::default() };
    let e = dg_amplitude_check(&model, &table, &g, &cat, opts).unwrap_err();
    assert!(matches!(e, weylscope::Error::CrowdedLengthSpectrum { .. }));
}

#[test]
fn ellipsoid_classical_amplitude_uses_jacobi_oracle() {
    let model = ManifoldModel::preset("ellipsoid").unwrap();
    let cat = find_closed_geodesics(&model, 8.0).unwrap();
    let g = monodromy(&model, &cat[0], StepControl::default()).unwrap();
    let table = SpectrumTable { model_id: "e".into(), descriptor: "{}".into(), entries: vec![(0.0, 1)], lambda_max: 1e3 };
    let r = dg_amplitude_check(&model, &table, &g, &cat, DgOptions::default()).unwrap();
    let l = 2.0 * PI;
    let want = 2.0 * (l / (2.0 * PI)) / (2.0 - 2.0 * (l / 1.3).cos()).sqrt();
    assert!((r.classical_amp - want).abs() < 1e-4, "{} {want}", r.classical_amp);
}

#[test]
fn heat_trace_sides_agree() {
    let lat = Lattice::scaled_identity(2, 2.0 * PI);
    let k = kernel_trace_crosscheck(&lat, 0.1).unwrap();
    assert!((k.spectral - k.kernel).abs() < 1e-10 * k.kernel, "{k:?}");
    let k = kernel_trace_crosscheck(&lat, 0.05).unwrap();
    let area = 4.0 * PI * PI;
    let weyl = area / (4.0 * PI * 0.05);
    assert!((k.spectral - weyl).abs() < 0.01 * weyl, "{k:?} {weyl}");
    let k = kernel_trace_crosscheck(&lat, 50.0).unwrap();
    assert!((k.spectral - 1.0).abs() < 1e-12 && (k.kernel - 1.0).abs() < 1e-12, "{k:?}");
    let skew = Lattice::from_generators(&[vec![3.0, 0.0], vec![1.1, 2.2]]).unwrap();
    let k = kernel_trace_crosscheck(&skew, 0.3).unwrap();
    assert!((k.spectral - k.kernel).abs() < 1e-10 * k.kernel, "{k:?}");
}
