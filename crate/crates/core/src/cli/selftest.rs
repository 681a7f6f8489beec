//! The invariant suite behind `selftest`: quick checks of every module at
//! reduced sizes.

use std::f64::consts::PI;
use std::path::Path;

use serde::Serialize;

use super::experiments::{
    averaged_table_cutoff, averaged_weyl, conservation_report, hardy_study, heat_trace, load_model, refinement_study, trace_report,
    wavefront_study, Defaults,
};
use crate::error::Result;
use crate::geometry::{Lattice, ManifoldModel};
use crate::hamflow::{find_closed_geodesics, integrate_bicharacteristic, monodromy, MetricSymbol, PhasePoint, StepControl};
use crate::parametrix::{
    apply_parametrix, band_packet, solve_eikonal, solve_transport, spectral_distance, AmplitudeOrder, PhaseTable, TableGrid,
};
use crate::schrodinger::{cubic_box, gaussian_family, hardy_ratio, morawetz_report, DEFAULT_BOX_SIDE, DEFAULT_FINAL_TIME};
use crate::spectrum::{counting_function, sphere_spectrum, torus_spectrum, weyl_fit, SpectrumCache, DEFAULT_ENTRY_CAP};
use crate::wavefront::{calibrate, halfwave};
use crate::wavetrace::{build_rho, detect_singular_support, trace_signal, TimeGrid, TraceMethod, TraceWeight, REGULATOR_REACH};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

type CheckFn<'a> = Box<dyn Fn() -> Result<(bool, String)> + 'a>;

fn checks<'a>(scratch: &'a Path, defaults: &'a Defaults) -> Vec<(&'static str, CheckFn<'a>)> {
    vec![
        (
            "geometry: presets validate and cosymbols are quadratic",
            Box::new(|| {
                let mut worst: f64 = 0.0;
                for name in ["torus-2pi", "sphere", "ellipsoid", "peanut", "plane", "plane-well", "euclidean"] {
                    let m = load_model(name)?;
                    let x = if matches!(m, ManifoldModel::PerturbedPlane(_)) { [0.4, -0.3] } else { [1.1, 0.7] };
                    let a = m.cosymbol(&x, &[0.3, -1.2])?;
                    let b = m.cosymbol(&x, &[0.9, -3.6])?;
                    worst = worst.max((b - 9.0 * a).abs() / b);
                }
                Ok((worst < 1e-12, format!("max relative homogeneity defect {worst:.2e}")))
            }),
        ),
        (
            "spectrum: torus counts match brute force",
            Box::new(|| {
                let t = torus_spectrum(&Lattice::scaled_identity(2, 2.0 * PI), 20.0, DEFAULT_ENTRY_CAP)?;
                let brute = (-20i64..=20)
                    .flat_map(|a| (-20i64..=20).map(move |b| (a, b)))
                    .filter(|(a, b)| ((a * a + b * b) as f64) <= 225.0)
                    .count();
                let n = counting_function(&t, 15.0)?;
                Ok((n == brute, format!("N(15) = {n}, brute force {brute}")))
            }),
        ),
        (
            "spectrum: sphere multiplicities are 2l+1",
            Box::new(|| {
                let s = sphere_spectrum(1.0, 10.0)?;
                let ok = s.entries.iter().enumerate().all(|(l, e)| e.1 == 2 * l + 1 && (e.0 - ((l * (l + 1)) as f64).sqrt()).abs() < 1e-12);
                Ok((ok, format!("{} levels", s.entries.len())))
            }),
        ),
        (
            "spectrum: Weyl ratio on the torus at 200",
            Box::new(|| {
                let t = torus_spectrum(&Lattice::scaled_identity(2, 2.0 * PI), 200.0, DEFAULT_ENTRY_CAP)?;
                let fit = weyl_fit(&t, 2, PI * 4.0 * PI * PI, 64)?;
                let r = fit.ratios.last().map(|r| r.1).unwrap_or(f64::NAN);
                Ok(((r - 1.0).abs() < 0.05 && fit.remainder_sup <= 4.0, format!("ratio {r:.5}, remainder sup {:.3}", fit.remainder_sup)))
            }),
        ),
        (
            "spectrum: cached table equals fresh table",
            Box::new(|| {
                let cache = SpectrumCache::new(scratch.join("cache"));
                let m = load_model("sphere")?;
                let (a, _) = cache.get_or_compute(&m, 30.0)?;
                let (b, hit) = cache.get_or_compute(&m, 30.0)?;
                Ok((hit && a == b, format!("second read from cache: {hit}")))
            }),
        ),
        (
            "hamflow: Euclidean rays are straight",
            Box::new(|| {
                let m = load_model("euclidean")?;
                let q = PhasePoint::new(vec![1.0, -2.0], vec![0.6, 0.8]);
                let tr = integrate_bicharacteristic(&MetricSymbol::norm(&m), Some(&m), &q, 5.0, StepControl::default())?;
                let e = &tr.end().point;
                let gap = (e.x[0] - 4.0).abs().max((e.x[1] - 2.0).abs());
                Ok((gap < 1e-10, format!("endpoint gap {gap:.2e}")))
            }),
        ),
        (
            "hamflow: monodromy of torus, sphere and ellipsoid equator",
            Box::new(|| {
                let first = |name: &str, pick: &dyn Fn(&PhasePoint) -> bool| -> Result<_> {
                    let m = load_model(name)?;
                    let g = find_closed_geodesics(&m, 10.0)?.into_iter().find(|g| pick(&g.start)).expect("orbit");
                    monodromy(&m, &g, StepControl::default())
                };
                let t = first("torus-2pi", &|_| true)?;
                let s = first("sphere", &|_| true)?;
                let e = first("ellipsoid", &|p| p.xi[0] == 0.0)?;
                let want = 2.0 - 2.0 * (e.length / 1.3).cos();
                let dt = t.det_factor.unwrap_or(f64::NAN).abs();
                let ds = (s.monodromy.clone().unwrap() - nalgebra::DMatrix::<f64>::identity(2, 2)).amax();
                let de = (e.det_factor.unwrap_or(f64::NAN) - want).abs();
                let ok = dt < 1e-8 && ds < 1e-8 && s.conj_count == Some(2) && de < 1e-4;
                Ok((ok, format!("torus |det| {dt:.1e}, sphere |dP - I| {ds:.1e}, ellipsoid gap {de:.1e}")))
            }),
        ),
        (
            "wavetrace: smoothing kernel normalization",
            Box::new(|| {
                let k = build_rho(0.8)?;
                let (c, m) = (k.rho_hat(0.0), k.mass());
                Ok(((c - 1.0).abs() < 1e-12 && (m - (2.0 * PI).sqrt()).abs() < 1e-8, format!("rho_hat(0) = {c}, mass = {m}")))
            }),
        ),
        (
            "wavetrace: torus trace peaks at 2 pi",
            Box::new(|| {
                let t = torus_spectrum(&Lattice::scaled_identity(2, 2.0 * PI), 120.0, DEFAULT_ENTRY_CAP)?;
                let sig = trace_signal(&t, TimeGrid::new(4.0, 9.0, 1400), 30.0, TraceWeight::Gaussian, TraceMethod::Auto)?;
                let peaks = detect_singular_support(&sig, 5.0)?;
                let ok = peaks.iter().any(|p| (p.t - 2.0 * PI).abs() < 0.05)
                    && peaks.iter().all(|p| (p.t - 2.0 * PI).abs() < 0.05 || (p.t - 2.0 * PI * 2f64.sqrt()).abs() < 0.05);
                Ok((ok, format!("peaks at {:?}", peaks.iter().map(|p| p.t).collect::<Vec<_>>())))
            }),
        ),
        (
            "spectrum: averaged Weyl density on the torus",
            Box::new(|| {
                let m = load_model("torus-2pi")?;
                let t = SpectrumCache::new(scratch.join("cache")).get_or_compute(&m, averaged_table_cutoff(&defaults.averaged)?)?.0;
                let r = averaged_weyl(&m, &t, &defaults.averaged)?;
                Ok((r.relative_gap <= 0.05, format!("mean {:.6}, relative gap {:.1e}", r.mean, r.relative_gap)))
            }),
        ),
        (
            "wavetrace: torus and sphere peaks at geodesic lengths, quiet window empty",
            Box::new(|| {
                let cache = SpectrumCache::new(scratch.join("cache"));
                let d = &defaults.trace;
                let mut detail = Vec::new();
                let mut ok = true;
                for name in ["torus-2pi", "sphere"] {
                    let m = load_model(name)?;
                    let (t, _) = cache.get_or_compute(&m, REGULATOR_REACH * d.big_lambda)?;
                    let (r, _) = trace_report(&m, &t, d)?;
                    let worst = r.detection.peaks.iter().map(|p| p.gap.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
                    ok &= !r.peaks.is_empty() && worst <= 0.05 && r.quiet_peaks == 0;
                    detail.push(format!("{name}: {} peaks, worst gap {worst:.1e}, quiet {}", r.peaks.len(), r.quiet_peaks));
                }
                Ok((ok, detail.join("; ")))
            }),
        ),
        (
            "wavetrace: heat trace sides agree",
            Box::new(|| {
                let k = heat_trace(&load_model("torus-2pi")?, 0.1)?;
                let gap = (k.spectral - k.kernel).abs() / k.kernel;
                Ok((gap < 1e-10, format!("relative gap {gap:.2e}")))
            }),
        ),
        (
            "schrodinger: conservation and periodicity",
            Box::new(|| {
                let r = conservation_report(defaults.schrodinger.conservation_time)?;
                let worst = r.sobolev_drift.iter().copied().fold(r.l2_drift, f64::max);
                Ok((
                    worst < 1e-12 && r.periodicity_gap < 1e-12,
                    format!("max drift {worst:.1e}, periodicity gap {:.1e}", r.periodicity_gap),
                ))
            }),
        ),
        (
            "schrodinger: Hardy bound and Morawetz positivity",
            Box::new(|| {
                let g = &gaussian_family(3, 2)[1];
                let h = hardy_ratio(&g.sample(&[32; 3], cubic_box(3, DEFAULT_BOX_SIDE))?)?;
                let m =
                    morawetz_report(&gaussian_family(4, 2)[0].sample(&[16; 4], cubic_box(4, DEFAULT_BOX_SIDE))?, DEFAULT_FINAL_TIME, 9)?;
                let ok = h.ratio <= 1.0 + 2.0 * h.mesh * h.mesh && m.weight_term >= 0.0 && m.angular_term >= 0.0 && m.ratio.is_finite();
                Ok((ok, format!("Hardy {:.4}, Morawetz ratio {:.4}", h.ratio, m.ratio)))
            }),
        ),
        (
            "schrodinger: Hardy extremizers approach the constant",
            Box::new(|| {
                let h = hardy_study(&defaults.schrodinger)?;
                Ok((h.bound_holds && h.best_extremizer >= 0.9, format!("best extremizer ratio {:.4}", h.best_extremizer)))
            }),
        ),
        (
            "wavefront: disc probes classified and transported",
            Box::new(|| {
                let w = wavefront_study(&defaults.wavefront)?;
                let failures: usize = w.transport.iter().map(|t| t.2).sum();
                Ok((w.fraction >= 0.95 && failures == 0, format!("{} of {} probes, {failures} transport failures", w.correct, w.probes)))
            }),
        ),
        (
            "wavefront: calibration separates jump from Gaussian",
            Box::new(|| {
                let c = calibrate(1024, 4.0, 0.2)?;
                let ok = (c.heaviside_exponent - 1.0).abs() < 0.1 && c.gaussian_exponent > 8.0;
                Ok((ok, format!("jump exponent {:.3}, Gaussian exponent {:.2}", c.heaviside_exponent, c.gaussian_exponent)))
            }),
        ),
        (
            "parametrix: Euclidean case, initial data and ray identities",
            Box::new(|| {
                let flat = ManifoldModel::plane(0.0);
                let grid = TableGrid::around(&crate::geometry::PlaneBump::with_epsilon(0.0), 0.3, 0.1, 0.2, 8);
                let fp = solve_eikonal(&flat, &grid)?;
                let fa = solve_transport(&flat, &fp, -1)?;
                let f = band_packet(8.0, 64, [0.3, -0.2], 0.4)?;
                let u = apply_parametrix(&fp, &fa, &f, 0.3, [8.0, 16.0], AmplitudeOrder::Corrected)?;
                let flat_gap = spectral_distance(&u, &halfwave(&f, 0.3))?;
                let model = load_model("plane")?;
                let p = solve_eikonal(&model, &grid)?;
                let a = solve_transport(&model, &p, -1)?;
                let zero_gap = spectral_distance(&apply_parametrix(&p, &a, &f, 0.0, [8.0, 16.0], AmplitudeOrder::Corrected)?, &f)?;
                let spread = spreading_defect(&p, &a.a0);
                let sign = p.cached_eikonal_residual();
                let ok = flat_gap < 1e-8 && zero_gap < 1e-8 && spread < 1e-6 && sign < 1e-9;
                Ok((ok, format!("flat {flat_gap:.1e}, t = 0 {zero_gap:.1e}, spreading {spread:.1e}, eikonal {sign:.1e}")))
            }),
        ),
        (
            "parametrix: residuals refine at second order",
            Box::new(|| {
                let r = refinement_study(&load_model("plane")?, &defaults.parametrix)?;
                let ok = (3.2..=4.8).contains(&r.eikonal_ratio) && (3.2..=4.8).contains(&r.transport_ratio);
                Ok((ok, format!("eikonal ratio {:.3}, transport ratio {:.3}", r.eikonal_ratio, r.transport_ratio)))
            }),
        ),
    ]
}

/// Largest `|a_0 - sqrt(e(y) / (J e(x)))|` over the table.
fn spreading_defect(p: &PhaseTable, a0: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for d in 0..p.angles.len() {
        for l in p.zero_level()..p.t_grid.len() {
            for i in 0..p.n {
                for j in 0..p.n {
                    let k = p.index(d, l, i, j);
                    let ey = p.bump.conformal_jet(p.source[k]).e;
                    let ex = p.bump.conformal_jet(p.node(i, j)).e;
                    worst = worst.max((a0[k] - (ey / (p.jacobian[k] * ex)).sqrt()).abs());
                }
            }
        }
    }
    worst
}

/// Runs every check, reporting each through `progress` as it finishes.
pub fn run_selftest(scratch: &Path, defaults: &Defaults, mut progress: impl FnMut(&Check)) -> Vec<Check> {
    let mut out = Vec::new();
    for (name, f) in checks(scratch, defaults) {
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let c = Check { name: name.to_string(), passed, detail };
        progress(&c);
        out.push(c);
    }
    out
}
