//! The experiments behind the subcommands. Each returns a serializable
//! report; the headline numbers also go into the run manifest.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ManifoldModel;
use crate::hamflow::{find_closed_geodesics, monodromy, ClosedGeodesic, StepControl};
use crate::spectrum::{counting_function, mean_leading_ratio, weyl_fit, SpectrumTable};
use crate::wavetrace::{
    build_rho, detect_singular_support, detection_report, dg_amplitude_check, kernel_trace_crosscheck, smoothed_density, trace_signal,
    DetectionReport, DgOptions, DgReport, KernelTrace, Peak, TimeGrid, TraceMethod, TraceWeight, DENSITY_TAIL_TOL,
};

/// Resolved defaults, read from the versioned defaults file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Defaults {
    pub version: u32,
    pub spectrum: SpectrumDefaults,
    pub weyl: WeylDefaults,
    pub averaged: AveragedDefaults,
    pub trace: TraceDefaults,
    pub geodesics: GeodesicDefaults,
    pub dg: DgDefaults,
    pub schrodinger: SchrodingerDefaults,
    pub wavefront: WavefrontDefaults,
    pub parametrix: ParametrixDefaults,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumDefaults {
    pub model: String,
    pub lambda_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeylDefaults {
    pub samples: usize,
    pub window: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragedDefaults {
    pub delta: f64,
    pub window: [f64; 2],
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceDefaults {
    pub model: String,
    pub big_lambda: f64,
    pub window: [f64; 2],
    pub quiet_window: [f64; 2],
    pub threshold: f64,
    pub quiet_threshold: f64,
    pub points_per_unit: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeodesicDefaults {
    pub model: String,
    pub length_max: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgDefaults {
    pub model: String,
    pub delta: f64,
    pub big_lambda: f64,
    pub lambda_max: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchrodingerDefaults {
    pub family: usize,
    pub final_time: f64,
    pub snapshots: usize,
    pub morawetz_grid: usize,
    pub smoothing_grid: usize,
    pub smoothing_radius: f64,
    pub conservation_time: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavefrontDefaults {
    pub cells: usize,
    pub side: f64,
    pub radius: f64,
    pub window: f64,
    pub probes: usize,
    pub times: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametrixDefaults {
    pub epsilon: f64,
    pub t: f64,
    pub dt: f64,
    pub h: f64,
    pub directions: usize,
    pub grid: usize,
    pub lambdas: [f64; 2],
    pub center: [f64; 2],
    pub width: f64,
    pub refine_h: [f64; 2],
    pub refine_t_max: f64,
}

/// Text of the defaults file compiled into the binary.
pub const DEFAULTS_JSON: &str = include_str!("defaults.json");

impl Defaults {
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULTS_JSON).expect("built-in defaults parse")
    }
}

/// A preset name, or a path to a JSON model descriptor.
pub fn load_model(spec: &str) -> Result<ManifoldModel> {
    let model = match ManifoldModel::preset(spec) {
        Some(m) => m,
        None => {
            let text = std::fs::read_to_string(spec)
                .map_err(|e| Error::Config(format!("model '{spec}' is neither a preset nor a readable file: {e}")))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("model file {spec}: {e}")))?
        }
    };
    model.validate()?;
    Ok(model)
}

#[derive(Clone, Debug, Serialize)]
pub struct WeylReport {
    pub model_id: String,
    pub lambda_max: f64,
    pub coefficient: f64,
    /// `N(lambda_max) / (c lambda_max^n)`.
    pub leading_ratio: f64,
    pub remainder_sup: f64,
    /// Mean of `N / (c lambda^n)` over the window.
    pub window_mean_ratio: f64,
    pub window: [f64; 2],
}

/// Weyl fit of a table, with CSV rows `lambda, N, prediction, ratio`.
pub fn weyl_report(model: &ManifoldModel, table: &SpectrumTable, d: &WeylDefaults) -> Result<(WeylReport, String)> {
    let n = model.dim();
    let (_, vb) = model.phase_volumes()?;
    let fit = weyl_fit(table, n, vb, d.samples)?;
    let window = [d.window[0].min(table.lambda_max), d.window[1].min(table.lambda_max)];
    let window_mean_ratio = if window[1] > window[0] { mean_leading_ratio(table, n, vb, window[0], window[1], 500)? } else { f64::NAN };
    let mut csv = String::from("lambda,count,prediction,ratio\n");
    for &(l, r) in &fit.ratios {
        let count = counting_function(table, l)?;
        csv.push_str(&format!("{l:.10e},{count},{:.10e},{r:.10e}\n", fit.coefficient * l.powi(n as i32)));
    }
    let leading_ratio = fit.ratios.last().map(|r| r.1).unwrap_or(f64::NAN);
    let report = WeylReport {
        model_id: table.model_id.clone(),
        lambda_max: table.lambda_max,
        coefficient: fit.coefficient,
        leading_ratio,
        remainder_sup: fit.remainder_sup,
        window_mean_ratio,
        window,
    };
    Ok((report, csv))
}

#[derive(Clone, Debug, Serialize)]
pub struct AveragedWeylReport {
    pub delta: f64,
    pub window: [f64; 2],
    /// Mean of `(rho * dN)(lambda) / lambda` divided by the mass of `rho`.
    pub mean: f64,
    /// `n c`, the derivative of the Weyl term divided by `lambda^{n-1}`.
    pub target: f64,
    pub relative_gap: f64,
}

/// Smoothed density against the derivative of the Weyl term (two-dimensional models).
pub fn averaged_weyl(model: &ManifoldModel, table: &SpectrumTable, d: &AveragedDefaults) -> Result<AveragedWeylReport> {
    if model.dim() != 2 {
        return Err(Error::Unsupported("the averaged Weyl check is set up for surfaces".into()));
    }
    let kernel = build_rho(d.delta)?;
    let mut acc = 0.0;
    for i in 0..d.samples {
        let l = d.window[0] + (d.window[1] - d.window[0]) * (i as f64 + 0.5) / d.samples as f64;
        acc += smoothed_density(table, &kernel, l)? / l;
    }
    let mean = acc / d.samples as f64 / kernel.mass();
    let (_, vb) = model.phase_volumes()?;
    let target = 2.0 * vb / (2.0 * PI).powi(2);
    Ok(AveragedWeylReport { delta: d.delta, window: d.window, mean, target, relative_gap: (mean / target - 1.0).abs() })
}

/// Cutoff a table needs for the averaged check.
pub fn averaged_table_cutoff(d: &AveragedDefaults) -> Result<f64> {
    Ok(d.window[1] + build_rho(d.delta)?.half_width(DENSITY_TAIL_TOL) + 1.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceReport {
    pub big_lambda: f64,
    pub window: [f64; 2],
    pub threshold: f64,
    pub peaks: Vec<Peak>,
    pub detection: DetectionReport,
    pub quiet_window: [f64; 2],
    /// Peaks found in the quiet window at the quiet threshold.
    pub quiet_peaks: usize,
    /// Lengths of closed geodesics in the window.
    pub lengths: Vec<f64>,
}

/// Wave trace over a window, its peaks, and their match with the length spectrum.
pub fn trace_report(model: &ManifoldModel, table: &SpectrumTable, d: &TraceDefaults) -> Result<(TraceReport, String)> {
    let lo = (d.window[0].min(d.quiet_window[0]) - 0.5).max(0.1);
    let hi = d.window[1].max(d.quiet_window[1]) + 0.5;
    let count = ((hi - lo) * d.points_per_unit).ceil() as usize;
    let sig = trace_signal(table, TimeGrid::new(lo, hi, count), d.big_lambda, TraceWeight::Gaussian, TraceMethod::Auto)?;
    let peaks = detect_singular_support(&sig.window(d.window[0], d.window[1]), d.threshold)?;
    let quiet_peaks = detect_singular_support(&sig.window(d.quiet_window[0], d.quiet_window[1]), d.quiet_threshold)?.len();
    let lengths: Vec<f64> =
        find_closed_geodesics(model, d.window[1] + 0.5)?.iter().map(|g| g.length).filter(|&l| l >= d.window[0] - 0.5).collect();
    let detection = detection_report(&peaks, &lengths);
    let report = TraceReport {
        big_lambda: d.big_lambda,
        window: d.window,
        threshold: d.threshold,
        peaks,
        detection,
        quiet_window: d.quiet_window,
        quiet_peaks,
        lengths,
    };
    Ok((report, sig.to_csv()))
}

#[derive(Clone, Debug, Serialize)]
pub struct GeodesicEntry {
    pub length: f64,
    pub multiplicity: usize,
    pub iterate: usize,
    pub start_x: Vec<f64>,
    pub start_xi: Vec<f64>,
    pub monodromy: Option<Vec<Vec<f64>>>,
    pub det_factor: Option<f64>,
    pub conj_count: Option<usize>,
    pub note: String,
}

impl GeodesicEntry {
    pub fn from_geodesic(g: &ClosedGeodesic) -> Self {
        let m = g.monodromy.as_ref().map(|m| (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect());
        Self {
            length: g.length,
            multiplicity: g.multiplicity,
            iterate: g.iterate,
            start_x: g.start.x.clone(),
            start_xi: g.start.xi.clone(),
            monodromy: m,
            det_factor: g.det_factor,
            conj_count: g.conj_count,
            note: g.multiplicity_note.clone(),
        }
    }
}

/// Closed geodesics up to `length_max`, each with its monodromy when the
/// orbit stays in a chart where it can be computed.
pub fn geodesic_catalog(model: &ManifoldModel, length_max: f64) -> Result<Vec<ClosedGeodesic>> {
    find_closed_geodesics(model, length_max)?
        .into_iter()
        .map(|g| match monodromy(model, &g, StepControl::default()) {
            Ok(m) => Ok(m),
            Err(Error::Unsupported(_)) | Err(Error::OutOfChart { .. }) => Ok(g),
            Err(e) => Err(e),
        })
        .collect()
}

/// Duistermaat-Guillemin amplitude check on the shortest non-degenerate orbit.
pub fn dg_report(model: &ManifoldModel, table: &SpectrumTable, d: &DgDefaults) -> Result<DgReport> {
    let catalog = geodesic_catalog(model, 4.0 * PI)?;
    let g = catalog
        .iter()
        .find(|g| g.det_factor.map(|v| v.abs() > 1e-6).unwrap_or(false))
        .ok_or_else(|| Error::Unsupported("no non-degenerate closed geodesic with computed monodromy".into()))?;
    let opts = DgOptions { delta: d.delta, lambda_hi: d.big_lambda, samples: d.samples, ..DgOptions::default() };
    dg_amplitude_check(model, table, g, &catalog, opts)
}

/// Heat trace at `t`: spectral sum against the image sum on a flat torus.
pub fn heat_trace(model: &ManifoldModel, t: f64) -> Result<KernelTrace> {
    match model {
        ManifoldModel::FlatTorus(lat) => kernel_trace_crosscheck(lat, t),
        _ => Err(Error::Unsupported("the heat-kernel image sum needs a flat torus".into())),
    }
}

use crate::geometry::{Lattice, PlaneBump};
use crate::parametrix::{
    apply_parametrix, band_packet, converged_reference, solve_eikonal, solve_transport, spectral_distance, AmplitudeOrder, AmplitudeTable,
    PhaseTable, TableGrid,
};
use crate::schrodinger::{
    cubic_box, evolve, gaussian_family, hardy_ratio, hardy_ratio_radial, local_smoothing_report, morawetz_report, sobolev_norm,
    GaussianPacket, GridField, HardyExtremizer, SobolevSpec, DEFAULT_BOX_SIDE,
};
use crate::wavefront::{calibrate, disc_indicator, halfwave, halfwave_transport_check, wavefront_scan, Calibration, ConeProbe, Verdict};

fn max_gap(a: &GridField, b: &GridField) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConservationReport {
    pub time: f64,
    pub l2_drift: f64,
    /// Relative drift of the `H^s` norms for `s = 1/2, 1, 2`.
    pub sobolev_drift: [f64; 3],
    /// Sup-norm gap between the data and its evolution over `2 pi` on the `2 pi` torus.
    pub periodicity_gap: f64,
}

/// Norm conservation over a long time and periodicity on the `2 pi` torus.
pub fn conservation_report(time: f64) -> Result<ConservationReport> {
    let g = GaussianPacket { center: vec![0.3, -0.2], width: 0.8, boost: vec![1.0, 2.0] };
    let f = g.sample(&[64, 64], Lattice::scaled_identity(2, 12.0))?;
    let e = evolve(&f, time);
    let l2_drift = (e.l2_norm() - f.l2_norm()).abs() / f.l2_norm();
    let mut sobolev_drift = [0.0; 3];
    for (k, s) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let a = sobolev_norm(&f, SobolevSpec { s })?;
        sobolev_drift[k] = (sobolev_norm(&e, SobolevSpec { s })? - a).abs() / a;
    }
    let torus = GridField::from_fn(&[32, 32], Lattice::scaled_identity(2, 2.0 * PI), |x| {
        let v = (x[0] + 0.3).sin() * (2.0 * x[1]).cos() + (3.0 * x[0] - x[1]).cos();
        num_complex::Complex64::new(v, 0.5 * (x[0] - 2.0 * x[1]).sin())
    })?;
    let periodicity_gap = max_gap(&torus.to_position(), &evolve(&torus, 2.0 * PI).to_position());
    Ok(ConservationReport { time, l2_drift, sobolev_drift, periodicity_gap })
}

#[derive(Clone, Debug, Serialize)]
pub struct FamilyStudy {
    pub dim: usize,
    pub coarse_grid: usize,
    pub fine_grid: usize,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
    pub max_ratio: f64,
    /// Largest `|fine / coarse - 1|` over the family.
    pub max_drift: f64,
}

fn family_study(dim: usize, fine_grid: usize, count: usize, ratio: impl Fn(&GridField) -> Result<f64>) -> Result<FamilyStudy> {
    let coarse_grid = fine_grid / 2;
    let (mut coarse, mut fine) = (Vec::new(), Vec::new());
    for g in gaussian_family(dim, count) {
        coarse.push(ratio(&g.sample(&vec![coarse_grid; dim], cubic_box(dim, DEFAULT_BOX_SIDE))?)?);
        fine.push(ratio(&g.sample(&vec![fine_grid; dim], cubic_box(dim, DEFAULT_BOX_SIDE))?)?);
    }
    let max_ratio = fine.iter().chain(&coarse).copied().fold(0.0, f64::max);
    let max_drift = coarse.iter().zip(&fine).map(|(c, f)| (f / c - 1.0).abs()).fold(0.0, f64::max);
    Ok(FamilyStudy { dim, coarse_grid, fine_grid, coarse, fine, max_ratio, max_drift })
}

/// Morawetz ratios in dimension 4 over the Gaussian family, on a grid and its half.
pub fn morawetz_study(d: &SchrodingerDefaults) -> Result<FamilyStudy> {
    family_study(4, d.morawetz_grid, d.family, |f| Ok(morawetz_report(f, d.final_time, d.snapshots)?.ratio))
}

/// Local-smoothing ratios in dimension 3 over the Gaussian family, on a grid and its half.
pub fn local_smoothing_study(d: &SchrodingerDefaults) -> Result<FamilyStudy> {
    family_study(3, d.smoothing_grid, d.family, |f| {
        Ok(local_smoothing_report(f, d.final_time, d.smoothing_radius, &[0.0; 3], d.snapshots)?.ratio)
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct HardyStudy {
    /// Grid quotients of family members and a grid extremizer, with `1 + 2 h^2`.
    pub grid_ratios: Vec<(f64, f64)>,
    /// Radial quotients of extremizers with growing log-plateau.
    pub extremizer_ratios: Vec<(f64, f64)>,
    pub bound_holds: bool,
    pub best_extremizer: f64,
}

/// Hardy quotients: bound on grids and sharpness along the extremizer family.
pub fn hardy_study(d: &SchrodingerDefaults) -> Result<HardyStudy> {
    let mut grid_ratios = Vec::new();
    for g in gaussian_family(3, d.family.min(6)) {
        let rep = hardy_ratio(&g.sample(&[32; 3], cubic_box(3, DEFAULT_BOX_SIDE))?)?;
        grid_ratios.push((rep.ratio, 1.0 + 2.0 * rep.mesh * rep.mesh));
    }
    let p = HardyExtremizer { n: 3, a: 1.2, b: 1.6, width: 0.5 };
    let (lo, hi) = p.support();
    let f = GridField::from_fn(&[64; 3], cubic_box(3, DEFAULT_BOX_SIDE), |x| {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        num_complex::Complex64::new(if r > lo && r < hi { p.eval(r).0 } else { 0.0 }, 0.0)
    })?;
    let rep = hardy_ratio(&f)?;
    grid_ratios.push((rep.ratio, 1.0 + 2.0 * rep.mesh * rep.mesh));
    let mut extremizer_ratios = Vec::new();
    for ell in [5.0f64, 25.0, 100.0, 300.0] {
        let p = HardyExtremizer { n: 3, a: 1.0, b: ell.exp(), width: 2.0 };
        let (lo, hi) = p.support();
        extremizer_ratios.push((ell, hardy_ratio_radial(&|r| p.eval(r), 3, lo, hi, (4.0 * (ell + 4.0)) as usize)?));
    }
    let bound_holds = grid_ratios.iter().all(|(r, b)| r <= b);
    let best_extremizer = extremizer_ratios.iter().map(|e| e.1).fold(0.0, f64::max);
    Ok(HardyStudy { grid_ratios, extremizer_ratios, bound_holds, best_extremizer })
}

#[derive(Clone, Debug, Serialize)]
pub struct WavefrontStudy {
    pub calibration: Calibration,
    pub probes: usize,
    /// Boundary points where the normal cones are singular and the tangential ones smooth.
    pub correct: usize,
    pub fraction: f64,
    /// `(t, largest offset / cell, failures)` of the half-wave transport check.
    pub transport: Vec<(f64, f64, usize)>,
}

/// Disc indicator: classification of boundary cones and transport along normals.
pub fn wavefront_study(d: &WavefrontDefaults) -> Result<WavefrontStudy> {
    let disc = disc_indicator(d.cells, d.side, d.radius)?;
    let calibration = calibrate(d.cells, d.side, d.window)?;
    let th = calibration.thresholds;
    let polar = |a: f64| [d.radius * a.cos(), d.radius * a.sin()];
    let mut correct = 0;
    for i in 0..d.probes {
        let x0 = polar(2.0 * PI * (i as f64 + 0.3) / d.probes as f64);
        let base = ConeProbe::new(&disc, &x0, &x0, d.window)?;
        let probes = [base.clone(), base.toward(&[-x0[0], -x0[1]])?, base.toward(&[-x0[1], x0[0]])?, base.toward(&[x0[1], -x0[0]])?];
        let r = wavefront_scan(&disc, &probes, &th)?;
        let want = [Verdict::Singular, Verdict::Singular, Verdict::Smooth, Verdict::Smooth];
        correct += r.iter().zip(want).all(|(r, w)| r.class == w) as usize;
    }
    let mut singular = Vec::new();
    for i in 0..6 {
        let x0 = polar(2.0 * PI * (i as f64 + 0.5) / 6.0);
        let p = ConeProbe::new(&disc, &x0, &x0, d.window)?;
        singular.push(p.toward(&[-x0[0], -x0[1]])?);
        singular.push(p);
    }
    let mut transport = Vec::new();
    for &t in &d.times {
        let rep = match halfwave_transport_check(&disc, &singular, t, &th) {
            Ok(r) => r,
            Err(Error::TransportMismatch(bad)) => {
                transport.push((t, f64::INFINITY, bad.len()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let worst = rep.entries.iter().map(|e| e.offset / rep.cell).fold(0.0, f64::max);
        transport.push((t, worst, rep.failures().len()));
    }
    Ok(WavefrontStudy { calibration, probes: d.probes, correct, fraction: correct as f64 / d.probes as f64, transport })
}

#[derive(Clone, Debug, Serialize)]
pub struct BandError {
    pub lambda: f64,
    pub leading: f64,
    pub corrected: f64,
    /// Self-convergence gap of the reference solution.
    pub reference_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RefinementStudy {
    pub h: [f64; 2],
    pub eikonal: [f64; 2],
    pub transport: [f64; 2],
    pub eikonal_ratio: f64,
    pub transport_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParametrixStudy {
    pub euclidean_gap: f64,
    pub time_zero_gap: f64,
    pub min_jacobian: f64,
    pub cached_eikonal_residual: f64,
    pub bands: Vec<BandError>,
    /// Leading-order error at the lower band over the error at the doubled band.
    pub leading_ratio: f64,
    pub refinement: RefinementStudy,
}

fn plane_tables(model: &ManifoldModel, t_max: f64, dt: f64, h: f64, directions: usize) -> Result<(PhaseTable, AmplitudeTable)> {
    let bump = match model {
        ManifoldModel::PerturbedPlane(b) => *b,
        _ => return Err(Error::Unsupported("parametrix tables need the perturbed plane".into())),
    };
    let phase = solve_eikonal(model, &TableGrid::around(&bump, t_max, dt, h, directions))?;
    let amps = solve_transport(model, &phase, -1)?;
    Ok((phase, amps))
}

/// Residual refinement of the eikonal and order-0 transport equations when
/// `h` and `dt` are halved together.
pub fn refinement_study(model: &ManifoldModel, d: &ParametrixDefaults) -> Result<RefinementStudy> {
    let mut eikonal = [0.0; 2];
    let mut transport = [0.0; 2];
    for (k, &h) in d.refine_h.iter().enumerate() {
        let (phase, amps) = plane_tables(model, d.refine_t_max, h / 2.0, h, 8)?;
        eikonal[k] = phase.difference_eikonal_residual();
        transport[k] = amps.transport_residual(&phase);
    }
    Ok(RefinementStudy {
        h: d.refine_h,
        eikonal,
        transport,
        eikonal_ratio: eikonal[0] / eikonal[1],
        transport_ratio: transport[0] / transport[1],
    })
}

/// Builds the tables, checks the flat case and `t = 0`, and measures the
/// error against the reference half-wave for two data bands.
///
/// When `out` is given the perturbed tables are written there.
pub fn parametrix_study(d: &ParametrixDefaults, out: Option<&std::path::Path>) -> Result<ParametrixStudy> {
    let flat = ManifoldModel::plane(0.0);
    let (fp, fa) = plane_tables(&flat, d.t, d.dt, d.h, d.directions)?;
    let lam = d.lambdas[0];
    let band = [lam, 2.0 * lam];
    let f = band_packet(lam, d.grid, d.center, d.width)?;
    let exact = halfwave(&f, d.t);
    let mut euclidean_gap: f64 = 0.0;
    for order in [AmplitudeOrder::Leading, AmplitudeOrder::Corrected] {
        euclidean_gap = euclidean_gap.max(spectral_distance(&apply_parametrix(&fp, &fa, &f, d.t, band, order)?, &exact)?);
    }

    let model = ManifoldModel::PerturbedPlane(PlaneBump::with_epsilon(d.epsilon));
    let (phase, amps) = plane_tables(&model, d.t, d.dt, d.h, d.directions)?;
    if let Some(dir) = out {
        phase.save(&dir.join("phase.bin"))?;
        amps.save(&phase, &dir.join("amplitude.bin"))?;
    }
    let time_zero_gap = spectral_distance(&apply_parametrix(&phase, &amps, &f, 0.0, band, AmplitudeOrder::Corrected)?, &f)?;
    let mut bands = Vec::new();
    for &lambda in &d.lambdas {
        let f = band_packet(lambda, d.grid, d.center, d.width)?;
        let (reference, reference_gap) = converged_reference(&model, &f, d.t)?;
        let band = [lambda, 2.0 * lambda];
        let leading = spectral_distance(&apply_parametrix(&phase, &amps, &f, d.t, band, AmplitudeOrder::Leading)?, &reference)?;
        let corrected = spectral_distance(&apply_parametrix(&phase, &amps, &f, d.t, band, AmplitudeOrder::Corrected)?, &reference)?;
        bands.push(BandError { lambda, leading, corrected, reference_gap });
    }
    let leading_ratio = bands[0].leading / bands[1].leading;
    Ok(ParametrixStudy {
        euclidean_gap,
        time_zero_gap,
        min_jacobian: phase.min_jacobian(),
        cached_eikonal_residual: phase.cached_eikonal_residual(),
        bands,
        leading_ratio,
        refinement: refinement_study(&model, d)?,
    })
}
