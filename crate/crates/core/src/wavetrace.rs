//! Wave traces, smoothed spectral densities and the length spectrum.
//!
//! Fourier transforms use the symmetric convention
//! `F f(t) = (2 pi)^{-1/2} \int f(lambda) e^{-i t lambda} d lambda`, so that
//! `Tr e^{-it sqrt(Delta)} = sum_j e^{-i t lambda_j} = (2 pi)^{1/2} F(N')(t)`
//! for surfaces. A kernel with `rho_hat(0) = 1` then has mass `(2 pi)^{1/2}`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Lattice, ManifoldModel};
use crate::hamflow::ClosedGeodesic;
use crate::spectrum::{torus_spectrum, SpectrumTable, DEFAULT_ENTRY_CAP};

/// Quadrature nodes on the support `[-1/2, 1/2]` of the base bump.
const BUMP_NODES: usize = 2048;
/// Tabulation step of `rho_0` in scaled units `mu = delta * lambda`.
const TABLE_STEP: f64 = 1.0 / 32.0;
/// Relative level below which `rho_0` is no longer tabulated.
const TABLE_FLOOR: f64 = 1e-17;

/// Base bump on `[-1/2, 1/2]`. The odd tilt keeps `|F^{-1} beta_hat|^2`
/// free of zeros: its modulus is `g^2 + 4 g'^2` for the even part `g`.
fn beta_hat(s: f64) -> f64 {
    let q = 1.0 - 4.0 * s * s;
    if q <= 0.0 {
        0.0
    } else {
        (-1.0 / q).exp() * (1.0 + 2.0 * s)
    }
}

/// Positive kernel `rho` with `rho_hat` even, `rho_hat(0) = 1` and
/// `supp rho_hat = [-delta, delta]`.
///
/// `rho_hat(t) = R(t / delta) / R(0)` with `R` the autocorrelation of
/// `beta_hat`, hence `rho(lambda) = delta |B(delta lambda)|^2 / ((2 pi)^{1/2} R(0))`
/// where `B` is the Fourier integral of `beta_hat`.
#[derive(Clone, Debug)]
pub struct SmoothingKernel {
    pub delta: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    r0: f64,
    /// `rho_0(mu)` and its derivative on `mu = k * TABLE_STEP`.
    table: Vec<(f64, f64)>,
    /// `int_mu^inf rho_0`, same grid.
    tails: Vec<f64>,
}

/// Builds the kernel for support half-width `delta`.
pub fn build_rho(delta: f64) -> Result<SmoothingKernel> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("kernel support must be positive, got {delta}")));
    }
    let h = 1.0 / BUMP_NODES as f64;
    let nodes: Vec<f64> = (0..=BUMP_NODES).map(|i| -0.5 + i as f64 * h).collect();
    let weights: Vec<f64> = nodes.iter().map(|&s| beta_hat(s) * h).collect();
    let r0 = nodes.iter().map(|&s| beta_hat(s).powi(2) * h).sum();
    let mut k = SmoothingKernel { delta, nodes, weights, r0, table: Vec::new(), tails: Vec::new() };
    let peak = k.rho0_exact(0.0).0;
    let mut mu = 0.0;
    loop {
        let v = k.rho0_exact(mu);
        k.table.push(v);
        if v.0 < TABLE_FLOOR * peak && mu > 1.0 {
            break;
        }
        mu += TABLE_STEP;
    }
    let mut tails = vec![0.0; k.table.len()];
    for i in (0..k.table.len() - 1).rev() {
        let (a, da) = k.table[i];
        let (b, db) = k.table[i + 1];
        // Hermite-exact cell integral.
        tails[i] = tails[i + 1] + TABLE_STEP * (a + b) / 2.0 + TABLE_STEP * TABLE_STEP * (da - db) / 12.0;
    }
    k.tails = tails;
    Ok(k)
}

impl SmoothingKernel {
    /// `B(mu) = int beta_hat(s) e^{-i mu s} ds` and `dB/dmu`.
    fn bump_transform(&self, mu: f64) -> (Complex64, Complex64) {
        let mut b = Complex64::new(0.0, 0.0);
        let mut db = Complex64::new(0.0, 0.0);
        for (&s, &w) in self.nodes.iter().zip(&self.weights) {
            if w == 0.0 {
                continue;
            }
            let e = Complex64::from_polar(w, -mu * s);
            b += e;
            db += e * Complex64::new(0.0, -s);
        }
        (b, db)
    }

    /// Unscaled kernel `rho_0(mu)` and its derivative by quadrature.
    fn rho0_exact(&self, mu: f64) -> (f64, f64) {
        let (b, db) = self.bump_transform(mu);
        let c = 1.0 / ((2.0 * PI).sqrt() * self.r0);
        (c * b.norm_sqr(), c * 2.0 * (b.conj() * db).re)
    }

    fn rho0(&self, mu: f64) -> f64 {
        let mu = mu.abs();
        let x = mu / TABLE_STEP;
        let i = x.floor() as usize;
        if i + 1 >= self.table.len() {
            return if i >= self.table.len() + 64 { 0.0 } else { self.rho0_exact(mu).0 };
        }
        let t = x - i as f64;
        let (p0, m0) = self.table[i];
        let (p1, m1) = self.table[i + 1];
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * p0 + (t3 - 2.0 * t2 + t) * TABLE_STEP * m0 + (-2.0 * t3 + 3.0 * t2) * p1 + (t3 - t2) * TABLE_STEP * m1
    }

    /// `rho(lambda)`, interpolated from the tabulated quadrature.
    pub fn rho(&self, lambda: f64) -> f64 {
        self.delta * self.rho0(self.delta * lambda)
    }

    /// `rho(lambda)` by direct quadrature.
    pub fn rho_exact(&self, lambda: f64) -> f64 {
        self.delta * self.rho0_exact(self.delta * lambda).0
    }

    /// `rho_hat(t)`.
    pub fn rho_hat(&self, t: f64) -> f64 {
        let tau = t / self.delta;
        if tau.abs() >= 1.0 {
            return 0.0;
        }
        let h = 1.0 / BUMP_NODES as f64;
        self.nodes.iter().map(|&s| beta_hat(s) * beta_hat(s + tau) * h).sum::<f64>() / self.r0
    }

    pub fn rho_hat_center_value(&self) -> f64 {
        self.rho_hat(0.0)
    }

    pub fn rho_hat_support(&self) -> (f64, f64) {
        (-self.delta, self.delta)
    }

    /// `int rho = (2 pi)^{1/2} rho_hat(0)`.
    pub fn mass(&self) -> f64 {
        (2.0 * PI).sqrt()
    }

    /// Smallest `w` with `int_{|mu| > w} rho <= tol * int rho`.
    pub fn half_width(&self, tol: f64) -> f64 {
        let total = 2.0 * self.tails[0];
        let i = self.tails.iter().position(|&t| 2.0 * t <= tol * total).unwrap_or(self.tails.len() - 1);
        i as f64 * TABLE_STEP / self.delta
    }

    /// `rho` on `lambda_k = (k - n/2) * d_lambda`, `k < n`, by FFT inversion
    /// of `rho_hat` sampled at spacing `2 pi / (n d_lambda)`.
    pub fn tabulate_fft(&self, d_lambda: f64, n: usize) -> Vec<(f64, f64)> {
        let dt = 2.0 * PI / (n as f64 * d_lambda);
        let mut buf: Vec<Complex64> = (0..n)
            .map(|k| {
                let kk = if k < n / 2 { k as f64 } else { k as f64 - n as f64 };
                Complex64::new(self.rho_hat(kk * dt), 0.0)
            })
            .collect();
        FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
        (0..n)
            .map(|i| {
                let k = (i + n - n / 2) % n;
                ((i as f64 - (n / 2) as f64) * d_lambda, buf[k].re * dt / (2.0 * PI).sqrt())
            })
            .collect()
    }
}

/// Neumaier-compensated sum.
#[derive(Clone, Copy, Debug, Default)]
struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Tail fraction of the kernel mass neglected by truncated sums.
pub const DENSITY_TAIL_TOL: f64 = 1e-9;

/// `(rho * N')(lambda) = sum_j mult_j rho(lambda - lambda_j)`, summed in
/// ascending `|lambda - lambda_j|` over the kernel's effective support.
pub fn smoothed_density(table: &SpectrumTable, kernel: &SmoothingKernel, lambda: f64) -> Result<f64> {
    let w = kernel.half_width(DENSITY_TAIL_TOL);
    if lambda + w > table.lambda_max {
        return Err(Error::BeyondCutoff { lambda: lambda + w, cutoff: table.lambda_max });
    }
    let lo = table.entries.partition_point(|e| e.0 < lambda - w);
    let hi = table.entries.partition_point(|e| e.0 <= lambda + w);
    let mut terms: Vec<(f64, f64)> =
        table.entries[lo..hi].iter().map(|&(l, m)| ((lambda - l).abs(), m as f64 * kernel.rho(lambda - l))).collect();
    terms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = CompensatedSum::default();
    for (_, v) in terms {
        acc.add(v);
    }
    Ok(acc.value())
}

/// Uniform time grid `t_k = start + k * step`, `k < count`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TimeGrid {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn new(start: f64, end: f64, count: usize) -> Self {
        Self { start, step: (end - start) / (count.max(2) - 1) as f64, count: count.max(2) }
    }

    /// Grid symmetric about `t = 0` with `2 half + 1` points.
    pub fn symmetric(t_max: f64, half: usize) -> Self {
        Self { start: -t_max, step: t_max / half as f64, count: 2 * half + 1 }
    }

    pub fn t(&self, k: usize) -> f64 {
        self.start + k as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.t(self.count - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TraceWeight {
    /// `w(u) = e^{-u^2}`.
    Gaussian,
}

impl TraceWeight {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            TraceWeight::Gaussian => (-u * u).exp(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TraceWeight::Gaussian => "gaussian",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMethod {
    Direct,
    Binned,
    /// Binned above `BINNED_THRESHOLD` entries.
    Auto,
}

/// Entry count above which `TraceMethod::Auto` bins.
pub const BINNED_THRESHOLD: usize = 100_000;

/// `S(t) = sum_j mult_j w(lambda_j / Lambda) e^{-i t lambda_j}`.
#[derive(Clone, Debug)]
pub struct TraceSignal {
    pub grid: TimeGrid,
    pub values: Vec<Complex64>,
    pub regulator: f64,
    pub weight: TraceWeight,
}

impl TraceSignal {
    pub fn abs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    /// CSV with columns `t,re,im,abs`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,re,im,abs\n");
        for (k, v) in self.values.iter().enumerate() {
            let _ = writeln!(s, "{:.17e},{:.17e},{:.17e},{:.17e}", self.grid.t(k), v.re, v.im, v.norm());
        }
        s
    }

    /// Samples with `t` in `[a, b]`.
    pub fn window(&self, a: f64, b: f64) -> TraceSignal {
        let idx: Vec<usize> = (0..self.grid.count).filter(|&k| self.grid.t(k) >= a && self.grid.t(k) <= b).collect();
        let first = idx.first().copied().unwrap_or(0);
        TraceSignal {
            grid: TimeGrid { start: self.grid.t(first), step: self.grid.step, count: idx.len() },
            values: idx.iter().map(|&k| self.values[k]).collect(),
            regulator: self.regulator,
            weight: self.weight,
        }
    }

    /// `conj(S(-t))` on the reflected grid.
    pub fn time_reversed(&self) -> TraceSignal {
        TraceSignal {
            grid: TimeGrid { start: -self.grid.end(), step: self.grid.step, count: self.grid.count },
            values: self.values.iter().rev().map(|v| v.conj()).collect(),
            regulator: self.regulator,
            weight: self.weight,
        }
    }
}

/// Multiple of the regulator to which the table must be complete.
pub const REGULATOR_REACH: f64 = 4.0;

/// Evaluates the regularized wave trace on `grid`.
pub fn trace_signal(
    table: &SpectrumTable,
    grid: TimeGrid,
    regulator: f64,
    weight: TraceWeight,
    method: TraceMethod,
) -> Result<TraceSignal> {
    let reach = REGULATOR_REACH * regulator;
    if table.lambda_max < reach {
        return Err(Error::BeyondCutoff { lambda: reach, cutoff: table.lambda_max });
    }
    let bound = PI / reach;
    if !(grid.step.abs() <= bound) {
        return Err(Error::NyquistViolation { dt: grid.step, bound, lambda_max: reach });
    }
    let terms: Vec<(f64, f64)> =
        table.entries.iter().filter(|e| e.0 <= table.lambda_max).map(|&(l, m)| (l, m as f64 * weight.eval(l / regulator))).collect();
    let binned = match method {
        TraceMethod::Direct => false,
        TraceMethod::Binned => true,
        TraceMethod::Auto => terms.len() > BINNED_THRESHOLD,
    };
    let values = if binned { binned_sum(&terms, grid) } else { direct_sum(&terms, grid) };
    Ok(TraceSignal { grid, values, regulator, weight })
}

fn direct_sum(terms: &[(f64, f64)], grid: TimeGrid) -> Vec<Complex64> {
    (0..grid.count)
        .map(|k| {
            let t = grid.t(k);
            let (mut re, mut im) = (CompensatedSum::default(), CompensatedSum::default());
            for &(l, c) in terms {
                let (s, co) = (t * l).sin_cos();
                re.add(c * co);
                im.add(-c * s);
            }
            Complex64::new(re.value(), im.value())
        })
        .collect()
}

/// Taylor order of the binned evaluation.
const BIN_TAYLOR_TERMS: usize = 16;

/// Binned evaluation: with `lambda_j = mu_m + r_j` on a grid `mu_m = m dmu`
/// and `t_k = t_c + s_k`, `e^{-i t_k lambda_j} = e^{-i t_k mu_m} e^{-i t_c r_j}
/// sum_p (-i s_k r_j)^p / p!`; each power is one FFT over `m`. With
/// `dmu * dt = 2 pi / M` and `M >= 4 pi K`, `|s_k r_j| <= 1/4`. The factor
/// `e^{-i t_0 mu_m}` is folded into the bin weights.
fn binned_sum(terms: &[(f64, f64)], grid: TimeGrid) -> Vec<Complex64> {
    let k_count = grid.count;
    let dt = grid.step;
    let l_max = terms.iter().map(|t| t.0).fold(0.0, f64::max);
    let mut m = (4.0 * PI * k_count as f64).ceil() as usize;
    while (l_max / (2.0 * PI / (m as f64 * dt))) as usize + 2 >= m {
        m *= 2;
    }
    let m = m.next_power_of_two();
    let dmu = 2.0 * PI / (m as f64 * dt);
    let t_c = grid.t(0) + 0.5 * (k_count - 1) as f64 * dt;
    let mut fft = FftPlanner::new();
    let plan = fft.plan_fft_forward(m);
    let mut out = vec![Complex64::new(0.0, 0.0); k_count];
    let mut bins: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); m]; BIN_TAYLOR_TERMS];
    for &(l, c) in terms {
        let idx = (l / dmu).round();
        let r = l - idx * dmu;
        let base = Complex64::from_polar(c, -t_c * r - grid.t(0) * idx * dmu);
        let mut pw = base;
        for bin in bins.iter_mut() {
            bin[idx as usize] += pw;
            pw *= r;
        }
    }
    let mut fact = 1.0;
    for (p, bin) in bins.iter_mut().enumerate() {
        if p > 0 {
            fact *= p as f64;
        }
        plan.process(bin);
        for (k, o) in out.iter_mut().enumerate() {
            let s = grid.t(k) - t_c;
            let coeff = Complex64::new(0.0, -s).powu(p as u32) / fact;
            *o += coeff * bin[k];
        }
    }
    out
}

/// Default peak threshold as a multiple of the median of `|S|`.
pub const DEFAULT_THRESHOLD_FACTOR: f64 = 5.0;

/// Smallest admissible window start, excluding the mass at `t = 0`.
pub const MIN_DETECTION_TIME: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Peak {
    pub t: f64,
    pub height: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Local maxima of `|S|` above `threshold_factor * median |S|`, refined by a
/// three-point parabola.
pub fn detect_singular_support(signal: &TraceSignal, threshold_factor: f64) -> Result<Vec<Peak>> {
    let lo = signal.grid.start.min(signal.grid.end());
    if lo <= MIN_DETECTION_TIME {
        return Err(Error::Config(format!("detection window must start above {MIN_DETECTION_TIME}, got {lo}")));
    }
    let a = signal.abs();
    let level = threshold_factor * median(&a);
    let mut peaks = Vec::new();
    for k in 1..a.len().saturating_sub(1) {
        let (l, c, r) = (a[k - 1], a[k], a[k + 1]);
        if c > l && c >= r && c > level {
            let denom = l - 2.0 * c + r;
            let off = if denom < 0.0 { (0.5 * (l - r) / denom).clamp(-0.5, 0.5) } else { 0.0 };
            let height = c - 0.25 * (l - r) * off;
            peaks.push(Peak { t: signal.grid.t(k) + off * signal.grid.step, height });
        }
    }
    if signal.grid.step < 0.0 {
        peaks.reverse();
    }
    Ok(peaks)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeakEntry {
    pub t: f64,
    pub height: f64,
    pub nearest_length: Option<f64>,
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DetectionReport {
    pub peaks: Vec<PeakEntry>,
}

/// Attaches the nearest closed-geodesic length to each peak.
pub fn detection_report(peaks: &[Peak], lengths: &[f64]) -> DetectionReport {
    let peaks = peaks
        .iter()
        .map(|p| {
            let nearest = lengths.iter().copied().min_by(|a, b| (a - p.t).abs().total_cmp(&(b - p.t).abs()));
            PeakEntry { t: p.t, height: p.height, nearest_length: nearest, gap: nearest.map(|l| (l - p.t).abs()) }
        })
        .collect();
    DetectionReport { peaks }
}

impl DetectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DgOptions {
    /// Support half-width of the kernel centered at `L`.
    pub delta: f64,
    /// Upper end `Lambda` of the averaging window `[Lambda/2, Lambda]`.
    pub lambda_hi: f64,
    pub samples: usize,
    /// Kernel mass fraction neglected when truncating the sum.
    pub tail_tol: f64,
}

impl Default for DgOptions {
    fn default() -> Self {
        Self { delta: 0.8, lambda_hi: 30.0, samples: 400, tail_tol: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DgReport {
    pub length: f64,
    pub spectral_amp: f64,
    pub classical_amp: f64,
    pub ratio: f64,
    pub det_factor: f64,
    /// Raw conjugate point count; the phase `i^sigma` is not compared.
    pub conj_count: Option<usize>,
}

/// Orientations represented by one catalog entry: torus entries are
/// oriented lattice vectors, the others are unoriented orbits.
fn orientations(model: &ManifoldModel) -> f64 {
    match model {
        ManifoldModel::FlatTorus(_) => 1.0,
        _ => 2.0,
    }
}

/// Compares the oscillation of the spectral density at frequency `L` with
/// the classical amplitude `sum (L^#/2 pi) |det(I - dP)|^{-1/2}`.
///
/// `D(lambda) = sum_j mult_j rho(lambda - lambda_j) e^{i L (lambda - lambda_j)}`
/// has `|D| -> (2 pi)^{1/2} rho_hat(0) |c_L|` where `c_L` is the residue
/// amplitude at `t = L`.
pub fn dg_amplitude_check(
    model: &ManifoldModel,
    table: &SpectrumTable,
    geodesic: &ClosedGeodesic,
    catalog: &[ClosedGeodesic],
    opts: DgOptions,
) -> Result<DgReport> {
    let det = geodesic.det_factor.ok_or_else(|| Error::Config("geodesic has no monodromy; run the monodromy step first".into()))?;
    if det.abs() <= 1e-6 {
        return Err(Error::Degenerate { det_factor: det });
    }
    let l = geodesic.length;
    if l <= opts.delta {
        return Err(Error::CrowdedLengthSpectrum { length: l, nearest: 0.0 });
    }
    for other in catalog {
        let gap = (other.length - l).abs();
        if gap > crate::hamflow::LENGTH_DEDUP_TOL && gap < opts.delta {
            return Err(Error::CrowdedLengthSpectrum { length: l, nearest: other.length });
        }
    }
    let kernel = build_rho(opts.delta)?;
    let w = kernel.half_width(opts.tail_tol);
    if opts.lambda_hi + w > table.lambda_max {
        return Err(Error::BeyondCutoff { lambda: opts.lambda_hi + w, cutoff: table.lambda_max });
    }
    let mut acc = 0.0;
    for i in 0..opts.samples {
        let lam = opts.lambda_hi * (0.5 + 0.5 * (i as f64 + 0.5) / opts.samples as f64);
        let lo = table.entries.partition_point(|e| e.0 < lam - w);
        let hi = table.entries.partition_point(|e| e.0 <= lam + w);
        let mut d = Complex64::new(0.0, 0.0);
        for &(lj, m) in &table.entries[lo..hi] {
            let x = lam - lj;
            d += Complex64::from_polar(m as f64 * kernel.rho(x), l * x);
        }
        acc += d.norm();
    }
    let spectral_amp = acc / opts.samples as f64 / (kernel.mass() * kernel.rho_hat_center_value());
    let classical_amp = geodesic.multiplicity as f64 * orientations(model) * geodesic.primitive_length() / (2.0 * PI) / det.abs().sqrt();
    Ok(DgReport {
        length: l,
        spectral_amp,
        classical_amp,
        ratio: spectral_amp / classical_amp,
        det_factor: det,
        conj_count: geodesic.conj_count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KernelTrace {
    /// `sum_j mult_j e^{-t lambda_j^2}`.
    pub spectral: f64,
    /// `int K_t(x, x) dx` with `K_t` the lattice image sum of Euclidean heat kernels.
    pub kernel: f64,
}

/// Heat trace of a flat torus computed from the spectrum and from the kernel.
pub fn kernel_trace_crosscheck(lattice: &Lattice, t: f64) -> Result<KernelTrace> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("heat time must be positive, got {t}")));
    }
    let n = lattice.dim() as i32;
    let cut = 40.0;
    let table = torus_spectrum(lattice, (cut / t).sqrt(), DEFAULT_ENTRY_CAP)?;
    let mut spectral = CompensatedSum::default();
    for &(l, m) in table.entries.iter().rev() {
        spectral.add(m as f64 * (-t * l * l).exp());
    }
    let mut images = CompensatedSum::default();
    let mut vs = crate::hamflow::lattice_vectors(lattice, (4.0 * t * cut).sqrt());
    vs.sort_by(|a, b| {
        let na: f64 = a.1.iter().map(|c| c * c).sum();
        let nb: f64 = b.1.iter().map(|c| c * c).sum();
        nb.total_cmp(&na)
    });
    for (_, v) in vs {
        let r2: f64 = v.iter().map(|c| c * c).sum();
        images.add((-r2 / (4.0 * t)).exp());
    }
    images.add(1.0);
    let kernel = lattice.volume() * (4.0 * PI * t).powf(-(n as f64) / 2.0) * images.value();
    Ok(KernelTrace { spectral: spectral.value(), kernel })
}
