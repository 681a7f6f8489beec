//! Microlocal diagnostics on flat torus grids: left quantization of symbols,
//! wavefront scanning by windowed Fourier decay in cones, and the transport
//! of singularities by the half-wave group.
//!
//! A grid function is always smooth, so "singular" here means a decay rate
//! of `sup |F(phi u)|` over dyadic shells inside a cone that is slow relative
//! to thresholds calibrated on a jump and a Gaussian. The verdicts are
//! calibrated statements about the band of frequencies the grid resolves.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::schrodinger::{fft_nd, signed_index, GridField, SpaceTag};

/// Default cone half-angle.
pub const DEFAULT_ANGULAR_WIDTH: f64 = PI / 8.0;
/// Largest residual (in octaves) a fit may have before the verdict is withheld.
pub const MAX_RESIDUAL: f64 = 0.3;
/// Fewest dyadic shells a probe may use.
pub const MIN_SHELLS: usize = 4;
/// Shells stay below this fraction of the grid Nyquist frequency.
const NYQUIST_FRACTION: f64 = 0.75;
/// Shell sups below this multiple of `sup|u| ||phi||_1` count as zero.
const FLOOR_REL: f64 = 1e-10;

type XFactor = Box<dyn Fn(&[f64]) -> Complex64 + Sync>;
type KFactor = Box<dyn Fn(&[f64]) -> Complex64 + Sync>;
type FullSymbol = Box<dyn Fn(&[f64], &[f64]) -> Complex64 + Sync>;

enum SymbolKind {
    Separable(Vec<(XFactor, KFactor)>),
    General(FullSymbol),
}

/// A symbol `a(x, k)` on grid points times wave vectors.
///
/// Separable symbols `sum_r b_r(x) c_r(k)` quantize with one inverse FFT per
/// term. General symbols use the direct double sum.
pub struct GridSymbol {
    kind: SymbolKind,
}

impl GridSymbol {
    /// `sum_r b_r(x) c_r(k)`.
    pub fn separable(terms: Vec<(XFactor, KFactor)>) -> Self {
        Self { kind: SymbolKind::Separable(terms) }
    }

    /// A Fourier multiplier `c(k)`.
    pub fn multiplier<C: Fn(&[f64]) -> Complex64 + Sync + 'static>(c: C) -> Self {
        Self::separable(vec![(Box::new(|_: &[f64]| Complex64::new(1.0, 0.0)), Box::new(c))])
    }

    /// Multiplication by `b(x)`.
    pub fn multiplication<B: Fn(&[f64]) -> Complex64 + Sync + 'static>(b: B) -> Self {
        Self::separable(vec![(Box::new(b), Box::new(|_: &[f64]| Complex64::new(1.0, 0.0)))])
    }

    /// An arbitrary `a(x, k)`.
    pub fn general<A: Fn(&[f64], &[f64]) -> Complex64 + Sync + 'static>(a: A) -> Self {
        Self { kind: SymbolKind::General(Box::new(a)) }
    }

    pub fn eval(&self, x: &[f64], k: &[f64]) -> Complex64 {
        match &self.kind {
            SymbolKind::Separable(terms) => terms.iter().map(|(b, c)| b(x) * c(k)).sum(),
            SymbolKind::General(a) => a(x, k),
        }
    }
}

/// Largest grid the direct double sum accepts.
pub const DIRECT_LIMIT: usize = 64 * 64;

/// Left quantization `Op(a)u(x) = sum_k a(x, k) u_k e^{i k.x}`.
///
/// Separable symbols use one inverse FFT per term; general symbols fall back
/// to the direct sum, which is limited to `DIRECT_LIMIT` points.
pub fn quantize_symbol(a: &GridSymbol, field: &GridField) -> Result<GridField> {
    match &a.kind {
        SymbolKind::General(_) => quantize_symbol_direct(a, field),
        SymbolKind::Separable(terms) => {
            let spec = field.to_frequency();
            let n = field.dim();
            let ks = field.wave_vector_table();
            let xs = field.position_table();
            let mut out = GridField::zeros(&field.dims, field.lattice.clone())?;
            for (b, c) in terms {
                let mut term = spec.clone();
                for (v, k) in term.values.iter_mut().zip(ks.chunks(n)) {
                    *v *= c(k);
                }
                let term = term.to_position();
                for ((o, v), x) in out.values.iter_mut().zip(&term.values).zip(xs.chunks(n)) {
                    *o += b(x) * v;
                }
            }
            finite_field(out)
        }
    }
}

/// The double sum over grid points and wave vectors, for any symbol.
pub fn quantize_symbol_direct(a: &GridSymbol, field: &GridField) -> Result<GridField> {
    if field.len() > DIRECT_LIMIT {
        return Err(Error::Config(format!("direct quantization needs at most {DIRECT_LIMIT} points, got {}", field.len())));
    }
    let spec = field.to_frequency();
    let n = field.dim();
    let ks = field.wave_vector_table();
    let xs = field.position_table();
    let mut out = GridField::zeros(&field.dims, field.lattice.clone())?;
    for (o, x) in out.values.iter_mut().zip(xs.chunks(n)) {
        *o = spec
            .values
            .iter()
            .zip(ks.chunks(n))
            .map(|(u, k)| {
                let phase: f64 = k.iter().zip(x).map(|(p, q)| p * q).sum();
                a.eval(x, k) * u * Complex64::from_polar(1.0, phase)
            })
            .sum();
    }
    finite_field(out)
}

fn finite_field(field: GridField) -> Result<GridField> {
    if field.values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("quantized field".into()));
    }
    Ok(field)
}

/// Half-wave group `U(t) = F^{-1} e^{-it|k|} F`.
pub fn halfwave(field: &GridField, t: f64) -> GridField {
    let mut spec = field.to_frequency();
    let n = field.dim();
    for (v, k) in spec.values.iter_mut().zip(field.wave_vector_table().chunks(n)) {
        let norm = k.iter().map(|x| x * x).sum::<f64>().sqrt();
        *v *= Complex64::from_polar(1.0, -t * norm);
    }
    spec.to_position()
}

/// Field with prescribed Fourier coefficients `c(k)` of `e^{i k.x}`. Nyquist
/// modes are left at zero.
pub fn from_coefficients<C: Fn(&[f64]) -> Complex64>(dims: &[usize], lattice: crate::geometry::Lattice, c: C) -> Result<GridField> {
    let mut spec = GridField::zeros(dims, lattice)?;
    let n = spec.dim();
    let ks = spec.wave_vector_table();
    for (idx, k) in ks.chunks(n).enumerate() {
        if !spec.is_nyquist(idx) {
            spec.values[idx] = c(k);
        }
    }
    spec.space = SpaceTag::Frequency;
    finite_field(spec.to_position())
}

/// Cell sizes of an axis-aligned box grid.
fn axis_spacing(field: &GridField) -> Result<Vec<f64>> {
    let l = field.lattice.matrix();
    let n = field.dim();
    for i in 0..n {
        for j in 0..n {
            if i != j && l[(i, j)].abs() > 1e-12 * l[(j, j)].abs() {
                return Err(Error::Config("wavefront scans need an axis-aligned box".into()));
            }
        }
    }
    Ok((0..n).map(|a| l[(a, a)].abs() / field.dims[a] as f64).collect())
}

/// Window profile: a Gaussian of width `r_w / 6` cut off smoothly at `r_w`.
pub fn window(r: f64, radius: f64) -> f64 {
    let q = r / radius;
    if q >= 1.0 {
        return 0.0;
    }
    let sigma = radius / 6.0;
    (-0.5 * (r / sigma).powi(2) + 1.0 - 1.0 / (1.0 - q * q)).exp()
}

/// Dyadic shells `[2^j, 2^{j+1})` between the window scale and the usable
/// part of the grid band.
pub fn default_shells(field: &GridField, window_radius: f64) -> Result<Vec<i32>> {
    let h = axis_spacing(field)?;
    let lo = (6.0 / window_radius).log2().ceil() as i32;
    let top = NYQUIST_FRACTION * PI / h.iter().cloned().fold(0.0, f64::max);
    let hi = top.log2().floor() as i32 - 1;
    let shells: Vec<i32> = (lo..=hi).collect();
    if shells.len() < MIN_SHELLS {
        return Err(Error::InsufficientShells { needed: MIN_SHELLS, available: shells.len() });
    }
    Ok(shells)
}

/// A base point, a unit direction, a window radius, a cone half-angle and the
/// dyadic shells to examine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeProbe {
    pub x0: Vec<f64>,
    pub xi_hat0: Vec<f64>,
    pub window_radius: f64,
    pub angular_width: f64,
    pub shells: Vec<i32>,
}

impl ConeProbe {
    /// Probe with the default cone and the default shells for `field`.
    pub fn new(field: &GridField, x0: &[f64], direction: &[f64], window_radius: f64) -> Result<Self> {
        let probe = Self {
            x0: x0.to_vec(),
            xi_hat0: unit(direction)?,
            window_radius,
            angular_width: DEFAULT_ANGULAR_WIDTH,
            shells: default_shells(field, window_radius)?,
        };
        probe.validate(field)?;
        Ok(probe)
    }

    /// Same window and shells, another direction.
    pub fn toward(&self, direction: &[f64]) -> Result<Self> {
        Ok(Self { xi_hat0: unit(direction)?, ..self.clone() })
    }

    /// Same direction and shells, another base point.
    pub fn at(&self, x0: &[f64]) -> Self {
        Self { x0: x0.to_vec(), ..self.clone() }
    }

    pub fn validate(&self, field: &GridField) -> Result<()> {
        let n = field.dim();
        if self.x0.len() != n || self.xi_hat0.len() != n {
            return Err(Error::Config(format!("probe rank differs from grid rank {n}")));
        }
        if !(self.angular_width > 0.0 && self.angular_width < PI / 2.0) {
            return Err(Error::Config(format!("cone half-angle {} outside (0, pi/2)", self.angular_width)));
        }
        let h = axis_spacing(field)?;
        let half_box = (0..n).map(|a| 0.5 * h[a] * field.dims[a] as f64).fold(f64::INFINITY, f64::min);
        if !(self.window_radius > 2.0 * h.iter().cloned().fold(0.0, f64::max) && self.window_radius < half_box) {
            return Err(Error::Config(format!("window radius {} does not fit the grid", self.window_radius)));
        }
        let top = NYQUIST_FRACTION * PI / h.iter().cloned().fold(0.0, f64::max);
        if self.shells.iter().any(|&j| 2f64.powi(j + 1) > top) {
            return Err(Error::Config("shell beyond the grid band".into()));
        }
        if self.shells.len() < MIN_SHELLS {
            return Err(Error::InsufficientShells { needed: MIN_SHELLS, available: self.shells.len() });
        }
        Ok(())
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::Config("probe direction must be a nonzero vector".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Decay thresholds on the fitted exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub p_smooth: f64,
    pub p_sing: f64,
    pub max_residual: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { p_smooth: 4.0, p_sing: 1.5, max_residual: MAX_RESIDUAL }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Smooth,
    Singular,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Smooth => "smooth",
            Verdict::Singular => "singular",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Outcome of one probe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub probe: usize,
    pub x0: Vec<f64>,
    pub direction: Vec<f64>,
    pub shells: Vec<i32>,
    /// `log2` of the shell sups of `|F(phi u)|`.
    pub log2_sups: Vec<f64>,
    pub exponent: f64,
    pub residual: f64,
    pub class: Verdict,
}

/// `|F(phi u)|` on the frequencies of a zero-padded patch around `x0`.
struct WindowedSpectrum {
    freqs: Vec<f64>,
    moduli: Vec<f64>,
    /// `sup|u| ||phi||_1`, a bound for every modulus.
    reference: f64,
}

fn windowed_spectrum(field: &GridField, scale: f64, h: &[f64], x0: &[f64], radius: f64) -> WindowedSpectrum {
    let n = field.dim();
    let mut center = vec![0i64; n];
    let mut half = vec![0i64; n];
    let mut patch = vec![0usize; n];
    for a in 0..n {
        let side = h[a] * field.dims[a] as f64;
        center[a] = ((x0[a] + 0.5 * side) / h[a] - 0.5).round() as i64;
        half[a] = (radius / h[a]).ceil() as i64;
        patch[a] = (2 * half[a] as usize + 1).next_power_of_two();
    }
    let total: usize = patch.iter().product();
    let mut values = vec![Complex64::new(0.0, 0.0); total];
    let dv: f64 = h.iter().product();
    let span: Vec<usize> = half.iter().map(|&m| 2 * m as usize + 1).collect();
    let count: usize = span.iter().product();
    let mut mass = 0.0;
    let mut offset = vec![0i64; n];
    for flat in 0..count {
        let mut rest = flat;
        for a in (0..n).rev() {
            offset[a] = (rest % span[a]) as i64 - half[a];
            rest /= span[a];
        }
        let mut r2 = 0.0;
        let mut grid_idx = 0usize;
        let mut patch_idx = 0usize;
        for a in 0..n {
            let j = center[a] + offset[a];
            let side = h[a] * field.dims[a] as f64;
            let d = h[a] * (j as f64 + 0.5) - 0.5 * side - x0[a];
            r2 += d * d;
            grid_idx = grid_idx * field.dims[a] + j.rem_euclid(field.dims[a] as i64) as usize;
            patch_idx = patch_idx * patch[a] + offset[a].rem_euclid(patch[a] as i64) as usize;
        }
        let w = window(r2.sqrt(), radius);
        if w == 0.0 {
            continue;
        }
        let v = field.values[grid_idx] * (w * dv);
        mass += w * dv;
        values[patch_idx] = v;
    }
    fft_nd(&mut values, &patch, false);
    let mut freqs = Vec::with_capacity(n * total);
    for idx in 0..total {
        let mut rest = idx;
        let mut xi = vec![0.0; n];
        for a in (0..n).rev() {
            let m = signed_index(rest % patch[a], patch[a]) as f64;
            rest /= patch[a];
            xi[a] = 2.0 * PI * m / (patch[a] as f64 * h[a]);
        }
        freqs.extend(xi);
    }
    WindowedSpectrum { freqs, moduli: values.iter().map(|v| v.norm()).collect(), reference: scale * mass }
}

/// Sup of `|F(phi u)|` over each shell inside the cone.
fn shell_sups(spec: &WindowedSpectrum, probe: &ConeProbe) -> Vec<f64> {
    let n = probe.xi_hat0.len();
    let cos_width = probe.angular_width.cos();
    let mut sups = vec![0.0f64; probe.shells.len()];
    for (xi, &m) in spec.freqs.chunks(n).zip(&spec.moduli) {
        let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let cos: f64 = xi.iter().zip(&probe.xi_hat0).map(|(a, b)| a * b).sum::<f64>() / norm;
        if cos < cos_width {
            continue;
        }
        let j = norm.log2().floor() as i32;
        if let Some(pos) = probe.shells.iter().position(|&s| s == j) {
            sups[pos] = sups[pos].max(m);
        }
    }
    sups
}

/// Decay exponent of the shell sups. When a shell falls below the roundoff
/// floor the exponent is the mean rate of descent from the first shell to the
/// floor; otherwise it is minus the least-squares slope of `log2 sup`
/// against `j`, with the RMS residual of that fit.
fn fit_decay(shells: &[i32], sups: &[f64], reference: f64, th: &Thresholds) -> (f64, f64, Verdict) {
    let floor = FLOOR_REL * reference;
    let crossing = sups.iter().position(|&s| s <= floor);
    let (p, residual) = match crossing {
        Some(0) => ((1.0 / FLOOR_REL).log2() / shells[0].max(1) as f64, 0.0),
        Some(c) => ((sups[0] / floor).log2() / (shells[c] - shells[0]) as f64, 0.0),
        None => {
            let xs: Vec<f64> = shells.iter().map(|&j| j as f64).collect();
            let ys: Vec<f64> = sups.iter().map(|s| s.log2()).collect();
            let m = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / m;
            let my = ys.iter().sum::<f64>() / m;
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let slope = sxy / sxx;
            let rss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
            (-slope, (rss / m).sqrt())
        }
    };
    let class = if residual > th.max_residual {
        Verdict::Inconclusive
    } else if p >= th.p_smooth {
        Verdict::Smooth
    } else if p <= th.p_sing {
        Verdict::Singular
    } else {
        Verdict::Inconclusive
    };
    (p, residual, class)
}

/// Windowed cone decay for each probe, in probe order. Consecutive probes
/// that share a base point and window reuse one transform.
pub fn wavefront_scan(field: &GridField, probes: &[ConeProbe], thresholds: &Thresholds) -> Result<Vec<DecayReport>> {
    let h = axis_spacing(field)?;
    for probe in probes {
        probe.validate(field)?;
    }
    let field = field.to_position();
    let scale = field.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut cached: Option<(Vec<f64>, f64, WindowedSpectrum)> = None;
    let mut out = Vec::with_capacity(probes.len());
    for (i, probe) in probes.iter().enumerate() {
        let hit = matches!(&cached, Some((x, r, _)) if *x == probe.x0 && *r == probe.window_radius);
        if !hit {
            cached = Some((probe.x0.clone(), probe.window_radius, windowed_spectrum(&field, scale, &h, &probe.x0, probe.window_radius)));
        }
        let spec = &cached.as_ref().unwrap().2;
        let sups = shell_sups(spec, probe);
        let floor = FLOOR_REL * spec.reference;
        let (exponent, residual, class) = fit_decay(&probe.shells, &sups, spec.reference, thresholds);
        if !exponent.is_finite() {
            return Err(Error::NonFinite(format!("decay exponent at probe {i}")));
        }
        out.push(DecayReport {
            probe: i,
            x0: probe.x0.clone(),
            direction: probe.xi_hat0.clone(),
            shells: probe.shells.clone(),
            log2_sups: sups.iter().map(|s| s.max(floor).log2()).collect(),
            exponent,
            residual,
            class,
        });
    }
    Ok(out)
}

/// Report table with header `x0_1,x0_2,dir_angle,exponent,residual,class`.
pub fn reports_csv(reports: &[DecayReport]) -> String {
    let mut out = String::from("x0_1,x0_2,dir_angle,exponent,residual,class\n");
    for r in reports {
        let angle = r.direction.get(1).copied().unwrap_or(0.0).atan2(r.direction[0]);
        out.push_str(&format!(
            "{:.8},{:.8},{:.8},{:.6},{:.6},{}\n",
            r.x0[0],
            r.x0.get(1).copied().unwrap_or(0.0),
            angle,
            r.exponent,
            r.residual,
            r.class
        ));
    }
    out
}

/// Reference exponents and the thresholds derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub heaviside_exponent: f64,
    pub gaussian_exponent: f64,
    pub thresholds: Thresholds,
}

/// Periodic unit step on `[-side/2, side/2)`: one on `[0, side/2)`, built
/// from its exact Fourier coefficients.
pub fn periodic_step(cells: usize, side: f64) -> Result<GridField> {
    from_coefficients(&[cells], crate::geometry::Lattice::scaled_identity(1, side), |k| {
        if k[0] == 0.0 {
            Complex64::new(0.5, 0.0)
        } else {
            (Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, -0.5 * side * k[0])) / Complex64::new(0.0, side * k[0])
        }
    })
}

/// Indicator of the disc `|x| < radius` in a square of the given side,
/// band-limited to the grid from its exact Fourier coefficients.
pub fn disc_indicator(cells: usize, side: f64, radius: f64) -> Result<GridField> {
    let area = side * side;
    from_coefficients(&[cells, cells], crate::geometry::Lattice::scaled_identity(2, side), |k| {
        let q = (k[0] * k[0] + k[1] * k[1]).sqrt();
        let c = if q == 0.0 { PI * radius * radius / area } else { 2.0 * PI * radius * libm::j1(q * radius) / (q * area) };
        Complex64::new(c, 0.0)
    })
}

/// Scans the 1-D jump at the origin and a Gaussian of width `0.3`, then
/// fixes `p_sing` half an order above the jump and keeps `p_smooth = 4`
/// provided the Gaussian clears it.
pub fn calibrate(cells: usize, side: f64, window_radius: f64) -> Result<Calibration> {
    let step = periodic_step(cells, side)?;
    let gauss = GridField::from_fn(&[cells], crate::geometry::Lattice::scaled_identity(1, side), |x| {
        Complex64::new((-x[0] * x[0] / 0.18).exp(), 0.0)
    })?;
    let base = Thresholds::default();
    let mut worst = [f64::NEG_INFINITY, f64::INFINITY];
    for (slot, f) in [(0, &step), (1, &gauss)] {
        let probe = ConeProbe::new(f, &[0.0], &[1.0], window_radius)?;
        let probes = [probe.clone(), probe.toward(&[-1.0])?];
        for r in wavefront_scan(f, &probes, &base)? {
            if r.residual > base.max_residual {
                return Err(Error::Inconclusive(format!("calibration fit residual {:.3}", r.residual)));
            }
            worst[slot] = if slot == 0 { worst[0].max(r.exponent) } else { worst[1].min(r.exponent) };
        }
    }
    let thresholds = Thresholds { p_smooth: base.p_smooth, p_sing: worst[0] + 0.5, max_residual: base.max_residual };
    if worst[1] < thresholds.p_smooth || thresholds.p_sing >= thresholds.p_smooth {
        return Err(Error::Inconclusive(format!("references do not separate: jump {:.3}, Gaussian {:.3}", worst[0], worst[1])));
    }
    Ok(Calibration { heaviside_exponent: worst[0], gaussian_exponent: worst[1], thresholds })
}

/// Where one singular probe went under the half-wave group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportEntry {
    pub probe: usize,
    pub predicted: Vec<f64>,
    /// Peak of the top-shell response along the direction of travel.
    pub located: Vec<f64>,
    /// Distance from `located` to `predicted`.
    pub offset: f64,
    pub arrived: bool,
    /// The old base point no longer looks singular in this direction.
    pub departed: bool,
    /// The mirror point `x0 - t xi` does not look singular in this direction.
    pub mirror_clear: bool,
}

impl TransportEntry {
    pub fn passed(&self, cell: f64) -> bool {
        self.arrived && self.departed && self.mirror_clear && self.offset <= cell
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportReport {
    pub t: f64,
    /// Largest cell size, the tolerance on `offset`.
    pub cell: f64,
    pub entries: Vec<TransportEntry>,
}

impl TransportReport {
    pub fn failures(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| !e.passed(self.cell)).map(|e| e.probe).collect()
    }
}

fn wrap_to_box(field: &GridField, h: &[f64], x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(a, &v)| {
            let side = h[a] * field.dims[a] as f64;
            (v + 0.5 * side).rem_euclid(side) - 0.5 * side
        })
        .collect()
}

/// Follows each singular probe of `field0` under `U(t)` and records where the
/// singularity reappears. The mirror and departure checks apply once `|t|`
/// exceeds the window radius.
pub fn transport_report(field0: &GridField, singular: &[ConeProbe], t: f64, thresholds: &Thresholds) -> Result<TransportReport> {
    let h = axis_spacing(field0)?;
    let cell = h.iter().cloned().fold(0.0, f64::max);
    let evolved = halfwave(field0, t);
    let mut entries = Vec::with_capacity(singular.len());
    for (i, probe) in singular.iter().enumerate() {
        let shifted = |s: f64| -> Vec<f64> {
            let x: Vec<f64> = probe.x0.iter().zip(&probe.xi_hat0).map(|(x, d)| x + s * d).collect();
            wrap_to_box(field0, &h, &x)
        };
        let predicted = shifted(t);
        let offsets: Vec<f64> = (-4..=4).map(|m| t + 0.25 * m as f64 * cell).collect();
        let line: Vec<ConeProbe> = offsets.iter().map(|&s| probe.at(&shifted(s))).collect();
        let scans = wavefront_scan(&evolved, &line, thresholds)?;
        let strength: Vec<f64> = scans.iter().map(|r| *r.log2_sups.last().unwrap()).collect();
        let best = (0..strength.len()).max_by(|&a, &b| strength[a].total_cmp(&strength[b])).unwrap();
        let mut s_best = offsets[best];
        if best > 0 && best + 1 < strength.len() {
            let (l, c, r) = (strength[best - 1], strength[best], strength[best + 1]);
            let denom = l - 2.0 * c + r;
            if denom < 0.0 {
                s_best += 0.5 * (l - r) / denom * 0.25 * cell;
            }
        }
        let located = shifted(s_best);
        let arrived = scans[4].class == Verdict::Singular;
        let (departed, mirror_clear) = if t.abs() > probe.window_radius {
            let checks = wavefront_scan(&evolved, &[probe.clone(), probe.at(&shifted(-t))], thresholds)?;
            (checks[0].class != Verdict::Singular, checks[1].class != Verdict::Singular)
        } else {
            (true, true)
        };
        entries.push(TransportEntry { probe: i, predicted, located, offset: (s_best - t).abs(), arrived, departed, mirror_clear });
    }
    Ok(TransportReport { t, cell, entries })
}

/// `transport_report`, failing with the offending probes on any mismatch.
pub fn halfwave_transport_check(field0: &GridField, singular: &[ConeProbe], t: f64, thresholds: &Thresholds) -> Result<TransportReport> {
    let report = transport_report(field0, singular, t, thresholds)?;
    let bad = report.failures();
    if bad.is_empty() {
        Ok(report)
    } else {
        Err(Error::TransportMismatch(bad))
    }
}
