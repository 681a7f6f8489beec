//! Hamilton vector fields and bicharacteristic flows on `T*X`.
//!
//! Symbols are functions of a phase point `(x, xi)`. The Hamilton field of
//! `a` is `H_a = (da/dxi, -da/dx)` and the Poisson bracket is
//! `{f, g} = f_xi . g_x - f_x . g_xi`. Geodesics are the projections of the
//! flow of `|xi|_g`; its variational equation gives the linearized
//! first-return map of a closed orbit.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{ManifoldModel, POLE_BAND};

/// A point `(x, xi)` of the cotangent bundle in chart coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, xi: Vec<f64>) -> Self {
        assert_eq!(x.len(), xi.len(), "position and covector dimensions differ");
        Self { x, xi }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.xi).all(|v| v.is_finite())
    }

    fn to_state(&self) -> Vec<f64> {
        self.x.iter().chain(&self.xi).copied().collect()
    }

    fn from_state(y: &[f64], n: usize) -> Self {
        Self { x: y[..n].to_vec(), xi: y[n..2 * n].to_vec() }
    }

    /// Rescales `xi` so that `|xi|_g = 1`.
    pub fn normalized(model: &ManifoldModel, x: Vec<f64>, xi: Vec<f64>) -> Result<Self> {
        let h = model.cosymbol(&x, &xi)?.sqrt();
        if !(h > 0.0) {
            return Err(Error::NonFinite(format!("zero covector at {x:?}")));
        }
        Ok(Self::new(x, xi.iter().map(|v| v / h).collect()))
    }
}

/// Gradient of a symbol: `(da/dx, da/dxi)`.
pub type Gradient = (Vec<f64>, Vec<f64>);

/// A real function on phase space.
///
/// Derivatives default to central differences with step `fd_step`.
pub trait Symbol {
    fn value(&self, q: &PhasePoint) -> Result<f64>;

    fn fd_step(&self) -> f64 {
        1e-5
    }

    fn gradient(&self, q: &PhasePoint) -> Result<Gradient> {
        let n = q.dim();
        let h = self.fd_step();
        let mut gx = vec![0.0; n];
        let mut gxi = vec![0.0; n];
        for k in 0..2 * n {
            let mut p = q.clone();
            let mut m = q.clone();
            let (pv, mv) = if k < n { (&mut p.x[k], &mut m.x[k]) } else { (&mut p.xi[k - n], &mut m.xi[k - n]) };
            *pv += h;
            *mv -= h;
            let d = (self.value(&p)? - self.value(&m)?) / (2.0 * h);
            if k < n {
                gx[k] = d;
            } else {
                gxi[k - n] = d;
            }
        }
        finite_gradient((gx, gxi))
    }

    /// Hessian in the ordering `(x, xi)`.
    fn hessian(&self, q: &PhasePoint) -> Result<DMatrix<f64>> {
        let n = q.dim();
        let h = self.fd_step();
        let mut hess = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..2 * n {
            let mut p = q.clone();
            let mut m = q.clone();
            if k < n {
                p.x[k] += h;
                m.x[k] -= h;
            } else {
                p.xi[k - n] += h;
                m.xi[k - n] -= h;
            }
            let (px, pxi) = self.gradient(&p)?;
            let (mx, mxi) = self.gradient(&m)?;
            for r in 0..n {
                hess[(r, k)] = (px[r] - mx[r]) / (2.0 * h);
                hess[(n + r, k)] = (pxi[r] - mxi[r]) / (2.0 * h);
            }
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }
}

fn finite_gradient(g: Gradient) -> Result<Gradient> {
    if g.0.iter().chain(&g.1).all(|v| v.is_finite()) {
        Ok(g)
    } else {
        Err(Error::NonFinite("symbol derivative overflow".into()))
    }
}

/// A symbol given by a closure `(x, xi) -> a`, differentiated numerically.
pub struct FnSymbol<F> {
    f: F,
    step: f64,
}

impl<F: Fn(&[f64], &[f64]) -> f64> FnSymbol<F> {
    pub fn new(f: F) -> Self {
        Self { f, step: 1e-5 }
    }

    pub fn with_step(f: F, step: f64) -> Self {
        Self { f, step }
    }
}

impl<F: Fn(&[f64], &[f64]) -> f64> Symbol for FnSymbol<F> {
    fn value(&self, q: &PhasePoint) -> Result<f64> {
        let v = (self.f)(&q.x, &q.xi);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("symbol value at {q:?}")))
        }
    }

    fn fd_step(&self) -> f64 {
        self.step
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricSymbolKind {
    /// `|xi|_g^2`, the principal symbol of the Laplacian.
    Squared,
    /// `|xi|_g`, generating the unit-speed geodesic flow.
    Norm,
}

/// `|xi|_g^2` or `|xi|_g` with closed-form derivatives from the cometric jet.
#[derive(Clone, Debug)]
pub struct MetricSymbol {
    pub model: ManifoldModel,
    pub kind: MetricSymbolKind,
}

impl MetricSymbol {
    pub fn squared(model: &ManifoldModel) -> Self {
        Self { model: model.clone(), kind: MetricSymbolKind::Squared }
    }

    pub fn norm(model: &ManifoldModel) -> Self {
        Self { model: model.clone(), kind: MetricSymbolKind::Norm }
    }

    /// Value, gradient and Hessian of `Q = |xi|_g^2`.
    fn squared_jet(&self, q: &PhasePoint) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let n = q.dim();
        let jet = self.model.cometric_jet(&q.x)?;
        if jet.n != n {
            return Err(Error::OutOfChart { point: q.x.clone(), reason: "dimension mismatch".into() });
        }
        let xi = &q.xi;
        let mut val = 0.0;
        let mut grad = DVector::zeros(2 * n);
        let mut hess = DMatrix::zeros(2 * n, 2 * n);
        for i in 0..n {
            for j in 0..n {
                let gij = jet.ginv(i, j);
                val += gij * xi[i] * xi[j];
                grad[n + i] += 2.0 * gij * xi[j];
                hess[(n + i, n + j)] = 2.0 * gij;
                for k in 0..n {
                    let d = jet.d1(k, i, j);
                    grad[k] += d * xi[i] * xi[j];
                    hess[(k, n + i)] += 2.0 * d * xi[j];
                    for l in 0..n {
                        hess[(k, l)] += jet.d2(k, l, i, j) * xi[i] * xi[j];
                    }
                }
            }
        }
        for k in 0..n {
            for i in 0..n {
                hess[(n + i, k)] = hess[(k, n + i)];
            }
        }
        Ok((val, grad, hess))
    }

    fn full_jet(&self, q: &PhasePoint) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let (qv, qg, qh) = self.squared_jet(q)?;
        match self.kind {
            MetricSymbolKind::Squared => Ok((qv, qg, qh)),
            MetricSymbolKind::Norm => {
                let h = qv.sqrt();
                if !(h > 0.0) {
                    return Err(Error::NonFinite("|xi|_g vanishes".into()));
                }
                let g = &qg / (2.0 * h);
                let hess = &qh / (2.0 * h) - (&qg * qg.transpose()) / (4.0 * h * h * h);
                Ok((h, g, hess))
            }
        }
    }
}

impl Symbol for MetricSymbol {
    fn value(&self, q: &PhasePoint) -> Result<f64> {
        let v = self.model.cosymbol(&q.x, &q.xi)?;
        Ok(match self.kind {
            MetricSymbolKind::Squared => v,
            MetricSymbolKind::Norm => v.sqrt(),
        })
    }

    fn gradient(&self, q: &PhasePoint) -> Result<Gradient> {
        let n = q.dim();
        let (_, g, _) = self.full_jet(q)?;
        finite_gradient((g.rows(0, n).iter().copied().collect(), g.rows(n, n).iter().copied().collect()))
    }

    fn hessian(&self, q: &PhasePoint) -> Result<DMatrix<f64>> {
        let (_, _, h) = self.full_jet(q)?;
        if h.iter().all(|v| v.is_finite()) {
            Ok(h)
        } else {
            Err(Error::NonFinite("symbol Hessian overflow".into()))
        }
    }
}

/// `H_a(q) = (da/dxi, -da/dx)`, returned as `(xdot, xidot)`.
pub fn hamilton_field(a: &dyn Symbol, q: &PhasePoint) -> Result<(Vec<f64>, Vec<f64>)> {
    let (gx, gxi) = a.gradient(q)?;
    Ok((gxi, gx.iter().map(|v| -v).collect()))
}

/// `{f, g}(q) = sum_j df/dxi_j dg/dx_j - df/dx_j dg/dxi_j`.
pub fn poisson_bracket(f: &dyn Symbol, g: &dyn Symbol, q: &PhasePoint) -> Result<f64> {
    let (fx, fxi) = f.gradient(q)?;
    let (gx, gxi) = g.gradient(q)?;
    let v: f64 = (0..q.dim()).map(|j| fxi[j] * gx[j] - fx[j] * gxi[j]).sum();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("Poisson bracket".into()))
    }
}

/// Derivative of the Hamilton field, `d(H_a)` in the ordering `(x, xi)`.
fn field_jacobian(a: &dyn Symbol, q: &PhasePoint) -> Result<DMatrix<f64>> {
    let n = q.dim();
    let h = a.hessian(q)?;
    let mut d = DMatrix::zeros(2 * n, 2 * n);
    for r in 0..n {
        for c in 0..2 * n {
            d[(r, c)] = h[(n + r, c)];
            d[(n + r, c)] = -h[(r, c)];
        }
    }
    Ok(d)
}

/// Step-size policy of the RK4 integrator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepControl {
    Fixed(f64),
    /// Step doubling: a full step is compared with two half steps and accepted
    /// when the Richardson estimate `|y2 - y1| / 15` is below `tol` (relative).
    Adaptive {
        initial: f64,
        tol: f64,
    },
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::Adaptive { initial: 1e-2, tol: 1e-12 }
    }
}

/// Smallest admissible step.
pub const MIN_STEP: f64 = 1e-12;

/// Energy drift allowed per unit flow time on adaptive runs.
pub const DRIFT_TOL: f64 = 1e-9;

type Rhs<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a;

fn rk4(rhs: &Rhs, y: &[f64], dt: f64) -> Result<Vec<f64>> {
    let axpy = |a: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(yi, ki)| yi + a * ki).collect() };
    let k1 = rhs(y)?;
    let k2 = rhs(&axpy(0.5 * dt, &k1))?;
    let k3 = rhs(&axpy(0.5 * dt, &k2))?;
    let k4 = rhs(&axpy(dt, &k3))?;
    let out: Vec<f64> = (0..y.len()).map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("RK4 stage".into()))
    }
}

/// Accepted-step RK4 driver from `s = 0` to `s = t_end` (either sign).
struct Stepper<'a> {
    rhs: &'a Rhs<'a>,
    s: f64,
    y: Vec<f64>,
    t_end: f64,
    dt: f64,
    control: StepControl,
    retry_out_of_chart: bool,
}

impl<'a> Stepper<'a> {
    fn new(rhs: &'a Rhs<'a>, y: Vec<f64>, t_end: f64, control: StepControl) -> Result<Self> {
        let dt = match control {
            StepControl::Fixed(h) | StepControl::Adaptive { initial: h, .. } => h.abs(),
        };
        if !(dt >= MIN_STEP) || !t_end.is_finite() {
            return Err(Error::StepUnderflow { s: 0.0 });
        }
        Ok(Self { rhs, s: 0.0, y, t_end, dt, control, retry_out_of_chart: false })
    }

    fn done(&self) -> bool {
        (self.t_end - self.s).abs() <= 1e-14 * self.t_end.abs().max(1.0)
    }

    /// Advances one accepted step; returns `false` once `t_end` is reached.
    fn advance(&mut self) -> Result<bool> {
        if self.done() {
            return Ok(false);
        }
        let dir = self.t_end.signum();
        let remaining = (self.t_end - self.s).abs();
        match self.control {
            StepControl::Fixed(_) => {
                let h = self.dt.min(remaining);
                self.y = rk4(self.rhs, &self.y, dir * h)?;
                self.s = if h == remaining { self.t_end } else { self.s + dir * h };
            }
            StepControl::Adaptive { tol, .. } => loop {
                let h = self.dt.min(remaining);
                if h < MIN_STEP {
                    return Err(Error::StepUnderflow { s: self.s });
                }
                let trial = rk4(self.rhs, &self.y, dir * h).and_then(|y1| {
                    let ym = rk4(self.rhs, &self.y, 0.5 * dir * h)?;
                    Ok((y1, rk4(self.rhs, &ym, 0.5 * dir * h)?))
                });
                let (y1, y2) = match trial {
                    Err(Error::OutOfChart { .. }) if self.retry_out_of_chart => {
                        self.dt = 0.5 * h;
                        continue;
                    }
                    other => other?,
                };
                let err = y1.iter().zip(&y2).zip(&self.y).map(|((a, b), y0)| (a - b).abs() / 15.0 / (1.0 + y0.abs())).fold(0.0, f64::max);
                let factor = if err > 0.0 { 0.9 * (tol / err).powf(0.2) } else { 2.0 };
                if err <= tol {
                    self.y = y2;
                    self.s = if h == remaining { self.t_end } else { self.s + dir * h };
                    if h == self.dt {
                        self.dt *= factor.clamp(1.0, 2.0);
                    }
                    break;
                }
                self.dt = h * factor.clamp(0.2, 0.9);
            },
        }
        Ok(true)
    }
}

/// One recorded point of a trajectory. `chart` is 0 for the model's primary
/// chart and 1 for the rotated polar chart of the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub s: f64,
    pub point: PhasePoint,
    pub h: f64,
    pub chart: u8,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub hamiltonian_drift: f64,
    pub chart_switches: usize,
}

impl Trajectory {
    pub fn start(&self) -> &PhasePoint {
        &self.samples[0].point
    }

    pub fn end(&self) -> &TrajectorySample {
        self.samples.last().expect("trajectory has samples")
    }

    /// CSV with columns `s, x1..xn, xi1..xin, h_value`.
    pub fn to_csv(&self) -> String {
        let n = self.start().dim();
        let mut out = String::from("s");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        for i in 1..=n {
            let _ = write!(out, ",xi{i}");
        }
        out.push_str(",h_value\n");
        for smp in &self.samples {
            let _ = write!(out, "{:.17e}", smp.s);
            for v in smp.point.x.iter().chain(&smp.point.xi) {
                let _ = write!(out, ",{v:.17e}");
            }
            let _ = writeln!(out, ",{:.17e}", smp.h);
        }
        out
    }
}

/// Charts of the round sphere: chart 0 is the model's polar chart, chart 1
/// the polar chart about the rotated axis `(a, b, c) -> (b, c, a)`.
mod sphere_chart {
    pub fn embed(x: &[f64]) -> ([f64; 3], [[f64; 2]; 3]) {
        let (st, ct) = x[0].sin_cos();
        let (sp, cp) = x[1].sin_cos();
        ([st * cp, st * sp, ct], [[ct * cp, -st * sp], [ct * sp, st * cp], [-st, 0.0]])
    }

    fn angles(p: [f64; 3]) -> [f64; 2] {
        [p[2].clamp(-1.0, 1.0).acos(), p[1].atan2(p[0])]
    }

    /// Transfers `(x, xi)` to the other chart.
    pub fn switch(x: &[f64], xi: &[f64], to_rotated: bool) -> (Vec<f64>, Vec<f64>) {
        let (p, j) = embed(x);
        let rot = |v: [f64; 3]| if to_rotated { [v[1], v[2], v[0]] } else { [v[2], v[0], v[1]] };
        let s2 = x[0].sin().powi(2);
        let vel = [xi[0], xi[1] / s2];
        let w: [f64; 3] = std::array::from_fn(|r| j[r][0] * vel[0] + j[r][1] * vel[1]);
        let xn = angles(rot(p));
        let (_, jn) = embed(&xn);
        let wn = rot(w);
        let xin: Vec<f64> = (0..2).map(|c| (0..3).map(|r| jn[r][c] * wn[r]).sum()).collect();
        (xn.to_vec(), xin)
    }
}

/// Pole distance below which sphere trajectories change chart.
pub const CHART_SWITCH_BAND: f64 = 0.1;

fn near_pole(theta: f64, band: f64) -> bool {
    theta < band || theta > PI - band
}

/// Integrates the Hamilton flow of `a` from `q0` for flow time `t` (either sign).
///
/// On `Sphere2` the integration switches to a rotated polar chart within
/// `CHART_SWITCH_BAND` of a pole; samples are reported in the primary chart
/// whenever it is valid there.
pub fn integrate_bicharacteristic(
    a: &dyn Symbol,
    model: Option<&ManifoldModel>,
    q0: &PhasePoint,
    t: f64,
    control: StepControl,
) -> Result<Trajectory> {
    if !q0.is_finite() {
        return Err(Error::NonFinite(format!("initial point {q0:?}")));
    }
    let n = q0.dim();
    let switching = matches!(model, Some(ManifoldModel::Sphere2(_)));
    let rhs = |y: &[f64]| -> Result<Vec<f64>> {
        let (dx, dxi) = hamilton_field(a, &PhasePoint::from_state(y, n))?;
        Ok(dx.into_iter().chain(dxi).collect())
    };
    let mut chart = 0u8;
    let mut start = q0.clone();
    if switching && near_pole(start.x[0], CHART_SWITCH_BAND) {
        let (x, xi) = sphere_chart::switch(&start.x, &start.xi, true);
        start = PhasePoint::new(x, xi);
        chart = 1;
    }
    let h0 = a.value(&start)?;
    let mut stepper = Stepper::new(&rhs, start.to_state(), t, control)?;
    stepper.retry_out_of_chart = switching;
    let mut samples = vec![TrajectorySample { s: 0.0, point: q0.clone(), h: h0, chart: 0 }];
    if chart == 1 {
        samples[0].chart = if near_pole(q0.x[0], POLE_BAND) { 1 } else { 0 };
        if samples[0].chart == 1 {
            samples[0].point = start.clone();
        }
    }
    let mut drift: f64 = 0.0;
    let mut switches = 0;
    while stepper.advance()? {
        let mut p = PhasePoint::from_state(&stepper.y, n);
        if switching && near_pole(p.x[0], CHART_SWITCH_BAND) {
            let (x, xi) = sphere_chart::switch(&p.x, &p.xi, chart == 0);
            chart = 1 - chart;
            switches += 1;
            p = PhasePoint::new(x, xi);
            stepper.y = p.to_state();
        }
        let h = a.value(&p)?;
        drift = drift.max((h - h0).abs());
        let mut smp = TrajectorySample { s: stepper.s, point: p, h, chart };
        if chart == 1 {
            let (x, xi) = sphere_chart::switch(&smp.point.x, &smp.point.xi, false);
            if !near_pole(x[0], POLE_BAND) {
                smp.point = PhasePoint::new(x, xi);
                smp.chart = 0;
            }
        }
        samples.push(smp);
    }
    if matches!(control, StepControl::Adaptive { .. }) && drift > DRIFT_TOL * t.abs().max(1.0) {
        return Err(Error::SanityGateFailed(format!("Hamiltonian drift {drift:.3e} over time {t}")));
    }
    Ok(Trajectory { samples, hamiltonian_drift: drift, chart_switches: switches })
}

/// Phase-space distance modulo the model's periodicities (lattice translations
/// on tori, `2 pi` in the angular coordinate of polar charts).
pub fn phase_distance(model: &ManifoldModel, a: &PhasePoint, b: &PhasePoint) -> f64 {
    let n = a.dim();
    let mut dx: Vec<f64> = (0..n).map(|i| a.x[i] - b.x[i]).collect();
    match model {
        ManifoldModel::FlatTorus(l) => {
            let c = l.inverse() * DVector::from_column_slice(&dx);
            let c = c.map(|v| v - v.round());
            let d = l.matrix() * c;
            dx = d.iter().copied().collect();
        }
        ManifoldModel::Sphere2(_) | ManifoldModel::SurfaceOfRevolution(_) => {
            dx[1] -= (dx[1] / (2.0 * PI)).round() * 2.0 * PI;
        }
        ManifoldModel::PerturbedPlane(_) => {}
    }
    dx.iter().chain((0..n).map(|i| a.xi[i] - b.xi[i]).collect::<Vec<_>>().iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// A closed orbit of the geodesic flow on the unit cosphere bundle.
///
/// `monodromy`, `det_factor` and `conj_count` are filled by [`monodromy`].
#[derive(Clone, Debug)]
pub struct ClosedGeodesic {
    pub start: PhasePoint,
    pub length: f64,
    /// Number of distinct orbits of this length that were merged.
    pub multiplicity: usize,
    /// Number of traversals of the underlying primitive orbit.
    pub iterate: usize,
    pub monodromy: Option<DMatrix<f64>>,
    pub det_factor: Option<f64>,
    pub conj_count: Option<usize>,
    pub multiplicity_note: String,
}

impl ClosedGeodesic {
    fn new(start: PhasePoint, length: f64, iterate: usize, note: &str) -> Self {
        Self {
            start,
            length,
            multiplicity: 1,
            iterate,
            monodromy: None,
            det_factor: None,
            conj_count: None,
            multiplicity_note: note.to_string(),
        }
    }

    /// Length of the primitive orbit.
    pub fn primitive_length(&self) -> f64 {
        self.length / self.iterate as f64
    }
}

/// Tolerance for merging equal lengths.
pub const LENGTH_DEDUP_TOL: f64 = 1e-6;

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Nonzero lattice vectors `k` with `|L k| <= l_max`, as `(k, L k)`.
pub fn lattice_vectors(lattice: &crate::geometry::Lattice, l_max: f64) -> Vec<(Vec<i64>, Vec<f64>)> {
    let n = lattice.dim();
    let bound = (lattice.inverse().norm() * l_max).floor() as i64;
    let mut out = Vec::new();
    let mut k = vec![-bound; n];
    loop {
        if k.iter().any(|&v| v != 0) {
            let kv = DVector::from_iterator(n, k.iter().map(|&v| v as f64));
            let v = lattice.matrix() * kv;
            if v.norm() <= l_max {
                out.push((k.clone(), v.iter().copied().collect()));
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return out;
            }
            if k[i] < bound {
                k[i] += 1;
                break;
            }
            k[i] = -bound;
            i += 1;
        }
    }
}

/// Closed geodesics of length at most `l_max`, sorted by length and start.
pub fn find_closed_geodesics(model: &ManifoldModel, l_max: f64) -> Result<Vec<ClosedGeodesic>> {
    let mut found = Vec::new();
    if !(l_max > 0.0) {
        return Ok(found);
    }
    match model {
        ManifoldModel::FlatTorus(lat) => {
            for (k, v) in lattice_vectors(lat, l_max) {
                let len = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                let it = k.iter().fold(0, |g, &c| gcd(g, c)) as usize;
                let xi = v.iter().map(|c| c / len).collect();
                found.push(ClosedGeodesic::new(PhasePoint::new(vec![0.0; lat.dim()], xi), len, it, "family"));
            }
        }
        ManifoldModel::Sphere2(p) => {
            let prim = 2.0 * PI * p.radius;
            let start = PhasePoint::new(vec![PI / 2.0, 0.0], vec![0.0, p.radius]);
            for it in 1..=((l_max / prim).floor() as usize) {
                found.push(ClosedGeodesic::new(start.clone(), prim * it as f64, it, "family"));
            }
        }
        ManifoldModel::SurfaceOfRevolution(prof) => {
            for u in prof.critical_points() {
                let r = prof.radius(u);
                let prim = 2.0 * PI * r;
                let start = PhasePoint::new(vec![u, 0.0], vec![0.0, r]);
                for it in 1..=((l_max / prim).floor() as usize) {
                    found.push(ClosedGeodesic::new(start.clone(), prim * it as f64, it, "isolated"));
                }
            }
            let prim = 2.0 * prof.length()?;
            let u0 = PI / 2.0;
            let w = prof.jet(u0).speed()[0];
            let start = PhasePoint::new(vec![u0, 0.0], vec![w, 0.0]);
            for it in 1..=((l_max / prim).floor() as usize) {
                found.push(ClosedGeodesic::new(start.clone(), prim * it as f64, it, "family"));
            }
        }
        ManifoldModel::PerturbedPlane(_) => {}
    }
    found.sort_by(|a, b| {
        a.length.total_cmp(&b.length).then_with(|| cmp_slices(&a.start.x, &b.start.x)).then_with(|| cmp_slices(&a.start.xi, &b.start.xi))
    });
    let mut merged: Vec<ClosedGeodesic> = Vec::new();
    for g in found {
        match merged.last_mut() {
            Some(last) if (g.length - last.length).abs() <= LENGTH_DEDUP_TOL => {
                last.multiplicity += g.multiplicity;
                if !last.multiplicity_note.split('+').any(|t| t == g.multiplicity_note) {
                    last.multiplicity_note = format!("{}+{}", last.multiplicity_note, g.multiplicity_note);
                }
            }
            _ => merged.push(g),
        }
    }
    Ok(merged)
}

fn cmp_slices(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
}

/// Bound on the variational solution.
pub const LINEARIZATION_CAP: f64 = 1e12;

/// g-orthonormal basis of the complement of `v` at `x`.
fn normal_frame(g: &DMatrix<f64>, v: &DVector<f64>) -> Vec<DVector<f64>> {
    let n = v.len();
    let ip = |a: &DVector<f64>, b: &DVector<f64>| (a.transpose() * g * b)[(0, 0)];
    let mut basis = vec![v / ip(v, v).sqrt()];
    for k in 0..n {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        for b in &basis {
            e -= b * ip(b, &e);
        }
        let nrm = ip(&e, &e).sqrt();
        if nrm > 1e-8 && basis.len() < n {
            basis.push(e / nrm);
        }
    }
    basis.remove(0);
    basis
}

/// Fills the linearized first-return map, `det(I - dP)` and the conjugate
/// point count of a closed geodesic.
///
/// The variational equation of `H_{|xi|_g}` is integrated over one period.
/// The transversal at the start point is spanned by the normal position
/// variations and their conjugate momenta, projected into `{d|xi|_g = 0}` and
/// orthonormalized against `H`.
pub fn monodromy(model: &ManifoldModel, geodesic: &ClosedGeodesic, control: StepControl) -> Result<ClosedGeodesic> {
    let sym = MetricSymbol::norm(model);
    let n = geodesic.start.dim();
    let q0 = PhasePoint::normalized(model, geodesic.start.x.clone(), geodesic.start.xi.clone())?;
    let m = 2 * n;
    let rhs = |y: &[f64]| -> Result<Vec<f64>> {
        let q = PhasePoint::from_state(y, n);
        let (dx, dxi) = hamilton_field(&sym, &q)?;
        let jac = field_jacobian(&sym, &q)?;
        let mm = DMatrix::from_column_slice(m, m, &y[m..]);
        let dm = jac * mm;
        Ok(dx.into_iter().chain(dxi).chain(dm.iter().copied()).collect())
    };
    let mut y0 = q0.to_state();
    y0.extend(DMatrix::<f64>::identity(m, m).iter());
    let md = model.metric_at(&q0.x)?;
    let (dx0, dxi0) = hamilton_field(&sym, &q0)?;
    let xdot = DVector::from_vec(dx0.clone());
    let normals = normal_frame(&md.g, &xdot);
    let jacobi0: DVector<f64> = {
        let gn = &md.g * &normals[0];
        DVector::from_iterator(m, std::iter::repeat_n(0.0, n).chain(gn.iter().copied()))
    };
    let mut stepper = Stepper::new(&rhs, y0, geodesic.length, control)?;
    let mut nu = vec![(0.0, 0.0)];
    while stepper.advance()? {
        let mm = DMatrix::from_column_slice(m, m, &stepper.y[m..]);
        let cap = mm.amax();
        if !(cap <= LINEARIZATION_CAP) {
            return Err(Error::LinearizationDiverged { norm: cap });
        }
        let j = &mm * &jacobi0;
        let q = PhasePoint::from_state(&stepper.y, n);
        nu.push((stepper.s, normal_component(model, &sym, &q, &j.rows(0, n).into_owned(), &normals[0])?));
    }
    let end = PhasePoint::from_state(&stepper.y, n);
    let gap = phase_distance(model, &end, &q0);
    if gap > 1e-6 {
        return Err(Error::SanityGateFailed(format!("orbit does not close: gap {gap:.3e}")));
    }
    let mm = DMatrix::from_column_slice(m, m, &stepper.y[m..]);

    let field = DVector::from_iterator(m, dx0.iter().copied().chain(dxi0.iter().copied()));
    let (gx, gxi) = sym.gradient(&q0)?;
    let dh = DVector::from_iterator(m, gx.into_iter().chain(gxi));
    let radial = DVector::from_iterator(m, std::iter::repeat_n(0.0, n).chain(q0.xi.iter().copied()));
    let mut raw = Vec::new();
    for nv in &normals {
        raw.push(DVector::from_iterator(m, nv.iter().copied().chain(std::iter::repeat_n(0.0, n))));
        let gn = &md.g * nv;
        raw.push(DVector::from_iterator(m, std::iter::repeat_n(0.0, n).chain(gn.iter().copied())));
    }
    let mut basis: Vec<DVector<f64>> = vec![&field / field.norm()];
    for v in raw {
        let mut e = &v - &radial * dh.dot(&v);
        for b in &basis {
            e -= b * b.dot(&e);
        }
        let nrm = e.norm();
        if nrm < 1e-10 {
            return Err(Error::Degenerate { det_factor: 0.0 });
        }
        basis.push(e / nrm);
    }
    let k = basis.len() - 1;
    let bmat = DMatrix::from_columns(&basis);
    let svd = bmat.clone().svd(true, true);
    let mut dp = DMatrix::zeros(k, k);
    for i in 0..k {
        let w = &mm * &basis[i + 1];
        let c = svd.solve(&w, 1e-14).map_err(|e| Error::NonFinite(e.to_string()))?;
        for j in 0..k {
            dp[(j, i)] = c[j + 1];
        }
    }
    let det_factor = (DMatrix::identity(k, k) - &dp).determinant();
    let conj = count_conjugate_points(&nu)?;
    let mut out = geodesic.clone();
    if out.multiplicity_note == "isolated" && det_factor.abs() < 1e-8 {
        out.multiplicity_note = "isolated, degenerate".into();
    }
    out.monodromy = Some(dp);
    out.det_factor = Some(det_factor);
    out.conj_count = Some(conj);
    Ok(out)
}

/// Signed normal component of a variation `dx` of the position.
fn normal_component(model: &ManifoldModel, sym: &MetricSymbol, q: &PhasePoint, dx: &DVector<f64>, n0: &DVector<f64>) -> Result<f64> {
    let md = model.metric_at(&q.x)?;
    if q.dim() == 2 {
        let (v, _) = hamilton_field(sym, q)?;
        Ok(md.det_g.sqrt() * (v[0] * dx[1] - v[1] * dx[0]))
    } else {
        Ok((dx.transpose() * &md.g * n0)[(0, 0)])
    }
}

/// Zeros of the Jacobi normal component over `(0, L]`.
fn count_conjugate_points(nu: &[(f64, f64)]) -> Result<usize> {
    let scale = nu.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
    if nu.len() < 3 || scale == 0.0 {
        return Ok(0);
    }
    let last = nu.len() - 1;
    let mut count = 0;
    for i in 1..last {
        let v = nu[i].1;
        if v.abs() < 1e-10 * scale {
            let (a, b) = (nu[i - 1].1, nu[i + 1].1);
            if a * b > 0.0 {
                return Err(Error::Inconclusive(format!("Jacobi field tangency at s = {}", nu[i].0)));
            }
        }
        if i + 1 < last && v * nu[i + 1].1 < 0.0 {
            count += 1;
        }
    }
    if nu[last].1.abs() < 1e-6 * scale || nu[last - 1].1 * nu[last].1 < 0.0 {
        count += 1;
    }
    Ok(count)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fate {
    Trapped,
    /// Escape detected at flow time `time`.
    Escaped {
        time: f64,
    },
}

impl Fate {
    pub fn is_trapped(&self) -> bool {
        matches!(self, Fate::Trapped)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrappingReport {
    pub forward: Fate,
    pub backward: Fate,
}

/// Steps after escape over which `xi_hat . x_hat` must not decrease.
pub const ESCAPE_CONFIRM_STEPS: usize = 10;

/// Forward and backward fate of `q0` under the flow of `|xi|_g^2` on the
/// perturbed plane. The backward flow is the forward flow from `(x, -xi)`.
pub fn classify_trapping(model: &ManifoldModel, q0: &PhasePoint, t_max: f64, r_escape: f64) -> Result<TrappingReport> {
    let bump = match model {
        ManifoldModel::PerturbedPlane(b) => b,
        _ => return Err(Error::Unsupported("trapping classification needs the perturbed plane".into())),
    };
    if r_escape < 2.0 * bump.radius || r_escape >= bump.box_half_width {
        return Err(Error::Config(format!("escape radius {r_escape} must be in [{}, {})", 2.0 * bump.radius, bump.box_half_width)));
    }
    let sym = MetricSymbol::squared(model);
    let forward = escape_fate(&sym, bump.center, q0, t_max, r_escape)?;
    let back = PhasePoint::new(q0.x.clone(), q0.xi.iter().map(|v| -v).collect());
    let backward = escape_fate(&sym, bump.center, &back, t_max, r_escape)?;
    Ok(TrappingReport { forward, backward })
}

fn outgoing(c: [f64; 2], y: &[f64]) -> (f64, f64) {
    let d = [y[0] - c[0], y[1] - c[1]];
    let r = d[0].hypot(d[1]);
    let k = y[2].hypot(y[3]);
    (r, (d[0] * y[2] + d[1] * y[3]) / (r * k))
}

fn escape_fate(sym: &MetricSymbol, c: [f64; 2], q0: &PhasePoint, t_max: f64, r_escape: f64) -> Result<Fate> {
    let rhs = |y: &[f64]| -> Result<Vec<f64>> {
        let (dx, dxi) = hamilton_field(sym, &PhasePoint::from_state(y, 2))?;
        Ok(dx.into_iter().chain(dxi).collect())
    };
    let mut st = Stepper::new(&rhs, q0.to_state(), t_max, StepControl::default())?;
    while st.advance()? {
        let (r, cosang) = outgoing(c, &st.y);
        if r > r_escape && cosang > 0.0 {
            let time = st.s;
            let mut prev = cosang;
            for _ in 0..ESCAPE_CONFIRM_STEPS {
                st.t_end = st.s + 1.0;
                st.advance()?;
                let (_, ca) = outgoing(c, &st.y);
                if ca < prev - 1e-12 {
                    return Err(Error::Inconclusive(format!("outgoing angle decreased after escape at s = {time}")));
                }
                prev = ca;
            }
            return Ok(Fate::Escaped { time });
        }
    }
    Ok(Fate::Trapped)
}
