//! Short-time geometric optics for the half-wave group on the conformally
//! perturbed plane `g = e(x) I`, where `Delta_g = -e^{-1} (d_1^2 + d_2^2)`.
//!
//! The phase `phi(t, x, eta)` solves `d_t phi = -|d_x phi|_g` with
//! `phi(0) = x.eta`; it is built by flowing out rays of `|xi|_g` and
//! inverting the ray map by Newton. The amplitudes `a_0` and `a_{-1}` solve
//! the transport equations obtained from `(d_t^2 + Delta_g)(a e^{i phi})`,
//! integrated along the same rays. Everything is tabulated for unit
//! directions and extended by homogeneity.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ManifoldModel, PlaneBump};
use crate::schrodinger::{fft_nd, signed_index, GridField};

/// Smallest ray-map Jacobian accepted before the flowout is declared caustic.
pub const MIN_JACOBIAN: f64 = 0.5;
/// Newton tolerance on the ray endpoint.
pub const NEWTON_TOL: f64 = 1e-10;
/// Newton iteration cap.
pub const NEWTON_MAX_ITER: usize = 12;
/// Time levels kept on each side of `[0, t_max]` for centered differences.
pub const GHOST_LEVELS: usize = 2;
/// RK4 substeps per time level.
const SUBSTEPS: usize = 8;

fn bump_of(model: &ManifoldModel) -> Result<PlaneBump> {
    match model {
        ManifoldModel::PerturbedPlane(b) => {
            model.validate()?;
            Ok(*b)
        }
        _ => Err(Error::Unsupported("the parametrix is built on the perturbed plane only".into())),
    }
}

/// Ray state with the variational matrices `J = dx/dy` and `K = dxi/dy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayState {
    pub x: [f64; 2],
    pub xi: [f64; 2],
    pub jac: [[f64; 2]; 2],
    pub kjac: [[f64; 2]; 2],
}

impl RayState {
    /// Ray leaving `y` with covector `eta` and `J = I`, `K = 0`.
    pub fn launch(y: [f64; 2], eta: [f64; 2]) -> Self {
        Self { x: y, xi: eta, jac: [[1.0, 0.0], [0.0, 1.0]], kjac: [[0.0; 2]; 2] }
    }

    pub fn jacobian_det(&self) -> f64 {
        self.jac[0][0] * self.jac[1][1] - self.jac[0][1] * self.jac[1][0]
    }

    fn axpy(&self, h: f64, d: &RayState) -> RayState {
        let mut out = *self;
        for i in 0..2 {
            out.x[i] += h * d.x[i];
            out.xi[i] += h * d.xi[i];
            for j in 0..2 {
                out.jac[i][j] += h * d.jac[i][j];
                out.kjac[i][j] += h * d.kjac[i][j];
            }
        }
        out
    }
}

/// Hamilton equations of `H = |xi| e^{-1/2}` and, when `variational` is set,
/// their linearization.
fn ray_rhs(bump: &PlaneBump, s: &RayState, variational: bool) -> RayState {
    let jet = bump.conformal_jet(s.x);
    let e = jet.e;
    let norm = (s.xi[0] * s.xi[0] + s.xi[1] * s.xi[1]).sqrt();
    let r = e.powf(-0.5);
    let e32 = e.powf(-1.5);
    let u = [s.xi[0] / norm, s.xi[1] / norm];
    let mut d = RayState {
        x: [r * u[0], r * u[1]],
        xi: [0.5 * norm * e32 * jet.de[0], 0.5 * norm * e32 * jet.de[1]],
        jac: [[0.0; 2]; 2],
        kjac: [[0.0; 2]; 2],
    };
    if !variational {
        return d;
    }
    let grad_r = [-0.5 * e32 * jet.de[0], -0.5 * e32 * jet.de[1]];
    let e52 = e.powf(-2.5);
    let mut a = [[0.0; 2]; 2];
    let mut b = [[0.0; 2]; 2];
    let mut c = [[0.0; 2]; 2];
    let mut dd = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let delta = if i == j { 1.0 } else { 0.0 };
            a[i][j] = u[i] * grad_r[j];
            b[i][j] = r * (delta - u[i] * u[j]) / norm;
            c[i][j] = 0.5 * norm * (e32 * jet.d2e[i][j] - 1.5 * e52 * jet.de[i] * jet.de[j]);
            dd[i][j] = 0.5 * e32 * jet.de[i] * u[j];
        }
    }
    for i in 0..2 {
        for j in 0..2 {
            d.jac[i][j] = (0..2).map(|m| a[i][m] * s.jac[m][j] + b[i][m] * s.kjac[m][j]).sum();
            d.kjac[i][j] = (0..2).map(|m| c[i][m] * s.jac[m][j] + dd[i][m] * s.kjac[m][j]).sum();
        }
    }
    d
}

/// Classical RK4 over `[0, t]` with `steps` equal steps.
fn rk4(bump: &PlaneBump, mut s: RayState, t: f64, steps: usize, variational: bool) -> RayState {
    if steps == 0 || t == 0.0 {
        return s;
    }
    let h = t / steps as f64;
    for _ in 0..steps {
        let k1 = ray_rhs(bump, &s, variational);
        let k2 = ray_rhs(bump, &s.axpy(0.5 * h, &k1), variational);
        let k3 = ray_rhs(bump, &s.axpy(0.5 * h, &k2), variational);
        let k4 = ray_rhs(bump, &s.axpy(h, &k3), variational);
        for (k, w) in [(&k1, 1.0), (&k2, 2.0), (&k3, 2.0), (&k4, 1.0)] {
            s = s.axpy(h * w / 6.0, k);
        }
    }
    s
}

/// `box phi = d_t^2 phi + Delta_g phi` at the head of a ray launched from a
/// point with conformal factor `ey` and gradient `dey`, from the ray's
/// variational data: `Hess phi = K J^{-1}` and
/// `grad d_t phi = J^{-T} grad e(y) / (2 e(y)^{3/2})`.
fn ray_box_phi(bump: &PlaneBump, s: &RayState, ey: f64, dey: [f64; 2]) -> f64 {
    let e = bump.conformal_jet(s.x).e;
    let j = s.jac;
    let det = s.jacobian_det();
    let inv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
    let c = 0.5 * ey.powf(-1.5);
    let grad_dt = [c * (inv[0][0] * dey[0] + inv[1][0] * dey[1]), c * (inv[0][1] * dey[0] + inv[1][1] * dey[1])];
    let trace: f64 = (0..2).map(|a| (0..2).map(|m| s.kjac[a][m] * inv[m][a]).sum::<f64>()).sum();
    let norm = s.xi[0].hypot(s.xi[1]);
    let dtt = -(s.xi[0] * grad_dt[0] + s.xi[1] * grad_dt[1]) / (e.sqrt() * norm);
    dtt - trace / e
}

/// RK4 for a ray together with `log a_0`, whose rate is
/// `box phi / (2 |d phi|_g)`.
fn rk4_log_amplitude(bump: &PlaneBump, y: [f64; 2], eta: [f64; 2], t: f64, steps: usize) -> (RayState, f64) {
    let jet = bump.conformal_jet(y);
    let (ey, dey) = (jet.e, jet.de);
    let speed = 2.0 * ey.powf(-0.5);
    let rate = |s: &RayState| ray_box_phi(bump, s, ey, dey) / speed;
    let mut s = RayState::launch(y, eta);
    let mut log_a = 0.0;
    if t == 0.0 {
        return (s, log_a);
    }
    let h = t / steps as f64;
    for _ in 0..steps {
        let k1 = ray_rhs(bump, &s, true);
        let s2 = s.axpy(0.5 * h, &k1);
        let k2 = ray_rhs(bump, &s2, true);
        let s3 = s.axpy(0.5 * h, &k2);
        let k3 = ray_rhs(bump, &s3, true);
        let s4 = s.axpy(h, &k3);
        let k4 = ray_rhs(bump, &s4, true);
        log_a += h / 6.0 * (rate(&s) + 2.0 * rate(&s2) + 2.0 * rate(&s3) + rate(&s4));
        for (k, w) in [(&k1, 1.0), (&k2, 2.0), (&k3, 2.0), (&k4, 1.0)] {
            s = s.axpy(h * w / 6.0, k);
        }
    }
    (s, log_a)
}

/// Number of RK4 steps used to cover a time span `t` at level spacing `dt`.
fn step_count(t: f64, dt: f64) -> usize {
    ((t.abs() / dt) * SUBSTEPS as f64 - 1e-9).ceil().max(1.0) as usize
}

/// Ray positions from `y` with covector `eta` at each of `times`
/// (any order, any sign), integrated with RK4 steps of about `dt / 16`.
pub fn trace_ray(model: &ManifoldModel, y: [f64; 2], eta: [f64; 2], times: &[f64], dt: f64) -> Result<Vec<RayState>> {
    let bump = bump_of(model)?;
    Ok(times.iter().map(|&t| rk4(&bump, RayState::launch(y, eta), t, step_count(t, dt), true)).collect())
}

/// True when the straight segment from `x - t eta` to `x` meets the support
/// of the bump, so the ray arriving at `x` may be bent.
fn influenced(bump: &PlaneBump, x: [f64; 2], t: f64, eta: [f64; 2]) -> bool {
    let p = [x[0] - bump.center[0], x[1] - bump.center[1]];
    let q = [p[0] - t * eta[0], p[1] - t * eta[1]];
    let d = [p[0] - q[0], p[1] - q[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let s = if len2 > 0.0 { (-(q[0] * d[0] + q[1] * d[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let c = [q[0] + s * d[0], q[1] + s * d[1]];
    (c[0] * c[0] + c[1] * c[1]).sqrt() < bump.radius * (1.0 + 1e-12)
}

/// Phase data at one point, from the ray that reaches it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhaseSample {
    pub phi: f64,
    pub grad: [f64; 2],
    pub dt_phi: f64,
    /// Launch point `y` of the ray.
    pub source: [f64; 2],
    /// `det dx/dy` of the ray map.
    pub jacobian: f64,
    /// False when the ray is a straight line that never meets the bump.
    pub bent: bool,
}

fn caustic(t: f64, eta: [f64; 2], reason: String) -> Error {
    Error::CausticReached { t, angle: eta[1].atan2(eta[0]), reason }
}

/// Solves `x(t; y, eta) = x` for `y` by Newton from `guess`.
fn invert_ray_map(bump: &PlaneBump, x: [f64; 2], t: f64, eta: [f64; 2], guess: [f64; 2], dt: f64) -> Result<PhaseSample> {
    if !influenced(bump, x, t, eta) {
        let y = [x[0] - t * eta[0], x[1] - t * eta[1]];
        return Ok(PhaseSample { phi: y[0] * eta[0] + y[1] * eta[1], grad: eta, dt_phi: -1.0, source: y, jacobian: 1.0, bent: false });
    }
    let steps = step_count(t, dt);
    let mut y = guess;
    for _ in 0..=NEWTON_MAX_ITER {
        let s = rk4(bump, RayState::launch(y, eta), t, steps, true);
        let r = [s.x[0] - x[0], s.x[1] - x[1]];
        let det = s.jacobian_det();
        if !det.is_finite() || det < MIN_JACOBIAN {
            return Err(caustic(t, eta, format!("ray-map Jacobian {det:.4} below {MIN_JACOBIAN}")));
        }
        if r[0].hypot(r[1]) < NEWTON_TOL {
            let e0 = bump.conformal_jet(y).e;
            return Ok(PhaseSample {
                phi: y[0] * eta[0] + y[1] * eta[1],
                grad: s.xi,
                dt_phi: -e0.powf(-0.5),
                source: y,
                jacobian: det,
                bent: true,
            });
        }
        let j = s.jac;
        y[0] -= (j[1][1] * r[0] - j[0][1] * r[1]) / det;
        y[1] -= (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
    }
    Err(caustic(t, eta, format!("Newton did not converge at x = ({:.4}, {:.4})", x[0], x[1])))
}

/// `a_0(t, x, eta)` at one point: the ray reaching `x` is found by Newton
/// and `log a_0` is integrated along it.
pub fn amplitude_at(model: &ManifoldModel, t: f64, x: [f64; 2], eta: [f64; 2], dt: f64) -> Result<f64> {
    let bump = bump_of(model)?;
    let s = invert_ray_map(&bump, x, t, eta, [x[0] - t * eta[0], x[1] - t * eta[1]], dt)?;
    if !s.bent {
        return Ok(1.0);
    }
    Ok(rk4_log_amplitude(&bump, s.source, eta, t, step_count(t, dt)).1.exp())
}

/// Phase, gradient and time derivative at `(t, x)` for the unit direction
/// `eta`, with the ray step tied to `dt`.
pub fn phase_at(model: &ManifoldModel, t: f64, x: [f64; 2], eta: [f64; 2], dt: f64) -> Result<PhaseSample> {
    let bump = bump_of(model)?;
    invert_ray_map(&bump, x, t, eta, [x[0] - t * eta[0], x[1] - t * eta[1]], dt)
}

/// Discretization of the tables: time levels `k dt` for `k` in
/// `-GHOST_LEVELS ..= t_max/dt + GHOST_LEVELS`, a square node patch of
/// spacing `h` centered on the bump, and `directions` equispaced unit
/// covectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableGrid {
    pub t_max: f64,
    pub dt: f64,
    pub h: f64,
    pub half_width: f64,
    pub directions: usize,
}

impl TableGrid {
    /// Grid whose patch contains every point a bent ray can reach by
    /// `t_max`, with room for the interpolation and difference stencils.
    pub fn around(bump: &PlaneBump, t_max: f64, dt: f64, h: f64, directions: usize) -> Self {
        let reach = bump.radius + t_max + GHOST_LEVELS as f64 * dt + 4.0 * h;
        Self { t_max, dt, h, half_width: (reach / h).ceil() * h, directions }
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.t_max / self.dt;
        if !(self.dt > 0.0 && self.h > 0.0 && self.t_max > 0.0 && self.half_width > 4.0 * self.h) {
            return Err(Error::Config("table steps and extents must be positive".into()));
        }
        if (steps - steps.round()).abs() > 1e-9 || steps.round() < 3.0 {
            return Err(Error::Config(format!("t_max / dt = {steps} must be an integer of at least 3")));
        }
        if self.directions < 8 {
            return Err(Error::Config("at least 8 directions are needed".into()));
        }
        Ok(())
    }

    /// Number of levels from `0` to `t_max`, minus one.
    pub fn steps(&self) -> usize {
        (self.t_max / self.dt).round() as usize
    }

    pub fn levels(&self) -> usize {
        self.steps() + 1 + 2 * GHOST_LEVELS
    }

    pub fn nodes(&self) -> usize {
        (2.0 * self.half_width / self.h).round() as usize + 1
    }
}

/// Phase tables over `(direction, level, x_1 node, x_2 node)`, row-major in
/// that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTable {
    pub bump: PlaneBump,
    pub grid: TableGrid,
    pub t_grid: Vec<f64>,
    /// Coordinates of node `(0, 0)`.
    pub origin: [f64; 2],
    /// Nodes per axis.
    pub n: usize,
    /// Direction angles; the tabulated covector is `(cos, sin)`.
    pub angles: Vec<f64>,
    pub phi: Vec<f64>,
    pub grad_x_phi: Vec<[f64; 2]>,
    pub dt_phi: Vec<f64>,
    /// `det dx/dy` of the ray map at each node.
    pub jacobian: Vec<f64>,
    /// Launch point `y` of the ray reaching each node.
    pub source: Vec<[f64; 2]>,
}

impl PhaseTable {
    pub fn index(&self, d: usize, l: usize, i: usize, j: usize) -> usize {
        ((d * self.t_grid.len() + l) * self.n + i) * self.n + j
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + i as f64 * self.grid.h, self.origin[1] + j as f64 * self.grid.h]
    }

    pub fn direction(&self, d: usize) -> [f64; 2] {
        [self.angles[d].cos(), self.angles[d].sin()]
    }

    /// Level index of time `t`, if `t` is a tabulated level.
    pub fn level_of(&self, t: f64) -> Option<usize> {
        self.t_grid.iter().position(|&s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
    }

    /// Level index of `t = 0`.
    pub fn zero_level(&self) -> usize {
        GHOST_LEVELS
    }

    fn bent(&self, d: usize, l: usize, i: usize, j: usize) -> bool {
        influenced(&self.bump, self.node(i, j), self.t_grid[l], self.direction(d))
    }

    pub fn min_jacobian(&self) -> f64 {
        self.jacobian.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest `|d_t phi + |d_x phi|_g|` over the nodes, from the cached
    /// derivatives.
    pub fn cached_eikonal_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for d in 0..self.angles.len() {
            for l in 0..self.t_grid.len() {
                for i in 0..self.n {
                    for j in 0..self.n {
                        let k = self.index(d, l, i, j);
                        let e = self.bump.conformal_jet(self.node(i, j)).e;
                        let g = self.grad_x_phi[k];
                        worst = worst.max((self.dt_phi[k] + g[0].hypot(g[1]) / e.sqrt()).abs());
                    }
                }
            }
        }
        worst
    }

    /// Largest `|(D_t phi)^2 - |D_x phi|_g^2|` with second-order centered
    /// differences of the tabulated phase alone, over nodes with
    /// `0 <= t <= t_max` away from the patch edge.
    pub fn difference_eikonal_residual(&self) -> f64 {
        let (h, dt) = (self.grid.h, self.grid.dt);
        let mut worst: f64 = 0.0;
        for d in 0..self.angles.len() {
            for l in GHOST_LEVELS..self.t_grid.len() - GHOST_LEVELS {
                for i in 1..self.n - 1 {
                    for j in 1..self.n - 1 {
                        let e = self.bump.conformal_jet(self.node(i, j)).e;
                        let pt = (self.phi[self.index(d, l + 1, i, j)] - self.phi[self.index(d, l - 1, i, j)]) / (2.0 * dt);
                        let px = (self.phi[self.index(d, l, i + 1, j)] - self.phi[self.index(d, l, i - 1, j)]) / (2.0 * h);
                        let py = (self.phi[self.index(d, l, i, j + 1)] - self.phi[self.index(d, l, i, j - 1)]) / (2.0 * h);
                        worst = worst.max((pt * pt - (px * px + py * py) / e).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Tabulates the phase for every direction and level by inverting the ray
/// map at each node.
///
/// Nodes whose arrival segment misses the bump take the exact straight-ray
/// values; the others are found by Newton, starting from the neighbouring
/// level. A Jacobian below [`MIN_JACOBIAN`] or a Newton failure raises
/// `CausticReached`.
pub fn solve_eikonal(model: &ManifoldModel, grid: &TableGrid) -> Result<PhaseTable> {
    let bump = bump_of(model)?;
    grid.validate()?;
    let n = grid.nodes();
    let levels = grid.levels();
    let t_grid: Vec<f64> = (0..levels).map(|l| (l as f64 - GHOST_LEVELS as f64) * grid.dt).collect();
    let angles: Vec<f64> = (0..grid.directions).map(|d| 2.0 * PI * d as f64 / grid.directions as f64).collect();
    let total = grid.directions * levels * n * n;
    let mut table = PhaseTable {
        bump,
        grid: *grid,
        t_grid,
        origin: [bump.center[0] - grid.half_width, bump.center[1] - grid.half_width],
        n,
        angles,
        phi: vec![0.0; total],
        grad_x_phi: vec![[0.0; 2]; total],
        dt_phi: vec![0.0; total],
        jacobian: vec![0.0; total],
        source: vec![[0.0; 2]; total],
    };
    let zero = GHOST_LEVELS;
    let order: Vec<usize> = (zero..levels).chain((0..zero).rev()).collect();
    let mut sources = vec![[0.0; 2]; n * n];
    for d in 0..grid.directions {
        let eta = table.direction(d);
        for &l in &order {
            let t = table.t_grid[l];
            for i in 0..n {
                for j in 0..n {
                    let x = table.node(i, j);
                    let guess = if l == zero || l + 1 == zero || l == zero + 1 {
                        [x[0] - t * eta[0], x[1] - t * eta[1]]
                    } else {
                        sources[i * n + j]
                    };
                    let s = invert_ray_map(&bump, x, t, eta, guess, grid.dt)?;
                    sources[i * n + j] = s.source;
                    let k = table.index(d, l, i, j);
                    table.phi[k] = s.phi;
                    table.grad_x_phi[k] = s.grad;
                    table.dt_phi[k] = s.dt_phi;
                    table.jacobian[k] = s.jacobian;
                    table.source[k] = s.source;
                }
            }
        }
    }
    Ok(table)
}

/// Lagrange weights on nodes `-1, 0, 1, 2` at fractional offset `s`.
fn cubic_weights(s: f64) -> [f64; 4] {
    [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ]
}

/// Bicubic interpolation of one `n x n` level slice at `p`.
fn interp_level(slice: &[f64], origin: [f64; 2], h: f64, n: usize, p: [f64; 2]) -> f64 {
    let u = (p[0] - origin[0]) / h;
    let v = (p[1] - origin[1]) / h;
    let i0 = (u.floor() as isize).clamp(1, n as isize - 3);
    let j0 = (v.floor() as isize).clamp(1, n as isize - 3);
    let wu = cubic_weights(u - i0 as f64);
    let wv = cubic_weights(v - j0 as f64);
    let mut acc = 0.0;
    for (a, wa) in wu.iter().enumerate() {
        let row = (i0 + a as isize - 1) as usize * n;
        for (b, wb) in wv.iter().enumerate() {
            acc += wa * wb * slice[row + (j0 + b as isize - 1) as usize];
        }
    }
    acc
}

/// Weights integrating the cubic through four unit-spaced nodes over the
/// interval `[pos, pos + 1]`.
fn interval_weights(pos: usize) -> [f64; 4] {
    match pos {
        0 => [9.0 / 24.0, 19.0 / 24.0, -5.0 / 24.0, 1.0 / 24.0],
        1 => [-1.0 / 24.0, 13.0 / 24.0, 13.0 / 24.0, -1.0 / 24.0],
        _ => [1.0 / 24.0, -5.0 / 24.0, 19.0 / 24.0, 9.0 / 24.0],
    }
}

/// Fourth-order centered second difference.
fn d2(fm2: f64, fm1: f64, f0: f64, fp1: f64, fp2: f64, h: f64) -> f64 {
    (-fm2 + 16.0 * fm1 - 30.0 * f0 + 16.0 * fp1 - fp2) / (12.0 * h * h)
}

/// Amplitude tables on the nodes of a [`PhaseTable`].
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeTable {
    /// Orders present: `[0]` or `[0, -1]`.
    pub orders: Vec<i32>,
    pub a0: Vec<f64>,
    /// Order `-1` amplitude for a unit covector; empty for order `0` only.
    pub am1: Vec<Complex64>,
    /// `box phi` at each node, zero where it was not needed.
    pub box_phi: Vec<f64>,
    /// `box a_0` at each node of `[0, t_max]`; empty for order `0` only.
    pub box_a0: Vec<f64>,
}

struct SlStep<'a> {
    table: &'a PhaseTable,
    d: usize,
    lo: usize,
    hi: usize,
}

impl SlStep<'_> {
    /// Transports `field` from level `from` to level `to` along the rays
    /// through the nodes of `to`: `value(to) = combine(value(from) at the
    /// ray foot, integral of the source over [t_from, t_to])`.
    fn advance(
        &self,
        from: usize,
        to: usize,
        field: &mut [f64],
        source: &dyn Fn(usize, [f64; 2], f64) -> f64,
        combine: &dyn Fn(f64, f64) -> f64,
        rest: f64,
    ) {
        let tb = self.table;
        let (n, h, dt) = (tb.n, tb.grid.h, tb.grid.dt);
        let bump = &tb.bump;
        let nn = n * n;
        let a = from.min(to);
        let first = a.saturating_sub(1).max(self.lo).min(self.hi - 3);
        let pos = a - first;
        let w = interval_weights(pos);
        let sign = if to > from { 1.0 } else { -1.0 };
        let base_to = (self.d * tb.t_grid.len() + to) * nn;
        let base_from = (self.d * tb.t_grid.len() + from) * nn;
        for i in 0..n {
            for j in 0..n {
                let k = base_to + i * n + j;
                if !tb.bent(self.d, to, i, j) {
                    field[k] = rest;
                    continue;
                }
                let x = tb.node(i, j);
                let start = RayState::launch(x, tb.grad_x_phi[k]);
                let norm = -tb.dt_phi[k];
                let mut integral = 0.0;
                let mut foot = x;
                for (m, wm) in w.iter().enumerate() {
                    let lev = first + m;
                    let p = if lev == to {
                        x
                    } else {
                        let span = tb.t_grid[lev] - tb.t_grid[to];
                        rk4(bump, start, span, step_count(span, dt), false).x
                    };
                    if lev == from {
                        foot = p;
                    }
                    integral += wm * source(lev, p, norm);
                }
                let prev = interp_level(&field[base_from..base_from + nn], tb.origin, h, n, foot);
                field[k] = combine(prev, sign * integral * dt);
            }
        }
    }
}

/// Solves the transport equations along the rays of `phase`.
///
/// Order `0` gives `a_0` with `a_0(0) = 1` from
/// `2 d_t phi d_t a_0 - 2 <d phi, d a_0>_g + (box phi) a_0 = 0`; order `-1`
/// also gives `a_{-1}` with `a_{-1}(0) = 0` from the same operator with
/// source `i box a_0`. `box phi` comes from the variational data of each
/// ray; `box a_0` is a centered difference on the nodes. On the flat plane the result must be `a_0 = 1`, `a_{-1} = 0`
/// and `box phi = 0`, otherwise `SanityGateFailed`.
pub fn solve_transport(model: &ManifoldModel, phase: &PhaseTable, order: i32) -> Result<AmplitudeTable> {
    let bump = bump_of(model)?;
    if bump != phase.bump {
        return Err(Error::Config("phase table was built for a different model".into()));
    }
    if order != 0 && order != -1 {
        return Err(Error::Config(format!("transport order {order} not supported; use 0 or -1")));
    }
    let (n, h) = (phase.n, phase.grid.h);
    let nn = n * n;
    let levels = phase.t_grid.len();
    let zero = phase.zero_level();
    let top = zero + phase.grid.steps();
    let total = phase.phi.len();
    let mut box_phi = vec![0.0; total];
    let mut a0 = vec![1.0; total];
    let mut bt = vec![0.0; if order == -1 { total } else { 0 }];
    let mut box_a0_all = vec![0.0; if order == -1 { total } else { 0 }];
    let inv_e: Vec<f64> = (0..nn).map(|k| 1.0 / bump.conformal_jet(phase.node(k / n, k % n)).e).collect();
    for d in 0..phase.angles.len() {
        let eta = phase.direction(d);
        for l in 0..levels {
            let t = phase.t_grid[l];
            let base = (d * levels + l) * nn;
            for i in 0..n {
                for j in 0..n {
                    if !phase.bent(d, l, i, j) {
                        continue;
                    }
                    let k = base + i * n + j;
                    let y = phase.source[k];
                    let (s, log_a) = rk4_log_amplitude(&bump, y, eta, t, step_count(t, phase.grid.dt));
                    let jet = bump.conformal_jet(y);
                    box_phi[k] = ray_box_phi(&bump, &s, jet.e, jet.de);
                    a0[k] = log_a.exp();
                }
            }
        }
        if order == -1 {
            let mut box_a0 = vec![0.0; levels * nn];
            for l in zero..=top {
                for i in 2..n - 2 {
                    for j in 2..n - 2 {
                        if !phase.bent(d, l, i, j) {
                            continue;
                        }
                        let at = |dl: isize, di: isize, dj: isize| {
                            ((d * levels) as isize + l as isize + dl) as usize * nn
                                + (i as isize + di) as usize * n
                                + (j as isize + dj) as usize
                        };
                        let tt = d2(a0[at(-2, 0, 0)], a0[at(-1, 0, 0)], a0[at(0, 0, 0)], a0[at(1, 0, 0)], a0[at(2, 0, 0)], phase.grid.dt);
                        let xx = d2(a0[at(0, -2, 0)], a0[at(0, -1, 0)], a0[at(0, 0, 0)], a0[at(0, 1, 0)], a0[at(0, 2, 0)], h);
                        let yy = d2(a0[at(0, 0, -2)], a0[at(0, 0, -1)], a0[at(0, 0, 0)], a0[at(0, 0, 1)], a0[at(0, 0, 2)], h);
                        box_a0[l * nn + i * n + j] = tt - inv_e[i * n + j] * (xx + yy);
                    }
                }
            }
            let sl = SlStep { table: phase, d, lo: zero, hi: top };
            let a0r = &a0;
            let r = |lev: usize, p: [f64; 2], norm: f64| {
                let amp = interp_level(&a0r[(d * levels + lev) * nn..(d * levels + lev + 1) * nn], phase.origin, h, n, p);
                -interp_level(&box_a0[lev * nn..(lev + 1) * nn], phase.origin, h, n, p) / (2.0 * norm * amp)
            };
            box_a0_all[d * levels * nn..(d + 1) * levels * nn].copy_from_slice(&box_a0);
            let add = |prev: f64, integral: f64| prev + integral;
            for l in zero + 1..=top {
                sl.advance(l - 1, l, &mut bt, &r, &add, 0.0);
            }
        }
    }
    let am1: Vec<Complex64> = bt.iter().zip(&a0).map(|(&b, &a)| Complex64::new(0.0, a * b)).collect();
    let amps = AmplitudeTable { orders: if order == -1 { vec![0, -1] } else { vec![0] }, a0, am1, box_phi, box_a0: box_a0_all };
    if bump.epsilon * bump.amplitude == 0.0 {
        euclidean_gate(&amps)?;
    }
    Ok(amps)
}

/// Flat-plane identities every transport solve must reproduce.
fn euclidean_gate(amps: &AmplitudeTable) -> Result<()> {
    const GATE: f64 = 1e-9;
    let box_max = amps.box_phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let a0_dev = amps.a0.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    let am1_max = amps.am1.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    if box_max > GATE || a0_dev > GATE || am1_max > GATE {
        return Err(Error::SanityGateFailed(format!(
            "flat plane gave |box phi| = {box_max:e}, |a_0 - 1| = {a0_dev:e}, |a_-1| = {am1_max:e}"
        )));
    }
    Ok(())
}

/// Amplitude terms used when applying the parametrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmplitudeOrder {
    /// `a_0` only.
    Leading,
    /// `a_0 + a_{-1}`.
    Corrected,
}

/// Direction interpolation data for one Fourier mode.
struct Mode {
    k: [f64; 2],
    norm: f64,
    c: Complex64,
    dirs: [usize; 4],
    w: [f64; 4],
}

/// `u(t, x) = sum_k c_k a(t, x, k) e^{i phi(t, x, k)}` for
/// `f = sum_k c_k e^{i k.x}`, with the phase and amplitudes extended from
/// unit covectors by homogeneity and interpolated cubically in angle and
/// bicubically in `x`.
///
/// `t` must be a tabulated level in `[0, t_max]`. All of the energy of `f`
/// must lie in `band[0] <= |k| <= band[1]`, otherwise `BandOutOfRange`.
/// Samples farther than `radius + t` from the bump see only straight rays
/// and are taken from the exact flat propagator.
pub fn apply_parametrix(
    phase: &PhaseTable,
    amps: &AmplitudeTable,
    f: &GridField,
    t: f64,
    band: [f64; 2],
    order: AmplitudeOrder,
) -> Result<GridField> {
    if f.dim() != 2 {
        return Err(Error::Config("the parametrix acts on planar grids".into()));
    }
    let zero = phase.zero_level();
    let level = phase
        .level_of(t)
        .filter(|&l| l >= zero && l <= zero + phase.grid.steps())
        .ok_or_else(|| Error::Config(format!("t = {t} is not a tabulated level in [0, {}]", phase.grid.t_max)))?;
    if order == AmplitudeOrder::Corrected && !amps.orders.contains(&-1) {
        return Err(Error::Config("order -1 amplitude was not computed".into()));
    }
    if !(band[0] > 0.0 && band[1] >= band[0]) {
        return Err(Error::BandOutOfRange(format!("band {band:?} must satisfy 0 < lo <= hi")));
    }
    let spec = f.to_frequency();
    let ks = spec.wave_vector_table();
    let ndir = phase.angles.len();
    let dtheta = 2.0 * PI / ndir as f64;
    let (mut total, mut outside) = (0.0, 0.0);
    let mut modes = Vec::new();
    for (c, k) in spec.values.iter().zip(ks.chunks(2)) {
        let norm = k[0].hypot(k[1]);
        let mass = c.norm_sqr();
        total += mass;
        if norm < band[0] * (1.0 - 1e-12) || norm > band[1] * (1.0 + 1e-12) {
            outside += mass;
            continue;
        }
        if mass == 0.0 {
            continue;
        }
        let u = k[1].atan2(k[0]).rem_euclid(2.0 * PI) / dtheta;
        let i0 = u.floor();
        let w = cubic_weights(u - i0);
        let dirs = std::array::from_fn(|m| (i0 as isize + m as isize - 1).rem_euclid(ndir as isize) as usize);
        modes.push(Mode { k: [k[0], k[1]], norm, c: *c, dirs, w });
    }
    if outside > 1e-24 * total.max(f64::MIN_POSITIVE) {
        return Err(Error::BandOutOfRange(format!("fraction {:e} of the energy lies outside {band:?}", outside / total)));
    }
    let bump = &phase.bump;
    let (n, h) = (phase.n, phase.grid.h);
    let nn = n * n;
    let levels = phase.t_grid.len();
    let mut delta = vec![0.0; ndir * nn];
    for d in 0..ndir {
        let eta = phase.direction(d);
        let base = (d * levels + level) * nn;
        for i in 0..n {
            for j in 0..n {
                let x = phase.node(i, j);
                delta[d * nn + i * n + j] = phase.phi[base + i * n + j] - (x[0] * eta[0] + x[1] * eta[1] - t);
            }
        }
    }
    let mut am1_im = vec![0.0; if order == AmplitudeOrder::Corrected { ndir * nn } else { 0 }];
    for d in 0..ndir {
        if order == AmplitudeOrder::Corrected {
            let base = (d * levels + level) * nn;
            for m in 0..nn {
                am1_im[d * nn + m] = amps.am1[base + m].im;
            }
        }
    }
    let mut out = crate::wavefront::halfwave(f, t);
    let positions = f.position_table();
    let mut dd = vec![0.0; ndir];
    let mut aa = vec![0.0; ndir];
    let mut bb = vec![0.0; ndir];
    for (idx, x) in positions.chunks(2).enumerate() {
        let r = (x[0] - bump.center[0]).hypot(x[1] - bump.center[1]);
        if r >= bump.radius + t {
            continue;
        }
        let p = [x[0], x[1]];
        for d in 0..ndir {
            dd[d] = interp_level(&delta[d * nn..(d + 1) * nn], phase.origin, h, n, p);
            let base = (d * levels + level) * nn;
            aa[d] = interp_level(&amps.a0[base..base + nn], phase.origin, h, n, p);
            if order == AmplitudeOrder::Corrected {
                bb[d] = interp_level(&am1_im[d * nn..(d + 1) * nn], phase.origin, h, n, p);
            }
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for m in &modes {
            let (mut dl, mut a, mut b) = (0.0, 0.0, 0.0);
            for q in 0..4 {
                dl += m.w[q] * dd[m.dirs[q]];
                a += m.w[q] * aa[m.dirs[q]];
                b += m.w[q] * bb[m.dirs[q]];
            }
            let theta = m.k[0] * p[0] + m.k[1] * p[1] - t * m.norm + m.norm * dl;
            acc += m.c * Complex64::from_polar(1.0, theta) * Complex64::new(a, b / m.norm);
        }
        out.values[idx] = acc;
    }
    Ok(out)
}

/// Result of the spectral reference propagator.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub field: GridField,
    pub krylov_dim: usize,
}

/// `A v = e^{-1/2} (-lap) (e^{-1/2} v)` with the spectral Laplacian.
struct SymmetrizedLaplacian {
    dims: Vec<usize>,
    scale: Vec<f64>,
    k2: Vec<f64>,
}

impl SymmetrizedLaplacian {
    fn apply(&self, v: &[Complex64], out: &mut Vec<Complex64>) {
        out.clear();
        out.extend(v.iter().zip(&self.scale).map(|(a, s)| a * s));
        fft_nd(out, &self.dims, false);
        let norm = 1.0 / out.len() as f64;
        for (a, k2) in out.iter_mut().zip(&self.k2) {
            *a *= k2 * norm;
        }
        fft_nd(out, &self.dims, true);
        for (a, s) in out.iter_mut().zip(&self.scale) {
            *a *= s;
        }
    }
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm2(a: &[Complex64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `e^{-i t sqrt(T)} e_1` for the Lanczos tridiagonal matrix.
fn tridiagonal_halfwave(alpha: &[f64], beta: &[f64], t: f64) -> Vec<Complex64> {
    let m = alpha.len();
    let mut tm = nalgebra::DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        tm[(i, i)] = alpha[i];
        if i + 1 < m {
            tm[(i, i + 1)] = beta[i];
            tm[(i + 1, i)] = beta[i];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(tm);
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| {
                    let phase = Complex64::from_polar(1.0, -t * eig.eigenvalues[j].max(0.0).sqrt());
                    phase * eig.eigenvectors[(i, j)] * eig.eigenvectors[(0, j)]
                })
                .sum()
        })
        .collect()
}

/// Reference half-wave solution `e^{-i t sqrt(Delta_g)} f` on the periodic
/// grid of `f`, from `Delta_g = S A S^{-1}` with `S = e^{-1/2}` and a
/// two-pass Lanczos evaluation of `e^{-i t sqrt(A)}`. The Krylov space grows
/// until the trailing coefficients fall below `tol` relative to the data.
pub fn reference_halfwave(model: &ManifoldModel, f: &GridField, t: f64, tol: f64) -> Result<ReferenceSolution> {
    let bump = bump_of(model)?;
    if f.dim() != 2 {
        return Err(Error::Config("the reference propagator acts on planar grids".into()));
    }
    let f = f.to_position();
    let positions = f.position_table();
    let e: Vec<f64> = positions.chunks(2).map(|x| bump.conformal_jet([x[0], x[1]]).e).collect();
    let op = SymmetrizedLaplacian {
        dims: f.dims.clone(),
        scale: e.iter().map(|v| v.powf(-0.5)).collect(),
        k2: f.wave_vector_table().chunks(2).map(|k| k[0] * k[0] + k[1] * k[1]).collect(),
    };
    let v0: Vec<Complex64> = f.values.iter().zip(&e).map(|(a, s)| a * s.sqrt()).collect();
    let beta0 = norm2(&v0);
    let mut out = f.clone();
    if beta0 == 0.0 {
        return Ok(ReferenceSolution { field: out, krylov_dim: 0 });
    }
    let max_dim = 4000;
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut q: Vec<Complex64> = v0.iter().map(|a| a / beta0).collect();
    let mut q_prev = vec![Complex64::new(0.0, 0.0); q.len()];
    let mut w = Vec::with_capacity(q.len());
    let mut coeffs = None;
    let mut next_check = 32;
    while alpha.len() < max_dim {
        op.apply(&q, &mut w);
        if let Some(&b) = beta.last() {
            for (x, p) in w.iter_mut().zip(&q_prev) {
                *x -= p * b;
            }
        }
        let a = dot(&q, &w).re;
        for (x, p) in w.iter_mut().zip(&q) {
            *x -= p * a;
        }
        alpha.push(a);
        let b = norm2(&w);
        let m = alpha.len();
        if m >= next_check || b < 1e-300 {
            next_check = (m + 16).max(m * 6 / 5);
            let z = tridiagonal_halfwave(&alpha, &beta, t);
            if z[m - 1].norm() + z[m - 2].norm() < tol || b < 1e-300 {
                coeffs = Some(z);
                break;
            }
        }
        beta.push(b);
        std::mem::swap(&mut q_prev, &mut q);
        q.clear();
        q.extend(w.iter().map(|x| x / b));
    }
    let z = coeffs.ok_or_else(|| Error::Inconclusive(format!("Krylov evaluation did not converge in {max_dim} steps")))?;
    let mut acc = vec![Complex64::new(0.0, 0.0); v0.len()];
    let mut q: Vec<Complex64> = v0.iter().map(|a| a / beta0).collect();
    let mut q_prev = vec![Complex64::new(0.0, 0.0); q.len()];
    for (j, zj) in z.iter().enumerate() {
        for (s, x) in acc.iter_mut().zip(&q) {
            *s += x * zj;
        }
        if j + 1 == z.len() {
            break;
        }
        op.apply(&q, &mut w);
        if j > 0 {
            for (x, p) in w.iter_mut().zip(&q_prev) {
                *x -= p * beta[j - 1];
            }
        }
        for (x, p) in w.iter_mut().zip(&q) {
            *x -= p * alpha[j];
        }
        std::mem::swap(&mut q_prev, &mut q);
        q.clear();
        q.extend(w.iter().map(|x| x / beta[j]));
    }
    for ((o, a), s) in out.values.iter_mut().zip(&acc).zip(&op.scale) {
        *o = a * s * beta0;
    }
    Ok(ReferenceSolution { field: out, krylov_dim: z.len() })
}

/// Spectral resampling of a band-limited field onto a grid of `dims`.
pub fn resample(f: &GridField, dims: &[usize]) -> Result<GridField> {
    let spec = f.to_frequency();
    let mut out = GridField::zeros(dims, f.lattice.clone())?;
    out.space = crate::schrodinger::SpaceTag::Frequency;
    let (n0, n1) = (f.dims[0], f.dims[1]);
    for a in 0..n0 {
        for b in 0..n1 {
            let (ma, mb) = (signed_index(a, n0), signed_index(b, n1));
            let fits = |m: i64, n: usize| 2 * m.unsigned_abs() < n as u64;
            if !(fits(ma, n0) && fits(mb, n1) && fits(ma, dims[0]) && fits(mb, dims[1])) {
                continue;
            }
            let ia = ma.rem_euclid(dims[0] as i64) as usize;
            let ib = mb.rem_euclid(dims[1] as i64) as usize;
            out.values[ia * dims[1] + ib] = spec.values[a * n1 + b];
        }
    }
    Ok(out.to_position())
}

/// Relative `l^2` distance between the Fourier coefficients of two fields
/// on grids of possibly different size over the same box.
pub fn spectral_distance(a: &GridField, b: &GridField) -> Result<f64> {
    let fine = if a.len() >= b.len() { a } else { b };
    let coarse = if a.len() >= b.len() { b } else { a };
    let lifted = resample(coarse, &fine.dims)?.to_frequency();
    let fine = fine.to_frequency();
    let diff: f64 = lifted.values.iter().zip(&fine.values).map(|(x, y)| (x - y).norm_sqr()).sum();
    let base: f64 = fine.values.iter().map(|x| x.norm_sqr()).sum();
    Ok((diff / base.max(f64::MIN_POSITIVE)).sqrt())
}

/// Reference solution on the grid of `f`, accepted only when the solution
/// on the doubled grid and with a hundredfold tighter Krylov tolerance
/// agrees to `1e-6`. Returns the solution and the self-convergence gap.
pub fn converged_reference(model: &ManifoldModel, f: &GridField, t: f64) -> Result<(GridField, f64)> {
    let coarse = reference_halfwave(model, f, t, 1e-10)?;
    let dims2: Vec<usize> = f.dims.iter().map(|n| 2 * n).collect();
    let fine = reference_halfwave(model, &resample(f, &dims2)?, t, 1e-12)?;
    let gap = spectral_distance(&coarse.field, &fine.field)?;
    if gap > 1e-6 {
        return Err(Error::Inconclusive(format!("reference self-convergence gap {gap:e} exceeds 1e-6")));
    }
    Ok((fine.field, gap))
}

impl AmplitudeTable {
    /// Largest residual of the order-0 transport equation
    /// `2 d_t phi d_t a_0 - 2 <d phi, d a_0>_g + (box phi) a_0`, with `a_0`
    /// differenced on the grid (second order in `dt` and `h`) and the phase
    /// derivatives taken from the ray data.
    pub fn transport_residual(&self, phase: &PhaseTable) -> f64 {
        let (h, dt) = (phase.grid.h, phase.grid.dt);
        let mut worst: f64 = 0.0;
        for d in 0..phase.angles.len() {
            for l in GHOST_LEVELS..phase.t_grid.len() - GHOST_LEVELS {
                for i in 1..phase.n - 1 {
                    for j in 1..phase.n - 1 {
                        let k = phase.index(d, l, i, j);
                        let a = |dl: isize, di: isize, dj: isize| {
                            self.a0[phase.index(d, (l as isize + dl) as usize, (i as isize + di) as usize, (j as isize + dj) as usize)]
                        };
                        let at = (a(1, 0, 0) - a(-1, 0, 0)) / (2.0 * dt);
                        let ax = (a(0, 1, 0) - a(0, -1, 0)) / (2.0 * h);
                        let ay = (a(0, 0, 1) - a(0, 0, -1)) / (2.0 * h);
                        let e = phase.bump.conformal_jet(phase.node(i, j)).e;
                        let g = phase.grad_x_phi[k];
                        let r = 2.0 * phase.dt_phi[k] * at - 2.0 * (g[0] * ax + g[1] * ay) / e + self.box_phi[k] * self.a0[k];
                        worst = worst.max(r.abs());
                    }
                }
            }
        }
        worst
    }
}

/// Version tag opening every table file.
pub const TABLE_TAG: &str = "WEYLSCOPE-PHASE v1";

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    kind: String,
    model: ManifoldModel,
    model_hash: String,
    grid: TableGrid,
    n: usize,
    levels: usize,
    newton_tol: f64,
    min_jacobian: f64,
    orders: Vec<i32>,
    arrays: Vec<(String, usize)>,
}

fn write_container(path: &std::path::Path, header: &ContainerHeader, arrays: &[&[f64]]) -> Result<()> {
    use std::io::Write;
    let json = serde_json::to_vec(header).map_err(|e| Error::Io(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + json.len() + 8 * arrays.iter().map(|a| a.len()).sum::<usize>());
    out.extend_from_slice(TABLE_TAG.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for a in arrays {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

fn read_container(path: &std::path::Path, kind: &str) -> Result<(ContainerHeader, Vec<Vec<f64>>)> {
    let bytes = std::fs::read(path)?;
    let bad = |what: &str| Error::Io(format!("{}: {what}", path.display()));
    let tag = TABLE_TAG.len() + 1;
    if bytes.len() < tag + 8 || &bytes[..tag - 1] != TABLE_TAG.as_bytes() || bytes[tag - 1] != b'\n' {
        return Err(bad("missing version tag"));
    }
    let len = u64::from_le_bytes(bytes[tag..tag + 8].try_into().unwrap()) as usize;
    let start = tag + 8;
    let json = bytes.get(start..start + len).ok_or_else(|| bad("truncated header"))?;
    let header: ContainerHeader = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    if header.kind != kind {
        return Err(bad(&format!("holds a {} table", header.kind)));
    }
    if header.model_hash != header.model.model_id() {
        return Err(bad("model hash mismatch"));
    }
    let mut pos = start + len;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for (_, count) in &header.arrays {
        let chunk = bytes.get(pos..pos + 8 * count).ok_or_else(|| bad("truncated payload"))?;
        arrays.push(chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        pos += 8 * count;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((header, arrays))
}

fn flatten2(v: &[[f64; 2]]) -> Vec<f64> {
    v.iter().flat_map(|p| p.iter().copied()).collect()
}

fn unflatten2(v: &[f64]) -> Vec<[f64; 2]> {
    v.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

impl PhaseTable {
    fn header(&self, kind: &str, orders: Vec<i32>, arrays: Vec<(String, usize)>) -> ContainerHeader {
        let model = ManifoldModel::PerturbedPlane(self.bump);
        ContainerHeader {
            kind: kind.into(),
            model_hash: model.model_id(),
            model,
            grid: self.grid,
            n: self.n,
            levels: self.t_grid.len(),
            newton_tol: NEWTON_TOL,
            min_jacobian: MIN_JACOBIAN,
            orders,
            arrays,
        }
    }

    /// Writes the table as a tagged container: JSON header, then little-endian `f64` arrays.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let arrays: Vec<Vec<f64>> =
            vec![self.phi.clone(), flatten2(&self.grad_x_phi), self.dt_phi.clone(), self.jacobian.clone(), flatten2(&self.source)];
        let names = ["phi", "grad_x_phi", "dt_phi", "jacobian", "source"];
        let spec = names.iter().zip(&arrays).map(|(n, a)| (n.to_string(), a.len())).collect();
        let refs: Vec<&[f64]> = arrays.iter().map(|a| a.as_slice()).collect();
        write_container(path, &self.header("phase", vec![], spec), &refs)
    }

    /// Reads a table written by [`PhaseTable::save`].
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (h, mut a) = read_container(path, "phase")?;
        let ManifoldModel::PerturbedPlane(bump) = h.model else {
            return Err(Error::Io("phase table model is not a perturbed plane".into()));
        };
        let total = h.grid.directions * h.levels * h.n * h.n;
        if a.len() != 5 || a[0].len() != total || a[1].len() != 2 * total || a[4].len() != 2 * total {
            return Err(Error::Io(format!("{}: array sizes disagree with the grid", path.display())));
        }
        let source = unflatten2(&a.pop().unwrap());
        let jacobian = a.pop().unwrap();
        let dt_phi = a.pop().unwrap();
        let grad_x_phi = unflatten2(&a.pop().unwrap());
        let phi = a.pop().unwrap();
        let g = h.grid;
        Ok(PhaseTable {
            bump,
            grid: g,
            t_grid: (0..h.levels).map(|l| (l as f64 - GHOST_LEVELS as f64) * g.dt).collect(),
            origin: [bump.center[0] - g.half_width, bump.center[1] - g.half_width],
            n: h.n,
            angles: (0..g.directions).map(|d| 2.0 * PI * d as f64 / g.directions as f64).collect(),
            phi,
            grad_x_phi,
            dt_phi,
            jacobian,
            source,
        })
    }
}

impl AmplitudeTable {
    /// Writes the amplitudes in the same container format, tagged with the phase grid.
    pub fn save(&self, phase: &PhaseTable, path: &std::path::Path) -> Result<()> {
        let am1: Vec<f64> = self.am1.iter().flat_map(|c| [c.re, c.im]).collect();
        let arrays = [self.a0.as_slice(), am1.as_slice(), self.box_phi.as_slice(), self.box_a0.as_slice()];
        let names = ["a0", "am1", "box_phi", "box_a0"];
        let spec = names.iter().zip(&arrays).map(|(n, a)| (n.to_string(), a.len())).collect();
        write_container(path, &phase.header("amplitude", self.orders.clone(), spec), &arrays)
    }

    /// Reads amplitudes written by [`AmplitudeTable::save`]; the phase table must match their grid.
    pub fn load(phase: &PhaseTable, path: &std::path::Path) -> Result<Self> {
        let (h, mut a) = read_container(path, "amplitude")?;
        if h.grid != phase.grid || h.model != ManifoldModel::PerturbedPlane(phase.bump) {
            return Err(Error::Io(format!("{}: amplitudes belong to a different phase table", path.display())));
        }
        if a.len() != 4 || a[0].len() != phase.phi.len() {
            return Err(Error::Io(format!("{}: array sizes disagree with the grid", path.display())));
        }
        let box_a0 = a.pop().unwrap();
        let box_phi = a.pop().unwrap();
        let am1 = a.pop().unwrap().chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect();
        Ok(AmplitudeTable { orders: h.orders, a0: a.pop().unwrap(), am1, box_phi, box_a0 })
    }
}

/// Wave packet on the `2 pi` box with frequencies in `[lambda, 2 lambda]`:
/// a smooth radial band cutoff times a Gaussian of width `w` around
/// `(1.5 lambda, 0)`, centered at `xc`.
pub fn band_packet(lambda: f64, n: usize, xc: [f64; 2], w: f64) -> Result<GridField> {
    let kc = [1.5 * lambda, 0.0];
    crate::wavefront::from_coefficients(&[n, n], crate::geometry::Lattice::scaled_identity(2, 2.0 * PI), |k| {
        let q = 2.0 * k[0].hypot(k[1]) / lambda - 3.0;
        if q.abs() >= 1.0 {
            return Complex64::new(0.0, 0.0);
        }
        let beta = (1.0 - 1.0 / (1.0 - q * q)).exp();
        let g = (-((k[0] - kc[0]).powi(2) + (k[1] - kc[1]).powi(2)) * w * w / 2.0).exp();
        Complex64::from_polar(beta * g, -(k[0] * xc[0] + k[1] * xc[1]))
    })
}
