//! Manifold models, their metrics and cometric symbols, and phase-space volumes.
//!
//! Four model families are supported:
//!
//! * flat tori `R^n / L Z^n` with Euclidean coordinates,
//! * the round sphere of radius `r` in the polar chart `(theta, phi)`,
//! * surfaces of revolution generated by a closed-form profile curve
//!   `u -> (r(u), z(u))`, `u in [0, pi]`, in the chart `(u, theta)`,
//! * the plane with a compactly supported conformal bump,
//!   `g = (1 + eps * A * chi(|x - c|^2 / R^2)) * I`.
//!
//! Charts, metric derivatives and the inverse-metric jets used by the
//! Hamilton flows are all closed form.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quad;

/// Pole exclusion band of the polar charts.
pub const POLE_BAND: f64 = 1e-6;

/// Volume of the Euclidean unit ball in `R^n`.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / n as f64 * unit_ball_volume(n - 2),
    }
}

/// Lattice of torus generators. `matrix` holds one generator per column.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    matrix: DMatrix<f64>,
    inverse: DMatrix<f64>,
}

impl Lattice {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::Config("lattice matrix must be square".into()));
        }
        let det = matrix.determinant();
        let scale = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        if !det.is_finite() || det.abs() < 1e-12 * scale.powi(matrix.nrows() as i32) {
            return Err(Error::Config("lattice matrix is not invertible".into()));
        }
        let inverse = matrix.clone().try_inverse().ok_or_else(|| Error::Config("lattice matrix is not invertible".into()))?;
        Ok(Self { matrix, inverse })
    }

    /// Lattice generated by the rows of `generators`.
    pub fn from_generators(generators: &[Vec<f64>]) -> Result<Self> {
        let n = generators.len();
        if n == 0 || generators.iter().any(|g| g.len() != n) {
            return Err(Error::Config("lattice needs n generators of length n".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| generators[j][i]))
    }

    /// `side * I_n`.
    pub fn scaled_identity(n: usize, side: f64) -> Self {
        Self::new(DMatrix::identity(n, n) * side).expect("scaled identity is invertible")
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    pub fn generators(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|j| self.matrix.column(j).iter().copied().collect()).collect()
    }

    pub fn volume(&self) -> f64 {
        self.matrix.determinant().abs()
    }

    /// Dual lattice matrix `2 pi (L^T)^{-1}`; its columns generate the frequencies.
    pub fn dual_matrix(&self) -> DMatrix<f64> {
        self.inverse.transpose() * (2.0 * PI)
    }

    /// Reduces `x` into the fundamental cell `L [0,1)^n`.
    pub fn reduce(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let v = nalgebra::DVector::from_column_slice(x);
        let c = &self.inverse * v;
        let frac = nalgebra::DVector::from_fn(n, |i, _| c[i] - c[i].floor());
        (&self.matrix * frac).iter().copied().collect()
    }
}

/// Closed-form profile curves generating surfaces of revolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "lowercase", deny_unknown_fields)]
pub enum Profile {
    /// `r = sin u`, `z = -cos u`: the unit sphere.
    Sphere,
    /// `r = a sin u`, `z = -c cos u`: prolate (`c > a`) or oblate ellipsoid.
    Ellipsoid { a: f64, c: f64 },
    /// `r = sin u (1 + beta cos 2u)`, `z = -c cos u`: waist at the equator.
    Peanut { beta: f64, c: f64 },
}

/// Profile values and `u`-derivatives up to third order.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProfileJet {
    pub r: [f64; 4],
    pub z: [f64; 4],
}

impl ProfileJet {
    /// Speed `w = |(r_u, z_u)|` and its first two derivatives.
    pub fn speed(&self) -> [f64; 3] {
        let (r1, r2, r3) = (self.r[1], self.r[2], self.r[3]);
        let (z1, z2, z3) = (self.z[1], self.z[2], self.z[3]);
        let w = (r1 * r1 + z1 * z1).sqrt();
        let w1 = (r1 * r2 + z1 * z2) / w;
        let w2 = (r2 * r2 + r1 * r3 + z2 * z2 + z1 * z3) / w - w1 * w1 / w;
        [w, w1, w2]
    }
}

impl Profile {
    pub fn jet(&self, u: f64) -> ProfileJet {
        let (s, c) = u.sin_cos();
        match *self {
            Profile::Sphere => ProfileJet { r: [s, c, -s, -c], z: [-c, s, c, -s] },
            Profile::Ellipsoid { a, c: zc } => ProfileJet { r: [a * s, a * c, -a * s, -a * c], z: [-zc * c, zc * s, zc * c, -zc * s] },
            Profile::Peanut { beta, c: zc } => {
                // r = sin u + beta sin u cos 2u = (1 - beta/2) sin u + (beta/2) sin 3u
                let p = 1.0 - 0.5 * beta;
                let q = 0.5 * beta;
                let (s3, c3) = (3.0 * u).sin_cos();
                ProfileJet {
                    r: [p * s + q * s3, p * c + 3.0 * q * c3, -p * s - 9.0 * q * s3, -p * c - 27.0 * q * c3],
                    z: [-zc * c, zc * s, zc * c, -zc * s],
                }
            }
        }
    }

    pub fn radius(&self, u: f64) -> f64 {
        self.jet(u).r[0]
    }

    /// Checks positivity on the open interval and the pole conditions.
    pub fn validate(&self) -> Result<()> {
        let params_ok = match *self {
            Profile::Sphere => true,
            Profile::Ellipsoid { a, c } => a > 0.0 && c > 0.0 && a.is_finite() && c.is_finite(),
            Profile::Peanut { beta, c } => beta.abs() < 1.0 && c > 0.0 && c.is_finite(),
        };
        if !params_ok {
            return Err(Error::ProfileInvalid(format!("bad parameters {self:?}")));
        }
        for i in 1..2000 {
            let u = PI * i as f64 / 2000.0;
            let j = self.jet(u);
            if !(j.r[0] > 0.0) || !(j.speed()[0] > 0.0) {
                return Err(Error::ProfileInvalid(format!("r or speed not positive at u = {u}")));
            }
        }
        for u in [0.0, PI] {
            let j = self.jet(u);
            if j.r[0].abs() > 1e-12 {
                return Err(Error::ProfileInvalid("profile does not close at the poles".into()));
            }
            let slope = j.r[1] / j.speed()[0];
            if (slope.abs() - 1.0).abs() > 1e-9 {
                return Err(Error::ProfileInvalid(format!("|dr/ds| = {} at a pole", slope.abs())));
            }
        }
        Ok(())
    }

    /// Meridian length `S = int_0^pi w du`.
    pub fn length(&self) -> Result<f64> {
        quad::integrate(|u| self.jet(u).speed()[0], 0.0, PI, 1e-12)
    }

    /// Arclength from the south pole to parameter `u`.
    pub fn arclength(&self, u: f64) -> Result<f64> {
        if u <= 0.0 {
            return Ok(0.0);
        }
        quad::integrate(|v| self.jet(v).speed()[0], 0.0, u, 1e-12)
    }

    /// Area `2 pi int r w du`.
    pub fn area(&self) -> Result<f64> {
        Ok(2.0
            * PI
            * quad::integrate(
                |u| {
                    let j = self.jet(u);
                    j.r[0] * j.speed()[0]
                },
                0.0,
                PI,
                1e-12,
            )?)
    }

    /// Interior critical points of `r(u)`, sorted, found by bracketing and bisection on `r'`.
    pub fn critical_points(&self) -> Vec<f64> {
        let m = 4000;
        let mut out = Vec::new();
        let f = |u: f64| self.jet(u).r[1];
        let mut prev_u = 1e-6;
        let mut prev = f(prev_u);
        for i in 1..=m {
            let u = PI * i as f64 / m as f64 - if i == m { 1e-6 } else { 0.0 };
            let v = f(u);
            if prev == 0.0 {
                out.push(prev_u);
            } else if prev * v < 0.0 {
                let (mut lo, mut hi, mut flo) = (prev_u, u, prev);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let fm = f(mid);
                    if fm * flo <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        flo = fm;
                    }
                    if hi - lo < 1e-15 {
                        break;
                    }
                }
                out.push(0.5 * (lo + hi));
            }
            prev_u = u;
            prev = v;
        }
        out.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        out
    }

    /// Gauss curvature `K = -r_ss / r` at parameter `u`.
    pub fn gauss_curvature(&self, u: f64) -> f64 {
        let j = self.jet(u);
        let [w, w1, _] = j.speed();
        let r_ss = (j.r[2] * w - j.r[1] * w1) / (w * w * w);
        -r_ss / j.r[0]
    }
}

const PROFILE_DECAY: f64 = 10.0;

/// Compactly supported conformal bump on the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneBump {
    #[serde(default = "PlaneBump::default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "PlaneBump::default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "PlaneBump::default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub center: [f64; 2],
    /// Half-width of the square outside which flows report `OutOfChart`.
    #[serde(default = "PlaneBump::default_box")]
    pub box_half_width: f64,
}

/// Conformal factor `e(x)` with gradient and Hessian.
#[derive(Clone, Copy, Debug)]
pub struct ConformalJet {
    pub e: f64,
    pub de: [f64; 2],
    pub d2e: [[f64; 2]; 2],
}

impl PlaneBump {
    fn default_epsilon() -> f64 {
        0.05
    }
    fn default_amplitude() -> f64 {
        8.0
    }
    fn default_radius() -> f64 {
        3.0
    }
    fn default_box() -> f64 {
        50.0
    }

    pub fn with_epsilon(epsilon: f64) -> Self {
        Self {
            epsilon,
            amplitude: Self::default_amplitude(),
            radius: Self::default_radius(),
            center: [0.0, 0.0],
            box_half_width: Self::default_box(),
        }
    }

    /// Deep-well variant: a larger amplitude so that circular geodesics exist.
    pub fn well(epsilon: f64) -> Self {
        Self { amplitude: 30.0, ..Self::with_epsilon(epsilon) }
    }

    /// Bump profile `chi(s) = exp(1 - PROFILE_DECAY s - 1/(1 - s))` on `s < 1`
    /// with its first two derivatives. Near the center it is the Gaussian
    /// `exp(-(PROFILE_DECAY + 1) s)`; at the edge of the support it is below `1e-7`.
    fn chi_s(s: f64) -> (f64, f64, f64) {
        if s >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let q = 1.0 / (1.0 - s);
        let chi = (1.0 - PROFILE_DECAY * s - q).exp();
        let l1 = -PROFILE_DECAY - q * q;
        let l2 = -2.0 * q * q * q;
        (chi, chi * l1, chi * (l1 * l1 + l2))
    }

    /// `b(x) = A chi(|x - c|^2/R^2)`, so that `g = (1 + eps b) I`.
    pub fn bump(&self, x: [f64; 2]) -> f64 {
        let dx = [x[0] - self.center[0], x[1] - self.center[1]];
        let s = (dx[0] * dx[0] + dx[1] * dx[1]) / (self.radius * self.radius);
        self.amplitude * Self::chi_s(s).0
    }

    pub fn conformal_jet(&self, x: [f64; 2]) -> ConformalJet {
        let r2 = self.radius * self.radius;
        let dx = [x[0] - self.center[0], x[1] - self.center[1]];
        let s = (dx[0] * dx[0] + dx[1] * dx[1]) / r2;
        let (chi, c1, c2) = Self::chi_s(s);
        let k = self.epsilon * self.amplitude;
        let ds = [2.0 * dx[0] / r2, 2.0 * dx[1] / r2];
        let mut d2e = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let dij = if i == j { 2.0 / r2 } else { 0.0 };
                d2e[i][j] = k * (c2 * ds[i] * ds[j] + c1 * dij);
            }
        }
        ConformalJet { e: 1.0 + k * chi, de: [k * c1 * ds[0], k * c1 * ds[1]], d2e }
    }

    /// True when `x` lies outside the support of the bump.
    pub fn is_flat_at(&self, x: [f64; 2]) -> bool {
        let dx = [x[0] - self.center[0], x[1] - self.center[1]];
        dx[0] * dx[0] + dx[1] * dx[1] >= self.radius * self.radius
    }
}

/// The model manifolds. Serialized as `{"kind": ..., "params": ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum ManifoldModel {
    FlatTorus(Lattice),
    Sphere2(SphereParams),
    SurfaceOfRevolution(Profile),
    PerturbedPlane(PlaneBump),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereParams {
    pub radius: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatticeRepr {
    lattice: Vec<Vec<f64>>,
}

impl Serialize for Lattice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        LatticeRepr { lattice: self.generators() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Lattice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = LatticeRepr::deserialize(d)?;
        Lattice::from_generators(&r.lattice).map_err(serde::de::Error::custom)
    }
}

/// Metric `g`, inverse, determinant and first partials `dg[k] = d_k g`.
#[derive(Clone, Debug)]
pub struct MetricData {
    pub g: DMatrix<f64>,
    pub g_inv: DMatrix<f64>,
    pub det_g: f64,
    pub dg: Vec<DMatrix<f64>>,
}

/// Inverse metric with first and second partials, flattened row-major:
/// `d1[(k*n + i)*n + j] = d_k g^{ij}`, `d2[((k*n + l)*n + i)*n + j] = d_k d_l g^{ij}`.
#[derive(Clone, Debug)]
pub struct CometricJet {
    pub n: usize,
    pub ginv: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

impl CometricJet {
    fn flat(n: usize) -> Self {
        let mut ginv = vec![0.0; n * n];
        for i in 0..n {
            ginv[i * n + i] = 1.0;
        }
        Self { n, ginv, d1: vec![0.0; n * n * n], d2: vec![0.0; n * n * n * n] }
    }

    fn diagonal2(a: [f64; 3], b: [f64; 3], axis: usize) -> Self {
        // a, b: value/first/second derivative of g^{00}, g^{11} along coordinate `axis`.
        let mut j = Self::flat(2);
        j.ginv = vec![a[0], 0.0, 0.0, b[0]];
        let k = axis;
        j.d1[(k * 2) * 2] = a[1];
        j.d1[(k * 2 + 1) * 2 + 1] = b[1];
        j.d2[((k * 2 + k) * 2) * 2] = a[2];
        j.d2[((k * 2 + k) * 2 + 1) * 2 + 1] = b[2];
        j
    }

    pub fn ginv(&self, i: usize, j: usize) -> f64 {
        self.ginv[i * self.n + j]
    }
    pub fn d1(&self, k: usize, i: usize, j: usize) -> f64 {
        self.d1[(k * self.n + i) * self.n + j]
    }
    pub fn d2(&self, k: usize, l: usize, i: usize, j: usize) -> f64 {
        self.d2[((k * self.n + l) * self.n + i) * self.n + j]
    }
}

/// `f = 1/v^2` with derivatives from `v, v', v''`.
fn inv_square(v: f64, v1: f64, v2: f64) -> [f64; 3] {
    let f = 1.0 / (v * v);
    [f, -2.0 * v1 / (v * v * v), 6.0 * v1 * v1 / v.powi(4) - 2.0 * v2 / (v * v * v)]
}

impl ManifoldModel {
    pub fn flat_torus(lattice: Lattice) -> Self {
        ManifoldModel::FlatTorus(lattice)
    }

    pub fn sphere(radius: f64) -> Self {
        ManifoldModel::Sphere2(SphereParams { radius })
    }

    pub fn revolution(profile: Profile) -> Self {
        ManifoldModel::SurfaceOfRevolution(profile)
    }

    pub fn plane(epsilon: f64) -> Self {
        ManifoldModel::PerturbedPlane(PlaneBump::with_epsilon(epsilon))
    }

    /// Named presets used by the command line.
    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "torus-2pi" => Self::flat_torus(Lattice::scaled_identity(2, 2.0 * PI)),
            "torus-2pi-1d" => Self::flat_torus(Lattice::scaled_identity(1, 2.0 * PI)),
            "sphere" => Self::sphere(1.0),
            "sphere-profile" => Self::revolution(Profile::Sphere),
            "ellipsoid" => Self::revolution(Profile::Ellipsoid { a: 1.0, c: 1.3 }),
            "oblate" => Self::revolution(Profile::Ellipsoid { a: 1.0, c: 0.7 }),
            "peanut" => Self::revolution(Profile::Peanut { beta: 0.3, c: 1.5 }),
            "plane" => Self::plane(0.05),
            "plane-well" => ManifoldModel::PerturbedPlane(PlaneBump::well(0.3)),
            "euclidean" => Self::plane(0.0),
            _ => return None,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ManifoldModel::FlatTorus(l) => l.dim(),
            _ => 2,
        }
    }

    /// Validates model parameters.
    pub fn validate(&self) -> Result<()> {
        match self {
            ManifoldModel::FlatTorus(_) => Ok(()),
            ManifoldModel::Sphere2(p) => {
                if p.radius > 0.0 && p.radius.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config("sphere radius must be positive".into()))
                }
            }
            ManifoldModel::SurfaceOfRevolution(p) => p.validate(),
            ManifoldModel::PerturbedPlane(b) => {
                if !(b.radius > 0.0) || !(b.box_half_width > 2.0 * b.radius) {
                    return Err(Error::Config("bump radius and box must be positive".into()));
                }
                // e attains its extremes at the center (chi = 1) and outside (chi = 0).
                if 1.0 + b.epsilon * b.amplitude <= 0.0 {
                    return Err(Error::SingularMetric { point: b.center.to_vec() });
                }
                Ok(())
            }
        }
    }

    /// JSON descriptor.
    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    /// Stable content hash of the descriptor (hex, 16 characters).
    pub fn model_id(&self) -> String {
        let digest = Sha256::digest(self.descriptor().as_bytes());
        hex::encode(&digest[..8])
    }

    fn check_chart(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::OutOfChart { point: x.to_vec(), reason: "wrong dimension or non-finite".into() });
        }
        match self {
            ManifoldModel::Sphere2(_) | ManifoldModel::SurfaceOfRevolution(_) => {
                if x[0] < POLE_BAND || x[0] > PI - POLE_BAND {
                    return Err(Error::OutOfChart { point: x.to_vec(), reason: "within the pole band".into() });
                }
            }
            ManifoldModel::PerturbedPlane(b) => {
                let dx = (x[0] - b.center[0]).abs().max((x[1] - b.center[1]).abs());
                if dx > b.box_half_width {
                    return Err(Error::OutOfChart { point: x.to_vec(), reason: "outside the configured box".into() });
                }
            }
            ManifoldModel::FlatTorus(_) => {}
        }
        Ok(())
    }

    /// Metric data at a chart point.
    pub fn metric_at(&self, x: &[f64]) -> Result<MetricData> {
        self.check_chart(x)?;
        let n = self.dim();
        let zero = || DMatrix::<f64>::zeros(n, n);
        let (g, dg) = match self {
            ManifoldModel::FlatTorus(_) => (DMatrix::identity(n, n), vec![zero(); n]),
            ManifoldModel::Sphere2(p) => {
                let r2 = p.radius * p.radius;
                let (s, c) = x[0].sin_cos();
                let g = DMatrix::from_row_slice(2, 2, &[r2, 0.0, 0.0, r2 * s * s]);
                let mut d0 = zero();
                d0[(1, 1)] = 2.0 * r2 * s * c;
                (g, vec![d0, zero()])
            }
            ManifoldModel::SurfaceOfRevolution(prof) => {
                let j = prof.jet(x[0]);
                let [w, w1, _] = j.speed();
                let g = DMatrix::from_row_slice(2, 2, &[w * w, 0.0, 0.0, j.r[0] * j.r[0]]);
                let mut d0 = zero();
                d0[(0, 0)] = 2.0 * w * w1;
                d0[(1, 1)] = 2.0 * j.r[0] * j.r[1];
                (g, vec![d0, zero()])
            }
            ManifoldModel::PerturbedPlane(b) => {
                let cj = b.conformal_jet([x[0], x[1]]);
                let g = DMatrix::identity(2, 2) * cj.e;
                (g, vec![DMatrix::identity(2, 2) * cj.de[0], DMatrix::identity(2, 2) * cj.de[1]])
            }
        };
        let det_g = g.determinant();
        let sym = nalgebra::SymmetricEigen::new(g.clone());
        if !(det_g > 0.0) || sym.eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::SingularMetric { point: x.to_vec() });
        }
        let g_inv = g.clone().try_inverse().ok_or_else(|| Error::SingularMetric { point: x.to_vec() })?;
        Ok(MetricData { g, g_inv, det_g, dg })
    }

    /// Inverse metric with exact first and second partial derivatives.
    pub fn cometric_jet(&self, x: &[f64]) -> Result<CometricJet> {
        self.check_chart(x)?;
        Ok(match self {
            ManifoldModel::FlatTorus(l) => CometricJet::flat(l.dim()),
            ManifoldModel::Sphere2(p) => {
                let (s, c) = x[0].sin_cos();
                let r2 = p.radius * p.radius;
                let b = inv_square(s, c, -s);
                CometricJet::diagonal2([1.0 / r2, 0.0, 0.0], [b[0] / r2, b[1] / r2, b[2] / r2], 0)
            }
            ManifoldModel::SurfaceOfRevolution(prof) => {
                let j = prof.jet(x[0]);
                let [w, w1, w2] = j.speed();
                CometricJet::diagonal2(inv_square(w, w1, w2), inv_square(j.r[0], j.r[1], j.r[2]), 0)
            }
            ManifoldModel::PerturbedPlane(b) => {
                let cj = b.conformal_jet([x[0], x[1]]);
                let mut jet = CometricJet::flat(2);
                let inv = 1.0 / cj.e;
                jet.ginv = vec![inv, 0.0, 0.0, inv];
                for k in 0..2 {
                    let dk = -inv * inv * cj.de[k];
                    jet.d1[(k * 2) * 2] = dk;
                    jet.d1[(k * 2 + 1) * 2 + 1] = dk;
                    for l in 0..2 {
                        let dkl = 2.0 * inv.powi(3) * cj.de[k] * cj.de[l] - inv * inv * cj.d2e[k][l];
                        jet.d2[((k * 2 + l) * 2) * 2] = dkl;
                        jet.d2[((k * 2 + l) * 2 + 1) * 2 + 1] = dkl;
                    }
                }
                jet
            }
        })
    }

    /// `|xi|_g^2 = g^{ij}(x) xi_i xi_j`.
    pub fn cosymbol(&self, x: &[f64], xi: &[f64]) -> Result<f64> {
        let jet = self.cometric_jet(x)?;
        if xi.len() != jet.n {
            return Err(Error::OutOfChart { point: x.to_vec(), reason: "covector dimension mismatch".into() });
        }
        let mut q = 0.0;
        for i in 0..jet.n {
            for j in 0..jet.n {
                q += jet.ginv(i, j) * xi[i] * xi[j];
            }
        }
        Ok(q)
    }

    /// `(Vol(X), Vol(B*X))` with `Vol(B*X) = omega_n Vol(X)`.
    pub fn phase_volumes(&self) -> Result<(f64, f64)> {
        let vol = match self {
            ManifoldModel::FlatTorus(l) => l.volume(),
            ManifoldModel::Sphere2(p) => 4.0 * PI * p.radius * p.radius,
            ManifoldModel::SurfaceOfRevolution(prof) => prof.area()?,
            ManifoldModel::PerturbedPlane(_) => return Err(Error::Unsupported("the perturbed plane has infinite volume".into())),
        };
        Ok((vol, unit_ball_volume(self.dim()) * vol))
    }
}
