//! Eigenfrequency tables `lambda_j = sqrt(eigenvalue of Delta)`, counting
//! functions and Weyl-law fits.
//!
//! Tori are enumerated exactly over the dual lattice, the round sphere uses
//! `l(l+1)`, and surfaces of revolution separate into one Sturm-Liouville
//! problem per Fourier mode `e^{i m theta}`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::geometry::{Lattice, ManifoldModel, Profile};

/// Absolute tolerance for merging equal eigenfrequencies.
pub const MERGE_TOL: f64 = 1e-9;

/// Default cap on enumerated lattice points.
pub const DEFAULT_ENTRY_CAP: usize = 10_000_000;

/// Relative Richardson error gate for Sturm-Liouville eigenvalues.
pub const MESH_GATE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumTable {
    pub model_id: String,
    /// JSON description of the model and of the solver settings.
    pub descriptor: String,
    /// `(lambda, multiplicity)`, strictly increasing in `lambda`.
    pub entries: Vec<(f64, usize)>,
    /// Every eigenfrequency `<= lambda_max` is present.
    pub lambda_max: f64,
}

impl SpectrumTable {
    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// Eigenfrequencies repeated by multiplicity.
    pub fn expanded(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|&(l, m)| std::iter::repeat_n(l, m)).collect()
    }
}

/// Sorts and merges values closer than `MERGE_TOL` to the first of a run.
fn merge(mut values: Vec<(f64, usize)>) -> Vec<(f64, usize)> {
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, usize)> = Vec::new();
    let mut anchor = f64::NEG_INFINITY;
    for (l, m) in values {
        match out.last_mut() {
            Some(last) if l - anchor <= MERGE_TOL => last.1 += m,
            _ => {
                anchor = l;
                out.push((l, m));
            }
        }
    }
    out
}

/// `lambda = |2 pi L^{-T} k|` over the dual lattice.
pub fn torus_spectrum(lattice: &Lattice, lambda_max: f64, cap: usize) -> Result<SpectrumTable> {
    if !(lambda_max >= 0.0) {
        return Err(Error::Config(format!("lambda_max must be >= 0, got {lambda_max}")));
    }
    let n = lattice.dim();
    let dual = lattice.dual_matrix();
    let bound = (lattice.matrix().norm() * lambda_max / (2.0 * std::f64::consts::PI)).floor() as i64 + 1;
    let mut vals = Vec::new();
    let mut k = vec![-bound; n];
    let mut kv = DVector::zeros(n);
    loop {
        for i in 0..n {
            kv[i] = k[i] as f64;
        }
        let l = (&dual * &kv).norm();
        if l <= lambda_max + MERGE_TOL {
            vals.push((l, 1));
            if vals.len() > cap {
                return Err(Error::Overflow { count: vals.len(), cap });
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                let model = ManifoldModel::flat_torus(lattice.clone());
                return Ok(SpectrumTable { model_id: model.model_id(), descriptor: model.descriptor(), entries: merge(vals), lambda_max });
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

/// `lambda_l = sqrt(l(l+1)) / r` with multiplicity `2l + 1`.
pub fn sphere_spectrum(radius: f64, lambda_max: f64) -> Result<SpectrumTable> {
    if !(radius > 0.0) || !(lambda_max >= 0.0) {
        return Err(Error::Config("sphere radius must be > 0 and lambda_max >= 0".into()));
    }
    let mut entries = Vec::new();
    for l in 0u64.. {
        let lam = ((l * (l + 1)) as f64).sqrt() / radius;
        if lam > lambda_max {
            break;
        }
        entries.push((lam, 2 * l as usize + 1));
    }
    let model = ManifoldModel::sphere(radius);
    Ok(SpectrumTable { model_id: model.model_id(), descriptor: model.descriptor(), entries, lambda_max })
}

/// Symmetric tridiagonal matrix: diagonal `a`, off-diagonal `b` (`b.len() = a.len() - 1`).
#[derive(Clone, Debug)]
pub struct Tridiagonal {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl Tridiagonal {
    /// Number of eigenvalues strictly below `x` (Sturm sequence of LDL^T pivots).
    pub fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut d = 1.0;
        for i in 0..self.a.len() {
            let off = if i == 0 { 0.0 } else { self.b[i - 1] * self.b[i - 1] / d };
            d = self.a[i] - x - off;
            if d == 0.0 {
                d = -f64::EPSILON * (self.a[i].abs() + x.abs()).max(f64::MIN_POSITIVE);
            }
            if d < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// Gershgorin enclosure of the spectrum.
    pub fn bounds(&self) -> (f64, f64) {
        let n = self.a.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let r = if i > 0 { self.b[i - 1].abs() } else { 0.0 } + if i + 1 < n { self.b[i].abs() } else { 0.0 };
            lo = lo.min(self.a[i] - r);
            hi = hi.max(self.a[i] + r);
        }
        (lo, hi)
    }

    /// The `k`-th smallest eigenvalue (0-based) by bisection.
    pub fn eigenvalue(&self, k: usize, lo: f64, hi: f64) -> f64 {
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_below(mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// All eigenvalues below `x_max`, ascending.
    pub fn eigenvalues_below(&self, x_max: f64) -> Vec<f64> {
        let (lo0, hi0) = self.bounds();
        let hi = x_max.min(hi0);
        let count = self.count_below(hi);
        let mut out = Vec::with_capacity(count);
        let mut lo = lo0;
        for k in 0..count {
            let v = self.eigenvalue(k, lo, hi);
            out.push(v);
            lo = v - 1e-12 * v.abs().max(1.0);
        }
        out
    }
}

/// Mode-`m` Sturm-Liouville operator on the half-cell mesh of `N` cells,
/// symmetrized by the weight: `W^{-1/2} A W^{-1/2}`.
///
/// With `g = diag(w^2, r^2)` the mode equation is
/// `-(p f')' + q f = lambda^2 rho f`, `p = r/w`, `q = m^2 w/r`, `rho = w r`.
pub fn sturm_liouville_matrix(profile: &Profile, m: u32, cells: usize) -> Tridiagonal {
    let h = std::f64::consts::PI / cells as f64;
    let face_p = |i: usize| -> f64 {
        if i == 0 || i == cells {
            return 0.0;
        }
        let jet = profile.jet(i as f64 * h);
        jet.r[0] / jet.speed()[0]
    };
    let mut a = Vec::with_capacity(cells);
    let mut wts = Vec::with_capacity(cells);
    let m2 = (m as f64).powi(2);
    let mut p_left = face_p(0);
    let mut p_faces = Vec::with_capacity(cells + 1);
    p_faces.push(p_left);
    for i in 0..cells {
        let jet = profile.jet((i as f64 + 0.5) * h);
        let (r, w) = (jet.r[0], jet.speed()[0]);
        let p_right = face_p(i + 1);
        p_faces.push(p_right);
        let rho = w * r;
        a.push(((p_left + p_right) / (h * h) + m2 * w / r) / rho);
        wts.push(rho);
        p_left = p_right;
    }
    let b = (0..cells - 1).map(|i| -p_faces[i + 1] / (h * h) / (wts[i] * wts[i + 1]).sqrt()).collect();
    Tridiagonal { a, b }
}

/// Solver settings for surfaces of revolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RevolutionOptions {
    pub m_max: u32,
    pub cells: usize,
}

/// Eigenfrequencies of one mode on meshes `N` and `N/2`, kept while the
/// Richardson estimate `|l_N - l_{N/2}| / 3` is below `MESH_GATE` relative.
/// Returns the accepted values and the first rejected one, if any.
fn mode_frequencies(profile: &Profile, m: u32, cells: usize, lambda_max: f64) -> (Vec<f64>, Option<f64>) {
    let fine = sturm_liouville_matrix(profile, m, cells).eigenvalues_below((lambda_max * 1.05 + 1.0).powi(2));
    let coarse = sturm_liouville_matrix(profile, m, cells / 2).eigenvalues_below((lambda_max * 1.2 + 2.0).powi(2));
    let mut out = Vec::new();
    for (k, &e) in fine.iter().enumerate() {
        if m == 0 && k == 0 {
            // Constants are exact eigenfunctions; bisection resolves only ~sqrt(eps) in lambda.
            out.push(0.0);
            continue;
        }
        let l = e.max(0.0).sqrt();
        let Some(&ec) = coarse.get(k) else { return (out, Some(l)) };
        let lc = ec.max(0.0).sqrt();
        let est = (l - lc).abs() / 3.0;
        if est > MESH_GATE * l {
            return (out, Some(l));
        }
        out.push(l);
    }
    (out, None)
}

/// Spectrum of a surface of revolution by Fourier separation.
///
/// The table cutoff is the smallest of the request, the first eigenfrequency
/// rejected by the mesh gate, and `(m_max + 1) / max r`, below which no
/// omitted mode contributes.
pub fn revolution_spectrum(profile: &Profile, opts: RevolutionOptions, lambda_max: f64) -> Result<SpectrumTable> {
    profile.validate()?;
    if opts.cells < 100 {
        return Err(Error::Config(format!("mesh needs at least 100 cells, got {}", opts.cells)));
    }
    let r_max = (0..=2000).map(|i| profile.radius(i as f64 * std::f64::consts::PI / 2000.0)).fold(0.0, f64::max) * 1.0001;
    let mut cutoff = lambda_max.min((opts.m_max as f64 + 1.0) / r_max);
    let mut vals = Vec::new();
    for m in 0..=opts.m_max {
        let (accepted, rejected) = mode_frequencies(profile, m, opts.cells, lambda_max);
        if let Some(l) = rejected {
            cutoff = cutoff.min(l * (1.0 - 1e-12));
        }
        let mult = if m == 0 { 1 } else { 2 };
        vals.extend(accepted.into_iter().map(|l| (l, mult)));
    }
    if vals.is_empty() || cutoff <= 0.0 {
        return Err(Error::MeshTooCoarse);
    }
    vals.retain(|v| v.0 <= cutoff);
    let model = ManifoldModel::revolution(*profile);
    let descriptor = serde_json::json!({
        "model": serde_json::from_str::<serde_json::Value>(&model.descriptor()).unwrap_or_default(),
        "m_max": opts.m_max,
        "cells": opts.cells,
    })
    .to_string();
    Ok(SpectrumTable { model_id: model.model_id(), descriptor, entries: merge(vals), lambda_max: cutoff })
}

/// Default mode range and mesh for a requested cutoff.
pub fn default_revolution_options(profile: &Profile, lambda_max: f64) -> RevolutionOptions {
    let r_max = (0..=2000).map(|i| profile.radius(i as f64 * std::f64::consts::PI / 2000.0)).fold(0.0, f64::max);
    let m_max = (lambda_max * r_max * 1.0001).ceil() as u32 + 1;
    let cells = ((lambda_max * 80.0) as usize).clamp(2000, 8000) & !1;
    RevolutionOptions { m_max, cells }
}

/// Spectrum of any compact model up to `lambda_max`.
pub fn model_spectrum(model: &ManifoldModel, lambda_max: f64) -> Result<SpectrumTable> {
    match model {
        ManifoldModel::FlatTorus(l) => torus_spectrum(l, lambda_max, DEFAULT_ENTRY_CAP),
        ManifoldModel::Sphere2(p) => sphere_spectrum(p.radius, lambda_max),
        ManifoldModel::SurfaceOfRevolution(prof) => revolution_spectrum(prof, default_revolution_options(prof, lambda_max), lambda_max),
        ManifoldModel::PerturbedPlane(_) => Err(Error::Unsupported("the perturbed plane has continuous spectrum".into())),
    }
}

/// `N(lambda)`: eigenfrequencies `<= lambda` with multiplicity. Ties within
/// `MERGE_TOL` count as included.
pub fn counting_function(table: &SpectrumTable, lambda: f64) -> Result<usize> {
    if lambda > table.lambda_max + MERGE_TOL {
        return Err(Error::BeyondCutoff { lambda, cutoff: table.lambda_max });
    }
    let idx = table.entries.partition_point(|e| e.0 <= lambda + MERGE_TOL);
    Ok(table.entries[..idx].iter().map(|e| e.1).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeylFit {
    /// Leading coefficient `(2 pi)^{-n} Vol(B*X)`.
    pub coefficient: f64,
    /// `(lambda, N(lambda) / (c lambda^n))` on a log-spaced grid.
    pub ratios: Vec<(f64, f64)>,
    /// `sup |N(lambda) - c lambda^n| / lambda^{n-1}` over `[lambda_min, lambda_max]`.
    pub remainder_sup: f64,
}

/// Lower end of the Weyl-fit range.
pub const WEYL_FIT_MIN: f64 = 1.0;

/// Compares `N` with the Weyl term on `[WEYL_FIT_MIN, lambda_max]`.
///
/// The remainder supremum is exact: between jumps the remainder is monotone
/// in each piece, so it is evaluated at the grid, both one-sided limits at
/// every jump, and the endpoints.
pub fn weyl_fit(table: &SpectrumTable, n: usize, vol_ball_bundle: f64, samples: usize) -> Result<WeylFit> {
    let c = vol_ball_bundle / (2.0 * std::f64::consts::PI).powi(n as i32);
    let (lo, hi) = (WEYL_FIT_MIN, table.lambda_max);
    if !(hi > lo) {
        return Err(Error::BeyondCutoff { lambda: lo, cutoff: hi });
    }
    let rem = |count: f64, l: f64| (count - c * l.powi(n as i32)).abs() / l.powi(n as i32 - 1);
    let mut ratios = Vec::with_capacity(samples);
    let mut sup: f64 = 0.0;
    for i in 0..samples.max(2) {
        let l = lo * (hi / lo).powf(i as f64 / (samples.max(2) - 1) as f64);
        let count = counting_function(table, l)? as f64;
        ratios.push((l, count / (c * l.powi(n as i32))));
        sup = sup.max(rem(count, l));
    }
    let mut cum = 0usize;
    for &(l, m) in &table.entries {
        let before = cum;
        cum += m;
        if l < lo || l > hi {
            continue;
        }
        sup = sup.max(rem(before as f64, l)).max(rem(cum as f64, l));
    }
    Ok(WeylFit { coefficient: c, ratios, remainder_sup: sup })
}

/// Mean of `N(lambda) / (c lambda^n)` over `samples` uniform points in `[a, b]`.
pub fn mean_leading_ratio(table: &SpectrumTable, n: usize, vol_ball_bundle: f64, a: f64, b: f64, samples: usize) -> Result<f64> {
    let c = vol_ball_bundle / (2.0 * std::f64::consts::PI).powi(n as i32);
    let mut acc = 0.0;
    for i in 0..samples {
        let l = a + (b - a) * (i as f64 + 0.5) / samples as f64;
        acc += counting_function(table, l)? as f64 / (c * l.powi(n as i32));
    }
    Ok(acc / samples as f64)
}

/// First line of a cache file.
pub const CACHE_TAG: &str = "WEYLSCOPE-SPECTRUM v1";

impl SpectrumTable {
    pub fn to_cache_string(&self) -> String {
        let mut s = format!("{CACHE_TAG}\n{}\n{:.16e}\n", self.descriptor, self.lambda_max);
        for &(l, m) in &self.entries {
            let _ = writeln!(s, "{l:.16e},{m}");
        }
        s
    }

    pub fn from_cache_string(text: &str, model_id: &str) -> Result<Self> {
        let bad = |what: &str| Error::Io(format!("malformed spectrum cache: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(CACHE_TAG) {
            return Err(bad("tag"));
        }
        let descriptor = lines.next().ok_or_else(|| bad("descriptor"))?.to_string();
        serde_json::from_str::<serde_json::Value>(&descriptor).map_err(|_| bad("descriptor json"))?;
        let lambda_max: f64 = lines.next().and_then(|l| l.trim().parse().ok()).ok_or_else(|| bad("lambda_max"))?;
        let mut entries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (l, m) = line.split_once(',').ok_or_else(|| bad("row"))?;
            let l: f64 = l.trim().parse().map_err(|_| bad("lambda"))?;
            let m: usize = m.trim().parse().map_err(|_| bad("mult"))?;
            if entries.last().is_some_and(|e: &(f64, usize)| e.0 >= l) || m == 0 {
                return Err(bad("ordering"));
            }
            entries.push((l, m));
        }
        Ok(Self { model_id: model_id.to_string(), descriptor, entries, lambda_max })
    }
}

/// Disk cache of spectrum tables keyed by model hash, cutoff and settings.
#[derive(Clone, Debug)]
pub struct SpectrumCache {
    pub dir: PathBuf,
}

impl SpectrumCache {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        Self { dir: dir.as_ref().to_path_buf() }
    }

    fn path(&self, model: &ManifoldModel, lambda_max: f64) -> PathBuf {
        self.dir.join(format!("{}_{:.6e}.csv", model.model_id(), lambda_max))
    }

    /// Loads a cached table, or computes and stores it.
    pub fn get_or_compute(&self, model: &ManifoldModel, lambda_max: f64) -> Result<(SpectrumTable, bool)> {
        let path = self.path(model, lambda_max);
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(t) = SpectrumTable::from_cache_string(&text, &model.model_id()) {
                return Ok((t, true));
            }
        }
        let table = model_spectrum(model, lambda_max)?;
        fs::create_dir_all(&self.dir)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, table.to_cache_string())?;
        fs::rename(&tmp, &path)?;
        Ok((table, false))
    }
}
