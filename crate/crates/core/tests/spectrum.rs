use std::f64::consts::PI;

use proptest::prelude::*;
use weylscope::geometry::{Lattice, ManifoldModel, Profile};
use weylscope::spectrum::*;

fn torus(lmax: f64) -> SpectrumTable {
    torus_spectrum(&Lattice::scaled_identity(2, 2.0 * PI), lmax, DEFAULT_ENTRY_CAP).unwrap()
}

fn close(a: &[(f64, usize)], b: &[(f64, usize)]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x.0 - y.0).abs() < 1e-12 && x.1 == y.1)
}

#[test]
fn torus_small_tables() {
    assert!(close(&torus(0.0).entries, &[(0.0, 1)]));
    assert!(close(&torus(1.4).entries, &[(0.0, 1), (1.0, 4)]));
    assert!(close(&torus(1.5).entries, &[(0.0, 1), (1.0, 4), (2f64.sqrt(), 4)]));
}

#[test]
fn torus_counts_match_brute_force() {
    let t = torus(60.0);
    for lam in [0.5, 1.0, 7.3, 25.0, 60.0] {
        let mut brute = 0;
        for a in -61i64..=61 {
            for b in -61i64..=61 {
                if ((a * a + b * b) as f64) <= lam * lam + 1e-9 {
                    brute += 1;
                }
            }
        }
        assert_eq!(counting_function(&t, lam).unwrap(), brute, "lambda {lam}");
    }
    assert_eq!(counting_function(&t, 1.0).unwrap(), 5);
    assert_eq!(counting_function(&t, 0.5).unwrap(), 1);
}

#[test]
fn torus_overflow_is_reported() {
    let e = torus_spectrum(&Lattice::scaled_identity(2, 2.0 * PI), 100.0, 1000).unwrap_err();
    assert!(matches!(e, weylscope::Error::Overflow { .. }));
}

#[test]
fn skew_torus_matches_dual_lattice() {
    let lat = Lattice::from_generators(&[vec![2.0, 0.0], vec![0.7, 1.5]]).unwrap();
    let t = torus_spectrum(&lat, 12.0, DEFAULT_ENTRY_CAP).unwrap();
    let dual = lat.dual_matrix();
    let mut brute = 0;
    for a in -40i64..=40 {
        for b in -40i64..=40 {
            let v = &dual * nalgebra::DVector::from_vec(vec![a as f64, b as f64]);
            if v.norm() <= 12.0 {
                brute += 1;
            }
        }
    }
    assert_eq!(t.total_count(), brute);
}

#[test]
fn sphere_tables() {
    let s = sphere_spectrum(1.0, 0.0).unwrap();
    assert!(close(&s.entries, &[(0.0, 1)]));
    let s = sphere_spectrum(1.0, 2.0).unwrap();
    assert!(close(&s.entries, &[(0.0, 1), (2f64.sqrt(), 3)]));
    let big = sphere_spectrum(1.0, 30.0).unwrap();
    let half = sphere_spectrum(2.0, 15.0).unwrap();
    for (a, b) in big.entries.iter().zip(&half.entries) {
        assert!((a.0 / 2.0 - b.0).abs() < 1e-12 && a.1 == b.1);
    }
    for l in 1..20u64 {
        let lam = ((l * (l + 1)) as f64).sqrt() + 1e-7;
        assert_eq!(counting_function(&big, lam).unwrap() as u64, (l + 1) * (l + 1));
    }
}

#[test]
fn counting_beyond_cutoff_errors() {
    let e = counting_function(&torus(5.0), 6.0).unwrap_err();
    assert!(matches!(e, weylscope::Error::BeyondCutoff { .. }));
}

fn sphere_mode_error(cells: usize) -> f64 {
    let mat = sturm_liouville_matrix(&Profile::Sphere, 0, cells);
    let ev = mat.eigenvalues_below(7.0);
    (ev[1] - 2.0).abs()
}

#[test]
fn sturm_liouville_sphere_oracle() {
    let t = revolution_spectrum(&Profile::Sphere, RevolutionOptions { m_max: 10, cells: 2000 }, 8.0).unwrap();
    let l1 = t.entries[1].0;
    assert!((l1 - 2f64.sqrt()).abs() < 1e-3, "{l1}");
    assert!(t.entries[0].0.abs() < 1e-8 && t.entries[0].1 == 1);
    let ratio = sphere_mode_error(1000) / sphere_mode_error(2000);
    assert!((ratio - 4.0).abs() < 0.4, "{ratio}");
}

#[test]
fn revolution_sphere_agrees_with_exact_spectrum() {
    let exact = sphere_spectrum(1.0, 20.0).unwrap();
    let t = revolution_spectrum(&Profile::Sphere, default_revolution_options(&Profile::Sphere, 20.0), 20.0).unwrap();
    assert!(t.lambda_max > 15.0, "{}", t.lambda_max);
    let sl = t.expanded();
    let ex = exact.expanded();
    let n = counting_function(&t, t.lambda_max).unwrap();
    assert!(n <= ex.len());
    for j in 1..n {
        assert!((sl[j] - ex[j]).abs() <= 1e-3 * ex[j], "j={j} {} {}", sl[j], ex[j]);
    }
    for lam in [3.0, 7.7, 12.2] {
        let a = counting_function(&t, lam).unwrap();
        let b = counting_function(&exact, lam).unwrap();
        assert_eq!(a, b, "lambda {lam}");
    }
}

#[test]
fn revolution_rejects_coarse_mesh() {
    let e = revolution_spectrum(&Profile::Sphere, RevolutionOptions { m_max: 2, cells: 50 }, 5.0).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn weyl_leading_terms() {
    let t = torus(200.0);
    let (_, vb) = ManifoldModel::preset("torus-2pi").unwrap().phase_volumes().unwrap();
    let fit = weyl_fit(&t, 2, vb, 64).unwrap();
    assert!((fit.coefficient - PI).abs() < 1e-12);
    let last = fit.ratios.last().unwrap();
    assert!((last.1 - 1.0).abs() < 0.05);
    assert!(fit.remainder_sup.is_finite() && fit.remainder_sup <= 4.0, "{}", fit.remainder_sup);

    let s = sphere_spectrum(1.0, 200.0).unwrap();
    let (_, vb) = ManifoldModel::sphere(1.0).phase_volumes().unwrap();
    let fit = weyl_fit(&s, 2, vb, 64).unwrap();
    assert!((fit.coefficient - 1.0).abs() < 1e-12);
    let m = mean_leading_ratio(&s, 2, vb, 150.0, 200.0, 500).unwrap();
    assert!((m - 1.0).abs() < 0.05, "{m}");
}

#[test]
fn cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cache = SpectrumCache::new(dir.path());
    let model = ManifoldModel::preset("torus-2pi").unwrap();
    let (a, hit) = cache.get_or_compute(&model, 20.0).unwrap();
    assert!(!hit);
    let (b, hit) = cache.get_or_compute(&model, 20.0).unwrap();
    assert!(hit);
    assert_eq!(a, b);
    let text = a.to_cache_string();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CACHE_TAG));
    assert!(SpectrumTable::from_cache_string("garbage", "x").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn counting_is_monotone(a in 0.0..30.0f64, b in 0.0..30.0f64) {
        let t = torus(30.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(counting_function(&t, lo).unwrap() <= counting_function(&t, hi).unwrap());
        prop_assert_eq!(counting_function(&t, 0.0).unwrap(), 1);
    }
}
