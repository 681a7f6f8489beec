use proptest::prelude::*;
use weylscope::geometry::ManifoldModel;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn cosymbol_is_quadratic_in_xi(
        which in 0usize..5, u in 0.2..2.9f64, v in -3.0..3.0f64,
        k0 in -2.0..2.0f64, k1 in -2.0..2.0f64, t in 0.1..10.0f64,
    ) {
        let name = ["torus-2pi", "sphere", "ellipsoid", "peanut", "plane"][which];
        let model = ManifoldModel::preset(name).unwrap();
        let x = if name == "plane" { [u - 1.5, v / 3.0] } else { [u, v] };
        let a = model.cosymbol(&x, &[k0, k1]).unwrap();
        let b = model.cosymbol(&x, &[t * k0, t * k1]).unwrap();
        prop_assert!((b - t * t * a).abs() <= 1e-12 * b.abs().max(1e-300));
    }
}
