use mkv_fbsde::measure::EmpiricalMeasure;
use mkv_fbsde::scenario::{
    check_convexity, check_lasry_lions, convexity_samples, estimate_lipschitz, lasry_lions_pairing,
    measure_pairs, ClosureCoefficients, SeededSampler,
};

fn linear_coefficients() -> ClosureCoefficients {
    ClosureCoefficients::new("linear", 1, 1)
        .drift(|x, _, _, nu| vec![2.0 * x[0] - 3.0 * nu.mean()[0]])
        .driver(|_, y, z, _| vec![0.5 * y[0] + z[0]])
        .terminal(|x, _| vec![x[0].sin()])
}

#[test]
fn linear_coefficients_give_their_largest_slope() {
    let rep = estimate_lipschitz(&linear_coefficients(), &SeededSampler::new(4), 200).unwrap();
    let l = &rep.lipschitz_l;
    assert!((l["drift"] - 3.0).abs() < 1e-9, "{l:?}");
    assert!((l["driver"] - 1.0).abs() < 1e-9, "{l:?}");
    assert!(l["terminal"] <= 1.0 && l["terminal"] > 0.9, "{l:?}");
    assert!((rep.lipschitz() - 3.0).abs() < 1e-9);
}

#[test]
fn lipschitz_estimate_is_monotone_in_sample_count() {
    let c = linear_coefficients();
    let s = SeededSampler::new(8);
    let a = estimate_lipschitz(&c, &s, 20).unwrap().lipschitz_l["terminal"];
    let b = estimate_lipschitz(&c, &s, 80).unwrap().lipschitz_l["terminal"];
    assert!(a <= b);
}

#[test]
fn convexity_with_state_cross_term_matches_exact_quotient() {
    let samples = convexity_samples(1, 1, 1, 64, &SeededSampler::new(2)).unwrap();
    let h = |x: &[f64], _: &EmpiricalMeasure, y: &[f64], _: &[f64], a: &[f64]| {
        y[0] * a[0] + 0.5 * a[0] * a[0] + x[0] * a[0]
    };
    let exact = samples
        .iter()
        .map(|s| {
            let (dx, da) = (s.x2[0] - s.x[0], s.alpha2[0] - s.alpha[0]);
            0.5 + dx / da
        })
        .fold(f64::INFINITY, f64::min);
    let est = check_convexity(&h, &samples, 1e-4).unwrap();
    assert!(exact < 0.0);
    assert!(
        (est - exact).abs() < 1e-6 * (1.0 + exact.abs()),
        "{est} vs {exact}"
    );
}

#[test]
fn affine_hamiltonian_has_no_convexity() {
    let samples = convexity_samples(2, 2, 2, 32, &SeededSampler::new(3)).unwrap();
    let h = |x: &[f64], _: &EmpiricalMeasure, y: &[f64], _: &[f64], a: &[f64]| {
        y[0] * a[0] + y[1] * a[1] + x[0] - 2.0 * x[1]
    };
    assert!(check_convexity(&h, &samples, 1e-4).unwrap().abs() < 1e-8);
    let q = |_: &[f64], _: &EmpiricalMeasure, _: &[f64], _: &[f64], a: &[f64]| {
        0.5 * (a[0] * a[0] + a[1] * a[1])
    };
    assert!((check_convexity(&q, &samples, 1e-4).unwrap() - 0.5).abs() < 1e-7);
}

#[test]
fn lasry_lions_pairings_have_closed_forms() {
    let pairs = measure_pairs(1, 32, 12, &SeededSampler::new(6)).unwrap();
    let indep = |x: &[f64], _: &EmpiricalMeasure| x[0].cos();
    assert_eq!(check_lasry_lions(&indep, &pairs).unwrap(), 0.0);
    let aligned = |x: &[f64], m: &EmpiricalMeasure| x[0] * m.mean()[0];
    let against = |x: &[f64], m: &EmpiricalMeasure| x[0] * x[0] - m.mean()[0] * x[0];
    for (mu, nu) in &pairs {
        let gap = mu.mean()[0] - nu.mean()[0];
        assert!((lasry_lions_pairing(&aligned, mu, nu).unwrap() - gap * gap).abs() < 1e-12);
        assert!((lasry_lions_pairing(&against, mu, nu).unwrap() + gap * gap).abs() < 1e-12);
    }
    assert!(check_lasry_lions(&against, &pairs).unwrap() < 0.0);
}

#[test]
fn lasry_lions_rejects_mismatched_pairs() {
    let a = EmpiricalMeasure::from_scalars(&[0.0, 1.0]).unwrap();
    let b = EmpiricalMeasure::from_scalars(&[0.5]).unwrap();
    let h = |x: &[f64], _: &EmpiricalMeasure| x[0];
    assert!(lasry_lions_pairing(&h, &a, &b).is_err());
    assert!(check_lasry_lions(&h, &[]).is_err());
}
