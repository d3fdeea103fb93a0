use mkv_fbsde::field::FnField;
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lions::{
    chain_rule_residual, default_step, full_ito_residual, l2_norm_functional, lions_derivative,
    lions_derivative_atom, second_moment_functional, squared_mean_functional, ItoSteps,
    ParticleFlow,
};
use mkv_fbsde::measure::EmpiricalMeasure;
use mkv_fbsde::rng::NoiseMode;

fn gaussian(n: usize, seed: u64) -> EmpiricalMeasure {
    mkv_fbsde::fbsde::InitialLaw::gaussian(0.5, 1.0)
        .sample(n, seed)
        .unwrap()
}

fn ou_flow(n: usize, steps: usize, noise: NoiseMode) -> ParticleFlow {
    ParticleFlow::simulate(
        gaussian(n, 5),
        TimeGrid::new(0.0, 1.0, steps).unwrap(),
        |x: &[f64], _: &EmpiricalMeasure| vec![-x[0]],
        |_: &[f64], _: &EmpiricalMeasure| vec![1.0],
        17,
        noise,
    )
    .unwrap()
}

#[test]
fn l2_norm_derivative_matches_analytic_with_second_order_stencil() {
    let mu = EmpiricalMeasure::from_scalars(&[0.4, -1.3, 2.2, 0.9, -0.1]).unwrap();
    let norm = mu.second_moment().sqrt();
    let err = |h: f64| {
        let est = lions_derivative(&l2_norm_functional(), &mu, h).unwrap();
        (0..mu.len())
            .map(|i| (est.values[i][0] - mu.atom(i)[0] / norm).abs())
            .fold(0.0, f64::max)
    };
    assert!(err(1e-5) < 1e-8);
    let ratio = err(0.04) / err(0.02);
    assert!((ratio - 4.0).abs() < 0.2, "{ratio}");
}

#[test]
fn squared_mean_derivative_in_two_dimensions() {
    let mu = EmpiricalMeasure::new(vec![vec![1.0, -0.5], vec![0.2, 2.0], vec![-0.7, 0.1]]).unwrap();
    let m = mu.mean().to_vec();
    let est = lions_derivative(&squared_mean_functional(2), &mu, 1e-3).unwrap();
    for row in &est.values {
        assert!((row[0] - 2.0 * m[0]).abs() < 1e-9 && (row[1] - 2.0 * m[1]).abs() < 1e-9);
    }
    let one = lions_derivative_atom(&squared_mean_functional(2), &mu, 1, 1e-3).unwrap();
    assert_eq!(one, est.values[1]);
}

#[test]
fn brownian_second_moment_chain_rule_is_exact_with_orthogonal_noise() {
    let flow = ParticleFlow::simulate(
        gaussian(1024, 3),
        TimeGrid::new(0.0, 1.0, 16).unwrap(),
        |_: &[f64], _: &EmpiricalMeasure| vec![0.0],
        |_: &[f64], _: &EmpiricalMeasure| vec![1.0],
        9,
        NoiseMode::Orthogonal,
    )
    .unwrap();
    let res = chain_rule_residual(
        &second_moment_functional(),
        &flow,
        default_step(&flow.states[0]),
    )
    .unwrap();
    assert!((res.predicted - 1.0).abs() < 1e-6, "{res:?}");
    assert!(res.residual < 1e-6, "{res:?}");
}

#[test]
fn ou_chain_rule_residual_is_first_order_in_time() {
    let mut res = Vec::new();
    for k in [8, 16, 32] {
        let flow = ou_flow(2048, k, NoiseMode::Orthogonal);
        res.push(
            chain_rule_residual(
                &second_moment_functional(),
                &flow,
                default_step(&flow.states[0]),
            )
            .unwrap()
            .residual,
        );
    }
    for w in res.windows(2) {
        let ratio = w[1] / w[0];
        assert!((0.35..0.65).contains(&ratio), "{res:?}");
    }
}

#[test]
fn ito_expansion_of_time_only_field_is_exact() {
    let flow = ou_flow(64, 8, NoiseMode::Plain);
    let v = FnField::new(1, 1, (0.0, 1.0), |t, _: &[f64], _: &EmpiricalMeasure| {
        vec![3.0 * t + 1.0]
    });
    assert!(full_ito_residual(&v, &flow, None, ItoSteps::default()).unwrap() < 1e-9);
}

#[test]
fn ito_expansion_of_state_is_exact_along_each_path() {
    let flow = ou_flow(64, 8, NoiseMode::Plain);
    let v = FnField::new(1, 1, (0.0, 1.0), |_, x: &[f64], _: &EmpiricalMeasure| {
        vec![x[0]]
    });
    for p in [0, 17, 63] {
        assert!(full_ito_residual(&v, &flow, Some(p), ItoSteps::default()).unwrap() < 1e-9);
    }
    assert!(full_ito_residual(&v, &flow, Some(64), ItoSteps::default()).is_err());
}

#[test]
fn ito_expansion_of_state_times_mean() {
    // With centred noise the mean moves by its drift alone; the only residual left is the
    // ensemble average of ΔX·Δm, which is Σ (mean drift · dt)².
    let flow = ou_flow(256, 16, NoiseMode::Centered);
    let v = FnField::new(1, 1, (0.0, 1.0), |_, x: &[f64], mu: &EmpiricalMeasure| {
        vec![x[0] * mu.mean()[0]]
    });
    let dt = flow.grid.dt();
    let expected: f64 = flow
        .drift
        .iter()
        .map(|b| {
            let m = b.iter().sum::<f64>() / b.len() as f64;
            (m * dt) * (m * dt)
        })
        .sum();
    let steps = ItoSteps {
        h_t: 1e-4,
        h_x: 1e-4,
        h_mu: 1e-3,
    };
    let r = full_ito_residual(&v, &flow, None, steps).unwrap();
    assert!((r - expected).abs() < 1e-7, "{r} vs {expected}");
}
