use mkv_fbsde::catalog::Scenario;
use mkv_fbsde::field::FnField;
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lions::ItoSteps;
use mkv_fbsde::lq_oracle::{solve_riccati, LqKind, LqSpec};
use mkv_fbsde::master::{forward_form_residual, master_residual, MeasureLift, TimeReversed};
use mkv_fbsde::measure::EmpiricalMeasure;
use mkv_fbsde::scenario::ClosureCoefficients;

fn steps() -> ItoSteps {
    ItoSteps {
        h_t: 1e-3,
        h_x: 1e-3,
        h_mu: 1e-3,
    }
}

fn sample_measure() -> EmpiricalMeasure {
    EmpiricalMeasure::from_scalars(&[-1.1, -0.3, 0.2, 0.5, 0.9, 1.6]).unwrap()
}

#[test]
fn lq_oracle_solves_master_equation() {
    for kind in [LqKind::Mfg, LqKind::Mkv] {
        let spec = LqSpec::scalar(-0.5);
        let scn = Scenario::lq(spec.clone(), kind).unwrap();
        let oracle = solve_riccati(&spec, kind, &TimeGrid::new(0.0, 1.0, 16).unwrap()).unwrap();
        let mu = sample_measure();
        for t in [0.125, 0.5, 0.875] {
            for x in [-1.5, 0.0, 1.2] {
                let r =
                    master_residual(&oracle, scn.coefficients(), t, &[x], &mu, steps()).unwrap();
                assert!(r.max_abs() < 1e-4, "{kind:?} t {t} x {x}: {r:?}");
            }
        }
    }
}

#[test]
fn empirical_square_mean_includes_self_interaction() {
    // For N particles driven by independent noise, E[m_T²] = m² + (T − t)/N solves the finite system.
    let c = ClosureCoefficients::new("square_mean", 1, 1)
        .terminal(|_, mu| vec![mu.mean()[0] * mu.mean()[0]]);
    let mu = sample_measure();
    let n = mu.len() as f64;
    let u = FnField::new(
        1,
        1,
        (0.0, 1.0),
        move |t, _: &[f64], mu: &EmpiricalMeasure| {
            vec![mu.mean()[0] * mu.mean()[0] + (1.0 - t) / n]
        },
    );
    let r = master_residual(&u, &c, 0.3, &[0.4], &mu, steps()).unwrap();
    assert!(r.max_abs() < 1e-6, "{r:?}");
    assert!((r.measure_trace_term[0] - 1.0 / n).abs() < 1e-6);
}

#[test]
fn forward_form_is_minus_master_residual_under_time_reversal() {
    let c = ClosureCoefficients::new("mean_reverting", 1, 1)
        .drift(|x, _, _, nu| vec![nu.mean()[0] - x[0]])
        .sigma_scalar(0.5)
        .driver(|_, y, _, nu| vec![y[0] * nu.mean()[0]])
        .terminal(|x, _| vec![x[0]]);
    let u = FnField::new(1, 1, (0.0, 2.0), |t, x: &[f64], mu: &EmpiricalMeasure| {
        vec![x[0].sin() * (1.0 + t) + mu.mean()[0] * mu.mean()[0] * t]
    });
    let rev = TimeReversed::new(&u);
    let mu = sample_measure();
    for t in [0.4, 1.0, 1.7] {
        for x in [-0.8, 0.6] {
            let back = master_residual(&u, &c, t, &[x], &mu, steps()).unwrap();
            let fwd = forward_form_residual(&rev, &c, 2.0 - t, &[x], &mu, steps()).unwrap();
            assert!(back.max_abs() > 1e-2);
            assert!(
                (fwd[0] + back.total[0]).abs() < 1e-8,
                "{} vs {}",
                fwd[0],
                back.total[0]
            );
        }
    }
}

#[test]
fn breakdown_components_sum_to_total() {
    let scn = Scenario::lq(LqSpec::scalar(0.3), LqKind::Mfg).unwrap();
    let u = FnField::new(1, 1, (0.0, 1.0), |t, x: &[f64], mu: &EmpiricalMeasure| {
        vec![x[0] * t + mu.mean()[0]]
    });
    let r = master_residual(
        &u,
        scn.coefficients(),
        0.5,
        &[0.7],
        &sample_measure(),
        steps(),
    )
    .unwrap();
    let sum = r.dt_term[0]
        + r.drift_term[0]
        + r.trace_term[0]
        + r.driver_term[0]
        + r.measure_drift_term[0]
        + r.measure_trace_term[0];
    assert_eq!(sum, r.total[0]);
}

#[test]
fn lift_pairs_atoms_with_field_values() {
    let u = FnField::new(1, 1, (0.0, 1.0), |_, x: &[f64], mu: &EmpiricalMeasure| {
        vec![2.0 * x[0] - mu.mean()[0]]
    });
    let mu = sample_measure();
    let lift = MeasureLift::new(&u, 0.0, &mu).unwrap();
    let m = mu.mean()[0];
    for i in 0..mu.len() {
        let a = lift.lifted.atom(i);
        assert_eq!(a[0], mu.atom(i)[0]);
        assert!((a[1] - (2.0 * a[0] - m)).abs() < 1e-15);
    }
}

#[test]
fn out_of_domain_times_are_rejected() {
    let c = ClosureCoefficients::new("constant", 1, 1).terminal(|_, _| vec![0.0]);
    let u = FnField::new(1, 1, (0.0, 1.0), |_, _: &[f64], _: &EmpiricalMeasure| {
        vec![0.0]
    });
    assert!(master_residual(&u, &c, 1.5, &[0.0], &sample_measure(), steps()).is_err());
    assert!(master_residual(&u, &c, 0.5, &[0.0, 1.0], &sample_measure(), steps()).is_err());
}
