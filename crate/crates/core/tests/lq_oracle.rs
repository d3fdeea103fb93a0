use mkv_fbsde::field::Field;
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lq_oracle::{solve_riccati, LqKind, LqSpec};
use mkv_fbsde::measure::EmpiricalMeasure;
use nalgebra::DMatrix;

/// Backward solution of `S' = S² − a²` with `S(T) = s_t`, at time-to-go `tau`.
fn riccati_closed(a2: f64, s_t: f64, tau: f64) -> f64 {
    let a = a2.sqrt();
    let k = (s_t - a) / (s_t + a);
    let q = k * (-2.0 * a * tau).exp();
    a * (1.0 + q) / (1.0 - q)
}

fn grid(t_end: f64) -> TimeGrid {
    TimeGrid::new(0.0, t_end, 32).unwrap()
}

#[test]
fn scalar_mfg_mean_coefficient_matches_closed_form() {
    for rho in [-0.5, 0.3, 0.8] {
        let sol = solve_riccati(&LqSpec::scalar(rho), LqKind::Mfg, &grid(2.0)).unwrap();
        for t in [0.0, 0.37, 1.2, 2.0] {
            assert!((sol.eta(t)[(0, 0)] - 1.0).abs() < 1e-12);
            let s = riccati_closed(1.0 - rho, 1.0 - rho, 2.0 - t);
            let chi = sol.chi(t)[(0, 0)];
            assert!(
                (1.0 + chi - s).abs() < 1e-9,
                "rho {rho} t {t}: {chi} vs {}",
                s - 1.0
            );
        }
    }
}

#[test]
fn scalar_mkv_mean_coefficient_matches_closed_form() {
    for rho in [-0.5, 0.4] {
        let sol = solve_riccati(&LqSpec::scalar(rho), LqKind::Mkv, &grid(1.5)).unwrap();
        let a2 = (1.0 - rho) * (1.0 - rho);
        for t in [0.0, 0.5, 1.5] {
            let s = riccati_closed(a2, a2, 1.5 - t);
            assert!((1.0 + sol.chi(t)[(0, 0)] - s).abs() < 1e-9);
        }
    }
}

#[test]
fn diagonal_system_decouples_per_coordinate() {
    let (q, qg, rho) = ([1.0, 2.0], [0.5, 1.5], -0.25);
    let sol = solve_riccati(&LqSpec::diagonal(&q, &qg, rho), LqKind::Mfg, &grid(1.0)).unwrap();
    for t in [0.0, 0.6] {
        let (eta, chi) = (sol.eta(t), sol.chi(t));
        for i in 0..2 {
            let e = riccati_closed(q[i], qg[i], 1.0 - t);
            let s = riccati_closed(q[i] * (1.0 - rho), qg[i] * (1.0 - rho), 1.0 - t);
            assert!((eta[(i, i)] - e).abs() < 1e-9);
            assert!((eta[(i, i)] + chi[(i, i)] - s).abs() < 1e-9);
        }
        assert!(eta[(0, 1)].abs() < 1e-14 && chi[(1, 0)].abs() < 1e-14);
    }
}

#[test]
fn mean_shift_moves_field_by_chi() {
    let sol = solve_riccati(&LqSpec::scalar(-0.5), LqKind::Mfg, &grid(1.0)).unwrap();
    let mu = EmpiricalMeasure::from_scalars(&[-0.4, 0.1, 0.9]).unwrap();
    let c = 0.75;
    for t in [0.0, 0.45] {
        let a = sol.oracle_field(t, &[0.3], &mu).unwrap()[0];
        let b = sol.oracle_field(t, &[0.3], &mu.translated(&[c])).unwrap()[0];
        assert!((b - a - sol.chi(t)[(0, 0)] * c).abs() < 1e-12);
    }
}

#[test]
fn value_at_horizon_is_terminal_cost() {
    let rho = -0.5;
    let sol = solve_riccati(&LqSpec::scalar(rho), LqKind::Mfg, &grid(1.0)).unwrap();
    let mu = EmpiricalMeasure::from_scalars(&[0.2, 1.4]).unwrap();
    let m = mu.mean()[0];
    for x in [-1.0, 0.0, 2.5] {
        let g = 0.5 * (x - rho * m) * (x - rho * m);
        assert!((sol.oracle_value(1.0, &[x], &mu).unwrap() - g).abs() < 1e-12);
    }
}

#[test]
fn expensive_control_without_running_cost_keeps_terminal_value() {
    let mut spec = LqSpec::scalar(0.0);
    spec.q = DMatrix::from_element(1, 1, 0.0);
    spec.r = DMatrix::from_element(1, 1, 1e4);
    let mu = EmpiricalMeasure::from_scalars(&[0.5]).unwrap();
    // without noise V(t, x) -> ½x²; unit noise adds the heat term ½(T − t)
    spec.sigma = DMatrix::from_element(1, 1, 0.0);
    let quiet = solve_riccati(&spec, LqKind::Mfg, &grid(1.0)).unwrap();
    spec.sigma = DMatrix::from_element(1, 1, 1.0);
    let noisy = solve_riccati(&spec, LqKind::Mfg, &grid(1.0)).unwrap();
    for x in [-2.0, 0.5, 1.0] {
        let v = quiet.oracle_value(0.0, &[x], &mu).unwrap();
        assert!((v - 0.5 * x * x).abs() < 1e-3, "{v}");
        let v = noisy.oracle_value(0.0, &[x], &mu).unwrap();
        assert!((v - 0.5 * x * x - 0.5).abs() < 1e-3, "{v}");
    }
}

#[test]
fn value_gradient_is_the_mfg_field() {
    let sol = solve_riccati(&LqSpec::scalar(-0.5), LqKind::Mfg, &grid(1.0)).unwrap();
    let v = sol.value_field();
    let mu = EmpiricalMeasure::from_scalars(&[-0.3, 0.8, 1.1]).unwrap();
    let h = 1e-5;
    for t in [0.0, 0.5] {
        for x in [-1.0, 0.4] {
            let dv = (v.eval(t, &[x + h], &mu)[0] - v.eval(t, &[x - h], &mu)[0]) / (2.0 * h);
            assert!((dv - sol.oracle_field(t, &[x], &mu).unwrap()[0]).abs() < 1e-7);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = LqSpec::scalar(0.0);
    spec.r = DMatrix::from_element(1, 1, -1.0);
    assert!(solve_riccati(&spec, LqKind::Mfg, &grid(1.0)).is_err());
    let mut spec = LqSpec::scalar(0.0);
    spec.q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    assert!(solve_riccati(&spec, LqKind::Mfg, &grid(1.0)).is_err());
}
