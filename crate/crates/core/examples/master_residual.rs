//! Master-equation residual of the Riccati field and of a fitted decoupling field, broken down
//! into its six components.

use mkv_fbsde::catalog::Scenario;
use mkv_fbsde::fbsde::{solve_long_horizon, InitialLaw, SolverParams};
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lions::ItoSteps;
use mkv_fbsde::lq_oracle::{solve_riccati, LqKind, LqSpec};
use mkv_fbsde::master::master_residual;
use mkv_fbsde::measure::EmpiricalMeasure;

fn main() -> mkv_fbsde::Result<()> {
    let lq = LqSpec::scalar(-0.5);
    let scn = Scenario::lq(lq.clone(), LqKind::Mfg)?;
    let grid = TimeGrid::new(0.0, 1.0, 32)?;
    let steps = ItoSteps {
        h_t: 1e-3,
        h_x: 1e-3,
        h_mu: 1e-4,
    };
    let oracle = solve_riccati(&lq, LqKind::Mfg, &grid)?;
    let params = SolverParams {
        particles: 2048,
        basis_degree: 1,
        mean_regressor: true,
        ..SolverParams::default()
    }
    .with_seed(1);
    let (ens, field) = solve_long_horizon(
        scn.coefficients(),
        &InitialLaw::gaussian(0.0, 1.0),
        &grid,
        &params,
    )?;

    let k = 16;
    let snapshot = ens.x_measure(k);
    let mu = EmpiricalMeasure::from_flat(1, snapshot.as_flat()[..64].to_vec())?;
    println!("t = {}, 64 atoms, m = {:.4}", grid.time(k), mu.mean()[0]);
    for x in [-1.0, 0.0, 1.0] {
        let o = master_residual(&oracle, scn.coefficients(), grid.time(k), &[x], &mu, steps)?;
        let s = master_residual(&field, scn.coefficients(), grid.time(k), &[x], &mu, steps)?;
        println!(
            "x = {x:>4}: oracle total {:.2e}, solver total {:.2e}",
            o.total[0], s.total[0]
        );
        println!(
            "          solver terms dt {:.4} drift {:.4} trace {:.4} driver {:.4} mu-drift {:.4} mu-trace {:.4}",
            s.dt_term[0], s.drift_term[0], s.trace_term[0], s.driver_term[0], s.measure_drift_term[0], s.measure_trace_term[0]
        );
    }
    Ok(())
}
