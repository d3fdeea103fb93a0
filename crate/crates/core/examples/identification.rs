//! Solves the scalar linear-quadratic control problem of McKean–Vlasov type and checks the
//! identification of the decoupling field with the derivatives of the value function, for
//! both the game and the control problem.

use mkv_fbsde::catalog::Scenario;
use mkv_fbsde::checks::oracle_error;
use mkv_fbsde::control::{identification_check, ProblemKind};
use mkv_fbsde::fbsde::{solve_long_horizon, InitialLaw, SolverParams};
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lq_oracle::{solve_riccati, LqKind, LqSpec};

fn main() -> mkv_fbsde::Result<()> {
    let lq = LqSpec::scalar(-0.5);
    let grid = TimeGrid::new(0.0, 1.0, 32)?;
    let params = SolverParams {
        particles: 4096,
        basis_degree: 1,
        mean_regressor: true,
        ..SolverParams::default()
    }
    .with_seed(3);
    let law = InitialLaw::gaussian(0.5, 1.0);

    for (kind, pk) in [
        (LqKind::Mfg, ProblemKind::Mfg),
        (LqKind::Mkv, ProblemKind::Mkv),
    ] {
        let scn = Scenario::lq(lq.clone(), kind)?;
        let (ens, field) = solve_long_horizon(scn.coefficients(), &law, &grid, &params)?;
        let oracle = solve_riccati(&lq, kind, &grid)?;
        let v = oracle.value_field();
        let mut worst: f64 = 0.0;
        for k in [0, 8, 16, 24] {
            let mu = law.sample(32, 10 + k as u64)?;
            for i in [0, 7, 19] {
                let x = mu.atom(i).to_vec();
                worst = worst.max(identification_check(
                    pk,
                    &v,
                    &field,
                    grid.time(k),
                    &x,
                    &mu,
                    1e-3,
                    1e-4,
                )?);
            }
        }
        println!(
            "{kind:?}: chi(0) = {:.5}, field vs oracle {:.2e}, identification {:.2e}",
            oracle.chi(0.0)[(0, 0)],
            oracle_error(&field, &ens, &oracle)?,
            worst
        );
    }
    Ok(())
}
