//! Long horizon: the solver splits [0, T] into blocks, solves each by Picard iteration and
//! sweeps until the block boundaries agree.

use mkv_fbsde::catalog::Scenario;
use mkv_fbsde::checks::oracle_error;
use mkv_fbsde::fbsde::{solve_long_horizon, InitialLaw, SolverParams};
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lq_oracle::{solve_riccati, LqKind, LqSpec};

fn main() -> mkv_fbsde::Result<()> {
    let lq = LqSpec::scalar(-0.5);
    let scn = Scenario::lq(lq.clone(), LqKind::Mfg)?;
    let grid = TimeGrid::new(0.0, 3.0, 48)?;
    let params = SolverParams {
        particles: 2048,
        basis_degree: 1,
        mean_regressor: true,
        initial_block: Some(0.75),
        ..SolverParams::default()
    }
    .with_seed(5);
    let (ens, field) = solve_long_horizon(
        scn.coefficients(),
        &InitialLaw::gaussian(0.5, 1.0),
        &grid,
        &params,
    )?;
    let diag = field.diagnostics();
    println!("blocks (node ranges): {:?}", diag.blocks);
    println!("sweep gaps: {:?}", diag.sweep_gaps);
    let oracle = solve_riccati(&lq, LqKind::Mfg, &grid)?;
    println!(
        "sup |U - U_oracle| / (1 + |x|) = {:.3e}",
        oracle_error(&field, &ens, &oracle)?
    );
    Ok(())
}
