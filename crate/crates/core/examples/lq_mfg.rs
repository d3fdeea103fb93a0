//! Solves the scalar linear-quadratic mean-field game and compares the fitted decoupling field
//! with the Riccati oracle.

use std::time::Instant;

use mkv_fbsde::control::{build_pontryagin_mfg, MfgSpec};
use mkv_fbsde::fbsde::{solve_long_horizon, InitialLaw, SolverParams};
use mkv_fbsde::field::Field;
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lq_oracle::{solve_riccati, LqKind, LqSpec};

fn main() -> mkv_fbsde::Result<()> {
    let lq = LqSpec::scalar(-0.5);
    let coeffs = build_pontryagin_mfg(MfgSpec::from_lq(&lq)?)?;
    let grid = TimeGrid::new(0.0, 1.0, 64)?;
    let params = SolverParams {
        particles: 8192,
        basis_degree: 1,
        mean_regressor: true,
        ..SolverParams::default()
    }
    .with_seed(7);
    let init = InitialLaw::gaussian(0.5, 1.0);

    let start = Instant::now();
    let (ens, field) = solve_long_horizon(&coeffs, &init, &grid, &params)?;
    let elapsed = start.elapsed();
    let oracle = solve_riccati(&lq, LqKind::Mfg, &grid)?;

    let mut worst: f64 = 0.0;
    for k in 0..=grid.steps() {
        let t = grid.time(k);
        let mu = ens.x_measure(k);
        for i in (0..ens.particles()).step_by(16) {
            let x = ens.x(k, i);
            let a = field.eval(t, x, &mu)[0];
            let b = oracle.oracle_field(t, x, &mu)?[0];
            worst = worst.max((a - b).abs() / (1.0 + x[0].abs()));
        }
    }
    println!("picard gaps: {:?}", field.diagnostics().picard_gaps);
    println!(
        "eta(0) = {:.6}, chi(0) = {:.6}",
        oracle.eta(0.0)[(0, 0)],
        oracle.chi(0.0)[(0, 0)]
    );
    println!(
        "coefficients at t=0 (1, x, mean): {:?}",
        field.coefficients(0)
    );
    println!("sup |U - U_oracle| / (1 + |x|) = {worst:.3e}");
    println!("solve time {:.2?}", elapsed);
    Ok(())
}
