//! Monte Carlo value of a player when the population follows the feedback of the Riccati field,
//! compared with the closed-form value function.

use mkv_fbsde::catalog::Scenario;
use mkv_fbsde::control::{value_function, McParams};
use mkv_fbsde::fbsde::InitialLaw;
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lq_oracle::{solve_riccati, LqKind, LqSpec};

fn main() -> mkv_fbsde::Result<()> {
    let lq = LqSpec::scalar(-0.5);
    let scn = Scenario::lq(lq.clone(), LqKind::Mfg)?;
    let oracle = solve_riccati(&lq, LqKind::Mfg, &TimeGrid::new(0.0, 1.0, 64)?)?;
    let mu = InitialLaw::gaussian(0.5, 1.0).sample(1024, 2)?;
    let mc = McParams {
        paths: 16384,
        steps: 128,
        seed: 6,
        ..McParams::default()
    };
    for x in [-1.0, 0.0, 1.5] {
        let est = value_function(
            scn.pontryagin().expect("control scenario"),
            &oracle,
            0.0,
            &[x],
            &mu,
            &mc,
        )?;
        let exact = oracle.oracle_value(0.0, &[x], &mu)?;
        println!(
            "x = {x:>4}: Monte Carlo {:.4} ± {:.4}, closed form {exact:.4}",
            est.value, est.std_error
        );
    }
    Ok(())
}
