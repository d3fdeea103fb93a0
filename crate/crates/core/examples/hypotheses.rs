//! Sampled checks of the standing hypotheses: Lipschitz constants, strong convexity of the
//! Hamiltonian and Lasry–Lions monotonicity for attractive and repulsive tracking costs.

use mkv_fbsde::catalog::Scenario;
use mkv_fbsde::control::sampled_control_convexity;
use mkv_fbsde::lq_oracle::{LqKind, LqSpec};
use mkv_fbsde::measure::EmpiricalMeasure;
use mkv_fbsde::scenario::{check_lasry_lions, estimate_lipschitz, measure_pairs, SeededSampler};

fn main() -> mkv_fbsde::Result<()> {
    let sampler = SeededSampler::new(9);
    let pairs = measure_pairs(1, 16, 32, &sampler)?;
    for rho in [-1.0, 1.0] {
        let scn = Scenario::lq(LqSpec::scalar(rho), LqKind::Mfg)?;
        let rep = estimate_lipschitz(scn.coefficients(), &sampler, 256)?;
        let f0 = scn.running_cost.as_ref().expect("tracking cost");
        let ll = check_lasry_lions(&|x: &[f64], m: &EmpiricalMeasure| f0.value(x, m), &pairs)?;
        let lambda =
            sampled_control_convexity(scn.pontryagin().expect("control scenario").spec(), 256, 9)?;
        println!("rho = {rho:+}: lipschitz {:?}", rep.lipschitz_l);
        println!(
            "          convexity {lambda:.4}, Lasry-Lions minimum {ll:.4e} ({})",
            if ll >= 0.0 { "monotone" } else { "fails" }
        );
    }
    Ok(())
}
