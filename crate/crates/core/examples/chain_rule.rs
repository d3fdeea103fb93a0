//! Chain rule along particle flows for U(μ) = ∫|v|² dμ: the time integral of the measure
//! generator against the observed change of U, for a Brownian and an Ornstein–Uhlenbeck flow.

use mkv_fbsde::fbsde::InitialLaw;
use mkv_fbsde::grid::TimeGrid;
use mkv_fbsde::lions::{chain_rule_residual, default_step, second_moment_functional, ParticleFlow};
use mkv_fbsde::measure::EmpiricalMeasure;
use mkv_fbsde::rng::NoiseMode;

fn flow(n: usize, steps: usize, ou: bool, noise: NoiseMode) -> mkv_fbsde::Result<ParticleFlow> {
    ParticleFlow::simulate(
        InitialLaw::gaussian(0.0, 1.0).sample(n, 1)?,
        TimeGrid::new(0.0, 1.0, steps)?,
        move |x: &[f64], _: &EmpiricalMeasure| vec![if ou { -x[0] } else { 0.0 }],
        |_: &[f64], _: &EmpiricalMeasure| vec![1.0],
        2,
        noise,
    )
}

fn main() -> mkv_fbsde::Result<()> {
    let u = second_moment_functional();
    for noise in [NoiseMode::Plain, NoiseMode::Orthogonal] {
        let f = flow(4096, 64, false, noise)?;
        let r = chain_rule_residual(&u, &f, default_step(&f.states[0]))?;
        println!(
            "brownian, {noise:?}: observed {:.5} predicted {:.5} residual {:.2e}",
            r.observed, r.predicted, r.residual
        );
    }

    let mut prev = None;
    for (steps, n) in [(16, 1024), (32, 4096), (64, 16384)] {
        let f = flow(n, steps, true, NoiseMode::Orthogonal)?;
        let r = chain_rule_residual(&u, &f, default_step(&f.states[0]))?;
        let decay = (-2.0f64).exp();
        let exact = decay * f.states[0].second_moment() + 0.5 * (1.0 - decay);
        let m2 = f.states[steps].second_moment();
        let ratio = prev.map_or("-".to_string(), |p: f64| format!("{:.3}", r.residual / p));
        println!("ou K={steps:>2} N={n:>5}: m2(1) = {m2:.4} (exact {exact:.4}), residual {:.3e}, ratio {ratio}", r.residual);
        prev = Some(r.residual);
    }
    Ok(())
}
