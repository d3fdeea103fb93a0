//! Exact W₂ between empirical measures: sorted coupling in one dimension, optimal assignment
//! otherwise.

use mkv_fbsde::fbsde::InitialLaw;
use mkv_fbsde::measure::{coupled_distance, w2_distance, EmpiricalMeasure};

fn main() -> mkv_fbsde::Result<()> {
    let mu = EmpiricalMeasure::from_scalars(&[0.0, 1.0, 3.0])?;
    let nu = EmpiricalMeasure::from_scalars(&[2.5, -0.5, 1.5])?;
    println!(
        "1-d: W2 = {:.6}, index coupling = {:.6}",
        w2_distance(&mu, &nu)?,
        coupled_distance(&mu, &nu)?
    );

    let a = InitialLaw::Gaussian {
        mean: vec![0.0, 0.0],
        std: vec![1.0, 0.5],
    }
    .sample(64, 1)?;
    let b = InitialLaw::Gaussian {
        mean: vec![1.0, -1.0],
        std: vec![1.0, 0.5],
    }
    .sample(64, 2)?;
    println!("2-d, 64 atoms: W2 = {:.6}", w2_distance(&a, &b)?);

    // translations move W₂ by exactly the length of the shift
    let shifted = a.translated(&[3.0, 4.0]);
    println!(
        "translation by (3, 4): W2 = {:.12}",
        w2_distance(&a, &shifted)?
    );
    Ok(())
}
