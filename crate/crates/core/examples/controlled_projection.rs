// Subspaces that mix Hessian eigenvectors with random directions.
//
// A fraction γ of the `s` columns come from the top eigenvectors, so ρ rises
// from its random-subspace mean at γ = 0 to the intrinsic dimension at γ = 1.

use std::error::Error;

use subzero::perturbation::{expected_rho, ControlledSampler};
use subzero::rng::mix64;
use subzero::testbed::{generate_hessian, HessianSpec};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let h = generate_hessian(&HessianSpec {
        dim: 256,
        rank: 64,
        num_blocks: 1,
        max_eigenvals: vec![10.0],
        seed: 0,
    })?;
    println!("random subspace mean ρ = {:.3}, intdim = {:.3}", expected_rho(&h, 64.0)?, h.intdim()?);
    for gamma in [0.0, 0.2, 0.4, 0.7, 1.0] {
        let sampler = ControlledSampler::new(&h, 64, gamma)?;
        let n = 50;
        let mean = (0..n)
            .map(|k| sampler.sample(mix64(&[1, k])).map(|m| sampler.alignment(&m)))
            .sum::<Result<f64, _>>()?
            / n as f64;
        println!("γ = {gamma:.1}: {} eigenvectors, mean ρ = {mean:.3}", sampler.eigenvector_count());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
