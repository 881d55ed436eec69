// Exact upper-tail probability of ρ for block masks, next to a Monte Carlo estimate.

use std::error::Error;
use std::sync::Arc;

use subzero::perturbation::{alignment_rho, block_tail_probability, expected_rho, sample_block_sparse, BlockPartition};
use subzero::rng::mix64;
use subzero::testbed::heterogeneous_block_hessian;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let h = heterogeneous_block_hessian(128, 8, 4, &[10.0, 40.0, 70.0, 100.0], 5)?;
    let partition = Arc::new(BlockPartition::equal(128, 8)?);
    let mean = expected_rho(&h, 16.0)?;
    for factor in [0.5, 1.0, 1.5, 2.0] {
        let threshold = factor * mean;
        let exact = block_tail_probability(&h, &partition, threshold)?.value();
        let draws = 4000u64;
        let hits = (0..draws)
            .filter(|&k| {
                let m = sample_block_sparse(&partition, mix64(&[9, k])).expect("valid partition");
                alignment_rho(&m, &h).expect("matching dims") >= threshold
            })
            .count();
        println!(
            "P(ρ ≥ {threshold:.3}) exact {exact:.4}, sampled {:.4}",
            hits as f64 / draws as f64
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
