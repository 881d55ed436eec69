// Alignment ρ of the three perturbation ensembles against one Hessian.
//
// All three share the mean `s·Tr(H)/(d·λ_max)` but differ in spread: block
// masks on a heterogeneous Hessian swing far more than dense subspaces.

use std::error::Error;

use subzero::analysis::Summary;
use subzero::perturbation::{expected_rho, rho_distribution, Ensemble};
use subzero::testbed::heterogeneous_block_hessian;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let h = heterogeneous_block_hessian(256, 8, 8, &[10.0, 40.0, 70.0, 100.0], 3)?;
    for s in [16.0, 64.0] {
        println!("s = {s}: expected ρ = {:.4}", expected_rho(&h, s)?);
        for ens in Ensemble::ALL {
            let rhos: Vec<f64> = rho_distribution(ens, &h, s, 300, 1)?.iter().map(|a| a.rho).collect();
            let sm = Summary::of(&rhos)?;
            println!("  {ens:<16} mean {:.4} ± {:.4}  var {:.4}", sm.mean, sm.std_err(), sm.variance);
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
