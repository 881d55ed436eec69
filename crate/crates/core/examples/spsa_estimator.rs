// Two-point SPSA estimates on a quadratic.

use std::error::Error;
use std::sync::Arc;

use subzero::linalg::{dot, SymMatrix};
use subzero::optim::spsa_gradient;
use subzero::perturbation::{sample_low_rank, Perturbation};
use subzero::rng::{mix64, GaussianStream};
use subzero::testbed::{Hessian, QuadraticObjective};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let d = 6;
    let diag: Vec<f64> = (1..=d).map(|i| i as f64).collect();
    let h = Hessian::from_matrix(SymMatrix::from_diag(&diag))?;
    let obj = QuadraticObjective::new(Arc::new(h));
    let theta = vec![1.0; d];
    let grad: Vec<f64> = diag.clone();

    // On a quadratic the central difference equals the directional derivative.
    let mut th = theta.clone();
    let pg = spsa_gradient(&obj, &mut th, &Perturbation::Identity(d), 1e-3, 42, 0)?;
    let u = GaussianStream::new(42).vector(d);
    println!("projected gradient {pg:.6} vs ∇Lᵀu {:.6}", dot(&grad, &u));

    // Averaging pg·u over many seeds recovers the gradient.
    let n = 20_000;
    let mut mean = vec![0.0; d];
    for k in 0..n {
        let seed = mix64(&[7, k]);
        let pg = spsa_gradient(&obj, &mut th, &Perturbation::Identity(d), 1e-3, seed, 0)?;
        for (m, u) in mean.iter_mut().zip(GaussianStream::new(seed)) {
            *m += pg * u / n as f64;
        }
    }
    println!("mean estimate {mean:.2?}\ntrue gradient {grad:?}");

    // A rank-2 projector sees only part of the gradient.
    let m = sample_low_rank(d, 2, 3)?;
    let pg = spsa_gradient(&obj, &mut th, &m, 1e-3, 11, 0)?;
    println!("rank-2 projected gradient {pg:.6}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
