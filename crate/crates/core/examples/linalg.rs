// Dense symmetric eigendecomposition, orthonormalization and effective dimensions.

use std::error::Error;

use subzero::linalg::{eig_sym, intdim, orthonormalize, srank_sym, Matrix};
use subzero::rng::GaussianStream;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let (d, k) = (8, 3);
    let b = Matrix::from_col_major(d, k, GaussianStream::new(1).vector(d * k))?;
    let a = b.outer_gram();

    let eig = eig_sym(&a)?;
    println!("eigenvalues: {:?}", eig.eigenvalues);
    println!("numerical rank: {}", eig.numerical_rank(1e-9));
    println!("srank = {:.4}, intdim = {:.4}", srank_sym(&a)?, intdim(&a)?);

    let q = orthonormalize(&b)?;
    let gram = q.gram();
    let off: f64 = (0..k)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .map(|(i, j)| (gram.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    println!("max |QᵀQ − I| = {off:.2e}");
    assert!(off < 1e-12);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
