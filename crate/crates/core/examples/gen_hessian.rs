// Build the two synthetic Hessians used throughout the testbed and save one to disk.

use std::error::Error;

use subzero::harness::{cmd_gen_hessian, GenHessianArgs};
use subzero::perturbation::BlockPartition;
use subzero::testbed::{generate_hessian, heterogeneous_block_hessian, Hessian, HessianSpec};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    // One block, rank 64, top eigenvalue 10.
    let h = generate_hessian(&HessianSpec {
        dim: 256,
        rank: 64,
        num_blocks: 1,
        max_eigenvals: vec![10.0],
        seed: 7,
    })?;
    println!(
        "single block: λ_max = {:.3}, Tr = {:.3}, intdim = {:.3}",
        h.lambda_max(),
        h.trace(),
        h.intdim()?
    );

    // Sixteen blocks whose top eigenvalues jitter around four reference levels.
    let hetero = heterogeneous_block_hessian(1024, 16, 16, &[10.0, 40.0, 70.0, 100.0], 0)?;
    let partition = BlockPartition::equal(1024, 16)?;
    for (j, sum) in hetero.block_diagonal_sums(partition.blocks()).iter().enumerate().take(4) {
        println!("block {j}: diagonal sum {sum:.3}");
    }

    let dir = tempfile::tempdir()?;
    let args = GenHessianArgs {
        out: dir.path().join("h.bin"),
        seed: 7,
        ..GenHessianArgs::default()
    };
    let summary = cmd_gen_hessian(&args)?;
    let loaded = Hessian::load(&args.out)?;
    println!("saved and reloaded: λ_max = {}, nonzero = {}", summary.lambda_max, summary.nonzero);
    assert_eq!(loaded.matrix(), h.matrix());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
