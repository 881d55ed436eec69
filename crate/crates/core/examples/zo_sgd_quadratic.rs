// Zeroth-order SGD on a low-rank quadratic with full and subspace perturbations.

use std::error::Error;
use std::sync::Arc;

use subzero::optim::{zo_sgd_run, LrSchedule, OptimConfig, Sampler};
use subzero::perturbation::ControlledSampler;
use subzero::rng::GaussianStream;
use subzero::testbed::{generate_hessian, HessianSpec, QuadraticObjective};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let h = Arc::new(generate_hessian(&HessianSpec {
        dim: 256,
        rank: 64,
        num_blocks: 1,
        max_eigenvals: vec![10.0],
        seed: 0,
    })?);
    let obj = QuadraticObjective::new(Arc::clone(&h));
    let theta0 = GaussianStream::new(1).vector(256);
    let cfg = OptimConfig {
        steps: 1000,
        lr: LrSchedule::Constant(1e-3),
        mu: 1e-4,
        seed: 0,
        rho_every: 100,
        ..OptimConfig::default()
    };

    let samplers = [
        ("identity", Sampler::Identity),
        ("low-rank s=64", Sampler::LowRank { s: 64 }),
        ("controlled γ=0.7", Sampler::Controlled(Arc::new(ControlledSampler::new(&h, 64, 0.7)?))),
    ];
    for (name, sampler) in samplers {
        let log = zo_sgd_run(&obj, &theta0, &cfg, sampler)?;
        println!(
            "{name:<18} loss {:.3} -> {:.3}, mean ρ {}",
            log.records[0].loss(),
            log.final_loss().unwrap_or(f64::NAN),
            log.mean_rho().map_or("n/a".into(), |r| format!("{r:.2}"))
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
