// Block descent with a per-block Adam state that restarts whenever a new block interval begins.

use std::error::Error;
use std::sync::Arc;

use subzero::optim::{
    mezo_bcd_adam_run, mezo_bcd_run, AdamConfig, BlockOrder, LrSchedule, OptimConfig, ParamVector,
};
use subzero::rng::GaussianStream;
use subzero::testbed::{generate_hessian, HessianSpec, QuadraticObjective};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let h = generate_hessian(&HessianSpec {
        dim: 256,
        rank: 64,
        num_blocks: 1,
        max_eigenvals: vec![10.0],
        seed: 0,
    })?;
    let obj = QuadraticObjective::new(Arc::new(h));
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(3).vector(256), 4)?;
    let base = OptimConfig {
        steps: 2000,
        block_order: BlockOrder::CyclicRandom,
        adam: AdamConfig {
            interval: 50,
            ..AdamConfig::default()
        },
        ..OptimConfig::default()
    };
    for lr in [1e-3, 3e-3] {
        let cfg = OptimConfig { lr: LrSchedule::Constant(lr), ..base.clone() };
        let log = mezo_bcd_run(&obj, &theta, &cfg)?;
        println!("plain  η={lr:.0e}: final loss {:.4}", log.final_loss().unwrap_or(f64::NAN));
    }
    for lr in [3e-3, 1e-2] {
        let cfg = OptimConfig { lr: LrSchedule::Constant(lr), ..base.clone() };
        let log = mezo_bcd_adam_run(&obj, &theta, &cfg)?;
        println!("adam   η={lr:.0e}: final loss {:.4}", log.final_loss().unwrap_or(f64::NAN));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
