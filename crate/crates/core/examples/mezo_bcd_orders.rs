// Block-coordinate zeroth-order descent under each deterministic and random block order.

use std::error::Error;
use std::sync::Arc;

use subzero::optim::{mezo_bcd_run, update_block_idx, BlockOrder, LrSchedule, OptimConfig, ParamVector};
use subzero::rng::GaussianStream;
use subzero::testbed::{heterogeneous_block_hessian, QuadraticObjective};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let n = 4;
    let schedule = |order| (1..=8).map(|t| update_block_idx(order, t, n, 0)).collect::<Result<Vec<_>, _>>();
    println!("flipflop schedule: {:?}", schedule(BlockOrder::FlipFlop)?);
    println!("cyclic-random schedule: {:?}", schedule(BlockOrder::CyclicRandom)?);

    let h = heterogeneous_block_hessian(256, 4, 16, &[10.0, 40.0, 70.0, 100.0], 2)?;
    let obj = QuadraticObjective::new(Arc::new(h));
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(4).vector(256), n)?;
    for order in [BlockOrder::Ascending, BlockOrder::Descending, BlockOrder::FlipFlop, BlockOrder::CyclicRandom] {
        let cfg = OptimConfig {
            steps: 2000,
            lr: LrSchedule::Constant(1e-4),
            block_order: order,
            ..OptimConfig::default()
        };
        let log = mezo_bcd_run(&obj, &theta, &cfg)?;
        println!("{order:<14} final loss {:.4}", log.final_loss().unwrap_or(f64::NAN));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
