// Adaptive block selection: a softmax over running |projected gradient| averages.
//
// The temperature sets how greedy the selector is. Gradient magnitudes here are
// in the tens, so at τ = 1 some blocks can go unvisited after warmup while
// τ = 10 spreads the visits out.

use std::error::Error;
use std::sync::Arc;

use subzero::optim::{adaptive_run, AdaptiveConfig, BlockOrder, LrSchedule, OptimConfig, ParamVector};
use subzero::rng::GaussianStream;
use subzero::testbed::{heterogeneous_block_hessian, QuadraticObjective};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let n = 8;
    let h = heterogeneous_block_hessian(256, 8, 8, &[10.0, 40.0, 70.0, 100.0], 1)?;
    let obj = QuadraticObjective::new(Arc::new(h));
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(2).vector(256), n)?;
    for tau in [1.0, 10.0] {
        let cfg = OptimConfig {
            steps: 40 * n,
            lr: LrSchedule::Constant(1e-3),
            block_order: BlockOrder::Adaptive,
            adaptive: AdaptiveConfig {
                tau,
                ..AdaptiveConfig::default()
            },
            ..OptimConfig::default()
        };
        let log = adaptive_run(&obj, &theta, &cfg)?;
        let mut visits = vec![0usize; n];
        for r in &log.records[10 * n..] {
            visits[r.active_block.expect("block methods report a block")] += 1;
        }
        println!(
            "τ = {tau:>4}: post-warmup visits {visits:?}, final loss {:.3}",
            log.final_loss().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
