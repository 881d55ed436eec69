// Minibatch logistic regression on two Gaussian clusters, trained without gradients.

use std::error::Error;

use subzero::optim::{mezo_bcd_run, BlockOrder, LrSchedule, OptimConfig, ParamVector};
use subzero::testbed::{LogisticSpec, StochasticObjective};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let data = StochasticObjective::synthetic(&LogisticSpec::default())?;
    let direction = data.mean_direction().to_vec();
    println!("accuracy along the cluster axis: {:.4}", data.accuracy(&direction));

    let theta = ParamVector::with_equal_blocks(vec![0.0; 200], 4)?;
    let cfg = OptimConfig {
        steps: 8000,
        mu: 1e-3,
        lr: LrSchedule::Constant(1e-2),
        block_order: BlockOrder::CyclicRandom,
        ..OptimConfig::default()
    };
    let log = mezo_bcd_run(&data, &theta, &cfg)?;
    println!(
        "after {} steps: full loss {:.4}, accuracy {:.4}",
        log.len(),
        data.full_loss(&log.final_params),
        data.accuracy(&log.final_params)
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
