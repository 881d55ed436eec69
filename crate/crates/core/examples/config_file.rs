// Drive an optimizer sweep from an INI-style config, as `subzero optimize --config` does.

use std::error::Error;

use subzero::harness::{cmd_optimize, Config, OptimizeArgs};

const CONFIG: &str = "
# logistic data, block descent with per-block Adam
objective = logistic
samples = 500
dim = 40
method = mezo-bcd-adam
blocks = 4
order = cyclic-random
steps = 300
lr = 1e-2
mu = 1e-3
seeds = 0,1

[adam]
interval = 25
";

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let mut args = OptimizeArgs::default();
    args.apply_config(&Config::parse(CONFIG)?)?;
    // Flags applied after the file win, exactly like on the command line.
    args.set("steps", "200")?;
    args.set("out", dir.path().to_str().ok_or("non-UTF-8 temp path")?)?;

    for run in cmd_optimize(&args, Some(1))? {
        println!(
            "seed {}: {} steps, final loss {:.4}, files {:?}",
            run.seed,
            run.log.len(),
            run.log.final_loss().unwrap_or(f64::NAN),
            run.files.iter().filter_map(|f| f.file_name()).collect::<Vec<_>>()
        );
        if let Some(acc) = run.log.meta("final_accuracy") {
            println!("  training accuracy {:.3}", acc.parse::<f64>()?);
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
