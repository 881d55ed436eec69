// Peak parameter memory and per-step parameter traffic of the zeroth-order methods.

use std::error::Error;

use subzero::analysis::{peak_memory_params, traffic_per_step, write_memory_csv, LayerShape, Method};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    // A small transformer-like stack: per layer QKV, output projection and two MLP matrices.
    let width = 512;
    let mut layers = Vec::new();
    let mut assignment = Vec::new();
    for block in 0..4 {
        for (m, n) in [(width, 3 * width), (width, width), (width, 4 * width), (4 * width, width)] {
            layers.push(LayerShape::new(m, n));
            assignment.push(block);
        }
    }
    let reports = Method::ALL
        .iter()
        .map(|&m| peak_memory_params(m, &layers, Some(2), Some(&assignment)))
        .collect::<Result<Vec<_>, _>>()?;
    write_memory_csv(&reports, std::io::stdout())?;

    let d = 1_300_000_000;
    for n in [1, 4, 24] {
        println!(
            "d = {d}, N = {n:>2}: mezo {:.3e}, mezo-bcd {:.3e} parameter loads/step",
            traffic_per_step(Method::Mezo, d, n)?,
            traffic_per_step(Method::MezoBcd, d, n)?
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
