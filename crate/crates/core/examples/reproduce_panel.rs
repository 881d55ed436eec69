// Regenerate CSV bundles with their checks and verify the manifest afterwards.

use std::error::Error;

use subzero::harness::{cmd_reproduce, verify_manifest, Panel, ReproduceOptions};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = tempfile::tempdir()?;
    let opts = ReproduceOptions {
        out_dir: dir.path().to_path_buf(),
        ..ReproduceOptions::default()
    };
    // The loss-curve and alignment panels take seconds to minutes; these two are instant.
    for panel in [Panel::MemoryTable, Panel::Traffic] {
        let report = cmd_reproduce(panel, &opts)?;
        for v in &report.verdicts {
            println!("{} {panel}: {} ({})", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
        }
        for f in &report.files {
            println!("  wrote {}", f.display());
        }
    }
    assert!(verify_manifest(dir.path())?.is_empty());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
