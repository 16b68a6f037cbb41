//! Runs the reference experiment from `configs/reference_ou.json` and writes
//! the report tables next to the manifest.

use std::path::Path;

use ipslab::cli::config::ExperimentConfig;
use ipslab::cli::pipeline::run;
use ipslab::cli::report::report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference_ou.json");
    let (cfg, sha) = ExperimentConfig::load(&config)?;
    let out = std::env::temp_dir().join("ipslab-reference");
    let manifest = run(&cfg, &sha, Some(&out))?;
    for stage in &manifest.stages {
        println!("{:<11} {:?} ({} artifacts)", stage.name, stage.status, stage.artifacts.len());
    }
    let outcome = report(&out.join("manifest.json"), &out)?;
    for t in &outcome.tables {
        println!("--- {}", t.display());
        print!("{}", std::fs::read_to_string(t)?);
    }
    Ok(())
}
