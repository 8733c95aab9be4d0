//! Runs every pipeline stage on the toy configuration, resuming if the output
//! directory already holds completed stages, and prints the comparison table.
//!
//! `cargo run --release -p adaperf --example pipeline_toy -- [out_dir]`

use std::path::PathBuf;

use adaperf::pipeline::{ExperimentConfig, Pipeline, METRICS_CSV};

fn main() -> adaperf::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("adaperf_toy"), PathBuf::from);
    let config = ExperimentConfig::toy(&dir);
    println!("{}", serde_json::to_string_pretty(&config)?);
    let mut p = Pipeline::open(config, &dir)?;
    let summary = p.run_all()?;
    for s in &summary.skipped {
        println!("{:<16} already complete", s.name());
    }
    for s in &summary.ran {
        println!("{:<16} ran", s.name());
    }
    let table = std::fs::read_to_string(p.layout().report_dir().join(METRICS_CSV))?;
    print!("{table}");
    Ok(())
}
