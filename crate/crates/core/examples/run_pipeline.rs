//! Runs every stage on the default synthetic cohort and prints the summary.

use std::time::Instant;

use ocai_core::pipeline::{run, PipelineConfig};

fn main() -> ocai_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let cfg = PipelineConfig::default().seeded(seed);
    let start = Instant::now();
    let out = run(&cfg)?;
    println!("{}", serde_json::to_string_pretty(&out.summary)?);
    eprintln!("elapsed: {:.1?}", start.elapsed());
    Ok(())
}
