//! Runs the smoke configuration and prints MRR per editing strategy.
//!
//! `cargo run --example smoke_report -p privneuron-core`

use std::path::Path;

use privneuron::pipeline::{Pipeline, PipelineConfig, Stage};

fn main() -> privneuron::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let mut cfg = PipelineConfig::load(&root.join("configs/smoke.toml"))?;
    cfg.output_dir = root.join("runs/smoke");
    Pipeline::new(cfg.clone())?.run(Stage::Report)?;
    let report = Pipeline::new(cfg)?.load_report()?;
    for row in &report.interventions {
        let mrr = row.mrr.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        println!("{:<20} {:<3} {mrr}", row.strategy, row.language);
    }
    Ok(())
}
