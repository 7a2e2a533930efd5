//! A reduced ablation matrix run through the experiment harness: corpus,
//! Stage 1, one encoder per variant, downstream tasks, report.
//!
//! cargo run --example ablation -- [OUT_DIR]

use std::path::PathBuf;

use mammolab::harness::{run_experiment_with, ExperimentConfig};

const CONFIG: &str = "
corpus.patients=30
stage1.steps=30
stage2.steps=60
classify.max_epochs=50
vqa.max_epochs=20
tasks=classify:composition,classify:view,retrieve:composition,vqa
variants=full,no_mammogram,no_stage2,no_distill,no_sup
bootstrap.replicates=200
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig::from_text(CONFIG)?;
    cfg.out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mammolab_ablation"));
    let summary = run_experiment_with(&cfg, &mut |m| println!("{m}"))?;
    if let Some(r) = summary.report {
        println!("\n{}\n{}", r.files.ranks, r.files.cd_diagram);
    }
    println!("run tree: {}", summary.dir.display());
    Ok(())
}
