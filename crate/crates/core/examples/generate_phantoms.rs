//! Generates a small phantom corpus, splits it by patient and prints a
//! summary of label marginals.
//!
//! cargo run --example generate_phantoms -- [OUT_DIR]

use std::path::PathBuf;

use mammolab::corpus::{save_manifest, split_by_patient, Task, DEFAULT_RATIOS};
use mammolab::preprocess::{generate_corpus, CorpusSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("phantoms"));
    let spec = CorpusSpec {
        patients: 20,
        ..Default::default()
    };
    let manifest = generate_corpus(&spec)?;
    let path = save_manifest(&manifest, &out)?;
    println!("wrote {} records to {}", manifest.len(), path.display());

    let split = split_by_patient(&manifest, DEFAULT_RATIOS, spec.seed)?;
    let [tr, va, te] = split.counts();
    println!("patients: train {tr}, val {va}, test {te}");

    for task in Task::ALL {
        let mut counts = vec![0usize; task.num_classes()];
        for r in manifest.labeled(task) {
            counts[r.labels[&task]] += 1;
        }
        println!("{:<12} {:?}", task.name(), counts);
    }
    Ok(())
}
