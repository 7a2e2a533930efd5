//! Ranking, Nemenyi critical difference and bootstrap intervals on a small
//! models × tasks results matrix.
//!
//! cargo run --example benchmark_stats

use mammolab::evalstats::{bootstrap_ci, nemenyi_cd, rank_models};
use mammolab::harness::rank_files;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let models = ["ours", "baseline_a", "baseline_b", "baseline_c"].map(String::from).to_vec();
    let tasks: Vec<String> = (0..12).map(|t| format!("task{t}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // model m has a skill offset; tasks add noise
    let values: Vec<Vec<Option<f64>>> = (0..models.len())
        .map(|m| (0..tasks.len()).map(|_| Some(0.8 - 0.05 * m as f64 + rng.random_range(-0.06..0.06))).collect())
        .collect();
    let table = rank_models(&values, &vec![true; tasks.len()])?;
    let files = rank_files(&models, &tasks, &table);
    print!("{}\n{}\n{}", files.ranks, files.cd, files.cd_diagram);
    print!("{}", files.significance);

    println!("\nCD for 7 models: N=92 -> {:.4}, N=68 -> {:.4}", nemenyi_cd(7, 92)?, nemenyi_cd(7, 68)?);

    let per_sample: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
    let ci = bootstrap_ci("mean", &per_sample, 1000, 0.05, 0)?;
    println!("bootstrap mean {:.4} [{:.4}, {:.4}] over {} replicates", ci.point, ci.ci_low, ci.ci_high, ci.n_replicates);
    Ok(())
}
