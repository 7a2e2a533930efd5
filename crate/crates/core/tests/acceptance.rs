//! One PASS/FAIL line per acceptance criterion; exits non-zero on any
//! failure. `ACCEPTANCE_ONLY=name,…` runs a subset (substring match) and
//! `ACCEPTANCE_OUT=DIR` keeps the end-to-end run tree.

mod common;

use std::process::ExitCode;

fn main() -> ExitCode {
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|p| p.trim().to_string()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for c in common::criteria::all() {
        if only.as_ref().is_some_and(|o| !o.iter().any(|p| c.name.contains(p.as_str()))) {
            continue;
        }
        ran += 1;
        let (outcome, took) = common::criteria::evaluate(&c);
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:<24} {:>8.2}s  {detail}", c.name, took.as_secs_f64());
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
