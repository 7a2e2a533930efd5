//! The `lab` binary and the flat config format.

mod common;

use std::process::Command;

use common::criteria;
use mammolab::harness::{ExperimentConfig, HarnessError, TaskSpec, Variant};

fn lab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lab"))
}

#[test]
fn run_is_byte_reproducible() {
    criteria::determinism().unwrap();
}

#[test]
fn config_echo_round_trips() {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&["seed=17", "tasks=detect,retrieve:birads", "variants=no_cnn,full", "retrieval.k=3,1"])
        .unwrap();
    let back = ExperimentConfig::from_text(&cfg.echo()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.tasks, [TaskSpec::Detect, TaskSpec::Retrieve(mammolab::corpus::Task::Birads)]);
    assert_eq!(back.variants, [Variant::NoCnn, Variant::Full]);
}

#[test]
fn config_errors_name_the_problem() {
    let e = ExperimentConfig::from_text("# comment\n\nseed=1\nstage1.stepz=4\n").unwrap_err();
    assert!(matches!(&e, HarnessError::UnknownKey(k) if k == "stage1.stepz"), "{e}");
    let e = ExperimentConfig::from_text("seed=1\njust words\n").unwrap_err();
    assert!(matches!(e, HarnessError::ConfigSyntax { line: 2, .. }), "{e}");
    let e = ExperimentConfig::from_text("stage2.steps=-3").unwrap_err();
    assert!(matches!(&e, HarnessError::BadValue { key, .. } if key == "stage2.steps"), "{e}");
    assert!(matches!(ExperimentConfig::from_text("variants=full,imagenet"), Err(HarnessError::UnknownVariant(_))));
    assert!(matches!(ExperimentConfig::from_text("tasks=classify:nope"), Err(HarnessError::BadValue { .. } | HarnessError::UnknownTaskSpec(_))));
    assert!(matches!(ExperimentConfig::from_text("tasks=caption"), Err(HarnessError::UnknownTaskSpec(_))));
}

#[test]
fn stats_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.csv");
    std::fs::write(&results, "model,a,b,c\nx,0.9,0.8,0.7\ny,0.5,0.6,0.9\nz,0.1,0.2,0.3\n").unwrap();
    let out = dir.path().join("ranks.csv");
    let s = lab().args(["stats", "rank", "--cd", "--results"]).arg(&results).arg("--out").arg(&out).output().unwrap();
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    let ranks = std::fs::read_to_string(&out).unwrap();
    assert!(ranks.starts_with("model,a,b,c,avg_rank\nx,1,1,2,1.3333333333333333\n"), "{ranks}");
    for f in ["ranks_cd.csv", "ranks_significance.csv", "ranks_cd_diagram.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let values = dir.path().join("values.csv");
    std::fs::write(&values, "p1,1\np1,1\np2,0\np3,1\n").unwrap();
    let run = |extra: &[&str]| {
        let o = lab().args(["stats", "ci", "--B", "200", "--seed", "3", "--values"]).arg(&values).args(extra).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let flat = run(&[]);
    assert!(flat.starts_with("metric,point,ci_low,ci_high,n_replicates\nmean,0.75,"), "{flat}");
    assert_eq!(run(&[]), flat);
    assert!(run(&["--by-patient"]).contains(",200\n"));
}

#[test]
fn errors_exit_with_status_two() {
    let o = lab().args(["report", "/definitely/not/a/run"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = lab().args(["run", "--set", "no.such.key=1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
