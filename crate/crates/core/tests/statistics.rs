//! Ranking, critical difference, bootstrap and the run-directory report.

mod common;

use std::fs;
use std::path::Path;

use common::criteria;
use mammolab::evalstats::{bootstrap_ci, bootstrap_ci_grouped, cd_groups, mean, rank_models};
use mammolab::harness::{emit_report, metrics_csv, ExperimentConfig, HarnessError, TaskSpec, Variant};
use mammolab::evalstats::MetricResult;

#[test]
fn critical_difference_and_rank_sums() {
    criteria::stats_fidelity().unwrap();
}

#[test]
fn bootstrap_properties() {
    criteria::bootstrap().unwrap();
}

#[test]
fn grouped_bootstrap_resamples_whole_groups() {
    // two constant groups: a replicate draws two whole groups
    let values = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let groups: Vec<String> = ["a", "a", "b", "b", "b", "b"].iter().map(|s| s.to_string()).collect();
    let m = bootstrap_ci_grouped("m", &values, &groups, 500, 0.05, 1).unwrap();
    assert_eq!(m.point, mean(&values));
    // possible replicate means: {a,a} -> 0, {a,b} -> 4/6, {b,b} -> 1
    assert_eq!(m.ci_low, 0.0);
    assert_eq!(m.ci_high, 1.0);
    let flat = bootstrap_ci("m", &values, 500, 0.05, 1).unwrap();
    assert!(flat.ci_low > 0.0, "row resampling should rarely draw six zeros: {flat:?}");
}

#[test]
fn bootstrap_rejects_bad_input() {
    assert!(bootstrap_ci("m", &[], 10, 0.05, 0).is_err());
    assert!(bootstrap_ci("m", &[1.0], 0, 0.05, 0).is_err());
    assert!(bootstrap_ci("m", &[1.0], 10, 1.0, 0).is_err());
}

#[test]
fn lower_is_better_tasks_invert_ranks() {
    let v = vec![vec![Some(0.1), Some(3.0)], vec![Some(0.2), Some(1.0)]];
    let t = rank_models(&v, &[true, false]).unwrap();
    assert_eq!(t.ranks, vec![vec![2.0, 2.0], vec![1.0, 1.0]]);
    assert!(rank_models(&[vec![Some(1.0), None]], &[true, true]).is_err());
}

#[test]
fn cd_groups_are_maximal_runs() {
    assert_eq!(cd_groups(&[1.0, 1.5, 3.0, 3.2], 0.6), vec![vec![0, 1], vec![2, 3]]);
    assert_eq!(cd_groups(&[1.0, 1.5, 2.0], 0.6), vec![vec![0, 1], vec![1, 2]]);
    assert_eq!(cd_groups(&[2.0, 1.0], 5.0), vec![vec![1, 0]]);
}

// ---------------------------------------------------------------------------
// report from a hand-built run tree

fn metric(name: &str, point: f64) -> MetricResult {
    MetricResult {
        name: name.into(),
        point,
        ci_low: point - 0.1,
        ci_high: point + 0.1,
        n_replicates: 1000,
    }
}

/// Writes config.txt, statuses and metrics; `rows[v] = None` marks a failed variant.
fn fake_run(dir: &Path, rows: &[(Variant, Option<[f64; 2]>)]) {
    let cfg = ExperimentConfig {
        variants: rows.iter().map(|r| r.0).collect(),
        tasks: vec![TaskSpec::Classify(mammolab::corpus::Task::Composition), TaskSpec::Vqa],
        out: dir.to_path_buf(),
        ..Default::default()
    };
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("config.txt"), cfg.echo()).unwrap();
    for (v, vals) in rows {
        let vdir = dir.join(v.name());
        fs::create_dir_all(&vdir).unwrap();
        match vals {
            None => fs::write(vdir.join("status.txt"), "failed: out of patience\n").unwrap(),
            Some(vals) => {
                fs::write(vdir.join("status.txt"), "ok\n").unwrap();
                for (t, x) in cfg.tasks.iter().zip(vals) {
                    let tdir = vdir.join(t.dir_name());
                    fs::create_dir_all(&tdir).unwrap();
                    fs::write(tdir.join("metrics.csv"), metrics_csv(&[metric("primary", *x), metric("other", 0.0)])).unwrap();
                }
            }
        }
    }
}

fn report_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir.join("report"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn single_variant_ranks_first() {
    let dir = tempfile::tempdir().unwrap();
    fake_run(dir.path(), &[(Variant::Full, Some([0.8, 0.6]))]);
    let r = emit_report(dir.path()).unwrap();
    assert_eq!(r.table.ranks, vec![vec![1.0, 1.0]]);
    assert_eq!(r.table.average_rank, vec![1.0]);
    assert!(r.files.cd.ends_with("1,2,\n"), "no CD for one model: {}", r.files.cd);
}

#[test]
fn identical_metrics_tie_at_one_and_a_half() {
    let dir = tempfile::tempdir().unwrap();
    fake_run(dir.path(), &[(Variant::Full, Some([0.7, 0.5])), (Variant::NoSup, Some([0.7, 0.5]))]);
    let r = emit_report(dir.path()).unwrap();
    assert_eq!(r.table.average_rank, vec![1.5, 1.5]);
    assert!(r.files.significance.contains("full,no_sup,1.5,1.5,0,false"));
}

#[test]
fn primary_metric_drives_the_ranking() {
    let dir = tempfile::tempdir().unwrap();
    fake_run(
        dir.path(),
        &[
            (Variant::Full, Some([0.9, 0.8])),
            (Variant::NoMammogram, Some([0.4, 0.3])),
            (Variant::NoCnn, Some([0.6, 0.9])),
        ],
    );
    let r = emit_report(dir.path()).unwrap();
    assert_eq!(r.models, ["full", "no_mammogram", "no_cnn"]);
    assert_eq!(r.table.average_rank, vec![1.5, 3.0, 1.5]);
    assert_eq!(
        fs::read_to_string(dir.path().join("report/results.csv")).unwrap(),
        "model,classify:composition,vqa\nfull,0.9,0.8\nno_mammogram,0.4,0.3\nno_cnn,0.6,0.9\n"
    );
    // both metric rows of every task are kept in the long table
    assert_eq!(r.metrics_csv.lines().count(), 1 + 3 * 2 * 2);
}

#[test]
fn failed_variants_are_reported_not_ranked() {
    let dir = tempfile::tempdir().unwrap();
    fake_run(dir.path(), &[(Variant::Full, Some([0.9, 0.8])), (Variant::NoStage2, None)]);
    let r = emit_report(dir.path()).unwrap();
    assert_eq!(r.models, ["full"]);
    assert_eq!(r.status_csv, "variant,status\nfull,ok\nno_stage2,failed: out of patience\n");
}

#[test]
fn re_emission_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    fake_run(dir.path(), &[(Variant::Full, Some([0.9, 0.1])), (Variant::NoDistill, Some([0.2, 0.7]))]);
    emit_report(dir.path()).unwrap();
    let first = report_files(dir.path());
    emit_report(dir.path()).unwrap();
    assert_eq!(report_files(dir.path()), first);
    assert_eq!(first.len(), 7);
}

#[test]
fn no_completed_variants() {
    let dir = tempfile::tempdir().unwrap();
    fake_run(dir.path(), &[(Variant::Full, None), (Variant::NoSup, None)]);
    assert!(matches!(emit_report(dir.path()), Err(HarnessError::NoCompletedVariants(_))));
}

#[test]
fn missing_metrics_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fake_run(dir.path(), &[(Variant::Full, Some([0.9, 0.8]))]);
    fs::remove_file(dir.path().join("full/vqa/metrics.csv")).unwrap();
    assert!(matches!(emit_report(dir.path()), Err(HarnessError::Io { .. })));
}
