//! The acceptance criteria as plain functions. Each returns a one-line detail
//! on success and the first violated check on failure; the `acceptance`
//! target prints them, the ordinary tests assert them.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use mammolab::corpus::GrayImage;
use mammolab::encoders::{checkpoint_bytes, Encoder, EncoderConfig, VitConfig};
use mammolab::evalstats::{
    auc, balanced_accuracy, binary_auc, bootstrap_ci, dice_and_iou, mean, nemenyi_cd, rank_models, weighted_f1,
    DEFAULT_REPLICATES,
};
use mammolab::harness::{
    load_corpus, run_experiment, run_task, seeds, BootstrapSpec, ExperimentConfig, Splits, TaskContext, TaskSpec,
    Variant,
};
use mammolab::heads::{adapt_pyramid, halted_within_patience, nms, Detection, EarlyStopper, LogRow, TrainLog};
use mammolab::preprocess::roi_crop;
use mammolab::pretrain::{
    contrastive_loss, distill_loss, ema_update, masked_patch_mse, mim_loss, stage1_aux, train_stage2, Stage2Config,
};
use mammolab::retrieval::RetrievalIndex;
use autograd::ParamStore;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use super::{auc_brute, rng, segmentation_gradcheck, small_corpus, stage1_gradcheck, stage2_gradcheck, tiny_cnn};

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// A named criterion with its runtime budget (`None`: no budget).
pub struct Criterion {
    pub name: &'static str,
    pub budget: Option<Duration>,
    pub run: fn() -> Outcome,
}

pub fn all() -> Vec<Criterion> {
    let s = Duration::from_secs;
    vec![
        Criterion { name: "statistics fidelity", budget: Some(s(1)), run: stats_fidelity },
        Criterion { name: "metric oracles", budget: Some(s(10)), run: metric_oracles },
        Criterion { name: "bootstrap", budget: Some(s(30)), run: bootstrap },
        Criterion { name: "pretraining invariants", budget: Some(s(10)), run: pretraining_invariants },
        Criterion { name: "gradient checks", budget: Some(s(60)), run: gradient_checks },
        Criterion { name: "protocol conformance", budget: None, run: protocol_conformance },
        Criterion { name: "end-to-end smoke", budget: Some(s(15 * 60)), run: end_to_end },
        Criterion { name: "preprocessing", budget: Some(s(5)), run: preprocessing },
        Criterion { name: "determinism", budget: None, run: determinism },
    ]
}

/// Runs a criterion against its budget.
pub fn evaluate(c: &Criterion) -> (Outcome, Duration) {
    let t = Instant::now();
    let out = (c.run)();
    let el = t.elapsed();
    let out = match (out, c.budget) {
        (Ok(_), Some(b)) if el > b => Err(format!("took {:.2}s, budget {:.0}s", el.as_secs_f64(), b.as_secs_f64())),
        (o, _) => o,
    };
    (out, el)
}

/// A fixed-seed proptest runner, so every run sees the same cases.
fn prop<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// statistics

/// `q·sqrt(k(k+1)/(6N))` worked by hand for k = 7 (q = 2.949).
fn cd_by_hand(n: f64) -> f64 {
    2.949 * (7.0 * 8.0 / (6.0 * n)).sqrt()
}

/// Random models × tasks matrices with ties.
fn rank_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=10, 1usize..=20).prop_flat_map(|(k, n)| prop::collection::vec(prop::collection::vec((0u8..6).prop_map(f64::from), n), k))
}

pub fn stats_fidelity() -> Outcome {
    let (cd92, cd68) = (nemenyi_cd(7, 92).map_err(|e| e.to_string())?, nemenyi_cd(7, 68).map_err(|e| e.to_string())?);
    ensure!((cd92 - 0.9393).abs() <= 5e-4, "nemenyi_cd(7, 92) = {cd92}");
    ensure!((cd68 - 1.0925).abs() <= 5e-4, "nemenyi_cd(7, 68) = {cd68}");
    ensure!((cd92 - cd_by_hand(92.0)).abs() < 1e-12, "CD(7,92) differs from the hand value {}", cd_by_hand(92.0));
    ensure!((cd68 - cd_by_hand(68.0)).abs() < 1e-12, "CD(7,68) differs from the hand value {}", cd_by_hand(68.0));
    prop(1000, rank_matrix(), |m| {
        let (k, n) = (m.len(), m[0].len());
        let cells: Vec<Vec<Option<f64>>> = m.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
        let table = rank_models(&cells, &vec![true; n]).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let expect = (k * (k + 1)) as f64 / 2.0;
        for t in 0..n {
            let s: f64 = table.ranks.iter().map(|r| r[t]).sum();
            prop_assert!((s - expect).abs() < 1e-9, "task {} rank sum {} != {}", t, s, expect);
        }
        let avg: f64 = table.average_rank.iter().sum();
        prop_assert!((avg - expect).abs() < 1e-9, "average-rank sum {} != {}", avg, expect);
        Ok(())
    })?;
    Ok(format!("CD(7,92) = {cd92:.4}, CD(7,68) = {cd68:.4}; rank sums hold on 1000 matrices"))
}

// ---------------------------------------------------------------------------
// metrics

pub fn metric_oracles() -> Outcome {
    // binary AUC against pairwise counting; scores on a coarse grid to force ties
    let instance = (2usize..=200).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..20).prop_map(f64::from), n),
            prop::collection::vec(any::<bool>(), n),
        )
    });
    prop(200, instance, |(scores, positive)| {
        prop_assume!(positive.iter().any(|&p| p) && positive.iter().any(|&p| !p));
        let a = binary_auc(&scores, &positive).unwrap();
        let b = auc_brute(&scores, &positive);
        prop_assert_eq!(a, b);
        Ok(())
    })?;
    // macro one-vs-rest AUC against the mean of per-class brute force
    let multi = (6usize..=120).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec((0u8..10).prop_map(f64::from), 3), n),
            prop::collection::vec(0usize..3, n),
        )
    });
    prop(200, multi, |(scores, labels)| {
        let present: Vec<usize> = (0..3).filter(|c| labels.contains(c)).collect();
        prop_assume!(present.len() >= 2);
        let per: Vec<f64> = present
            .iter()
            .map(|&c| {
                let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                let p: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                auc_brute(&s, &p)
            })
            .collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), per.iter().sum::<f64>() / per.len() as f64);
        Ok(())
    })?;
    let masks = (1usize..=400).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)));
    prop(1000, masks, |(p, t)| {
        let (d, i) = dice_and_iou(&p, &t).unwrap();
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12, "dice {} iou {}", d, i);
        Ok(())
    })?;
    // hand-computed confusion fixtures, conf[truth][pred]
    let conf = vec![vec![5, 1, 0], vec![2, 3, 1], vec![0, 0, 4]];
    let bacc = balanced_accuracy(&conf).map_err(|e| e.to_string())?;
    ensure!(bacc == 7.0 / 9.0, "balanced accuracy {bacc} != 7/9");
    // per-class F1 10/13, 3/5, 8/9 with supports 6, 6, 4
    let wf1 = weighted_f1(&conf).map_err(|e| e.to_string())?;
    let hand = (6.0 * 10.0 / 13.0 + 6.0 * 3.0 / 5.0 + 4.0 * 8.0 / 9.0) / 16.0;
    ensure!(wf1 == hand, "weighted F1 {wf1} != {hand}");
    let diag = vec![vec![3, 0], vec![0, 5]];
    ensure!(balanced_accuracy(&diag).is_ok_and(|v| v == 1.0) && weighted_f1(&diag).is_ok_and(|v| v == 1.0), "perfect confusion is not 1");
    // one class never predicted: its F1 is 0; recalls 1 and 0
    let skew = vec![vec![4, 0], vec![2, 0]];
    ensure!(balanced_accuracy(&skew).is_ok_and(|v| v == 0.5), "skewed balanced accuracy");
    let f = weighted_f1(&skew).map_err(|e| e.to_string())?;
    ensure!(f == 4.0 * (2.0 * (4.0 / 6.0) / (4.0 / 6.0 + 1.0)) / 6.0, "skewed weighted F1 {f}");
    Ok(format!("AUC exact on 200 + 200 instances; dice identity on 1000 pairs; bACC {bacc:.6}, wF1 {wf1:.6}"))
}

// ---------------------------------------------------------------------------
// bootstrap

pub fn bootstrap() -> Outcome {
    ensure!(DEFAULT_REPLICATES == 1000, "default replicates {DEFAULT_REPLICATES}");
    ensure!(ExperimentConfig::default().bootstrap_replicates == 1000, "harness default replicates");
    let mut r = rng(11);
    let values: Vec<f64> = (0..80).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
    let a = bootstrap_ci("m", &values, 1000, 0.05, 7).map_err(|e| e.to_string())?;
    let b = bootstrap_ci("m", &values, 1000, 0.05, 7).map_err(|e| e.to_string())?;
    let c = bootstrap_ci("m", &values, 1000, 0.05, 8).map_err(|e| e.to_string())?;
    ensure!(a == b, "same seed gave {a:?} and {b:?}");
    ensure!((a.ci_low, a.ci_high) != (c.ci_low, c.ci_high), "seeds 7 and 8 gave the same interval");
    ensure!(a.n_replicates == 1000, "n_replicates {}", a.n_replicates);
    let constant = bootstrap_ci("m", &[0.37; 25], 1000, 0.05, 3).map_err(|e| e.to_string())?;
    ensure!(constant.ci_high - constant.ci_low == 0.0, "constant sample CI width {}", constant.ci_high - constant.ci_low);
    let fixture = (5usize..=60).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n), any::<u64>()));
    prop(100, fixture, |(xs, seed)| {
        let m = bootstrap_ci("m", &xs, 1000, 0.05, seed).unwrap();
        prop_assert!(m.ci_low <= mean(&xs) && mean(&xs) <= m.ci_high, "{:?} misses {}", m, mean(&xs));
        prop_assert_eq!(m.point, mean(&xs));
        Ok(())
    })?;
    Ok(format!("B = 1000; seed-deterministic; constant width 0; mean covered on 100 fixtures (e.g. [{:.3}, {:.3}])", a.ci_low, a.ci_high))
}

// ---------------------------------------------------------------------------
// pretraining

pub fn pretraining_invariants() -> Outcome {
    // EMA toward a fixed online store has the closed form m^k t0 + (1 - m^k) s
    let mut r = rng(5);
    let t0 = super::rand_tensor(&mut r, &[4, 3], 2.0);
    let s = super::rand_tensor(&mut r, &[4, 3], 2.0);
    let (mut ema, mut online) = (ParamStore::new(), ParamStore::new());
    ema.insert("w", t0.clone());
    online.insert("w", s.clone());
    let m: f64 = 0.99;
    let mut worst: f64 = 0.0;
    for k in 1..=300 {
        ema_update(&mut ema, &online, m);
        let mk = m.powi(k);
        for ((e, a), b) in ema.get("w").unwrap().data().iter().zip(t0.data()).zip(s.data()) {
            worst = worst.max((e - (mk * a + (1.0 - mk) * b)).abs());
        }
    }
    ensure!(worst <= 1e-12, "EMA deviates from the closed form by {worst:e}");

    let e = vec![vec![0.3, -1.2, 0.5], vec![0.3, -1.2, 0.5]];
    for tau in [0.1, 0.5, 1.0] {
        let l = contrastive_loss(&e, &e, tau).map_err(|e| e.to_string())?;
        ensure!((l - 3f64.ln()).abs() <= 1e-9, "contrastive loss {l} at tau {tau}, expected ln 3");
    }

    let pred = super::rand_tensor(&mut r, &[16, 16], 1.0);
    let target = super::rand_tensor(&mut r, &[16, 16], 1.0);
    ensure!(masked_patch_mse(&pred, &target, &[false; 16]).is_ok_and(|v| v == 0.0), "masked MSE with an empty mask");
    let vit = VitConfig { image_side: 16, patch_side: 4, width: 8, depth: 1, heads: 2, mlp_ratio: 2 };
    let online = Encoder::new(EncoderConfig::Vit(vit.clone()), 1).map_err(|e| e.to_string())?;
    let aux = stage1_aux(&vit, &mut r);
    let img = GrayImage::new(16, 16, (0..256).map(|i| (i * 7 % 256) as u8).collect());
    ensure!(mim_loss(&online, &aux, &img, &[false; 16]).is_ok_and(|v| v == 0.0), "MIM loss with an empty mask");
    ensure!(mim_loss(&online, &aux, &img, &[true; 16]).is_ok_and(|l| l > 0.0), "MIM loss with a full mask is not positive");

    let f = [0.25, -3.0, 1.5, 0.0];
    ensure!(distill_loss(&f, &f).is_ok_and(|v| v == 0.0), "distillation of matched features");

    // a short Stage 2 run must leave the teacher bit-identical
    let manifest = small_corpus(4, 2);
    let records: Vec<_> = manifest.records.iter().collect();
    let teacher = Encoder::new(EncoderConfig::Vit(vit), 9).map_err(|e| e.to_string())?;
    let before = checkpoint_bytes(&teacher);
    let cfg = Stage2Config {
        student: tiny_cnn(),
        high: 32,
        low: 16,
        steps: 3,
        batch: 4,
        ..Default::default()
    };
    train_stage2(&records, &teacher, &cfg, 0).map_err(|e| e.to_string())?;
    ensure!(checkpoint_bytes(&teacher) == before, "teacher bytes changed during Stage 2");
    Ok(format!("EMA max dev {worst:.1e}; NT-Xent = ln 3; empty-mask MIM 0; matched distill 0; teacher bit-identical"))
}

pub fn gradient_checks() -> Outcome {
    let mut parts = Vec::new();
    for (name, f) in [
        ("stage1", stage1_gradcheck as fn(u64) -> super::GradReport),
        ("stage2", stage2_gradcheck),
        ("segmentation", segmentation_gradcheck),
    ] {
        let r = f(3);
        ensure!(r.params <= 5000, "{name}: {} parameters", r.params);
        ensure!(r.max_rel_err < 1e-4, "{name}: max relative error {:e}", r.max_rel_err);
        parts.push(format!("{name} {:.1e} ({} params)", r.max_rel_err, r.params));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------------------
// protocol

fn boxes() -> impl Strategy<Value = Vec<Detection>> {
    let one = (0.0f64..100.0, 0.0f64..100.0, 1.0f64..40.0, 1.0f64..40.0, 0.0f64..1.0).prop_map(|(x, y, w, h, s)| Detection {
        bbox: mammolab::corpus::BoundingBox::new(x, y, x + w, y + h, 0),
        score: s,
    });
    prop::collection::vec(one, 0..40)
}

/// Validation scores that rise, then plateau with noise below the peak.
fn synthetic_scores(peak_round: usize) -> impl Fn(usize) -> f64 {
    move |round| {
        if round <= peak_round {
            0.3 + 0.05 * round as f64
        } else {
            0.3 + 0.05 * peak_round as f64 - 0.01 * ((round * 7) % 5 + 1) as f64
        }
    }
}

pub fn protocol_conformance() -> Outcome {
    let enc = Encoder::new(EncoderConfig::Cnn(tiny_cnn()), 0).map_err(|e| e.to_string())?;
    for (side, want) in [(224, [56, 28, 14, 7]), (512, [128, 64, 32, 16])] {
        let img = GrayImage::filled(side, side, 120);
        let out = enc.encode(&img).map_err(|e| e.to_string())?;
        let got: Vec<usize> = adapt_pyramid(&out, side).iter().map(|t| t.shape()[1]).collect();
        let square = adapt_pyramid(&out, side).iter().all(|t| t.shape()[1] == t.shape()[2]);
        ensure!(got == want && square, "input {side}: pyramid {got:?}, expected {want:?}");
    }
    prop(500, boxes(), |dets| {
        let kept = nms(&dets, 0.5);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                let iou = kept[i].bbox.iou(&kept[j].bbox);
                prop_assert!(iou <= 0.5, "kept pair with IoU {}", iou);
            }
        }
        // every dropped box overlaps a kept one
        for d in &dets {
            prop_assert!(kept.iter().any(|k| k.bbox.iou(&d.bbox) > 0.5 || k == d));
        }
        Ok(())
    })?;
    let (every, patience) = (50, 4);
    for peak in [0, 3, 9] {
        let score = synthetic_scores(peak);
        let mut stop = EarlyStopper::new(patience);
        let mut log = TrainLog::default();
        for step in 1..=5000 {
            let val = (step % every == 0).then(|| score(step / every - 1));
            log.rows.push(LogRow { step, loss: 1.0 / step as f64, val });
            if let Some(v) = val {
                stop.observe(step, v);
                if stop.should_stop() {
                    break;
                }
            }
        }
        let best = log.best().map(|b| b.0).unwrap_or(0);
        ensure!(best == (peak + 1) * every, "peak {peak}: best step {best}");
        ensure!(log.last_step() == best + patience * every, "peak {peak}: halted at {} (best {best})", log.last_step());
        ensure!(halted_within_patience(&log, patience, every), "peak {peak}: halted late");
    }
    let mut late = TrainLog::default();
    for step in [50, 100, 150, 200, 250, 300, 350] {
        late.rows.push(LogRow { step, loss: 0.0, val: Some(if step == 50 { 1.0 } else { 0.5 }) });
    }
    ensure!(!halted_within_patience(&late, 4, 50), "a run past its patience was accepted");
    Ok("pyramid 224 -> 56/28/14/7, 512 -> 128/64/32/16; NMS on 500 sets; early stop at best + patience".into())
}

// ---------------------------------------------------------------------------
// end to end

fn e2e_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.apply_overrides(&[
        "stage1.steps=100",
        "stage2.steps=400",
        "variants=full,no_mammogram",
        "tasks=classify:composition,retrieve:composition",
        "detect.max_steps=800",
        "detect.validate_every=100",
        "segment.max_steps=800",
        "segment.validate_every=100",
        "bootstrap.replicates=200",
    ])
    .expect("valid overrides");
    cfg.out = out.to_path_buf();
    cfg
}

fn primary(dir: &Path, variant: &str, task: &str, metric: &str) -> Result<f64, String> {
    let ms = mammolab::harness::parse_metrics_csv(&dir.join(variant).join(task).join("metrics.csv")).map_err(|e| e.to_string())?;
    ms.iter().find(|m| m.name == metric).map(|m| m.point).ok_or(format!("{variant}/{task}: no {metric}"))
}

/// Label-clustered embeddings: four well-separated class centres with
/// small jitter, shared by gallery and queries.
fn clustered(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let emb = labels
        .iter()
        .map(|&l| (0..6).map(|j| if j % 4 == l { 3.0 } else { 0.0 } + rand::Rng::random_range(&mut r, -0.8..0.8)).collect())
        .collect();
    (emb, labels)
}

pub fn retrieval_fixture() -> Result<[f64; 3], String> {
    let (gal, gl) = clustered(80, 1);
    let (qs, ql) = clustered(40, 2);
    let index = RetrievalIndex::fit(&gal, &gl).map_err(|e| e.to_string())?;
    let acc = |k| index.topk_accuracy(&qs, &ql, k).map_err(|e| e.to_string());
    Ok([acc(1)?, acc(2)?, acc(3)?])
}

pub fn end_to_end() -> Outcome {
    let keep = std::env::var_os("ACCEPTANCE_OUT");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = keep.map_or(tmp.path().to_path_buf(), Into::into);
    let cfg = e2e_config(&root);
    let summary = run_experiment(&cfg).map_err(|e| e.to_string())?;
    ensure!(summary.all_completed(), "variants failed: {:?}", summary.statuses);
    let report = summary.report.ok_or("no report")?;

    let full = primary(&root, "full", "classify_composition", "balanced_accuracy")?;
    let random = primary(&root, "no_mammogram", "classify_composition", "balanced_accuracy")?;

    // detection and segmentation on the pretrained encoder only
    let encoder = mammolab::encoders::load_checkpoint(&root.join("full").join("encoder.ckpt")).map_err(|e| e.to_string())?;
    let manifest = load_corpus(&root.join("corpus")).map_err(|e| e.to_string())?;
    let splits = Splits::new(&manifest, cfg.split_ratios, cfg.split_seed).map_err(|e| e.to_string())?;
    let bootstrap = BootstrapSpec { replicates: cfg.bootstrap_replicates, alpha: cfg.bootstrap_alpha, seed: seeds::bootstrap(cfg.seed), by_patient: false };
    let mut best = BTreeMap::new();
    for (i, spec) in [TaskSpec::Detect, TaskSpec::Segment].into_iter().enumerate() {
        let ctx = TaskContext { config: &cfg, splits: &splits, head_seed: seeds::head(cfg.seed, cfg.tasks.len() + i), bootstrap };
        let dir = root.join("full").join(spec.dir_name());
        run_task(&encoder, spec, &ctx, &dir).map_err(|e| e.to_string())?;
        let log = std::fs::read_to_string(dir.join("log.csv")).map_err(|e| e.to_string())?;
        let val = log
            .lines()
            .skip(1)
            .filter_map(|l| l.rsplit(',').next().and_then(|v| v.parse::<f64>().ok()))
            .fold(f64::NEG_INFINITY, f64::max);
        best.insert(spec.name(), val);
    }
    let (det, seg) = (best["detect"], best["segment"]);
    let acc = retrieval_fixture()?;
    let rank = |v: Variant| report.models.iter().position(|m| m == v.name()).map(|i| report.table.average_rank[i]);
    let (rf, rn) = (rank(Variant::Full).ok_or("full unranked")?, rank(Variant::NoMammogram).ok_or("no_mammogram unranked")?);

    let line = format!(
        "(a) probe bACC {full:.3} vs random-init {random:.3}; (b) det val IoU {det:.3}; (c) seg val DICE {seg:.3}; \
         (d) acc@1..3 {:.3}/{:.3}/{:.3}; (e) avg rank full {rf} vs no_mammogram {rn}",
        acc[0], acc[1], acc[2]
    );
    ensure!(full >= random + 0.15, "(a) failed: {line}");
    ensure!(det >= 0.5, "(b) failed: {line}");
    ensure!(seg >= 0.6, "(c) failed: {line}");
    ensure!(acc[0] <= acc[1] && acc[1] <= acc[2] && acc[2] >= 0.8, "(d) failed: {line}");
    ensure!(rf < rn, "(e) failed: {line}");
    Ok(line)
}

// ---------------------------------------------------------------------------
// preprocessing

fn arrays() -> impl Strategy<Value = GrayImage> {
    let px = prop_oneof![Just(0u8), Just(39u8), Just(40u8), 0u8..40, 40u8..=255, any::<u8>()];
    (1usize..=12, 1usize..=12)
        .prop_flat_map(move |(h, w)| (Just(h), Just(w), prop::collection::vec(px.clone(), h * w)))
        .prop_map(|(h, w, d)| GrayImage::new(h, w, d))
}

pub fn preprocessing() -> Outcome {
    let img = GrayImage::from_rows(&[
        &[0, 0, 0, 0, 0],
        &[0, 50, 80, 0, 0],
        &[0, 60, 90, 0, 0],
        &[0, 0, 0, 39, 0],
        &[0, 0, 0, 0, 0],
    ]);
    let got = roi_crop(&img).to_rows();
    ensure!(got == vec![vec![50, 80], vec![60, 90]], "5x5 fixture cropped to {got:?}");
    prop(1000, arrays(), |img| {
        let once = roi_crop(&img);
        prop_assert_eq!(roi_crop(&once), once);
        Ok(())
    })?;
    Ok("5x5 fixture -> [[50,80],[60,90]]; idempotent on 1000 arrays".into())
}

// ---------------------------------------------------------------------------
// determinism

/// A tiny full-matrix config for the CLI determinism check.
pub const TINY_RUN: &str = "\
corpus.patients=20
corpus.tasks=birads,composition,masking,view,laterality
corpus.images_per_patient=4
stage1.vit.image_side=16
stage1.vit.patch_side=4
stage1.vit.width=8
stage1.vit.depth=1
stage1.vit.heads=2
stage1.steps=2
stage1.batch=4
stage2.cnn.channels=2,4,4,8
stage2.high=32
stage2.low=16
stage2.steps=2
stage2.batch=4
detect.fpn_width=4
detect.roi_hidden=8
detect.max_steps=2
detect.validate_every=1
segment.width=4
segment.max_steps=2
segment.validate_every=1
classify.max_epochs=2
vqa.max_epochs=2
vqa.hidden=8
bootstrap.replicates=20
";

fn tree(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                let mut bytes = std::fs::read(&p).map_err(|e| e.to_string())?;
                if rel == "config.txt" {
                    // the only place the output path itself is echoed
                    let text = String::from_utf8_lossy(&bytes);
                    bytes = text.lines().filter(|l| !l.starts_with("out=")).collect::<Vec<_>>().join("\n").into_bytes();
                }
                out.insert(rel, bytes);
            }
        }
    }
    Ok(out)
}

pub fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("tiny.cfg");
    std::fs::write(&config, TINY_RUN).map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_lab"))
            .args(["run", "--seed", "4", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure!(status.success(), "lab run {run} exited with {status}");
        trees.push(tree(&out)?);
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure!(a.keys().eq(b.keys()), "file sets differ");
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    ensure!(differing.is_empty(), "files differ: {differing:?}");
    let ckpts = a.keys().filter(|k| k.ends_with(".ckpt")).count();
    ensure!(ckpts >= Variant::ALL.len(), "only {ckpts} checkpoints written");
    ensure!(a.contains_key("report/ranks.csv"), "no report written");
    Ok(format!("{} files byte-identical across two runs ({ckpts} checkpoints)", a.len()))
}
