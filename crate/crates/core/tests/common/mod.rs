//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance report.
#![allow(dead_code)]

use std::collections::BTreeMap;

use autograd::gradcheck::check;
use autograd::{Graph, ParamStore, Tensor};
use mammolab::corpus::{Manifest, Task};
use mammolab::encoders::{CnnConfig, Encoder, EncoderConfig, VitConfig};
use mammolab::heads::{pyramid_sides, SegmentationProtocol, Segmenter};
use mammolab::preprocess::{generate_corpus, CorpusSpec};
use mammolab::pretrain::{
    random_patch_mask, stage1_aux, stage1_objective, stage2_aux, stage2_objective, Stage1Batch, Stage1Config,
    Stage2Batch, Stage2Config,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod criteria;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn tiny_vit() -> VitConfig {
    VitConfig {
        image_side: 16,
        patch_side: 4,
        width: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    }
}

pub fn tiny_cnn() -> CnnConfig {
    CnnConfig {
        stage_channels: [2, 2, 4, 8],
        stem_stride: 2,
    }
}

pub fn small_corpus(patients: usize, seed: u64) -> Manifest {
    generate_corpus(&CorpusSpec {
        patients,
        seed,
        ..Default::default()
    })
    .expect("phantom corpus")
}

/// AUC by counting every (positive, negative) pair; ties count one half.
pub fn auc_brute(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

// ---------------------------------------------------------------------------
// gradient checks

pub const GRAD_COORDS: usize = 20;
pub const GRAD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, for near-zero gradients.
pub const GRAD_FLOOR: f64 = 1e-5;

pub struct GradReport {
    pub params: usize,
    pub max_rel_err: f64,
}

fn prefixed(grads: BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    grads.into_iter().map(|(k, v)| (format!("{prefix}{k}"), v)).collect()
}

fn run_check(store: &ParamStore, analytic: &BTreeMap<String, Tensor>, loss: impl Fn(&ParamStore) -> f64, seed: u64) -> GradReport {
    let probes = check(store, analytic, loss, GRAD_COORDS, GRAD_STEP, &mut rng(seed));
    if std::env::var("GRAD_DEBUG").is_ok() {
        for p in &probes {
            eprintln!("{} {} a={:e} n={:e}", p.name, p.index, p.analytic, p.numeric);
        }
    }
    GradReport {
        params: store.num_scalars(),
        max_rel_err: probes.iter().map(|p| p.relative_error(GRAD_FLOOR)).fold(0.0, f64::max),
    }
}

/// Stage 1 total loss (MIM + two-way contrastive against a frozen EMA copy)
/// on a tiny ViT, checked over online encoder and auxiliary parameters.
pub fn stage1_gradcheck(seed: u64) -> GradReport {
    let vit = tiny_vit();
    let cfg = Stage1Config {
        vit: vit.clone(),
        ..Default::default()
    };
    let ecfg = EncoderConfig::Vit(vit.clone());
    let online = Encoder::new(ecfg.clone(), seed).unwrap();
    let ema = Encoder::new(ecfg.clone(), seed + 1).unwrap();
    let mut r = rng(seed);
    let aux = stage1_aux(&vit, &mut r);
    let b = 3;
    let batch = Stage1Batch {
        view_a: rand_tensor(&mut r, &[b, 1, 16, 16], 1.0),
        view_b: rand_tensor(&mut r, &[b, 1, 16, 16], 1.0),
        mask: random_patch_mask(b, vit.num_patches(), 0.4, &mut r),
    };
    let mut store = ParamStore::new();
    store.extend_prefixed("enc.", online.params());
    store.extend_prefixed("aux.", &aux);

    let mut g = Graph::new();
    let t = stage1_objective(&mut g, &online, &aux, &ema, &batch, &cfg).unwrap();
    assert!(t.mim.is_some() && t.con.is_some());
    let grads = g.backward(t.total);
    let mut analytic = prefixed(g.param_grads(&grads, online.params()), "enc.");
    analytic.extend(prefixed(g.param_grads(&grads, &aux), "aux."));
    assert!(g.param_grads(&grads, ema.params()).is_empty(), "EMA copy must stay frozen");

    let loss = |s: &ParamStore| {
        let enc = Encoder::from_params(ecfg.clone(), s.sub_store("enc.")).unwrap();
        let aux = s.sub_store("aux.");
        let mut g = Graph::new();
        let t = stage1_objective(&mut g, &enc, &aux, &ema, &batch, &cfg).unwrap();
        g.item(t.total)
    };
    run_check(&store, &analytic, loss, seed + 7)
}

/// Stage 2 total loss (distillation + supervised CE with missing labels +
/// cross-resolution contrastive) on a tiny CNN student.
pub fn stage2_gradcheck(seed: u64) -> GradReport {
    let cfg = Stage2Config {
        student: tiny_cnn(),
        tasks: vec![Task::Birads, Task::Composition],
        ..Default::default()
    };
    let ecfg = EncoderConfig::Cnn(tiny_cnn());
    let mut r = rng(seed);
    // zero-initialised biases put pre-activations exactly on the ReLU kink
    // wherever the incoming activations are dead; move off it
    let mut enc = Encoder::new(ecfg.clone(), seed).unwrap().params().clone();
    for (name, t) in enc.iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v += r.random_range(-0.1..0.1);
            }
        }
    }
    let student = Encoder::from_params(ecfg.clone(), enc).unwrap();
    let teacher_dim = 6;
    let mut aux = stage2_aux(student.embed_dim(), teacher_dim, &cfg.tasks, &mut r);
    // non-zero heads so every path carries gradient
    for (_, t) in aux.iter_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let b = 4;
    let labels = vec![
        BTreeMap::from([(Task::Birads, 1), (Task::Composition, 2)]),
        BTreeMap::from([(Task::Composition, 0)]),
        BTreeMap::new(),
        BTreeMap::from([(Task::Birads, 4), (Task::Composition, 3)]),
    ];
    let batch = Stage2Batch {
        high: rand_tensor(&mut r, &[b, 1, 64, 64], 1.0),
        low: rand_tensor(&mut r, &[b, 1, 32, 32], 1.0),
        teacher: rand_tensor(&mut r, &[b, teacher_dim], 1.0),
        labels,
    };
    let mut store = ParamStore::new();
    store.extend_prefixed("enc.", student.params());
    store.extend_prefixed("aux.", &aux);

    let mut g = Graph::new();
    let t = stage2_objective(&mut g, &student, &aux, &batch, &cfg).unwrap();
    assert!(t.distill.is_some() && t.sup.is_some() && t.con.is_some());
    let grads = g.backward(t.total);
    let mut analytic = prefixed(g.param_grads(&grads, student.params()), "enc.");
    analytic.extend(prefixed(g.param_grads(&grads, &aux), "aux."));

    let loss = |s: &ParamStore| {
        let enc = Encoder::from_params(ecfg.clone(), s.sub_store("enc.")).unwrap();
        let aux = s.sub_store("aux.");
        let mut g = Graph::new();
        let t = stage2_objective(&mut g, &enc, &aux, &batch, &cfg).unwrap();
        g.item(t.total)
    };
    run_check(&store, &analytic, loss, seed + 7)
}

/// Segmentation BCE + Dice through the full decoder.
pub fn segmentation_gradcheck(seed: u64) -> GradReport {
    let side = 32;
    let channels = [2, 2, 4, 4];
    let protocol = SegmentationProtocol {
        width: 4,
        ..Default::default()
    };
    let seg = Segmenter::new(protocol, side, channels, seed);
    let mut r = rng(seed);
    let b = 2;
    let levels: Vec<Tensor> = pyramid_sides(side)
        .iter()
        .zip(channels)
        .map(|(&s, c)| rand_tensor(&mut r, &[b, c, s, s], 1.0))
        .collect();
    let image = rand_tensor(&mut r, &[b, 1, side, side], 1.0);
    let targets: Vec<f64> = (0..b * side * side).map(|_| r.random_bool(0.2) as u8 as f64).collect();
    let eval = |seg: &Segmenter, g: &mut Graph| {
        let lv: [autograd::Var; 4] = std::array::from_fn(|l| g.constant(levels[l].clone()));
        let img = g.constant(image.clone());
        let z = seg.forward(g, lv, img, true);
        seg.loss(g, z, &targets)
    };
    let mut g = Graph::new();
    let l = eval(&seg, &mut g);
    let grads = g.backward(l);
    let analytic = g.param_grads(&grads, &seg.params);
    let loss = |s: &ParamStore| {
        let mut other = seg.clone();
        other.params = s.clone();
        let mut g = Graph::new();
        let l = eval(&other, &mut g);
        g.item(l)
    };
    run_check(&seg.params, &analytic, loss, seed + 7)
}
