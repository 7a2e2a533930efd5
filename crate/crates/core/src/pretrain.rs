//! Stage 1 (self-supervised ViT teacher: masked-patch reconstruction plus a
//! contrastive term against an EMA copy) and Stage 2 (CNN student trained
//! with distillation, supervised and cross-resolution contrastive losses).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use autograd::{init, AdamW, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{GrayImage, ImageRecord, Task};
use crate::encoders::{batch_tensor, patchify, CnnConfig, Encoder, EncoderConfig, EncoderError, VitConfig};
use crate::preprocess::{preprocess_record, resize, PreprocessError, HIGH_RES, LOW_RES};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("teacher could not be loaded: {0}")]
    TeacherLoadFailure(#[source] EncoderError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("no record in the batch carries a supervised label")]
    NoLabeledRecords,
    #[error("mask has {got} entries for {expected} patches")]
    MaskLengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T> = std::result::Result<T, PretrainError>;

// ---------------------------------------------------------------------------
// loss curves

/// Per-step loss terms; written as CSV `step,<term>...,total`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub terms: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>, f64)>,
}

impl LossCurve {
    fn new(terms: &[&str]) -> Self {
        Self {
            terms: terms.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn totals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.2).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{},total\n", self.terms.join(","));
        for (step, vals, total) in &self.rows {
            let _ = write!(s, "{step}");
            for v in vals {
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{total}");
        }
        s
    }
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// value-level losses

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(PretrainError::DimMismatch(d, bad.len()));
    }
    Ok(Tensor::new(&[rows.len(), d], rows.concat()))
}

/// NT-Xent between two views of the same batch (rows L2-normalised
/// internally, both directions averaged).
pub fn contrastive_loss(view1: &[Vec<f64>], view2: &[Vec<f64>], tau: f64) -> Result<f64> {
    if view1.len() != view2.len() {
        return Err(PretrainError::DimMismatch(view1.len(), view2.len()));
    }
    if view1.len() < 2 {
        return Err(PretrainError::BatchTooSmall(view1.len()));
    }
    let (a, b) = (rows_tensor(view1)?, rows_tensor(view2)?);
    if a.shape() != b.shape() {
        return Err(PretrainError::DimMismatch(a.shape()[1], b.shape()[1]));
    }
    let mut g = Graph::new();
    let (a, b) = (g.constant(a), g.constant(b));
    let l = g.nt_xent(a, b, tau);
    Ok(g.item(l))
}

/// Mean squared error between a projected student embedding and the teacher's.
pub fn distill_loss(projected_student: &[f64], teacher: &[f64]) -> Result<f64> {
    if projected_student.len() != teacher.len() {
        return Err(PretrainError::DimMismatch(projected_student.len(), teacher.len()));
    }
    if teacher.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[1, teacher.len()], projected_student.to_vec()));
    let b = g.constant(Tensor::new(&[1, teacher.len()], teacher.to_vec()));
    let l = g.mse(a, b);
    Ok(g.item(l))
}

/// Logits of one task over a batch; `labels[i] = None` for records without
/// a label for the task.
#[derive(Clone, Debug)]
pub struct TaskLogits {
    pub logits: Vec<Vec<f64>>,
    pub labels: Vec<Option<usize>>,
}

/// Sum over tasks of the mean cross-entropy of labelled records.
pub fn supervised_loss(tasks: &[TaskLogits]) -> Result<f64> {
    let mut total = 0.0;
    let mut any = false;
    for t in tasks {
        let rows: Vec<usize> = (0..t.labels.len()).filter(|&i| t.labels[i].is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        any = true;
        let logits: Vec<Vec<f64>> = rows.iter().map(|&i| t.logits[i].clone()).collect();
        let targets: Vec<usize> = rows.iter().map(|&i| t.labels[i].unwrap()).collect();
        let mut g = Graph::new();
        let z = g.constant(rows_tensor(&logits)?);
        let l = g.cross_entropy(z, &targets);
        total += g.item(l);
    }
    if !any {
        return Err(PretrainError::NoLabeledRecords);
    }
    Ok(total)
}

/// Mean squared error over masked patch rows of `pred` vs `target`
/// (`[patches, patch_dim]`); 0 when nothing is masked.
pub fn masked_patch_mse(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f64> {
    let n = target.shape()[0];
    if mask.len() != n {
        return Err(PretrainError::MaskLengthMismatch {
            expected: n,
            got: mask.len(),
        });
    }
    let mut g = Graph::new();
    let (p, t) = (g.constant(pred.clone()), g.constant(target.clone()));
    Ok(mim_term(&mut g, p, t, mask).map_or(0.0, |v| g.item(v)))
}

fn mim_term(g: &mut Graph, pred: Var, target: Var, mask: &[bool]) -> Option<Var> {
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return None;
    }
    let p = g.select_rows(pred, &rows);
    let t = g.select_rows(target, &rows);
    Some(g.mse(p, t))
}

// ---------------------------------------------------------------------------
// Stage 1

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub vit: VitConfig,
    pub mask_ratio: f64,
    pub ema_momentum: f64,
    pub temperature: f64,
    pub w_mim: f64,
    pub w_con: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Maximum translation (pixels) of the augmented views.
    pub max_shift: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            vit: VitConfig::default(),
            mask_ratio: 0.4,
            ema_momentum: 0.99,
            temperature: 0.1,
            w_mim: 1.0,
            w_con: 1.0,
            steps: 200,
            batch: 16,
            lr: 1e-3,
            max_shift: 4,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum must be in [0, 1]");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.w_mim < 0.0 || self.w_con < 0.0 || self.w_mim + self.w_con == 0.0 {
            return bad("loss weights must be non-negative and not both zero");
        }
        if self.w_con > 0.0 && self.batch < 2 {
            return bad("contrastive term needs batch >= 2");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        Ok(())
    }
}

/// `θ_ema ← m·θ_ema + (1 − m)·θ_online`, parameter by parameter.
pub fn ema_update(ema: &mut ParamStore, online: &ParamStore, m: f64) {
    for (name, t) in ema.iter_mut() {
        let src = online.get(name).unwrap_or_else(|| panic!("online is missing `{name}`"));
        for (e, o) in t.data_mut().iter_mut().zip(src.data()) {
            *e = m * *e + (1.0 - m) * o;
        }
    }
}

/// Stage 1 auxiliary parameters: the mask token and the linear pixel decoder.
pub fn stage1_aux(cfg: &VitConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut aux = ParamStore::new();
    aux.insert("mask_token", init::trunc_normal(rng, &[1, cfg.width], 0.02));
    aux.insert("dec.w", init::trunc_normal(rng, &[cfg.width, cfg.patch_dim()], 0.02));
    aux.insert("dec.b", Tensor::zeros(&[cfg.patch_dim()]));
    aux.quantize_f32();
    aux
}

/// Masked-patch reconstruction loss of one image through `online` and the
/// decoder in `aux`.
pub fn mim_loss(online: &Encoder, aux: &ParamStore, image: &GrayImage, mask: &[bool]) -> Result<f64> {
    let EncoderConfig::Vit(cfg) = online.config() else {
        return Err(PretrainError::InvalidConfig("masked modelling needs a ViT".into()));
    };
    if mask.len() != cfg.num_patches() {
        return Err(PretrainError::MaskLengthMismatch {
            expected: cfg.num_patches(),
            got: mask.len(),
        });
    }
    let x = batch_tensor(&[image])?;
    let mut g = Graph::new();
    Ok(stage1_mim(&mut g, online, aux, &x, mask, false)?.map_or(0.0, |v| g.item(v)))
}

fn stage1_mim(
    g: &mut Graph,
    online: &Encoder,
    aux: &ParamStore,
    x: &Tensor,
    mask: &[bool],
    trainable: bool,
) -> Result<Option<Var>> {
    let EncoderConfig::Vit(cfg) = online.config() else { unreachable!() };
    let target = g.constant(patchify(x, cfg.patch_side));
    let xv = g.constant(x.clone());
    let token = g.bind(aux, "mask_token", trainable);
    let enc = online.forward_masked(g, xv, trainable, Some((mask, token)))?;
    let (dw, db) = (g.bind(aux, "dec.w", trainable), g.bind(aux, "dec.b", trainable));
    let pred = g.linear(enc.patch_tokens.expect("ViT"), dw, Some(db));
    Ok(mim_term(g, pred, target, mask))
}

/// One Stage 1 batch: two augmented views and the patch mask of view A.
#[derive(Clone, Debug)]
pub struct Stage1Batch {
    pub view_a: Tensor,
    pub view_b: Tensor,
    pub mask: Vec<bool>,
}

/// Terms of the Stage 1 objective on a batch, all recorded on `g`.
pub struct Stage1Terms {
    pub mim: Option<Var>,
    pub con: Option<Var>,
    pub total: Var,
}

/// `w_mim·MIM(view A masked) + w_con·½(NT-Xent(q_a, k_b) + NT-Xent(q_b, k_a))`
/// with `q` from the online network and `k` from the frozen EMA copy.
pub fn stage1_objective(
    g: &mut Graph,
    online: &Encoder,
    aux: &ParamStore,
    ema: &Encoder,
    batch: &Stage1Batch,
    cfg: &Stage1Config,
) -> Result<Stage1Terms> {
    let n = batch.view_a.shape()[0];
    let xa = g.constant(batch.view_a.clone());
    let token = g.bind(aux, "mask_token", true);
    let enc_a = online.forward_masked(g, xa, true, Some((&batch.mask, token)))?;
    let mut parts = Vec::new();
    let mut mim = None;
    if cfg.w_mim > 0.0 {
        let EncoderConfig::Vit(vc) = online.config() else { unreachable!() };
        let target = g.constant(patchify(&batch.view_a, vc.patch_side));
        let (dw, db) = (g.bind(aux, "dec.w", true), g.bind(aux, "dec.b", true));
        let pred = g.linear(enc_a.patch_tokens.expect("ViT"), dw, Some(db));
        if let Some(m) = mim_term(g, pred, target, &batch.mask) {
            mim = Some(m);
            parts.push(g.scale(m, cfg.w_mim));
        }
    }
    let mut con = None;
    if cfg.w_con > 0.0 {
        if n < 2 {
            return Err(PretrainError::BatchTooSmall(n));
        }
        let xb = g.constant(batch.view_b.clone());
        let q_b = online.forward(g, xb, true)?.embedding;
        let ka = ema.forward(g, xa, false)?.embedding;
        let kb = ema.forward(g, xb, false)?.embedding;
        let l1 = g.nt_xent(enc_a.embedding, kb, cfg.temperature);
        let l2 = g.nt_xent(q_b, ka, cfg.temperature);
        let s = g.add(l1, l2);
        let c = g.scale(s, 0.5);
        con = Some(c);
        parts.push(g.scale(c, cfg.w_con));
    }
    let total = match parts.as_slice() {
        [] => g.constant(Tensor::scalar(0.0)),
        [one] => *one,
        [a, rest @ ..] => rest.iter().fold(*a, |acc, &p| g.add(acc, p)),
    };
    Ok(Stage1Terms { mim, con, total })
}

/// Shifts an image by `(dy, dx)` with zero fill.
pub fn translate(img: &GrayImage, dy: i64, dx: i64) -> GrayImage {
    let (h, w) = (img.height() as i64, img.width() as i64);
    let mut out = GrayImage::filled(img.height(), img.width(), 0);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r - dy, c - dx);
            if (0..h).contains(&sr) && (0..w).contains(&sc) {
                out.set(r as usize, c as usize, img.get(sr as usize, sc as usize));
            }
        }
    }
    out
}

fn random_view(img: &GrayImage, max_shift: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let flipped = if rng.random_bool(0.5) { flip_pixels(img) } else { img.clone() };
    let s = max_shift as i64;
    if s == 0 {
        return flipped;
    }
    translate(&flipped, rng.random_range(-s..=s), rng.random_range(-s..=s))
}

fn flip_pixels(img: &GrayImage) -> GrayImage {
    let mut out = img.clone();
    let w = img.width();
    for r in 0..img.height() {
        for c in 0..w {
            out.set(r, c, img.get(r, w - 1 - c));
        }
    }
    out
}

/// Random mask with exactly `round(ratio·patches)` patches set per image.
pub fn random_patch_mask(batch: usize, patches: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let k = (ratio * patches as f64).round() as usize;
    let mut out = Vec::with_capacity(batch * patches);
    for _ in 0..batch {
        let mut m: Vec<bool> = (0..patches).map(|i| i < k).collect();
        m.shuffle(rng);
        out.extend(m);
    }
    out
}

/// Epoch-wise shuffled index batches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

/// Result of Stage 1: the EMA copy (the teacher) and the loss curve.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub teacher: Encoder,
    pub online: Encoder,
    pub curve: LossCurve,
}

/// Trains the ViT teacher on the given (training) records.
pub fn train_stage1(records: &[&ImageRecord], cfg: &Stage1Config, seed: u64) -> Result<Stage1Output> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(PretrainError::EmptyTrainSplit);
    }
    let side = cfg.vit.image_side;
    let images: Vec<GrayImage> = records
        .iter()
        .map(|r| preprocess_record(r, side).map(|p| p.pixels))
        .collect::<std::result::Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut online = Encoder::new(EncoderConfig::Vit(cfg.vit.clone()), rng.random())?;
    let mut aux = stage1_aux(&cfg.vit, &mut rng);
    let mut ema = online.clone();
    let mut opt_enc = AdamW::new(cfg.lr);
    let mut opt_aux = AdamW::new(cfg.lr);
    let mut batcher = Batcher::new(images.len());
    let mut curve = LossCurve::new(&["mim", "contrastive"]);

    for step in 0..cfg.steps {
        let idx = batcher.next(cfg.batch, &mut rng);
        let va: Vec<GrayImage> = idx.iter().map(|&i| random_view(&images[i], cfg.max_shift, &mut rng)).collect();
        let vb: Vec<GrayImage> = idx.iter().map(|&i| random_view(&images[i], cfg.max_shift, &mut rng)).collect();
        let batch = Stage1Batch {
            view_a: batch_tensor(&va.iter().collect::<Vec<_>>())?,
            view_b: batch_tensor(&vb.iter().collect::<Vec<_>>())?,
            mask: random_patch_mask(idx.len(), cfg.vit.num_patches(), cfg.mask_ratio, &mut rng),
        };
        let mut g = Graph::new();
        let terms = stage1_objective(&mut g, &online, &aux, &ema, &batch, cfg)?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.item(v));
        curve
            .rows
            .push((step, vec![val(terms.mim), val(terms.con)], g.item(terms.total)));
        let grads = g.backward(terms.total);
        let ge = g.param_grads(&grads, online.params());
        let ga = g.param_grads(&grads, &aux);
        drop(g);
        opt_enc.step(online.params_mut(), &ge);
        opt_aux.step(&mut aux, &ga);
        ema_update(ema.params_mut(), online.params(), cfg.ema_momentum);
    }
    ema.params_mut().quantize_f32();
    online.params_mut().quantize_f32();
    Ok(Stage1Output {
        teacher: ema,
        online,
        curve,
    })
}

// ---------------------------------------------------------------------------
// Stage 2

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    NoDistill,
    NoSup,
    NoCnn,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoDistill => "no_distill",
            Ablation::NoSup => "no_sup",
            Ablation::NoCnn => "no_cnn",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Ablation::NoDistill, Ablation::NoSup, Ablation::NoCnn]
            .into_iter()
            .find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub student: CnnConfig,
    pub w_distill: f64,
    pub w_sup: f64,
    pub w_con: f64,
    pub tasks: Vec<Task>,
    pub high: usize,
    pub low: usize,
    pub temperature: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub ablation: BTreeSet<Ablation>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            student: CnnConfig::default(),
            w_distill: 1.0,
            w_sup: 1.0,
            w_con: 1.0,
            tasks: vec![Task::Birads, Task::Composition],
            high: HIGH_RES,
            low: LOW_RES,
            temperature: 0.1,
            steps: 200,
            batch: 16,
            lr: 1e-3,
            ablation: BTreeSet::new(),
        }
    }
}

impl Stage2Config {
    /// Loss weights after the ablation switches: (distill, sup, con).
    pub fn effective_weights(&self) -> (f64, f64, f64) {
        let wd = if self.ablation.contains(&Ablation::NoDistill) { 0.0 } else { self.w_distill };
        let ws = if self.ablation.contains(&Ablation::NoSup) { 0.0 } else { self.w_sup };
        (wd, ws, self.w_con)
    }

    /// Student architecture: the CNN, or a ViT at the high resolution when
    /// `no_cnn` is set.
    pub fn student_config(&self, teacher: &EncoderConfig) -> Result<EncoderConfig> {
        if self.ablation.contains(&Ablation::NoCnn) {
            let EncoderConfig::Vit(t) = teacher else {
                return Err(PretrainError::InvalidConfig("no_cnn needs a ViT teacher config".into()));
            };
            Ok(EncoderConfig::Vit(VitConfig {
                image_side: self.high,
                ..t.clone()
            }))
        } else {
            Ok(EncoderConfig::Cnn(self.student.clone()))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.to_string()));
        let (wd, ws, wc) = self.effective_weights();
        if wd < 0.0 || ws < 0.0 || wc < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if wd + ws + wc == 0.0 {
            return bad("all effective loss weights are zero");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.batch == 0 || (wc > 0.0 && self.batch < 2) {
            return bad("batch too small");
        }
        if self.high == 0 || self.low == 0 {
            return bad("resolutions must be positive");
        }
        Ok(())
    }
}

/// Stage 2 trainable head parameters: projection to the teacher width and
/// one linear classifier per supervised task.
pub fn stage2_aux(student_dim: usize, teacher_dim: usize, tasks: &[Task], rng: &mut ChaCha8Rng) -> ParamStore {
    let mut aux = ParamStore::new();
    aux.insert("proj.w", init::kaiming_uniform(rng, &[student_dim, teacher_dim], student_dim));
    aux.insert("proj.b", Tensor::zeros(&[teacher_dim]));
    for t in tasks {
        let c = t.num_classes();
        aux.insert(format!("head.{t}.w"), Tensor::zeros(&[student_dim, c]));
        aux.insert(format!("head.{t}.b"), Tensor::zeros(&[c]));
    }
    aux.quantize_f32();
    aux
}

/// One Stage 2 batch.
#[derive(Clone, Debug)]
pub struct Stage2Batch {
    /// `[b, 1, high, high]` (student side).
    pub high: Tensor,
    /// `[b, 1, s, s]`: the low-resolution rendering at the student's input side.
    pub low: Tensor,
    /// `[b, teacher_dim]`, fixed.
    pub teacher: Tensor,
    pub labels: Vec<BTreeMap<Task, usize>>,
}

pub struct Stage2Terms {
    pub distill: Option<Var>,
    pub sup: Option<Var>,
    pub con: Option<Var>,
    pub total: Var,
}

/// Sum of the active weighted terms; see [`train_stage2`].
pub fn stage2_objective(
    g: &mut Graph,
    student: &Encoder,
    aux: &ParamStore,
    batch: &Stage2Batch,
    cfg: &Stage2Config,
) -> Result<Stage2Terms> {
    let (wd, ws, wc) = cfg.effective_weights();
    let n = batch.high.shape()[0];
    let xh = g.constant(batch.high.clone());
    let sh = student.forward(g, xh, true)?.embedding;
    let mut parts = Vec::new();

    let mut distill = None;
    if wd > 0.0 {
        let (pw, pb) = (g.bind(aux, "proj.w", true), g.bind(aux, "proj.b", true));
        let proj = g.linear(sh, pw, Some(pb));
        let t = g.constant(batch.teacher.clone());
        if g.shape(proj) != g.shape(t) {
            return Err(PretrainError::DimMismatch(g.shape(proj)[1], g.shape(t)[1]));
        }
        let d = g.mse(proj, t);
        distill = Some(d);
        parts.push(g.scale(d, wd));
    }

    let mut sup = None;
    if ws > 0.0 {
        let mut acc: Option<Var> = None;
        for &task in &cfg.tasks {
            let rows: Vec<usize> = (0..n).filter(|&i| batch.labels[i].contains_key(&task)).collect();
            if rows.is_empty() {
                continue;
            }
            let targets: Vec<usize> = rows.iter().map(|&i| batch.labels[i][&task]).collect();
            let e = g.select_rows(sh, &rows);
            let (hw, hb) = (g.bind(aux, &format!("head.{task}.w"), true), g.bind(aux, &format!("head.{task}.b"), true));
            let z = g.linear(e, hw, Some(hb));
            let ce = g.cross_entropy(z, &targets);
            acc = Some(match acc {
                None => ce,
                Some(a) => g.add(a, ce),
            });
        }
        if let Some(s) = acc {
            sup = Some(s);
            parts.push(g.scale(s, ws));
        }
    }

    let mut con = None;
    if wc > 0.0 {
        if n < 2 {
            return Err(PretrainError::BatchTooSmall(n));
        }
        let xl = g.constant(batch.low.clone());
        let sl = student.forward(g, xl, true)?.embedding;
        let c = g.nt_xent(sh, sl, cfg.temperature);
        con = Some(c);
        parts.push(g.scale(c, wc));
    }

    let total = match parts.as_slice() {
        [] => g.constant(Tensor::scalar(0.0)),
        [one] => *one,
        [a, rest @ ..] => rest.iter().fold(*a, |acc, &p| g.add(acc, p)),
    };
    Ok(Stage2Terms {
        distill,
        sup,
        con,
        total,
    })
}

#[derive(Clone, Debug)]
pub struct Stage2Output {
    pub student: Encoder,
    pub heads: ParamStore,
    pub curve: LossCurve,
}

/// Trains the student against a frozen teacher.
///
/// Each step flips every sampled image at random, renders it at both
/// resolutions and minimises
/// `w_d·MSE(proj(student(high)), teacher) + w_s·Σ_task CE + w_c·NT-Xent(student(high), student(low))`.
/// The teacher sees the image at its own input side; its embeddings are
/// cached per (image, flip).
pub fn train_stage2(
    records: &[&ImageRecord],
    teacher: &Encoder,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Output> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(PretrainError::EmptyTrainSplit);
    }
    let student_cfg = cfg.student_config(teacher.config())?;
    let student_side = match &student_cfg {
        EncoderConfig::Vit(c) => Some(c.image_side),
        EncoderConfig::Cnn(_) => None,
    };
    let teacher_side = teacher.input_side().unwrap_or(cfg.high);

    let render = |side: usize| -> Result<Vec<GrayImage>> {
        records
            .iter()
            .map(|r| preprocess_record(r, side).map(|p| p.pixels).map_err(Into::into))
            .collect()
    };
    let high = render(cfg.high)?;
    let mut low = render(cfg.low)?;
    if let Some(s) = student_side {
        // a fixed-size student sees the low image upsampled back to its side
        low = low.iter().map(|im| resize(im, s)).collect::<std::result::Result<_, _>>()?;
    }
    let teacher_imgs = render(teacher_side)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = Encoder::new(student_cfg, rng.random())?;
    let mut aux = stage2_aux(student.embed_dim(), teacher.embed_dim(), &cfg.tasks, &mut rng);
    let mut opt_s = AdamW::new(cfg.lr);
    let mut opt_a = AdamW::new(cfg.lr);
    let mut cache: HashMap<(usize, bool), Vec<f64>> = HashMap::new();
    let mut batcher = Batcher::new(records.len());
    let mut curve = LossCurve::new(&["distill", "supervised", "contrastive"]);

    for step in 0..cfg.steps {
        let idx = batcher.next(cfg.batch, &mut rng);
        let flips: Vec<bool> = idx.iter().map(|_| rng.random_bool(0.5)).collect();
        let pick = |set: &[GrayImage], i: usize, f: bool| if f { flip_pixels(&set[i]) } else { set[i].clone() };
        let hi: Vec<GrayImage> = idx.iter().zip(&flips).map(|(&i, &f)| pick(&high, i, f)).collect();
        let lo: Vec<GrayImage> = idx.iter().zip(&flips).map(|(&i, &f)| pick(&low, i, f)).collect();
        let mut temb = Vec::with_capacity(idx.len() * teacher.embed_dim());
        for (&i, &f) in idx.iter().zip(&flips) {
            if let std::collections::hash_map::Entry::Vacant(slot) = cache.entry((i, f)) {
                slot.insert(teacher.encode(&pick(&teacher_imgs, i, f))?.embedding);
            }
            temb.extend_from_slice(&cache[&(i, f)]);
        }
        let batch = Stage2Batch {
            high: batch_tensor(&hi.iter().collect::<Vec<_>>())?,
            low: batch_tensor(&lo.iter().collect::<Vec<_>>())?,
            teacher: Tensor::new(&[idx.len(), teacher.embed_dim()], temb),
            labels: idx
                .iter()
                .map(|&i| {
                    records[i]
                        .labels
                        .iter()
                        .filter(|(t, _)| cfg.tasks.contains(t))
                        .map(|(&t, &l)| (t, l))
                        .collect()
                })
                .collect(),
        };
        let mut g = Graph::new();
        let terms = stage2_objective(&mut g, &student, &aux, &batch, cfg)?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.item(v));
        curve.rows.push((
            step,
            vec![val(terms.distill), val(terms.sup), val(terms.con)],
            g.item(terms.total),
        ));
        let grads = g.backward(terms.total);
        let gs = g.param_grads(&grads, student.params());
        let ga = g.param_grads(&grads, &aux);
        drop(g);
        opt_s.step(student.params_mut(), &gs);
        opt_a.step(&mut aux, &ga);
    }
    student.params_mut().quantize_f32();
    aux.quantize_f32();
    Ok(Stage2Output {
        student,
        heads: aux,
        curve,
    })
}

/// A batch's labels restricted to `tasks`, as used by Stage 2.
pub fn stage2_labels(rec: &ImageRecord, tasks: &[Task]) -> BTreeMap<Task, usize> {
    rec.labels
        .iter()
        .filter(|(t, _)| tasks.contains(t))
        .map(|(&t, &l)| (t, l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_fixed_points() {
        let mut online = ParamStore::new();
        online.insert("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let mut ema = ParamStore::new();
        ema.insert("w", Tensor::new(&[3], vec![0.0, 4.0, 2.0]));
        let start = ema.clone();
        for _ in 0..5 {
            ema_update(&mut ema, &online, 1.0);
        }
        assert_eq!(ema, start);
        ema_update(&mut ema, &online, 0.0);
        assert_eq!(ema, online);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn distill_definition() {
        assert_eq!(distill_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(distill_loss(&[0.3, 1.0], &[0.3, 1.0]).unwrap(), 0.0);
        assert!(matches!(distill_loss(&[0.0], &[1.0, 0.0]), Err(PretrainError::DimMismatch(1, 2))));
    }

    #[test]
    fn all_zero_weights_rejected() {
        let cfg = Stage2Config {
            w_distill: 0.0,
            w_sup: 0.0,
            w_con: 0.0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(PretrainError::InvalidConfig(_))));
        let cfg = Stage2Config {
            w_con: 0.0,
            ablation: [Ablation::NoDistill, Ablation::NoSup].into_iter().collect(),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
