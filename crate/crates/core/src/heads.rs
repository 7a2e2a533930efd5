//! Downstream heads on top of a frozen encoder: two-stage lesion detector,
//! UNet-style segmenter, linear probe and a small VQA classifier.
//!
//! Encoder outputs are computed once per (image, flip) and cached; only the
//! head parameters are trained (the probe can optionally fine-tune).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use autograd::{init, kernels, AdamW, Graph, ParamStore, Roi, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{BoundingBox, GrayImage, ImageRecord, Mask, QuestionType, Task};
use crate::encoders::{batch_tensor, Encoder, EncoderError, EncoderOutput};
use crate::evalstats::{balanced_accuracy_observed, confusion_matrix, dice_and_iou, EvalError};
use crate::preprocess::{flip, preprocess_record, PreprocessError, HIGH_RES, LESION_CLASSES};

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("no training record has box annotations")]
    NoBoxAnnotations,
    #[error("no training record has a non-empty lesion mask")]
    NoMasks,
    #[error("no training record is labelled for task {0}")]
    TaskAbsent(Task),
    #[error("task {0} has a single class in the training split")]
    TaskDegenerate(Task),
    #[error("no training record has question/answer pairs")]
    NoQaPairs,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, HeadsError>;

// ---------------------------------------------------------------------------
// shared plumbing

/// Target pyramid sides for an input of side `s`: `(8b, 4b, 2b, b)` with
/// `b = round(s / 32)`, i.e. strides 4, 8, 16, 32.
pub fn pyramid_sides(input_side: usize) -> [usize; 4] {
    let b = ((input_side as f64 / 32.0).round() as usize).max(1);
    [8 * b, 4 * b, 2 * b, b]
}

/// Bilinearly resizes each of the four levels to [`pyramid_sides`].
pub fn adapt_pyramid(output: &EncoderOutput, input_side: usize) -> Vec<Tensor> {
    assert_eq!(output.pyramid.len(), 4, "expected four pyramid levels");
    output
        .pyramid
        .iter()
        .zip(pyramid_sides(input_side))
        .map(|(t, side)| resize_map(t, side))
        .collect()
}

fn resize_map(t: &Tensor, side: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == side && w == side {
        return t.clone();
    }
    let mut data = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        data.extend(kernels::resize_plane(&t.data()[ch * h * w..(ch + 1) * h * w], h, w, side, side));
    }
    Tensor::new(&[c, side, side], data)
}

/// Patience-based early stopping on a higher-is-better validation score.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_step: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_step: 0,
            stale: 0,
        }
    }

    /// Records a validation score; returns `true` when it is a new best.
    pub fn observe(&mut self, step: usize, score: f64) -> bool {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.best_step = step;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience.max(1)
    }
}

/// One training-log row; `val` is set on validation steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub val: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn validations(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.val.map(|v| (r.step, v))).collect()
    }

    /// `(step, score)` of the first maximum validation score.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.validations()
            .into_iter()
            .fold(None, |acc, (s, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((s, v)),
            })
    }

    pub fn last_step(&self) -> usize {
        self.rows.last().map_or(0, |r| r.step)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,val\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.val.map_or(String::new(), |v| v.to_string()));
        }
        s
    }
}

/// True when training halted no later than `patience` validation rounds of
/// `validate_every` steps after the best validation step.
pub fn halted_within_patience(log: &TrainLog, patience: usize, validate_every: usize) -> bool {
    match log.best() {
        Some((best, _)) => log.last_step() <= best + patience.max(1) * validate_every,
        None => true,
    }
}

/// A preprocessed sample with its cached encoder pyramid.
#[derive(Clone, Debug)]
struct Cached {
    image: GrayImage,
    boxes: Vec<BoundingBox>,
    mask: Option<Mask>,
    pyramid: Vec<Tensor>,
}

/// Preprocesses at the encoder's side and caches adapted pyramids, for the
/// plain rendering and, if `with_flip`, its three flipped renderings; a
/// uniform draw over the four equals independent horizontal and vertical
/// coin flips.
fn cache_pyramids(encoder: &Encoder, records: &[&ImageRecord], with_flip: bool) -> Result<Vec<Vec<Cached>>> {
    let side = encoder.input_side().unwrap_or(HIGH_RES);
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(16) {
        let mut variants: Vec<Vec<ImageRecord>> = Vec::new();
        for r in chunk {
            let p = preprocess_record(r, side)?;
            let mut v = vec![p.clone()];
            if with_flip {
                for (h, vert) in [(true, false), (false, true), (true, true)] {
                    v.push(flip(&p, h, vert));
                }
            }
            variants.push(v);
        }
        let flat: Vec<&GrayImage> = variants.iter().flatten().map(|r| &r.pixels).collect();
        let mut encoded = encoder.encode_batch(&flat)?.into_iter();
        for v in variants {
            out.push(
                v.into_iter()
                    .map(|r| Cached {
                        pyramid: adapt_pyramid(&encoded.next().unwrap(), side),
                        image: r.pixels,
                        boxes: r.boxes,
                        mask: r.mask,
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn stack(ts: &[&Tensor]) -> Tensor {
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(ts[0].shape());
    Tensor::new(&shape, ts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

fn stack_levels(g: &mut Graph, samples: &[&Cached]) -> [Var; 4] {
    std::array::from_fn(|l| g.constant(stack(&samples.iter().map(|s| &s.pyramid[l]).collect::<Vec<_>>())))
}

fn conv_init(rng: &mut ChaCha8Rng, store: &mut ParamStore, name: &str, out: usize, inp: usize, k: usize) {
    store.insert(format!("{name}.w"), init::kaiming_uniform(rng, &[out, inp, k, k], inp * k * k));
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

fn conv(g: &mut Graph, p: &ParamStore, name: &str, x: Var, pad: usize, trainable: bool) -> Var {
    let w = g.bind(p, &format!("{name}.w"), trainable);
    let b = g.bind(p, &format!("{name}.b"), trainable);
    g.conv2d(x, w, Some(b), 1, pad)
}

fn dense(g: &mut Graph, p: &ParamStore, name: &str, x: Var, trainable: bool) -> Var {
    let w = g.bind(p, &format!("{name}.w"), trainable);
    let b = g.bind(p, &format!("{name}.b"), trainable);
    g.linear(x, w, Some(b))
}

// ---------------------------------------------------------------------------
// detection

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionProtocol {
    pub fpn_width: usize,
    pub roi_hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub validate_every: usize,
    pub patience: usize,
    /// Anchor side as a multiple of the level stride (one square anchor per cell).
    pub anchor_scale: f64,
    pub rpn_samples: usize,
    pub rpn_nms_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub roi_samples: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub flip_augment: bool,
}

impl Default for DetectionProtocol {
    fn default() -> Self {
        Self {
            fpn_width: 32,
            roi_hidden: 64,
            lr: 1e-3,
            batch: 8,
            max_steps: 2000,
            validate_every: 500,
            patience: 20,
            anchor_scale: 2.0,
            rpn_samples: 64,
            rpn_nms_iou: 0.7,
            pre_nms_top: 64,
            post_nms_top: 32,
            roi_samples: 32,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 3,
            flip_augment: true,
        }
    }
}

/// A scored, classed box.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Greedy non-maximum suppression (class-agnostic); output sorted by
/// descending score, ties by input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        if keep.iter().all(|k| k.bbox.iou(&dets[i].bbox) <= iou_threshold) {
            keep.push(dets[i].clone());
        }
    }
    keep
}

/// NMS applied within each class, merged by descending score.
pub fn batched_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let classes: BTreeSet<usize> = dets.iter().map(|d| d.bbox.class_id).collect();
    let mut out: Vec<Detection> = classes
        .into_iter()
        .flat_map(|c| {
            let sub: Vec<Detection> = dets.iter().filter(|d| d.bbox.class_id == c).cloned().collect();
            nms(&sub, iou_threshold)
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Per image with ground truth: mean over its boxes of the best IoU with
/// any prediction (0 without predictions). Images without ground truth are
/// skipped.
pub fn eval_detection(preds: &[Vec<Detection>], truths: &[Vec<BoundingBox>]) -> Vec<f64> {
    preds
        .iter()
        .zip(truths)
        .filter(|(_, t)| !t.is_empty())
        .map(|(p, t)| {
            t.iter()
                .map(|gt| p.iter().map(|d| d.bbox.iou(gt)).fold(0.0, f64::max))
                .sum::<f64>()
                / t.len() as f64
        })
        .collect()
}

/// `(cx, cy, w, h)`.
fn center_form(b: &BoundingBox) -> [f64; 4] {
    [(b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0, b.width(), b.height()]
}

/// Regression target of `gt` relative to `base`, scaled by `weights`.
pub fn encode_box(base: &BoundingBox, gt: &BoundingBox, weights: [f64; 4]) -> [f64; 4] {
    let [ax, ay, aw, ah] = center_form(base);
    let [gx, gy, gw, gh] = center_form(gt);
    [
        weights[0] * (gx - ax) / aw,
        weights[1] * (gy - ay) / ah,
        weights[2] * (gw / aw).ln(),
        weights[3] * (gh / ah).ln(),
    ]
}

pub fn decode_box(base: &BoundingBox, d: [f64; 4], weights: [f64; 4], class_id: usize) -> BoundingBox {
    let [ax, ay, aw, ah] = center_form(base);
    let clamp = (1000.0f64 / 16.0).ln();
    let cx = ax + d[0] / weights[0] * aw;
    let cy = ay + d[1] / weights[1] * ah;
    let w = aw * (d[2] / weights[2]).min(clamp).exp();
    let h = ah * (d[3] / weights[3]).min(clamp).exp();
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, class_id)
}

const RPN_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
const ROI_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];
const ROI_POOL: usize = 7;

fn clip_box(b: &BoundingBox, side: f64) -> BoundingBox {
    BoundingBox::new(b.x1.clamp(0.0, side), b.y1.clamp(0.0, side), b.x2.clamp(0.0, side), b.y2.clamp(0.0, side), b.class_id)
}

/// FPN + RPN + RoI head over a four-level pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub protocol: DetectionProtocol,
    pub input_side: usize,
    pub channels: [usize; 4],
    pub num_classes: usize,
    pub params: ParamStore,
}

struct RpnOut {
    obj: [Var; 4],
    deltas: [Var; 4],
}

impl Detector {
    pub fn new(protocol: DetectionProtocol, input_side: usize, channels: [usize; 4], num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = protocol.fpn_width;
        let mut p = ParamStore::new();
        for (l, &c) in channels.iter().enumerate() {
            conv_init(&mut rng, &mut p, &format!("fpn.lat{l}"), f, c, 1);
            conv_init(&mut rng, &mut p, &format!("fpn.smooth{l}"), f, f, 3);
        }
        conv_init(&mut rng, &mut p, "rpn.conv", f, f, 3);
        p.insert("rpn.obj.w", init::trunc_normal(&mut rng, &[1, f, 1, 1], 0.01));
        p.insert("rpn.obj.b", Tensor::zeros(&[1]));
        p.insert("rpn.reg.w", init::trunc_normal(&mut rng, &[4, f, 1, 1], 0.01));
        p.insert("rpn.reg.b", Tensor::zeros(&[4]));
        let pooled = f * ROI_POOL * ROI_POOL;
        let h = protocol.roi_hidden;
        p.insert("roi.fc.w", init::kaiming_uniform(&mut rng, &[pooled, h], pooled));
        p.insert("roi.fc.b", Tensor::zeros(&[h]));
        p.insert("roi.cls.w", init::trunc_normal(&mut rng, &[h, num_classes + 1], 0.01));
        p.insert("roi.cls.b", Tensor::zeros(&[num_classes + 1]));
        p.insert("roi.reg.w", init::trunc_normal(&mut rng, &[h, 4], 0.001));
        p.insert("roi.reg.b", Tensor::zeros(&[4]));
        p.quantize_f32();
        Self {
            protocol,
            input_side,
            channels,
            num_classes,
            params: p,
        }
    }

    fn sides(&self) -> [usize; 4] {
        pyramid_sides(self.input_side)
    }

    fn stride(&self, level: usize) -> f64 {
        self.input_side as f64 / self.sides()[level] as f64
    }

    /// Anchors of one level, row-major over cells.
    pub fn anchors(&self, level: usize) -> Vec<BoundingBox> {
        let s = self.sides()[level];
        let t = self.stride(level);
        let half = self.protocol.anchor_scale * t / 2.0;
        let mut out = Vec::with_capacity(s * s);
        for i in 0..s {
            for j in 0..s {
                let (cx, cy) = ((j as f64 + 0.5) * t, (i as f64 + 0.5) * t);
                out.push(BoundingBox::new(cx - half, cy - half, cx + half, cy + half, 0));
            }
        }
        out
    }

    fn fpn(&self, g: &mut Graph, x: [Var; 4], trainable: bool) -> [Var; 4] {
        let sides = self.sides();
        let lat: Vec<Var> = (0..4)
            .map(|l| conv(g, &self.params, &format!("fpn.lat{l}"), x[l], 0, trainable))
            .collect();
        let mut merged = [lat[3]; 4];
        for l in (0..3).rev() {
            let up = g.resize(merged[l + 1], sides[l], sides[l]);
            merged[l] = g.add(lat[l], up);
        }
        std::array::from_fn(|l| conv(g, &self.params, &format!("fpn.smooth{l}"), merged[l], 1, trainable))
    }

    fn rpn(&self, g: &mut Graph, f: &[Var; 4], trainable: bool) -> RpnOut {
        let mut obj = Vec::new();
        let mut deltas = Vec::new();
        for &fl in f {
            let h = conv(g, &self.params, "rpn.conv", fl, 1, trainable);
            let h = g.relu(h);
            obj.push(conv(g, &self.params, "rpn.obj", h, 0, trainable));
            deltas.push(conv(g, &self.params, "rpn.reg", h, 0, trainable));
        }
        RpnOut {
            obj: obj.try_into().unwrap(),
            deltas: deltas.try_into().unwrap(),
        }
    }

    /// Top-scoring decoded anchors per image, NMS'd; `(box, objectness)`.
    fn proposals(&self, g: &Graph, rpn: &RpnOut, batch: usize) -> Vec<Vec<(BoundingBox, f64)>> {
        let side = self.input_side as f64;
        (0..batch)
            .map(|b| {
                let mut cands = Vec::new();
                for l in 0..4 {
                    let ss = self.sides()[l].pow(2);
                    let obj = &g.value(rpn.obj[l]).data()[b * ss..(b + 1) * ss];
                    let del = &g.value(rpn.deltas[l]).data()[b * 4 * ss..(b + 1) * 4 * ss];
                    let mut idx: Vec<usize> = (0..ss).collect();
                    idx.sort_by(|&a, &c| obj[c].total_cmp(&obj[a]).then(a.cmp(&c)));
                    idx.truncate(self.protocol.pre_nms_top);
                    let anchors = self.anchors(l);
                    for i in idx {
                        let d = [del[i], del[ss + i], del[2 * ss + i], del[3 * ss + i]];
                        let bx = clip_box(&decode_box(&anchors[i], d, RPN_WEIGHTS, 0), side);
                        if bx.width() >= 1.0 && bx.height() >= 1.0 {
                            cands.push(Detection { bbox: bx, score: obj[i] });
                        }
                    }
                }
                let mut kept = nms(&cands, self.protocol.rpn_nms_iou);
                kept.truncate(self.protocol.post_nms_top);
                kept.into_iter().map(|d| (d.bbox, d.score)).collect()
            })
            .collect()
    }

    /// Pyramid level used to pool a box: finer levels for smaller boxes.
    pub fn roi_level(&self, b: &BoundingBox) -> usize {
        let base = self.protocol.anchor_scale * self.stride(0);
        let s = (b.width() * b.height()).sqrt().max(1e-6);
        ((s / base).log2().floor().max(0.0) as usize).min(3)
    }

    /// `(class logits [R, C+1], box deltas [R, 4])` for `(batch, box)` rois.
    fn roi_head(&self, g: &mut Graph, f: &[Var; 4], rois: &[(usize, BoundingBox)], trainable: bool) -> (Var, Var) {
        let mut pooled = Vec::new();
        let mut order = Vec::new();
        for l in 0..4 {
            let t = self.stride(l);
            let (idx, rs): (Vec<usize>, Vec<Roi>) = rois
                .iter()
                .enumerate()
                .filter(|(_, (_, b))| self.roi_level(b) == l)
                .map(|(i, (bi, b))| {
                    (
                        i,
                        Roi {
                            batch: *bi,
                            x1: b.x1 / t,
                            y1: b.y1 / t,
                            x2: b.x2 / t,
                            y2: b.y2 / t,
                        },
                    )
                })
                .unzip();
            if rs.is_empty() {
                continue;
            }
            pooled.push(g.roi_align(f[l], &rs, ROI_POOL));
            order.extend(idx);
        }
        let cat = if pooled.len() == 1 { pooled[0] } else { g.concat_rows(&pooled) };
        let mut inverse = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        let x = g.select_rows(cat, &inverse);
        let x = g.reshape(x, &[rois.len(), self.protocol.fpn_width * ROI_POOL * ROI_POOL]);
        let h = dense(g, &self.params, "roi.fc", x, trainable);
        let h = g.relu(h);
        (
            dense(g, &self.params, "roi.cls", h, trainable),
            dense(g, &self.params, "roi.reg", h, trainable),
        )
    }

    /// Objectness of every anchor of one image (all levels concatenated).
    pub fn objectness(&self, pyramid: &[Tensor]) -> Vec<f64> {
        let mut g = Graph::new();
        let levels: [Var; 4] = std::array::from_fn(|l| g.constant(stack(&[&pyramid[l]])));
        let f = self.fpn(&mut g, levels, false);
        let r = self.rpn(&mut g, &f, false);
        r.obj.iter().flat_map(|&o| g.value(o).data().to_vec()).collect()
    }

    /// Final detections of one image from its adapted pyramid.
    pub fn detect(&self, pyramid: &[Tensor]) -> Vec<Detection> {
        let mut g = Graph::new();
        let levels: [Var; 4] = std::array::from_fn(|l| g.constant(stack(&[&pyramid[l]])));
        let f = self.fpn(&mut g, levels, false);
        let r = self.rpn(&mut g, &f, false);
        let props = self.proposals(&g, &r, 1).remove(0);
        if props.is_empty() {
            return Vec::new();
        }
        let rois: Vec<(usize, BoundingBox)> = props.iter().map(|(b, _)| (0, *b)).collect();
        let (cls, reg) = self.roi_head(&mut g, &f, &rois, false);
        let c1 = self.num_classes + 1;
        let (cv, rv) = (g.value(cls).data(), g.value(reg).data());
        let side = self.input_side as f64;
        let mut dets = Vec::new();
        for (i, (b, _)) in props.iter().enumerate() {
            let z = &cv[i * c1..(i + 1) * c1];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let (best, p) = (1..c1).map(|c| (c, e[c] / s)).fold((1, -1.0), |a, x| if x.1 > a.1 { x } else { a });
            if p < self.protocol.score_threshold {
                continue;
            }
            let d = [rv[i * 4], rv[i * 4 + 1], rv[i * 4 + 2], rv[i * 4 + 3]];
            let bx = clip_box(&decode_box(b, d, ROI_WEIGHTS, best - 1), side);
            if bx.width() > 0.0 && bx.height() > 0.0 {
                dets.push(Detection { bbox: bx, score: p });
            }
        }
        let mut out = batched_nms(&dets, self.protocol.nms_iou);
        out.truncate(self.protocol.max_detections);
        out
    }

    /// Detection training loss on a batch of samples.
    fn loss(&self, g: &mut Graph, samples: &[&Cached], rng: &mut ChaCha8Rng) -> Var {
        let p = &self.protocol;
        let b = samples.len();
        let levels = stack_levels(g, samples);
        let f = self.fpn(g, levels, true);
        let r = self.rpn(g, &f, true);
        let sides = self.sides();
        let anchors: Vec<Vec<BoundingBox>> = (0..4).map(|l| self.anchors(l)).collect();

        // RPN targets: (level, flat obj index, label, deltas if positive)
        let mut obj_rows: [Vec<usize>; 4] = Default::default();
        let mut obj_tgt: [Vec<f64>; 4] = Default::default();
        let mut reg_rows: [Vec<usize>; 4] = Default::default();
        let mut reg_tgt: [Vec<f64>; 4] = Default::default();
        let mut n_sampled = 0usize;
        for (bi, s) in samples.iter().enumerate() {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            let mut best_for_gt = vec![(0usize, 0usize, -1.0f64); s.boxes.len()];
            let mut matched: Vec<(usize, usize, Option<usize>, f64)> = Vec::new();
            for l in 0..4 {
                for (ai, a) in anchors[l].iter().enumerate() {
                    let (gi, iou) = s
                        .boxes
                        .iter()
                        .enumerate()
                        .map(|(gi, gt)| (gi, a.iou(gt)))
                        .fold((None, 0.0), |acc, (gi, v)| if v > acc.1 { (Some(gi), v) } else { acc });
                    if let Some(gi) = gi {
                        if iou > best_for_gt[gi].2 {
                            best_for_gt[gi] = (l, ai, iou);
                        }
                    }
                    matched.push((l, ai, gi, iou));
                }
            }
            for &(l, ai, gi, iou) in &matched {
                let forced = best_for_gt.iter().position(|&(bl, ba, _)| bl == l && ba == ai);
                if iou >= 0.5 || forced.is_some() {
                    pos.push((l, ai, forced.or(gi).unwrap()));
                } else if iou < 0.3 {
                    neg.push((l, ai));
                }
            }
            pos.shuffle(rng);
            neg.shuffle(rng);
            pos.truncate(p.rpn_samples / 2);
            neg.truncate(p.rpn_samples - pos.len());
            n_sampled += pos.len() + neg.len();
            for &(l, ai, gi) in &pos {
                let ss = sides[l] * sides[l];
                obj_rows[l].push(bi * ss + ai);
                obj_tgt[l].push(1.0);
                for k in 0..4 {
                    reg_rows[l].push(bi * 4 * ss + k * ss + ai);
                }
                reg_tgt[l].extend(encode_box(&anchors[l][ai], &s.boxes[gi], RPN_WEIGHTS));
            }
            for &(l, ai) in &neg {
                let ss = sides[l] * sides[l];
                obj_rows[l].push(bi * ss + ai);
                obj_tgt[l].push(0.0);
            }
        }
        let mut obj_parts = Vec::new();
        let mut reg_parts = Vec::new();
        for l in 0..4 {
            let ss = sides[l] * sides[l];
            if !obj_rows[l].is_empty() {
                let flat = g.reshape(r.obj[l], &[b * ss, 1]);
                obj_parts.push(g.select_rows(flat, &obj_rows[l]));
            }
            if !reg_rows[l].is_empty() {
                let flat = g.reshape(r.deltas[l], &[b * 4 * ss, 1]);
                reg_parts.push(g.select_rows(flat, &reg_rows[l]));
            }
        }
        let obj_all = g.concat_rows(&obj_parts);
        let obj_t: Vec<f64> = obj_tgt.concat();
        let mut loss = g.bce_with_logits(obj_all, &obj_t);
        if !reg_parts.is_empty() {
            let reg_all = g.concat_rows(&reg_parts);
            let l = g.smooth_l1(reg_all, &reg_tgt.concat(), 1.0 / 9.0, n_sampled.max(1) as f64);
            loss = g.add(loss, l);
        }

        // RoI head on proposals plus ground truth
        let props = self.proposals(g, &r, b);
        let mut rois = Vec::new();
        let mut cls_t = Vec::new();
        let mut fg_reg = Vec::new();
        for (bi, s) in samples.iter().enumerate() {
            let mut cand: Vec<BoundingBox> = props[bi].iter().map(|(bx, _)| *bx).collect();
            cand.extend(s.boxes.iter().cloned());
            let mut fg = Vec::new();
            let mut bg = Vec::new();
            for c in cand {
                let best = s
                    .boxes
                    .iter()
                    .map(|gt| (gt, c.iou(gt)))
                    .fold(None, |acc: Option<(&BoundingBox, f64)>, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    });
                match best {
                    Some((gt, iou)) if iou >= 0.5 => fg.push((c, *gt)),
                    _ => bg.push(c),
                }
            }
            fg.shuffle(rng);
            bg.shuffle(rng);
            fg.truncate(p.roi_samples / 2);
            bg.truncate(p.roi_samples - fg.len());
            for (c, gt) in fg {
                fg_reg.push((rois.len(), encode_box(&c, &gt, ROI_WEIGHTS)));
                rois.push((bi, c));
                cls_t.push(gt.class_id + 1);
            }
            for c in bg {
                rois.push((bi, c));
                cls_t.push(0);
            }
        }
        if rois.is_empty() {
            return loss;
        }
        let (cls, reg) = self.roi_head(g, &f, &rois, true);
        let ce = g.cross_entropy(cls, &cls_t);
        loss = g.add(loss, ce);
        if !fg_reg.is_empty() {
            let rows: Vec<usize> = fg_reg.iter().map(|(i, _)| *i).collect();
            let sel = g.select_rows(reg, &rows);
            let tgt: Vec<f64> = fg_reg.iter().flat_map(|(_, t)| t.iter().copied()).collect();
            let l = g.smooth_l1(sel, &tgt, 1.0 / 9.0, rois.len() as f64);
            loss = g.add(loss, l);
        }
        loss
    }
}

/// Trained head plus its log and best validation score.
#[derive(Clone, Debug)]
pub struct HeadRun<H> {
    pub head: H,
    pub log: TrainLog,
    pub best_val: f64,
}

fn validate_records<'a>(records: &[&'a ImageRecord], keep: impl Fn(&ImageRecord) -> bool) -> Vec<&'a ImageRecord> {
    records.iter().copied().filter(|r| keep(r)).collect()
}

fn has_lesion_mask(r: &ImageRecord) -> bool {
    r.mask.as_ref().is_some_and(|m| !m.is_empty())
}

/// Generic step loop: sample batches, take optimiser steps, validate every
/// `validate_every` steps (and at the end), keep the best snapshot, stop
/// after `patience` validations without improvement.
#[allow(clippy::too_many_arguments)]
fn fit<H: Clone>(
    head: &mut H,
    params: fn(&mut H) -> &mut ParamStore,
    n_train: usize,
    batch: usize,
    max_steps: usize,
    validate_every: usize,
    patience: usize,
    lr: f64,
    seed: u64,
    mut step_loss: impl FnMut(&H, &[usize], &mut ChaCha8Rng) -> (f64, std::collections::BTreeMap<String, Tensor>),
    mut validate: impl FnMut(&H) -> Result<f64>,
) -> Result<(H, TrainLog, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(lr);
    let mut log = TrainLog::default();
    let mut stopper = EarlyStopper::new(patience);
    let mut best = head.clone();
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut pos = n_train;
    let every = validate_every.max(1);
    for step in 1..=max_steps {
        if pos + batch.min(n_train) > n_train {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let idx: Vec<usize> = order[pos..pos + batch.min(n_train)].to_vec();
        pos += idx.len();
        let (loss, grads) = step_loss(head, &idx, &mut rng);
        opt.step(params(head), &grads);
        let mut row = LogRow { step, loss, val: None };
        if step % every == 0 || step == max_steps {
            let v = validate(head)?;
            row.val = Some(v);
            if stopper.observe(step, v) {
                best = head.clone();
            }
        }
        log.rows.push(row);
        if stopper.should_stop() {
            break;
        }
    }
    Ok((best, log, stopper.best.unwrap_or(f64::NAN)))
}

/// Trains a detector on cached pyramids of `encoder`; model selection on
/// validation mean IoU.
pub fn train_detector(
    encoder: &Encoder,
    train: &[&ImageRecord],
    val: &[&ImageRecord],
    protocol: &DetectionProtocol,
    seed: u64,
) -> Result<HeadRun<Detector>> {
    let train = validate_records(train, |r| !r.boxes.is_empty());
    if train.is_empty() {
        return Err(HeadsError::NoBoxAnnotations);
    }
    let val = validate_records(val, |r| !r.boxes.is_empty());
    if val.is_empty() {
        return Err(HeadsError::EmptySplit("validation"));
    }
    let side = encoder.input_side().unwrap_or(HIGH_RES);
    let tc = cache_pyramids(encoder, &train, protocol.flip_augment)?;
    let vc = cache_pyramids(encoder, &val, false)?;
    let mut det = Detector::new(protocol.clone(), side, encoder.config().pyramid_channels(), LESION_CLASSES, seed);
    let (best, log, best_val) = fit(
        &mut det,
        |d| &mut d.params,
        tc.len(),
        protocol.batch,
        protocol.max_steps,
        protocol.validate_every,
        protocol.patience,
        protocol.lr,
        seed ^ 0x5eed,
        |d, idx, rng| {
            let samples: Vec<&Cached> = idx.iter().map(|&i| &tc[i][rng.random_range(0..tc[i].len())]).collect();
            let mut g = Graph::new();
            let l = d.loss(&mut g, &samples, rng);
            let grads = g.backward(l);
            (g.item(l), g.param_grads(&grads, &d.params))
        },
        |d| {
            let preds: Vec<Vec<Detection>> = vc.iter().map(|c| d.detect(&c[0].pyramid)).collect();
            let truths: Vec<Vec<BoundingBox>> = vc.iter().map(|c| c[0].boxes.clone()).collect();
            Ok(crate::evalstats::mean(&eval_detection(&preds, &truths)))
        },
    )?;
    Ok(HeadRun {
        head: best,
        log,
        best_val,
    })
}

/// Detections and ground truth (both at the encoder's input side) per record.
pub fn predict_detections(
    encoder: &Encoder,
    detector: &Detector,
    records: &[&ImageRecord],
) -> Result<Vec<(Vec<Detection>, Vec<BoundingBox>)>> {
    Ok(cache_pyramids(encoder, records, false)?
        .into_iter()
        .map(|c| (detector.detect(&c[0].pyramid), c[0].boxes.clone()))
        .collect())
}

// ---------------------------------------------------------------------------
// segmentation

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationProtocol {
    pub width: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_steps: usize,
    pub validate_every: usize,
    pub patience: usize,
    pub bce_weight: f64,
    pub dice_weight: f64,
    /// Smoothing of the Dice loss term (the metric uses none).
    pub dice_eps: f64,
    pub flip_augment: bool,
}

impl Default for SegmentationProtocol {
    fn default() -> Self {
        Self {
            width: 16,
            lr: 1e-3,
            batch: 8,
            max_steps: 2000,
            validate_every: 500,
            patience: 20,
            bce_weight: 1.0,
            dice_weight: 1.0,
            dice_eps: 1.0,
            flip_augment: true,
        }
    }
}

/// Decoder from the four pyramid levels (coarse to fine, with skips) to a
/// full-resolution logit map; the input image is a final skip.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub protocol: SegmentationProtocol,
    pub input_side: usize,
    pub channels: [usize; 4],
    pub params: ParamStore,
}

const SEG_HEAD: usize = 8;

impl Segmenter {
    pub fn new(protocol: SegmentationProtocol, input_side: usize, channels: [usize; 4], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = protocol.width;
        let mut p = ParamStore::new();
        conv_init(&mut rng, &mut p, "seg.dec3", w, channels[3], 3);
        for l in 0..3 {
            conv_init(&mut rng, &mut p, &format!("seg.dec{l}"), w, w + channels[l], 3);
        }
        conv_init(&mut rng, &mut p, "seg.head", SEG_HEAD, w + 1, 3);
        conv_init(&mut rng, &mut p, "seg.out", 1, SEG_HEAD, 1);
        p.quantize_f32();
        Self {
            protocol,
            input_side,
            channels,
            params: p,
        }
    }

    /// Logits `[b, 1, S, S]`.
    pub fn forward(&self, g: &mut Graph, levels: [Var; 4], image: Var, trainable: bool) -> Var {
        let sides = pyramid_sides(self.input_side);
        let mut d = conv(g, &self.params, "seg.dec3", levels[3], 1, trainable);
        d = g.relu(d);
        for l in (0..3).rev() {
            let up = g.resize(d, sides[l], sides[l]);
            let cat = g.concat_channels(&[up, levels[l]]);
            let c = conv(g, &self.params, &format!("seg.dec{l}"), cat, 1, trainable);
            d = g.relu(c);
        }
        // the image-skip head runs at half resolution; logits are upsampled
        let s = self.input_side;
        let half = s.div_ceil(2);
        let up = g.resize(d, half, half);
        let small = g.resize(image, half, half);
        let cat = g.concat_channels(&[up, small]);
        let h = conv(g, &self.params, "seg.head", cat, 1, trainable);
        let h = g.relu(h);
        let z = conv(g, &self.params, "seg.out", h, 0, trainable);
        g.resize(z, s, s)
    }

    /// `w_bce·BCE(logits, mask) + w_dice·DiceLoss(σ(logits), mask)`.
    pub fn loss(&self, g: &mut Graph, logits: Var, targets: &[f64]) -> Var {
        let p = &self.protocol;
        let bce = g.bce_with_logits(logits, targets);
        let probs = g.sigmoid(logits);
        let dice = g.dice_loss(probs, targets, p.dice_eps);
        let a = g.scale(bce, p.bce_weight);
        let b = g.scale(dice, p.dice_weight);
        g.add(a, b)
    }

    fn predict_cached(&self, c: &Cached) -> Mask {
        let mut g = Graph::new();
        let levels: [Var; 4] = std::array::from_fn(|l| g.constant(stack(&[&c.pyramid[l]])));
        let img = g.constant(batch_tensor(&[&c.image]).expect("square image"));
        let z = self.forward(&mut g, levels, img, false);
        let s = self.input_side;
        Mask::new(s, s, g.value(z).data().iter().map(|&v| v > 0.0).collect())
    }
}

fn mask_targets(samples: &[&Cached]) -> Vec<f64> {
    samples
        .iter()
        .flat_map(|c| c.mask.as_ref().expect("filtered").data().iter().map(|&b| b as u8 as f64))
        .collect()
}

/// Per-image DICE (threshold at logit 0, no smoothing, empty-vs-empty = 1).
pub fn segmentation_dice(pred: &[Mask], truth: &[Mask]) -> Result<Vec<f64>> {
    pred.iter()
        .zip(truth)
        .map(|(p, t)| Ok(dice_and_iou(p.data(), t.data())?.0))
        .collect()
}

pub fn train_segmenter(
    encoder: &Encoder,
    train: &[&ImageRecord],
    val: &[&ImageRecord],
    protocol: &SegmentationProtocol,
    seed: u64,
) -> Result<HeadRun<Segmenter>> {
    let train = validate_records(train, has_lesion_mask);
    if train.is_empty() {
        return Err(HeadsError::NoMasks);
    }
    let val = validate_records(val, has_lesion_mask);
    if val.is_empty() {
        return Err(HeadsError::EmptySplit("validation"));
    }
    let side = encoder.input_side().unwrap_or(HIGH_RES);
    let tc = cache_pyramids(encoder, &train, protocol.flip_augment)?;
    let vc = cache_pyramids(encoder, &val, false)?;
    let mut seg = Segmenter::new(protocol.clone(), side, encoder.config().pyramid_channels(), seed);
    let (best, log, best_val) = fit(
        &mut seg,
        |s| &mut s.params,
        tc.len(),
        protocol.batch,
        protocol.max_steps,
        protocol.validate_every,
        protocol.patience,
        protocol.lr,
        seed ^ 0x5eed,
        |s, idx, rng| {
            let samples: Vec<&Cached> = idx.iter().map(|&i| &tc[i][rng.random_range(0..tc[i].len())]).collect();
            let mut g = Graph::new();
            let levels = stack_levels(&mut g, &samples);
            let img = g.constant(batch_tensor(&samples.iter().map(|c| &c.image).collect::<Vec<_>>()).expect("square"));
            let z = s.forward(&mut g, levels, img, true);
            let l = s.loss(&mut g, z, &mask_targets(&samples));
            let grads = g.backward(l);
            (g.item(l), g.param_grads(&grads, &s.params))
        },
        |s| {
            let pred: Vec<Mask> = vc.iter().map(|c| s.predict_cached(&c[0])).collect();
            let truth: Vec<Mask> = vc.iter().map(|c| c[0].mask.clone().unwrap()).collect();
            Ok(crate::evalstats::mean(&segmentation_dice(&pred, &truth)?))
        },
    )?;
    Ok(HeadRun {
        head: best,
        log,
        best_val,
    })
}

/// Predicted and true masks (at the encoder's input side) per record with a
/// lesion mask.
pub fn predict_masks(encoder: &Encoder, seg: &Segmenter, records: &[&ImageRecord]) -> Result<Vec<(Mask, Mask)>> {
    let records = validate_records(records, has_lesion_mask);
    Ok(cache_pyramids(encoder, &records, false)?
        .into_iter()
        .map(|c| (seg.predict_cached(&c[0]), c[0].mask.clone().unwrap()))
        .collect())
}

// ---------------------------------------------------------------------------
// linear probe

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifyProtocol {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Train the encoder too instead of caching frozen embeddings.
    pub finetune: bool,
}

impl Default for ClassifyProtocol {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 64,
            max_epochs: 200,
            patience: 10,
            finetune: false,
        }
    }
}

/// Per-dimension standardisation fitted on training embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 1e-12 { v.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Tensor {
        let d = self.mean.len();
        let data = rows
            .iter()
            .flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]))
            .collect();
        Tensor::new(&[rows.len(), d], data)
    }
}

/// A single affine map from (standardised) embedding to class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub task: Task,
    pub scaler: Standardizer,
    pub params: ParamStore,
    /// Set when the encoder was fine-tuned along with the classifier.
    pub encoder: Option<Encoder>,
}

impl LinearProbe {
    pub fn new(task: Task, scaler: Standardizer, seed: u64) -> Self {
        let d = scaler.mean.len();
        // zero start: the probe is a convex problem and random weights only
        // add noise under a short early-stopped schedule
        let _ = seed;
        let mut p = ParamStore::new();
        p.insert("probe.w", Tensor::zeros(&[d, task.num_classes()]));
        p.insert("probe.b", Tensor::zeros(&[task.num_classes()]));
        p.quantize_f32();
        Self {
            task,
            scaler,
            params: p,
            encoder: None,
        }
    }

    fn logits(&self, g: &mut Graph, x: Var, trainable: bool) -> Var {
        dense(g, &self.params, "probe", x, trainable)
    }

    /// Softmax class probabilities for raw embeddings.
    pub fn predict_proba(&self, embeddings: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if embeddings.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let x = g.constant(self.scaler.apply(embeddings));
        let z = self.logits(&mut g, x, false);
        softmax_rows(g.value(z))
    }
}

fn softmax_rows(z: &Tensor) -> Vec<Vec<f64>> {
    z.data()
        .chunks(z.shape()[1])
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
        .0
}

/// Embeddings of records preprocessed at the encoder's side.
pub fn embed_records(encoder: &Encoder, records: &[&ImageRecord]) -> Result<Vec<Vec<f64>>> {
    let side = encoder.input_side().unwrap_or(HIGH_RES);
    let imgs: Vec<GrayImage> = records
        .iter()
        .map(|r| preprocess_record(r, side).map(|p| p.pixels))
        .collect::<std::result::Result<_, _>>()?;
    Ok(encoder.embed_all(&imgs.iter().collect::<Vec<_>>(), 32)?)
}

fn labelled<'a>(records: &[&'a ImageRecord], task: Task) -> (Vec<&'a ImageRecord>, Vec<usize>) {
    records.iter().filter_map(|r| r.label(task).map(|l| (*r, l))).unzip()
}

/// Balanced accuracy of the argmax of `probs`, over the classes present.
pub fn balanced_accuracy_of(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Ok(balanced_accuracy_observed(&confusion_matrix(labels, &pred, classes)?)?)
}

/// Trains a linear classifier on embeddings of the frozen encoder (or
/// fine-tunes it with `protocol.finetune`); selection on validation balanced
/// accuracy.
pub fn train_probe(
    encoder: &Encoder,
    train: &[&ImageRecord],
    val: &[&ImageRecord],
    task: Task,
    protocol: &ClassifyProtocol,
    seed: u64,
) -> Result<HeadRun<LinearProbe>> {
    let (train, ytr) = labelled(train, task);
    if train.is_empty() {
        return Err(HeadsError::TaskAbsent(task));
    }
    if ytr.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(HeadsError::TaskDegenerate(task));
    }
    let (val, yva) = labelled(val, task);
    if val.is_empty() {
        return Err(HeadsError::EmptySplit("validation"));
    }
    if protocol.finetune {
        return train_probe_finetune(encoder, &train, &ytr, &val, &yva, task, protocol, seed);
    }
    let xtr = embed_records(encoder, &train)?;
    let xva = embed_records(encoder, &val)?;
    let head = LinearProbe::new(task, Standardizer::fit(&xtr), seed);
    let xt = head.scaler.apply(&xtr);
    let d = xt.shape()[1];
    train_on_embeddings(head, &xt, &ytr, &xva, &yva, protocol, seed, d)
}

#[allow(clippy::too_many_arguments)]
fn train_on_embeddings(
    mut head: LinearProbe,
    xt: &Tensor,
    ytr: &[usize],
    xva: &[Vec<f64>],
    yva: &[usize],
    protocol: &ClassifyProtocol,
    seed: u64,
    d: usize,
) -> Result<HeadRun<LinearProbe>> {
    let n = ytr.len();
    let steps_per_epoch = n.div_ceil(protocol.batch.max(1));
    let classes = head.task.num_classes();
    let (best, log, best_val) = fit(
        &mut head,
        |h| &mut h.params,
        n,
        protocol.batch,
        protocol.max_epochs * steps_per_epoch,
        steps_per_epoch,
        protocol.patience,
        protocol.lr,
        seed ^ 0x5eed,
        |h, idx, _| {
            let mut g = Graph::new();
            let rows: Vec<f64> = idx.iter().flat_map(|&i| xt.row(i).iter().copied()).collect();
            let x = g.constant(Tensor::new(&[idx.len(), d], rows));
            let z = h.logits(&mut g, x, true);
            let y: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let l = g.cross_entropy(z, &y);
            let grads = g.backward(l);
            (g.item(l), g.param_grads(&grads, &h.params))
        },
        |h| balanced_accuracy_of(&h.predict_proba(xva), yva, classes),
    )?;
    Ok(HeadRun {
        head: best,
        log,
        best_val,
    })
}

/// Joint training of encoder and classifier on raw images.
#[allow(clippy::too_many_arguments)]
fn train_probe_finetune(
    encoder: &Encoder,
    train: &[&ImageRecord],
    ytr: &[usize],
    val: &[&ImageRecord],
    yva: &[usize],
    task: Task,
    protocol: &ClassifyProtocol,
    seed: u64,
) -> Result<HeadRun<LinearProbe>> {
    let side = encoder.input_side().unwrap_or(HIGH_RES);
    let prep = |rs: &[&ImageRecord]| -> Result<Vec<GrayImage>> {
        rs.iter().map(|r| Ok(preprocess_record(r, side)?.pixels)).collect()
    };
    let (itr, iva) = (prep(train)?, prep(val)?);
    let mut head = LinearProbe::new(task, Standardizer::identity(encoder.embed_dim()), seed);
    // one store holds both so the shared step loop updates them together
    head.params.extend_prefixed("enc.", encoder.params());
    let cfg = encoder.config().clone();
    let classes = task.num_classes();
    let rebuild = move |h: &LinearProbe| Encoder::from_params(cfg.clone(), h.params.sub_store("enc.")).expect("shapes unchanged");
    let rebuild2 = rebuild.clone();
    let steps_per_epoch = itr.len().div_ceil(protocol.batch.max(1));
    let (mut best, log, best_val) = fit(
        &mut head,
        |h| &mut h.params,
        itr.len(),
        protocol.batch,
        protocol.max_epochs * steps_per_epoch,
        steps_per_epoch,
        protocol.patience,
        protocol.lr,
        seed ^ 0x5eed,
        |h, idx, _| {
            let enc = rebuild(h);
            let mut g = Graph::new();
            let x = g.constant(batch_tensor(&idx.iter().map(|&i| &itr[i]).collect::<Vec<_>>()).expect("square"));
            let e = enc.forward(&mut g, x, true).expect("valid input").embedding;
            let z = h.logits(&mut g, e, true);
            let y: Vec<usize> = idx.iter().map(|&i| ytr[i]).collect();
            let l = g.cross_entropy(z, &y);
            let grads = g.backward(l);
            let mut all = g.param_grads(&grads, &h.params);
            for (k, v) in g.param_grads(&grads, enc.params()) {
                all.insert(format!("enc.{k}"), v);
            }
            (g.item(l), all)
        },
        |h| {
            let enc = rebuild2(h);
            let e = enc.embed_all(&iva.iter().collect::<Vec<_>>(), 32)?;
            let mut g = Graph::new();
            let x = g.constant(h.scaler.apply(&e));
            let z = h.logits(&mut g, x, false);
            balanced_accuracy_of(&softmax_rows(g.value(z)), yva, classes)
        },
    )?;
    let enc = Encoder::from_params(encoder.config().clone(), best.params.sub_store("enc."))?;
    let mut probe = ParamStore::new();
    probe.extend_prefixed("probe.", &best.params.sub_store("probe."));
    best.params = probe;
    best.encoder = Some(enc);
    Ok(HeadRun {
        head: best,
        log,
        best_val,
    })
}

/// Class probabilities and labels of the labelled records of `records`.
pub fn predict_probe(
    encoder: &Encoder,
    probe: &LinearProbe,
    records: &[&ImageRecord],
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let (recs, y) = labelled(records, probe.task);
    let enc = probe.encoder.as_ref().unwrap_or(encoder);
    let x = embed_records(enc, &recs)?;
    Ok((probe.predict_proba(&x), y))
}

// ---------------------------------------------------------------------------
// VQA

#[derive(Clone, Debug, PartialEq)]
pub struct VqaProtocol {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub question_dim: usize,
    pub hidden: usize,
}

impl Default for VqaProtocol {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 16,
            max_epochs: 100,
            patience: 1,
            question_dim: 16,
            hidden: 64,
        }
    }
}

/// Allowed-answer mask over the union answer space for a question type.
pub fn answer_mask(q: QuestionType) -> Vec<bool> {
    let n = QuestionType::answer_space();
    let (lo, hi) = (q.answer_offset(), q.answer_offset() + q.answers().len());
    (0..n).map(|i| (lo..hi).contains(&i)).collect()
}

/// Image embedding ⊕ learned question-type embedding → 2-layer MLP →
/// logits over the union answer space, restricted to the question's answers.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaHead {
    pub protocol: VqaProtocol,
    pub scaler: Standardizer,
    pub params: ParamStore,
}

/// One question about one image.
#[derive(Clone, Debug)]
pub struct VqaSample {
    pub image: usize,
    pub question: QuestionType,
    pub answer: usize,
}

impl VqaHead {
    pub fn new(protocol: VqaProtocol, scaler: Standardizer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = scaler.mean.len();
        let (q, h, a) = (protocol.question_dim, protocol.hidden, QuestionType::answer_space());
        let mut p = ParamStore::new();
        p.insert("vqa.question", init::trunc_normal(&mut rng, &[QuestionType::ALL.len(), q], 0.5));
        p.insert("vqa.fc1.w", init::kaiming_uniform(&mut rng, &[d + q, h], d + q));
        p.insert("vqa.fc1.b", Tensor::zeros(&[h]));
        p.insert("vqa.fc2.w", init::kaiming_uniform(&mut rng, &[h, a], h));
        p.insert("vqa.fc2.b", Tensor::zeros(&[a]));
        p.quantize_f32();
        Self {
            protocol,
            scaler,
            params: p,
        }
    }

    fn logits(&self, g: &mut Graph, emb: &Tensor, samples: &[&VqaSample], trainable: bool) -> Var {
        let d = emb.shape()[1];
        let rows: Vec<f64> = samples.iter().flat_map(|s| emb.row(s.image).iter().copied()).collect();
        let x = g.constant(Tensor::new(&[samples.len(), d], rows));
        let table = g.bind(&self.params, "vqa.question", trainable);
        let qi: Vec<usize> = samples.iter().map(|s| s.question.index()).collect();
        let q = g.select_rows(table, &qi);
        let xq = g.concat_cols(&[x, q]);
        let h = dense(g, &self.params, "vqa.fc1", xq, trainable);
        let h = g.relu(h);
        dense(g, &self.params, "vqa.fc2", h, trainable)
    }

    fn loss(&self, g: &mut Graph, emb: &Tensor, samples: &[&VqaSample]) -> Var {
        let z = self.logits(g, emb, samples, true);
        let targets: Vec<usize> = samples.iter().map(|s| s.question.answer_offset() + s.answer).collect();
        let allowed: Vec<bool> = samples.iter().flat_map(|s| answer_mask(s.question)).collect();
        g.cross_entropy_masked(z, &targets, Some(&allowed))
    }

    /// Predicted answer (index within the question's answer list) per sample.
    pub fn predict(&self, emb: &Tensor, samples: &[&VqaSample]) -> Vec<usize> {
        if samples.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let z = self.logits(&mut g, emb, samples, false);
        let a = QuestionType::answer_space();
        g.value(z)
            .data()
            .chunks(a)
            .zip(samples)
            .map(|(row, s)| {
                let lo = s.question.answer_offset();
                argmax(&row[lo..lo + s.question.answers().len()])
            })
            .collect()
    }
}

pub fn vqa_samples(records: &[&ImageRecord]) -> Vec<VqaSample> {
    records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| {
            r.qa.iter().map(move |qa| VqaSample {
                image: i,
                question: qa.question,
                answer: qa.answer,
            })
        })
        .collect()
}

/// Mean over question types of the per-type balanced accuracy.
pub fn vqa_score(pred: &[usize], samples: &[VqaSample]) -> Result<f64> {
    let mut per = Vec::new();
    for q in QuestionType::ALL {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].question == q).collect();
        if idx.is_empty() {
            continue;
        }
        let t: Vec<usize> = idx.iter().map(|&i| samples[i].answer).collect();
        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        per.push(balanced_accuracy_observed(&confusion_matrix(&t, &p, q.answers().len())?)?);
    }
    Ok(crate::evalstats::mean(&per))
}

pub fn train_vqa(
    encoder: &Encoder,
    train: &[&ImageRecord],
    val: &[&ImageRecord],
    protocol: &VqaProtocol,
    seed: u64,
) -> Result<HeadRun<VqaHead>> {
    let st = vqa_samples(train);
    if st.is_empty() {
        return Err(HeadsError::NoQaPairs);
    }
    let sv = vqa_samples(val);
    if sv.is_empty() {
        return Err(HeadsError::EmptySplit("validation"));
    }
    let etr = embed_records(encoder, train)?;
    let eva = embed_records(encoder, val)?;
    let mut head = VqaHead::new(protocol.clone(), Standardizer::fit(&etr), seed);
    let (xt, xv) = (head.scaler.apply(&etr), head.scaler.apply(&eva));
    let steps_per_epoch = st.len().div_ceil(protocol.batch.max(1));
    let (best, log, best_val) = fit(
        &mut head,
        |h| &mut h.params,
        st.len(),
        protocol.batch,
        protocol.max_epochs * steps_per_epoch,
        steps_per_epoch,
        protocol.patience,
        protocol.lr,
        seed ^ 0x5eed,
        |h, idx, _| {
            let batch: Vec<&VqaSample> = idx.iter().map(|&i| &st[i]).collect();
            let mut g = Graph::new();
            let l = h.loss(&mut g, &xt, &batch);
            let grads = g.backward(l);
            (g.item(l), g.param_grads(&grads, &h.params))
        },
        |h| vqa_score(&h.predict(&xv, &sv.iter().collect::<Vec<_>>()), &sv),
    )?;
    Ok(HeadRun {
        head: best,
        log,
        best_val,
    })
}

/// Predictions for every QA pair of `records`: `(samples, predicted answers)`.
pub fn predict_vqa(encoder: &Encoder, head: &VqaHead, records: &[&ImageRecord]) -> Result<(Vec<VqaSample>, Vec<usize>)> {
    let s = vqa_samples(records);
    let e = embed_records(encoder, records)?;
    let x = head.scaler.apply(&e);
    let p = head.predict(&x, &s.iter().collect::<Vec<_>>());
    Ok((s, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sides_follow_stride_rule() {
        assert_eq!(pyramid_sides(224), [56, 28, 14, 7]);
        assert_eq!(pyramid_sides(512), [128, 64, 32, 16]);
        assert_eq!(pyramid_sides(128), [32, 16, 8, 4]);
    }

    #[test]
    fn box_codec_round_trip() {
        let a = BoundingBox::new(10.0, 12.0, 26.0, 20.0, 0);
        let b = BoundingBox::new(8.0, 15.0, 30.0, 21.0, 1);
        let d = encode_box(&a, &b, ROI_WEIGHTS);
        let r = decode_box(&a, d, ROI_WEIGHTS, 1);
        for (x, y) in [(r.x1, b.x1), (r.y1, b.y1), (r.x2, b.x2), (r.y2, b.y2)] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_keeps_best_of_overlapping() {
        let d = |x: f64, s: f64| Detection {
            bbox: BoundingBox::new(x, 0.0, x + 10.0, 10.0, 0),
            score: s,
        };
        let kept = nms(&[d(0.0, 0.5), d(1.0, 0.9), d(30.0, 0.1)], 0.5);
        assert_eq!(kept, vec![d(1.0, 0.9), d(30.0, 0.1)]);
    }

    #[test]
    fn stopper_counts_stale_rounds() {
        let mut s = EarlyStopper::new(2);
        assert!(s.observe(1, 0.5));
        assert!(!s.observe(2, 0.4));
        assert!(!s.should_stop());
        assert!(!s.observe(3, 0.5));
        assert!(s.should_stop());
        assert_eq!(s.best_step, 1);
    }
}
