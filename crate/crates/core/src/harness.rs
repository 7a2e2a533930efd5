//! Experiment orchestration: corpus → Stage 1 → one encoder per ablation
//! variant → downstream tasks → bootstrap metrics → rank table and report.
//!
//! A run directory is self-describing:
//!
//! ```text
//! OUT/config.txt                 effective config (re-runnable)
//! OUT/provenance.txt             versions and seed derivation
//! OUT/corpus/                    generated phantom corpus
//! OUT/stage1/                    teacher.ckpt, loss.csv
//! OUT/<variant>/status.txt       "ok" or "failed: …"
//! OUT/<variant>/encoder.ckpt
//! OUT/<variant>/<task>/          log.csv, snapshot.bin, predictions.jsonl, metrics.csv
//! OUT/report/                    metrics, results, ranks, cd, significance, cd_diagram
//! ```
//!
//! The first row of every `metrics.csv` is the task's primary (ranked) metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::json;
use thiserror::Error;

use crate::corpus::{load_manifest, split_by_patient, CorpusError, ImageRecord, Manifest, Split, Task, DEFAULT_RATIOS};
use crate::encoders::{
    load_checkpoint, params_bytes, save_checkpoint, CnnConfig, Encoder, EncoderConfig, EncoderError, CHECKPOINT_VERSION,
};
use crate::evalstats::{
    auc, balanced_accuracy_observed, bootstrap_ci_with, confusion_matrix, dice_and_iou, mean, rank_models,
    weighted_f1, EvalError, MetricResult, RankTable,
};
use crate::heads::{
    argmax, embed_records, predict_detections, predict_masks, predict_probe, predict_vqa, train_detector, train_probe,
    train_segmenter, train_vqa, ClassifyProtocol, DetectionProtocol, HeadsError, SegmentationProtocol, TrainLog,
    VqaProtocol,
};
use crate::preprocess::{generate_corpus, CorpusSpec, PreprocessError};
use crate::pretrain::{train_stage1, train_stage2, Ablation, LossCurve, PretrainError, Stage1Config, Stage2Config};
use crate::retrieval::{Normalization, RetrievalError, RetrievalIndex};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("unknown task spec `{0}` (classify:<task>, detect, segment, vqa, retrieve:<task>)")]
    UnknownTaskSpec(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("no completed variant under {0}")]
    NoCompletedVariants(PathBuf),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Heads(#[from] HeadsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// variants and task specs

/// Rows of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Stage 1 + Stage 2 with every loss term.
    Full,
    /// Random-init student, no pretraining data at all.
    NoMammogram,
    /// The Stage 1 teacher used directly.
    NoStage2,
    NoDistill,
    NoSup,
    /// ViT student instead of the CNN.
    NoCnn,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoMammogram,
        Variant::NoStage2,
        Variant::NoDistill,
        Variant::NoSup,
        Variant::NoCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMammogram => "no_mammogram",
            Variant::NoStage2 => "no_stage2",
            Variant::NoDistill => "no_distill",
            Variant::NoSup => "no_sup",
            Variant::NoCnn => "no_cnn",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::UnknownVariant(s.to_string()))
    }

    /// Stage 2 ablation switch, for the variants that run Stage 2.
    pub fn ablation(self) -> Option<Ablation> {
        match self {
            Variant::NoDistill => Some(Ablation::NoDistill),
            Variant::NoSup => Some(Ablation::NoSup),
            Variant::NoCnn => Some(Ablation::NoCnn),
            _ => None,
        }
    }

    pub fn needs_stage1(self) -> bool {
        self != Variant::NoMammogram
    }
}

/// One downstream evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskSpec {
    Classify(Task),
    Detect,
    Segment,
    Vqa,
    Retrieve(Task),
}

impl TaskSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || HarnessError::UnknownTaskSpec(s.to_string());
        let task = |name: &str| Task::from_name(name).map_err(|_| bad());
        match s.split_once(':') {
            Some(("classify", t)) => Ok(TaskSpec::Classify(task(t)?)),
            Some(("retrieve", t)) => Ok(TaskSpec::Retrieve(task(t)?)),
            None => match s {
                "detect" => Ok(TaskSpec::Detect),
                "segment" => Ok(TaskSpec::Segment),
                "vqa" => Ok(TaskSpec::Vqa),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }

    pub fn name(self) -> String {
        match self {
            TaskSpec::Classify(t) => format!("classify:{t}"),
            TaskSpec::Retrieve(t) => format!("retrieve:{t}"),
            TaskSpec::Detect => "detect".into(),
            TaskSpec::Segment => "segment".into(),
            TaskSpec::Vqa => "vqa".into(),
        }
    }

    /// Directory name (no colon).
    pub fn dir_name(self) -> String {
        self.name().replace(':', "_")
    }
}

// ---------------------------------------------------------------------------
// config

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Load this corpus instead of generating one.
    pub corpus_dir: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub detect: DetectionProtocol,
    pub segment: SegmentationProtocol,
    pub classify: ClassifyProtocol,
    pub vqa: VqaProtocol,
    pub retrieval_k: Vec<usize>,
    pub retrieval_norm: Normalization,
    pub tasks: Vec<TaskSpec>,
    pub variants: Vec<Variant>,
    pub seed: u64,
    pub bootstrap_replicates: usize,
    pub bootstrap_alpha: f64,
    /// Resample whole patients instead of images.
    pub bootstrap_by_patient: bool,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus_dir: None,
            corpus: CorpusSpec::default(),
            split_ratios: DEFAULT_RATIOS,
            split_seed: 0,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            detect: DetectionProtocol::default(),
            segment: SegmentationProtocol::default(),
            classify: ClassifyProtocol::default(),
            vqa: VqaProtocol::default(),
            retrieval_k: vec![1, 2, 3],
            retrieval_norm: Normalization::MinMax,
            tasks: vec![
                TaskSpec::Classify(Task::Composition),
                TaskSpec::Classify(Task::Birads),
                TaskSpec::Detect,
                TaskSpec::Segment,
                TaskSpec::Vqa,
                TaskSpec::Retrieve(Task::Composition),
            ],
            variants: Variant::ALL.to_vec(),
            seed: 0,
            bootstrap_replicates: crate::evalstats::DEFAULT_REPLICATES,
            bootstrap_alpha: 0.05,
            bootstrap_by_patient: false,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| HarnessError::BadValue {
        key: key.to_string(),
        value: v.to_string(),
        reason: e.to_string(),
    })
}

fn list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn fixed<const N: usize, T: FromStr + Copy>(key: &str, v: &str) -> Result<[T; N]>
where
    T::Err: std::fmt::Display,
{
    let xs = list(v, |s| num::<T>(key, s))?;
    xs.try_into().map_err(|xs: Vec<T>| HarnessError::BadValue {
        key: key.to_string(),
        value: v.to_string(),
        reason: format!("expected {N} values, got {}", xs.len()),
    })
}

fn bool_value(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::BadValue {
            key: key.to_string(),
            value: v.to_string(),
            reason: "expected true or false".into(),
        }),
    }
}

fn task_value(key: &str, v: &str) -> Result<Task> {
    Task::from_name(v).map_err(|e| HarnessError::BadValue {
        key: key.to_string(),
        value: v.to_string(),
        reason: e.to_string(),
    })
}

fn join<T>(xs: impl IntoIterator<Item = T>, f: impl Fn(T) -> String) -> String {
    xs.into_iter().map(f).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every key with its current value, in echo order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s1, s2, v) = (&self.stage1, &self.stage2, &self.stage1.vit);
        let (d, sg, c, q) = (&self.detect, &self.segment, &self.classify, &self.vqa);
        let p = |x: &dyn std::fmt::Display| x.to_string();
        vec![
            ("corpus.dir", self.corpus_dir.as_ref().map_or(String::new(), |d| d.display().to_string())),
            ("corpus.patients", p(&self.corpus.patients)),
            ("corpus.images_per_patient", p(&self.corpus.images_per_patient)),
            ("corpus.image_size", p(&self.corpus.image_size)),
            ("corpus.tasks", join(&self.corpus.tasks, |t| t.name().to_string())),
            ("corpus.seed", p(&self.corpus.seed)),
            ("split.ratios", join(self.split_ratios, |r| r.to_string())),
            ("split.seed", p(&self.split_seed)),
            ("stage1.vit.image_side", p(&v.image_side)),
            ("stage1.vit.patch_side", p(&v.patch_side)),
            ("stage1.vit.width", p(&v.width)),
            ("stage1.vit.depth", p(&v.depth)),
            ("stage1.vit.heads", p(&v.heads)),
            ("stage1.vit.mlp_ratio", p(&v.mlp_ratio)),
            ("stage1.mask_ratio", p(&s1.mask_ratio)),
            ("stage1.ema_momentum", p(&s1.ema_momentum)),
            ("stage1.temperature", p(&s1.temperature)),
            ("stage1.w_mim", p(&s1.w_mim)),
            ("stage1.w_con", p(&s1.w_con)),
            ("stage1.steps", p(&s1.steps)),
            ("stage1.batch", p(&s1.batch)),
            ("stage1.lr", p(&s1.lr)),
            ("stage1.max_shift", p(&s1.max_shift)),
            ("stage2.cnn.channels", join(s2.student.stage_channels, |c| c.to_string())),
            ("stage2.cnn.stem_stride", p(&s2.student.stem_stride)),
            ("stage2.w_distill", p(&s2.w_distill)),
            ("stage2.w_sup", p(&s2.w_sup)),
            ("stage2.w_con", p(&s2.w_con)),
            ("stage2.tasks", join(&s2.tasks, |t| t.name().to_string())),
            ("stage2.high", p(&s2.high)),
            ("stage2.low", p(&s2.low)),
            ("stage2.temperature", p(&s2.temperature)),
            ("stage2.steps", p(&s2.steps)),
            ("stage2.batch", p(&s2.batch)),
            ("stage2.lr", p(&s2.lr)),
            ("stage2.ablation", join(&s2.ablation, |a| a.name().to_string())),
            ("detect.fpn_width", p(&d.fpn_width)),
            ("detect.roi_hidden", p(&d.roi_hidden)),
            ("detect.lr", p(&d.lr)),
            ("detect.batch", p(&d.batch)),
            ("detect.max_steps", p(&d.max_steps)),
            ("detect.validate_every", p(&d.validate_every)),
            ("detect.patience", p(&d.patience)),
            ("detect.anchor_scale", p(&d.anchor_scale)),
            ("detect.rpn_samples", p(&d.rpn_samples)),
            ("detect.rpn_nms_iou", p(&d.rpn_nms_iou)),
            ("detect.pre_nms_top", p(&d.pre_nms_top)),
            ("detect.post_nms_top", p(&d.post_nms_top)),
            ("detect.roi_samples", p(&d.roi_samples)),
            ("detect.score_threshold", p(&d.score_threshold)),
            ("detect.nms_iou", p(&d.nms_iou)),
            ("detect.max_detections", p(&d.max_detections)),
            ("detect.flip_augment", p(&d.flip_augment)),
            ("segment.width", p(&sg.width)),
            ("segment.lr", p(&sg.lr)),
            ("segment.batch", p(&sg.batch)),
            ("segment.max_steps", p(&sg.max_steps)),
            ("segment.validate_every", p(&sg.validate_every)),
            ("segment.patience", p(&sg.patience)),
            ("segment.bce_weight", p(&sg.bce_weight)),
            ("segment.dice_weight", p(&sg.dice_weight)),
            ("segment.dice_eps", p(&sg.dice_eps)),
            ("segment.flip_augment", p(&sg.flip_augment)),
            ("classify.lr", p(&c.lr)),
            ("classify.batch", p(&c.batch)),
            ("classify.max_epochs", p(&c.max_epochs)),
            ("classify.patience", p(&c.patience)),
            ("classify.finetune", p(&c.finetune)),
            ("vqa.lr", p(&q.lr)),
            ("vqa.batch", p(&q.batch)),
            ("vqa.max_epochs", p(&q.max_epochs)),
            ("vqa.patience", p(&q.patience)),
            ("vqa.question_dim", p(&q.question_dim)),
            ("vqa.hidden", p(&q.hidden)),
            ("retrieval.k", join(&self.retrieval_k, |k| k.to_string())),
            (
                "retrieval.normalization",
                match self.retrieval_norm {
                    Normalization::MinMax => "minmax".into(),
                    Normalization::Standardize => "standardize".into(),
                },
            ),
            ("tasks", join(&self.tasks, |t| t.name())),
            ("variants", join(&self.variants, |v| v.name().to_string())),
            ("seed", p(&self.seed)),
            ("bootstrap.replicates", p(&self.bootstrap_replicates)),
            ("bootstrap.alpha", p(&self.bootstrap_alpha)),
            ("bootstrap.by_patient", p(&self.bootstrap_by_patient)),
            ("out", self.out.display().to_string()),
        ]
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "corpus.dir" => self.corpus_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "corpus.patients" => self.corpus.patients = num(k, v)?,
            "corpus.images_per_patient" => self.corpus.images_per_patient = num(k, v)?,
            "corpus.image_size" => self.corpus.image_size = num(k, v)?,
            "corpus.tasks" => self.corpus.tasks = list(v, |t| task_value(k, t))?.into_iter().collect(),
            "corpus.seed" => self.corpus.seed = num(k, v)?,
            "split.ratios" => self.split_ratios = fixed(k, v)?,
            "split.seed" => self.split_seed = num(k, v)?,
            "stage1.vit.image_side" => self.stage1.vit.image_side = num(k, v)?,
            "stage1.vit.patch_side" => self.stage1.vit.patch_side = num(k, v)?,
            "stage1.vit.width" => self.stage1.vit.width = num(k, v)?,
            "stage1.vit.depth" => self.stage1.vit.depth = num(k, v)?,
            "stage1.vit.heads" => self.stage1.vit.heads = num(k, v)?,
            "stage1.vit.mlp_ratio" => self.stage1.vit.mlp_ratio = num(k, v)?,
            "stage1.mask_ratio" => self.stage1.mask_ratio = num(k, v)?,
            "stage1.ema_momentum" => self.stage1.ema_momentum = num(k, v)?,
            "stage1.temperature" => self.stage1.temperature = num(k, v)?,
            "stage1.w_mim" => self.stage1.w_mim = num(k, v)?,
            "stage1.w_con" => self.stage1.w_con = num(k, v)?,
            "stage1.steps" => self.stage1.steps = num(k, v)?,
            "stage1.batch" => self.stage1.batch = num(k, v)?,
            "stage1.lr" => self.stage1.lr = num(k, v)?,
            "stage1.max_shift" => self.stage1.max_shift = num(k, v)?,
            "stage2.cnn.channels" => self.stage2.student.stage_channels = fixed(k, v)?,
            "stage2.cnn.stem_stride" => self.stage2.student.stem_stride = num(k, v)?,
            "stage2.w_distill" => self.stage2.w_distill = num(k, v)?,
            "stage2.w_sup" => self.stage2.w_sup = num(k, v)?,
            "stage2.w_con" => self.stage2.w_con = num(k, v)?,
            "stage2.tasks" => self.stage2.tasks = list(v, |t| task_value(k, t))?,
            "stage2.high" => self.stage2.high = num(k, v)?,
            "stage2.low" => self.stage2.low = num(k, v)?,
            "stage2.temperature" => self.stage2.temperature = num(k, v)?,
            "stage2.steps" => self.stage2.steps = num(k, v)?,
            "stage2.batch" => self.stage2.batch = num(k, v)?,
            "stage2.lr" => self.stage2.lr = num(k, v)?,
            "stage2.ablation" => {
                self.stage2.ablation = list(v, |a| {
                    Ablation::from_name(a).ok_or_else(|| HarnessError::BadValue {
                        key: k.to_string(),
                        value: a.to_string(),
                        reason: "expected no_distill, no_sup or no_cnn".into(),
                    })
                })?
                .into_iter()
                .collect()
            }
            "detect.fpn_width" => self.detect.fpn_width = num(k, v)?,
            "detect.roi_hidden" => self.detect.roi_hidden = num(k, v)?,
            "detect.lr" => self.detect.lr = num(k, v)?,
            "detect.batch" => self.detect.batch = num(k, v)?,
            "detect.max_steps" => self.detect.max_steps = num(k, v)?,
            "detect.validate_every" => self.detect.validate_every = num(k, v)?,
            "detect.patience" => self.detect.patience = num(k, v)?,
            "detect.anchor_scale" => self.detect.anchor_scale = num(k, v)?,
            "detect.rpn_samples" => self.detect.rpn_samples = num(k, v)?,
            "detect.rpn_nms_iou" => self.detect.rpn_nms_iou = num(k, v)?,
            "detect.pre_nms_top" => self.detect.pre_nms_top = num(k, v)?,
            "detect.post_nms_top" => self.detect.post_nms_top = num(k, v)?,
            "detect.roi_samples" => self.detect.roi_samples = num(k, v)?,
            "detect.score_threshold" => self.detect.score_threshold = num(k, v)?,
            "detect.nms_iou" => self.detect.nms_iou = num(k, v)?,
            "detect.max_detections" => self.detect.max_detections = num(k, v)?,
            "detect.flip_augment" => self.detect.flip_augment = bool_value(k, v)?,
            "segment.width" => self.segment.width = num(k, v)?,
            "segment.lr" => self.segment.lr = num(k, v)?,
            "segment.batch" => self.segment.batch = num(k, v)?,
            "segment.max_steps" => self.segment.max_steps = num(k, v)?,
            "segment.validate_every" => self.segment.validate_every = num(k, v)?,
            "segment.patience" => self.segment.patience = num(k, v)?,
            "segment.bce_weight" => self.segment.bce_weight = num(k, v)?,
            "segment.dice_weight" => self.segment.dice_weight = num(k, v)?,
            "segment.dice_eps" => self.segment.dice_eps = num(k, v)?,
            "segment.flip_augment" => self.segment.flip_augment = bool_value(k, v)?,
            "classify.lr" => self.classify.lr = num(k, v)?,
            "classify.batch" => self.classify.batch = num(k, v)?,
            "classify.max_epochs" => self.classify.max_epochs = num(k, v)?,
            "classify.patience" => self.classify.patience = num(k, v)?,
            "classify.finetune" => self.classify.finetune = bool_value(k, v)?,
            "vqa.lr" => self.vqa.lr = num(k, v)?,
            "vqa.batch" => self.vqa.batch = num(k, v)?,
            "vqa.max_epochs" => self.vqa.max_epochs = num(k, v)?,
            "vqa.patience" => self.vqa.patience = num(k, v)?,
            "vqa.question_dim" => self.vqa.question_dim = num(k, v)?,
            "vqa.hidden" => self.vqa.hidden = num(k, v)?,
            "retrieval.k" => self.retrieval_k = list(v, |s| num(k, s))?,
            "retrieval.normalization" => {
                self.retrieval_norm = match v {
                    "minmax" => Normalization::MinMax,
                    "standardize" => Normalization::Standardize,
                    _ => {
                        return Err(HarnessError::BadValue {
                            key: k.to_string(),
                            value: v.to_string(),
                            reason: "expected minmax or standardize".into(),
                        })
                    }
                }
            }
            "tasks" => self.tasks = list(v, TaskSpec::parse)?,
            "variants" => self.variants = list(v, Variant::from_name)?,
            "seed" => self.seed = num(k, v)?,
            "bootstrap.replicates" => self.bootstrap_replicates = num(k, v)?,
            "bootstrap.alpha" => self.bootstrap_alpha = num(k, v)?,
            "bootstrap.by_patient" => self.bootstrap_by_patient = bool_value(k, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(HarnessError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` lines (blank lines and `#` comments skipped) on
    /// top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::ConfigSyntax {
                line: i + 1,
                reason: "expected key=value".into(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?)
    }

    /// Applies `key=value` overrides (CLI `--set`).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| HarnessError::ConfigSyntax {
                line: 0,
                reason: format!("override `{o}` is not key=value"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// The full effective config; [`ExperimentConfig::from_text`] inverts it.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.tasks.is_empty() {
            return bad("no tasks".into());
        }
        if self.variants.is_empty() {
            return bad("no variants".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.variants.iter().all(|v| seen.insert(*v)) {
            return bad("duplicate variant".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        if !self.tasks.iter().all(|t| seen.insert(*t)) {
            return bad("duplicate task".into());
        }
        if self.split_ratios.iter().any(|r| *r < 0.0) || (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split ratios must be non-negative and sum to 1".into());
        }
        if self.retrieval_k.is_empty() || self.retrieval_k.contains(&0) {
            return bad("retrieval.k needs positive values".into());
        }
        if self.bootstrap_replicates == 0 || !(0.0..1.0).contains(&self.bootstrap_alpha) {
            return bad("bootstrap needs replicates >= 1 and 0 <= alpha < 1".into());
        }
        if !self.stage2.ablation.is_empty() {
            return bad("stage2.ablation must be empty for experiment runs; use variants".into());
        }
        if self.variants.iter().any(|v| v.needs_stage1()) {
            self.stage1.validate()?;
        }
        for v in &self.variants {
            if *v != Variant::NoMammogram && *v != Variant::NoStage2 {
                self.stage2_for(*v).validate()?;
            }
        }
        Ok(())
    }

    /// Stage 2 config for a variant.
    pub fn stage2_for(&self, v: Variant) -> Stage2Config {
        let mut c = self.stage2.clone();
        c.ablation.extend(v.ablation());
        c
    }
}

/// Seed derivation shared by runs and the CLI.
pub mod seeds {
    pub fn stage1(base: u64) -> u64 {
        base
    }
    /// Identical for every Stage 2 variant, so they differ only by ablation.
    pub fn stage2(base: u64) -> u64 {
        base.wrapping_add(1)
    }
    pub fn random_init(base: u64) -> u64 {
        base.wrapping_add(2)
    }
    /// Downstream head for the `index`-th task; identical across variants.
    pub fn head(base: u64, index: usize) -> u64 {
        base.wrapping_add(100 + index as u64)
    }
    pub fn bootstrap(base: u64) -> u64 {
        base
    }
}

// ---------------------------------------------------------------------------
// single-task evaluation

/// Train / validation / test records of a manifest.
pub struct Splits<'a> {
    pub train: Vec<&'a ImageRecord>,
    pub val: Vec<&'a ImageRecord>,
    pub test: Vec<&'a ImageRecord>,
}

impl<'a> Splits<'a> {
    pub fn new(manifest: &'a Manifest, ratios: [f64; 3], seed: u64) -> Result<Self> {
        let s = split_by_patient(manifest, ratios, seed)?;
        Ok(Self {
            train: s.records(manifest, Split::Train),
            val: s.records(manifest, Split::Val),
            test: s.records(manifest, Split::Test),
        })
    }
}

/// Bootstrap settings for task metrics.
#[derive(Clone, Copy, Debug)]
pub struct BootstrapSpec {
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    pub by_patient: bool,
}

impl BootstrapSpec {
    fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            replicates: cfg.bootstrap_replicates,
            alpha: cfg.bootstrap_alpha,
            seed: seeds::bootstrap(cfg.seed),
            by_patient: cfg.bootstrap_by_patient,
        }
    }

    /// CI of `stat` over samples, resampling samples or whole patients.
    pub fn ci<T: Clone>(&self, name: &str, samples: &[T], patients: &[&str], stat: impl Fn(&[T]) -> f64) -> Result<MetricResult> {
        if !self.by_patient {
            return Ok(bootstrap_ci_with(name, samples, stat, self.replicates, self.alpha, self.seed)?);
        }
        let mut by: BTreeMap<&str, Vec<T>> = BTreeMap::new();
        for (s, p) in samples.iter().zip(patients) {
            by.entry(p).or_default().push(s.clone());
        }
        let clusters: Vec<Vec<T>> = by.into_values().collect();
        let mut r = bootstrap_ci_with(name, &clusters, |cs| stat(&cs.concat()), self.replicates, self.alpha, self.seed)?;
        r.point = stat(samples);
        Ok(r)
    }
}

pub fn metrics_csv(metrics: &[MetricResult]) -> String {
    let mut s = String::from("metric,point,ci_low,ci_high,n_replicates\n");
    for m in metrics {
        let _ = writeln!(s, "{},{},{},{},{}", m.name, m.point, m.ci_low, m.ci_high, m.n_replicates);
    }
    s
}

fn jsonl(rows: impl IntoIterator<Item = serde_json::Value>) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

fn write_log(dir: &Path, log: &TrainLog) -> Result<()> {
    write_file(&dir.join("log.csv"), log.to_csv())
}

/// Everything one task needs besides the encoder.
pub struct TaskContext<'a> {
    pub config: &'a ExperimentConfig,
    pub splits: &'a Splits<'a>,
    pub head_seed: u64,
    pub bootstrap: BootstrapSpec,
}

/// Trains and evaluates one task, writing `log.csv`, `snapshot.bin`,
/// `predictions.jsonl` and `metrics.csv` under `dir`. Heads are selected on
/// the validation split and reported on the test split.
pub fn run_task(encoder: &Encoder, spec: TaskSpec, ctx: &TaskContext, dir: &Path) -> Result<Vec<MetricResult>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (cfg, s, b, seed) = (ctx.config, ctx.splits, &ctx.bootstrap, ctx.head_seed);
    let metrics = match spec {
        TaskSpec::Classify(task) => {
            let run = train_probe(encoder, &s.train, &s.val, task, &cfg.classify, seed)?;
            write_log(dir, &run.log)?;
            write_file(&dir.join("snapshot.bin"), params_bytes(&run.head.params))?;
            if let Some(enc) = &run.head.encoder {
                save_checkpoint(enc, &dir.join("finetuned.ckpt"))?;
            }
            let recs: Vec<&ImageRecord> = s.test.iter().copied().filter(|r| r.label(task).is_some()).collect();
            let (probs, y) = predict_probe(encoder, &run.head, &recs)?;
            write_file(
                &dir.join("predictions.jsonl"),
                jsonl(recs.iter().zip(&probs).zip(&y).map(|((r, p), l)| {
                    json!({"image_id": r.image_id, "label": l, "pred": argmax(p), "probs": p})
                })),
            )?;
            let pats: Vec<&str> = recs.iter().map(|r| r.patient_id.as_str()).collect();
            let pairs: Vec<(Vec<f64>, usize)> = probs.into_iter().zip(y).collect();
            let k = task.num_classes();
            let split = |xs: &[(Vec<f64>, usize)]| -> (Vec<Vec<f64>>, Vec<usize>) { xs.iter().cloned().unzip() };
            let conf = move |xs: &[(Vec<f64>, usize)]| {
                let (t, p): (Vec<usize>, Vec<usize>) = xs.iter().map(|(p, l)| (*l, argmax(p))).unzip();
                confusion_matrix(&t, &p, k)
            };
            vec![
                b.ci("auc", &pairs, &pats, |xs| {
                    let (p, y) = split(xs);
                    auc(&p, &y).unwrap_or(f64::NAN)
                })?,
                b.ci("balanced_accuracy", &pairs, &pats, |xs| {
                    conf(xs).and_then(|c| balanced_accuracy_observed(&c)).unwrap_or(f64::NAN)
                })?,
                b.ci("weighted_f1", &pairs, &pats, |xs| conf(xs).and_then(|c| weighted_f1(&c)).unwrap_or(f64::NAN))?,
            ]
        }
        TaskSpec::Detect => {
            let run = train_detector(encoder, &s.train, &s.val, &cfg.detect, seed)?;
            write_log(dir, &run.log)?;
            write_file(&dir.join("snapshot.bin"), params_bytes(&run.head.params))?;
            let recs: Vec<&ImageRecord> = s.test.iter().copied().filter(|r| !r.boxes.is_empty()).collect();
            let out = predict_detections(encoder, &run.head, &recs)?;
            let ious: Vec<f64> = out
                .iter()
                .map(|(p, t)| crate::heads::eval_detection(std::slice::from_ref(p), std::slice::from_ref(t))[0])
                .collect();
            let bx = |b: &crate::corpus::BoundingBox| json!([b.x1, b.y1, b.x2, b.y2, b.class_id]);
            write_file(
                &dir.join("predictions.jsonl"),
                jsonl(recs.iter().zip(&out).zip(&ious).map(|((r, (p, t)), iou)| {
                    let dets: Vec<_> = p.iter().map(|d| json!([d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.bbox.class_id, d.score])).collect();
                    json!({"image_id": r.image_id, "detections": dets, "truth": t.iter().map(bx).collect::<Vec<_>>(), "iou": iou})
                })),
            )?;
            let pats: Vec<&str> = recs.iter().map(|r| r.patient_id.as_str()).collect();
            vec![b.ci("mean_iou", &ious, &pats, mean)?]
        }
        TaskSpec::Segment => {
            let run = train_segmenter(encoder, &s.train, &s.val, &cfg.segment, seed)?;
            write_log(dir, &run.log)?;
            write_file(&dir.join("snapshot.bin"), params_bytes(&run.head.params))?;
            let recs: Vec<&ImageRecord> = s
                .test
                .iter()
                .copied()
                .filter(|r| r.mask.as_ref().is_some_and(|m| !m.is_empty()))
                .collect();
            let out = predict_masks(encoder, &run.head, &recs)?;
            let scores: Vec<(f64, f64)> = out
                .iter()
                .map(|(p, t)| dice_and_iou(p.data(), t.data()))
                .collect::<std::result::Result<_, _>>()?;
            write_file(
                &dir.join("predictions.jsonl"),
                jsonl(recs.iter().zip(&out).zip(&scores).map(|((r, (p, t)), (d, i))| {
                    json!({"image_id": r.image_id, "pred_area": p.count(), "true_area": t.count(), "dice": d, "iou": i})
                })),
            )?;
            let pats: Vec<&str> = recs.iter().map(|r| r.patient_id.as_str()).collect();
            let dice: Vec<f64> = scores.iter().map(|s| s.0).collect();
            let iou: Vec<f64> = scores.iter().map(|s| s.1).collect();
            vec![b.ci("dice", &dice, &pats, mean)?, b.ci("iou", &iou, &pats, mean)?]
        }
        TaskSpec::Vqa => {
            let run = train_vqa(encoder, &s.train, &s.val, &cfg.vqa, seed)?;
            write_log(dir, &run.log)?;
            write_file(&dir.join("snapshot.bin"), params_bytes(&run.head.params))?;
            let (samples, pred) = predict_vqa(encoder, &run.head, &s.test)?;
            write_file(
                &dir.join("predictions.jsonl"),
                jsonl(samples.iter().zip(&pred).map(|(q, p)| {
                    json!({"image_id": s.test[q.image].image_id, "question": q.question.name(), "answer": q.answer, "pred": p})
                })),
            )?;
            let pats: Vec<&str> = samples.iter().map(|q| s.test[q.image].patient_id.as_str()).collect();
            let pairs: Vec<(crate::heads::VqaSample, usize)> = samples.into_iter().zip(pred).collect();
            vec![
                b.ci("balanced_accuracy", &pairs, &pats, |xs| {
                    let (q, p): (Vec<_>, Vec<_>) = xs.iter().cloned().unzip();
                    crate::heads::vqa_score(&p, &q).unwrap_or(f64::NAN)
                })?,
                b.ci("accuracy", &pairs, &pats, |xs| {
                    xs.iter().filter(|(q, p)| q.answer == *p).count() as f64 / xs.len() as f64
                })?,
            ]
        }
        TaskSpec::Retrieve(task) => {
            let mut ks = cfg.retrieval_k.clone();
            let primary = ks[0];
            ks.sort_unstable();
            ks.dedup();
            let (metrics, csv) = retrieval_eval(encoder, task, &s.train, &s.test, &ks, cfg.retrieval_norm, b, dir)?;
            write_file(&dir.join("accuracy.csv"), csv)?;
            // primary (first configured) k first
            let mut m = metrics;
            let at = m.iter().position(|r| r.name == format!("acc@{primary}")).unwrap_or(0);
            let first = m.remove(at);
            m.insert(0, first);
            m
        }
    };
    write_file(&dir.join("metrics.csv"), metrics_csv(&metrics))?;
    Ok(metrics)
}

/// Top-k retrieval of labelled test queries against the labelled training
/// gallery; writes `predictions.jsonl` and returns per-k metrics plus the
/// `k,accuracy` CSV.
#[allow(clippy::too_many_arguments)]
pub fn retrieval_eval(
    encoder: &Encoder,
    task: Task,
    gallery: &[&ImageRecord],
    queries: &[&ImageRecord],
    ks: &[usize],
    norm: Normalization,
    b: &BootstrapSpec,
    dir: &Path,
) -> Result<(Vec<MetricResult>, String)> {
    let gal: Vec<&ImageRecord> = gallery.iter().copied().filter(|r| r.label(task).is_some()).collect();
    let qs: Vec<&ImageRecord> = queries.iter().copied().filter(|r| r.label(task).is_some()).collect();
    if qs.is_empty() {
        return Err(HeadsError::TaskAbsent(task).into());
    }
    let ge = embed_records(encoder, &gal)?;
    let qe = embed_records(encoder, &qs)?;
    let gl: Vec<usize> = gal.iter().map(|r| r.label(task).unwrap()).collect();
    let ql: Vec<usize> = qs.iter().map(|r| r.label(task).unwrap()).collect();
    let index = RetrievalIndex::fit_with(&ge, &gl, norm)?;
    let kmax = *ks.iter().max().unwrap();
    let mut lines = Vec::new();
    for ((r, e), l) in qs.iter().zip(&qe).zip(&ql) {
        let nn = index.query(e, kmax)?;
        lines.push(json!({
            "image_id": r.image_id,
            "label": l,
            "neighbors": nn.iter().map(|&i| gal[i].image_id.clone()).collect::<Vec<_>>(),
            "neighbor_labels": nn.iter().map(|&i| gl[i]).collect::<Vec<_>>(),
        }));
    }
    write_file(&dir.join("predictions.jsonl"), jsonl(lines))?;
    let pats: Vec<&str> = qs.iter().map(|r| r.patient_id.as_str()).collect();
    let mut metrics = Vec::new();
    let mut csv = String::from("k,accuracy\n");
    for &k in ks {
        let hits: Vec<f64> = index.topk_hits(&qe, &ql, k)?.into_iter().map(|h| h as u8 as f64).collect();
        let m = b.ci(&format!("acc@{k}"), &hits, &pats, mean)?;
        let _ = writeln!(csv, "{k},{}", m.point);
        metrics.push(m);
    }
    Ok((metrics, csv))
}

// ---------------------------------------------------------------------------
// experiment

/// Outcome of one variant.
#[derive(Clone, Debug, PartialEq)]
pub enum VariantStatus {
    Completed,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub statuses: Vec<(Variant, VariantStatus)>,
    /// `None` when no variant completed.
    pub report: Option<Report>,
}

impl RunSummary {
    pub fn all_completed(&self) -> bool {
        self.statuses.iter().all(|(_, s)| *s == VariantStatus::Completed)
    }
}

/// Loads a corpus directory or manifest file.
pub fn load_corpus(path: &Path) -> Result<Manifest> {
    Ok(load_manifest(path)?)
}

fn provenance(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "package={} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "checkpoint_version={CHECKPOINT_VERSION}");
    let _ = writeln!(s, "seed.stage1={}", seeds::stage1(cfg.seed));
    let _ = writeln!(s, "seed.stage2={}", seeds::stage2(cfg.seed));
    let _ = writeln!(s, "seed.random_init={}", seeds::random_init(cfg.seed));
    for (i, t) in cfg.tasks.iter().enumerate() {
        let _ = writeln!(s, "seed.head.{}={}", t.name(), seeds::head(cfg.seed, i));
    }
    let _ = writeln!(s, "seed.bootstrap={}", seeds::bootstrap(cfg.seed));
    let _ = writeln!(s, "seed.split={}", cfg.split_seed);
    let _ = writeln!(s, "seed.corpus={}", cfg.corpus.seed);
    s
}

fn write_curve(path: &Path, curve: &LossCurve) -> Result<()> {
    write_file(path, curve.to_csv())
}

/// Runs the whole ablation matrix; see the module docs for the layout.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_experiment_with(cfg, &mut |_| {})
}

/// [`run_experiment`] with a progress callback.
pub fn run_experiment_with(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("config.txt"), cfg.echo())?;
    write_file(&out.join("provenance.txt"), provenance(cfg))?;

    let manifest = match &cfg.corpus_dir {
        Some(d) => load_corpus(d)?,
        None => {
            let m = generate_corpus(&cfg.corpus)?;
            crate::corpus::save_manifest(&m, &out.join("corpus"))?;
            m
        }
    };
    let splits = Splits::new(&manifest, cfg.split_ratios, cfg.split_seed)?;
    progress(&format!(
        "corpus: {} images ({} train / {} val / {} test)",
        manifest.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    ));

    let teacher = if cfg.variants.iter().any(|v| v.needs_stage1()) {
        let o = train_stage1(&splits.train, &cfg.stage1, seeds::stage1(cfg.seed))?;
        write_curve(&out.join("stage1").join("loss.csv"), &o.curve)?;
        save_checkpoint(&o.teacher, &out.join("stage1").join("teacher.ckpt"))?;
        progress("stage1: done");
        Some(o.teacher)
    } else {
        None
    };

    let bootstrap = BootstrapSpec::from_config(cfg);
    let mut statuses = Vec::new();
    for &variant in &cfg.variants {
        let vdir = out.join(variant.name());
        fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
        let outcome = run_variant(cfg, variant, teacher.as_ref(), &splits, bootstrap, &vdir, progress);
        let status = match outcome {
            Ok(()) => VariantStatus::Completed,
            Err(e) => VariantStatus::Failed(e.to_string()),
        };
        let text = match &status {
            VariantStatus::Completed => "ok\n".to_string(),
            VariantStatus::Failed(m) => format!("failed: {m}\n"),
        };
        write_file(&vdir.join("status.txt"), &text)?;
        progress(&format!("{}: {}", variant.name(), text.trim_end()));
        statuses.push((variant, status));
    }

    let report = match emit_report(out) {
        Ok(r) => Some(r),
        Err(HarnessError::NoCompletedVariants(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(RunSummary {
        dir: out.clone(),
        statuses,
        report,
    })
}

/// The downstream encoder of a variant.
pub fn variant_encoder(
    cfg: &ExperimentConfig,
    variant: Variant,
    teacher: Option<&Encoder>,
    train: &[&ImageRecord],
) -> Result<(Encoder, Option<LossCurve>)> {
    let need_teacher = || teacher.cloned().ok_or_else(|| HarnessError::Invalid("variant needs a Stage 1 teacher".into()));
    match variant {
        Variant::NoMammogram => Ok((
            Encoder::new(EncoderConfig::Cnn(cfg.stage2.student.clone()), seeds::random_init(cfg.seed))?,
            None,
        )),
        Variant::NoStage2 => Ok((need_teacher()?, None)),
        _ => {
            let t = need_teacher()?;
            let o = train_stage2(train, &t, &cfg.stage2_for(variant), seeds::stage2(cfg.seed))?;
            Ok((o.student, Some(o.curve)))
        }
    }
}

fn run_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    teacher: Option<&Encoder>,
    splits: &Splits,
    bootstrap: BootstrapSpec,
    vdir: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<()> {
    let (encoder, curve) = variant_encoder(cfg, variant, teacher, &splits.train)?;
    if let Some(c) = curve {
        write_curve(&vdir.join("stage2_loss.csv"), &c)?;
    }
    save_checkpoint(&encoder, &vdir.join("encoder.ckpt"))?;
    for (i, &spec) in cfg.tasks.iter().enumerate() {
        let ctx = TaskContext {
            config: cfg,
            splits,
            head_seed: seeds::head(cfg.seed, i),
            bootstrap,
        };
        let m = run_task(&encoder, spec, &ctx, &vdir.join(spec.dir_name()))?;
        progress(&format!("{} {}: {} = {:.4}", variant.name(), spec.name(), m[0].name, m[0].point));
    }
    Ok(())
}

/// Runs one task against a checkpoint, the `task` CLI path.
pub fn run_single_task(
    encoder_path: &Path,
    corpus: &Path,
    spec: TaskSpec,
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<MetricResult>> {
    let encoder = load_checkpoint(encoder_path)?;
    let manifest = load_corpus(corpus)?;
    let splits = Splits::new(&manifest, cfg.split_ratios, cfg.split_seed)?;
    let idx = cfg.tasks.iter().position(|t| *t == spec).unwrap_or(0);
    let ctx = TaskContext {
        config: cfg,
        splits: &splits,
        head_seed: seeds::head(cfg.seed, idx),
        bootstrap: BootstrapSpec::from_config(cfg),
    };
    write_file(&out.join("config.txt"), cfg.echo())?;
    run_task(&encoder, spec, &ctx, out)
}

// ---------------------------------------------------------------------------
// report

/// Rendered report tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub models: Vec<String>,
    pub tasks: Vec<String>,
    pub table: RankTable,
    /// variant,task,metric,point,ci_low,ci_high,n_replicates
    pub metrics_csv: String,
    pub status_csv: String,
    pub files: RankFiles,
}

/// CSV renderings of a rank table.
#[derive(Clone, Debug, PartialEq)]
pub struct RankFiles {
    /// model,<task values…>
    pub results: String,
    /// model,<task ranks…>,avg_rank
    pub ranks: String,
    /// k,n,cd
    pub cd: String,
    /// model_a,model_b,avg_rank_a,avg_rank_b,gap,significant
    pub significance: String,
    /// model,avg_rank,group_id — one row per group membership
    pub cd_diagram: String,
}

pub fn rank_files(models: &[String], tasks: &[String], table: &RankTable) -> RankFiles {
    let header = |last: Option<&str>| {
        let mut h = String::from("model");
        for t in tasks {
            h.push(',');
            h.push_str(t);
        }
        if let Some(l) = last {
            h.push(',');
            h.push_str(l);
        }
        h.push('\n');
        h
    };
    let mut results = header(None);
    let mut ranks = header(Some("avg_rank"));
    for (m, name) in models.iter().enumerate() {
        let _ = writeln!(results, "{name},{}", join(&table.values[m], |v| v.to_string()));
        let mut row = join(&table.ranks[m], |v| v.to_string());
        if !row.is_empty() {
            row.push(',');
        }
        let _ = writeln!(ranks, "{name},{row}{}", table.average_rank[m]);
    }
    let cd = format!(
        "k,n,cd\n{},{},{}\n",
        models.len(),
        tasks.len(),
        table.cd.map_or(String::new(), |c| c.to_string())
    );
    let sig = table.significant_pairs();
    let mut significance = String::from("model_a,model_b,avg_rank_a,avg_rank_b,gap,significant\n");
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let (a, b) = (table.average_rank[i], table.average_rank[j]);
            let _ = writeln!(
                significance,
                "{},{},{a},{b},{},{}",
                models[i],
                models[j],
                (a - b).abs(),
                sig.contains(&(i, j))
            );
        }
    }
    let mut cd_diagram = String::from("model,avg_rank,group_id\n");
    for (g, members) in table.cd_groups().iter().enumerate() {
        for &m in members {
            let _ = writeln!(cd_diagram, "{},{},{g}", models[m], table.average_rank[m]);
        }
    }
    RankFiles {
        results,
        ranks,
        cd,
        significance,
        cd_diagram,
    }
}

/// Parses a `metrics.csv`.
pub fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricResult>> {
    let text = read_text(path)?;
    let bad = |reason: String| HarnessError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("line {}: expected 5 fields", i + 1)));
        }
        let p = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", i + 1)));
        out.push(MetricResult {
            name: f[0].to_string(),
            point: p(f[1])?,
            ci_low: p(f[2])?,
            ci_high: p(f[3])?,
            n_replicates: f[4].parse().map_err(|e| bad(format!("line {}: {e}", i + 1)))?,
        });
    }
    if out.is_empty() {
        return Err(bad("no metric rows".into()));
    }
    Ok(out)
}

/// Rebuilds the report from a run directory and writes it to `RUN/report/`.
/// Only the run tree is read, so re-emission is byte-stable.
pub fn emit_report(run_dir: &Path) -> Result<Report> {
    let cfg = ExperimentConfig::from_file(&run_dir.join("config.txt"))?;
    let mut status_csv = String::from("variant,status\n");
    let mut completed = Vec::new();
    for v in &cfg.variants {
        let p = run_dir.join(v.name()).join("status.txt");
        let status = if p.exists() { read_text(&p)?.trim().to_string() } else { "missing".to_string() };
        let _ = writeln!(status_csv, "{},{}", v.name(), status.replace(['\n', ','], " "));
        if status == "ok" {
            completed.push(*v);
        }
    }
    if completed.is_empty() {
        return Err(HarnessError::NoCompletedVariants(run_dir.to_path_buf()));
    }
    let mut metrics_csv = String::from("variant,task,metric,point,ci_low,ci_high,n_replicates\n");
    let mut values = Vec::new();
    for v in &completed {
        let mut row = Vec::new();
        for t in &cfg.tasks {
            let ms = parse_metrics_csv(&run_dir.join(v.name()).join(t.dir_name()).join("metrics.csv"))?;
            for m in &ms {
                let _ = writeln!(
                    metrics_csv,
                    "{},{},{},{},{},{},{}",
                    v.name(),
                    t.name(),
                    m.name,
                    m.point,
                    m.ci_low,
                    m.ci_high,
                    m.n_replicates
                );
            }
            row.push(Some(ms[0].point).filter(|p| p.is_finite()));
        }
        values.push(row);
    }
    let models: Vec<String> = completed.iter().map(|v| v.name().to_string()).collect();
    let tasks: Vec<String> = cfg.tasks.iter().map(|t| t.name()).collect();
    let table = rank_models(&values, &vec![true; tasks.len()])?;
    let files = rank_files(&models, &tasks, &table);
    let rdir = run_dir.join("report");
    write_file(&rdir.join("metrics.csv"), &metrics_csv)?;
    write_file(&rdir.join("status.csv"), &status_csv)?;
    write_file(&rdir.join("results.csv"), &files.results)?;
    write_file(&rdir.join("ranks.csv"), &files.ranks)?;
    write_file(&rdir.join("cd.csv"), &files.cd)?;
    write_file(&rdir.join("significance.csv"), &files.significance)?;
    write_file(&rdir.join("cd_diagram.csv"), &files.cd_diagram)?;
    Ok(Report {
        models,
        tasks,
        table,
        metrics_csv,
        status_csv,
        files,
    })
}

/// Parses a wide results CSV (`model,<task…>`; empty cell = missing).
pub fn parse_results_csv(text: &str) -> Result<(Vec<String>, Vec<String>, Vec<Vec<Option<f64>>>)> {
    let bad = |reason: String| HarnessError::Malformed {
        path: PathBuf::from("<results>"),
        reason,
    };
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let tasks: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
    let mut models = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != tasks.len() + 1 {
            return Err(bad(format!("row {}: expected {} fields", i + 2, tasks.len() + 1)));
        }
        models.push(f[0].to_string());
        values.push(
            f[1..]
                .iter()
                .map(|s| {
                    if s.is_empty() {
                        Ok(None)
                    } else {
                        s.parse::<f64>().map(Some).map_err(|e| bad(format!("row {}: {e}", i + 2)))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok((models, tasks, values))
}

/// Parses a values CSV for `stats ci`: one number per line, or `group,value`
/// pairs. A non-numeric first line is a header.
pub fn parse_values_csv(text: &str) -> Result<(Vec<f64>, Option<Vec<String>>)> {
    let bad = |reason: String| HarnessError::Malformed {
        path: PathBuf::from("<values>"),
        reason,
    };
    let mut values = Vec::new();
    let mut groups = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (g, v) = match line.rsplit_once(',') {
            Some((g, v)) => (Some(g.trim()), v.trim()),
            None => (None, line),
        };
        match v.parse::<f64>() {
            Ok(x) => {
                values.push(x);
                if let Some(g) = g {
                    groups.push(g.to_string());
                }
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(bad(format!("line {}: {e}", i + 1))),
        }
    }
    if !groups.is_empty() && groups.len() != values.len() {
        return Err(bad("mixed grouped and ungrouped rows".into()));
    }
    Ok((values, (!groups.is_empty()).then_some(groups)))
}

/// A student config with the CNN defaults, for CLI use.
pub fn default_student() -> CnnConfig {
    CnnConfig::default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("stage2.w_distill", "0.25").unwrap();
        cfg.set("tasks", "classify:birads,retrieve:masking,detect").unwrap();
        cfg.set("variants", "full,no_stage2").unwrap();
        cfg.set("stage1.lr", "0.0003").unwrap();
        let back = ExperimentConfig::from_text(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.echo(), cfg.echo());
    }

    #[test]
    fn bad_keys_and_values() {
        let mut cfg = ExperimentConfig::default();
        assert!(matches!(cfg.set("stage9.x", "1"), Err(HarnessError::UnknownKey(_))));
        assert!(matches!(cfg.set("stage1.steps", "many"), Err(HarnessError::BadValue { .. })));
        assert!(matches!(cfg.set("variants", "full,no_gpu"), Err(HarnessError::UnknownVariant(_))));
        assert!(matches!(cfg.set("tasks", "classify:nope"), Err(HarnessError::UnknownTaskSpec(_))));
        assert!(matches!(
            ExperimentConfig::from_text("seed=1\nnonsense\n"),
            Err(HarnessError::ConfigSyntax { line: 2, .. })
        ));
    }

    #[test]
    fn variant_names_match_the_ablation_rows() {
        let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
        assert_eq!(names, ["full", "no_mammogram", "no_stage2", "no_distill", "no_sup", "no_cnn"]);
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn task_spec_names() {
        for s in ["classify:composition", "detect", "segment", "vqa", "retrieve:birads"] {
            assert_eq!(TaskSpec::parse(s).unwrap().name(), s);
        }
        assert_eq!(TaskSpec::parse("classify:birads").unwrap().dir_name(), "classify_birads");
    }

    #[test]
    fn values_csv_forms() {
        let (v, g) = parse_values_csv("value\n1\n2.5\n").unwrap();
        assert_eq!((v, g), (vec![1.0, 2.5], None));
        let (v, g) = parse_values_csv("p1,0.5\np2,1\n").unwrap();
        assert_eq!(v, vec![0.5, 1.0]);
        assert_eq!(g.unwrap(), vec!["p1", "p2"]);
    }
}
