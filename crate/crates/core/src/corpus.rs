//! Image records, task vocabularies, the line-delimited manifest format and
//! patient-level splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("label {label} out of range for task {task}")]
    LabelOutOfRange { task: Task, label: usize },
    #[error("duplicate image id `{0}`")]
    DuplicateImageId(String),
    #[error("record `{image_id}` violates an invariant: {reason}")]
    InvalidRecord { image_id: String, reason: String },
    #[error("manifest has no patients")]
    EmptyManifest,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// vocabularies

/// Classification tasks and their ordered class lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Task {
    Composition,
    Masking,
    Finding,
    Birads,
    Birads4,
    Pathology,
    Mastitis,
    Invasive,
    Subtype,
    View,
    Laterality,
}

const COMPOSITION: &[&str] = &["Density A", "Density B", "Density C", "Density D"];
const MASKING: &[&str] = &[
    "Level 1", "Level 2", "Level 3", "Level 4", "Level 5", "Level 6", "Level 7", "Level 8",
];
const FINDING: &[&str] = &[
    "No finding",
    "Calcification",
    "Mass",
    "Architectural distortion",
    "Asymmetry",
    "Miscellaneous",
    "Nipple retraction",
    "Suspicious lymph node",
    "Skin thickening",
    "Skin retraction",
];
const BIRADS: &[&str] = &[
    "BI-RADS 0",
    "BI-RADS 1",
    "BI-RADS 2",
    "BI-RADS 3",
    "BI-RADS 4",
    "BI-RADS 5",
];
const BIRADS4: &[&str] = &["4A", "4B", "4C"];
const PATHOLOGY: &[&str] = &["Benign", "Malignant"];
const MASTITIS: &[&str] = &["Mastitis", "Malignancy"];
const INVASIVE: &[&str] = &["Non-invasive", "Invasive"];
const SUBTYPE: &[&str] = &["Luminal A", "Luminal B", "HER2-enriched", "Triple-negative"];
const VIEW: &[&str] = &["CC", "MLO"];
const LATERALITY: &[&str] = &["L", "R"];
const SUBTLETY: &[&str] = &[
    "Subtlety 0",
    "Subtlety 1",
    "Subtlety 2",
    "Subtlety 3",
    "Subtlety 4",
    "Subtlety 5",
];

impl Task {
    pub const ALL: [Task; 11] = [
        Task::Composition,
        Task::Masking,
        Task::Finding,
        Task::Birads,
        Task::Birads4,
        Task::Pathology,
        Task::Mastitis,
        Task::Invasive,
        Task::Subtype,
        Task::View,
        Task::Laterality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Composition => "composition",
            Task::Masking => "masking",
            Task::Finding => "finding",
            Task::Birads => "birads",
            Task::Birads4 => "birads4",
            Task::Pathology => "pathology",
            Task::Mastitis => "mastitis",
            Task::Invasive => "invasive",
            Task::Subtype => "subtype",
            Task::View => "view",
            Task::Laterality => "laterality",
        }
    }

    pub fn from_name(name: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| CorpusError::UnknownTask(name.to_string()))
    }

    pub fn classes(self) -> &'static [&'static str] {
        match self {
            Task::Composition => COMPOSITION,
            Task::Masking => MASKING,
            Task::Finding => FINDING,
            Task::Birads => BIRADS,
            Task::Birads4 => BIRADS4,
            Task::Pathology => PATHOLOGY,
            Task::Mastitis => MASTITIS,
            Task::Invasive => INVASIVE,
            Task::Subtype => SUBTYPE,
            Task::View => VIEW,
            Task::Laterality => LATERALITY,
        }
    }

    pub fn num_classes(self) -> usize {
        self.classes().len()
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Task> {
        Task::from_name(s)
    }
}

/// The eight visual question topics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum QuestionType {
    View,
    Laterality,
    Composition,
    Masking,
    Abnormality,
    Subtlety,
    Birads,
    Pathology,
}

impl QuestionType {
    pub const ALL: [QuestionType; 8] = [
        QuestionType::View,
        QuestionType::Laterality,
        QuestionType::Composition,
        QuestionType::Masking,
        QuestionType::Abnormality,
        QuestionType::Subtlety,
        QuestionType::Birads,
        QuestionType::Pathology,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuestionType::View => "view",
            QuestionType::Laterality => "laterality",
            QuestionType::Composition => "composition",
            QuestionType::Masking => "masking",
            QuestionType::Abnormality => "abnormality",
            QuestionType::Subtlety => "subtlety",
            QuestionType::Birads => "birads",
            QuestionType::Pathology => "pathology",
        }
    }

    pub fn from_name(name: &str) -> Option<QuestionType> {
        QuestionType::ALL.into_iter().find(|q| q.name() == name)
    }

    pub fn index(self) -> usize {
        QuestionType::ALL.iter().position(|&q| q == self).unwrap()
    }

    pub fn answers(self) -> &'static [&'static str] {
        match self {
            QuestionType::View => VIEW,
            QuestionType::Laterality => LATERALITY,
            QuestionType::Composition => COMPOSITION,
            QuestionType::Masking => MASKING,
            QuestionType::Abnormality => FINDING,
            QuestionType::Subtlety => SUBTLETY,
            QuestionType::Birads => BIRADS,
            QuestionType::Pathology => PATHOLOGY,
        }
    }

    /// Offset of this topic's answers in the concatenated answer space.
    pub fn answer_offset(self) -> usize {
        QuestionType::ALL[..self.index()]
            .iter()
            .map(|q| q.answers().len())
            .sum()
    }

    /// Size of the union answer space over all topics.
    pub fn answer_space() -> usize {
        QuestionType::ALL.iter().map(|q| q.answers().len()).sum()
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Laterality {
    L,
    R,
}

impl Laterality {
    pub fn name(self) -> &'static str {
        match self {
            Laterality::L => "L",
            Laterality::R => "R",
        }
    }
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    Cc,
    Mlo,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::Cc => "CC",
            View::Mlo => "MLO",
        }
    }
    pub fn index(self) -> usize {
        self as usize
    }
}

// ---------------------------------------------------------------------------
// images and annotations

/// 8-bit grayscale image, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GrayImage({}x{})", self.height, self.width)
    }
}

impl GrayImage {
    /// Panics if the image would be empty or `data` has the wrong length.
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        assert_eq!(data.len(), height * width, "pixel buffer length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_rows(rows: &[&[u8]]) -> Self {
        let w = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == w), "ragged rows");
        Self::new(rows.len(), w, rows.concat())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.data[row * self.width + col] = v;
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.height).map(|r| self.row(r).to_vec()).collect()
    }

    /// Pixels scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    /// Writes a binary (P5) PGM.
    fn save(&self, path: &Path) -> Result<()> {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        use image::ImageEncoder;
        let img_err = |source| CorpusError::Image {
            path: path.to_path_buf(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut out = std::io::BufWriter::new(file);
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.data, self.width as u32, self.height as u32, image::ExtendedColorType::L8)
            .map_err(img_err)?;
        std::io::Write::flush(&mut out).map_err(io_err(path))
    }

    fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| CorpusError::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(CorpusError::InvalidRecord {
                image_id: path.display().to_string(),
                reason: "empty image".into(),
            });
        }
        Ok(Self::new(h as usize, w as usize, img.into_raw()))
    }
}

/// Binary mask, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl fmt::Debug for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width, "mask buffer length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    fn to_image(&self) -> GrayImage {
        GrayImage::new(
            self.height,
            self.width,
            self.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
    }

    fn from_image(img: &GrayImage) -> Self {
        Self::new(img.height, img.width, img.data.iter().map(|&v| v >= 128).collect())
    }
}

/// Axis-aligned box in pixel edge coordinates (`x` = column).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: usize) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            class_id,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QaPair {
    pub question: QuestionType,
    pub answer: usize,
}

/// One image with its patient, annotations and task labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub patient_id: String,
    pub image_id: String,
    pub pixels: GrayImage,
    pub laterality: Laterality,
    pub view: View,
    pub labels: BTreeMap<Task, usize>,
    pub boxes: Vec<BoundingBox>,
    pub mask: Option<Mask>,
    pub qa: Vec<QaPair>,
}

impl ImageRecord {
    pub fn label(&self, task: Task) -> Option<usize> {
        self.labels.get(&task).copied()
    }

    /// Checks the record invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| CorpusError::InvalidRecord {
            image_id: self.image_id.clone(),
            reason,
        };
        let (h, w) = (self.pixels.height as f64, self.pixels.width as f64);
        if let Some(m) = &self.mask {
            if m.height != self.pixels.height || m.width != self.pixels.width {
                return Err(bad(format!(
                    "mask {}x{} vs pixels {}x{}",
                    m.height, m.width, self.pixels.height, self.pixels.width
                )));
            }
        }
        for b in &self.boxes {
            let ok = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x1 < b.x2 && b.y1 < b.y2 && b.x2 <= w && b.y2 <= h;
            if !ok {
                return Err(bad(format!("box {b:?} outside {h}x{w} or degenerate")));
            }
        }
        for (&task, &label) in &self.labels {
            if label >= task.num_classes() {
                return Err(CorpusError::LabelOutOfRange { task, label });
            }
        }
        for qa in &self.qa {
            if qa.answer >= qa.question.answers().len() {
                return Err(bad(format!("answer {} out of range for {}", qa.answer, qa.question)));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ImageRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Records carrying a label for `task`.
    pub fn labeled(&self, task: Task) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.labels.contains_key(&task))
    }

    /// Tasks labeled on at least one record.
    pub fn tasks(&self) -> BTreeSet<Task> {
        self.records.iter().flat_map(|r| r.labels.keys().copied()).collect()
    }
}

/// Name of the manifest file inside a corpus directory.
pub const MANIFEST_FILE: &str = "manifest.jsonl";

fn record_json(r: &ImageRecord) -> Value {
    let mut m = Map::new();
    m.insert("patient_id".into(), json!(r.patient_id));
    m.insert("image_id".into(), json!(r.image_id));
    m.insert("image_path".into(), json!(format!("images/{}.pgm", r.image_id)));
    m.insert("laterality".into(), json!(r.laterality.name()));
    m.insert("view".into(), json!(r.view.name()));
    for (task, label) in &r.labels {
        m.insert(format!("label.{task}"), json!(label));
    }
    if !r.boxes.is_empty() {
        let boxes: Vec<Value> = r
            .boxes
            .iter()
            .map(|b| json!([b.x1, b.y1, b.x2, b.y2, b.class_id]))
            .collect();
        m.insert("boxes".into(), Value::Array(boxes));
    }
    if r.mask.is_some() {
        m.insert("mask_path".into(), json!(format!("masks/{}.pgm", r.image_id)));
    }
    if !r.qa.is_empty() {
        let qa: Vec<Value> = r.qa.iter().map(|q| json!([q.question.name(), q.answer])).collect();
        m.insert("qa".into(), Value::Array(qa));
    }
    Value::Object(m)
}

/// Writes images, masks and `manifest.jsonl` under `dir`. Keys are sorted,
/// so equal manifests produce identical bytes.
pub fn save_manifest(manifest: &Manifest, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut text = String::new();
    for r in &manifest.records {
        r.pixels.save(&dir.join("images").join(format!("{}.pgm", r.image_id)))?;
        if let Some(m) = &r.mask {
            m.to_image().save(&dir.join("masks").join(format!("{}.pgm", r.image_id)))?;
        }
        text.push_str(&record_json(r).to_string());
        text.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Loads a manifest file, or `DIR/manifest.jsonl` when given a directory.
/// Image paths resolve relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let base = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&file).map_err(io_err(&file))?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(line, i + 1, &base)?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(CorpusError::DuplicateImageId(rec.image_id));
        }
        rec.validate()?;
        records.push(rec);
    }
    Ok(Manifest { records })
}

fn parse_record(line: &str, line_no: usize, base: &Path) -> Result<ImageRecord> {
    let malformed = |reason: &str| CorpusError::MalformedRecord {
        line: line_no,
        reason: reason.to_string(),
    };
    let v: Value = serde_json::from_str(line).map_err(|e| malformed(&e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| malformed("not an object"))?;
    let string = |k: &str| -> Result<String> {
        obj.get(k)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| malformed(&format!("missing string `{k}`")))
    };
    let patient_id = string("patient_id")?;
    let image_id = string("image_id")?;
    let pixels = GrayImage::load(&base.join(string("image_path")?))?;
    let laterality = match obj.get("laterality").and_then(Value::as_str) {
        None | Some("L") => Laterality::L,
        Some("R") => Laterality::R,
        Some(other) => return Err(malformed(&format!("laterality `{other}`"))),
    };
    let view = match obj.get("view").and_then(Value::as_str) {
        None | Some("CC") => View::Cc,
        Some("MLO") => View::Mlo,
        Some(other) => return Err(malformed(&format!("view `{other}`"))),
    };
    let mut labels = BTreeMap::new();
    for (k, val) in obj {
        if let Some(name) = k.strip_prefix("label.") {
            let task = Task::from_name(name)?;
            let label = val
                .as_u64()
                .ok_or_else(|| malformed(&format!("label `{k}` is not a non-negative integer")))?
                as usize;
            if label >= task.num_classes() {
                return Err(CorpusError::LabelOutOfRange { task, label });
            }
            labels.insert(task, label);
        }
    }
    let mut boxes = Vec::new();
    if let Some(list) = obj.get("boxes") {
        for b in list.as_array().ok_or_else(|| malformed("`boxes` is not a list"))? {
            let a = b.as_array().filter(|a| a.len() == 5).ok_or_else(|| malformed("box is not [x1,y1,x2,y2,class]"))?;
            let f = |i: usize| a[i].as_f64().ok_or_else(|| malformed("box coordinate is not a number"));
            let class_id = a[4].as_u64().ok_or_else(|| malformed("box class is not an integer"))? as usize;
            boxes.push(BoundingBox::new(f(0)?, f(1)?, f(2)?, f(3)?, class_id));
        }
    }
    let mask = match obj.get("mask_path") {
        None => None,
        Some(p) => {
            let p = p.as_str().ok_or_else(|| malformed("`mask_path` is not a string"))?;
            Some(Mask::from_image(&GrayImage::load(&base.join(p))?))
        }
    };
    let mut qa = Vec::new();
    if let Some(list) = obj.get("qa") {
        for q in list.as_array().ok_or_else(|| malformed("`qa` is not a list"))? {
            let a = q.as_array().filter(|a| a.len() == 2).ok_or_else(|| malformed("qa is not [type, answer]"))?;
            let question = a[0]
                .as_str()
                .and_then(QuestionType::from_name)
                .ok_or_else(|| malformed("unknown question type"))?;
            let answer = a[1].as_u64().ok_or_else(|| malformed("answer is not an integer"))? as usize;
            qa.push(QaPair { question, answer });
        }
    }
    Ok(ImageRecord {
        patient_id,
        image_id,
        pixels,
        laterality,
        view,
        labels,
        boxes,
        mask,
        qa,
    })
}

// ---------------------------------------------------------------------------
// splitting

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

/// Patient → bucket assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitAssignment {
    buckets: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn bucket(&self, patient_id: &str) -> Option<Split> {
        self.buckets.get(patient_id).copied()
    }

    pub fn patients(&self, split: Split) -> Vec<&str> {
        self.buckets
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.buckets.values() {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Split)> {
        self.buckets.iter().map(|(p, s)| (p.as_str(), *s))
    }

    /// Records of `manifest` whose patient falls in `split`, in manifest order.
    pub fn records<'a>(&self, manifest: &'a Manifest, split: Split) -> Vec<&'a ImageRecord> {
        manifest
            .records
            .iter()
            .filter(|r| self.bucket(&r.patient_id) == Some(split))
            .collect()
    }
}

/// Largest-remainder quotas; remainder ties go to the earlier bucket.
pub fn quotas(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut q = [0usize; 3];
    for i in 0..3 {
        q[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut rest = n - q.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    let frac = |i: usize| exact[i] - q[i] as f64;
    order.sort_by(|&a, &b| frac(b).partial_cmp(&frac(a)).unwrap().then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        q[i] += 1;
        rest -= 1;
    }
    q
}

/// Assigns every patient to train/val/test with largest-remainder quotas.
/// Patients are sorted, shuffled by `seed`, then dealt out in order.
pub fn split_by_patient(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let mut patients: Vec<String> = manifest.patients().into_iter().map(str::to_string).collect();
    if patients.is_empty() {
        return Err(CorpusError::EmptyManifest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let q = quotas(patients.len(), ratios);
    let mut buckets = BTreeMap::new();
    let mut it = patients.into_iter();
    for (split, &n) in Split::ALL.iter().zip(&q) {
        for p in it.by_ref().take(n) {
            buckets.insert(p, *split);
        }
    }
    Ok(SplitAssignment { buckets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotas_by_enumeration() {
        assert_eq!(quotas(10, DEFAULT_RATIOS), [7, 1, 2]);
        assert_eq!(quotas(1, DEFAULT_RATIOS), [1, 0, 0]);
        assert_eq!(quotas(3, DEFAULT_RATIOS), [2, 0, 1]);
        for n in 1..200 {
            let q = quotas(n, DEFAULT_RATIOS);
            assert_eq!(q.iter().sum::<usize>(), n);
            for i in 0..3 {
                assert!((q[i] as f64 - DEFAULT_RATIOS[i] * n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn class_counts() {
        let want = [4, 8, 10, 6, 3, 2, 2, 2, 4, 2, 2];
        for (t, n) in Task::ALL.iter().zip(want) {
            assert_eq!(t.num_classes(), n, "{t}");
            assert_eq!(Task::from_name(t.name()).unwrap(), *t);
        }
        assert_eq!(QuestionType::answer_space(), 2 + 2 + 4 + 8 + 10 + 6 + 6 + 2);
        assert_eq!(QuestionType::Masking.answer_offset(), 8);
    }

    #[test]
    fn iou_of_shifted_boxes() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0, 0);
        let b = BoundingBox::new(1.0, 1.0, 11.0, 11.0, 0);
        assert!((a.iou(&b) - 81.0 / 119.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
    }
}
