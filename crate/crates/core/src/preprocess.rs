//! Rule-based ROI cropping, resizing, flip augmentation and the synthetic
//! phantom generator.

use std::collections::{BTreeMap, BTreeSet};

use autograd::kernels::resize_plane;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::{
    BoundingBox, GrayImage, ImageRecord, Laterality, Manifest, Mask, QaPair, QuestionType, Task, View,
};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("empty image")]
    EmptyImage,
    #[error("lesion at ({row}, {col}) with radius {radius} does not fit a {size}px image")]
    LesionOutOfBounds {
        row: f64,
        col: f64,
        radius: f64,
        size: usize,
    },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
}

/// Values below this are treated as background.
pub const BACKGROUND_THRESHOLD: u8 = 40;

/// Desk-scale "high" and "low" input resolutions.
pub const HIGH_RES: usize = 128;
pub const LOW_RES: usize = 64;

// ---------------------------------------------------------------------------
// cropping and resizing

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn row_constant(px: &[u8], w: usize, r: usize, c0: usize, c1: usize) -> bool {
    let row = &px[r * w + c0..r * w + c1];
    row.iter().all(|&v| v == row[0])
}

fn col_constant(px: &[u8], w: usize, c: usize, r0: usize, r1: usize) -> bool {
    let first = px[r0 * w + c];
    (r0..r1).all(|r| px[r * w + c] == first)
}

/// Thresholds `< 40` to zero, then trims constant border rows and columns
/// until none remain (or the image is a single pixel). Returns the window
/// and the cropped, thresholded image.
pub fn roi_window(img: &GrayImage) -> (Window, GrayImage) {
    let w = img.width();
    let px: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| if v < BACKGROUND_THRESHOLD { 0 } else { v })
        .collect();
    let (mut r0, mut r1, mut c0, mut c1) = (0, img.height(), 0, w);
    loop {
        let before = (r0, r1, c0, c1);
        while r1 - r0 > 1 && row_constant(&px, w, r0, c0, c1) {
            r0 += 1;
        }
        while r1 - r0 > 1 && row_constant(&px, w, r1 - 1, c0, c1) {
            r1 -= 1;
        }
        while c1 - c0 > 1 && col_constant(&px, w, c0, r0, r1) {
            c0 += 1;
        }
        while c1 - c0 > 1 && col_constant(&px, w, c1 - 1, r0, r1) {
            c1 -= 1;
        }
        if (r0, r1, c0, c1) == before {
            break;
        }
    }
    let data = (r0..r1).flat_map(|r| px[r * w + c0..r * w + c1].iter().copied()).collect();
    let win = Window {
        top: r0,
        left: c0,
        height: r1 - r0,
        width: c1 - c0,
    };
    (win, GrayImage::new(r1 - r0, c1 - c0, data))
}

/// Background removal: see [`roi_window`].
pub fn roi_crop(img: &GrayImage) -> GrayImage {
    roi_window(img).1
}

/// Bilinear resize to `height×width`, rounded and clamped to `[0, 255]`.
pub fn resize_to(img: &GrayImage, height: usize, width: usize) -> Result<GrayImage, PreprocessError> {
    if height == 0 || width == 0 {
        return Err(PreprocessError::EmptyImage);
    }
    if (height, width) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let out = resize_plane(&src, img.height(), img.width(), height, width);
    let data = out.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(GrayImage::new(height, width, data))
}

/// Bilinear resize to a `side×side` square.
pub fn resize(img: &GrayImage, side: usize) -> Result<GrayImage, PreprocessError> {
    resize_to(img, side, side)
}

/// Nearest-neighbour mask resize (pixel centres mapped back to the source).
pub fn resize_mask(mask: &Mask, height: usize, width: usize) -> Mask {
    let sy = mask.height() as f64 / height as f64;
    let sx = mask.width() as f64 / width as f64;
    let mut out = Mask::empty(height, width);
    for r in 0..height {
        let sr = (((r as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        for c in 0..width {
            let sc = (((c as f64 + 0.5) * sx) as usize).min(mask.width() - 1);
            out.set(r, c, mask.get(sr, sc));
        }
    }
    out
}

/// Crops a record to its ROI window and resizes it to `side×side`,
/// carrying boxes and mask along.
pub fn preprocess_record(rec: &ImageRecord, side: usize) -> Result<ImageRecord, PreprocessError> {
    let (win, cropped) = roi_window(&rec.pixels);
    let pixels = resize(&cropped, side)?;
    let sy = side as f64 / win.height as f64;
    let sx = side as f64 / win.width as f64;
    let boxes = rec
        .boxes
        .iter()
        .filter_map(|b| {
            let x1 = (b.x1 - win.left as f64).clamp(0.0, win.width as f64) * sx;
            let x2 = (b.x2 - win.left as f64).clamp(0.0, win.width as f64) * sx;
            let y1 = (b.y1 - win.top as f64).clamp(0.0, win.height as f64) * sy;
            let y2 = (b.y2 - win.top as f64).clamp(0.0, win.height as f64) * sy;
            (x1 < x2 && y1 < y2).then(|| BoundingBox::new(x1, y1, x2, y2, b.class_id))
        })
        .collect();
    let mask = rec.mask.as_ref().map(|m| {
        let mut crop = Mask::empty(win.height, win.width);
        for r in 0..win.height {
            for c in 0..win.width {
                crop.set(r, c, m.get(win.top + r, win.left + c));
            }
        }
        resize_mask(&crop, side, side)
    });
    Ok(ImageRecord {
        pixels,
        boxes,
        mask,
        ..rec.clone()
    })
}

// ---------------------------------------------------------------------------
// augmentation

/// Mirrors a record horizontally and/or vertically (pixels, boxes, mask).
pub fn flip(rec: &ImageRecord, horizontal: bool, vertical: bool) -> ImageRecord {
    let (h, w) = (rec.pixels.height(), rec.pixels.width());
    let map = |r: usize, c: usize| {
        (
            if vertical { h - 1 - r } else { r },
            if horizontal { w - 1 - c } else { c },
        )
    };
    let mut pixels = rec.pixels.clone();
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = map(r, c);
            pixels.set(r, c, rec.pixels.get(sr, sc));
        }
    }
    let mask = rec.mask.as_ref().map(|m| {
        let mut out = m.clone();
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = map(r, c);
                out.set(r, c, m.get(sr, sc));
            }
        }
        out
    });
    let (wf, hf) = (w as f64, h as f64);
    let boxes = rec
        .boxes
        .iter()
        .map(|b| {
            let (x1, x2) = if horizontal { (wf - b.x2, wf - b.x1) } else { (b.x1, b.x2) };
            let (y1, y2) = if vertical { (hf - b.y2, hf - b.y1) } else { (b.y1, b.y2) };
            BoundingBox::new(x1, y1, x2, y2, b.class_id)
        })
        .collect();
    ImageRecord {
        pixels,
        mask,
        boxes,
        ..rec.clone()
    }
}

/// The flip decisions `augment` makes for `seed`: (horizontal, vertical).
pub fn flip_decision(seed: u64) -> (bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.random_bool(0.5), rng.random_bool(0.5))
}

/// Random horizontal/vertical flips, each with probability 0.5.
pub fn augment(rec: &ImageRecord, seed: u64) -> ImageRecord {
    let (h, v) = flip_decision(seed);
    flip(rec, h, v)
}

// ---------------------------------------------------------------------------
// phantoms

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LesionKind {
    None,
    Mass,
    Calcification,
}

/// Box class ids used for lesions.
pub const MASS_CLASS: usize = 0;
pub const CALCIFICATION_CLASS: usize = 1;
pub const LESION_CLASSES: usize = 2;

/// Parameters of one phantom mammogram. Lengths are in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub lesion_kind: LesionKind,
    /// `(row, col)` of the lesion centre.
    pub lesion_center: (f64, f64),
    pub lesion_radius: f64,
    /// Intensity added inside the lesion disc.
    pub lesion_contrast: f64,
    /// 0..=3, fatty to extremely dense.
    pub density_level: u8,
    pub noise_sigma: f64,
    /// Global intensity offset (exposure variation).
    pub exposure: f64,
    /// Breast half-ellipse semi-axes as fractions of the image side:
    /// `(vertical, depth from the chest wall)`.
    pub breast_axes: (f64, f64),
    pub laterality: Laterality,
    pub view: View,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            lesion_kind: LesionKind::None,
            lesion_center: (64.0, 40.0),
            lesion_radius: 8.0,
            lesion_contrast: 50.0,
            density_level: 1,
            noise_sigma: 5.0,
            exposure: 0.0,
            breast_axes: (0.45, 0.75),
            laterality: Laterality::L,
            view: View::Cc,
            seed: 0,
        }
    }
}

/// Fibroglandular coverage fraction of each density level.
pub const DENSITY_COVERAGE: [f64; 4] = [0.08, 0.25, 0.45, 0.7];
/// Radius (at a 128 px side) above which a mass is malignant.
pub const MALIGNANT_RADIUS: f64 = 6.25;

const TISSUE: f64 = 90.0;
const GLAND: f64 = 55.0;
const PECTORAL: f64 = 205.0;

/// Noise level for a masking level `0..8`.
pub fn masking_sigma(level: usize) -> f64 {
    2.0 + 1.5 * level as f64
}

/// Inverse of [`masking_sigma`], rounded and clamped.
pub fn masking_level(sigma: f64) -> usize {
    ((sigma - 2.0) / 1.5).round().clamp(0.0, 7.0) as usize
}

/// BI-RADS category of a mass by radius (128 px scale).
pub fn mass_birads(r128: f64) -> usize {
    if r128 < 4.25 {
        0
    } else if r128 < MALIGNANT_RADIUS {
        3
    } else if r128 < 8.75 {
        4
    } else {
        5
    }
}

/// 4A/4B/4C sub-category of a BI-RADS 4 mass.
pub fn mass_birads4(r128: f64) -> usize {
    if r128 < 7.2 {
        0
    } else if r128 < 8.0 {
        1
    } else {
        2
    }
}

/// Molecular subtype bins of a malignant mass.
pub fn mass_subtype(r128: f64) -> usize {
    if r128 < 7.75 {
        0
    } else if r128 < 9.15 {
        1
    } else if r128 < 10.55 {
        2
    } else {
        3
    }
}

/// Subtlety 1 (subtle) .. 5 (obvious) from the contrast-to-noise ratio; 0 = no lesion.
pub fn subtlety(kind: LesionKind, contrast: f64, sigma: f64) -> usize {
    if kind == LesionKind::None {
        return 0;
    }
    let ratio = contrast / sigma.max(1e-9);
    1 + ((ratio - 3.0) / 1.5).floor().clamp(0.0, 4.0) as usize
}

impl PhantomSpec {
    fn radius128(&self) -> f64 {
        self.lesion_radius * 128.0 / self.image_size as f64
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: &str| Err(PreprocessError::InvalidSpec(m.to_string()));
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if self.density_level > 3 {
            return bad("density_level must be 0..=3");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        let (a, b) = self.breast_axes;
        if !(a > 0.0 && a <= 0.5 && b > 0.0 && b <= 1.0) {
            return bad("breast_axes out of range");
        }
        if self.lesion_kind != LesionKind::None {
            if !(self.lesion_radius > 0.0) {
                return bad("lesion_radius must be positive");
            }
            if self.lesion_contrast < 3.0 * self.noise_sigma {
                return bad("lesion_contrast must be at least 3 noise sigmas");
            }
            let (r, c) = self.lesion_center;
            let s = self.image_size as f64;
            let rad = self.lesion_radius;
            if r - rad < 0.0 || c - rad < 0.0 || r + rad > s || c + rad > s {
                return Err(PreprocessError::LesionOutOfBounds {
                    row: r,
                    col: c,
                    radius: rad,
                    size: self.image_size,
                });
            }
        }
        Ok(())
    }

    /// Every label derivable from the spec.
    pub fn labels(&self) -> BTreeMap<Task, usize> {
        let mut l = BTreeMap::new();
        l.insert(Task::Composition, self.density_level as usize);
        l.insert(Task::Masking, masking_level(self.noise_sigma));
        l.insert(Task::View, self.view.index());
        l.insert(Task::Laterality, self.laterality.index());
        let r = self.radius128();
        match self.lesion_kind {
            LesionKind::None => {
                l.insert(Task::Finding, 0);
                l.insert(Task::Birads, 1);
            }
            LesionKind::Calcification => {
                l.insert(Task::Finding, 1);
                l.insert(Task::Birads, 2);
                l.insert(Task::Pathology, 0);
                l.insert(Task::Invasive, 0);
            }
            LesionKind::Mass => {
                let malignant = r > MALIGNANT_RADIUS;
                l.insert(Task::Finding, 2);
                l.insert(Task::Birads, mass_birads(r));
                l.insert(Task::Pathology, malignant as usize);
                l.insert(Task::Mastitis, malignant as usize);
                l.insert(Task::Invasive, 1);
                if mass_birads(r) == 4 {
                    l.insert(Task::Birads4, mass_birads4(r));
                }
                if malignant {
                    l.insert(Task::Subtype, mass_subtype(r));
                }
            }
        }
        l
    }

    /// Question/answer pairs derivable from the spec.
    pub fn qa(&self) -> Vec<QaPair> {
        let labels = self.labels();
        let mut qa = vec![
            QaPair {
                question: QuestionType::View,
                answer: labels[&Task::View],
            },
            QaPair {
                question: QuestionType::Laterality,
                answer: labels[&Task::Laterality],
            },
            QaPair {
                question: QuestionType::Composition,
                answer: labels[&Task::Composition],
            },
            QaPair {
                question: QuestionType::Masking,
                answer: labels[&Task::Masking],
            },
            QaPair {
                question: QuestionType::Abnormality,
                answer: labels[&Task::Finding],
            },
            QaPair {
                question: QuestionType::Subtlety,
                answer: subtlety(self.lesion_kind, self.lesion_contrast, self.noise_sigma),
            },
            QaPair {
                question: QuestionType::Birads,
                answer: labels[&Task::Birads],
            },
        ];
        if let Some(&p) = labels.get(&Task::Pathology) {
            qa.push(QaPair {
                question: QuestionType::Pathology,
                answer: p,
            });
        }
        qa
    }
}

/// Smooth random field on an `s×s` grid: two octaves of bilinearly
/// upsampled Gaussian noise.
fn smooth_field(rng: &mut ChaCha8Rng, s: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut field = vec![0.0; s * s];
    for (g, amp) in [(5usize, 1.0), (11, 0.5)] {
        let coarse: Vec<f64> = (0..g * g).map(|_| normal.sample(rng)).collect();
        let up = resize_plane(&coarse, g, g, s, s);
        for (f, u) in field.iter_mut().zip(up) {
            *f += amp * u;
        }
    }
    field
}

/// Renders one phantom: a half-elliptical breast on the chest-wall side,
/// fibroglandular blobs covering a density-dependent fraction, a pectoral
/// wedge on MLO views, an optional lesion disc and Gaussian noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<ImageRecord, PreprocessError> {
    spec.validate()?;
    let s = spec.image_size;
    let sf = s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let field = smooth_field(&mut rng, s);
    let normal = Normal::new(0.0, 1.0).unwrap();

    // distance from the chest wall, in pixels, at each column
    let depth = |c: usize| match spec.laterality {
        Laterality::L => c as f64 + 0.5,
        Laterality::R => sf - (c as f64 + 0.5),
    };
    let (ay, ax) = (spec.breast_axes.0 * sf, spec.breast_axes.1 * sf);
    let in_breast = |r: usize, c: usize| {
        let dy = (r as f64 + 0.5 - sf / 2.0) / ay;
        let dx = depth(c) / ax;
        dy * dy + dx * dx <= 1.0
    };
    let in_pectoral = |r: usize, c: usize| {
        spec.view == View::Mlo && depth(c) / (0.3 * sf) + (r as f64 + 0.5) / (0.55 * sf) < 1.0
    };

    // glandular threshold: the (1 - coverage) quantile of the field inside the breast
    let mut inside: Vec<f64> = (0..s * s)
        .filter(|&i| in_breast(i / s, i % s))
        .map(|i| field[i])
        .collect();
    inside.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let coverage = DENSITY_COVERAGE[spec.density_level as usize];
    let thresh = if inside.is_empty() {
        f64::INFINITY
    } else {
        let k = (((1.0 - coverage) * inside.len() as f64) as usize).min(inside.len() - 1);
        inside[k]
    };

    let (cr, cc) = spec.lesion_center;
    let rad2 = spec.lesion_radius * spec.lesion_radius;
    let mut mask = Mask::empty(s, s);
    let mut img = vec![0.0; s * s];
    for r in 0..s {
        for c in 0..s {
            let i = r * s + c;
            let noise = spec.noise_sigma * normal.sample(&mut rng);
            let speck: f64 = rng.random();
            let tissue = in_breast(r, c);
            let mut v = 0.0;
            if tissue {
                v = TISSUE + spec.exposure;
                if field[i] > thresh {
                    v += GLAND;
                }
            }
            if in_pectoral(r, c) {
                v = PECTORAL + spec.exposure;
            }
            if spec.lesion_kind != LesionKind::None {
                let dy = r as f64 + 0.5 - cr;
                let dx = c as f64 + 0.5 - cc;
                if dy * dy + dx * dx <= rad2 {
                    mask.set(r, c, true);
                    v += spec.lesion_contrast;
                    if spec.lesion_kind == LesionKind::Calcification && speck < 0.2 {
                        v += 0.5 * spec.lesion_contrast;
                    }
                }
            }
            if tissue || v > 0.0 {
                v += noise;
            }
            img[i] = v.round().clamp(0.0, 255.0);
        }
    }

    let mut boxes = Vec::new();
    if !mask.is_empty() {
        let (mut r0, mut r1, mut c0, mut c1) = (s, 0, s, 0);
        for r in 0..s {
            for c in 0..s {
                if mask.get(r, c) {
                    r0 = r0.min(r);
                    r1 = r1.max(r + 1);
                    c0 = c0.min(c);
                    c1 = c1.max(c + 1);
                }
            }
        }
        let class_id = match spec.lesion_kind {
            LesionKind::Calcification => CALCIFICATION_CLASS,
            _ => MASS_CLASS,
        };
        boxes.push(BoundingBox::new(c0 as f64, r0 as f64, c1 as f64, r1 as f64, class_id));
    }

    Ok(ImageRecord {
        patient_id: "P0000".into(),
        image_id: format!("phantom_{}", spec.seed),
        pixels: GrayImage::new(s, s, img.into_iter().map(|v| v as u8).collect()),
        laterality: spec.laterality,
        view: spec.view,
        labels: spec.labels(),
        boxes,
        mask: Some(mask),
        qa: spec.qa(),
    })
}

// ---------------------------------------------------------------------------
// corpora

/// Tasks whose label is a property of the whole image, assignable to every record.
pub fn is_image_axis(task: Task) -> bool {
    matches!(task, Task::Composition | Task::Masking | Task::View | Task::Laterality)
}

/// Classes of `task` the phantom generator can produce.
pub fn generated_classes(task: Task) -> Vec<usize> {
    match task {
        Task::Finding => vec![0, 1, 2],
        t => (0..t.num_classes()).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub patients: usize,
    pub images_per_patient: usize,
    pub image_size: usize,
    pub tasks: BTreeSet<Task>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            patients: 100,
            images_per_patient: 4,
            image_size: 128,
            tasks: Task::ALL.into_iter().collect(),
            seed: 0,
        }
    }
}

/// `n` labels cycling through `classes`, shuffled.
fn balanced(rng: &mut ChaCha8Rng, n: usize, classes: &[usize]) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).map(|i| classes[i % classes.len()]).collect();
    v.shuffle(rng);
    v
}

/// Lesion kind and radius (128 px scale) realising `label` of a
/// lesion-coupled task.
fn lesion_for(task: Task, label: usize, rng: &mut ChaCha8Rng) -> (LesionKind, f64) {
    let mass = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (LesionKind::Mass, rng.random_range(lo..hi));
    match (task, label) {
        (Task::Finding, 0) => (LesionKind::None, 0.0),
        (Task::Finding, 1) => (LesionKind::Calcification, rng.random_range(4.0..8.0)),
        (Task::Finding, _) => mass(rng, 3.0, 12.0),
        (Task::Birads, 0) => mass(rng, 3.0, 4.0),
        (Task::Birads, 1) => (LesionKind::None, 0.0),
        (Task::Birads, 2) => (LesionKind::Calcification, rng.random_range(4.0..8.0)),
        (Task::Birads, 3) => mass(rng, 4.5, 6.0),
        (Task::Birads, 4) => mass(rng, 6.5, 8.5),
        (Task::Birads, _) => mass(rng, 9.0, 12.0),
        (Task::Birads4, 0) => mass(rng, 6.5, 7.0),
        (Task::Birads4, 1) => mass(rng, 7.4, 7.8),
        (Task::Birads4, _) => mass(rng, 8.2, 8.6),
        (Task::Pathology, 0) => {
            if rng.random_bool(0.5) {
                (LesionKind::Calcification, rng.random_range(4.0..8.0))
            } else {
                mass(rng, 3.0, 6.0)
            }
        }
        (Task::Pathology, _) => mass(rng, 6.5, 12.0),
        (Task::Mastitis, 0) => mass(rng, 3.0, 6.0),
        (Task::Mastitis, _) => mass(rng, 6.5, 12.0),
        (Task::Invasive, 0) => (LesionKind::Calcification, rng.random_range(4.0..8.0)),
        (Task::Invasive, _) => mass(rng, 6.5, 12.0),
        (Task::Subtype, 0) => mass(rng, 6.5, 7.5),
        (Task::Subtype, 1) => mass(rng, 8.0, 9.0),
        (Task::Subtype, 2) => mass(rng, 9.3, 10.3),
        (Task::Subtype, _) => mass(rng, 10.8, 11.8),
        (t, _) => unreachable!("{t} is not lesion-coupled"),
    }
}

/// Generates a labelled phantom corpus.
///
/// Image-level axes (composition, masking, view, laterality) are assigned in
/// exactly balanced shuffled lists. Each record is additionally "driven" by
/// one lesion-coupled task of the mix (round-robin), whose label is balanced
/// within its driven subset; the lesion is then sampled to realise it.
/// Records carry labels only for the requested tasks they realise.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Manifest, PreprocessError> {
    let n = spec.patients * spec.images_per_patient;
    let s = spec.image_size;
    let sf = s as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let density = balanced(&mut rng, n, &[0, 1, 2, 3]);
    let masking = balanced(&mut rng, n, &(0..8).collect::<Vec<_>>());
    let view = balanced(&mut rng, n, &[0, 1]);
    let lat = balanced(&mut rng, n, &[0, 1]);

    let drivers: Vec<Task> = spec.tasks.iter().copied().filter(|t| !is_image_axis(*t)).collect();
    let mut driver_of = vec![None; n];
    let mut driven_labels: BTreeMap<Task, Vec<usize>> = BTreeMap::new();
    if !drivers.is_empty() {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for (k, &i) in order.iter().enumerate() {
            driver_of[i] = Some(drivers[k % drivers.len()]);
        }
        for &t in &drivers {
            let count = driver_of.iter().filter(|d| **d == Some(t)).count();
            driven_labels.insert(t, balanced(&mut rng, count, &generated_classes(t)));
        }
    }
    let mut cursor: BTreeMap<Task, usize> = BTreeMap::new();

    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let patient = i / spec.images_per_patient;
        let sigma = masking_sigma(masking[i]);
        let (kind, r128) = match driver_of[i] {
            Some(t) => {
                let k = cursor.entry(t).or_insert(0);
                let label = driven_labels[&t][*k];
                *k += 1;
                lesion_for(t, label, &mut rng)
            }
            None => {
                if rng.random_bool(0.5) {
                    (LesionKind::None, 0.0)
                } else {
                    (LesionKind::Mass, rng.random_range(4.0..12.0))
                }
            }
        };
        let axes = (rng.random_range(0.40..0.47), rng.random_range(0.62..0.90));
        let radius = r128 * sf / 128.0;
        let row = sf * rng.random_range(0.35..0.65);
        let depth = axes.1 * sf * rng.random_range(0.35..0.6);
        let laterality = if lat[i] == 0 { Laterality::L } else { Laterality::R };
        let col = match laterality {
            Laterality::L => depth,
            Laterality::R => sf - depth,
        };
        let contrast = (3.5 * sigma).max(40.0) + rng.random_range(0.0..12.0);
        let ps = PhantomSpec {
            image_size: s,
            lesion_kind: kind,
            lesion_center: (row, col),
            lesion_radius: radius,
            lesion_contrast: contrast,
            density_level: density[i] as u8,
            noise_sigma: sigma,
            exposure: rng.random_range(-20.0..20.0),
            breast_axes: axes,
            laterality,
            view: if view[i] == 0 { View::Cc } else { View::Mlo },
            seed: rng.random(),
        };
        let mut rec = generate_phantom(&ps)?;
        let all = std::mem::take(&mut rec.labels);
        rec.labels = all
            .into_iter()
            .filter(|(t, _)| spec.tasks.contains(t) && (is_image_axis(*t) || driver_of[i] == Some(*t)))
            .collect();
        rec.patient_id = format!("P{patient:04}");
        rec.image_id = format!("P{patient:04}_{}", i % spec.images_per_patient);
        records.push(rec);
    }
    Ok(Manifest::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_traced_crop() {
        let img = GrayImage::from_rows(&[
            &[0, 0, 0, 0, 0],
            &[0, 50, 80, 0, 0],
            &[0, 60, 90, 0, 0],
            &[0, 0, 0, 39, 0],
            &[0, 0, 0, 0, 0],
        ]);
        assert_eq!(roi_crop(&img).to_rows(), vec![vec![50, 80], vec![60, 90]]);
    }

    #[test]
    fn crop_degenerate_inputs() {
        assert_eq!(roi_crop(&GrayImage::filled(4, 3, 0)).to_rows(), vec![vec![0]]);
        let busy = GrayImage::from_rows(&[&[50, 60, 70], &[80, 90, 100], &[110, 120, 130]]);
        assert_eq!(roi_crop(&busy), busy);
    }

    #[test]
    fn resize_closed_forms() {
        let c = GrayImage::filled(64, 64, 100);
        assert_eq!(resize(&c, 32).unwrap(), GrayImage::filled(32, 32, 100));
        let ramp = GrayImage::from_rows(&[&[0, 255], &[0, 255]]);
        let r = resize(&ramp, 4).unwrap();
        for row in r.to_rows() {
            assert_eq!(row, vec![0, 64, 191, 255]);
        }
        assert_eq!(resize(&ramp, 2).unwrap(), ramp);
        assert_eq!(resize(&ramp, 0), Err(PreprocessError::EmptyImage));
    }

    #[test]
    fn phantom_box_and_disc_area() {
        let spec = PhantomSpec {
            image_size: 64,
            lesion_kind: LesionKind::Mass,
            lesion_center: (32.0, 32.0),
            lesion_radius: 8.0,
            breast_axes: (0.47, 0.9),
            ..Default::default()
        };
        let rec = generate_phantom(&spec).unwrap();
        assert_eq!(rec.boxes, vec![BoundingBox::new(24.0, 24.0, 40.0, 40.0, MASS_CLASS)]);
        let area = std::f64::consts::PI * 64.0;
        let count = rec.mask.as_ref().unwrap().count() as f64;
        assert!((count - area).abs() <= 0.05 * area, "{count} vs {area}");
    }

    #[test]
    fn lesion_out_of_bounds() {
        let spec = PhantomSpec {
            lesion_kind: LesionKind::Mass,
            lesion_center: (3.0, 60.0),
            lesion_radius: 8.0,
            ..Default::default()
        };
        assert!(matches!(generate_phantom(&spec), Err(PreprocessError::LesionOutOfBounds { .. })));
    }

    #[test]
    fn label_bins_agree_with_sampling_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for task in [Task::Birads, Task::Birads4, Task::Pathology, Task::Mastitis, Task::Invasive, Task::Subtype, Task::Finding] {
            for label in generated_classes(task) {
                for _ in 0..50 {
                    let (kind, r) = lesion_for(task, label, &mut rng);
                    let spec = PhantomSpec {
                        lesion_kind: kind,
                        lesion_radius: r,
                        ..Default::default()
                    };
                    assert_eq!(spec.labels().get(&task), Some(&label), "{task} {label} r={r}");
                }
            }
        }
    }
}
