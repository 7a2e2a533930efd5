//! Encoders (a tiny ViT and a tiny residual CNN) behind one contract: a pooled
//! embedding plus a four-level feature pyramid. Also the checkpoint format.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use autograd::{init, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::GrayImage;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint is truncated")]
    TruncatedFile,
    #[error("checkpoint holds a {found} encoder, expected {expected}")]
    KindMismatch { expected: EncoderKind, found: EncoderKind },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Vit,
    Cnn,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Vit => "vit",
            EncoderKind::Cnn => "cnn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VitConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            patch_side: 8,
            width: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.patch_side == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return bad("image_side must be a positive multiple of patch_side");
        }
        if self.heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("width must be a positive multiple of heads");
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive");
        }
        if self.grid() < 2 {
            return bad("need at least a 2x2 patch grid");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnnConfig {
    pub stage_channels: [usize; 4],
    pub stem_stride: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            stem_stride: 2,
        }
    }
}

impl CnnConfig {
    fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.stem_stride == 0 {
            return Err(EncoderError::InvalidConfig(
                "stage channels and stem stride must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderConfig {
    Vit(VitConfig),
    Cnn(CnnConfig),
}

impl EncoderConfig {
    pub fn kind(&self) -> EncoderKind {
        match self {
            EncoderConfig::Vit(_) => EncoderKind::Vit,
            EncoderConfig::Cnn(_) => EncoderKind::Cnn,
        }
    }

    /// Length of the pooled embedding.
    pub fn embed_dim(&self) -> usize {
        match self {
            EncoderConfig::Vit(c) => c.width,
            EncoderConfig::Cnn(c) => c.stage_channels[3],
        }
    }

    /// Channel count of each pyramid level.
    pub fn pyramid_channels(&self) -> [usize; 4] {
        match self {
            EncoderConfig::Vit(c) => [c.width; 4],
            EncoderConfig::Cnn(c) => c.stage_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderConfig::Vit(c) => c.validate(),
            EncoderConfig::Cnn(c) => c.validate(),
        }
    }

    /// `key=value` lines, one per field.
    pub fn echo(&self) -> String {
        match self {
            EncoderConfig::Vit(c) => format!(
                "kind=vit\nimage_side={}\npatch_side={}\nwidth={}\ndepth={}\nheads={}\nmlp_ratio={}\n",
                c.image_side, c.patch_side, c.width, c.depth, c.heads, c.mlp_ratio
            ),
            EncoderConfig::Cnn(c) => {
                let ch: Vec<String> = c.stage_channels.iter().map(|v| v.to_string()).collect();
                format!("kind=cnn\nstage_channels={}\nstem_stride={}\n", ch.join(","), c.stem_stride)
            }
        }
    }

    /// Parses the output of [`EncoderConfig::echo`].
    pub fn parse_echo(text: &str) -> Result<Self> {
        let bad = |m: String| EncoderError::Corrupt(m);
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("config line `{line}`")))?;
            kv.insert(k.trim(), v.trim());
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| bad(format!("missing config key `{k}`")))?
                .parse()
                .map_err(|_| bad(format!("bad value for `{k}`")))
        };
        let cfg = match kv.get("kind").copied() {
            Some("vit") => EncoderConfig::Vit(VitConfig {
                image_side: num("image_side")?,
                patch_side: num("patch_side")?,
                width: num("width")?,
                depth: num("depth")?,
                heads: num("heads")?,
                mlp_ratio: num("mlp_ratio")?,
            }),
            Some("cnn") => {
                let ch: Vec<usize> = kv
                    .get("stage_channels")
                    .ok_or_else(|| bad("missing stage_channels".into()))?
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| bad("bad stage_channels".into())))
                    .collect::<Result<_>>()?;
                let stage_channels: [usize; 4] =
                    ch.try_into().map_err(|_| bad("stage_channels needs four values".into()))?;
                EncoderConfig::Cnn(CnnConfig {
                    stage_channels,
                    stem_stride: num("stem_stride")?,
                })
            }
            other => return Err(bad(format!("unknown encoder kind {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names and shapes of every parameter, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        match self {
            EncoderConfig::Vit(c) => {
                let d = c.width;
                let hid = d * c.mlp_ratio;
                v.push(("patch.w".into(), vec![c.patch_dim(), d]));
                v.push(("patch.b".into(), vec![d]));
                v.push(("cls".into(), vec![1, d]));
                v.push(("pos".into(), vec![c.num_patches() + 1, d]));
                for i in 0..c.depth {
                    let p = format!("block{i}.");
                    v.push((p.clone() + "ln1.g", vec![d]));
                    v.push((p.clone() + "ln1.b", vec![d]));
                    v.push((p.clone() + "qkv.w", vec![d, 3 * d]));
                    v.push((p.clone() + "qkv.b", vec![3 * d]));
                    v.push((p.clone() + "proj.w", vec![d, d]));
                    v.push((p.clone() + "proj.b", vec![d]));
                    v.push((p.clone() + "ln2.g", vec![d]));
                    v.push((p.clone() + "ln2.b", vec![d]));
                    v.push((p.clone() + "fc1.w", vec![d, hid]));
                    v.push((p.clone() + "fc1.b", vec![hid]));
                    v.push((p.clone() + "fc2.w", vec![hid, d]));
                    v.push((p + "fc2.b", vec![d]));
                }
                v.push(("norm.g".into(), vec![d]));
                v.push(("norm.b".into(), vec![d]));
            }
            EncoderConfig::Cnn(c) => {
                let ch = c.stage_channels;
                v.push(("stem.w".into(), vec![ch[0], 1, 3, 3]));
                v.push(("stem.b".into(), vec![ch[0]]));
                let mut cin = ch[0];
                for (i, &co) in ch.iter().enumerate() {
                    let p = format!("stage{i}.");
                    v.push((p.clone() + "down.w", vec![co, cin, 3, 3]));
                    v.push((p.clone() + "down.b", vec![co]));
                    v.push((p.clone() + "res.w", vec![co, co, 3, 3]));
                    v.push((p + "res.b", vec![co]));
                    cin = co;
                }
            }
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

// ---------------------------------------------------------------------------
// encoder

/// Pooled embedding plus four feature maps of strictly decreasing side.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub embedding: Vec<f64>,
    /// `[channels, side, side]` per level.
    pub pyramid: Vec<Tensor>,
}

impl EncoderOutput {
    pub fn all_finite(&self) -> bool {
        self.embedding.iter().all(|v| v.is_finite()) && self.pyramid.iter().all(Tensor::all_finite)
    }

    pub fn sides(&self) -> Vec<usize> {
        self.pyramid.iter().map(|t| t.shape()[1]).collect()
    }
}

/// Graph nodes produced by [`Encoder::forward`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[batch, embed_dim]`
    pub embedding: Var,
    /// `[batch, c_i, s_i, s_i]`
    pub pyramid: [Var; 4],
    /// ViT only: final normalised patch tokens `[batch·patches, width]`.
    pub patch_tokens: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
}

/// Patch rows `[batch·patches, patch²]` of a `[batch, 1, s, s]` tensor.
pub fn patchify(x: &Tensor, patch: usize) -> Tensor {
    let s = x.shape();
    let (b, side) = (s[0], s[2]);
    let g = side / patch;
    let pd = patch * patch;
    let mut out = vec![0.0; b * g * g * pd];
    let xv = x.data();
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                let row = (n * g + gy) * g + gx;
                for py in 0..patch {
                    let src = n * side * side + (gy * patch + py) * side + gx * patch;
                    let dst = row * pd + py * patch;
                    out[dst..dst + patch].copy_from_slice(&xv[src..src + patch]);
                }
            }
        }
    }
    Tensor::new(&[b * g * g, pd], out)
}

/// Pixel normalisation applied by [`batch_tensor`]: `(v/255 − mean)/std`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Stacks images into a normalised `[batch, 1, h, w]` tensor.
pub fn batch_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| EncoderError::ShapeMismatch("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height(), im.width()) != (h, w) {
            return Err(EncoderError::ShapeMismatch(format!(
                "batch mixes {}x{} and {h}x{w} images",
                im.height(),
                im.width()
            )));
        }
        data.extend(im.data().iter().map(|&v| (v as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD));
    }
    Ok(Tensor::new(&[images.len(), 1, h, w], data))
}

impl Encoder {
    /// Freshly initialised encoder: truncated normal (σ = 0.02) for the ViT,
    /// Kaiming-uniform weights with zero biases for the CNN. Parameters are
    /// rounded to `f32` so checkpoints round-trip exactly.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let t = match &config {
                EncoderConfig::Vit(_) => {
                    if name.ends_with(".g") {
                        Tensor::full(&shape, 1.0)
                    } else if name.ends_with(".b") {
                        Tensor::zeros(&shape)
                    } else {
                        init::trunc_normal(&mut rng, &shape, 0.02)
                    }
                }
                EncoderConfig::Cnn(_) => {
                    if name.ends_with(".b") {
                        Tensor::zeros(&shape)
                    } else {
                        let fan_in = shape[1..].iter().product();
                        init::kaiming_uniform(&mut rng, &shape, fan_in)
                    }
                }
            };
            params.insert(name, t);
        }
        params.quantize_f32();
        Ok(Self { config, params })
    }

    /// Builds an encoder from existing parameters, checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(EncoderError::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(EncoderError::ShapeMismatch(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(EncoderError::ShapeMismatch(format!("missing tensor `{name}`"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn kind(&self) -> EncoderKind {
        self.config.kind()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim()
    }

    /// Input side the encoder expects, if it is fixed.
    pub fn input_side(&self) -> Option<usize> {
        match &self.config {
            EncoderConfig::Vit(c) => Some(c.image_side),
            EncoderConfig::Cnn(_) => None,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 || shape[2] != shape[3] || shape[2] == 0 {
            return Err(EncoderError::ShapeMismatch(format!(
                "expected [batch, 1, s, s] input, got {shape:?}"
            )));
        }
        if let Some(side) = self.input_side() {
            if shape[2] != side {
                return Err(EncoderError::ShapeMismatch(format!(
                    "ViT expects side {side}, got {}",
                    shape[2]
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass of a `[batch, 1, s, s]` constant input.
    /// Parameters are bound trainable iff `trainable`.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Encoded> {
        self.forward_masked(g, x, trainable, None)
    }

    /// Like [`Encoder::forward`]; for a ViT, patches flagged in `mask` are
    /// replaced by the `token` node after patch embedding.
    pub fn forward_masked(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
        mask: Option<(&[bool], Var)>,
    ) -> Result<Encoded> {
        let shape = g.shape(x).to_vec();
        self.check_input(&shape)?;
        match &self.config {
            EncoderConfig::Vit(c) => self.vit_forward(c, g, x, trainable, mask),
            EncoderConfig::Cnn(c) => Ok(self.cnn_forward(c, g, x, trainable)),
        }
    }

    fn vit_forward(
        &self,
        c: &VitConfig,
        g: &mut Graph,
        x: Var,
        trainable: bool,
        mask: Option<(&[bool], Var)>,
    ) -> Result<Encoded> {
        assert!(!g.requires_grad(x), "ViT input must be a constant");
        let batch = g.shape(x)[0];
        let p = |g: &mut Graph, name: &str| g.bind(&self.params, name, trainable);
        let patches = patchify(g.value(x), c.patch_side);
        let patches = g.constant(patches);
        let (pw, pb) = (p(g, "patch.w"), p(g, "patch.b"));
        let mut emb = g.linear(patches, pw, Some(pb));
        if let Some((m, token)) = mask {
            if m.len() != batch * c.num_patches() {
                return Err(EncoderError::ShapeMismatch(format!(
                    "mask has {} entries for {} patches",
                    m.len(),
                    batch * c.num_patches()
                )));
            }
            emb = g.mask_tokens(emb, token, m);
        }
        let (cls, pos) = (p(g, "cls"), p(g, "pos"));
        let mut t = g.assemble_tokens(emb, cls, pos, batch);

        let grid = c.grid();
        let tap_blocks: Vec<usize> = (0..4).map(|i| ((i + 1) * c.depth).div_ceil(4) - 1).collect();
        let mut taps = Vec::with_capacity(4);
        for i in 0..c.depth {
            let pre = format!("block{i}.");
            let name = |s: &str| format!("{pre}{s}");
            let (g1, b1) = (p(g, &name("ln1.g")), p(g, &name("ln1.b")));
            let h = g.layer_norm(t, g1, b1);
            let (qw, qb) = (p(g, &name("qkv.w")), p(g, &name("qkv.b")));
            let qkv = g.linear(h, qw, Some(qb));
            let a = g.attention(qkv, batch, c.heads);
            let (ow, ob) = (p(g, &name("proj.w")), p(g, &name("proj.b")));
            let a = g.linear(a, ow, Some(ob));
            t = g.add(t, a);
            let (g2, b2) = (p(g, &name("ln2.g")), p(g, &name("ln2.b")));
            let h = g.layer_norm(t, g2, b2);
            let (w1, bb1) = (p(g, &name("fc1.w")), p(g, &name("fc1.b")));
            let h = g.linear(h, w1, Some(bb1));
            let h = g.gelu(h);
            let (w2, bb2) = (p(g, &name("fc2.w")), p(g, &name("fc2.b")));
            let h = g.linear(h, w2, Some(bb2));
            t = g.add(t, h);
            for (lvl, &blk) in tap_blocks.iter().enumerate() {
                if blk == i {
                    taps.push((lvl, t));
                }
            }
        }
        let (ng, nb) = (p(g, "norm.g"), p(g, "norm.b"));
        let out = g.layer_norm(t, ng, nb);
        let tokens = grid * grid + 1;
        let cls_rows: Vec<usize> = (0..batch).map(|n| n * tokens).collect();
        let embedding = g.select_rows(out, &cls_rows);
        let patch_rows: Vec<usize> = (0..batch)
            .flat_map(|n| (1..tokens).map(move |i| n * tokens + i))
            .collect();
        let patch_tokens = g.select_rows(out, &patch_rows);

        // block outputs as maps, resized to 2g, g, g/2, g/4
        let targets = [2 * grid, grid, (grid / 2).max(1), (grid / 4).max(1)];
        let mut pyramid = Vec::with_capacity(4);
        for (lvl, tok) in taps {
            let m = g.tokens_to_map(tok, batch, 1);
            pyramid.push(g.resize(m, targets[lvl], targets[lvl]));
        }
        Ok(Encoded {
            embedding,
            pyramid: pyramid.try_into().expect("four taps"),
            patch_tokens: Some(patch_tokens),
        })
    }

    fn cnn_forward(&self, c: &CnnConfig, g: &mut Graph, x: Var, trainable: bool) -> Encoded {
        let p = |g: &mut Graph, name: &str| g.bind(&self.params, name, trainable);
        let (sw, sb) = (p(g, "stem.w"), p(g, "stem.b"));
        let h = g.conv2d(x, sw, Some(sb), c.stem_stride, 1);
        let mut h = g.relu(h);
        let mut pyramid = Vec::with_capacity(4);
        for i in 0..4 {
            let pre = format!("stage{i}.");
            let (dw, db) = (p(g, &format!("{pre}down.w")), p(g, &format!("{pre}down.b")));
            let d = g.conv2d(h, dw, Some(db), 2, 1);
            let d = g.relu(d);
            let (rw, rb) = (p(g, &format!("{pre}res.w")), p(g, &format!("{pre}res.b")));
            let r = g.conv2d(d, rw, Some(rb), 1, 1);
            let s = g.add(d, r);
            h = g.relu(s);
            pyramid.push(h);
        }
        let embedding = g.mean_spatial(h);
        Encoded {
            embedding,
            pyramid: pyramid.try_into().expect("four stages"),
            patch_tokens: None,
        }
    }

    /// Inference on a batch of equally sized square images.
    pub fn encode_batch(&self, images: &[&GrayImage]) -> Result<Vec<EncoderOutput>> {
        let x = batch_tensor(images)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let enc = self.forward(&mut g, xv, false)?;
        let b = images.len();
        let emb = g.value(enc.embedding);
        let d = emb.shape()[1];
        let mut outs: Vec<EncoderOutput> = (0..b)
            .map(|n| EncoderOutput {
                embedding: emb.data()[n * d..(n + 1) * d].to_vec(),
                pyramid: Vec::with_capacity(4),
            })
            .collect();
        for lvl in enc.pyramid {
            let t = g.value(lvl);
            let s = t.shape();
            let per = s[1] * s[2] * s[3];
            for (n, o) in outs.iter_mut().enumerate() {
                o.pyramid
                    .push(Tensor::new(&s[1..], t.data()[n * per..(n + 1) * per].to_vec()));
            }
        }
        Ok(outs)
    }

    pub fn encode(&self, image: &GrayImage) -> Result<EncoderOutput> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    /// Pooled embeddings of many images, computed in chunks of `batch`.
    pub fn embed_all(&self, images: &[&GrayImage], batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let x = batch_tensor(chunk)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let enc = self.forward(&mut g, xv, false)?;
            let emb = g.value(enc.embedding);
            out.extend(emb.data().chunks(emb.shape()[1]).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// checkpoints

const MAGIC: &[u8; 4] = b"MLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialises an encoder: magic, version, kind, config echo, then each tensor
/// as (name, dims, little-endian `f32` payload).
pub fn checkpoint_bytes(enc: &Encoder) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match enc.kind() {
        EncoderKind::Vit => 0,
        EncoderKind::Cnn => 1,
    });
    let echo = enc.config.echo();
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    write_tensors(&mut out, &enc.params);
    out
}

fn write_tensors(out: &mut Vec<u8>, store: &ParamStore) {
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(EncoderError::TruncatedFile)?;
        let s = self.buf.get(self.pos..end).ok_or(EncoderError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses [`checkpoint_bytes`] output.
pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Encoder> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| EncoderError::BadMagic)? != MAGIC {
        return Err(EncoderError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::VersionMismatch(version));
    }
    let kind = match r.take(1)?[0] {
        0 => EncoderKind::Vit,
        1 => EncoderKind::Cnn,
        k => return Err(EncoderError::Corrupt(format!("unknown kind byte {k}"))),
    };
    let echo_len = r.u32()? as usize;
    let echo = std::str::from_utf8(r.take(echo_len)?)
        .map_err(|_| EncoderError::Corrupt("config echo is not UTF-8".into()))?;
    let config = EncoderConfig::parse_echo(echo)?;
    if config.kind() != kind {
        return Err(EncoderError::Corrupt("kind byte disagrees with config echo".into()));
    }
    let params = read_tensors(&mut r)?;
    if r.pos != buf.len() {
        return Err(EncoderError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Encoder::from_params(config, params)
}

fn read_tensors(r: &mut Reader) -> Result<ParamStore> {
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| EncoderError::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let bytes = r.take(n.checked_mul(4).ok_or(EncoderError::TruncatedFile)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if params.contains(&name) {
            return Err(EncoderError::DuplicateName(name));
        }
        params.insert(name, Tensor::new(&dims, data));
    }
    Ok(params)
}

const PARAMS_MAGIC: &[u8; 4] = b"MLPS";

/// Serialises a bare parameter store (head snapshots) with the same tensor
/// layout as encoder checkpoints.
pub fn params_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = PARAMS_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_tensors(&mut out, store);
    out
}

pub fn params_from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| EncoderError::BadMagic)? != PARAMS_MAGIC {
        return Err(EncoderError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::VersionMismatch(version));
    }
    let params = read_tensors(&mut r)?;
    if r.pos != buf.len() {
        return Err(EncoderError::Corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_checkpoint(enc: &Encoder, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(enc)).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Encoder> {
    let buf = fs::read(path).map_err(|source| EncoderError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    checkpoint_from_bytes(&buf)
}

/// Loads a checkpoint and insists on its encoder kind.
pub fn load_checkpoint_as(path: &Path, expected: EncoderKind) -> Result<Encoder> {
    let enc = load_checkpoint(path)?;
    if enc.kind() != expected {
        return Err(EncoderError::KindMismatch {
            expected,
            found: enc.kind(),
        });
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_counts() {
        assert_eq!(EncoderConfig::Vit(VitConfig::default()).num_params(), 142_400);
        assert_eq!(EncoderConfig::Cnn(CnnConfig::default()).num_params(), 295_552);
    }

    #[test]
    fn patchify_layout() {
        let x = Tensor::new(&[1, 1, 4, 4], (0..16).map(f64::from).collect());
        let p = patchify(&x, 2);
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn echo_round_trip() {
        for cfg in [
            EncoderConfig::Vit(VitConfig::default()),
            EncoderConfig::Cnn(CnnConfig::default()),
        ] {
            assert_eq!(EncoderConfig::parse_echo(&cfg.echo()).unwrap(), cfg);
        }
    }

    #[test]
    fn params_bytes_round_trip() {
        let mut store = ParamStore::new();
        // payload is f32, so only f32-representable values survive exactly
        store.insert("a.w", Tensor::new(&[2, 3], vec![0.5, -1.25, 3.0, f64::from(f32::MIN_POSITIVE), -0.0, f64::from(f32::MAX)]));
        store.insert("b", Tensor::new(&[1], vec![7.0]));
        let buf = params_bytes(&store);
        assert_eq!(params_from_bytes(&buf).unwrap(), store);
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(params_from_bytes(&long), Err(EncoderError::Corrupt(_))));
        assert!(matches!(params_from_bytes(b"XXXX"), Err(EncoderError::BadMagic)));
    }

    #[test]
    fn vit_rejects_wrong_side() {
        let enc = Encoder::new(EncoderConfig::Vit(VitConfig::default()), 0).unwrap();
        let img = GrayImage::filled(32, 32, 0);
        assert!(matches!(enc.encode(&img), Err(EncoderError::ShapeMismatch(_))));
    }
}
