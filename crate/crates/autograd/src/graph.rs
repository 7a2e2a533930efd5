use std::collections::{BTreeMap, HashMap};

use crate::kernels::{self, Tap};
use crate::{ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Region of interest on a feature map, in feature-pixel edge coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ConcatChannels(Vec<Var>),
    MeanSpatial(Var),
    Resize(Var),
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    MaskTokens {
        patches: Var,
        token: Var,
        mask: Vec<bool>,
    },
    TokensToMap {
        x: Var,
        batch: usize,
        skip: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Mse(Var, Var),
    NtXent {
        z1: Var,
        z2: Var,
        tau: f64,
        unit: Vec<f64>,
        norms: Vec<f64>,
        probs: Vec<f64>,
    },
    RoiAlign {
        feat: Var,
        rois: Vec<Roi>,
        size: usize,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<f64>,
        beta: f64,
        norm: f64,
    },
    DiceLoss {
        probs: Var,
        targets: Vec<f64>,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Build a forward pass with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<(usize, String), Var>,
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn store_key(store: &ParamStore) -> usize {
    store as *const ParamStore as usize
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter of `store`. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        self.bind(store, name, true)
    }

    /// Binds a parameter as a constant (frozen weights).
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Var {
        self.bind(store, name, false)
    }

    pub fn bind(&mut self, store: &ParamStore, name: &str, trainable: bool) -> Var {
        let key = (store_key(store), name.to_string());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = self.push(t, Op::Leaf, trainable);
        self.bound.insert(key, v);
        v
    }

    /// Gradients of every trainable parameter of `store` bound in this graph.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let key = store_key(store);
        let mut out = BTreeMap::new();
        for ((k, name), v) in &self.bound {
            if *k != key || !self.ng(*v) {
                continue;
            }
            let g = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            out.insert(name.clone(), g);
        }
        out
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ----- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 0.5 * x * (1.0 + gelu_inner(x).tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    // ----- linear algebra ---------------------------------------------------

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// `x·w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (sx, sw) = (self.shape(x), self.shape(w));
        assert!(sx.len() == 2 && sw.len() == 2 && sx[1] == sw[0], "linear {sx:?} x {sw:?}");
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), m);
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias);
            }
        }
        kernels::gemm(n, k, m, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Tensor::new(&[n, m], out), Op::Linear { x, w, b }, ng)
    }

    /// 2-D convolution, `x: [b, ci, h, w]`, `w: [co, ci, k, k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1] && sw[2] == sw[3], "conv2d {sx:?} * {sw:?}");
        let (bn, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, k) = (sw[0], sw[2]);
        let oh = kernels::conv_out(h, k, stride, pad);
        let ow = kernels::conv_out(wd, k, stride, pad);
        let plane = oh * ow;
        let ckk = ci * k * k;
        let mut cols = vec![0.0; bn * ckk * plane];
        let mut out = vec![0.0; bn * co * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for bi in 0..bn {
            let col = &mut cols[bi * ckk * plane..(bi + 1) * ckk * plane];
            kernels::im2col(&xv[bi * ci * h * wd..(bi + 1) * ci * h * wd], ci, h, wd, k, stride, pad, col);
            let o = &mut out[bi * co * plane..(bi + 1) * co * plane];
            if let Some(b) = b {
                let bias = self.value(b).data();
                for (c, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.fill(bias[c]);
                }
            }
            kernels::gemm(co, ckk, plane, wv, false, col, false, o, 1.0);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let cols = if ng { cols } else { Vec::new() };
        self.push(
            Tensor::new(&[bn, co, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            ng,
        )
    }

    /// Row-wise layer normalisation of `x: [n, d]` with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-6;
        let sx = self.shape(x);
        assert_eq!(sx.len(), 2);
        let (n, d) = (sx[0], sx[1]);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(&[n, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head self-attention over `batch` sequences packed as
    /// `qkv: [batch·t, 3·d]` (query | key | value). Returns `[batch·t, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Var {
        let s = self.shape(qkv);
        assert_eq!(s.len(), 2);
        assert!(s[0].is_multiple_of(batch) && s[1].is_multiple_of(3));
        let t = s[0] / batch;
        let d = s[1] / 3;
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(qkv).data();
        let mut out = vec![0.0; batch * t * d];
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut q = vec![0.0; t * dh];
        let mut k = vec![0.0; t * dh];
        let mut v = vec![0.0; t * dh];
        let mut o = vec![0.0; t * dh];
        for b in 0..batch {
            for h in 0..heads {
                gather_head(qv, b, t, d, 0, h, dh, &mut q);
                gather_head(qv, b, t, d, d, h, dh, &mut k);
                gather_head(qv, b, t, d, 2 * d, h, dh, &mut v);
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                kernels::gemm(t, dh, t, &q, false, &k, true, p, 0.0);
                for row in p.chunks_mut(t) {
                    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x * scale - mx).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                }
                kernels::gemm(t, t, dh, p, false, &v, false, &mut o, 0.0);
                for r in 0..t {
                    let dst = (b * t + r) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
                }
            }
        }
        let ng = self.ng(qkv);
        self.push(
            Tensor::new(&[batch * t, d], out),
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            },
            ng,
        )
    }

    // ----- shape plumbing ---------------------------------------------------

    /// Picks rows (first-axis slices) of `x` by index; repeats allowed.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x).to_vec();
        let row: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < s[0], "row {i} out of range {}", s[0]);
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let ng = self.ng(x);
        self.push(
            Tensor::new(&shape, out),
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let n = self.shape(xs[0])[0];
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert!(s.len() == 2 && s[0] == n);
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::new(&[n, total], out), Op::ConcatCols(xs.to_vec()), ng)
    }

    /// Concatenates tensors along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let s0 = self.shape(xs[0]).to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in xs {
            let s = self.shape(v);
            assert_eq!(s[1..], s0[1..], "concat_rows trailing shape mismatch");
            rows += s[0];
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = s0;
        shape[0] = rows;
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::new(&shape, out), Op::ConcatRows(xs.to_vec()), ng)
    }

    /// Concatenates `[b, c_i, h, w]` tensors along channels.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let s0 = self.shape(xs[0]).to_vec();
        let (bn, h, w) = (s0[0], s0[2], s0[3]);
        let chans: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert!(s.len() == 4 && s[0] == bn && s[2] == h && s[3] == w, "concat {s:?} vs {s0:?}");
                s[1]
            })
            .collect();
        let ct: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = vec![0.0; bn * ct * hw];
        let mut off = 0;
        for (&v, &c) in xs.iter().zip(&chans) {
            let src = self.value(v).data();
            for b in 0..bn {
                let dst = (b * ct + off) * hw;
                out[dst..dst + c * hw].copy_from_slice(&src[b * c * hw..(b + 1) * c * hw]);
            }
            off += c;
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::new(&[bn, ct, h, w], out), Op::ConcatChannels(xs.to_vec()), ng)
    }

    /// Global average over the spatial axes: `[b, c, h, w] -> [b, c]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let hw = s[2] * s[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&[s[0], s[1]], out), Op::MeanSpatial(x), ng)
    }

    /// Bilinear resize of `[b, c, h, w]` to `[b, c, oh, ow]`.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (h, w) = (s[2], s[3]);
        if (h, w) == (oh, ow) {
            let t = self.value(x).clone();
            let ng = self.ng(x);
            return self.push(t, Op::Reshape(x), ng);
        }
        let ty = kernels::linear_taps(h, oh);
        let tx = kernels::linear_taps(w, ow);
        let planes = s[0] * s[1];
        let mut out = vec![0.0; planes * oh * ow];
        let xv = self.value(x).data();
        for p in 0..planes {
            kernels::resize_plane_into(
                &xv[p * h * w..(p + 1) * h * w],
                w,
                &ty,
                &tx,
                &mut out[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[s[0], s[1], oh, ow], out), Op::Resize(x), ng)
    }

    /// Builds a token sequence per sample: `[cls; patches] + pos`.
    /// `patches: [b·p, d]`, `cls: [1, d]`, `pos: [p+1, d]` → `[b·(p+1), d]`.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Var {
        let sp = self.shape(patches);
        let d = sp[1];
        let p = sp[0] / batch;
        assert_eq!(self.shape(pos), &[p + 1, d]);
        assert_eq!(self.value(cls).len(), d);
        let t = p + 1;
        let pv = self.value(patches).data();
        let cv = self.value(cls).data();
        let posv = self.value(pos).data();
        let mut out = vec![0.0; batch * t * d];
        for b in 0..batch {
            for j in 0..d {
                out[b * t * d + j] = cv[j] + posv[j];
            }
            for i in 0..p {
                let dst = (b * t + 1 + i) * d;
                let src = (b * p + i) * d;
                for j in 0..d {
                    out[dst + j] = pv[src + j] + posv[(1 + i) * d + j];
                }
            }
        }
        let ng = self.ng(patches) || self.ng(cls) || self.ng(pos);
        self.push(
            Tensor::new(&[batch * t, d], out),
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            ng,
        )
    }

    /// Replaces rows of `patches: [n, d]` flagged in `mask` with `token: [1, d]`.
    pub fn mask_tokens(&mut self, patches: Var, token: Var, mask: &[bool]) -> Var {
        let s = self.shape(patches).to_vec();
        assert_eq!(s[0], mask.len());
        let d = s[1];
        let mut out = self.value(patches).data().to_vec();
        let tv = self.value(token).data();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(tv);
            }
        }
        let ng = self.ng(patches) || self.ng(token);
        self.push(
            Tensor::new(&s, out),
            Op::MaskTokens {
                patches,
                token,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Reshapes token rows `[b·t, d]` (dropping the first `skip` tokens of
    /// each sample) into a square channel-first map `[b, d, g, g]`.
    pub fn tokens_to_map(&mut self, x: Var, batch: usize, skip: usize) -> Var {
        let s = self.shape(x).to_vec();
        let t = s[0] / batch;
        let d = s[1];
        let p = t - skip;
        let g = (p as f64).sqrt().round() as usize;
        assert_eq!(g * g, p, "token grid is not square");
        let xv = self.value(x).data();
        let mut out = vec![0.0; batch * d * p];
        for b in 0..batch {
            for i in 0..p {
                let src = (b * t + skip + i) * d;
                for j in 0..d {
                    out[(b * d + j) * p + i] = xv[src + j];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[batch, d, g, g], out), Op::TokensToMap { x, batch, skip }, ng)
    }

    // ----- losses -----------------------------------------------------------

    /// Mean softmax cross-entropy of `logits: [n, c]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        self.cross_entropy_masked(logits, targets, None)
    }

    /// Cross-entropy where each row's softmax runs only over the classes
    /// flagged in `allowed` (row-major `[n, c]`); other logits get no gradient.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], allowed: Option<&[bool]>) -> Var {
        let s = self.shape(logits);
        assert_eq!(s.len(), 2);
        let (n, c) = (s[0], s[1]);
        assert_eq!(n, targets.len());
        assert!(n > 0);
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * c..(r + 1) * c];
            let ok = |j: usize| allowed.is_none_or(|a| a[r * c + j]);
            assert!(targets[r] < c && ok(targets[r]), "target outside allowed classes");
            let mx = (0..c).filter(|&j| ok(j)).fold(f64::NEG_INFINITY, |m, j| m.max(row[j]));
            let mut z = 0.0;
            for j in (0..c).filter(|&j| ok(j)) {
                let e = (row[j] - mx).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[r * c + j] /= z;
            }
            loss += -(row[targets[r]] - mx - z.ln());
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy with logits over all elements.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Var {
        let lv = self.value(logits).data();
        assert_eq!(lv.len(), targets.len());
        let loss = lv
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / lv.len() as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mse shape mismatch");
        let loss = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / av.len() as f64;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(loss), Op::Mse(a, b), ng)
    }

    /// NT-Xent over two views `z1, z2: [b, d]`.
    ///
    /// Rows are L2-normalised; every one of the `2b` embeddings is an anchor
    /// whose positive is its counterpart in the other view and whose
    /// candidates are all other `2b - 1` embeddings. Returns the mean over
    /// anchors.
    pub fn nt_xent(&mut self, z1: Var, z2: Var, tau: f64) -> Var {
        let (s1, s2) = (self.shape(z1).to_vec(), self.shape(z2).to_vec());
        assert_eq!(s1, s2);
        let (b, d) = (s1[0], s1[1]);
        let n = 2 * b;
        let mut unit = Vec::with_capacity(n * d);
        unit.extend_from_slice(self.value(z1).data());
        unit.extend_from_slice(self.value(z2).data());
        let mut norms = vec![0.0; n];
        for (r, row) in unit.chunks_mut(d).enumerate() {
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[r] = nr;
            for v in row.iter_mut() {
                *v /= nr;
            }
        }
        let mut sim = vec![0.0; n * n];
        kernels::gemm(n, d, n, &unit, false, &unit, true, &mut sim, 0.0);
        let mut probs = vec![0.0; n * n];
        let mut loss = 0.0;
        for i in 0..n {
            let pos = (i + b) % n;
            let row = &sim[i * n..(i + 1) * n];
            let mx = (0..n)
                .filter(|&j| j != i)
                .fold(f64::NEG_INFINITY, |m, j| m.max(row[j] / tau));
            let mut z = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let e = (row[j] / tau - mx).exp();
                probs[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                probs[i * n + j] /= z;
            }
            loss += -(row[pos] / tau - mx - z.ln());
        }
        let ng = self.ng(z1) || self.ng(z2);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::NtXent {
                z1,
                z2,
                tau,
                unit,
                norms,
                probs,
            },
            ng,
        )
    }

    /// Crop-and-resize pooling: one bilinear sample at the centre of each of
    /// `size×size` bins per roi. Returns `[rois, c, size, size]`.
    pub fn roi_align(&mut self, feat: Var, rois: &[Roi], size: usize) -> Var {
        let s = self.shape(feat).to_vec();
        let (c, h, w) = (s[1], s[2], s[3]);
        let fv = self.value(feat).data();
        let mut out = vec![0.0; rois.len() * c * size * size];
        for (ri, roi) in rois.iter().enumerate() {
            let taps = roi_taps(roi, size, h, w);
            for ch in 0..c {
                let plane = &fv[(roi.batch * c + ch) * h * w..(roi.batch * c + ch + 1) * h * w];
                let dst = &mut out[(ri * c + ch) * size * size..(ri * c + ch + 1) * size * size];
                for (by, &(y0, y1, fy)) in taps.0.iter().enumerate() {
                    for (bx, &(x0, x1, fx)) in taps.1.iter().enumerate() {
                        dst[by * size + bx] = (1.0 - fy) * ((1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1])
                            + fy * ((1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
                    }
                }
            }
        }
        let ng = self.ng(feat);
        self.push(
            Tensor::new(&[rois.len(), c, size, size], out),
            Op::RoiAlign {
                feat,
                rois: rois.to_vec(),
                size,
            },
            ng,
        )
    }

    /// `sum(smooth_l1(pred - target)) / norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], beta: f64, norm: f64) -> Var {
        let pv = self.value(pred).data();
        assert_eq!(pv.len(), target.len());
        let loss = pv
            .iter()
            .zip(target)
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum::<f64>()
            / norm;
        let ng = self.ng(pred);
        self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                beta,
                norm,
            },
            ng,
        )
    }

    /// Soft Dice loss `1 - (2Σpy + ε)/(Σp + Σy + ε)` per sample (first axis),
    /// averaged over samples.
    pub fn dice_loss(&mut self, probs: Var, targets: &[f64], eps: f64) -> Var {
        let s = self.shape(probs);
        let bn = s[0];
        let pv = self.value(probs).data();
        assert_eq!(pv.len(), targets.len());
        let per = pv.len() / bn;
        let mut loss = 0.0;
        for b in 0..bn {
            let p = &pv[b * per..(b + 1) * per];
            let y = &targets[b * per..(b + 1) * per];
            let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
            let sp: f64 = p.iter().sum();
            let sy: f64 = y.iter().sum();
            loss += 1.0 - (2.0 * inter + eps) / (sp + sy + eps);
        }
        let ng = self.ng(probs);
        self.push(
            Tensor::scalar(loss / bn as f64),
            Op::DiceLoss {
                probs,
                targets: targets.to_vec(),
                eps,
            },
            ng,
        )
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse pass from the scalar `loss`; returns gradients of leaves.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, g.data(), &mut grads);
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.ng(v) {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(grads, v) {
                        axpy(d, g, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(d, g, 1.0);
                }
                if let Some(d) = self.acc(grads, *b) {
                    axpy(d, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(d, g, *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    axpy(d, g, 1.0);
                }
            }
            Op::Sum(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(d) = self.acc(grads, *a) {
                    let s = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.acc(grads, *a) {
                    kernels::gemm(m, n, k, g, false, bv, true, d, 1.0);
                }
                if let Some(d) = self.acc(grads, *b) {
                    kernels::gemm(k, m, n, av, true, g, false, d, 1.0);
                }
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, k, m) = (sx[0], sx[1], sw[1]);
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(d) = self.acc(grads, *x) {
                    kernels::gemm(n, m, k, g, false, wv, true, d, 1.0);
                }
                if let Some(d) = self.acc(grads, *w) {
                    kernels::gemm(k, n, m, xv, true, g, false, d, 1.0);
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        for row in g.chunks(m) {
                            axpy(d, row, 1.0);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (bn, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, k) = (sw[0], sw[2]);
                let so = node.value.shape();
                let plane = so[2] * so[3];
                let ckk = ci * k * k;
                if let Some(d) = self.acc(grads, *w) {
                    for bi in 0..bn {
                        let gb = &g[bi * co * plane..(bi + 1) * co * plane];
                        let col = &cols[bi * ckk * plane..(bi + 1) * ckk * plane];
                        kernels::gemm(co, plane, ckk, gb, false, col, true, d, 1.0);
                    }
                }
                if let Some(b) = b {
                    if let Some(d) = self.acc(grads, *b) {
                        for bi in 0..bn {
                            for c in 0..co {
                                let off = (bi * co + c) * plane;
                                d[c] += g[off..off + plane].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if self.ng(*x) {
                    let wv = self.value(*w).data();
                    let mut dcol = vec![0.0; ckk * plane];
                    let d = self.acc(grads, *x).expect("needs grad");
                    for bi in 0..bn {
                        let gb = &g[bi * co * plane..(bi + 1) * co * plane];
                        kernels::gemm(ckk, co, plane, wv, true, gb, false, &mut dcol, 0.0);
                        kernels::col2im(
                            &dcol,
                            ci,
                            h,
                            wd,
                            k,
                            *stride,
                            *pad,
                            &mut d[bi * ci * h * wd..(bi + 1) * ci * h * wd],
                        );
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(av) {
                        let t = gelu_inner(x).tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d += g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Sigmoid(a) => {
                let ov = node.value.data();
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, g), s) in d.iter_mut().zip(g).zip(ov) {
                        *d += g * s * (1.0 - s);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let s = self.shape(*x);
                let (n, dm) = (s[0], s[1]);
                let gv = self.value(*gamma).data();
                if let Some(d) = self.acc(grads, *gamma) {
                    for r in 0..n {
                        for j in 0..dm {
                            d[j] += g[r * dm + j] * xhat[r * dm + j];
                        }
                    }
                }
                if let Some(d) = self.acc(grads, *beta) {
                    for row in g.chunks(dm) {
                        axpy(d, row, 1.0);
                    }
                }
                if let Some(d) = self.acc(grads, *x) {
                    for r in 0..n {
                        let gr = &g[r * dm..(r + 1) * dm];
                        let xh = &xhat[r * dm..(r + 1) * dm];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..dm {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= dm as f64;
                        m2 /= dm as f64;
                        for j in 0..dm {
                            let dxh = gr[j] * gv[j];
                            d[r * dm + j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                heads,
                probs,
            } => {
                let Some(dq_all) = self.acc(grads, *qkv) else { return };
                let s = self.shape(*qkv);
                let t = s[0] / batch;
                let d = s[1] / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.value(*qkv).data();
                let mut q = vec![0.0; t * dh];
                let mut k = vec![0.0; t * dh];
                let mut v = vec![0.0; t * dh];
                let mut go = vec![0.0; t * dh];
                let mut dp = vec![0.0; t * t];
                let mut dv = vec![0.0; t * dh];
                let mut dq = vec![0.0; t * dh];
                let mut dk = vec![0.0; t * dh];
                for b in 0..*batch {
                    for h in 0..*heads {
                        gather_head(qv, b, t, d, 0, h, dh, &mut q);
                        gather_head(qv, b, t, d, d, h, dh, &mut k);
                        gather_head(qv, b, t, d, 2 * d, h, dh, &mut v);
                        for r in 0..t {
                            let src = (b * t + r) * d + h * dh;
                            go[r * dh..(r + 1) * dh].copy_from_slice(&g[src..src + dh]);
                        }
                        let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        kernels::gemm(t, dh, t, &go, false, &v, true, &mut dp, 0.0);
                        kernels::gemm(t, t, dh, p, true, &go, false, &mut dv, 0.0);
                        for r in 0..t {
                            let pr = &p[r * t..(r + 1) * t];
                            let dr = &mut dp[r * t..(r + 1) * t];
                            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - dot) * scale;
                            }
                        }
                        kernels::gemm(t, t, dh, &dp, false, &k, false, &mut dq, 0.0);
                        kernels::gemm(t, t, dh, &dp, true, &q, false, &mut dk, 0.0);
                        scatter_head(dq_all, b, t, d, 0, h, dh, &dq);
                        scatter_head(dq_all, b, t, d, d, h, dh, &dk);
                        scatter_head(dq_all, b, t, d, 2 * d, h, dh, &dv);
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                if let Some(d) = self.acc(grads, *x) {
                    let row = g.len() / idx.len().max(1);
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut d[i * row..(i + 1) * row], &g[r * row..(r + 1) * row], 1.0);
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut off = 0;
                for &v in xs {
                    let w = self.shape(v)[1];
                    if let Some(d) = self.acc(grads, v) {
                        for r in 0..n {
                            axpy(&mut d[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if let Some(d) = self.acc(grads, v) {
                        axpy(d, &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::ConcatChannels(xs) => {
                let so = node.value.shape();
                let (bn, ct, hw) = (so[0], so[1], so[2] * so[3]);
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if let Some(d) = self.acc(grads, v) {
                        for b in 0..bn {
                            let src = (b * ct + off) * hw;
                            axpy(&mut d[b * c * hw..(b + 1) * c * hw], &g[src..src + c * hw], 1.0);
                        }
                    }
                    off += c;
                }
            }
            Op::MeanSpatial(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                if let Some(d) = self.acc(grads, *x) {
                    for (p, chunk) in d.chunks_mut(hw).enumerate() {
                        let v = g[p] / hw as f64;
                        chunk.iter_mut().for_each(|x| *x += v);
                    }
                }
            }
            Op::Resize(x) => {
                let s = self.shape(*x);
                let so = node.value.shape();
                let (h, w, oh, ow) = (s[2], s[3], so[2], so[3]);
                let ty = kernels::linear_taps(h, oh);
                let tx = kernels::linear_taps(w, ow);
                if let Some(d) = self.acc(grads, *x) {
                    for p in 0..s[0] * s[1] {
                        kernels::resize_plane_backward(
                            &g[p * oh * ow..(p + 1) * oh * ow],
                            w,
                            &ty,
                            &tx,
                            &mut d[p * h * w..(p + 1) * h * w],
                        );
                    }
                }
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let d = self.shape(*patches)[1];
                let p = self.shape(*patches)[0] / batch;
                let t = p + 1;
                if let Some(dp) = self.acc(grads, *patches) {
                    for b in 0..*batch {
                        for i in 0..p {
                            let src = (b * t + 1 + i) * d;
                            axpy(&mut dp[(b * p + i) * d..(b * p + i + 1) * d], &g[src..src + d], 1.0);
                        }
                    }
                }
                if let Some(dc) = self.acc(grads, *cls) {
                    for b in 0..*batch {
                        axpy(dc, &g[b * t * d..b * t * d + d], 1.0);
                    }
                }
                if let Some(dpos) = self.acc(grads, *pos) {
                    for b in 0..*batch {
                        axpy(dpos, &g[b * t * d..(b + 1) * t * d], 1.0);
                    }
                }
            }
            Op::MaskTokens { patches, token, mask } => {
                let d = self.shape(*patches)[1];
                if let Some(dp) = self.acc(grads, *patches) {
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            axpy(&mut dp[r * d..(r + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                }
                if let Some(dt) = self.acc(grads, *token) {
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            axpy(dt, &g[r * d..(r + 1) * d], 1.0);
                        }
                    }
                }
            }
            Op::TokensToMap { x, batch, skip } => {
                let s = self.shape(*x);
                let t = s[0] / batch;
                let d = s[1];
                let p = t - skip;
                if let Some(dx) = self.acc(grads, *x) {
                    for b in 0..*batch {
                        for i in 0..p {
                            let dst = (b * t + skip + i) * d;
                            for j in 0..d {
                                dx[dst + j] += g[(b * d + j) * p + i];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.shape(*logits)[1];
                let n = targets.len();
                if let Some(d) = self.acc(grads, *logits) {
                    let s = g[0] / n as f64;
                    for r in 0..n {
                        for j in 0..c {
                            let y = if j == targets[r] { 1.0 } else { 0.0 };
                            d[r * c + j] += s * (probs[r * c + j] - y);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                if let Some(d) = self.acc(grads, *logits) {
                    let s = g[0] / lv.len() as f64;
                    for ((d, &z), &y) in d.iter_mut().zip(lv).zip(targets) {
                        *d += s * (sigmoid(z) - y);
                    }
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0] / av.len() as f64;
                if let Some(d) = self.acc(grads, *a) {
                    for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *d += s * (x - y);
                    }
                }
                if let Some(d) = self.acc(grads, *b) {
                    for ((d, x), y) in d.iter_mut().zip(av).zip(bv) {
                        *d -= s * (x - y);
                    }
                }
            }
            Op::NtXent {
                z1,
                z2,
                tau,
                unit,
                norms,
                probs,
            } => {
                let s = self.shape(*z1);
                let (b, dm) = (s[0], s[1]);
                let n = 2 * b;
                // dL/dsim with sim = u_i·u_j / tau
                let mut gs = vec![0.0; n * n];
                let scale = g[0] / n as f64;
                for i in 0..n {
                    let pos = (i + b) % n;
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let y = if j == pos { 1.0 } else { 0.0 };
                        gs[i * n + j] = scale * (probs[i * n + j] - y) / tau;
                    }
                }
                let mut sym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] = gs[i * n + j] + gs[j * n + i];
                    }
                }
                let mut du = vec![0.0; n * dm];
                kernels::gemm(n, n, dm, &sym, false, unit, false, &mut du, 0.0);
                for (r, row) in du.chunks_mut(dm).enumerate() {
                    let u = &unit[r * dm..(r + 1) * dm];
                    let dot: f64 = u.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    for (x, uu) in row.iter_mut().zip(u) {
                        *x = (*x - uu * dot) / norms[r];
                    }
                }
                if let Some(d) = self.acc(grads, *z1) {
                    axpy(d, &du[..b * dm], 1.0);
                }
                if let Some(d) = self.acc(grads, *z2) {
                    axpy(d, &du[b * dm..], 1.0);
                }
            }
            Op::RoiAlign { feat, rois, size } => {
                let s = self.shape(*feat);
                let (c, h, w) = (s[1], s[2], s[3]);
                if let Some(d) = self.acc(grads, *feat) {
                    for (ri, roi) in rois.iter().enumerate() {
                        let taps = roi_taps(roi, *size, h, w);
                        for ch in 0..c {
                            let base = (roi.batch * c + ch) * h * w;
                            let src = &g[(ri * c + ch) * size * size..(ri * c + ch + 1) * size * size];
                            for (by, &(y0, y1, fy)) in taps.0.iter().enumerate() {
                                for (bx, &(x0, x1, fx)) in taps.1.iter().enumerate() {
                                    let gv = src[by * size + bx];
                                    d[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                    d[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                                    d[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                                    d[base + y1 * w + x1] += gv * fy * fx;
                                }
                            }
                        }
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                beta,
                norm,
            } => {
                let pv = self.value(*pred).data();
                if let Some(d) = self.acc(grads, *pred) {
                    for ((d, p), t) in d.iter_mut().zip(pv).zip(target) {
                        let diff = p - t;
                        let gr = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        *d += g[0] * gr / norm;
                    }
                }
            }
            Op::DiceLoss { probs, targets, eps } => {
                let bn = self.shape(*probs)[0];
                let pv = self.value(*probs).data();
                let per = pv.len() / bn;
                if let Some(d) = self.acc(grads, *probs) {
                    for b in 0..bn {
                        let p = &pv[b * per..(b + 1) * per];
                        let y = &targets[b * per..(b + 1) * per];
                        let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
                        let den: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>() + eps;
                        let num = 2.0 * inter + eps;
                        let s = g[0] / bn as f64;
                        for (k, &yy) in y.iter().enumerate() {
                            d[b * per + k] -= s * (2.0 * yy * den - num) / (den * den);
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + 0.044715 * x * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[allow(clippy::too_many_arguments)]
fn gather_head(qkv: &[f64], b: usize, t: usize, d: usize, part: usize, h: usize, dh: usize, out: &mut [f64]) {
    for r in 0..t {
        let src = (b * t + r) * 3 * d + part + h * dh;
        out[r * dh..(r + 1) * dh].copy_from_slice(&qkv[src..src + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(dst: &mut [f64], b: usize, t: usize, d: usize, part: usize, h: usize, dh: usize, src: &[f64]) {
    for r in 0..t {
        let off = (b * t + r) * 3 * d + part + h * dh;
        axpy(&mut dst[off..off + dh], &src[r * dh..(r + 1) * dh], 1.0);
    }
}

fn roi_taps(roi: &Roi, size: usize, h: usize, w: usize) -> (Vec<Tap>, Vec<Tap>) {
    let bw = (roi.x2 - roi.x1) / size as f64;
    let bh = (roi.y2 - roi.y1) / size as f64;
    let ys = (0..size)
        .map(|i| kernels::sample_tap(roi.y1 + (i as f64 + 0.5) * bh - 0.5, h))
        .collect();
    let xs = (0..size)
        .map(|i| kernels::sample_tap(roi.x1 + (i as f64 + 0.5) * bw - 0.5, w))
        .collect();
    (ys, xs)
}
