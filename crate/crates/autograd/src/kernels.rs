//! Dense numeric kernels shared by graph ops and by image code that runs
//! outside a graph (resizing, pooling).

/// `C = op(A) · op(B) + beta · C` for row-major storage.
///
/// `A` is `m×k` (or `k×m` stored when `a_t`), `B` is `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output side of a convolution along one axis.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `[c, h, w]` plane stack into `[c·k·k, oh·ow]` columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let oh = conv_out(h, k, stride, pad);
    let ow = conv_out(w, k, stride, pad);
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// One interpolation tap along an axis: `(lo, hi, frac)` with value
/// `(1 - frac)·v[lo] + frac·v[hi]`.
pub type Tap = (usize, usize, f64);

/// Half-pixel-centre bilinear taps mapping `in_len` samples to `out_len`.
///
/// Source coordinates are clamped to the valid range, so every output is a
/// convex combination of inputs. Equal lengths give the identity.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    assert!(in_len > 0 && out_len > 0);
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of a single `h×w` plane to `oh×ow`.
pub fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; oh * ow];
    resize_plane_into(src, w, &ty, &tx, &mut out);
    out
}

pub(crate) fn resize_plane_into(src: &[f64], w: usize, ty: &[Tap], tx: &[Tap], out: &mut [f64]) {
    let ow = tx.len();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let top = (1.0 - fx) * r0[x0] + fx * r0[x1];
            let bot = (1.0 - fx) * r1[x0] + fx * r1[x1];
            out[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
        }
    }
}

pub(crate) fn resize_plane_backward(
    grad_out: &[f64],
    w: usize,
    ty: &[Tap],
    tx: &[Tap],
    grad_in: &mut [f64],
) {
    let ow = tx.len();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let g = grad_out[oy * ow + ox];
            if g == 0.0 {
                continue;
            }
            grad_in[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            grad_in[y0 * w + x1] += g * (1.0 - fy) * fx;
            grad_in[y1 * w + x0] += g * fy * (1.0 - fx);
            grad_in[y1 * w + x1] += g * fy * fx;
        }
    }
}

/// Bilinear sample weights at a continuous pixel-centre coordinate.
/// Returns `(lo, hi, frac)` clamped to the valid range.
pub fn sample_tap(coord: f64, len: usize) -> Tap {
    let c = coord.clamp(0.0, (len - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, c - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, h, w, k, s, p) = (2, 5, 4, 3, 2, 1);
        let oh = conv_out(h, k, s, p);
        let ow = conv_out(w, k, s, p);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * oh * ow).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, s, p, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, s, p, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let src: Vec<f64> = (0..12).map(|i| i as f64 * 1.5).collect();
        assert_eq!(resize_plane(&src, 3, 4, 3, 4), src);
    }

    #[test]
    fn resize_two_to_four_closed_form() {
        let out = resize_plane(&[0.0, 255.0, 0.0, 255.0], 2, 2, 4, 4);
        let row = [0.0, 63.75, 191.25, 255.0];
        for r in 0..4 {
            for c in 0..4 {
                assert!((out[r * 4 + c] - row[c]).abs() < 1e-12);
            }
        }
    }
}
