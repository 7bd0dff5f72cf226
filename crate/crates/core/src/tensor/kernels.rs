//! Forward and adjoint kernels on raw tensors.
//!
//! These are graph-free; [`super::Graph`] records which kernel produced a
//! node and calls the matching adjoint during backward. Work is split over
//! batch items with rayon and per-item partial weight gradients are reduced
//! in item order, so results do not depend on thread scheduling.

use rayon::prelude::*;

use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Row-major `c = a @ b` (or `c += a @ b`), where `a` is logically `m x k`
/// and `b` is `k x n`. `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every access by the slice lengths and
    // `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn conv_geometry<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad_same: bool,
) -> Result<ConvGeom> {
    let [_, cin, h, w] = input.shape().0;
    let [cout, wcin, kh, kw] = weight.shape().0;
    if input.shape().is_empty() || weight.shape().is_empty() {
        return Err(Error::shape(format!(
            "conv2d on empty tensor: input {}, weight {}",
            input.shape(),
            weight.shape()
        )));
    }
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::shape(format!(
            "conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}"
        )));
    }
    if wcin != cin {
        return Err(Error::shape(format!(
            "conv2d weight {} expects {wcin} input channels, input {} has {cin}",
            weight.shape(),
            input.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != Shape::new(1, cout, 1, 1) {
            return Err(Error::shape(format!(
                "conv2d bias must be (1, {cout}, 1, 1), got {}",
                b.shape()
            )));
        }
    }
    let pad = if pad_same { kh / 2 } else { 0 };
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(format!(
            "conv2d input {} smaller than kernel",
            input.shape()
        )));
    }
    Ok(ConvGeom {
        cin,
        h,
        w,
        k: kh,
        pad,
        ho: h + 2 * pad - kh + 1,
        wo: w + 2 * pad - kw + 1,
    })
}

/// Valid output-column range `[lo, hi)` for kernel column offset `kx`.
fn valid_span(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(wo);
    (lo, hi.max(lo))
}

fn im2col<T: Element>(item: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    for ci in 0..g.cin {
        let plane = &item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(kx, g.pad, g.w, g.wo);
                for oy in 0..g.ho {
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if hi > lo {
                        let ix0 = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, item: &mut [T]) {
    let ncols = g.cols();
    item.fill(T::zero());
    for ci in 0..g.cin {
        let plane = &mut item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_span(kx, g.pad, g.w, g.wo);
                if hi <= lo {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let dst = &mut plane[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
                    let ix0 = lo + kx - g.pad;
                    for (d, &s) in dst[ix0..ix0 + (hi - lo)]
                        .iter_mut()
                        .zip(&src[oy * g.wo + lo..oy * g.wo + hi])
                    {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation with stride 1; `pad_same` zero-pads so that the
/// spatial size is preserved.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad_same: bool,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, pad_same)?;
    let n = input.shape().n();
    let cout = weight.shape().0[0];
    let out_shape = Shape::new(n, cout, g.ho, g.wo);
    let mut out = vec![T::zero(); out_shape.numel()];
    let in_item = input.shape().item();
    let identity_cols = g.k == 1;

    out.par_chunks_mut(cout * g.cols())
        .zip(input.data().par_chunks(in_item))
        .for_each_init(
            || Vec::new(),
            |cols, (dst, src)| {
                let cols_ref: &[T] = if identity_cols {
                    src
                } else {
                    cols.resize(g.rows() * g.cols(), T::zero());
                    im2col(src, &g, cols);
                    cols
                };
                matmul(
                    cout,
                    g.rows(),
                    g.cols(),
                    weight.data(),
                    false,
                    cols_ref,
                    false,
                    dst,
                    false,
                );
                if let Some(b) = bias {
                    for (co, chunk) in dst.chunks_mut(g.cols()).enumerate() {
                        let bv = b.data()[co];
                        chunk.iter_mut().for_each(|v| *v = *v + bv);
                    }
                }
            },
        );
    Tensor::from_vec(out_shape, out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    pad_same: bool,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, weight, None, pad_same)?;
    let cout = weight.shape().0[0];
    let in_item = input.shape().item();
    let out_item = cout * g.cols();
    let identity_cols = g.k == 1;
    let rows = g.rows();

    let per_item: Vec<(Option<Vec<T>>, Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_item)
        .zip(grad_out.data().par_chunks(out_item))
        .map(|(src, dout)| {
            let mut cols_buf = Vec::new();
            let cols: &[T] = if identity_cols {
                src
            } else {
                cols_buf.resize(rows * g.cols(), T::zero());
                im2col(src, &g, &mut cols_buf);
                &cols_buf
            };
            let mut dw = vec![T::zero(); cout * rows];
            matmul(cout, g.cols(), rows, dout, false, cols, true, &mut dw, false);
            let db: Vec<T> = dout.chunks(g.cols()).map(|c| c.iter().copied().sum()).collect();
            let din = need_input.then(|| {
                let mut dcols = vec![T::zero(); rows * g.cols()];
                matmul(rows, cout, g.cols(), weight.data(), true, dout, false, &mut dcols, false);
                if identity_cols {
                    dcols
                } else {
                    let mut din = vec![T::zero(); in_item];
                    col2im(&dcols, &g, &mut din);
                    din
                }
            });
            (din, dw, db)
        })
        .collect();

    let mut dw = vec![T::zero(); cout * rows];
    let mut db = vec![T::zero(); cout];
    let mut din = need_input.then(|| Vec::with_capacity(input.numel()));
    for (item_din, item_dw, item_db) in per_item {
        dw.iter_mut().zip(&item_dw).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&item_db).for_each(|(a, &b)| *a = *a + b);
        if let (Some(all), Some(part)) = (din.as_mut(), item_din) {
            all.extend_from_slice(&part);
        }
    }
    Ok(ConvGrads {
        input: din
            .map(|d| Tensor::from_vec(input.shape(), d))
            .transpose()?,
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: Tensor::from_vec(Shape::new(1, cout, 1, 1), db)?,
    })
}

fn conv_transpose_check<T: Element>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<usize> {
    let [wcin, cout, kh, kw] = weight.shape().0;
    if (kh, kw) != (2, 2) {
        return Err(Error::shape(format!(
            "transposed conv needs a 2x2 kernel, got {}",
            weight.shape()
        )));
    }
    if wcin != input.shape().c() {
        return Err(Error::shape(format!(
            "transposed conv weight {} expects {wcin} input channels, input {} has {}",
            weight.shape(),
            input.shape(),
            input.shape().c()
        )));
    }
    if input.shape().is_empty() || weight.shape().is_empty() {
        return Err(Error::shape("transposed conv on empty tensor"));
    }
    Ok(cout)
}

/// Stride-2 2x2 transposed convolution; weight is `(Cin, Cout, 2, 2)`.
pub fn conv_transpose2x2<T: Element>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let cout = conv_transpose_check(input, weight)?;
    let [n, cin, h, w] = input.shape().0;
    let out_shape = Shape::new(n, cout, 2 * h, 2 * w);
    let hw = h * w;
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_shape.item())
        .zip(input.data().par_chunks(cin * hw))
        .for_each(|(dst, src)| {
            let mut r = vec![T::zero(); cout * 4 * hw];
            matmul(cout * 4, cin, hw, weight.data(), true, src, false, &mut r, false);
            for co in 0..cout {
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let row = &r[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    let plane = &mut dst[co * 4 * hw..(co + 1) * 4 * hw];
                    for y in 0..h {
                        let out_row = &mut plane[(2 * y + dy) * 2 * w..(2 * y + dy + 1) * 2 * w];
                        for x in 0..w {
                            out_row[2 * x + dx] = row[y * w + x];
                        }
                    }
                }
            }
        });
    Tensor::from_vec(out_shape, out)
}

pub fn conv_transpose2x2_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let cout = conv_transpose_check(input, weight)?;
    let [_, cin, h, w] = input.shape().0;
    let hw = h * w;
    let per_item: Vec<(Option<Vec<T>>, Vec<T>)> = input
        .data()
        .par_chunks(cin * hw)
        .zip(grad_out.data().par_chunks(cout * 4 * hw))
        .map(|(src, dout)| {
            let mut gathered = vec![T::zero(); cout * 4 * hw];
            for co in 0..cout {
                let plane = &dout[co * 4 * hw..(co + 1) * 4 * hw];
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let row = &mut gathered[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for y in 0..h {
                        let g_row = &plane[(2 * y + dy) * 2 * w..(2 * y + dy + 1) * 2 * w];
                        for x in 0..w {
                            row[y * w + x] = g_row[2 * x + dx];
                        }
                    }
                }
            }
            let mut dw = vec![T::zero(); cin * cout * 4];
            matmul(cin, hw, cout * 4, src, false, &gathered, true, &mut dw, false);
            let din = need_input.then(|| {
                let mut din = vec![T::zero(); cin * hw];
                matmul(cin, cout * 4, hw, weight.data(), false, &gathered, false, &mut din, false);
                din
            });
            (din, dw)
        })
        .collect();
    let mut dw = vec![T::zero(); weight.numel()];
    let mut din = need_input.then(|| Vec::with_capacity(input.numel()));
    for (item_din, item_dw) in per_item {
        dw.iter_mut().zip(&item_dw).for_each(|(a, &b)| *a = *a + b);
        if let (Some(all), Some(part)) = (din.as_mut(), item_din) {
            all.extend_from_slice(&part);
        }
    }
    Ok((
        din.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        Tensor::from_vec(weight.shape(), dw)?,
    ))
}

/// Non-overlapping 2x2 max pooling. Returns the pooled tensor and, per output
/// cell, the flat input index of the selected element (first maximum in
/// row-major window order).
pub fn maxpool2x2<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let [n, c, h, w] = input.shape().0;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2x2 needs even height and width, got {}",
            input.shape()
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let out_shape = Shape::new(n, c, ho, wo);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = data[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

pub fn maxpool2x2_backward<T: Element>(
    input_shape: Shape,
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut din = Tensor::zeros(input_shape);
    let d = din.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx as usize] = d[idx as usize] + g;
    }
    din
}

pub fn relu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| {
        // split on sign so exp never overflows
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "add needs identical shapes, got {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [na, ca, ha, wa] = a.shape().0;
    let [nb, cb, hb, wb] = b.shape().0;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(format!(
            "concat_channels needs matching batch and spatial dims, got {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let shape = Shape::new(na, ca + cb, ha, wa);
    let mut data = Vec::with_capacity(shape.numel());
    let (ia, ib) = (a.shape().item(), b.shape().item());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * ia..(n + 1) * ia]);
        data.extend_from_slice(&b.data()[n * ib..(n + 1) * ib]);
    }
    Tensor::from_vec(shape, data)
}

/// Adjoint of [`concat_channels`]: splits `grad` after `ca` channels.
pub fn split_channels<T: Element>(grad: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = grad.shape().0;
    let cb = c - ca;
    let (ia, ib) = (ca * h * w, cb * h * w);
    let mut da = Vec::with_capacity(n * ia);
    let mut db = Vec::with_capacity(n * ib);
    for item in grad.data().chunks(ia + ib) {
        da.extend_from_slice(&item[..ia]);
        db.extend_from_slice(&item[ia..]);
    }
    Ok((
        Tensor::from_vec(Shape::new(n, ca, h, w), da)?,
        Tensor::from_vec(Shape::new(n, cb, h, w), db)?,
    ))
}

/// Sums `(sum t*p, sum t^2, sum p^2)` over every element, accumulated in f64.
pub fn jaccard_terms<T: Element>(target: &[T], prob: &[T]) -> (f64, f64, f64) {
    target
        .iter()
        .zip(prob)
        .fold((0.0, 0.0, 0.0), |(i, tt, pp), (&t, &p)| {
            let (t, p) = (t.to_f64_lossy(), p.to_f64_lossy());
            (i + t * p, tt + t * t, pp + p * p)
        })
}

/// Soft Jaccard distance `1 - I / (T + P - I + eps)` and its gradient with
/// respect to `prob`. A denominator below `1e-7` yields loss 0 with zero
/// gradient (empty target matched by empty prediction).
pub fn jaccard_distance_with_grad<T: Element>(
    target: &[T],
    prob: &[T],
    eps: f64,
) -> (f64, Vec<T>) {
    let (inter, tt, pp) = jaccard_terms(target, prob);
    let raw = tt + pp - inter;
    if raw < crate::loss::EMPTY_DENOMINATOR {
        return (0.0, vec![T::zero(); prob.len()]);
    }
    let denom = raw + eps;
    let loss = 1.0 - inter / denom;
    let d2 = denom * denom;
    let grad = target
        .iter()
        .zip(prob)
        .map(|(&t, &p)| {
            let (t, p) = (t.to_f64_lossy(), p.to_f64_lossy());
            // d(I/D)/dp = (t*D - I*(2p - t)) / D^2
            T::from_f64(-(t * denom - inter * (2.0 * p - t)) / d2)
        })
        .collect();
    (loss, grad)
}
