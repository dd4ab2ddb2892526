//! Raw loops behind the graph ops. Everything works on row-major slices.

use crate::real::{gemm, Real};

pub(crate) const GELU_COEF: f64 = 0.044715;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_COEF) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::lit(GELU_COEF) * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0 * GELU_COEF) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

/// Parameter-free layer norm of each row; returns `1/√(var+eps)` per row.
pub(crate) fn layer_norm_rows<T: Real>(x: &[T], cols: usize, eps: T, out: &mut [T]) -> Vec<T> {
    let n = T::lit(cols as f64);
    x.chunks_exact(cols)
        .zip(out.chunks_exact_mut(cols))
        .map(|(row, o)| {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in o.iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv
        })
        .collect()
}

pub(crate) fn layer_norm_backward<T: Real>(y: &[T], inv_std: &[T], dy: &[T], cols: usize, dx: &mut [T]) {
    let n = T::lit(cols as f64);
    for (r, ((yr, dyr), dxr)) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
        .enumerate()
    {
        let mean_dy = dyr.iter().copied().sum::<T>() / n;
        let mean_dyy = dyr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &g), &yv) in dxr.iter_mut().zip(dyr).zip(yr) {
            *d += inv_std[r] * (g - mean_dy - yv * mean_dyy);
        }
    }
}

pub(crate) fn softmax_rows<T: Real>(x: &[T], cols: usize, out: &mut [T]) {
    for (row, o) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        let inv = T::one() / total;
        o.iter_mut().for_each(|v| *v *= inv);
    }
}

pub(crate) fn softmax_backward<T: Real>(y: &[T], dy: &[T], cols: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y.chunks_exact(cols).zip(dy.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols)) {
        let dot = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<T>();
        for ((d, &g), &yv) in dxr.iter_mut().zip(dyr).zip(yr) {
            *d += yv * (g - dot);
        }
    }
}

/// Geometry of a valid (unpadded) 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }
    fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
    fn image_len(&self) -> usize {
        self.in_ch * self.in_h * self.in_w
    }
}

fn im2col<T: Real>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let (oh, ow, k, s) = (g.out_h(), g.out_w(), g.kernel, g.stride);
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..k {
            for j in 0..k {
                let row = &mut col[((c * k + i) * k + j) * p..][..p];
                for oy in 0..oh {
                    let src = &plane[(oy * s + i) * g.in_w + j..];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        dst.copy_from_slice(&src[..ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * s];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let (oh, ow, k, s) = (g.out_h(), g.out_w(), g.kernel, g.stride);
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..k {
            for j in 0..k {
                let row = &col[((c * k + i) * k + j) * p..][..p];
                for oy in 0..oh {
                    let base = (oy * s + i) * g.in_w + j;
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        plane[base + ox * s] += v;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let (ck, p) = (g.patch_len(), g.positions());
    let mut col = vec![T::zero(); ck * p];
    for n in 0..g.batch {
        im2col(g, &x[n * g.image_len()..(n + 1) * g.image_len()], &mut col);
        let o = &mut out[n * g.out_ch * p..(n + 1) * g.out_ch * p];
        for (oc, row) in o.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b[oc]);
        }
        gemm(g.out_ch, ck, p, w, false, &col, false, o, T::one());
    }
}

/// Accumulates weight, bias and (optionally) input gradients.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let (ck, p) = (g.patch_len(), g.positions());
    let mut col = vec![T::zero(); ck * p];
    if let Some(db) = db {
        for n in 0..g.batch {
            let d = &dy[n * g.out_ch * p..(n + 1) * g.out_ch * p];
            for (oc, row) in d.chunks_exact(p).enumerate() {
                db[oc] += row.iter().copied().sum::<T>();
            }
        }
    }
    if let Some(dw) = dw {
        for n in 0..g.batch {
            im2col(g, &x[n * g.image_len()..(n + 1) * g.image_len()], &mut col);
            let d = &dy[n * g.out_ch * p..(n + 1) * g.out_ch * p];
            gemm(g.out_ch, p, ck, d, false, &col, true, dw, T::one());
        }
    }
    if let Some(dx) = dx {
        for n in 0..g.batch {
            let d = &dy[n * g.out_ch * p..(n + 1) * g.out_ch * p];
            gemm(ck, g.out_ch, p, w, true, d, false, &mut col, T::zero());
            col2im_add(g, &col, &mut dx[n * g.image_len()..(n + 1) * g.image_len()]);
        }
    }
}
