//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together with
//! its forward value. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar with respect to every node that needs one.
//! Parameters enter the tape through [`Graph::param`] (trainable) or
//! [`Graph::frozen`] (read as constants); only trainable leaves ever receive
//! gradients, which is how stop-gradient paths are expressed.

use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::real::{gemm, Real};
use crate::tensor::{numel, Tensor};
use crate::{NnError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: T },
    AddScalar { a: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Square { a: Var },
    Minimum { a: Var, b: Var },
    LayerNorm { a: Var, inv_std: Vec<T> },
    Softmax { a: Var },
    SumCols { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    MeanTokens { a: Var, tokens: usize },
    ConcatCols { a: Var, b: Var },
    SliceCols { a: Var, start: usize },
    Rows { sources: Vec<Var>, index: Vec<(u32, u32)> },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize, part: usize, parts: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    SmoothL1 { a: Var, beta: T },
    SoftmaxXent { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    Reshape { a: Var },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamLeaf {
    pub var: Var,
    pub store: u64,
    pub id: ParamId,
}

/// Recorded computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<ParamLeaf>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn param_leaves(&self) -> &[ParamLeaf] {
        &self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // inputs that cannot carry gradient make the op a constant
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf that is not tied to any parameter store.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter: gradients flow back into `store`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node { value: store.shared(id), op: Op::Leaf, requires_grad: true });
        let var = Var(self.nodes.len() - 1);
        self.params.push(ParamLeaf { var, store: store.key(), id });
        var
    }

    /// Parameter read as a constant.
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node { value: store.shared(id), op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    /// `op(a) · op(b)` for 2-D operands; `a` is `m×k` (`k×m` when `ta`).
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err(format!("matmul needs 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err(format!("matmul inner dims {sa:?} x {sb:?}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, out.data_mut(), T::zero());
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]` (`[batch, n, k]` when `tb`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err(format!("batch_matmul operands {sa:?} and {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(shape_err(format!("batch_matmul inner dims {sa:?} x {sb:?}")));
        }
        let mut out = Tensor::zeros(&[batch, m, n]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (i, o) in out.data_mut().chunks_exact_mut(m * n).enumerate() {
                gemm(m, k, n, &av[i * m * k..], false, &bv[i * k * n..], tb, o, T::zero());
            }
        }
        Ok(self.push(out, Op::BatchMatMul { a, b, tb, batch, m, k, n }, &[a, b]))
    }

    fn broadcast_check(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 0 || na % nb != 0 {
            return Err(shape_err(format!(
                "{what}: cannot broadcast {:?} onto {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        Ok(nb)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let nb = self.broadcast_check(a, b, what)?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let data = av.data().chunks_exact(nb).flat_map(|ch| ch.iter().zip(bv).map(|(&x, &y)| f(x, y))).collect();
        Tensor::new(av.shape(), data)
    }

    /// `a + b`, where `b` is broadcast over leading groups of `a` (suffix broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale { a, s })
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, T::tanh, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, T::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, T::ln, Op::Log { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    /// Elementwise minimum of equal-shaped operands.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("minimum {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.binary(a, b, "minimum", |x, y| if y < x { y } else { x })?;
        Ok(self.push(out, Op::Minimum { a, b }, &[a, b]))
    }

    /// Parameter-free layer norm over the last axis.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let x = self.value(a);
        let cols = x.cols();
        if cols < 2 {
            return Err(shape_err("layer_norm needs at least 2 features".into()));
        }
        let mut out = Tensor::zeros(x.shape());
        let inv_std = kernels::layer_norm_rows(x.data(), cols, eps, out.data_mut());
        Ok(self.push(out, Op::LayerNorm { a, inv_std }, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.shape());
        kernels::softmax_rows(x.data(), x.cols(), out.data_mut());
        self.push(out, Op::Softmax { a }, &[a])
    }

    /// Sum over the last axis, keeping it as size 1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let data = x.data().chunks_exact(cols).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::new(&shape, data).expect("sum_cols shape");
        self.push(out, Op::SumCols { a }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll { a }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / T::lit(x.numel() as f64));
        self.push(out, Op::MeanAll { a }, &[a])
    }

    /// Mean over groups of `tokens` consecutive rows: `[B·N, D] → [B, D]`.
    pub fn mean_tokens(&mut self, a: Var, tokens: usize) -> Result<Var> {
        let x = self.value(a);
        let d = x.cols();
        if tokens == 0 || !x.rows().is_multiple_of(tokens) {
            return Err(shape_err(format!("mean_tokens: {} rows not divisible by {tokens}", x.rows())));
        }
        let b = x.rows() / tokens;
        let inv = T::one() / T::lit(tokens as f64);
        let mut out = Tensor::zeros(&[b, d]);
        for (i, o) in out.data_mut().chunks_exact_mut(d).enumerate() {
            for t in 0..tokens {
                for (o, &v) in o.iter_mut().zip(x.row(i * tokens + t)) {
                    *o += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(out, Op::MeanTokens { a, tokens }, &[a]))
    }

    /// `[R, p] ‖ [R, q] → [R, p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(shape_err(format!("concat_cols rows {:?} vs {:?}", x.shape(), y.shape())));
        }
        let (p, q) = (x.cols(), y.cols());
        let mut data = Vec::with_capacity(x.numel() + y.numel());
        for r in 0..x.rows() {
            data.extend_from_slice(x.row(r));
            data.extend_from_slice(y.row(r));
        }
        let out = Tensor::new(&[x.rows(), p + q], data)?;
        Ok(self.push(out, Op::ConcatCols { a, b }, &[a, b]))
    }

    /// Columns `start..end` of a `[R, C]` tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(shape_err(format!("slice_cols {start}..{end} of {:?}", x.shape())));
        }
        let data = (0..x.rows()).flat_map(|r| x.row(r)[start..end].iter().copied()).collect();
        let out = Tensor::new(&[x.rows(), end - start], data)?;
        Ok(self.push(out, Op::SliceCols { a, start }, &[a]))
    }

    /// Assembles rows picked from several sources of equal width.
    ///
    /// Output row `i` is row `index[i].1` of `sources[index[i].0]`. Covers
    /// gathers, token placement, and mask-token substitution.
    pub fn rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        let width = self.value(sources[0]).cols();
        for &s in sources {
            if self.value(s).cols() != width {
                return Err(shape_err("rows: sources differ in width".into()));
            }
        }
        let mut data = Vec::with_capacity(index.len() * width);
        for &(s, r) in index {
            let src = self.value(*sources.get(s).ok_or_else(|| shape_err(format!("rows: no source {s}")))?);
            if r >= src.rows() {
                return Err(shape_err(format!("rows: row {r} out of range {}", src.rows())));
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor::new(&[index.len(), width], data)?;
        let index = index.iter().map(|&(s, r)| (s as u32, r as u32)).collect();
        Ok(self.push(out, Op::Rows { sources: sources.to_vec(), index }, sources))
    }

    /// `[B·N, parts·H·dh]` → part `part` as `[B·H, N, dh]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize, part: usize, parts: usize) -> Result<Var> {
        let x = self.value(a);
        let width = x.cols();
        if x.rows() != batch * seq || !width.is_multiple_of(parts * heads) || part >= parts {
            return Err(shape_err(format!("split_heads on {:?} (batch {batch}, seq {seq}, heads {heads})", x.shape())));
        }
        let d = width / parts;
        let hd = d / heads;
        let mut out = Tensor::zeros(&[batch * heads, seq, hd]);
        let o = out.data_mut();
        for b in 0..batch {
            for n in 0..seq {
                let row = x.row(b * seq + n);
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + n) * hd;
                    o[dst..dst + hd].copy_from_slice(&row[part * d + h * hd..part * d + (h + 1) * hd]);
                }
            }
        }
        Ok(self.push(out, Op::SplitHeads { a, batch, seq, heads, part, parts }, &[a]))
    }

    /// `[B·H, N, dh]` → `[B·N, H·dh]`.
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 3 || x.shape()[0] != batch * heads || x.shape()[1] != seq {
            return Err(shape_err(format!("merge_heads on {:?}", x.shape())));
        }
        let hd = x.shape()[2];
        let mut out = Tensor::zeros(&[batch * seq, heads * hd]);
        let (xd, o) = (x.data(), out.data_mut());
        for b in 0..batch {
            for h in 0..heads {
                for n in 0..seq {
                    let src = ((b * heads + h) * seq + n) * hd;
                    let dst = (b * seq + n) * heads * hd + h * hd;
                    o[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
                }
            }
        }
        Ok(self.push(out, Op::MergeHeads { a, batch, seq, heads }, &[a]))
    }

    /// Valid cross-correlation: `x [B,C,H,W]`, `w [O,C,k,k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(shape_err(format!("conv2d input {sx:?} kernel {sw:?}")));
        }
        if sx[2] < sw[2] || sx[3] < sw[3] || self.value(b).numel() != sw[0] {
            return Err(shape_err(format!("conv2d input {sx:?} kernel {sw:?} bias {:?}", self.shape(b))));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            in_h: sx[2],
            in_w: sx[3],
            out_ch: sw[0],
            kernel: sw[2],
            stride,
        };
        let mut out = Tensor::zeros(&[geom.batch, geom.out_ch, geom.out_h(), geom.out_w()]);
        kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data(), out.data_mut());
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Elementwise Huber-style smooth L1 with knee `beta`.
    pub fn smooth_l1(&mut self, a: Var, beta: T) -> Var {
        let half = T::lit(0.5);
        self.unary(
            a,
            move |d| {
                let ad = d.abs();
                if ad <= beta {
                    half * d * d / beta
                } else {
                    ad - half * beta
                }
            },
            Op::SmoothL1 { a, beta },
        )
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    /// Rows are max-shifted before exponentiation.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let c = x.cols();
        if x.rows() != targets.len() || targets.iter().any(|&t| t >= c) {
            return Err(shape_err(format!("cross entropy: logits {:?}, {} targets", x.shape(), targets.len())));
        }
        let mut probs = vec![T::zero(); x.numel()];
        kernels::softmax_rows(x.data(), c, &mut probs);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / T::lit(targets.len() as f64));
        Ok(self.push(out, Op::SoftmaxXent { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if numel(shape) != x.numel() {
            return Err(shape_err(format!("reshape {:?} to {shape:?}", x.shape())));
        }
        let out = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.backprop(&node.op, &node.value, &dy, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)))
    }

    fn backprop(&self, op: &Op<T>, y: &Tensor<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let dyd = dy.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, n) = (y.shape()[0], y.shape()[1]);
                let k = if ta { av.shape()[0] } else { av.shape()[1] };
                if self.wants(a) {
                    let ga = self.acc(grads, a).data_mut();
                    if ta {
                        gemm(k, n, m, bv.data(), tb, dyd, true, ga, T::one());
                    } else {
                        gemm(m, n, k, dyd, false, bv.data(), !tb, ga, T::one());
                    }
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b).data_mut();
                    if tb {
                        gemm(n, m, k, dyd, true, av.data(), ta, gb, T::one());
                    } else {
                        gemm(k, m, n, av.data(), !ta, dyd, false, gb, T::one());
                    }
                }
            }
            Op::BatchMatMul { a, b, tb, batch, m, k, n } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let ga = self.acc(grads, a).data_mut();
                    for i in 0..batch {
                        gemm(m, n, k, &dyd[i * m * n..], false, &bv[i * k * n..], !tb, &mut ga[i * m * k..], T::one());
                    }
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b).data_mut();
                    for i in 0..batch {
                        let g = &mut gb[i * k * n..];
                        if tb {
                            gemm(n, m, k, &dyd[i * m * n..], true, &av[i * m * k..], false, g, T::one());
                        } else {
                            gemm(k, m, n, &av[i * m * k..], true, &dyd[i * m * n..], false, g, T::one());
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if self.wants(a) {
                    self.acc(grads, a).add_assign(dy);
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b).data_mut();
                    let nb = gb.len();
                    for ch in dyd.chunks_exact(nb) {
                        for (g, &d) in gb.iter_mut().zip(ch) {
                            *g += sign * d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let nb = bv.len();
                if self.wants(a) {
                    let ga = self.acc(grads, a).data_mut();
                    for (gch, dch) in ga.chunks_exact_mut(nb).zip(dyd.chunks_exact(nb)) {
                        for ((g, &d), &bb) in gch.iter_mut().zip(dch).zip(bv) {
                            *g += d * bb;
                        }
                    }
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b).data_mut();
                    for (ach, dch) in av.chunks_exact(nb).zip(dyd.chunks_exact(nb)) {
                        for ((g, &d), &aa) in gb.iter_mut().zip(dch).zip(ach) {
                            *g += d * aa;
                        }
                    }
                }
            }
            Op::Scale { a, s } => self.elementwise(grads, a, dyd, |_, d| d * s),
            Op::AddScalar { a } | Op::Reshape { a } => self.elementwise(grads, a, dyd, |_, d| d),
            Op::Relu { a } => self.elementwise(grads, a, dyd, |x, d| if x > T::zero() { d } else { T::zero() }),
            Op::Gelu { a } => self.elementwise(grads, a, dyd, |x, d| d * kernels::gelu_grad(x)),
            Op::Tanh { a } => self.elementwise_y(grads, a, y, dyd, |yv, d| d * (T::one() - yv * yv)),
            Op::Exp { a } => self.elementwise_y(grads, a, y, dyd, |yv, d| d * yv),
            Op::Log { a } => self.elementwise(grads, a, dyd, |x, d| d / x),
            Op::Square { a } => self.elementwise(grads, a, dyd, |x, d| T::lit(2.0) * x * d),
            Op::SmoothL1 { a, beta } => self.elementwise(grads, a, dyd, |x, d| {
                if x.abs() <= beta {
                    d * x / beta
                } else {
                    d * x.signum()
                }
            }),
            Op::Minimum { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    let ga = self.acc(grads, a).data_mut();
                    for i in 0..ga.len() {
                        if !(bv[i] < av[i]) {
                            ga[i] += dyd[i];
                        }
                    }
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b).data_mut();
                    for i in 0..gb.len() {
                        if bv[i] < av[i] {
                            gb[i] += dyd[i];
                        }
                    }
                }
            }
            Op::LayerNorm { a, ref inv_std } => {
                let cols = y.cols();
                let ga = self.acc(grads, a).data_mut();
                kernels::layer_norm_backward(y.data(), inv_std, dyd, cols, ga);
            }
            Op::Softmax { a } => {
                let cols = y.cols();
                let ga = self.acc(grads, a).data_mut();
                kernels::softmax_backward(y.data(), dyd, cols, ga);
            }
            Op::SumCols { a } => {
                let cols = self.value(a).cols();
                let ga = self.acc(grads, a).data_mut();
                for (g, &d) in ga.chunks_exact_mut(cols).zip(dyd) {
                    g.iter_mut().for_each(|v| *v += d);
                }
            }
            Op::SumAll { a } => {
                let d = dyd[0];
                self.acc(grads, a).data_mut().iter_mut().for_each(|v| *v += d);
            }
            Op::MeanAll { a } => {
                let ga = self.acc(grads, a).data_mut();
                let d = dyd[0] / T::lit(ga.len() as f64);
                ga.iter_mut().for_each(|v| *v += d);
            }
            Op::MeanTokens { a, tokens } => {
                let d = y.cols();
                let inv = T::one() / T::lit(tokens as f64);
                let ga = self.acc(grads, a).data_mut();
                for (r, g) in ga.chunks_exact_mut(d).enumerate() {
                    let src = &dyd[(r / tokens) * d..(r / tokens + 1) * d];
                    for (g, &s) in g.iter_mut().zip(src) {
                        *g += s * inv;
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let p = self.value(a).cols();
                let width = y.cols();
                if self.wants(a) {
                    let ga = self.acc(grads, a).data_mut();
                    for (g, d) in ga.chunks_exact_mut(p).zip(dyd.chunks_exact(width)) {
                        for (g, &d) in g.iter_mut().zip(&d[..p]) {
                            *g += d;
                        }
                    }
                }
                if self.wants(b) {
                    let gb = self.acc(grads, b).data_mut();
                    for (g, d) in gb.chunks_exact_mut(width - p).zip(dyd.chunks_exact(width)) {
                        for (g, &d) in g.iter_mut().zip(&d[p..]) {
                            *g += d;
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let cols = self.value(a).cols();
                let w = y.cols();
                let ga = self.acc(grads, a).data_mut();
                for (g, d) in ga.chunks_exact_mut(cols).zip(dyd.chunks_exact(w)) {
                    for (g, &d) in g[start..start + w].iter_mut().zip(d) {
                        *g += d;
                    }
                }
            }
            Op::Rows { ref sources, ref index } => {
                let w = y.cols();
                for (s, &src) in sources.iter().enumerate() {
                    if !self.wants(src) {
                        continue;
                    }
                    let g = self.acc(grads, src).data_mut();
                    for (i, &(si, r)) in index.iter().enumerate() {
                        if si as usize == s {
                            let r = r as usize;
                            for (g, &d) in g[r * w..(r + 1) * w].iter_mut().zip(&dyd[i * w..(i + 1) * w]) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { a, batch, seq, heads, part, parts } => {
                let hd = y.shape()[2];
                let d = heads * hd;
                let width = parts * d;
                let ga = self.acc(grads, a).data_mut();
                for b in 0..batch {
                    for n in 0..seq {
                        for h in 0..heads {
                            let src = ((b * heads + h) * seq + n) * hd;
                            let dst = (b * seq + n) * width + part * d + h * hd;
                            for (g, &v) in ga[dst..dst + hd].iter_mut().zip(&dyd[src..src + hd]) {
                                *g += v;
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, batch, seq, heads } => {
                let hd = y.cols() / heads;
                let ga = self.acc(grads, a).data_mut();
                for b in 0..batch {
                    for h in 0..heads {
                        for n in 0..seq {
                            let dst = ((b * heads + h) * seq + n) * hd;
                            let src = (b * seq + n) * heads * hd + h * hd;
                            for (g, &v) in ga[dst..dst + hd].iter_mut().zip(&dyd[src..src + hd]) {
                                *g += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let mut gw = self.wants(w).then(|| Tensor::zeros(self.shape(w)));
                let mut gb = self.wants(b).then(|| Tensor::zeros(self.shape(b)));
                let mut gx = self.wants(x).then(|| Tensor::zeros(self.shape(x)));
                kernels::conv2d_backward(
                    &geom,
                    self.value(x).data(),
                    self.value(w).data(),
                    dyd,
                    gw.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                    gx.as_mut().map(|t| t.data_mut()),
                );
                for (v, g) in [(w, gw), (b, gb), (x, gx)] {
                    if let Some(g) = g {
                        self.acc(grads, v).add_assign(&g);
                    }
                }
            }
            Op::SoftmaxXent { logits, ref targets, ref probs } => {
                let c = self.value(logits).cols();
                let scale = dyd[0] / T::lit(targets.len() as f64);
                let g = self.acc(grads, logits).data_mut();
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        g[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }

    /// Accumulates `f(x, index, dy)` into the gradient of a unary op's input.
    fn elementwise(&self, grads: &mut [Option<Tensor<T>>], a: Var, dy: &[T], f: impl Fn(T, T) -> T) {
        let x = Arc::clone(&self.nodes[a.0].value);
        let g = self.acc(grads, a).data_mut();
        for ((g, &xv), &d) in g.iter_mut().zip(x.data()).zip(dy) {
            *g += f(xv, d);
        }
    }

    fn elementwise_y(&self, grads: &mut [Option<Tensor<T>>], a: Var, y: &Tensor<T>, dy: &[T], f: impl Fn(T, T) -> T) {
        let g = self.acc(grads, a).data_mut();
        for ((g, &yv), &d) in g.iter_mut().zip(y.data()).zip(dy) {
            *g += f(yv, d);
        }
    }
}
