//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in evaluation order. Values are
//! computed eagerly when an op is pushed; [`Graph::backward`] walks the tape
//! in reverse and returns the gradient of a scalar node with respect to every
//! node that requires one. Parameter leaves remember which [`ParamSet`]
//! they were bound from so gradients can be routed back with
//! [`ParamSet::accumulate`](crate::ParamSet::accumulate).

use crate::params::ParamSet;
use crate::{Error, Float, Result, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    out_channels: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn out_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

enum Op<T: Float> {
    Constant,
    Param { set: u64, index: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { input: Var, weight: Var, geom: ConvGeom, cols: Vec<T> },
    MeanInner(Var),
    Reshape(Var),
    Transpose(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    L2Normalize { x: Var, norms: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T: Float> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn gelu_parts<T: Float>(x: T) -> (T, T) {
    // tanh approximation: returns (value, derivative)
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64_lossy(0.044_715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let dinner = c * (T::one() + three * a * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (value, deriv)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: true }
    }

    /// A graph whose parameter leaves are treated as constants.
    pub fn inference() -> Self {
        Graph { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite values produced by graph op");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf that receives a gradient but is not tied to a parameter set.
    /// Used by gradient checks on raw inputs.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, Op::Constant, rg)
    }

    /// Binds parameter `index` of `set` as a leaf.
    pub fn param(&mut self, set: &ParamSet<T>, index: usize) -> Var {
        let value = set.value(index).clone();
        let rg = self.grad_enabled;
        self.push(value, Op::Param { set: set.id(), index }, rg)
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add");
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub");
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul");
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    fn check_trailing(&self, a: Var, b: Var, what: &str) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "{what}: {sb:?} is not a trailing shape of {sa:?}"
        );
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        self.check_trailing(a, b, "add_broadcast");
        let bv = self.value(b).data();
        let m = bv.len().max(1);
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bv[i % m]).collect();
        let v = Tensor::new(self.shape(a), data).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::AddBroadcast(a, b), rg)
    }

    /// `a * b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Var {
        self.check_trailing(a, b, "mul_broadcast");
        let bv = self.value(b).data();
        let m = bv.len().max(1);
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x * bv[i % m]).collect();
        let v = Tensor::new(self.shape(a), data).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MulBroadcast(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cf = T::from_f64_lossy(c);
        let v = self.value(a).map(|x| x * cf);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| gelu_parts(x).0);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    fn mm_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> (usize, usize, usize) {
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul: inner dimensions {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        (m, k, n)
    }

    /// `op(a) · op(b)` for rank-2 operands; `ta`/`tb` transpose the operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects rank-2 operands");
        let (m, k, n) = Self::mm_dims(sa, sb, ta, tb);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), ta, self.value(b).data(), tb, T::zero(), &mut out);
        let v = Tensor::new(&[m, n], out).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// Batched `op(a[i]) · op(b[i])` over the leading dimension of rank-3 operands.
    pub fn batch_matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "batch_matmul: {sa:?} x {sb:?}");
        let (m, k, n) = Self::mm_dims(&sa[1..], &sb[1..], ta, tb);
        let nb = sa[0];
        let mut out = vec![T::zero(); nb * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..nb {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                ta,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let v = Tensor::new(&[nb, m, n], out).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(v, Op::BatchMatMul { a, b, ta, tb }, rg)
    }

    /// 2-D convolution on NHWC input with a `[k, k, c_in, c_out]` kernel and
    /// symmetric zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Var {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        assert_eq!(si.len(), 4, "conv2d input must be NHWC");
        assert!(sw.len() == 4 && sw[0] == sw[1] && sw[2] == si[3], "conv2d kernel {sw:?} vs input {si:?}");
        assert!(stride >= 1);
        let kernel = sw[0];
        assert!(si[1] + 2 * pad >= kernel && si[2] + 2 * pad >= kernel, "conv2d kernel larger than input");
        let geom = ConvGeom {
            batch: si[0],
            height: si[1],
            width: si[2],
            channels: si[3],
            kernel,
            stride,
            pad,
            out_h: (si[1] + 2 * pad - kernel) / stride + 1,
            out_w: (si[2] + 2 * pad - kernel) / stride + 1,
            out_channels: sw[3],
        };
        let cols = im2col(self.value(input).data(), &geom);
        let rows = geom.out_rows();
        let mut out = vec![T::zero(); rows * geom.out_channels];
        T::gemm(
            rows,
            geom.patch_len(),
            geom.out_channels,
            T::one(),
            &cols,
            false,
            self.value(weight).data(),
            false,
            T::zero(),
            &mut out,
        );
        let v = Tensor::new(&[geom.batch, geom.out_h, geom.out_w, geom.out_channels], out).expect("shape");
        let rg = self.rg(&[input, weight]);
        let cols = if rg { cols } else { Vec::new() };
        self.push(v, Op::Conv2d { input, weight, geom, cols }, rg)
    }

    /// Mean over every dimension between the first and the last:
    /// `[B, ..., C] -> [B, C]`.
    pub fn mean_inner(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        assert!(s.len() >= 3, "mean_inner expects rank >= 3, got {s:?}");
        let (b, c) = (s[0], s[s.len() - 1]);
        let inner: usize = s[1..s.len() - 1].iter().product();
        let av = self.value(a).data();
        let mut out = vec![T::zero(); b * c];
        let scale = T::one() / T::from_usize(inner.max(1)).expect("usize");
        for bi in 0..b {
            let o = &mut out[bi * c..(bi + 1) * c];
            for m in 0..inner {
                let base = (bi * inner + m) * c;
                for (ci, ov) in o.iter_mut().enumerate() {
                    *ov += av[base + ci];
                }
            }
            for ov in o.iter_mut() {
                *ov *= scale;
            }
        }
        let v = Tensor::new(&[b, c], out).expect("shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanInner(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape).expect("reshape size");
        let rg = self.rg(&[a]);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2, "transpose expects rank 2");
        let (r, c) = (s[0], s[1]);
        let v = transpose2(self.value(a).data(), r, c);
        let v = Tensor::new(&[c, r], v).expect("shape");
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    /// Normalizes the last dimension to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let w = last_dim(self.shape(x));
        let epsf = T::from_f64_lossy(eps);
        let wf = T::from_usize(w).expect("usize");
        let mut out = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(out.len() / w.max(1));
        for row in out.data_mut().chunks_mut(w.max(1)) {
            let mean = row.iter().copied().sum::<T>() / wf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wf;
            let is = T::one() / (var + epsf).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Divides every row (last dimension) by its L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let w = last_dim(self.shape(x));
        let eps = T::from_f64_lossy(1e-12);
        let mut out = self.value(x).clone();
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(w.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let w = last_dim(self.shape(x));
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(w.max(1)) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let w = last_dim(self.shape(x));
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(w.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Mean categorical cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let s = self.shape(logits);
        assert_eq!(s.len(), 2, "cross_entropy expects [B, C] logits");
        let (b, c) = (s[0], s[1]);
        assert_eq!(targets.len(), b, "cross_entropy: one target per row");
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &t) in probs.chunks_mut(c.max(1)).zip(targets) {
            assert!(t < c, "cross_entropy target {t} out of range {c}");
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - row[t];
            softmax_in_place(row);
        }
        let mean = if b == 0 { T::zero() } else { total / T::from_usize(b).expect("usize") };
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(mean), Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, rg)
    }

    /// Sums the last dimension, keeping it with size 1.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let w = last_dim(&s);
        let data: Vec<T> = self.value(x).data().chunks(w.max(1)).map(|r| r.iter().copied().sum()).collect();
        let mut shape = s;
        if let Some(l) = shape.last_mut() {
            *l = 1;
        }
        let v = Tensor::new(&shape, data).expect("shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::RowSum(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let m = if n == 0 { T::zero() } else { self.value(x).sum() / T::from_usize(n).expect("usize") };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Concatenates along the last dimension; all leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last of nothing");
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last leading dims");
                last_dim(s)
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(&shape, out).expect("shape");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatLast(parts.to_vec()), rg)
    }

    /// Stacks along the leading dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&vals).expect("concat_rows shapes");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x).slice_rows(start, end);
        let rg = self.rg(&[x]);
        self.push(v, Op::SliceRows { x, start }, rg)
    }

    /// `[B, T, H*D] -> [B*H, T, D]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[2] % heads == 0, "split_heads: {s:?} / {heads}");
        let (b, t, d) = (s[0], s[1], s[2] / heads);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let dst = ((bi * heads + h) * t + ti) * d;
                    let from = (bi * t + ti) * heads * d + h * d;
                    out[dst..dst + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let v = Tensor::new(&[b * heads, t, d], out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::SplitHeads { x, heads }, rg)
    }

    /// `[B*H, T, D] -> [B, T, H*D]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[0] % heads == 0, "merge_heads: {s:?} / {heads}");
        let (b, t, d) = (s[0] / heads, s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let from = ((bi * heads + h) * t + ti) * d;
                    let dst = (bi * t + ti) * heads * d + h * d;
                    out[dst..dst + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let v = Tensor::new(&[b, t, heads * d], out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(v, Op::MergeHeads { x, heads }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::State("backward on a node that was never recorded".into()))?;
        if node.value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(node.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param { .. } => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let d = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape(), d).expect("shape"));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let d = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape(), d).expect("shape"));
                }
            }
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    let bs = self.shape(*b);
                    let m = self.value(*b).len().max(1);
                    let mut db = vec![T::zero(); m];
                    for (k, &x) in gd.iter().enumerate() {
                        db[k % m] += x;
                    }
                    self.acc(grads, *b, Tensor::new(bs, db).expect("shape"));
                }
            }
            Op::MulBroadcast(a, b) => {
                let bv = self.value(*b).data();
                let m = bv.len().max(1);
                if self.wants(*a) {
                    let d = gd.iter().enumerate().map(|(k, &x)| x * bv[k % m]).collect();
                    self.acc(grads, *a, Tensor::new(g.shape(), d).expect("shape"));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let mut db = vec![T::zero(); m];
                    for (k, (&x, &y)) in gd.iter().zip(av).enumerate() {
                        db[k % m] += x * y;
                    }
                    self.acc(grads, *b, Tensor::new(self.shape(*b), db).expect("shape"));
                }
            }
            Op::Scale(a, c) => {
                let cf = T::from_f64_lossy(*c);
                self.acc(grads, *a, g.map(|x| x * cf));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = gd.iter().zip(av).map(|(&x, &y)| if y > T::zero() { x } else { T::zero() }).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                let d = gd.iter().zip(av).map(|(&x, &y)| x * gelu_parts(y).1).collect();
                self.acc(grads, *a, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = Self::mm_dims(&sa, &sb, ta, tb);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    mm_grad_a(m, k, n, gd, av, bv, ta, tb, &mut da);
                    self.acc(grads, *a, Tensor::new(&sa, da).expect("shape"));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    mm_grad_b(m, k, n, gd, av, bv, ta, tb, &mut db);
                    self.acc(grads, *b, Tensor::new(&sb, db).expect("shape"));
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (m, k, n) = Self::mm_dims(&sa[1..], &sb[1..], ta, tb);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = sa[0];
                let (sza, szb, szc) = (m * k, k * n, m * n);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); nb * sza];
                    for i in 0..nb {
                        mm_grad_a(
                            m,
                            k,
                            n,
                            &gd[i * szc..(i + 1) * szc],
                            &av[i * sza..(i + 1) * sza],
                            &bv[i * szb..(i + 1) * szb],
                            ta,
                            tb,
                            &mut da[i * sza..(i + 1) * sza],
                        );
                    }
                    self.acc(grads, *a, Tensor::new(&sa, da).expect("shape"));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); nb * szb];
                    for i in 0..nb {
                        mm_grad_b(
                            m,
                            k,
                            n,
                            &gd[i * szc..(i + 1) * szc],
                            &av[i * sza..(i + 1) * sza],
                            &bv[i * szb..(i + 1) * szb],
                            ta,
                            tb,
                            &mut db[i * szb..(i + 1) * szb],
                        );
                    }
                    self.acc(grads, *b, Tensor::new(&sb, db).expect("shape"));
                }
            }
            Op::Conv2d { input, weight, geom, cols } => {
                let rows = geom.out_rows();
                let pl = geom.patch_len();
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); pl * geom.out_channels];
                    T::gemm(pl, rows, geom.out_channels, T::one(), cols, true, gd, false, T::zero(), &mut dw);
                    self.acc(grads, *weight, Tensor::new(self.shape(*weight), dw).expect("shape"));
                }
                if self.wants(*input) {
                    let mut dcols = vec![T::zero(); rows * pl];
                    T::gemm(
                        rows,
                        geom.out_channels,
                        pl,
                        T::one(),
                        gd,
                        false,
                        self.value(*weight).data(),
                        true,
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = col2im(&dcols, geom);
                    self.acc(grads, *input, Tensor::new(self.shape(*input), dx).expect("shape"));
                }
            }
            Op::MeanInner(a) => {
                let s = self.shape(*a);
                let (b, c) = (s[0], s[s.len() - 1]);
                let inner: usize = s[1..s.len() - 1].iter().product();
                let scale = T::one() / T::from_usize(inner.max(1)).expect("usize");
                let mut d = vec![T::zero(); b * inner * c];
                for bi in 0..b {
                    for m in 0..inner {
                        let base = (bi * inner + m) * c;
                        for ci in 0..c {
                            d[base + ci] = gd[bi * c + ci] * scale;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(s, d).expect("shape"));
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(*a)).expect("shape");
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let d = transpose2(gd, s[1], s[0]);
                self.acc(grads, *a, Tensor::new(s, d).expect("shape"));
            }
            Op::LayerNorm { x, inv_std } => {
                let w = last_dim(g.shape()).max(1);
                let wf = T::from_usize(w).expect("usize");
                let y = node.value.data();
                let mut d = vec![T::zero(); gd.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &gd[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    let mg = gr.iter().copied().sum::<T>() / wf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / wf;
                    for j in 0..w {
                        d[r * w + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.acc(grads, *x, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::L2Normalize { x, norms } => {
                let w = last_dim(g.shape()).max(1);
                let y = node.value.data();
                let mut d = vec![T::zero(); gd.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let gr = &gd[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..w {
                        d[r * w + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.acc(grads, *x, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::Softmax(x) => {
                let w = last_dim(g.shape()).max(1);
                let y = node.value.data();
                let mut d = vec![T::zero(); gd.len()];
                for r in 0..gd.len() / w {
                    let gr = &gd[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..w {
                        d[r * w + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::LogSoftmax(x) => {
                let w = last_dim(g.shape()).max(1);
                let y = node.value.data();
                let mut d = vec![T::zero(); gd.len()];
                for r in 0..gd.len() / w {
                    let gr = &gd[r * w..(r + 1) * w];
                    let yr = &y[r * w..(r + 1) * w];
                    let s = gr.iter().copied().sum::<T>();
                    for j in 0..w {
                        d[r * w + j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.acc(grads, *x, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let s = self.shape(*logits);
                let (b, c) = (s[0], s[1]);
                if b > 0 {
                    let scale = gd[0] / T::from_usize(b).expect("usize");
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        d[r * c + t] -= scale;
                    }
                    self.acc(grads, *logits, Tensor::new(s, d).expect("shape"));
                }
            }
            Op::RowSum(x) => {
                let s = self.shape(*x);
                let w = last_dim(s).max(1);
                let d = (0..self.value(*x).len()).map(|k| gd[k / w]).collect();
                self.acc(grads, *x, Tensor::new(s, d).expect("shape"));
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.acc(grads, *x, Tensor::full(s, gd[0]));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let n = self.value(*x).len().max(1);
                self.acc(grads, *x, Tensor::full(s, gd[0] / T::from_usize(n).expect("usize")));
            }
            Op::ConcatLast(parts) => {
                let total = last_dim(g.shape()).max(1);
                let rows = gd.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let w = last_dim(s);
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        self.acc(grads, p, Tensor::new(s, d).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let d = gd[offset..offset + n].to_vec();
                        self.acc(grads, p, Tensor::new(self.shape(p), d).expect("shape"));
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let s = self.shape(*x);
                let w = self.value(*x).row_len();
                let mut d = vec![T::zero(); self.value(*x).len()];
                d[start * w..start * w + gd.len()].copy_from_slice(gd);
                self.acc(grads, *x, Tensor::new(s, d).expect("shape"));
            }
            Op::SplitHeads { x, heads } => {
                // inverse permutation of the forward copy
                let s = self.shape(*x);
                let (b, t, hd) = (s[0], s[1], s[2]);
                let d_head = hd / heads;
                let mut d = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let src = ((bi * heads + h) * t + ti) * d_head;
                            let dst = (bi * t + ti) * hd + h * d_head;
                            d[dst..dst + d_head].copy_from_slice(&gd[src..src + d_head]);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, d).expect("shape"));
            }
            Op::MergeHeads { x, heads } => {
                let s = self.shape(*x);
                let (bh, t, d_head) = (s[0], s[1], s[2]);
                let b = bh / heads;
                let mut d = vec![T::zero(); gd.len()];
                for bi in 0..b {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let dst = ((bi * heads + h) * t + ti) * d_head;
                            let src = (bi * t + ti) * heads * d_head + h * d_head;
                            d[dst..dst + d_head].copy_from_slice(&gd[src..src + d_head]);
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, d).expect("shape"));
            }
        }
    }

    /// Visits `(set id, param index, var)` for every bound parameter leaf.
    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (u64, usize, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param { set, index } => Some((set, index, Var(i))),
            _ => None,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn mm_grad_a<T: Float>(m: usize, k: usize, n: usize, gc: &[T], _a: &[T], b: &[T], ta: bool, tb: bool, out: &mut [T]) {
    if ta {
        // stored [k, m]: op(b) · gᵀ
        T::gemm(k, n, m, T::one(), b, tb, gc, true, T::zero(), out);
    } else {
        T::gemm(m, n, k, T::one(), gc, false, b, !tb, T::zero(), out);
    }
}

#[allow(clippy::too_many_arguments)]
fn mm_grad_b<T: Float>(m: usize, k: usize, n: usize, gc: &[T], a: &[T], _b: &[T], ta: bool, tb: bool, out: &mut [T]) {
    if tb {
        // stored [n, k]: gᵀ · op(a)
        T::gemm(n, m, k, T::one(), gc, true, a, ta, T::zero(), out);
    } else {
        T::gemm(k, m, n, T::one(), a, !ta, gc, false, T::zero(), out);
    }
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn transpose2<T: Float>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let mut cols = vec![T::zero(); g.out_rows() * pl];
    let c = g.channels;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[row * pl..(row + 1) * pl];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let off = (ky * g.kernel + kx) * c;
                        dst[off..off + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let pl = g.patch_len();
    let c = g.channels;
    let mut x = vec![T::zero(); g.batch * g.height * g.width * c];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let src = &cols[row * pl..(row + 1) * pl];
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * c;
                        let off = (ky * g.kernel + kx) * c;
                        for ci in 0..c {
                            x[dst + ci] += src[off + ci];
                        }
                    }
                }
            }
        }
    }
    x
}
