use std::collections::HashMap;

use super::{gemm, NnError, ParameterSet, Result, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Images per im2col chunk, bounding the column buffer to ~2M values.
    fn chunk(&self) -> usize {
        ((1 << 21) / (self.ck() * self.hw_out()).max(1)).clamp(1, self.n.max(1))
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<T> },
    Scan { delta: Var, u: Var, seq_len: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat { a: Var, b: Var, outer: usize, a_inner: usize, b_inner: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    GateMix { g: Var, a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, groups: usize, probs: Vec<T> },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of one forward computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
}

/// Gradients of a backward pass, indexed by [`Var`]. Only leaves keep their
/// gradient; intermediate buffers are released during the sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    param_vars: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into `params` (matching by parameter id).
    pub fn accumulate_into(&self, params: &mut ParameterSet<T>) {
        for &(pid, var) in &self.param_vars {
            if let Some(g) = self.wrt(var) {
                let p = params.by_id_mut(pid);
                for (dst, &src) in p.grad.iter_mut().zip(g) {
                    *dst += src;
                }
                p.has_grad = true;
            }
        }
    }
}

fn mismatch<V>(msg: String) -> Result<V> {
    Err(NnError::ShapeMismatch(msg))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// In-place numerically stable softmax of one row.
fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Gradient buffer of `v`, allocated on first use, or `None` if `v` needs
/// no gradient.
fn grad_slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let numel = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, n0: usize, nc: usize, cols: &mut [T]) {
    let ncols = nc * g.hw_out();
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for il in 0..nc {
                    let img = &x[((n0 + il) * g.c + c) * plane..][..plane];
                    for oy in 0..g.ho {
                        let dst = &mut row[il * g.hw_out() + oy * g.wo..][..g.wo];
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &img[iy as usize * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, n0: usize, nc: usize, dx: &mut [T]) {
    let ncols = nc * g.hw_out();
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for il in 0..nc {
                    let img = &mut dx[((n0 + il) * g.c + c) * plane..][..plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &row[il * g.hw_out() + oy * g.wo..][..g.wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                img[iy as usize * g.w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf | Op::Param => unreachable!("leaves are pushed directly"),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is kept and can be read from [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of a parameter. Repeated requests for the same
    /// parameter return the same node.
    pub fn param(&mut self, params: &ParameterSet<T>, name: &str) -> Result<Var> {
        let id = params.id(name)?;
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let p = params.by_id(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return mismatch(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let vx = self.value(x);
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data: vx.data().iter().map(|&v| f(v)).collect(),
        };
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, x: Var, r: Var, what: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(r));
        let cols = vx.cols();
        if vr.numel() != cols {
            return mismatch(format!("{what}: row vector of {} for {cols} columns", vr.numel()));
        }
        let rv = vr.data();
        let data = vx
            .data()
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(rv).map(|(&a, &b)| f(a, b)))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[x, r]))
    }

    /// Broadcasts `b` (one value per column) over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_op(x, b, "add_row", |a, b| a + b, Op::AddRow(x, b))
    }

    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.row_op(x, v, "mul_row", |a, b| a * b, Op::MulRow(x, v))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// `a[..., k] x b[k, n]`, or `a x b^T` for `b[n, k]` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.shape().len() != 2 {
            return mismatch(format!("matmul: right operand must be 2-D, got {:?}", vb.shape()));
        }
        let (k, n) = if trans_b {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        if va.cols() != k {
            return mismatch(format!("matmul: {:?} x {:?} (trans_b={trans_b})", va.shape(), vb.shape()));
        }
        let m = va.rows();
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, va.data(), false, vb.data(), trans_b, &mut out, false);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a x b^T`; with `b` stored `[out, in]` this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.numel() != d || vb.numel() != d {
            return mismatch(format!("layer_norm: gamma {} / beta {} for width {d}", vg.numel(), vb.numel()));
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let cols = vx.cols().max(1);
        let mut data = vx.data().to_vec();
        data.chunks_mut(cols).for_each(softmax_row);
        let value = Tensor {
            shape: vx.shape().to_vec(),
            data,
        };
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Scaled dot-product attention split over `heads`, for `batch` independent
    /// sequences. `q` is `[batch*Tq, d]`, `k` and `v` are `[batch*Tk, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(NnError::IndivisibleHeads { dim: d, heads });
        }
        if vk.shape() != vv.shape() || vk.cols() != d || vq.shape().len() != 2 || vk.shape().len() != 2 {
            return mismatch(format!("attention: q {:?}, k {:?}, v {:?}", vq.shape(), vk.shape(), vv.shape()));
        }
        if batch == 0 || vq.rows() % batch != 0 || vk.rows() % batch != 0 {
            return mismatch(format!("attention: rows {} / {} not divisible by batch {batch}", vq.rows(), vk.rows()));
        }
        let (tq, tk, dh) = (vq.rows() / batch, vk.rows() / batch, d / heads);
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut out = vec![T::zero(); vq.numel()];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qi = &qd[(b * tq + i) * d + off..][..dh];
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let kj = &kd[(b * tk + j) * d + off..][..dh];
                        *pj = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    }
                    softmax_row(p);
                    let o = &mut out[(b * tq + i) * d + off..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vd[(b * tk + j) * d + off..][..dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += pj * vc;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vq.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Attention { q, k, v, batch, heads, probs }, &[q, k, v]))
    }

    /// Softmax weights saved by an attention node, laid out
    /// `[batch, heads, Tq, Tk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Diagonal selective scan over sequences of `seq_len` rows:
    /// `s_t = exp(-softplus(delta_t)) * s_{t-1} + softplus(delta_t) * u_t`,
    /// with `s_0 = 0`. Returns all states.
    pub fn selective_scan(&mut self, delta: Var, u: Var, seq_len: usize) -> Result<Var> {
        self.same_shape(delta, u, "selective_scan")?;
        let (vd, vu) = (self.value(delta), self.value(u));
        let c = vd.cols();
        if seq_len == 0 || vd.rows() % seq_len != 0 {
            return mismatch(format!("selective_scan: {} rows not divisible by {seq_len}", vd.rows()));
        }
        let mut out = vec![T::zero(); vd.numel()];
        for seq in 0..vd.rows() / seq_len {
            let base = seq * seq_len * c;
            for j in 0..c {
                let mut s = T::zero();
                for t in 0..seq_len {
                    let idx = base + t * c + j;
                    let dl = softplus(vd.data()[idx]);
                    s = (-dl).exp() * s + dl * vu.data()[idx];
                    out[idx] = s;
                }
            }
        }
        let value = Tensor::new(vd.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Scan { delta, u, seq_len }, &[delta, u]))
    }

    /// 2-D convolution of `x[N,C,H,W]` with `w[O,C,kh,kw]` and bias `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (vx.shape(), vw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || vb.numel() != ws[0] || stride == 0 {
            return mismatch(format!("conv2d: x {xs:?}, w {ws:?}, b {:?}, stride {stride}", vb.shape()));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return mismatch(format!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h,
            w: wd,
            o: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (ck, hw) = (geom.ck(), geom.hw_out());
        let mut out = vec![T::zero(); geom.n * geom.o * hw];
        let chunk = geom.chunk();
        let mut cols = vec![T::zero(); ck * chunk * hw];
        let mut tmp = vec![T::zero(); geom.o * chunk * hw];
        let mut n0 = 0;
        while n0 < geom.n {
            let nc = chunk.min(geom.n - n0);
            let ncols = nc * hw;
            im2col(vx.data(), &geom, n0, nc, &mut cols);
            gemm(geom.o, ck, ncols, vw.data(), false, &cols, false, &mut tmp, false);
            for il in 0..nc {
                for o in 0..geom.o {
                    let bias = vb.data()[o];
                    let src = &tmp[o * ncols + il * hw..][..hw];
                    let dst = &mut out[((n0 + il) * geom.o + o) * hw..][..hw];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias;
                    }
                }
            }
            n0 += nc;
        }
        let value = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() != 4 {
            return mismatch(format!("global_avg_pool: expected 4-D input, got {s:?}"));
        }
        let plane = s[2] * s[3];
        let inv = T::one() / T::lit(plane.max(1) as f64);
        let data = vx.data().chunks(plane.max(1)).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(shape.to_vec(), vx.data().to_vec())
            .map_err(|_| NnError::ShapeMismatch(format!("reshape {:?} -> {shape:?}", vx.shape())))?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return mismatch(format!("concat on axis {axis}: {sa:?} and {sb:?}"));
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..outer {
            data.extend_from_slice(&va.data()[r * a_inner..(r + 1) * a_inner]);
            data.extend_from_slice(&vb.data()[r * b_inner..(r + 1) * b_inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat { a, b, outer, a_inner, b_inner }, &[a, b]))
    }

    /// Selects slices along the first axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        let n = s.first().copied().unwrap_or(0);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return mismatch(format!("gather_rows: index {bad} out of {n}"));
        }
        let inner = if n == 0 { 0 } else { vx.numel() / n };
        let mut data = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            data.extend_from_slice(&vx.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = s.to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// `g * a + (1 - g) * b`, clamped to the interval spanned by `a` and `b`
    /// so that rounding never leaves the convex hull.
    pub fn gate_mix(&mut self, g: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape(g, a, "gate_mix")?;
        self.same_shape(a, b, "gate_mix")?;
        let (vg, va, vb) = (self.value(g), self.value(a), self.value(b));
        let data = vg
            .data()
            .iter()
            .zip(va.data())
            .zip(vb.data())
            .map(|((&g, &x), &y)| (g * x + (T::one() - g) * y).max(x.min(y)).min(x.max(y)))
            .collect();
        let value = Tensor::new(vg.shape().to_vec(), data)?;
        Ok(self.push(value, Op::GateMix { g, a, b }, &[g, a, b]))
    }

    /// Softmax cross-entropy summed over rows and divided by `groups`
    /// (the batch size when each sample contributes several rows).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], groups: usize) -> Result<Var> {
        let vl = self.value(logits);
        let classes = vl.cols();
        if vl.rows() != labels.len() || groups == 0 {
            return mismatch(format!("cross_entropy: {} rows, {} labels, {groups} groups", vl.rows(), labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(NnError::LabelOutOfRange { label, classes });
        }
        let mut probs = vl.data().to_vec();
        let mut loss = T::zero();
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += lse - row[y];
            softmax_row(row);
        }
        let value = Tensor::scalar(loss / T::lit(groups as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                groups,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Reverse sweep seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_vars: Vec<(usize, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        param_vars.sort_unstable();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.numel()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) || !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(node, &gout, &mut grads);
        }
        Gradients { grads, param_vars }
    }

    /// Convenience: backward from `root` and accumulate into `params`.
    pub fn backward_into(&self, root: Var, params: &mut ParameterSet<T>) {
        self.backward(root).accumulate_into(params);
    }

    fn backward_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(nodes, grads, $v) {
                    let $g: &mut [T] = $g;
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                with_grad!(*a, |g| {
                    g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s);
                });
                with_grad!(*b, |g| {
                    g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |g| {
                    g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s);
                });
                with_grad!(*b, |g| {
                    g.iter_mut().zip(gout).for_each(|(d, &s)| *d -= s);
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad!(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * vb[i];
                    }
                });
                with_grad!(*b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * va[i];
                    }
                });
            }
            Op::AddRow(x, r) => {
                let cols = val(*r).len().max(1);
                with_grad!(*x, |g| {
                    g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s);
                });
                with_grad!(*r, |g| {
                    for row in gout.chunks(cols) {
                        g.iter_mut().zip(row).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (val(*x), val(*r));
                let cols = vr.len().max(1);
                with_grad!(*x, |g| {
                    for (i, d) in g.iter_mut().enumerate() {
                        *d += gout[i] * vr[i % cols];
                    }
                });
                with_grad!(*r, |g| {
                    for (i, (&go, &xv)) in gout.iter().zip(vx).enumerate() {
                        g[i % cols] += go * xv;
                    }
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, |g| {
                    g.iter_mut().zip(gout).for_each(|(d, &v)| *d += v * *s);
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let k = ta.cols();
                let m = ta.rows();
                let n = node.value.cols();
                with_grad!(*a, |g| {
                    // dA[m,k] += dC[m,n] * op(B)^T
                    gemm(m, n, k, gout, false, tb.data(), !*trans_b, g, true);
                });
                with_grad!(*b, |g| {
                    if *trans_b {
                        // dB[n,k] += dC^T A
                        gemm(n, m, k, gout, true, ta.data(), false, g, true);
                    } else {
                        // dB[k,n] += A^T dC
                        gemm(k, m, n, ta.data(), true, gout, false, g, true);
                    }
                });
            }
            Op::Relu(x) => {
                let y = node.value.data();
                with_grad!(*x, |g| {
                    for i in 0..g.len() {
                        if y[i] > T::zero() {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                with_grad!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Softplus(x) => {
                let vx = val(*x);
                with_grad!(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * sigmoid(vx[i]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let vg = val(*gamma);
                let d = vg.len();
                with_grad!(*gamma, |g| {
                    for (go, xh) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += go[j] * xh[j];
                        }
                    }
                });
                with_grad!(*beta, |g| {
                    for go in gout.chunks(d) {
                        g.iter_mut().zip(go).for_each(|(dst, &s)| *dst += s);
                    }
                });
                with_grad!(*x, |g| {
                    let inv_d = T::one() / T::lit(d as f64);
                    for (r, ((go, xh), gx)) in gout.chunks(d).zip(xhat.chunks(d)).zip(g.chunks_mut(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = go[j] * vg[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            gx[j] += rstd[r] * (go[j] * vg[j] - m1 - xh[j] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = node.value.cols().max(1);
                with_grad!(*x, |g| {
                    for ((gx, go), yr) in g.chunks_mut(cols).zip(gout.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = go.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            gx[j] += yr[j] * (go[j] - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, batch, heads, probs } => {
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let d = node.value.cols();
                let (batch, heads) = (*batch, *heads);
                let (tq, tk, dh) = (qd.len() / d / batch, kd.len() / d / batch, d / heads);
                let scale = T::one() / T::lit(dh as f64).sqrt();
                let mut dq = vec![T::zero(); qd.len()];
                let mut dk = vec![T::zero(); kd.len()];
                let mut dv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); tk];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..tq {
                            let go = &gout[(b * tq + i) * d + off..][..dh];
                            let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                            for j in 0..tk {
                                let vrow = (b * tk + j) * d + off;
                                dp[j] = go.iter().zip(&vd[vrow..vrow + dh]).map(|(&x, &y)| x * y).sum();
                                for c in 0..dh {
                                    dv[vrow + c] += p[j] * go[c];
                                }
                            }
                            let dot: T = p.iter().zip(&dp).map(|(&x, &y)| x * y).sum();
                            let qrow = (b * tq + i) * d + off;
                            for j in 0..tk {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let krow = (b * tk + j) * d + off;
                                for c in 0..dh {
                                    dq[qrow + c] += ds * kd[krow + c];
                                    dk[krow + c] += ds * qd[qrow + c];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    with_grad!(var, |g| {
                        g.iter_mut().zip(&buf).for_each(|(dst, &s)| *dst += s);
                    });
                }
            }
            Op::Scan { delta, u, seq_len } => {
                let (vdl, vu) = (val(*delta), val(*u));
                let states = node.value.data();
                let c = node.value.cols();
                let seq_len = *seq_len;
                let mut gd = vec![T::zero(); vdl.len()];
                let mut gu = vec![T::zero(); vu.len()];
                for seq in 0..vdl.len() / (seq_len * c).max(1) {
                    let base = seq * seq_len * c;
                    for j in 0..c {
                        let mut carry = T::zero();
                        for t in (0..seq_len).rev() {
                            let idx = base + t * c + j;
                            carry += gout[idx];
                            let raw = vdl[idx];
                            let dl = softplus(raw);
                            let decay = (-dl).exp();
                            let prev = if t == 0 { T::zero() } else { states[idx - c] };
                            let d_dl = carry * (vu[idx] - decay * prev);
                            gd[idx] = d_dl * sigmoid(raw);
                            gu[idx] = carry * dl;
                            carry *= decay;
                        }
                    }
                }
                for (var, buf) in [(*delta, gd), (*u, gu)] {
                    with_grad!(var, |g| {
                        g.iter_mut().zip(&buf).for_each(|(dst, &s)| *dst += s);
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let geom = *geom;
                let (ck, hw) = (geom.ck(), geom.hw_out());
                let (vx, vw) = (val(*x), val(*w));
                with_grad!(*b, |g| {
                    for n in 0..geom.n {
                        for (o, dst) in g.iter_mut().enumerate() {
                            *dst += gout[(n * geom.o + o) * hw..][..hw].iter().copied().sum::<T>();
                        }
                    }
                });
                let need_w = nodes[w.0].needs_grad;
                let need_x = nodes[x.0].needs_grad;
                if !need_w && !need_x {
                    return;
                }
                let chunk = geom.chunk();
                let mut cols = vec![T::zero(); ck * chunk * hw];
                let mut dtmp = vec![T::zero(); geom.o * chunk * hw];
                let mut n0 = 0;
                while n0 < geom.n {
                    let nc = chunk.min(geom.n - n0);
                    let ncols = nc * hw;
                    for il in 0..nc {
                        for o in 0..geom.o {
                            dtmp[o * ncols + il * hw..][..hw]
                                .copy_from_slice(&gout[((n0 + il) * geom.o + o) * hw..][..hw]);
                        }
                    }
                    if need_w {
                        im2col(vx, &geom, n0, nc, &mut cols);
                        with_grad!(*w, |g| {
                            gemm(geom.o, ncols, ck, &dtmp, false, &cols, true, g, true);
                        });
                    }
                    if need_x {
                        gemm(ck, geom.o, ncols, vw, true, &dtmp, false, &mut cols, false);
                        with_grad!(*x, |g| {
                            col2im(&cols, &geom, n0, nc, g);
                        });
                    }
                    n0 += nc;
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = nodes[x.0].value.shape();
                let plane = s[2] * s[3];
                let inv = T::one() / T::lit(plane.max(1) as f64);
                with_grad!(*x, |g| {
                    for (i, dst) in g.iter_mut().enumerate() {
                        *dst += gout[i / plane] * inv;
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |g| {
                    g.iter_mut().zip(gout).for_each(|(d, &s)| *d += s);
                });
            }
            Op::Concat { a, b, outer, a_inner, b_inner } => {
                let (ai, bi) = (*a_inner, *b_inner);
                with_grad!(*a, |g| {
                    for r in 0..*outer {
                        let src = &gout[r * (ai + bi)..][..ai];
                        g[r * ai..(r + 1) * ai].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
                with_grad!(*b, |g| {
                    for r in 0..*outer {
                        let src = &gout[r * (ai + bi) + ai..][..bi];
                        g[r * bi..(r + 1) * bi].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let inner = if idx.is_empty() { 0 } else { gout.len() / idx.len() };
                with_grad!(*x, |g| {
                    for (o, &i) in idx.iter().enumerate() {
                        let src = &gout[o * inner..(o + 1) * inner];
                        g[i * inner..(i + 1) * inner].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                });
            }
            Op::GateMix { g: gv, a, b } => {
                let (vg, va, vb) = (val(*gv), val(*a), val(*b));
                with_grad!(*gv, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (va[i] - vb[i]);
                    }
                });
                with_grad!(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * vg[i];
                    }
                });
                with_grad!(*b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (T::one() - vg[i]);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, groups, probs } => {
                let classes = nodes[logits.0].value.cols();
                let s = gout[0] / T::lit(*groups as f64);
                with_grad!(*logits, |g| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..classes {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            g[r * classes + j] += s * (probs[r * classes + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |g| {
                    g.iter_mut().for_each(|d| *d += gout[0]);
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x.numel())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
            assert!(rel < tol, "entry {i}: analytic {x} vs numeric {y}");
        }
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Checks d(sum(w * f(x)))/dx for a unary graph function, where `w` is a
    /// fixed random weighting so that every output entry matters.
    fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let x0 = t(shape, &pseudo(shape.iter().product(), seed));
        let eval = |x: &Tensor<f64>| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let y = build(&mut g, xv);
            let w = t(g.shape(y), &pseudo(g.value(y).numel(), seed + 99));
            let wv = g.constant(w);
            let prod = g.mul(y, wv).unwrap();
            let loss = g.sum(prod);
            let grads = g.backward(loss);
            (g.value(loss).data()[0], grads.wrt(xv).map(|s| s.to_vec()))
        };
        let analytic = eval(&x0).1.expect("input gradient");
        let numeric = numeric_grad(&x0, |x| eval(x).0);
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn elementwise_gradients() {
        check_unary(&[3, 4], 1, |g, x| g.relu(x));
        check_unary(&[3, 4], 2, |g, x| g.sigmoid(x));
        check_unary(&[3, 4], 3, |g, x| g.softplus(x));
        check_unary(&[3, 4], 4, |g, x| g.softmax(x));
        check_unary(&[3, 4], 5, |g, x| g.mul(x, x).unwrap());
        check_unary(&[3, 4], 6, |g, x| {
            let s = g.scale(x, 3.0);
            g.sub(s, x).unwrap()
        });
    }

    #[test]
    fn matmul_and_row_gradients() {
        let b = t(&[4, 3], &pseudo(12, 7));
        check_unary(&[2, 5, 4], 8, |g, x| {
            let bv = g.constant(b.clone());
            g.matmul(x, bv).unwrap()
        });
        let w = t(&[3, 4], &pseudo(12, 9));
        check_unary(&[5, 4], 10, |g, x| {
            let wv = g.constant(w.clone());
            g.matmul_nt(x, wv).unwrap()
        });
        let a = t(&[5, 3], &pseudo(15, 11));
        // Gradient with respect to the right operand, both layouts.
        check_unary(&[3, 4], 12, |g, x| {
            let av = g.constant(a.clone());
            g.matmul(av, x).unwrap()
        });
        check_unary(&[4, 3], 13, |g, x| {
            let av = g.constant(a.clone());
            g.matmul_nt(av, x).unwrap()
        });
        let m = t(&[6, 3], &pseudo(18, 14));
        check_unary(&[3], 15, |g, x| {
            let mv = g.constant(m.clone());
            let y = g.mul_row(mv, x).unwrap();
            g.add_row(y, x).unwrap()
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let gamma = t(&[5], &pseudo(5, 20));
        let beta = t(&[5], &pseudo(5, 21));
        check_unary(&[4, 5], 22, |g, x| {
            let gv = g.constant(gamma.clone());
            let bv = g.constant(beta.clone());
            g.layer_norm(x, gv, bv, 1e-5).unwrap()
        });
        let x = t(&[4, 5], &pseudo(20, 23));
        check_unary(&[5], 24, |g, gm| {
            let xv = g.constant(x.clone());
            let bv = g.constant(beta.clone());
            g.layer_norm(xv, gm, bv, 1e-5).unwrap()
        });
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 4], &[3.0; 4]));
        let gm = g.constant(t(&[4], &[2.0; 4]));
        let bt = g.constant(t(&[4], &[0.0; 4]));
        let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_gradients() {
        let (batch, tq, tk, d) = (2, 3, 4, 4);
        let k = t(&[batch * tk, d], &pseudo(batch * tk * d, 30));
        let v = t(&[batch * tk, d], &pseudo(batch * tk * d, 31));
        let q = t(&[batch * tq, d], &pseudo(batch * tq * d, 32));
        check_unary(&[batch * tq, d], 33, |g, x| {
            let (kv, vv) = (g.constant(k.clone()), g.constant(v.clone()));
            g.attention(x, kv, vv, batch, 2).unwrap()
        });
        check_unary(&[batch * tk, d], 34, |g, x| {
            let (qv, vv) = (g.constant(q.clone()), g.constant(v.clone()));
            g.attention(qv, x, vv, batch, 2).unwrap()
        });
        check_unary(&[batch * tk, d], 35, |g, x| {
            let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
            g.attention(qv, kv, x, batch, 2).unwrap()
        });
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[4, 6]));
        assert_eq!(g.attention(x, x, x, 1, 4), Err(NnError::IndivisibleHeads { dim: 6, heads: 4 }));
    }

    #[test]
    fn attention_batches_are_independent() {
        let (tq, d) = (3, 4);
        let a = pseudo(tq * d, 40);
        let b = pseudo(tq * d, 41);
        let run = |data: Vec<f64>, batch: usize| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(t(&[batch * tq, d], &data));
            let y = g.attention(x, x, x, batch, 2).unwrap();
            g.value(y).data().to_vec()
        };
        let single = run(a.clone(), 1);
        let joint = run([a, b].concat(), 2);
        assert_eq!(&joint[..tq * d], &single[..]);
    }

    #[test]
    fn scan_gradients_and_recurrence() {
        let u = t(&[6, 3], &pseudo(18, 50));
        let delta = t(&[6, 3], &pseudo(18, 51));
        check_unary(&[6, 3], 52, |g, x| {
            let uv = g.constant(u.clone());
            g.selective_scan(x, uv, 3).unwrap()
        });
        check_unary(&[6, 3], 53, |g, x| {
            let dv = g.constant(delta.clone());
            g.selective_scan(dv, x, 3).unwrap()
        });
        // Literal recurrence; sequences restart at row 3.
        let mut g = Graph::<f64>::new();
        let dv = g.constant(delta.clone());
        let uv = g.constant(u.clone());
        let s = g.selective_scan(dv, uv, 3).unwrap();
        let out = g.value(s).data();
        for j in 0..3 {
            let mut state = 0.0;
            for tt in 0..6 {
                if tt % 3 == 0 {
                    state = 0.0;
                }
                let dl = (1.0 + delta.data()[tt * 3 + j].exp()).ln();
                state = (-dl).exp() * state + dl * u.data()[tt * 3 + j];
                assert!((out[tt * 3 + j] - state).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let w = t(&[3, 2, 3, 3], &pseudo(54, 60));
        let bias = t(&[3], &pseudo(3, 61));
        check_unary(&[2, 2, 5, 6], 62, |g, x| {
            let (wv, bv) = (g.constant(w.clone()), g.constant(bias.clone()));
            g.conv2d(x, wv, bv, 2, 1).unwrap()
        });
        let x = t(&[2, 2, 5, 6], &pseudo(120, 63));
        check_unary(&[3, 2, 3, 3], 64, |g, wv| {
            let (xv, bv) = (g.constant(x.clone()), g.constant(bias.clone()));
            g.conv2d(xv, wv, bv, 2, 1).unwrap()
        });
        check_unary(&[3], 65, |g, bv| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            g.conv2d(xv, wv, bv, 1, 0).unwrap()
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = t(&[1, 1, 4, 4], &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let w = t(&[1, 1, 3, 3], &[0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x), g.constant(w));
        let bv = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        let img = |r: i32, c: i32| if (0..4).contains(&r) && (0..4).contains(&c) { (r * 4 + c) as f64 } else { 0.0 };
        for r in 0..4 {
            for c in 0..4 {
                let expect = img(r - 1, c) + img(r + 1, c) + img(r, c - 1) + img(r, c + 1) - 4.0 * img(r, c) + 0.5;
                assert_eq!(g.value(y).data()[(r * 4 + c) as usize], expect);
            }
        }
    }

    #[test]
    fn structural_gradients() {
        check_unary(&[2, 3, 2, 2], 70, |g, x| g.global_avg_pool(x).unwrap());
        check_unary(&[4, 3], 71, |g, x| g.gather_rows(x, &[2, 0, 2, 3]).unwrap());
        let other = t(&[4, 2], &pseudo(8, 72));
        check_unary(&[4, 3], 73, |g, x| {
            let o = g.constant(other.clone());
            let c = g.concat(x, o, 1).unwrap();
            g.reshape(c, &[20]).unwrap()
        });
        check_unary(&[4, 3], 74, |g, x| {
            let o = g.constant(t(&[2, 3], &pseudo(6, 75)));
            g.concat(o, x, 0).unwrap()
        });
    }

    #[test]
    fn gate_mix_gradients_and_hull() {
        let a = t(&[2, 3], &pseudo(6, 80));
        let b = t(&[2, 3], &pseudo(6, 81));
        check_unary(&[2, 3], 82, |g, x| {
            let gate = g.sigmoid(x);
            let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
            g.gate_mix(gate, av, bv).unwrap()
        });
        let mut g = Graph::<f32>::new();
        let gate = g.constant(Tensor::new(vec![3], vec![0.3, 0.999_999, 0.0]).unwrap());
        let av = g.constant(Tensor::new(vec![3], vec![0.1, 1e7, -2.0]).unwrap());
        let bv = g.constant(Tensor::new(vec![3], vec![0.7, -1e7, 5.0]).unwrap());
        let y = g.gate_mix(gate, av, bv).unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let (lo, hi) = (g.value(av).data()[i].min(g.value(bv).data()[i]), g.value(av).data()[i].max(g.value(bv).data()[i]));
            assert!(lo <= v && v <= hi);
        }
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(z, &[1, 3], 1).unwrap();
        assert!((g.value(l).data()[0] - 2.0 * 4f64.ln()).abs() < 1e-12);
        let big = g.constant(t(&[1, 3], &[0.0, 1000.0, 0.0]));
        let l2 = g.cross_entropy(big, &[1], 1).unwrap();
        assert!(g.value(l2).data()[0].abs() < 1e-12);
        assert_eq!(g.cross_entropy(z, &[1, 4], 1), Err(NnError::LabelOutOfRange { label: 4, classes: 4 }));

        let labels = [2, 0, 1];
        check_unary(&[3, 4], 90, |g, x| g.cross_entropy(x, &labels, 2).unwrap());
    }

    #[test]
    fn param_gradients_accumulate() {
        let mut ps = ParameterSet::<f64>::new();
        ps.insert("w", t(&[2], &[1.0, -2.0]), true).unwrap();
        ps.insert("c", t(&[2], &[5.0, 5.0]), false).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&ps, "w").unwrap();
            let w2 = g.param(&ps, "w").unwrap();
            assert_eq!(w, w2);
            let c = g.param(&ps, "c").unwrap();
            assert!(!g.needs_grad(c));
            let y = g.mul(w, c).unwrap();
            let loss = g.sum(y);
            g.backward_into(loss, &mut ps);
        }
        assert_eq!(ps.get("w").unwrap().grad, vec![10.0, 10.0]);
        assert!(ps.get("w").unwrap().has_grad);
        assert!(!ps.get("c").unwrap().has_grad);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.add(a, b), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(g.matmul(a, b), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(g.add_row(a, b), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(g.gather_rows(a, &[2]), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(g.selective_scan(a, a, 4), Err(NnError::ShapeMismatch(_))));
    }
}
