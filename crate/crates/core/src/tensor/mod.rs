//! Reverse-mode autodiff over dynamic-dimension `ndarray` arrays.
//!
//! A [`Tape`] records one forward pass as a flat node list; [`Tape::backward`]
//! sweeps it once in reverse and returns per-node gradients. A fresh tape is
//! built for every training step, so there is no graph reuse or caching to
//! invalidate. Every node value is materialized in standard row-major layout;
//! reshapes on tape values are therefore free and the gemm paths stay fast.
//!
//! The op set is exactly what the models in this crate need. Shape errors are
//! programmer errors and panic; input validation with `Result` happens in the
//! public model APIs before anything reaches a tape.

mod conv;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};

/// Element type a tape can run on. Training runs `f32`; gradient checks run
/// the same code in `f64`.
pub trait Scalar: ndarray::NdFloat {
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    /// Multiply by a compile-time constant.
    Scale(Value, f64),
    /// Multiply every element by a scalar (single-element) tape value.
    ScaleByScalar { x: Value, s: Value },
    /// Broadcast to a larger shape under trailing-axis alignment.
    Broadcast(Value),
    Tanh(Value),
    Silu(Value),
    /// (M, K) x (K, N).
    MatMul(Value, Value),
    /// (B, M, K) x (B, K, N), batch-wise.
    BatchMatMul(Value, Value),
    Permute { x: Value, perm: Vec<usize> },
    Reshape(Value),
    Concat { parts: Vec<Value>, axis: usize },
    Narrow { x: Value, axis: usize, start: usize },
    SoftmaxLast(Value),
    /// Normalize over the last axis; no affine (compose with Mul/Add).
    LayerNorm { x: Value, eps: f64 },
    /// Normalize (B, C, H, W) per (batch, channel group); no affine.
    GroupNorm { x: Value, groups: usize, eps: f64 },
    MeanAll(Value),
    SumAll(Value),
    /// (B, Cin, H, W) x (Cout, Cin, kh, kw); bias is a separate Broadcast+Add.
    Conv2d { x: Value, w: Value, stride: usize, pad: usize },
    /// Nearest-neighbour doubling of the two trailing spatial axes.
    Upsample2x(Value),
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients from one backward sweep, indexed by [`Value`].
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the swept loss w.r.t. `v`; `None` if `v` did not require
    /// or receive a gradient.
    pub fn get(&self, v: Value) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }
}

fn standardize<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn reshaped<F: Scalar>(a: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    standardize(a)
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: element count mismatch")
}

fn matmul2<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> ArrayD<F> {
    let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul: lhs not 2-d");
    let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul: rhs not 2-d");
    a2.dot(&b2).into_dyn()
}

fn batch_matmul<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>) -> ArrayD<F> {
    let (sa, sb) = (a.shape(), b.shape());
    assert_eq!(sa.len(), 3, "batch_matmul: lhs not 3-d");
    assert_eq!(sb.len(), 3, "batch_matmul: rhs not 3-d");
    assert_eq!(sa[0], sb[0], "batch_matmul: batch mismatch");
    assert_eq!(sa[2], sb[1], "batch_matmul: inner dim mismatch");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[sa[0], sa[1], sb[2]]));
    for i in 0..sa[0] {
        let ai = a.index_axis(Axis(0), i);
        let bi = b.index_axis(Axis(0), i);
        let a2 = ai.into_dimensionality::<Ix2>().unwrap();
        let b2 = bi.into_dimensionality::<Ix2>().unwrap();
        out.index_axis_mut(Axis(0), i).assign(&a2.dot(&b2));
    }
    out
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Sum `g` down to `target` shape, undoing a trailing-aligned broadcast.
fn reduce_to_shape<F: Scalar>(g: &ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    let lead = g.ndim() - target.len();
    let mut acc = g.to_owned();
    for _ in 0..lead {
        acc = acc.sum_axis(Axis(0));
    }
    for (i, &t) in target.iter().enumerate() {
        if t == 1 && acc.shape()[i] > 1 {
            acc = acc.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    standardize(acc)
}

/// Row-wise mean/inv-std over the last axis viewed as rows of length `c`.
/// Variance is the biased (population) estimate.
fn norm_stats<F: Scalar>(rows: &ndarray::ArrayView2<F>, eps: f64) -> (Vec<F>, Vec<F>) {
    let c = F::from_f64(rows.ncols() as f64);
    let mut mean = Vec::with_capacity(rows.nrows());
    let mut inv_std = Vec::with_capacity(rows.nrows());
    for row in rows.rows() {
        let mu = row.sum() / c;
        let var = row.fold(F::zero(), |acc, &x| acc + (x - mu) * (x - mu)) / c;
        mean.push(mu);
        inv_std.push(F::one() / (var + F::from_f64(eps)).sqrt());
    }
    (mean, inv_std)
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<F>, op: Op, needs_grad: bool) -> Value {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op, needs_grad });
        Value(self.nodes.len() - 1)
    }

    fn any_grad(&self, vs: &[Value]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Input that wants a gradient (a parameter).
    pub fn leaf(&mut self, value: ArrayD<F>) -> Value {
        let value = standardize(value);
        self.push(value, Op::Leaf, true)
    }

    /// Input that never gets a gradient (data, masks, embeddings of data).
    pub fn constant(&mut self, value: ArrayD<F>) -> Value {
        let value = standardize(value);
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.any_grad(&[a, b]);
        self.push(standardize(v), Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.any_grad(&[a, b]);
        self.push(standardize(v), Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.any_grad(&[a, b]);
        self.push(standardize(v), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Value, c: f64) -> Value {
        let v = self.nodes[x.0].value.mapv(|e| e * F::from_f64(c));
        let ng = self.any_grad(&[x]);
        self.push(v, Op::Scale(x, c), ng)
    }

    pub fn scale_by_scalar(&mut self, x: Value, s: Value) -> Value {
        assert_eq!(self.nodes[s.0].value.len(), 1, "scale_by_scalar: scale must be one element");
        let sv = *self.nodes[s.0].value.iter().next().unwrap();
        let v = self.nodes[x.0].value.mapv(|e| e * sv);
        let ng = self.any_grad(&[x, s]);
        self.push(v, Op::ScaleByScalar { x, s }, ng)
    }

    /// Broadcast `x` to `shape` with trailing-axis alignment (numpy rules).
    pub fn broadcast(&mut self, x: Value, shape: &[usize]) -> Value {
        let v = self.nodes[x.0]
            .value
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| {
                panic!("broadcast: {:?} does not broadcast to {:?}", self.shape(x), shape)
            })
            .to_owned();
        let ng = self.any_grad(&[x]);
        self.push(standardize(v), Op::Broadcast(x), ng)
    }

    pub fn tanh(&mut self, x: Value) -> Value {
        let v = self.nodes[x.0].value.mapv(|e| e.tanh());
        let ng = self.any_grad(&[x]);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn silu(&mut self, x: Value) -> Value {
        let v = self.nodes[x.0].value.mapv(|e| e * sigmoid(e));
        let ng = self.any_grad(&[x]);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        let v = matmul2(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn batch_matmul(&mut self, a: Value, b: Value) -> Value {
        let v = batch_matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::BatchMatMul(a, b), ng)
    }

    pub fn permute(&mut self, x: Value, perm: &[usize]) -> Value {
        assert_eq!(perm.len(), self.nodes[x.0].value.ndim(), "permute: rank mismatch");
        let v = self.nodes[x.0].value.clone().permuted_axes(IxDyn(perm));
        let ng = self.any_grad(&[x]);
        self.push(standardize(v), Op::Permute { x, perm: perm.to_vec() }, ng)
    }

    pub fn reshape(&mut self, x: Value, shape: &[usize]) -> Value {
        let v = reshaped(self.nodes[x.0].value.clone(), shape);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Value {
        assert!(!parts.is_empty(), "concat: no parts");
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ng = self.any_grad(parts);
        self.push(standardize(v), Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    pub fn narrow(&mut self, x: Value, axis: usize, start: usize, len: usize) -> Value {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let ng = self.any_grad(&[x]);
        self.push(standardize(v), Op::Narrow { x, axis, start }, ng)
    }

    pub fn softmax_last(&mut self, x: Value) -> Value {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("softmax: zero-rank input");
        let rows = reshaped(self.nodes[x.0].value.clone(), &[self.nodes[x.0].value.len() / c, c]);
        let mut out = rows.clone();
        for mut row in out.view_mut().into_dimensionality::<Ix2>().unwrap().rows_mut() {
            let max = row.fold(F::neg_infinity(), |a, &b| if b > a { b } else { a });
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        let v = reshaped(out, &shape);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::SoftmaxLast(x), ng)
    }

    pub fn layer_norm(&mut self, x: Value, eps: f64) -> Value {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("layer_norm: zero-rank input");
        let rows = reshaped(self.nodes[x.0].value.clone(), &[self.nodes[x.0].value.len() / c, c]);
        let rows2 = rows.view().into_dimensionality::<Ix2>().unwrap();
        let (mean, inv_std) = norm_stats(&rows2, eps);
        let mut out = rows.clone();
        for (i, mut row) in
            out.view_mut().into_dimensionality::<Ix2>().unwrap().rows_mut().into_iter().enumerate()
        {
            row.mapv_inplace(|e| (e - mean[i]) * inv_std[i]);
        }
        let v = reshaped(out, &shape);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::LayerNorm { x, eps }, ng)
    }

    pub fn group_norm(&mut self, x: Value, groups: usize, eps: f64) -> Value {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "group_norm: expects (B, C, H, W)");
        assert_eq!(shape[1] % groups, 0, "group_norm: channels not divisible by groups");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let rows = reshaped(self.nodes[x.0].value.clone(), &[b * groups, c / groups * h * w]);
        let rows2 = rows.view().into_dimensionality::<Ix2>().unwrap();
        let (mean, inv_std) = norm_stats(&rows2, eps);
        let mut out = rows.clone();
        for (i, mut row) in
            out.view_mut().into_dimensionality::<Ix2>().unwrap().rows_mut().into_iter().enumerate()
        {
            row.mapv_inplace(|e| (e - mean[i]) * inv_std[i]);
        }
        let v = reshaped(out, &shape);
        let ng = self.any_grad(&[x]);
        self.push(v, Op::GroupNorm { x, groups, eps }, ng)
    }

    pub fn mean_all(&mut self, x: Value) -> Value {
        let n = F::from_f64(self.nodes[x.0].value.len() as f64);
        let v = ndarray::arr0(self.nodes[x.0].value.sum() / n).into_dyn();
        let ng = self.any_grad(&[x]);
        self.push(v, Op::MeanAll(x), ng)
    }

    pub fn sum_all(&mut self, x: Value) -> Value {
        let v = ndarray::arr0(self.nodes[x.0].value.sum()).into_dyn();
        let ng = self.any_grad(&[x]);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn conv2d(&mut self, x: Value, w: Value, stride: usize, pad: usize) -> Value {
        let v = conv::conv2d_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, stride, pad);
        let ng = self.any_grad(&[x, w]);
        self.push(v, Op::Conv2d { x, w, stride, pad }, ng)
    }

    pub fn upsample2x(&mut self, x: Value) -> Value {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "upsample2x: expects (B, C, H, W)");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = &self.nodes[x.0].value;
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let v = src[[bi, ci, hi, wi]];
                        out[[bi, ci, 2 * hi, 2 * wi]] = v;
                        out[[bi, ci, 2 * hi, 2 * wi + 1]] = v;
                        out[[bi, ci, 2 * hi + 1, 2 * wi]] = v;
                        out[[bi, ci, 2 * hi + 1, 2 * wi + 1]] = v;
                    }
                }
            }
        }
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Upsample2x(x), ng)
    }

    /// Backpropagate from a scalar (single-element) loss node.
    pub fn backward(&self, loss: Value) -> Gradients<F> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), F::one()));

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<F>>], v: Value, contrib: ArrayD<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(contrib.shape(), self.nodes[v.0].value.shape());
        match &mut grads[v.0] {
            Some(acc) => *acc += &contrib,
            slot @ None => *slot = Some(standardize(contrib)),
        }
    }

    fn backward_node(&self, id: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, g * &self.nodes[b.0].value);
                self.accum(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::Scale(x, c) => {
                self.accum(grads, *x, g.mapv(|e| e * F::from_f64(*c)));
            }
            Op::ScaleByScalar { x, s } => {
                let sv = *self.nodes[s.0].value.iter().next().unwrap();
                self.accum(grads, *x, g.mapv(|e| e * sv));
                let ds = (g * &self.nodes[x.0].value).sum();
                let shape = self.nodes[s.0].value.raw_dim();
                self.accum(grads, *s, ArrayD::from_elem(shape, ds));
            }
            Op::Broadcast(x) => {
                let target = self.nodes[x.0].value.shape().to_vec();
                self.accum(grads, *x, reduce_to_shape(g, &target));
            }
            Op::Tanh(x) => {
                let y = &self.nodes[id].value;
                self.accum(grads, *x, g * &y.mapv(|e| F::one() - e * e));
            }
            Op::Silu(x) => {
                let xin = &self.nodes[x.0].value;
                let d = xin.mapv(|e| {
                    let s = sigmoid(e);
                    s * (F::one() + e * (F::one() - s))
                });
                self.accum(grads, *x, g * &d);
            }
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let bt = standardize(bv.clone().permuted_axes(IxDyn(&[1, 0])));
                let at = standardize(av.clone().permuted_axes(IxDyn(&[1, 0])));
                self.accum(grads, *a, matmul2(g, &bt));
                self.accum(grads, *b, matmul2(&at, g));
            }
            Op::BatchMatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let bt = standardize(bv.clone().permuted_axes(IxDyn(&[0, 2, 1])));
                let at = standardize(av.clone().permuted_axes(IxDyn(&[0, 2, 1])));
                self.accum(grads, *a, batch_matmul(g, &bt));
                self.accum(grads, *b, batch_matmul(&at, g));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accum(grads, *x, standardize(g.clone().permuted_axes(IxDyn(&inv))));
            }
            Op::Reshape(x) => {
                let target = self.nodes[x.0].value.shape().to_vec();
                self.accum(grads, *x, reshaped(g.clone(), &target));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0usize;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    let slice = g
                        .slice_axis(Axis(*axis), Slice::from(start..start + len))
                        .to_owned();
                    self.accum(grads, *p, standardize(slice));
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut dx = ArrayD::<F>::zeros(self.nodes[x.0].value.raw_dim());
                let len = g.shape()[*axis];
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(g);
                self.accum(grads, *x, dx);
            }
            Op::SoftmaxLast(x) => {
                // dx = y * (g - sum(g * y, last))
                let y = &self.nodes[id].value;
                let shape = y.shape().to_vec();
                let c = *shape.last().unwrap();
                let yr = reshaped(y.clone(), &[y.len() / c, c]);
                let gr = reshaped(g.clone(), &[g.len() / c, c]);
                let mut dx = &gr * &yr;
                {
                    let y2 = yr.view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = gr.view().into_dimensionality::<Ix2>().unwrap();
                    let mut d2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for i in 0..y2.nrows() {
                        let dot = g2.row(i).dot(&y2.row(i));
                        let yrow = y2.row(i);
                        let grow = g2.row(i);
                        for j in 0..c {
                            d2[[i, j]] = yrow[j] * (grow[j] - dot);
                        }
                    }
                }
                self.accum(grads, *x, reshaped(dx, &shape));
            }
            Op::LayerNorm { x, eps } => {
                self.accum_norm_grad(grads, *x, g, *eps, None);
            }
            Op::GroupNorm { x, groups, eps } => {
                self.accum_norm_grad(grads, *x, g, *eps, Some(*groups));
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len();
                let gv = *g.iter().next().unwrap() / F::from_f64(n as f64);
                self.accum(grads, *x, ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv));
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().unwrap();
                self.accum(grads, *x, ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gv));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = conv::conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    *stride,
                    *pad,
                );
                self.accum(grads, *x, dx);
                self.accum(grads, *w, dw);
            }
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape().to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut dx = ArrayD::<F>::zeros(IxDyn(&s));
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                dx[[bi, ci, hi, wi]] = g[[bi, ci, 2 * hi, 2 * wi]]
                                    + g[[bi, ci, 2 * hi, 2 * wi + 1]]
                                    + g[[bi, ci, 2 * hi + 1, 2 * wi]]
                                    + g[[bi, ci, 2 * hi + 1, 2 * wi + 1]];
                            }
                        }
                    }
                }
                self.accum(grads, *x, dx);
            }
        }
    }

    /// Shared normalization backward. With `groups: None` rows are the last
    /// axis (layer norm); with `Some(g)` rows are (batch, group) slices of a
    /// (B, C, H, W) input. Per row with xhat = (x - mu) * inv_std:
    /// dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)).
    fn accum_norm_grad(
        &self,
        grads: &mut [Option<ArrayD<F>>],
        x: Value,
        g: &ArrayD<F>,
        eps: f64,
        groups: Option<usize>,
    ) {
        let xin = &self.nodes[x.0].value;
        let shape = xin.shape().to_vec();
        let row_len = match groups {
            None => *shape.last().unwrap(),
            Some(gr) => shape[1] / gr * shape[2] * shape[3],
        };
        let n_rows = xin.len() / row_len;
        let xr = reshaped(xin.clone(), &[n_rows, row_len]);
        let gr_ = reshaped(g.clone(), &[n_rows, row_len]);
        let x2 = xr.view().into_dimensionality::<Ix2>().unwrap();
        let g2 = gr_.view().into_dimensionality::<Ix2>().unwrap();
        let (mean, inv_std) = norm_stats(&x2, eps);
        let c = F::from_f64(row_len as f64);
        let mut dx = ArrayD::<F>::zeros(IxDyn(&[n_rows, row_len]));
        {
            let mut d2 = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
            for i in 0..n_rows {
                let grow = g2.row(i);
                let xrow = x2.row(i);
                let g_mean = grow.sum() / c;
                let mut gx_mean = F::zero();
                for j in 0..row_len {
                    gx_mean = gx_mean + grow[j] * (xrow[j] - mean[i]) * inv_std[i];
                }
                gx_mean = gx_mean / c;
                for j in 0..row_len {
                    let xhat = (xrow[j] - mean[i]) * inv_std[i];
                    d2[[i, j]] = inv_std[i] * (grow[j] - g_mean - xhat * gx_mean);
                }
            }
        }
        self.accum(grads, x, reshaped(dx, &shape));
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}
