//! Model parameters and layers on top of the tape.
//!
//! A [`ParamStore`] owns named arrays and a frozen flag per entry. For each
//! forward pass a [`Ctx`] binds parameters onto a fresh tape on first use:
//! frozen entries bind as constants, so they can never receive gradients, and
//! the trainable/frozen split is enforced structurally rather than by
//! filtering updates. Layer helpers (`linear`, `attention`, ...) read their
//! weights from the store by dotted name prefix; a [`Registrar`] creates
//! those names with the matching shapes at build time.

use crate::rng::fnv1a;
use crate::tensor::{Gradients, Scalar, Tape, Value};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub value: ArrayD<F>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<F: Scalar> {
    params: IndexMap<String, Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>, frozen: bool) {
        let prev = self.params.insert(name.to_string(), Param { value, frozen });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }

    /// FNV-1a over names, shapes and exact value bits of parameters selected
    /// by `filter`. Insertion order is part of the hash.
    pub fn checksum(&self, mut filter: impl FnMut(&str, &Param<F>) -> bool) -> u64 {
        let mut bytes = Vec::new();
        for (name, p) in &self.params {
            if !filter(name, p) {
                continue;
            }
            bytes.extend_from_slice(name.as_bytes());
            for &d in p.value.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in p.value.iter() {
                bytes.extend_from_slice(&x.to_f64().to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }

    pub fn checksum_frozen(&self) -> u64 {
        self.checksum(|_, p| p.frozen)
    }

    pub fn checksum_all(&self) -> u64 {
        self.checksum(|_, _| true)
    }

    /// Name of the first parameter containing a non-finite value, if any.
    pub fn find_non_finite(&self) -> Option<String> {
        for (name, p) in &self.params {
            if p.value.iter().any(|x| !x.is_finite()) {
                return Some(name.clone());
            }
        }
        None
    }
}

/// Binds store parameters onto one tape for one forward/backward pass.
pub struct Ctx<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    store: &'a ParamStore<F>,
    bound: IndexMap<String, Value>,
}

impl<'a, F: Scalar> Ctx<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, store: &'a ParamStore<F>) -> Self {
        Ctx { tape, store, bound: IndexMap::new() }
    }

    /// Parameter by name; bound once per tape, frozen entries as constants.
    pub fn p(&mut self, name: &str) -> Value {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let param = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"));
        let v = if param.frozen {
            self.tape.constant(param.value.clone())
        } else {
            self.tape.leaf(param.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, a: ArrayD<F>) -> Value {
        self.tape.constant(a)
    }

    /// End the binding phase, releasing the tape borrow. The returned map
    /// feeds [`collect_grads`] after `backward`.
    pub fn finish(self) -> IndexMap<String, Value> {
        self.bound
    }
}

/// Gradients keyed by parameter name. Frozen parameters are absent by
/// construction: they were bound as constants and received no gradient.
pub fn collect_grads<F: Scalar>(
    bound: &IndexMap<String, Value>,
    grads: &Gradients<F>,
) -> IndexMap<String, ArrayD<F>> {
    let mut out = IndexMap::new();
    for (name, v) in bound {
        if let Some(g) = grads.get(*v) {
            out.insert(name.clone(), g.clone());
        }
    }
    out
}

fn uniform<F: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        F::from_f64(rng.random::<f64>() * 2.0 * bound - bound)
    })
}

/// Creates parameters with their standard initializations. Weights use the
/// fan-in uniform scheme; variants with zero init exist for residual output
/// layers that must start as the identity.
pub struct Registrar<'a, F: Scalar> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a, F: Scalar> Registrar<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Registrar { store, rng }
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = uniform::<F>(&[d_in, d_out], bound, self.rng);
        self.store.insert(&format!("{prefix}.w"), w, false);
        self.store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[d_out])), false);
    }

    pub fn linear_zero(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.store.insert(&format!("{prefix}.w"), ArrayD::zeros(IxDyn(&[d_in, d_out])), false);
        self.store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[d_out])), false);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.store.insert(&format!("{prefix}.g"), ArrayD::ones(IxDyn(&[d])), false);
        self.store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[d])), false);
    }

    pub fn group_norm(&mut self, prefix: &str, channels: usize) {
        self.store.insert(&format!("{prefix}.g"), ArrayD::ones(IxDyn(&[channels])), false);
        self.store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[channels])), false);
    }

    pub fn conv2d(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let w = uniform::<F>(&[c_out, c_in, k, k], bound, self.rng);
        self.store.insert(&format!("{prefix}.w"), w, false);
        self.store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[c_out])), false);
    }

    pub fn conv2d_zero(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.store.insert(
            &format!("{prefix}.w"),
            ArrayD::zeros(IxDyn(&[c_out, c_in, k, k])),
            false,
        );
        self.store.insert(&format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[c_out])), false);
    }

    /// Four projection matrices of one attention block.
    pub fn attention(&mut self, prefix: &str, d: usize) {
        self.linear(&format!("{prefix}.q"), d, d);
        self.linear(&format!("{prefix}.k"), d, d);
        self.linear(&format!("{prefix}.v"), d, d);
        self.linear(&format!("{prefix}.o"), d, d);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, ArrayD::zeros(IxDyn(shape)), false);
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).unwrap();
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| F::from_f64(dist.sample(self.rng)));
        self.store.insert(name, v, false);
    }
}

/// y = x W + b over the last axis; leading axes are flattened for the gemm.
pub fn linear<F: Scalar>(ctx: &mut Ctx<F>, prefix: &str, x: Value) -> Value {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    let xs = ctx.tape.shape(x).to_vec();
    let d_in = *xs.last().expect("linear: zero-rank input");
    let (w_in, d_out) = {
        let ws = ctx.tape.shape(w);
        (ws[0], ws[1])
    };
    assert_eq!(d_in, w_in, "linear {prefix}: input dim {d_in} vs weight {w_in}");
    let rows: usize = xs[..xs.len() - 1].iter().product();
    let x2 = ctx.tape.reshape(x, &[rows, d_in]);
    let y2 = ctx.tape.matmul(x2, w);
    let mut ys = xs;
    *ys.last_mut().unwrap() = d_out;
    let y = ctx.tape.reshape(y2, &ys);
    let bb = ctx.tape.broadcast(b, &ys);
    ctx.tape.add(y, bb)
}

/// Layer norm over the last axis with learned gain and bias.
pub fn layer_norm<F: Scalar>(ctx: &mut Ctx<F>, prefix: &str, x: Value) -> Value {
    let n = ctx.tape.layer_norm(x, 1e-5);
    let shape = ctx.tape.shape(n).to_vec();
    let g = ctx.p(&format!("{prefix}.g"));
    let b = ctx.p(&format!("{prefix}.b"));
    let gb = ctx.tape.broadcast(g, &shape);
    let bb = ctx.tape.broadcast(b, &shape);
    let scaled = ctx.tape.mul(n, gb);
    ctx.tape.add(scaled, bb)
}

/// Group norm over (B, C, H, W) with learned per-channel gain and bias.
pub fn group_norm<F: Scalar>(ctx: &mut Ctx<F>, prefix: &str, x: Value, groups: usize) -> Value {
    let n = ctx.tape.group_norm(x, groups, 1e-5);
    let shape = ctx.tape.shape(n).to_vec();
    let c = shape[1];
    let g = ctx.p(&format!("{prefix}.g"));
    let b = ctx.p(&format!("{prefix}.b"));
    let g3 = ctx.tape.reshape(g, &[c, 1, 1]);
    let b3 = ctx.tape.reshape(b, &[c, 1, 1]);
    let gb = ctx.tape.broadcast(g3, &shape);
    let bb = ctx.tape.broadcast(b3, &shape);
    let scaled = ctx.tape.mul(n, gb);
    ctx.tape.add(scaled, bb)
}

/// 2-d convolution with bias.
pub fn conv2d<F: Scalar>(
    ctx: &mut Ctx<F>,
    prefix: &str,
    x: Value,
    stride: usize,
    pad: usize,
) -> Value {
    let w = ctx.p(&format!("{prefix}.w"));
    let b = ctx.p(&format!("{prefix}.b"));
    let y = ctx.tape.conv2d(x, w, stride, pad);
    let shape = ctx.tape.shape(y).to_vec();
    let c = shape[1];
    let b3 = ctx.tape.reshape(b, &[c, 1, 1]);
    let bb = ctx.tape.broadcast(b3, &shape);
    ctx.tape.add(y, bb)
}

/// Additive attention mask: 0 where `keep`, a large negative number where
/// masked, shaped (B * heads, n_q, n_k) for direct addition to scores.
/// `keep` is per key slot, (B, n_k).
pub fn attention_mask<F: Scalar>(keep: &ndarray::Array2<bool>, heads: usize, n_q: usize) -> ArrayD<F> {
    let (b, n_k) = (keep.nrows(), keep.ncols());
    let neg = F::from_f64(-1e9);
    ArrayD::from_shape_fn(IxDyn(&[b * heads, n_q, n_k]), |ix| {
        if keep[[ix[0] / heads, ix[2]]] {
            F::zero()
        } else {
            neg
        }
    })
}

/// Multi-head scaled dot-product attention. Self-attention when `kv == q`,
/// cross-attention otherwise. `mask` is an additive score mask shaped
/// (B * heads, n_q, n_k); see [`attention_mask`].
pub fn attention<F: Scalar>(
    ctx: &mut Ctx<F>,
    prefix: &str,
    q_in: Value,
    kv_in: Value,
    heads: usize,
    mask: Option<Value>,
) -> Value {
    let (b, n_q, d) = {
        let s = ctx.tape.shape(q_in);
        assert_eq!(s.len(), 3, "attention: query must be (B, N, D)");
        (s[0], s[1], s[2])
    };
    let n_k = {
        let s = ctx.tape.shape(kv_in);
        assert_eq!(s[0], b, "attention: batch mismatch");
        assert_eq!(s[2], d, "attention: model dim mismatch");
        s[1]
    };
    assert_eq!(d % heads, 0, "attention: dim not divisible by heads");
    let dh = d / heads;

    let q = linear(ctx, &format!("{prefix}.q"), q_in);
    let k = linear(ctx, &format!("{prefix}.k"), kv_in);
    let v = linear(ctx, &format!("{prefix}.v"), kv_in);

    let split = |ctx: &mut Ctx<F>, x: Value, n: usize| {
        let r = ctx.tape.reshape(x, &[b, n, heads, dh]);
        let p = ctx.tape.permute(r, &[0, 2, 1, 3]);
        ctx.tape.reshape(p, &[b * heads, n, dh])
    };
    let qh = split(ctx, q, n_q);
    let kh = split(ctx, k, n_k);
    let vh = split(ctx, v, n_k);

    let kt = ctx.tape.permute(kh, &[0, 2, 1]);
    let scores = ctx.tape.batch_matmul(qh, kt);
    let mut scores = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = ctx.tape.add(scores, m);
    }
    let probs = ctx.tape.softmax_last(scores);
    let out = ctx.tape.batch_matmul(probs, vh);

    let r = ctx.tape.reshape(out, &[b, heads, n_q, dh]);
    let p = ctx.tape.permute(r, &[0, 2, 1, 3]);
    let merged = ctx.tape.reshape(p, &[b, n_q, d]);
    linear(ctx, &format!("{prefix}.o"), merged)
}

/// Classic sinusoidal embedding of an integer timestep: `dim/2` sines then
/// `dim/2` cosines over a geometric frequency ladder from 1 to 1/10000.
pub fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal: dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let denom = if half > 1 { (half - 1) as f64 } else { 1.0 };
        let freq = (-(10_000.0f64.ln()) * i as f64 / denom).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// Adam with bias correction. Moment state is keyed by parameter name and
/// carried in insertion order so checkpoint round-trips are exact.
pub struct Adam<F: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    state: IndexMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, state: IndexMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &IndexMap<String, ArrayD<F>>) {
        self.t += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(self.eps);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("adam: unknown parameter {name}"));
            debug_assert!(!p.frozen, "adam: gradient for frozen parameter {name}");
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            azip_update(m, v, g, b1, b2, one);
            ndarray::Zip::from(&mut p.value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let m_hat = m / corr1;
                let v_hat = v / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }

    pub fn state(&self) -> impl Iterator<Item = (&String, &(ArrayD<F>, ArrayD<F>))> {
        self.state.iter()
    }

    pub fn restore_state(&mut self, name: &str, m: ArrayD<F>, v: ArrayD<F>) {
        self.state.insert(name.to_string(), (m, v));
    }
}

fn azip_update<F: Scalar>(
    m: &mut ArrayD<F>,
    v: &mut ArrayD<F>,
    g: &ArrayD<F>,
    b1: F,
    b2: F,
    one: F,
) {
    ndarray::Zip::from(m).and(v).and(g).for_each(|m, v, &g| {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
    });
}
