//! Transformer building blocks: linear layers, layer norm, MLP, multi-head
//! self/cross attention and the pre-norm transformer block.

use crate::error::{bail, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Std of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

/// Anything that owns named parameters.
pub trait Module<T: Scalar> {
    /// Calls `f` on every parameter in a fixed order, with dotted names
    /// rooted at `prefix`.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));

    fn parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn init_param<T: Scalar>(shape: &[usize], rng: &mut SeededRng, std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.trunc_normal(std))).collect();
    Tensor::param(shape, data).expect("consistent shape")
}

fn const_param<T: Scalar>(shape: &[usize], value: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::param(shape, vec![T::from_f64(value); n]).expect("consistent shape")
}

/// Overwrites a parameter in place with zeros.
pub fn zero_out<T: Scalar>(t: &Tensor<T>) {
    t.data_mut().iter_mut().for_each(|v| *v = T::zero());
}

// ── Linear ────────────────────────────────────────────────────────────────

/// `y = x·W + b` over the last axis. `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut SeededRng) -> Self {
        Self { weight: init_param(&[c_in, c_out], rng, INIT_STD), bias: Some(const_param(&[c_out], 0.0)) }
    }

    pub fn without_bias(c_in: usize, c_out: usize, rng: &mut SeededRng) -> Self {
        Self { weight: init_param(&[c_in, c_out], rng, INIT_STD), bias: None }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_broadcast(b),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

// ── LayerNorm / MLP ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(c: usize) -> Self {
        Self { gamma: const_param(&[c], 1.0), beta: const_param(&[c], 0.0) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

impl<T: Scalar> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }
}

#[derive(Clone, Debug)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(c: usize, rng: &mut SeededRng) -> Self {
        Self { fc1: Linear::new(c, MLP_RATIO * c, rng), fc2: Linear::new(MLP_RATIO * c, c, rng) }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu())
    }
}

impl<T: Scalar> Module<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

// ── Attention ─────────────────────────────────────────────────────────────

/// Multi-head attention with `heads · head_dim = C`. The key projection has
/// no bias: a key bias shifts every score in a row equally and never reaches
/// the output.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T: Scalar> {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            bail!(Config, "channel dim {dim} is not divisible by {heads} heads");
        }
        Ok(Self {
            heads,
            dim,
            q: Linear::new(dim, dim, rng),
            k: Linear::without_bias(dim, dim, rng),
            v: Linear::new(dim, dim, rng),
            o: Linear::new(dim, dim, rng),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n) = (x.shape()[0], x.shape()[1]);
        let (m, d) = (self.heads, self.head_dim());
        if m == 1 {
            x.reshape(&[b, 1, n, d])
        } else {
            x.reshape(&[b, n, m, d])?.permute(&[0, 2, 1, 3])
        }
    }

    fn merge_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n) = (x.shape()[0], x.shape()[2]);
        if self.heads == 1 {
            x.reshape(&[b, n, self.dim])
        } else {
            x.permute(&[0, 2, 1, 3])?.reshape(&[b, n, self.dim])
        }
    }

    /// Queries from `q_src [B, n_q, C]`, keys/values from `kv_src [B, n_kv, C]`.
    /// With `capture`, also returns the head-averaged `[B, n_q, n_kv]`
    /// attention probabilities (detached).
    pub fn attend(
        &self,
        q_src: &Tensor<T>,
        kv_src: &Tensor<T>,
        capture: bool,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let (sq, skv) = (q_src.shape(), kv_src.shape());
        if sq.len() != 3 || skv.len() != 3 || sq[0] != skv[0] {
            bail!(Dimension, "attention expects [B, n, C] inputs, got {sq:?} and {skv:?}");
        }
        if sq[2] != self.dim || skv[2] != self.dim {
            bail!(Config, "attention over C={} got query {sq:?} and key/value {skv:?}", self.dim);
        }
        let (b, n_q, n_kv) = (sq[0], sq[1], skv[1]);
        let q = self.split_heads(&self.q.forward(q_src)?)?;
        let k = self.split_heads(&self.k.forward(kv_src)?)?;
        let v = self.split_heads(&self.v.forward(kv_src)?)?;
        let scale = T::from_f64(1.0 / (self.head_dim() as f64).sqrt());
        let probs = q.matmul_nt(&k)?.scale(scale).softmax()?;
        let attn = capture.then(|| head_average(&probs, b, self.heads, n_q, n_kv));
        let ctx = self.merge_heads(&probs.matmul(&v)?)?;
        Ok((self.o.forward(&ctx)?, attn))
    }

    pub fn self_attention(&self, z: &Tensor<T>, capture: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.attend(z, z, capture)
    }

    pub fn cross_attention(&self, q_src: &Tensor<T>, kv_src: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.attend(q_src, kv_src, false)?.0)
    }
}

fn head_average<T: Scalar>(probs: &Tensor<T>, b: usize, m: usize, n_q: usize, n_kv: usize) -> Tensor<T> {
    let p = probs.data();
    let per = n_q * n_kv;
    let inv = T::from_f64(1.0 / m as f64);
    let mut out = vec![T::zero(); b * per];
    for bi in 0..b {
        for h in 0..m {
            let src = &p[(bi * m + h) * per..(bi * m + h + 1) * per];
            out[bi * per..(bi + 1) * per].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
        }
        out[bi * per..(bi + 1) * per].iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::new(&[b, n_q, n_kv], out).expect("attention shape")
}

impl<T: Scalar> Module<T> for MultiHeadAttention<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }
}

// ── Transformer block ─────────────────────────────────────────────────────

/// Pre-norm block: `z' = z + MSA(LN(z))`, `out = z' + MLP(LN(z'))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(dim: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng)?,
            norm2: LayerNorm::new(dim),
            mlp: Mlp::new(dim, rng),
        })
    }

    pub fn forward(&self, z: &Tensor<T>, capture: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let (a, attn) = self.attn.self_attention(&self.norm1.forward(z)?, capture)?;
        let z1 = z.add(&a)?;
        let out = z1.add(&self.mlp.forward(&self.norm2.forward(&z1)?)?)?;
        Ok((out, attn))
    }

    /// Zeroes the output projections of both residual branches, turning the
    /// block into the identity map.
    pub fn zero_residual_branches(&self) {
        for lin in [&self.attn.o, &self.mlp.fc2] {
            zero_out(&lin.weight);
            if let Some(b) = &lin.bias {
                zero_out(b);
            }
        }
    }
}

impl<T: Scalar> Module<T> for TransformerBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
}
