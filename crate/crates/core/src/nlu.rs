//! Decoder upsampling: non-local cross-attention upsampling and the
//! nearest-neighbour "patch expansion" baseline.

use std::rc::Rc;

use crate::error::{bail, Result};
use crate::nn::{join, Linear, Module, MultiHeadAttention};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

fn check_ratio(skip: &[usize], low: &[usize], low_h: usize, low_w: usize) -> Result<()> {
    if skip.len() != 3 || low.len() != 3 || skip[0] != low[0] {
        bail!(Dimension, "upsampling expects [B, n, C] inputs, got {skip:?} and {low:?}");
    }
    if low[1] != low_h * low_w {
        bail!(Dimension, "low-resolution input has {} tokens, grid is {low_h}x{low_w}", low[1]);
    }
    if skip[1] != 4 * low[1] {
        bail!(Config, "skip has {} tokens, expected exactly 4 x {} low-resolution tokens", skip[1], low[1]);
    }
    Ok(())
}

/// `[B, h·w, C] → [B, 2h·2w, C]`, each token copied to its 2×2 children.
pub fn nearest_upsample<T: Scalar>(low: &Tensor<T>, low_h: usize, low_w: usize) -> Result<Tensor<T>> {
    let s = low.shape();
    if s.len() != 3 || s[1] != low_h * low_w {
        bail!(Dimension, "nearest upsample expects [B, {}, C], got {s:?}", low_h * low_w);
    }
    let (b, c) = (s[0], s[2]);
    let (h, w) = (2 * low_h, 2 * low_w);
    let mut index = Vec::with_capacity(4 * low.numel());
    for bi in 0..b {
        for row in 0..h {
            for col in 0..w {
                let base = (bi * low_h * low_w + (row / 2) * low_w + col / 2) * c;
                index.extend(base..base + c);
            }
        }
    }
    low.gather(Rc::new(index), &[b, h * w, c])
}

/// Non-local upsampling: queries from the skip tokens, keys and values
/// from every low-resolution token.
#[derive(Clone, Debug)]
pub struct NluLayer<T: Scalar> {
    pub q_embed: Linear<T>,
    pub kv_embed: Linear<T>,
    /// Attention projections; `attn.o` is the output projection.
    pub attn: MultiHeadAttention<T>,
    /// Channel projection of the nearest-upsampled low features, added to the
    /// attention output when present.
    pub residual: Option<Linear<T>>,
}

impl<T: Scalar> NluLayer<T> {
    pub fn new(c_skip: usize, c_low: usize, heads: usize, residual: bool, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            q_embed: Linear::new(c_skip, c_skip, rng),
            kv_embed: Linear::new(c_low, c_skip, rng),
            attn: MultiHeadAttention::new(c_skip, heads, rng)?,
            residual: residual.then(|| Linear::new(c_low, c_skip, rng)),
        })
    }

    /// `skip [B, 4n, C_skip]`, `low [B, n, C_low]` on an `low_h × low_w` grid.
    /// With `capture`, also returns the head-averaged `[B, 4n, n]` attention.
    pub fn forward_with_attention(
        &self,
        skip: &Tensor<T>,
        low: &Tensor<T>,
        low_h: usize,
        low_w: usize,
        capture: bool,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        check_ratio(skip.shape(), low.shape(), low_h, low_w)?;
        let q = self.q_embed.forward(skip)?;
        let kv = self.kv_embed.forward(low)?;
        let (mut out, attn) = self.attn.attend(&q, &kv, capture)?;
        if let Some(res) = &self.residual {
            out = out.add(&res.forward(&nearest_upsample(low, low_h, low_w)?)?)?;
        }
        Ok((out, attn))
    }

    pub fn forward(&self, skip: &Tensor<T>, low: &Tensor<T>, low_h: usize, low_w: usize) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(skip, low, low_h, low_w, false)?.0)
    }
}

impl<T: Scalar> Module<T> for NluLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.q_embed.visit(&join(prefix, "q_embed"), f);
        self.kv_embed.visit(&join(prefix, "kv_embed"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        if let Some(r) = &self.residual {
            r.visit(&join(prefix, "residual"), f);
        }
    }
}

/// Baseline: nearest-neighbour upsampling followed by a linear projection.
#[derive(Clone, Debug)]
pub struct PatchExpand<T: Scalar> {
    pub proj: Linear<T>,
}

impl<T: Scalar> PatchExpand<T> {
    pub fn new(c_skip: usize, c_low: usize, rng: &mut SeededRng) -> Self {
        Self { proj: Linear::new(c_low, c_skip, rng) }
    }

    pub fn forward(&self, skip: &Tensor<T>, low: &Tensor<T>, low_h: usize, low_w: usize) -> Result<Tensor<T>> {
        check_ratio(skip.shape(), low.shape(), low_h, low_w)?;
        self.proj.forward(&nearest_upsample(low, low_h, low_w)?)
    }
}

impl<T: Scalar> Module<T> for PatchExpand<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }
}

/// Either upsampler, selected by the model's `nlu` switch.
#[derive(Clone, Debug)]
pub enum Upsampler<T: Scalar> {
    Nlu(NluLayer<T>),
    Expand(PatchExpand<T>),
}

impl<T: Scalar> Upsampler<T> {
    pub fn forward(&self, skip: &Tensor<T>, low: &Tensor<T>, low_h: usize, low_w: usize) -> Result<Tensor<T>> {
        match self {
            Upsampler::Nlu(n) => n.forward(skip, low, low_h, low_w),
            Upsampler::Expand(e) => e.forward(skip, low, low_h, low_w),
        }
    }
}

impl<T: Scalar> Module<T> for Upsampler<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        match self {
            Upsampler::Nlu(n) => n.visit(&join(prefix, "nlu"), f),
            Upsampler::Expand(e) => e.visit(&join(prefix, "expand"), f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_projection};

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = SeededRng::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
    }

    fn layer(c_skip: usize, heads: usize, residual: bool, seed: u64) -> NluLayer<f64> {
        let l = NluLayer::new(c_skip, 2 * c_skip, heads, residual, &mut SeededRng::new(seed)).unwrap();
        let mut r = SeededRng::new(seed + 100);
        l.visit("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.5 * r.normal()));
        l
    }

    fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
            }
        }
        out
    }

    fn affine(x: &[f64], lin: &Linear<f64>, n: usize) -> Vec<f64> {
        let (ci, co) = (lin.c_in(), lin.c_out());
        let mut y = matmul(x, &lin.weight.to_vec(), n, ci, co);
        if let Some(b) = &lin.bias {
            let b = b.to_vec();
            y.chunks_mut(co).for_each(|row| row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb));
        }
        y
    }

    #[test]
    fn ratio_other_than_four_is_config_error() {
        let l = layer(4, 1, true, 1);
        let err = l.forward(&randn(&[1, 8, 4], 2), &randn(&[1, 4, 8], 3), 2, 2).unwrap_err();
        assert!(matches!(err, crate::GlamError::Config(_)));
    }

    #[test]
    fn output_has_four_tokens_per_low_token() {
        let l = layer(4, 2, true, 4);
        let out = l.forward(&randn(&[2, 16, 4], 5), &randn(&[2, 4, 8], 6), 2, 2).unwrap();
        assert_eq!(out.shape(), &[2, 16, 4]);
    }

    #[test]
    fn single_low_token_gives_its_projected_value_everywhere() {
        let l = layer(4, 2, false, 7);
        let low = randn(&[1, 1, 8], 8);
        let out = l.forward(&randn(&[1, 4, 4], 9), &low, 1, 1).unwrap().to_vec();
        let kv = affine(&low.to_vec(), &l.kv_embed, 1);
        let want = affine(&affine(&kv, &l.attn.v, 1), &l.attn.o, 1);
        for row in out.chunks(4) {
            for (a, b) in row.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_low_features_ignore_skip_content() {
        let l = layer(4, 2, false, 10);
        let row = randn(&[8], 11).to_vec();
        let low = Tensor::new(&[1, 4, 8], row.iter().cycle().take(32).copied().collect()).unwrap();
        let a = l.forward(&randn(&[1, 16, 4], 12), &low, 2, 2).unwrap().to_vec();
        let b = l.forward(&randn(&[1, 16, 4], 13), &low, 2, 2).unwrap().to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Single-head cross attention written out with explicit loops.
    #[test]
    fn matches_explicit_cross_attention_formula() {
        let l = layer(4, 1, true, 14);
        let (skip, low) = (randn(&[1, 16, 4], 15), randn(&[1, 4, 8], 16));
        let out = l.forward(&skip, &low, 2, 2).unwrap().to_vec();
        let q = affine(&affine(&skip.to_vec(), &l.q_embed, 16), &l.attn.q, 16);
        let kv = affine(&low.to_vec(), &l.kv_embed, 4);
        let k = affine(&kv, &l.attn.k, 4);
        let v = affine(&kv, &l.attn.v, 4);
        let mut ctx = vec![0.0; 16 * 4];
        for i in 0..16 {
            let s: Vec<f64> = (0..4).map(|j| (0..4).map(|t| q[i * 4 + t] * k[j * 4 + t]).sum::<f64>() / 2.0).collect();
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..4 {
                for t in 0..4 {
                    ctx[i * 4 + t] += e[j] / z * v[j * 4 + t];
                }
            }
        }
        let attn_out = affine(&ctx, &l.attn.o, 16);
        let low_d = low.to_vec();
        let mut up = Vec::new();
        for row in 0..4 {
            for col in 0..4 {
                let src = (row / 2) * 2 + col / 2;
                up.extend_from_slice(&low_d[src * 8..src * 8 + 8]);
            }
        }
        let res = affine(&up, l.residual.as_ref().unwrap(), 16);
        for i in 0..out.len() {
            assert!((out[i] - attn_out[i] - res[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let l = layer(8, 2, true, 17);
        let (_, a) = l.forward_with_attention(&randn(&[2, 16, 8], 18), &randn(&[2, 4, 16], 19), 2, 2, true).unwrap();
        let a = a.unwrap();
        assert_eq!(a.shape(), &[2, 16, 4]);
        for row in a.to_vec().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn nearest_upsample_copies_parents() {
        let low = Tensor::<f64>::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let up = nearest_upsample(&low, 1, 2).unwrap();
        assert_eq!(up.to_vec(), vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn gradients_reach_skip_and_low() {
        let l = layer(4, 2, true, 20);
        let skip = Tensor::param(&[1, 16, 4], randn(&[1, 16, 4], 21).to_vec()).unwrap();
        let low = Tensor::param(&[1, 4, 8], randn(&[1, 4, 8], 22).to_vec()).unwrap();
        let mut params = l.parameters();
        params.push(("skip".into(), skip.clone()));
        params.push(("low".into(), low.clone()));
        let loss = || random_projection(&l.forward(&skip, &low, 2, 2)?, 23);
        loss().unwrap().backward().unwrap();
        for t in [&skip, &low] {
            assert!(t.grad().unwrap().iter().any(|g| g.abs() > 1e-6));
        }
        for r in check_gradients(&params, loss, 16, 24).unwrap() {
            assert!(r.passed(), "{} {} {:?}", r.name, r.max_rel_error, r.worst);
        }
    }

    #[test]
    fn expand_baseline_is_local() {
        let e = PatchExpand::<f64>::new(4, 8, &mut SeededRng::new(25));
        let low = randn(&[1, 4, 8], 26);
        let out = e.forward(&randn(&[1, 16, 4], 27), &low, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 16, 4]);
        let d = out.to_vec();
        assert_eq!(&d[0..4], &d[4..8]);
    }
}
