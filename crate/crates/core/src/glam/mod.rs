//! Global tokens and the GLAM transformer block.
//!
//! Every window carries `N_g` global tokens in front of its `N_p` visual
//! tokens. A block runs windowed attention (W-MSA) over each window's
//! `[globals ‖ visual]` sequence, then global attention (G-MSA) over the
//! flattened `N_r·N_g` global tokens of all windows. Visual tokens never
//! attend across windows inside one block; cross-window information reaches
//! them through the globals in the next block.
//!
//! Besides the trainable form, a block has a *bare* diagnostic form
//! (single head, identity value/output projections, no norm, MLP or
//! residual). In bare form the global update is exactly
//! `g_r = Σ_n B_rn (A_n,gg g_n + A_n,gw w_n)`, which
//! [`bare_global_embedding`] recomputes from a captured [`AttentionRecord`]
//! and [`induced_attention`] unrolls into per-patch weights.

use std::rc::Rc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{bail, Result};
use crate::nn::{init_param, join, Module, TransformerBlock, INIT_STD};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};
use crate::windowing::{window_merge, window_partition, WindowedFeatureMap};

// ── Global tokens ─────────────────────────────────────────────────────────

/// Learned initial global tokens of one resolution stage.
#[derive(Clone, Debug)]
pub struct GlobalTokenBank<T: Scalar> {
    /// `[N_g, C]`
    pub init: Tensor<T>,
}

impl<T: Scalar> GlobalTokenBank<T> {
    pub fn new(n_g: usize, dim: usize, rng: &mut SeededRng) -> Self {
        Self { init: init_param(&[n_g, dim], rng, INIT_STD) }
    }

    pub fn n_globals(&self) -> usize {
        self.init.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.init.shape()[1]
    }

    /// Working copies `[B, N_r, N_g, C]`, identical in every window.
    pub fn expand(&self, batch: usize, n_windows: usize) -> Result<Tensor<T>> {
        let per = self.init.numel();
        let index: Vec<usize> = (0..batch * n_windows).flat_map(|_| 0..per).collect();
        self.init.gather(Rc::new(index), &[batch, n_windows, self.n_globals(), self.dim()])
    }
}

impl<T: Scalar> Module<T> for GlobalTokenBank<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "tokens"), &self.init);
    }
}

/// `[B, N_r, N_g, C] ‖ [B, N_r, N_p, C] → [B, N_r, N_g + N_p, C]`; globals
/// occupy slots `0..N_g` of every window.
pub fn concat_globals<T: Scalar>(wfm: &WindowedFeatureMap<T>, globals: &Tensor<T>) -> Result<Tensor<T>> {
    let (gs, ws) = (globals.shape(), wfm.tokens.shape());
    if gs.len() != 4 || gs[0] != ws[0] || gs[1] != ws[1] {
        bail!(Dimension, "globals {gs:?} do not match windowed tokens {ws:?}");
    }
    if gs[3] != ws[3] {
        bail!(Config, "global tokens have {} channels, visual tokens {}", gs[3], ws[3]);
    }
    if gs[2] == 0 {
        return Ok(wfm.tokens.clone());
    }
    Tensor::cat(&[globals.clone(), wfm.tokens.clone()], 2)
}

/// Inverse of [`concat_globals`]: `(globals, visual)`.
pub fn split_globals<T: Scalar>(z: &Tensor<T>, n_g: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let l = z.shape()[2];
    Ok((z.narrow(2, 0, n_g)?, z.narrow(2, n_g, l - n_g)?))
}

// ── Attention records ─────────────────────────────────────────────────────

/// Attention matrices of one GLAM block for one batch element.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub n_globals: usize,
    pub n_patches: usize,
    /// `[N_r, N_g+N_p, N_g+N_p]`: row `i` of window `r` is the attention token
    /// `i` pays to every token of its window.
    pub window: Array3<f64>,
    /// `[N_r·N_g, N_r·N_g]` G-MSA attention, absent when G-MSA did not run.
    pub global: Option<Array2<f64>>,
    /// Captured from the bare diagnostic form.
    pub bare: bool,
    /// Averaged over heads (always true outside bare form).
    pub head_averaged: bool,
}

impl AttentionRecord {
    pub fn n_windows(&self) -> usize {
        self.window.len_of(Axis(0))
    }

    fn ng(&self) -> usize {
        self.n_globals
    }

    pub fn a(&self, r: usize) -> ArrayView2<'_, f64> {
        self.window.index_axis(Axis(0), r)
    }

    pub fn a_gg(&self, r: usize) -> ArrayView2<'_, f64> {
        let g = self.ng();
        self.window.slice(s![r, ..g, ..g])
    }

    pub fn a_gw(&self, r: usize) -> ArrayView2<'_, f64> {
        let g = self.ng();
        self.window.slice(s![r, ..g, g..])
    }

    pub fn a_wg(&self, r: usize) -> ArrayView2<'_, f64> {
        let g = self.ng();
        self.window.slice(s![r, g.., ..g])
    }

    pub fn a_ww(&self, r: usize) -> ArrayView2<'_, f64> {
        let g = self.ng();
        self.window.slice(s![r, g.., g..])
    }

    /// `B_ij`: attention from the globals of window `i` to those of window `j`.
    pub fn b_block(&self, i: usize, j: usize) -> Option<ArrayView2<'_, f64>> {
        let g = self.ng();
        self.global.as_ref().map(|b| b.slice(s![i * g..(i + 1) * g, j * g..(j + 1) * g]))
    }

    /// Largest `|row sum − 1|` over every attention row held.
    pub fn max_row_sum_error(&self) -> f64 {
        let rows = self.window.sum_axis(Axis(2));
        let mut worst = rows.iter().fold(0.0f64, |m, &s| m.max((s - 1.0).abs()));
        if let Some(b) = &self.global {
            worst = b.sum_axis(Axis(1)).iter().fold(worst, |m, &s| m.max((s - 1.0).abs()));
        }
        worst
    }

    fn from_tensors<T: Scalar>(
        window: &Tensor<T>,
        global: Option<&Tensor<T>>,
        batch_index: usize,
        n_windows: usize,
        n_globals: usize,
        bare: bool,
    ) -> Self {
        let l = window.shape()[2];
        let per = n_windows * l * l;
        let wd = window.data();
        let win = Array3::from_shape_vec(
            (n_windows, l, l),
            wd[batch_index * per..(batch_index + 1) * per].iter().map(|v| v.as_f64()).collect(),
        )
        .expect("window attention shape");
        let glob = global.map(|g| {
            let n = n_windows * n_globals;
            let gd = g.data();
            Array2::from_shape_vec(
                (n, n),
                gd[batch_index * n * n..(batch_index + 1) * n * n].iter().map(|v| v.as_f64()).collect(),
            )
            .expect("global attention shape")
        });
        AttentionRecord { n_globals, n_patches: l - n_globals, window: win, global: glob, bare, head_averaged: !bare }
    }
}

// ── GLAM block ────────────────────────────────────────────────────────────

/// One W-MSA sub-block followed by one G-MSA sub-block.
#[derive(Clone, Debug)]
pub struct GlamBlock<T: Scalar> {
    pub n_globals: usize,
    pub w_block: TransformerBlock<T>,
    /// Absent when the block is built without G-MSA or without globals.
    pub g_block: Option<TransformerBlock<T>>,
    /// Runtime switch for the G-MSA step (ablation).
    pub gmsa_enabled: bool,
}

impl<T: Scalar> GlamBlock<T> {
    pub fn new(dim: usize, heads: usize, n_globals: usize, gmsa: bool, rng: &mut SeededRng) -> Result<Self> {
        let w_block = TransformerBlock::new(dim, heads, rng)?;
        let g_block = if gmsa && n_globals > 0 { Some(TransformerBlock::new(dim, heads, rng)?) } else { None };
        Ok(Self { n_globals, w_block, g_block, gmsa_enabled: gmsa })
    }

    fn gmsa_active(&self) -> bool {
        self.gmsa_enabled && self.n_globals > 0 && self.g_block.is_some()
    }

    fn check_input(&self, z: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let s = z.shape();
        if s.len() != 4 || s[2] < self.n_globals {
            bail!(Dimension, "GLAM block expects [B, N_r, N_g+N_p, C] with N_g={}, got {s:?}", self.n_globals);
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// `z [B, N_r, N_g+N_p, C] → z'` of the same shape. With `capture`, one
    /// record per batch element.
    pub fn forward(&self, z: &Tensor<T>, capture: bool) -> Result<(Tensor<T>, Option<Vec<AttentionRecord>>)> {
        let (b, n_r, l, c) = self.check_input(z)?;
        let (y, a) = self.w_block.forward(&z.reshape(&[b * n_r, l, c])?, capture)?;
        let y = y.reshape(&[b, n_r, l, c])?;
        let (out, battn) = if self.gmsa_active() {
            let g_block = self.g_block.as_ref().expect("active G-MSA has a block");
            let (g_hat, w_hat) = split_globals(&y, self.n_globals)?;
            let seq = g_hat.reshape(&[b, n_r * self.n_globals, c])?;
            let (g, battn) = g_block.forward(&seq, capture)?;
            let g = g.reshape(&[b, n_r, self.n_globals, c])?;
            (Tensor::cat(&[g, w_hat], 2)?, battn)
        } else {
            (y, None)
        };
        let records = a.map(|a| {
            (0..b)
                .map(|bi| AttentionRecord::from_tensors(&a, battn.as_ref(), bi, n_r, self.n_globals, false))
                .collect()
        });
        Ok((out, records))
    }

    /// Bare diagnostic form. Uses only the query/key projections of both
    /// sub-blocks, as a single head over all `C` channels; values and outputs
    /// are the identity and there is no norm, MLP or residual.
    ///
    /// With `detach_attention` the attention matrices are treated as
    /// constants, so the map from inputs to outputs is linear and its
    /// Jacobian blocks are the attention weights themselves.
    pub fn forward_bare(&self, z: &Tensor<T>, detach_attention: bool) -> Result<(Tensor<T>, Vec<AttentionRecord>)> {
        let (b, n_r, l, c) = self.check_input(z)?;
        let flat = z.reshape(&[b * n_r, l, c])?;
        let a = bare_attention(&self.w_block, &flat, detach_attention)?;
        let y = a.matmul(&flat)?.reshape(&[b, n_r, l, c])?;
        let (out, battn) = if self.gmsa_active() {
            let g_block = self.g_block.as_ref().expect("active G-MSA has a block");
            let (g_hat, w_hat) = split_globals(&y, self.n_globals)?;
            let seq = g_hat.reshape(&[b, n_r * self.n_globals, c])?;
            let battn = bare_attention(g_block, &seq, detach_attention)?;
            let g = battn.matmul(&seq)?.reshape(&[b, n_r, self.n_globals, c])?;
            (Tensor::cat(&[g, w_hat], 2)?, Some(battn))
        } else {
            (y, None)
        };
        let records = (0..b)
            .map(|bi| AttentionRecord::from_tensors(&a, battn.as_ref(), bi, n_r, self.n_globals, true))
            .collect();
        Ok((out, records))
    }
}

fn bare_attention<T: Scalar>(block: &TransformerBlock<T>, x: &Tensor<T>, detach: bool) -> Result<Tensor<T>> {
    let q = block.attn.q.forward(x)?;
    let k = block.attn.k.forward(x)?;
    let scale = T::from_f64(1.0 / (x.shape()[2] as f64).sqrt());
    let a = q.matmul_nt(&k)?.scale(scale).softmax()?;
    Ok(if detach { a.detach() } else { a })
}

impl<T: Scalar> Module<T> for GlamBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.w_block.visit(&join(prefix, "wmsa"), f);
        if let Some(g) = &self.g_block {
            g.visit(&join(prefix, "gmsa"), f);
        }
    }
}

// ── Stage ─────────────────────────────────────────────────────────────────

/// A chain of GLAM blocks at one resolution with its own global-token bank.
/// Globals are created fresh on entry and dropped on exit.
#[derive(Clone, Debug)]
pub struct GlamStage<T: Scalar> {
    pub stage: usize,
    pub dim: usize,
    pub window: usize,
    pub bank: Option<GlobalTokenBank<T>>,
    /// Optional learned per-window offsets for the globals, `[N_r, N_g, C]`.
    pub global_pos: Option<Tensor<T>>,
    pub blocks: Vec<GlamBlock<T>>,
}

#[derive(Clone, Copy, Debug)]
pub struct StageShape {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub n_globals: usize,
    pub blocks: usize,
    pub gmsa: bool,
    pub global_pos: bool,
}

impl<T: Scalar> GlamStage<T> {
    pub fn new(stage: usize, shape: StageShape, rng: &mut SeededRng) -> Result<Self> {
        let n_g = shape.n_globals;
        let bank = (n_g > 0).then(|| GlobalTokenBank::new(n_g, shape.dim, rng));
        let n_r = (shape.height / shape.window) * (shape.width / shape.window);
        let global_pos = (n_g > 0 && shape.global_pos).then(|| init_param(&[n_r, n_g, shape.dim], rng, INIT_STD));
        let blocks = (0..shape.blocks)
            .map(|_| GlamBlock::new(shape.dim, shape.heads, n_g, shape.gmsa, rng))
            .collect::<Result<_>>()?;
        Ok(Self { stage, dim: shape.dim, window: shape.window, bank, global_pos, blocks })
    }

    pub fn n_globals(&self) -> usize {
        self.bank.as_ref().map_or(0, |b| b.n_globals())
    }

    pub fn set_gmsa(&mut self, enabled: bool) {
        self.blocks.iter_mut().for_each(|b| b.gmsa_enabled = enabled);
    }

    /// Initial `[B, N_r·(N_g+N_p), C]` sequence: partition, then prepend the
    /// shared globals to every window.
    pub fn enter(&self, tokens: &Tensor<T>, height: usize, width: usize) -> Result<(WindowedFeatureMap<T>, Tensor<T>)> {
        let wfm = window_partition(tokens, height, width, self.window, self.stage)?;
        let z = match &self.bank {
            Some(bank) => {
                let mut g = bank.expand(wfm.batch(), wfm.n_windows())?;
                if let Some(pos) = &self.global_pos {
                    g = g.add_broadcast(pos)?;
                }
                concat_globals(&wfm, &g)?
            }
            None => wfm.tokens.clone(),
        };
        Ok((wfm, z))
    }

    /// `[B, H·W, C] → [B, H·W, C]`; with `capture`, records of every block.
    pub fn forward(
        &self,
        tokens: &Tensor<T>,
        height: usize,
        width: usize,
        capture: bool,
    ) -> Result<(Tensor<T>, Vec<Vec<AttentionRecord>>)> {
        let (mut wfm, mut z) = self.enter(tokens, height, width)?;
        let mut records = Vec::new();
        for blk in &self.blocks {
            let (out, rec) = blk.forward(&z, capture)?;
            z = out;
            if let Some(rec) = rec {
                records.push(rec);
            }
        }
        wfm.tokens = split_globals(&z, self.n_globals())?.1;
        Ok((window_merge(&wfm)?, records))
    }
}

impl<T: Scalar> Module<T> for GlamStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        if let Some(bank) = &self.bank {
            bank.visit(&join(prefix, "globals"), f);
        }
        if let Some(p) = &self.global_pos {
            f(join(prefix, "global_pos"), p);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
}

// ── Composition of captured attention ─────────────────────────────────────

fn require_bare(record: &AttentionRecord) -> Result<&Array2<f64>> {
    if !record.bare {
        bail!(Contract, "record was not captured from the bare diagnostic form");
    }
    match &record.global {
        Some(b) => Ok(b),
        None => bail!(Contract, "record has no G-MSA attention (G-MSA disabled or no globals)"),
    }
}

/// `g_r = Σ_n B_rn (A_n,gg g_n + A_n,gw w_n)` by explicit matrix composition.
/// `g_prev` is `[N_r, N_g, C]`, `w_prev` is `[N_r, N_p, C]`.
pub fn bare_global_embedding(record: &AttentionRecord, g_prev: &Array3<f64>, w_prev: &Array3<f64>) -> Result<Array3<f64>> {
    require_bare(record)?;
    let (n_r, n_g, n_p) = (record.n_windows(), record.n_globals, record.n_patches);
    let c = g_prev.len_of(Axis(2));
    if g_prev.dim() != (n_r, n_g, c) || w_prev.dim() != (n_r, n_p, c) {
        bail!(
            Dimension,
            "embedding inputs {:?} / {:?} do not match record (N_r={n_r}, N_g={n_g}, N_p={n_p})",
            g_prev.shape(),
            w_prev.shape()
        );
    }
    let g_hat: Vec<Array2<f64>> = (0..n_r)
        .map(|n| {
            record.a_gg(n).dot(&g_prev.index_axis(Axis(0), n)) + record.a_gw(n).dot(&w_prev.index_axis(Axis(0), n))
        })
        .collect();
    let mut out = Array3::zeros((n_r, n_g, c));
    for r in 0..n_r {
        let mut acc = Array2::<f64>::zeros((n_g, c));
        for (n, gh) in g_hat.iter().enumerate() {
            acc += &record.b_block(r, n).expect("bare record has B").dot(gh);
        }
        out.index_axis_mut(Axis(0), r).assign(&acc);
    }
    Ok(out)
}

/// Effective attention of global token `k` of window `r` after one block.
#[derive(Clone, Debug)]
pub struct InducedAttention {
    pub token: usize,
    pub window: usize,
    /// `[N_r, N_p]`: weight on visual token `i` of window `r'` is
    /// `Σ_j b(k,r → j,r') · a(r'; j → N_g+i)`.
    pub patch_weights: Array2<f64>,
    /// Mass routed through the previous globals, per source window `r'`:
    /// `Σ_j b(k,r → j,r') · Σ_{i<N_g} a(r'; j → i)`.
    pub global_mass_by_window: Vec<f64>,
}

impl InducedAttention {
    pub fn patch_mass(&self) -> f64 {
        self.patch_weights.sum()
    }

    pub fn global_mass(&self) -> f64 {
        self.global_mass_by_window.iter().sum()
    }
}

/// Induced patch-level attention of global token `k` in window `r`.
/// Requires a bare-form record.
pub fn induced_attention(record: &AttentionRecord, k: usize, r: usize) -> Result<InducedAttention> {
    require_bare(record)?;
    compose_attention(record, k, r)
}

/// Same composition as [`induced_attention`] for any record that has G-MSA
/// attention, including head-averaged captures of a trained model. Outside
/// bare form the result is a diagnostic approximation, not an exact Jacobian.
pub fn compose_attention(record: &AttentionRecord, k: usize, r: usize) -> Result<InducedAttention> {
    let (n_r, n_g, n_p) = (record.n_windows(), record.n_globals, record.n_patches);
    if k >= n_g {
        bail!(Index, "global token {k} out of range (N_g = {n_g})");
    }
    if r >= n_r {
        bail!(Index, "window {r} out of range (N_r = {n_r})");
    }
    let Some(b) = &record.global else {
        bail!(Contract, "record has no G-MSA attention (G-MSA disabled or no globals)");
    };
    let row = r * n_g + k;
    let mut patch_weights = Array2::zeros((n_r, n_p));
    let mut global_mass_by_window = vec![0.0; n_r];
    for rp in 0..n_r {
        let a = record.a(rp);
        for j in 0..n_g {
            let bw = b[[row, rp * n_g + j]];
            for i in 0..n_p {
                patch_weights[[rp, i]] += bw * a[[j, n_g + i]];
            }
            global_mass_by_window[rp] += bw * (0..n_g).map(|i| a[[j, i]]).sum::<f64>();
        }
    }
    Ok(InducedAttention { token: k, window: r, patch_weights, global_mass_by_window })
}

// ── Random bare instances ─────────────────────────────────────────────────

/// A random bare-form problem in 64-bit: one block plus previous globals and
/// visual tokens for a single image.
pub struct BareInstance {
    pub block: GlamBlock<f64>,
    /// `[N_r, N_g, C]`
    pub g_prev: Array3<f64>,
    /// `[N_r, N_p, C]`
    pub w_prev: Array3<f64>,
}

/// Std of the random query/key weights in bare instances; large enough that
/// attention is far from uniform.
pub const BARE_WEIGHT_STD: f64 = 0.7;

impl BareInstance {
    pub fn random(n_r: usize, n_g: usize, n_p: usize, c: usize, seed: u64) -> Result<Self> {
        if n_g == 0 {
            bail!(Config, "bare instances need at least one global token");
        }
        let mut rng = SeededRng::new(seed);
        let block = GlamBlock::<f64>::new(c, 1, n_g, true, &mut rng)?;
        block.visit("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = BARE_WEIGHT_STD * rng.normal()));
        let g_prev = Array3::from_shape_simple_fn((n_r, n_g, c), || rng.normal());
        let w_prev = Array3::from_shape_simple_fn((n_r, n_p, c), || rng.normal());
        Ok(Self { block, g_prev, w_prev })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let (n_r, n_g, c) = self.g_prev.dim();
        (n_r, n_g, self.w_prev.len_of(Axis(1)), c)
    }

    /// `[1, N_r, N_g+N_p, C]` input tensor.
    pub fn input(&self, requires_grad: bool) -> Tensor<f64> {
        let (n_r, n_g, n_p, c) = self.dims();
        let z = ndarray::concatenate(Axis(1), &[self.g_prev.view(), self.w_prev.view()]).expect("same windows");
        let data: Vec<f64> = z.iter().copied().collect();
        let shape = [1, n_r, n_g + n_p, c];
        if requires_grad {
            Tensor::param(&shape, data).expect("shape")
        } else {
            Tensor::new(&shape, data).expect("shape")
        }
    }

    /// Runs the bare two-step forward; returns the output globals
    /// `[N_r, N_g, C]` and the record.
    pub fn run(&self) -> Result<(Array3<f64>, AttentionRecord)> {
        let (n_r, n_g, _, c) = self.dims();
        let (out, mut recs) = self.block.forward_bare(&self.input(false), false)?;
        let g = out.narrow(2, 0, n_g)?.to_vec();
        Ok((Array3::from_shape_vec((n_r, n_g, c), g).expect("shape"), recs.remove(0)))
    }
}

/// Summary of one bare equivalence check.
#[derive(Clone, Debug)]
pub struct BareCheck {
    /// `max |composition − two-step forward|`
    pub max_abs_diff: f64,
    /// `max |patch mass + global mass − 1|` over every `(k, r)`
    pub max_conservation_error: f64,
    /// Smallest induced patch weight over every `(k, r)` and patch.
    pub min_patch_weight: f64,
}

pub fn check_bare_instance(inst: &BareInstance) -> Result<BareCheck> {
    let (forward_g, record) = inst.run()?;
    let composed = bare_global_embedding(&record, &inst.g_prev, &inst.w_prev)?;
    let max_abs_diff = (&composed - &forward_g).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (n_r, n_g, _, _) = inst.dims();
    let mut max_conservation_error = 0.0f64;
    let mut min_patch_weight = f64::INFINITY;
    for r in 0..n_r {
        for k in 0..n_g {
            let ind = induced_attention(&record, k, r)?;
            max_conservation_error = max_conservation_error.max((ind.patch_mass() + ind.global_mass() - 1.0).abs());
            min_patch_weight = ind.patch_weights.iter().fold(min_patch_weight, |m, &v| m.min(v));
        }
    }
    Ok(BareCheck { max_abs_diff, max_conservation_error, min_patch_weight })
}

#[cfg(test)]
mod tests;
