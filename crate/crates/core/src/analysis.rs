//! Closed-form parameter and FLOP accounting, and attention-map export.
//!
//! FLOP formulas mirror the instrumented counter in [`crate::tensor::flops`]
//! op for op, so the analytic totals equal the measured ones exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{bail, Result};
use crate::glam::{compose_attention, AttentionRecord};
use crate::model::SegModel;
use crate::nn::MLP_RATIO;
use crate::tensor::flops::{self, GELU_PER_ELEMENT, LAYER_NORM_PER_ELEMENT, SOFTMAX_PER_ELEMENT};
use crate::tensor::{no_grad, Scalar, Tensor};
use crate::windowing::window_position;

/// Parameters and forward FLOPs of one layer applied to `n` tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost { params: self.params + o.params, flops: self.flops + o.flops }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

// ── Per-layer formulas ────────────────────────────────────────────────────

pub fn linear(n: usize, c_in: usize, c_out: usize, bias: bool) -> Cost {
    let (n, i, o) = (u(n), u(c_in), u(c_out));
    let b = u64::from(bias);
    Cost { params: i * o + b * o, flops: 2 * n * i * o + b * n * o }
}

pub fn layer_norm(n: usize, c: usize) -> Cost {
    Cost { params: 2 * u(c), flops: LAYER_NORM_PER_ELEMENT * u(n) * u(c) }
}

pub fn mlp(n: usize, c: usize) -> Cost {
    let h = MLP_RATIO * c;
    linear(n, c, h, true) + Cost { params: 0, flops: GELU_PER_ELEMENT * u(n) * u(h) } + linear(n, h, c, true)
}

/// Multi-head attention from `n_q` query tokens to `n_kv` key/value tokens
/// (one sequence; projections excluded from `core`).
pub fn attention(n_q: usize, n_kv: usize, c: usize, heads: usize) -> Cost {
    let proj = linear(n_q, c, c, true) + linear(n_kv, c, c, false) + linear(n_kv, c, c, true) + linear(n_q, c, c, true);
    let scores = u(n_q) * u(n_kv);
    let core = 2 * scores * u(c) + u(heads) * scores + SOFTMAX_PER_ELEMENT * u(heads) * scores + 2 * scores * u(c);
    proj + Cost { params: 0, flops: core }
}

/// Pre-norm transformer block over one sequence of `n` tokens.
pub fn transformer_block(n: usize, c: usize, heads: usize) -> Cost {
    let residuals = Cost { params: 0, flops: 2 * u(n) * u(c) };
    layer_norm(n, c) + attention(n, n, c, heads) + layer_norm(n, c) + mlp(n, c) + residuals
}

/// Shape of one GLAM level, in tokens.
#[derive(Clone, Copy, Debug)]
pub struct LevelShape {
    pub n_windows: usize,
    pub n_patches: usize,
    pub n_globals: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub gmsa: bool,
    pub global_pos: bool,
}

impl LevelShape {
    fn tokens(&self) -> usize {
        self.n_windows * self.n_patches
    }
}

/// W-MSA over every window, plus G-MSA over all globals when active.
pub fn glam_block(s: &LevelShape) -> Cost {
    let w = transformer_block(s.n_globals + s.n_patches, s.dim, s.heads);
    let mut cost = Cost { params: w.params, flops: u(s.n_windows) * w.flops };
    if s.gmsa && s.n_globals > 0 {
        cost += transformer_block(s.n_windows * s.n_globals, s.dim, s.heads);
    }
    cost
}

/// A GLAM level: global-token bank, optional per-window offsets, blocks.
pub fn glam_stage(s: &LevelShape) -> Cost {
    let (g, c, r) = (u(s.n_globals), u(s.dim), u(s.n_windows));
    let mut cost = Cost { params: g * c, flops: 0 };
    if s.global_pos && s.n_globals > 0 {
        cost += Cost { params: r * g * c, flops: r * g * c };
    }
    cost + glam_block(s) * s.blocks
}

impl std::ops::Mul<usize> for Cost {
    type Output = Cost;
    fn mul(self, k: usize) -> Cost {
        Cost { params: self.params * u(k), flops: self.flops * u(k) }
    }
}

/// The same level with every token in a single attention window and no
/// globals.
pub fn full_attention_stage(s: &LevelShape) -> Cost {
    transformer_block(s.tokens(), s.dim, s.heads) * s.blocks
}

// ── Whole-model report ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    /// `embed`, `enc{s}`, `merge{s}`, `up{s}`, `dec{s}`, `norm`, `head`.
    pub module: String,
    /// Resolution level, when the module belongs to one.
    pub level: Option<usize>,
    pub params: u64,
    pub flops: u64,
}

/// Windowed (with globals) versus full-attention FLOPs of one encoder level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionCost {
    pub level: usize,
    pub windowed_flops: u64,
    pub full_attention_flops: u64,
}

/// Per-module parameter counts and single-image forward FLOPs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub attention: Vec<AttentionCost>,
}

fn level_shape(cfg: &ModelConfig, s: usize, blocks: usize) -> LevelShape {
    let (h, w) = cfg.grid(s);
    let m = cfg.window;
    LevelShape {
        n_windows: (h / m) * (w / m),
        n_patches: m * m,
        n_globals: if blocks > 0 { cfg.globals_at(s) } else { 0 },
        dim: cfg.dim(s),
        heads: cfg.heads_at(s),
        blocks,
        gmsa: cfg.gmsa,
        global_pos: cfg.global_pos,
    }
}

/// Builds the full report for `cfg`. Counts are for a batch of one image.
pub fn cost_report(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let n_levels = cfg.n_stages();
    let tokens = |s: usize| {
        let (h, w) = cfg.grid(s);
        h * w
    };
    let mut rows = Vec::new();
    let mut push = |module: String, level: Option<usize>, c: Cost| {
        rows.push(CostRow { module, level, params: c.params, flops: c.flops });
    };
    let n0 = tokens(0);
    let p = cfg.patch;
    let embed = linear(n0, p * p * 3, cfg.channels, true)
        + Cost { params: u(n0) * u(cfg.channels), flops: u(n0) * u(cfg.channels) };
    push("embed".into(), None, embed);
    let mut attn_costs = Vec::new();
    for s in 0..n_levels {
        let shape = level_shape(cfg, s, cfg.stages[s].blocks);
        push(format!("enc{s}"), Some(s), glam_stage(&shape));
        attn_costs.push(AttentionCost {
            level: s,
            windowed_flops: glam_stage(&shape).flops,
            full_attention_flops: full_attention_stage(&shape).flops,
        });
        if s + 1 < n_levels {
            push(format!("merge{s}"), Some(s), linear(tokens(s + 1), 4 * cfg.dim(s), 2 * cfg.dim(s), true));
        }
    }
    for s in 0..n_levels.saturating_sub(1) {
        let (n_hi, n_lo) = (tokens(s), tokens(s + 1));
        let (cs, cl) = (cfg.dim(s), cfg.dim(s + 1));
        let skip_add = Cost { params: 0, flops: u(n_hi) * u(cs) };
        let up = if cfg.nlu {
            let mut c = linear(n_hi, cs, cs, true) + linear(n_lo, cl, cs, true) + attention(n_hi, n_lo, cs, cfg.heads_at(s));
            if cfg.nlu_residual {
                c += linear(n_hi, cl, cs, true) + Cost { params: 0, flops: u(n_hi) * u(cs) };
            }
            c
        } else {
            linear(n_hi, cl, cs, true)
        };
        push(format!("up{s}"), Some(s), up + skip_add);
        let blocks = if cfg.decoder_symmetric { cfg.stages[s].blocks } else { 0 };
        if blocks > 0 {
            push(format!("dec{s}"), Some(s), glam_stage(&level_shape(cfg, s, blocks)));
        }
    }
    push("norm".into(), None, layer_norm(n0, cfg.channels));
    push("head".into(), None, linear(n0, cfg.channels, cfg.classes, true));
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_flops = rows.iter().map(|r| r.flops).sum();
    Ok(CostReport { rows, total_params, total_flops, attention: attn_costs })
}

/// Closed-form parameter count (the report also carries FLOPs).
pub fn count_params(cfg: &ModelConfig) -> Result<CostReport> {
    cost_report(cfg)
}

/// Closed-form forward FLOPs for one image (the report also carries
/// parameter counts).
pub fn count_flops(cfg: &ModelConfig) -> Result<CostReport> {
    cost_report(cfg)
}

/// Parameters of a live model, by enumeration.
pub fn live_params<T: Scalar>(model: &SegModel<T>) -> u64 {
    use crate::nn::Module;
    u(model.num_params())
}

/// FLOPs counted by the instrumented ops during one forward pass of a
/// single zero image.
pub fn measured_flops(cfg: &ModelConfig) -> Result<u64> {
    let model = SegModel::<f32>::new(cfg, 0)?;
    let image = Tensor::<f32>::zeros(&[1, cfg.image_height, cfg.image_width, 3]);
    let (out, n) = flops::measure(|| no_grad(|| model.forward(&image)));
    out?;
    Ok(n)
}

impl CostReport {
    /// `module,level,params,flops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,level,params,flops\n");
        for r in &self.rows {
            let level = r.level.map(|l| l.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{}", r.module, level, r.params, r.flops).expect("write to string");
        }
        writeln!(s, "total,,{},{}", self.total_params, self.total_flops).expect("write to string");
        s
    }

    pub fn attention_csv(&self) -> String {
        let mut s = String::from("level,windowed_flops,full_attention_flops\n");
        for a in &self.attention {
            writeln!(s, "{},{},{}", a.level, a.windowed_flops, a.full_attention_flops).expect("write to string");
        }
        s
    }
}

/// One line per named config: totals and the increase over the first
/// (baseline) entry.
pub fn comparison_csv(entries: &[(String, CostReport)]) -> String {
    let mut s = String::from("variant,params,flops,extra_params,extra_flops\n");
    if let Some((_, base)) = entries.first() {
        for (name, r) in entries {
            let dp = r.total_params as i128 - base.total_params as i128;
            let df = r.total_flops as i128 - base.total_flops as i128;
            writeln!(s, "{name},{},{},{dp},{df}", r.total_params, r.total_flops).expect("write to string");
        }
    }
    s
}

/// The configuration with globals removed: plain windowed attention.
pub fn vanilla(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig { n_globals: 0, ..cfg.clone() }
}

// ── Attention export ──────────────────────────────────────────────────────

/// What to render: a global token's induced attention over the whole
/// level, or a visual token's attention within its window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionTarget {
    Token { k: usize, r: usize },
    Patch { i: usize, r: usize },
}

/// Spatial attention map at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    /// `(window, patch, weight)` for every patch that carries a weight.
    pub entries: Vec<(usize, usize, f64)>,
    /// Mass not on patches (on global tokens).
    pub global_mass: f64,
    pub head_averaged: bool,
    pub bare: bool,
}

impl AttentionMap {
    pub fn from_record(
        record: &AttentionRecord,
        height: usize,
        width: usize,
        window: usize,
        target: AttentionTarget,
    ) -> Result<Self> {
        let n_r = record.n_windows();
        let n_p = record.n_patches;
        if (height / window) * (width / window) != n_r || window * window != n_p {
            bail!(Dimension, "record with {n_r} windows of {n_p} patches does not tile {height}x{width}");
        }
        let mut entries = Vec::new();
        let global_mass = match target {
            AttentionTarget::Token { k, r } => {
                let ind = compose_attention(record, k, r)?;
                for rp in 0..n_r {
                    for i in 0..n_p {
                        entries.push((rp, i, ind.patch_weights[[rp, i]]));
                    }
                }
                ind.global_mass()
            }
            AttentionTarget::Patch { i, r } => {
                if r >= n_r {
                    bail!(Index, "window {r} out of range (N_r = {n_r})");
                }
                if i >= n_p {
                    bail!(Index, "patch {i} out of range (N_p = {n_p})");
                }
                let row = record.a(r).row(record.n_globals + i).to_owned();
                for j in 0..n_p {
                    entries.push((r, j, row[record.n_globals + j]));
                }
                row.iter().take(record.n_globals).sum()
            }
        };
        Ok(Self { height, width, window, entries, global_mass, head_averaged: record.head_averaged, bare: record.bare })
    }

    /// Dense `[height, width]` map; patches without an entry are zero.
    pub fn grid(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.height * self.width];
        for &(r, i, w) in &self.entries {
            let (row, col) = window_position(r, i, self.width, self.window);
            g[row * self.width + col] = w;
        }
        g
    }

    /// `win_index,patch_index,row,col,weight`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("win_index,patch_index,row,col,weight\n");
        for &(r, i, w) in &self.entries {
            let (row, col) = window_position(r, i, self.width, self.window);
            writeln!(s, "{r},{i},{row},{col},{w:.9e}").expect("write to string");
        }
        s
    }

    /// Min-max normalised 8-bit PGM (P5); a constant map renders as zeros.
    /// Returns the file bytes and the `(min, max)` used.
    pub fn to_pgm(&self) -> (Vec<u8>, f64, f64) {
        let g = self.grid();
        let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        for v in g {
            let px = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() } else { 0.0 };
            out.push(px.clamp(0.0, 255.0) as u8);
        }
        (out, lo, hi)
    }
}

/// Where an export went.
#[derive(Clone, Debug)]
pub struct ExportPaths {
    pub csv: PathBuf,
    pub pgm: PathBuf,
    pub meta: PathBuf,
}

/// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.meta.txt` into `dir`.
pub fn write_attention_map(
    map: &AttentionMap,
    dir: &Path,
    stem: &str,
    extra_meta: &[(&str, String)],
) -> Result<ExportPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = ExportPaths {
        csv: dir.join(format!("{stem}.csv")),
        pgm: dir.join(format!("{stem}.pgm")),
        meta: dir.join(format!("{stem}.meta.txt")),
    };
    std::fs::write(&paths.csv, map.to_csv())?;
    let (pgm, lo, hi) = map.to_pgm();
    std::fs::write(&paths.pgm, pgm)?;
    let mut meta = String::new();
    for (k, v) in extra_meta {
        writeln!(meta, "{k}: {v}").expect("write to string");
    }
    let lines = [
        ("height", map.height.to_string()),
        ("width", map.width.to_string()),
        ("window", map.window.to_string()),
        ("head_averaged", map.head_averaged.to_string()),
        ("bare", map.bare.to_string()),
        ("global_mass", format!("{:.9e}", map.global_mass)),
        ("norm_min", format!("{lo:.9e}")),
        ("norm_max", format!("{hi:.9e}")),
    ];
    for (k, v) in lines {
        writeln!(meta, "{k}: {v}").expect("write to string");
    }
    std::fs::write(&paths.meta, meta)?;
    Ok(paths)
}

/// Runs a capture-enabled forward pass on `image` (batch element 0) and
/// exports the attention of `block` (default: last) at encoder `level`.
pub fn export_attention<T: Scalar>(
    model: &SegModel<T>,
    image: &Tensor<T>,
    level: usize,
    block: Option<usize>,
    target: AttentionTarget,
    dir: &Path,
    stem: &str,
) -> Result<(AttentionMap, ExportPaths)> {
    let n = model.config.n_stages();
    if level >= n {
        bail!(Index, "stage {level} out of range ({n} encoder stages)");
    }
    let (_, captures) = no_grad(|| model.forward_with_capture(image, true))?;
    let cap = captures
        .iter()
        .find(|c| c.name == format!("enc{level}"))
        .expect("every encoder stage is captured");
    if cap.records.is_empty() {
        bail!(Index, "stage {level} has no blocks");
    }
    let b = block.unwrap_or(cap.records.len() - 1);
    if b >= cap.records.len() {
        bail!(Index, "block {b} out of range ({} blocks)", cap.records.len());
    }
    let record = &cap.records[b][0];
    let map = AttentionMap::from_record(record, cap.height, cap.width, cap.window, target)?;
    let (kind, a, r) = match target {
        AttentionTarget::Token { k, r } => ("token", k, r),
        AttentionTarget::Patch { i, r } => ("patch", i, r),
    };
    let meta = [
        ("stage", level.to_string()),
        ("block", b.to_string()),
        ("target", kind.to_string()),
        (if kind == "token" { "k" } else { "i" }, a.to_string()),
        ("r", r.to_string()),
    ];
    let paths = write_attention_map(&map, dir, stem, &meta)?;
    Ok((map, paths))
}
