//! Run configuration: model shape, training hyper-parameters, synthetic task
//! and seed, read from flat `key = value` files.
//!
//! ```text
//! # comments start with '#'
//! image_size = 64
//! stages = 2,2
//! glam = true,true
//! ```
//!
//! Unknown keys are rejected. [`RunConfig::to_text`] writes every key in a
//! fixed order, so a resolved config round-trips byte-for-byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{bail, GlamError, Result};
use crate::nn::INIT_STD;

/// One encoder resolution level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    /// `false` turns the level into plain windowed attention (no globals).
    pub glam: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    /// Channels at the finest level; level `s` has `C·2^s`.
    pub channels: usize,
    /// Window side `M` in tokens.
    pub window: usize,
    pub stages: Vec<StageSpec>,
    /// Global tokens per window `N_g`.
    pub n_globals: usize,
    pub classes: usize,
    /// Heads at the finest level; level `s` has `heads·2^s`.
    pub heads: usize,
    pub gmsa: bool,
    pub nlu: bool,
    /// Decoder levels repeat the encoder's block counts; otherwise the
    /// decoder only upsamples.
    pub decoder_symmetric: bool,
    /// Learned per-window offsets added to the globals on entry.
    pub global_pos: bool,
    pub nlu_residual: bool,
    /// Standard deviation of the truncated-normal weight initialisation.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            patch: 4,
            channels: 32,
            window: 4,
            stages: vec![StageSpec { blocks: 2, glam: true }; 2],
            n_globals: 4,
            classes: 5,
            heads: 2,
            gmsa: true,
            nlu: true,
            decoder_symmetric: true,
            global_pos: false,
            nlu_residual: true,
            init_std: INIT_STD,
        }
    }
}

impl ModelConfig {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    /// Token grid `(rows, cols)` at level `s`.
    pub fn grid(&self, s: usize) -> (usize, usize) {
        (self.image_height / self.patch >> s, self.image_width / self.patch >> s)
    }

    pub fn dim(&self, s: usize) -> usize {
        self.channels << s
    }

    pub fn heads_at(&self, s: usize) -> usize {
        self.heads << s
    }

    /// Globals per window at level `s` (zero for plain windowed levels).
    pub fn globals_at(&self, s: usize) -> usize {
        if self.stages[s].glam {
            self.n_globals
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch", self.patch),
            ("channels", self.channels),
            ("window", self.window),
            ("classes", self.classes),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                bail!(Config, "{name} must be positive");
            }
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            bail!(Config, "init_std must be finite and positive");
        }
        if self.stages.is_empty() {
            bail!(Config, "at least one stage is required");
        }
        if self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            bail!(
                Config,
                "image {}x{} is not divisible by patch size {}",
                self.image_height,
                self.image_width,
                self.patch
            );
        }
        if self.channels % self.heads != 0 {
            bail!(Config, "channels {} not divisible by heads {}", self.channels, self.heads);
        }
        let factor = self.window << (self.n_stages() - 1);
        let (gh, gw) = self.grid(0);
        if (self.image_height / self.patch) % factor != 0 || (self.image_width / self.patch) % factor != 0 {
            bail!(
                Config,
                "token grid {gh}x{gw} must be divisible by 2^(stages-1)*window = {factor} \
                 (image sides must be multiples of {})",
                factor * self.patch
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Total optimiser steps; `0` means `epochs · ceil(n / batch)`.
    pub steps: usize,
    pub lr: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 8,
            steps: 0,
            lr: 6e-5,
            poly_power: 1.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
        }
    }
}

/// Parameters of the key-patch task that are not implied by the model
/// (image size and window come from [`ModelConfig`]).
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub targets_min: usize,
    pub targets_max: usize,
    /// Key square side, in patches.
    pub key_patches: usize,
    /// Largest target side, in patches.
    pub target_max_patches: usize,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            train_samples: 256,
            eval_samples: 64,
            targets_min: 1,
            targets_max: 3,
            key_patches: 2,
            target_max_patches: 2,
            noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, model: ModelConfig::default(), train: TrainConfig::default(), task: TaskConfig::default() }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| GlamError::Config(format!("invalid value {raw:?} for key {key}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!(Config, "invalid boolean {raw:?} for key {key}"),
    }
}

fn parse_list<V>(key: &str, raw: &str, f: impl Fn(&str, &str) -> Result<V>) -> Result<Vec<V>> {
    raw.split(',').map(|s| f(key, s.trim())).collect()
}

fn join_list<V: ToString>(items: impl Iterator<Item = V>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses `key = value` lines into a map; later duplicates are an error.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Config, "line {}: expected `key = value`, got {line:?}", no + 1);
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!(Config, "line {}: empty key", no + 1);
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            bail!(Config, "line {}: duplicate key {k}", no + 1);
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GlamError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Overwrites fields named in `pairs`; unknown keys are an error.
    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        let mut glam: Option<Vec<bool>> = None;
        let mut blocks: Option<Vec<usize>> = None;
        let (m, t, k) = (&mut self.model, &mut self.train, &mut self.task);
        for (key, raw) in pairs {
            let key = key.as_str();
            let raw = raw.as_str();
            match key {
                "seed" => self.seed = parse_value(key, raw)?,
                "image_size" => {
                    m.image_height = parse_value(key, raw)?;
                    m.image_width = m.image_height;
                }
                "image_height" => m.image_height = parse_value(key, raw)?,
                "image_width" => m.image_width = parse_value(key, raw)?,
                "patch" => m.patch = parse_value(key, raw)?,
                "channels" => m.channels = parse_value(key, raw)?,
                "window" => m.window = parse_value(key, raw)?,
                "stages" => blocks = Some(parse_list(key, raw, parse_value)?),
                "glam" => glam = Some(parse_list(key, raw, parse_bool)?),
                "n_globals" => m.n_globals = parse_value(key, raw)?,
                "classes" => m.classes = parse_value(key, raw)?,
                "heads" => m.heads = parse_value(key, raw)?,
                "gmsa" => m.gmsa = parse_bool(key, raw)?,
                "nlu" => m.nlu = parse_bool(key, raw)?,
                "decoder_symmetric" => m.decoder_symmetric = parse_bool(key, raw)?,
                "global_pos" => m.global_pos = parse_bool(key, raw)?,
                "nlu_residual" => m.nlu_residual = parse_bool(key, raw)?,
                "init_std" => m.init_std = parse_value(key, raw)?,
                "epochs" => t.epochs = parse_value(key, raw)?,
                "batch" => t.batch = parse_value(key, raw)?,
                "steps" => t.steps = parse_value(key, raw)?,
                "lr" => t.lr = parse_value(key, raw)?,
                "poly_power" => t.poly_power = parse_value(key, raw)?,
                "weight_decay" => t.weight_decay = parse_value(key, raw)?,
                "beta1" => t.beta1 = parse_value(key, raw)?,
                "beta2" => t.beta2 = parse_value(key, raw)?,
                "eps" => t.eps = parse_value(key, raw)?,
                "augment" => t.augment = parse_bool(key, raw)?,
                "train_samples" => k.train_samples = parse_value(key, raw)?,
                "eval_samples" => k.eval_samples = parse_value(key, raw)?,
                "targets_min" => k.targets_min = parse_value(key, raw)?,
                "targets_max" => k.targets_max = parse_value(key, raw)?,
                "key_patches" => k.key_patches = parse_value(key, raw)?,
                "target_max_patches" => k.target_max_patches = parse_value(key, raw)?,
                "noise" => k.noise = parse_value(key, raw)?,
                _ => bail!(Config, "unknown config key {key:?}"),
            }
        }
        if let Some(b) = blocks {
            let prev = std::mem::take(&mut m.stages);
            m.stages = b
                .iter()
                .enumerate()
                .map(|(i, &blocks)| StageSpec { blocks, glam: prev.get(i).map_or(true, |s| s.glam) })
                .collect();
        }
        if let Some(g) = glam {
            if g.len() == 1 {
                m.stages.iter_mut().for_each(|s| s.glam = g[0]);
            } else if g.len() == m.stages.len() {
                m.stages.iter_mut().zip(g).for_each(|(s, g)| s.glam = g);
            } else {
                bail!(Config, "glam lists {} flags for {} stages", g.len(), m.stages.len());
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch == 0 {
            bail!(Config, "batch must be positive");
        }
        if t.epochs == 0 && t.steps == 0 {
            bail!(Config, "one of epochs or steps must be positive");
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            bail!(Config, "learning rate must be finite and non-negative");
        }
        let k = &self.task;
        if k.targets_min == 0 || k.targets_max < k.targets_min {
            bail!(Config, "need 1 <= targets_min <= targets_max");
        }
        if k.key_patches == 0 || k.target_max_patches == 0 {
            bail!(Config, "key_patches and target_max_patches must be positive");
        }
        Ok(())
    }

    /// Every key in a fixed order.
    pub fn to_text(&self) -> String {
        let (m, t, k) = (&self.model, &self.train, &self.task);
        let mut s = String::new();
        let mut put = |key: &str, v: String| writeln!(s, "{key} = {v}").expect("write to string");
        put("seed", self.seed.to_string());
        put("image_height", m.image_height.to_string());
        put("image_width", m.image_width.to_string());
        put("patch", m.patch.to_string());
        put("channels", m.channels.to_string());
        put("window", m.window.to_string());
        put("stages", join_list(m.stages.iter().map(|s| s.blocks)));
        put("glam", join_list(m.stages.iter().map(|s| s.glam)));
        put("n_globals", m.n_globals.to_string());
        put("classes", m.classes.to_string());
        put("heads", m.heads.to_string());
        put("gmsa", m.gmsa.to_string());
        put("nlu", m.nlu.to_string());
        put("decoder_symmetric", m.decoder_symmetric.to_string());
        put("global_pos", m.global_pos.to_string());
        put("nlu_residual", m.nlu_residual.to_string());
        put("init_std", m.init_std.to_string());
        put("epochs", t.epochs.to_string());
        put("batch", t.batch.to_string());
        put("steps", t.steps.to_string());
        put("lr", format!("{:e}", t.lr));
        put("poly_power", t.poly_power.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("beta1", t.beta1.to_string());
        put("beta2", t.beta2.to_string());
        put("eps", format!("{:e}", t.eps));
        put("augment", t.augment.to_string());
        put("train_samples", k.train_samples.to_string());
        put("eval_samples", k.eval_samples.to_string());
        put("targets_min", k.targets_min.to_string());
        put("targets_max", k.targets_max.to_string());
        put("key_patches", k.key_patches.to_string());
        put("target_max_patches", k.target_max_patches.to_string());
        put("noise", k.noise.to_string());
        s
    }
}
