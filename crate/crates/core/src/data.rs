//! Synthetic "key-patch" segmentation task.
//!
//! Each image holds a coloured key square in one corner window and one or
//! more target shapes in other windows. A target's class is
//! `1 + 2·kind + key`, where `kind` (its colour) is visible locally but
//! `key` (the key's colour) is only visible in the key window. Background
//! and key pixels are class 0. A model that sees a single window can get
//! `kind` right but can only guess `key`, so its accuracy on target pixels
//! is one half.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::{read_file, write_file, Record, RecordData};
use crate::config::{parse_pairs, RunConfig};
use crate::error::{bail, GlamError, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

pub const NUM_CLASSES: usize = 5;
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
pub const KEY_COLORS: [[f32; 3]; 2] = [[0.9, 0.1, 0.1], [0.1, 0.1, 0.9]];
pub const TARGET_COLORS: [[f32; 3]; 2] = [[0.1, 0.9, 0.1], [0.9, 0.9, 0.1]];

pub fn target_class(kind: usize, key_bit: usize) -> u8 {
    (1 + 2 * kind + key_bit) as u8
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyPatchTask {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Window side in patches.
    pub window: usize,
    pub targets_min: usize,
    pub targets_max: usize,
    pub key_patches: usize,
    pub target_max_patches: usize,
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[H, W]` class per pixel.
    pub labels: Vec<u8>,
}

impl Sample {
    /// Majority label of every `patch × patch` block, row-major over the
    /// token grid (ties go to the lower class).
    pub fn token_labels(&self, patch: usize) -> Vec<usize> {
        let (gh, gw) = (self.height / patch, self.width / patch);
        let mut out = Vec::with_capacity(gh * gw);
        for tr in 0..gh {
            for tc in 0..gw {
                let mut counts = [0usize; 256];
                for y in tr * patch..(tr + 1) * patch {
                    for x in tc * patch..(tc + 1) * patch {
                        counts[self.labels[y * self.width + x] as usize] += 1;
                    }
                }
                let mut best = 0;
                for (c, &n) in counts.iter().enumerate() {
                    if n > counts[best] {
                        best = c;
                    }
                }
                out.push(best);
            }
        }
        out
    }

    /// Horizontal flip (optional) followed by `quarter_turns` clockwise
    /// 90° rotations. Rotations by odd multiples need a square image.
    pub fn transformed(&self, flip: bool, quarter_turns: usize) -> Result<Sample> {
        let (h, w) = (self.height, self.width);
        let q = quarter_turns % 4;
        if q % 2 == 1 && h != w {
            bail!(Config, "90 degree rotation needs a square image, got {h}x{w}");
        }
        let mut image = vec![0.0; self.image.len()];
        let mut labels = vec![0; self.labels.len()];
        for y in 0..h {
            for x in 0..w {
                let x0 = if flip { w - 1 - x } else { x };
                let (ny, nx) = match q {
                    0 => (y, x0),
                    1 => (x0, h - 1 - y),
                    2 => (h - 1 - y, w - 1 - x0),
                    _ => (w - 1 - x0, y),
                };
                let (src, dst) = (y * w + x, ny * w + nx);
                labels[dst] = self.labels[src];
                image[dst * 3..dst * 3 + 3].copy_from_slice(&self.image[src * 3..src * 3 + 3]);
            }
        }
        Ok(Sample { height: h, width: w, image, labels })
    }
}

impl KeyPatchTask {
    pub fn from_config(cfg: &RunConfig) -> Self {
        let (m, t) = (&cfg.model, &cfg.task);
        Self {
            seed: cfg.seed,
            height: m.image_height,
            width: m.image_width,
            patch: m.patch,
            window: m.window,
            targets_min: t.targets_min,
            targets_max: t.targets_max,
            key_patches: t.key_patches,
            target_max_patches: t.target_max_patches,
            noise: t.noise,
        }
    }

    fn window_px(&self) -> usize {
        self.window * self.patch
    }

    /// Windows per column and per row of the image.
    pub fn window_grid(&self) -> (usize, usize) {
        (self.height / self.window_px(), self.width / self.window_px())
    }

    pub fn validate(&self) -> Result<()> {
        let wp = self.window_px();
        if wp == 0 || self.height % wp != 0 || self.width % wp != 0 {
            bail!(Generation, "image {}x{} is not tiled by {wp}-pixel windows", self.height, self.width);
        }
        let (wr, wc) = self.window_grid();
        if wr * wc < 2 {
            bail!(Generation, "key and targets need separate windows, but the image holds only one {wp}-pixel window");
        }
        if self.key_patches > self.window || self.target_max_patches > self.window {
            bail!(
                Generation,
                "key ({}) and targets (up to {}) must fit in a {}-patch window",
                self.key_patches,
                self.target_max_patches,
                self.window
            );
        }
        if self.targets_min == 0 || self.targets_max < self.targets_min {
            bail!(Generation, "need 1 <= targets_min <= targets_max");
        }
        Ok(())
    }

    /// Key colour of sample `index`: alternates with the index so every
    /// even-sized set is exactly balanced.
    pub fn key_bit(&self, index: usize) -> usize {
        (index & 1) ^ (self.seed & 1) as usize
    }

    /// Sample `index`; a pure function of `(seed, index)`.
    pub fn sample(&self, index: usize) -> Result<Sample> {
        self.validate()?;
        let mut rng = SeededRng::stream(self.seed, index as u64);
        let (h, w, p) = (self.height, self.width, self.patch);
        let wp = self.window_px();
        let (wr, wc) = self.window_grid();
        let mut image = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            for c in BACKGROUND {
                image.push((c as f64 + self.noise * rng.uniform_range(-1.0, 1.0)) as f32);
            }
        }
        let mut labels = vec![0u8; h * w];
        let mut paint = |y0: usize, x0: usize, side: usize, color: [f32; 3], label: u8| {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    image[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                    labels[y * w + x] = label;
                }
            }
        };

        let key_bit = self.key_bit(index);
        let corner = rng.below(0, 4);
        let (kwr, kwc) = (if corner / 2 == 1 { wr - 1 } else { 0 }, if corner % 2 == 1 { wc - 1 } else { 0 });
        let ks = self.key_patches * p;
        let ky = if kwr == 0 { 0 } else { h - ks };
        let kx = if kwc == 0 { 0 } else { w - ks };
        paint(ky, kx, ks, KEY_COLORS[key_bit], 0);

        let key_window = kwr * wc + kwc;
        let others: Vec<usize> = (0..wr * wc).filter(|&r| r != key_window).collect();
        let count = rng.below(self.targets_min, self.targets_max + 1);
        for _ in 0..count {
            let win = others[rng.below(0, others.len())];
            let side = rng.below(1, self.target_max_patches + 1);
            let oy = rng.below(0, self.window - side + 1);
            let ox = rng.below(0, self.window - side + 1);
            let kind = rng.below(0, 2);
            let (y0, x0) = ((win / wc) * wp + oy * p, (win % wc) * wp + ox * p);
            paint(y0, x0, side * p, TARGET_COLORS[kind], target_class(kind, key_bit));
        }
        Ok(Sample { height: h, width: w, image, labels })
    }

    pub fn generate(&self, n: usize) -> Result<Vec<Sample>> {
        self.generate_range(0, n)
    }

    /// Samples `start..start + n`.
    pub fn generate_range(&self, start: usize, n: usize) -> Result<Vec<Sample>> {
        if n == 0 {
            bail!(Generation, "sample count must be at least 1");
        }
        (start..start + n).map(|i| self.sample(i)).collect()
    }
}

/// Stacks samples into an image batch `[B, H, W, 3]` and the concatenated
/// token labels.
pub fn batch<T: Scalar>(samples: &[&Sample], patch: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let Some(first) = samples.first() else {
        bail!(Dimension, "empty batch");
    };
    let (h, w) = (first.height, first.width);
    let mut pixels = Vec::with_capacity(samples.len() * h * w * 3);
    let mut labels = Vec::with_capacity(samples.len() * (h / patch) * (w / patch));
    for s in samples {
        if (s.height, s.width) != (h, w) {
            bail!(Dimension, "mixed image sizes in one batch");
        }
        pixels.extend(s.image.iter().map(|&v| T::from_f64(v as f64)));
        labels.extend(s.token_labels(patch));
    }
    Ok((Tensor::new(&[samples.len(), h, w, 3], pixels)?, labels))
}

// ── On-disk dataset ───────────────────────────────────────────────────────

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// Generates `train` and `eval` splits (eval samples continue the index
/// sequence) and writes them with a manifest into `dir`.
pub fn write_dataset(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let task = KeyPatchTask::from_config(cfg);
    task.validate()?;
    let (n_train, n_eval) = (cfg.task.train_samples, cfg.task.eval_samples);
    if n_train == 0 {
        bail!(Generation, "train_samples must be at least 1");
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str("# key-patch dataset\n");
    manifest.push_str(&cfg.to_text());
    for i in 0..n_train + n_eval {
        let s = task.sample(i)?;
        let name = format!("sample_{i:05}.bin");
        let split = if i < n_train { Split::Train } else { Split::Eval };
        let records = [
            Record::new("image", &[s.height, s.width, 3], RecordData::F32(s.image))?,
            Record::new("label", &[s.height, s.width], RecordData::U8(s.labels))?,
        ];
        write_file(&dir.join(&name), &records)?;
        writeln!(manifest, "sample {name} {}", split.as_str()).expect("write to string");
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// Config the data was generated with.
    pub config: RunConfig,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

fn read_sample(path: &Path) -> Result<Sample> {
    let recs = read_file(path)?;
    let bad = || GlamError::Checkpoint(format!("{} is not an image/label sample", path.display()));
    let [img, lbl] = recs.as_slice() else { return Err(bad()) };
    match (&img.data, &lbl.data) {
        (RecordData::F32(image), RecordData::U8(labels))
            if img.name == "image" && lbl.name == "label" && img.shape.len() == 3 && img.shape[2] == 3 =>
        {
            let (height, width) = (img.shape[0], img.shape[1]);
            if lbl.shape != [height, width] {
                return Err(bad());
            }
            Ok(Sample { height, width, image: image.clone(), labels: labels.clone() })
        }
        _ => Err(bad()),
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| GlamError::Config(format!("cannot read {}: {e}", dir.join(MANIFEST).display())))?;
    let mut config_lines = String::new();
    let mut ds = Dataset { config: RunConfig::default(), train: Vec::new(), eval: Vec::new() };
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("sample ") {
            let mut parts = rest.split_whitespace();
            let (Some(name), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                bail!(Config, "malformed manifest line {line:?}");
            };
            let sample = read_sample(&dir.join(name))?;
            match split {
                "train" => ds.train.push(sample),
                "eval" => ds.eval.push(sample),
                _ => bail!(Config, "unknown split {split:?} in manifest"),
            }
        } else {
            config_lines.push_str(line);
            config_lines.push('\n');
        }
    }
    ds.config.apply(&parse_pairs(&config_lines)?)?;
    if ds.train.is_empty() {
        bail!(Config, "dataset {} has no training samples", dir.display());
    }
    Ok(ds)
}

/// Fraction of tokens whose true class is a target class (`> 0`) that are
/// predicted exactly.
pub fn target_accuracy(pred: &[usize], truth: &[usize]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        if t > 0 {
            total += 1;
            hit += usize::from(p == t);
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}
