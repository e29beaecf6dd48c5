//! The U-shaped segmentation network, its loss and its evaluation metrics.

use crate::config::ModelConfig;
use crate::error::{bail, Result};
use crate::glam::{AttentionRecord, GlamStage, StageShape};
use crate::nlu::{NluLayer, PatchExpand, Upsampler};
use crate::nn::{join, LayerNorm, Linear, Module, INIT_STD};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};
use crate::windowing::{PatchEmbed, PatchMerging};

/// Attention captured at one stage during a forward pass.
#[derive(Clone, Debug)]
pub struct StageCapture {
    /// `enc{s}` or `dec{s}`.
    pub name: String,
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    /// `records[block][batch]`.
    pub records: Vec<Vec<AttentionRecord>>,
}

/// Patch embedding → GLAM encoder levels joined by patch merging (the last
/// level is the bottleneck) → decoder levels of upsampling, skip addition
/// and GLAM blocks → layer norm → linear head at the finest token grid.
#[derive(Clone, Debug)]
pub struct SegModel<T: Scalar> {
    pub config: ModelConfig,
    pub embed: PatchEmbed<T>,
    pub encoder: Vec<GlamStage<T>>,
    pub merges: Vec<PatchMerging<T>>,
    /// `ups[s]` lifts level `s+1` to level `s`.
    pub ups: Vec<Upsampler<T>>,
    /// `decoder[s]` runs at level `s`; absent when it has no blocks.
    pub decoder: Vec<Option<GlamStage<T>>>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let c = config;
        let n = c.n_stages();
        let embed = PatchEmbed::new(c.image_height, c.image_width, c.patch, c.channels, &mut rng)?;
        let shape = |s: usize, blocks: usize| {
            let (height, width) = c.grid(s);
            StageShape {
                height,
                width,
                dim: c.dim(s),
                heads: c.heads_at(s),
                window: c.window,
                n_globals: if blocks > 0 { c.globals_at(s) } else { 0 },
                blocks,
                gmsa: c.gmsa,
                global_pos: c.global_pos,
            }
        };
        let mut encoder = Vec::with_capacity(n);
        let mut merges = Vec::with_capacity(n.saturating_sub(1));
        for s in 0..n {
            encoder.push(GlamStage::new(s, shape(s, c.stages[s].blocks), &mut rng)?);
            if s + 1 < n {
                merges.push(PatchMerging::new(c.dim(s), &mut rng));
            }
        }
        let mut ups = Vec::new();
        let mut decoder = Vec::new();
        for s in 0..n.saturating_sub(1) {
            let up = if c.nlu {
                Upsampler::Nlu(NluLayer::new(c.dim(s), c.dim(s + 1), c.heads_at(s), c.nlu_residual, &mut rng)?)
            } else {
                Upsampler::Expand(PatchExpand::new(c.dim(s), c.dim(s + 1), &mut rng))
            };
            ups.push(up);
            let blocks = if c.decoder_symmetric { c.stages[s].blocks } else { 0 };
            decoder.push(if blocks > 0 { Some(GlamStage::new(s, shape(s, blocks), &mut rng)?) } else { None });
        }
        let norm = LayerNorm::new(c.channels);
        let head = Linear::new(c.channels, c.classes, &mut rng);
        let model = Self { config: c.clone(), embed, encoder, merges, ups, decoder, norm, head };
        if c.init_std != INIT_STD {
            // every rank ≥ 2 tensor is a truncated-normal draw at INIT_STD;
            // rescaling the draws gives the same init at `init_std`
            let k = c.init_std / INIT_STD;
            model.visit("", &mut |_, t| {
                if t.rank() >= 2 {
                    t.data_mut().iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() * k));
                }
            });
        }
        Ok(model)
    }

    /// Enables or disables G-MSA in every stage.
    pub fn set_gmsa(&mut self, enabled: bool) {
        self.config.gmsa = enabled;
        self.encoder.iter_mut().for_each(|s| s.set_gmsa(enabled));
        self.decoder.iter_mut().flatten().for_each(|s| s.set_gmsa(enabled));
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.config.grid(0);
        h * w
    }

    /// `image [B, H, W, 3] → logits [B, (H/p)·(W/p), K]`.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_capture(image, false)?.0)
    }

    pub fn forward_with_capture(&self, image: &Tensor<T>, capture: bool) -> Result<(Tensor<T>, Vec<StageCapture>)> {
        let c = &self.config;
        let n = c.n_stages();
        let mut captures = Vec::new();
        let mut push = |name: String, level: usize, records: Vec<Vec<AttentionRecord>>| {
            if capture {
                let (height, width) = c.grid(level);
                captures.push(StageCapture { name, level, height, width, window: c.window, records });
            }
        };
        let mut x = self.embed.forward(image)?;
        let mut skips = Vec::with_capacity(n);
        for s in 0..n {
            let (h, w) = c.grid(s);
            let (out, rec) = self.encoder[s].forward(&x, h, w, capture)?;
            push(format!("enc{s}"), s, rec);
            x = out;
            if s + 1 < n {
                skips.push(x.clone());
                x = self.merges[s].forward(&x, h, w)?;
            }
        }
        for s in (0..n.saturating_sub(1)).rev() {
            let (lh, lw) = c.grid(s + 1);
            x = self.ups[s].forward(&skips[s], &x, lh, lw)?.add(&skips[s])?;
            if let Some(stage) = &self.decoder[s] {
                let (h, w) = c.grid(s);
                let (out, rec) = stage.forward(&x, h, w, capture)?;
                push(format!("dec{s}"), s, rec);
                x = out;
            }
        }
        let logits = self.head.forward(&self.norm.forward(&x)?)?;
        Ok((logits, captures))
    }
}

impl<T: Scalar> Module<T> for SegModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        for (s, st) in self.encoder.iter().enumerate() {
            st.visit(&join(prefix, &format!("enc{s}")), f);
            if let Some(m) = self.merges.get(s) {
                m.visit(&join(prefix, &format!("merge{s}")), f);
            }
        }
        for (s, up) in self.ups.iter().enumerate() {
            up.visit(&join(prefix, &format!("up{s}")), f);
            if let Some(st) = &self.decoder[s] {
                st.visit(&join(prefix, &format!("dec{s}")), f);
            }
        }
        self.norm.visit(&join(prefix, "norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

// ── Loss and predictions ──────────────────────────────────────────────────

/// Mean softmax cross-entropy over tokens whose label is not `ignore_index`.
/// `logits` is `[B, N, K]`, `labels` has `B·N` entries.
pub fn segmentation_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize], ignore_index: Option<usize>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 3 {
        bail!(Dimension, "logits must be [B, N, K], got {s:?}");
    }
    logits.reshape(&[s[0] * s[1], s[2]])?.cross_entropy(labels, ignore_index)
}

/// Arg-max class per token (lowest index on ties).
pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().expect("logits have a class axis");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

// ── Metrics ───────────────────────────────────────────────────────────────

/// Counts `(truth, prediction)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    /// Row-major `[truth][pred]`.
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            bail!(Dimension, "{} predictions for {} labels", pred.len(), truth.len());
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= self.classes || t >= self.classes {
                bail!(Index, "label {} outside 0..{}", p.max(t), self.classes);
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let k = self.classes;
        let tp = self.counts[c * k + c];
        let fp = (0..k).map(|t| self.counts[t * k + c]).sum::<u64>() - tp;
        let fn_ = (0..k).map(|p| self.counts[c * k + p]).sum::<u64>() - tp;
        (tp, fp, fn_)
    }

    pub fn metrics(&self) -> Metrics {
        let mut iou = Vec::with_capacity(self.classes);
        let mut dice = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let (tp, fp, fn_) = self.tp_fp_fn(c);
            if tp + fp + fn_ == 0 {
                iou.push(None);
                dice.push(None);
            } else {
                iou.push(Some(tp as f64 / (tp + fp + fn_) as f64));
                dice.push(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
            }
        }
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..self.classes).map(|c| self.counts[c * self.classes + c]).sum();
        Metrics {
            miou: mean_present(&iou),
            mean_dice: mean_present(&dice),
            iou,
            dice,
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Per-class IoU and Dice (`None` for classes absent from both prediction
/// and truth, which are excluded from the means).
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub iou: Vec<Option<f64>>,
    pub dice: Vec<Option<f64>>,
    pub miou: f64,
    pub mean_dice: f64,
    pub pixel_accuracy: f64,
}

pub fn metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<Metrics> {
    let mut c = Confusion::new(classes);
    c.add(pred, truth)?;
    Ok(c.metrics())
}

#[cfg(test)]
mod tests;
