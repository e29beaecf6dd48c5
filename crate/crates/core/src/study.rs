//! Global-token study on the key-patch task.
//!
//! One small single-level model is trained with different numbers of
//! global tokens per window, or with globals but no global attention step.
//! With one level there is no coarse level where a window covers the whole
//! image, so the key colour can only reach distant targets through the
//! global tokens.

use crate::config::{RunConfig, StageSpec};
use crate::error::Result;
use crate::train::run_key_patch;

/// Globals per window compared by the study.
pub const STUDY_GLOBALS: [usize; 3] = [0, 2, 10];
/// Accuracy on target pixels of a model that knows the target kind but
/// guesses the key bit.
pub const CHANCE_TARGET_ACCURACY: f64 = 0.5;

/// One model variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub n_globals: usize,
    pub gmsa: bool,
}

impl Arm {
    pub fn label(&self) -> String {
        if self.gmsa {
            format!("ng{}", self.n_globals)
        } else {
            format!("ng{}-nogmsa", self.n_globals)
        }
    }
}

/// 32×32 images cut into 4×4 patches and 2×2 windows of 4×4 tokens; the key
/// fills one corner window and 3 to 6 targets sit in the others.
pub fn study_config(arm: Arm, seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    let m = &mut cfg.model;
    m.image_height = 32;
    m.image_width = 32;
    m.patch = 4;
    m.window = 4;
    m.channels = 16;
    m.heads = 2;
    m.stages = vec![StageSpec { blocks: 2, glam: true }];
    m.n_globals = arm.n_globals;
    m.gmsa = arm.gmsa;
    m.init_std = 0.06;
    let t = &mut cfg.train;
    t.steps = 1500;
    t.batch = 8;
    t.lr = 2e-3;
    let k = &mut cfg.task;
    k.train_samples = 512;
    k.eval_samples = 128;
    k.key_patches = 4;
    k.targets_min = 3;
    k.targets_max = 6;
    k.target_max_patches = 2;
    cfg
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub seed: u64,
    pub target_accuracy: f64,
    pub miou: f64,
    pub final_loss: f64,
}

/// Trains and evaluates one arm for one seed.
pub fn run_arm(arm: Arm, seed: u64) -> Result<ArmOutcome> {
    let (_, log, report) = run_key_patch(&study_config(arm, seed))?;
    Ok(ArmOutcome {
        arm,
        seed,
        target_accuracy: report.target_accuracy.unwrap_or(0.0),
        miou: report.metrics.miou,
        final_loss: log.rows.last().map_or(f64::NAN, |r| r.loss),
    })
}

/// Mean target accuracy of the outcomes belonging to `arm`.
pub fn mean_target_accuracy(outcomes: &[ArmOutcome], arm: Arm) -> Option<f64> {
    let v: Vec<f64> = outcomes.iter().filter(|o| o.arm == arm).map(|o| o.target_accuracy).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
