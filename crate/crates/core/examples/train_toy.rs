//! Trains the small single-level model on the key-patch task with ten
//! global tokens per window, then evaluates it with the global attention
//! step switched off.
//!
//! ```text
//! cargo run --release --example train_toy [seed]
//! ```

use glam_core::config::RunConfig;
use glam_core::data::KeyPatchTask;
use glam_core::study::{study_config, Arm};
use glam_core::train::{evaluate, train};
use glam_core::model::SegModel;

fn main() -> glam_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg: RunConfig = study_config(Arm { n_globals: 10, gmsa: true }, seed);
    print!("{}", cfg.to_text());
    let task = KeyPatchTask::from_config(&cfg);
    let train_set = task.generate(cfg.task.train_samples)?;
    let eval_set = task.generate_range(cfg.task.train_samples, cfg.task.eval_samples)?;
    let mut model = SegModel::<f32>::new(&cfg.model, cfg.seed)?;
    train(&model, &train_set, &cfg.train, cfg.seed, |r| {
        if r.step % 256 == 0 {
            println!("step {:>5}  lr {:.2e}  loss {:.4}  mIoU {:.3}", r.step, r.lr, r.loss, r.miou);
        }
    })?;
    let with = evaluate(&model, &eval_set, 32)?;
    model.set_gmsa(false);
    let without = evaluate(&model, &eval_set, 32)?;
    println!("target-pixel accuracy with global attention:    {:.3}", with.target_accuracy.unwrap_or(0.0));
    println!("target-pixel accuracy without global attention: {:.3}", without.target_accuracy.unwrap_or(0.0));
    println!("mIoU {:.3}", with.metrics.miou);
    Ok(())
}
