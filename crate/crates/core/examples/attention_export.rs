//! Exports attention maps of a freshly initialised model: the induced
//! attention of one global token over the whole level and the in-window
//! attention of one visual token.
//!
//! ```text
//! cargo run --release --example attention_export [out_dir]
//! ```

use std::path::PathBuf;

use glam_core::analysis::{export_attention, AttentionTarget};
use glam_core::config::RunConfig;
use glam_core::data::{batch, KeyPatchTask};
use glam_core::model::SegModel;

fn main() -> glam_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "attention_maps".into()));
    let cfg = RunConfig::default();
    let model = SegModel::<f32>::new(&cfg.model, cfg.seed)?;
    let sample = KeyPatchTask::from_config(&cfg).sample(0)?;
    let (image, _) = batch::<f32>(&[&sample], cfg.model.patch)?;
    for (target, stem) in [
        (AttentionTarget::Token { k: 0, r: 5 }, "token0_window5"),
        (AttentionTarget::Patch { i: 3, r: 5 }, "patch3_window5"),
    ] {
        let (map, paths) = export_attention(&model, &image, 0, None, target, &out, stem)?;
        let peak = map.entries.iter().map(|e| e.2).fold(0.0f64, f64::max);
        println!("{stem}: {} weighted patches, peak {peak:.4}, global mass {:.4}", map.entries.len(), map.global_mass);
        println!("  {}", paths.pgm.display());
    }
    Ok(())
}
