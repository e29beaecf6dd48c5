//! Generates a few key-patch samples, prints their token labels and writes
//! the images as PPM files.
//!
//! ```text
//! cargo run --release --example dataset [out_dir]
//! ```
//!
//! Labels: 0 background and key, then `1 + 2·kind + key_bit` for targets.

use std::path::PathBuf;

use glam_core::config::RunConfig;
use glam_core::data::KeyPatchTask;

fn main() -> glam_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "keypatch_samples".into()));
    std::fs::create_dir_all(&out)?;
    let mut cfg = RunConfig::default();
    cfg.model.image_height = 32;
    cfg.model.image_width = 32;
    cfg.task.key_patches = 4;
    let task = KeyPatchTask::from_config(&cfg);
    for index in 0..4 {
        let s = task.sample(index)?;
        println!("sample {index}: key bit {}", task.key_bit(index));
        let labels = s.token_labels(cfg.model.patch);
        let cols = s.width / cfg.model.patch;
        for row in labels.chunks(cols) {
            let line: String = row.iter().map(|&l| if l == 0 { '.' } else { char::from(b'0' + l as u8) }).collect();
            println!("  {line}");
        }
        let mut ppm = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
        ppm.extend(s.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        std::fs::write(out.join(format!("sample_{index}.ppm")), ppm)?;
    }
    println!("images written to {}", out.display());
    Ok(())
}
