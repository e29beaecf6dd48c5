//! Analytic parameter and FLOP counts, checked against the live model and
//! the instrumented operation counter, for plain windowed attention and for
//! global tokens.
//!
//! ```text
//! cargo run --release --example flops_report
//! ```

use glam_core::analysis::{comparison_csv, cost_report, live_params, measured_flops, vanilla};
use glam_core::config::{ModelConfig, StageSpec};
use glam_core::model::SegModel;

fn main() -> glam_core::Result<()> {
    let cfg = ModelConfig {
        stages: vec![StageSpec { blocks: 2, glam: true }; 3],
        n_globals: 10,
        ..ModelConfig::default()
    };
    let glam = cost_report(&cfg)?;
    let base = cost_report(&vanilla(&cfg))?;
    println!("{}", glam.to_csv());
    println!("{}", glam.attention_csv());
    print!("{}", comparison_csv(&[("vanilla".into(), base), ("glam".into(), glam.clone())]));

    let live = live_params(&SegModel::<f32>::new(&cfg, 0)?);
    let measured = measured_flops(&cfg)?;
    println!("\nparameters: analytic {} live {}", glam.total_params, live);
    println!("FLOPs:      analytic {} measured {}", glam.total_flops, measured);
    Ok(())
}
