//! Trains the key-patch study model with 0, 2 and 10 global tokens per
//! window and with the global attention step disabled, and prints the
//! target-pixel accuracy of each arm.
//!
//! ```text
//! cargo run --release --example global_token_study [seeds]
//! ```

use glam_core::study::{mean_target_accuracy, run_arm, Arm, CHANCE_TARGET_ACCURACY, STUDY_GLOBALS};

fn main() -> glam_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut arms: Vec<Arm> = STUDY_GLOBALS.iter().map(|&n_globals| Arm { n_globals, gmsa: true }).collect();
    arms.push(Arm { n_globals: 10, gmsa: false });
    let mut outcomes = Vec::new();
    for &arm in &arms {
        for seed in 0..seeds {
            let o = run_arm(arm, seed)?;
            println!("{:<12} seed {seed}: target acc {:.3}  mIoU {:.3}", arm.label(), o.target_accuracy, o.miou);
            outcomes.push(o);
        }
    }
    println!("\nchance on target pixels: {CHANCE_TARGET_ACCURACY}");
    for &arm in &arms {
        println!("{:<12} mean target acc {:.3}", arm.label(), mean_target_accuracy(&outcomes, arm).unwrap_or(f64::NAN));
    }
    Ok(())
}
