//! Finite-difference gradient check of every layer type and of the full
//! segmentation loss, in 64-bit.
//!
//! ```text
//! cargo run --release --example gradient_check [seed]
//! ```

use glam_core::gradcheck::{gradient_suite, FD_STEP, FD_TOLERANCE};

fn main() -> glam_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    println!("central differences, h = {FD_STEP:e}, tolerance {FD_TOLERANCE:e}, seed {seed}");
    let reports = gradient_suite(seed, 8)?;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<48} {:.3e}  {status}", r.name, r.max_rel_error);
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} tensors checked, {failed} failed", reports.len());
    Ok(())
}
