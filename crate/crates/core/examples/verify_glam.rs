//! Checks the composed form of the global-token embedding against the
//! two-step forward pass on random bare instances, and prints the induced
//! attention of one global token.
//!
//! ```text
//! cargo run --release --example verify_glam
//! ```

use glam_core::glam::{check_bare_instance, induced_attention, BareInstance};

fn main() -> glam_core::Result<()> {
    let mut worst = (0.0f64, 0.0f64);
    let mut count = 0;
    for (i, &n_r) in [1, 2, 4, 9].iter().enumerate() {
        for (j, &n_g) in [1, 2, 4, 10].iter().enumerate() {
            for &n_p in &[4, 16] {
                for &c in &[3, 8] {
                    let seed = (i * 100 + j * 10 + n_p + c) as u64;
                    let check = check_bare_instance(&BareInstance::random(n_r, n_g, n_p, c, seed)?)?;
                    worst.0 = worst.0.max(check.max_abs_diff);
                    worst.1 = worst.1.max(check.max_conservation_error);
                    count += 1;
                }
            }
        }
    }
    println!("{count} instances");
    println!("max |composed - forward|      = {:.3e}", worst.0);
    println!("max |patch + global mass - 1| = {:.3e}", worst.1);

    let inst = BareInstance::random(4, 2, 4, 3, 7)?;
    let (_, record) = inst.run()?;
    let ind = induced_attention(&record, 0, 1)?;
    println!("\nglobal token 0 of window 1, induced attention per window:");
    for (r, row) in ind.patch_weights.outer_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("  window {r}: [{}]  globals {:.4}", cells.join(", "), ind.global_mass_by_window[r]);
    }
    println!("patch mass {:.6} + global mass {:.6} = {:.15}", ind.patch_mass(), ind.global_mass(), ind.patch_mass() + ind.global_mass());
    Ok(())
}
