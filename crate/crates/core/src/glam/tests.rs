use std::rc::Rc;

use ndarray::{Array2, Array3};

use super::*;
use crate::gradcheck::{check_gradients, random_projection};
use crate::windowing::window_partition;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
}

fn spread<M: Module<f64>>(m: &M, seed: u64, std: f64) {
    let mut r = SeededRng::new(seed);
    m.visit("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = std * r.normal()));
}

// ── concat / split ────────────────────────────────────────────────────────

#[test]
fn concat_without_globals_is_passthrough() {
    let wfm = window_partition(&randn(&[1, 16, 3], 1), 4, 4, 2, 0).unwrap();
    let g = Tensor::<f64>::zeros(&[1, 4, 0, 3]);
    assert_eq!(concat_globals(&wfm, &g).unwrap().to_vec(), wfm.tokens.to_vec());
}

#[test]
fn concat_puts_globals_first() {
    let wfm = window_partition(&randn(&[1, 16, 3], 2), 4, 4, 2, 0).unwrap();
    let g = randn(&[1, 4, 2, 3], 3);
    let z = concat_globals(&wfm, &g).unwrap();
    assert_eq!(z.shape(), &[1, 4, 6, 3]);
    for r in 0..4 {
        for c in 0..3 {
            assert_eq!(z.at(&[0, r, 0, c]), g.at(&[0, r, 0, c]));
            assert_eq!(z.at(&[0, r, 1, c]), g.at(&[0, r, 1, c]));
            assert_eq!(z.at(&[0, r, 2, c]), wfm.tokens.at(&[0, r, 0, c]));
        }
    }
    let (g2, w2) = split_globals(&z, 2).unwrap();
    assert_eq!(g2.to_vec(), g.to_vec());
    assert_eq!(w2.to_vec(), wfm.tokens.to_vec());
}

#[test]
fn concat_channel_mismatch_is_config_error() {
    let wfm = window_partition(&randn(&[1, 16, 3], 2), 4, 4, 2, 0).unwrap();
    let err = concat_globals(&wfm, &randn(&[1, 4, 2, 5], 3)).unwrap_err();
    assert!(matches!(err, crate::GlamError::Config(_)));
}

#[test]
fn globals_start_identical_in_every_window() {
    let bank = GlobalTokenBank::<f64>::new(3, 4, &mut SeededRng::new(4));
    let g = bank.expand(2, 5).unwrap();
    let d = g.to_vec();
    let init = bank.init.to_vec();
    for chunk in d.chunks(12) {
        assert_eq!(chunk, &init[..]);
    }
}

// ── block semantics ───────────────────────────────────────────────────────

fn block(dim: usize, heads: usize, n_g: usize, seed: u64) -> GlamBlock<f64> {
    let b = GlamBlock::new(dim, heads, n_g, true, &mut SeededRng::new(seed)).unwrap();
    spread(&b, seed + 1, 0.3);
    b
}

#[test]
fn disabled_gmsa_returns_windowed_globals() {
    let mut blk = block(4, 2, 2, 5);
    blk.gmsa_enabled = false;
    let z = randn(&[2, 3, 6, 4], 6);
    let (out, rec) = blk.forward(&z, true).unwrap();
    let step1 = blk.w_block.forward(&z.reshape(&[6, 6, 4]).unwrap(), false).unwrap().0;
    assert_eq!(out.to_vec(), step1.to_vec());
    assert!(rec.unwrap()[0].global.is_none());
}

#[test]
fn single_window_single_global() {
    let blk = block(4, 2, 1, 7);
    let z = randn(&[1, 1, 5, 4], 8);
    let (_, rec) = blk.forward(&z, true).unwrap();
    let b = rec.unwrap()[0].global.clone().unwrap();
    assert_eq!(b, Array2::from_elem((1, 1), 1.0));

    blk.g_block.as_ref().unwrap().zero_residual_branches();
    let (out, _) = blk.forward(&z, false).unwrap();
    let step1 = blk.w_block.forward(&z.reshape(&[1, 5, 4]).unwrap(), false).unwrap().0;
    assert_eq!(out.to_vec(), step1.to_vec());
}

#[test]
fn visual_tokens_do_not_see_other_windows_inside_a_block() {
    let blk = block(4, 2, 2, 9);
    let (n_r, l, c) = (4, 6, 4);
    let z = randn(&[1, n_r, l, c], 10);
    let (base, _) = blk.forward(&z, false).unwrap();
    let mut rng = SeededRng::new(11);
    for r in 0..n_r {
        let mut d = z.to_vec();
        for other in (0..n_r).filter(|&o| o != r) {
            for slot in 2..l {
                for ch in 0..c {
                    d[((other * l) + slot) * c + ch] += rng.normal();
                }
            }
        }
        let (pert, _) = blk.forward(&Tensor::new(z.shape(), d).unwrap(), false).unwrap();
        for slot in 2..l {
            for ch in 0..c {
                assert_eq!(base.at(&[0, r, slot, ch]), pert.at(&[0, r, slot, ch]));
            }
        }
    }
}

#[test]
fn captured_records_are_row_stochastic() {
    let blk = block(8, 2, 3, 12);
    let (_, rec) = blk.forward(&randn(&[2, 4, 7, 8], 13), true).unwrap();
    for r in rec.unwrap() {
        assert!(r.head_averaged && !r.bare);
        assert!(r.max_row_sum_error() <= 1e-12);
        assert_eq!(r.a_gw(0).dim(), (3, 4));
        assert_eq!(r.a_wg(1).dim(), (4, 3));
        assert_eq!(r.a_ww(2).dim(), (4, 4));
        assert_eq!(r.b_block(1, 3).unwrap().dim(), (3, 3));
    }
}

// ── bare composition ──────────────────────────────────────────────────────

#[test]
fn bare_composition_matches_two_step_forward() {
    let inst = BareInstance::random(4, 2, 4, 3, 14).unwrap();
    let chk = check_bare_instance(&inst).unwrap();
    assert!(chk.max_abs_diff < 1e-10, "{chk:?}");
    assert!(chk.max_conservation_error <= 1e-12, "{chk:?}");
    assert!(chk.min_patch_weight > 0.0, "{chk:?}");
}

#[test]
fn bare_single_window_reduces_to_one_block_product() {
    let inst = BareInstance::random(1, 3, 4, 5, 15).unwrap();
    let (_, rec) = inst.run().unwrap();
    let b11 = rec.b_block(0, 0).unwrap().to_owned();
    for row in b11.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    let g = inst.g_prev.index_axis(ndarray::Axis(0), 0);
    let w = inst.w_prev.index_axis(ndarray::Axis(0), 0);
    let want = b11.dot(&(rec.a_gg(0).dot(&g) + rec.a_gw(0).dot(&w)));
    let got = bare_global_embedding(&rec, &inst.g_prev, &inst.w_prev).unwrap();
    for (x, y) in got.iter().zip(want.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn globals_that_ignore_patches_are_independent_of_them() {
    let (n_r, n_g, n_p, c) = (3, 2, 4, 2);
    let l = n_g + n_p;
    let mut rng = SeededRng::new(16);
    let mut window = Array3::from_shape_simple_fn((n_r, l, l), || rng.uniform() + 0.1);
    for r in 0..n_r {
        for i in 0..l {
            if i < n_g {
                for j in n_g..l {
                    window[[r, i, j]] = 0.0;
                }
            }
            let s: f64 = (0..l).map(|j| window[[r, i, j]]).sum();
            (0..l).for_each(|j| window[[r, i, j]] /= s);
        }
    }
    let mut global = Array2::from_shape_simple_fn((n_r * n_g, n_r * n_g), || rng.uniform() + 0.1);
    for mut row in global.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    let rec = AttentionRecord { n_globals: n_g, n_patches: n_p, window, global: Some(global), bare: true, head_averaged: false };
    let g_prev = Array3::from_shape_simple_fn((n_r, n_g, c), || rng.normal());
    let w1 = Array3::from_shape_simple_fn((n_r, n_p, c), || rng.normal());
    let w2 = Array3::from_shape_simple_fn((n_r, n_p, c), || rng.normal());
    let e1 = bare_global_embedding(&rec, &g_prev, &w1).unwrap();
    let e2 = bare_global_embedding(&rec, &g_prev, &w2).unwrap();
    assert_eq!(e1, e2);
    let ind = induced_attention(&rec, 1, 2).unwrap();
    assert!(ind.patch_weights.iter().all(|&v| v == 0.0));
    assert!((ind.global_mass() - 1.0).abs() < 1e-12);
}

#[test]
fn embedding_rejects_non_bare_records() {
    let blk = block(4, 2, 2, 17);
    let (_, rec) = blk.forward(&randn(&[1, 2, 6, 4], 18), true).unwrap();
    let rec = &rec.unwrap()[0];
    let g = Array3::zeros((2, 2, 4));
    let w = Array3::zeros((2, 4, 4));
    assert!(matches!(bare_global_embedding(rec, &g, &w).unwrap_err(), crate::GlamError::Contract(_)));
    assert!(matches!(induced_attention(rec, 0, 0).unwrap_err(), crate::GlamError::Contract(_)));
    assert!(compose_attention(rec, 0, 0).is_ok());
}

#[test]
fn induced_attention_index_errors() {
    let (_, rec) = BareInstance::random(2, 2, 4, 3, 19).unwrap().run().unwrap();
    assert!(matches!(induced_attention(&rec, 2, 0).unwrap_err(), crate::GlamError::Index(_)));
    assert!(matches!(induced_attention(&rec, 0, 2).unwrap_err(), crate::GlamError::Index(_)));
}

#[test]
fn induced_single_window_single_global_is_a_gw_row() {
    let (_, rec) = BareInstance::random(1, 1, 4, 3, 20).unwrap().run().unwrap();
    let ind = induced_attention(&rec, 0, 0).unwrap();
    let row = rec.a_gw(0);
    for i in 0..4 {
        assert!((ind.patch_weights[[0, i]] - row[[0, i]]).abs() < 1e-15);
    }
}

/// With attention held constant the bare block is linear, so
/// `∂g_{k,r}[ch] / ∂w_{i,r'}[ch]` is exactly the induced weight and
/// `∂g_{k,r}[ch] / ∂w[ch']` vanishes for `ch' ≠ ch`.
#[test]
fn induced_weights_equal_the_bare_jacobian() {
    let inst = BareInstance::random(3, 2, 4, 3, 21).unwrap();
    let (n_r, n_g, n_p, c) = inst.dims();
    let l = n_g + n_p;
    let (_, rec) = inst.run().unwrap();
    for r in 0..n_r {
        for k in 0..n_g {
            let z = inst.input(true);
            let (out, _) = inst.block.forward_bare(&z, true).unwrap();
            let ch = (r + k) % c;
            let idx = ((r * l) + k) * c + ch;
            out.gather(Rc::new(vec![idx]), &[]).unwrap().backward().unwrap();
            let grad = z.grad().unwrap();
            let ind = induced_attention(&rec, k, r).unwrap();
            for rp in 0..n_r {
                let mut gmass = 0.0;
                for slot in 0..l {
                    for ch2 in 0..c {
                        let g = grad[((rp * l) + slot) * c + ch2];
                        if ch2 != ch {
                            assert_eq!(g, 0.0);
                        } else if slot >= n_g {
                            assert!((g - ind.patch_weights[[rp, slot - n_g]]).abs() < 1e-12);
                        } else {
                            gmass += g;
                        }
                    }
                }
                assert!((gmass - ind.global_mass_by_window[rp]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn bare_detach_only_changes_gradients() {
    let inst = BareInstance::random(2, 2, 4, 3, 22).unwrap();
    let z = inst.input(false);
    let a = inst.block.forward_bare(&z, false).unwrap().0.to_vec();
    let b = inst.block.forward_bare(&z, true).unwrap().0.to_vec();
    assert_eq!(a, b);
}

// ── stage ─────────────────────────────────────────────────────────────────

fn stage(n_g: usize, blocks: usize, gmsa: bool, seed: u64) -> GlamStage<f64> {
    stage_with_pos(n_g, blocks, gmsa, false, seed)
}

fn stage_with_pos(n_g: usize, blocks: usize, gmsa: bool, global_pos: bool, seed: u64) -> GlamStage<f64> {
    let shape = StageShape {
        height: 4,
        width: 4,
        dim: 4,
        heads: 2,
        window: 2,
        n_globals: n_g,
        blocks,
        gmsa,
        global_pos,
    };
    let st = GlamStage::new(0, shape, &mut SeededRng::new(seed)).unwrap();
    spread(&st, seed + 1, 0.6);
    st
}

fn cross_window_change(st: &GlamStage<f64>, seed: u64) -> f64 {
    let x = randn(&[1, 16, 4], seed);
    let (base, _) = st.forward(&x, 4, 4, false).unwrap();
    // perturb every token outside window 0 (window 0 = rows 0..2, cols 0..2)
    let mut d = x.to_vec();
    let mut rng = SeededRng::new(seed + 1);
    for row in 0..4 {
        for col in 0..4 {
            if row >= 2 || col >= 2 {
                for ch in 0..4 {
                    d[(row * 4 + col) * 4 + ch] += rng.normal();
                }
            }
        }
    }
    let (pert, _) = st.forward(&Tensor::new(x.shape(), d).unwrap(), 4, 4, false).unwrap();
    let mut worst = 0.0f64;
    for row in 0..2 {
        for col in 0..2 {
            for ch in 0..4 {
                let t = (row * 4 + col) * 4 + ch;
                worst = worst.max((base.data()[t] - pert.data()[t]).abs());
            }
        }
    }
    worst
}

#[test]
fn ablation_separates_windows_and_gmsa_connects_them() {
    let mut st = stage(2, 2, true, 23);
    assert!(cross_window_change(&st, 24) > 1e-6);
    st.set_gmsa(false);
    assert_eq!(cross_window_change(&st, 24), 0.0);
    // a single block cannot carry information to visual tokens
    let single = stage(2, 1, true, 25);
    assert_eq!(cross_window_change(&single, 26), 0.0);
    // no globals at all
    assert_eq!(cross_window_change(&stage(0, 2, true, 27), 28), 0.0);
}

#[test]
fn stage_shapes_and_records() {
    let st = stage(3, 2, true, 29);
    let (out, recs) = st.forward(&randn(&[2, 16, 4], 30), 4, 4, true).unwrap();
    assert_eq!(out.shape(), &[2, 16, 4]);
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].len(), 2);
    assert_eq!(recs[0][0].window.dim(), (4, 7, 7));
    assert_eq!(recs[0][0].global.as_ref().unwrap().dim(), (12, 12));
}

#[test]
fn gradients_through_glam_block_and_global_tokens() {
    // per-window offsets keep the globals distinct so no gradient is tiny
    let st = stage_with_pos(2, 2, true, true, 31);
    let x = Tensor::param(&[1, 16, 4], randn(&[1, 16, 4], 32).to_vec()).unwrap();
    let mut params = st.parameters();
    params.push(("input".into(), x.clone()));
    assert!(params.iter().any(|(n, _)| n == "globals.tokens"));
    let reports = check_gradients(&params, || random_projection(&st.forward(&x, 4, 4, false)?.0, 33), 12, 3).unwrap();
    for r in reports {
        assert!(r.passed(), "{} {} {:?}", r.name, r.max_rel_error, r.worst);
    }
}

#[test]
fn bare_gradients_without_detach_pass_finite_differences() {
    let inst = BareInstance::random(2, 2, 4, 3, 34).unwrap();
    let z = inst.input(true);
    let mut params = inst.block.parameters();
    params.retain(|(n, _)| n.contains(".attn.q.") || n.contains(".attn.k."));
    params.push(("input".into(), z.clone()));
    let reports =
        check_gradients(&params, || random_projection(&inst.block.forward_bare(&z, false)?.0, 35), 20, 4).unwrap();
    for r in reports {
        assert!(r.passed(), "{} {} {:?}", r.name, r.max_rel_error, r.worst);
    }
}

#[test]
fn global_pos_option_adds_per_window_offsets() {
    let shape = StageShape {
        height: 4,
        width: 4,
        dim: 4,
        heads: 2,
        window: 2,
        n_globals: 2,
        blocks: 1,
        gmsa: true,
        global_pos: true,
    };
    let st = GlamStage::<f64>::new(0, shape, &mut SeededRng::new(36)).unwrap();
    assert_eq!(st.global_pos.as_ref().unwrap().shape(), &[4, 2, 4]);
    let (_, z) = st.enter(&randn(&[1, 16, 4], 37), 4, 4).unwrap();
    assert_ne!(z.at(&[0, 0, 0, 0]), z.at(&[0, 1, 0, 0]));
}
