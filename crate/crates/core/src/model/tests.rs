use super::*;
use crate::config::StageSpec;
use crate::gradcheck::check_gradients;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.normal()).collect()).unwrap()
}

fn spread<M: Module<f64>>(m: &M, seed: u64, std: f64) {
    let mut r = SeededRng::new(seed);
    m.visit("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = std * r.normal()));
}

fn tiny(stages: &[usize], n_g: usize) -> ModelConfig {
    let s = stages.len();
    let side = 4 << (s - 1);
    ModelConfig {
        image_height: side * 2,
        image_width: side * 2,
        patch: 2,
        channels: 4,
        window: 2,
        stages: stages.iter().map(|&blocks| StageSpec { blocks, glam: true }).collect(),
        n_globals: n_g,
        classes: 3,
        heads: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn logits_have_one_row_per_token() {
    let cfg = tiny(&[1, 1], 2);
    let m = SegModel::<f64>::new(&cfg, 1).unwrap();
    let out = m.forward(&randn(&[2, 16, 16, 3], 2)).unwrap();
    assert_eq!(out.shape(), &[2, 64, 3]);
    assert!(out.data().iter().all(|v| v.is_finite()));
}

#[test]
fn single_class_softmax_is_one() {
    let mut cfg = tiny(&[1], 1);
    cfg.classes = 1;
    let m = SegModel::<f64>::new(&cfg, 3).unwrap();
    let out = m.forward(&randn(&[1, 8, 8, 3], 4)).unwrap();
    assert_eq!(out.shape(), &[1, 16, 1]);
    assert!(out.softmax().unwrap().data().iter().all(|&p| p == 1.0));
    assert_eq!(segmentation_loss(&out, &[0; 16], None).unwrap().item(), 0.0);
}

#[test]
fn wrong_image_size_is_config_error() {
    let m = SegModel::<f64>::new(&tiny(&[1], 1), 5).unwrap();
    let err = m.forward(&randn(&[1, 12, 8, 3], 6)).unwrap_err();
    assert!(matches!(err, crate::GlamError::Config(_)));
}

#[test]
fn every_variant_builds_and_runs() {
    for nlu in [true, false] {
        for sym in [true, false] {
            for stages in [&[1usize][..], &[1, 1], &[1, 1, 1]] {
                let mut cfg = tiny(stages, 1);
                cfg.nlu = nlu;
                cfg.decoder_symmetric = sym;
                let m = SegModel::<f64>::new(&cfg, 7).unwrap();
                let (h, w) = (cfg.image_height, cfg.image_width);
                let out = m.forward(&randn(&[1, h, w, 3], 8)).unwrap();
                assert_eq!(out.shape(), &[1, m.num_tokens(), 3]);
            }
        }
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let cfg = tiny(&[1, 1], 2);
    let x = randn(&[1, 16, 16, 3], 9);
    let a = SegModel::<f64>::new(&cfg, 10).unwrap().forward(&x).unwrap().to_vec();
    let b = SegModel::<f64>::new(&cfg, 10).unwrap().forward(&x).unwrap().to_vec();
    assert_eq!(a, b);
}

/// Largest change of window-0 logits when pixels of every other window are
/// perturbed (single-level model, 2×2 windows of 2-pixel patches).
fn window_zero_change(m: &SegModel<f64>) -> f64 {
    let x = randn(&[1, 8, 8, 3], 11);
    let base = m.forward(&x).unwrap().to_vec();
    let mut d = x.to_vec();
    let mut r = SeededRng::new(12);
    for row in 0..8 {
        for col in 0..8 {
            if row >= 4 || col >= 4 {
                (0..3).for_each(|ch| d[(row * 8 + col) * 3 + ch] += r.normal());
            }
        }
    }
    let pert = m.forward(&Tensor::new(x.shape(), d).unwrap()).unwrap().to_vec();
    let mut worst = 0.0f64;
    for tr in 0..2 {
        for tc in 0..2 {
            for k in 0..3 {
                let i = (tr * 4 + tc) * 3 + k;
                worst = worst.max((base[i] - pert[i]).abs());
            }
        }
    }
    worst
}

#[test]
fn logits_are_window_local_without_gmsa() {
    let mut m = SegModel::<f64>::new(&tiny(&[2], 2), 13).unwrap();
    spread(&m, 14, 0.5);
    assert!(window_zero_change(&m) > 1e-6);
    m.set_gmsa(false);
    assert_eq!(window_zero_change(&m), 0.0);
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::<f64>::zeros(&[1, 3, 4]);
    let l = segmentation_loss(&uniform, &[0, 1, 3], None).unwrap().item();
    assert!((l - 4f64.ln()).abs() < 1e-12);

    let mut d = vec![0.0; 8];
    d[1] = 100.0;
    d[4 + 2] = 100.0;
    let sharp = Tensor::<f64>::new(&[1, 2, 4], d).unwrap();
    assert!(segmentation_loss(&sharp, &[1, 2], None).unwrap().item() < 1e-40);

    let all_ignored = Tensor::<f64>::param(&[1, 2, 4], vec![0.3; 8]).unwrap();
    let l = segmentation_loss(&all_ignored, &[255, 255], Some(255)).unwrap();
    assert_eq!(l.item(), 0.0);
    l.backward().unwrap();
    assert!(all_ignored.grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let logits = randn(&[2, 3, 5], 15);
    let labels = [0, 4, 7, 2, 2, 1];
    let got = segmentation_loss(&logits, &labels, Some(7)).unwrap().item();
    let d = logits.to_vec();
    let mut sum = 0.0;
    let mut n = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y == 7 {
            continue;
        }
        let row = &d[i * 5..i * 5 + 5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        sum += lse - row[y];
        n += 1.0;
    }
    assert!((got - sum / n).abs() < 1e-12);
}

#[test]
fn metric_examples() {
    let m = metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 4).unwrap();
    assert_eq!(m.miou, 1.0);
    assert_eq!(m.mean_dice, 1.0);
    assert_eq!(m.iou[3], None);

    let m = metrics(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(m.iou, vec![Some(0.0), Some(0.0)]);
    assert_eq!(m.dice, vec![Some(0.0), Some(0.0)]);

    // class 1: predicted on {0,1}, true on {1,2}
    let m = metrics(&[1, 1, 0, 0], &[0, 1, 1, 0], 2).unwrap();
    assert!((m.iou[1].unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((m.dice[1].unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(m.pixel_accuracy, 0.5);
}

#[test]
fn predict_takes_first_maximum() {
    let t = Tensor::<f64>::new(&[1, 2, 3], vec![0.0, 2.0, 2.0, 5.0, 1.0, 0.0]).unwrap();
    assert_eq!(predict(&t), vec![1, 0]);
}

#[test]
fn full_model_loss_passes_finite_differences() {
    let mut cfg = tiny(&[1, 1], 2);
    cfg.image_height = 16;
    cfg.image_width = 16;
    let m = SegModel::<f64>::new(&cfg, 16).unwrap();
    spread(&m, 17, 0.3);
    let x = randn(&[1, 16, 16, 3], 18);
    let mut r = SeededRng::new(19);
    let labels: Vec<usize> = (0..m.num_tokens()).map(|_| r.below(0, 3)).collect();
    let params = m.parameters();
    let reports =
        check_gradients(&params, || segmentation_loss(&m.forward(&x)?, &labels, None), 6, 20).unwrap();
    for rep in reports {
        assert!(rep.passed(), "{} {} {:?}", rep.name, rep.max_rel_error, rep.worst);
    }
}

#[test]
fn init_std_rescales_random_tensors_only() {
    let base = tiny(&[1, 1], 2);
    let wide = ModelConfig { init_std: 0.06, ..base.clone() };
    let (a, b) = (SegModel::<f64>::new(&base, 5).unwrap(), SegModel::<f64>::new(&wide, 5).unwrap());
    for ((name, ta), (_, tb)) in a.parameters().iter().zip(b.parameters()) {
        for (x, y) in ta.to_vec().iter().zip(tb.to_vec()) {
            if ta.rank() >= 2 {
                assert!((y - 3.0 * x).abs() <= 1e-15, "{name}");
                assert!(y.abs() <= 2.0 * 0.06 + 1e-15, "{name}: truncated at two std");
            } else {
                assert_eq!(*x, y, "{name}");
            }
        }
    }
    let bad = ModelConfig { init_std: 0.0, ..base };
    assert!(SegModel::<f64>::new(&bad, 5).is_err());
}
