//! Central finite-difference gradient checking (64-bit).

use crate::config::{ModelConfig, StageSpec};
use crate::error::Result;
use crate::glam::{GlamBlock, GlamStage, StageShape};
use crate::model::{segmentation_loss, SegModel};
use crate::nlu::{NluLayer, PatchExpand};
use crate::nn::{LayerNorm, Linear, Mlp, Module, MultiHeadAttention};
use crate::rng::SeededRng;
use crate::tensor::{no_grad, Tensor};
use crate::windowing::{PatchEmbed, PatchMerging};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error bound every differentiable op must meet.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Floor added to `|numeric|` in the relative-error denominator.
pub const FD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + FD_FLOOR)
}

/// Compares `∂loss/∂p` from [`Tensor::backward`] with central differences
/// for up to `max_coords` sampled coordinates of every tensor in `params`.
/// Each tensor in `params` must be a leaf created with [`Tensor::param`].
pub fn check_gradients<F>(
    params: &[(String, Tensor<f64>)],
    loss_fn: F,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<GradCheckReport>>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    loss_fn()?.backward()?;
    let mut rng = SeededRng::new(seed);
    let mut reports = Vec::with_capacity(params.len());
    for (name, p) in params {
        let n = p.numel();
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; n]);
        let mut coords: Vec<usize> = (0..n).collect();
        if n > max_coords {
            rng.shuffle(&mut coords);
            coords.truncate(max_coords);
            coords.sort_unstable();
        }
        let mut report = GradCheckReport { name: name.clone(), checked: coords.len(), max_rel_error: 0.0, worst: None };
        for &i in &coords {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + FD_STEP;
            let plus = no_grad(&loss_fn)?.item();
            p.data_mut()[i] = orig - FD_STEP;
            let minus = no_grad(&loss_fn)?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[i], numeric);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, analytic[i], numeric));
            }
        }
        reports.push(report);
    }
    for (_, p) in params {
        p.zero_grad();
    }
    Ok(reports)
}

/// Fixed random projection `Σ x·r` used to turn a tensor output into a
/// scalar with generic (non-degenerate) gradients.
pub fn random_projection(x: &Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    let mut rng = SeededRng::new(seed);
    let weights: Vec<f64> = (0..x.numel()).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let w = Tensor::new(x.shape(), weights)?;
    Ok(x.mul(&w)?.sum())
}

// ── Layer suite ───────────────────────────────────────────────────────────

/// Overwrites every parameter of `m` with `std · N(0, 1)` so that no
/// gradient is degenerate (zero biases, unit gains, identical globals).
pub fn spread_parameters<M: Module<f64>>(m: &M, seed: u64, std: f64) {
    let mut rng = SeededRng::new(seed);
    m.visit("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = std * rng.normal()));
}

fn random_param(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.normal()).collect())
}

fn prefixed(layer: &str, reports: Vec<GradCheckReport>) -> Vec<GradCheckReport> {
    reports.into_iter().map(|r| GradCheckReport { name: format!("{layer}:{}", r.name), ..r }).collect()
}

/// Checks every parameterised layer type and the full segmentation loss.
/// Inputs are included as checked tensors. Report names are
/// `<layer>:<tensor>`.
pub fn gradient_suite(seed: u64, max_coords: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = SeededRng::new(seed);
    let mut out = Vec::new();
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);

    let lin = Linear::<f64>::new(5, 3, &mut rng);
    spread_parameters(&lin, s(1), 0.5);
    let x = random_param(&[2, 4, 5], s(2))?;
    let mut params = lin.parameters();
    params.push(("input".into(), x.clone()));
    out.extend(prefixed("linear", check_gradients(&params, || random_projection(&lin.forward(&x)?, s(3)), max_coords, s(4))?));

    let ln = LayerNorm::<f64>::new(5);
    spread_parameters(&ln, s(5), 0.5);
    let mut params = ln.parameters();
    params.push(("input".into(), x.clone()));
    out.extend(prefixed("layer_norm", check_gradients(&params, || random_projection(&ln.forward(&x)?, s(6)), max_coords, s(7))?));

    let mlp = Mlp::<f64>::new(4, &mut rng);
    spread_parameters(&mlp, s(8), 0.5);
    let z = random_param(&[2, 3, 4], s(9))?;
    let mut params = mlp.parameters();
    params.push(("input".into(), z.clone()));
    out.extend(prefixed("mlp", check_gradients(&params, || random_projection(&mlp.forward(&z)?, s(10)), max_coords, s(11))?));

    let msa = MultiHeadAttention::<f64>::new(4, 2, &mut rng)?;
    spread_parameters(&msa, s(12), 0.5);
    let mut params = msa.parameters();
    params.push(("input".into(), z.clone()));
    let loss = || random_projection(&msa.self_attention(&z, false)?.0, s(13));
    out.extend(prefixed("msa", check_gradients(&params, loss, max_coords, s(14))?));

    // one block over globals ‖ visual tokens; the output keeps the globals
    // so the G-MSA weights act on the loss directly
    let block = GlamBlock::<f64>::new(4, 2, 2, true, &mut rng)?;
    spread_parameters(&block, s(15), 0.6);
    let z = random_param(&[1, 4, 6, 4], s(16))?;
    let mut params = block.parameters();
    params.push(("input".into(), z.clone()));
    let loss = || random_projection(&block.forward(&z, false)?.0, s(17));
    out.extend(prefixed("glam_block", check_gradients(&params, loss, max_coords, s(18))?));

    // The stage adds the learned global tokens. Per-window offsets keep the
    // globals of different windows distinct.
    let shape = StageShape {
        height: 4,
        width: 4,
        dim: 4,
        heads: 2,
        window: 2,
        n_globals: 2,
        blocks: 2,
        gmsa: true,
        global_pos: true,
    };
    let stage = GlamStage::<f64>::new(0, shape, &mut rng)?;
    spread_parameters(&stage, s(39), 0.6);
    let tokens = random_param(&[1, 16, 4], s(40))?;
    let mut params = stage.parameters();
    params.retain(|(n, _)| n.starts_with("globals."));
    params.push(("input".into(), tokens.clone()));
    let loss = || random_projection(&stage.forward(&tokens, 4, 4, false)?.0, s(41));
    out.extend(prefixed("glam_stage", check_gradients(&params, loss, max_coords, s(42))?));

    let embed = PatchEmbed::<f64>::new(4, 4, 2, 3, &mut rng)?;
    spread_parameters(&embed, s(19), 0.5);
    let image = random_param(&[1, 4, 4, 3], s(20))?;
    let mut params = embed.parameters();
    params.push(("input".into(), image.clone()));
    out.extend(prefixed("patch_embed", check_gradients(&params, || random_projection(&embed.forward(&image)?, s(21)), max_coords, s(22))?));

    let merge = PatchMerging::<f64>::new(3, &mut rng);
    spread_parameters(&merge, s(23), 0.5);
    let fine = random_param(&[1, 16, 3], s(24))?;
    let mut params = merge.parameters();
    params.push(("input".into(), fine.clone()));
    let loss = || random_projection(&merge.forward(&fine, 4, 4)?, s(25));
    out.extend(prefixed("patch_merging", check_gradients(&params, loss, max_coords, s(26))?));

    let nlu = NluLayer::<f64>::new(4, 8, 2, true, &mut rng)?;
    spread_parameters(&nlu, s(27), 0.5);
    let skip = random_param(&[1, 16, 4], s(28))?;
    let low = random_param(&[1, 4, 8], s(29))?;
    let mut params = nlu.parameters();
    params.push(("skip".into(), skip.clone()));
    params.push(("low".into(), low.clone()));
    let loss = || random_projection(&nlu.forward(&skip, &low, 2, 2)?, s(30));
    out.extend(prefixed("nlu", check_gradients(&params, loss, max_coords, s(31))?));

    let expand = PatchExpand::<f64>::new(4, 8, &mut rng);
    spread_parameters(&expand, s(32), 0.5);
    let mut params = expand.parameters();
    params.push(("low".into(), low.clone()));
    let loss = || random_projection(&expand.forward(&skip, &low, 2, 2)?, s(33));
    out.extend(prefixed("patch_expand", check_gradients(&params, loss, max_coords, s(34))?));

    let cfg = ModelConfig {
        image_height: 16,
        image_width: 16,
        patch: 2,
        channels: 4,
        window: 2,
        stages: vec![StageSpec { blocks: 1, glam: true }; 2],
        n_globals: 2,
        classes: 3,
        heads: 2,
        global_pos: true,
        ..ModelConfig::default()
    };
    let model = SegModel::<f64>::new(&cfg, s(35))?;
    spread_parameters(&model, s(36), 0.5);
    let image = random_param(&[1, 16, 16, 3], s(37))?;
    let labels: Vec<usize> = (0..model.num_tokens()).map(|_| rng.below(0, cfg.classes)).collect();
    let mut params = model.parameters();
    params.push(("image".into(), image.clone()));
    let loss = || segmentation_loss(&model.forward(&image)?, &labels, None);
    out.extend(prefixed("model", check_gradients(&params, loss, max_coords, s(38))?));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2e-8, 0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_matches_closed_form() {
        let p = Tensor::<f64>::param(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let reports = check_gradients(&params, || Ok(p.mul(&p)?.sum()), 3, 0).unwrap();
        assert!(reports[0].passed());
        assert!(reports[0].max_rel_error < 1e-9);
    }

    #[test]
    fn broken_gradient_is_detected() {
        // detach hides the dependence from backward but not from the loss
        let p = Tensor::<f64>::param(&[2], vec![0.5, -1.0]).unwrap();
        let params = vec![("p".to_string(), p.clone())];
        let reports = check_gradients(&params, || Ok(p.detach().mul(&p)?.sum()), 2, 0).unwrap();
        assert!(!reports[0].passed());
    }

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in 0..8 {
            let reports = gradient_suite(seed, 8).unwrap();
            for r in &reports {
                assert!(r.passed(), "seed {seed}: {} {:e} {:?}", r.name, r.max_rel_error, r.worst);
            }
            for layer in ["linear", "layer_norm", "mlp", "msa", "glam_block", "glam_stage", "patch_embed", "patch_merging", "nlu", "patch_expand", "model"] {
                assert!(reports.iter().any(|r| r.name.starts_with(&format!("{layer}:"))), "{layer}");
            }
            assert!(reports.iter().any(|r| r.name == "glam_stage:globals.tokens"));
        }
    }
}
