//! Patch embedding, window partition/merge and 2×2 patch merging.
//!
//! Token maps are stored flat as `[B, H·W, C]` in row-major spatial order.
//! A windowed map is `[B, N_r, N_p, C]`: windows in row-major order over the
//! window grid, patches row-major inside each window.

use std::rc::Rc;

use crate::error::{bail, Result};
use crate::nn::{init_param, join, Linear, Module, INIT_STD};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct WindowedFeatureMap<T: Scalar> {
    /// `[B, N_r, N_p, C]`
    pub tokens: Tensor<T>,
    /// Token-grid height of the full map.
    pub height: usize,
    /// Token-grid width of the full map.
    pub width: usize,
    /// Window side `M`; `N_p = M²`.
    pub window: usize,
    /// Resolution level this map belongs to.
    pub stage: usize,
}

impl<T: Scalar> WindowedFeatureMap<T> {
    /// `(H_w, W_w)`, the number of windows down and across.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.window, self.width / self.window)
    }

    pub fn n_windows(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn n_patches(&self) -> usize {
        self.window * self.window
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[3]
    }

    pub fn locate(&self, row: usize, col: usize) -> (usize, usize) {
        window_slot(row, col, self.width, self.window)
    }

    pub fn position(&self, win: usize, slot: usize) -> (usize, usize) {
        window_position(win, slot, self.width, self.window)
    }
}

/// `(window index, slot)` of token `(row, col)` in a map `width` tokens wide.
pub fn window_slot(row: usize, col: usize, width: usize, window: usize) -> (usize, usize) {
    let grid_w = width / window;
    ((row / window) * grid_w + col / window, (row % window) * window + col % window)
}

/// Inverse of [`window_slot`].
pub fn window_position(win: usize, slot: usize, width: usize, window: usize) -> (usize, usize) {
    let grid_w = width / window;
    ((win / grid_w) * window + slot / window, (win % grid_w) * window + slot % window)
}

fn check_divisible(what: &str, side: usize, by: usize) -> Result<()> {
    if by == 0 || side % by != 0 || side == 0 {
        let lo = side / by.max(1) * by;
        bail!(
            Config,
            "{what} {side} is not divisible by {by}; valid sizes are positive multiples of {by} (nearest: {}, {})",
            lo.max(by),
            lo + by
        );
    }
    Ok(())
}

/// Splits `[B, H·W, C]` tokens into non-overlapping `M×M` windows.
pub fn window_partition<T: Scalar>(
    tokens: &Tensor<T>,
    height: usize,
    width: usize,
    window: usize,
    stage: usize,
) -> Result<WindowedFeatureMap<T>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != height * width {
        bail!(Dimension, "window_partition expects [B, {}, C], got {s:?}", height * width);
    }
    check_divisible("feature-map height", height, window)?;
    check_divisible("feature-map width", width, window)?;
    let (b, c) = (s[0], s[2]);
    let n_p = window * window;
    let n_r = (height / window) * (width / window);
    let mut index = Vec::with_capacity(tokens.numel());
    for bi in 0..b {
        for win in 0..n_r {
            for slot in 0..n_p {
                let (row, col) = window_position(win, slot, width, window);
                let base = (bi * height * width + row * width + col) * c;
                index.extend(base..base + c);
            }
        }
    }
    Ok(WindowedFeatureMap {
        tokens: tokens.gather(Rc::new(index), &[b, n_r, n_p, c])?,
        height,
        width,
        window,
        stage,
    })
}

/// Exact inverse of [`window_partition`].
pub fn window_merge<T: Scalar>(wfm: &WindowedFeatureMap<T>) -> Result<Tensor<T>> {
    let s = wfm.tokens.shape();
    let (height, width, window) = (wfm.height, wfm.width, wfm.window);
    if window == 0
        || height % window != 0
        || width % window != 0
        || s.len() != 4
        || s[1] != wfm.n_windows()
        || s[2] != window * window
    {
        bail!(
            Contract,
            "windowed map {s:?} inconsistent with {height}x{width} grid and window {window}"
        );
    }
    let (b, c) = (s[0], s[3]);
    let mut index = Vec::with_capacity(wfm.tokens.numel());
    for bi in 0..b {
        for row in 0..height {
            for col in 0..width {
                let (win, slot) = window_slot(row, col, width, window);
                let base = ((bi * s[1] + win) * s[2] + slot) * c;
                index.extend(base..base + c);
            }
        }
    }
    wfm.tokens.gather(Rc::new(index), &[b, height * width, c])
}

// ── Patch embedding ───────────────────────────────────────────────────────

/// Flattens `p×p×3` pixel patches, projects them to `C` channels and adds a
/// learned absolute positional table.
#[derive(Clone, Debug)]
pub struct PatchEmbed<T: Scalar> {
    pub patch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub proj: Linear<T>,
    /// `[(H/p)·(W/p), C]`
    pub pos: Tensor<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    pub fn new(image_height: usize, image_width: usize, patch: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        check_divisible("image height", image_height, patch)?;
        check_divisible("image width", image_width, patch)?;
        let proj = Linear::new(patch * patch * 3, dim, rng);
        let n = (image_height / patch) * (image_width / patch);
        let pos = init_param(&[n, dim], rng, INIT_STD);
        Ok(Self { patch, image_height, image_width, proj, pos })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    /// `image [B, H, W, 3] → [B, (H/p)·(W/p), p·p·3]`, pixel order
    /// `(dy, dx, channel)` inside each patch.
    pub fn patchify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 4 || s[3] != 3 {
            bail!(Dimension, "patch_embed expects [B, H, W, 3], got {s:?}");
        }
        if s[1] != self.image_height || s[2] != self.image_width {
            bail!(
                Config,
                "image is {}x{} but the model was built for {}x{}",
                s[1],
                s[2],
                self.image_height,
                self.image_width
            );
        }
        let (b, h, w, p) = (s[0], s[1], s[2], self.patch);
        let (gh, gw) = self.grid();
        let mut index = Vec::with_capacity(image.numel());
        for bi in 0..b {
            for pr in 0..gh {
                for pc in 0..gw {
                    for dy in 0..p {
                        let base = ((bi * h + pr * p + dy) * w + pc * p) * 3;
                        index.extend(base..base + p * 3);
                    }
                }
            }
        }
        image.gather(Rc::new(index), &[b, gh * gw, p * p * 3])
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.proj.forward(&self.patchify(image)?)?.add_broadcast(&self.pos)
    }
}

impl<T: Scalar> Module<T> for PatchEmbed<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.proj.visit(&join(prefix, "proj"), f);
        f(join(prefix, "pos"), &self.pos);
    }
}

// ── Patch merging ─────────────────────────────────────────────────────────

/// 2×2 space-to-depth (`4C`) followed by a linear projection to `2C`.
#[derive(Clone, Debug)]
pub struct PatchMerging<T: Scalar> {
    pub reduction: Linear<T>,
}

/// Gathers each 2×2 neighbourhood into one `4C` token, order
/// `(0,0), (0,1), (1,0), (1,1)`.
pub fn space_to_depth<T: Scalar>(tokens: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != height * width {
        bail!(Dimension, "patch merging expects [B, {}, C], got {s:?}", height * width);
    }
    if height % 2 != 0 || width % 2 != 0 {
        bail!(Config, "patch merging needs even sides, got {height}x{width}");
    }
    let (b, c) = (s[0], s[2]);
    let (oh, ow) = (height / 2, width / 2);
    let mut index = Vec::with_capacity(tokens.numel());
    for bi in 0..b {
        for r in 0..oh {
            for col in 0..ow {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = (bi * height * width + (2 * r + dy) * width + 2 * col + dx) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    tokens.gather(Rc::new(index), &[b, oh * ow, 4 * c])
}

impl<T: Scalar> PatchMerging<T> {
    pub fn new(dim: usize, rng: &mut SeededRng) -> Self {
        Self { reduction: Linear::new(4 * dim, 2 * dim, rng) }
    }

    pub fn forward(&self, tokens: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
        self.reduction.forward(&space_to_depth(tokens, height, width)?)
    }
}

impl<T: Scalar> Module<T> for PatchMerging<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.reduction.visit(&join(prefix, "reduction"), f);
    }
}
