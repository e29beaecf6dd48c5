use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{flops, numel, Scalar, Tensor};
use crate::error::{bail, Result};

/// Splits `[.., m, k]` into `(batch, m, k)`.
fn split_matrix(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    (numel(&shape[..r - 2]), shape[r - 2], shape[r - 1])
}

fn unbroadcast_rows<T: Scalar>(g: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width];
    for chunk in g.chunks_exact(width) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

impl<T: Scalar> Tensor<T> {
    // ── Linear algebra ────────────────────────────────────────────────

    /// `[.., m, k] · [k, n]` (shared right operand) or
    /// `[.., m, k] · [.., k, n]` (matching leading dims).
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sb.len() < 2 {
            bail!(Dimension, "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}");
        }
        let (batch, m, k) = split_matrix(sa);
        let (bb, k2, n) = split_matrix(sb);
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            bail!(Dimension, "matmul inner/batch extents disagree: {sa:?} x {sb:?}");
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (a, b) = (self.data(), rhs.data());
            if shared {
                gemm_nn(&a, &b, &mut out, batch * m, k, n);
            } else {
                debug_assert_eq!(bb, batch);
                for i in 0..batch {
                    gemm_nn(
                        &a[i * m * k..(i + 1) * m * k],
                        &b[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        flops::add(2 * (batch * m * k * n) as u64);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _, ps| {
                let (a, b) = (ps[0].data(), ps[1].data());
                let da = ps[0].requires_grad().then(|| {
                    let mut da = vec![T::zero(); batch * m * k];
                    if shared {
                        gemm_nt(g, &b, &mut da, batch * m, n, k);
                    } else {
                        for i in 0..batch {
                            gemm_nt(
                                &g[i * m * n..(i + 1) * m * n],
                                &b[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    da
                });
                let db = ps[1].requires_grad().then(|| {
                    if shared {
                        let mut db = vec![T::zero(); k * n];
                        gemm_tn(&a, g, &mut db, k, batch * m, n);
                        db
                    } else {
                        let mut db = vec![T::zero(); batch * k * n];
                        for i in 0..batch {
                            gemm_tn(
                                &a[i * m * k..(i + 1) * m * k],
                                &g[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                        db
                    }
                });
                vec![da, db]
            }),
        ))
    }

    /// `[.., m, k] · [.., n, k]ᵀ → [.., m, n]` with matching leading dims.
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            bail!(Dimension, "matmul_nt batch extents disagree: {sa:?} x {sb:?}ᵀ");
        }
        let (batch, m, k) = split_matrix(sa);
        let (_, n, k2) = split_matrix(sb);
        if k != k2 {
            bail!(Dimension, "matmul_nt inner extents disagree: {sa:?} x {sb:?}ᵀ");
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (a, b) = (self.data(), rhs.data());
            for i in 0..batch {
                gemm_nt(
                    &a[i * m * k..(i + 1) * m * k],
                    &b[i * n * k..(i + 1) * n * k],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        flops::add(2 * (batch * m * k * n) as u64);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _, ps| {
                let (a, b) = (ps[0].data(), ps[1].data());
                let da = ps[0].requires_grad().then(|| {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm_nn(
                            &g[i * m * n..(i + 1) * m * n],
                            &b[i * n * k..(i + 1) * n * k],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    da
                });
                let db = ps[1].requires_grad().then(|| {
                    let mut db = vec![T::zero(); batch * n * k];
                    for i in 0..batch {
                        gemm_tn(
                            &g[i * m * n..(i + 1) * m * n],
                            &a[i * m * k..(i + 1) * m * k],
                            &mut db[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    // ── Elementwise ───────────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            bail!(Dimension, "add: {:?} vs {:?}", self.shape(), rhs.shape());
        }
        let out: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a + b).collect();
        flops::add(out.len() as u64);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _, ps| {
                vec![ps[0].requires_grad().then(|| g.to_vec()), ps[1].requires_grad().then(|| g.to_vec())]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            bail!(Dimension, "sub: {:?} vs {:?}", self.shape(), rhs.shape());
        }
        let out: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a - b).collect();
        flops::add(out.len() as u64);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _, ps| {
                vec![
                    ps[0].requires_grad().then(|| g.to_vec()),
                    ps[1].requires_grad().then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        ))
    }

    /// Adds `rhs` repeated over the leading dims of `self`; `rhs.shape()`
    /// must be a suffix of `self.shape()` (bias rows, positional tables).
    pub fn add_broadcast(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            bail!(Dimension, "add_broadcast: {sb:?} is not a suffix of {sa:?}");
        }
        let width = rhs.numel();
        let out: Vec<T> = {
            let (a, b) = (self.data(), rhs.data());
            if width == 0 {
                a.clone()
            } else {
                a.chunks_exact(width)
                    .flat_map(|row| row.iter().zip(b.iter()).map(|(&x, &y)| x + y))
                    .collect()
            }
        };
        flops::add(out.len() as u64);
        Ok(Tensor::from_op(
            sa.to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _, ps| {
                vec![
                    ps[0].requires_grad().then(|| g.to_vec()),
                    ps[1].requires_grad().then(|| {
                        if width == 0 {
                            Vec::new()
                        } else {
                            unbroadcast_rows(g, width)
                        }
                    }),
                ]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != rhs.shape() {
            bail!(Dimension, "mul: {:?} vs {:?}", self.shape(), rhs.shape());
        }
        let out: Vec<T> = self.data().iter().zip(rhs.data().iter()).map(|(&a, &b)| a * b).collect();
        flops::add(out.len() as u64);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _, ps| {
                let (a, b) = (ps[0].data(), ps[1].data());
                vec![
                    ps[0].requires_grad().then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
                    ps[1].requires_grad().then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| v * s).collect();
        flops::add(out.len() as u64);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let one = T::one();
        let three = T::from_f64(3.0);
        let out: Vec<T> = self
            .data()
            .iter()
            .map(|&x| half * x * (one + (c * (x + k * x * x * x)).tanh()))
            .collect();
        flops::add(flops::GELU_PER_ELEMENT * out.len() as u64);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, ps| {
                let x = ps[0].data();
                let dx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (one + t) + half * x * (one - t * t) * c * (one + three * k * x * x);
                        g * d
                    })
                    .collect();
                vec![Some(dx)]
            }),
        )
    }

    // ── Normalisation ─────────────────────────────────────────────────

    /// Row softmax over the last axis, max-subtracted.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let n = *self.shape().last().unwrap_or(&1);
        let mut out = self.to_vec();
        if out.iter().any(|v| v.is_nan()) {
            bail!(Numeric, "softmax input of shape {:?} contains NaN", self.shape());
        }
        if n > 0 {
            for row in out.chunks_exact_mut(n) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        flops::add(flops::SOFTMAX_PER_ELEMENT * out.len() as u64);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut dx = vec![T::zero(); g.len()];
                if n > 0 {
                    for ((dxr, gr), yr) in dx.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer norm over the last axis: `(x − μ)/√(σ² + eps) · gamma + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let c = *self.shape().last().unwrap_or(&0);
        if gamma.shape() != [c] || beta.shape() != [c] {
            bail!(
                Dimension,
                "layer_norm over {:?} needs gamma/beta of [{c}], got {:?} / {:?}",
                self.shape(),
                gamma.shape(),
                beta.shape()
            );
        }
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_f64(c as f64);
        let rows = self.numel() / c.max(1);
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        {
            let (x, gm, bt) = (self.data(), gamma.data(), beta.data());
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<T>() * inv_c;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                let s = T::one() / (var + eps).sqrt();
                rstd[r] = s;
                for j in 0..c {
                    let h = (row[j] - mean) * s;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gm[j] + bt[j];
                }
            }
        }
        flops::add(flops::LAYER_NORM_PER_ELEMENT * out.len() as u64);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, ps| {
                let gm = ps[1].data();
                let dx = ps[0].requires_grad().then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d *= inv_c;
                        mean_dh *= inv_c;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (gr[j] * gm[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    dx
                });
                let dgamma = ps[1].requires_grad().then(|| {
                    let mut dg = vec![T::zero(); c];
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        dg.iter_mut().zip(gr.iter().zip(hr)).for_each(|(d, (&a, &b))| *d += a * b);
                    }
                    dg
                });
                let dbeta = ps[2].requires_grad().then(|| unbroadcast_rows(g, c));
                vec![dx, dgamma, dbeta]
            }),
        ))
    }

    // ── Shape manipulation ────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            bail!(Dimension, "cannot reshape {:?} into {shape:?}", self.shape());
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// `out[i] = self[index[i]]`, shaped `shape`. Backward scatter-adds, so
    /// repeated indices are fine.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor<T>> {
        if index.len() != numel(shape) {
            bail!(Dimension, "gather: {} indices for output shape {shape:?}", index.len());
        }
        let src_len = self.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= src_len) {
            bail!(Index, "gather index {bad} outside source of {src_len} values");
        }
        let out: Vec<T> = {
            let d = self.data();
            index.iter().map(|&i| d[i]).collect()
        };
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![T::zero(); src_len];
                for (&i, &gv) in index.iter().zip(g) {
                    dx[i] += gv;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let r = shape.len();
        let mut check = axes.to_vec();
        check.sort_unstable();
        if check != (0..r).collect::<Vec<_>>() {
            bail!(Dimension, "permute axes {axes:?} invalid for rank {r}");
        }
        let mut in_strides = vec![1usize; r];
        for i in (0..r.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&out_shape);
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; r];
        for _ in 0..total {
            index.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for ax in (0..r).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(Rc::new(index), &out_shape)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            bail!(Index, "narrow({axis}, {start}, {len}) outside shape {shape:?}");
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.gather(Rc::new(index), &out_shape)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let Some(first) = parts.first() else {
            bail!(Dimension, "cat of zero tensors");
        };
        let base = first.shape();
        if axis >= base.len() {
            bail!(Dimension, "cat axis {axis} outside rank {}", base.len());
        }
        for p in parts {
            let s = p.shape();
            if s.len() != base.len() || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                bail!(Dimension, "cat along {axis}: {:?} incompatible with {base:?}", s);
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        {
            let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
            for o in 0..outer {
                for (d, &w) in datas.iter().zip(&widths) {
                    out.extend_from_slice(&d[o * w..(o + 1) * w]);
                }
            }
        }
        let mut out_shape = base.to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        Ok(Tensor::from_op(
            out_shape,
            out,
            parts.to_vec(),
            Box::new(move |g, _, ps| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(ps.len());
                for (p, &w) in ps.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut d = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + offset..o * row + offset + w]);
                        }
                        grads.push(Some(d));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        ))
    }

    // ── Reductions and losses (not FLOP-counted) ──────────────────────

    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], vec![self.clone()], Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum().scale_uncounted(T::one() / T::from_f64(n as f64))
    }

    fn scale_uncounted(&self, s: T) -> Tensor<T> {
        let out: Vec<T> = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|&v| v * s).collect())]),
        )
    }

    /// Mean softmax cross-entropy of `[.., K]` logits against one label per
    /// row, skipping rows labelled `ignore_index`. With every row ignored the
    /// loss is zero and so is its gradient.
    pub fn cross_entropy(&self, labels: &[usize], ignore_index: Option<usize>) -> Result<Tensor<T>> {
        let k = *self.shape().last().unwrap_or(&0);
        let rows = if k == 0 { 0 } else { self.numel() / k };
        if labels.len() != rows {
            bail!(Dimension, "cross_entropy: {} labels for {rows} rows of {:?}", labels.len(), self.shape());
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|&(_, &l)| Some(l) != ignore_index && l >= k) {
            bail!(Index, "label {l} at row {i} outside [0, {k})");
        }
        let x = self.data();
        if x.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "cross_entropy received non-finite logits");
        }
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for r in 0..rows {
            let row = &x[r * k..(r + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= sum);
            if Some(labels[r]) != ignore_index {
                total += sum.ln() + max - row[labels[r]];
                count += 1;
            }
        }
        drop(x);
        let inv = if count == 0 { T::zero() } else { T::one() / T::from_f64(count as f64) };
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![],
            vec![total * inv],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut dx = vec![T::zero(); probs.len()];
                if count > 0 {
                    for r in 0..rows {
                        if Some(labels[r]) == ignore_index {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == labels[r] { T::one() } else { T::zero() };
                            dx[r * k + j] = g[0] * inv * (probs[r * k + j] - onehot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}
