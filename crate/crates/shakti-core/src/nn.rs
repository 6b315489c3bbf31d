//! Neural network primitives: normalisation layers, rotary position
//! embeddings, the SwiGLU feed-forward, and the learned 2D positional bias.
//!
//! Normalisation and rotation are implemented as fused ops with hand-written
//! backward passes; everything else composes tensor primitives.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::params::{Component, Fwd, Param};
use crate::tensor::{joint_tape, op_output, Element, Tensor};

/// Epsilon used by every normalisation layer in the models.
pub const NORM_EPS: f64 = 1e-5;

fn last_dim_rows<E: Element>(op: &'static str, x: &Tensor<E>) -> Result<(usize, usize)> {
    let d = *x.shape().last().ok_or_else(|| TensorError::Invalid {
        op,
        msg: "rank 0 tensor".into(),
    })?;
    Ok((x.numel() / d, d))
}

fn check_vec_len<E: Element>(op: &'static str, v: &Tensor<E>, d: usize) -> Result<()> {
    if v.shape() != [d] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: vec![d],
            rhs: v.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// LayerNorm over the last axis: `(x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm<E: Element>(
    x: &Tensor<E>,
    gain: &Tensor<E>,
    bias: &Tensor<E>,
    eps: f64,
) -> Result<Tensor<E>> {
    let (rows, d) = last_dim_rows("layer_norm", x)?;
    check_vec_len("layer_norm", gain, d)?;
    check_vec_len("layer_norm", bias, d)?;
    let tape = joint_tape("layer_norm", &[x, gain, bias])?;
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let epse = E::c(eps);
    let dn = E::c(d as f64);
    let mut out = vec![E::zero(); xd.len()];
    let mut xhat = vec![E::zero(); xd.len()];
    let mut invstd = vec![E::zero(); rows];
    for r in 0..rows {
        let xr = &xd[r * d..(r + 1) * d];
        let mut s = E::zero();
        for &v in xr {
            s = s + v;
        }
        let mu = s / dn;
        let mut q = E::zero();
        for &v in xr {
            let c = v - mu;
            q = q + c * c;
        }
        let istd = E::one() / (q / dn + epse).sqrt();
        invstd[r] = istd;
        for j in 0..d {
            let h = (xr[j] - mu) * istd;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gd[j] + bd[j];
        }
    }
    let xn = x.track().map(|(_, id)| id);
    let gn = gain.track().map(|(_, id)| id);
    let bn = bias.track().map(|(_, id)| id);
    let gain_data = gain.data_rc();
    let xhat = Rc::new(xhat);
    let invstd = Rc::new(invstd);
    let shape = x.shape().to_vec();
    Ok(op_output(tape, out, shape, move || {
        Box::new(move |g, acc| {
            if let Some(id) = xn {
                let s = acc.slot(id);
                for r in 0..rows {
                    let base = r * d;
                    // dxhat = g * gain; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for j in 0..d {
                        let dh = g[base + j] * gain_data[j];
                        m1 = m1 + dh;
                        m2 = m2 + dh * xhat[base + j];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    for j in 0..d {
                        let dh = g[base + j] * gain_data[j];
                        s[base + j] =
                            s[base + j] + invstd[r] * (dh - m1 - xhat[base + j] * m2);
                    }
                }
            }
            if let Some(id) = gn {
                let s = acc.slot(id);
                for r in 0..rows {
                    for j in 0..d {
                        s[j] = s[j] + g[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(id) = bn {
                let s = acc.slot(id);
                for r in 0..rows {
                    for j in 0..d {
                        s[j] = s[j] + g[r * d + j];
                    }
                }
            }
        })
    }))
}

/// RMSNorm over the last axis: `x / sqrt(mean(x^2) + eps) * gain`.
/// No centering, no bias.
pub fn rms_norm<E: Element>(x: &Tensor<E>, gain: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
    let (rows, d) = last_dim_rows("rms_norm", x)?;
    check_vec_len("rms_norm", gain, d)?;
    let tape = joint_tape("rms_norm", &[x, gain])?;
    let xd = x.data();
    let gd = gain.data();
    let epse = E::c(eps);
    let dn = E::c(d as f64);
    let mut out = vec![E::zero(); xd.len()];
    let mut inv_rms = vec![E::zero(); rows];
    for r in 0..rows {
        let xr = &xd[r * d..(r + 1) * d];
        let mut q = E::zero();
        for &v in xr {
            q = q + v * v;
        }
        let inv = E::one() / (q / dn + epse).sqrt();
        inv_rms[r] = inv;
        for j in 0..d {
            out[r * d + j] = xr[j] * inv * gd[j];
        }
    }
    let xn = x.track().map(|(_, id)| id);
    let gn = gain.track().map(|(_, id)| id);
    let x_data = x.data_rc();
    let gain_data = gain.data_rc();
    let inv_rms = Rc::new(inv_rms);
    let shape = x.shape().to_vec();
    Ok(op_output(tape, out, shape, move || {
        Box::new(move |g, acc| {
            if let Some(id) = xn {
                let s = acc.slot(id);
                for r in 0..rows {
                    let base = r * d;
                    let inv = inv_rms[r];
                    // u = g * gain; dx = inv*u - inv^3 * x * mean(u * x)
                    let mut dot = E::zero();
                    for j in 0..d {
                        dot = dot + g[base + j] * gain_data[j] * x_data[base + j];
                    }
                    let c = inv * inv * inv * dot / dn;
                    for j in 0..d {
                        s[base + j] =
                            s[base + j] + inv * g[base + j] * gain_data[j] - c * x_data[base + j];
                    }
                }
            }
            if let Some(id) = gn {
                let s = acc.slot(id);
                for r in 0..rows {
                    let inv = inv_rms[r];
                    for j in 0..d {
                        s[j] = s[j] + g[r * d + j] * x_data[r * d + j] * inv;
                    }
                }
            }
        })
    }))
}

/// RMS-normalise query and key rows before attention.
///
/// Rows are per-position, per-head vectors of length `head_dim`; with unit
/// gains each normalised row has Euclidean norm `sqrt(head_dim)`, so the
/// scaled dot-product logit is bounded by `sqrt(head_dim)` in magnitude.
pub fn qk_normalize<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    gain_q: &Tensor<E>,
    gain_k: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, Tensor<E>)> {
    Ok((rms_norm(q, gain_q, eps)?, rms_norm(k, gain_k, eps)?))
}

/// SwiGLU feed-forward: `(silu(x w1) * (x w3)) w2`.
/// `w1, w3: [d, h]`, `w2: [h, d]`.
pub fn swiglu_ffn<E: Element>(
    x: &Tensor<E>,
    w1: &Tensor<E>,
    w3: &Tensor<E>,
    w2: &Tensor<E>,
) -> Result<Tensor<E>> {
    let gate = x.matmul(w1)?.silu()?;
    let lin = x.matmul(w3)?;
    gate.mul(&lin)?.matmul(w2)
}

/// Feed-forward hidden width: `dim * multiplier` rounded up to a multiple of
/// `granularity`.
pub fn ffn_hidden_dim(dim: usize, multiplier: f64, granularity: usize) -> usize {
    let raw = dim as f64 * multiplier;
    // Guard against float representation pushing an exact multiple upward.
    let units = ((raw - 1e-6) / granularity as f64).ceil() as usize;
    units.max(1) * granularity
}

/// Rotate interleaved pairs `(2i, 2i+1)` of each row by `angles[row][i]`.
/// `angles` has one entry per pair per row, in row-major order.
fn rope_rotate<E: Element>(x: &Tensor<E>, angles: &[f64], op: &'static str) -> Result<Tensor<E>> {
    let (rows, d) = last_dim_rows(op, x)?;
    if d % 2 != 0 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("last dim {d} must be even"),
        }
        .into());
    }
    let pairs = d / 2;
    debug_assert_eq!(angles.len(), rows * pairs);
    let tape = joint_tape(op, &[x])?;
    let mut cos = Vec::with_capacity(angles.len());
    let mut sin = Vec::with_capacity(angles.len());
    for &a in angles {
        cos.push(E::c(a.cos()));
        sin.push(E::c(a.sin()));
    }
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    for r in 0..rows {
        for i in 0..pairs {
            let (c, s) = (cos[r * pairs + i], sin[r * pairs + i]);
            let a = xd[r * d + 2 * i];
            let b = xd[r * d + 2 * i + 1];
            out[r * d + 2 * i] = a * c - b * s;
            out[r * d + 2 * i + 1] = a * s + b * c;
        }
    }
    let xn = x.track().map(|(_, id)| id);
    let cos = Rc::new(cos);
    let sin = Rc::new(sin);
    let shape = x.shape().to_vec();
    Ok(op_output(tape, out, shape, move || {
        Box::new(move |g, acc| {
            if let Some(id) = xn {
                let sl = acc.slot(id);
                // The inverse rotation: rotate the upstream gradient by -angle.
                for r in 0..rows {
                    for i in 0..pairs {
                        let (c, s) = (cos[r * pairs + i], sin[r * pairs + i]);
                        let ga = g[r * d + 2 * i];
                        let gb = g[r * d + 2 * i + 1];
                        sl[r * d + 2 * i] = sl[r * d + 2 * i] + ga * c + gb * s;
                        sl[r * d + 2 * i + 1] = sl[r * d + 2 * i + 1] - ga * s + gb * c;
                    }
                }
            }
        })
    }))
}

/// 1D rotary embedding over `[t, head_dim]` rows.
/// Pair `i` of row `t` rotates by `pos[t] * theta^(-2i/head_dim)`.
pub fn rope_1d<E: Element>(x: &Tensor<E>, positions: &[usize], theta: f64) -> Result<Tensor<E>> {
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    rope_1d_scaled(x, &pos, theta)
}

/// 1D rotary embedding with fractional positions (used by linear position
/// interpolation).
pub fn rope_1d_scaled<E: Element>(x: &Tensor<E>, positions: &[f64], theta: f64) -> Result<Tensor<E>> {
    let (rows, d) = last_dim_rows("rope_1d", x)?;
    if positions.len() != rows {
        return Err(TensorError::Invalid {
            op: "rope_1d",
            msg: format!("{} positions for {} rows", positions.len(), rows),
        }
        .into());
    }
    if d % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "rope_1d",
            msg: format!("head_dim {d} must be even"),
        }
        .into());
    }
    let pairs = d / 2;
    let freqs: Vec<f64> = (0..pairs)
        .map(|i| theta.powf(-((2 * i) as f64) / d as f64))
        .collect();
    let mut angles = Vec::with_capacity(rows * pairs);
    for &p in positions {
        for &f in &freqs {
            angles.push(p * f);
        }
    }
    rope_rotate(x, &angles, "rope_1d")
}

/// 2D axial rotary embedding over `[n, head_dim]` rows.
///
/// The first `head_dim/2` dims rotate by the row coordinate, the second half
/// by the column coordinate; each half uses the 1D frequency ladder of width
/// `head_dim/2`. Requires `head_dim % 4 == 0`.
pub fn rope_2d<E: Element>(
    x: &Tensor<E>,
    row_pos: &[usize],
    col_pos: &[usize],
    theta: f64,
) -> Result<Tensor<E>> {
    let (rows, d) = last_dim_rows("rope_2d", x)?;
    if row_pos.len() != rows || col_pos.len() != rows {
        return Err(TensorError::Invalid {
            op: "rope_2d",
            msg: format!(
                "{} row and {} col coordinates for {} rows",
                row_pos.len(),
                col_pos.len(),
                rows
            ),
        }
        .into());
    }
    if d % 4 != 0 {
        return Err(TensorError::Invalid {
            op: "rope_2d",
            msg: format!("head_dim {d} must be divisible by 4"),
        }
        .into());
    }
    let half = d / 2;
    let hpairs = half / 2;
    let freqs: Vec<f64> = (0..hpairs)
        .map(|i| theta.powf(-((2 * i) as f64) / half as f64))
        .collect();
    let mut angles = Vec::with_capacity(rows * half);
    for r in 0..rows {
        for &f in &freqs {
            angles.push(row_pos[r] as f64 * f);
        }
        for &f in &freqs {
            angles.push(col_pos[r] as f64 * f);
        }
    }
    rope_rotate(x, &angles, "rope_2d")
}

/// How rotary embeddings stretch beyond the trained context length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeScaling {
    /// Raise the frequency base so the longest wavelength covers the target
    /// length; short wavelengths are nearly unchanged.
    DynamicNtk,
    /// Compress positions linearly into the trained range.
    Linear,
}

/// Rotary embedding configuration for a decoder stack.
#[derive(Debug, Clone, Copy)]
pub struct RopeContext {
    pub base_theta: f64,
    pub trained_len: usize,
    pub head_dim: usize,
    pub scaling: RopeScaling,
}

impl RopeContext {
    /// Frequency base to use for a `target_len` context.
    ///
    /// For `target_len <= trained_len` this is `base_theta` unchanged. Beyond
    /// that, dynamic NTK scaling raises it to
    /// `base * (target/trained)^(d/(d-2))` where `d` is the head dim.
    pub fn effective_theta(&self, target_len: usize) -> f64 {
        if self.scaling != RopeScaling::DynamicNtk || target_len <= self.trained_len {
            return self.base_theta;
        }
        let s = target_len as f64 / self.trained_len as f64;
        let d = self.head_dim as f64;
        self.base_theta * s.powf(d / (d - 2.0))
    }

    /// Positions after scaling for a `target_len` context.
    pub fn scaled_positions(&self, positions: &[usize], target_len: usize) -> Vec<f64> {
        match self.scaling {
            RopeScaling::Linear if target_len > self.trained_len => {
                let c = self.trained_len as f64 / target_len as f64;
                positions.iter().map(|&p| p as f64 * c).collect()
            }
            _ => positions.iter().map(|&p| p as f64).collect(),
        }
    }

    /// Apply 1D RoPE for a sequence that may exceed the trained length.
    pub fn apply<E: Element>(
        &self,
        x: &Tensor<E>,
        positions: &[usize],
        target_len: usize,
    ) -> Result<Tensor<E>> {
        let theta = self.effective_theta(target_len);
        let pos = self.scaled_positions(positions, target_len);
        rope_1d_scaled(x, &pos, theta)
    }
}

/// Bilinear resize of a `[grid_h * grid_w, d]` table of row-major grid cells
/// to `[out_h * out_w, d]`, align-corners convention. Differentiable in the
/// table.
pub fn bilinear_resize_grid<E: Element>(
    t: &Tensor<E>,
    grid_h: usize,
    grid_w: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let (rows, d) = last_dim_rows("bilinear_resize_grid", t)?;
    if rows != grid_h * grid_w || grid_h == 0 || grid_w == 0 {
        return Err(TensorError::Invalid {
            op: "bilinear_resize_grid",
            msg: format!("{rows} rows cannot form a {grid_h}x{grid_w} grid"),
        }
        .into());
    }
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::Invalid {
            op: "bilinear_resize_grid",
            msg: "empty output grid".into(),
        }
        .into());
    }
    // src coordinate per output index, align-corners.
    let coord = |o: usize, out_n: usize, grid_n: usize| -> (usize, usize, f64) {
        if out_n == 1 || grid_n == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (grid_n - 1) as f64 / (out_n - 1) as f64;
        let lo = s.floor() as usize;
        let lo = lo.min(grid_n - 1);
        let hi = (lo + 1).min(grid_n - 1);
        (lo, hi, s - lo as f64)
    };
    // Each output row is a weighted sum of at most 4 table rows.
    struct Blend {
        src: [usize; 4],
        w: [f64; 4],
    }
    let mut blends = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, grid_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, grid_w);
            blends.push(Blend {
                src: [y0 * grid_w + x0, y0 * grid_w + x1, y1 * grid_w + x0, y1 * grid_w + x1],
                w: [
                    (1.0 - fy) * (1.0 - fx),
                    (1.0 - fy) * fx,
                    fy * (1.0 - fx),
                    fy * fx,
                ],
            });
        }
    }
    let tape = joint_tape("bilinear_resize_grid", &[t])?;
    let td = t.data();
    let mut out = vec![E::zero(); out_h * out_w * d];
    for (o, b) in blends.iter().enumerate() {
        let orow = &mut out[o * d..(o + 1) * d];
        for q in 0..4 {
            if b.w[q] == 0.0 {
                continue;
            }
            let w = E::c(b.w[q]);
            let src = &td[b.src[q] * d..(b.src[q] + 1) * d];
            for (ov, &sv) in orow.iter_mut().zip(src) {
                *ov = *ov + w * sv;
            }
        }
    }
    let xn = t.track().map(|(_, id)| id);
    let blends = Rc::new(blends);
    Ok(op_output(tape, out, vec![out_h * out_w, d], move || {
        Box::new(move |g, acc| {
            if let Some(id) = xn {
                let s = acc.slot(id);
                for (o, b) in blends.iter().enumerate() {
                    let grow = &g[o * d..(o + 1) * d];
                    for q in 0..4 {
                        if b.w[q] == 0.0 {
                            continue;
                        }
                        let w = E::c(b.w[q]);
                        let dst = &mut s[b.src[q] * d..(b.src[q] + 1) * d];
                        for (dv, &gv) in dst.iter_mut().zip(grow) {
                            *dv = *dv + w * gv;
                        }
                    }
                }
            }
        })
    }))
}

/// Learned absolute positional bias over a trained patch grid, added to
/// patch embeddings. When the runtime grid differs from the trained grid the
/// table is bilinearly interpolated (align-corners), and gradients flow
/// through the interpolation back to the table.
pub struct PosBiasTable<E: Element> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub table: Param<E>,
}

impl<E: Element> PosBiasTable<E> {
    pub fn new(name: &str, component: Component, grid_h: usize, grid_w: usize, dim: usize, seed: u64) -> Self {
        PosBiasTable {
            grid_h,
            grid_w,
            dim,
            table: Param::trunc_normal(name, component, &[grid_h * grid_w, dim], 0.02, seed),
        }
    }

    /// Bias rows for a runtime grid of `out_h x out_w` patches.
    pub fn bias_for(&self, out_h: usize, out_w: usize, fwd: &Fwd<'_, E>) -> Result<Tensor<E>> {
        let t = fwd.bind(&self.table)?;
        if out_h == self.grid_h && out_w == self.grid_w {
            Ok(t)
        } else {
            bilinear_resize_grid(&t, self.grid_h, self.grid_w, out_h, out_w)
        }
    }
}
