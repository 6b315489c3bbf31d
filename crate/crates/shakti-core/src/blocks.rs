//! Transformer blocks with a hybrid normalisation schedule, multi-head
//! attention with rotary embeddings and QK normalisation, stack builders and
//! model presets.
//!
//! The first `pre_ln` layers of a stack use Pre-LayerNorm residual blocks
//! (stable early training); the remaining layers use Post-RMSNorm blocks
//! (sharper late-layer representations). QK normalisation bounds attention
//! logits by `sqrt(head_dim)` regardless of activation scale.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::nn::{
    self, layer_norm, qk_normalize, rms_norm, rope_1d_scaled, rope_2d, swiglu_ffn, RopeScaling,
};
use crate::params::{Component, Fwd, Param};
use crate::rng::fnv1a64;
use crate::tensor::ops::concat;
use crate::tensor::{Element, Tensor};
use crate::vision::plan_patches;

/// Which residual-normalisation arrangement a block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    /// `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
    PreLayerNorm,
    /// `RMS(x + Attn(x))`, then `RMS(x + FFN(x))`.
    PostRmsNorm,
}

/// Per-layer norm kinds: the first `pre_ln` layers are Pre-LayerNorm, the
/// rest Post-RMSNorm.
pub fn norm_schedule(total_layers: usize, pre_ln: usize) -> Result<Vec<NormKind>> {
    if pre_ln > total_layers {
        return Err(crate::Error::Config(format!(
            "pre_ln count {pre_ln} exceeds total layers {total_layers}"
        )));
    }
    Ok((0..total_layers)
        .map(|i| {
            if i < pre_ln {
                NormKind::PreLayerNorm
            } else {
                NormKind::PostRmsNorm
            }
        })
        .collect())
}

/// Full architecture description of an encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    /// Encoder layers using Pre-LayerNorm; the rest use Post-RMSNorm.
    pub enc_pre_ln: usize,
    pub dec_layers: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub dec_pre_ln: usize,
    pub vocab_size: usize,
    /// Decoder context length the rotary base is calibrated for.
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub rope_scaling: RopeScaling,
    pub ffn_multiplier: f64,
    pub ffn_granularity: usize,
    /// Maximum visual tokens per image.
    pub patch_budget: usize,
    /// Image edge the positional-bias grid is trained at.
    pub train_image_size: usize,
    pub use_qk_norm: bool,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn shakti_1b() -> Self {
        ModelConfig {
            name: "shakti-1b".into(),
            enc_layers: 36,
            enc_dim: 1536,
            enc_heads: 16,
            enc_pre_ln: 12,
            dec_layers: 24,
            dec_dim: 1024,
            dec_heads: 16,
            dec_pre_ln: 8,
            vocab_size: 64000,
            max_seq_len: 8192,
            rope_theta: 125_000.0,
            rope_scaling: RopeScaling::DynamicNtk,
            ffn_multiplier: 8.0 / 3.0,
            ffn_granularity: 8,
            patch_budget: 1024,
            train_image_size: 448,
            use_qk_norm: true,
            norm_eps: nn::NORM_EPS,
        }
    }

    pub fn shakti_4b() -> Self {
        ModelConfig {
            name: "shakti-4b".into(),
            enc_layers: 48,
            enc_dim: 1920,
            enc_heads: 24,
            enc_pre_ln: 18,
            dec_layers: 28,
            dec_dim: 2560,
            dec_heads: 20,
            dec_pre_ln: 9,
            vocab_size: 64000,
            max_seq_len: 16384,
            rope_theta: 500_000.0,
            rope_scaling: RopeScaling::DynamicNtk,
            ffn_multiplier: 8.0 / 3.0,
            ffn_granularity: 8,
            patch_budget: 1024,
            train_image_size: 448,
            use_qk_norm: true,
            norm_eps: nn::NORM_EPS,
        }
    }

    /// Desk-scale configuration used by the synthetic training pipeline and
    /// the test suite.
    pub fn toy() -> Self {
        ModelConfig {
            name: "toy".into(),
            enc_layers: 4,
            enc_dim: 128,
            enc_heads: 4,
            enc_pre_ln: 2,
            dec_layers: 4,
            dec_dim: 128,
            dec_heads: 4,
            dec_pre_ln: 2,
            vocab_size: 20,
            max_seq_len: 64,
            rope_theta: 10_000.0,
            rope_scaling: RopeScaling::DynamicNtk,
            ffn_multiplier: 8.0 / 3.0,
            ffn_granularity: 8,
            patch_budget: 1024,
            train_image_size: 112,
            use_qk_norm: true,
            norm_eps: nn::NORM_EPS,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "shakti-1b" | "1b" => Ok(Self::shakti_1b()),
            "shakti-4b" | "4b" => Ok(Self::shakti_4b()),
            "toy" => Ok(Self::toy()),
            other => Err(crate::Error::Config(format!(
                "unknown model preset {other:?}; expected 1b, 4b or toy"
            ))),
        }
    }

    pub fn enc_head_dim(&self) -> usize {
        self.enc_dim / self.enc_heads
    }

    pub fn dec_head_dim(&self) -> usize {
        self.dec_dim / self.dec_heads
    }

    pub fn enc_ffn_hidden(&self) -> usize {
        nn::ffn_hidden_dim(self.enc_dim, self.ffn_multiplier, self.ffn_granularity)
    }

    pub fn dec_ffn_hidden(&self) -> usize {
        nn::ffn_hidden_dim(self.dec_dim, self.ffn_multiplier, self.ffn_granularity)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.enc_dim == 0 || self.enc_heads == 0 || self.enc_dim % self.enc_heads != 0 {
            problems.push(format!(
                "enc_dim {} must be a positive multiple of enc_heads {}",
                self.enc_dim, self.enc_heads
            ));
        } else if self.enc_head_dim() % 4 != 0 {
            problems.push(format!(
                "encoder head dim {} must be divisible by 4 for 2D rotary embeddings",
                self.enc_head_dim()
            ));
        }
        if self.dec_dim == 0 || self.dec_heads == 0 || self.dec_dim % self.dec_heads != 0 {
            problems.push(format!(
                "dec_dim {} must be a positive multiple of dec_heads {}",
                self.dec_dim, self.dec_heads
            ));
        } else if self.dec_head_dim() % 2 != 0 {
            problems.push(format!(
                "decoder head dim {} must be even for rotary embeddings",
                self.dec_head_dim()
            ));
        }
        if self.enc_pre_ln > self.enc_layers {
            problems.push(format!(
                "enc_pre_ln {} exceeds enc_layers {}",
                self.enc_pre_ln, self.enc_layers
            ));
        }
        if self.dec_pre_ln > self.dec_layers {
            problems.push(format!(
                "dec_pre_ln {} exceeds dec_layers {}",
                self.dec_pre_ln, self.dec_layers
            ));
        }
        if self.vocab_size < 4 {
            problems.push(format!(
                "vocab_size {} leaves no room beyond the pad/bos/eos specials",
                self.vocab_size
            ));
        }
        if self.max_seq_len < 8 {
            problems.push(format!("max_seq_len {} is too short", self.max_seq_len));
        }
        if self.rope_theta <= 1.0 {
            problems.push(format!("rope_theta {} must exceed 1", self.rope_theta));
        }
        if self.ffn_multiplier <= 0.0 || self.ffn_granularity == 0 {
            problems.push("ffn_multiplier and ffn_granularity must be positive".into());
        }
        if plan_patches(self.train_image_size, self.train_image_size, self.patch_budget).is_err() {
            problems.push(format!(
                "train_image_size {} cannot be patched within budget {}",
                self.train_image_size, self.patch_budget
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(problems.join("; ")))
        }
    }

    /// Stable digest of the full configuration, used to pair checkpoints
    /// with compatible models.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serialises");
        fnv1a64(json.as_bytes())
    }
}

/// Attention weights for one block. QK gains are present only when the
/// model uses QK normalisation.
pub struct AttnParams<E: Element> {
    pub wq: Param<E>,
    pub wk: Param<E>,
    pub wv: Param<E>,
    pub wo: Param<E>,
    pub gain_q: Option<Param<E>>,
    pub gain_k: Option<Param<E>>,
}

pub struct FfnParams<E: Element> {
    pub w1: Param<E>,
    pub w3: Param<E>,
    pub w2: Param<E>,
}

pub enum NormParams<E: Element> {
    Layer { gain: Param<E>, bias: Param<E> },
    Rms { gain: Param<E> },
}

impl<E: Element> NormParams<E> {
    pub fn apply(&self, x: &Tensor<E>, eps: f64, fwd: &Fwd<'_, E>) -> Result<Tensor<E>> {
        match self {
            NormParams::Layer { gain, bias } => {
                layer_norm(x, &fwd.bind(gain)?, &fwd.bind(bias)?, eps)
            }
            NormParams::Rms { gain } => rms_norm(x, &fwd.bind(gain)?, eps),
        }
    }
}

/// One transformer block: two norms, attention, SwiGLU feed-forward.
pub struct Block<E: Element> {
    pub kind: NormKind,
    pub norm1: NormParams<E>,
    pub norm2: NormParams<E>,
    pub attn: AttnParams<E>,
    pub ffn: FfnParams<E>,
}

/// Attention masking pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every position attends to every position (encoder).
    Bidirectional,
    /// Position `t` attends to positions `0..=t` (decoder).
    Causal,
}

/// Rotary position information for one forward pass.
pub enum Rotary<'a> {
    None,
    /// 1D rotation with possibly fractional positions.
    OneD { positions: &'a [f64], theta: f64 },
    /// 2D axial rotation by patch row/column.
    TwoD {
        rows: &'a [usize],
        cols: &'a [usize],
        theta: f64,
    },
}

fn apply_rotary<E: Element>(x: &Tensor<E>, rot: &Rotary<'_>) -> Result<Tensor<E>> {
    match rot {
        Rotary::None => Ok(x.clone()),
        Rotary::OneD { positions, theta } => rope_1d_scaled(x, positions, *theta),
        Rotary::TwoD { rows, cols, theta } => rope_2d(x, rows, cols, *theta),
    }
}

/// Multi-head attention over `[t, dim]` input rows.
///
/// Per head: project, rotate q and k, optionally RMS-normalise q and k,
/// scaled dot-product with the mask pattern, weighted sum of values;
/// concatenated heads go through the output projection.
pub fn mha_forward<E: Element>(
    x: &Tensor<E>,
    p: &AttnParams<E>,
    heads: usize,
    mask: AttnMask,
    rot: &Rotary<'_>,
    eps: f64,
    fwd: &Fwd<'_, E>,
) -> Result<Tensor<E>> {
    if x.rank() != 2 {
        return Err(TensorError::Invalid {
            op: "mha_forward",
            msg: format!("expected [t, dim] input, got {:?}", x.shape()),
        }
        .into());
    }
    let t = x.shape()[0];
    let d = x.shape()[1];
    if d % heads != 0 {
        return Err(TensorError::Invalid {
            op: "mha_forward",
            msg: format!("dim {d} not divisible by {heads} heads"),
        }
        .into());
    }
    let dh = d / heads;
    let q = x.matmul(&fwd.bind(&p.wq)?)?;
    let k = x.matmul(&fwd.bind(&p.wk)?)?;
    let v = x.matmul(&fwd.bind(&p.wv)?)?;
    let gains = match (&p.gain_q, &p.gain_k) {
        (Some(gq), Some(gk)) => Some((fwd.bind(gq)?, fwd.bind(gk)?)),
        _ => None,
    };
    let prefix: Vec<usize> = match mask {
        AttnMask::Bidirectional => vec![t; t],
        AttnMask::Causal => (1..=t).collect(),
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, (h + 1) * dh)?;
        let kh = k.slice(1, h * dh, (h + 1) * dh)?;
        let vh = v.slice(1, h * dh, (h + 1) * dh)?;
        let qh = apply_rotary(&qh, rot)?;
        let kh = apply_rotary(&kh, rot)?;
        let (qh, kh) = match &gains {
            Some((gq, gk)) => qk_normalize(&qh, &kh, gq, gk, eps)?,
            None => (qh, kh),
        };
        let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
        let probs = scores.prefix_softmax(&prefix)?;
        head_outs.push(probs.matmul(&vh)?);
    }
    let refs: Vec<&Tensor<E>> = head_outs.iter().collect();
    let merged = concat(&refs, 1)?;
    merged.matmul(&fwd.bind(&p.wo)?)
}

/// One block application following the block's norm arrangement.
pub fn block_forward<E: Element>(
    x: &Tensor<E>,
    b: &Block<E>,
    heads: usize,
    mask: AttnMask,
    rot: &Rotary<'_>,
    eps: f64,
    fwd: &Fwd<'_, E>,
) -> Result<Tensor<E>> {
    match b.kind {
        NormKind::PreLayerNorm => {
            let a = mha_forward(&b.norm1.apply(x, eps, fwd)?, &b.attn, heads, mask, rot, eps, fwd)?;
            let x = x.add(&a)?;
            let f = {
                let n = b.norm2.apply(&x, eps, fwd)?;
                swiglu_ffn(
                    &n,
                    &fwd.bind(&b.ffn.w1)?,
                    &fwd.bind(&b.ffn.w3)?,
                    &fwd.bind(&b.ffn.w2)?,
                )?
            };
            x.add(&f)
        }
        NormKind::PostRmsNorm => {
            let a = mha_forward(x, &b.attn, heads, mask, rot, eps, fwd)?;
            let x = b.norm1.apply(&x.add(&a)?, eps, fwd)?;
            let f = swiglu_ffn(
                &x,
                &fwd.bind(&b.ffn.w1)?,
                &fwd.bind(&b.ffn.w3)?,
                &fwd.bind(&b.ffn.w2)?,
            )?;
            b.norm2.apply(&x.add(&f)?, eps, fwd)
        }
    }
}

/// Run a whole stack of blocks over `x`.
pub fn stack_forward<E: Element>(
    x: &Tensor<E>,
    blocks: &[Block<E>],
    heads: usize,
    mask: AttnMask,
    rot: &Rotary<'_>,
    eps: f64,
    fwd: &Fwd<'_, E>,
) -> Result<Tensor<E>> {
    let mut h = x.clone();
    for b in blocks {
        h = block_forward(&h, b, heads, mask, rot, eps, fwd)?;
    }
    Ok(h)
}

/// Dimensions needed to build one stack of blocks.
pub struct StackDims {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub pre_ln: usize,
    pub ffn_hidden: usize,
    pub use_qk_norm: bool,
}

/// Build an initialised stack. Parameter names are
/// `{prefix}.{layer}.{role}`; output projections use a smaller init scale
/// so residual streams start near identity.
pub fn build_stack<E: Element>(
    prefix: &str,
    component: Component,
    dims: &StackDims,
    seed: u64,
) -> Result<Vec<Block<E>>> {
    let schedule = norm_schedule(dims.layers, dims.pre_ln)?;
    let d = dims.dim;
    let dh = d / dims.heads;
    let h = dims.ffn_hidden;
    let std = 0.02;
    let out_std = 0.02 / ((2 * dims.layers) as f64).sqrt();
    let mut blocks = Vec::with_capacity(dims.layers);
    for (i, &kind) in schedule.iter().enumerate() {
        let name = |role: &str| format!("{prefix}.{i}.{role}");
        let norm = |role: &str, kind: NormKind| -> NormParams<E> {
            match kind {
                NormKind::PreLayerNorm => NormParams::Layer {
                    gain: Param::constant(name(&format!("{role}.gain")), component, &[d], 1.0),
                    bias: Param::constant(name(&format!("{role}.bias")), component, &[d], 0.0),
                },
                NormKind::PostRmsNorm => NormParams::Rms {
                    gain: Param::constant(name(&format!("{role}.gain")), component, &[d], 1.0),
                },
            }
        };
        let attn = AttnParams {
            wq: Param::trunc_normal(name("attn.wq"), component, &[d, d], std, seed),
            wk: Param::trunc_normal(name("attn.wk"), component, &[d, d], std, seed),
            wv: Param::trunc_normal(name("attn.wv"), component, &[d, d], std, seed),
            wo: Param::trunc_normal(name("attn.wo"), component, &[d, d], out_std, seed),
            gain_q: dims
                .use_qk_norm
                .then(|| Param::constant(name("attn.qgain"), component, &[dh], 1.0)),
            gain_k: dims
                .use_qk_norm
                .then(|| Param::constant(name("attn.kgain"), component, &[dh], 1.0)),
        };
        let ffn = FfnParams {
            w1: Param::trunc_normal(name("ffn.w1"), component, &[d, h], std, seed),
            w3: Param::trunc_normal(name("ffn.w3"), component, &[d, h], std, seed),
            w2: Param::trunc_normal(name("ffn.w2"), component, &[h, d], out_std, seed),
        };
        blocks.push(Block {
            kind,
            norm1: norm("norm1", kind),
            norm2: norm("norm2", kind),
            attn,
            ffn,
        });
    }
    Ok(blocks)
}

/// Parameter totals per component, from the closed-form count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: u64,
    pub projector: u64,
    pub decoder: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.encoder + self.projector + self.decoder
    }
}

fn stack_param_count(dims: &StackDims) -> u64 {
    let d = dims.dim as u64;
    let dh = d / dims.heads as u64;
    let h = dims.ffn_hidden as u64;
    let mut per_pre = 0u64;
    let mut per_post = 0u64;
    // Attention: four d*d projections, plus two [dh] gains under QK norm.
    let attn = 4 * d * d + if dims.use_qk_norm { 2 * dh } else { 0 };
    // FFN: w1 and w3 are [d,h], w2 is [h,d].
    let ffn = 3 * d * h;
    per_pre += attn + ffn + 2 * 2 * d; // two LayerNorms: gain + bias each
    per_post += attn + ffn + 2 * d; // two RMSNorms: gain each
    let pre = dims.pre_ln as u64;
    let post = (dims.layers - dims.pre_ln) as u64;
    pre * per_pre + post * per_post
}

/// Closed-form parameter count for a [`ModelConfig`]. The model walker in
/// the test suite cross-checks this against an actually built model.
pub fn param_count(cfg: &ModelConfig) -> Result<ParamCounts> {
    cfg.validate()?;
    let enc_dims = StackDims {
        layers: cfg.enc_layers,
        dim: cfg.enc_dim,
        heads: cfg.enc_heads,
        pre_ln: cfg.enc_pre_ln,
        ffn_hidden: cfg.enc_ffn_hidden(),
        use_qk_norm: cfg.use_qk_norm,
    };
    let dec_dims = StackDims {
        layers: cfg.dec_layers,
        dim: cfg.dec_dim,
        heads: cfg.dec_heads,
        pre_ln: cfg.dec_pre_ln,
        ffn_hidden: cfg.dec_ffn_hidden(),
        use_qk_norm: cfg.use_qk_norm,
    };
    // Patch embeddings: one [3p^2, enc_dim] table per supported patch size.
    let embed: u64 = crate::vision::PATCH_SIZES
        .iter()
        .map(|&p| (3 * p * p * cfg.enc_dim) as u64)
        .sum();
    // Positional bias grid at the training image size.
    let plan = plan_patches(cfg.train_image_size, cfg.train_image_size, cfg.patch_budget)?;
    let pos_bias = (plan.token_count() * cfg.enc_dim) as u64;
    let encoder = embed + pos_bias + stack_param_count(&enc_dims);
    // Projector: [enc_dim, dec_dim] then [dec_dim, dec_dim].
    let projector = (cfg.enc_dim * cfg.dec_dim + cfg.dec_dim * cfg.dec_dim) as u64;
    // Decoder: token embedding and untied output head, plus blocks.
    let decoder = 2 * (cfg.vocab_size * cfg.dec_dim) as u64 + stack_param_count(&dec_dims);
    Ok(ParamCounts {
        encoder,
        projector,
        decoder,
    })
}
