//! The assembled vision-language model: vision tower, projector and decoder,
//! with forward passes for training, evaluation and greedy decoding.

use std::collections::HashSet;

use crate::blocks::{
    build_stack, stack_forward, AttnMask, Block, ModelConfig, Rotary, StackDims,
};
use crate::error::{Result, TensorError};
use crate::fusion::{fuse_sequence, project_visual, FusedSequence};
use crate::nn::{PosBiasTable, RopeContext};
use crate::params::{Component, Fwd, Param};
use crate::tensor::{Element, ParamId, Tape, Tensor};
use crate::vision::{embed_patches, patchify, plan_patches, resize_image, Image, PATCH_SIZES};

/// Token id conventions shared by the synthetic corpora and the decoder.
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
/// First id available for ordinary symbols.
pub const FIRST_SYMBOL_ID: usize = 3;

/// Rotary base for the encoder's 2D patch grid. Patch grids are at most
/// 32 positions per axis, so the long-wavelength base used for text
/// contexts is unnecessary here.
pub const ENCODER_ROPE_THETA: f64 = 10_000.0;

pub struct EncoderParts<E: Element> {
    /// One embedding table per supported patch size, aligned with
    /// [`PATCH_SIZES`].
    pub patch_embeds: Vec<Param<E>>,
    pub pos_bias: PosBiasTable<E>,
    pub blocks: Vec<Block<E>>,
}

pub struct ProjectorParts<E: Element> {
    pub p1: Param<E>,
    pub p2: Param<E>,
}

pub struct DecoderParts<E: Element> {
    pub tok_embed: Param<E>,
    pub blocks: Vec<Block<E>>,
    pub lm_head: Param<E>,
}

/// Output of a supervised forward pass.
pub struct VlmOutput<E: Element> {
    /// `[len, vocab]` next-token logits at every position.
    pub logits: Tensor<E>,
    /// Mean cross-entropy over supervised positions.
    pub loss: Tensor<E>,
    /// Number of supervised positions behind `loss`.
    pub supervised_tokens: usize,
}

pub struct VlmModel<E: Element> {
    pub cfg: ModelConfig,
    pub encoder: EncoderParts<E>,
    pub projector: ProjectorParts<E>,
    pub decoder: DecoderParts<E>,
}

impl<E: Element> VlmModel<E> {
    /// Build and initialise a model from its configuration.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
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
        let patch_embeds = PATCH_SIZES
            .iter()
            .map(|&p| {
                Param::trunc_normal(
                    format!("encoder.embed{p}"),
                    Component::Encoder,
                    &[3 * p * p, cfg.enc_dim],
                    0.02,
                    seed,
                )
            })
            .collect();
        let train_plan = plan_patches(cfg.train_image_size, cfg.train_image_size, cfg.patch_budget)?;
        let pos_bias = PosBiasTable::new(
            "encoder.pos_bias",
            Component::Encoder,
            train_plan.grid_h,
            train_plan.grid_w,
            cfg.enc_dim,
            seed,
        );
        let encoder = EncoderParts {
            patch_embeds,
            pos_bias,
            blocks: build_stack("encoder", Component::Encoder, &enc_dims, seed)?,
        };
        let projector = ProjectorParts {
            p1: Param::trunc_normal(
                "projector.p1",
                Component::Projector,
                &[cfg.enc_dim, cfg.dec_dim],
                0.02,
                seed,
            ),
            p2: Param::trunc_normal(
                "projector.p2",
                Component::Projector,
                &[cfg.dec_dim, cfg.dec_dim],
                0.02,
                seed,
            ),
        };
        let decoder = DecoderParts {
            tok_embed: Param::trunc_normal(
                "decoder.tok_embed",
                Component::Decoder,
                &[cfg.vocab_size, cfg.dec_dim],
                0.02,
                seed,
            ),
            blocks: build_stack("decoder", Component::Decoder, &dec_dims, seed)?,
            lm_head: Param::trunc_normal(
                "decoder.lm_head",
                Component::Decoder,
                &[cfg.dec_dim, cfg.vocab_size],
                0.02,
                seed,
            ),
        };
        Ok(VlmModel {
            cfg,
            encoder,
            projector,
            decoder,
        })
    }

    /// Visit every parameter in a stable order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<E>)) {
        let visit_block = |b: &Block<E>, f: &mut dyn FnMut(&Param<E>)| {
            use crate::blocks::NormParams;
            let norm = |n: &NormParams<E>, f: &mut dyn FnMut(&Param<E>)| match n {
                NormParams::Layer { gain, bias } => {
                    f(gain);
                    f(bias);
                }
                NormParams::Rms { gain } => f(gain),
            };
            norm(&b.norm1, f);
            f(&b.attn.wq);
            f(&b.attn.wk);
            f(&b.attn.wv);
            f(&b.attn.wo);
            if let Some(g) = &b.attn.gain_q {
                f(g);
            }
            if let Some(g) = &b.attn.gain_k {
                f(g);
            }
            norm(&b.norm2, f);
            f(&b.ffn.w1);
            f(&b.ffn.w3);
            f(&b.ffn.w2);
        };
        for p in &self.encoder.patch_embeds {
            f(p);
        }
        f(&self.encoder.pos_bias.table);
        for b in &self.encoder.blocks {
            visit_block(b, f);
        }
        f(&self.projector.p1);
        f(&self.projector.p2);
        f(&self.decoder.tok_embed);
        for b in &self.decoder.blocks {
            visit_block(b, f);
        }
        f(&self.decoder.lm_head);
    }

    /// Visit every parameter mutably, in the same order as `visit_params`.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<E>)) {
        let visit_block = |b: &mut Block<E>, f: &mut dyn FnMut(&mut Param<E>)| {
            use crate::blocks::NormParams;
            let norm = |n: &mut NormParams<E>, f: &mut dyn FnMut(&mut Param<E>)| match n {
                NormParams::Layer { gain, bias } => {
                    f(gain);
                    f(bias);
                }
                NormParams::Rms { gain } => f(gain),
            };
            norm(&mut b.norm1, f);
            f(&mut b.attn.wq);
            f(&mut b.attn.wk);
            f(&mut b.attn.wv);
            f(&mut b.attn.wo);
            if let Some(g) = &mut b.attn.gain_q {
                f(g);
            }
            if let Some(g) = &mut b.attn.gain_k {
                f(g);
            }
            norm(&mut b.norm2, f);
            f(&mut b.ffn.w1);
            f(&mut b.ffn.w3);
            f(&mut b.ffn.w2);
        };
        for p in &mut self.encoder.patch_embeds {
            f(p);
        }
        f(&mut self.encoder.pos_bias.table);
        for b in &mut self.encoder.blocks {
            visit_block(b, f);
        }
        f(&mut self.projector.p1);
        f(&mut self.projector.p2);
        f(&mut self.decoder.tok_embed);
        for b in &mut self.decoder.blocks {
            visit_block(b, f);
        }
        f(&mut self.decoder.lm_head);
    }

    /// Total stored elements, split by component. Cross-checks the closed
    /// form in [`crate::blocks::param_count`].
    pub fn count_stored_params(&self) -> crate::blocks::ParamCounts {
        let mut counts = crate::blocks::ParamCounts {
            encoder: 0,
            projector: 0,
            decoder: 0,
        };
        self.visit_params(&mut |p| match p.component {
            Component::Encoder => counts.encoder += p.numel() as u64,
            Component::Projector => counts.projector += p.numel() as u64,
            Component::Decoder => counts.decoder += p.numel() as u64,
        });
        counts
    }

    /// Ids of parameters outside the frozen components.
    pub fn trainable_ids(&self, frozen: &HashSet<Component>) -> HashSet<ParamId> {
        let mut ids = HashSet::new();
        self.visit_params(&mut |p| {
            if !frozen.contains(&p.component) {
                ids.insert(p.id);
            }
        });
        ids
    }

    /// A frozen copy sharing weight buffers copy-on-write (fresh ids).
    /// Later optimizer writes to `self` do not affect the snapshot.
    pub fn snapshot(&self) -> VlmModel<E> {
        use crate::blocks::NormParams;
        let clone_norm = |n: &NormParams<E>| match n {
            NormParams::Layer { gain, bias } => NormParams::Layer {
                gain: gain.clone_shared(),
                bias: bias.clone_shared(),
            },
            NormParams::Rms { gain } => NormParams::Rms {
                gain: gain.clone_shared(),
            },
        };
        let clone_block = |b: &Block<E>| Block {
            kind: b.kind,
            norm1: clone_norm(&b.norm1),
            norm2: clone_norm(&b.norm2),
            attn: crate::blocks::AttnParams {
                wq: b.attn.wq.clone_shared(),
                wk: b.attn.wk.clone_shared(),
                wv: b.attn.wv.clone_shared(),
                wo: b.attn.wo.clone_shared(),
                gain_q: b.attn.gain_q.as_ref().map(|p| p.clone_shared()),
                gain_k: b.attn.gain_k.as_ref().map(|p| p.clone_shared()),
            },
            ffn: crate::blocks::FfnParams {
                w1: b.ffn.w1.clone_shared(),
                w3: b.ffn.w3.clone_shared(),
                w2: b.ffn.w2.clone_shared(),
            },
        };
        VlmModel {
            cfg: self.cfg.clone(),
            encoder: EncoderParts {
                patch_embeds: self
                    .encoder
                    .patch_embeds
                    .iter()
                    .map(|p| p.clone_shared())
                    .collect(),
                pos_bias: PosBiasTable {
                    grid_h: self.encoder.pos_bias.grid_h,
                    grid_w: self.encoder.pos_bias.grid_w,
                    dim: self.encoder.pos_bias.dim,
                    table: self.encoder.pos_bias.table.clone_shared(),
                },
                blocks: self.encoder.blocks.iter().map(clone_block).collect(),
            },
            projector: ProjectorParts {
                p1: self.projector.p1.clone_shared(),
                p2: self.projector.p2.clone_shared(),
            },
            decoder: DecoderParts {
                tok_embed: self.decoder.tok_embed.clone_shared(),
                blocks: self.decoder.blocks.iter().map(clone_block).collect(),
                lm_head: self.decoder.lm_head.clone_shared(),
            },
        }
    }

    /// Rotary configuration of the decoder.
    pub fn rope_ctx(&self) -> RopeContext {
        RopeContext {
            base_theta: self.cfg.rope_theta,
            trained_len: self.cfg.max_seq_len,
            head_dim: self.cfg.dec_head_dim(),
            scaling: self.cfg.rope_scaling,
        }
    }

    /// Run the vision tower: plan, resize, patchify, embed, encode.
    /// Returns `[n_patches, enc_dim]` features.
    pub fn encode_image(&self, img: &Image, fwd: &Fwd<'_, E>) -> Result<Tensor<E>> {
        let plan = plan_patches(img.height, img.width, self.cfg.patch_budget)?;
        let resized = resize_image(img, plan.resized_h, plan.resized_w)?;
        let patches = patchify::<E>(&resized, &plan)?;
        let size_index = PATCH_SIZES
            .iter()
            .position(|&p| p == plan.patch_size)
            .expect("plan uses a supported patch size");
        let embedded = embed_patches(
            &patches,
            &self.encoder.patch_embeds[size_index],
            &plan,
            &self.encoder.pos_bias,
            fwd,
        )?;
        let (rows, cols) = plan.grid_coords();
        let rot = Rotary::TwoD {
            rows: &rows,
            cols: &cols,
            theta: ENCODER_ROPE_THETA,
        };
        stack_forward(
            &embedded,
            &self.encoder.blocks,
            self.cfg.enc_heads,
            AttnMask::Bidirectional,
            &rot,
            self.cfg.norm_eps,
            fwd,
        )
    }

    /// Vision tower plus projector: `[n_patches, dec_dim]` visual tokens.
    pub fn visual_tokens(&self, img: &Image, fwd: &Fwd<'_, E>) -> Result<Tensor<E>> {
        let features = self.encode_image(img, fwd)?;
        project_visual(&features, &self.projector.p1, &self.projector.p2, fwd)
    }

    /// Decoder over fused embeddings. `target_len` is the context length the
    /// run is nominally operating at; beyond the trained length the rotary
    /// base is rescaled (or positions compressed, per config).
    pub fn decode(
        &self,
        embeddings: &Tensor<E>,
        target_len: usize,
        fwd: &Fwd<'_, E>,
    ) -> Result<Tensor<E>> {
        let t = embeddings.shape()[0];
        let ctx = self.rope_ctx();
        let target = target_len.max(t);
        let theta = ctx.effective_theta(target);
        let positions: Vec<usize> = (0..t).collect();
        let pos = ctx.scaled_positions(&positions, target);
        let rot = Rotary::OneD {
            positions: &pos,
            theta,
        };
        let hidden = stack_forward(
            embeddings,
            &self.decoder.blocks,
            self.cfg.dec_heads,
            AttnMask::Causal,
            &rot,
            self.cfg.norm_eps,
            fwd,
        )?;
        hidden.matmul(&fwd.bind(&self.decoder.lm_head)?)
    }

    /// Loss over a fused sequence: logits at position `t-1` predict the
    /// token at position `t`, for every supervised position `t`.
    pub fn loss_from_logits(
        &self,
        logits: &Tensor<E>,
        fused: &FusedSequence<E>,
    ) -> Result<Tensor<E>> {
        let t = fused.len();
        if t < 2 {
            return Err(TensorError::Invalid {
                op: "loss_from_logits",
                msg: "sequence too short to supervise".into(),
            }
            .into());
        }
        let predictors = logits.slice(0, 0, t - 1)?;
        predictors.cross_entropy(&fused.target_ids[1..], &fused.loss_mask[1..])
    }

    /// Full supervised pass: optional image, prompt and response tokens.
    pub fn vlm_forward(
        &self,
        image: Option<&Image>,
        text_ids: &[usize],
        prompt_len: usize,
        target_len: usize,
        fwd: &Fwd<'_, E>,
    ) -> Result<VlmOutput<E>> {
        let visual = match image {
            Some(img) => Some(self.visual_tokens(img, fwd)?),
            None => None,
        };
        let tok_embed = fwd.bind(&self.decoder.tok_embed)?;
        let fused = fuse_sequence(visual.as_ref(), text_ids, prompt_len, &tok_embed, BOS_ID)?;
        let logits = self.decode(&fused.embeddings, target_len, fwd)?;
        let loss = self.loss_from_logits(&logits, &fused)?;
        Ok(VlmOutput {
            logits,
            loss,
            supervised_tokens: fused.supervised_count(),
        })
    }

    /// Text-only supervised pass (context-extension training).
    pub fn text_forward(
        &self,
        text_ids: &[usize],
        target_len: usize,
        fwd: &Fwd<'_, E>,
    ) -> Result<VlmOutput<E>> {
        self.vlm_forward(None, text_ids, 0, target_len, fwd)
    }

    /// Summed log-probability of the supervised tokens, as a tracked scalar.
    pub fn sequence_logprob(
        &self,
        image: Option<&Image>,
        text_ids: &[usize],
        prompt_len: usize,
        fwd: &Fwd<'_, E>,
    ) -> Result<Tensor<E>> {
        let out = self.vlm_forward(image, text_ids, prompt_len, self.cfg.max_seq_len, fwd)?;
        // loss is mean NLL over supervised tokens; logprob = -loss * count.
        out.loss.scale(-(out.supervised_tokens as f64))
    }

    /// Greedy decoding: feed the image and prompt, then repeatedly append
    /// the argmax token. Stops after `max_new` tokens or at `eos` (which is
    /// not included in the result).
    pub fn greedy_decode(
        &self,
        image: Option<&Image>,
        prompt: &[usize],
        max_new: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        let fwd = Fwd::inference();
        let visual = match image {
            Some(img) => Some(self.visual_tokens(img, &fwd)?),
            None => None,
        };
        let tok_embed = fwd.bind(&self.decoder.tok_embed)?;
        let mut text: Vec<usize> = prompt.to_vec();
        let mut generated = Vec::new();
        for _ in 0..max_new {
            let fused = fuse_sequence(visual.as_ref(), &text, text.len(), &tok_embed, BOS_ID)?;
            let logits = self.decode(&fused.embeddings, self.cfg.max_seq_len, &fwd)?;
            let t = fused.len();
            let last = logits.slice(0, t - 1, t)?;
            let row = last.data();
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            if best == eos {
                break;
            }
            generated.push(best);
            text.push(best);
        }
        Ok(generated)
    }
}

/// Convenience: a training context (tape plus trainable filter) for one
/// forward/backward pass over a model.
pub struct TrainPass<E: Element> {
    pub tape: Tape<E>,
    pub trainable: HashSet<ParamId>,
}

impl<E: Element> TrainPass<E> {
    pub fn new(model: &VlmModel<E>, frozen: &HashSet<Component>) -> Self {
        TrainPass {
            tape: Tape::new(),
            trainable: model.trainable_ids(frozen),
        }
    }

    pub fn fwd(&self) -> Fwd<'_, E> {
        Fwd::train_filtered(&self.tape, &self.trainable)
    }
}
