//! Gradient-verification batteries shared by the CLI and the test suite.
//!
//! Two levels of checking, both against central finite differences in `f64`:
//!
//! - [`op_reports`] drives every differentiable operation in isolation
//!   (tensor ops, fused net ops, and one block of each norm arrangement)
//!   and reports the worst relative error per operation.
//! - [`micro_vlm_report`] runs a miniature multimodal model end to end —
//!   image in, cross-entropy out — and compares analytic parameter
//!   gradients against finite differences in parameter space.

use rand::Rng;

use crate::blocks::{
    block_forward, build_stack, AttnMask, Block, ModelConfig, NormParams, Rotary, StackDims,
};
use crate::data::{gen_glyph_sample, GlyphParams};
use crate::model::VlmModel;
use crate::nn::{
    self, bilinear_resize_grid, layer_norm, qk_normalize, rms_norm, rope_1d_scaled, rope_2d,
    swiglu_ffn, RopeScaling,
};
use crate::params::{Component, Fwd, Param};
use crate::rng;
use crate::tensor::gradcheck::{gradcheck, CheckInput, GradCheckReport};
use crate::tensor::ops::concat;
use crate::tensor::{Tape, Tensor};
use crate::vision::Image;
use crate::Result;

/// Worst relative gradient error observed for one named operation.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub worst_rel: f64,
    pub checked: usize,
}

impl OpReport {
    fn absorb(&mut self, r: GradCheckReport) {
        if r.worst_rel > self.worst_rel {
            self.worst_rel = r.worst_rel;
        }
        self.checked += r.checked;
    }
}

/// A set of parameters together with a scalar loss computed through the real
/// forward code. Used to finite-difference whole blocks and models in
/// parameter space.
pub trait ParamSpace {
    /// Visit every parameter, in a stable order.
    fn walk(&mut self, f: &mut dyn FnMut(&mut Param<f64>));
    /// Scalar loss under the given binding context.
    fn loss(&self, fwd: &Fwd<'_, f64>) -> Result<Tensor<f64>>;
}

/// Check analytic parameter gradients of `space` against central finite
/// differences, probing at most `max_per_param` randomly chosen elements of
/// each parameter (all of them when `usize::MAX`).
pub fn param_gradcheck(
    space: &mut impl ParamSpace,
    eps: f64,
    max_per_param: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    // Analytic pass through the tracked forward.
    let tape: Tape<f64> = Tape::new();
    let loss = space.loss(&Fwd::train(&tape))?;
    loss.backward()?;
    let mut sizes: Vec<usize> = Vec::new();
    space.walk(&mut |p| sizes.push(p.numel()));
    let analytic: Vec<Vec<f64>> = {
        let mut grads = Vec::with_capacity(sizes.len());
        let mut k = 0;
        space.walk(&mut |p| {
            let mut g = vec![0.0; sizes[k]];
            tape.param_grad_into(p.id, &mut g);
            grads.push(g);
            k += 1;
        });
        grads
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut pick_rng = rng::stream(seed, "suite/picks");
    for (k, &n) in sizes.iter().enumerate() {
        let picks: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut pick_rng, n, max_per_param).into_vec()
        };
        for j in picks {
            let poke = |space: &mut dyn FnMut(&mut dyn FnMut(&mut Param<f64>)), delta: f64| {
                let mut idx = 0;
                space(&mut |p: &mut Param<f64>| {
                    if idx == k {
                        p.data_mut()[j] += delta;
                    }
                    idx += 1;
                });
            };
            // Five-point central stencil: composed blocks have O(1) third
            // derivatives against individual weight gradients as small as
            // 1e-4, so the plain three-point stencil's eps^2 truncation term
            // would dominate the comparison.
            let mut at = |delta: f64| -> Result<f64> {
                poke(&mut |f| space.walk(f), delta);
                let v = space.loss(&Fwd::inference())?.item()?;
                poke(&mut |f| space.walk(f), -delta);
                Ok(v)
            };
            let p1 = at(eps)?;
            let m1 = at(-eps)?;
            let p2 = at(2.0 * eps)?;
            let m2 = at(-2.0 * eps)?;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let a = analytic[k][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        worst_rel: worst,
        checked,
    })
}

/// Refill parameters with Xavier-scale values. Trained-style inits (std
/// 0.02) attenuate gradients so far below the loss's curvature that coarse
/// finite differences are truncation-dominated; O(1/sqrt(fan_in)) weights
/// keep the check well conditioned without touching the code under test.
fn recondition(space: &mut impl ParamSpace, seed: u64) {
    let mut r = rng::stream(seed, "suite/recondition");
    space.walk(&mut |p| {
        if p.shape.len() >= 2 {
            let s = 1.0 / (p.shape[0] as f64).sqrt();
            for v in p.data_mut().iter_mut() {
                *v = r.random_range(-s..s);
            }
        } else {
            // Near-unit gains: QK-normalised attention logits are bounded by
            // gain_q * gain_k * sqrt(head_dim), so hot gains saturate the
            // softmax and inflate its curvature.
            for v in p.data_mut().iter_mut() {
                *v = r.random_range(0.8..1.2);
            }
        }
    });
}

/// Fixed (untracked) weight tensor so reductions are position-sensitive:
/// without it, sums hide permutation and normalisation bugs.
fn mix(seed: u64, name: &str, shape: &[usize]) -> Result<Tensor<f64>> {
    let c = CheckInput::random(seed ^ 0x5eed, name, shape, -1.0, 1.0);
    Tensor::from_vec(c.data, shape)
}

type Runner = Box<dyn Fn(u64, f64) -> Result<GradCheckReport>>;

fn op_cases() -> Vec<(&'static str, Runner)> {
    let mut cases: Vec<(&'static str, Runner)> = Vec::new();
    let mut case = |name: &'static str, r: Runner| cases.push((name, r));

    case(
        "add",
        Box::new(|s, eps| {
            let w = mix(s, "add/w", &[3, 4])?;
            let ins = [
                CheckInput::random(s, "add/a", &[3, 4], -2.0, 2.0),
                CheckInput::random(s, "add/b", &[3, 4], -2.0, 2.0),
            ];
            gradcheck(&|x| x[0].add(&x[1])?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "sub",
        Box::new(|s, eps| {
            let w = mix(s, "sub/w", &[3, 4])?;
            let ins = [
                CheckInput::random(s, "sub/a", &[3, 4], -2.0, 2.0),
                CheckInput::random(s, "sub/b", &[3, 4], -2.0, 2.0),
            ];
            gradcheck(&|x| x[0].sub(&x[1])?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "mul",
        Box::new(|s, eps| {
            let ins = [
                CheckInput::random(s, "mul/a", &[3, 4], -2.0, 2.0),
                CheckInput::random(s, "mul/b", &[3, 4], -2.0, 2.0),
            ];
            gradcheck(&|x| x[0].mul(&x[1])?.sum(), &ins, eps)
        }),
    );
    case(
        "scale",
        Box::new(|s, eps| {
            let w = mix(s, "scale/w", &[3, 4])?;
            let ins = [CheckInput::random(s, "scale/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].scale(-1.7)?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "silu",
        Box::new(|s, eps| {
            let w = mix(s, "silu/w", &[3, 4])?;
            let ins = [CheckInput::random(s, "silu/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].silu()?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "softplus",
        Box::new(|s, eps| {
            let w = mix(s, "softplus/w", &[3, 4])?;
            let ins = [CheckInput::random(s, "softplus/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].softplus()?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "sum",
        Box::new(|s, eps| {
            let ins = [CheckInput::random(s, "sum/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].sum(), &ins, eps)
        }),
    );
    case(
        "mean",
        Box::new(|s, eps| {
            let ins = [CheckInput::random(s, "mean/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].mean(), &ins, eps)
        }),
    );
    case(
        "variance",
        Box::new(|s, eps| {
            let ins = [CheckInput::random(s, "variance/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].variance(), &ins, eps)
        }),
    );
    case(
        "reshape",
        Box::new(|s, eps| {
            let w = mix(s, "reshape/w", &[4, 3])?;
            let ins = [CheckInput::random(s, "reshape/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].reshape(&[4, 3])?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "transpose",
        Box::new(|s, eps| {
            let w = mix(s, "transpose/w", &[4, 3])?;
            let ins = [CheckInput::random(s, "transpose/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].transpose()?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "slice",
        Box::new(|s, eps| {
            let w = mix(s, "slice/w", &[3, 2])?;
            let ins = [CheckInput::random(s, "slice/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].slice(1, 1, 3)?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "concat",
        Box::new(|s, eps| {
            let w = mix(s, "concat/w", &[3, 5])?;
            let ins = [
                CheckInput::random(s, "concat/a", &[3, 2], -2.0, 2.0),
                CheckInput::random(s, "concat/b", &[3, 3], -2.0, 2.0),
            ];
            gradcheck(&|x| concat(&[&x[0], &x[1]], 1)?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "matmul",
        Box::new(|s, eps| {
            let w = mix(s, "matmul/w", &[3, 2])?;
            let ins = [
                CheckInput::random(s, "matmul/a", &[3, 4], -1.5, 1.5),
                CheckInput::random(s, "matmul/b", &[4, 2], -1.5, 1.5),
            ];
            gradcheck(&|x| x[0].matmul(&x[1])?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "softmax",
        Box::new(|s, eps| {
            let w = mix(s, "softmax/w", &[3, 4])?;
            let ins = [CheckInput::random(s, "softmax/a", &[3, 4], -2.0, 2.0)];
            gradcheck(&|x| x[0].softmax(1)?.mul(&w)?.sum(), &ins, eps)
        }),
    );
    case(
        "prefix_softmax",
        Box::new(|s, eps| {
            let w = mix(s, "prefix_softmax/w", &[4, 5])?;
            let ins = [CheckInput::random(s, "prefix_softmax/a", &[4, 5], -2.0, 2.0)];
            gradcheck(
                &|x| x[0].prefix_softmax(&[1, 3, 5, 2])?.mul(&w)?.sum(),
                &ins,
                eps,
            )
        }),
    );
    case(
        "cross_entropy",
        Box::new(|s, eps| {
            let ins = [CheckInput::random(s, "cross_entropy/a", &[4, 7], -2.0, 2.0)];
            gradcheck(
                &|x| x[0].cross_entropy(&[1, 0, 6, 3], &[true, false, true, true]),
                &ins,
                eps,
            )
        }),
    );
    case(
        "gather_rows",
        Box::new(|s, eps| {
            let w = mix(s, "gather_rows/w", &[5, 3])?;
            let ins = [CheckInput::random(s, "gather_rows/a", &[5, 3], -2.0, 2.0)];
            gradcheck(
                &|x| x[0].gather_rows(&[0, 2, 2, 4, 1])?.mul(&w)?.sum(),
                &ins,
                eps,
            )
        }),
    );
    case(
        "layer_norm",
        Box::new(|s, eps| {
            let w = mix(s, "layer_norm/w", &[3, 6])?;
            let ins = [
                CheckInput::random(s, "layer_norm/x", &[3, 6], -2.0, 2.0),
                CheckInput::random(s, "layer_norm/g", &[6], 0.5, 1.5),
                CheckInput::random(s, "layer_norm/b", &[6], -0.5, 0.5),
            ];
            gradcheck(
                &|x| layer_norm(&x[0], &x[1], &x[2], nn::NORM_EPS)?.mul(&w)?.sum(),
                &ins,
                eps,
            )
        }),
    );
    case(
        "rms_norm",
        Box::new(|s, eps| {
            let w = mix(s, "rms_norm/w", &[3, 6])?;
            let ins = [
                CheckInput::random(s, "rms_norm/x", &[3, 6], -2.0, 2.0),
                CheckInput::random(s, "rms_norm/g", &[6], 0.5, 1.5),
            ];
            gradcheck(
                &|x| rms_norm(&x[0], &x[1], nn::NORM_EPS)?.mul(&w)?.sum(),
                &ins,
                eps,
            )
        }),
    );
    case(
        "qk_normalize",
        Box::new(|s, eps| {
            let wq = mix(s, "qk_normalize/wq", &[3, 4])?;
            let wk = mix(s, "qk_normalize/wk", &[5, 4])?;
            let ins = [
                CheckInput::random(s, "qk_normalize/q", &[3, 4], -2.0, 2.0),
                CheckInput::random(s, "qk_normalize/k", &[5, 4], -2.0, 2.0),
                CheckInput::random(s, "qk_normalize/gq", &[4], 0.5, 1.5),
                CheckInput::random(s, "qk_normalize/gk", &[4], 0.5, 1.5),
            ];
            gradcheck(
                &|x| {
                    let (q, k) = qk_normalize(&x[0], &x[1], &x[2], &x[3], nn::NORM_EPS)?;
                    q.mul(&wq)?.sum()?.add(&k.mul(&wk)?.sum()?)
                },
                &ins,
                eps,
            )
        }),
    );
    case(
        "swiglu_ffn",
        Box::new(|s, eps| {
            let w = mix(s, "swiglu_ffn/w", &[3, 6])?;
            let ins = [
                CheckInput::random(s, "swiglu_ffn/x", &[3, 6], -1.0, 1.0),
                CheckInput::random(s, "swiglu_ffn/w1", &[6, 8], -0.5, 0.5),
                CheckInput::random(s, "swiglu_ffn/w3", &[6, 8], -0.5, 0.5),
                CheckInput::random(s, "swiglu_ffn/w2", &[8, 6], -0.5, 0.5),
            ];
            gradcheck(
                &|x| swiglu_ffn(&x[0], &x[1], &x[2], &x[3])?.mul(&w)?.sum(),
                &ins,
                eps,
            )
        }),
    );
    case(
        "rope_1d",
        Box::new(|s, eps| {
            let w = mix(s, "rope_1d/w", &[3, 8])?;
            let ins = [CheckInput::random(s, "rope_1d/x", &[3, 8], -2.0, 2.0)];
            gradcheck(
                &|x| rope_1d_scaled(&x[0], &[0.0, 1.5, 3.0], 50.0)?.mul(&w)?.sum(),
                &ins,
                eps,
            )
        }),
    );
    case(
        "rope_2d",
        Box::new(|s, eps| {
            let w = mix(s, "rope_2d/w", &[4, 8])?;
            let ins = [CheckInput::random(s, "rope_2d/x", &[4, 8], -2.0, 2.0)];
            gradcheck(
                &|x| {
                    rope_2d(&x[0], &[0, 0, 1, 1], &[0, 1, 0, 1], 50.0)?
                        .mul(&w)?
                        .sum()
                },
                &ins,
                eps,
            )
        }),
    );
    case(
        "bilinear_resize",
        Box::new(|s, eps| {
            let w = mix(s, "bilinear_resize/w", &[20, 2])?;
            let ins = [CheckInput::random(s, "bilinear_resize/t", &[9, 2], -2.0, 2.0)];
            gradcheck(
                &|x| bilinear_resize_grid(&x[0], 3, 3, 5, 4)?.mul(&w)?.sum(),
                &ins,
                eps,
            )
        }),
    );
    case("block_pre_layer_norm", block_case(true));
    case("block_post_rms_norm", block_case(false));
    cases
}

/// One block checked in parameter space through [`block_forward`]:
/// the Pre-LayerNorm wiring runs encoder-style (bidirectional mask, 2D
/// rotary), the Post-RMSNorm wiring decoder-style (causal mask, 1D rotary).
struct BlockSpace {
    block: Block<f64>,
    x: Param<f64>,
    weight: Tensor<f64>,
    pre: bool,
}

impl ParamSpace for BlockSpace {
    fn walk(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        f(&mut self.x);
        let b = &mut self.block;
        let norm = |n: &mut NormParams<f64>, f: &mut dyn FnMut(&mut Param<f64>)| match n {
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
    }

    fn loss(&self, fwd: &Fwd<'_, f64>) -> Result<Tensor<f64>> {
        let x = fwd.bind(&self.x)?;
        let y = if self.pre {
            let rot = Rotary::TwoD {
                rows: &[0, 0, 0, 1, 1],
                cols: &[0, 1, 2, 0, 1],
                theta: 100.0,
            };
            block_forward(&x, &self.block, 2, AttnMask::Bidirectional, &rot, nn::NORM_EPS, fwd)?
        } else {
            let rot = Rotary::OneD {
                positions: &[0.0, 1.0, 2.0, 3.0, 4.5],
                theta: 100.0,
            };
            block_forward(&x, &self.block, 2, AttnMask::Causal, &rot, nn::NORM_EPS, fwd)?
        };
        y.mul(&self.weight)?.sum()
    }
}

fn block_case(pre: bool) -> Runner {
    Box::new(move |seed, eps| {
        let dims = StackDims {
            layers: 2,
            dim: 8,
            heads: 2,
            pre_ln: 1,
            ffn_hidden: 16,
            use_qk_norm: true,
        };
        let mut blocks = build_stack::<f64>("chk", Component::Decoder, &dims, seed)?.into_iter();
        let first = blocks.next().expect("two blocks");
        let second = blocks.next().expect("two blocks");
        let block = if pre { first } else { second };
        let mut r = rng::stream(seed, "suite/block-x");
        let xv: Vec<f64> = (0..5 * 8).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut space = BlockSpace {
            block,
            x: Param::new("chk.x", Component::Decoder, &[5, 8], xv),
            weight: mix(seed, "suite/block-w", &[5, 8])?,
            pre,
        };
        recondition(&mut space, seed);
        // Unit-variance input rows keep the leading LayerNorm's curvature
        // mild; fan-in-scaled rows would be sharpened by 1/sqrt(var).
        for v in space.x.data_mut().iter_mut() {
            *v = r.random_range(-2.0..2.0);
        }
        param_gradcheck(&mut space, eps, usize::MAX, seed)
    })
}

/// Run the whole operation battery over `seeds`, aggregating the worst
/// relative error per operation.
pub fn op_reports(seeds: &[u64], eps: f64) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (name, runner) in op_cases() {
        let mut report = OpReport {
            name,
            worst_rel: 0.0,
            checked: 0,
        };
        for &s in seeds {
            report.absorb(runner(s, eps)?);
        }
        out.push(report);
    }
    Ok(out)
}

/// A miniature multimodal configuration: one Pre-LayerNorm encoder layer,
/// one Post-RMSNorm decoder layer, width 8, two heads, a 28px image budgeted
/// to four visual tokens. Small enough to finite-difference end to end.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        name: "micro".into(),
        enc_layers: 1,
        enc_dim: 8,
        enc_heads: 2,
        enc_pre_ln: 1,
        dec_layers: 1,
        dec_dim: 8,
        dec_heads: 2,
        dec_pre_ln: 0,
        vocab_size: 7,
        max_seq_len: 16,
        rope_theta: 1_000.0,
        rope_scaling: RopeScaling::DynamicNtk,
        ffn_multiplier: 8.0 / 3.0,
        ffn_granularity: 8,
        patch_budget: 4,
        train_image_size: 28,
        use_qk_norm: true,
        norm_eps: nn::NORM_EPS,
    }
}

struct MicroVlmSpace {
    model: VlmModel<f64>,
    image: Image,
    text_ids: Vec<usize>,
}

impl ParamSpace for MicroVlmSpace {
    fn walk(&mut self, f: &mut dyn FnMut(&mut Param<f64>)) {
        self.model.visit_params_mut(f);
    }

    fn loss(&self, fwd: &Fwd<'_, f64>) -> Result<Tensor<f64>> {
        Ok(self
            .model
            .vlm_forward(Some(&self.image), &self.text_ids, 0, 0, fwd)?
            .loss)
    }
}

/// End-to-end parameter gradcheck of the miniature multimodal model,
/// probing up to `samples_per_param` elements of every parameter.
pub fn micro_vlm_report(eps: f64, samples_per_param: usize, seed: u64) -> Result<OpReport> {
    let model = VlmModel::<f64>::init(micro_config(), seed)?;
    let glyphs = GlyphParams {
        image_size: 28,
        n_glyphs: 1,
        glyph_set_size: 4,
        ..GlyphParams::default()
    };
    let sample = gen_glyph_sample(seed, &glyphs)?;
    let mut space = MicroVlmSpace {
        model,
        image: sample.image,
        text_ids: vec![3, 4, 5, 2],
    };
    recondition(&mut space, seed);
    let r = param_gradcheck(&mut space, eps, samples_per_param, seed)?;
    Ok(OpReport {
        name: "micro_vlm",
        worst_rel: r.worst_rel,
        checked: r.checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_battery_passes_at_coarse_eps() {
        for r in op_reports(&[3], 1e-3).unwrap() {
            assert!(
                r.worst_rel < 1e-4,
                "{}: worst rel {:.3e} over {} checks",
                r.name,
                r.worst_rel,
                r.checked
            );
            assert!(r.checked > 0, "{}: no elements checked", r.name);
        }
    }

    #[test]
    fn micro_model_end_to_end_gradients_match() {
        let r = micro_vlm_report(1e-3, 2, 0).unwrap();
        assert!(
            r.worst_rel < 1e-3,
            "micro model worst rel {:.3e} over {} checks",
            r.worst_rel,
            r.checked
        );
        assert!(r.checked > 0);
    }
}
