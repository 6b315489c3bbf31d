//! Learning-rate schedule and the decoupled-weight-decay adaptive-moment
//! optimizer.

use std::collections::HashMap;

use crate::error::{Result, TrainError};
use crate::params::Param;
use crate::tensor::{Element, ParamId};

/// Linear warmup to `peak` over `warmup_steps`, then cosine decay to
/// `min_lr` at `total_steps`.
pub fn cosine_lr(
    step: usize,
    warmup_steps: usize,
    total_steps: usize,
    peak: f64,
    min_lr: f64,
) -> Result<f64> {
    if step > total_steps || warmup_steps > total_steps {
        return Err(TrainError::ScheduleBounds {
            step: step.max(warmup_steps),
            total: total_steps,
        }
        .into());
    }
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    if total_steps == warmup_steps {
        return Ok(peak);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(min_lr + 0.5 * (peak - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct Moments<E: Element> {
    pub m: Vec<E>,
    pub v: Vec<E>,
}

/// Adaptive moments with decoupled weight decay. Decay applies only to
/// parameters flagged `decay` (matrices), never to gains or biases, and uses
/// the pre-update weight:
/// `w <- w - lr * mhat / (sqrt(vhat) + eps) - lr * wd * w_pre`.
pub struct AdamW<E: Element> {
    pub cfg: AdamWConfig,
    /// Completed optimizer steps (bias-correction exponent).
    pub t: u64,
    states: HashMap<ParamId, Moments<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            states: HashMap::new(),
        }
    }

    /// Apply one step to every parameter that has a gradient entry.
    /// `walk` must visit the parameters (the model's stable walker, or a
    /// hand-rolled one in tests); parameters without gradients are skipped.
    pub fn apply(
        &mut self,
        mut walk: impl FnMut(&mut dyn FnMut(&mut Param<E>)),
        grads: &HashMap<ParamId, Vec<E>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let eps = self.cfg.eps;
        let wd = self.cfg.weight_decay;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut problem: Option<TrainError> = None;
        let states = &mut self.states;
        walk(&mut |p: &mut Param<E>| {
            let Some(g) = grads.get(&p.id) else { return };
            if g.len() != p.numel() {
                if problem.is_none() {
                    problem = Some(TrainError::BadStageConfig(format!(
                        "gradient for {} has {} elements, parameter has {}",
                        p.name,
                        g.len(),
                        p.numel()
                    )));
                }
                return;
            }
            let st = states.entry(p.id).or_insert_with(|| Moments {
                m: vec![E::c(0.0); g.len()],
                v: vec![E::c(0.0); g.len()],
            });
            let decay = p.decay;
            let w = p.data_mut();
            for i in 0..g.len() {
                let gi = g[i].f64();
                let m = b1 * st.m[i].f64() + (1.0 - b1) * gi;
                let v = b2 * st.v[i].f64() + (1.0 - b2) * gi * gi;
                st.m[i] = E::c(m);
                st.v[i] = E::c(v);
                let w_pre = w[i].f64();
                let mut wi = w_pre - lr * (m / c1) / ((v / c2).sqrt() + eps);
                if decay {
                    wi -= lr * wd * w_pre;
                }
                w[i] = E::c(wi);
            }
        });
        match problem {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }

    /// Moments in walker order (zeros for parameters never updated),
    /// for checkpointing.
    pub fn moments_in_order(
        &self,
        mut walk: impl FnMut(&mut dyn FnMut(&Param<E>)),
    ) -> Vec<(Vec<E>, Vec<E>)> {
        let mut out = Vec::new();
        walk(&mut |p: &Param<E>| {
            out.push(match self.states.get(&p.id) {
                Some(s) => (s.m.clone(), s.v.clone()),
                None => (vec![E::c(0.0); p.numel()], vec![E::c(0.0); p.numel()]),
            });
        });
        out
    }

    /// Rebuild optimizer state from checkpointed moments (walker order).
    pub fn restore(
        cfg: AdamWConfig,
        t: u64,
        mut walk: impl FnMut(&mut dyn FnMut(&Param<E>)),
        moments: &[(Vec<E>, Vec<E>)],
    ) -> Result<Self> {
        let mut states = HashMap::new();
        let mut idx = 0usize;
        let mut problem = None;
        walk(&mut |p: &Param<E>| {
            if let Some((m, v)) = moments.get(idx) {
                if m.len() != p.numel() || v.len() != p.numel() {
                    problem.get_or_insert(format!(
                        "moment {idx} has {} elements, parameter {} has {}",
                        m.len(),
                        p.name,
                        p.numel()
                    ));
                } else {
                    states.insert(
                        p.id,
                        Moments {
                            m: m.clone(),
                            v: v.clone(),
                        },
                    );
                }
            } else {
                problem.get_or_insert(format!("missing optimizer moments for index {idx}"));
            }
            idx += 1;
        });
        if moments.len() != idx {
            problem.get_or_insert(format!(
                "checkpoint has {} moment pairs, model has {idx} parameters",
                moments.len()
            ));
        }
        match problem {
            Some(msg) => Err(TrainError::BadStageConfig(msg).into()),
            None => Ok(AdamW { cfg, t, states }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;

    #[test]
    fn cosine_boundaries_are_exact() {
        let peak = 3e-4;
        let min = 3e-5;
        assert_eq!(cosine_lr(0, 10, 100, peak, min).unwrap(), 0.0);
        assert_eq!(cosine_lr(10, 10, 100, peak, min).unwrap(), peak);
        assert_eq!(cosine_lr(100, 10, 100, peak, min).unwrap(), min);
        // Midpoint of decay: (peak+min)/2 within 1e-12.
        let mid = cosine_lr(55, 10, 100, peak, min).unwrap();
        assert!((mid - (peak + min) / 2.0).abs() < 1e-12);
        // Warmup ramp is linear.
        let half_warm = cosine_lr(5, 10, 100, peak, min).unwrap();
        assert!((half_warm - peak / 2.0).abs() < 1e-18);
        assert!(cosine_lr(101, 10, 100, peak, min).is_err());
        // No warmup: the schedule starts at peak and still ends at min_lr.
        assert_eq!(cosine_lr(0, 0, 7, peak, min).unwrap(), peak);
        assert_eq!(cosine_lr(7, 0, 7, peak, min).unwrap(), min);
        // Degenerate all-warmup schedule holds peak at the boundary.
        assert_eq!(cosine_lr(7, 7, 7, peak, min).unwrap(), peak);
    }

    #[test]
    fn cosine_is_monotone_after_warmup() {
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let lr = cosine_lr(s, 10, 100, 1e-3, 1e-4).unwrap();
            assert!(lr <= prev + 1e-18, "lr increased at step {s}");
            prev = lr;
        }
    }

    #[test]
    fn zero_grads_with_decay_shrink_matrices_exactly() {
        let mut w: Param<f64> = Param::new("w", Component::Decoder, &[2, 2], vec![1.0, -2.0, 0.5, 4.0]);
        let mut gain: Param<f64> = Param::new("g", Component::Decoder, &[4], vec![1.0; 4]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        });
        let lr = 0.01;
        let mut grads = HashMap::new();
        grads.insert(w.id, vec![0.0; 4]);
        grads.insert(gain.id, vec![0.0; 4]);
        let w0 = w.data.as_ref().clone();
        opt.apply(|f| {
            f(&mut w);
            f(&mut gain);
        }, &grads, lr)
        .unwrap();
        for i in 0..4 {
            assert_eq!(w.data[i], w0[i] * (1.0 - lr * 0.1), "decoupled decay is exact");
        }
        // Vector parameters are never decayed.
        assert!(gain.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_lr() {
        let mut w: Param<f64> = Param::new("w", Component::Decoder, &[1], vec![0.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut grads = HashMap::new();
        grads.insert(w.id, vec![1.0]);
        let lr = 1e-2;
        let mut prev = w.data[0];
        let mut last_delta = 0.0;
        for _ in 0..200 {
            opt.apply(|f| f(&mut w), &grads, lr).unwrap();
            last_delta = (w.data[0] - prev).abs();
            prev = w.data[0];
        }
        assert!(
            (last_delta - lr).abs() < lr * 0.01,
            "saturated step {last_delta} should approach lr {lr}"
        );
    }

    /// Independent scalar oracle: five steps on f(w) = 0.5 w^2 (grad = w),
    /// recomputing the reference trajectory from the raw formulas.
    #[test]
    fn scalar_quadratic_matches_oracle() {
        let mut w: Param<f64> = Param::new("w", Component::Decoder, &[1], vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let lr = 0.1;

        let (b1, b2, eps) = (0.9, 0.95, 1e-8);
        let mut wr = 1.0f64;
        let mut m = 0.0f64;
        let mut v = 0.0f64;
        for t in 1..=5 {
            // Model side.
            let mut grads = HashMap::new();
            grads.insert(w.id, vec![w.data[0]]);
            opt.apply(|f| f(&mut w), &grads, lr).unwrap();
            // Oracle side.
            let g = wr;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            wr -= lr * mhat / (vhat.sqrt() + eps);
            assert!(
                (w.data[0] - wr).abs() < 1e-6,
                "step {t}: {} vs oracle {wr}",
                w.data[0]
            );
        }
    }

    #[test]
    fn moments_round_trip_through_restore() {
        let mut w: Param<f64> = Param::new("w", Component::Decoder, &[2], vec![1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut grads = HashMap::new();
        grads.insert(w.id, vec![0.3, -0.7]);
        opt.apply(|f| f(&mut w), &grads, 0.01).unwrap();
        opt.apply(|f| f(&mut w), &grads, 0.01).unwrap();

        let blobs = opt.moments_in_order(|f| f(&w));
        let restored = AdamW::restore(opt.cfg, opt.t, |f| f(&w), &blobs).unwrap();
        assert_eq!(restored.t, 2);
        let again = restored.moments_in_order(|f| f(&w));
        assert_eq!(blobs.len(), again.len());
        for ((m1, v1), (m2, v2)) in blobs.iter().zip(&again) {
            assert_eq!(m1, m2);
            assert_eq!(v1, v2);
        }
        // Wrong cardinality is rejected.
        assert!(AdamW::<f64>::restore(opt.cfg, 2, |f| f(&w), &[]).is_err());
    }

    #[test]
    fn gradient_shape_mismatch_is_an_error() {
        let mut w: Param<f64> = Param::new("w", Component::Decoder, &[2], vec![1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut grads = HashMap::new();
        grads.insert(w.id, vec![0.1; 3]);
        assert!(opt.apply(|f| f(&mut w), &grads, 0.01).is_err());
    }
}
