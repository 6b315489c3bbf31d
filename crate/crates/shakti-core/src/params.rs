//! Named model parameters and the binding context that connects them to a
//! tape during a forward pass.
//!
//! Parameters live outside any tape. Each forward pass binds the parameters
//! it uses as tape leaves; the optimizer later collects per-parameter
//! gradients from the tape by [`crate::tensor::ParamId`]. Freezing a
//! component simply binds its parameters as untracked constants, so frozen
//! weights cannot receive gradients by construction.

use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng;
use crate::tensor::{Element, ParamId, Tape, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Which part of the model a parameter belongs to; the unit of freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Projector,
    Decoder,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Projector => "projector",
            Component::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Component::Encoder),
            "projector" => Ok(Component::Projector),
            "decoder" => Ok(Component::Decoder),
            other => Err(crate::error::TrainError::UnknownComponent {
                name: other.to_string(),
            }
            .into()),
        }
    }
}

/// A named, trainable tensor.
pub struct Param<E: Element> {
    pub id: ParamId,
    pub name: String,
    pub component: Component,
    pub shape: Vec<usize>,
    pub data: Rc<Vec<E>>,
    /// Whether weight decay applies: true exactly for matrices and higher
    /// rank tensors; gains, biases and other vectors are never decayed.
    pub decay: bool,
}

impl<E: Element> Param<E> {
    pub fn new(name: impl Into<String>, component: Component, shape: &[usize], data: Vec<E>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param data must match its shape");
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            component,
            shape: shape.to_vec(),
            data: Rc::new(data),
            decay: shape.len() >= 2,
        }
    }

    /// Truncated normal init: N(0, std^2) resampled until within 2 std.
    /// The stream is derived from the parameter name, so init order never
    /// affects values.
    pub fn trunc_normal(
        name: impl Into<String>,
        component: Component,
        shape: &[usize],
        std: f64,
        seed: u64,
    ) -> Self {
        let name = name.into();
        let mut r = rng::stream(seed, &format!("init/{name}"));
        let numel: usize = shape.iter().product();
        let data: Vec<E> = (0..numel)
            .map(|_| {
                loop {
                    let z: f64 = rand_distr::Distribution::sample(
                        &rand_distr::StandardNormal,
                        &mut r,
                    );
                    if z.abs() <= 2.0 {
                        return E::c(z * std);
                    }
                }
            })
            .collect();
        Param::new(name, component, shape, data)
    }

    pub fn constant(
        name: impl Into<String>,
        component: Component,
        shape: &[usize],
        v: f64,
    ) -> Self {
        let numel: usize = shape.iter().product();
        Param::new(name, component, shape, vec![E::c(v); numel])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Mutable access for the optimizer; clones on write if a forward pass
    /// still shares the buffer.
    pub fn data_mut(&mut self) -> &mut Vec<E> {
        Rc::make_mut(&mut self.data)
    }

    /// Random-uniform perturbation helper for tests.
    pub fn map_data(&mut self, f: impl Fn(E) -> E) {
        for v in self.data_mut().iter_mut() {
            *v = f(*v);
        }
    }

    /// A new parameter (fresh id) sharing this one's buffer copy-on-write.
    /// Used to snapshot a model as a frozen reference.
    pub fn clone_shared(&self) -> Param<E> {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: self.name.clone(),
            component: self.component,
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            decay: self.decay,
        }
    }
}

/// Binding context for one forward pass.
///
/// `bind` turns a parameter into a tensor: a tracked tape leaf when the pass
/// is recording and the parameter is trainable, otherwise an untracked
/// constant view (no copy either way).
#[derive(Clone, Copy)]
pub struct Fwd<'t, E: Element> {
    tape: Option<&'t Tape<E>>,
    trainable: Option<&'t HashSet<ParamId>>,
}

impl<'t, E: Element> Fwd<'t, E> {
    /// No recording at all: pure inference.
    pub fn inference() -> Self {
        Fwd {
            tape: None,
            trainable: None,
        }
    }

    /// Record on `tape` with every bound parameter trainable.
    pub fn train(tape: &'t Tape<E>) -> Self {
        Fwd {
            tape: Some(tape),
            trainable: None,
        }
    }

    /// Record on `tape`; only parameters in `trainable` receive gradients.
    pub fn train_filtered(tape: &'t Tape<E>, trainable: &'t HashSet<ParamId>) -> Self {
        Fwd {
            tape: Some(tape),
            trainable: Some(trainable),
        }
    }

    pub fn tape(&self) -> Option<&'t Tape<E>> {
        self.tape
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.tape.is_some() && self.trainable.map_or(true, |s| s.contains(&id))
    }

    pub fn bind(&self, p: &Param<E>) -> Result<Tensor<E>> {
        match self.tape {
            Some(tape) if self.is_trainable(p.id) => {
                let leaf = tape.leaf_shared(Rc::clone(&p.data), p.shape.clone())?;
                tape.watch(p.id, &leaf)?;
                Ok(leaf)
            }
            _ => Tensor::from_shared(Rc::clone(&p.data), p.shape.clone()),
        }
    }
}

/// Collect the ids of parameters whose component is in `trainable_components`.
pub fn trainable_ids<E: Element>(
    params: &[&Param<E>],
    trainable_components: &HashSet<Component>,
) -> HashSet<ParamId> {
    params
        .iter()
        .filter(|p| trainable_components.contains(&p.component))
        .map(|p| p.id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_decay_follows_rank() {
        let a: Param<f32> = Param::constant("w", Component::Encoder, &[4, 4], 1.0);
        let b: Param<f32> = Param::constant("g", Component::Encoder, &[4], 1.0);
        assert_ne!(a.id, b.id);
        assert!(a.decay);
        assert!(!b.decay);
    }

    #[test]
    fn trunc_normal_is_bounded_and_order_independent() {
        let a: Param<f64> = Param::trunc_normal("enc.w1", Component::Encoder, &[64, 8], 0.02, 9);
        for &v in a.data.iter() {
            assert!(v.abs() <= 0.04 + 1e-12, "value {v} outside 2 std");
        }
        // Same name and seed, created after another param: identical values.
        let _noise: Param<f64> = Param::trunc_normal("other", Component::Decoder, &[32], 0.02, 9);
        let b: Param<f64> = Param::trunc_normal("enc.w1", Component::Encoder, &[64, 8], 0.02, 9);
        assert_eq!(a.data.as_slice(), b.data.as_slice());
        // Different seed changes values.
        let c: Param<f64> = Param::trunc_normal("enc.w1", Component::Encoder, &[64, 8], 0.02, 10);
        assert_ne!(a.data.as_slice(), c.data.as_slice());
    }

    #[test]
    fn bind_respects_freezing() {
        let p: Param<f64> = Param::constant("w", Component::Encoder, &[2], 1.5);
        let q: Param<f64> = Param::constant("v", Component::Decoder, &[2], 2.5);
        let tape = Tape::new();
        let mut trainable = HashSet::new();
        trainable.insert(p.id);
        let fwd = Fwd::train_filtered(&tape, &trainable);
        let bp = fwd.bind(&p).unwrap();
        let bq = fwd.bind(&q).unwrap();
        assert!(bp.is_tracked());
        assert!(!bq.is_tracked(), "frozen param must bind untracked");
        let loss = bp.mul(&bq).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let mut g = vec![0.0; 2];
        assert!(tape.param_grad_into(p.id, &mut g));
        assert_eq!(g, vec![2.5, 2.5]);
        let mut gq = vec![0.0; 2];
        assert!(!tape.param_grad_into(q.id, &mut gq));
        assert_eq!(gq, vec![0.0, 0.0]);
    }

    #[test]
    fn component_parse_roundtrip_and_error() {
        for c in [Component::Encoder, Component::Projector, Component::Decoder] {
            assert_eq!(Component::parse(c.name()).unwrap(), c);
        }
        assert!(Component::parse("head").is_err());
    }
}
