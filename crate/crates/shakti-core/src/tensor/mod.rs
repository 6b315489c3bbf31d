//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding a backward closure.
//! Outputs always receive a larger node id than their inputs, so a single
//! reverse sweep over node ids propagates gradients in topological order.
//! Tensors are immutable; data buffers are shared via `Rc` so reshapes and
//! detaches are free.
//!
//! The element type is generic: training runs in `f32`, gradient checking in
//! `f64`, over identical code paths.

pub mod gradcheck;
pub mod ops;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Result, TensorError};

/// Scalar element type of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Convert an `f64` constant into this element type.
    fn c(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 converts to element")
    }
    /// Widen to `f64`.
    fn f64(self) -> f64 {
        self.to_f64().expect("element converts to f64")
    }
}

impl Element for f32 {}
impl Element for f64 {}

pub type NodeId = usize;

/// Stable identity of a model parameter, independent of any tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u64);

type BackFn<E> = Box<dyn Fn(&[E], &mut GradAcc<'_, E>)>;

struct Node<E: Element> {
    len: usize,
    back: Option<BackFn<E>>,
}

struct TapeInner<E: Element> {
    nodes: Vec<Node<E>>,
    /// Gradient buffers parallel to `nodes`; empty vec means "not yet touched".
    grads: Vec<Vec<E>>,
    /// Leaf nodes registered as trainable parameters.
    params: Vec<(ParamId, NodeId)>,
    used: bool,
}

/// Records a forward computation so it can be differentiated once.
pub struct Tape<E: Element> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Element> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                params: Vec::new(),
                used: false,
            })),
        }
    }

    pub(crate) fn same_as(&self, other: &Tape<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push_node(&self, len: usize, back: Option<BackFn<E>>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { len, back });
        inner.grads.push(Vec::new());
        inner.nodes.len() - 1
    }

    /// Number of recorded nodes.
    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Whether backward already consumed this tape.
    pub fn used(&self) -> bool {
        self.inner.borrow().used
    }

    /// Record a differentiable leaf holding owned data.
    pub fn leaf(&self, data: Vec<E>, shape: &[usize]) -> Result<Tensor<E>> {
        self.leaf_shared(Rc::new(data), shape.to_vec())
    }

    /// Record a differentiable leaf sharing an existing buffer.
    pub fn leaf_shared(&self, data: Rc<Vec<E>>, shape: Vec<usize>) -> Result<Tensor<E>> {
        validate_shape(data.len(), &shape)?;
        let id = self.push_node(data.len(), None);
        Ok(Tensor {
            shape,
            data,
            track: Some((self.clone(), id)),
        })
    }

    /// Register a leaf node as an occurrence of parameter `pid`.
    ///
    /// A parameter bound several times in one forward pass (weight reuse)
    /// registers several leaves; [`Tape::param_grad_into`] sums them.
    pub fn watch(&self, pid: ParamId, t: &Tensor<E>) -> Result<()> {
        match &t.track {
            Some((tape, id)) if tape.same_as(self) => {
                self.inner.borrow_mut().params.push((pid, *id));
                Ok(())
            }
            _ => Err(TensorError::TapeMismatch { op: "watch" }.into()),
        }
    }

    /// Accumulate the gradient of parameter `pid` into `out`.
    /// Returns `false` if no gradient reached any occurrence of the parameter.
    pub fn param_grad_into(&self, pid: ParamId, out: &mut [E]) -> bool {
        let inner = self.inner.borrow();
        let mut touched = false;
        for &(p, node) in &inner.params {
            if p != pid {
                continue;
            }
            let g = &inner.grads[node];
            if g.is_empty() {
                continue;
            }
            debug_assert_eq!(g.len(), out.len());
            for (o, &gi) in out.iter_mut().zip(g) {
                *o = *o + gi;
            }
            touched = true;
        }
        touched
    }

    /// Gradient buffer of a tensor recorded on this tape, if backward reached it.
    pub fn grad_of(&self, t: &Tensor<E>) -> Option<Vec<E>> {
        let (tape, id) = t.track.as_ref()?;
        if !tape.same_as(self) {
            return None;
        }
        let inner = self.inner.borrow();
        let g = &inner.grads[*id];
        if g.is_empty() {
            None
        } else {
            Some(g.clone())
        }
    }

    fn run_backward(&self, loss_id: NodeId) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.used {
            return Err(TensorError::BackwardReplayed.into());
        }
        inner.used = true;
        let seed_len = inner.nodes[loss_id].len;
        inner.grads[loss_id] = vec![E::one(); seed_len];
        let TapeInner { nodes, grads, .. } = &mut *inner;
        let nodes: &[Node<E>] = nodes;
        for i in (0..nodes.len()).rev() {
            if grads[i].is_empty() {
                continue;
            }
            let Some(back) = nodes[i].back.as_ref() else {
                continue;
            };
            let (lo, hi) = grads.split_at_mut(i);
            let gout: &[E] = &hi[0];
            let mut acc = GradAcc {
                nodes: &nodes[..i],
                grads: lo,
            };
            back(gout, &mut acc);
        }
        Ok(())
    }
}

/// Mutable view of upstream gradient buffers handed to backward closures.
pub struct GradAcc<'a, E: Element> {
    nodes: &'a [Node<E>],
    grads: &'a mut [Vec<E>],
}

impl<E: Element> GradAcc<'_, E> {
    /// Zero-initialised gradient slot for node `id`.
    pub fn slot(&mut self, id: NodeId) -> &mut [E] {
        let len = self.nodes[id].len;
        let g = &mut self.grads[id];
        if g.is_empty() {
            g.resize(len, E::zero());
        }
        g.as_mut_slice()
    }

    /// Add `contrib` elementwise into the gradient of node `id`.
    pub fn add(&mut self, id: NodeId, contrib: &[E]) {
        let s = self.slot(id);
        debug_assert_eq!(s.len(), contrib.len());
        for (gi, &c) in s.iter_mut().zip(contrib) {
            *gi = *gi + c;
        }
    }
}

fn validate_shape(len: usize, shape: &[usize]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if shape.is_empty() || shape.contains(&0) || numel != len {
        return Err(TensorError::LengthMismatch {
            len,
            shape: shape.to_vec(),
        }
        .into());
    }
    Ok(())
}

/// An immutable dense tensor, optionally recorded on a tape.
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Rc<Vec<E>>,
    track: Option<(Tape<E>, NodeId)>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            track: self.track.clone(),
        }
    }
}

impl<E: Element> Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.track.is_some())
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    /// An untracked tensor owning `data`.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        validate_shape(data.len(), shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            track: None,
        })
    }

    /// An untracked tensor sharing `data`.
    pub fn from_shared(data: Rc<Vec<E>>, shape: Vec<usize>) -> Result<Self> {
        validate_shape(data.len(), &shape)?;
        Ok(Tensor {
            shape,
            data,
            track: None,
        })
    }

    /// An untracked scalar of shape `[1]`.
    pub fn scalar(v: E) -> Self {
        Tensor {
            shape: vec![1],
            data: Rc::new(vec![v]),
            track: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![E::zero(); numel], shape)
    }

    pub fn full(shape: &[usize], v: E) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Self::from_vec(vec![v; numel], shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<E>> {
        Rc::clone(&self.data)
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            }
            .into());
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.track.is_some()
    }

    pub(crate) fn track(&self) -> Option<(&Tape<E>, NodeId)> {
        self.track.as_ref().map(|(t, id)| (t, *id))
    }

    /// The same tensor with its tape recording dropped.
    pub fn detach(&self) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            track: None,
        }
    }

    /// Reverse sweep from this scalar: fills gradient buffers on its tape.
    ///
    /// The tape is single-shot; a second call returns
    /// [`TensorError::BackwardReplayed`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            }
            .into());
        }
        match &self.track {
            Some((tape, id)) => tape.run_backward(*id),
            None => Err(TensorError::Invalid {
                op: "backward",
                msg: "loss tensor is not recorded on any tape".into(),
            }
            .into()),
        }
    }

    /// Gradient of this tensor after backward, if it was reached.
    pub fn grad(&self) -> Option<Vec<E>> {
        let (tape, _) = self.track.as_ref()?;
        tape.grad_of(self)
    }
}

/// The common tape of `ts`, if any input is tracked.
/// Mixing tensors from two different tapes is an error.
pub(crate) fn joint_tape<E: Element>(
    op: &'static str,
    ts: &[&Tensor<E>],
) -> Result<Option<Tape<E>>> {
    let mut found: Option<Tape<E>> = None;
    for t in ts {
        if let Some((tape, _)) = &t.track {
            match &found {
                None => found = Some(tape.clone()),
                Some(f) if f.same_as(tape) => {}
                Some(_) => return Err(TensorError::TapeMismatch { op }.into()),
            }
        }
    }
    Ok(found)
}

/// Build the output tensor of an op: tracked when `tape` is present.
pub(crate) fn op_output<E: Element>(
    tape: Option<Tape<E>>,
    data: Vec<E>,
    shape: Vec<usize>,
    back: impl FnOnce() -> BackFn<E>,
) -> Tensor<E> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    match tape {
        None => Tensor {
            shape,
            data: Rc::new(data),
            track: None,
        },
        Some(t) => {
            let id = t.push_node(data.len(), Some(back()));
            Tensor {
                shape,
                data: Rc::new(data),
                track: Some((t, id)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip_and_shape_validation() {
        let tape: Tape<f64> = Tape::new();
        let t = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert!(t.is_tracked());
        assert!(tape.leaf(vec![1.0], &[2]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![], &[0]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![1.0], &[]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_and_replay() {
        let tape: Tape<f64> = Tape::new();
        let t = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            t.backward(),
            Err(crate::Error::Tensor(TensorError::NonScalarLoss { .. }))
        ));
        let s = t.sum().unwrap();
        s.backward().unwrap();
        assert!(matches!(
            s.backward(),
            Err(crate::Error::Tensor(TensorError::BackwardReplayed))
        ));
    }

    #[test]
    fn untracked_loss_cannot_backward() {
        let t = Tensor::<f32>::scalar(3.0);
        assert!(t.backward().is_err());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(vec![2.0, 3.0], &[2]).unwrap();
        let d = x.detach();
        assert!(!d.is_tracked());
        let y = x.mul(&d).unwrap(); // y = x * const(x)
        let s = y.sum().unwrap();
        s.backward().unwrap();
        // d/dx (x*c) = c, not 2x: the detached branch contributes nothing.
        assert_eq!(x.grad().unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let ta: Tape<f32> = Tape::new();
        let tb: Tape<f32> = Tape::new();
        let a = ta.leaf(vec![1.0], &[1]).unwrap();
        let b = tb.leaf(vec![1.0], &[1]).unwrap();
        assert!(matches!(
            a.add(&b),
            Err(crate::Error::Tensor(TensorError::TapeMismatch { .. }))
        ));
    }

    #[test]
    fn param_grad_sums_repeated_bindings() {
        let tape: Tape<f64> = Tape::new();
        let pid = ParamId(42);
        let data = Rc::new(vec![1.0, 2.0]);
        let a = tape.leaf_shared(Rc::clone(&data), vec![2]).unwrap();
        let b = tape.leaf_shared(Rc::clone(&data), vec![2]).unwrap();
        tape.watch(pid, &a).unwrap();
        tape.watch(pid, &b).unwrap();
        // loss = sum(a) + sum(3*b) -> dL/dparam = 1 + 3 per element.
        let loss = a.sum().unwrap().add(&b.scale(3.0).unwrap().sum().unwrap()).unwrap();
        loss.backward().unwrap();
        let mut g = vec![0.0; 2];
        assert!(tape.param_grad_into(pid, &mut g));
        assert_eq!(g, vec![4.0, 4.0]);
    }
}
