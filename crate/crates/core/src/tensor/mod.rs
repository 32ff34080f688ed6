//! Dense (N,C,H,W) f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap-to-clone handle onto shared storage. Forward ops
//! record an [`OpNode`] on their output when any input participates in
//! gradient tracking; [`Tensor::backward`] walks the recorded graph in
//! reverse topological order and accumulates gradients into every
//! `requires_grad` leaf.

mod gemm;
mod grad;
pub mod ops;

pub use ops::{
    add, affine, batchnorm2d, broadcast_hw, concat_channels, conv2d, div, global_avg_pool,
    maxpool2d, mul, relu, sigmoid, sum_all, upsample_bilinear2x, Mode, RunningStats,
};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Extents in (batch, channel, height, width) order.
pub type Shape = [usize; 4];

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// RAII guard suspending graph recording (inference / evaluation).
pub struct NoGrad {
    prev: bool,
}

impl NoGrad {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = grad_enabled();
        GRAD_ENABLED.with(|c| c.set(false));
        NoGrad { prev }
    }
}

impl Drop for NoGrad {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|c| c.set(prev));
    }
}

pub fn numel(shape: &Shape) -> usize {
    shape[0] * shape[1] * shape[2] * shape[3]
}

/// Operation kinds the graph knows how to differentiate.
///
/// Saved context (pool argmax, batchnorm statistics, broadcast axes) lives
/// inline in the variant.
pub(crate) enum OpKind {
    Conv2d {
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    MaxPool2d {
        argmax: Vec<u32>,
    },
    UpsampleBilinear2x,
    /// (N,C,1,1) constant-filled out to (N,C,H,W).
    BroadcastHw,
    BatchNorm {
        x_hat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Relu,
    Sigmoid,
    Add,
    /// Elementwise product; `b` may broadcast over channels (Cb = 1) or over
    /// space (Hb = Wb = 1).
    Mul,
    ConcatChannels {
        split: usize,
    },
    GlobalAvgPool,
    /// Full reduction to a (1,1,1,1) scalar.
    Sum,
    /// y = mul * x + add, elementwise; only the slope matters backward.
    Affine {
        mul: f32,
    },
    /// Elementwise a / b, equal shapes.
    Div,
}

pub(crate) struct OpNode {
    pub kind: OpKind,
    pub inputs: Vec<Tensor>,
}

struct Inner {
    shape: Shape,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Option<OpNode>,
}

/// Shared handle to a 4-D f32 array with an optional gradient slot.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            inner.shape, inner.requires_grad
        )
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != numel(&shape) {
            return Err(Error::InvalidArg {
                op: "tensor",
                msg: format!(
                    "data length {} does not match shape {:?} ({} elements)",
                    data.len(),
                    shape,
                    numel(&shape)
                ),
            });
        }
        Ok(Self::new(shape, data, false, None))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, vec![0.0; numel(&shape)], false, None)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self::new(shape, vec![value; numel(&shape)], false, None)
    }

    pub fn scalar(value: f32) -> Self {
        Self::new([1, 1, 1, 1], vec![value], false, None)
    }

    pub(crate) fn new(
        shape: Shape,
        data: Vec<f32>,
        requires_grad: bool,
        op: Option<OpNode>,
    ) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor(Rc::new(RefCell::new(Inner {
            shape,
            data,
            requires_grad,
            grad: None,
            op,
        })))
    }

    /// Output helper: tracks gradients iff recording is enabled and any
    /// input requires gradients.
    pub(crate) fn from_op(shape: Shape, data: Vec<f32>, kind: OpKind, inputs: Vec<Tensor>) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let op = track.then_some(OpNode { kind, inputs });
        Self::new(shape, data, track, op)
    }

    pub fn shape(&self) -> Shape {
        self.0.borrow().shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.borrow().shape)
    }

    pub fn data(&self) -> Ref<'_, [f32]> {
        Ref::map(self.0.borrow(), |i| i.data.as_slice())
    }

    /// Mutable access to the raw values. Only sensible on leaves (parameter
    /// updates); mutating an interior node invalidates its recorded graph.
    pub fn data_mut(&self) -> RefMut<'_, [f32]> {
        RefMut::map(self.0.borrow_mut(), |i| i.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        let inner = self.0.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.0.borrow_mut().requires_grad = v;
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Detach from any recorded graph, keeping the values.
    pub fn detached(&self) -> Tensor {
        Self::new(self.shape(), self.to_vec(), false, None)
    }

    pub fn is_finite(&self) -> bool {
        self.0.borrow().data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        let mut inner = self.0.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), inner.data.len());
        match inner.grad.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub(crate) fn with_op<R>(&self, f: impl FnOnce(Option<&OpNode>) -> R) -> R {
        let inner = self.0.borrow();
        f(inner.op.as_ref())
    }

    /// Drop the recorded graph below this tensor (frees saved context).
    pub fn release_graph(&self) {
        self.0.borrow_mut().op = None;
    }
}
