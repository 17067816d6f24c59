//! Dense rank-≤4 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable values: `data` is shared behind an [`Arc`] and every
//! operation returns a fresh tensor. Gradient tracking is opt-in — a tensor
//! participates in differentiation only when it was produced from a
//! [`Parameter`] leaf (or from other tracked tensors). [`autodiff::backward`]
//! walks the recorded graph and returns per-parameter gradients.

mod autodiff;
mod ops;

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{ensure, Error, Result};
use crate::math;

pub use autodiff::{backward, Gradients};
pub use ops::concat_channels;

/// Shape of a dense tensor: up to 4 dimensions, conventionally
/// `[batch, channels, height, width]`. Rank 0 is a scalar.
#[derive(Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        ensure!(dims.len() <= 4, "tensor rank {} exceeds 4", dims.len());
        ensure!(
            dims.iter().all(|&d| d > 0),
            "zero-sized dimension in shape {:?}",
            dims
        );
        Ok(Shape {
            dims: dims.to_vec(),
        })
    }

    pub fn scalar() -> Self {
        Shape { dims: Vec::new() }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// The `[b, c, h, w]` view required by spatial operations.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        ensure!(self.rank() == 4, "expected rank-4 tensor, got {self}");
        Ok((self.dims[0], self.dims[1], self.dims[2], self.dims[3]))
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Immutable dense tensor, optionally participating in a gradient tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f64>>,
    node: Option<Arc<autodiff::Node>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == shape.numel(),
            "data length {} does not match shape {shape}",
            data.len()
        );
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        let n = shape.numel();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, detached from the gradient tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        ensure!(
            self.shape.numel() == 1,
            "item() on tensor of shape {}",
            self.shape
        );
        Ok(self.data[0])
    }

    pub(crate) fn node(&self) -> Option<&Arc<autodiff::Node>> {
        self.node.as_ref()
    }

    pub(crate) fn with_node(
        shape: Shape,
        data: Vec<f64>,
        node: Option<Arc<autodiff::Node>>,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={}, grad={})",
            self.shape,
            self.requires_grad()
        )
    }
}

/// Identifier tying gradient-tape leaves back to their parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor with its optimizer state.
///
/// Parameters are the only mutable values in the crate; everything else is
/// an immutable [`Tensor`]. `tensor()` snapshots the current values onto the
/// gradient tape, `constant()` reads them without tracking.
///
/// A clone keeps the same [`ParamId`]; clones are meant for read-only
/// evaluation copies or independently trained models, never for use inside
/// one gradient graph alongside their original.
#[derive(Clone)]
pub struct Parameter {
    id: ParamId,
    name: String,
    shape: Shape,
    values: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    momentum: Vec<f64>,
    weight_decay_exempt: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Shape, values: Vec<f64>, exempt: bool) -> Self {
        debug_assert_eq!(values.len(), shape.numel());
        let n = values.len();
        Parameter {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            shape,
            values: Arc::new(values),
            grad: None,
            momentum: vec![0.0; n],
            weight_decay_exempt: exempt,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_weight_decay_exempt(&self) -> bool {
        self.weight_decay_exempt
    }

    /// Replaces the stored values, keeping id and optimizer state.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        ensure!(
            values.len() == self.values.len(),
            "parameter {}: value count {} != {}",
            self.name,
            values.len(),
            self.values.len()
        );
        self.values = Arc::new(values);
        Ok(())
    }

    /// Tracked leaf: gradients from a later backward pass reach this
    /// parameter.
    pub fn tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.values),
            node: Some(autodiff::Node::leaf(self.id, self.values.len())),
        }
    }

    /// Untracked snapshot of the current values.
    pub fn constant(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.values),
            node: None,
        }
    }

    /// Tracked or untracked snapshot depending on `track`.
    pub fn as_input(&self, track: bool) -> Tensor {
        if track {
            self.tensor()
        } else {
            self.constant()
        }
    }

    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        ensure!(
            grad.len() == self.values.len(),
            "parameter {}: gradient length {} != {}",
            self.name,
            grad.len(),
            self.values.len()
        );
        match &mut self.grad {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(grad) {
                    *gi += d;
                }
            }
            None => self.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    #[cfg(test)]
    pub(crate) fn momentum(&self) -> &[f64] {
        &self.momentum
    }
}

impl fmt::Debug for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Parameter({}, shape={})", self.name, self.shape)
    }
}

/// Pulls gradients computed by [`backward`] into their parameters.
pub fn accumulate_gradients<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    grads: &Gradients,
) -> Result<()> {
    for p in params {
        if let Some(g) = grads.get(p.id()) {
            p.accumulate_grad(g)?;
        }
    }
    Ok(())
}

/// One SGD-with-momentum update over a parameter set.
///
/// `buffer ← momentum·buffer + grad + weight_decay·value` (decay skipped for
/// exempt parameters), then `value ← value − lr·buffer`. Gradients are
/// cleared afterwards; a parameter without a populated gradient is a
/// contract violation.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for p in params {
        let grad = p
            .grad
            .take()
            .ok_or_else(|| Error::contract(alloc::format!("parameter {} has no gradient", p.name)))?;
        let decay = if p.weight_decay_exempt {
            0.0
        } else {
            weight_decay
        };
        let values = Arc::make_mut(&mut p.values);
        for ((v, m), g) in values.iter_mut().zip(p.momentum.iter_mut()).zip(&grad) {
            *m = momentum * *m + g + decay * *v;
            *v -= lr * *m;
        }
    }
    Ok(())
}

/// Polynomial learning-rate decay: `base_lr · (1 − iter/max_iter)^power`.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
}

impl LrSchedule {
    pub fn lr(&self, iter: usize) -> Result<f64> {
        ensure!(
            iter <= self.max_iter,
            "iteration {iter} exceeds max_iter {}",
            self.max_iter
        );
        let frac = 1.0 - iter as f64 / self.max_iter as f64;
        Ok(self.base_lr * math::powf(frac, self.power))
    }
}

/// Number of learnable scalars in a parameter set.
pub fn count_parameters<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> usize {
    params.into_iter().map(|p| p.len()).sum()
}
