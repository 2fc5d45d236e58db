//! Minimal deterministic N-D array with reverse-mode differentiation.
//!
//! A [`Tensor`] is a row-major `f64` buffer plus a shape. Operations in
//! [`ops`] register their results on a [`GraphTape`]; calling
//! [`GraphTape::backward`] on a scalar output produces per-node gradients
//! that can be copied back into parameter tensors.

mod gradcheck;
pub mod ops;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport, ParamCheck};
pub use tape::{GraphTape, Gradients, NodeId};

pub(crate) use tape::OpRecord;

use std::sync::Arc;

use crate::error::{Error, Result};

/// N-dimensional real array, optionally attached to a computation graph.
///
/// `data` is shared (`Arc`) so that tensors returned by tape operations
/// alias the tape's node values instead of copying them. A tensor with
/// `node == None` is a plain immutable value.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    /// Tape identity plus node handle; valid only for that tape.
    node: Option<(u64, NodeId)>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} requires {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), grad: None, node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]), grad: None, node: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; numel]), grad: None, node: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]), grad: None, node: None }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<(u64, NodeId)>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, grad: None, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Mutable access to the underlying buffer. Detaches the tensor from
    /// any tape it was produced on: the recorded value would no longer
    /// describe this tensor.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape("Tensor::item", format!("shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Node handle on the given tape, if this tensor was produced there.
    pub fn node_on(&self, tape: &GraphTape) -> Option<NodeId> {
        match self.node {
            Some((tape_id, id)) if tape_id == tape.id() => Some(id),
            _ => None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_raw(&self) -> Option<(u64, NodeId)> {
        self.node
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "Tensor::set_grad",
                format!("grad length {} != tensor length {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Interprets the shape as `[N, C, H, W]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            other => Err(Error::shape("dims4", format!("expected 4-d shape, got {:?}", other))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Seeded uniform values in `[-limit, limit]`.
    pub fn uniform(shape: Vec<usize>, limit: f64, rng: &mut impl rand::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-limit..=limit)).collect();
        Tensor { shape, data: Arc::new(data), grad: None, node: None }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}
