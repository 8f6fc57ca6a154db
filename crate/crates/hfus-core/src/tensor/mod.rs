//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The design is deliberately small: a [`Tensor`] is a shape plus a row-major
//! `Vec<f64>`, a [`Tape`] records every differentiable operation of one
//! forward pass, and [`Tape::backward`] walks the record once in reverse to
//! fill gradient buffers. Model parameters live outside the tape as
//! [`Param`]s and are bound onto a fresh tape per forward pass.

mod conv;
mod tape;

pub use tape::{Tape, Val};

use thiserror::Error;

/// Clamp bound for probabilities entering the cross-entropy loss.
pub const EPS_LOSS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error("backward on a detached tensor: the loss has no gradient-tracked history")]
    DetachedBackward,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,
}

/// A dense row-major array of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidArgument {
                op: "Tensor::from_vec",
                detail: format!("zero-sized dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::from_vec",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named, trainable parameter: a value tensor plus an accumulated
/// gradient buffer of the same size.
#[derive(Debug, Clone)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.numel()];
        Param { name: name.into(), value, grad }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// One plain SGD update: `p <- p - lr * g` for every parameter, then zero
/// every gradient buffer. The step is aborted untouched if any gradient is
/// non-finite.
pub fn sgd_step(params: &mut [&mut Param], lr: f64) -> Result<(), TensorError> {
    if lr <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "sgd_step",
            detail: format!("learning rate must be positive, got {lr}"),
        });
    }
    for p in params.iter() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite(format!("gradient of parameter '{}'", p.name)));
        }
    }
    for p in params.iter_mut() {
        for (v, g) in p.value.data.iter_mut().zip(&p.grad) {
            *v -= lr * g;
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn from_vec_rejects_zero_dim() {
        let err = Tensor::from_vec(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::InvalidArgument { .. }));
    }

    #[test]
    fn sgd_step_basic_update() {
        // p = 1, g = 2, lr = 0.001 -> 0.998
        let mut p = Param::new("p", Tensor::scalar(1.0));
        p.accumulate_grad(&[2.0]);
        sgd_step(&mut [&mut p], 0.001).unwrap();
        assert_eq!(p.value().item(), 0.998);
        assert_eq!(p.grad(), &[0.0]);
    }

    #[test]
    fn sgd_step_zero_grad_leaves_param_unchanged() {
        let mut p = Param::new("p", Tensor::scalar(1.5));
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.value().item(), 1.5);
    }

    #[test]
    fn sgd_step_quadratic_closed_form() {
        // loss = 0.5 * (p - 3)^2 from p = 0 with lr = 0.1: grad = p - 3 = -3,
        // so one step lands on p = 0.3.
        let mut p = Param::new("p", Tensor::scalar(0.0));
        let grad = p.value().item() - 3.0;
        p.accumulate_grad(&[grad]);
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value().item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_aborts_on_non_finite_grad() {
        let mut a = Param::new("a", Tensor::scalar(1.0));
        let mut b = Param::new("b", Tensor::scalar(2.0));
        a.accumulate_grad(&[1.0]);
        b.accumulate_grad(&[f64::NAN]);
        let err = sgd_step(&mut [&mut a, &mut b], 0.1).unwrap_err();
        assert!(err.to_string().contains("'b'"));
        // aborted step must not have touched any parameter
        assert_eq!(a.value().item(), 1.0);
        assert_eq!(b.value().item(), 2.0);
    }
}
