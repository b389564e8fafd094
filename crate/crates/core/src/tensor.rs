//! Dense row-major tensors of `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A shaped array of reals with an optional gradient buffer of the same layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; n]).expect("zero-extent shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Self {
            shape: vec![n],
            data,
            grad: None,
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape {
                op: "set_grad",
                expected: self.shape.clone(),
                found: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self.grad.as_ref().map_or(true, |g| g.iter().all(|v| v.is_finite()))
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "reshape",
                expected: shape,
                found: self.shape,
            });
        }
        self.shape = shape;
        if let Some(g) = self.grad.as_mut() {
            debug_assert_eq!(g.len(), n);
        }
        Ok(self)
    }
}

/// Plain SGD update `w <- w - lr * g`, applied in place.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            expected: vec![params.len()],
            found: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                expected: p.shape().to_vec(),
                found: vec![g.len()],
            });
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.iter()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn sgd_single_step() {
        let mut w = Tensor::from_vec(vec![1.0]);
        sgd_step(&mut [&mut w], &[&[0.5]], 0.1).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_is_noop() {
        let mut w = Tensor::from_vec(vec![1.0, -2.0, 3.5]);
        let before = w.clone();
        sgd_step(&mut [&mut w], &[&[0.0, 0.0, 0.0]], 0.3).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn sgd_two_steps_on_square() {
        // f(w) = w^2, w <- w - 0.1 * 2w  =>  1.0 -> 0.8 -> 0.64
        let mut w = Tensor::from_vec(vec![1.0]);
        for _ in 0..2 {
            let g = vec![2.0 * w.data()[0]];
            sgd_step(&mut [&mut w], &[&g], 0.1).unwrap();
        }
        assert!((w.data()[0] - 0.64).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_mismatch() {
        let mut w = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(sgd_step(&mut [&mut w], &[&[1.0]], 0.1).is_err());
        assert!(sgd_step(&mut [&mut w], &[&[1.0, 1.0]], 0.0).is_err());
    }
}
