//! Dense `f64` tensors with optional gradient slots.
//!
//! A `Tensor` is a cheap handle (`Rc`) onto shared storage. Values are
//! mutable through `values_mut` so optimizers can update parameters in
//! place while the surrounding code keeps handles to the same storage.

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Self::build(shape, values, false)
    }

    /// A trainable leaf: participates in backward and receives a grad.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        Self::build(shape, values, true)
    }

    fn build(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor values length must equal product of shape"
        );
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            values: RefCell::new(values),
            requires_grad,
            grad: RefCell::new(None),
        }))
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn scalar(x: f64) -> Tensor {
        Self::new(vec![1], vec![x])
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<f64>> {
        self.0.values.borrow()
    }

    pub fn values_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.values.borrow().clone()
    }

    /// Scalar extraction; panics on non-scalar shapes.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.0.values.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn set_grad(&self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.0.grad.borrow_mut() = Some(g);
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.0.values.borrow().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite values in {context}")));
        }
        if let Some(g) = self.0.grad.borrow().as_ref() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("non-finite grad in {context}")));
            }
        }
        Ok(())
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_invariant_enforced() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic]
    fn mismatched_values_rejected() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn nan_detected() {
        let t = Tensor::new(vec![2], vec![1.0, f64::NAN]);
        assert!(t.check_finite("test").is_err());
    }
}
