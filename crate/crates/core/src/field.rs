//! Right-hand sides, either plain or recorded on a tape.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;

/// A vector field `F(state, t)` evaluated on plain slices.
pub trait VectorField {
    /// State dimension.
    fn dim(&self) -> usize;

    fn eval(&self, state: &[f64], t: f64) -> Result<Vec<f64>>;
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, state: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).eval(state, t)
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, state: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok((self.f)(state, t))
    }
}

/// A vector field evaluated on a batch of states recorded on a tape.
///
/// `states` is a `dim x batch` node (one state per column) and `times`
/// holds the evaluation time of each column.
pub trait TapeField {
    fn dim(&self) -> usize;

    fn eval(&self, tape: &mut Tape, states: NodeId, times: &[f64]) -> Result<NodeId>;
}
