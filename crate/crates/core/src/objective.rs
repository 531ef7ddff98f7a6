//! Differentiable scalar objectives over a flat parameter vector.

use crate::error::Result;

pub trait Objective {
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, params: &[f64]) -> Result<f64> {
        self.value_and_grad(params).map(|(v, _)| v)
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        (**self).value_and_grad(params)
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        (**self).value(params)
    }
}

/// Wraps a closure returning `(value, gradient)`.
pub struct FnObjective<F>(pub F);

impl<F> Objective for FnObjective<F>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.0)(params))
    }
}

pub struct Constant(pub f64);

impl Objective for Constant {
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.0, vec![0.0; params.len()]))
    }
}

/// `sum_i w_i * L_i`.
pub struct LinearCombination<'a> {
    pub terms: Vec<(f64, &'a dyn Objective)>,
}

impl Objective for LinearCombination<'_> {
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut value = 0.0;
        let mut grad = vec![0.0; params.len()];
        for (w, term) in &self.terms {
            let (v, g) = term.value_and_grad(params)?;
            value += w * v;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += w * gi;
            }
        }
        Ok((value, grad))
    }
}
