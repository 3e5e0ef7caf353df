use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named learnable tensors in creation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            decay: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Registers a tensor; `decay` marks it as subject to weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.decay.push(decay);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                old.shape(),
                value.shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Puts every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters placed on a tape, indexed by [`ParamId`].
pub struct Bound<'t, T> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps vars that stand in for a store's parameters, in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss does not reach get zeros.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
            .collect()
    }
}

/// Normal(0, std) samples redrawn until they fall within two standard
/// deviations.
pub fn truncated_normal<T: Real>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    })
}

/// Uniform samples in `[-bound, bound)`; used by tests for wider weights.
pub fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn truncation_and_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = truncated_normal(&[20000], 0.02, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        // Variance of a normal truncated at 2 sigma is 0.774 sigma^2.
        assert!((var.sqrt() / 0.02 - 0.774f64.sqrt()).abs() < 0.02, "{}", var.sqrt());
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::<f32>::default();
        let id = s.add("w", Tensor::zeros(&[2, 3]), true);
        assert!(s.set(id, Tensor::zeros(&[3, 2])).is_err());
        s.set(id, Tensor::ones(&[2, 3])).unwrap();
        assert_eq!(s.numel(), 6);
        assert_eq!(s.find("w"), Some(id));
    }
}
