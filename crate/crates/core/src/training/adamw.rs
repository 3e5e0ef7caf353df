use crate::error::{shape_err, Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Checkpoint, Real, Tensor};

/// Step size, moment decay rates and decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment estimates, one pair per parameter tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// One update. Parameters whose decay flag is off get no weight decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], hp: &AdamWParams) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(shape_err!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            ));
        }
        self.t += 1;
        let c1 = 1.0 - hp.beta1.powi(self.t as i32);
        let c2 = 1.0 - hp.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let wd = if params.decays(id) { hp.weight_decay } else { 0.0 };
            let g = &grads[k];
            let p = params.value_mut(id);
            if g.shape() != p.shape() {
                return Err(shape_err!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, pi) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].as_f64();
                let mi = hp.beta1 * m[i].as_f64() + (1.0 - hp.beta1) * gi;
                let vi = hp.beta2 * v[i].as_f64() + (1.0 - hp.beta2) * gi * gi;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let x = pi.as_f64();
                let update = (mi / c1) / ((vi / c2).sqrt() + hp.eps) + wd * x;
                *pi = T::lit(x - hp.lr * update);
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("parameters after optimizer step"));
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, params: &ParamStore<T>, ck: &mut Checkpoint) {
        for (k, name) in params.names().iter().enumerate() {
            ck.push(format!("adam.m.{name}"), &self.m[k]);
            ck.push(format!("adam.v.{name}"), &self.v[k]);
        }
    }

    pub fn read_checkpoint(params: &ParamStore<T>, ck: &Checkpoint, t: u64) -> Result<Self> {
        let mut state = Self::new(params);
        state.t = t;
        for (k, name) in params.names().iter().enumerate() {
            let m: Tensor<T> = ck.tensor(&format!("adam.m.{name}"))?;
            let v: Tensor<T> = ck.tensor(&format!("adam.v.{name}"))?;
            if m.shape() != state.m[k].shape() || v.shape() != state.v[k].shape() {
                return Err(shape_err!("optimizer state for {name} has the wrong shape"));
            }
            state.m[k] = m;
            state.v[k] = v;
        }
        Ok(state)
    }
}
