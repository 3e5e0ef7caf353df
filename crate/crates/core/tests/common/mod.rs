//! Shared helpers for integration tests.
#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitvs::tensor::{Tape, Tensor, Var};
use vitvs::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Options for [`gradcheck`].
#[derive(Clone, Copy, Debug)]
pub struct Check {
    pub step: f64,
    pub tol: f64,
    /// Elements checked per input; inputs smaller than this are checked in full.
    pub max_elems: usize,
    pub seed: u64,
}

impl Default for Check {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-3,
            max_elems: 64,
            seed: 0,
        }
    }
}

/// Worst relative error seen, and how many elements were compared.
#[derive(Debug)]
pub struct Report {
    pub worst: f64,
    pub compared: usize,
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares tape gradients of `f` with central finite differences.
///
/// Non-scalar outputs are reduced to `sum(f(x) * R)` with a fixed random
/// `R`. The relative error `|a - n| / max(|a|, |n|)` is required to stay
/// below `tol` on every checked element whose analytic gradient exceeds
/// 1e-8 in magnitude; smaller gradients only need a small absolute match.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], check: Check, f: F) -> Report
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Tensor<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        f(&tape, &vars).expect("forward").to_tensor()
    };
    let out_shape = eval(inputs).shape().to_vec();
    let projection = random(&out_shape, check.seed ^ 0x5eed);

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = f(&tape, &vars).expect("forward");
    let r = tape.constant(projection.clone());
    let loss = y.mul(r).unwrap().sum().unwrap();
    let mut grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let mut pick = rng(check.seed);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let elems: Vec<usize> = if n <= check.max_elems {
            (0..n).collect()
        } else {
            (0..check.max_elems).map(|_| pick.random_range(0..n)).collect()
        };
        for e in elems {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[e] += check.step;
            let plus = dot(&eval(&xs), &projection);
            xs[i].data_mut()[e] -= 2.0 * check.step;
            let minus = dot(&eval(&xs), &projection);
            let numeric = (plus - minus) / (2.0 * check.step);
            let a = analytic[i].data()[e];
            let scale = a.abs().max(numeric.abs());
            if a.abs() > 1e-8 {
                let rel = (a - numeric).abs() / scale;
                assert!(
                    rel < check.tol,
                    "input {i} element {e}: analytic {a:e} vs numeric {numeric:e} (rel {rel:e})"
                );
                worst = worst.max(rel);
                compared += 1;
            } else {
                assert!(
                    (a - numeric).abs() < 1e-6,
                    "input {i} element {e}: analytic {a:e} vs numeric {numeric:e}"
                );
            }
        }
    }
    Report { worst, compared }
}
