//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes on an inference tape, so
//! it is independent of every backward rule it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FD_EPS: f64 = 1e-5;

/// Deterministic uniform tensor in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval_scalar<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::inference();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars).expect("forward failed").value().data()[0]
}

/// Maximum relative error between backprop and central differences over every
/// element of every input.
pub fn input_grad_error<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&tape, &vars).expect("forward failed");
    let grads = tape.backward(&out).expect("backward failed");
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(v.shape());
        let analytic = grads.get(v).unwrap_or(&zero);
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            let num = (eval_scalar(&plus, &f) - eval_scalar(&minus, &f)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic.data()[j], num));
        }
    }
    worst
}

/// Panics when [`input_grad_error`] exceeds `tol`.
pub fn check_input_grads<F>(inputs: &[Tensor<f64>], f: F, tol: f64)
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let e = input_grad_error(inputs, f);
    assert!(e < tol, "gradient relative error {e:e} exceeds {tol:e}");
}

/// Maximum relative error over (a sample of at most `per_param` elements of)
/// every parameter in `store`.
pub fn param_grad_error<F>(store: &ParamStore<f64>, per_param: usize, seed: u64, f: F) -> f64
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var<f64>>,
{
    let tape = Tape::new();
    let out = f(&tape, store).expect("forward failed");
    let grads = tape.backward(&out).expect("backward failed").params(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let eval = |s: &ParamStore<f64>| {
        let t = Tape::inference();
        f(&t, s).expect("forward failed").value().data()[0]
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
            let mut s = store.clone();
            s.get_mut(id).data_mut()[j] += FD_EPS;
            let up = eval(&s);
            s.get_mut(id).data_mut()[j] -= 2.0 * FD_EPS;
            let down = eval(&s);
            let num = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic, num));
        }
    }
    worst
}
