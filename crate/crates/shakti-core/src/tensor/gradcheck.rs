//! Central finite-difference verification of analytic gradients.
//!
//! Runs in `f64` only: at `f32` the truncation error of finite differences
//! would drown the signal. The checked function is evaluated through exactly
//! the same op implementations used for training.

use rand::Rng;

use super::{Tape, Tensor};
use crate::error::Result;
use crate::rng;

/// One differentiable input to a checked function: flat data plus shape.
#[derive(Clone)]
pub struct CheckInput {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckInput {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Self {
        CheckInput {
            data,
            shape: shape.to_vec(),
        }
    }

    /// Uniform random input in `[lo, hi)` drawn from a named stream.
    pub fn random(seed: u64, name: &str, shape: &[usize], lo: f64, hi: f64) -> Self {
        let mut r = rng::stream(seed, name);
        let n: usize = shape.iter().product();
        CheckInput {
            data: (0..n).map(|_| r.random_range(lo..hi)).collect(),
            shape: shape.to_vec(),
        }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative error across all checked elements.
    pub worst_rel: f64,
    /// Number of elements compared.
    pub checked: usize,
}

fn eval_numeric(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[CheckInput],
) -> Result<f64> {
    let ts: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|i| Tensor::from_vec(i.data.clone(), &i.shape))
        .collect::<Result<_>>()?;
    f(&ts)?.item()
}

/// Compare analytic gradients of the scalar function `f` against central
/// finite differences, checking every element of every input.
///
/// Relative error per element: `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradcheck(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[CheckInput],
    eps: f64,
) -> Result<GradCheckReport> {
    gradcheck_sampled(f, inputs, eps, usize::MAX, 0)
}

/// Like [`gradcheck`] but probing at most `max_per_input` randomly chosen
/// elements of each input. With `max_per_input = usize::MAX` every element
/// is checked and `seed` is unused.
pub fn gradcheck_sampled(
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    inputs: &[CheckInput],
    eps: f64,
    max_per_input: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let tape: Tape<f64> = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|i| tape.leaf(i.data.clone(), &i.shape))
        .collect::<Result<_>>()?;
    let y = f(&leaves)?;
    y.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut pick_rng = rng::stream(seed, "gradcheck/picks");
    for (i, input) in inputs.iter().enumerate() {
        let n = input.data.len();
        let picks: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut pick_rng, n, max_per_input).into_vec()
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= eps;
            let numeric = (eval_numeric(f, &plus)? - eval_numeric(f, &minus)?) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        worst_rel: worst,
        checked,
    })
}
