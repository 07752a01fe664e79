//! Central finite-difference check of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{GradTape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub epsilon: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_samples_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            max_samples_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub samples: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }
}

/// `|a − b| / max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Compares backward gradients of the scalar built by `build` against
/// central differences `(L(θ+ε) − L(θ−ε)) / 2ε`, one element at a time.
///
/// `build` receives a fresh tape and the parameter variables (registered in
/// the order of `params`) and returns the loss variable.
pub fn check_gradients<F>(
    params: &[Tensor<f64>],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let evaluate = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss)?.item()
    };

    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut working: Vec<Tensor<f64>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var, params[p].shape())?;
        let n = params[p].len();
        let mut indices: Vec<usize> = match opts.max_samples_per_param {
            Some(m) if m < n => rand::seq::index::sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        indices.sort_unstable();

        let mut check = ParamCheck {
            samples: indices.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for &i in &indices {
            let orig = working[p].data()[i];
            working[p].data_mut()[i] = orig + opts.epsilon;
            let plus = evaluate(&working)?;
            working[p].data_mut()[i] = orig - opts.epsilon;
            let minus = evaluate(&working)?;
            working[p].data_mut()[i] = orig;

            let fd = (plus - minus) / (2.0 * opts.epsilon);
            let bp = analytic.data()[i];
            check.max_rel_error = check.max_rel_error.max(relative_error(bp, fd));
            check.max_abs_error = check.max_abs_error.max((bp - fd).abs());
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}
