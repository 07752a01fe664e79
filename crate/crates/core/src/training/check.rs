//! Finite-difference verification of the full training objective.

use crate::autodiff::{conv2d_same, relative_error, relu, GradTape, ParamCheck, Tensor};
use crate::error::Result;
use crate::model::{DrcnParams, TapedParams, PARAM_BUFFERS};

use super::taped_objective;

/// Largest and smallest central-difference steps tried.
const EPS_START: f64 = 1e-4;
const EPS_MIN: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveCheck {
    /// One entry per parameter buffer.
    pub params: Vec<ParamCheck>,
    /// Elements whose step had to be shortened to stay clear of a ReLU kink.
    pub refined: usize,
}

impl ObjectiveCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Sign of every ReLU pre-activation in the forward pass.
fn relu_pattern(params: &DrcnParams<f64>, x: &Tensor<f64>) -> Result<Vec<bool>> {
    let mut signs = Vec::new();
    let mut layer = |input: &Tensor<f64>, l| -> Result<Tensor<f64>> {
        let z = conv2d_same(input, l)?;
        signs.extend(z.data().iter().map(|&v| v > 0.0));
        Ok(relu(&z))
    };
    let h = layer(x, &params.embed1)?;
    let mut h = layer(&h, &params.embed2)?;
    for _ in 0..params.recursions() {
        h = layer(&h, &params.recursive)?;
        layer(&h, &params.recon1)?;
    }
    Ok(signs)
}

fn objective(
    params: &DrcnParams<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    alpha: f64,
    beta: f64,
) -> Result<(f64, DrcnParams<f64>)> {
    let mut tape = GradTape::new();
    let taped = TapedParams::register(&mut tape, params)?;
    let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let obj = taped_objective(&mut tape, xv, yv, &taped, x.shape().batch, alpha, beta)?;
    let grads = taped.gradients(&tape.backward(obj.total)?, params)?;
    Ok((tape.value(obj.total)?.item()?, grads))
}

/// Compares backpropagated gradients of `α·l1 + (1−α)·l2 + β‖W‖²` with
/// central differences for every parameter element. When a step would flip
/// a ReLU on or off, the difference quotient measures the kink rather than
/// the derivative, so the step is shortened until the activation pattern is
/// unchanged.
pub fn check_objective_gradients(
    params: &DrcnParams<f64>,
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    alpha: f64,
    beta: f64,
) -> Result<ObjectiveCheck> {
    let (_, analytic) = objective(params, x, y, alpha, beta)?;
    let base_pattern = relu_pattern(params, x)?;
    let loss = |p: &DrcnParams<f64>| -> Result<f64> {
        let fwd = crate::model::forward(x, p, &p.config())?;
        let l1 = super::loss_l1(&fwd.predictions, y, x.shape().batch)?;
        let l2 = super::loss_l2(&fwd.output, y, x.shape().batch)?;
        Ok(super::loss_total(l1, l2, p, alpha, beta))
    };

    let mut refined = 0;
    let mut checks = Vec::with_capacity(PARAM_BUFFERS);
    let mut work = params.clone();
    for b in 0..PARAM_BUFFERS {
        let mut check = ParamCheck {
            samples: params.buffers()[b].len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in 0..params.buffers()[b].len() {
            let orig = params.buffers()[b][i];
            let mut eps = EPS_START;
            let fd = loop {
                // Fourth-order central stencil over ±h and ±2h.
                let mut values = [0.0; 4];
                let mut smooth = true;
                for (v, k) in values.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                    work.buffers_mut()[b][i] = orig + k * eps;
                    *v = loss(&work)?;
                    smooth &= relu_pattern(&work, x)? == base_pattern;
                }
                if smooth || eps / 10.0 < EPS_MIN {
                    // Differences first, so a flat direction gives exactly 0.
                    break (8.0 * (values[1] - values[2]) - (values[0] - values[3])) / (12.0 * eps);
                }
                eps /= 10.0;
            };
            if eps < EPS_START {
                refined += 1;
            }
            work.buffers_mut()[b][i] = orig;
            let bp = analytic.buffers()[b][i];
            check.max_rel_error = check.max_rel_error.max(relative_error(bp, fd));
            check.max_abs_error = check.max_abs_error.max((bp - fd).abs());
        }
        checks.push(check);
    }
    Ok(ObjectiveCheck {
        params: checks,
        refined,
    })
}
