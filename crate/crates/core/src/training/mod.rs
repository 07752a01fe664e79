//! Composite recursive-supervision loss, SGD with momentum, the α and
//! learning-rate schedules, and the training loop.

mod check;
mod data;
mod train;

pub use check::{check_objective_gradients, ObjectiveCheck};
pub use data::{carve_validation, load_validation, PatchDataset};
pub use train::{train, EpochRecord, Termination, TrainOptions, TrainReport, EPOCH_LOG};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradTape, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{forward_taped, receptive_field, DrcnParams, ModelConfig, TapedParams};

fn default_recursions() -> usize {
    16
}
fn default_filters() -> usize {
    256
}
fn default_lr_init() -> f64 {
    0.01
}
fn default_lr_drop_factor() -> f64 {
    10.0
}
fn default_lr_patience() -> usize {
    5
}
fn default_lr_floor() -> f64 {
    1e-6
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    64
}
fn default_patch_size() -> usize {
    41
}
fn default_patch_stride() -> usize {
    21
}
fn default_alpha_init() -> f64 {
    1.0
}
fn default_alpha_decay() -> f64 {
    0.9
}
fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Recursion depth `D`.
    #[serde(default = "default_recursions", alias = "d")]
    pub recursions: usize,
    /// Feature maps per hidden layer `F`.
    #[serde(default = "default_filters", alias = "f")]
    pub filters: usize,
    pub scale: usize,
    #[serde(default = "default_lr_init")]
    pub lr_init: f64,
    #[serde(default = "default_lr_drop_factor")]
    pub lr_drop_factor: f64,
    #[serde(default = "default_lr_patience")]
    pub lr_patience_epochs: usize,
    #[serde(default = "default_lr_floor")]
    pub lr_floor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_patch_stride")]
    pub patch_stride: usize,
    #[serde(default = "default_alpha_init")]
    pub alpha_init: f64,
    #[serde(default = "default_alpha_decay")]
    pub alpha_decay_per_epoch: f64,
    #[serde(default)]
    pub seed: u64,
    pub train_dir: PathBuf,
    /// When absent, `val_fraction` of the training images are held out.
    #[serde(default)]
    pub val_dir: Option<PathBuf>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Stop after this many epochs even if the learning rate is still above
    /// the floor.
    #[serde(default)]
    pub max_epochs: Option<usize>,
}

impl TrainConfig {
    /// A configuration with every default and the given data and scale.
    pub fn new(train_dir: impl Into<PathBuf>, scale: usize) -> Self {
        TrainConfig {
            recursions: default_recursions(),
            filters: default_filters(),
            scale,
            lr_init: default_lr_init(),
            lr_drop_factor: default_lr_drop_factor(),
            lr_patience_epochs: default_lr_patience(),
            lr_floor: default_lr_floor(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            patch_size: default_patch_size(),
            patch_stride: default_patch_stride(),
            alpha_init: default_alpha_init(),
            alpha_decay_per_epoch: default_alpha_decay(),
            seed: 0,
            train_dir: train_dir.into(),
            val_dir: None,
            val_fraction: default_val_fraction(),
            max_epochs: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid training config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::luminance(self.recursions, self.filters)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.recursions < 1 || self.filters < 1 {
            return bad("recursions and filters must be at least 1".into());
        }
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        let positive = [("lr_init", self.lr_init), ("lr_floor", self.lr_floor)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.lr_drop_factor > 1.0 && self.lr_drop_factor.is_finite()) {
            return bad(format!(
                "lr_drop_factor must exceed 1, got {}",
                self.lr_drop_factor
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha_init)
            || !(0.0..=1.0).contains(&self.alpha_decay_per_epoch)
        {
            return bad("alpha_init and alpha_decay_per_epoch must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.lr_patience_epochs < 1
            || self.batch_size < 1
            || self.patch_size < 1
            || self.patch_stride < 1
        {
            return bad("patience, batch size, patch size and stride must be at least 1".into());
        }
        if self.max_epochs == Some(0) {
            return bad("max_epochs must be at least 1".into());
        }
        let rf = receptive_field(self.recursions)?;
        if self.patch_size < rf {
            log::warn!(
                "patch size {} is smaller than the {rf}x{rf} receptive field of D = {}",
                self.patch_size,
                self.recursions
            );
        }
        Ok(())
    }
}

/// Recursive supervision: `Σ_d (1/(2DN)) Σ_i ‖y⁽ⁱ⁾ − ŷ_d⁽ⁱ⁾‖²`.
pub fn loss_l1<T: Scalar>(
    predictions: &[Tensor<T>],
    target: &Tensor<T>,
    batch: usize,
) -> Result<T> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument(
            "loss_l1 needs at least one prediction".into(),
        ));
    }
    let divisor = T::from_f64((predictions.len() * batch) as f64);
    predictions
        .iter()
        .map(|p| crate::autodiff::mse_loss(p, target, divisor))
        .sum()
}

/// Output loss `Σ_i (1/(2N)) ‖y⁽ⁱ⁾ − ŷ⁽ⁱ⁾‖²` of the ensembled output.
pub fn loss_l2<T: Scalar>(output: &Tensor<T>, target: &Tensor<T>, batch: usize) -> Result<T> {
    crate::autodiff::mse_loss(output, target, T::from_f64(batch as f64))
}

/// `α·l1 + (1−α)·l2 + β·‖W‖²` where `‖W‖²` covers convolution weights only.
pub fn loss_total<T: Scalar>(l1: T, l2: T, params: &DrcnParams<T>, alpha: T, beta: T) -> T {
    alpha * l1 + (T::one() - alpha) * l2 + beta * params.conv_weight_squared_norm()
}

/// Loss terms recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapedObjective {
    pub l1: Var,
    pub l2: Var,
    pub total: Var,
    pub predictions: Vec<Var>,
    pub output: Var,
}

/// Records the forward pass and the full objective for a batch of `batch`
/// input/target pairs.
pub fn taped_objective<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    y: Var,
    params: &TapedParams,
    batch: usize,
    alpha: T,
    beta: T,
) -> Result<TapedObjective> {
    let fwd = forward_taped(tape, x, params)?;
    let d = fwd.predictions.len();
    let per_pred = fwd
        .predictions
        .iter()
        .map(|&p| tape.mse_loss(p, y, T::from_f64((d * batch) as f64)))
        .collect::<Result<Vec<_>>>()?;
    let l1 = tape.sum(&per_pred)?;
    let l2 = tape.mse_loss(fwd.output, y, T::from_f64(batch as f64))?;
    let norms = params
        .conv_weights()
        .into_iter()
        .map(|w| tape.squared_norm(w))
        .collect::<Result<Vec<_>>>()?;
    let decay = tape.sum(&norms)?;
    let terms = [
        tape.scale(l1, alpha)?,
        tape.scale(l2, T::one() - alpha)?,
        tape.scale(decay, beta)?,
    ];
    let total = tape.sum(&terms)?;
    Ok(TapedObjective {
        l1,
        l2,
        total,
        predictions: fwd.predictions,
        output: fwd.output,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    /// One velocity buffer per parameter buffer.
    pub velocity: DrcnParams<T>,
    pub momentum: f64,
    pub lr: f64,
    pub alpha: f64,
    pub epochs_since_improvement: usize,
    pub best_val_loss: Option<f64>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &DrcnParams<T>, config: &TrainConfig) -> Result<Self> {
        Ok(OptimizerState {
            velocity: DrcnParams::zeros(&params.config())?,
            momentum: config.momentum,
            lr: config.lr_init,
            alpha: config.alpha_init,
            epochs_since_improvement: 0,
            best_val_loss: None,
        })
    }
}

/// `v ← m·v − lr·g; θ ← θ + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut DrcnParams<T>,
    grads: &DrcnParams<T>,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if grads.config() != params.config() || state.velocity.config() != params.config() {
        return Err(Error::Dimension(
            "gradient or velocity shapes differ from the parameters".into(),
        ));
    }
    let m = T::from_f64(state.momentum);
    let lr = T::from_f64(state.lr);
    for ((p, g), v) in params
        .buffers_mut()
        .into_iter()
        .zip(grads.buffers())
        .zip(state.velocity.buffers_mut())
    {
        for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = m * *v - lr * g;
            *p += *v;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LrDecision {
    pub improved: bool,
    pub dropped: bool,
    pub terminate: bool,
}

/// Patience-based learning-rate drop on the validation loss. Terminates once
/// the rate falls below `lr_floor`.
pub fn lr_schedule<T>(
    state: &mut OptimizerState<T>,
    val_loss: f64,
    config: &TrainConfig,
) -> LrDecision {
    let mut decision = LrDecision::default();
    if state.best_val_loss.is_none_or(|best| val_loss < best) {
        state.best_val_loss = Some(val_loss);
        state.epochs_since_improvement = 0;
        decision.improved = true;
    } else {
        state.epochs_since_improvement += 1;
        if state.epochs_since_improvement >= config.lr_patience_epochs {
            state.lr /= config.lr_drop_factor;
            state.epochs_since_improvement = 0;
            decision.dropped = true;
        }
    }
    // Repeated division drifts by an ulp or so; only a genuine step below
    // the floor ends training.
    decision.terminate = state.lr < config.lr_floor * (1.0 - 1e-9);
    decision
}

/// `α_init · decay^epoch`, clamped to `[0, 1]`.
pub fn alpha_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let exponent = i32::try_from(epoch).unwrap_or(i32::MAX);
    (config.alpha_init * config.alpha_decay_per_epoch.powi(exponent)).clamp(0.0, 1.0)
}
