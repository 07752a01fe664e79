//! The recursive super-resolution network.
//!
//! The input is an interpolated low-resolution image `x`. An embedding net
//! (two 3×3 conv + ReLU layers) lifts it to `F` feature maps `H_0`; one
//! shared 3×3 conv + ReLU layer is applied `D` times giving `H_1..H_D`; a
//! shared reconstruction net maps each `H_d` to a residual that is added to
//! `x`, yielding `D` predictions; the output is their weighted sum.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, ConvLayer, GradTape, Gradients, Scalar, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::ImagePlane;

/// Every layer of the network uses 3×3 kernels.
pub const KERNEL_SIZE: usize = 3;

/// Convolutions on the longest input-to-output chain besides the recursions:
/// two embedding and two reconstruction layers.
const NON_RECURSIVE_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub recursions: usize,
    pub filters: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ModelConfig {
    /// Single-channel (luminance) model.
    pub fn luminance(recursions: usize, filters: usize) -> Self {
        ModelConfig {
            recursions,
            filters,
            in_channels: 1,
            out_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recursions < 1 || self.filters < 1 || self.in_channels < 1 || self.out_channels < 1
        {
            return Err(Error::InvalidArgument(format!(
                "model needs at least one recursion, filter and channel: {self:?}"
            )));
        }
        if self.in_channels != self.out_channels {
            return Err(Error::InvalidArgument(format!(
                "skip connection needs in_channels == out_channels, got {} and {}",
                self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

/// How the per-recursion predictions are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnsembleMode {
    /// The stored (trained) ensemble weights.
    #[default]
    Learned,
    /// Plain average, ignoring the stored weights.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrcnParams<T> {
    pub embed1: ConvLayer<T>,
    pub embed2: ConvLayer<T>,
    /// The single layer reused by every recursion.
    pub recursive: ConvLayer<T>,
    pub recon1: ConvLayer<T>,
    pub recon2: ConvLayer<T>,
    /// One weight per recursion.
    pub ensemble: Vec<T>,
}

/// Number of parameter buffers, in checkpoint order.
pub const PARAM_BUFFERS: usize = 11;

pub const PARAM_BUFFER_NAMES: [&str; PARAM_BUFFERS] = [
    "embed1.weight",
    "embed1.bias",
    "embed2.weight",
    "embed2.bias",
    "recursive.weight",
    "recursive.bias",
    "recon1.weight",
    "recon1.bias",
    "recon2.weight",
    "recon2.bias",
    "ensemble",
];

impl<T: Scalar> DrcnParams<T> {
    /// All-zero parameters with the layer shapes of `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (c_in, f, c_out) = (config.in_channels, config.filters, config.out_channels);
        Ok(DrcnParams {
            embed1: ConvLayer::zeros(f, c_in, KERNEL_SIZE)?,
            embed2: ConvLayer::zeros(f, f, KERNEL_SIZE)?,
            recursive: ConvLayer::zeros(f, f, KERNEL_SIZE)?,
            recon1: ConvLayer::zeros(f, f, KERNEL_SIZE)?,
            recon2: ConvLayer::zeros(c_out, f, KERNEL_SIZE)?,
            ensemble: vec![T::zero(); config.recursions],
        })
    }

    /// He-normal weights for the non-recursive layers, an identity map for
    /// the recursive layer, zero biases and uniform ensemble weights `1/D`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in [
            &mut params.embed1,
            &mut params.embed2,
            &mut params.recon1,
            &mut params.recon2,
        ] {
            let fan_in = layer.in_channels() * KERNEL_SIZE * KERNEL_SIZE;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for w in layer.weight.data_mut() {
                *w = T::from_f64(normal.sample(&mut rng));
            }
        }
        params.recursive = ConvLayer::identity(config.filters, KERNEL_SIZE)?;
        let uniform = T::one() / T::from_f64(config.recursions as f64);
        params.ensemble.fill(uniform);
        Ok(params)
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            recursions: self.ensemble.len(),
            filters: self.recursive.out_channels(),
            in_channels: self.embed1.in_channels(),
            out_channels: self.recon2.out_channels(),
        }
    }

    pub fn recursions(&self) -> usize {
        self.ensemble.len()
    }

    pub fn layers(&self) -> [&ConvLayer<T>; 5] {
        [
            &self.embed1,
            &self.embed2,
            &self.recursive,
            &self.recon1,
            &self.recon2,
        ]
    }

    /// Parameter buffers in checkpoint order.
    pub fn buffers(&self) -> [&[T]; PARAM_BUFFERS] {
        [
            self.embed1.weight.data(),
            &self.embed1.bias,
            self.embed2.weight.data(),
            &self.embed2.bias,
            self.recursive.weight.data(),
            &self.recursive.bias,
            self.recon1.weight.data(),
            &self.recon1.bias,
            self.recon2.weight.data(),
            &self.recon2.bias,
            &self.ensemble,
        ]
    }

    pub fn buffers_mut(&mut self) -> [&mut [T]; PARAM_BUFFERS] {
        let DrcnParams {
            embed1,
            embed2,
            recursive,
            recon1,
            recon2,
            ensemble,
        } = self;
        [
            embed1.weight.data_mut(),
            &mut embed1.bias,
            embed2.weight.data_mut(),
            &mut embed2.bias,
            recursive.weight.data_mut(),
            &mut recursive.bias,
            recon1.weight.data_mut(),
            &mut recon1.bias,
            recon2.weight.data_mut(),
            &mut recon2.bias,
            ensemble,
        ]
    }

    pub fn numel(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    /// `Σ w²` over the convolution weights only (biases and ensemble weights
    /// are not decayed).
    pub fn conv_weight_squared_norm(&self) -> T {
        self.layers()
            .iter()
            .map(|l| l.weight.squared_norm())
            .fold(T::zero(), |a, b| a + b)
    }

    pub fn is_finite(&self) -> bool {
        self.buffers()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> DrcnParams<U> {
        DrcnParams {
            embed1: self.embed1.cast(),
            embed2: self.embed2.cast(),
            recursive: self.recursive.cast(),
            recon1: self.recon1.cast(),
            recon2: self.recon2.cast(),
            ensemble: self
                .ensemble
                .iter()
                .map(|v| U::from_f64(v.as_f64()))
                .collect(),
        }
    }

    /// Same layers with a different recursion count. Existing ensemble
    /// weights are kept as a prefix; new ones are `1/recursions`.
    pub fn with_recursions(&self, recursions: usize) -> Result<Self> {
        if recursions < 1 {
            return Err(Error::InvalidArgument(
                "recursions must be at least 1".into(),
            ));
        }
        let mut p = self.clone();
        let fill = T::one() / T::from_f64(recursions as f64);
        p.ensemble.resize(recursions, fill);
        Ok(p)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().channels != self.embed1.in_channels() {
            return Err(Error::Dimension(format!(
                "model expects {} input channels, got {}",
                self.embed1.in_channels(),
                x.shape().channels
            )));
        }
        Ok(())
    }
}

/// `H_0 = relu(conv(relu(conv(x, embed1)), embed2))`.
pub fn embed<T: Scalar>(x: &Tensor<T>, params: &DrcnParams<T>) -> Result<Tensor<T>> {
    params.check_input(x)?;
    let h = autodiff::relu(&autodiff::conv2d_same(x, &params.embed1)?);
    Ok(autodiff::relu(&autodiff::conv2d_same(&h, &params.embed2)?))
}

/// One application of the shared recursive layer: `relu(conv(h, W) + b)`.
pub fn recurse<T: Scalar>(h: &Tensor<T>, params: &DrcnParams<T>) -> Result<Tensor<T>> {
    Ok(autodiff::relu(&autodiff::conv2d_same(
        h,
        &params.recursive,
    )?))
}

/// `x + conv(relu(conv(h, recon1)), recon2)`; the last layer is linear so
/// the residual can be negative.
pub fn reconstruct<T: Scalar>(
    x: &Tensor<T>,
    h: &Tensor<T>,
    params: &DrcnParams<T>,
) -> Result<Tensor<T>> {
    let hidden = autodiff::relu(&autodiff::conv2d_same(h, &params.recon1)?);
    let residual = autodiff::conv2d_same(&hidden, &params.recon2)?;
    autodiff::add(x, &residual)
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub ensemble: EnsembleMode,
    /// Keep `H_0..H_D` in the result.
    pub keep_hidden: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardResult<T> {
    /// `ŷ_1..ŷ_D`.
    pub predictions: Vec<Tensor<T>>,
    /// The ensemble output `ŷ`.
    pub output: Tensor<T>,
    pub hidden: Option<Vec<Tensor<T>>>,
}

/// Full forward pass with the learned ensemble.
pub fn forward<T: Scalar>(
    x: &Tensor<T>,
    params: &DrcnParams<T>,
    config: &ModelConfig,
) -> Result<ForwardResult<T>> {
    forward_with(x, params, config, &ForwardOptions::default())
}

pub fn forward_with<T: Scalar>(
    x: &Tensor<T>,
    params: &DrcnParams<T>,
    config: &ModelConfig,
    opts: &ForwardOptions,
) -> Result<ForwardResult<T>> {
    config.validate()?;
    if params.config() != *config {
        return Err(Error::Dimension(format!(
            "parameters describe {:?}, forward was asked for {config:?}",
            params.config()
        )));
    }
    let mut h = embed(x, params)?;
    let mut hidden = opts.keep_hidden.then(|| vec![h.clone()]);
    let mut predictions = Vec::with_capacity(config.recursions);
    for _ in 0..config.recursions {
        h = recurse(&h, params)?;
        predictions.push(reconstruct(x, &h, params)?);
        if let Some(states) = hidden.as_mut() {
            states.push(h.clone());
        }
    }
    let weights = match opts.ensemble {
        EnsembleMode::Learned => params.ensemble.clone(),
        EnsembleMode::Uniform => {
            vec![T::one() / T::from_f64(config.recursions as f64); config.recursions]
        }
    };
    let refs: Vec<&Tensor<T>> = predictions.iter().collect();
    let output = autodiff::weighted_sum(&refs, &weights)?;
    Ok(ForwardResult {
        predictions,
        output,
        hidden,
    })
}

/// Side length of the receptive field for `recursions` recursions: every
/// one of the `D + 4` 3×3 convolutions on the longest chain adds two pixels.
pub fn receptive_field(recursions: usize) -> Result<usize> {
    if recursions < 1 {
        return Err(Error::InvalidArgument(
            "recursions must be at least 1".into(),
        ));
    }
    Ok(2 * (recursions + NON_RECURSIVE_DEPTH) + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCounts {
    /// Elements in [`DrcnParams`].
    pub shared: usize,
    /// Elements if each of the `D` prediction chains owned private copies of
    /// its inference convolutions.
    pub unshared_equivalent: usize,
    /// Inference convolutions in the unshared network, `D(D+1)/2`.
    pub unshared_inference_convs: usize,
}

pub fn parameter_counts(config: &ModelConfig) -> Result<ParameterCounts> {
    config.validate()?;
    let conv = |o: usize, i: usize| o * i * KERNEL_SIZE * KERNEL_SIZE + o;
    let (c_in, f, c_out, d) = (
        config.in_channels,
        config.filters,
        config.out_channels,
        config.recursions,
    );
    let recursive = conv(f, f);
    let fixed = conv(f, c_in) + conv(f, f) + conv(f, f) + conv(c_out, f) + d;
    let copies = d * (d + 1) / 2;
    Ok(ParameterCounts {
        shared: fixed + recursive,
        unshared_equivalent: fixed + copies * recursive,
        unshared_inference_convs: copies,
    })
}

/// Tape variables of one convolution.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl LayerVars {
    fn register<T: Scalar>(tape: &mut GradTape<T>, layer: &ConvLayer<T>) -> Result<Self> {
        Ok(LayerVars {
            weight: tape.param(layer.weight.clone()),
            bias: tape.param(Tensor::vector(&layer.bias)?),
        })
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapedParams {
    pub embed1: LayerVars,
    pub embed2: LayerVars,
    /// One entry when the recursive layer is shared; `D` tied copies when
    /// registered with [`TapedParams::register_unfolded`].
    pub recursive: Vec<LayerVars>,
    pub recon1: LayerVars,
    pub recon2: LayerVars,
    pub ensemble: Var,
    recursions: usize,
}

impl TapedParams {
    pub fn register<T: Scalar>(tape: &mut GradTape<T>, params: &DrcnParams<T>) -> Result<Self> {
        Self::register_copies(tape, params, 1)
    }

    /// Registers a separate leaf for the recursive layer at every recursion,
    /// all holding the same values.
    pub fn register_unfolded<T: Scalar>(
        tape: &mut GradTape<T>,
        params: &DrcnParams<T>,
    ) -> Result<Self> {
        Self::register_copies(tape, params, params.recursions())
    }

    fn register_copies<T: Scalar>(
        tape: &mut GradTape<T>,
        params: &DrcnParams<T>,
        copies: usize,
    ) -> Result<Self> {
        let embed1 = LayerVars::register(tape, &params.embed1)?;
        let embed2 = LayerVars::register(tape, &params.embed2)?;
        let recursive = (0..copies)
            .map(|_| LayerVars::register(tape, &params.recursive))
            .collect::<Result<Vec<_>>>()?;
        let recon1 = LayerVars::register(tape, &params.recon1)?;
        let recon2 = LayerVars::register(tape, &params.recon2)?;
        let ensemble = tape.param(Tensor::from_vec(
            Shape::new(params.recursions(), 1, 1, 1),
            params.ensemble.clone(),
        )?);
        Ok(TapedParams {
            embed1,
            embed2,
            recursive,
            recon1,
            recon2,
            ensemble,
            recursions: params.recursions(),
        })
    }

    pub fn recursions(&self) -> usize {
        self.recursions
    }

    /// Convolution weight variables for weight decay. Tied recursive copies
    /// hold one weight, so only the first is listed.
    pub fn conv_weights(&self) -> Vec<Var> {
        vec![
            self.embed1.weight,
            self.embed2.weight,
            self.recursive[0].weight,
            self.recon1.weight,
            self.recon2.weight,
        ]
    }

    fn recursive_at(&self, d: usize) -> LayerVars {
        if self.recursive.len() == 1 {
            self.recursive[0]
        } else {
            self.recursive[d]
        }
    }

    /// Collects gradients into a parameter-shaped structure. Gradients of
    /// unfolded recursive copies are summed.
    pub fn gradients<T: Scalar>(
        &self,
        grads: &Gradients<T>,
        params: &DrcnParams<T>,
    ) -> Result<DrcnParams<T>> {
        let layer = |vars: &LayerVars, like: &ConvLayer<T>| -> Result<ConvLayer<T>> {
            let w = grads.get_or_zeros(vars.weight, like.weight.shape())?;
            let b = grads.get_or_zeros(vars.bias, Shape::new(1, like.bias.len(), 1, 1))?;
            ConvLayer::new(w, b.into_data())
        };
        let mut recursive = ConvLayer::zeros(
            params.recursive.out_channels(),
            params.recursive.in_channels(),
            params.recursive.kernel_size(),
        )?;
        for copy in &self.recursive {
            let g = layer(copy, &params.recursive)?;
            recursive.weight.add_assign(&g.weight)?;
            for (a, b) in recursive.bias.iter_mut().zip(g.bias) {
                *a += b;
            }
        }
        Ok(DrcnParams {
            embed1: layer(&self.embed1, &params.embed1)?,
            embed2: layer(&self.embed2, &params.embed2)?,
            recursive,
            recon1: layer(&self.recon1, &params.recon1)?,
            recon2: layer(&self.recon2, &params.recon2)?,
            ensemble: grads
                .get_or_zeros(self.ensemble, Shape::new(params.recursions(), 1, 1, 1))?
                .into_data(),
        })
    }
}

/// Tape variables produced by [`forward_taped`].
#[derive(Clone, Debug)]
pub struct TapedForward {
    pub predictions: Vec<Var>,
    pub output: Var,
}

/// The forward pass recorded on `tape`, for training.
pub fn forward_taped<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    params: &TapedParams,
) -> Result<TapedForward> {
    let conv_relu = |tape: &mut GradTape<T>, input: Var, l: LayerVars| -> Result<Var> {
        let z = tape.conv2d(input, l.weight, l.bias)?;
        tape.relu(z)
    };
    let h = conv_relu(tape, x, params.embed1)?;
    let mut h = conv_relu(tape, h, params.embed2)?;
    let mut predictions = Vec::with_capacity(params.recursions);
    for d in 0..params.recursions {
        h = conv_relu(tape, h, params.recursive_at(d))?;
        let hidden = conv_relu(tape, h, params.recon1)?;
        let residual = tape.conv2d(hidden, params.recon2.weight, params.recon2.bias)?;
        predictions.push(tape.add(x, residual)?);
    }
    let output = tape.weighted_sum(&predictions, params.ensemble)?;
    Ok(TapedForward {
        predictions,
        output,
    })
}

/// Planes produced by running the model on one luminance image.
#[derive(Clone, Debug)]
pub struct PlanePrediction {
    pub predictions: Vec<ImagePlane>,
    pub output: ImagePlane,
}

/// Runs the model on an interpolated single-channel image.
pub fn predict_plane<T: Scalar>(
    params: &DrcnParams<T>,
    input: &ImagePlane,
) -> Result<PlanePrediction> {
    let x = input.to_tensor::<T>();
    let result = forward(&x, params, &params.config())?;
    let planes =
        |t: &Tensor<T>| ImagePlane::from_tensor(t, 0, 0).map(|p| p.with_origin(input.origin()));
    Ok(PlanePrediction {
        predictions: result
            .predictions
            .iter()
            .map(planes)
            .collect::<Result<_>>()?,
        output: planes(&result.output)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(shape: Shape, seed: u64, nonneg: bool) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = if nonneg { 0.0 } else { -1.0 };
        Tensor::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.gen_range(lo..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn embed_cases() {
        let cfg = ModelConfig::luminance(2, 4);
        let zero = DrcnParams::<f64>::zeros(&cfg).unwrap();
        let x = random_input(Shape::new(1, 1, 6, 6), 1, false);
        assert!(embed(&x, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut ident = DrcnParams::<f64>::zeros(&ModelConfig::luminance(1, 1)).unwrap();
        ident.embed1 = ConvLayer::identity(1, 3).unwrap();
        ident.embed2 = ConvLayer::identity(1, 3).unwrap();
        let xp = random_input(Shape::new(1, 1, 6, 6), 2, true);
        assert_eq!(embed(&xp, &ident).unwrap(), xp);

        let p = DrcnParams::<f64>::init(&cfg, 3).unwrap();
        assert!(embed(&x, &p).unwrap().data().iter().all(|&v| v >= 0.0));

        let bad = Tensor::zeros(Shape::new(1, 2, 4, 4)).unwrap();
        assert!(matches!(embed(&bad, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn recurse_cases() {
        let cfg = ModelConfig::luminance(3, 4);
        let p = DrcnParams::<f64>::init(&cfg, 1).unwrap();
        let h = random_input(Shape::new(1, 4, 5, 5), 4, true);
        assert_eq!(recurse(&h, &p).unwrap(), h);

        let zero = DrcnParams::<f64>::zeros(&cfg).unwrap();
        assert!(recurse(&h, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        // loop vs. explicit composition g(g(g(h)))
        let mut rp = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for w in rp.recursive.weight.data_mut() {
            *w = rng.gen_range(-0.3..0.3);
        }
        rp.recursive.bias = vec![0.05, -0.05, 0.0, 0.1];
        let g = |t: &Tensor<f64>| autodiff::relu(&autodiff::conv2d_same(t, &rp.recursive).unwrap());
        let composed = g(&g(&g(&h)));
        let mut looped = h.clone();
        for _ in 0..3 {
            looped = recurse(&looped, &rp).unwrap();
        }
        assert_eq!(looped, composed);
    }

    #[test]
    fn reconstruct_cases() {
        let cfg = ModelConfig::luminance(1, 3);
        let mut p = DrcnParams::<f64>::init(&cfg, 5).unwrap();
        p.recon1 = ConvLayer::zeros(3, 3, 3).unwrap();
        p.recon2 = ConvLayer::zeros(1, 3, 3).unwrap();
        let x = random_input(Shape::new(1, 1, 5, 5), 6, false);
        let h = random_input(Shape::new(1, 3, 5, 5), 7, true);
        assert_eq!(reconstruct(&x, &h, &p).unwrap(), x);

        // Constant negative residual: recon1 passes a unit bias through the
        // ReLU, recon2 maps it to -0.1 with zero weights.
        p.recon1.bias = vec![1.0, 0.0, 0.0];
        let mut w = Tensor::zeros(Shape::new(1, 3, 3, 3)).unwrap();
        let idx = w.index(0, 0, 1, 1);
        w.data_mut()[idx] = -0.1;
        p.recon2 = ConvLayer::new(w, vec![0.0]).unwrap();
        let half = Tensor::full(Shape::new(1, 1, 5, 5), 0.5).unwrap();
        let y = reconstruct(&half, &h, &p).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        let p2 = DrcnParams::<f64>::init(&cfg, 9).unwrap();
        assert_eq!(
            reconstruct(&x, &h, &p2).unwrap(),
            reconstruct(&x, &h, &p2).unwrap()
        );
        let wrong = Tensor::zeros(Shape::new(1, 1, 4, 5)).unwrap();
        assert!(reconstruct(&wrong, &h, &p2).is_err());
    }

    #[test]
    fn init_contract() {
        let cfg = ModelConfig::luminance(4, 6);
        let p = DrcnParams::<f32>::init(&cfg, 17).unwrap();
        let nz: Vec<f32> = p
            .recursive
            .weight
            .data()
            .iter()
            .copied()
            .filter(|&v| v != 0.0)
            .collect();
        assert_eq!(nz, vec![1.0; 6]);
        for layer in p.layers() {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
        assert_eq!(p.ensemble, vec![0.25; 4]);
        assert_eq!(p, DrcnParams::<f32>::init(&cfg, 17).unwrap());
        assert_ne!(p, DrcnParams::<f32>::init(&cfg, 18).unwrap());
    }

    #[test]
    fn he_init_scale_is_plausible() {
        let cfg = ModelConfig::luminance(1, 64);
        let p = DrcnParams::<f64>::init(&cfg, 0).unwrap();
        let w = p.embed2.weight.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expected = 2.0 / (9.0 * 64.0);
        assert!(
            (var / expected - 1.0).abs() < 0.05,
            "variance {var} vs {expected}"
        );
    }

    #[test]
    fn single_recursion_with_unit_weight_outputs_prediction() {
        let cfg = ModelConfig::luminance(1, 4);
        let p = DrcnParams::<f64>::init(&cfg, 2).unwrap();
        assert_eq!(p.ensemble, vec![1.0]);
        let x = random_input(Shape::new(1, 1, 7, 7), 3, true);
        let r = forward(&x, &p, &cfg).unwrap();
        assert_eq!(r.predictions.len(), 1);
        assert_eq!(r.output, r.predictions[0]);
    }

    #[test]
    fn forward_rejects_mismatched_config() {
        let p = DrcnParams::<f64>::init(&ModelConfig::luminance(2, 4), 2).unwrap();
        let x = random_input(Shape::new(1, 1, 7, 7), 3, true);
        assert!(forward(&x, &p, &ModelConfig::luminance(3, 4)).is_err());
    }

    #[test]
    fn uniform_ensemble_averages() {
        let cfg = ModelConfig::luminance(2, 4);
        let mut p = DrcnParams::<f64>::init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for w in p.recursive.weight.data_mut() {
            *w += rng.gen_range(-0.2..0.2);
        }
        p.ensemble = vec![3.0, -1.0];
        let x = random_input(Shape::new(1, 1, 6, 6), 3, true);
        let opts = ForwardOptions {
            ensemble: EnsembleMode::Uniform,
            keep_hidden: true,
        };
        let r = forward_with(&x, &p, &cfg, &opts).unwrap();
        let avg =
            autodiff::weighted_sum(&[&r.predictions[0], &r.predictions[1]], &[0.5, 0.5]).unwrap();
        assert!(r.output.max_abs_diff(&avg) < 1e-15);
        assert_eq!(r.hidden.unwrap().len(), 3);
    }

    #[test]
    fn receptive_field_values() {
        assert_eq!(receptive_field(16).unwrap(), 41);
        assert_eq!(receptive_field(1).unwrap(), 11);
        assert_eq!(receptive_field(6).unwrap(), 21);
        assert!(receptive_field(0).is_err());
    }

    #[test]
    fn parameter_counts_match_per_layer_tally() {
        let cfg = ModelConfig::luminance(16, 256);
        let counts = parameter_counts(&cfg).unwrap();
        assert_eq!(counts.shared, 1_775_121);
        // Independent tally from actual buffers, on a smaller config.
        let small = ModelConfig::luminance(5, 7);
        let p = DrcnParams::<f32>::zeros(&small).unwrap();
        assert_eq!(parameter_counts(&small).unwrap().shared, p.numel());

        let one = parameter_counts(&ModelConfig::luminance(1, 32)).unwrap();
        assert_eq!(one.shared, one.unshared_equivalent);
        let d4 = parameter_counts(&ModelConfig::luminance(4, 32)).unwrap();
        let d8 = parameter_counts(&ModelConfig::luminance(8, 32)).unwrap();
        // copies(D) / copies(2D) == D(D+1) / (2D(2D+1)) at D = 4
        assert_eq!(
            d4.unshared_inference_convs * 8 * 9,
            d8.unshared_inference_convs * 4 * 5
        );
    }

    #[test]
    fn taped_forward_matches_eager() {
        let cfg = ModelConfig::luminance(3, 4);
        let mut p = DrcnParams::<f64>::init(&cfg, 21).unwrap();
        p.ensemble = vec![0.2, 0.3, 0.5];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for w in p.recursive.weight.data_mut() {
            *w += rng.gen_range(-0.1..0.1);
        }
        let x = random_input(Shape::new(2, 1, 6, 5), 5, true);
        let eager = forward(&x, &p, &cfg).unwrap();
        let mut tape = GradTape::new();
        let tp = TapedParams::register(&mut tape, &p).unwrap();
        let xv = tape.constant(x.clone());
        let out = forward_taped(&mut tape, xv, &tp).unwrap();
        assert_eq!(tape.value(out.output).unwrap(), &eager.output);
        for (v, t) in out.predictions.iter().zip(&eager.predictions) {
            assert_eq!(tape.value(*v).unwrap(), t);
        }
    }
}
