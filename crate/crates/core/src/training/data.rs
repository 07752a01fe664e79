use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::imaging::{extract_patches, load_luminance, make_eval_pair, EvalPair, ImagePlane};

/// Co-located input/target patches, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchDataset {
    patch_size: usize,
    inputs: Vec<f32>,
    targets: Vec<f32>,
}

impl PatchDataset {
    /// Degrades each high-resolution plane by `scale` and cuts patches from
    /// the interpolated input and the ground truth.
    pub fn from_planes(
        planes: &[ImagePlane],
        scale: usize,
        size: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut ds = PatchDataset {
            patch_size: size,
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        for hr in planes {
            let pair = make_eval_pair(hr, scale)?;
            for patch in extract_patches(&pair.input, &pair.ground_truth, size, stride)? {
                ds.inputs
                    .extend(patch.input.samples().iter().map(|&v| v as f32));
                ds.targets
                    .extend(patch.target.samples().iter().map(|&v| v as f32));
            }
        }
        Ok(ds)
    }

    pub fn from_files(paths: &[PathBuf], scale: usize, size: usize, stride: usize) -> Result<Self> {
        let planes = paths
            .iter()
            .map(|p| load_luminance(p))
            .collect::<Result<Vec<_>>>()?;
        Self::from_planes(&planes, scale, size, stride)
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / (self.patch_size * self.patch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Input and target tensors (N×1×size×size) for the given patches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let n = self.patch_size * self.patch_size;
        let mut x = Vec::with_capacity(indices.len() * n);
        let mut y = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "patch {i} out of {}",
                    self.len()
                )));
            }
            x.extend_from_slice(&self.inputs[i * n..(i + 1) * n]);
            y.extend_from_slice(&self.targets[i * n..(i + 1) * n]);
        }
        let shape = Shape::new(indices.len(), 1, self.patch_size, self.patch_size);
        Ok((Tensor::from_vec(shape, x)?, Tensor::from_vec(shape, y)?))
    }

    /// Patch order for one epoch, a pure function of `seed` and `epoch`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }
}

/// Splits sorted training files into (train, validation). At least one
/// image is held out when there are two or more; a single image serves as
/// both.
pub fn carve_validation(
    files: &[PathBuf],
    fraction: f64,
    seed: u64,
) -> (Vec<PathBuf>, Vec<PathBuf>) {
    if files.len() < 2 {
        return (files.to_vec(), files.to_vec());
    }
    let held = ((files.len() as f64 * fraction).round() as usize).clamp(1, files.len() - 1);
    let mut order: Vec<usize> = (0..files.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut val: Vec<usize> = order[..held].to_vec();
    let mut train: Vec<usize> = order[held..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (
        train.into_iter().map(|i| files[i].clone()).collect(),
        val.into_iter().map(|i| files[i].clone()).collect(),
    )
}

/// Evaluation pairs for whole validation images.
pub fn load_validation(paths: &[PathBuf], scale: usize) -> Result<Vec<EvalPair>> {
    paths
        .iter()
        .map(|p| make_eval_pair(&load_luminance(p)?, scale))
        .collect()
}

pub(crate) fn describe(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| {
            p.file_name()
                .map(Path::new)
                .unwrap_or(p)
                .display()
                .to_string()
        })
        .collect::<Vec<_>>()
        .join(", ")
}
