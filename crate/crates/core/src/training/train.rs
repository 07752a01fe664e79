use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::data::{carve_validation, describe, load_validation, PatchDataset};
use super::{
    alpha_schedule, loss_l1, loss_l2, loss_total, lr_schedule, sgd_step, taped_objective,
    OptimizerState, TrainConfig,
};
use crate::autodiff::GradTape;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::{list_images, EvalPair, ImagePlane};
use crate::metrics::{psnr, score_prediction};
use crate::model::{
    forward, read_checkpoint, write_checkpoint, Checkpoint, DrcnParams, TapedParams,
};

/// File name of the per-epoch JSON-lines log inside the output directory.
pub const EPOCH_LOG: &str = "train_log.jsonl";

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Directory for checkpoints and the epoch log; nothing is written when
    /// absent.
    pub out_dir: Option<&'a Path>,
    /// Start from these parameters instead of a fresh initialisation.
    pub resume: Option<&'a Path>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_l1: f64,
    pub train_l2: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_psnr: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub alpha: f64,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    LrFloor,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub termination: Termination,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_psnr: f64,
    pub train_patches: usize,
    pub val_images: usize,
}

struct Validation {
    loss: f64,
    psnr: f64,
}

fn validate(
    params: &DrcnParams<f32>,
    pairs: &[EvalPair],
    alpha: f64,
    beta: f64,
) -> Result<Validation> {
    let config = params.config();
    let per_image: Vec<Result<(f64, f64)>> = pairs
        .par_iter()
        .map(|pair| {
            let x = pair.input.to_tensor::<f32>();
            let y = pair.ground_truth.to_tensor::<f32>();
            let fwd = forward(&x, params, &config)?;
            let l1 = loss_l1(&fwd.predictions, &y, 1)?;
            let l2 = loss_l2(&fwd.output, &y, 1)?;
            let loss = loss_total(l1, l2, params, alpha as f32, beta as f32) as f64;
            let output = ImagePlane::from_tensor(&fwd.output, 0, 0)?;
            let psnr = score_prediction(&pair.ground_truth, &output, pair.scale)
                .map(|s| s.psnr)
                .or_else(|_| psnr(&pair.ground_truth, &output))?;
            Ok((loss, psnr))
        })
        .collect();
    let mut loss = 0.0;
    let mut finite = Vec::new();
    for r in per_image {
        let (l, p) = r?;
        loss += l;
        if p.is_finite() {
            finite.push(p);
        }
    }
    let n = pairs.len() as f64;
    let psnr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(Validation {
        loss: loss / n,
        psnr,
    })
}

fn non_finite(what: &str, epoch: usize, batch: usize) -> Error {
    Error::Numerical(format!(
        "{what} became non-finite in epoch {epoch}, batch {batch}; lower lr_init or check the data"
    ))
}

fn initial_params(config: &TrainConfig, resume: Option<&Path>) -> Result<DrcnParams<f32>> {
    let Some(path) = resume else {
        return DrcnParams::init(&config.model_config(), config.seed);
    };
    let ckpt = read_checkpoint(path)?;
    let header = &ckpt.header;
    if header.model_config() != config.model_config() || header.scale as usize != config.scale {
        return Err(Error::Config(format!(
            "checkpoint {} holds D = {}, F = {}, scale {} but the config asks for D = {}, F = {}, scale {}",
            path.display(),
            header.recursions,
            header.filters,
            header.scale,
            config.recursions,
            config.filters,
            config.scale
        )));
    }
    Ok(ckpt.params)
}

/// Trains a luminance model from `config` and returns the parameters with
/// the lowest validation loss together with the per-epoch report.
pub fn train(
    config: &TrainConfig,
    opts: &TrainOptions<'_>,
) -> Result<(DrcnParams<f32>, TrainReport)> {
    config.validate()?;
    let files = list_images(&config.train_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no PNG or BMP images in {}",
            config.train_dir.display()
        )));
    }
    let (train_files, val_files) = match &config.val_dir {
        Some(dir) => {
            let val = list_images(dir)?;
            if val.is_empty() {
                return Err(Error::Data(format!(
                    "no PNG or BMP images in {}",
                    dir.display()
                )));
            }
            (files, val)
        }
        None => carve_validation(&files, config.val_fraction, config.seed),
    };
    log::info!("validation images: {}", describe(&val_files));

    let dataset = PatchDataset::from_files(
        &train_files,
        config.scale,
        config.patch_size,
        config.patch_stride,
    )?;
    if dataset.is_empty() {
        return Err(Error::Data(format!(
            "no {0}x{0} training patches could be cut from {1}",
            config.patch_size,
            config.train_dir.display()
        )));
    }
    let val_pairs = load_validation(&val_files, config.scale)?;
    log::info!(
        "{} training patches, {} validation images",
        dataset.len(),
        val_pairs.len()
    );

    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let save = |name: &str, params: &DrcnParams<f32>| -> Result<()> {
        match opts.out_dir {
            Some(dir) => write_checkpoint(
                &dir.join(name),
                &Checkpoint::new(params.clone(), config.scale as u32),
            ),
            None => Ok(()),
        }
    };

    let mut params = initial_params(config, opts.resume)?;
    let mut state = OptimizerState::new(&params, config)?;
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val_psnr = f64::NAN;
    let mut records = Vec::new();
    let mut log_text = String::new();
    let beta = config.weight_decay as f32;

    let termination = loop {
        let epoch = records.len() + 1;
        let alpha = alpha_schedule(epoch - 1, config);
        state.alpha = alpha;
        let lr = state.lr;

        let order = dataset.epoch_order(config.seed, epoch - 1);
        let (mut sum_l1, mut sum_l2, mut sum_total) = (0.0f64, 0.0f64, 0.0f64);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = dataset.batch(chunk)?;
            let mut tape = GradTape::new();
            let taped = TapedParams::register(&mut tape, &params)?;
            let (xv, yv) = (tape.constant(x), tape.constant(y));
            let obj = taped_objective(&mut tape, xv, yv, &taped, chunk.len(), alpha as f32, beta)?;
            let total = tape.value(obj.total)?.item()?;
            if !total.is_finite() {
                return Err(non_finite("training loss", epoch, b + 1));
            }
            log::debug!("epoch {epoch} batch {}: loss {total}", b + 1);
            let weight = chunk.len() as f64;
            sum_l1 += weight * tape.value(obj.l1)?.item()? as f64;
            sum_l2 += weight * tape.value(obj.l2)?.item()? as f64;
            sum_total += weight * total as f64;
            let grads = taped.gradients(&tape.backward(obj.total)?, &params)?;
            drop(tape);
            if !grads.is_finite() {
                return Err(non_finite("gradient", epoch, b + 1));
            }
            sgd_step(&mut params, &grads, &mut state)?;
            if !params.is_finite() {
                return Err(non_finite("parameters", epoch, b + 1));
            }
        }
        let n = dataset.len() as f64;

        let val = validate(&params, &val_pairs, alpha, config.weight_decay)?;
        if !val.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "validation loss became non-finite in epoch {epoch}"
            )));
        }
        let decision = lr_schedule(&mut state, val.loss, config);
        let record = EpochRecord {
            epoch,
            train_l1: sum_l1 / n,
            train_l2: sum_l2 / n,
            train_loss: sum_total / n,
            val_loss: val.loss,
            val_psnr: val.psnr,
            lr,
            alpha,
            improved: decision.improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} val loss {:.6} val psnr {:.3} dB lr {lr:e} alpha {alpha:.4}{}",
            record.train_loss,
            record.val_loss,
            record.val_psnr,
            if decision.improved { " *" } else { "" }
        );
        log_text.push_str(&serde_json::to_string(&record).expect("record serialises"));
        log_text.push('\n');
        if let Some(dir) = opts.out_dir {
            write_atomic(&dir.join(EPOCH_LOG), log_text.as_bytes())?;
        }
        records.push(record);

        if decision.improved {
            best = params.clone();
            best_epoch = epoch;
            best_val_psnr = val.psnr;
            save("best.drcn", &best)?;
            save(&format!("epoch_{epoch}.drcn"), &params)?;
        }
        let stop = if decision.terminate {
            Some(Termination::LrFloor)
        } else if config.max_epochs.is_some_and(|m| epoch >= m) {
            Some(Termination::MaxEpochs)
        } else {
            None
        };
        if let Some(reason) = stop {
            if !decision.improved {
                save(&format!("epoch_{epoch}.drcn"), &params)?;
            }
            break reason;
        }
    };

    let report = TrainReport {
        best_val_loss: state.best_val_loss.unwrap_or(f64::NAN),
        epochs: records,
        termination,
        best_epoch,
        best_val_psnr,
        train_patches: dataset.len(),
        val_images: val_pairs.len(),
    };
    Ok((best, report))
}
