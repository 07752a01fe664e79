//! The `drcn` command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::imaging::{
    bicubic_resize, load_image, rgb_to_ycbcr, save_planes_png, ycbcr_to_rgb, DecodedImage,
    ImagePlane,
};
use crate::metrics::{evaluate_dataset, Predictor};
use crate::model::{
    parameter_counts, predict_plane, read_checkpoint, receptive_field, ModelConfig,
};
use crate::training::{train, TrainConfig, TrainOptions, EPOCH_LOG};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "DRCN_THREADS";

/// Recursion depths always listed by `analyze`.
const STUDY_DEPTHS: [usize; 4] = [1, 6, 11, 16];

#[derive(Debug, Parser)]
#[command(
    name = "drcn",
    version,
    about = "Recursive convolutional super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a JSON configuration.
    Train(TrainArgs),
    /// Super-resolve one interpolated image.
    Sr(SrArgs),
    /// Score a model or the bicubic baseline on a directory of images.
    Eval(EvalArgs),
    /// Print receptive field and parameter counts.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Directory for checkpoints and the epoch log.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; must match the configured D, F and scale.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SrArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Input image, already interpolated to the target size.
    #[arg(long)]
    input: PathBuf,
    /// Output PNG.
    #[arg(long)]
    output: PathBuf,
    /// Also write every intermediate prediction as rec_01.png, rec_02.png, ...
    #[arg(long, value_name = "DIR")]
    dump_intermediate: Option<PathBuf>,
    /// Bicubic-upscale the input by this factor first (for raw low-resolution input).
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..=8))]
    upscale_first: Option<u32>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("predictor").required(true).args(["model", "bicubic"])))]
struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score the bicubic-interpolated input itself.
    #[arg(long)]
    bicubic: bool,
    /// Directory of PNG/BMP ground-truth images.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u32).range(2..=4))]
    scale: u32,
    /// Border pixels removed before scoring [default: the scale].
    #[arg(long)]
    crop: Option<usize>,
    /// CSV report path; the JSON summary is written next to it.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    recursions: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    filters: u64,
    /// Image channels (input and output).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    channels: u64,
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Sr(a) => cmd_sr(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let n = raw
        .to_str()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {raw:?}"
            ))
        })?;
    // A pool may already exist when running inside a test harness.
    if rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .is_err()
    {
        log::debug!("thread pool already initialised; {THREADS_ENV} ignored");
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let config = TrainConfig::from_json(&text)?;
    let opts = TrainOptions {
        out_dir: Some(&args.out),
        resume: args.resume.as_deref(),
    };
    let (_, report) = train(&config, &opts)?;
    println!(
        "trained {} epochs on {} patches ({} validation images); stopped: {}",
        report.epochs.len(),
        report.train_patches,
        report.val_images,
        match report.termination {
            crate::training::Termination::LrFloor => "learning rate below floor",
            crate::training::Termination::MaxEpochs => "epoch limit",
        }
    );
    println!(
        "best epoch {}: validation loss {:.6}, PSNR {:.3} dB",
        report.best_epoch, report.best_val_loss, report.best_val_psnr
    );
    println!(
        "wrote {} and {}",
        args.out.join("best.drcn").display(),
        args.out.join(EPOCH_LOG).display()
    );
    Ok(())
}

fn require_png(path: &Path) -> Result<()> {
    let ok = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if ok {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "output {} must have a .png extension",
            path.display()
        )))
    }
}

fn cmd_sr(args: &SrArgs) -> Result<()> {
    require_png(&args.output)?;
    let ckpt = read_checkpoint(&args.model)?;
    if ckpt.header.in_channels != 1 {
        return Err(Error::Checkpoint(format!(
            "{} holds a {}-channel model; only luminance models are supported",
            args.model.display(),
            ckpt.header.in_channels
        )));
    }
    let mut image = load_image(&args.input)?;
    if let Some(n) = args.upscale_first {
        let (w, h) = image.dims();
        let (w, h) = (w * n as usize, h * n as usize);
        image = match image {
            DecodedImage::Gray(p) => DecodedImage::Gray(bicubic_resize(&p, w, h)?),
            DecodedImage::Rgb(planes) => DecodedImage::Rgb([
                bicubic_resize(&planes[0], w, h)?,
                bicubic_resize(&planes[1], w, h)?,
                bicubic_resize(&planes[2], w, h)?,
            ]),
        };
    }

    let (luma, chroma) = match &image {
        DecodedImage::Gray(p) => (p.clone(), None),
        DecodedImage::Rgb([r, g, b]) => {
            let [y, cb, cr] = rgb_to_ycbcr(r, g, b)?;
            (y, Some((cb, cr)))
        }
    };
    let prediction = predict_plane(&ckpt.params, &luma)?;
    let with_chroma = |y: &ImagePlane| -> Result<Vec<ImagePlane>> {
        match &chroma {
            None => Ok(vec![y.clone()]),
            Some((cb, cr)) => Ok(ycbcr_to_rgb(y, cb, cr)?.to_vec()),
        }
    };
    let planes = with_chroma(&prediction.output)?;
    save_planes_png(&args.output, &planes.iter().collect::<Vec<_>>())?;

    if let Some(dir) = &args.dump_intermediate {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (d, pred) in prediction.predictions.iter().enumerate() {
            let planes = with_chroma(pred)?;
            save_planes_png(
                &dir.join(format!("rec_{:02}.png", d + 1)),
                &planes.iter().collect::<Vec<_>>(),
            )?;
        }
    }
    let (w, h) = luma.dims();
    println!("wrote {} ({w}x{h})", args.output.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let scale = args.scale as usize;
    let crop = args.crop.unwrap_or(scale);
    let ckpt = args.model.as_deref().map(read_checkpoint).transpose()?;
    let predictor = match &ckpt {
        Some(c) => {
            if c.header.scale as usize != scale {
                log::warn!(
                    "model was trained for scale {} but is evaluated at scale {scale}",
                    c.header.scale
                );
            }
            Predictor::Model(&c.params)
        }
        None => Predictor::Bicubic,
    };
    let report = evaluate_dataset(predictor, &args.dataset, scale, crop)?;
    let json = report.write(&args.report)?;
    for s in &report.skipped {
        eprintln!("skipped {}: {}", s.file, s.reason);
    }
    let fmt =
        |v: Option<f64>, digits: usize| v.map_or("n/a".to_string(), |v| format!("{v:.digits$}"));
    println!(
        "{} images (excluded from means: {}), scale x{scale}, crop {crop}",
        report.summary.count, report.summary.excluded
    );
    println!("mean PSNR {} dB", fmt(report.summary.mean_psnr, 4));
    println!("mean SSIM {}", fmt(report.summary.mean_ssim, 4));
    println!("wrote {} and {}", args.report.display(), json.display());
    Ok(())
}

fn analyze_row(recursions: usize, filters: usize, channels: usize) -> Result<String> {
    let config = ModelConfig {
        recursions,
        filters,
        in_channels: channels,
        out_channels: channels,
    };
    let counts = parameter_counts(&config)?;
    Ok(format!(
        "{:>4} {:>9} {:>14} {:>18} {:>8.3} {:>15}",
        recursions,
        format!("{0}x{0}", receptive_field(recursions)?),
        counts.shared,
        counts.unshared_equivalent,
        counts.unshared_equivalent as f64 / counts.shared as f64,
        counts.unshared_inference_convs
    ))
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let to_usize =
        |v: u64| usize::try_from(v).map_err(|_| Error::Usage(format!("{v} is too large")));
    let (d, f, c) = (
        to_usize(args.recursions)?,
        to_usize(args.filters)?,
        to_usize(args.channels)?,
    );
    println!("F = {f}, channels = {c}");
    println!(
        "{:>4} {:>9} {:>14} {:>18} {:>8} {:>15}",
        "D", "receptive", "shared params", "unshared params", "ratio", "inference convs"
    );
    println!("{}", analyze_row(d, f, c)?);
    println!("study depths:");
    for depth in STUDY_DEPTHS {
        println!("{}", analyze_row(depth, f, c)?);
    }
    Ok(())
}
