use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::{quality, QualityScore};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::{crop_border, list_images, load_luminance, make_eval_pair, ImagePlane};
use crate::model::{predict_plane, DrcnParams};

/// What produces the super-resolved image from the interpolated input.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    /// The interpolated input itself.
    Bicubic,
    Model(&'a DrcnParams<f32>),
}

impl Predictor<'_> {
    fn predict(&self, input: &ImagePlane) -> Result<ImagePlane> {
        match self {
            Predictor::Bicubic => Ok(input.clone()),
            Predictor::Model(params) => Ok(predict_plane(params, input)?.output),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub file: String,
    pub score: QualityScore,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedFile {
    pub file: String,
    pub reason: String,
}

/// Means exclude images scored at infinite PSNR; `None` when nothing remains.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// One row per scored image, in file-name order.
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<SkippedFile>,
    pub summary: EvalSummary,
}

impl EvalReport {
    fn from_rows(rows: Vec<EvalRow>, skipped: Vec<SkippedFile>) -> Self {
        let finite: Vec<&QualityScore> = rows
            .iter()
            .map(|r| &r.score)
            .filter(|s| s.psnr.is_finite())
            .collect();
        let mean = |f: fn(&QualityScore) -> f64| {
            (!finite.is_empty())
                .then(|| finite.iter().map(|s| f(s)).sum::<f64>() / finite.len() as f64)
        };
        let summary = EvalSummary {
            count: rows.len(),
            mean_psnr: mean(|s| s.psnr),
            mean_ssim: mean(|s| s.ssim),
            excluded: rows.len() - finite.len(),
        };
        EvalReport {
            rows,
            skipped,
            summary,
        }
    }

    /// CSV with columns `file,psnr_db,ssim`; infinite PSNR is written `inf`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["file", "psnr_db", "ssim"])
            .expect("in-memory write");
        for r in &self.rows {
            let psnr = if r.score.psnr.is_finite() {
                format!("{:.6}", r.score.psnr)
            } else {
                "inf".to_string()
            };
            w.write_record([r.file.as_str(), &psnr, &format!("{:.6}", r.score.ssim)])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV of UTF-8 fields")
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serialises") + "\n"
    }

    /// Writes the CSV to `path` and the JSON summary next to it with a
    /// `.json` extension.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        let json = path.with_extension("json");
        if json == path {
            return Err(Error::InvalidArgument(format!(
                "report path {} must not have a .json extension",
                path.display()
            )));
        }
        write_atomic(path, self.to_csv().as_bytes())?;
        write_atomic(&json, self.summary_json().as_bytes())?;
        Ok(json)
    }
}

/// Scores `prediction` against `ground_truth` after removing `crop` pixels
/// from every side of both.
pub fn score_prediction(
    ground_truth: &ImagePlane,
    prediction: &ImagePlane,
    crop: usize,
) -> Result<QualityScore> {
    quality(
        &crop_border(ground_truth, crop)?,
        &crop_border(prediction, crop)?,
    )
}

/// Outer error aborts the evaluation; inner error skips the file.
fn evaluate_file(
    path: &Path,
    predictor: Predictor<'_>,
    scale: usize,
    crop: usize,
) -> Result<Result<QualityScore>> {
    let pair = match load_luminance(path).and_then(|hr| make_eval_pair(&hr, scale)) {
        Ok(pair) => pair,
        Err(e) => return Ok(Err(e)),
    };
    let prediction = predictor.predict(&pair.input)?;
    Ok(score_prediction(&pair.ground_truth, &prediction, crop))
}

/// Degrades every image in `dir` by `scale`, super-resolves it and scores
/// the result. Unreadable or too-small images are skipped with a warning.
pub fn evaluate_dataset(
    predictor: Predictor<'_>,
    dir: &Path,
    scale: usize,
    crop: usize,
) -> Result<EvalReport> {
    if !(2..=4).contains(&scale) {
        return Err(Error::InvalidArgument(format!(
            "scale must be 2, 3 or 4, got {scale}"
        )));
    }
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no PNG or BMP images in {}",
            dir.display()
        )));
    }
    let results: Vec<(String, Result<Result<QualityScore>>)> = files
        .par_iter()
        .map(|path| {
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            (name, evaluate_file(path, predictor, scale, crop))
        })
        .collect();

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (file, result) in results {
        match result? {
            Ok(score) => rows.push(EvalRow { file, score }),
            Err(e) => {
                log::warn!("skipping {file}: {e}");
                skipped.push(SkippedFile {
                    file,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(EvalReport::from_rows(rows, skipped))
}
