//! Dice scoring, per-case reassembly of slice predictions, and reports.

use candle_core::DType;
use ndarray::{Array2, Array3, ArrayView, Axis, Dimension, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{write_atomic, Error, IoContext, Result};
use crate::nets::{SegModel, INPUT_HW};
use crate::preprocess::{
    candidate_centers, extract_samples, nearest_index, prepare_case, BoundingBox3D,
    PreprocessConfig, SampleRecord,
};
use crate::train::make_batch;
use crate::volume_io::{load_case, write_nifti_u8, CaseVolume, Split, SplitManifest};

fn check_binary<D: Dimension>(a: &ArrayView<u8, D>) -> Result<()> {
    match a.iter().find(|&&v| v > 1) {
        Some(&v) => Err(Error::NonBinary(v as f32)),
        None => Ok(()),
    }
}

/// Intersection and the two set sizes of a pair of binary masks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub pred: u64,
    pub gt: u64,
}

impl Overlap {
    pub fn dice(&self) -> f64 {
        match (self.pred, self.gt) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (p, g) => 2.0 * self.intersection as f64 / (p + g) as f64,
        }
    }
}

impl std::ops::Add for Overlap {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            intersection: self.intersection + o.intersection,
            pred: self.pred + o.pred,
            gt: self.gt + o.gt,
        }
    }
}

pub fn overlap<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<Overlap> {
    if pred.shape() != gt.shape() {
        return Err(Error::TensorShape {
            expected: format!("mask {:?}", gt.shape()),
            got: format!("{:?}", pred.shape()),
        });
    }
    check_binary(&pred)?;
    check_binary(&gt)?;
    let mut o = Overlap::default();
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        o.pred += p as u64;
        o.gt += g as u64;
        o.intersection += (p & g) as u64;
    });
    Ok(o)
}

/// `2|P∩G| / (|P|+|G|)`; 1 when both masks are empty, 0 when only one is.
pub fn dice<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<f64> {
    Ok(overlap(pred, gt)?.dice())
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Anything producing one 128×128 logit map per input sample.
pub trait SliceSegmenter: Sync {
    fn slices_per_modality(&self) -> usize;
    fn logits(&self, samples: &[SampleRecord]) -> Result<Vec<Array2<f32>>>;
}

impl SliceSegmenter for SegModel {
    fn slices_per_modality(&self) -> usize {
        self.config().slices_per_modality
    }

    fn logits(&self, samples: &[SampleRecord]) -> Result<Vec<Array2<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(8) {
            let refs: Vec<&SampleRecord> = chunk.iter().collect();
            let b = make_batch(&refs, self.device())?;
            let z = self.forward(&b.dwi, &b.adc)?.detach().to_dtype(DType::F32)?;
            let flat: Vec<f32> = z.flatten_all()?.to_vec1()?;
            let hw = INPUT_HW * INPUT_HW;
            for s in flat.chunks(hw) {
                out.push(Array2::from_shape_vec((INPUT_HW, INPUT_HW), s.to_vec()).expect("logit plane"));
            }
        }
        Ok(out)
    }
}

/// Logit cut equivalent to `sigmoid(z) > threshold`.
pub fn logit_cut(threshold: f64) -> f64 {
    (threshold / (1.0 - threshold)).ln()
}

/// A case's prediction and ground truth in the cropped grid.
#[derive(Clone, Debug)]
pub struct CasePrediction {
    pub case_id: String,
    pub bbox: BoundingBox3D,
    pub spacing: [f32; 3],
    pub pred: Array3<u8>,
    pub gt: Array3<u8>,
}

impl CasePrediction {
    pub fn overlap(&self) -> Result<Overlap> {
        overlap(self.pred.view(), self.gt.view())
    }

    pub fn slice_overlaps(&self) -> Result<Vec<Overlap>> {
        (0..self.pred.dim().2)
            .map(|k| overlap(self.pred.index_axis(Axis(2), k), self.gt.index_axis(Axis(2), k)))
            .collect()
    }
}

/// Predicts every eligible center slice of `case` (no signal filter),
/// maps each mask back to the cropped slice size with nearest-neighbour,
/// and leaves slices without a full stack empty.
pub fn predict_case(
    model: &dyn SliceSegmenter,
    case: &CaseVolume,
    cfg: &PreprocessConfig,
    threshold: f64,
) -> Result<CasePrediction> {
    cfg.validate()?;
    let s = cfg.slices_per_modality;
    if model.slices_per_modality() != s {
        return Err(Error::InvalidConfig(format!(
            "model expects {} slices per modality, preprocessing produces {s}",
            model.slices_per_modality()
        )));
    }
    candidate_centers(case.depth(), s)?;
    let prepared = prepare_case(case)?;
    let samples = extract_samples(&prepared.case, s, None)?;
    let logits = model.logits(&samples)?;
    let [h, w, d] = prepared.case.shape();
    let cut = logit_cut(threshold) as f32;
    let mut pred = Array3::<u8>::zeros((h, w, d));
    for (sample, z) in samples.iter().zip(&logits) {
        let (zh, zw) = z.dim();
        let mut plane = pred.index_axis_mut(Axis(2), sample.center_slice);
        for r in 0..h {
            let sr = nearest_index(r, zh, h);
            for c in 0..w {
                plane[[r, c]] = u8::from(z[[sr, nearest_index(c, zw, w)]] > cut);
            }
        }
    }
    Ok(CasePrediction {
        case_id: case.case_id.clone(),
        bbox: prepared.bbox,
        spacing: case.spacing,
        pred,
        gt: prepared.case.mask,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub case_id: String,
    pub dice: f64,
    pub lesion_voxels_gt: u64,
    pub lesion_voxels_pred: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Human-readable model configuration, e.g. for the results table.
    pub model: String,
    pub split: Split,
    pub per_case: Vec<CaseScore>,
    pub mean_dice: f64,
    pub config_fingerprint: String,
    pub threshold: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).at(path)
    }
}

/// `sha256:<hex>` of the compact JSON encoding of `config`.
pub fn config_fingerprint(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    format!("sha256:{}", hex::encode(digest))
}

pub struct EvalOptions<'a> {
    pub preprocess: &'a PreprocessConfig,
    pub threshold: f64,
    /// Label for the table row.
    pub model_label: String,
    /// Configuration that identifies the evaluated run.
    pub fingerprint_source: serde_json::Value,
    /// When set, each case's prediction is written there as NIfTI.
    pub prediction_dir: Option<&'a Path>,
}

pub fn prediction_path(dir: &Path, case_id: &str) -> std::path::PathBuf {
    dir.join(format!("{case_id}_pred.nii.gz"))
}

/// Volume-level Dice for every case of `split`, in manifest order.
pub fn evaluate_split(
    model: &dyn SliceSegmenter,
    manifest: &SplitManifest,
    split: Split,
    dataset_root: &Path,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::EmptySamples("evaluation"));
    }
    if let Some(dir) = opts.prediction_dir {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let per_case = ids
        .par_iter()
        .map(|id| {
            let case = load_case(dataset_root, id)?;
            let p = predict_case(model, &case, opts.preprocess, opts.threshold)?;
            if let Some(dir) = opts.prediction_dir {
                write_nifti_u8(&prediction_path(dir, id), &p.pred, p.spacing)?;
            }
            let o = p.overlap()?;
            Ok(CaseScore {
                case_id: id.clone(),
                dice: o.dice(),
                lesion_voxels_gt: o.gt,
                lesion_voxels_pred: o.pred,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_dice = per_case.iter().map(|c| c.dice).sum::<f64>() / per_case.len() as f64;
    Ok(EvalReport {
        model: opts.model_label.clone(),
        split,
        per_case,
        mean_dice,
        config_fingerprint: config_fingerprint(&opts.fingerprint_source),
        threshold: opts.threshold,
    })
}

/// Model configuration vs mean Dice (%), one row per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    const HEAD: &str = "Model Configuration";
    const SCORE: &str = "Dice Score (%)";
    let width = reports.iter().map(|r| r.model.len()).chain([HEAD.len()]).max().unwrap_or(0);
    let rule = format!("{}\n", "-".repeat(width + 3 + SCORE.len()));
    let mut s = String::new();
    s.push_str(&rule);
    let _ = writeln!(s, "{HEAD:<width$}   {SCORE}");
    s.push_str(&rule);
    for r in reports {
        let _ = writeln!(s, "{:<width$}   {:>5.1}", r.model, 100.0 * r.mean_dice);
    }
    s.push_str(&rule);
    s
}
