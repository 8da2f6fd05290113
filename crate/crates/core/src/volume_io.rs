//! Case discovery and NIfTI loading, plus seeded split manifests.
//!
//! On-disk layout: one directory per case, `<root>/<case_id>/`, holding
//! `<case_id>_dwi.nii.gz`, `<case_id>_adc.nii.gz` and `<case_id>_msk.nii.gz`
//! (plain `.nii` is accepted too).

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use crate::error::{write_atomic, Error, IoContext, Result};

/// One subject's aligned DWI, ADC and binary lesion mask, indexed `[i, j, k]`
/// with `k` the axial slice axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseVolume {
    pub case_id: String,
    pub dwi: Array3<f32>,
    pub adc: Array3<f32>,
    pub mask: Array3<u8>,
    /// Voxel spacing from the DWI header; carried along, never resampled on.
    pub spacing: [f32; 3],
}

impl CaseVolume {
    /// Checks the shape and label invariants.
    pub fn new(
        case_id: impl Into<String>,
        dwi: Array3<f32>,
        adc: Array3<f32>,
        mask: Array3<u8>,
    ) -> Result<Self> {
        let case_id = case_id.into();
        if dwi.shape() != adc.shape() || dwi.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                case: case_id,
                dwi: dwi.shape().to_vec(),
                adc: adc.shape().to_vec(),
                mask: mask.shape().to_vec(),
            });
        }
        if let Some(&v) = mask.iter().find(|&&v| v > 1) {
            return Err(Error::NonBinary(v as f32));
        }
        Ok(Self {
            case_id,
            dwi,
            adc,
            mask,
            spacing: [1.0; 3],
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.dwi.shape();
        [s[0], s[1], s[2]]
    }

    pub fn depth(&self) -> usize {
        self.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Dwi,
    Adc,
    Mask,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Dwi, Modality::Adc, Modality::Mask];

    fn suffix(self) -> &'static str {
        match self {
            Modality::Dwi => "dwi",
            Modality::Adc => "adc",
            Modality::Mask => "msk",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Modality::Dwi => "DWI",
            Modality::Adc => "ADC",
            Modality::Mask => "mask",
        }
    }
}

/// Canonical (gzip) path a modality file is written to.
pub fn modality_path(root: &Path, case_id: &str, m: Modality) -> PathBuf {
    root.join(case_id)
        .join(format!("{case_id}_{}.nii.gz", m.suffix()))
}

/// Locates the single file for one modality, accepting `.nii.gz` or `.nii`.
pub fn find_modality(root: &Path, case_id: &str, m: Modality) -> Result<PathBuf> {
    let dir = root.join(case_id);
    let found: Vec<PathBuf> = ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{case_id}_{}.{ext}", m.suffix())))
        .filter(|p| p.is_file())
        .collect();
    match found.len() {
        0 => Err(Error::MissingModality {
            case: case_id.to_string(),
            modality: m.label(),
        }),
        1 => Ok(found.into_iter().next().unwrap()),
        _ => Err(Error::InvalidVolume(format!(
            "case {case_id}: more than one {} file",
            m.label()
        ))),
    }
}

/// Lists every case directory under `root`, sorted, after checking that each
/// one holds all three modality files.
pub fn discover_cases(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(root).at(root)? {
        let entry = entry.at(root)?;
        if !entry.file_type().at(entry.path())?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        ids.push(name);
    }
    if ids.is_empty() {
        return Err(Error::NoCases(root.to_path_buf()));
    }
    ids.sort();
    for id in &ids {
        for m in Modality::ALL {
            find_modality(root, id, m)?;
        }
    }
    Ok(ids)
}

/// Reads a 3D NIfTI volume as f32 in `[i, j, k]` order and its voxel spacing.
pub fn read_nifti_volume(path: &Path) -> Result<(Array3<f32>, [f32; 3])> {
    let nifti_err = |source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err)?;
    let pixdim = obj.header().pixdim;
    let arr = obj
        .into_volume()
        .into_ndarray::<f32>()
        .map_err(nifti_err)?;
    // Drop trailing singleton dimensions (e.g. a 4D file with one frame).
    let mut arr = arr;
    while arr.ndim() > 3 && arr.shape()[arr.ndim() - 1] == 1 {
        let last = arr.ndim() - 1;
        arr = arr.index_axis_move(ndarray::Axis(last), 0);
    }
    let arr = arr.into_dimensionality::<Ix3>().map_err(|_| {
        Error::InvalidVolume(format!("{}: expected a 3D volume", path.display()))
    })?;
    Ok((
        arr.as_standard_layout().into_owned(),
        [pixdim[1], pixdim[2], pixdim[3]],
    ))
}

fn spacing_header(spacing: [f32; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    h
}

pub fn write_nifti_f32(path: &Path, vol: &Array3<f32>, spacing: [f32; 3]) -> Result<()> {
    let h = spacing_header(spacing);
    WriterOptions::new(path)
        .reference_header(&h)
        .write_nifti(vol)
        .map_err(|source| Error::Nifti {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_nifti_u8(path: &Path, vol: &Array3<u8>, spacing: [f32; 3]) -> Result<()> {
    let h = spacing_header(spacing);
    WriterOptions::new(path)
        .reference_header(&h)
        .write_nifti(vol)
        .map_err(|source| Error::Nifti {
            path: path.to_path_buf(),
            source,
        })
}

/// Loads and validates one case. Mask voxels are binarized with `v > 0.5`.
pub fn load_case(root: &Path, case_id: &str) -> Result<CaseVolume> {
    let (dwi, spacing) = read_nifti_volume(&find_modality(root, case_id, Modality::Dwi)?)?;
    let (adc, _) = read_nifti_volume(&find_modality(root, case_id, Modality::Adc)?)?;
    let (raw_mask, _) = read_nifti_volume(&find_modality(root, case_id, Modality::Mask)?)?;
    if dwi.shape() != adc.shape() || dwi.shape() != raw_mask.shape() {
        return Err(Error::ShapeMismatch {
            case: case_id.to_string(),
            dwi: dwi.shape().to_vec(),
            adc: adc.shape().to_vec(),
            mask: raw_mask.shape().to_vec(),
        });
    }
    for (name, vol) in [("DWI", &dwi), ("ADC", &adc), ("mask", &raw_mask)] {
        if vol.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                case: case_id.to_string(),
                modality: name,
            });
        }
    }
    if dwi.shape().iter().any(|&n| n < 3) {
        return Err(Error::InvalidVolume(format!(
            "case {case_id}: every dimension must be at least 3, got {:?}",
            dwi.shape()
        )));
    }
    let mask = raw_mask.mapv(|v| u8::from(v > 0.5));
    let mut case = CaseVolume::new(case_id, dwi, adc, mask)?;
    case.spacing = spacing;
    Ok(case)
}

/// Writes a case in the on-disk layout (used by the phantom generator).
pub fn write_case(root: &Path, case: &CaseVolume) -> Result<()> {
    let dir = root.join(&case.case_id);
    std::fs::create_dir_all(&dir).at(&dir)?;
    write_nifti_f32(
        &modality_path(root, &case.case_id, Modality::Dwi),
        &case.dwi,
        case.spacing,
    )?;
    write_nifti_f32(
        &modality_path(root, &case.case_id, Modality::Adc),
        &case.adc,
        case.spacing,
    )?;
    write_nifti_u8(
        &modality_path(root, &case.case_id, Modality::Mask),
        &case.mask,
        case.spacing,
    )
}

/// Which partition of a manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

/// Train/val/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// 80/20 train/test with 20% of the training share held out for
    /// validation.
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }

    /// Split sizes for `n` cases: train and val are `round(n * ratio)`, test
    /// takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidSplit(format!("ratios must be non-negative, got {parts:?}")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("ratios sum to {sum}, expected 1")));
        }
        let n_train = (n as f64 * self.train).round() as usize;
        let n_val = (n as f64 * self.val).round() as usize;
        let n_test = n
            .checked_sub(n_train + n_val)
            .ok_or_else(|| Error::InvalidSplit(format!("rounded sizes exceed {n} cases")))?;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::InvalidSplit(format!(
                "{n} cases give sizes ({n_train}, {n_val}, {n_test}); every split needs at least one case"
            )));
        }
        Ok((n_train, n_val, n_test))
    }
}

/// Deterministic case partition. Field order is the JSON key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub created_from: String,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train_ids,
            Split::Val => &self.val_ids,
            Split::Test => &self.test_ids,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Fingerprint of a case set, independent of input order.
pub fn case_set_fingerprint(case_ids: &[String]) -> String {
    let mut sorted: Vec<&str> = case_ids.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    for id in sorted {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    format!("sha256:{}", hex::encode(h.finalize()))
}

/// Shuffles the IDs with a seeded generator and partitions them by the
/// rounded ratios. Each list is stored sorted.
pub fn make_split(case_ids: &[String], seed: u64, ratios: SplitRatios) -> Result<SplitManifest> {
    if case_ids.len() < 3 {
        return Err(Error::InvalidSplit(format!(
            "need at least 3 cases, got {}",
            case_ids.len()
        )));
    }
    let mut ids: Vec<String> = case_ids.to_vec();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidSplit("duplicate case IDs".into()));
    }
    let (n_train, n_val, _) = ratios.sizes(ids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut train_ids = ids[..n_train].to_vec();
    let mut val_ids = ids[n_train..n_train + n_val].to_vec();
    let mut test_ids = ids[n_train + n_val..].to_vec();
    train_ids.sort();
    val_ids.sort();
    test_ids.sort();
    Ok(SplitManifest {
        seed,
        created_from: case_set_fingerprint(case_ids),
        train_ids,
        val_ids,
        test_ids,
    })
}

pub fn write_manifest(manifest: &SplitManifest, path: &Path) -> Result<()> {
    write_atomic(path, manifest.to_json().as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    let text = std::fs::read_to_string(path).at(path)?;
    let m: SplitManifest = serde_json::from_str(&text).at(path)?;
    let mut all: Vec<&String> = m.train_ids.iter().chain(&m.val_ids).chain(&m.test_ids).collect();
    let n = all.len();
    all.sort();
    all.dedup();
    if all.len() != n {
        return Err(Error::InvalidSplit(format!(
            "{}: split lists are not disjoint",
            path.display()
        )));
    }
    Ok(m)
}
