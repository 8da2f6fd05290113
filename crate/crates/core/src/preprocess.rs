//! Per-case preprocessing: whole-volume min-max normalization, crop to the
//! DWI non-zero bounding box, axial slice stacking with boundary exclusion
//! and low-signal filtering, and resize to the network input size.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{write_atomic, Error, IoContext, Result};
use crate::nets::INPUT_HW;
use crate::volume_io::{load_case, CaseVolume, Split, SplitManifest};

/// Axis-aligned box, `lo` inclusive and `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox3D {
    pub fn full(shape: [usize; 3]) -> Self {
        Self {
            lo: [0; 3],
            hi: shape,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }
}

/// Maps intensities to `[0, 1]` with the volume's own min and max. A
/// constant volume maps to all zeros.
pub fn minmax_normalize(volume: &Array3<f32>) -> Result<Array3<f32>> {
    if volume.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidVolume("non-finite voxel in normalization input".into()));
    }
    let (min, max) = volume
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if volume.is_empty() || max <= min {
        return Ok(Array3::zeros(volume.raw_dim()));
    }
    let range = (max - min) as f64;
    Ok(volume.mapv(|v| (((v - min) as f64) / range).clamp(0.0, 1.0) as f32))
}

/// Tightest box containing every voxel with `|v| > 0`.
pub fn nonzero_bbox(dwi: &Array3<f32>) -> Result<BoundingBox3D> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((i, j, k), &v) in dwi.indexed_iter() {
        if v.abs() > 0.0 {
            any = true;
            for (axis, idx) in [i, j, k].into_iter().enumerate() {
                lo[axis] = lo[axis].min(idx);
                hi[axis] = hi[axis].max(idx + 1);
            }
        }
    }
    if !any {
        return Err(Error::EmptySignal);
    }
    Ok(BoundingBox3D { lo, hi })
}

/// Crops all three arrays of `case` with the same box.
pub fn crop_case(case: &CaseVolume, bbox: &BoundingBox3D) -> Result<CaseVolume> {
    let extent = case.shape();
    let valid = (0..3).all(|a| bbox.lo[a] < bbox.hi[a] && bbox.hi[a] <= extent[a]);
    if !valid {
        return Err(Error::BoxOutOfRange {
            lo: bbox.lo,
            hi: bbox.hi,
            extent,
        });
    }
    let sl = s![
        bbox.lo[0]..bbox.hi[0],
        bbox.lo[1]..bbox.hi[1],
        bbox.lo[2]..bbox.hi[2]
    ];
    Ok(CaseVolume {
        case_id: case.case_id.clone(),
        dwi: case.dwi.slice(sl).to_owned(),
        adc: case.adc.slice(sl).to_owned(),
        mask: case.mask.slice(sl).to_owned(),
        spacing: case.spacing,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub slices_per_modality: usize,
    /// A center slice is kept iff its mean normalized DWI intensity is
    /// strictly greater than this.
    pub signal_threshold: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            slices_per_modality: 3,
            signal_threshold: 0.01,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.slices_per_modality, 1 | 3) {
            return Err(Error::InvalidConfig(format!(
                "slices_per_modality must be 1 or 3, got {}",
                self.slices_per_modality
            )));
        }
        if !self.signal_threshold.is_finite() {
            return Err(Error::InvalidConfig("signal_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// A normalized and cropped case, with the box it was cropped by.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    pub case: CaseVolume,
    pub bbox: BoundingBox3D,
}

/// Normalizes DWI and ADC over the whole volume, then crops everything to
/// the non-zero box of the raw DWI.
pub fn prepare_case(case: &CaseVolume) -> Result<PreparedCase> {
    let bbox = nonzero_bbox(&case.dwi)?;
    let normalized = CaseVolume {
        case_id: case.case_id.clone(),
        dwi: minmax_normalize(&case.dwi)?,
        adc: minmax_normalize(&case.adc)?,
        mask: case.mask.clone(),
        spacing: case.spacing,
    };
    Ok(PreparedCase {
        case: crop_case(&normalized, &bbox)?,
        bbox,
    })
}

/// Center slice indices eligible for a stack of `slices` consecutive
/// slices: all of them for one slice, all but the first and last for three.
pub fn candidate_centers(depth: usize, slices: usize) -> Result<std::ops::Range<usize>> {
    if !matches!(slices, 1 | 3) {
        return Err(Error::InvalidConfig(format!(
            "slices_per_modality must be 1 or 3, got {slices}"
        )));
    }
    if depth < slices {
        return Err(Error::TooShallow { depth, slices });
    }
    let half = slices / 2;
    Ok(half..depth - half)
}

/// Half-pixel-centered source coordinate for output index `dst`.
#[inline]
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

pub fn resize_bilinear(img: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (ih, iw) = img.dim();
    let axis = |dst: usize, in_len: usize, out_len: usize| {
        let c = source_coord(dst, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, c - i0 as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|r| axis(r, ih, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|c| axis(c, iw, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let (y0, y1, ty) = rows[r];
        let (x0, x1, tx) = cols[c];
        let top = img[[y0, x0]] as f64 * (1.0 - tx) + img[[y0, x1]] as f64 * tx;
        let bottom = img[[y1, x0]] as f64 * (1.0 - tx) + img[[y1, x1]] as f64 * tx;
        (top * (1.0 - ty) + bottom * ty) as f32
    })
}

/// Nearest-neighbour index along one axis; upsampling followed by the
/// reverse downsampling returns every original index.
#[inline]
pub fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    (((dst as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

pub fn resize_nearest<T: Copy>(img: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (ih, iw) = img.dim();
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        img[[nearest_index(r, ih, out_h), nearest_index(c, iw, out_w)]]
    })
}

/// One training/inference sample: `slices` consecutive axial slices per
/// modality (H x W x S) and the center slice's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub case_id: String,
    /// Center slice index within the cropped volume.
    pub center_slice: usize,
    pub dwi_stack: Array3<f32>,
    pub adc_stack: Array3<f32>,
    pub target: Array2<u8>,
}

impl SampleRecord {
    pub fn slices(&self) -> usize {
        self.dwi_stack.dim().2
    }

    pub fn file_name(&self) -> String {
        format!("{}_{}.smp", self.case_id, self.center_slice)
    }
}

fn stack(vol: &Array3<f32>, center: usize, slices: usize, hw: usize) -> Array3<f32> {
    let half = slices / 2;
    let mut out = Array3::zeros((hw, hw, slices));
    for (n, k) in (center - half..=center + half).enumerate() {
        let resized = resize_bilinear(vol.index_axis(Axis(2), k), hw, hw);
        // Bilinear weights are convex but f32 rounding can overshoot.
        out.index_axis_mut(Axis(2), n)
            .assign(&resized.mapv(|v| v.clamp(0.0, 1.0)));
    }
    out
}

/// Builds samples from a normalized, cropped case. With `signal_threshold`
/// set, centers whose mean DWI intensity is not above it are dropped.
pub fn extract_samples(
    case: &CaseVolume,
    slices: usize,
    signal_threshold: Option<f32>,
) -> Result<Vec<SampleRecord>> {
    let centers = candidate_centers(case.depth(), slices)?;
    let mut out = Vec::with_capacity(centers.len());
    for c in centers {
        if let Some(t) = signal_threshold {
            let mean = case.dwi.index_axis(Axis(2), c).mean().unwrap_or(0.0);
            if !(mean > t) {
                continue;
            }
        }
        out.push(SampleRecord {
            case_id: case.case_id.clone(),
            center_slice: c,
            dwi_stack: stack(&case.dwi, c, slices, INPUT_HW),
            adc_stack: stack(&case.adc, c, slices, INPUT_HW),
            target: resize_nearest(case.mask.index_axis(Axis(2), c), INPUT_HW, INPUT_HW),
        });
    }
    Ok(out)
}

/// Full per-case pipeline used for training data.
pub fn preprocess_case(case: &CaseVolume, cfg: &PreprocessConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let prepared = prepare_case(case)?;
    extract_samples(
        &prepared.case,
        cfg.slices_per_modality,
        Some(cfg.signal_threshold),
    )
}

// ---------------------------------------------------------------------------
// Sample container
// ---------------------------------------------------------------------------

pub const SAMPLE_MAGIC: &[u8; 8] = b"STRKSEG1";

#[derive(Debug, Serialize, Deserialize)]
struct Shapes {
    dwi_stack: Vec<usize>,
    adc_stack: Vec<usize>,
    target: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleHeader {
    case_id: String,
    center_slice: usize,
    #[serde(rename = "S")]
    slices: usize,
    shapes: Shapes,
    dtype: String,
    order: String,
}

/// Container bytes: magic, u64 LE header length, JSON header, then
/// little-endian f32 data for dwi_stack, adc_stack and target.
pub fn encode_sample(record: &SampleRecord) -> Vec<u8> {
    let header = SampleHeader {
        case_id: record.case_id.clone(),
        center_slice: record.center_slice,
        slices: record.slices(),
        shapes: Shapes {
            dwi_stack: record.dwi_stack.shape().to_vec(),
            adc_stack: record.adc_stack.shape().to_vec(),
            target: record.target.shape().to_vec(),
        },
        dtype: "float32".into(),
        order: "row-major".into(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n = record.dwi_stack.len() + record.adc_stack.len() + record.target.len();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * n);
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    // `iter()` walks in logical (row-major) order regardless of layout.
    for v in record.dwi_stack.iter().chain(record.adc_stack.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in record.target.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<SampleRecord> {
    let corrupt = |offset: usize, reason: String| Error::CorruptSample {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 8 || &bytes[..8] != SAMPLE_MAGIC {
        return Err(corrupt(0, "bad magic".into()));
    }
    if bytes.len() < 16 {
        return Err(corrupt(8, "truncated header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(8, format!("header length {hlen} exceeds file size {}", bytes.len())))?;
    let header: SampleHeader = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| corrupt(16 + e.column().saturating_sub(1), format!("header: {e}")))?;
    if header.dtype != "float32" || header.order != "row-major" {
        return Err(corrupt(16, format!("unsupported dtype/order {}/{}", header.dtype, header.order)));
    }
    let s = header.slices;
    let sh = &header.shapes;
    let stack_ok = |v: &[usize]| v.len() == 3 && v[2] == s;
    if !stack_ok(&sh.dwi_stack) || sh.adc_stack != sh.dwi_stack || sh.target.len() != 2 || sh.target[..] != sh.dwi_stack[..2] {
        return Err(corrupt(16, format!("inconsistent shapes {sh:?} for S={s}")));
    }
    let n_stack: usize = sh.dwi_stack.iter().product();
    let n_target: usize = sh.target.iter().product();
    let expected = 4 * (2 * n_stack + n_target);
    let data = &bytes[data_start..];
    if data.len() != expected {
        return Err(corrupt(
            data_start + data.len().min(expected),
            format!("expected {expected} data bytes, found {}", data.len()),
        ));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let dims = (sh.dwi_stack[0], sh.dwi_stack[1], s);
    let dwi = Array3::from_shape_vec(dims, floats[..n_stack].to_vec()).expect("length checked");
    let adc = Array3::from_shape_vec(dims, floats[n_stack..2 * n_stack].to_vec()).expect("length checked");
    let mut target = Vec::with_capacity(n_target);
    for (i, &v) in floats[2 * n_stack..].iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(corrupt(
                data_start + 4 * (2 * n_stack + i),
                format!("non-binary target value {v}"),
            ));
        }
        target.push(v as u8);
    }
    let target = Array2::from_shape_vec((sh.target[0], sh.target[1]), target).expect("length checked");
    Ok(SampleRecord {
        case_id: header.case_id,
        center_slice: header.center_slice,
        dwi_stack: dwi,
        adc_stack: adc,
        target,
    })
}

/// Writes atomically (temp file + rename).
pub fn write_sample(record: &SampleRecord, path: &Path) -> Result<()> {
    write_atomic(path, &encode_sample(record))
}

pub fn read_sample(path: &Path) -> Result<SampleRecord> {
    let bytes = std::fs::read(path).at(path)?;
    decode_sample(&bytes, path)
}

/// Per-split listing of sample files, written as `index.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub split: Split,
    pub slices_per_modality: usize,
    pub samples: Vec<String>,
}

pub const INDEX_FILE: &str = "index.json";

/// Preprocesses every case of `split` and writes `<out>/<split>/*.smp` plus
/// the split index. Cases are processed in parallel; output order follows
/// the manifest (cases) and slice index.
pub fn preprocess_split(
    dataset_root: &Path,
    manifest: &SplitManifest,
    split: Split,
    cfg: &PreprocessConfig,
    out_root: &Path,
) -> Result<Vec<SampleRecord>> {
    let records = preprocess_ids(dataset_root, manifest.ids(split), cfg)?;
    let dir = out_root.join(split.as_str());
    std::fs::create_dir_all(&dir).at(&dir)?;
    let names: Vec<String> = records.iter().map(SampleRecord::file_name).collect();
    records
        .par_iter()
        .zip(&names)
        .try_for_each(|(r, name)| write_sample(r, &dir.join(name)))?;
    let index = SampleIndex {
        split,
        slices_per_modality: cfg.slices_per_modality,
        samples: names,
    };
    let mut json = serde_json::to_string_pretty(&index).expect("index serializes");
    json.push('\n');
    write_atomic(&dir.join(INDEX_FILE), json.as_bytes())?;
    Ok(records)
}

/// Loads and preprocesses cases in memory.
pub fn preprocess_ids(
    dataset_root: &Path,
    ids: &[String],
    cfg: &PreprocessConfig,
) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let per_case: Vec<Vec<SampleRecord>> = ids
        .par_iter()
        .map(|id| preprocess_case(&load_case(dataset_root, id)?, cfg))
        .collect::<Result<_>>()?;
    Ok(per_case.into_iter().flatten().collect())
}

/// Reads every sample listed in `<dir>/index.json`.
pub fn load_split_samples(dir: &Path) -> Result<(SampleIndex, Vec<SampleRecord>)> {
    let index_path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&index_path).at(&index_path)?;
    let index: SampleIndex = serde_json::from_str(&text).at(&index_path)?;
    let records = index
        .samples
        .par_iter()
        .map(|name| read_sample(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, records))
}

pub fn split_dir(out_root: &Path, split: Split) -> PathBuf {
    out_root.join(split.as_str())
}
