//! Synthetic paired DWI/ADC/mask volumes.
//!
//! The background is a super-Gaussian "brain" that is exactly zero outside
//! an axis-aligned ellipsoidal support. Lesions are axis-aligned ellipsoids
//! inside the support, bright on DWI and dark on ADC, with optional
//! Gaussian noise inside the support. Every case is a pure function of
//! `(seed, index)`.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume_io::{write_case, CaseVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub n_cases: usize,
    pub shape: [usize; 3],
    /// Inclusive range of lesions per case.
    pub lesion_count_range: (usize, usize),
    /// Inclusive range of lesion semi-axis lengths, in voxels.
    pub lesion_radius_range: (f64, f64),
    pub dwi_lesion_contrast: f32,
    pub adc_lesion_contrast: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_cases: 25,
            shape: [64, 64, 12],
            lesion_count_range: (1, 3),
            lesion_radius_range: (3.0, 8.0),
            dwi_lesion_contrast: 0.6,
            adc_lesion_contrast: -0.4,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("phantom: {m}")));
        if self.shape[0] < 16 || self.shape[1] < 16 || self.shape[2] < 8 {
            return bad(format!("shape must be at least (16, 16, 8), got {:?}", self.shape));
        }
        let (cmin, cmax) = self.lesion_count_range;
        if cmin > cmax {
            return bad(format!("empty lesion count range {cmin}..={cmax}"));
        }
        let (rmin, rmax) = self.lesion_radius_range;
        if !(rmin >= 1.0 && rmin <= rmax && rmax.is_finite()) {
            return bad(format!("lesion radius range must satisfy 1 <= min <= max, got {rmin}..={rmax}"));
        }
        if !(self.dwi_lesion_contrast > 0.0) {
            return bad("dwi_lesion_contrast must be positive".into());
        }
        if !(self.adc_lesion_contrast < 0.0) {
            return bad("adc_lesion_contrast must be negative".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    fn support(&self) -> Ellipsoid {
        let c = |n: usize| (n as f64 - 1.0) / 2.0;
        let a = |n: usize| 0.45 * n as f64;
        Ellipsoid {
            center: [c(self.shape[0]), c(self.shape[1]), c(self.shape[2])],
            radii: [a(self.shape[0]), a(self.shape[1]), a(self.shape[2])],
        }
    }
}

/// Axis-aligned ellipsoid over voxel-center coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    /// Normalized squared radius of voxel `(i, j, k)`.
    pub fn level(&self, i: usize, j: usize, k: usize) -> f64 {
        [i, j, k]
            .iter()
            .enumerate()
            .map(|(a, &x)| ((x as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        self.level(i, j, k) <= 1.0
    }

    /// Voxel index range along `axis` that can hold members, clipped to `len`.
    fn span(&self, axis: usize, len: usize) -> std::ops::Range<usize> {
        let lo = (self.center[axis] - self.radii[axis]).ceil().max(0.0) as usize;
        let hi = ((self.center[axis] + self.radii[axis]).floor() as isize + 1).clamp(0, len as isize) as usize;
        lo..hi.max(lo)
    }

    fn voxels(&self, shape: [usize; 3]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (ri, rj, rk) = (self.span(0, shape[0]), self.span(1, shape[1]), self.span(2, shape[2]));
        ri.flat_map(move |i| {
            let rk = rk.clone();
            rj.clone().flat_map(move |j| rk.clone().map(move |k| (i, j, k)))
        })
        .filter(|&(i, j, k)| self.contains(i, j, k))
    }
}

/// A generated case together with its ground-truth lesion geometry.
#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub volume: CaseVolume,
    pub support: Ellipsoid,
    pub lesions: Vec<Ellipsoid>,
}

pub fn case_id(index: usize) -> String {
    format!("phantom{index:03}")
}

/// Super-Gaussian profile; `level` is the normalized squared radius.
fn profile(level: f64) -> f64 {
    (-(level / 0.6).powi(3)).exp()
}

const PLACEMENT_ATTEMPTS: usize = 200;

pub fn generate_case_detailed(spec: &PhantomSpec, index: usize) -> Result<PhantomCase> {
    spec.validate()?;
    if index >= spec.n_cases {
        return Err(Error::InvalidConfig(format!(
            "phantom index {index} out of range for {} cases",
            spec.n_cases
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let shape = spec.shape;
    let support = spec.support();

    let (cmin, cmax) = spec.lesion_count_range;
    let n_lesions = rng.random_range(cmin..=cmax);
    let (rmin, rmax) = spec.lesion_radius_range;
    let mut lesions = Vec::with_capacity(n_lesions);
    for _ in 0..n_lesions {
        let radii: [f64; 3] = std::array::from_fn(|a| {
            rng.random_range(rmin..=rmax).min(0.45 * support.radii[a]).max(1.0)
        });
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let center: [f64; 3] = std::array::from_fn(|a| {
                let reach = support.radii[a] - radii[a];
                support.center[a] + rng.random_range(-reach..=reach)
            });
            let e = Ellipsoid { center, radii };
            if e.voxels(shape).all(|(i, j, k)| support.level(i, j, k) < 1.0) {
                placed = Some(e);
                break;
            }
        }
        // Unplaceable lesions are skipped rather than clipped, so each kept
        // lesion is complete.
        if let Some(e) = placed {
            lesions.push(e);
        }
    }

    let mut dwi = Array3::<f32>::zeros(shape);
    let mut adc = Array3::<f32>::zeros(shape);
    let mut mask = Array3::<u8>::zeros(shape);
    for e in &lesions {
        for (i, j, k) in e.voxels(shape) {
            mask[[i, j, k]] = 1;
        }
    }
    let noise = Normal::new(0.0f64, spec.noise_sigma as f64).expect("sigma validated");
    for ((i, j, k), d) in dwi.indexed_iter_mut() {
        let level = support.level(i, j, k);
        if level >= 1.0 {
            continue;
        }
        let p = profile(level);
        let lesion = mask[[i, j, k]] == 1;
        let mut dv = 0.3 + 0.4 * p;
        let mut av = 0.5 + 0.3 * p;
        if lesion {
            dv += spec.dwi_lesion_contrast as f64;
            av += spec.adc_lesion_contrast as f64;
        }
        if spec.noise_sigma > 0.0 {
            dv += noise.sample(&mut rng);
            av += noise.sample(&mut rng);
        }
        *d = dv.max(0.0) as f32;
        adc[[i, j, k]] = av.max(0.0) as f32;
    }

    Ok(PhantomCase {
        volume: CaseVolume::new(case_id(index), dwi, adc, mask)?,
        support,
        lesions,
    })
}

pub fn generate_case(spec: &PhantomSpec, index: usize) -> Result<CaseVolume> {
    Ok(generate_case_detailed(spec, index)?.volume)
}

/// Writes all `spec.n_cases` cases under `root` in the on-disk case layout.
pub fn write_dataset(spec: &PhantomSpec, root: &Path) -> Result<Vec<String>> {
    spec.validate()?;
    (0..spec.n_cases)
        .into_par_iter()
        .map(|i| {
            let case = generate_case(spec, i)?;
            write_case(root, &case)?;
            Ok(case.case_id)
        })
        .collect()
}
