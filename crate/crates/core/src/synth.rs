//! Synthetic multi-center federation.
//!
//! Each emulated center produces single-slice, two-channel phantom studies
//! (a DWI-like and an ADC-like image) with a binary lesion annotation. The
//! brain is a filled ellipse with smooth texture; lesions are a union of
//! Gaussian bumps thresholded so the lesion volume falls inside the requested
//! volume category. DWI lesion intensities are normalized to a brain mean of
//! 1.0; ADC values are in 1e-6 mm^2/s.
//!
//! Center heterogeneity comes from the category mix, lesion intensity
//! distributions, voxel spacing (which changes lesion size in voxels for a
//! given volume) and dataset size.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::metrics::{categorize, volume_ml, LesionCategory, Spacing, MEDIUM_MAX_ML, SMALL_MAX_ML};
use crate::seed::{self, tag, Rng};

pub const BRAIN_DWI_MEAN: f64 = 1.0;
pub const BRAIN_ADC_MEAN: f64 = 800.0;
pub const DEFAULT_ADC_LESION_MEAN: f64 = 620.0;
const DWI_NOISE_SD: f64 = 0.06;
const ADC_NOISE_SD: f64 = 30.0;
/// Lesion-level intensities are kept at least this far from the brain mean.
const MIN_DWI_CONTRAST: f64 = 0.3;
const MIN_ADC_CONTRAST: f64 = 80.0;

/// Brain ellipse radii as fractions of the image extent.
const BRAIN_RY: (f64, f64) = (0.39, 0.44);
const BRAIN_RX: (f64, f64) = (0.33, 0.38);
/// Upper bound on lesion size relative to the smallest possible brain.
const MAX_LESION_FRACTION: f64 = 0.45;
/// Smallest lesion drawn for the S category, in voxels.
const MIN_LESION_VOXELS: usize = 3;
/// Upper end of the L category volume range, in mL.
const LARGE_MAX_ML: f64 = 80.0;
const BISECTION_STEPS: usize = 80;
const LESION_ATTEMPTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterProfile {
    pub center_id: u32,
    pub is_large: bool,
    pub n_train: usize,
    pub n_test: usize,
    /// Probabilities over N, S, M, L.
    pub category_mix: [f64; 4],
    /// (mean, sd) of the lesion DWI level, brain-normalized.
    pub dwi_lesion_intensity: (f64, f64),
    /// (mean, sd) of the lesion ADC level in 1e-6 mm^2/s.
    pub adc_lesion_intensity: (f64, f64),
    pub voxel_spacing: Spacing,
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl CenterProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidProfile {
            center_id: self.center_id,
            reason,
        };
        if !self.is_large && self.n_train > 0 {
            return Err(bad("limited centers cannot hold training studies".into()));
        }
        if self.is_large && self.n_train == 0 {
            return Err(bad("large centers need at least one training study".into()));
        }
        if self.category_mix.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(bad(format!(
                "category mix {:?} has negative entries",
                self.category_mix
            )));
        }
        let total: f64 = self.category_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad(format!("category mix sums to {total}")));
        }
        if !self.voxel_spacing.is_valid() {
            return Err(bad(format!(
                "spacing {:?} must be positive",
                self.voxel_spacing
            )));
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return Err(bad(format!("image size {:?} below 8x8", self.image_size)));
        }
        let (dm, ds) = self.dwi_lesion_intensity;
        let (am, asd) = self.adc_lesion_intensity;
        if ![dm, ds, am, asd].iter().all(|v| v.is_finite()) || ds < 0.0 || asd < 0.0 {
            return Err(bad("lesion intensity distributions must be finite".into()));
        }
        for category in LesionCategory::ALL {
            if category != LesionCategory::N && self.category_mix[category.index()] > 0.0 {
                self.lesion_voxel_range(category)?;
            }
        }
        Ok(())
    }

    /// Brain voxel count of the smallest ellipse this profile can draw.
    fn min_brain_voxels(&self) -> f64 {
        let (rows, cols) = self.image_size;
        std::f64::consts::PI * BRAIN_RY.0 * rows as f64 * BRAIN_RX.0 * cols as f64
    }

    /// Inclusive voxel-count range that lands a lesion in `category`.
    pub fn lesion_voxel_range(&self, category: LesionCategory) -> Result<(usize, usize)> {
        let voxel_ml = self.voxel_spacing.voxel_ml();
        let cap = (MAX_LESION_FRACTION * self.min_brain_voxels()).floor() as usize;
        // largest count whose volume stays <= limit
        let at_most = |limit: f64| {
            let mut n = (limit / voxel_ml).floor() as usize;
            while n > 0 && n as f64 * voxel_ml > limit {
                n -= 1;
            }
            while (n + 1) as f64 * voxel_ml <= limit {
                n += 1;
            }
            n
        };
        let (lo, hi) = match category {
            LesionCategory::N => (0, 0),
            LesionCategory::S => {
                let hi = at_most(SMALL_MAX_ML);
                (MIN_LESION_VOXELS.min(hi).max(1), hi)
            }
            LesionCategory::M => (at_most(SMALL_MAX_ML) + 1, at_most(MEDIUM_MAX_ML)),
            LesionCategory::L => (at_most(MEDIUM_MAX_ML) + 1, at_most(LARGE_MAX_ML)),
        };
        let hi = hi.min(cap);
        if category != LesionCategory::N && (lo > hi || hi == 0) {
            return Err(Error::InfeasibleLesion {
                center_id: self.center_id,
                category: category.to_string(),
                detail: format!(
                    "{lo}..{hi} voxels at {voxel_ml:.4} mL/voxel within a {}x{} image",
                    self.image_size.0, self.image_size.1
                ),
            });
        }
        Ok((lo, hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomStudy {
    pub dwi: Grid<f64>,
    pub adc: Grid<f64>,
    pub gt_mask: Mask,
    pub spacing: Spacing,
    pub patient_id: String,
    pub center_id: u32,
    pub category: LesionCategory,
}

impl PhantomStudy {
    pub fn dims(&self) -> (usize, usize) {
        self.dwi.dims()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        hash_study(&mut h, self);
        hex::encode(h.finalize())
    }
}

fn hash_study(h: &mut Sha256, s: &PhantomStudy) {
    h.update(s.patient_id.as_bytes());
    h.update(s.center_id.to_le_bytes());
    h.update([s.category.index() as u8]);
    for v in [s.spacing.x, s.spacing.y, s.spacing.slice] {
        h.update(v.to_le_bytes());
    }
    h.update((s.dims().0 as u64).to_le_bytes());
    h.update((s.dims().1 as u64).to_le_bytes());
    for v in s.dwi.as_slice().iter().chain(s.adc.as_slice()) {
        h.update(v.to_le_bytes());
    }
    for &m in s.gt_mask.as_slice() {
        h.update([m as u8]);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterDataset {
    pub profile: CenterProfile,
    pub train: Vec<PhantomStudy>,
    pub test: Vec<PhantomStudy>,
}

impl CenterDataset {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.profile.center_id.to_le_bytes());
        h.update((self.train.len() as u64).to_le_bytes());
        for s in self.train.iter().chain(&self.test) {
            hash_study(&mut h, s);
        }
        hex::encode(h.finalize())
    }
}

pub fn sample_category(mix: &[f64; 4], rng: &mut Rng) -> LesionCategory {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for category in LesionCategory::ALL {
        acc += mix[category.index()];
        if u < acc {
            return category;
        }
    }
    // rounding slack: last category with positive mass
    *LesionCategory::ALL
        .iter()
        .rev()
        .find(|c| mix[c.index()] > 0.0)
        .unwrap_or(&LesionCategory::N)
}

struct Bump {
    r: f64,
    c: f64,
    sigma: f64,
    amplitude: f64,
}

fn bump_field(rows: usize, cols: usize, bumps: &[Bump]) -> Grid<f64> {
    Grid::from_fn(rows, cols, |r, c| {
        bumps
            .iter()
            .map(|b| {
                let d2 = (r as f64 - b.r).powi(2) + (c as f64 - b.c).powi(2);
                b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
            })
            .sum()
    })
}

fn count_above(field: &Grid<f64>, brain: &Mask, t: f64) -> usize {
    field
        .as_slice()
        .iter()
        .zip(brain.as_slice())
        .filter(|(&f, &b)| b && f > t)
        .count()
}

/// Bisects the threshold so that `field > t` inside the brain covers as close
/// to `target` voxels as possible without going under.
fn threshold_for(field: &Grid<f64>, brain: &Mask, target: usize) -> f64 {
    let mut lo = 0.0;
    let mut hi = field
        .as_slice()
        .iter()
        .zip(brain.as_slice())
        .filter(|(_, &b)| b)
        .map(|(&f, _)| f)
        .fold(0.0, f64::max);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if count_above(field, brain, mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Draws one phantom study for `category`.
pub fn generate_phantom(
    profile: &CenterProfile,
    rng: &mut Rng,
    category: LesionCategory,
    patient_id: String,
) -> Result<PhantomStudy> {
    let (rows, cols) = profile.image_size;
    let (rf, cf) = (rows as f64, cols as f64);

    let cy = (rf - 1.0) / 2.0 + rng.random_range(-1.0..=1.0);
    let cx = (cf - 1.0) / 2.0 + rng.random_range(-1.0..=1.0);
    let ry = rf * rng.random_range(BRAIN_RY.0..=BRAIN_RY.1);
    let rx = cf * rng.random_range(BRAIN_RX.0..=BRAIN_RX.1);
    let radial =
        |r: usize, c: usize| ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2);
    let brain: Mask = Grid::from_fn(rows, cols, |r, c| radial(r, c) <= 1.0);

    // low-frequency texture shared by both channels
    let texture_bumps: Vec<Bump> = (0..3)
        .map(|_| Bump {
            r: rng.random_range(0.0..rf),
            c: rng.random_range(0.0..cf),
            sigma: rng.random_range(0.15..0.3) * rf,
            amplitude: rng.random_range(-1.0..1.0),
        })
        .collect();
    let texture = bump_field(rows, cols, &texture_bumps);

    let gt_mask = if category == LesionCategory::N {
        Grid::filled(rows, cols, false)
    } else {
        lesion_mask(profile, rng, category, &brain, radial)?
    };

    let dwi_noise = Normal::new(0.0, DWI_NOISE_SD).expect("valid sd");
    let adc_noise = Normal::new(0.0, ADC_NOISE_SD).expect("valid sd");
    let (dm, ds) = profile.dwi_lesion_intensity;
    let (am, asd) = profile.adc_lesion_intensity;
    let lesion_dwi = (dm + ds * standard_normal(rng)).max(BRAIN_DWI_MEAN + MIN_DWI_CONTRAST);
    let lesion_adc = (am + asd * standard_normal(rng)).min(BRAIN_ADC_MEAN - MIN_ADC_CONTRAST);

    let mut dwi = Grid::filled(rows, cols, 0.0);
    let mut adc = Grid::filled(rows, cols, 0.0);
    for r in 0..rows {
        for c in 0..cols {
            // noise is drawn for every voxel so streams do not depend on the mask
            let nd = dwi_noise.sample(rng);
            let na = adc_noise.sample(rng);
            if !*brain.get(r, c) {
                continue;
            }
            let t = *texture.get(r, c);
            let (d, a) = if *gt_mask.get(r, c) {
                (lesion_dwi + 0.05 * t, lesion_adc + 20.0 * t)
            } else {
                (BRAIN_DWI_MEAN + 0.08 * t, BRAIN_ADC_MEAN + 40.0 * t)
            };
            dwi.set(r, c, d + nd);
            adc.set(r, c, (a + na).max(0.0));
        }
    }

    Ok(PhantomStudy {
        dwi,
        adc,
        gt_mask,
        spacing: profile.voxel_spacing,
        patient_id,
        center_id: profile.center_id,
        category,
    })
}

fn standard_normal(rng: &mut Rng) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

fn lesion_mask(
    profile: &CenterProfile,
    rng: &mut Rng,
    category: LesionCategory,
    brain: &Mask,
    radial: impl Fn(usize, usize) -> f64,
) -> Result<Mask> {
    let (rows, cols) = profile.image_size;
    let (lo, hi) = profile.lesion_voxel_range(category)?;
    let target = rng.random_range(lo..=hi);

    // bump centres sit well inside the brain
    let interior: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| radial(r, c) <= 0.5)
        .collect();

    for _ in 0..LESION_ATTEMPTS {
        let n_bumps = match rng.random_range(0..10) {
            0..=5 => 1,
            6..=8 => 2,
            _ => 3,
        };
        let base_sigma = (target as f64 / (n_bumps as f64 * std::f64::consts::PI)).sqrt();
        let bumps: Vec<Bump> = (0..n_bumps)
            .map(|_| {
                let (r, c) = interior[rng.random_range(0..interior.len())];
                Bump {
                    r: r as f64 + rng.random_range(-0.5..0.5),
                    c: c as f64 + rng.random_range(-0.5..0.5),
                    sigma: (base_sigma * rng.random_range(0.8..1.3)).max(0.7),
                    amplitude: rng.random_range(0.6..1.0),
                }
            })
            .collect();
        let field = bump_field(rows, cols, &bumps);
        let t = threshold_for(&field, brain, target);
        let mask = Grid::from_fn(rows, cols, |r, c| *brain.get(r, c) && *field.get(r, c) > t);
        if categorize(volume_ml(&mask, profile.voxel_spacing)) == category {
            return Ok(mask);
        }
    }
    Err(Error::InfeasibleLesion {
        center_id: profile.center_id,
        category: category.to_string(),
        detail: format!("a {target}-voxel lesion after {LESION_ATTEMPTS} attempts"),
    })
}

/// Generates a center's studies and splits them into train and test.
///
/// Study `k` uses the stream `derive(profile.seed, [PHANTOM, k])`; the split
/// uses `derive(profile.seed, [SPLIT])`.
pub fn generate_center(profile: &CenterProfile) -> Result<CenterDataset> {
    profile.validate()?;
    let total = profile.n_train + profile.n_test;
    let mut studies = Vec::with_capacity(total);
    for k in 0..total {
        let mut rng = seed::rng(seed::derive(profile.seed, &[tag::PHANTOM, k as u64]));
        let category = sample_category(&profile.category_mix, &mut rng);
        let id = format!("c{:02}-p{:04}", profile.center_id, k);
        studies.push(generate_phantom(profile, &mut rng, category, id)?);
    }
    let (train, test) = if profile.n_train == 0 {
        (Vec::new(), studies)
    } else if profile.n_test == 0 {
        (studies, Vec::new())
    } else {
        let fraction = profile.n_train as f64 / total as f64;
        stratified_split(studies, fraction, seed::derive(profile.seed, &[tag::SPLIT]))?
    };
    debug_assert_eq!(train.len(), profile.n_train);
    Ok(CenterDataset {
        profile: profile.clone(),
        train,
        test,
    })
}

/// Per-category stratified split.
///
/// The train side receives `round(fraction * n)` studies in total; each
/// category contributes `floor(fraction * n_c)` plus at most one more, the
/// extras going to the categories with the largest fractional remainders.
/// Both halves keep the input order.
pub fn stratified_split(
    studies: Vec<PhantomStudy>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<PhantomStudy>, Vec<PhantomStudy>)> {
    if studies.is_empty() {
        return Err(Error::EmptySplit);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut groups: [Vec<usize>; 4] = Default::default();
    for (i, s) in studies.iter().enumerate() {
        groups[s.category.index()].push(i);
    }
    let target = ((train_fraction * studies.len() as f64).round() as usize).min(studies.len());
    let mut quota = [0usize; 4];
    let mut remainders = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        let exact = train_fraction * g.len() as f64;
        quota[k] = exact.floor() as usize;
        if !g.is_empty() {
            remainders.push((exact - exact.floor(), k));
        }
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &(_, k) in &remainders {
        if missing == 0 {
            break;
        }
        if quota[k] < groups[k].len() {
            quota[k] += 1;
            missing -= 1;
        }
    }

    let mut in_train = vec![false; studies.len()];
    for (k, g) in groups.iter_mut().enumerate() {
        g.shuffle(&mut rng);
        for &i in &g[..quota[k]] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in studies.into_iter().zip(in_train) {
        if t {
            train.push(s);
        } else {
            test.push(s);
        }
    }
    Ok((train, test))
}

/// One row of the reference center table: id, large flag, native in-plane
/// spacing, slice thickness, train and test patients.
struct ReferenceCenter {
    id: u32,
    large: bool,
    in_plane: f64,
    slice: f64,
    train: usize,
    test: usize,
    mix: [f64; 4],
    dwi: (f64, f64),
    adc: (f64, f64),
}

#[rustfmt::skip]
const REFERENCE_CENTERS: [ReferenceCenter; 14] = [
    ReferenceCenter { id: 1, large: true, in_plane: 0.93, slice: 6.00, train: 136, test: 36, mix: [0.10, 0.55, 0.25, 0.10], dwi: (2.0, 0.25), adc: (620.0, 45.0) },
    ReferenceCenter { id: 2, large: false, in_plane: 0.92, slice: 6.13, train: 0, test: 8, mix: [0.10, 0.40, 0.30, 0.20], dwi: (1.9, 0.25), adc: (625.0, 45.0) },
    ReferenceCenter { id: 3, large: false, in_plane: 0.98, slice: 5.94, train: 0, test: 16, mix: [0.10, 0.40, 0.30, 0.20], dwi: (2.1, 0.30), adc: (615.0, 50.0) },
    ReferenceCenter { id: 4, large: true, in_plane: 0.89, slice: 6.00, train: 195, test: 50, mix: [0.10, 0.40, 0.30, 0.20], dwi: (1.8, 0.20), adc: (630.0, 40.0) },
    ReferenceCenter { id: 5, large: true, in_plane: 1.04, slice: 6.00, train: 96, test: 25, mix: [0.10, 0.40, 0.30, 0.20], dwi: (2.3, 0.30), adc: (610.0, 45.0) },
    ReferenceCenter { id: 6, large: true, in_plane: 1.04, slice: 6.00, train: 635, test: 161, mix: [0.10, 0.55, 0.25, 0.10], dwi: (2.0, 0.25), adc: (620.0, 45.0) },
    ReferenceCenter { id: 7, large: true, in_plane: 0.59, slice: 6.00, train: 140, test: 36, mix: [0.10, 0.35, 0.35, 0.20], dwi: (2.4, 0.30), adc: (615.0, 50.0) },
    ReferenceCenter { id: 8, large: true, in_plane: 0.96, slice: 6.00, train: 70, test: 19, mix: [0.15, 0.35, 0.30, 0.20], dwi: (1.7, 0.20), adc: (635.0, 40.0) },
    ReferenceCenter { id: 9, large: false, in_plane: 0.90, slice: 6.00, train: 0, test: 8, mix: [0.10, 0.40, 0.30, 0.20], dwi: (1.8, 0.25), adc: (625.0, 45.0) },
    ReferenceCenter { id: 10, large: true, in_plane: 1.99, slice: 2.03, train: 157, test: 41, mix: [0.05, 0.60, 0.25, 0.10], dwi: (2.2, 0.35), adc: (620.0, 55.0) },
    ReferenceCenter { id: 11, large: true, in_plane: 1.51, slice: 4.80, train: 41, test: 11, mix: [0.05, 0.20, 0.55, 0.20], dwi: (2.5, 0.35), adc: (610.0, 55.0) },
    ReferenceCenter { id: 12, large: true, in_plane: 0.43, slice: 2.00, train: 84, test: 24, mix: [0.10, 0.45, 0.45, 0.00], dwi: (1.9, 0.30), adc: (625.0, 50.0) },
    ReferenceCenter { id: 13, large: true, in_plane: 0.35, slice: 3.98, train: 31, test: 10, mix: [0.10, 0.35, 0.35, 0.20], dwi: (2.1, 0.30), adc: (620.0, 50.0) },
    ReferenceCenter { id: 14, large: false, in_plane: 0.49, slice: 0.80, train: 0, test: 1, mix: [0.00, 0.00, 1.00, 0.00], dwi: (2.2, 0.30), adc: (620.0, 50.0) },
];

/// Nominal field of view used to infer each center's native matrix size.
const NOMINAL_FOV_MM: f64 = 240.0;

/// Emulated in-plane spacing of a `size`-pixel phantom taken from a scan with
/// `native` mm pixels: the native matrix is the power of two nearest to
/// `NOMINAL_FOV_MM / native`, and the phantom downsamples it to `size`.
pub fn emulated_in_plane_spacing(native: f64, size: usize) -> f64 {
    let matrix = 2f64.powf((NOMINAL_FOV_MM / native).log2().round());
    native * matrix / size as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationOptions {
    /// Multiplier applied to the reference patient counts of large centers.
    pub size_scale: f64,
    pub image_size: (usize, usize),
    pub master_seed: u64,
}

impl Default for FederationOptions {
    fn default() -> Self {
        Self {
            size_scale: 0.1,
            image_size: (32, 32),
            master_seed: 2024,
        }
    }
}

/// The 14-center federation with the default options.
pub fn default_federation() -> Vec<CenterProfile> {
    federation(&FederationOptions::default())
}

/// Ten large and four limited centers. Large-center patient counts are the
/// reference counts times `size_scale` (at least one each); limited centers
/// keep their reference test counts. Center seeds come from
/// `derive(master_seed, [CENTER, center_id])`.
pub fn federation(opts: &FederationOptions) -> Vec<CenterProfile> {
    let scaled = |n: usize| ((n as f64 * opts.size_scale).round() as usize).max(1);
    REFERENCE_CENTERS
        .iter()
        .map(|rc| {
            let xy = emulated_in_plane_spacing(rc.in_plane, opts.image_size.1);
            CenterProfile {
                center_id: rc.id,
                is_large: rc.large,
                n_train: if rc.large { scaled(rc.train) } else { 0 },
                n_test: if rc.large { scaled(rc.test) } else { rc.test },
                category_mix: rc.mix,
                dwi_lesion_intensity: rc.dwi,
                adc_lesion_intensity: rc.adc,
                voxel_spacing: Spacing::new(xy, xy, rc.slice),
                image_size: opts.image_size,
                seed: seed::derive(opts.master_seed, &[tag::CENTER, rc.id as u64]),
            }
        })
        .collect()
}
