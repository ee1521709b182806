//! Synthetic two-sequence phantoms containing thin curved tubes.
//!
//! The tube is faint in the T1-like image (smooth, high-variance background)
//! and bright in the FA-like image, so fusing both sequences helps. Optional
//! distractor ridges appear only in the FA-like image and are not labelled.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::split::SubjectVolumes;
use super::{normalize, Sequence, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// `[x, y, z]` extent in voxels; `x` and `y` form the slicing plane.
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Tube radius in voxels.
    pub tube_radius: f64,
    pub n_tubes: usize,
    pub n_distractors: usize,
    pub t1_contrast: f64,
    pub fa_contrast: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [32, 32, 16],
            spacing: [1.25, 1.25, 1.25],
            tube_radius: 1.0,
            n_tubes: 2,
            n_distractors: 1,
            t1_contrast: 0.08,
            fa_contrast: 0.45,
            noise_std: 0.04,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shape[0] < 16 || self.shape[1] < 16 {
            return Err(Error::Config(format!("in-plane phantom extent {:?} must be at least 16", &self.shape[..2])));
        }
        if self.shape[2] == 0 {
            return Err(Error::Config("phantom needs at least one slice".into()));
        }
        let min_extent = *self.shape.iter().min().unwrap() as f64;
        if !(self.tube_radius > 0.0) || self.tube_radius >= min_extent / 2.0 {
            return Err(Error::Config(format!(
                "tube radius {} incompatible with extent {:?}",
                self.tube_radius, self.shape
            )));
        }
        if self.n_tubes == 0 {
            return Err(Error::Config("phantom needs at least one tube".into()));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("spacing {:?} must be positive", self.spacing)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Dense polyline approximation of a smooth centreline in voxel coordinates.
fn centreline<R: Rng>(rng: &mut R, shape: [usize; 3]) -> Vec<[f64; 3]> {
    let [nx, ny, nz] = shape.map(|s| s as f64);
    // Span either x or y end to end, wander in the other two axes.
    let along_x = rng.random_bool(0.5);
    let (na, nb) = if along_x { (nx, ny) } else { (ny, nx) };
    let cb = rng.random_range(0.3..0.7) * nb;
    let ab = rng.random_range(0.08..0.2) * nb;
    let fb = rng.random_range(0.5..1.5);
    let pb = rng.random_range(0.0..std::f64::consts::TAU);
    let cz = rng.random_range(0.35..0.65) * (nz - 1.0);
    let az = rng.random_range(0.15..0.35) * nz;
    let pz = rng.random_range(0.0..std::f64::consts::TAU);
    let steps = (na * 8.0) as usize;
    (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64;
            let a = t * (na - 1.0);
            let b = cb + ab * (std::f64::consts::TAU * fb * t + pb).sin();
            let z = cz + az * (std::f64::consts::PI * t + pz).sin();
            if along_x {
                [a, b, z]
            } else {
                [b, a, z]
            }
        })
        .collect()
}

fn distance_field(shape: [usize; 3], curves: &[Vec<[f64; 3]>], reach: f64) -> Array3<f64> {
    let mut dist = Array3::from_elem((shape[0], shape[1], shape[2]), f64::INFINITY);
    let r = reach.ceil() as isize;
    for curve in curves {
        for p in curve {
            let c = p.map(|v| v.round() as isize);
            for x in (c[0] - r).max(0)..=(c[0] + r).min(shape[0] as isize - 1) {
                for y in (c[1] - r).max(0)..=(c[1] + r).min(shape[1] as isize - 1) {
                    for z in (c[2] - r).max(0)..=(c[2] + r).min(shape[2] as isize - 1) {
                        let d = ((x as f64 - p[0]).powi(2) + (y as f64 - p[1]).powi(2) + (z as f64 - p[2]).powi(2)).sqrt();
                        let slot = &mut dist[[x as usize, y as usize, z as usize]];
                        if d < *slot {
                            *slot = d;
                        }
                    }
                }
            }
        }
    }
    dist
}

fn blobs<R: Rng>(rng: &mut R, shape: [usize; 3], count: usize, amp: (f64, f64), sigma: (f64, f64)) -> Array3<f64> {
    let params: Vec<([f64; 3], f64, f64)> = (0..count)
        .map(|_| {
            let centre = shape.map(|s| rng.random_range(0.0..s as f64));
            (centre, rng.random_range(amp.0..amp.1), rng.random_range(sigma.0..sigma.1))
        })
        .collect();
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(x, y, z)| {
        params
            .iter()
            .map(|(c, a, s)| {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum()
    })
}

/// Generates `(t1, fa, label)` for one synthetic subject; deterministic in
/// `config.seed`.
pub fn make_phantom(config: &PhantomConfig) -> Result<(Volume, Volume, Volume)> {
    make_phantom_named(config, &format!("phantom_{}", config.seed))
}

fn make_phantom_named(config: &PhantomConfig, subject: &str) -> Result<(Volume, Volume, Volume)> {
    config.validate()?;
    let shape = config.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let radius = config.tube_radius;

    let tubes: Vec<_> = (0..config.n_tubes).map(|_| centreline(&mut rng, shape)).collect();
    let distractors: Vec<_> = (0..config.n_distractors).map(|_| centreline(&mut rng, shape)).collect();
    let reach = 3.0 * radius + 1.0;
    let tube_dist = distance_field(shape, &tubes, reach);
    let distractor_dist = distance_field(shape, &distractors, reach);

    let label = tube_dist.mapv(|d| if d <= radius { 1.0 } else { 0.0 });
    let profile = |d: f64| (-(d / (1.2 * radius)).powi(2)).exp();

    let [nx, ny, nz] = shape.map(|s| s as f64);
    let gx = rng.random_range(-0.15..0.15);
    let gy = rng.random_range(-0.15..0.15);
    let t1_background = blobs(&mut rng, shape, 8, (0.15, 0.45), (3.0, 8.0));
    let fa_background = blobs(&mut rng, shape, 5, (0.04, 0.12), (2.0, 5.0));

    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let sigma = config.noise_std;
    let mut t1 = Array3::zeros((shape[0], shape[1], shape[2]));
    let mut fa = Array3::zeros((shape[0], shape[1], shape[2]));
    for ((x, y, z), v) in t1.indexed_iter_mut() {
        let ramp = 0.4 + gx * x as f64 / nx + gy * y as f64 / ny + 0.05 * z as f64 / nz;
        *v = ramp + t1_background[[x, y, z]] + config.t1_contrast * profile(tube_dist[[x, y, z]]);
    }
    for ((x, y, z), v) in fa.indexed_iter_mut() {
        *v = 0.1
            + fa_background[[x, y, z]]
            + config.fa_contrast * profile(tube_dist[[x, y, z]])
            + 0.8 * config.fa_contrast * profile(distractor_dist[[x, y, z]]);
    }
    if sigma > 0.0 {
        t1.mapv_inplace(|v| v + noise.sample(&mut rng));
        fa.mapv_inplace(|v| v + noise.sample(&mut rng));
    }

    let t1 = normalize(&Volume::new(t1, config.spacing, subject, Sequence::T1)?)?;
    let fa = normalize(&Volume::new(fa, config.spacing, subject, Sequence::Fa)?)?;
    let label = Volume::new(label, config.spacing, subject, Sequence::Label)?;
    Ok((t1, fa, label))
}

/// `n` subjects with per-subject geometry and mild per-subject variation in
/// contrast and noise, all derived from `seed`.
pub fn make_phantom_cohort(n: usize, base: &PhantomConfig, seed: u64) -> Result<Vec<SubjectVolumes>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let config = PhantomConfig {
                seed: rng.random(),
                t1_contrast: base.t1_contrast * rng.random_range(0.7..1.3),
                fa_contrast: base.fa_contrast * rng.random_range(0.7..1.3),
                noise_std: base.noise_std * rng.random_range(0.8..1.2),
                ..base.clone()
            };
            let subject = format!("phantom_{i:03}");
            let (t1, fa, label) = make_phantom_named(&config, &subject)?;
            Ok(SubjectVolumes {
                subject,
                t1,
                fa,
                label: Some(label),
            })
        })
        .collect()
}

/// Contrast-to-noise ratio of `image` inside `mask` against the rest:
/// `|mean_in - mean_out| / std_out`.
pub fn contrast_to_noise(image: &Array3<f64>, mask: &Array3<f64>) -> f64 {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (v, m) in image.iter().zip(mask.iter()) {
        if *m > 0.5 {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no < 2 {
        return 0.0;
    }
    let (mi, mo) = (si / ni as f64, so / no as f64);
    let var = image
        .iter()
        .zip(mask.iter())
        .filter(|(_, m)| **m <= 0.5)
        .map(|(v, _)| (v - mo).powi(2))
        .sum::<f64>()
        / (no - 1) as f64;
    (mi - mo).abs() / var.sqrt().max(f64::MIN_POSITIVE)
}
