//! Volume ingestion, slicing into 2D training pairs, normalisation, dataset
//! splitting and synthetic phantom generation.

pub mod nifti;
pub mod phantom;
pub mod split;

use std::fmt;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use nifti::{read_nifti, write_nifti, Datatype};

pub use phantom::{make_phantom, make_phantom_cohort, PhantomConfig};
pub use split::{split_dataset, DatasetSplit, Role, SubjectVolumes};

/// Which sequence a volume holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sequence {
    T1,
    Fa,
    Label,
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sequence::T1 => "t1",
            Sequence::Fa => "fa",
            Sequence::Label => "label",
        })
    }
}

/// A 3D scalar image indexed `[x, y, z]` with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f64>,
    pub spacing: [f64; 3],
    pub subject: String,
    pub sequence: Sequence,
}

impl Volume {
    /// Validates spacing and, for label volumes, binarity.
    pub fn new(voxels: Array3<f64>, spacing: [f64; 3], subject: impl Into<String>, sequence: Sequence) -> Result<Self> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Invariant(format!("spacing {spacing:?} must be strictly positive")));
        }
        if sequence == Sequence::Label {
            if let Some(bad) = voxels.iter().find(|v| **v != 0.0 && **v != 1.0) {
                return Err(Error::Invariant(format!("label volume contains value {bad}")));
            }
        }
        Ok(Self {
            voxels,
            spacing,
            subject: subject.into(),
            sequence,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (x, y, z) = self.voxels.dim();
        [x, y, z]
    }

    /// Length of the volume diagonal in millimetres.
    pub fn diagonal_mm(&self) -> f64 {
        self.shape()
            .iter()
            .zip(self.spacing)
            .map(|(&n, s)| (n as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dtype = if self.sequence == Sequence::Label { Datatype::Uint8 } else { Datatype::Float32 };
        write_nifti(path, &self.voxels, self.spacing, dtype)
    }
}

/// Reads a NIfTI-1 volume. The subject id is taken from the file name
/// without its `.nii`/`.nii.gz` suffix; callers that know better overwrite it.
pub fn load_volume(path: &Path, sequence: Sequence) -> Result<Volume> {
    let img = read_nifti(path)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("volume");
    let subject = name.trim_end_matches(".gz").trim_end_matches(".nii").to_string();
    Volume::new(img.voxels, img.spacing, subject, sequence)
}

/// Per-volume min-max scaling to `[0, 1]`; a constant volume becomes zeros.
pub fn normalize(v: &Volume) -> Result<Volume> {
    if v.sequence == Sequence::Label {
        return Err(Error::Invariant("label volumes are not intensity-normalised".into()));
    }
    let (lo, hi) = v
        .voxels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    let voxels = if range > 0.0 && range.is_finite() {
        v.voxels.mapv(|x| (x - lo) / range)
    } else {
        Array3::zeros(v.voxels.raw_dim())
    };
    Ok(Volume { voxels, ..v.clone() })
}

/// One registered 2D slice pair with optional binary label.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub t1: Array2<f64>,
    pub fa: Array2<f64>,
    pub label: Option<Array2<f64>>,
    pub subject: String,
    pub slice_index: usize,
}

impl SlicePair {
    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.t1.dim()
    }

    /// Copy without the label, as seen by the unlabeled branch.
    pub fn unlabeled(&self) -> SlicePair {
        SlicePair { label: None, ..self.clone() }
    }
}

fn check_axis(axis: usize) -> Result<()> {
    if axis > 2 {
        return Err(Error::Config(format!("slice axis {axis} out of range 0..=2")));
    }
    Ok(())
}

/// One pair per index along `axis`, in ascending order.
pub fn slice_pairs(t1: &Volume, fa: &Volume, label: Option<&Volume>, axis: usize) -> Result<Vec<SlicePair>> {
    check_axis(axis)?;
    let mut others = vec![fa];
    others.extend(label);
    for other in others {
        if other.shape() != t1.shape() {
            return Err(Error::Pairing(format!(
                "{} {} has shape {:?}, t1 has {:?}",
                other.subject,
                other.sequence,
                other.shape(),
                t1.shape()
            )));
        }
        if other.spacing != t1.spacing {
            return Err(Error::Pairing(format!(
                "{} {} has spacing {:?}, t1 has {:?}",
                other.subject, other.sequence, other.spacing, t1.spacing
            )));
        }
    }
    let n = t1.shape()[axis];
    Ok((0..n)
        .map(|i| SlicePair {
            t1: t1.voxels.index_axis(Axis(axis), i).to_owned(),
            fa: fa.voxels.index_axis(Axis(axis), i).to_owned(),
            label: label.map(|l| l.voxels.index_axis(Axis(axis), i).to_owned()),
            subject: t1.subject.clone(),
            slice_index: i,
        })
        .collect())
}

/// Stacks 2D slices (keyed by index) back into a 3D array along `axis`.
/// Indices must cover `0..len` exactly once; input order does not matter.
pub fn stack_slices(slices: &[(usize, Array2<f64>)], axis: usize) -> Result<Array3<f64>> {
    check_axis(axis)?;
    if slices.is_empty() {
        return Err(Error::Assembly("no slices".into()));
    }
    let mut order: Vec<&(usize, Array2<f64>)> = slices.iter().collect();
    order.sort_by_key(|(i, _)| *i);
    let dim = order[0].1.dim();
    for (expected, (idx, s)) in order.iter().enumerate() {
        if *idx != expected {
            return Err(Error::Assembly(format!("slice index {expected} missing (found {idx})")));
        }
        if s.dim() != dim {
            return Err(Error::Assembly(format!("slice {idx} has shape {:?}, expected {dim:?}", s.dim())));
        }
    }
    let views: Vec<_> = order.iter().map(|(_, s)| s.view()).collect();
    ndarray::stack(Axis(axis), &views).map_err(|e| Error::Assembly(e.to_string()))
}

/// Interpolation used by [`resize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Linear,
}

/// Resamples to `shape`, keeping the physical field of view: spacing is
/// rescaled accordingly. Labels always use nearest neighbour.
pub fn resize(v: &Volume, shape: [usize; 3], interpolation: Interpolation) -> Result<Volume> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!("cannot resize to {shape:?}")));
    }
    let src = v.shape();
    let interpolation = if v.sequence == Sequence::Label { Interpolation::Nearest } else { interpolation };
    // Voxel-centre alignment: dst centre i maps to src coordinate (i + 0.5) * s/d - 0.5.
    let coord = |i: usize, ax: usize| -> f64 {
        let scale = src[ax] as f64 / shape[ax] as f64;
        ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src[ax] - 1) as f64)
    };
    let voxels = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(x, y, z)| {
        let c = [coord(x, 0), coord(y, 1), coord(z, 2)];
        match interpolation {
            Interpolation::Nearest => v.voxels[[c[0].round() as usize, c[1].round() as usize, c[2].round() as usize]],
            Interpolation::Linear => {
                let lo: Vec<usize> = c.iter().map(|t| t.floor() as usize).collect();
                let fr: Vec<f64> = c.iter().zip(&lo).map(|(t, l)| t - *l as f64).collect();
                let mut acc = 0.0;
                for corner in 0..8usize {
                    let mut w = 1.0;
                    let mut idx = [0usize; 3];
                    for ax in 0..3 {
                        let up = (corner >> ax) & 1 == 1;
                        idx[ax] = if up { (lo[ax] + 1).min(src[ax] - 1) } else { lo[ax] };
                        w *= if up { fr[ax] } else { 1.0 - fr[ax] };
                    }
                    if w != 0.0 {
                        acc += w * v.voxels[idx];
                    }
                }
                acc
            }
        }
    });
    let spacing = [0, 1, 2].map(|ax| v.spacing[ax] * src[ax] as f64 / shape[ax] as f64);
    Volume::new(voxels, spacing, v.subject.clone(), v.sequence)
}
