//! Volumetric overlap and surface-distance metrics plus paired statistics.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{stack_slices, Sequence, Volume};
use crate::error::{Error, Result};

/// Assembles binary slice predictions into a label volume, sorted by index.
pub fn stack_to_volume(
    predictions: &[(usize, Array2<f64>)],
    spacing: [f64; 3],
    axis: usize,
    subject: &str,
) -> Result<Volume> {
    let voxels = stack_slices(predictions, axis)?;
    Volume::new(voxels, spacing, subject, Sequence::Label).map_err(|e| Error::Assembly(e.to_string()))
}

fn mask(v: &Volume) -> Array3<bool> {
    v.voxels.mapv(|x| x > 0.5)
}

fn check_pair(pred: &Volume, gt: &Volume) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::Shape(format!("spacing {:?} vs {:?}", pred.spacing, gt.spacing)));
    }
    Ok(())
}

/// `2 |P & G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_pair(pred, gt)?;
    let (p, g) = (mask(pred), mask(gt));
    let inter = p.iter().zip(g.iter()).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|v| **v).count() + g.iter().filter(|v| **v).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Foreground voxels with at least one 6-neighbour in the background; voxels
/// outside the volume count as background.
pub fn border_voxels(m: &Array3<bool>) -> Vec<[usize; 3]> {
    let (nx, ny, nz) = m.dim();
    let dims = [nx, ny, nz];
    let mut out = Vec::new();
    for ((x, y, z), &on) in m.indexed_iter() {
        if !on {
            continue;
        }
        let p = [x, y, z];
        let exposed = (0..3).any(|a| {
            let lo = p[a] == 0 || {
                let mut q = p;
                q[a] -= 1;
                !m[q]
            };
            let hi = p[a] + 1 == dims[a] || {
                let mut q = p;
                q[a] += 1;
                !m[q]
            };
            lo || hi
        });
        if exposed {
            out.push(p);
        }
    }
    out
}

/// 1-D squared distance transform of `f` sampled at positions `i * step`
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let pos = |i: usize| i as f64 * step;
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q).powi(2)) - (f[p] + pos(p).powi(2))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        *o = (pos(q) - pos(v[k])).powi(2) + f[v[k]];
    }
}

/// Exact Euclidean distance (mm) from every voxel to the nearest seed voxel.
fn distance_map(shape: [usize; 3], seeds: &[[usize; 3]], spacing: [f64; 3]) -> Array3<f64> {
    let mut d = Array3::from_elem((shape[0], shape[1], shape[2]), f64::INFINITY);
    for s in seeds {
        d[*s] = 0.0;
    }
    for axis in 0..3 {
        let n = shape[axis];
        let mut buf = vec![0.0; n];
        let mut out = vec![0.0; n];
        for mut lane in d.lanes_mut(Axis(axis)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            edt_1d(&buf, spacing[axis], &mut out);
            for (v, o) in lane.iter_mut().zip(&out) {
                *v = *o;
            }
        }
    }
    d.mapv_inplace(f64::sqrt);
    d
}

/// Directed surface distances in mm: every border voxel of `pred` to the
/// border of `gt`, and vice versa. Both masks must be non-empty.
pub fn surface_distances(pred: &Volume, gt: &Volume) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(pred, gt)?;
    let (bp, bg) = (border_voxels(&mask(pred)), border_voxels(&mask(gt)));
    if bp.is_empty() || bg.is_empty() {
        return Err(Error::Validation("surface distances need two non-empty masks".into()));
    }
    let dp = distance_map(pred.shape(), &bp, pred.spacing);
    let dg = distance_map(gt.shape(), &bg, gt.spacing);
    Ok((bp.iter().map(|v| dg[*v]).collect(), bg.iter().map(|v| dp[*v]).collect()))
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    s[lo] + (rank - lo as f64) * (s[hi] - s[lo])
}

/// Both-empty, one-empty or regular.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyCase {
    None,
    Both,
    PredEmpty,
    GtEmpty,
}

fn empty_case(pred: &Volume, gt: &Volume) -> EmptyCase {
    let (p, g) = (pred.voxels.iter().any(|v| *v > 0.5), gt.voxels.iter().any(|v| *v > 0.5));
    match (p, g) {
        (true, true) => EmptyCase::None,
        (false, false) => EmptyCase::Both,
        (false, true) => EmptyCase::PredEmpty,
        (true, false) => EmptyCase::GtEmpty,
    }
}

fn distance_metric(pred: &Volume, gt: &Volume, f: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    check_pair(pred, gt)?;
    match empty_case(pred, gt) {
        EmptyCase::None => {
            let (a, b) = surface_distances(pred, gt)?;
            Ok(f(&a, &b))
        }
        EmptyCase::Both => Ok(0.0),
        _ => Ok(gt.diagonal_mm()),
    }
}

/// `max(P95(pred -> gt), P95(gt -> pred))` in mm. One empty mask gives the
/// volume diagonal; two give 0.
pub fn hd95(pred: &Volume, gt: &Volume) -> Result<f64> {
    distance_metric(pred, gt, |a, b| percentile(a, 95.0).max(percentile(b, 95.0)))
}

/// Mean of both directed distance lists together, in mm.
pub fn asd(pred: &Volume, gt: &Volume) -> Result<f64> {
    distance_metric(pred, gt, |a, b| (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub subject: String,
    pub dsc: f64,
    pub hd95: f64,
    pub asd: f64,
    /// Set when the distances are the empty-mask sentinel or a both-empty 0.
    pub empty: EmptyCase,
}

pub fn evaluate_volumes(pred: &Volume, gt: &Volume) -> Result<MetricResult> {
    check_pair(pred, gt)?;
    let empty = empty_case(pred, gt);
    let (hd, asd) = match empty {
        EmptyCase::None => {
            let (a, b) = surface_distances(pred, gt)?;
            let mean = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (a.len() + b.len()) as f64;
            (percentile(&a, 95.0).max(percentile(&b, 95.0)), mean)
        }
        EmptyCase::Both => (0.0, 0.0),
        _ => (gt.diagonal_mm(), gt.diagonal_mm()),
    };
    Ok(MetricResult { subject: gt.subject.clone(), dsc: dice(pred, gt)?, hd95: hd, asd, empty })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed.
    pub p: f64,
    pub df: usize,
    /// Differences have zero variance: `t` is 0 (equal means) or infinite and
    /// `p` is 1 or 0 accordingly.
    pub degenerate: bool,
}

/// Two-tailed paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(format!("paired t-test needs equal lengths >= 2, got {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Validation("paired t-test inputs must be finite".into()));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    // Differences equal up to rounding count as zero variance.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var <= (scale * 1e-14).powi(2) {
        let (t, p) = if mean.abs() <= scale * 1e-14 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest { t, p, df, degenerate: true });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df, degenerate: false })
}

/// Concatenates `n_runs` bootstrap resamples (with replacement, full length)
/// of `scores`.
pub fn monte_carlo_expand(scores: &[f64], n_runs: usize, seed: u64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Validation("cannot resample an empty score list".into()));
    }
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_runs * scores.len()).map(|_| scores[rng.random_range(0..scores.len())]).collect())
}

pub fn write_metrics_csv(path: &Path, results: &[MetricResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricResult>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// Sample mean and standard deviation (`n - 1`; 0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Plain-text `mean ± SD` table, DSC in percent, distances in mm.
pub fn summary_table(rows: &[(String, Vec<MetricResult>)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>16}  {:>16}  {:>16}", "Method", "DSC (%)", "HD95 (mm)", "ASD (mm)");
    for (name, results) in rows {
        let col = |f: &dyn Fn(&MetricResult) -> f64, scale: f64| {
            let v: Vec<f64> = results.iter().map(|r| f(r) * scale).collect();
            let (m, s) = mean_sd(&v);
            format!("{m:.2} ± {s:.2}")
        };
        let _ = writeln!(
            out,
            "{:<width$}  {:>16}  {:>16}  {:>16}",
            name,
            col(&|r| r.dsc, 100.0),
            col(&|r| r.hd95, 1.0),
            col(&|r| r.asd, 1.0)
        );
    }
    out
}
