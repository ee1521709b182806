use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::EvalModel;
use crate::autograd::Graph;
use crate::data::split::SubjectVolumes;
use crate::data::{load_volume, normalize, resize, stack_slices, Interpolation, Sequence, Volume};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_volumes, stack_to_volume, MetricResult};
use crate::model::{model_forward, predict, stack_pairs, ModelConfig};
use crate::nn::Binding;
use crate::params::ModelState;

const BATCH: usize = 16;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub results: Vec<MetricResult>,
    /// Subject id and reason for every subject that could not be evaluated.
    pub failures: Vec<(String, String)>,
}

pub fn eval_state(ck: &Checkpoint) -> &ModelState {
    match ck.config.evaluate_with {
        EvalModel::Teacher => &ck.teacher.state,
        EvalModel::Student => &ck.student,
    }
}

/// Foreground probabilities for every voxel of a subject, slice by slice.
pub fn predict_subject(state: &ModelState, config: &ModelConfig, subject: &SubjectVolumes, axis: usize) -> Result<Array3<f64>> {
    let pairs = subject.pairs(axis, false)?;
    let mut slices: Vec<(usize, Array2<f64>)> = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(BATCH) {
        let b = stack_pairs(&chunk.iter().collect::<Vec<_>>())?;
        let probs = predict(state, config, &b.t1, &b.fa)?.probs;
        for (p, map) in chunk.iter().zip(probs.axis_iter(Axis(0))) {
            slices.push((p.slice_index, map.to_owned()));
        }
    }
    stack_slices(&slices, axis)
}

pub fn binarize(probs: &Array3<f64>, threshold: f64) -> Array3<f64> {
    probs.mapv(|p| (p >= threshold) as u8 as f64)
}

pub fn evaluate_subject(
    state: &ModelState,
    config: &ModelConfig,
    subject: &SubjectVolumes,
    axis: usize,
    threshold: f64,
) -> Result<MetricResult> {
    let gt = subject.label.as_ref().ok_or_else(|| Error::Evaluation {
        subject: subject.subject.clone(),
        reason: "no label volume".into(),
    })?;
    let probs = predict_subject(state, config, subject, axis)?;
    let mask = binarize(&probs, threshold);
    let slices: Vec<(usize, Array2<f64>)> = mask.axis_iter(Axis(axis)).map(|s| s.to_owned()).enumerate().collect();
    let pred = stack_to_volume(&slices, gt.spacing, axis, &subject.subject)?;
    evaluate_volumes(&pred, gt)
}

/// Metrics per subject with the checkpoint's evaluation model and threshold.
pub fn evaluate(ck: &Checkpoint, subjects: &[SubjectVolumes]) -> EvaluationReport {
    evaluate_with_threshold(ck, subjects, ck.config.binarize_threshold)
}

pub fn evaluate_with_threshold(ck: &Checkpoint, subjects: &[SubjectVolumes], threshold: f64) -> EvaluationReport {
    let state = eval_state(ck);
    let model = ck.config.model_config();
    let mut report = EvaluationReport::default();
    for s in subjects {
        match evaluate_subject(state, &model, s, ck.config.split.axis, threshold) {
            Ok(r) => report.results.push(r),
            Err(e) => report.failures.push((s.subject.clone(), e.to_string())),
        }
    }
    report
}

fn find_volume(dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}.nii.gz"), format!("{stem}.nii")].into_iter().map(|n| dir.join(n)).find(|p| p.exists())
}

/// Loads `<dir>/{t1,fa}.nii[.gz]` and the optional `label` volume, min-max
/// normalises both images and optionally resamples everything to `shape`.
pub fn load_subject_dir(dir: &Path, shape: Option<[usize; 3]>) -> Result<SubjectVolumes> {
    let subject = dir.file_name().and_then(|n| n.to_str()).unwrap_or("subject").to_string();
    let load = |stem: &str, seq: Sequence| -> Result<Option<Volume>> {
        let Some(path) = find_volume(dir, stem) else { return Ok(None) };
        let mut v = load_volume(&path, seq)?;
        v.subject = subject.clone();
        if seq != Sequence::Label {
            v = normalize(&v)?;
        }
        if let Some(shape) = shape {
            v = resize(&v, shape, Interpolation::Linear)?;
        }
        Ok(Some(v))
    };
    let missing = |what: &str| Error::Evaluation { subject: subject.clone(), reason: format!("missing {what} volume") };
    let t1 = load("t1", Sequence::T1)?.ok_or_else(|| missing("t1"))?;
    let fa = load("fa", Sequence::Fa)?.ok_or_else(|| missing("fa"))?;
    let label = load("label", Sequence::Label)?;
    if t1.shape() != fa.shape() || label.as_ref().is_some_and(|l| l.shape() != t1.shape()) {
        return Err(Error::Pairing(format!("{subject}: sequence shapes differ")));
    }
    Ok(SubjectVolumes { subject, t1, fa, label })
}

/// Every subdirectory of `dir`, sorted by name; failures are kept per subject.
pub fn load_directory(dir: &Path, shape: Option<[usize; 3]>) -> Result<Vec<std::result::Result<SubjectVolumes, (String, Error)>>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs
        .into_iter()
        .map(|d| {
            let name = d.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
            load_subject_dir(&d, shape).map_err(|e| (name, e))
        })
        .collect())
}

pub fn evaluate_directory(ck: &Checkpoint, dir: &Path) -> Result<EvaluationReport> {
    let resize = match &ck.config.data {
        super::config::DataSource::Directory { resize, .. } => *resize,
        _ => None,
    };
    let mut subjects = Vec::new();
    let mut failures = Vec::new();
    for r in load_directory(dir, resize)? {
        match r {
            Ok(s) => subjects.push(s),
            Err((name, e)) => failures.push((name, e.to_string())),
        }
    }
    let mut report = evaluate(ck, &subjects);
    report.failures.extend(failures);
    Ok(report)
}

/// Writes `<dir>/<subject>/{t1,fa,label}.nii.gz`.
pub fn write_subjects(dir: &Path, subjects: &[SubjectVolumes]) -> Result<()> {
    for s in subjects {
        let d = dir.join(&s.subject);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        s.t1.save(&d.join("t1.nii.gz"))?;
        s.fa.save(&d.join("fa.nii.gz"))?;
        if let Some(l) = &s.label {
            l.save(&d.join("label.nii.gz"))?;
        }
    }
    Ok(())
}

/// Mean `|u|` of the FA unique image inside and outside the label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniqueContrast {
    pub inside: f64,
    pub outside: f64,
}

impl UniqueContrast {
    pub fn ratio(&self) -> f64 {
        self.inside / self.outside
    }
}

pub fn unique_contrast(state: &ModelState, config: &ModelConfig, subjects: &[SubjectVolumes], axis: usize) -> Result<UniqueContrast> {
    if !config.use_cfd {
        return Err(Error::Config("unique features need the decomposition".into()));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for s in subjects {
        let pairs = s.pairs(axis, true)?;
        for chunk in pairs.chunks(BATCH) {
            let b = stack_pairs(&chunk.iter().collect::<Vec<_>>())?;
            let label = b.label.ok_or_else(|| Error::Evaluation { subject: s.subject.clone(), reason: "no label volume".into() })?;
            let g = Graph::new();
            let out = model_forward(&g, &Binding::frozen(state), config, g.constant(b.t1), g.constant(b.fa))?;
            let u = g.value(out.fa.expect("decomposition enabled").unique);
            for (v, l) in u.iter().zip(label.iter()) {
                if *l > 0.5 {
                    si += v.abs();
                    ni += 1;
                } else {
                    so += v.abs();
                    no += 1;
                }
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::Validation("label must have both foreground and background".into()));
    }
    Ok(UniqueContrast { inside: si / ni as f64, outside: so / no as f64 })
}
