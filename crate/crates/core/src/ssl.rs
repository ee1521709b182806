//! Mean-teacher bookkeeping and consistency-based filtering of unlabeled
//! samples.

use std::path::Path;

use ndarray::{Array2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::SlicePair;
use crate::error::{Error, Result};
use crate::model::{predict, stack_pairs, ModelConfig};
use crate::params::ModelState;

/// Standard deviation of the augmentation noise.
pub const NOISE_STD: f64 = 0.1;

/// EMA copy of the student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub state: ModelState,
    pub gamma: f64,
}

impl TeacherState {
    pub fn new(student: &ModelState, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("EMA decay {gamma} must lie in [0, 1]")));
        }
        Ok(Self { state: student.clone(), gamma })
    }
}

/// `teacher <- gamma * teacher + (1 - gamma) * student` for every parameter
/// and batch-norm buffer.
pub fn ema_update(teacher: &mut TeacherState, student: &ModelState) -> Result<()> {
    teacher.state.check_congruent(student)?;
    let gamma = teacher.gamma;
    let blend = |t: &mut Tensor, s: &Tensor| {
        t.zip_mut_with(s, |t, s| *t = gamma * *t + (1.0 - gamma) * s);
    };
    for ((_, t), (_, s)) in teacher.state.params.iter_mut().zip(student.params.iter()) {
        blend(t, s);
    }
    for ((_, t), (_, s)) in teacher.state.buffers.iter_mut().zip(student.buffers.iter()) {
        blend(t, s);
    }
    Ok(())
}

/// Adds independent N(0, 0.1^2) noise to both images. Noise for index `m`
/// comes from its own ChaCha stream under `seed`.
pub fn augment_with_noise(pair: &SlicePair, m: usize, seed: u64) -> SlicePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let mut out = pair.clone();
    out.t1.mapv_inplace(|v| v + noise.sample(&mut rng));
    out.fa.mapv_inplace(|v| v + noise.sample(&mut rng));
    out
}

/// Spatial mean of the per-pixel sample standard deviation across passes.
pub fn prediction_consistency(maps: &[Array2<f64>]) -> Result<f64> {
    let m = maps.len();
    if m < 2 {
        return Err(Error::Config(format!("consistency needs at least 2 passes, got {m}")));
    }
    let dim = maps[0].dim();
    if maps.iter().any(|a| a.dim() != dim) {
        return Err(Error::Shape("probability maps differ in shape".into()));
    }
    let mut mean = Array2::<f64>::zeros(dim);
    for a in maps {
        mean += a;
    }
    mean /= m as f64;
    let mut sq = Array2::<f64>::zeros(dim);
    for a in maps {
        sq.zip_mut_with(&(a - &mean), |s, d| *s += d * d);
    }
    let std = sq.mapv(|s| (s / (m - 1) as f64).sqrt());
    Ok(std.mean().unwrap_or(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyReport {
    pub subject: String,
    pub slice_index: usize,
    pub probs_student: Vec<Array2<f64>>,
    pub probs_teacher: Vec<Array2<f64>>,
    pub cons_student: f64,
    pub cons_teacher: f64,
    /// `(cons_student - cons_teacher)^2`.
    pub inconsistency: f64,
    pub accepted: bool,
}

impl ConsistencyReport {
    pub fn from_maps(subject: &str, slice_index: usize, student: Vec<Array2<f64>>, teacher: Vec<Array2<f64>>) -> Result<Self> {
        let cons_student = prediction_consistency(&student)?;
        let cons_teacher = prediction_consistency(&teacher)?;
        Ok(Self {
            subject: subject.to_string(),
            slice_index,
            probs_student: student,
            probs_teacher: teacher,
            cons_student,
            cons_teacher,
            inconsistency: (cons_student - cons_teacher).powi(2),
            accepted: false,
        })
    }
}

/// Runs `m` noisy copies of every pair through student and teacher in
/// evaluation mode. `seeds[i]` keys the noise of `pairs[i]`.
pub fn consistency_scores(
    pairs: &[&SlicePair],
    seeds: &[u64],
    m: usize,
    student: &ModelState,
    teacher: &TeacherState,
    config: &ModelConfig,
) -> Result<Vec<ConsistencyReport>> {
    if m < 2 {
        return Err(Error::Config(format!("M = {m}: consistency needs at least 2 augmentations")));
    }
    if pairs.len() != seeds.len() {
        return Err(Error::Shape(format!("{} pairs but {} seeds", pairs.len(), seeds.len())));
    }
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let augmented: Vec<SlicePair> = pairs
        .iter()
        .zip(seeds)
        .flat_map(|(p, s)| (0..m).map(move |k| augment_with_noise(p, k, *s)))
        .collect();
    let batch = stack_pairs(&augmented.iter().collect::<Vec<_>>())?;
    let ps = predict(student, config, &batch.t1, &batch.fa)?.probs;
    let pt = predict(&teacher.state, config, &batch.t1, &batch.fa)?.probs;
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let take = |probs: &ndarray::Array3<f64>| (0..m).map(|k| probs.index_axis(Axis(0), i * m + k).to_owned()).collect();
            ConsistencyReport::from_maps(&p.subject, p.slice_index, take(&ps), take(&pt))
        })
        .collect()
}

/// Warm-up `(1 - epoch / e_max)` applied to the inconsistency score.
pub fn ramped_score(inconsistency: f64, epoch: usize, e_max: usize) -> f64 {
    let t = if e_max == 0 { 1.0 } else { (epoch as f64 / e_max as f64).min(1.0) };
    (1.0 - t) * inconsistency
}

pub fn cse_gate(report: &ConsistencyReport, epoch: usize, e_max: usize, threshold: f64) -> bool {
    ramped_score(report.inconsistency, epoch, e_max) < threshold
}

/// Mean over samples of the per-sample squared-difference mean. Zero when no
/// sample was accepted.
pub fn cse_consistency_loss(student: &[Array2<f64>], teacher: &[Array2<f64>]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::Shape(format!("{} student maps vs {} teacher maps", student.len(), teacher.len())));
    }
    if student.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        total += crate::losses::consistency_mse(&s.clone().into_dyn(), &t.clone().into_dyn())?;
    }
    Ok(total / student.len() as f64)
}

/// Graph form: student probabilities `[n, 1, h, w]` against fixed teacher
/// probabilities of the same shape, restricted to `accepted` rows.
pub fn cse_loss_var(g: &Graph, student_probs: Var, teacher_probs: &Tensor, accepted: &[usize]) -> Var {
    if accepted.is_empty() {
        return g.constant(Tensor::zeros(IxDyn(&[])));
    }
    let s = g.select_batch(student_probs, accepted);
    let t = g.constant(teacher_probs.select(Axis(0), accepted));
    g.mse(s, t)
}

/// One row of the per-epoch filter audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub subject: String,
    pub slice: usize,
    pub inconsistency: f64,
    pub ramped_score: f64,
    pub accepted: bool,
}

pub fn write_audit(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfd::LcscConfig;
    use crate::model::InputCombo;
    use crate::segnet::SegNetConfig;
    use ndarray::array;

    fn config() -> ModelConfig {
        let lcsc = LcscConfig { n_filters: 2, ..Default::default() };
        ModelConfig {
            t1: lcsc.clone(),
            fa: lcsc,
            segnet: SegNetConfig { depth: 1, base_channels: 4, ..Default::default() },
            use_cfd: true,
            input_combo: InputCombo::T1Fa,
        }
    }

    fn pair(seed: u64, n: usize) -> SlicePair {
        let t = crate::testutil::random_tensor(&[2, n, n], seed);
        SlicePair {
            t1: t.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap(),
            fa: t.index_axis(Axis(0), 1).to_owned().into_dimensionality().unwrap(),
            label: None,
            subject: format!("s{seed}"),
            slice_index: seed as usize,
        }
    }

    fn shifted(state: &ModelState, by: f64) -> ModelState {
        let mut s = state.clone();
        for (_, t) in s.params.iter_mut() {
            t.mapv_inplace(|v| v + by);
        }
        s
    }

    #[test]
    fn ema_endpoints() {
        let student = config().init(1).unwrap();
        let start = config().init(2).unwrap();
        let mut t = TeacherState { state: start.clone(), gamma: 0.0 };
        ema_update(&mut t, &student).unwrap();
        assert_eq!(t.state, student);
        let mut t = TeacherState { state: start.clone(), gamma: 1.0 };
        ema_update(&mut t, &student).unwrap();
        assert_eq!(t.state, start);
        assert!(TeacherState::new(&student, 1.5).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let student = config().init(1).unwrap();
        let mut t = TeacherState { state: shifted(&config().init(2).unwrap(), 0.3), gamma: 0.99 };
        let d0 = t.state.params.distance(&student.params).unwrap();
        for step in 1..=50 {
            ema_update(&mut t, &student).unwrap();
            let d = t.state.params.distance(&student.params).unwrap();
            assert!((d - d0 * 0.99f64.powi(step)).abs() < 1e-10 * d0.max(1.0));
        }
    }

    #[test]
    fn ema_rejects_mismatched_structure() {
        let student = config().init(1).unwrap();
        let other = ModelConfig { use_cfd: false, ..config() }.init(1).unwrap();
        let mut t = TeacherState::new(&other, 0.9).unwrap();
        assert!(matches!(ema_update(&mut t, &student), Err(Error::Congruence(_))));
    }

    #[test]
    fn noise_statistics() {
        let p = pair(0, 128);
        let a = augment_with_noise(&p, 0, 42);
        let d: Vec<f64> = (&a.t1 - &p.t1).iter().chain((&a.fa - &p.fa).iter()).copied().collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.1).abs() < 0.005, "{std}");
        assert!(mean.abs() < 3.0 * 0.1 / n.sqrt(), "{mean}");
        assert_ne!(&a.t1 - &p.t1, &a.fa - &p.fa);
        assert_eq!(augment_with_noise(&p, 0, 42), a);
        assert_ne!(augment_with_noise(&p, 1, 42), a);
        assert_ne!(augment_with_noise(&p, 0, 43), a);
    }

    #[test]
    fn hand_built_two_pixel_case() {
        let maps = vec![array![[0.2, 0.9]], array![[0.4, 0.6]], array![[0.9, 0.9]]];
        // Pixel 1: mean 0.5, squared deviations 0.09, 0.01, 0.16 -> var 0.13.
        // Pixel 2: mean 0.8, squared deviations 0.01, 0.04, 0.01 -> var 0.03.
        let expect = (0.13f64.sqrt() + 0.03f64.sqrt()) / 2.0;
        assert!((prediction_consistency(&maps).unwrap() - expect).abs() < 1e-14);
        let permuted = vec![maps[2].clone(), maps[0].clone(), maps[1].clone()];
        assert!((prediction_consistency(&permuted).unwrap() - expect).abs() < 1e-14);
        let teacher = vec![array![[0.5, 0.5]]; 3];
        let r = ConsistencyReport::from_maps("s", 0, maps, teacher).unwrap();
        assert_eq!(r.cons_teacher, 0.0);
        assert!((r.inconsistency - expect * expect).abs() < 1e-14);
        assert!(prediction_consistency(&[array![[0.1]]]).is_err());
    }

    #[test]
    fn identical_models_are_consistent() {
        let c = config();
        let student = c.init(3).unwrap();
        let teacher = TeacherState::new(&student, 0.99).unwrap();
        let pairs = [pair(1, 8), pair(2, 8)];
        let refs: Vec<&SlicePair> = pairs.iter().collect();
        let reports = consistency_scores(&refs, &[5, 6], 3, &student, &teacher, &c).unwrap();
        assert_eq!(reports.len(), 2);
        for r in &reports {
            assert_eq!(r.inconsistency, 0.0);
            assert!(r.cons_student > 0.0);
            assert_eq!(r.probs_student.len(), 3);
        }
        assert!(matches!(consistency_scores(&refs, &[5, 6], 1, &student, &teacher, &c), Err(Error::Config(_))));
    }

    #[test]
    fn constant_output_model_has_zero_consistency() {
        let c = config();
        let mut student = c.init(3).unwrap();
        student.params.get_mut("seg.head.weight").unwrap().fill(0.0);
        let mut other = shifted(&student, 0.01);
        other.params.get_mut("seg.head.weight").unwrap().fill(0.0);
        other.params.get_mut("seg.head.bias").unwrap().fill(0.0);
        let teacher = TeacherState::new(&other, 0.99).unwrap();
        let p = pair(4, 8);
        let r = &consistency_scores(&[&p], &[1], 3, &student, &teacher, &c).unwrap()[0];
        assert_eq!((r.cons_student, r.cons_teacher, r.inconsistency), (0.0, 0.0, 0.0));
        assert!(r.probs_student.iter().all(|m| m.iter().all(|v| *v == 0.5)));
    }

    #[test]
    fn gate() {
        let report = |inc: f64| ConsistencyReport {
            subject: "s".into(),
            slice_index: 0,
            probs_student: vec![],
            probs_teacher: vec![],
            cons_student: 0.0,
            cons_teacher: 0.0,
            inconsistency: inc,
            accepted: false,
        };
        assert!(!cse_gate(&report(0.06), 0, 200, 0.05));
        assert!(cse_gate(&report(0.04), 0, 200, 0.05));
        assert!(cse_gate(&report(1e9), 200, 200, 0.05));
        // Once accepted, accepted at every later epoch.
        for inc in [0.05, 0.08, 0.5, 3.0] {
            let first = (0..=200).position(|e| cse_gate(&report(inc), e, 200, 0.05)).unwrap();
            assert!((first..=200).all(|e| cse_gate(&report(inc), e, 200, 0.05)));
        }
    }

    #[test]
    fn cse_loss_examples() {
        assert_eq!(cse_consistency_loss(&[], &[]).unwrap(), 0.0);
        let a = vec![array![[0.1, 0.5]], array![[0.9, 0.3]]];
        let b = vec![array![[0.2, 0.5]], array![[0.4, 0.3]]];
        assert_eq!(cse_consistency_loss(&a, &a).unwrap(), 0.0);
        let l = cse_consistency_loss(&a, &b).unwrap();
        assert!((l - (0.005 + 0.125) / 2.0).abs() < 1e-15);
        let (ra, rb): (Vec<_>, Vec<_>) = (a.iter().rev().cloned().collect(), b.iter().rev().cloned().collect());
        assert!((cse_consistency_loss(&ra, &rb).unwrap() - l).abs() < 1e-15);

        // With every sample accepted the graph form equals the plain consistency loss.
        let s = crate::testutil::random_tensor(&[3, 1, 4, 4], 1).mapv(|v| v.abs());
        let t = crate::testutil::random_tensor(&[3, 1, 4, 4], 2).mapv(|v| v.abs());
        let g = Graph::new();
        let all = g.scalar(cse_loss_var(&g, g.constant(s.clone()), &t, &[0, 1, 2]));
        assert!((all - crate::losses::consistency_mse(&s, &t).unwrap()).abs() < 1e-15);
        assert_eq!(g.scalar(cse_loss_var(&g, g.constant(s), &t, &[])), 0.0);
    }

    #[test]
    fn cse_loss_gradient() {
        let s = crate::testutil::random_tensor(&[3, 1, 16, 16], 3).mapv(|v| 0.5 + 0.4 * v);
        let t = crate::testutil::random_tensor(&[3, 1, 16, 16], 4).mapv(|v| 0.5 + 0.4 * v);
        let err = crate::testutil::gradcheck(&[s], 1e-6, |g, v| cse_loss_var(g, v[0], &t, &[0, 2]));
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn audit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cse.csv");
        let recs = vec![
            AuditRecord { subject: "a".into(), slice: 3, inconsistency: 0.01, ramped_score: 0.005, accepted: true },
            AuditRecord { subject: "b".into(), slice: 0, inconsistency: 0.2, ramped_score: 0.1, accepted: false },
        ];
        write_audit(&p, &recs).unwrap();
        assert_eq!(read_audit(&p).unwrap(), recs);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "subject,slice,inconsistency,ramped_score,accepted");
    }
}
