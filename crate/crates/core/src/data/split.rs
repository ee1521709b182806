use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{slice_pairs, SlicePair, Volume};
use crate::error::{Error, Result};

/// The co-registered volumes of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectVolumes {
    pub subject: String,
    pub t1: Volume,
    pub fa: Volume,
    pub label: Option<Volume>,
}

impl SubjectVolumes {
    pub fn pairs(&self, axis: usize, with_label: bool) -> Result<Vec<SlicePair>> {
        let label = if with_label { self.label.as_ref() } else { None };
        slice_pairs(&self.t1, &self.fa, label, axis)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<SlicePair>,
    pub unlabeled: Vec<SlicePair>,
    pub test: Vec<SubjectVolumes>,
    pub seed: u64,
    /// Subject id and role, in split order.
    pub roles: Vec<(String, Role)>,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    subject: String,
    role: Role,
}

impl DatasetSplit {
    pub fn subjects(&self, role: Role) -> Vec<&str> {
        self.roles.iter().filter(|(_, r)| *r == role).map(|(s, _)| s.as_str()).collect()
    }

    /// One JSON record per line: `{"subject": ..., "role": ...}`.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for (subject, role) in &self.roles {
            serde_json::to_writer(&mut out, &ManifestRecord { subject: subject.clone(), role: *role })?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path) -> Result<Vec<(String, Role)>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let r: ManifestRecord = serde_json::from_str(l)?;
                Ok((r.subject, r.role))
            })
            .collect()
    }
}

/// Subject-level random split. `round(labeled_fraction * n)` subjects (at
/// least one) are labeled, `n_test` are held out, the rest are unlabeled.
pub fn split_dataset(
    subjects: &[SubjectVolumes],
    labeled_fraction: f64,
    n_test: usize,
    seed: u64,
    axis: usize,
) -> Result<DatasetSplit> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(Error::Split(format!("labeled fraction {labeled_fraction} must lie in (0, 1)")));
    }
    let n = subjects.len();
    if n < 3 {
        return Err(Error::Split(format!("{n} subjects cannot fill three sets")));
    }
    let mut ids: Vec<&str> = subjects.iter().map(|s| s.subject.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Split("duplicate subject ids".into()));
    }
    let n_labeled = ((labeled_fraction * n as f64).round() as usize).max(1);
    if n_test == 0 || n_labeled + n_test >= n {
        return Err(Error::Split(format!(
            "{n} subjects: {n_labeled} labeled + {n_test} test leaves no unlabeled subject"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| subjects[*a].subject.cmp(&subjects[*b].subject));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut split = DatasetSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
        seed,
        roles: Vec::with_capacity(n),
    };
    for (rank, &i) in order.iter().enumerate() {
        let s = &subjects[i];
        let role = if rank < n_labeled {
            Role::Labeled
        } else if rank < n_labeled + n_test {
            Role::Test
        } else {
            Role::Unlabeled
        };
        match role {
            Role::Labeled => {
                if s.label.is_none() {
                    return Err(Error::Split(format!("labeled subject {} has no label volume", s.subject)));
                }
                split.labeled.extend(s.pairs(axis, true)?);
            }
            Role::Unlabeled => split.unlabeled.extend(s.pairs(axis, false)?),
            Role::Test => {
                if s.label.is_none() {
                    return Err(Error::Split(format!("test subject {} has no label volume", s.subject)));
                }
                split.test.push(s.clone());
            }
        }
        split.roles.push((s.subject.clone(), role));
    }
    Ok(split)
}
