use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::params::ModelState;
use crate::ssl::TeacherState;

pub const FORMAT: &str = "cfdseg-checkpoint";
pub const VERSION: u32 = 1;

/// Everything needed to resume: all randomness is derived from
/// `(rng.seed, epoch)`, so the seed and next epoch are the full RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub student: ModelState,
    pub teacher: TeacherState,
    pub optimizer: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Refuses a checkpoint whose stored hash does not match its own config,
    /// or (when `expected` is given) the caller's config, unless `force`.
    pub fn load(path: &Path, expected: Option<&ExperimentConfig>, force: bool) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!("version {} is not supported (expected {VERSION})", ck.version)));
        }
        if !force {
            if ck.config.hash() != ck.config_hash {
                return Err(Error::Checkpoint("stored config does not match its hash".into()));
            }
            if let Some(cfg) = expected {
                if cfg.hash() != ck.config_hash {
                    return Err(Error::Checkpoint(format!(
                        "config hash {} differs from checkpoint {} (use --force to override)",
                        cfg.hash(),
                        ck.config_hash
                    )));
                }
            }
        }
        ck.student.check_congruent(&ck.teacher.state)?;
        Ok(ck)
    }
}
