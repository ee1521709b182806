//! The full network: one decomposition predictor per sequence feeding the
//! two-stream segmentation network.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::cfd::{clamp_lambda, decompose_vars, DecompositionVars, LcscConfig, PredNetParams, PredNetVars};
use crate::data::SlicePair;
use crate::error::{Error, Result};
use crate::nn::Binding;
use crate::params::ModelState;
use crate::segnet::{init_segnet, segnet_logits, Prediction, SegNetConfig};

pub const T1_PREFIX: &str = "cfd.t1";
pub const FA_PREFIX: &str = "cfd.fa";
pub const SEG_PREFIX: &str = "seg";

/// Which sequences reach the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputCombo {
    #[default]
    #[serde(rename = "t1+fa")]
    T1Fa,
    /// Both streams see the T1 image.
    #[serde(rename = "t1-only")]
    T1Only,
    #[serde(rename = "fa-only")]
    FaOnly,
    /// Raw images concatenated: no decomposition, no attention.
    #[serde(rename = "naive-concat")]
    NaiveConcat,
}

impl fmt::Display for InputCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::T1Fa => "t1+fa",
            Self::T1Only => "t1-only",
            Self::FaOnly => "fa-only",
            Self::NaiveConcat => "naive-concat",
        })
    }
}

impl FromStr for InputCombo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t1+fa" => Ok(Self::T1Fa),
            "t1-only" => Ok(Self::T1Only),
            "fa-only" => Ok(Self::FaOnly),
            "naive-concat" => Ok(Self::NaiveConcat),
            _ => Err(Error::Config(format!("unknown input combo `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t1: LcscConfig,
    pub fa: LcscConfig,
    pub segnet: SegNetConfig,
    pub use_cfd: bool,
    pub input_combo: InputCombo,
}

impl ModelConfig {
    /// Resolves `NaiveConcat` into its flags.
    pub fn effective(&self) -> ModelConfig {
        let mut c = self.clone();
        if c.input_combo == InputCombo::NaiveConcat {
            c.use_cfd = false;
            c.segnet.use_attention = false;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.t1.validate()?;
        self.fa.validate()?;
        self.segnet.validate()?;
        if self.use_cfd && self.t1.n_filters != self.fa.n_filters {
            return Err(Error::Config(format!(
                "T1 and FA code counts must match for the correlation loss ({} vs {})",
                self.t1.n_filters, self.fa.n_filters
            )));
        }
        Ok(())
    }

    pub fn init(&self, seed: u64) -> Result<ModelState> {
        self.validate()?;
        let c = self.effective();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = ModelState::default();
        let (in_t1, in_fa) = if c.use_cfd {
            PredNetParams::init(&c.t1, &mut rng)?.insert_into(&mut state.params, T1_PREFIX);
            PredNetParams::init(&c.fa, &mut rng)?.insert_into(&mut state.params, FA_PREFIX);
            (c.t1.n_filters, c.fa.n_filters)
        } else {
            (1, 1)
        };
        init_segnet(&mut state, &mut rng, SEG_PREFIX, &c.segnet, in_t1, in_fa)?;
        Ok(state)
    }

    /// Projects parameters back onto their constraint sets after an update.
    pub fn clamp_constraints(&self, state: &mut ModelState) {
        clamp_lambda(&mut state.params, T1_PREFIX);
        clamp_lambda(&mut state.params, FA_PREFIX);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub logits: Var,
    pub t1: Option<DecompositionVars>,
    pub fa: Option<DecompositionVars>,
    pub gate: Option<Var>,
}

/// Forward pass on image stacks `[n, 1, h, w]`.
pub fn model_forward(g: &Graph, binding: &Binding, config: &ModelConfig, x_t1: Var, x_fa: Var) -> Result<ModelVars> {
    let c = config.effective();
    let (x_t1, x_fa) = match c.input_combo {
        InputCombo::T1Only => (x_t1, x_t1),
        InputCombo::FaOnly => (x_fa, x_fa),
        InputCombo::T1Fa | InputCombo::NaiveConcat => (x_t1, x_fa),
    };
    let (t1, fa, f_t1, f_fa) = if c.use_cfd {
        let t1 = decompose_vars(g, &PredNetVars::bind(g, binding, T1_PREFIX), c.t1.n_blocks, x_t1, None);
        let fa = decompose_vars(g, &PredNetVars::bind(g, binding, FA_PREFIX), c.fa.n_blocks, x_fa, None);
        (Some(t1), Some(fa), t1.codes, fa.codes)
    } else {
        (None, None, x_t1, x_fa)
    };
    let seg = segnet_logits(g, binding, SEG_PREFIX, &c.segnet, f_t1, f_fa)?;
    Ok(ModelVars { logits: seg.logits, t1, fa, gate: seg.gate })
}

/// Image stacks `[n, 1, h, w]` for T1 and FA plus the label stack when every
/// pair carries one.
pub struct Batch {
    pub t1: Tensor,
    pub fa: Tensor,
    pub label: Option<Tensor>,
}

pub fn stack_pairs(pairs: &[&SlicePair]) -> Result<Batch> {
    let first = pairs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = first.dim();
    let stack = |get: &dyn Fn(&SlicePair) -> Option<&Array2<f64>>| -> Result<Option<Tensor>> {
        let mut out = Tensor::zeros(IxDyn(&[pairs.len(), 1, h, w]));
        for (i, p) in pairs.iter().enumerate() {
            let Some(a) = get(p) else { return Ok(None) };
            if a.dim() != (h, w) {
                return Err(Error::Shape(format!("slice {} of {} is {:?}, batch is {:?}", p.slice_index, p.subject, a.dim(), (h, w))));
            }
            out.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), 0).assign(&a.view().into_dyn());
        }
        Ok(Some(out))
    };
    Ok(Batch {
        t1: stack(&|p| Some(&p.t1))?.unwrap(),
        fa: stack(&|p| Some(&p.fa))?.unwrap(),
        label: stack(&|p| p.label.as_ref())?,
    })
}

/// Evaluation-mode probabilities for image stacks.
pub fn predict(state: &ModelState, config: &ModelConfig, t1: &Tensor, fa: &Tensor) -> Result<Prediction> {
    let g = Graph::new();
    let out = model_forward(&g, &Binding::frozen(state), config, g.constant(t1.clone()), g.constant(fa.clone()))?;
    let logits: Array4<f64> = g.value(out.logits).as_ref().clone().into_dimensionality().expect("4-d logits");
    Ok(Prediction::from_logits(logits))
}
