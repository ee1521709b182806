//! Two-stream U-shaped segmentation network with T1-driven spatial attention.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{init_conv, init_conv_bn_relu, Binding};
use crate::params::ModelState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub attention_kernel: usize,
    /// Off fixes the attention gate at 1, i.e. plain two-stream concatenation.
    pub use_attention: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self { depth: 4, base_channels: 32, kernel_size: 3, attention_kernel: 7, use_attention: true }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 {
            return Err(Error::Config("base_channels must be at least 2".into()));
        }
        if self.kernel_size % 2 == 0 || self.attention_kernel % 2 == 0 {
            return Err(Error::Config("segmentation kernels must be odd".into()));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is unreasonably deep", self.depth)));
        }
        Ok(())
    }

    /// Widths of encoder stages `0..depth` followed by the bottleneck: half
    /// of the usual doubling plan `base * 2^i`.
    pub fn channel_plan(&self) -> Vec<usize> {
        (0..=self.depth).map(|i| ((self.base_channels << i) / 2).max(1)).collect()
    }

    pub fn stem_channels(&self) -> usize {
        self.base_channels / 2
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("spatial size {h}x{w} is not divisible by 2^{} = {m}", self.depth)));
        }
        Ok(())
    }
}

/// Registers all segmentation parameters under `prefix`.
pub fn init_segnet<R: Rng>(
    state: &mut ModelState,
    rng: &mut R,
    prefix: &str,
    config: &SegNetConfig,
    in_t1: usize,
    in_fa: usize,
) -> Result<()> {
    config.validate()?;
    let k = config.kernel_size;
    let s = config.stem_channels();
    let plan = config.channel_plan();
    init_conv_bn_relu(state, rng, &format!("{prefix}.stem_t1"), s, in_t1, k);
    init_conv_bn_relu(state, rng, &format!("{prefix}.stem_fa"), s, in_fa, k);
    init_conv(&mut state.params, rng, &format!("{prefix}.attention"), 1, 2, config.attention_kernel, 1.0, true);
    let mut width = 2 * s;
    for (i, &w) in plan[..config.depth].iter().enumerate() {
        init_conv_bn_relu(state, rng, &format!("{prefix}.enc{i}.a"), w, width, k);
        init_conv_bn_relu(state, rng, &format!("{prefix}.enc{i}.b"), w, w, k);
        width = w;
    }
    let bottom = plan[config.depth];
    init_conv_bn_relu(state, rng, &format!("{prefix}.mid.a"), bottom, width, k);
    init_conv_bn_relu(state, rng, &format!("{prefix}.mid.b"), bottom, bottom, k);
    for i in (0..config.depth).rev() {
        init_conv_bn_relu(state, rng, &format!("{prefix}.dec{i}.up"), plan[i], plan[i + 1], k);
        init_conv_bn_relu(state, rng, &format!("{prefix}.dec{i}.a"), plan[i], 2 * plan[i], k);
        init_conv_bn_relu(state, rng, &format!("{prefix}.dec{i}.b"), plan[i], plan[i], k);
    }
    init_conv(&mut state.params, rng, &format!("{prefix}.head"), 1, plan[0], 1, 1.0, true);
    Ok(())
}

/// Channel max + mean pooling, convolution, sigmoid: `[n, 1, h, w]` in (0, 1).
pub fn attention_gate(g: &Graph, binding: &Binding, prefix: &str, t1_stem: Var) -> Var {
    let pooled = g.channel_max_mean(t1_stem);
    g.sigmoid(binding.conv(g, pooled, &format!("{prefix}.attention"), true))
}

#[derive(Clone, Copy, Debug)]
pub struct SegNetVars {
    pub logits: Var,
    /// `None` when attention is disabled.
    pub gate: Option<Var>,
}

/// Logits `[n, 1, h, w]` for feature stacks `[n, c_t1, h, w]` and `[n, c_fa, h, w]`.
pub fn segnet_logits(
    g: &Graph,
    binding: &Binding,
    prefix: &str,
    config: &SegNetConfig,
    f_t1: Var,
    f_fa: Var,
) -> Result<SegNetVars> {
    let (st, sf) = (g.shape(f_t1), g.shape(f_fa));
    if st.len() != 4 || sf.len() != 4 || st[0] != sf[0] || st[2..] != sf[2..] {
        return Err(Error::Shape(format!("feature stacks {st:?} and {sf:?} are not spatially paired")));
    }
    config.check_spatial(st[2], st[3])?;
    let block = |x: Var, name: &str| {
        let x = binding.conv_bn_relu(g, x, &format!("{prefix}.{name}.a"));
        binding.conv_bn_relu(g, x, &format!("{prefix}.{name}.b"))
    };

    let t1 = binding.conv_bn_relu(g, f_t1, &format!("{prefix}.stem_t1"));
    let mut fa = binding.conv_bn_relu(g, f_fa, &format!("{prefix}.stem_fa"));
    let gate = config.use_attention.then(|| attention_gate(g, binding, prefix, t1));
    if let Some(gv) = gate {
        fa = g.gate(fa, gv);
    }
    let mut x = g.concat_channels(&[t1, fa]);

    let mut skips = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        let s = block(x, &format!("enc{i}"));
        skips.push(s);
        x = g.max_pool2(s);
    }
    x = block(x, "mid");
    for i in (0..config.depth).rev() {
        let up = binding.conv_bn_relu(g, g.upsample2(x), &format!("{prefix}.dec{i}.up"));
        x = block(g.concat_channels(&[up, skips[i]]), &format!("dec{i}"));
    }
    let logits = binding.conv(g, x, &format!("{prefix}.head"), true);
    Ok(SegNetVars { logits, gate })
}

/// Standalone segmentation parameters (prefix `seg`).
#[derive(Clone, Debug, PartialEq)]
pub struct SegNetParams {
    pub config: SegNetConfig,
    pub state: ModelState,
}

pub const PREFIX: &str = "seg";

impl SegNetParams {
    pub fn init<R: Rng>(config: &SegNetConfig, in_t1: usize, in_fa: usize, rng: &mut R) -> Result<Self> {
        let mut state = ModelState::default();
        init_segnet(&mut state, rng, PREFIX, config, in_t1, in_fa)?;
        Ok(Self { config: config.clone(), state })
    }
}

/// A batch of per-slice probability maps and their logits, `[n, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Array3<f64>,
    pub probs: Array3<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Array4<f64>) -> Self {
        let logits = logits.index_axis_move(Axis(1), 0);
        let probs = logits.mapv(crate::autograd::sigmoid);
        Self { logits, probs }
    }
}

fn input_channels(state: &ModelState, stem: &str) -> Option<usize> {
    state.params.get(&format!("{PREFIX}.{stem}.conv.weight")).map(|w| w.shape()[1])
}

/// Evaluation-mode forward pass (running batch-norm statistics).
pub fn segnet_forward(f_t1: &Array4<f64>, f_fa: &Array4<f64>, params: &SegNetParams) -> Result<Prediction> {
    for (stem, f) in [("stem_t1", f_t1), ("stem_fa", f_fa)] {
        if input_channels(&params.state, stem) != Some(f.shape()[1]) {
            return Err(Error::Shape(format!("{stem} expects {:?} channels, got {}", input_channels(&params.state, stem), f.shape()[1])));
        }
    }
    let g = Graph::new();
    let binding = Binding::frozen(&params.state);
    let out = segnet_logits(
        &g,
        &binding,
        PREFIX,
        &params.config,
        g.constant(f_t1.clone().into_dyn()),
        g.constant(f_fa.clone().into_dyn()),
    )?;
    let logits = g.value(out.logits).as_ref().clone().into_dimensionality().expect("4-d logits");
    Ok(Prediction::from_logits(logits))
}

/// The spatial attention gate of a standalone network for given T1 stem features.
pub fn attention_map(t1_stem_features: &Array4<f64>, params: &SegNetParams) -> Result<Array4<f64>> {
    if t1_stem_features.shape()[1] != params.config.stem_channels() {
        return Err(Error::Shape(format!(
            "attention expects {} channels, got {}",
            params.config.stem_channels(),
            t1_stem_features.shape()[1]
        )));
    }
    let g = Graph::new();
    let gate = attention_gate(&g, &Binding::frozen(&params.state), PREFIX, g.constant(t1_stem_features.clone().into_dyn()));
    Ok(g.value(gate).as_ref().clone().into_dimensionality().expect("4-d gate"))
}
