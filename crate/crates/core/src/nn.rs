//! Parameter binding and the small layer vocabulary shared by the networks.

use ndarray::IxDyn;
use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::params::{fan_in_uniform, ModelState, ParamSet};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How a forward pass sees a [`ModelState`].
///
/// `trainable` registers parameters as differentiable leaves; `train_mode`
/// selects batch statistics (and records running-statistic updates) in
/// batch norm. A teacher pass is neither.
#[derive(Clone, Copy)]
pub struct Binding<'a> {
    pub state: &'a ModelState,
    pub trainable: bool,
    pub train_mode: bool,
}

impl<'a> Binding<'a> {
    pub fn train(state: &'a ModelState) -> Self {
        Self { state, trainable: true, train_mode: true }
    }

    pub fn frozen(state: &'a ModelState) -> Self {
        Self { state, trainable: false, train_mode: false }
    }

    pub fn param(&self, g: &Graph, name: &str) -> Var {
        let value = self.state.params.expect(name);
        if self.trainable {
            g.param(name, value)
        } else {
            g.constant(value.clone())
        }
    }

    pub fn conv(&self, g: &Graph, x: Var, prefix: &str, bias: bool) -> Var {
        let w = self.param(g, &format!("{prefix}.weight"));
        let b = bias.then(|| self.param(g, &format!("{prefix}.bias")));
        g.conv2d(x, w, b)
    }

    pub fn batch_norm(&self, g: &Graph, x: Var, prefix: &str) -> Var {
        let gamma = self.param(g, &format!("{prefix}.gamma"));
        let beta = self.param(g, &format!("{prefix}.beta"));
        let mean_name = format!("{prefix}.running_mean");
        let var_name = format!("{prefix}.running_var");
        let running_mean = self.state.buffers.expect(&mean_name);
        let running_var = self.state.buffers.expect(&var_name);
        if self.train_mode {
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, BN_EPS);
            let blend = |old: &Tensor, new: Vec<f64>| {
                let new = Tensor::from_shape_vec(IxDyn(&[new.len()]), new).unwrap();
                old * (1.0 - BN_MOMENTUM) + new * BN_MOMENTUM
            };
            g.record_buffer_update(mean_name, blend(running_mean, mean));
            g.record_buffer_update(var_name, blend(running_var, var));
            y
        } else {
            let m: Vec<f64> = running_mean.iter().copied().collect();
            let v: Vec<f64> = running_var.iter().copied().collect();
            g.batch_norm_eval(x, gamma, beta, &m, &v, BN_EPS)
        }
    }

    /// conv (no bias) -> batch norm -> ReLU.
    pub fn conv_bn_relu(&self, g: &Graph, x: Var, prefix: &str) -> Var {
        let y = self.conv(g, x, &format!("{prefix}.conv"), false);
        let y = self.batch_norm(g, y, &format!("{prefix}.bn"));
        g.relu(y)
    }
}

/// Registers `{prefix}.weight` (and `{prefix}.bias` = 0) with fan-in
/// scaled uniform noise.
pub fn init_conv<R: Rng>(
    params: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    gain: f64,
    bias: bool,
) {
    let w = fan_in_uniform(rng, &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, gain);
    params.insert(format!("{prefix}.weight"), w);
    if bias {
        params.insert(format!("{prefix}.bias"), Tensor::zeros(IxDyn(&[out_ch])));
    }
}

pub fn init_batch_norm(state: &mut ModelState, prefix: &str, channels: usize) {
    state.params.insert(format!("{prefix}.gamma"), Tensor::ones(IxDyn(&[channels])));
    state.params.insert(format!("{prefix}.beta"), Tensor::zeros(IxDyn(&[channels])));
    state.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(IxDyn(&[channels])));
    state.buffers.insert(format!("{prefix}.running_var"), Tensor::ones(IxDyn(&[channels])));
}

/// He-uniform gain for ReLU layers.
pub const RELU_GAIN: f64 = 2.449_489_742_783_178;

pub fn init_conv_bn_relu<R: Rng>(state: &mut ModelState, rng: &mut R, prefix: &str, out_ch: usize, in_ch: usize, kernel: usize) {
    init_conv(&mut state.params, rng, &format!("{prefix}.conv"), out_ch, in_ch, kernel, RELU_GAIN, false);
    init_batch_norm(state, &format!("{prefix}.bn"), out_ch);
}
