//! Layer primitives shared by the trunk and the attention branches:
//! fully-connected, batch normalization, global average pooling,
//! activations and inverted dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// `input[N, c_in] · weight[c_in, c_out] + bias`.
pub fn fully_connected(g: &mut Graph, input: Var, weight: Var, bias: Var) -> Result<Var> {
    g.linear(input, weight, bias)
}

pub fn global_avg_pool(g: &mut Graph, input: Var) -> Result<Var> {
    g.global_avg_pool(input)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Relu6,
    Tanh,
    Sigmoid,
    /// Softmax over the channel axis; logits are divided by `temperature`.
    SoftmaxOverChannels {
        temperature: f64,
    },
}

pub fn activation(g: &mut Graph, input: Var, kind: Activation) -> Result<Var> {
    match kind {
        Activation::Relu => g.relu(input),
        Activation::Relu6 => g.relu6(input),
        Activation::Tanh => g.tanh(input),
        Activation::Sigmoid => g.sigmoid(input),
        Activation::SoftmaxOverChannels { temperature } => g.softmax(input, temperature),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    /// Weights drawn from `U(-1/sqrt(c_in), 1/sqrt(c_in))`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!("`{name}`: fully-connected widths must be positive")));
        }
        let bound = 1.0 / (c_in as f64).sqrt();
        let weight =
            store.add(format!("{name}.weight"), Tensor::rand_uniform(&[c_in, c_out], -bound, bound, rng), false);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false);
        Ok(Self { weight, bias, c_in, c_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        fully_connected(g, x, w, b)
    }

    pub fn param_count(&self) -> usize {
        self.c_in * self.c_out + self.c_out
    }
}

/// Batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalizes `x` (NCHW or `[N, C]`). Train mode uses batch statistics
    /// and folds them into the running estimates (unbiased variance);
    /// eval mode uses the running estimates.
    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (n, _, hw) = g.value(x).nc_hw("batch_norm")?;
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.epsilon)?;
                let m = (n * hw) as f64;
                let unbias = m / (m - 1.0);
                for c in 0..self.channels() {
                    self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                    self.running_var[c] = (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
                }
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(x, gamma, beta, &self.running_mean, &self.running_var, self.epsilon),
        }
    }
}

/// `batch_norm(input, state)` in free-function form.
pub fn batch_norm(g: &mut Graph, store: &ParamStore, input: Var, state: &mut BatchNorm, mode: Mode) -> Result<Var> {
    state.forward(g, store, input, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub rate: f64,
    pub rng_seed: u64,
}

/// Inverted dropout. The mask of the k-th train-mode call is a pure function
/// of `(rng_seed, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    config: DropoutConfig,
    calls: u64,
}

impl Dropout {
    pub fn new(config: DropoutConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", config.rate)));
        }
        Ok(Self { config, calls: 0 })
    }

    pub fn config(&self) -> DropoutConfig {
        self.config
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn forward(&mut self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        if mode == Mode::Eval || self.config.rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.rng_seed);
        rng.set_stream(self.calls);
        self.calls += 1;
        let keep = 1.0 - self.config.rate;
        let scale = 1.0 / keep;
        let mask = Tensor::from_fn(g.shape(x), |_| if rng.gen::<f64>() < keep { scale } else { 0.0 });
        g.mask_mul(x, mask)
    }
}

pub fn dropout(g: &mut Graph, input: Var, state: &mut Dropout, mode: Mode) -> Result<Var> {
    state.forward(g, input, mode)
}
