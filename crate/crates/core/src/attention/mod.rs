//! Channel attention.
//!
//! An attention branch maps a feature map to one value per output channel:
//! GAP → FC → BN → ReLU → FC → gate. The value is then merged into the trunk
//! output `t` in one of two ways:
//!
//! * scaled (squeeze-and-excite): `y = a ⊙ t`, with `a` broadcast over space;
//! * shifted (shift-and-balance): `y = t + λ ⊙ a`, with a learned per-channel
//!   control factor `λ`.
//!
//! With a tanh gate the shifted output stays within `t ± |λ|`, and the
//! gradient through the trunk is `∂t/∂x` regardless of the branch state,
//! whereas the scaled form multiplies it by `a`, which vanishes when a
//! sigmoid gate saturates at zero. [`saturation`] measures exactly that.
//!
//! Dynamic convolution ([`dyconv`]) reuses the same branch to produce
//! mixing weights over a bank of expert kernels instead.

mod conv;
pub mod dyconv;
pub mod saturation;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm, Dropout, DropoutConfig, Linear, Mode};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use conv::{AttentiveConv, ConvAttention, ConvShape, ConvWeights};
pub use dyconv::{dyconv_forward, DyConvExperts};
pub use saturation::{saturation_sweep, PathGradients, SaturationProbe, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Static,
    Se,
    Sb,
    DyConv,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Static => "static",
            Mechanism::Se => "se",
            Mechanism::Sb => "sb",
            Mechanism::DyConv => "dyconv",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(Mechanism::Static),
            "se" => Ok(Mechanism::Se),
            "sb" => Ok(Mechanism::Sb),
            "dyconv" => Ok(Mechanism::DyConv),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

/// Final nonlinearity of an attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    Tanh,
    Sigmoid,
    /// Softmax over the channels of the branch output.
    Softmax,
    Relu,
    None,
}

impl GateKind {
    pub const ALL: [GateKind; 5] =
        [GateKind::Tanh, GateKind::Sigmoid, GateKind::Softmax, GateKind::Relu, GateKind::None];

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Tanh => "tanh",
            GateKind::Sigmoid => "sigmoid",
            GateKind::Softmax => "softmax",
            GateKind::Relu => "relu",
            GateKind::None => "none",
        }
    }
}

impl std::str::FromStr for GateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateKind::ALL
            .into_iter()
            .find(|g| g.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown gate `{s}`")))
    }
}

/// Where the branch normalization sits relative to the hidden ReLU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchNormOrder {
    #[default]
    BeforeRelu,
    AfterRelu,
}

/// The light-weight branch `F` followed by its gate.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBranch {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
    pub gate: GateKind,
    /// Divisor applied to the logits of a softmax gate.
    pub temperature: f64,
    pub norm_order: BranchNormOrder,
    pub dropout: Option<Dropout>,
}

impl AttentionBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_hid: usize,
        c_out: usize,
        gate: GateKind,
        rng: &mut R,
    ) -> Result<Self> {
        if c_hid == 0 {
            return Err(Error::Config(format!("`{name}`: attention branch needs at least one hidden unit")));
        }
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c_in, c_hid, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_hid),
            fc2: Linear::new(store, &format!("{name}.fc2"), c_hid, c_out, rng)?,
            gate,
            temperature: 1.0,
            norm_order: BranchNormOrder::BeforeRelu,
            dropout: None,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_norm_order(mut self, order: BranchNormOrder) -> Self {
        self.norm_order = order;
        self
    }

    /// Dropout on the hidden layer; a zero rate leaves the branch unchanged.
    pub fn with_dropout(mut self, config: DropoutConfig) -> Result<Self> {
        self.dropout = if config.rate > 0.0 { Some(Dropout::new(config)?) } else { None };
        Ok(self)
    }

    pub fn c_in(&self) -> usize {
        self.fc1.c_in
    }

    pub fn c_hid(&self) -> usize {
        self.fc1.c_out
    }

    pub fn c_out(&self) -> usize {
        self.fc2.c_out
    }

    /// Bias of the last FC, i.e. the pre-gate offset.
    pub fn pre_gate_bias(&self) -> ParamId {
        self.fc2.bias
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + 2 * self.c_hid() + self.fc2.param_count()
    }

    /// GAP → FC → BN → ReLU → FC → gate on an NCHW input; returns `[N, c_out]`.
    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let channels = g.shape(x).get(1).copied();
        if channels != Some(self.c_in()) {
            return Err(Error::dim(
                "attention_branch",
                format!("input {:?} does not have {} channels", g.shape(x), self.c_in()),
            ));
        }
        let pooled = g.global_avg_pool(x)?;
        self.forward_pooled(g, store, pooled, mode)
    }

    /// Everything after the pooling step, starting from `[N, c_in]`.
    pub fn forward_pooled(&mut self, g: &mut Graph, store: &ParamStore, pooled: Var, mode: Mode) -> Result<Var> {
        let h = self.fc1.forward(g, store, pooled)?;
        let h = match self.norm_order {
            BranchNormOrder::BeforeRelu => {
                let h = self.bn.forward(g, store, h, mode)?;
                g.relu(h)?
            }
            BranchNormOrder::AfterRelu => {
                let h = g.relu(h)?;
                self.bn.forward(g, store, h, mode)?
            }
        };
        let h = match &mut self.dropout {
            Some(d) => d.forward(g, h, mode)?,
            None => h,
        };
        let z = self.fc2.forward(g, store, h)?;
        match self.gate {
            GateKind::Tanh => g.tanh(z),
            GateKind::Sigmoid => g.sigmoid(z),
            GateKind::Softmax => g.softmax(z, self.temperature),
            GateKind::Relu => g.relu(z),
            GateKind::None => Ok(z),
        }
    }
}

/// `attention_branch_forward(x, branch)` in free-function form.
pub fn attention_branch_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    branch: &mut AttentionBranch,
    mode: Mode,
) -> Result<Var> {
    branch.forward(g, store, x, mode)
}

/// Scaled attention: `y[n,c,h,w] = a[n,c] · t[n,c,h,w]`.
pub fn se_combine(g: &mut Graph, t: Var, a: Var) -> Result<Var> {
    g.scale_channels(t, a)
}

/// Shifted attention: `y[n,c,h,w] = t[n,c,h,w] + lambda[c] · a[n,c]`.
pub fn sb_combine(g: &mut Graph, t: Var, a: Var, lambda: Var) -> Result<Var> {
    let (_, c, _) = g.value(t).nc_hw("sb_combine")?;
    if g.shape(lambda) != [c] {
        return Err(Error::dim("sb_combine", format!("lambda {:?} does not match {c} channels", g.shape(lambda))));
    }
    let shift = g.channel_gain(a, lambda)?;
    g.shift_channels(t, shift)
}

/// The per-channel control factor of a shift-and-balance site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbParams {
    pub lambda: ParamId,
    pub init_value: f64,
}

impl SbParams {
    pub const DEFAULT_INIT: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, c_out: usize, init_value: f64) -> Self {
        let lambda = store.add(format!("{name}.lambda"), Tensor::full(&[c_out], init_value), true);
        Self { lambda, init_value }
    }
}

/// Everything needed to attach a mechanism to a convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSpec {
    pub mechanism: Mechanism,
    /// Defaults to sigmoid for SE and tanh for SB when absent.
    pub gate: Option<GateKind>,
    /// Hidden units of a branch on a pointwise conv, as a multiple of `c_out`.
    pub pointwise_hidden_ratio: f64,
    /// Hidden units of a branch on a depthwise conv are `ceil(c_out / divisor)`.
    pub depthwise_hidden_divisor: usize,
    pub lambda_init: f64,
    pub experts: usize,
    pub temperature: f64,
    /// DyConv branch hidden units as a fraction of `c_in`.
    pub dyconv_hidden_ratio: f64,
    /// Dropout on the branch hidden layer.
    pub dropout: f64,
    pub norm_order: BranchNormOrder,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self {
            mechanism: Mechanism::Static,
            gate: None,
            pointwise_hidden_ratio: 1.0,
            depthwise_hidden_divisor: 6,
            lambda_init: SbParams::DEFAULT_INIT,
            experts: 4,
            temperature: 30.0,
            dyconv_hidden_ratio: 0.25,
            dropout: 0.0,
            norm_order: BranchNormOrder::BeforeRelu,
        }
    }
}

impl AttentionSpec {
    pub fn new(mechanism: Mechanism) -> Self {
        Self { mechanism, ..Self::default() }
    }

    pub fn with_gate(mut self, gate: GateKind) -> Self {
        self.gate = Some(gate);
        self
    }

    pub fn gate(&self) -> GateKind {
        self.gate.unwrap_or(match self.mechanism {
            Mechanism::Se => GateKind::Sigmoid,
            _ => GateKind::Tanh,
        })
    }

    /// Hidden width of an SE/SB branch on a conv with `c_out` outputs.
    pub fn hidden_units(&self, c_out: usize, depthwise: bool) -> usize {
        if depthwise {
            c_out.div_ceil(self.depthwise_hidden_divisor.max(1))
        } else {
            ((c_out as f64 * self.pointwise_hidden_ratio).ceil() as usize).max(1)
        }
    }

    /// Hidden width of a DyConv branch on a conv with `c_in` inputs.
    pub fn dyconv_hidden_units(&self, c_in: usize) -> usize {
        ((c_in as f64 * self.dyconv_hidden_ratio).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pointwise_hidden_ratio <= 0.0 || self.dyconv_hidden_ratio <= 0.0 {
            return Err(Error::Config("hidden-unit ratios must be positive".into()));
        }
        if self.depthwise_hidden_divisor == 0 {
            return Err(Error::Config("depthwise hidden divisor must be positive".into()));
        }
        if self.mechanism == Mechanism::DyConv && self.experts == 0 {
            return Err(Error::Config("dynamic convolution needs at least one expert".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("softmax temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("attention dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
