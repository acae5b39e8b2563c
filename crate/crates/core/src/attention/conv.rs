use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dyconv::{dyconv_forward, DyConvExperts};
use super::{sb_combine, se_combine, AttentionBranch, AttentionSpec, Mechanism, SbParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{DropoutConfig, Mode};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn pointwise(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out, kernel: 1, stride: 1, padding: 0, groups: 1 }
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { c_in: channels, c_out: channels, kernel, stride, padding: kernel / 2, groups: channels }
    }

    pub fn full(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self { c_in, c_out, kernel, stride, padding: kernel / 2, groups: 1 }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.c_in && self.groups == self.c_out
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups.max(1), self.kernel, self.kernel]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |len: usize| (len + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (out(h), out(w))
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_shape().iter().product()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.kernel == 0 || self.stride == 0 || self.groups == 0 {
            return Err(Error::Config(format!("`{name}`: conv extents must be positive")));
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::Config(format!(
                "`{name}`: groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        Ok(())
    }
}

/// He-normal (fan-out) kernel, the trunk initializer.
pub(crate) fn init_kernel<R: Rng + ?Sized>(shape: &ConvShape, rng: &mut R) -> Tensor {
    let fan_out = (shape.c_out * shape.kernel * shape.kernel) as f64;
    Tensor::randn(&shape.kernel_shape(), (2.0 / fan_out).sqrt(), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvWeights {
    Static(ParamId),
    Dynamic(DyConvExperts),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvAttention {
    None,
    Se(AttentionBranch),
    Sb(AttentionBranch, SbParams),
}

/// A convolution with an optional attention mechanism attached.
///
/// SE and SB branches read the conv input and modulate the conv output;
/// DyConv replaces the static kernel by a per-sample expert mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveConv {
    pub name: String,
    pub shape: ConvShape,
    pub weights: ConvWeights,
    pub attention: ConvAttention,
}

impl AttentiveConv {
    pub fn plain<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, shape: ConvShape, rng: &mut R) -> Result<Self> {
        Self::new(store, name, shape, &AttentionSpec::new(Mechanism::Static), rng)
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: ConvShape,
        spec: &AttentionSpec,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate(name)?;
        spec.validate()?;
        let weights = match spec.mechanism {
            Mechanism::DyConv => {
                let hidden = spec.dyconv_hidden_units(shape.c_in);
                ConvWeights::Dynamic(DyConvExperts::new(
                    store,
                    &format!("{name}.dyconv"),
                    &shape,
                    spec.experts,
                    spec.temperature,
                    hidden,
                    rng,
                )?)
            }
            _ => ConvWeights::Static(store.add(format!("{name}.weight"), init_kernel(&shape, rng), false)),
        };
        let attention = match spec.mechanism {
            Mechanism::Static | Mechanism::DyConv => ConvAttention::None,
            Mechanism::Se | Mechanism::Sb => {
                let hidden = spec.hidden_units(shape.c_out, shape.is_depthwise());
                let branch_name = format!("{name}.{}", spec.mechanism.name());
                let mut branch =
                    AttentionBranch::new(store, &branch_name, shape.c_in, hidden, shape.c_out, spec.gate(), rng)?
                        .with_norm_order(spec.norm_order);
                if spec.dropout > 0.0 {
                    branch = branch.with_dropout(DropoutConfig { rate: spec.dropout, rng_seed: rng.gen() })?;
                }
                if spec.mechanism == Mechanism::Se {
                    ConvAttention::Se(branch)
                } else {
                    let sb = SbParams::new(store, &branch_name, shape.c_out, spec.lambda_init);
                    ConvAttention::Sb(branch, sb)
                }
            }
        };
        Ok(Self { name: name.to_string(), shape, weights, attention })
    }

    pub fn mechanism(&self) -> Mechanism {
        match (&self.weights, &self.attention) {
            (ConvWeights::Dynamic(_), _) => Mechanism::DyConv,
            (_, ConvAttention::Se(_)) => Mechanism::Se,
            (_, ConvAttention::Sb(..)) => Mechanism::Sb,
            _ => Mechanism::Static,
        }
    }

    pub fn branch(&self) -> Option<&AttentionBranch> {
        match &self.attention {
            ConvAttention::Se(b) | ConvAttention::Sb(b, _) => Some(b),
            ConvAttention::None => match &self.weights {
                ConvWeights::Dynamic(d) => Some(&d.branch),
                ConvWeights::Static(_) => None,
            },
        }
    }

    pub fn lambda(&self) -> Option<ParamId> {
        match &self.attention {
            ConvAttention::Sb(_, sb) => Some(sb.lambda),
            _ => None,
        }
    }

    /// Parameters of the convolution itself (all experts for DyConv).
    pub fn conv_param_count(&self) -> usize {
        match &self.weights {
            ConvWeights::Static(_) => self.shape.weight_count(),
            ConvWeights::Dynamic(d) => d.experts.len() * self.shape.weight_count(),
        }
    }

    /// Parameters added on top of a static convolution.
    pub fn attention_param_count(&self) -> usize {
        let branch = self.branch().map_or(0, AttentionBranch::param_count);
        let lambda = if self.lambda().is_some() { self.shape.c_out } else { 0 };
        let extra_experts = match &self.weights {
            ConvWeights::Dynamic(d) => (d.experts.len() - 1) * self.shape.weight_count(),
            ConvWeights::Static(_) => 0,
        };
        branch + lambda + extra_experts
    }

    pub fn param_count(&self) -> usize {
        self.shape.weight_count() + self.attention_param_count()
    }

    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let s = self.shape;
        let t = match &mut self.weights {
            ConvWeights::Static(id) => {
                let k = g.param(store, *id);
                g.conv2d(x, k, s.stride, s.padding, s.groups)?
            }
            ConvWeights::Dynamic(d) => dyconv_forward(g, store, x, d, s.stride, s.padding, s.groups, mode)?,
        };
        match &mut self.attention {
            ConvAttention::None => Ok(t),
            ConvAttention::Se(branch) => {
                let a = branch.forward(g, store, x, mode)?;
                se_combine(g, t, a)
            }
            ConvAttention::Sb(branch, sb) => {
                let a = branch.forward(g, store, x, mode)?;
                let lambda = g.param(store, sb.lambda);
                sb_combine(g, t, a, lambda)
            }
        }
    }
}
