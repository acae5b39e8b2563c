//! Gradient saturation of scaled versus shifted attention.
//!
//! A probe block is one 3×3 conv trunk plus an attention branch reading the
//! same input. The input is fed in twice, once as the trunk leaf and once as
//! the branch leaf, so a single backward pass separates the two terms of
//! `∂y/∂x`: the trunk-path gradient and the branch-path gradient. Their sum
//! is the full input gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{init_kernel, ConvShape};
use super::{sb_combine, se_combine, AttentionBranch, GateKind, Mechanism, SbParams};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::Mode;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PROBE_INPUT_SHAPE: [usize; 4] = [4, 8, 6, 6];
pub const PROBE_HIDDEN: usize = 8;
pub const PROBE_SEED: u64 = 2020;

/// Gradients of the sum of the block output with respect to its input.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGradients {
    pub trunk: Tensor,
    pub branch: Tensor,
    pub input: Tensor,
    /// Branch output `a` of the forward pass, `[N, C]`.
    pub attention: Tensor,
    /// Trunk output `t`.
    pub trunk_output: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub offset: f64,
    pub trunk_grad_norm: f64,
    pub branch_grad_norm: f64,
    pub input_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SaturationProbe {
    pub mechanism: Mechanism,
    pub store: ParamStore,
    pub trunk: ParamId,
    pub branch: AttentionBranch,
    pub sb: Option<SbParams>,
    pub input: Tensor,
}

impl SaturationProbe {
    /// SE uses a sigmoid gate, SB a tanh gate with `λ = 0.1`.
    pub fn new(mechanism: Mechanism, seed: u64) -> Result<Self> {
        let gate = match mechanism {
            Mechanism::Se => GateKind::Sigmoid,
            Mechanism::Sb => GateKind::Tanh,
            other => {
                return Err(Error::Config(format!(
                    "saturation analysis needs an SE or SB block, got `{}`",
                    other.name()
                )))
            }
        };
        Self::with_gate(mechanism, gate, seed)
    }

    pub fn with_gate(mechanism: Mechanism, gate: GateKind, seed: u64) -> Result<Self> {
        if !matches!(mechanism, Mechanism::Se | Mechanism::Sb) {
            return Err(Error::Config(format!("unsupported mechanism `{}` for saturation analysis", mechanism.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [_, c, _, _] = PROBE_INPUT_SHAPE;
        let mut store = ParamStore::new();
        let trunk = store.add("probe.trunk", init_kernel(&ConvShape::full(c, c, 3, 1), &mut rng), false);
        let branch = AttentionBranch::new(&mut store, "probe.branch", c, PROBE_HIDDEN, c, gate, &mut rng)?;
        let sb = (mechanism == Mechanism::Sb).then(|| SbParams::new(&mut store, "probe", c, SbParams::DEFAULT_INIT));
        let input = Tensor::randn(&PROBE_INPUT_SHAPE, 1.0, &mut rng);
        Ok(Self { mechanism, store, trunk, branch, sb, input })
    }

    pub fn set_lambda(&mut self, value: f64) {
        if let Some(sb) = self.sb {
            let c = self.store.value(sb.lambda).numel();
            self.store.set_value(sb.lambda, Tensor::full(&[c], value));
        }
    }

    /// Forward/backward with `offset` added to the pre-gate bias.
    pub fn gradients(&mut self, offset: f64) -> Result<PathGradients> {
        let mut g = Graph::new();
        let x_trunk = g.input(self.input.clone());
        let x_branch = g.input(self.input.clone());
        let k = g.param(&self.store, self.trunk);
        let t = g.conv2d(x_trunk, k, 1, 1, 1)?;

        let bias_id = self.branch.pre_gate_bias();
        let original = self.store.value(bias_id).clone();
        self.store.set_value(bias_id, original.map(|b| b + offset));
        let a = self.branch.forward(&mut g, &self.store, x_branch, Mode::Train);
        self.store.set_value(bias_id, original);
        let a = a?;

        let y = match self.sb {
            None => se_combine(&mut g, t, a)?,
            Some(sb) => {
                let lambda = g.param(&self.store, sb.lambda);
                sb_combine(&mut g, t, a, lambda)?
            }
        };
        let loss = g.sum(y)?;
        let attention = g.value(a).clone();
        let trunk_output = g.value(t).clone();
        let grads = g.backward(loss)?;
        let trunk = grads.get_or_zeros(&g, x_trunk);
        let branch = grads.get_or_zeros(&g, x_branch);
        let mut input = trunk.clone();
        input.add_assign(&branch);
        Ok(PathGradients { trunk, branch, input, attention, trunk_output })
    }

    /// Input gradient of the bare conv trunk under the same sum loss.
    pub fn static_gradient(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(self.input.clone());
        let k = g.param(&self.store, self.trunk);
        let t = g.conv2d(x, k, 1, 1, 1)?;
        let loss = g.sum(t)?;
        let grads = g.backward(loss)?;
        Ok(grads.get_or_zeros(&g, x))
    }

    pub fn row(&mut self, offset: f64) -> Result<SweepRow> {
        let p = self.gradients(offset)?;
        Ok(SweepRow {
            offset,
            trunk_grad_norm: p.trunk.norm(),
            branch_grad_norm: p.branch.norm(),
            input_grad_norm: p.input.norm(),
        })
    }
}

/// Gradient norms of a seeded SE or SB probe block for each bias offset.
pub fn saturation_sweep(mechanism: Mechanism, offsets: &[f64]) -> Result<Vec<SweepRow>> {
    let mut probe = SaturationProbe::new(mechanism, PROBE_SEED)?;
    offsets.iter().map(|&o| probe.row(o)).collect()
}
