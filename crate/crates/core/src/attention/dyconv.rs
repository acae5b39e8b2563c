//! Dynamic convolution: a per-sample convex combination of expert kernels.

use rand::Rng;

use super::conv::{init_kernel, ConvShape};
use super::{AttentionBranch, GateKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Mode;
use crate::param::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct DyConvExperts {
    pub experts: Vec<ParamId>,
    pub temperature: f64,
    /// Maps `c_in` to one logit per expert; softmax-gated with `temperature`.
    pub branch: AttentionBranch,
}

impl DyConvExperts {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: &ConvShape,
        n: usize,
        temperature: f64,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n < 1 {
            return Err(Error::Config(format!("`{name}`: dynamic convolution needs at least one expert")));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("`{name}`: temperature must be positive")));
        }
        let experts = (0..n).map(|i| store.add(format!("{name}.expert{i}"), init_kernel(shape, rng), false)).collect();
        let branch =
            AttentionBranch::new(store, &format!("{name}.branch"), shape.c_in, hidden, n, GateKind::Softmax, rng)?
                .with_temperature(temperature);
        Ok(Self { experts, temperature, branch })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Mixing weights `[N, n]` for a batch; each row lies on the simplex.
    pub fn mixing_weights(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        self.branch.temperature = self.temperature;
        self.branch.forward(g, store, x, mode)
    }
}

/// Convolves each sample with its own mixed kernel `Σ_i π_i(x) W_i` and
/// concatenates the results along the batch axis.
#[allow(clippy::too_many_arguments)]
pub fn dyconv_forward(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    d: &mut DyConvExperts,
    stride: usize,
    padding: usize,
    groups: usize,
    mode: Mode,
) -> Result<Var> {
    if d.experts.is_empty() {
        return Err(Error::Config("dynamic convolution needs at least one expert".into()));
    }
    let [n, ..] = g.value(x).nchw("dyconv")?;
    let experts: Vec<Var> = d.experts.iter().map(|&id| g.param(store, id)).collect();
    let pi = d.mixing_weights(g, store, x, mode)?;
    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        let kernel = g.kernel_mixture(pi, i, &experts)?;
        let sample = g.select_sample(x, i)?;
        outputs.push(g.conv2d(sample, kernel, stride, padding, groups)?);
    }
    g.concat_batch(&outputs)
}
