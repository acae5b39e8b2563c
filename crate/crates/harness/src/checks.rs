//! Seeded gradient checks over single layers and whole attentive convs,
//! shared by the `grad-check` subcommand and the acceptance suite.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbattn::attention::{sb_combine, AttentionBranch, AttentiveConv, ConvShape, ConvWeights};
use sbattn::layers::{Dropout, DropoutConfig};
use sbattn::{
    grad_check_report, AttentionSpec, GateKind, GradCheckReport, Graph, Mechanism, Mode, ParamStore, Result, Tensor,
    Var,
};
use serde::Serialize;

/// Finite-difference step used by every check.
pub const EPS: f64 = 1e-5;
/// Acceptance bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Projection scale for checks that run BN in train mode. A bias feeding
/// such a BN has an exact zero gradient, and its central difference is pure
/// roundoff proportional to the loss magnitude; a small loss keeps that
/// roundoff under the 1e-8 floor of the error metric. Relative error on the
/// other coordinates does not depend on this scale.
pub const INERT_SAFE_PROJECTION_STD: f64 = 1e-4;

/// Individually checked layers and ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerCase {
    Conv,
    StridedConv,
    Depthwise,
    Pointwise,
    Linear,
    BatchNormTrain,
    BatchNormEval,
    GlobalAvgPool,
    Relu,
    Relu6,
    Tanh,
    Sigmoid,
    Softmax,
    Dropout,
    AttentionBranch,
    ScaleChannels,
    ShiftChannels,
    ChannelGain,
    KernelMixture,
    CrossEntropy,
    ResidualAdd,
}

impl LayerCase {
    pub const ALL: [LayerCase; 21] = [
        LayerCase::Conv,
        LayerCase::StridedConv,
        LayerCase::Depthwise,
        LayerCase::Pointwise,
        LayerCase::Linear,
        LayerCase::BatchNormTrain,
        LayerCase::BatchNormEval,
        LayerCase::GlobalAvgPool,
        LayerCase::Relu,
        LayerCase::Relu6,
        LayerCase::Tanh,
        LayerCase::Sigmoid,
        LayerCase::Softmax,
        LayerCase::Dropout,
        LayerCase::AttentionBranch,
        LayerCase::ScaleChannels,
        LayerCase::ShiftChannels,
        LayerCase::ChannelGain,
        LayerCase::KernelMixture,
        LayerCase::CrossEntropy,
        LayerCase::ResidualAdd,
    ];
}

impl fmt::Display for LayerCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduces `y` to a scalar with fixed random weights so that every output
/// coordinate contributes a distinct amount.
fn project(g: &mut Graph, y: Var, std: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let weights = Tensor::randn(g.shape(y), std, rng);
    g.weighted_sum(y, weights)
}

/// Largest relative gradient error of one layer at one seeded point.
pub fn layer_grad_check(case: LayerCase, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    // Every evaluation must see the same projection weights.
    let projected = |g: &mut Graph, y: Var, std: f64| project(g, y, std, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd));
    let fixed = |g: &mut Graph, y: Var| projected(g, y, 1.0);
    let x4 = |shape: [usize; 4], r: &mut ChaCha8Rng| randn(&shape, r);
    match case {
        LayerCase::Conv | LayerCase::StridedConv | LayerCase::Depthwise | LayerCase::Pointwise => {
            let (shape, stride) = match case {
                LayerCase::Conv => (ConvShape::full(3, 4, 3, 1), 1),
                LayerCase::StridedConv => (ConvShape::full(3, 4, 3, 2), 2),
                LayerCase::Depthwise => (ConvShape::depthwise(4, 3, 1), 1),
                _ => (ConvShape::pointwise(4, 5), 1),
            };
            let x = x4([2, shape.c_in, 5, 5], r);
            let k = randn(&shape.kernel_shape(), r);
            grad_check_report(&[x, k], EPS, |g, v| {
                let y = g.conv2d(v[0], v[1], stride, shape.padding, shape.groups)?;
                fixed(g, y)
            })
        }
        LayerCase::Linear => {
            let (x, w, b) = (randn(&[3, 4], r), randn(&[4, 5], r), randn(&[5], r));
            grad_check_report(&[x, w, b], EPS, |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                fixed(g, y)
            })
        }
        LayerCase::BatchNormTrain | LayerCase::BatchNormEval => {
            let x = x4([3, 4, 2, 2], r);
            let (gamma, beta) = (randn(&[4], r), randn(&[4], r));
            let mean: Vec<f64> = (0..4).map(|i| 0.1 * i as f64).collect();
            let var: Vec<f64> = (0..4).map(|i| 0.5 + 0.25 * i as f64).collect();
            grad_check_report(&[x, gamma, beta], EPS, |g, v| {
                let y = if case == LayerCase::BatchNormTrain {
                    g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0
                } else {
                    g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?
                };
                fixed(g, y)
            })
        }
        LayerCase::GlobalAvgPool => grad_check_report(&[x4([2, 3, 3, 3], r)], EPS, |g, v| {
            let y = g.global_avg_pool(v[0])?;
            fixed(g, y)
        }),
        LayerCase::Relu | LayerCase::Relu6 | LayerCase::Tanh | LayerCase::Sigmoid => {
            // Spread values past the ReLU6 ceiling. The smooth gates stay near
            // unit scale: deep in saturation their gradients are too small for
            // central differences to resolve.
            let std = if matches!(case, LayerCase::Relu | LayerCase::Relu6) { 3.0 } else { 1.0 };
            let x = Tensor::randn(&[2, 3, 3, 3], std, r);
            grad_check_report(&[x], EPS, |g, v| {
                let y = match case {
                    LayerCase::Relu => g.relu(v[0])?,
                    LayerCase::Relu6 => g.relu6(v[0])?,
                    LayerCase::Tanh => g.tanh(v[0])?,
                    _ => g.sigmoid(v[0])?,
                };
                fixed(g, y)
            })
        }
        LayerCase::Softmax => grad_check_report(&[randn(&[3, 5], r)], EPS, |g, v| {
            let y = g.softmax(v[0], 0.7)?;
            fixed(g, y)
        }),
        LayerCase::Dropout => {
            let x = x4([2, 3, 2, 2], r);
            let config = DropoutConfig { rate: 0.3, rng_seed: seed };
            grad_check_report(&[x], EPS, |g, v| {
                let mut layer = Dropout::new(config)?;
                let y = layer.forward(g, v[0], Mode::Train)?;
                fixed(g, y)
            })
        }
        LayerCase::AttentionBranch => {
            let mut store = ParamStore::new();
            let branch = AttentionBranch::new(&mut store, "branch", 4, 3, 5, GateKind::Tanh, r)?;
            randomize(&mut store, r);
            let x = x4([3, 4, 3, 3], r);
            check_with_params(x, &store, |g, store, x| {
                let y = branch.clone().forward(g, store, x, Mode::Train)?;
                projected(g, y, INERT_SAFE_PROJECTION_STD)
            })
        }
        LayerCase::ScaleChannels | LayerCase::ShiftChannels => {
            let (t, a) = (x4([2, 3, 2, 2], r), randn(&[2, 3], r));
            grad_check_report(&[t, a], EPS, |g, v| {
                let y = if case == LayerCase::ScaleChannels {
                    g.scale_channels(v[0], v[1])?
                } else {
                    g.shift_channels(v[0], v[1])?
                };
                fixed(g, y)
            })
        }
        LayerCase::ChannelGain => {
            let (t, a, lambda) = (x4([2, 3, 2, 2], r), randn(&[2, 3], r), randn(&[3], r));
            grad_check_report(&[t, a, lambda], EPS, |g, v| {
                let y = sb_combine(g, v[0], v[1], v[2])?;
                fixed(g, y)
            })
        }
        LayerCase::KernelMixture => {
            let weights = randn(&[2, 3], r);
            let experts: Vec<Tensor> = (0..3).map(|_| randn(&[2, 2, 3, 3], r)).collect();
            let mut point = vec![weights];
            point.extend(experts);
            grad_check_report(&point, EPS, |g, v| {
                let y = g.kernel_mixture(v[0], 1, &v[1..])?;
                fixed(g, y)
            })
        }
        LayerCase::CrossEntropy => {
            let labels = [0, 3, 1];
            grad_check_report(&[randn(&[3, 4], r)], EPS, |g, v| g.cross_entropy(v[0], &labels))
        }
        LayerCase::ResidualAdd => {
            let (a, b) = (x4([2, 3, 2, 2], r), x4([2, 3, 2, 2], r));
            grad_check_report(&[a, b], EPS, |g, v| {
                let y = g.add(v[0], v[1])?;
                fixed(g, y)
            })
        }
    }
}

/// Gives every parameter of `store` a unit-scale random value, so that
/// biases and BN affine terms are exercised away from their initial values.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::randn(&shape, 0.5, rng));
    }
}

/// Grad check over `x` and every parameter in `store`, each substituted by
/// a probed leaf.
fn check_with_params<F>(x: Tensor, store: &ParamStore, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore, Var) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let mut point = vec![x];
    point.extend(ids.iter().map(|&id| store.value(id).clone()));
    grad_check_report(&point, EPS, |g, v| {
        for (&id, &var) in ids.iter().zip(&v[1..]) {
            g.bind_param(id, var);
        }
        f(g, store, v[0])
    })
}

/// An attentive 3×3 conv (trunk conv, attention branch and combine) with
/// `gate` on its branch. For DyConv the gate replaces the softmax over
/// expert logits.
pub fn attentive_block(mechanism: Mechanism, gate: GateKind, seed: u64) -> Result<(ParamStore, AttentiveConv)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let spec = AttentionSpec::new(mechanism).with_gate(gate);
    let mut conv = AttentiveConv::new(&mut store, "block", ConvShape::full(3, 4, 3, 1), &spec, &mut rng)?;
    if let ConvWeights::Dynamic(d) = &mut conv.weights {
        d.branch.gate = gate;
    }
    randomize(&mut store, &mut rng);
    Ok((store, conv))
}

/// Grad check of a whole attentive block over its input and every
/// parameter, in train mode.
pub fn block_grad_check(mechanism: Mechanism, gate: GateKind, seed: u64) -> Result<GradCheckReport> {
    let (store, conv) = attentive_block(mechanism, gate, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1_000_003));
    let x = Tensor::randn(&[3, 3, 4, 4], 1.0, &mut rng);
    let weights = Tensor::randn(&[3, 4, 4, 4], INERT_SAFE_PROJECTION_STD, &mut rng);
    check_with_params(x, &store, |g, store, x| {
        let y = conv.clone().forward(g, store, x, Mode::Train)?;
        g.weighted_sum(y, weights.clone())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub subject: String,
    pub trials: usize,
    pub worst_seed: u64,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Runs `check` on seeds `0..trials` and keeps the worst error.
pub fn run_trials<F>(subject: impl Into<String>, trials: usize, mut check: F) -> Result<TrialSummary>
where
    F: FnMut(u64) -> Result<GradCheckReport>,
{
    let mut worst = (0, 0.0);
    for seed in 0..trials as u64 {
        let err = check(seed)?.max_relative_error;
        if err > worst.1 || err.is_nan() {
            worst = (seed, err);
        }
    }
    Ok(TrialSummary {
        subject: subject.into(),
        trials,
        worst_seed: worst.0,
        max_relative_error: worst.1,
        passed: worst.1 < TOLERANCE,
    })
}
