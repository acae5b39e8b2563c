//! Closed-form parameter and multiply/add accounting.
//!
//! Conventions: one multiply-accumulate counts as one multiply and one add;
//! FC biases fold into the accumulation; BN is treated as fused into the
//! preceding conv and activations are free. MAdds is the multiply count.
//! Under these rules the analytic totals equal what the graph's op counter
//! records for an eval-mode forward pass of the same input.

use serde::{Deserialize, Serialize};

use crate::attention::{ConvWeights, Mechanism};
use crate::error::{Error, Result};
use crate::model::{LayerDescription, Model, ModelDescription};

/// Extra `(multiplies, adds)` of an SE or SB branch plus its combine on a
/// conv with `c_in` inputs and `c_out` outputs over an `h × w` map.
///
/// SB: `c_in + c_in·c_hid + c_hid·c_out + c_out` multiplies and
/// `c_in·h·w + c_in·c_hid + c_hid·c_out + c_out·h·w` adds.
/// SE swaps the combine for `c_out·h·w` multiplies and no adds.
pub fn attention_overhead(
    c_in: usize,
    c_out: usize,
    c_hid: usize,
    h: usize,
    w: usize,
    mechanism: Mechanism,
) -> Result<(u64, u64)> {
    attention_overhead_between(c_in, c_out, c_hid, [h, w], [h, w], mechanism)
}

/// As [`attention_overhead`], with pooling over the conv input extent and
/// the combine over the (possibly strided) output extent.
pub fn attention_overhead_between(
    c_in: usize,
    c_out: usize,
    c_hid: usize,
    input_hw: [usize; 2],
    output_hw: [usize; 2],
    mechanism: Mechanism,
) -> Result<(u64, u64)> {
    if [c_in, c_out, c_hid, input_hw[0], input_hw[1], output_hw[0], output_hw[1]].contains(&0) {
        return Err(Error::Contract("attention overhead needs positive extents".into()));
    }
    let (c_in, c_out, c_hid) = (c_in as u64, c_out as u64, c_hid as u64);
    let hw_in = (input_hw[0] * input_hw[1]) as u64;
    let hw_out = (output_hw[0] * output_hw[1]) as u64;
    let branch_mul = c_in + c_in * c_hid + c_hid * c_out;
    let branch_add = c_in * hw_in + c_in * c_hid + c_hid * c_out;
    match mechanism {
        Mechanism::Sb => Ok((branch_mul + c_out, branch_add + c_out * hw_out)),
        Mechanism::Se => Ok((branch_mul + c_out * hw_out, branch_add)),
        other => Err(Error::Contract(format!("no closed-form overhead for `{}`", other.name()))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub multiplies: u64,
    pub adds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    pub multiplies: u64,
    pub adds: u64,
    pub madds: u64,
    pub breakdown: Vec<LayerCost>,
}

impl CostReport {
    fn from_breakdown(breakdown: Vec<LayerCost>) -> Self {
        let params = breakdown.iter().map(|l| l.params).sum();
        let multiplies = breakdown.iter().map(|l| l.multiplies).sum();
        let adds = breakdown.iter().map(|l| l.adds).sum();
        Self { params, multiplies, adds, madds: multiplies, breakdown }
    }
}

pub fn count_params(model: &Model) -> u64 {
    model.param_count() as u64
}

fn layer_cost(layer: &LayerDescription, input_hw: [usize; 2]) -> Result<(LayerCost, [usize; 2])> {
    if layer.kind == "fc" {
        let macs = (layer.c_in * layer.c_out) as u64;
        return Ok((
            LayerCost {
                name: layer.name.clone(),
                kind: layer.kind.clone(),
                params: layer.params as u64,
                multiplies: macs,
                adds: macs,
            },
            [1, 1],
        ));
    }
    let k = layer.kernel;
    let out = |len: usize| -> Result<usize> {
        let padded = len + 2 * (k / 2);
        if padded < k {
            return Err(Error::dim("count_madds", format!("{} input {len} smaller than kernel {k}", layer.name)));
        }
        Ok((padded - k) / layer.stride + 1)
    };
    let output_hw = [out(input_hw[0])?, out(input_hw[1])?];
    let weights = (layer.c_out * (layer.c_in / layer.groups) * k * k) as u64;
    let macs = weights * (output_hw[0] * output_hw[1]) as u64;
    let (mut multiplies, mut adds) = (macs, macs);
    match layer.mechanism {
        Mechanism::Se | Mechanism::Sb => {
            let (m, a) = attention_overhead_between(
                layer.c_in,
                layer.c_out,
                layer.branch_hidden,
                input_hw,
                output_hw,
                layer.mechanism,
            )?;
            multiplies += m;
            adds += a;
        }
        Mechanism::DyConv => {
            // Pool, two FCs into one logit per expert, then the kernel mixture.
            let (c_in, hid, n) = (layer.c_in as u64, layer.branch_hidden as u64, layer.experts as u64);
            let hw_in = (input_hw[0] * input_hw[1]) as u64;
            multiplies += c_in + c_in * hid + hid * n + n * weights;
            adds += c_in * hw_in + c_in * hid + hid * n + (n - 1) * weights;
        }
        Mechanism::Static => {}
    }
    Ok((
        LayerCost { name: layer.name.clone(), kind: layer.kind.clone(), params: layer.params as u64, multiplies, adds },
        output_hw,
    ))
}

/// Per-layer costs of one forward pass over a `[N, 3, H, W]` input, from a
/// model description.
pub fn count_description(desc: &ModelDescription, input_shape: [usize; 4]) -> Result<CostReport> {
    let [n, c, h, w] = input_shape;
    let expected = desc.layers.first().map_or(3, |l| l.c_in);
    if c != expected || n == 0 || h == 0 || w == 0 {
        return Err(Error::dim("count_madds", format!("input {input_shape:?} for a {expected}-channel model")));
    }
    let mut hw = [h, w];
    let mut breakdown = Vec::new();
    for layer in &desc.layers {
        if layer.kind == "fc" && hw != [1, 1] {
            // Global average pooling in front of the classifier.
            let (c, area) = (layer.c_in as u64, (hw[0] * hw[1]) as u64);
            breakdown.push(LayerCost {
                name: format!("{}.pool", layer.name),
                kind: "pool".into(),
                params: 0,
                multiplies: n as u64 * c,
                adds: n as u64 * c * area,
            });
        }
        let (mut cost, out) = layer_cost(layer, hw)?;
        cost.multiplies *= n as u64;
        cost.adds *= n as u64;
        breakdown.push(cost);
        hw = out;
        if layer.residual {
            let block = layer.name.split('.').next().unwrap_or(&layer.name);
            breakdown.push(LayerCost {
                name: format!("{block}.residual"),
                kind: "residual".into(),
                params: 0,
                multiplies: 0,
                adds: (n * layer.c_out * hw[0] * hw[1]) as u64,
            });
        }
    }
    Ok(CostReport::from_breakdown(breakdown))
}

/// Analytic multiply/add counts of one forward pass of `model` over
/// `input_shape`; parameters in the breakdown include BN affine terms.
pub fn count_madds(model: &Model, input_shape: [usize; 4]) -> Result<CostReport> {
    count_description(&model.describe(), input_shape)
}

/// Parameters added by all attention sites; for DyConv this includes the
/// extra experts beyond one static kernel.
pub fn attention_params(model: &Model) -> u64 {
    model.units().map(|u| u.conv.attention_param_count() as u64).sum()
}

/// Element count of every expert kernel in a DyConv model.
pub fn expert_params(model: &Model) -> u64 {
    model
        .units()
        .filter_map(|u| match &u.conv.weights {
            ConvWeights::Dynamic(d) => Some((d.len() * u.conv.shape.weight_count()) as u64),
            ConvWeights::Static(_) => None,
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sb_overhead_example() {
        assert_eq!(attention_overhead(16, 16, 16, 32, 32, Mechanism::Sb).unwrap(), (544, 33280));
    }

    #[test]
    fn se_overhead_moves_combine_into_multiplies() {
        let (m, a) = attention_overhead(16, 16, 16, 32, 32, Mechanism::Se).unwrap();
        assert_eq!(m, 16 + 256 + 256 + 16 * 1024);
        assert_eq!(a, 16384 + 256 + 256);
    }

    #[test]
    fn degenerate_extents_rejected() {
        assert!(matches!(attention_overhead(16, 16, 0, 32, 32, Mechanism::Sb), Err(Error::Contract(_))));
        assert!(matches!(attention_overhead(16, 16, 4, 0, 32, Mechanism::Se), Err(Error::Contract(_))));
        assert!(attention_overhead(16, 16, 4, 8, 8, Mechanism::Static).is_err());
    }
}
