//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst coordinate found by [`grad_check_report`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub input: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences, coordinate by coordinate, and returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` builds a scalar from leaves holding `point`; it is called once for
/// the analytic pass and twice per coordinate, each time on a fresh graph,
/// so it must be a pure function of its inputs.
pub fn grad_check<F>(point: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    grad_check_report(point, eps, f).map(|r| r.max_relative_error)
}

pub fn grad_check_report<F>(point: &[Tensor], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check step {eps} outside [1e-7, 1e-3]")));
    }
    let mut graph = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| graph.input(t.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&graph, v)).collect();

    let mut probe = point.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, input: 0, coordinate: 0, analytic: 0.0, numeric: 0.0 };
    for i in 0..probe.len() {
        for j in 0..probe[i].numel() {
            let original = probe[i].data()[j];
            probe[i].data_mut()[j] = original + eps;
            let plus = evaluate(&probe, &mut f, i, j)?;
            probe[i].data_mut()[j] = original - eps;
            let minus = evaluate(&probe, &mut f, i, j)?;
            probe[i].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if err > report.max_relative_error {
                report = GradCheckReport { max_relative_error: err, input: i, coordinate: j, analytic: a, numeric };
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(point: &[Tensor], f: &mut F, input: usize, coordinate: usize) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| graph.input(t.clone())).collect();
    let non_finite = || Error::NonFinite { op: "grad_check", scope: format!("input {input}, coordinate {coordinate}") };
    let out = match f(&mut graph, &vars) {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) => return Err(non_finite()),
        Err(e) => return Err(e),
    };
    let value = graph.value(out).item()?;
    if !value.is_finite() {
        return Err(non_finite());
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_polynomial_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = grad_check(&[x], 1e-5, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-7, "err {err}");
    }

    #[test]
    fn rejects_step_outside_range() {
        let x = Tensor::ones(&[2]);
        assert!(matches!(grad_check(std::slice::from_ref(&x), 1e-2, |g, v| g.sum(v[0])), Err(Error::Contract(_))));
        assert!(matches!(grad_check(&[x], 1e-9, |g, v| g.sum(v[0])), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_probe_names_the_coordinate() {
        // 1.797e308 is finite; nudging the second coordinate up overflows.
        let x = Tensor::new(vec![2], vec![0.5, 1.797]).unwrap();
        let err = grad_check(&[x], 1e-3, |g, v| {
            let big = g.scale(v[0], 1e308)?;
            let w = Tensor::new(vec![2], vec![1e-308, 1.0]).unwrap();
            g.weighted_sum(big, w)
        })
        .unwrap_err();
        match err {
            Error::NonFinite { scope, .. } => assert!(scope.contains("coordinate 1"), "{scope}"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
