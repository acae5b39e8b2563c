use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbattn::attention::{
    dyconv_forward, sb_combine, se_combine, AttentionBranch, AttentiveConv, ConvShape, ConvWeights, DyConvExperts,
    SaturationProbe,
};
use sbattn::{grad_check, AttentionSpec, Error, GateKind, Graph, Mechanism, Mode, ParamStore, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Randomizes every parameter of a branch, including biases and BN affine terms.
fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::randn(&shape, 0.5, rng));
    }
}

fn branch_oracle(store: &ParamStore, b: &AttentionBranch, x: &Tensor) -> Vec<Vec<f64>> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let hw = h * w;
    let pooled: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..c).map(|ch| x.data()[(i * c + ch) * hw..][..hw].iter().sum::<f64>() / hw as f64).collect())
        .collect();
    let fc = |input: &[f64], wid, bid, c_in: usize, c_out: usize| -> Vec<f64> {
        let wt = store.value(wid).data();
        let bs = store.value(bid).data();
        (0..c_out).map(|o| bs[o] + (0..c_in).map(|i| input[i] * wt[i * c_out + o]).sum::<f64>()).collect()
    };
    let hid: Vec<Vec<f64>> = pooled.iter().map(|p| fc(p, b.fc1.weight, b.fc1.bias, c, b.c_hid())).collect();
    let gamma = store.value(b.bn.gamma).data();
    let beta = store.value(b.bn.beta).data();
    let mut normed = hid.clone();
    for j in 0..b.c_hid() {
        let mean = hid.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = hid.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        for (i, row) in normed.iter_mut().enumerate() {
            row[j] = (gamma[j] * (hid[i][j] - mean) / (var + 1e-5).sqrt() + beta[j]).max(0.0);
        }
    }
    normed
        .iter()
        .map(|r| fc(r, b.fc2.weight, b.fc2.bias, b.c_hid(), b.c_out()).into_iter().map(f64::tanh).collect())
        .collect()
}

#[test]
fn tanh_branch_matches_hand_composed_pipeline() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let mut b = AttentionBranch::new(&mut store, "b", 5, 7, 6, GateKind::Tanh, &mut r).unwrap();
    randomize(&mut store, &mut r);
    let x = Tensor::randn(&[3, 5, 4, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let a = b.forward(&mut g, &store, xv, Mode::Train).unwrap();
    let expect = branch_oracle(&store, &b, &x);
    for (i, row) in expect.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            let got = g.value(a).data()[i * 6 + j];
            assert!((got - e).abs() < 1e-12, "({i},{j}) {got} vs {e}");
            assert!(got > -1.0 && got < 1.0);
        }
    }
}

#[test]
fn gate_ranges_hold() {
    for gate in [GateKind::Tanh, GateKind::Sigmoid, GateKind::Softmax] {
        for seed in 0..20 {
            let mut r = rng(seed);
            let mut store = ParamStore::new();
            let mut b = AttentionBranch::new(&mut store, "b", 4, 4, 5, gate, &mut r).unwrap();
            randomize(&mut store, &mut r);
            let mut g = Graph::new();
            let x = g.input(Tensor::randn(&[3, 4, 3, 3], 2.0, &mut r));
            let a = b.forward(&mut g, &store, x, Mode::Train).unwrap();
            let data = g.value(a).data();
            match gate {
                GateKind::Tanh => assert!(data.iter().all(|&v| v > -1.0 && v < 1.0)),
                GateKind::Sigmoid => assert!(data.iter().all(|&v| v > 0.0 && v < 1.0)),
                _ => {
                    for row in data.chunks(5) {
                        assert!(row.iter().all(|&v| v >= 0.0));
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

fn attentive(mechanism: Mechanism, gate: GateKind, seed: u64) -> (ParamStore, AttentiveConv) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let spec = AttentionSpec::new(mechanism).with_gate(gate);
    let conv = AttentiveConv::new(&mut store, "blk", ConvShape::full(3, 4, 3, 1), &spec, &mut r).unwrap();
    (store, conv)
}

#[test]
fn shifted_output_stays_within_lambda_band() {
    for case in 0..1000u64 {
        let (mut store, mut conv) = attentive(Mechanism::Sb, GateKind::Tanh, case);
        let mut r = rng(case + 5000);
        randomize(&mut store, &mut r);
        let lambda_id = conv.lambda().unwrap();
        let max_lambda = store.value(lambda_id).max_abs();
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0 + r.gen::<f64>() * 3.0, &mut r);

        let mut g = Graph::new();
        let xv = g.input(x);
        let y = conv.forward(&mut g, &store, xv, Mode::Train).unwrap();
        let ConvWeights::Static(k) = &conv.weights else { unreachable!() };
        let kv = g.param(&store, *k);
        let t = g.conv2d(xv, kv, 1, 1, 1).unwrap();
        let gap = g.value(y).max_abs_diff(g.value(t)).unwrap();
        assert!(gap <= max_lambda, "case {case}: {gap} > {max_lambda}");
    }
}

#[test]
fn scaled_output_lies_between_zero_and_trunk() {
    for case in 0..200u64 {
        let mut r = rng(case);
        let mut g = Graph::new();
        let t = Tensor::randn(&[2, 3, 3, 3], 2.0, &mut r);
        let a = Tensor::from_fn(&[2, 3], |_| r.gen_range(1e-6..1.0 - 1e-6));
        let tv = g.input(t.clone());
        let av = g.input(a);
        let y = se_combine(&mut g, tv, av).unwrap();
        for (&yv, &tv) in g.value(y).data().iter().zip(t.data()) {
            if tv >= 0.0 {
                assert!(0.0 <= yv && yv <= tv);
            } else {
                assert!(tv <= yv && yv <= 0.0);
            }
        }
    }
}

#[test]
fn scaled_trunk_gradient_is_attention_times_conv_gradient() {
    let mut probe = SaturationProbe::new(Mechanism::Se, 3).unwrap();
    let p = probe.gradients(0.7).unwrap();

    // Trunk-path gradient of sum(a ⊙ T(x)) is the conv gradient under
    // an output weighting of a broadcast over space.
    let [n, c, h, w] = [4, 8, 6, 6];
    let weights = Tensor::from_fn(&[n, c, h, w], |i| p.attention.data()[i / (h * w)]);
    let mut g = Graph::new();
    let x = g.input(probe.input.clone());
    let k = g.param(&probe.store, probe.trunk);
    let t = g.conv2d(x, k, 1, 1, 1).unwrap();
    let loss = g.weighted_sum(t, weights).unwrap();
    let grads = g.backward(loss).unwrap();
    let expect = grads.get_or_zeros(&g, x);
    let diff = p.trunk.max_abs_diff(&expect).unwrap();
    assert!(diff < 1e-8, "diff {diff}");

    // Per channel, d loss / d T equals the forward attention value.
    let mut g = Graph::new();
    let tv = g.input(p.trunk_output.clone());
    let av = g.input(p.attention.clone());
    let y = se_combine(&mut g, tv, av).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    let gt = grads.get_or_zeros(&g, tv);
    for (i, &v) in gt.data().iter().enumerate() {
        assert!((v - p.attention.data()[i / (h * w)]).abs() < 1e-8);
    }
}

#[test]
fn shifted_trunk_gradient_ignores_the_branch() {
    let mut probe = SaturationProbe::new(Mechanism::Sb, 4).unwrap();
    let reference = probe.static_gradient().unwrap();
    for offset in [-20.0, -3.0, 0.0, 3.0, 20.0] {
        let p = probe.gradients(offset).unwrap();
        assert!(p.trunk.max_abs_diff(&reference).unwrap() < 1e-10);
    }
    probe.set_lambda(0.0);
    let p = probe.gradients(0.0).unwrap();
    assert!(p.input.max_abs_diff(&reference).unwrap() < 1e-12);
    assert_eq!(p.branch.max_abs(), 0.0);
}

#[test]
fn saturation_examples() {
    let se = sbattn::attention::saturation_sweep(Mechanism::Se, &[0.0, -20.0]).unwrap();
    assert!(se[1].input_grad_norm / se[0].input_grad_norm < 1e-6);

    let mut probe = SaturationProbe::new(Mechanism::Sb, sbattn::attention::saturation::PROBE_SEED).unwrap();
    let static_norm = probe.static_gradient().unwrap().norm();
    let sb = sbattn::attention::saturation_sweep(Mechanism::Sb, &[-20.0, 0.0, 20.0]).unwrap();
    for row in &sb {
        assert!((row.trunk_grad_norm - static_norm).abs() < 1e-10);
    }
    assert!(sb[1].branch_grad_norm > 0.0);
    assert!(probe.row(0.0).unwrap().branch_grad_norm > 0.0);
}

#[test]
fn sweep_rejects_unsupported_mechanisms() {
    for m in [Mechanism::Static, Mechanism::DyConv] {
        assert!(matches!(sbattn::attention::saturation_sweep(m, &[0.0]), Err(Error::Config(_))));
    }
}

fn dyconv_setup(n: usize, temperature: f64, seed: u64) -> (ParamStore, DyConvExperts, Tensor) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let shape = ConvShape::full(4, 6, 3, 1);
    let d = DyConvExperts::new(&mut store, "dy", &shape, n, temperature, 2, &mut r).unwrap();
    let x = Tensor::randn(&[3, 4, 5, 5], 1.0, &mut r);
    (store, d, x)
}

fn static_conv(x: &Tensor, kernel: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let kv = g.input(kernel.clone());
    let y = g.conv2d(xv, kv, 1, 1, 1).unwrap();
    g.value(y).clone()
}

fn run_dyconv(store: &ParamStore, d: &mut DyConvExperts, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = dyconv_forward(&mut g, store, xv, d, 1, 1, 1, Mode::Train).unwrap();
    g.value(y).clone()
}

#[test]
fn single_expert_is_a_static_conv() {
    let (store, mut d, x) = dyconv_setup(1, 30.0, 1);
    let y = run_dyconv(&store, &mut d, &x);
    let expect = static_conv(&x, store.value(d.experts[0]));
    assert_eq!(y, expect);
}

#[test]
fn one_hot_mixture_selects_an_expert() {
    for j in 0..4 {
        let (mut store, mut d, x) = dyconv_setup(4, 1.0, 2);
        let mut bias = Tensor::zeros(&[4]);
        bias.data_mut()[j] = 1000.0;
        store.set_value(d.branch.pre_gate_bias(), bias);
        let y = run_dyconv(&store, &mut d, &x);
        let expect = static_conv(&x, store.value(d.experts[j]));
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-9);
    }
}

#[test]
fn identical_experts_reduce_to_one_kernel() {
    let (mut store, mut d, x) = dyconv_setup(4, 30.0, 3);
    let w = store.value(d.experts[0]).clone();
    for &id in &d.experts[1..] {
        store.set_value(id, w.clone());
    }
    let y = run_dyconv(&store, &mut d, &x);
    assert!(y.max_abs_diff(&static_conv(&x, &w)).unwrap() < 1e-12);
}

#[test]
fn mixing_weights_lie_on_the_simplex() {
    for (temperature, uniform) in [(30.0, false), (1.0, false), (1e6, true)] {
        let (mut store, mut d, x) = dyconv_setup(4, temperature, 4);
        randomize(&mut store, &mut rng(9));
        let mut g = Graph::new();
        let xv = g.input(x);
        let pi = d.mixing_weights(&mut g, &store, xv, Mode::Train).unwrap();
        for row in g.value(pi).data().chunks(4) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if uniform {
                assert!(row.iter().all(|&p| (p - 0.25).abs() < 1e-3));
            }
        }
    }
}

#[test]
fn zero_experts_rejected() {
    let mut store = ParamStore::new();
    let shape = ConvShape::full(4, 6, 3, 1);
    let err = DyConvExperts::new(&mut store, "dy", &shape, 0, 30.0, 2, &mut rng(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

/// Grad check over the input, the trunk kernel and (for SB) λ.
fn block_grad_check(mechanism: Mechanism, gate: GateKind, seed: u64) -> f64 {
    let (mut store, conv) = attentive(mechanism, gate, seed);
    let mut r = rng(seed + 100);
    randomize(&mut store, &mut r);
    let x = Tensor::randn(&[3, 3, 4, 4], 1.0, &mut r);
    let weights = Tensor::randn(&[3, 4, 4, 4], 1.0, &mut r);
    let mut bound = vec![];
    match &conv.weights {
        ConvWeights::Static(k) => bound.push(*k),
        ConvWeights::Dynamic(d) => bound.extend(d.experts.iter().copied()),
    }
    bound.extend(conv.lambda());
    let mut point = vec![x];
    point.extend(bound.iter().map(|&id| store.value(id).clone()));
    grad_check(&point, 1e-5, |g, v| {
        for (&id, &var) in bound.iter().zip(&v[1..]) {
            g.bind_param(id, var);
        }
        let mut conv = conv.clone();
        let y = conv.forward(g, &store, v[0], Mode::Train)?;
        g.weighted_sum(y, weights.clone())
    })
    .unwrap()
}

#[test]
fn whole_block_grad_checks() {
    for gate in GateKind::ALL {
        let err = block_grad_check(Mechanism::Sb, gate, 21);
        assert!(err < 1e-4, "SB {gate:?}: {err}");
    }
    let err = block_grad_check(Mechanism::Se, GateKind::Sigmoid, 22);
    assert!(err < 1e-4, "SE: {err}");
    let err = block_grad_check(Mechanism::DyConv, GateKind::Softmax, 23);
    assert!(err < 1e-4, "DyConv: {err}");
}

#[test]
fn sb_combine_with_zero_lambda_is_exact_identity() {
    let mut r = rng(5);
    let mut g = Graph::new();
    let t = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let tv = g.input(t.clone());
    let a = g.input(Tensor::randn(&[2, 3], 1.0, &mut r));
    let l = g.input(Tensor::zeros(&[3]));
    let y = sb_combine(&mut g, tv, a, l).unwrap();
    assert_eq!(g.value(y), &t);
}

#[test]
fn attentive_conv_parameter_accounting() {
    let spec = AttentionSpec::new(Mechanism::Sb);
    let mut store = ParamStore::new();
    let conv = AttentiveConv::new(&mut store, "c", ConvShape::depthwise(12, 3, 1), &spec, &mut rng(0)).unwrap();
    // branch: 12·2+2 + 2·2 (BN) + 2·12+12, plus λ
    assert_eq!(conv.attention_param_count(), 26 + 4 + 36 + 12);
    assert_eq!(conv.param_count(), store.numel());
    let lambda = store.get(conv.lambda().unwrap());
    assert!(lambda.decay_exempt);
    assert!(lambda.value.data().iter().all(|&v| v == 0.1));
}
