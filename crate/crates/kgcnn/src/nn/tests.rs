use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random values bounded away from zero so ReLU kinks are not straddled by
/// the finite-difference step.
fn random_tensor(n: usize, h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
    let data = (0..n * h * w * c)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor4::from_data(n, h, w, c, data).unwrap()
}

fn total_loss(
    spec: &[LayerSpec],
    state: &NetState,
    x: &Tensor4,
    ext: Option<&Tensor4>,
    target: &Tensor4,
) -> f64 {
    let mut s = state.clone();
    let (y, _) = forward(spec, &mut s, x, ext, Mode::Train, false).unwrap();
    frobenius_loss(&y, target).unwrap().0
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1.0)
}

/// Central finite-difference check of every parameter gradient and every
/// input gradient against the backward pass.
fn check_gradients(spec: &[LayerSpec], x: &Tensor4, ext: Option<&Tensor4>, seed: u64) {
    let mut r = rng(seed);
    let mut state = init_state(spec, &mut r);
    let (y, tape) = forward(spec, &mut state, x, ext, Mode::Train, false).unwrap();
    let target = random_tensor(y.n, y.h, y.w, y.c, &mut r);
    let (_, grad_out) = frobenius_loss(&y, &target).unwrap();
    let (grads, gx) = backward(spec, &state, tape.as_ref().unwrap(), &grad_out, false).unwrap();

    let h = 1e-5;
    for (li, lg) in grads.iter().enumerate() {
        for (pi, g) in lg.iter().enumerate() {
            let stride = (g.len() / 48).max(1);
            for i in (0..g.len()).step_by(stride) {
                let mut plus = state.clone();
                plus.layers[li].params[pi].value[i] += h;
                let mut minus = state.clone();
                minus.layers[li].params[pi].value[i] -= h;
                let num = (total_loss(spec, &plus, x, ext, &target)
                    - total_loss(spec, &minus, x, ext, &target))
                    / (2.0 * h);
                let e = rel_err(g[i], num);
                assert!(
                    e < 1e-6,
                    "layer {li} param {pi} idx {i}: analytic {} vs numeric {num}, rel {e}",
                    g[i]
                );
            }
        }
    }
    let stride = (gx.data.len() / 64).max(1);
    for i in (0..gx.data.len()).step_by(stride) {
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let num =
            (total_loss(spec, &state, &xp, ext, &target) - total_loss(spec, &state, &xm, ext, &target))
                / (2.0 * h);
        let e = rel_err(gx.data[i], num);
        assert!(e < 1e-6, "input idx {i}: analytic {} vs numeric {num}, rel {e}", gx.data[i]);
    }
}

#[test]
fn conv_identity_center_kernel() {
    let spec = [LayerSpec::Conv3x3 { in_ch: 2, out_ch: 2 }];
    let mut r = rng(1);
    let mut state = init_state(&spec, &mut r);
    // w[ky=1][kx=1][c][c] = 1, everything else 0.
    let w = &mut state.layers[0].params[0].value;
    w.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..2 {
        w[(4 * 2 + c) * 2 + c] = 1.0;
    }
    let x = random_tensor(1, 5, 5, 2, &mut r);
    let (y, _) = forward(&spec, &mut state, &x, None, Mode::Infer, false).unwrap();
    for (a, b) in y.data.iter().zip(x.data.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn conv_all_ones_tap_counts() {
    let spec = [LayerSpec::Conv3x3 { in_ch: 1, out_ch: 1 }];
    let mut r = rng(2);
    let mut state = init_state(&spec, &mut r);
    state.layers[0].params[0].value.iter_mut().for_each(|v| *v = 1.0);
    state.layers[0].params[1].value[0] = 0.0;
    let x = Tensor4::from_data(1, 5, 5, 1, vec![1.0; 25]).unwrap();
    let (y, _) = forward(&spec, &mut state, &x, None, Mode::Infer, false).unwrap();
    assert_eq!(y.data[2 * 5 + 2], 9.0);
    assert_eq!(y.data[0], 4.0);
    assert_eq!(y.data[4], 4.0);
    assert_eq!(y.data[24], 4.0);
    assert_eq!(y.data[1], 6.0);
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in [10, 11, 12] {
        let mut r = rng(seed);
        let x = random_tensor(2, 6, 6, 3, &mut r);
        check_gradients(&[LayerSpec::Conv3x3 { in_ch: 3, out_ch: 2 }], &x, None, seed);
    }
}

#[test]
fn relu_values_and_gradients() {
    let x = Tensor4::from_data(1, 1, 1, 2, vec![-3.0, 2.0]).unwrap();
    let spec = [LayerSpec::Relu];
    let mut state = init_state(&spec, &mut rng(0));
    let (y, _) = forward(&spec, &mut state, &x, None, Mode::Infer, false).unwrap();
    assert_eq!(y.data, vec![0.0, 2.0]);

    for seed in [20, 21, 22] {
        let mut r = rng(seed);
        let x = random_tensor(2, 4, 4, 2, &mut r);
        check_gradients(&[LayerSpec::Relu], &x, None, seed);
    }
}

#[test]
fn batchnorm_normalizes_in_training() {
    let spec = [LayerSpec::BatchNorm { ch: 3 }];
    let mut r = rng(30);
    let mut state = init_state(&spec, &mut r);
    let x = random_tensor(4, 5, 5, 3, &mut r);
    let (y, _) = forward(&spec, &mut state, &x, None, Mode::Train, false).unwrap();
    let count = (4 * 5 * 5) as f64;
    for ch in 0..3 {
        let mut mean = 0.0;
        for px in 0..y.data.len() / 3 {
            mean += y.data[px * 3 + ch];
        }
        mean /= count;
        let mut var = 0.0;
        for px in 0..y.data.len() / 3 {
            var += (y.data[px * 3 + ch] - mean).powi(2);
        }
        var /= count;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn batchnorm_rejects_singleton_batch_in_training() {
    let spec = [LayerSpec::BatchNorm { ch: 2 }];
    let mut state = init_state(&spec, &mut rng(0));
    let x = random_tensor(1, 3, 3, 2, &mut rng(1));
    assert!(forward(&spec, &mut state, &x, None, Mode::Train, false).is_err());
    assert!(forward(&spec, &mut state, &x, None, Mode::Infer, false).is_ok());
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    for seed in [31, 32, 33] {
        let mut r = rng(seed);
        let x = random_tensor(4, 3, 3, 2, &mut r);
        check_gradients(&[LayerSpec::BatchNorm { ch: 2 }], &x, None, seed);
    }
}

#[test]
fn fc_gradients_match_finite_differences() {
    for seed in [40, 41, 42] {
        let mut r = rng(seed);
        let x = random_tensor(3, 2, 2, 3, &mut r);
        check_gradients(&[LayerSpec::FullyConnected { in_dim: 12, out_dim: 5 }], &x, None, seed);
    }
}

#[test]
fn avgpool_gradients_match_finite_differences() {
    for seed in [50, 51, 52] {
        let mut r = rng(seed);
        let x = random_tensor(2, 4, 6, 2, &mut r);
        check_gradients(&[LayerSpec::AvgPool2], &x, None, seed);
    }
}

#[test]
fn mixed_chain_gradients_match_finite_differences() {
    // Miniature of the derain net: conv, relu, concat, conv, bn, relu,
    // one residual block, final conv.
    let spec = [
        LayerSpec::Conv3x3 { in_ch: 2, out_ch: 3 },
        LayerSpec::Relu,
        LayerSpec::ConcatExternal { ch: 2 },
        LayerSpec::Conv3x3 { in_ch: 5, out_ch: 3 },
        LayerSpec::BatchNorm { ch: 3 },
        LayerSpec::Relu,
        LayerSpec::ResidualBegin,
        LayerSpec::Conv3x3 { in_ch: 3, out_ch: 3 },
        LayerSpec::BatchNorm { ch: 3 },
        LayerSpec::Relu,
        LayerSpec::ResidualEnd,
        LayerSpec::Conv3x3 { in_ch: 3, out_ch: 2 },
    ];
    for seed in [60, 61] {
        let mut r = rng(seed);
        let x = random_tensor(2, 5, 5, 2, &mut r);
        let ext = random_tensor(2, 5, 5, 2, &mut r);
        check_gradients(&spec, &x, Some(&ext), seed);
    }
}

#[test]
fn param_net_like_chain_gradients() {
    let spec = [
        LayerSpec::Conv3x3 { in_ch: 1, out_ch: 2 },
        LayerSpec::Relu,
        LayerSpec::AvgPool2,
        LayerSpec::FullyConnected { in_dim: 2 * 2 * 2, out_dim: 3 },
        LayerSpec::Relu,
        LayerSpec::FullyConnected { in_dim: 3, out_dim: 2 },
    ];
    let mut r = rng(70);
    let x = random_tensor(2, 4, 4, 1, &mut r);
    check_gradients(&spec, &x, None, 70);
}

#[test]
fn empty_spec_is_identity() {
    let mut state = init_state(&[], &mut rng(0));
    let x = random_tensor(1, 3, 3, 2, &mut rng(1));
    let (y, _) = forward(&[], &mut state, &x, None, Mode::Infer, false).unwrap();
    assert_eq!(y.data, x.data);
}

#[test]
fn residual_block_with_zero_conv_is_identity() {
    let spec = [
        LayerSpec::ResidualBegin,
        LayerSpec::Conv3x3 { in_ch: 2, out_ch: 2 },
        LayerSpec::ResidualEnd,
    ];
    let mut state = init_state(&spec, &mut rng(5));
    state.layers[1].params[0].value.iter_mut().for_each(|v| *v = 0.0);
    let x = random_tensor(1, 4, 4, 2, &mut rng(6));
    let (y, _) = forward(&spec, &mut state, &x, None, Mode::Infer, false).unwrap();
    for (a, b) in y.data.iter().zip(x.data.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn concat_required_iff_present() {
    let spec = [LayerSpec::Conv3x3 { in_ch: 1, out_ch: 1 }];
    let mut state = init_state(&spec, &mut rng(0));
    let x = random_tensor(1, 3, 3, 1, &mut rng(1));
    let ext = random_tensor(1, 3, 3, 1, &mut rng(2));
    assert!(forward(&spec, &mut state, &x, Some(&ext), Mode::Infer, false).is_err());

    let spec2 = [LayerSpec::ConcatExternal { ch: 1 }];
    let mut state2 = init_state(&spec2, &mut rng(0));
    assert!(forward(&spec2, &mut state2, &x, None, Mode::Infer, false).is_err());
}

#[test]
fn inference_is_batch_size_independent() {
    let spec = [
        LayerSpec::Conv3x3 { in_ch: 1, out_ch: 2 },
        LayerSpec::BatchNorm { ch: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv3x3 { in_ch: 2, out_ch: 1 },
    ];
    let mut r = rng(80);
    let mut state = init_state(&spec, &mut r);
    // Push some statistics into the running buffers first.
    let warm = random_tensor(4, 6, 6, 1, &mut r);
    forward(&spec, &mut state, &warm, None, Mode::Train, false).unwrap();

    let a = random_tensor(1, 6, 6, 1, &mut r);
    let b = random_tensor(1, 6, 6, 1, &mut r);
    let (ya, _) = forward(&spec, &mut state, &a, None, Mode::Infer, false).unwrap();
    let mut both = Tensor4::zeros(2, 6, 6, 1);
    both.data[..36].copy_from_slice(&a.data);
    both.data[36..].copy_from_slice(&b.data);
    let (yab, _) = forward(&spec, &mut state, &both, None, Mode::Infer, false).unwrap();
    for i in 0..36 {
        assert!((ya.data[i] - yab.data[i]).abs() < 1e-14);
    }
}

#[test]
fn parallel_and_sequential_paths_agree_bitwise() {
    let spec = [
        LayerSpec::Conv3x3 { in_ch: 3, out_ch: 4 },
        LayerSpec::Relu,
        LayerSpec::Conv3x3 { in_ch: 4, out_ch: 2 },
    ];
    let mut r = rng(90);
    let mut state = init_state(&spec, &mut r);
    let x = random_tensor(3, 8, 8, 3, &mut r);
    let (y_seq, tape_seq) = forward(&spec, &mut state, &x, None, Mode::Train, false).unwrap();
    let (y_par, tape_par) = forward(&spec, &mut state, &x, None, Mode::Train, true).unwrap();
    assert_eq!(y_seq.data, y_par.data);
    let target = random_tensor(y_seq.n, y_seq.h, y_seq.w, y_seq.c, &mut r);
    let (_, g) = frobenius_loss(&y_seq, &target).unwrap();
    let (gs, _) = backward(&spec, &state, tape_seq.as_ref().unwrap(), &g, false).unwrap();
    let (gp, _) = backward(&spec, &state, tape_par.as_ref().unwrap(), &g, true).unwrap();
    assert_eq!(gs, gp);
}

#[test]
fn frobenius_loss_values_and_gradient() {
    let p = Tensor4::from_data(1, 2, 2, 1, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let t = Tensor4::zeros(1, 2, 2, 1);
    let (loss, grad) = frobenius_loss(&p, &t).unwrap();
    assert_eq!(loss, 4.0);
    assert!(grad.data.iter().all(|&g| g == 2.0));

    let (zero_loss, _) = frobenius_loss(&t, &t).unwrap();
    assert_eq!(zero_loss, 0.0);

    // Finite-difference check of the loss gradient itself.
    let mut r = rng(100);
    let p = random_tensor(2, 3, 3, 2, &mut r);
    let t = random_tensor(2, 3, 3, 2, &mut r);
    let (_, grad) = frobenius_loss(&p, &t).unwrap();
    let h = 1e-6;
    for i in (0..p.data.len()).step_by(5) {
        let mut pp = p.clone();
        pp.data[i] += h;
        let mut pm = p.clone();
        pm.data[i] -= h;
        let num =
            (frobenius_loss(&pp, &t).unwrap().0 - frobenius_loss(&pm, &t).unwrap().0) / (2.0 * h);
        assert!((grad.data[i] - num).abs() < 1e-8);
    }
}

#[test]
fn adam_zero_gradient_is_noop() {
    let spec = [LayerSpec::FullyConnected { in_dim: 3, out_dim: 2 }];
    let mut state = init_state(&spec, &mut rng(7));
    let before = state.layers[0].params[0].value.clone();
    let grads = vec![vec![vec![0.0; 6], vec![0.0; 2]]];
    adam_step(&mut state, &grads, &AdamConfig::with_lr(0.01)).unwrap();
    assert_eq!(state.layers[0].params[0].value, before);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_first_step_is_unit_step_times_lr() {
    let spec = [LayerSpec::FullyConnected { in_dim: 2, out_dim: 1 }];
    let mut state = init_state(&spec, &mut rng(8));
    let before = state.layers[0].params[0].value.clone();
    let grads = vec![vec![vec![3.0, -0.5], vec![0.0]]];
    let lr = 0.01;
    adam_step(&mut state, &grads, &AdamConfig::with_lr(lr)).unwrap();
    for (i, (a, b)) in state.layers[0].params[0].value.iter().zip(before.iter()).enumerate() {
        let step = b - a;
        let expect = lr * grads[0][0][i].signum();
        assert!((step - expect).abs() < 1e-6, "step {step} vs {expect}");
    }
}

#[test]
fn adam_converges_on_convex_toy() {
    // Minimize ||w||^2 from w = (1, 1) with the exact gradient 2w.
    let mut state = NetState {
        layers: vec![LayerState {
            params: vec![ParamTensor { value: vec![1.0, 1.0], m: vec![0.0; 2], v: vec![0.0; 2] }],
            running: vec![],
        }],
        step: 0,
    };
    let cfg = AdamConfig::with_lr(0.01);
    for _ in 0..400 {
        let g = state.layers[0].params[0].value.iter().map(|w| 2.0 * w).collect();
        adam_step(&mut state, &vec![vec![g]], &cfg).unwrap();
    }
    let norm: f64 = state.layers[0].params[0].value.iter().map(|w| w * w).sum::<f64>().sqrt();
    assert!(norm < 1e-2, "final norm {norm}");
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let spec = vec![
        LayerSpec::Conv3x3 { in_ch: 2, out_ch: 3 },
        LayerSpec::BatchNorm { ch: 3 },
        LayerSpec::Relu,
        LayerSpec::ConcatExternal { ch: 4 },
        LayerSpec::Conv3x3 { in_ch: 7, out_ch: 1 },
    ];
    let mut r = rng(9);
    let mut state = init_state(&spec, &mut r);
    // Give the moments non-trivial content.
    let x = random_tensor(2, 6, 6, 2, &mut r);
    let ext = random_tensor(2, 6, 6, 4, &mut r);
    let (y, tape) = forward(&spec, &mut state, &x, Some(&ext), Mode::Train, false).unwrap();
    let t = random_tensor(y.n, y.h, y.w, y.c, &mut r);
    let (_, g) = frobenius_loss(&y, &t).unwrap();
    let (grads, _) = backward(&spec, &state, tape.as_ref().unwrap(), &g, false).unwrap();
    adam_step(&mut state, &grads, &AdamConfig::with_lr(0.01)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.kgcn");
    save_checkpoint(&spec, &state, &path).unwrap();
    let (spec2, state2) = load_checkpoint(&path).unwrap();
    assert_eq!(spec, spec2);
    assert_eq!(state, state2);
}

#[test]
fn checkpoint_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.kgcn");
    std::fs::write(&path, b"whatever").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
