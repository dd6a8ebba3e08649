//! Reverse-mode gradients against central differences, MADE masking and
//! optimizer update rules.

use hyperdisc_core::diffnum::{
    Activation, AdamW, AdamWConfig, DenseNetwork, MadeNetwork, Optimizer, RmsProp, RmsPropConfig, Tensor,
};
use hyperdisc_core::distill::critic_loss;
use hyperdisc_core::rng::{seeded, Rng};
use rand::Rng as _;

fn random_tensor(r: usize, c: usize, scale: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(r, c, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0))
}

/// Minimized critic objective λ·pen − W as a function of the parameters.
fn objective(net: &DenseNetwork, gp: &Tensor, m: &Tensor, x: &Tensor, lambda: f64) -> f64 {
    let s = critic_loss(net, gp, m, x, lambda).unwrap();
    lambda * s.loss.penalty - s.loss.wasserstein
}

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

fn fd_check(net: &DenseNetwork, gp: &Tensor, m: &Tensor, x: &Tensor, lambda: f64) -> f64 {
    let step = critic_loss(net, gp, m, x, lambda).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let h = 1e-6;
    for (k, g) in step.grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus = net.clone();
            plus.params_mut()[k][i] += h;
            let mut minus = net.clone();
            minus.params_mut()[k][i] -= h;
            analytic.push(g[i]);
            numeric.push((objective(&plus, gp, m, x, lambda) - objective(&minus, gp, m, x, lambda)) / (2.0 * h));
        }
    }
    relative_error(&analytic, &numeric)
}

fn random_case(seed: u64) -> (DenseNetwork, Tensor, Tensor, Tensor) {
    let mut rng = seeded(seed);
    let n = rng.random_range(2..5);
    let hidden: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(2..5)).collect();
    let act = if rng.random::<bool>() { Activation::Softplus } else { Activation::Tanh };
    let spectral = rng.random::<bool>();
    let mut net = DenseNetwork::new(n, &hidden, act, spectral, &mut rng).unwrap();
    // Non-zero biases so every parameter is exercised.
    for p in net.params_mut() {
        *p += random_tensor(p.nrows(), p.ncols(), 0.3, &mut rng);
    }
    let b = rng.random_range(2..5);
    let gp = random_tensor(n, b, 1.0, &mut rng);
    let m = random_tensor(n, b, 1.0, &mut rng);
    let x = random_tensor(n, b, 1.0, &mut rng);
    (net, gp, m, x)
}

#[test]
fn first_order_critic_gradients() {
    for seed in 0..75 {
        let (net, gp, m, x) = random_case(seed);
        // λ = 0 isolates the first-order Wasserstein term.
        let err = fd_check(&net, &gp, &m, &x, 0.0);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn penalty_second_order_gradients() {
    for seed in 100..175 {
        let (net, _, m, x) = random_case(seed);
        // Identical GP and model batches make W vanish, leaving λ·penalty,
        // whose parameter gradient involves second derivatives of the network.
        let err = fd_check(&net, &m, &m, &x, 3.0);
        assert!(err < 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn input_gradient_matches_differences() {
    for seed in 200..220 {
        let (net, _, _, x) = random_case(seed);
        let (_, g) = net.forward_with_input_grad(&x, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for i in 0..x.nrows() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.row_mut(i).add_scalar_mut(h);
            xm.row_mut(i).add_scalar_mut(-h);
            let d = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / (2.0 * h);
            for j in 0..x.ncols() {
                assert!((d[(0, j)] - g[(i, j)]).abs() < 1e-7 * (1.0 + g[(i, j)].abs()));
            }
        }
    }
}

#[test]
fn spectral_estimate_converges_to_largest_singular_value() {
    let mut rng = seeded(9);
    let mut net = DenseNetwork::new(5, &[6, 4], Activation::Softplus, true, &mut rng).unwrap();
    net.power_iteration(500);
    for l in 0..2 {
        let w = &net.params()[2 * l];
        let svd = w.clone().svd(false, false);
        let top = svd.singular_values.max();
        assert!((net.sigma(l).unwrap() - top).abs() < 1e-8 * top);
        let eff = net.effective_weight(l).svd(false, false).singular_values.max();
        assert!((eff - 1.0).abs() < 1e-8);
    }
}

#[test]
fn made_outputs_ignore_later_inputs() {
    for seed in 0..100u64 {
        let mut rng = seeded(seed);
        let n = rng.random_range(1..7);
        let width = rng.random_range(1..4) * n + rng.random_range(0..3);
        let mut made = MadeNetwork::new(n, &[width], &mut rng).unwrap();
        for p in made.params_mut() {
            *p += random_tensor(p.nrows(), p.ncols(), 1.0, &mut rng);
        }
        let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let (l0, s0) = made.forward_made(&z).unwrap();
        for j in 0..n {
            let mut zp = z.clone();
            zp[j] += 1.5;
            let (l1, s1) = made.forward_made(&zp).unwrap();
            for i in 0..=j {
                assert!((l1[i] - l0[i]).abs() < 1e-12, "seed {seed}: loc {i} sees input {j}");
                assert!((s1[i] - s0[i]).abs() < 1e-12, "seed {seed}: scale {i} sees input {j}");
            }
        }
    }
}

#[test]
fn adamw_step_matches_update_rule() {
    let cfg = AdamWConfig {
        lr: 0.1,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg, &[(1, 1)]);
    let mut p = [Tensor::from_element(1, 1, 2.0)];
    let g1 = 0.5;
    opt.step(&mut p, &[Tensor::from_element(1, 1, g1)]).unwrap();
    // Decay first, then the bias-corrected step of size lr·sign(g) on step one.
    let after_decay = 2.0 * (1.0 - 0.1 * 0.01);
    let first = after_decay - 0.1 * g1 / (g1.abs() + 1e-8);
    assert!((p[0][0] - first).abs() < 1e-15);

    let g2 = -1.0;
    opt.step(&mut p, &[Tensor::from_element(1, 1, g2)]).unwrap();
    let m = 0.9 * 0.1 * g1 + 0.1 * g2;
    let v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
    let m_hat = m / (1.0 - 0.81);
    let v_hat = v / (1.0 - 0.999f64.powi(2));
    let second = first * (1.0 - 0.001) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((p[0][0] - second).abs() < 1e-14);
}

#[test]
fn rmsprop_step_matches_update_rule() {
    let cfg = RmsPropConfig::default();
    let mut opt = RmsProp::new(cfg, &[(1, 1)]);
    let mut p = [Tensor::from_element(1, 1, 1.0)];
    opt.step(&mut p, &[Tensor::from_element(1, 1, 0.2)]).unwrap();
    let s1: f64 = 0.01 * 0.04;
    let p1 = 1.0 - 5e-4 * 0.2 / (s1.sqrt() + 1e-8);
    assert!((p[0][0] - p1).abs() < 1e-15);
    opt.step(&mut p, &[Tensor::from_element(1, 1, -0.4)]).unwrap();
    let s2 = 0.99 * s1 + 0.01 * 0.16;
    let p2 = p1 + 5e-4 * 0.9999 * 0.4 / (s2.sqrt() + 1e-8);
    assert!((p[0][0] - p2).abs() < 1e-15);
}
