//! Finite-difference checks for network and actor-loss gradients.

use aigc_edge::nn::{Grads, Mlp};
use aigc_edge::sac::actor_loss_and_logit_grad;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Scalar loss `Σ c_k · out_k`.
fn weighted_output(net: &Mlp, x: &[f64], c: &[f64]) -> f64 {
    net.forward(x).unwrap().iter().zip(c).map(|(o, c)| o * c).sum()
}

fn check_net(seed: u64, sizes: &[usize]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Mlp::new(sizes, &mut rng).unwrap();
    let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = net.backward(&x, &c).unwrap();
    let mut worst = 0.0f64;
    let mut probe = net.clone();
    for i in 0..net.params().len() {
        let p = net.params()[i];
        probe.params_mut()[i] = p + H;
        let up = weighted_output(&probe, &x, &c);
        probe.params_mut()[i] = p - H;
        let down = weighted_output(&probe, &x, &c);
        probe.params_mut()[i] = p;
        worst = worst.max(rel_err(g.values[i], (up - down) / (2.0 * H)));
    }
    worst
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let shapes: [&[usize]; 4] = [&[4, 8, 3], &[6, 5, 5, 4], &[3, 2], &[10, 16, 16, 5]];
    for seed in 0..120u64 {
        let sizes = shapes[seed as usize % shapes.len()];
        let worst = check_net(seed, sizes);
        assert!(worst <= REL_TOL, "seed {seed} sizes {sizes:?}: rel err {worst:e}");
    }
}

#[test]
fn batched_backward_accumulates_per_sample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let net = Mlp::new(&[3, 7, 2], &mut rng).unwrap();
    let xs: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ds: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let acts = net.forward_batch(&xs, 4).unwrap();
    let mut batched = Grads::zeros_like(&net);
    net.backward_batch(&acts, &ds, &mut batched).unwrap();
    let mut summed = vec![0.0; net.params().len()];
    for k in 0..4 {
        let g = net.backward(&xs[k * 3..k * 3 + 3], &ds[k * 2..k * 2 + 2]).unwrap();
        for (s, v) in summed.iter_mut().zip(g.values) {
            *s += v;
        }
    }
    for (a, b) in batched.values.iter().zip(&summed) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Actor loss through the network on a 3-action toy instance.
#[test]
fn actor_loss_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let actor = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        let batch = 5;
        let states: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let min_q: Vec<f64> = (0..batch * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let alpha = rng.random_range(0.05..0.5);

        let loss_of = |net: &Mlp| {
            let acts = net.forward_batch(&states, batch).unwrap();
            actor_loss_and_logit_grad(acts.output(), &min_q, alpha, 3).0
        };
        let acts = actor.forward_batch(&states, batch).unwrap();
        let (_, d_logits, _) = actor_loss_and_logit_grad(acts.output(), &min_q, alpha, 3);
        let mut g = Grads::zeros_like(&actor);
        actor.backward_batch(&acts, &d_logits, &mut g).unwrap();

        let mut probe = actor.clone();
        for i in 0..actor.params().len() {
            let p = actor.params()[i];
            probe.params_mut()[i] = p + H;
            let up = loss_of(&probe);
            probe.params_mut()[i] = p - H;
            let down = loss_of(&probe);
            probe.params_mut()[i] = p;
            let err = rel_err(g.values[i], (up - down) / (2.0 * H));
            assert!(err <= REL_TOL, "seed {seed} param {i}: rel err {err:e}");
        }
    }
}

#[test]
fn parameter_only_backward_matches_full() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
    let xs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let ds: Vec<f64> = (0..15).map(|i| (i as f64 * 0.21).cos()).collect();
    let acts = net.forward_batch(&xs, 5).unwrap();
    let mut full = Grads::zeros_like(&net);
    let mut part = Grads::zeros_like(&net);
    net.backward_batch(&acts, &ds, &mut full).unwrap();
    net.accumulate_grads(&acts, &ds, &mut part).unwrap();
    assert_eq!(full, part);
}
