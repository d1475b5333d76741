//! Soft-target enumeration and sampling-frequency checks for the agent.

use aigc_edge::env::StateVector;
use aigc_edge::nn::{log_softmax, softmax, Mlp};
use aigc_edge::sac::{critic_targets, ActMode, SacAgent, SacConfig, Transition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> StateVector {
    StateVector((0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
}

#[test]
fn critic_targets_match_enumeration_over_three_actions() {
    let dim = 8;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Mlp::new(&[dim, 6, 3], &mut rng).unwrap();
        let t1 = Mlp::new(&[dim, 5, 3], &mut rng).unwrap();
        let t2 = Mlp::new(&[dim, 7, 3], &mut rng).unwrap();
        let alpha = rng.random_range(0.0..0.5);
        let gamma = rng.random_range(0.5..0.999);
        let batch: Vec<Transition> = (0..16)
            .map(|k| Transition {
                state: random_state(&mut rng, dim),
                action: k % 3,
                reward: rng.random_range(-3.0..1.0),
                next_state: random_state(&mut rng, dim),
                done: k % 5 == 0,
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let got = critic_targets(&refs, &actor, &t1, &t2, alpha, gamma).unwrap();
        for (t, y) in batch.iter().zip(&got) {
            let logits = actor.forward(&t.next_state.0).unwrap();
            let (q1, q2) = (t1.forward(&t.next_state.0).unwrap(), t2.forward(&t.next_state.0).unwrap());
            let mut v = 0.0;
            for a in 0..3 {
                let p = logits[a].exp() / logits.iter().map(|l| l.exp()).sum::<f64>();
                v += p * (q1[a].min(q2[a]) - alpha * p.ln());
            }
            let want = t.reward + if t.done { 0.0 } else { gamma * v };
            assert!((y - want).abs() <= 1e-10, "seed {seed}: {y} vs {want}");
        }
    }
}

#[test]
fn sampled_actions_follow_softmax() {
    let cfg = SacConfig {
        hidden: vec![16],
        seed: 3,
        ..SacConfig::default()
    };
    let mut agent = SacAgent::new(10, 5, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let state = random_state(&mut rng, 10);
    let probs = agent.action_probs(&state).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let n = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        counts[agent.act(&state, ActMode::Sample).unwrap()] += 1;
    }
    for (c, p) in counts.iter().zip(&probs) {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 4.0 * sigma, "{counts:?} vs {probs:?}");
    }
}

#[test]
fn policy_probabilities_and_entropy_are_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let agent = SacAgent::new(42, 20, SacConfig { hidden: vec![32, 32], ..SacConfig::default() }).unwrap();
    for _ in 0..200 {
        let s = random_state(&mut rng, 42);
        let p = agent.action_probs(&s).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let h: f64 = -p.iter().map(|x| if *x > 0.0 { x * x.ln() } else { 0.0 }).sum::<f64>();
        assert!((-1e-12..=20f64.ln() + 1e-12).contains(&h));
        let logits: Vec<f64> = (0..20).map(|_| rng.random_range(-50.0..50.0)).collect();
        let ls = log_softmax(&logits);
        let sm = softmax(&logits);
        for (a, b) in ls.iter().zip(&sm) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }
}
