//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Stdio};

use aigc_edge::env::{Observation, StateVector};
use aigc_edge::experiment::{read_csv, CurveRow, ExperimentConfig, OutputLayout, RunRecord, SummaryRow};
use aigc_edge::nn::{Grads, Mlp};
use aigc_edge::policies::{greedy_upper_bound_select, overload_avoid_select, PolicyKind};
use aigc_edge::quality::{fit_profile, CurveSample, MetricOrientation, QualityProfile, QualityScale};
use aigc_edge::sac::{actor_loss_and_logit_grad, critic_targets, Transition};
use aigc_edge::workload::{QualityLayout, Workload, WorkloadConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Verdict = Result<String, String>;

struct Suite {
    summary: BTreeMap<PolicyKind, SummaryRow>,
    runs: Vec<RunRecord>,
    curves: Vec<Vec<CurveRow>>,
    n_tasks: usize,
    train_episodes: usize,
    check_status: Option<i32>,
    check_output: String,
}

fn run_suite(dir: &Path) -> Suite {
    let exe = env!("CARGO_BIN_EXE_aigc-edge");
    let status = Command::new(exe)
        .args(["run", "--out"])
        .arg(dir)
        .stdout(Stdio::null())
        .status()
        .expect("spawn run");
    assert!(status.success(), "suite run failed: {status}");
    let check = Command::new(exe).arg("check").arg(dir).output().expect("spawn check");
    let layout = OutputLayout::new(dir);
    let cfg = ExperimentConfig::default();
    let summary = read_csv::<SummaryRow>(&layout.summary())
        .unwrap()
        .into_iter()
        .map(|r| (r.policy, r))
        .collect();
    let curves = cfg
        .seed_list()
        .iter()
        .map(|&s| read_csv::<CurveRow>(&layout.curve(s)).unwrap())
        .collect();
    Suite {
        summary,
        runs: read_csv(&layout.runs()).unwrap(),
        curves,
        n_tasks: cfg.n_tasks,
        train_episodes: cfg.train_episodes,
        check_status: check.status.code(),
        check_output: String::from_utf8_lossy(&check.stdout).into_owned(),
    }
}

fn pooled(a: &SummaryRow, b: &SummaryRow) -> f64 {
    ((a.episodic_reward_std.powi(2) + b.episodic_reward_std.powi(2)) / 2.0).sqrt()
}

fn policy_ordering(s: &Suite) -> Verdict {
    use PolicyKind::*;
    let m = |p| s.summary[&p].episodic_reward_mean;
    let mut notes = vec![format!(
        "means greedy {:.1} sac {:.1} oa {:.1} rr {:.1} random {:.1}",
        m(GreedyOracle),
        m(Sac),
        m(OverloadAvoid),
        m(RoundRobin),
        m(Random)
    )];
    let mut ok = m(GreedyOracle) >= m(Sac);
    let gap = (m(GreedyOracle) - m(Sac)) / m(GreedyOracle);
    ok &= gap <= 0.15;
    notes.push(format!("sac {:.1}% below greedy", 100.0 * gap));
    for (hi, lo) in [(Sac, OverloadAvoid), (OverloadAvoid, RoundRobin), (RoundRobin, Random)] {
        let d = m(hi) - m(lo);
        let sd = pooled(&s.summary[&hi], &s.summary[&lo]);
        ok &= d > sd;
        notes.push(format!("{hi}-{lo} gap {d:.1} vs pooled sd {sd:.1}"));
    }
    verdict(ok, notes.join("; "))
}

fn crash_elimination(s: &Suite) -> Verdict {
    let limit = s.n_tasks / 100;
    let of = |p: PolicyKind| s.runs.iter().filter(move |r| r.policy == p).map(|r| r.crashed_tasks);
    let sac: Vec<usize> = of(PolicyKind::Sac).collect();
    let random_min = of(PolicyKind::Random).min().unwrap();
    let rr_min = of(PolicyKind::RoundRobin).min().unwrap();
    let floor = s.n_tasks.div_ceil(20);
    let ok = sac.iter().all(|&c| c <= limit) && random_min >= floor && rr_min >= floor;
    verdict(
        ok,
        format!("sac crashes {sac:?} (limit {limit}); min random {random_min}, min rr {rr_min} (floor {floor})"),
    )
}

fn quality_learning(s: &Suite) -> Verdict {
    let avg = |p: PolicyKind, seed: u64| {
        s.runs
            .iter()
            .find(|r| r.policy == p && r.seed == seed)
            .and_then(|r| r.avg_finished_task_reward)
            .unwrap_or(f64::NEG_INFINITY)
    };
    let seeds: Vec<u64> = s.runs.iter().filter(|r| r.policy == PolicyKind::Sac).map(|r| r.seed).collect();
    let pairs: Vec<String> = seeds
        .iter()
        .map(|&k| format!("{:.4}>{:.4}", avg(PolicyKind::Sac, k), avg(PolicyKind::OverloadAvoid, k)))
        .collect();
    let ok = seeds.iter().all(|&k| avg(PolicyKind::Sac, k) > avg(PolicyKind::OverloadAvoid, k));
    verdict(ok, format!("sac vs overload_avoid per seed: {}", pairs.join(" ")))
}

fn learning_curve(s: &Suite) -> Verdict {
    let n = s.curves.iter().map(Vec::len).min().unwrap();
    let mean: Vec<f64> = (0..n)
        .map(|e| s.curves.iter().map(|c| c[e].episodic_reward).sum::<f64>() / s.curves.len() as f64)
        .collect();
    let smooth: Vec<f64> = (0..n)
        .map(|e| {
            let w = &mean[e.saturating_sub(9)..=e];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect();
    let cross = |level: f64| smooth.iter().position(|&v| v > level);
    let rr = cross(s.summary[&PolicyKind::RoundRobin].episodic_reward_mean);
    let oa = cross(s.summary[&PolicyKind::OverloadAvoid].episodic_reward_mean);
    let ok = matches!((rr, oa), (Some(a), Some(b)) if a < b && b < s.train_episodes);
    verdict(
        ok,
        format!("smoothed curve crosses round_robin at {rr:?}, overload_avoid at {oa:?} of {} episodes", s.train_episodes),
    )
}

fn simulator_invariants(s: &Suite) -> Verdict {
    let last = s.check_output.lines().last().unwrap_or("").to_string();
    verdict(s.check_status == Some(0), format!("check exit {:?}: {last}", s.check_status))
}

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_correctness() -> Verdict {
    let cfg = ExperimentConfig::default();
    let n = cfg.n_asps;
    let agent_input = 2 + 2 * n + if cfg.headroom_features { n } else { 0 };
    let mut agent_shape = vec![agent_input];
    agent_shape.extend(&cfg.hidden);
    agent_shape.push(n);
    let shapes: Vec<Vec<usize>> = vec![vec![4, 8, 3], vec![6, 5, 5, 4], vec![3, 2], vec![10, 16, 16, 5], agent_shape];
    let mut worst = 0.0f64;
    let instances = 105;
    for seed in 0..instances as u64 {
        let sizes = &shapes[seed as usize % shapes.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::new(sizes, &mut rng).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp| m.forward(&x).unwrap().iter().zip(&c).map(|(o, c)| o * c).sum::<f64>();
        let g = net.backward(&x, &c).unwrap();
        let mut probe = net.clone();
        for i in 0..net.params().len() {
            let p = net.params()[i];
            probe.params_mut()[i] = p + H;
            let up = loss(&probe);
            probe.params_mut()[i] = p - H;
            let down = loss(&probe);
            probe.params_mut()[i] = p;
            worst = worst.max(rel_err(g.values[i], (up - down) / (2.0 * H)));
        }
    }
    let mut worst_actor = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let actor = Mlp::new(&[4, 6, 3], &mut rng).unwrap();
        let batch = 5;
        let states: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(0.0..1.0)).collect();
        let min_q: Vec<f64> = (0..batch * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let alpha = rng.random_range(0.05..0.5);
        let loss = |net: &Mlp| {
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
            let up = loss(&probe);
            probe.params_mut()[i] = p - H;
            let down = loss(&probe);
            probe.params_mut()[i] = p;
            worst_actor = worst_actor.max(rel_err(g.values[i], (up - down) / (2.0 * H)));
        }
    }
    verdict(
        worst <= 1e-4 && worst_actor <= 1e-4,
        format!("{instances} networks worst rel err {worst:.2e}; 3-action actor loss worst {worst_actor:.2e}"),
    )
}

fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> StateVector {
    StateVector((0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
}

fn random_observation(rng: &mut ChaCha8Rng) -> Observation {
    let n = rng.random_range(1..=25usize);
    let demand = rng.random_range(100..=250u32);
    let total: Vec<u32> = (0..n).map(|_| rng.random_range(600..=1500)).collect();
    let available: Vec<u32> = total
        .iter()
        .map(|&t| match rng.random_range(0..4) {
            0 => t,
            1 => demand,
            2 => demand - 1,
            _ => rng.random_range(0..=t),
        })
        .collect();
    let max_total = f64::from(*total.iter().max().unwrap());
    let mut v = vec![f64::from(demand) / 250.0, 0.5];
    for (t, a) in total.iter().zip(&available) {
        v.push(f64::from(*t) / max_total);
        v.push(f64::from(*a) / max_total);
    }
    Observation {
        state: StateVector(v),
        demand,
        available,
        total,
    }
}

fn oracle_equivalence() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let actor = Mlp::new(&[8, 6, 3], &mut rng).unwrap();
        let t1 = Mlp::new(&[8, 5, 3], &mut rng).unwrap();
        let t2 = Mlp::new(&[8, 7, 3], &mut rng).unwrap();
        let (alpha, gamma) = (rng.random_range(0.0..0.5), rng.random_range(0.5..0.999));
        let batch: Vec<Transition> = (0..16)
            .map(|k| Transition {
                state: random_state(&mut rng, 8),
                action: k % 3,
                reward: rng.random_range(-3.0..1.0),
                next_state: random_state(&mut rng, 8),
                done: k % 5 == 0,
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let got = critic_targets(&refs, &actor, &t1, &t2, alpha, gamma).unwrap();
        for (t, y) in batch.iter().zip(&got) {
            let l = actor.forward(&t.next_state.0).unwrap();
            let (q1, q2) = (t1.forward(&t.next_state.0).unwrap(), t2.forward(&t.next_state.0).unwrap());
            let z: f64 = l.iter().map(|v| v.exp()).sum();
            let v: f64 = (0..3)
                .map(|a| {
                    let p = l[a].exp() / z;
                    p * (q1[a].min(q2[a]) - alpha * p.ln())
                })
                .sum();
            let want = t.reward + if t.done { 0.0 } else { gamma * v };
            worst = worst.max((y - want).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let scale = QualityScale::unit();
    let (mut oa_mismatch, mut greedy_mismatch) = (0, 0);
    let cases = 10_000;
    for _ in 0..cases {
        let obs = random_observation(&mut rng);
        let top = *obs.available.iter().max().unwrap();
        let most = obs.available.iter().position(|&a| a == top).unwrap();
        oa_mismatch += usize::from(overload_avoid_select(&obs.state) != most);
        let profiles: Vec<QualityProfile> = (0..obs.available.len())
            .map(|_| {
                let peak = [0.4, 0.55, 0.7, 0.85, 1.0][rng.random_range(0..5)];
                QualityProfile::new(50, 0.0, 200, peak, MetricOrientation::HigherIsBetter).unwrap()
            })
            .collect();
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in profiles.iter().enumerate() {
            if obs.available[i] >= obs.demand {
                let q = p.eval_relative(obs.demand, &scale).unwrap();
                if best.is_none_or(|(_, b)| q > b) {
                    best = Some((i, q));
                }
            }
        }
        let want = best.map_or(most, |(i, _)| i);
        greedy_mismatch += usize::from(greedy_upper_bound_select(&obs, &profiles, &scale) != want);
    }
    verdict(
        worst <= 1e-10 && oa_mismatch == 0 && greedy_mismatch == 0,
        format!(
            "critic target max abs err {worst:.1e}; {cases} states: overload_avoid mismatches {oa_mismatch}, greedy mismatches {greedy_mismatch}"
        ),
    )
}

fn quality_recovery() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut exact = true;
    for _ in 0..20 {
        let a_x = rng.random_range(2..150u32);
        let b_x = a_x + rng.random_range(2..150u32);
        let lo = rng.random_range(0.0..0.5);
        let hi = lo + rng.random_range(0.1..0.5);
        let truth = QualityProfile::new(a_x, lo, b_x, hi, MetricOrientation::HigherIsBetter).unwrap();
        let samples: Vec<CurveSample> = (1..=b_x + 40)
            .map(|s| CurveSample::new(s, truth.eval_raw(s).unwrap()).unwrap())
            .collect();
        let fit = fit_profile(&samples, MetricOrientation::HigherIsBetter).unwrap();
        exact &= fit.a_x() == a_x && fit.b_x() == b_x;
        exact &= (fit.a_y() - lo).abs() < 1e-9 && (fit.b_y() - hi).abs() < 1e-9;
    }
    let truth = QualityProfile::new(60, 20.0, 250, 80.0, MetricOrientation::HigherIsBetter).unwrap();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut worst_noisy = 0.0f64;
    for _ in 0..10 {
        let samples: Vec<CurveSample> = (1..=40)
            .map(|k| CurveSample::new(k * 10, truth.eval_raw(k * 10).unwrap() + noise.sample(&mut rng)).unwrap())
            .collect();
        let fit = fit_profile(&samples, MetricOrientation::HigherIsBetter).unwrap();
        for (got, want) in [
            (f64::from(fit.a_x()), 60.0),
            (f64::from(fit.b_x()), 250.0),
            (fit.a_y(), 20.0),
            (fit.b_y(), 80.0),
        ] {
            worst_noisy = worst_noisy.max((got - want).abs() / want);
        }
    }
    let mut violations = 0;
    for _ in 0..10_000 {
        let a_x = rng.random_range(1..300u32);
        let b_x = a_x + rng.random_range(1..300u32);
        let lo = rng.random_range(-50.0..50.0);
        let hi = lo + rng.random_range(0.01..50.0);
        let p = if rng.random_bool(0.5) {
            QualityProfile::new(a_x, lo, b_x, hi, MetricOrientation::HigherIsBetter).unwrap()
        } else {
            QualityProfile::new(a_x, hi, b_x, lo, MetricOrientation::LowerIsBetter).unwrap()
        };
        let s1 = rng.random_range(1..700u32);
        let s2 = rng.random_range(s1..=700u32);
        let (q1, q2) = (p.eval_normalized(s1).unwrap(), p.eval_normalized(s2).unwrap());
        violations += usize::from(q1 > q2 || !(0.0..=1.0).contains(&q1) || !(0.0..=1.0).contains(&q2));
    }
    verdict(
        exact && worst_noisy <= 0.10 && violations == 0,
        format!(
            "noiseless exact: {exact}; noisy worst rel err {:.1}%; monotonicity violations {violations}/10000",
            100.0 * worst_noisy
        ),
    )
}

fn workload_statistics() -> Verdict {
    let mut gaps = Vec::new();
    let mut in_bounds = true;
    for seed in 0..50 {
        let w = Workload::generate(&WorkloadConfig::default().with_seed(seed), &QualityLayout::default()).unwrap();
        let mut prev = 0.0;
        for t in &w.tasks {
            gaps.push(t.arrival_time - prev);
            prev = t.arrival_time;
            in_bounds &= (100..=250).contains(&t.demand);
        }
        in_bounds &= w.asps.iter().all(|a| (600..=1500).contains(&a.total_capacity));
    }
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let se = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
    let z = (mean - 0.288) / se;
    verdict(
        z.abs() <= 3.0 && in_bounds,
        format!("mean inter-arrival {mean:.4} h ({z:+.2} SE); bounds respected: {in_bounds}"),
    )
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let suite = run_suite(dir.path());
    let results = [
        ("policy ordering", policy_ordering(&suite)),
        ("crash elimination", crash_elimination(&suite)),
        ("quality learning", quality_learning(&suite)),
        ("learning-curve shape", learning_curve(&suite)),
        ("gradient correctness", gradient_correctness()),
        ("oracle equivalence", oracle_equivalence()),
        ("simulator invariants", simulator_invariants(&suite)),
        ("quality-model recovery", quality_recovery()),
        ("workload statistics", workload_statistics()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
