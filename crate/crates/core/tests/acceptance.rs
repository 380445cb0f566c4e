//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 5 to 8 train full-size agents and take a long time. Setting
//! `CARRL_SKIP_TRAINING=1` reports them as SKIPPED, which never counts as
//! a pass.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use carrl_core::diffnet::{
    log_one_minus_tanh_sq, polyak_update, stack_rows, Activation, LogStdBounds, Mlp, NetSpec, Optimizer, ParamSet,
};
use carrl_core::eval::{
    emit_report, read_metrics_csv, run_episode, run_evaluation, AttackMode, EvalConfig, MetricRow, METRICS_FILE,
};
use carrl_core::perturb::{ag_loss, generate_perturbation, generate_perturbation_traced, AgConfig};
use carrl_core::rea::{actor_objective, compute_gae, AdvNets, AdvObservation, AdvStep, AdvAction, ReaConfig, RolloutRecord, TriggerMask, ADV_OBS_DIM};
use carrl_core::rng::{self, Stream};
use carrl_core::rtra::{
    consistency_cost, critic_target, dual_update, soft_bellman_target, Batch, DefenderActor, DualReplayBuffer, Rtra,
    RtraConfig, Source, Transition,
};
use carrl_core::simenv::{EgoObservation, EnvConfig, WorldState, OBS_DIM};
use carrl_core::trainer::{ExperimentConfig, Mode, Trainer};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

// Pinned tolerances and budgets.
const GRAD_REL_TOL: f64 = 1e-5;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(60);
const FD_STEP: f64 = 1e-6;
const ORACLE_TOL: f64 = 1e-12;
const INVARIANT_CASES: usize = 10_000;
const REDUCTION_UPDATES: usize = 1_000;
const CLEAN_SR_MIN: f64 = 0.90;
const CLEAN_EPISODES: usize = 200;
const TRAIN_TIME_LIMIT: Duration = Duration::from_secs(30 * 60);
const ATTACK_EPISODES: usize = 500;
const ATTACK_EPSILON: f64 = 0.03;
const SR_DROP_MIN: f64 = 0.20;
const CR_GAP_MIN: f64 = 0.20;
const PIPELINE_TIME_LIMIT: Duration = Duration::from_secs(2 * 3600);
const SEEDS_REQUIRED: usize = 2;
const TRAINING_SEEDS: [u64; 3] = [0, 1, 2];
const AG_PAIRS: usize = 500;
const AG_EPSILON: f64 = 0.05;
const AG_SHRINK: f64 = 0.5;
const AG_PASS_FRACTION: f64 = 0.90;
const CSV_TOL: f64 = 5e-5;

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    Outcome { pass: Some(ok), detail }
}

fn skipped(detail: &str) -> Outcome {
    Outcome {
        pass: None,
        detail: detail.to_string(),
    }
}

fn failed(err: impl std::fmt::Display) -> Outcome {
    Outcome {
        pass: Some(false),
        detail: format!("error: {err}"),
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

fn normal_matrix(r: &mut Stream, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}

fn random_obs(r: &mut Stream) -> EgoObservation {
    let mut o = [0.0; OBS_DIM];
    for v in o.iter_mut() {
        *v = r.random_range(-1.0..=1.0);
    }
    EgoObservation(o)
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (mut worst_p, mut worst_x) = (0.0f64, 0.0f64);
    for k in 0..20u64 {
        let mut r = rng::stream(k, "acceptance-fd", &[]);
        let act = if k % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let spec = NetSpec::mlp(OBS_DIM, &[256, 256], 2, act).expect("valid spec");
        let mut net = Mlp::init(spec, &mut r);
        let x = normal_matrix(&mut r, 4, OBS_DIM);
        let w = normal_matrix(&mut r, 4, 2);
        let loss = |net: &Mlp, x: &Array2<f64>| (net.forward_batch(x.view()).expect("forward").output() * &w).sum();
        let tape = net.forward_batch(x.view()).expect("forward");
        let (g, gx) = net.backward(&tape, w.view(), true).expect("backward");
        let gx = gx.expect("input gradient requested");

        let n = net.params().len();
        let idx: Vec<usize> = (0..300).map(|_| r.random_range(0..n)).collect();
        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for &i in &idx {
            let orig = net.params().as_slice()[i];
            net.params_mut().as_mut_slice()[i] = orig + FD_STEP;
            let up = loss(&net, &x);
            net.params_mut().as_mut_slice()[i] = orig - FD_STEP;
            let down = loss(&net, &x);
            net.params_mut().as_mut_slice()[i] = orig;
            an.push(g.as_slice()[i]);
            fd.push((up - down) / (2.0 * FD_STEP));
        }
        worst_p = worst_p.max(rel_err(&an, &fd));

        let (mut an, mut fd) = (Vec::new(), Vec::new());
        for b in 0..4 {
            for j in 0..OBS_DIM {
                let mut xp = x.clone();
                xp[[b, j]] += FD_STEP;
                let mut xm = x.clone();
                xm[[b, j]] -= FD_STEP;
                an.push(gx[[b, j]]);
                fd.push((loss(&net, &xp) - loss(&net, &xm)) / (2.0 * FD_STEP));
            }
        }
        worst_x = worst_x.max(rel_err(&an, &fd));
    }
    let secs = start.elapsed();
    pass_if(
        worst_p < GRAD_REL_TOL && worst_x < GRAD_REL_TOL && secs < GRAD_TIME_LIMIT,
        format!(
            "20 nets 26-256-256-2: worst relative error params {worst_p:.2e}, inputs {worst_x:.2e} (< {GRAD_REL_TOL:e}); {:.1}s (< 60s)",
            secs.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn brute_force_gae(r: &[f64], v: &[f64], boot: f64, d: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let value = |t: usize| if t < n { v[t] } else { boot };
    let delta = |t: usize| r[t] + gamma * if d[t] { 0.0 } else { value(t + 1) } - v[t];
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut weight = 1.0;
            for l in t..n {
                sum += weight * delta(l);
                if d[l] {
                    break;
                }
                weight *= gamma * lambda;
            }
            sum
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let mut r = rng::stream(0, "acceptance-oracles", &[]);
    let mut gae_err = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=32);
        let rewards: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| r.random_bool(0.1)).collect();
        let boot = r.random_range(-2.0..2.0);
        let (gamma, lambda) = (r.random_range(0.8..1.0), r.random_range(0.0..=1.0));
        let (adv, ret) = compute_gae(&rewards, &values, boot, &dones, gamma, lambda);
        let want = brute_force_gae(&rewards, &values, boot, &dones, gamma, lambda);
        for t in 0..n {
            gae_err = gae_err.max((adv[t] - want[t]).abs());
            gae_err = gae_err.max((ret[t] - (want[t] + values[t])).abs());
        }
    }

    let y = soft_bellman_target(0.5, 0.99, false, 2.0, 0.1, -1.0);
    let hand_err = (y - 2.579).abs();
    let net_err = sac_target_through_networks();

    let lam = dual_update(0.0, 0.2, 0.1, 5e-5);
    let mut lam_err = (lam - 5e-6).abs();
    for _ in 0..1000 {
        let (l, c, e, a) = (
            r.random_range(0.0..3.0),
            r.random_range(0.0..1.0),
            r.random_range(0.0..0.5),
            r.random_range(0.0..0.1),
        );
        lam_err = lam_err.max((dual_update(l, c, e, a) - (l + a * (c - e)).max(0.0)).abs());
    }

    let mut mix_ok = true;
    let mut buf = DualReplayBuffer::new(10_000, 0.5, true).expect("valid buffer");
    for i in 0..400 {
        buf.store(synthetic_transition(&mut r, i % 2 == 0));
    }
    mix_ok &= buf.sample_mixed_batch(64, &mut r).expect("sample").attacked_count() == 32;
    for _ in 0..1000 {
        let beta = r.random_range(0.0..=1.0);
        let n = r.random_range(1..=150);
        buf.beta = beta;
        let b = buf.sample_mixed_batch(n, &mut r).expect("sample");
        mix_ok &= b.attacked_count() == (beta * n as f64).floor() as usize && b.len() == n;
    }

    let worst = gae_err.max(hand_err).max(net_err).max(lam_err);
    pass_if(
        worst <= ORACLE_TOL && mix_ok,
        format!(
            "GAE vs brute force (100 trajectories) {gae_err:.1e}; target y = {y} (error {hand_err:.1e}, network path {net_err:.1e}); \
             multiplier update {lam_err:.1e}; batch mixing floor(beta N) exact: {mix_ok}"
        ),
    )
}

fn synthetic_transition(r: &mut Stream, attacked: bool) -> Transition {
    let s = random_obs(r);
    let mut s_tilde = s;
    if attacked {
        for v in s_tilde.0.iter_mut() {
            *v += r.random_range(-0.05..=0.05);
        }
    }
    Transition {
        s_tilde,
        s,
        action: r.random_range(-1.0..=1.0),
        reward: r.random_range(-1.0..=1.0),
        s_next: random_obs(r),
        done: r.random_bool(0.2),
        attacked,
    }
}

fn set_output_bias(net: &mut Mlp, values: &[f64]) {
    let n = net.params().len();
    net.set_params(ParamSet::zeros(n)).expect("same shape");
    let last = net.spec().num_layers() - 1;
    for (row, v) in values.iter().enumerate() {
        let i = net.spec().bias_index(last, row);
        net.params_mut().as_mut_slice()[i] = *v;
    }
}

/// Target computed through constant networks vs. the same quantities
/// substituted by hand.
fn sac_target_through_networks() -> f64 {
    let mut r = rng::stream(1, "acceptance-target", &[]);
    let cfg = RtraConfig {
        hidden: vec![8, 8],
        ..RtraConfig::default()
    };
    let mut rt = Rtra::new(cfg, &mut r).expect("valid config");
    let (mean, log_std) = (0.3, -0.5);
    set_output_bias(&mut rt.nets.actor.0, &[mean, log_std]);
    set_output_bias(&mut rt.nets.q1_target, &[2.0]);
    set_output_bias(&mut rt.nets.q2_target, &[2.5]);
    let mut t = synthetic_transition(&mut r, false);
    t.done = false;
    let mut worst = 0.0f64;
    for k in 0..100u64 {
        let mut draw = rng::stream(k, "acceptance-target-draw", &[]);
        let mut replay = draw.clone();
        let y = critic_target(&rt.nets, &rt.cfg, &t, &mut draw).expect("target");
        let xi: f64 = replay.sample(StandardNormal);
        let z: f64 = mean + log_std.exp() * xi;
        let log_pi = -0.5 * xi * xi - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln() - (1.0 - z.tanh().powi(2)).ln();
        let want = t.reward + 0.99 * (2.0 - 0.1 * log_pi);
        worst = worst.max((y - want).abs());
    }
    worst
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // perturbation radius after every iteration
    let mut r = rng::stream(0, "acceptance-bim", &[]);
    let mut max_ratio = 0.0f64;
    let mut checks = 0usize;
    let policies: Vec<DefenderActor> = (0..20)
        .map(|_| DefenderActor::new(&[32, 32], &mut r).expect("actor"))
        .collect();
    for case in 0..INVARIANT_CASES {
        let eps = r.random_range(0.001..0.2);
        let iterations = r.random_range(1..=50);
        let cfg = AgConfig::new(eps, iterations).expect("valid");
        let s = random_obs(&mut r);
        let target = r.random_range(-1.0..=1.0);
        generate_perturbation_traced(&policies[case % 20], &s, target, &cfg, |_, d| {
            checks += 1;
            let linf = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            max_ratio = max_ratio.max(linf / eps);
        })
        .expect("perturbation");
    }
    ok &= max_ratio <= 1.0;
    notes.push(format!("|delta|/eps max {max_ratio:.6} over {checks} iterates"));

    // attack budget per episode
    let mut r = rng::stream(1, "acceptance-budget", &[]);
    let rea_cfg = ReaConfig {
        hidden: vec![16, 16],
        ..ReaConfig::default()
    };
    let mut max_attacks = 0;
    let mut episodes = 0;
    for net in 0..100u64 {
        let defender = DefenderActor::new(&[16, 16], &mut r).expect("actor");
        let mut adv = AdvNets::new(&rea_cfg, &mut r).expect("adversary");
        if net % 2 == 0 {
            // an adversary that always wants to fire
            let last = adv.actor.spec().num_layers() - 1;
            let i = adv.actor.spec().bias_index(last, 1);
            adv.actor.params_mut().as_mut_slice()[i] = 20.0;
        }
        for mode in [AttackMode::CriticalityAware, AttackMode::RandomTrigger] {
            let cfg = EvalConfig {
                n_episodes: 1,
                attack_mode: mode,
                ag_iterations: 1,
                budget: 5,
                density: r.random_range(0.1..=1.0),
                ..EvalConfig::default()
            };
            for e in 0..(INVARIANT_CASES / 200) {
                let ep = run_episode(&defender, Some(&adv), &cfg, net, e).expect("episode");
                max_attacks = max_attacks.max(ep.attacks);
                episodes += 1;
            }
        }
    }
    let mut train_max = 0;
    for (mode, seed) in [(Mode::Carrl, 0), (Mode::NoCcpo, 1), (Mode::NoDrb, 2)] {
        let t = carrl_core::trainer::run_alternating_training(tiny_config(mode), seed, None).expect("training");
        train_max = train_max.max(t.max_attacks_per_episode);
    }
    ok &= max_attacks <= 5 && train_max <= 5;
    notes.push(format!(
        "max attacks per episode {max_attacks} over {episodes} evaluation episodes, {train_max} in budgeted training"
    ));

    // multiplier stays non-negative
    let mut r = rng::stream(2, "acceptance-lambda", &[]);
    let mut min_lambda = f64::INFINITY;
    let mut lambda = 0.0;
    for _ in 0..INVARIANT_CASES {
        let cost = r.random_range(0.0..0.5);
        lambda = dual_update(lambda, cost, 0.1, r.random_range(0.0..0.5));
        min_lambda = min_lambda.min(lambda);
    }
    let mut rt = small_rtra(3, true);
    for _ in 0..200 {
        rt.update(&mut r).expect("update");
        min_lambda = min_lambda.min(rt.lambda);
    }
    ok &= min_lambda >= 0.0;
    notes.push(format!("min lambda {min_lambda}"));

    // x = 0 rows give no target-head gradient
    let mut r = rng::stream(4, "acceptance-trigger", &[]);
    let adv = AdvNets::new(&rea_cfg, &mut r).expect("adversary");
    let mut leaks = 0usize;
    let mut rows = 0usize;
    while rows < INVARIANT_CASES {
        let n = r.random_range(1..=32);
        let records: Vec<RolloutRecord> = (0..n).map(|_| random_record(&adv, &mut r)).collect();
        let refs: Vec<&RolloutRecord> = records.iter().collect();
        let advs: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let obj = actor_objective(&adv, &refs, &advs, 0.2, LogStdBounds::default()).expect("objective");
        // changing the recorded target of an x = 0 row must not matter either
        let mut altered = records.clone();
        for rec in altered.iter_mut().filter(|rec| !rec.step.action.trigger) {
            rec.step.target_pre_squash += 1.0;
            rec.step.log_prob_target -= 3.0;
        }
        let alt_refs: Vec<&RolloutRecord> = altered.iter().collect();
        let obj2 = actor_objective(&adv, &alt_refs, &advs, 0.2, LogStdBounds::default()).expect("objective");
        for (i, rec) in records.iter().enumerate() {
            if !rec.step.action.trigger {
                rows += 1;
                if obj.grad_output[[i, 2]] != 0.0 || obj.grad_output[[i, 3]] != 0.0 {
                    leaks += 1;
                }
            }
        }
        if obj.grad_output != obj2.grad_output || obj.objective.to_bits() != obj2.objective.to_bits() {
            leaks += 1;
        }
    }
    ok &= leaks == 0;
    notes.push(format!("target-head gradient leaks {leaks} over {rows} x=0 rows"));

    // consistency vanishes on benign batches
    let mut r = rng::stream(5, "acceptance-benign", &[]);
    let rts: Vec<Rtra> = (0..10).map(|k| small_rtra(10 + k, true)).collect();
    let mut nonzero = 0;
    for case in 0..INVARIANT_CASES {
        let n = r.random_range(1..=16);
        let items: Vec<Transition> = (0..n).map(|_| synthetic_transition(&mut r, false)).collect();
        let batch = Batch {
            sources: vec![Source::Normal; n],
            items,
        };
        let rt = &rts[case % 10];
        let c = consistency_cost(&rt.nets.actor, &batch, rt.cfg.log_std_bounds).expect("cost");
        if c != 0.0 {
            nonzero += 1;
        }
        if case % 10 == 0 {
            let (stats, _) = rt.actor_loss_and_grad(&batch, &mut r).expect("actor loss");
            if stats.consistency != 0.0 {
                nonzero += 1;
            }
        }
    }
    ok &= nonzero == 0;
    notes.push(format!("non-zero consistency on {nonzero} of {INVARIANT_CASES} benign batches"));

    pass_if(ok, notes.join("; "))
}

fn random_record(adv: &AdvNets, r: &mut Stream) -> RolloutRecord {
    let mut o = [0.0; ADV_OBS_DIM];
    for v in o.iter_mut() {
        *v = r.random_range(-1.0..=1.0);
    }
    let obs = AdvObservation(o);
    let mask = match r.random_range(0..4) {
        0 => TriggerMask::ForceOff,
        1 => TriggerMask::ForceOn,
        _ => TriggerMask::Free,
    };
    let mut step: AdvStep = adv.act(&obs, mask, LogStdBounds::default(), r).expect("act");
    // perturb the stored log-probabilities so ratios differ from one
    step.log_prob_trigger += r.random_range(-0.3..0.3) * f64::from(u8::from(mask == TriggerMask::Free));
    step.log_prob_target += r.random_range(-0.3..0.3);
    let _: AdvAction = step.action;
    RolloutRecord {
        obs,
        step,
        reward: r.random_range(0.0..=1.0),
        done: r.random_bool(0.2),
    }
}

fn small_rtra(seed: u64, consistency: bool) -> Rtra {
    let mut r = rng::stream(seed, "acceptance-rtra", &[]);
    let cfg = RtraConfig {
        hidden: vec![16, 16],
        batch_size: 16,
        consistency,
        dual_replay: true,
        alpha_lambda: 0.5,
        lambda_init: 0.3,
        ..RtraConfig::default()
    };
    let mut rt = Rtra::new(cfg, &mut r).expect("valid config");
    for i in 0..200 {
        rt.buffer.store(synthetic_transition(&mut r, i % 3 == 0));
    }
    rt
}

fn tiny_config(mode: Mode) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "mode = {mode}
         n_iterations = 3
         episodes_per_agent_phase = 8
         episodes_per_adversary_phase = 8
         defender_hidden = 16,16
         adversary_hidden = 16,16
         warmup_steps = 20
         batch_size = 16
         rollout_length = 32
         ppo_minibatch = 16
         ppo_epochs = 2
         ag_iterations = 5"
    ))
    .expect("valid tiny config")
}

// ---------------------------------------------------------------- 4

/// Textbook SAC with twin critics, a tanh-squashed Gaussian actor and a
/// fixed temperature, over a single uniform replay buffer.
struct PlainSac {
    gamma: f64,
    alpha: f64,
    tau: f64,
    batch: usize,
    bounds: LogStdBounds,
    actor: Mlp,
    q: [Mlp; 2],
    q_target: [Mlp; 2],
    actor_opt: Optimizer,
    q_opt: [Optimizer; 2],
    data: Vec<(EgoObservation, f64, f64, EgoObservation, bool)>,
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

fn critic_input(states: &[&EgoObservation], actions: &[f64]) -> Array2<f64> {
    let mut x = Array2::zeros((states.len(), OBS_DIM + 1));
    for (i, s) in states.iter().enumerate() {
        for j in 0..OBS_DIM {
            x[[i, j]] = s.0[j];
        }
        x[[i, OBS_DIM]] = actions[i];
    }
    x
}

impl PlainSac {
    /// Squashed sample per row: `(action, log-prob, xi, sigma, raw log std)`.
    fn sample(&self, out: &Array2<f64>, r: &mut Stream) -> Vec<(f64, f64, f64, f64, f64)> {
        (0..out.nrows())
            .map(|i| {
                let mu = out[[i, 0]];
                let raw = out[[i, 1]];
                let log_std = raw.clamp(self.bounds.min, self.bounds.max);
                let xi: f64 = r.sample(StandardNormal);
                let z = mu + log_std.exp() * xi;
                let log_pi = -0.5 * xi * xi - log_std - LOG_SQRT_2PI - log_one_minus_tanh_sq(z);
                (z.tanh(), log_pi, xi, log_std.exp(), raw)
            })
            .collect()
    }

    fn update(&mut self, r: &mut Stream) {
        let idx: Vec<usize> = (0..self.batch).map(|_| r.random_range(0..self.data.len())).collect();
        let batch: Vec<_> = idx.iter().map(|&i| self.data[i]).collect();
        let n = self.batch as f64;

        // critics
        let s_next: Vec<&EgoObservation> = batch.iter().map(|t| &t.3).collect();
        let out = self
            .actor
            .forward_batch(stack_rows(s_next.iter().map(|s| s.as_slice()), OBS_DIM).view())
            .unwrap();
        let next = self.sample(out.output(), r);
        let next_actions: Vec<f64> = next.iter().map(|n| n.0).collect();
        let xn = critic_input(&s_next, &next_actions);
        let qt1 = self.q_target[0].forward_batch(xn.view()).unwrap();
        let qt2 = self.q_target[1].forward_batch(xn.view()).unwrap();
        let y: Vec<f64> = (0..self.batch)
            .map(|i| {
                let min_q = qt1.output()[[i, 0]].min(qt2.output()[[i, 0]]);
                let (_, _, reward, _, done) = batch[i];
                let not_done = if done { 0.0 } else { 1.0 };
                reward + self.gamma * not_done * (min_q - self.alpha * next[i].1)
            })
            .collect();
        let states: Vec<&EgoObservation> = batch.iter().map(|t| &t.0).collect();
        let actions: Vec<f64> = batch.iter().map(|t| t.1).collect();
        let x = critic_input(&states, &actions);
        for k in 0..2 {
            let tape = self.q[k].forward_batch(x.view()).unwrap();
            let up = Array2::from_shape_fn((self.batch, 1), |(i, _)| 2.0 * (tape.output()[[i, 0]] - y[i]) / n);
            let (g, _) = self.q[k].backward(&tape, up.view(), false).unwrap();
            self.q_opt[k].step(self.q[k].params_mut(), &g);
        }
        for k in 0..2 {
            polyak_update(self.q_target[k].params_mut(), self.q[k].params(), self.tau).unwrap();
        }

        // actor
        let xs = stack_rows(states.iter().map(|s| s.as_slice()), OBS_DIM);
        let tape = self.actor.forward_batch(xs.view()).unwrap();
        let smp = self.sample(tape.output(), r);
        let new_actions: Vec<f64> = smp.iter().map(|s| s.0).collect();
        let xq = critic_input(&states, &new_actions);
        let t1 = self.q[0].forward_batch(xq.view()).unwrap();
        let t2 = self.q[1].forward_batch(xq.view()).unwrap();
        let mut pick1 = Array2::zeros((self.batch, 1));
        let mut pick2 = Array2::zeros((self.batch, 1));
        for i in 0..self.batch {
            if t1.output()[[i, 0]] <= t2.output()[[i, 0]] {
                pick1[[i, 0]] = 1.0;
            } else {
                pick2[[i, 0]] = 1.0;
            }
        }
        let d1 = self.q[0].backward_input(&t1, pick1.view()).unwrap();
        let d2 = self.q[1].backward_input(&t2, pick2.view()).unwrap();
        let mut up = Array2::zeros((self.batch, 2));
        let inv_n = 1.0 / n;
        for i in 0..self.batch {
            let (a, _, xi, sigma, raw) = smp[i];
            let dq_da = d1[[i, OBS_DIM]] + d2[[i, OBS_DIM]];
            let da_dz = 1.0 - a * a;
            // d log pi / dz through the squash is 2 tanh(z)
            up[[i, 0]] = (self.alpha * 2.0 * a - dq_da * da_dz) * inv_n;
            if raw >= self.bounds.min && raw <= self.bounds.max {
                up[[i, 1]] = (self.alpha * (-1.0 + 2.0 * a * sigma * xi) - dq_da * da_dz * sigma * xi) * inv_n;
            }
        }
        let (g, _) = self.actor.backward(&tape, up.view(), false).unwrap();
        self.actor_opt.step(self.actor.params_mut(), &g);
    }
}

fn bits(p: &ParamSet) -> Vec<u64> {
    p.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn criterion_4() -> Outcome {
    let cfg = RtraConfig {
        dual_replay: false,
        consistency: false,
        ..RtraConfig::default()
    };
    let mut init = rng::stream(0, "acceptance-reduction", &[]);
    let mut rt = Rtra::new(cfg.clone(), &mut init).expect("valid config");
    let mut reference = PlainSac {
        gamma: cfg.gamma,
        alpha: cfg.alpha,
        tau: cfg.tau,
        batch: cfg.batch_size,
        bounds: cfg.log_std_bounds,
        actor: rt.nets.actor.0.clone(),
        q: [rt.nets.q1.clone(), rt.nets.q2.clone()],
        q_target: [rt.nets.q1_target.clone(), rt.nets.q2_target.clone()],
        actor_opt: Optimizer::new(cfg.optimizer, rt.nets.actor.0.params().len(), cfg.lr),
        q_opt: [
            Optimizer::new(cfg.optimizer, rt.nets.q1.params().len(), cfg.lr),
            Optimizer::new(cfg.optimizer, rt.nets.q2.params().len(), cfg.lr),
        ],
        data: Vec::new(),
    };
    // frozen stream; a third of the items carry perturbed observations
    let mut src = rng::stream(1, "acceptance-stream", &[]);
    let stream: Vec<Transition> = (0..REDUCTION_UPDATES + cfg.batch_size)
        .map(|i| synthetic_transition(&mut src, i % 3 == 0))
        .collect();
    let push = |rt: &mut Rtra, reference: &mut PlainSac, t: &Transition| {
        rt.buffer.store(*t);
        reference.data.push((t.s_tilde, t.action, t.reward, t.s_next, t.done));
    };
    for t in &stream[..cfg.batch_size] {
        push(&mut rt, &mut reference, t);
    }
    let mut r1 = rng::stream(2, "acceptance-updates", &[]);
    let mut r2 = r1.clone();
    let mut first_mismatch = None;
    for step in 0..REDUCTION_UPDATES {
        push(&mut rt, &mut reference, &stream[cfg.batch_size + step]);
        rt.update(&mut r1).expect("update");
        reference.update(&mut r2);
        let same = bits(rt.nets.actor.0.params()) == bits(reference.actor.params())
            && bits(rt.nets.q1.params()) == bits(reference.q[0].params())
            && bits(rt.nets.q2.params()) == bits(reference.q[1].params())
            && bits(rt.nets.q1_target.params()) == bits(reference.q_target[0].params())
            && bits(rt.nets.q2_target.params()) == bits(reference.q_target[1].params());
        if !same {
            first_mismatch = Some(step);
            break;
        }
    }
    match first_mismatch {
        None => pass_if(
            rt.lambda == 0.0,
            format!("all five networks bit-identical after each of {REDUCTION_UPDATES} updates (26-256-256 nets, batch 64)"),
        ),
        Some(step) => pass_if(false, format!("parameters diverge at update {step}")),
    }
}

// ---------------------------------------------------------------- 5 to 8

struct SeedResult {
    seed: u64,
    vanilla_train: Duration,
    carrl_train: Duration,
    carrl_clean_sr: f64,
    vanilla_clean_sr: f64,
    vanilla_attacked_sr: f64,
    vanilla_attacked_cr: f64,
    carrl_attacked_cr: f64,
    vanilla_defender: DefenderActor,
    carrl_defender: DefenderActor,
}

fn eval_cfg(mode: AttackMode, episodes: usize, seed: u64) -> EvalConfig {
    EvalConfig {
        n_episodes: episodes,
        attack_mode: mode,
        epsilon: ATTACK_EPSILON,
        seeds: vec![seed],
        ..EvalConfig::default()
    }
}

fn train(mode: Mode, seed: u64) -> carrl_core::Result<(Trainer, Duration)> {
    let cfg = ExperimentConfig {
        mode,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let t = carrl_core::trainer::run_alternating_training(cfg, seed, None)?;
    Ok((t, start.elapsed()))
}

fn run_seed(seed: u64) -> carrl_core::Result<SeedResult> {
    let (vanilla, vanilla_train) = train(Mode::VanillaSac, seed)?;
    let (carrl, carrl_train) = train(Mode::Carrl, seed)?;
    let eval_seed = 1000 + seed;
    let adversary = &vanilla.rea.nets;
    let vd = &vanilla.rtra.nets.actor;
    let cd = &carrl.rtra.nets.actor;
    let carrl_clean = run_evaluation(cd, None, &eval_cfg(AttackMode::None, CLEAN_EPISODES, eval_seed), eval_seed)?;
    let vanilla_clean = run_evaluation(vd, None, &eval_cfg(AttackMode::None, ATTACK_EPISODES, eval_seed), eval_seed)?;
    let attacked = eval_cfg(AttackMode::CriticalityAware, ATTACK_EPISODES, eval_seed);
    let vanilla_att = run_evaluation(vd, Some(adversary), &attacked, eval_seed)?;
    let carrl_att = run_evaluation(cd, Some(adversary), &attacked, eval_seed)?;
    Ok(SeedResult {
        seed,
        vanilla_train,
        carrl_train,
        carrl_clean_sr: carrl_clean.sr,
        vanilla_clean_sr: vanilla_clean.sr,
        vanilla_attacked_sr: vanilla_att.sr,
        vanilla_attacked_cr: vanilla_att.cr,
        carrl_attacked_cr: carrl_att.cr,
        vanilla_defender: vd.clone(),
        carrl_defender: cd.clone(),
    })
}

fn c5(r: &SeedResult) -> bool {
    r.carrl_clean_sr >= CLEAN_SR_MIN && r.carrl_train <= TRAIN_TIME_LIMIT
}

fn c6(r: &SeedResult) -> bool {
    r.vanilla_clean_sr - r.vanilla_attacked_sr >= SR_DROP_MIN
}

fn c7(r: &SeedResult) -> bool {
    r.vanilla_attacked_cr - r.carrl_attacked_cr >= CR_GAP_MIN
}

/// Trains seeds in order, stopping once every criterion has enough passing
/// seeds or can no longer reach the required count.
fn pipeline() -> (Vec<SeedResult>, Duration, Option<String>) {
    let start = Instant::now();
    let mut results: Vec<SeedResult> = Vec::new();
    for (k, &seed) in TRAINING_SEEDS.iter().enumerate() {
        let remaining = TRAINING_SEEDS.len() - k;
        let undecided = [c5 as fn(&SeedResult) -> bool, c6, c7].iter().any(|c| {
            let passes = results.iter().filter(|r| c(r)).count();
            passes < SEEDS_REQUIRED && passes + remaining >= SEEDS_REQUIRED
        });
        if !undecided {
            break;
        }
        match run_seed(seed) {
            Ok(r) => {
                println!(
                    "  seed {}: train {:.0}s/{:.0}s, carrl clean SR {:.3}, vanilla SR {:.3} -> {:.3} under attack, \
                     CR vanilla {:.3} vs carrl {:.3}",
                    r.seed,
                    r.vanilla_train.as_secs_f64(),
                    r.carrl_train.as_secs_f64(),
                    r.carrl_clean_sr,
                    r.vanilla_clean_sr,
                    r.vanilla_attacked_sr,
                    r.vanilla_attacked_cr,
                    r.carrl_attacked_cr
                );
                results.push(r);
            }
            Err(e) => return (results, start.elapsed(), Some(e.to_string())),
        }
    }
    (results, start.elapsed(), None)
}

fn seed_list(results: &[SeedResult], f: impl Fn(&SeedResult) -> String) -> String {
    results.iter().map(|r| format!("seed {}: {}", r.seed, f(r))).collect::<Vec<_>>().join(", ")
}

fn criterion_8(defender: &DefenderActor, label: &str) -> (usize, String) {
    let mut r = rng::stream(8, "acceptance-ag", &[]);
    let cfg = AgConfig::new(AG_EPSILON, 50).expect("valid");
    let env = EnvConfig::default();
    // states visited by the defender itself
    let mut states = Vec::new();
    let mut episode = 0;
    while states.len() < AG_PAIRS {
        let (mut world, mut s) = WorldState::reset(&env, 50_000 + episode).expect("env");
        episode += 1;
        loop {
            states.push(s);
            let a = carrl_core::perturb::DifferentiablePolicy::deterministic_action(defender, s.as_slice()).unwrap();
            let out = world.step(a).expect("step");
            s = out.observation;
            if out.done || states.len() == AG_PAIRS {
                break;
            }
        }
    }
    let mut halved = 0;
    for s in &states {
        let target = r.random_range(-1.0..=1.0);
        let before = ag_loss(defender, s.as_slice(), target).unwrap();
        let delta = generate_perturbation(defender, s, target, &cfg).unwrap();
        let s_tilde = carrl_core::perturb::apply_perturbation(s, &delta, true);
        let after = ag_loss(defender, s_tilde.as_slice(), target).unwrap();
        if after <= AG_SHRINK * before {
            halved += 1;
        }
    }
    (halved, format!("{label} {halved}/{AG_PAIRS}"))
}

// ---------------------------------------------------------------- 9

fn strip_wall_time(t: &mut Trainer) {
    for rec in t.log.iter_mut() {
        rec.wall_time_s = 0.0;
    }
}

fn criterion_9() -> Outcome {
    let cfg = tiny_config(Mode::Carrl);
    let a = carrl_core::trainer::run_alternating_training(cfg.clone(), 5, None).expect("training");
    let b = carrl_core::trainer::run_alternating_training(cfg.clone(), 5, None).expect("training");
    let logs_equal = a.log.len() == b.log.len() && a.log.iter().zip(&b.log).all(|(x, y)| x.same_outcome(y));

    let mut full = a.clone();
    let mut part = Trainer::new(cfg.clone(), 5).expect("trainer");
    for _ in 0..3 {
        part.run_phase().expect("phase");
    }
    let mut resumed = Trainer::decode(&part.encode(), Some(&cfg)).expect("decode");
    resumed.run(None).expect("resume");
    strip_wall_time(&mut full);
    strip_wall_time(&mut resumed);
    let resume_equal = full.encode() == resumed.encode();

    let dir = tempfile::tempdir().expect("tempdir");
    let mut rows = Vec::new();
    for mode in [AttackMode::None, AttackMode::CriticalityAware] {
        for seed in 0..3 {
            let c = EvalConfig {
                n_episodes: 7,
                attack_mode: mode,
                ag_iterations: 5,
                ..EvalConfig::default()
            };
            let m = run_evaluation(&a.rtra.nets.actor, Some(&a.rea.nets), &c, seed).expect("evaluation");
            rows.push(MetricRow::new(c.condition(), seed, &m));
        }
    }
    emit_report(&rows, dir.path()).expect("report");
    let back = read_metrics_csv(&dir.path().join(METRICS_FILE)).expect("read back");
    let mut csv_ok = back.len() == rows.len();
    for (x, y) in rows.iter().zip(&back) {
        csv_ok &= x.seed == y.seed && x.condition.mode == y.condition.mode;
        for (u, v) in [(x.sr, y.sr), (x.cr, y.cr), (x.de, y.de), (x.condition.epsilon, y.condition.epsilon)] {
            csv_ok &= (u - v).abs() <= CSV_TOL && format!("{u:.4}") == format!("{v:.4}");
        }
    }
    pass_if(
        logs_equal && resume_equal && csv_ok,
        format!(
            "identical logs {logs_equal}; resumed checkpoint byte-identical {resume_equal}; metrics.csv round trip at 4 decimals {csv_ok} ({} rows)",
            rows.len()
        ),
    )
}

// ---------------------------------------------------------------- main

fn main() -> ExitCode {
    let skip_training = std::env::var_os("CARRL_SKIP_TRAINING").is_some_and(|v| v != "0");
    let mut outcomes: BTreeMap<usize, (&str, Outcome)> = BTreeMap::new();
    let mut record = |id: usize, name: &'static str, o: Outcome| {
        let status = match o.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIPPED",
        };
        println!("criterion {id} [{name}]: {status}: {}", o.detail);
        outcomes.insert(id, (name, o));
    };

    record(1, "gradient correctness", criterion_1());
    record(2, "oracle equivalences", criterion_2());
    record(3, "hard invariants", criterion_3());
    record(4, "vanilla SAC reduction", criterion_4());
    record(9, "determinism and persistence", criterion_9());

    if skip_training {
        for (id, name) in [(5, "clean competence"), (6, "attack effectiveness"), (7, "robustness ordering"), (8, "AG potency")] {
            record(id, name, skipped("CARRL_SKIP_TRAINING is set"));
        }
    } else {
        println!("training pipeline (defaults, up to {} seeds):", TRAINING_SEEDS.len());
        let (results, elapsed, error) = pipeline();
        let count = |c: fn(&SeedResult) -> bool| results.iter().filter(|r| c(r)).count();
        let err_note = error.map(|e| format!("; pipeline error: {e}")).unwrap_or_default();
        record(
            5,
            "clean competence",
            pass_if(
                count(c5) >= SEEDS_REQUIRED,
                format!(
                    "{} of {} seeds with SR >= {CLEAN_SR_MIN} over {CLEAN_EPISODES} clean episodes and training <= 30 min ({}){err_note}",
                    count(c5),
                    results.len(),
                    seed_list(&results, |r| format!("SR {:.3} in {:.0}s", r.carrl_clean_sr, r.carrl_train.as_secs_f64()))
                ),
            ),
        );
        record(
            6,
            "attack effectiveness",
            pass_if(
                count(c6) >= SEEDS_REQUIRED,
                format!(
                    "{} of {} seeds with vanilla SR drop >= {SR_DROP_MIN} at eps {ATTACK_EPSILON}, budget 5, {ATTACK_EPISODES} episodes ({})",
                    count(c6),
                    results.len(),
                    seed_list(&results, |r| format!("{:.3} -> {:.3}", r.vanilla_clean_sr, r.vanilla_attacked_sr))
                ),
            ),
        );
        record(
            7,
            "robustness ordering",
            pass_if(
                count(c7) >= SEEDS_REQUIRED && elapsed <= PIPELINE_TIME_LIMIT,
                format!(
                    "{} of {} seeds with CR gap >= {CR_GAP_MIN} under the vanilla-trained adversary ({}); pipeline {:.0} min (<= 120)",
                    count(c7),
                    results.len(),
                    seed_list(&results, |r| format!("vanilla {:.3} vs carrl {:.3}", r.vanilla_attacked_cr, r.carrl_attacked_cr)),
                    elapsed.as_secs_f64() / 60.0
                ),
            ),
        );
        match results.first() {
            Some(first) => {
                let (halved, text) = criterion_8(&first.vanilla_defender, "vanilla defender");
                let (_, info) = criterion_8(&first.carrl_defender, "carrl defender (informational)");
                let needed = (AG_PASS_FRACTION * AG_PAIRS as f64).ceil() as usize;
                record(
                    8,
                    "AG potency",
                    pass_if(
                        halved >= needed,
                        format!("pairs with final L_AG <= 0.5 initial at eps {AG_EPSILON}: {text} (need {needed}); {info}"),
                    ),
                );
            }
            None => record(8, "AG potency", failed("no trained defender available")),
        }
    }

    let failures: Vec<usize> = outcomes
        .iter()
        .filter(|(_, (_, o))| o.pass == Some(false))
        .map(|(id, _)| *id)
        .collect();
    println!(
        "acceptance: {} passed, {} failed, {} skipped",
        outcomes.values().filter(|(_, o)| o.pass == Some(true)).count(),
        failures.len(),
        outcomes.values().filter(|(_, o)| o.pass.is_none()).count()
    );
    if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
