use equirl::agents::*;
use equirl::group::{act_on_feature_map, FeatureMap, FieldType, GroupElement, Rotation};
use equirl::sim::{
    expert_action, rotate_state_by, Action, DiscreteAction, Sim, SimConfig, Task, WorldState, CONTINUOUS_THETA,
    CONTINUOUS_XY, CONTINUOUS_Z,
};
use equirl::steerable::{equivariance_error, Network};
use equirl::Scalar;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SMALL_DQN: [usize; 6] = [1, 2, 2, 2, 2, 2];
const SMALL_SAC: [usize; 7] = [1, 2, 2, 2, 2, 2, 2];
const SAC_RES: usize = 16;

fn random_obs(rng: &mut impl Rng, size: usize) -> FeatureMap<f64> {
    let data = (0..2 * size * size).map(|_| rng.random_range(-0.05..0.1)).collect();
    FeatureMap::new(FieldType::trivial(4, 2), size, size, data).unwrap()
}

fn rotate(obs: &FeatureMap<f64>, g: &GroupElement) -> FeatureMap<f64> {
    act_on_feature_map(obs.field(), g, obs).unwrap()
}

fn random_action(rng: &mut impl Rng) -> Action {
    Action::new(
        rng.random_range(0.0..1.0),
        rng.random_range(-CONTINUOUS_XY..CONTINUOUS_XY),
        rng.random_range(-CONTINUOUS_XY..CONTINUOUS_XY),
        rng.random_range(-CONTINUOUS_Z..CONTINUOUS_Z),
        rng.random_range(-CONTINUOUS_THETA..CONTINUOUS_THETA),
    )
}

fn dqn_config() -> DqnConfig {
    DqnConfig {
        widths: SMALL_DQN.to_vec(),
        ..DqnConfig::default()
    }
}

fn sac_config() -> SacConfig {
    SacConfig {
        widths: SMALL_SAC.to_vec(),
        batch: 4,
        ..SacConfig::default()
    }
}

fn discrete_transition(rng: &mut impl Rng, size: usize, done: bool) -> Transition {
    let d = DiscreteAction::from_flat(rng.random_range(0..Q_CELLS)).unwrap();
    Transition {
        obs: random_obs(rng, size),
        action: d.to_action(),
        discrete: Some(d),
        reward: if done { 1.0 } else { 0.0 },
        next_obs: random_obs(rng, size),
        done,
        is_expert: false,
    }
}

fn continuous_transition(rng: &mut impl Rng, size: usize, expert: bool) -> Transition {
    Transition {
        obs: random_obs(rng, size),
        action: random_action(rng),
        discrete: None,
        reward: rng.random_range(0.0..1.0),
        next_obs: random_obs(rng, size),
        done: rng.random_bool(0.3),
        is_expert: expert,
    }
}

/// Max deviation of `q(g s) - g q(s)` over the four rotations.
fn q_map_deviation<T: Scalar>(agent: &DqnAgent<T>, obs: &FeatureMap<f64>) -> f64 {
    let q = agent.q_map(obs).unwrap();
    GroupElement::elements(4)
        .map(|g| {
            let lhs = agent.q_map(&rotate(obs, &g)).unwrap();
            let rhs = act_on_feature_map(q.field(), &g, &q).unwrap();
            lhs.max_abs_diff(&rhs)
        })
        .fold(0.0, f64::max)
}

fn dqn_train<T: Scalar>(agent: &mut DqnAgent<T>, steps: usize, rng: &mut ChaCha8Rng) {
    for _ in 0..steps {
        let batch: Vec<Transition> = (0..4).map(|_| { let done = rng.random_bool(0.3); discrete_transition(rng, 64, done) }).collect();
        agent.update(&batch, &[1.0; 4]).unwrap();
    }
}

#[test]
fn dqn_q_map_is_equivariant_before_and_after_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut agent = DqnAgent::<f64>::equivariant(dqn_config(), &mut rng).unwrap();
    let mut single = DqnAgent::<f32>::equivariant(dqn_config(), &mut rng).unwrap();
    for round in 0..2 {
        let (mut worst, mut worst_single) = (0.0f64, 0.0f64);
        for _ in 0..3 {
            let obs = random_obs(&mut rng, 64);
            worst = worst.max(q_map_deviation(&agent, &obs));
            worst_single = worst_single.max(q_map_deviation(&single, &obs));
        }
        assert!(worst <= 1e-10, "round {round}: {worst}");
        assert!(worst_single <= 1e-5, "round {round}: {worst_single}");
        dqn_train(&mut agent, 100, &mut rng);
        dqn_train(&mut single, 100, &mut rng);
    }
}

#[test]
fn dqn_output_is_an_18_channel_3x3_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let obs = random_obs(&mut rng, 64);
    for agent in [
        DqnAgent::<f64>::equivariant(dqn_config(), &mut rng).unwrap(),
        DqnAgent::<f64>::plain(dqn_config(), &mut rng).unwrap(),
    ] {
        let q = agent.q_map(&obs).unwrap();
        assert_eq!((q.channels(), q.height(), q.width()), (18, 3, 3));
        assert_eq!(q.field(), &FieldType::trivial(4, 18));
        assert_eq!(agent.online().conv_stages(), 7);
        assert_eq!(agent.q_values(&[&obs]).unwrap()[0].len(), Q_CELLS);
    }
}

fn argmax_set(q: &[f64]) -> Vec<usize> {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut set: Vec<usize> = (0..q.len()).filter(|&i| q[i] >= best - 1e-9).collect();
    set.sort();
    set
}

fn rotate_discrete(d: DiscreteAction, g: &GroupElement) -> DiscreteAction {
    let a = DiscreteAction::nearest(&d.to_action().rotated(&g.rotation()));
    DiscreteAction { combo: d.combo, ..a }
}

#[test]
fn dqn_argmax_set_is_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let agent = DqnAgent::<f64>::equivariant(dqn_config(), &mut rng).unwrap();
    for _ in 0..5 {
        let obs = random_obs(&mut rng, 64);
        let base = argmax_set(&agent.q_values(&[&obs]).unwrap()[0]);
        for g in GroupElement::elements(4) {
            let moved = argmax_set(&agent.q_values(&[&rotate(&obs, &g)]).unwrap()[0]);
            let mut expected: Vec<usize> = base
                .iter()
                .map(|&i| rotate_discrete(DiscreteAction::from_flat(i).unwrap(), &g).flat())
                .collect();
            expected.sort();
            assert_eq!(moved, expected);
        }
    }
}

#[test]
fn dqn_select_action_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut q = vec![0.0; Q_CELLS];
    q[77] = 1.0;
    assert_eq!(dqn_select_action(&q, 0.0, &mut rng).unwrap().flat(), 77);
    q[12] = 1.0;
    assert_eq!(dqn_select_action(&q, 0.0, &mut rng).unwrap().flat(), 12, "ties go to the lowest index");
    assert!(dqn_select_action(&q[..10], 0.0, &mut rng).is_err());

    // Uniform under epsilon = 1: chi-square with 161 degrees of freedom.
    let per_bin = 200;
    let mut counts = vec![0usize; Q_CELLS];
    for _ in 0..per_bin * Q_CELLS {
        counts[dqn_select_action(&q, 1.0, &mut rng).unwrap().flat()] += 1;
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - per_bin as f64).powi(2) / per_bin as f64).sum();
    // The 0.999 quantile of chi-square(161) is about 221.
    assert!(chi2 < 221.0, "{chi2}");
}

#[test]
fn dqn_targets_follow_the_bellman_backup() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let agent = DqnAgent::<f64>::equivariant(dqn_config(), &mut rng).unwrap();
    let batch: Vec<Transition> = (0..6).map(|i| discrete_transition(&mut rng, 64, i % 2 == 0)).collect();
    let (stats, _) = agent.loss_gradients(&batch, &[1.0; 6]).unwrap();
    for (t, td) in batch.iter().zip(&stats.td_errors) {
        let q_sa = agent.q_values(&[&t.obs]).unwrap()[0][t.discrete.unwrap().flat()];
        let y = if t.done {
            t.reward
        } else {
            let next = agent.q_values(&[&t.next_obs]).unwrap().remove(0);
            t.reward + agent.config.gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        assert!((td - (q_sa - y)).abs() <= 1e-10, "{td} vs {}", q_sa - y);
    }
}

#[test]
fn dqn_unit_tau_copies_the_online_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = DqnConfig { tau: 1.0, ..dqn_config() };
    let mut agent = DqnAgent::<f64>::equivariant(config, &mut rng).unwrap();
    let batch: Vec<Transition> = (0..4).map(|_| discrete_transition(&mut rng, 64, false)).collect();
    agent.update(&batch, &[1.0; 4]).unwrap();
    let online: Vec<_> = agent.online().params().named_tensors().map(|(_, t)| t.clone()).collect();
    let target: Vec<_> = agent.target().params().named_tensors().map(|(_, t)| t.clone()).collect();
    assert_eq!(online, target);
}

#[test]
fn dqn_zero_td_error_gives_zero_loss_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let agent = DqnAgent::<f64>::equivariant(dqn_config(), &mut rng).unwrap();
    let mut batch: Vec<Transition> = (0..4).map(|_| discrete_transition(&mut rng, 64, true)).collect();
    for t in &mut batch {
        t.reward = agent.q_values(&[&t.obs]).unwrap()[0][t.discrete.unwrap().flat()];
    }
    let (stats, grads) = agent.loss_gradients(&batch, &[1.0; 4]).unwrap();
    assert!(stats.loss <= 1e-24, "{}", stats.loss);
    let g = grads.iter().flat_map(|(_, g)| g).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(g <= 1e-12, "{g}");
}

#[test]
fn dqn_config_errors_name_the_field() {
    let bad = DqnConfig { lr: 0.0, ..DqnConfig::default() };
    assert!(bad.validate().unwrap_err().to_string().contains("dqn.lr"));
    let bad = DqnConfig { widths: vec![1, 2], ..DqnConfig::default() };
    assert!(bad.validate().unwrap_err().to_string().contains("dqn.widths"));
}

fn randomize<T: Scalar>(net: &mut Network<T>, rng: &mut ChaCha8Rng, scale: f64) {
    let store = net.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = T::of(scale * rng.sample::<f64, _>(StandardNormal));
        }
    }
}

fn within(a: usize, b: usize, tol: f64) -> bool {
    (a as f64 - b as f64).abs() <= tol * b as f64
}

#[test]
fn plain_dqn_matches_parameters_but_not_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for widths in [SMALL_DQN.to_vec(), DqnConfig::default().widths] {
        let config = DqnConfig { widths, ..DqnConfig::default() };
        let equi = DqnAgent::<f64>::equivariant(config.clone(), &mut rng).unwrap();
        let plain = DqnAgent::<f64>::plain(config, &mut rng).unwrap();
        let (e, p) = (equi.online().effective_params(), plain.online().effective_params());
        assert!(within(p, e, 0.1), "plain {p} vs equivariant {e}");
    }
    let mut net = build_plain_dqn::<f64, _>(4, &SMALL_DQN, &mut rng).unwrap();
    randomize(&mut net, &mut rng, 0.5);
    let x = obs_tensor::<f64>(&[&random_obs(&mut rng, 64)]).unwrap();
    let x = FeatureMap::new(net.in_field().clone(), 64, 64, x.into_data()).unwrap();
    let dev = equivariance_error(&net, &x, &GroupElement::generator(4)).unwrap();
    assert!(dev > 0.01, "{dev}");
}

fn actor_deviation<T: Scalar>(agent: &SacAgent<T>, obs: &FeatureMap<f64>) -> f64 {
    let base = agent.actor_outputs(&[obs]).unwrap().remove(0);
    let mut worst = 0.0f64;
    for g in GroupElement::elements(4) {
        let out = agent.actor_outputs(&[&rotate(obs, &g)]).unwrap().remove(0);
        let (x, y) = g.rotation().apply(base.mean[1], base.mean[2]);
        let mut expected = base.clone();
        expected.mean[1] = x;
        expected.mean[2] = y;
        for d in 0..ACTION_DIM {
            worst = worst
                .max((out.mean[d] - expected.mean[d]).abs())
                .max((out.log_std[d] - expected.log_std[d]).abs());
        }
    }
    worst
}

fn critic_deviation<T: Scalar>(agent: &SacAgent<T>, obs: &FeatureMap<f64>, a: &Action) -> f64 {
    let base = agent.q_value(obs, a).unwrap();
    GroupElement::elements(4)
        .map(|g| {
            let q = agent.q_value(&rotate(obs, &g), &a.rotated(&g.rotation())).unwrap();
            (q.0 - base.0).abs().max((q.1 - base.1).abs())
        })
        .fold(0.0, f64::max)
}

fn sac_train<T: Scalar>(agent: &mut SacAgent<T>, steps: usize, rng: &mut ChaCha8Rng) {
    for _ in 0..steps {
        let batch: Vec<Transition> = (0..4).map(|_| { let expert = rng.random_bool(0.5); continuous_transition(rng, SAC_RES, expert) }).collect();
        agent.update(&batch, &[1.0; 4], rng).unwrap();
    }
}

#[test]
fn sac_actor_is_equivariant_and_critic_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let config = SacConfig { demo_l2: true, ..sac_config() };
    let mut agent = SacAgent::<f64>::build(config.clone(), SAC_RES, &mut rng).unwrap();
    let mut single = SacAgent::<f32>::build(config, SAC_RES, &mut rng).unwrap();
    for round in 0..2 {
        let (mut worst, mut worst_single) = (0.0f64, 0.0f64);
        for _ in 0..5 {
            let obs = random_obs(&mut rng, SAC_RES);
            let a = random_action(&mut rng);
            worst = worst.max(actor_deviation(&agent, &obs)).max(critic_deviation(&agent, &obs, &a));
            worst_single = worst_single
                .max(actor_deviation(&single, &obs))
                .max(critic_deviation(&single, &obs, &a));
        }
        assert!(worst <= 1e-10, "round {round}: {worst}");
        assert!(worst_single <= 1e-5, "round {round}: {worst_single}");
        sac_train(&mut agent, 100, &mut rng);
        sac_train(&mut single, 100, &mut rng);
    }
}

#[test]
fn linear_critic_head_ignores_the_planar_action() {
    // Without group pooling, a linear map into a trivial output cannot read
    // the rho_1 block, so rotating only the action leaves q unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut agent = SacAgent::<f64>::build(sac_config(), SAC_RES, &mut rng).unwrap();
    let obs = random_obs(&mut rng, SAC_RES);
    let spread = |agent: &SacAgent<f64>, rng: &mut ChaCha8Rng| -> f64 {
        let mut worst = 0.0f64;
        for _ in 0..5 {
            let a = random_action(rng);
            let base = agent.q_value(&obs, &a).unwrap().0;
            for g in GroupElement::elements(4) {
                worst = worst.max((agent.q_value(&obs, &a.rotated(&g.rotation())).unwrap().0 - base).abs());
            }
        }
        worst
    };
    let pooled = spread(&agent, &mut rng);
    let field = agent.critic().head_field().clone();
    for h in &mut agent.critic_mut().heads {
        *h = equi_critic_head(&field, 2, false, &mut rng).unwrap();
    }
    let linear = spread(&agent, &mut rng);
    assert!(linear <= 1e-12, "{linear}");
    assert!(pooled > 1e-4, "{pooled}");
}

#[test]
fn squashed_policy_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Vanishing sigma returns the squashed mean.
    let mean = [0.3, -1.2, 0.5, 2.0, -0.1];
    let tight = ActorOutput { mean, log_std: [LOG_STD_MIN; ACTION_DIM] };
    let (a, _) = squashed_sample(&tight, &[1.5, -0.7, 0.2, 1.0, -2.0]);
    let expected = denormalize_action(&mean.map(f64::tanh));
    for (x, y) in a.to_vec().iter().zip(expected.to_vec()) {
        assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
    }
    // The log-density matches the change-of-variables formula.
    for _ in 0..100 {
        let out = ActorOutput {
            mean: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
            log_std: std::array::from_fn(|_| rng.random_range(-2.0..1.0)),
        };
        let noise: [f64; ACTION_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let (a, lp) = squashed_sample(&out, &noise);
        let u: [f64; ACTION_DIM] = std::array::from_fn(|d| out.mean[d] + out.log_std[d].exp() * noise[d]);
        let v = normalize_action(&a);
        for d in 0..ACTION_DIM {
            assert!((v[d] - u[d].tanh()).abs() <= 1e-9);
        }
        // Away from saturation the stabilizing epsilon is negligible.
        if u.iter().any(|x| x.abs() > 3.0) {
            continue;
        }
        let oracle: f64 = (0..ACTION_DIM)
            .map(|d| log_squashed_density(u[d].tanh(), out.mean[d], out.log_std[d].exp()))
            .sum();
        assert!((lp - oracle).abs() <= 1e-3, "{lp} vs {oracle}");
        // Extreme parameters stay within the bounds.
        let wild = ActorOutput { mean: [50.0, -50.0, 50.0, -50.0, 50.0], log_std: [LOG_STD_MAX; ACTION_DIM] };
        let (a, _) = squashed_sample(&wild, &noise);
        assert_eq!(a, a.clamped());
    }
}

fn log_squashed_density(v: f64, mu: f64, sigma: f64) -> f64 {
    let u = v.atanh();
    let z = (u - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - (1.0 - v * v).ln()
}

#[test]
fn squashed_density_integrates_to_one() {
    // Midpoint rule over v in (-1, 1); the density vanishes at both ends.
    for (mu, sigma) in [(0.0, 1.0), (1.3, 0.4), (-0.7, 0.8)] {
        let n = 400_000;
        let h = 2.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| log_squashed_density(-1.0 + (i as f64 + 0.5) * h, mu, sigma).exp() * h)
            .sum();
        assert!((total - 1.0).abs() <= 1e-3, "{total}");
    }
}

fn sac_batch(rng: &mut ChaCha8Rng, b: usize, expert: bool) -> Vec<Transition> {
    (0..b).map(|_| continuous_transition(rng, SAC_RES, expert)).collect()
}

#[test]
fn sac_done_transitions_target_the_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut agent = SacAgent::<f64>::build(sac_config(), SAC_RES, &mut rng).unwrap();
    let mut batch = sac_batch(&mut rng, 4, false);
    for t in &mut batch {
        t.done = true;
    }
    let before: Vec<f64> = batch
        .iter()
        .map(|t| {
            let (q1, q2) = agent.q_value(&t.obs, &t.action).unwrap();
            q1.min(q2)
        })
        .collect();
    let stats = agent.update(&batch, &[1.0; 4], &mut rng).unwrap();
    for ((t, q), td) in batch.iter().zip(before).zip(stats.td_errors) {
        assert!((td - (q - t.reward)).abs() <= 1e-10);
    }
}

#[test]
fn temperature_moves_toward_the_target_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (target, grows) in [(100.0, true), (-100.0, false)] {
        let config = SacConfig { target_entropy: target, ..sac_config() };
        let mut agent = SacAgent::<f64>::build(config, SAC_RES, &mut rng).unwrap();
        let before = agent.alpha();
        let batch = sac_batch(&mut rng, 4, false);
        agent.update(&batch, &[1.0; 4], &mut rng).unwrap();
        assert_eq!(agent.alpha() > before, grows);
    }
}

fn jitter_biases(net: &mut Network<f64>, rng: &mut ChaCha8Rng) {
    let store = net.params_mut();
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("/bias")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(0.05..0.2);
        }
    }
}

#[test]
fn sac_update_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let config = SacConfig { demo_l2: true, ..sac_config() };
    let res = 8;
    let mut agent = SacAgent::<f64>::build(config, res, &mut rng).unwrap();
    // Zero biases behind dead channels would sit exactly on a ReLU kink.
    jitter_biases(agent.actor_mut(), &mut rng);
    let c = agent.critic_mut();
    jitter_biases(&mut c.encoder, &mut rng);
    for h in &mut c.heads {
        jitter_biases(h, &mut rng);
    }
    let batch: Vec<Transition> = (0..3).map(|i| continuous_transition(&mut rng, res, i == 0)).collect();
    let weights = [1.0, 0.5, 0.8];
    let noise = SacNoise::sample(3, &mut rng);
    let (critic_grads, actor_grads) = agent.loss_gradients(&batch, &weights, &noise).unwrap();
    let h = 1e-6;

    let mut num = Vec::new();
    let mut ana = Vec::new();
    for (store, grads) in critic_grads.iter().enumerate() {
        for (id, g) in grads {
            for k in (0..g.len()).step_by((g.len() / 3).max(1)) {
                let eval = |delta: f64| {
                    let mut a = agent.clone();
                    let c = a.critic_mut();
                    let net = match store {
                        0 => &mut c.encoder,
                        s => &mut c.heads[s - 1],
                    };
                    net.params_mut().get_mut(*id).data_mut()[k] += delta;
                    a.losses(&batch, &weights, &noise).unwrap().critic
                };
                num.push((eval(h) - eval(-h)) / (2.0 * h));
                ana.push(g[k]);
            }
        }
    }
    for (id, g) in &actor_grads {
        for k in (0..g.len()).step_by((g.len() / 3).max(1)) {
            let eval = |delta: f64| {
                let mut a = agent.clone();
                a.actor_mut().params_mut().get_mut(*id).data_mut()[k] += delta;
                a.losses(&batch, &weights, &noise).unwrap().actor
            };
            num.push((eval(h) - eval(-h)) / (2.0 * h));
            ana.push(g[k]);
        }
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(num.len() > 50);
    assert!(diff / scale < 1e-3, "relative error {}", diff / scale);
}

#[test]
fn sacfd_term_contracts() {
    let e = [[0.1, -0.3, 0.5, 0.0, 0.9]];
    assert_eq!(sacfd_l2(&e, &e, &[true]), 0.0);
    let shifted = [e[0].map(|v| v + 0.2)];
    assert!((sacfd_l2(&shifted, &e, &[true]) - 0.1).abs() <= 1e-12);
    assert_eq!(sacfd_l2(&shifted, &e, &[false]), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let plain = SacAgent::<f64>::build(sac_config(), SAC_RES, &mut rng).unwrap();
    let mut with_l2 = plain.clone();
    with_l2.config.demo_l2 = true;
    let batch = sac_batch(&mut rng, 4, false);
    let noise = SacNoise::sample(4, &mut rng);
    let a = plain.losses(&batch, &[1.0; 4], &noise).unwrap();
    let b = with_l2.losses(&batch, &[1.0; 4], &noise).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sacfd_term_is_invariant_under_joint_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let config = SacConfig { demo_l2: true, ..sac_config() };
    let agent = SacAgent::<f64>::build(config, SAC_RES, &mut rng).unwrap();
    let batch = sac_batch(&mut rng, 4, true);
    let still = SacNoise {
        next: vec![[0.0; ACTION_DIM]; 4],
        current: vec![[0.0; ACTION_DIM]; 4],
    };
    let base = agent.losses(&batch, &[1.0; 4], &still).unwrap().l2;
    assert!(base > 0.0);
    for g in GroupElement::elements(4) {
        let moved: Vec<Transition> = batch
            .iter()
            .map(|t| Transition {
                obs: rotate(&t.obs, &g),
                next_obs: rotate(&t.next_obs, &g),
                action: t.action.rotated(&g.rotation()),
                ..t.clone()
            })
            .collect();
        let l2 = agent.losses(&moved, &[1.0; 4], &still).unwrap().l2;
        assert!((l2 - base).abs() <= 1e-10, "{l2} vs {base}");
    }
}

#[test]
fn plain_sac_matches_parameters_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for widths in [SMALL_SAC.to_vec(), SacConfig::default().widths] {
        let (ea, ec) = build_equi_sac::<f64, _>(4, &widths, SAC_RES, &mut rng).unwrap();
        let (pa, pc) = build_plain_sac::<f64, _>(4, &widths, SAC_RES, &mut rng).unwrap();
        assert!(within(pa.effective_params(), ea.effective_params(), 0.1));
        assert!(within(pc.effective_params(), ec.effective_params(), 0.1));
        assert_eq!(pa.out_field().total_dim(), ea.out_field().total_dim());
    }
    let config = SacConfig { equi_actor: false, equi_critic: false, ..sac_config() };
    let mut agent = SacAgent::<f64>::build(config, SAC_RES, &mut rng).unwrap();
    randomize(agent.actor_mut(), &mut rng, 0.5);
    let obs = random_obs(&mut rng, SAC_RES);
    assert!(actor_deviation(&agent, &obs) > 0.01);
    let a = agent.act(&[&obs], true, &mut rng).unwrap();
    assert_eq!(a.len(), 1);
}

fn sim_transitions(n: usize) -> (Sim, Vec<(WorldState, Action, Transition)>) {
    let sim = Sim::new(SimConfig { resolution: 32, ..SimConfig::default() }).unwrap();
    let mut out = Vec::new();
    for seed in 0..n as u64 {
        let task = Task::ALL[seed as usize % 3];
        let mut s = sim.reset(task, seed);
        for _ in 0..(seed as usize * 7) % 25 {
            let next = sim.step(&s, &expert_action(&s));
            if next.done {
                break;
            }
            s = next.state;
        }
        let a = expert_action(&s);
        let step = sim.step(&s, &a);
        let t = Transition {
            obs: sim.render(&s, 4).unwrap(),
            action: a,
            discrete: None,
            reward: step.reward,
            next_obs: sim.render(&step.state, 4).unwrap(),
            done: step.done && step.reward > 0.0,
            is_expert: true,
        };
        out.push((s, a, t));
    }
    (sim, out)
}

#[test]
fn augmentation_contracts() {
    let (sim, items) = sim_transitions(30);
    let (_, _, t) = &items[0];
    assert_eq!(&augment_transition(0.0, t).unwrap(), t);

    let d = DiscreteAction::nearest(&Action::new(1.0, 0.02, 0.0, 0.02, 0.0));
    let discrete = Transition { discrete: Some(d), action: d.to_action(), ..t.clone() };
    let turned = augment_transition(std::f64::consts::FRAC_PI_2, &discrete).unwrap();
    let xy = turned.discrete.unwrap().to_action().xy;
    assert!(xy[0].abs() < 1e-12 && (xy[1] - 0.02).abs() < 1e-12);
    assert_eq!(turned.discrete.unwrap().combo, d.combo);
    assert!(augment_transition(0.3, &discrete).is_err());

    let mut rewarded = 0;
    for (s, a, t) in &items {
        rewarded += usize::from(t.reward > 0.0);
        for g in GroupElement::elements(4) {
            let aug = augment_transition(g.angle(), t).unwrap();
            assert_eq!((aug.reward, aug.done, aug.is_expert), (t.reward, t.done, t.is_expert));
            let (v, w) = (aug.action.to_vec(), t.action.to_vec());
            assert_eq!([v[0], v[3], v[4]], [w[0], w[3], w[4]]);
            // Replaying the rotated pair through the simulator reproduces the
            // stored reward and the rotated observations.
            let moved = rotate_state_by(&g, s);
            let step = sim.step(&moved, &aug.action);
            assert_eq!(step.reward, t.reward);
            assert!(sim.render(&moved, 4).unwrap().max_abs_diff(&aug.obs) <= 1e-6);
            assert!(sim.render(&step.state, 4).unwrap().max_abs_diff(&aug.next_obs) <= 1e-6);
            let expected = a.rotated(&g.rotation());
            assert!((aug.action.xy[0] - expected.xy[0]).abs() <= 1e-12);
        }
    }
    assert!(rewarded > 0, "some sampled steps should be rewarded");
}

#[test]
fn continuous_rotation_fills_with_the_channel_maximum() {
    let (_, items) = sim_transitions(3);
    let obs = &items[1].2.obs;
    let turned = rotate_observation(obs, Rotation::from_angle(0.6)).unwrap();
    for c in 0..obs.channels() {
        let max = obs.channel(c).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(turned.channel(c).iter().all(|&v| v <= max + 1e-12));
        assert!((turned.get(c, 0, 0) - max).abs() <= 1e-12);
    }
}

fn buffer(aug_factor: usize, prioritized: bool) -> ReplayBuffer {
    ReplayBuffer::new(ReplayConfig { aug_factor, prioritized, ..ReplayConfig::default() }).unwrap()
}

#[test]
fn buffer_inserts_augmented_copies() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let t = continuous_transition(&mut rng, 8, false);
    let mut b = buffer(4, true);
    b.add_with_aug(t.clone(), &mut rng).unwrap();
    assert_eq!(b.len(), 5);
    let mut b = buffer(0, true);
    b.add_with_aug(t, &mut rng).unwrap();
    assert_eq!(b.len(), 1);
}

#[test]
fn buffer_round_trips_observations() {
    let (_, items) = sim_transitions(5);
    let mut b = buffer(0, false);
    for (_, _, t) in &items {
        b.push(t.clone());
    }
    for (i, (_, _, t)) in items.iter().enumerate() {
        let back = b.get(i).unwrap();
        assert!(back.obs.max_abs_diff(&t.obs) <= 1e-5);
        assert!(back.next_obs.max_abs_diff(&t.next_obs) <= 1e-5);
        assert_eq!((back.action, back.reward, back.done), (t.action, t.reward, t.done));
    }
}

#[test]
fn expert_transitions_get_the_priority_bonus() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut b = buffer(0, true);
    let plain = b.push(continuous_transition(&mut rng, 8, false));
    b.update_priorities(&[plain], &[2.5]).unwrap();
    let expert = b.push(continuous_transition(&mut rng, 8, true));
    assert!((b.priority(expert) - (b.max_priority() + 1.0)).abs() <= 1e-12);
    b.update_priorities(&[expert], &[0.5]).unwrap();
    assert!((b.priority(expert) - (0.5 + 1e-6 + 1.0)).abs() <= 1e-12);
}

#[test]
fn prioritized_sampling_frequencies_follow_the_exponent() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut b = buffer(0, true);
    let n = 10;
    for _ in 0..n {
        b.push(continuous_transition(&mut rng, 4, false));
    }
    let mut td = vec![1.0; n];
    td[3] = 10.0 * (1.0 + 1e-6) - 1e-6;
    b.update_priorities(&(0..n).collect::<Vec<_>>(), &td).unwrap();
    let draws = 100_000;
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        counts[b.sample(1, 0.4, &mut rng).unwrap().indices[0]] += 1;
    }
    let others = (draws - counts[3]) as f64 / (n - 1) as f64;
    let ratio = counts[3] as f64 / others;
    let expected = 10f64.powf(0.6);
    assert!((ratio / expected - 1.0).abs() <= 0.05, "{ratio} vs {expected}");
}

#[test]
fn importance_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut uniform = buffer(0, false);
    let mut per = buffer(0, true);
    for i in 0..20 {
        let t = continuous_transition(&mut rng, 4, i % 3 == 0);
        uniform.push(t.clone());
        per.push(t);
    }
    per.update_priorities(&(0..20).collect::<Vec<_>>(), &(0..20).map(|i| i as f64).collect::<Vec<_>>())
        .unwrap();
    assert!(uniform.sample(16, 0.4, &mut rng).unwrap().weights.iter().all(|&w| w == 1.0));
    assert!(per.sample(16, 0.0, &mut rng).unwrap().weights.iter().all(|&w| w == 1.0));
    let s = per.sample(16, 1.0, &mut rng).unwrap();
    assert!(s.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
    // w_i = (N P(i))^-beta / max_j (N P(j))^-beta with P(i) = p_i^a / sum p^a.
    let mass: Vec<f64> = (0..20).map(|j| per.priority(j).powf(0.6)).collect();
    let total: f64 = mass.iter().sum();
    let w_max = (20.0 * mass.iter().copied().fold(f64::INFINITY, f64::min) / total).powf(-1.0);
    for (&i, &w) in s.indices.iter().zip(&s.weights) {
        let expected = (20.0 * mass[i] / total).powf(-1.0) / w_max;
        assert!((w - expected).abs() <= 1e-9, "{w} vs {expected}");
    }
}

#[test]
fn buffer_overwrites_the_oldest_entry() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut b = ReplayBuffer::new(ReplayConfig { capacity: 3, aug_factor: 0, ..ReplayConfig::default() }).unwrap();
    let items: Vec<Transition> = (0..5).map(|_| continuous_transition(&mut rng, 4, false)).collect();
    for t in &items {
        b.push(t.clone());
    }
    assert_eq!(b.len(), 3);
    assert_eq!(b.get(0).unwrap().reward, items[3].reward);
    assert_eq!(b.get(1).unwrap().reward, items[4].reward);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sum_tree_mass_matches_priorities(ops in prop::collection::vec((0usize..40, 0.0f64..5.0, any::<bool>()), 1..120)) {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut b = ReplayBuffer::new(ReplayConfig { capacity: 16, aug_factor: 0, ..ReplayConfig::default() }).unwrap();
        let template = continuous_transition(&mut rng, 2, false);
        for (slot, td, insert) in ops {
            if insert || b.is_empty() {
                b.push(Transition { is_expert: td > 2.5, ..template.clone() });
            } else {
                b.update_priorities(&[slot % b.len()], &[td]).unwrap();
            }
            let expected: f64 = (0..b.len()).map(|i| b.priority(i).powf(0.6)).sum();
            prop_assert!((b.total_mass() - expected).abs() <= 1e-9 * expected);
        }
    }

    #[test]
    fn linear_schedule_interpolates(start in 0.0f64..1.0, end in 0.0f64..1.0, step in 0u64..2000) {
        let v = linear_schedule(start, end, 0.5, step, 2000);
        let (lo, hi) = (start.min(end), start.max(end));
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        if step >= 1000 {
            prop_assert!((v - end).abs() <= 1e-12);
        }
    }
}
