//! Oracle suites run by `equirl verify`.

use anyhow::{bail, Result};
use equirl::agents::{build_equi_dqn, equi_critic_head, SacAgent, SacConfig, SacNoise, Transition};
use equirl::gmdp::TabularGmdp;
use equirl::group::{act_on_feature_map, FeatureMap, FieldType, GroupElement};
use equirl::sim::{
    expert_action, rollout, rotate_state_by, Action, DiscreteAction, Sim, SimConfig, Task, WorldState,
    CONTINUOUS_THETA, CONTINUOUS_XY, CONTINUOUS_Z,
};
use equirl::steerable::{corollary_deviation, equivariance_error, verify_schur_form, Network, NetworkBuilder};
use equirl::tensor::gradcheck::check_gradients;
use equirl::tensor::{tol, SparseMatrix, Tape, Tensor, Var};
use equirl::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Equivariance,
    Gradient,
    OptimalQ,
    Schur,
    Simulator,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Equivariance,
        Suite::Gradient,
        Suite::OptimalQ,
        Suite::Schur,
        Suite::Simulator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivariance => "equivariance",
            Suite::Gradient => "gradient",
            Suite::OptimalQ => "optimal_q",
            Suite::Schur => "schur",
            Suite::Simulator => "simulator",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match Suite::ALL.into_iter().find(|x| x.name() == s) {
            Some(x) => Ok(x),
            None => bail!("unknown suite `{s}` (expected one of equivariance, gradient, optimal_q, schur, simulator)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bound {
    AtMost(f64),
    AtLeast(f64),
}

/// One measured quantity and the bound it must satisfy.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, bound: Bound::AtMost(limit) }
    }

    pub fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, bound: Bound::AtLeast(limit) }
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::AtMost(l) => self.value <= l,
            Bound::AtLeast(l) => self.value >= l,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (op, l) = match self.bound {
            Bound::AtMost(l) => ("<=", l),
            Bound::AtLeast(l) => (">=", l),
        };
        let verdict = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "  {:<48} {:>12.3e} {op} {l:e}  {verdict}", self.name, self.value)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    /// Largest value among the upper-bounded checks.
    pub fn max_deviation(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| matches!(c.bound, Bound::AtMost(_)))
            .map(|c| c.value)
            .fold(0.0, f64::max)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "suite {}", self.suite)?;
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{}: {verdict} (max deviation {:.3e})", self.suite, self.max_deviation())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Turns kernel projection off in every network the equivariance suite
    /// builds, which that suite must detect.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, inject_fault: false }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let checks = match suite {
        Suite::Equivariance => equivariance(opts.inject_fault, &mut rng)?,
        Suite::Gradient => gradient(&mut rng)?,
        Suite::OptimalQ => optimal_q(&mut rng)?,
        Suite::Schur => schur(&mut rng)?,
        Suite::Simulator => simulator(&mut rng)?,
    };
    Ok(SuiteReport { suite, checks })
}

const N: usize = 4;
/// Random (weights, input, g) triples per network.
pub const TRIPLES: usize = 100;
const INPUTS_PER_DRAW: usize = 5;
const SMALL_DQN: [usize; 6] = [2, 4, 8, 8, 8, 8];
const SMALL_SAC: [usize; 7] = [2, 4, 8, 8, 8, 8, 8];
const SAC_RES: usize = 16;

fn random_map<T: Scalar>(field: &FieldType, size: usize, rng: &mut ChaCha8Rng) -> Result<FeatureMap<T>> {
    let data = (0..field.total_dim() * size * size)
        .map(|_| T::of(rng.random_range(-1.0..1.0)))
        .collect();
    Ok(FeatureMap::new(field.clone(), size, size, data)?)
}

fn random_g(rng: &mut ChaCha8Rng) -> GroupElement {
    GroupElement::new(N, rng.random_range(1..N)).expect("index below the order")
}

/// Redraws every parameter: kernels from `N(0, 2 / fan_in)`, biases from
/// `N(0, 0.1^2)`. Steerable layers project their raw kernels, so the
/// realized network stays equivariant.
fn randomize<T: Scalar>(net: &mut Network<T>, rng: &mut ChaCha8Rng) {
    let store = net.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let scale = if shape.len() == 4 { (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt() } else { 0.1 };
        for v in store.get_mut(id).data_mut() {
            *v = T::of(scale * rng.sample::<f64, _>(StandardNormal));
        }
    }
}

/// Worst two-path deviation over `TRIPLES` draws of weights, input and g.
fn network_deviation<T: Scalar>(
    build: &dyn Fn(&mut ChaCha8Rng) -> Result<Network<T>>,
    size: usize,
    fault: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..TRIPLES / INPUTS_PER_DRAW {
        let mut net = build(rng)?;
        randomize(&mut net, rng);
        net.set_projection(!fault);
        for _ in 0..INPUTS_PER_DRAW {
            let x = random_map::<T>(net.in_field(), size, rng)?;
            worst = worst.max(equivariance_error(&net, &x, &random_g(rng))?);
        }
    }
    Ok(worst)
}

#[derive(Clone)]
enum LayerKind {
    Conv(FieldType, usize),
    Relu,
    MaxPool,
    GroupMaxPool,
}

fn single_layer<T: Scalar>(in_field: &FieldType, kind: &LayerKind, rng: &mut ChaCha8Rng) -> Result<Network<T>> {
    let b = NetworkBuilder::<T, _>::new(in_field.clone(), rng);
    let b = match kind {
        LayerKind::Conv(out, k) => b.steerable(out.clone(), *k, k / 2)?,
        LayerKind::Relu => b.relu()?,
        LayerKind::MaxPool => b.max_pool(),
        LayerKind::GroupMaxPool => b.group_max_pool()?,
    };
    Ok(b.build())
}

/// Every layer kind: steerable convolutions between all pairs of trivial,
/// standard and regular fields at k = 1 and 3, and the nonlinearities.
fn layer_kinds() -> Vec<(String, FieldType, LayerKind)> {
    let fields = [
        ("trivial", FieldType::trivial(N, 2)),
        ("regular", FieldType::regular(N, 2)),
        ("standard", FieldType::standard(N, 2)),
    ];
    let mut kinds = Vec::new();
    for (a, fa) in &fields {
        for (b, fb) in &fields {
            for k in [1usize, 3] {
                kinds.push((format!("conv {a}->{b} k{k}"), fa.clone(), LayerKind::Conv(fb.clone(), k)));
            }
        }
    }
    let reg = FieldType::regular(N, 2);
    kinds.push(("relu".into(), reg.clone(), LayerKind::Relu));
    kinds.push(("spatial max pool".into(), reg.clone(), LayerKind::MaxPool));
    kinds.push(("group max pool".into(), reg, LayerKind::GroupMaxPool));
    kinds
}

fn sac_deviation<T: Scalar>(agent: &SacAgent<T>, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let obs = random_obs(rng, SAC_RES);
    let a = random_action(rng);
    let g = random_g(rng);
    let moved = act_on_feature_map(obs.field(), &g, &obs)?;
    let base = agent.actor_outputs(&[&obs])?.remove(0);
    let out = agent.actor_outputs(&[&moved])?.remove(0);
    let (x, y) = g.rotation().apply(base.mean[1], base.mean[2]);
    let mut expected = base.clone();
    expected.mean[1] = x;
    expected.mean[2] = y;
    let actor = (0..base.mean.len())
        .map(|d| (out.mean[d] - expected.mean[d]).abs().max((out.log_std[d] - expected.log_std[d]).abs()))
        .fold(0.0, f64::max);
    let q = agent.q_value(&obs, &a)?;
    let qg = agent.q_value(&moved, &a.rotated(&g.rotation()))?;
    Ok((actor, (q.0 - qg.0).abs().max((q.1 - qg.1).abs())))
}

fn randomize_sac<T: Scalar>(agent: &mut SacAgent<T>, fault: bool, rng: &mut ChaCha8Rng) {
    randomize(agent.actor_mut(), rng);
    agent.actor_mut().set_projection(!fault);
    let c = agent.critic_mut();
    randomize(&mut c.encoder, rng);
    for h in &mut c.heads {
        randomize(h, rng);
    }
    c.set_projection(!fault);
}

fn sac_networks<T: Scalar>(fault: bool, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let config = SacConfig { widths: SMALL_SAC.to_vec(), ..SacConfig::default() };
    let (mut actor, mut critic) = (0.0f64, 0.0f64);
    for _ in 0..TRIPLES / INPUTS_PER_DRAW {
        let mut agent = SacAgent::<T>::build(config.clone(), SAC_RES, rng)?;
        randomize_sac(&mut agent, fault, rng);
        for _ in 0..INPUTS_PER_DRAW {
            let (a, c) = sac_deviation(&agent, rng)?;
            actor = actor.max(a);
            critic = critic.max(c);
        }
    }
    Ok((actor, critic))
}

fn equivariance(fault: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, field, kind) in layer_kinds() {
        let build64 = |r: &mut ChaCha8Rng| single_layer::<f64>(&field, &kind, r);
        let build32 = |r: &mut ChaCha8Rng| single_layer::<f32>(&field, &kind, r);
        let d64 = network_deviation(&build64, 8, fault, rng)?;
        let d32 = network_deviation(&build32, 8, fault, rng)?;
        checks.push(Check::at_most(format!("{name} f64"), d64, tol::EXACT_F64));
        checks.push(Check::at_most(format!("{name} f32"), d32, tol::EXACT_F32));
    }
    let dqn64 = |r: &mut ChaCha8Rng| -> Result<Network<f64>> { Ok(build_equi_dqn(N, &SMALL_DQN, r)?) };
    let dqn32 = |r: &mut ChaCha8Rng| -> Result<Network<f32>> { Ok(build_equi_dqn(N, &SMALL_DQN, r)?) };
    checks.push(Check::at_most("dqn q-map f64", network_deviation(&dqn64, 64, fault, rng)?, tol::EXACT_F64));
    checks.push(Check::at_most("dqn q-map f32", network_deviation(&dqn32, 64, fault, rng)?, tol::EXACT_F32));
    let (a64, c64) = sac_networks::<f64>(fault, rng)?;
    let (a32, c32) = sac_networks::<f32>(fault, rng)?;
    checks.push(Check::at_most("sac actor f64", a64, tol::EXACT_F64));
    checks.push(Check::at_most("sac actor f32", a32, tol::EXACT_F32));
    checks.push(Check::at_most("sac critic invariance f64", c64, tol::EXACT_F64));
    checks.push(Check::at_most("sac critic invariance f32", c32, tol::EXACT_F32));
    Ok(checks)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

/// Contracts `x` with fixed random weights into a scalar.
fn weigh(tape: &mut Tape<f64>, x: Var, seed: u64) -> equirl::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(rand_tensor(&mut rng, &shape));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

type Primitive = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> equirl::Result<Var>>;

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    let sparse = Arc::new(SparseMatrix::from_triplets(
        4,
        6,
        [(0, 0, 0.5), (0, 5, -1.0), (1, 2, 2.0), (3, 3, 0.25), (3, 1, 1.0)],
        0.0,
    ));
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.add(v[0], v[1])?; weigh(t, y, 1) })),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.sub(v[0], v[1])?; weigh(t, y, 2) })),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.mul(v[0], v[1])?; weigh(t, y, 3) })),
        ("relu", vec![vec![20]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.relu(v[0]); weigh(t, y, 4) })),
        ("tanh", vec![vec![7]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.tanh(v[0]); weigh(t, y, 5) })),
        ("exp", vec![vec![7]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.exp(v[0]); weigh(t, y, 6) })),
        ("log", vec![vec![7]], Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul(v[0], v[0])?;
            let y = t.add_scalar(y, 0.5);
            let y = t.log(y);
            weigh(t, y, 7)
        })),
        ("clamp", vec![vec![30]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.clamp(v[0], -0.5, 0.4); weigh(t, y, 8) })),
        ("minimum", vec![vec![30], vec![30]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.minimum(v[0], v[1])?; weigh(t, y, 9) })),
        ("huber", vec![vec![30]], Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let y = t.mul_scalar(v[0], 3.0);
            let y = t.huber(y, 1.0);
            weigh(t, y, 10)
        })),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.matmul(v[0], v[1])?; weigh(t, y, 11) })),
        ("conv2d", vec![vec![2, 3, 6, 6], vec![4, 3, 3, 3]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.conv2d(v[0], v[1], 1)?; weigh(t, y, 12) })),
        ("channel bias", vec![vec![2, 3, 2, 2], vec![3]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.add_channel_bias(v[0], v[1])?; weigh(t, y, 13) })),
        ("sparse linear", vec![vec![6]], Box::new(move |t: &mut Tape<f64>, v: &[Var]| { let y = t.sparse_linear(v[0], sparse.clone(), &[2, 2])?; weigh(t, y, 14) })),
        ("max axis", vec![vec![2, 4, 3]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.max_axis(v[0], 1)?; weigh(t, y, 15) })),
        ("max pool", vec![vec![2, 2, 4, 6]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.max_pool2d(v[0])?; weigh(t, y, 16) })),
        ("sum axis", vec![vec![2, 3, 4]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.sum_axis(v[0], 1)?; weigh(t, y, 17) })),
        ("concat", vec![vec![2, 3, 2], vec![2, 1, 2]], Box::new(|t: &mut Tape<f64>, v: &[Var]| { let y = t.concat(&[v[0], v[1], v[0]], 1)?; weigh(t, y, 18) })),
        ("reshape slice", vec![vec![4, 6]], Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let y = t.reshape(v[0], &[2, 3, 4])?;
            let y = t.slice(y, 2, 1, 3)?;
            weigh(t, y, 19)
        })),
        ("mean", vec![vec![3, 5]], Box::new(|t: &mut Tape<f64>, v: &[Var]| {
            let m = t.mean(v[0]);
            let y = t.mul(m, m)?;
            Ok(t.sum(y))
        })),
    ]
}

fn random_obs(rng: &mut ChaCha8Rng, size: usize) -> FeatureMap<f64> {
    let data = (0..2 * size * size).map(|_| rng.random_range(-0.05..0.1)).collect();
    FeatureMap::new(FieldType::trivial(N, 2), size, size, data).expect("sizes match")
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    Action::new(
        rng.random_range(0.0..1.0),
        rng.random_range(-CONTINUOUS_XY..CONTINUOUS_XY),
        rng.random_range(-CONTINUOUS_XY..CONTINUOUS_XY),
        rng.random_range(-CONTINUOUS_Z..CONTINUOUS_Z),
        rng.random_range(-CONTINUOUS_THETA..CONTINUOUS_THETA),
    )
}

fn sac_transitions(rng: &mut ChaCha8Rng, b: usize, size: usize) -> Vec<Transition> {
    (0..b)
        .map(|i| Transition {
            obs: random_obs(rng, size),
            action: random_action(rng),
            discrete: None,
            reward: rng.random_range(0.0..1.0),
            next_obs: random_obs(rng, size),
            done: rng.random_bool(0.3),
            is_expert: i % 2 == 0,
        })
        .collect()
}

/// Gives every bias a small positive value so that no pre-activation sits
/// exactly on a ReLU kink behind a dead channel.
fn jitter_biases(net: &mut Network<f64>, rng: &mut ChaCha8Rng) {
    let store = net.params_mut();
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("/bias")).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(0.05..0.2);
        }
    }
}

/// Relative L2 error between analytic and central-difference gradients of
/// the SAC critic and actor losses, sampled over every parameter tensor.
pub fn sac_update_gradient_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let config = SacConfig { widths: vec![1, 2, 2, 2, 2, 2, 2], batch: 3, demo_l2: true, ..SacConfig::default() };
    let res = 8;
    let mut agent = SacAgent::<f64>::build(config, res, rng)?;
    jitter_biases(agent.actor_mut(), rng);
    let c = agent.critic_mut();
    jitter_biases(&mut c.encoder, rng);
    for h in &mut c.heads {
        jitter_biases(h, rng);
    }
    let batch = sac_transitions(rng, 3, res);
    let weights = [1.0, 0.5, 0.8];
    let noise = SacNoise::sample(3, rng);
    let (critic_grads, actor_grads) = agent.loss_gradients(&batch, &weights, &noise)?;
    let h = 1e-6;
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    for (store, grads) in critic_grads.iter().enumerate() {
        for (id, g) in grads {
            for k in (0..g.len()).step_by((g.len() / 3).max(1)) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut a = agent.clone();
                    let c = a.critic_mut();
                    let net = if store == 0 { &mut c.encoder } else { &mut c.heads[store - 1] };
                    net.params_mut().get_mut(*id).data_mut()[k] += delta;
                    Ok(a.losses(&batch, &weights, &noise)?.critic)
                };
                num.push((eval(h)? - eval(-h)?) / (2.0 * h));
                ana.push(g[k]);
            }
        }
    }
    for (id, g) in &actor_grads {
        for k in (0..g.len()).step_by((g.len() / 3).max(1)) {
            let eval = |delta: f64| -> Result<f64> {
                let mut a = agent.clone();
                a.actor_mut().params_mut().get_mut(*id).data_mut()[k] += delta;
                Ok(a.losses(&batch, &weights, &noise)?.actor)
            };
            num.push((eval(h)? - eval(-h)?) / (2.0 * h));
            ana.push(g[k]);
        }
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / scale)
}

/// Worst actor/critic deviation of a single-precision SAC agent after
/// `steps` Adam updates on random batches.
pub fn trained_sac_deviation(steps: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let config = SacConfig { widths: vec![1, 2, 2, 2, 2, 2, 2], batch: 4, demo_l2: true, ..SacConfig::default() };
    let mut agent = SacAgent::<f32>::build(config, SAC_RES, rng)?;
    for _ in 0..steps {
        let batch = sac_transitions(rng, 4, SAC_RES);
        agent.update(&batch, &[1.0; 4], rng)?;
    }
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (a, c) = sac_deviation(&agent, rng)?;
        worst = worst.max(a).max(c);
    }
    Ok(worst)
}

fn gradient(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    for (name, shapes, f) in primitives() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(rng, s)).collect();
        let err = check_gradients(|t, v| f(t, v), &inputs, tol::FD_STEP)?;
        checks.push(Check::at_most(format!("primitive {name}"), err, tol::GRAD_PRIMITIVE));
    }
    checks.push(Check::at_most("sac update (critic + actor)", sac_update_gradient_error(rng)?, tol::GRAD_COMPOSITE));
    checks.push(Check::at_most("sac f32 equivariance after 100 adam steps", trained_sac_deviation(100, rng)?, tol::EXACT_F32));
    Ok(checks)
}

fn optimal_q(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let layouts: [(&[usize], &[usize]); 3] = [(&[4, 4, 2, 1], &[4]), (&[4; 8], &[4, 2]), (&[4, 4, 4, 2, 2, 1, 1], &[4, 1])];
    for (i, (states, actions)) in layouts.iter().enumerate() {
        let mdp = TabularGmdp::random(N, states, actions, 0.9, 3, rng)?.symmetrize();
        let q = mdp.value_iteration(1e-12)?;
        let report = mdp.verify_optimal_q(&q)?;
        checks.push(Check::at_most(format!("mdp {i} ({} states) bellman residual", mdp.states()), mdp.bellman_residual(&q), 1e-12));
        checks.push(Check::at_most(format!("mdp {i} q* invariance"), report.q_dev, 1e-9));
        checks.push(Check::at_least(format!("mdp {i} argmax equivariant"), f64::from(u8::from(report.policy_equivariant)), 1.0));
    }
    Ok(checks)
}

/// Evaluates a head on a single `1 x 1` input vector.
fn head_fn(net: &Network<f64>) -> impl Fn(&[f64]) -> f64 + '_ {
    move |x: &[f64]| {
        let map = FeatureMap::new(net.in_field().clone(), 1, 1, x.to_vec()).expect("input matches the head");
        net.forward_map(&map).expect("head forward").data()[0]
    }
}

fn schur(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let report = verify_schur_form(N, 20, 30, rng)?;
    let field = FieldType::regular(N, 2);
    let inputs: Vec<Vec<f64>> = (0..30).map(|_| (0..2 * N).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let linear = equi_critic_head::<f64, _>(&field, 4, false, rng)?;
    let mut pooled = equi_critic_head::<f64, _>(&field, 4, true, rng)?;
    randomize(&mut pooled, rng);
    let linear_dev = corollary_deviation(&head_fn(&linear), N, &inputs);
    let pooled_dev = corollary_deviation(&head_fn(&pooled), N, &inputs);
    Ok(vec![
        Check::at_most("sum-form residual", report.residual, 1e-10),
        Check::at_most("independent-rotation corollary", report.corollary, 1e-12),
        Check::at_most("linear head corollary", linear_dev, 1e-12),
        Check::at_least("max-pool head escapes corollary", pooled_dev, 1e-6),
    ])
}

fn sim_action(rng: &mut ChaCha8Rng) -> Action {
    if rng.random_bool(0.5) {
        DiscreteAction::from_flat(rng.random_range(0..162)).expect("flat index in range").to_action()
    } else {
        random_action(rng)
    }
}

/// A reachable state: a reset followed by a mix of expert and random steps.
fn sim_state(sim: &Sim, rng: &mut ChaCha8Rng) -> WorldState {
    let task = Task::ALL[rng.random_range(0..3)];
    let mut s = sim.reset(task, rng.random());
    for _ in 0..rng.random_range(0..30) {
        let a = if rng.random_bool(0.6) { expert_action(&s) } else { sim_action(rng) };
        let out = sim.step(&s, &a);
        if out.done {
            break;
        }
        s = out.state;
    }
    s
}

/// Simulator checks over `samples` random `(s, a, g)` and `episodes`
/// expert episodes per task.
pub fn simulator_checks(samples: usize, episodes: u64, rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    let sim = Sim::new(SimConfig::default())?;
    let (mut step_dev, mut obs_dev, mut mismatches) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..samples {
        let s = sim_state(&sim, rng);
        let a = sim_action(rng);
        let g = GroupElement::new(N, rng.random_range(0..N))?;
        let r = g.rotation();
        let moved = rotate_state_by(&g, &s);
        let direct = sim.step(&s, &a);
        let turned = sim.step(&moved, &a.rotated(&r));
        step_dev = step_dev.max(rotate_state_by(&g, &direct.state).relative_deviation(&turned.state));
        mismatches += usize::from((direct.reward, direct.done) != (turned.reward, turned.done));
        let obs = sim.render(&s, N)?;
        let lhs = sim.render(&moved, N)?;
        obs_dev = obs_dev.max(lhs.max_abs_diff(&act_on_feature_map(obs.field(), &g, &obs)?));
    }
    let mut checks = vec![
        Check::at_most("step equivariance", step_dev, 1e-9),
        Check::at_most("reward/done mismatches", mismatches as f64, 0.0),
        Check::at_most("observation equivariance", obs_dev, 1e-6),
    ];
    for task in Task::ALL {
        let wins = (0..episodes)
            .filter(|&seed| rollout(&sim, task, seed, expert_action).last().is_some_and(|s| s.reward == 1.0))
            .count();
        checks.push(Check::at_least(format!("expert success {task}"), wins as f64 / episodes as f64, 0.95));
    }
    Ok(checks)
}

fn simulator(rng: &mut ChaCha8Rng) -> Result<Vec<Check>> {
    simulator_checks(1000, 200, rng)
}
