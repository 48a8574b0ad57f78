//! Soft actor-critic over the continuous action `(a_lambda, a_xy, a_z,
//! a_theta)`, with the optional demonstration L2 term.
//!
//! The policy is a tanh-squashed diagonal Gaussian in normalized action
//! space `[-1, 1]^5` (component order of [`Action::to_vec`]), mapped
//! affinely onto the action bounds. Log-probabilities are densities of the
//! normalized action, so the target entropy is independent of units.

use super::{match_widths, obs_tensor, Transition};
use crate::group::{BlockKind, FeatureMap, FieldType};
use crate::sim::{Action, CONTINUOUS_THETA, CONTINUOUS_XY, CONTINUOUS_Z};
use crate::steerable::{Network, NetworkBuilder};
use crate::tensor::{Adam, AdamConfig, Checkpoint, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result, Scalar};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

pub const ACTION_DIM: usize = 5;
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Keeps `log(1 - tanh^2)` finite at saturation.
const SQUASH_EPS: f64 = 1e-6;
/// Actor output channels: `a_xy` mean (rho_1), three invariant means and
/// five log standard deviations.
const ACTOR_OUT: usize = 10;

const LOW: [f64; ACTION_DIM] = [0.0, -CONTINUOUS_XY, -CONTINUOUS_XY, -CONTINUOUS_Z, -CONTINUOUS_THETA];
const HIGH: [f64; ACTION_DIM] = [1.0, CONTINUOUS_XY, CONTINUOUS_XY, CONTINUOUS_Z, CONTINUOUS_THETA];

/// Maps an action into `[-1, 1]^5`.
pub fn normalize_action(a: &Action) -> [f64; ACTION_DIM] {
    let v = a.clamped().to_vec();
    std::array::from_fn(|d| 2.0 * (v[d] - LOW[d]) / (HIGH[d] - LOW[d]) - 1.0)
}

pub fn denormalize_action(v: &[f64; ACTION_DIM]) -> Action {
    let a: [f64; ACTION_DIM] = std::array::from_fn(|d| LOW[d] + (v[d] + 1.0) / 2.0 * (HIGH[d] - LOW[d]));
    Action::from_slice(&a)
}

/// The critic's action input order: `a_xy` first (the rho_1 block), then
/// `a_lambda, a_z, a_theta`.
pub fn critic_action_vector(normalized: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    let v = normalized;
    [v[1], v[2], v[0], v[3], v[4]]
}

/// Pre-squash Gaussian parameters in [`Action::to_vec`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorOutput {
    pub mean: [f64; ACTION_DIM],
    /// Clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: [f64; ACTION_DIM],
}

impl ActorOutput {
    /// From the 10 actor channels `[m_x, m_y, m_lambda, m_z, m_theta,
    /// s_lambda, s_x, s_y, s_z, s_theta]`.
    pub fn from_channels(c: &[f64]) -> Result<Self> {
        if c.len() != ACTOR_OUT {
            return Err(Error::DimensionMismatch {
                expected: ACTOR_OUT,
                actual: c.len(),
            });
        }
        Ok(Self {
            mean: [c[2], c[0], c[1], c[3], c[4]],
            log_std: std::array::from_fn(|d| c[5 + d].clamp(LOG_STD_MIN, LOG_STD_MAX)),
        })
    }
}

/// Reparameterized sample `tanh(mean + sigma * noise)` mapped onto the
/// action bounds, and the log-density of the normalized action.
pub fn squashed_sample(out: &ActorOutput, noise: &[f64; ACTION_DIM]) -> (Action, f64) {
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut v = [0.0; ACTION_DIM];
    let mut log_prob = 0.0;
    for d in 0..ACTION_DIM {
        let u = out.mean[d] + out.log_std[d].exp() * noise[d];
        v[d] = u.tanh();
        log_prob += -0.5 * noise[d] * noise[d] - out.log_std[d] - half_log_2pi - (1.0 - v[d] * v[d] + SQUASH_EPS).ln();
    }
    (denormalize_action(&v), log_prob)
}

/// `1/B sum_i 1_e(i) * 1/2 |a_i - a_e,i|^2` over normalized actions.
pub fn sacfd_l2(actions: &[[f64; ACTION_DIM]], experts: &[[f64; ACTION_DIM]], is_expert: &[bool]) -> f64 {
    let b = actions.len() as f64;
    actions
        .iter()
        .zip(experts)
        .zip(is_expert)
        .filter(|(_, &e)| e)
        .map(|((a, x), _)| 0.5 * a.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
        .sum::<f64>()
        / b
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub tau: f64,
    pub alpha_init: f64,
    pub target_entropy: f64,
    /// Group order of the equivariant networks.
    pub n: usize,
    /// Regular-field counts: six encoder stages, then the hidden width of
    /// the actor's last stage and of the critic heads.
    pub widths: Vec<usize>,
    pub equi_actor: bool,
    pub equi_critic: bool,
    /// Adds the demonstration L2 term to the actor loss.
    pub demo_l2: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            alpha_lr: 1e-3,
            gamma: 0.99,
            batch: 64,
            tau: 1e-2,
            alpha_init: 1e-2,
            target_entropy: -5.0,
            n: 4,
            widths: vec![4, 8, 16, 16, 16, 16, 16],
            equi_actor: true,
            equi_critic: true,
            demo_l2: false,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str| Err(Error::invalid(format!("sac.{field} is out of range")));
        for (name, v) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("alpha_lr", self.alpha_lr)] {
            if !(v > 0.0) {
                return bad(name);
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma");
        }
        if self.batch == 0 {
            return bad("batch");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau");
        }
        if !(self.alpha_init > 0.0) {
            return bad("alpha_init");
        }
        if !self.target_entropy.is_finite() {
            return bad("target_entropy");
        }
        if self.n != 4 && self.n != 8 {
            return bad("n");
        }
        if self.widths.len() != 7 || self.widths.contains(&0) {
            return bad("widths");
        }
        Ok(())
    }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if !resolution.is_power_of_two() || resolution > 64 {
        return Err(Error::invalid(format!(
            "SAC networks need a power-of-two resolution up to 64, got {resolution}"
        )));
    }
    Ok(())
}

/// Number of 2x2 pools that bring `resolution` down to 1.
fn pools(resolution: usize) -> usize {
    resolution.trailing_zeros() as usize
}

fn actor_field(n: usize) -> FieldType {
    let mut blocks = vec![BlockKind::Standard];
    blocks.extend([BlockKind::Trivial; 8]);
    FieldType::new(n, blocks).expect("valid blocks")
}

/// Field of the critic's action input: `a_xy` as rho_1 and three trivials.
fn action_field(n: usize) -> FieldType {
    FieldType::new(n, vec![BlockKind::Standard, BlockKind::Trivial, BlockKind::Trivial, BlockKind::Trivial])
        .expect("valid blocks")
}

/// Six `k = 3` stages with ReLU, pooling while the map is larger than 1x1.
fn encoder<'r, T: Scalar, R: Rng + ?Sized>(
    mut b: NetworkBuilder<'r, T, R>,
    fields: &[FieldType],
    resolution: usize,
    equi: bool,
) -> Result<NetworkBuilder<'r, T, R>> {
    for (i, f) in fields.iter().enumerate() {
        b = if equi { b.steerable(f.clone(), 3, 1)? } else { b.plain(f.total_dim(), 3, 1)? };
        b = b.relu()?;
        if i < pools(resolution) {
            b = b.max_pool();
        }
    }
    Ok(b)
}

/// Twin-headed critic: a state encoder producing a `1 x 1` map, whose output
/// is concatenated with the action and fed to two heads.
#[derive(Clone)]
pub struct Critic<T: Scalar> {
    pub encoder: Network<T>,
    pub heads: [Network<T>; 2],
}

impl<T: Scalar> Critic<T> {
    /// `(q1, q2)`, each of shape `[B]`, for observations `obs`
    /// (`B x 2 x H x W`) and critic-ordered actions `act` (`B x 5`).
    pub fn forward(&self, tape: &mut Tape<T>, obs: Var, act: Var) -> Result<(Var, Var)> {
        let b = tape.shape(act)[0];
        let s = self.encoder.forward(tape, obs)?;
        let a = tape.reshape(act, &[b, ACTION_DIM, 1, 1])?;
        let w = tape.concat(&[s, a], 1)?;
        let q1 = self.heads[0].forward(tape, w)?;
        let q2 = self.heads[1].forward(tape, w)?;
        Ok((tape.reshape(q1, &[b])?, tape.reshape(q2, &[b])?))
    }

    /// Input field of the heads.
    pub fn head_field(&self) -> &FieldType {
        self.heads[0].in_field()
    }

    pub fn effective_params(&self) -> usize {
        self.encoder.effective_params() + self.heads.iter().map(Network::effective_params).sum::<usize>()
    }

    fn stores_mut(&mut self) -> [&mut ParamStore<T>; 3] {
        let [h1, h2] = &mut self.heads;
        [self.encoder.params_mut(), h1.params_mut(), h2.params_mut()]
    }

    fn stores(&self) -> [&ParamStore<T>; 3] {
        [self.encoder.params(), self.heads[0].params(), self.heads[1].params()]
    }

    pub fn set_projection(&mut self, enabled: bool) {
        self.encoder.set_projection(enabled);
        for h in &mut self.heads {
            h.set_projection(enabled);
        }
    }

    fn soft_update_from(&mut self, source: &Critic<T>, tau: f64) -> Result<()> {
        for (dst, src) in self.stores_mut().into_iter().zip(source.stores()) {
            dst.soft_update_from(src, tau)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, prefix: &str, ckpt: &mut Checkpoint) {
        self.encoder.to_checkpoint(&format!("{prefix}/encoder"), ckpt);
        for (i, h) in self.heads.iter().enumerate() {
            h.to_checkpoint(&format!("{prefix}/q{}", i + 1), ckpt);
        }
    }

    pub fn load_checkpoint(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        self.encoder.load_checkpoint(&format!("{prefix}/encoder"), ckpt)?;
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.load_checkpoint(&format!("{prefix}/q{}", i + 1), ckpt)?;
        }
        Ok(())
    }
}

/// Equivariant head: two regular stages, group max pooling, then a linear
/// map to one trivial output. With `max_pool = false` the head is a single
/// linear map from its input to the trivial output.
pub fn equi_critic_head<T: Scalar, R: Rng + ?Sized>(
    in_field: &FieldType,
    hidden: usize,
    max_pool: bool,
    rng: &mut R,
) -> Result<Network<T>> {
    let n = in_field.order();
    let b = NetworkBuilder::new(in_field.clone(), rng);
    let b = if max_pool {
        b.steerable(FieldType::regular(n, hidden), 1, 0)?
            .relu()?
            .steerable(FieldType::regular(n, hidden), 1, 0)?
            .relu()?
            .group_max_pool()?
    } else {
        b
    };
    Ok(b.steerable(FieldType::trivial(n, 1), 1, 0)?.build())
}

/// Equivariant actor (8 stages, output one rho_1 and eight trivial blocks)
/// and critic (6 encoder stages plus 3 head stages with group max pooling).
pub fn build_equi_sac<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    widths: &[usize],
    resolution: usize,
    rng: &mut R,
) -> Result<(Network<T>, Critic<T>)> {
    check_resolution(resolution)?;
    if widths.len() != 7 {
        return Err(Error::invalid(format!("SAC takes 7 widths, got {}", widths.len())));
    }
    let fields: Vec<FieldType> = widths[..6].iter().map(|&w| FieldType::regular(n, w)).collect();
    let actor = encoder(NetworkBuilder::new(FieldType::trivial(n, 2), rng), &fields, resolution, true)?
        .steerable(FieldType::regular(n, widths[6]), 1, 0)?
        .relu()?
        .steerable(actor_field(n), 1, 0)?
        .build();
    let enc = encoder(NetworkBuilder::new(FieldType::trivial(n, 2), rng), &fields, resolution, true)?.build();
    let w = enc.out_field().concat(&action_field(n))?;
    let heads = [
        equi_critic_head(&w, widths[6], true, rng)?,
        equi_critic_head(&w, widths[6], true, rng)?,
    ];
    Ok((actor, Critic { encoder: enc, heads }))
}

fn plain_actor_params(c: &[usize]) -> usize {
    let mut total = 0;
    let mut c_in = 2;
    for (i, &k) in [3, 3, 3, 3, 3, 3, 1, 1].iter().enumerate() {
        let c_out = if i < 7 { c[i] } else { ACTOR_OUT };
        total += c_out * c_in * k * k + c_out;
        c_in = c_out;
    }
    total
}

fn plain_critic_params(c: &[usize]) -> usize {
    let mut total = 0;
    let mut c_in = 2;
    for &c_out in &c[..6] {
        total += c_out * c_in * 9 + c_out;
        c_in = c_out;
    }
    let h = c[6];
    let head = h * (c[5] + ACTION_DIM) + h + h * h + h + h + 1;
    total + 2 * head
}

fn plain_head<T: Scalar, R: Rng + ?Sized>(in_field: &FieldType, hidden: usize, rng: &mut R) -> Result<Network<T>> {
    Ok(NetworkBuilder::new(in_field.clone(), rng)
        .plain(hidden, 1, 0)?
        .relu()?
        .plain(hidden, 1, 0)?
        .relu()?
        .plain(1, 1, 0)?
        .build())
}

/// Conventional CNN actor and critic with the SAC stage layouts, each
/// scaled to the free parameter count of its equivariant counterpart.
pub fn build_plain_sac<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    widths: &[usize],
    resolution: usize,
    rng: &mut R,
) -> Result<(Network<T>, Critic<T>)> {
    let (actor_target, critic_target) = {
        let mut probe = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (a, c) = build_equi_sac::<f64, _>(n, widths, resolution, &mut probe)?;
        (a.effective_params(), c.effective_params())
    };
    let reference: Vec<usize> = widths.iter().map(|w| w * n).collect();
    let ca = match_widths(&reference, actor_target, plain_actor_params);
    let cc = match_widths(&reference, critic_target, plain_critic_params);
    let triv = |c: usize| FieldType::trivial(n, c);

    let fields: Vec<FieldType> = ca[..6].iter().map(|&c| triv(c)).collect();
    let actor = encoder(NetworkBuilder::new(triv(2), rng), &fields, resolution, false)?
        .plain(ca[6], 1, 0)?
        .relu()?
        .plain(ACTOR_OUT, 1, 0)?
        .build();
    let fields: Vec<FieldType> = cc[..6].iter().map(|&c| triv(c)).collect();
    let enc = encoder(NetworkBuilder::new(triv(2), rng), &fields, resolution, false)?.build();
    let w = triv(cc[5] + ACTION_DIM);
    let heads = [plain_head(&w, cc[6], rng)?, plain_head(&w, cc[6], rng)?];
    Ok((actor, Critic { encoder: enc, heads }))
}

/// Standard normal draws for one update: target actions for the next
/// states and reparameterized actions for the actor loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SacNoise {
    pub next: Vec<[f64; ACTION_DIM]>,
    pub current: Vec<[f64; ACTION_DIM]>,
}

impl SacNoise {
    pub fn sample<R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Self {
        let mut draw = || -> Vec<[f64; ACTION_DIM]> {
            (0..batch)
                .map(|_| std::array::from_fn(|_| rng.sample(StandardNormal)))
                .collect()
        };
        let next = draw();
        let current = draw();
        Self { next, current }
    }
}

/// Loss values of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct SacLosses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    /// The demonstration term included in `actor` (0 when disabled).
    pub l2: f64,
    /// Mean `-log pi` of the sampled actions.
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SacStats {
    pub losses: SacLosses,
    pub alpha: f64,
    pub td_errors: Vec<f64>,
}

/// Actor, twin critic, target critic and temperature.
#[derive(Clone)]
pub struct SacAgent<T: Scalar> {
    pub config: SacConfig,
    actor: Network<T>,
    critic: Critic<T>,
    target: Critic<T>,
    log_alpha: ParamStore<f64>,
    actor_adam: Adam,
    critic_adam: [Adam; 3],
    alpha_adam: Adam,
}

struct ActorPass {
    /// Normalized actions, `B x 5`.
    action: Var,
    /// `[B]`.
    log_prob: Var,
}

impl<T: Scalar> SacAgent<T> {
    pub fn new(config: SacConfig, actor: Network<T>, critic: Critic<T>) -> Result<Self> {
        config.validate()?;
        if actor.out_field().total_dim() != ACTOR_OUT {
            return Err(Error::FieldMismatch(format!(
                "actor must output {ACTOR_OUT} channels, got {}",
                actor.out_field()
            )));
        }
        let mut log_alpha = ParamStore::new();
        log_alpha.add("log_alpha", Tensor::scalar(config.alpha_init.ln()));
        let critic_adam = std::array::from_fn(|_| Adam::new(AdamConfig::with_lr(config.critic_lr)));
        Ok(Self {
            actor_adam: Adam::new(AdamConfig::with_lr(config.actor_lr)),
            alpha_adam: Adam::new(AdamConfig::with_lr(config.alpha_lr)),
            critic_adam,
            target: critic.clone(),
            actor,
            critic,
            log_alpha,
            config,
        })
    }

    /// Builds the networks selected by `config.equi_actor` and
    /// `config.equi_critic`.
    pub fn build<R: Rng + ?Sized>(config: SacConfig, resolution: usize, rng: &mut R) -> Result<Self> {
        let (n, w) = (config.n, config.widths.clone());
        let (ea, ec) = build_equi_sac(n, &w, resolution, rng)?;
        let (pa, pc) = build_plain_sac(n, &w, resolution, rng)?;
        let actor = if config.equi_actor { ea } else { pa };
        let critic = if config.equi_critic { ec } else { pc };
        Self::new(config, actor, critic)
    }

    pub fn actor(&self) -> &Network<T> {
        &self.actor
    }

    pub fn actor_mut(&mut self) -> &mut Network<T> {
        &mut self.actor
    }

    pub fn critic(&self) -> &Critic<T> {
        &self.critic
    }

    pub fn critic_mut(&mut self) -> &mut Critic<T> {
        &mut self.critic
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.get(self.log_alpha_id()).item().exp()
    }

    fn log_alpha_id(&self) -> crate::tensor::ParamId {
        self.log_alpha.ids().next().expect("log_alpha")
    }

    /// Gaussian parameters for a batch of observations.
    pub fn actor_outputs(&self, obs: &[&FeatureMap<f64>]) -> Result<Vec<ActorOutput>> {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let x = tape.constant(obs_tensor::<T>(obs)?);
        let y = self.actor.forward(&mut tape, x)?;
        let v = tape.value(y).to_f64();
        v.chunks(ACTOR_OUT).map(ActorOutput::from_channels).collect()
    }

    /// Sampled actions, or the squashed means when `deterministic`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[&FeatureMap<f64>], deterministic: bool, rng: &mut R) -> Result<Vec<Action>> {
        Ok(self
            .actor_outputs(obs)?
            .iter()
            .map(|o| {
                let noise = if deterministic {
                    [0.0; ACTION_DIM]
                } else {
                    std::array::from_fn(|_| rng.sample(StandardNormal))
                };
                squashed_sample(o, &noise).0
            })
            .collect())
    }

    /// `min(q1, q2)` for one observation and action.
    pub fn q_value(&self, obs: &FeatureMap<f64>, action: &Action) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let x = tape.constant(obs_tensor::<T>(&[obs])?);
        let a = critic_action_vector(&normalize_action(action));
        let a = tape.constant(Tensor::new(vec![1, ACTION_DIM], a.iter().map(|&v| T::of(v)).collect())?);
        let (q1, q2) = self.critic.forward(&mut tape, x, a)?;
        Ok((tape.value(q1).item().f64(), tape.value(q2).item().f64()))
    }

    fn constant(tape: &mut Tape<T>, shape: Vec<usize>, data: impl IntoIterator<Item = f64>) -> Result<Var> {
        Ok(tape.constant(Tensor::new(shape, data.into_iter().map(T::of).collect())?))
    }

    /// Reparameterized squashed sample on the tape.
    fn actor_pass(&self, tape: &mut Tape<T>, obs: Var, noise: &[[f64; ACTION_DIM]]) -> Result<ActorPass> {
        let b = noise.len();
        let y = self.actor.forward(tape, obs)?;
        let y = tape.reshape(y, &[b, ACTOR_OUT])?;
        let xy = tape.slice(y, 1, 0, 2)?;
        let lambda = tape.slice(y, 1, 2, 3)?;
        let zt = tape.slice(y, 1, 3, 5)?;
        let mean = tape.concat(&[lambda, xy, zt], 1)?;
        let log_std = tape.slice(y, 1, 5, 10)?;
        let log_std = tape.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX);
        let std = tape.exp(log_std);
        let eps = Self::constant(tape, vec![b, ACTION_DIM], noise.iter().flatten().copied())?;
        let spread = tape.mul(std, eps)?;
        let u = tape.add(mean, spread)?;
        let action = tape.tanh(u);
        let sq = tape.mul(action, action)?;
        let one_minus = tape.neg(sq);
        let one_minus = tape.add_scalar(one_minus, 1.0 + SQUASH_EPS);
        let log_jac = tape.log(one_minus);
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let base = Self::constant(
            tape,
            vec![b, ACTION_DIM],
            noise.iter().flatten().map(|e| -0.5 * e * e - half_log_2pi),
        )?;
        let t = tape.sub(base, log_std)?;
        let t = tape.sub(t, log_jac)?;
        let log_prob = tape.sum_axis(t, 1)?;
        Ok(ActorPass { action, log_prob })
    }

    /// Reorders `B x 5` normalized actions into the critic's input order.
    fn critic_order(tape: &mut Tape<T>, action: Var) -> Result<Var> {
        let lambda = tape.slice(action, 1, 0, 1)?;
        let xy = tape.slice(action, 1, 1, 3)?;
        let zt = tape.slice(action, 1, 3, 5)?;
        tape.concat(&[xy, lambda, zt], 1)
    }

    /// Twin-critic regression loss `mean(w (q1 - y)^2) + mean(w (q2 - y)^2)`
    /// with `y = r + gamma (1 - done) (min q_target(s', a') - alpha log
    /// pi(a'|s'))`. Returns the loss and `min(q1, q2) - y` per sample.
    fn critic_loss(
        &self,
        tape: &mut Tape<T>,
        batch: &[Transition],
        weights: &[f64],
        noise: &[[f64; ACTION_DIM]],
    ) -> Result<(Var, Vec<f64>)> {
        let b = batch.len();
        let alpha = self.alpha();
        let next: Vec<&FeatureMap<f64>> = batch.iter().map(|t| &t.next_obs).collect();
        let y: Vec<f64> = tape.no_grad(|tape| -> Result<Vec<f64>> {
            let x = tape.constant(obs_tensor::<T>(&next)?);
            let pass = self.actor_pass(tape, x, noise)?;
            let a = Self::critic_order(tape, pass.action)?;
            let (q1, q2) = self.target.forward(tape, x, a)?;
            let (q1, q2, lp) = (tape.value(q1).to_f64(), tape.value(q2).to_f64(), tape.value(pass.log_prob).to_f64());
            Ok(batch
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let soft = q1[i].min(q2[i]) - alpha * lp[i];
                    t.reward + if t.done { 0.0 } else { self.config.gamma * soft }
                })
                .collect())
        })?;

        let obs: Vec<&FeatureMap<f64>> = batch.iter().map(|t| &t.obs).collect();
        let x = tape.constant(obs_tensor::<T>(&obs)?);
        let acts = batch
            .iter()
            .flat_map(|t| critic_action_vector(&normalize_action(&t.action)));
        let a = Self::constant(tape, vec![b, ACTION_DIM], acts)?;
        let (q1, q2) = self.critic.forward(tape, x, a)?;
        let target = Self::constant(tape, vec![b], y.iter().copied())?;
        let w = Self::constant(tape, vec![b], weights.iter().copied())?;
        let mut terms = Vec::with_capacity(2);
        for q in [q1, q2] {
            let e = tape.sub(q, target)?;
            let e2 = tape.mul(e, e)?;
            let we = tape.mul(e2, w)?;
            terms.push(tape.mean(we));
        }
        let loss = tape.add(terms[0], terms[1])?;
        let (v1, v2) = (tape.value(q1).to_f64(), tape.value(q2).to_f64());
        let td = (0..b).map(|i| v1[i].min(v2[i]) - y[i]).collect();
        Ok((loss, td))
    }

    /// `mean(alpha log pi - min(q1, q2))`, plus the demonstration term when
    /// enabled. Returns the loss, per-sample log-probabilities and the
    /// demonstration term.
    fn actor_loss(&self, tape: &mut Tape<T>, batch: &[Transition], noise: &[[f64; ACTION_DIM]]) -> Result<(Var, Vec<f64>, f64)> {
        let b = batch.len();
        let obs: Vec<&FeatureMap<f64>> = batch.iter().map(|t| &t.obs).collect();
        let x = tape.constant(obs_tensor::<T>(&obs)?);
        let pass = self.actor_pass(tape, x, noise)?;
        let a = Self::critic_order(tape, pass.action)?;
        let (q1, q2) = self.critic.forward(tape, x, a)?;
        let q = tape.minimum(q1, q2)?;
        let scaled = tape.mul_scalar(pass.log_prob, self.alpha());
        let d = tape.sub(scaled, q)?;
        let mut loss = tape.mean(d);
        let mut l2 = 0.0;
        if self.config.demo_l2 {
            let experts = batch.iter().flat_map(|t| normalize_action(&t.action));
            let ae = Self::constant(tape, vec![b, ACTION_DIM], experts)?;
            let diff = tape.sub(pass.action, ae)?;
            let sq = tape.mul(diff, diff)?;
            let per = tape.sum_axis(sq, 1)?;
            let gate = batch.iter().map(|t| if t.is_expert { 0.5 } else { 0.0 });
            let gate = Self::constant(tape, vec![b], gate)?;
            let gated = tape.mul(per, gate)?;
            let term = tape.mean(gated);
            l2 = tape.value(term).item().f64();
            loss = tape.add(loss, term)?;
        }
        let log_prob = tape.value(pass.log_prob).to_f64();
        Ok((loss, log_prob, l2))
    }

    /// Losses for fixed noise without updating anything.
    pub fn losses(&self, batch: &[Transition], weights: &[f64], noise: &SacNoise) -> Result<SacLosses> {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let (critic, _) = self.critic_loss(&mut tape, batch, weights, &noise.next)?;
        let (actor, log_prob, l2) = self.actor_loss(&mut tape, batch, &noise.current)?;
        let mean_lp = log_prob.iter().sum::<f64>() / log_prob.len() as f64;
        Ok(SacLosses {
            critic: tape.value(critic).item().f64(),
            actor: tape.value(actor).item().f64(),
            alpha: -self.alpha().ln() * (mean_lp + self.config.target_entropy),
            l2,
            entropy: -mean_lp,
        })
    }

    /// Analytic gradients of the critic loss (per critic store: encoder,
    /// q1, q2) and of the actor loss (actor store) for fixed noise.
    #[allow(clippy::type_complexity)]
    pub fn loss_gradients(
        &self,
        batch: &[Transition],
        weights: &[f64],
        noise: &SacNoise,
    ) -> Result<(Vec<Vec<(crate::tensor::ParamId, Vec<T>)>>, Vec<(crate::tensor::ParamId, Vec<T>)>)> {
        let mut tape = Tape::new();
        let (critic, _) = self.critic_loss(&mut tape, batch, weights, &noise.next)?;
        let g = tape.backward(critic)?;
        let critic_grads = self.critic.stores().iter().map(|s| g.for_store(&tape, s)).collect();
        let mut tape = Tape::new();
        let (actor, _, _) = self.actor_loss(&mut tape, batch, &noise.current)?;
        let g = tape.backward(actor)?;
        Ok((critic_grads, g.for_store(&tape, self.actor.params())))
    }

    /// One SAC step: critic, then actor (against the updated critic), then
    /// temperature, then the soft target update.
    pub fn update_with_noise(&mut self, batch: &[Transition], weights: &[f64], noise: &SacNoise) -> Result<SacStats> {
        let b = batch.len();
        if b == 0 || weights.len() != b || noise.next.len() != b || noise.current.len() != b {
            return Err(Error::invalid(format!("sac update with inconsistent batch sizes ({b})")));
        }
        let mut tape = Tape::new();
        let (critic_loss, td_errors) = self.critic_loss(&mut tape, batch, weights, &noise.next)?;
        let critic_value = tape.value(critic_loss).item().f64();
        let g = tape.backward(critic_loss)?;
        let grads: Vec<_> = self.critic.stores().iter().map(|s| g.for_store(&tape, s)).collect();
        drop(tape);
        for ((adam, store), gr) in self.critic_adam.iter_mut().zip(self.critic.stores_mut()).zip(&grads) {
            adam.step(store, gr)?;
        }

        let mut tape = Tape::new();
        let (actor_loss, log_prob, l2) = self.actor_loss(&mut tape, batch, &noise.current)?;
        let actor_value = tape.value(actor_loss).item().f64();
        let g = tape.backward(actor_loss)?;
        let grads = g.for_store(&tape, self.actor.params());
        drop(tape);
        self.actor_adam.step(self.actor.params_mut(), &grads)?;

        // d/d(log alpha) of -log_alpha * (log_pi + target), log_pi detached.
        let mean_lp = log_prob.iter().sum::<f64>() / b as f64;
        let id = self.log_alpha_id();
        let alpha_loss = -self.alpha().ln() * (mean_lp + self.config.target_entropy);
        let grad = -(mean_lp + self.config.target_entropy);
        self.alpha_adam.step(&mut self.log_alpha, &[(id, vec![grad])])?;

        self.target.soft_update_from(&self.critic, self.config.tau)?;
        Ok(SacStats {
            losses: SacLosses {
                critic: critic_value,
                actor: actor_value,
                alpha: alpha_loss,
                l2,
                entropy: -mean_lp,
            },
            alpha: self.alpha(),
            td_errors,
        })
    }

    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[Transition], weights: &[f64], rng: &mut R) -> Result<SacStats> {
        let noise = SacNoise::sample(batch.len(), rng);
        self.update_with_noise(batch, weights, &noise)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        self.actor.to_checkpoint("sac/actor", ckpt);
        self.critic.to_checkpoint("sac/critic", ckpt);
        self.target.to_checkpoint("sac/target", ckpt);
        ckpt.push_store("sac", &self.log_alpha);
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.actor.load_checkpoint("sac/actor", ckpt)?;
        self.critic.load_checkpoint("sac/critic", ckpt)?;
        self.target.load_checkpoint("sac/target", ckpt)?;
        ckpt.load_store("sac", &mut self.log_alpha)
    }
}
