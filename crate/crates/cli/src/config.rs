//! Run configuration, stored as TOML.

use anyhow::{bail, Context, Result};
use equirl::agents::{AugAngles, DqnConfig, ReplayConfig, SacConfig};
use equirl::sim::{SimConfig, Task};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    EquiDqn,
    PlainDqn,
    /// Plain network trained on a rotation-augmented buffer.
    AugDqn,
    EquiSac,
    PlainSac,
    AugSac,
    EquiSacfd,
    PlainSacfd,
    AugSacfd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 9] = [
        Algorithm::EquiDqn,
        Algorithm::PlainDqn,
        Algorithm::AugDqn,
        Algorithm::EquiSac,
        Algorithm::PlainSac,
        Algorithm::AugSac,
        Algorithm::EquiSacfd,
        Algorithm::PlainSacfd,
        Algorithm::AugSacfd,
    ];

    pub fn is_dqn(self) -> bool {
        matches!(self, Algorithm::EquiDqn | Algorithm::PlainDqn | Algorithm::AugDqn)
    }

    pub fn is_equivariant(self) -> bool {
        matches!(self, Algorithm::EquiDqn | Algorithm::EquiSac | Algorithm::EquiSacfd)
    }

    /// Plain variants train without buffer augmentation.
    pub fn uses_augmentation(self) -> bool {
        !matches!(self, Algorithm::PlainDqn | Algorithm::PlainSac | Algorithm::PlainSacfd)
    }

    pub fn uses_demo_l2(self) -> bool {
        matches!(self, Algorithm::EquiSacfd | Algorithm::PlainSacfd | Algorithm::AugSacfd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::EquiDqn => "equi_dqn",
            Algorithm::PlainDqn => "plain_dqn",
            Algorithm::AugDqn => "aug_dqn",
            Algorithm::EquiSac => "equi_sac",
            Algorithm::PlainSac => "plain_sac",
            Algorithm::AugSac => "aug_sac",
            Algorithm::EquiSacfd => "equi_sacfd",
            Algorithm::PlainSacfd => "plain_sacfd",
            Algorithm::AugSacfd => "aug_sacfd",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .with_context(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplaySection {
    pub capacity: usize,
    pub aug_factor: usize,
    pub prioritized: bool,
    pub alpha: f64,
    /// Importance-sampling exponent at step 0, annealed linearly to 1.
    pub beta0: f64,
    pub expert_bonus: f64,
    pub priority_eps: f64,
}

impl Default for ReplaySection {
    fn default() -> Self {
        let r = ReplayConfig::default();
        Self {
            capacity: r.capacity,
            aug_factor: r.aug_factor,
            prioritized: r.prioritized,
            alpha: r.alpha,
            beta0: 0.4,
            expert_bonus: r.expert_bonus,
            priority_eps: r.priority_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnSection {
    pub lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub tau: f64,
    pub huber_delta: f64,
    pub widths: Vec<usize>,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of training over which epsilon is annealed.
    pub eps_fraction: f64,
}

impl Default for DqnSection {
    fn default() -> Self {
        let d = DqnConfig::default();
        Self {
            lr: d.lr,
            gamma: d.gamma,
            batch: d.batch,
            tau: d.tau,
            huber_delta: d.huber_delta,
            widths: d.widths,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacSection {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub tau: f64,
    pub alpha_init: f64,
    pub target_entropy: f64,
    pub widths: Vec<usize>,
    /// Ablation switches for the equivariant variants.
    pub equi_actor: bool,
    pub equi_critic: bool,
}

impl Default for SacSection {
    fn default() -> Self {
        let s = SacConfig::default();
        Self {
            actor_lr: s.actor_lr,
            critic_lr: s.critic_lr,
            alpha_lr: s.alpha_lr,
            gamma: s.gamma,
            batch: s.batch,
            tau: s.tau,
            alpha_init: s.alpha_init,
            target_entropy: s.target_entropy,
            widths: s.widths,
            equi_actor: true,
            equi_critic: true,
        }
    }
}

/// Scene geometry; the observation resolution lives on [`RunConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Side of the square workspace in meters.
    pub workspace: f64,
    pub start_height: f64,
    pub max_steps: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            workspace: s.workspace,
            start_height: s.start_height,
            max_steps: s.max_steps,
        }
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub algorithm: Algorithm,
    /// Group order of the equivariant networks (4 or 8).
    pub group_order: usize,
    pub seed: u64,
    pub total_steps: u64,
    pub eval_period: u64,
    pub eval_episodes: usize,
    /// Scripted-expert episodes loaded into the buffer before training.
    pub demo_episodes: usize,
    pub num_envs: usize,
    pub resolution: usize,
    /// Gradient steps per vector-environment step.
    pub updates_per_step: usize,
    /// Stop after the first evaluation reaching this success rate.
    pub stop_at_success: Option<f64>,
    pub sim: SimSection,
    pub replay: ReplaySection,
    pub dqn: DqnSection,
    pub sac: SacSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Pull,
            algorithm: Algorithm::EquiDqn,
            group_order: 4,
            seed: 0,
            total_steps: 10_000,
            eval_period: 500,
            eval_episodes: 20,
            demo_episodes: 100,
            num_envs: 5,
            resolution: 64,
            updates_per_step: 1,
            stop_at_success: None,
            sim: SimSection::default(),
            replay: ReplaySection::default(),
            dqn: DqnSection::default(),
            sac: SacSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for `algorithm`: 100 demonstration episodes and a uniform
    /// buffer for DQN, 20 episodes and prioritized replay for SAC variants.
    pub fn for_algorithm(task: Task, algorithm: Algorithm) -> Self {
        let dqn = algorithm.is_dqn();
        Self {
            task,
            algorithm,
            demo_episodes: if dqn { 100 } else { 20 },
            replay: ReplaySection {
                prioritized: !dqn,
                ..ReplaySection::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).context("invalid config")?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.group_order != 4 && c.group_order != 8 {
            bail!("invalid config field `group_order`: must be 4 or 8, got {}", c.group_order);
        }
        if c.num_envs == 0 {
            bail!("invalid config field `num_envs`: must be positive");
        }
        if c.eval_period == 0 || c.eval_period % c.num_envs as u64 != 0 {
            bail!("invalid config field `eval_period`: must be a positive multiple of num_envs");
        }
        if c.total_steps % c.num_envs as u64 != 0 {
            bail!("invalid config field `total_steps`: must be a multiple of num_envs");
        }
        if c.eval_episodes == 0 {
            bail!("invalid config field `eval_episodes`: must be positive");
        }
        if c.resolution == 0 {
            bail!("invalid config field `resolution`: must be positive");
        }
        if let Some(s) = c.stop_at_success {
            if !(0.0..=1.0).contains(&s) {
                bail!("invalid config field `stop_at_success`: must lie in [0, 1]");
            }
        }
        equirl::sim::Sim::new(self.sim_config()).map_err(|e| anyhow::anyhow!("invalid config field `sim`: {e}"))?;
        let r = &c.replay;
        if r.capacity == 0 {
            bail!("invalid config field `replay.capacity`: must be positive");
        }
        if !(r.alpha >= 0.0) {
            bail!("invalid config field `replay.alpha`: must be non-negative");
        }
        if !(0.0..=1.0).contains(&r.beta0) {
            bail!("invalid config field `replay.beta0`: must lie in [0, 1]");
        }
        if !(r.expert_bonus >= 0.0) {
            bail!("invalid config field `replay.expert_bonus`: must be non-negative");
        }
        if !(r.priority_eps > 0.0) {
            bail!("invalid config field `replay.priority_eps`: must be positive");
        }
        let d = &c.dqn;
        if !(0.0..=1.0).contains(&d.eps_start) || !(0.0..=1.0).contains(&d.eps_end) {
            bail!("invalid config field `dqn.eps_start`/`dqn.eps_end`: must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&d.eps_fraction) {
            bail!("invalid config field `dqn.eps_fraction`: must lie in [0, 1]");
        }
        if c.algorithm.is_dqn() {
            self.dqn_config().validate().map_err(|e| anyhow::anyhow!("invalid config field {e}"))?;
        } else {
            self.sac_config().validate().map_err(|e| anyhow::anyhow!("invalid config field {e}"))?;
            if !c.resolution.is_power_of_two() || c.resolution > 64 {
                bail!("invalid config field `resolution`: SAC needs a power of two up to 64");
            }
        }
        if c.algorithm.is_dqn() && c.resolution != 64 {
            bail!("invalid config field `resolution`: the DQN layout needs 64");
        }
        Ok(())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            resolution: self.resolution,
            workspace: self.sim.workspace,
            start_height: self.sim.start_height,
            max_steps: self.sim.max_steps,
            ..SimConfig::default()
        }
    }

    pub fn replay_config(&self) -> ReplayConfig {
        let r = &self.replay;
        ReplayConfig {
            capacity: r.capacity,
            aug_factor: if self.algorithm.uses_augmentation() { r.aug_factor } else { 0 },
            aug_angles: if self.algorithm.is_dqn() { AugAngles::QuarterTurns } else { AugAngles::Continuous },
            prioritized: r.prioritized,
            alpha: r.alpha,
            expert_bonus: r.expert_bonus,
            priority_eps: r.priority_eps,
        }
    }

    pub fn dqn_config(&self) -> DqnConfig {
        let d = &self.dqn;
        DqnConfig {
            lr: d.lr,
            gamma: d.gamma,
            batch: d.batch,
            tau: d.tau,
            huber_delta: d.huber_delta,
            n: self.group_order,
            widths: d.widths.clone(),
        }
    }

    pub fn sac_config(&self) -> SacConfig {
        let s = &self.sac;
        let equi = self.algorithm.is_equivariant();
        SacConfig {
            actor_lr: s.actor_lr,
            critic_lr: s.critic_lr,
            alpha_lr: s.alpha_lr,
            gamma: s.gamma,
            batch: s.batch,
            tau: s.tau,
            alpha_init: s.alpha_init,
            target_entropy: s.target_entropy,
            n: self.group_order,
            widths: s.widths.clone(),
            equi_actor: equi && s.equi_actor,
            equi_critic: equi && s.equi_critic,
            demo_l2: self.algorithm.uses_demo_l2(),
        }
    }

    /// Discount used for reported returns.
    pub fn gamma(&self) -> f64 {
        if self.algorithm.is_dqn() {
            self.dqn.gamma
        } else {
            self.sac.gamma
        }
    }

    /// Default run directory name.
    pub fn run_name(&self) -> String {
        format!("{}-{}-s{}", self.algorithm, self.task, self.seed)
    }
}
