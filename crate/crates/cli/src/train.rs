//! Training and greedy evaluation.

use crate::config::RunConfig;
use anyhow::{Context, Result};
use equirl::agents::{dqn_select_action, linear_schedule, DqnAgent, ReplayBuffer, SacAgent, Transition};
use equirl::group::FeatureMap;
use equirl::sim::{expert_action, Action, DiscreteAction, Sim, Task, WorldState};
use equirl::tensor::{load_checkpoint, save_checkpoint, Checkpoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Evaluation episodes use these reset seeds (plus the episode index), the
/// same for every run so that curves are comparable.
pub const EVAL_SEED_BASE: u64 = 1_000_000_000;

pub const LOG_FILE: &str = "log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_HEADER: &str = "step,return_mean,return_stderr,success_rate";

/// A learner of either kind, trained in single precision.
pub enum Agent {
    Dqn(Box<DqnAgent<f32>>),
    Sac(Box<SacAgent<f32>>),
}

impl Agent {
    pub fn build<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Result<Agent> {
        Ok(if cfg.algorithm.is_dqn() {
            let d = cfg.dqn_config();
            let agent = if cfg.algorithm.is_equivariant() {
                DqnAgent::equivariant(d, rng)?
            } else {
                DqnAgent::plain(d, rng)?
            };
            Agent::Dqn(Box::new(agent))
        } else {
            Agent::Sac(Box::new(SacAgent::build(cfg.sac_config(), cfg.resolution, rng)?))
        })
    }

    /// Actions for a batch of observations. DQN explores epsilon-greedily;
    /// SAC samples unless `greedy`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[&FeatureMap<f64>],
        epsilon: f64,
        greedy: bool,
        rng: &mut R,
    ) -> Result<Vec<(Action, Option<DiscreteAction>)>> {
        match self {
            Agent::Dqn(a) => {
                let eps = if greedy { 0.0 } else { epsilon };
                a.q_values(obs)?
                    .iter()
                    .map(|q| {
                        let d = dqn_select_action(q, eps, rng)?;
                        Ok((d.to_action(), Some(d)))
                    })
                    .collect()
            }
            Agent::Sac(a) => Ok(a.act(obs, greedy, rng)?.into_iter().map(|x| (x, None)).collect()),
        }
    }

    /// One gradient step on a batch drawn from `buffer`, then priority updates.
    pub fn update<R: Rng + ?Sized>(&mut self, buffer: &mut ReplayBuffer, beta: f64, rng: &mut R) -> Result<()> {
        let batch_size = match self {
            Agent::Dqn(a) => a.config.batch,
            Agent::Sac(a) => a.config.batch,
        };
        let sample = buffer.sample(batch_size, beta, rng)?;
        let batch = sample
            .indices
            .iter()
            .map(|&i| buffer.get(i))
            .collect::<equirl::Result<Vec<Transition>>>()?;
        let td = match self {
            Agent::Dqn(a) => a.update(&batch, &sample.weights)?.td_errors,
            Agent::Sac(a) => a.update(&batch, &sample.weights, rng)?.td_errors,
        };
        buffer.update_priorities(&sample.indices, &td)?;
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Agent::Dqn(a) => a.config.batch,
            Agent::Sac(a) => a.config.batch,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        match self {
            Agent::Dqn(a) => a.to_checkpoint(&mut c),
            Agent::Sac(a) => a.to_checkpoint(&mut c),
        }
        c
    }

    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        match self {
            Agent::Dqn(a) => a.load_checkpoint(ckpt)?,
            Agent::Sac(a) => a.load_checkpoint(ckpt)?,
        }
        Ok(())
    }
}

/// One evaluation row of the CSV log.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub return_mean: f64,
    pub return_stderr: f64,
    pub success_rate: f64,
}

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.return_mean, self.return_stderr, self.success_rate)
    }

    pub fn parse(line: &str) -> Result<EvalRow> {
        let f: Vec<&str> = line.trim().split(',').collect();
        anyhow::ensure!(f.len() == 4, "expected 4 fields, got {}", f.len());
        Ok(EvalRow {
            step: f[0].parse()?,
            return_mean: f[1].parse()?,
            return_stderr: f[2].parse()?,
            success_rate: f[3].parse()?,
        })
    }
}

/// Reads a training log, checking the header.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EvalRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    anyhow::ensure!(lines.next() == Some(LOG_HEADER), "{}: unexpected header", path.display());
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| EvalRow::parse(l).with_context(|| format!("{}:{}", path.display(), i + 2)))
        .collect()
}

/// Per-episode discounted returns and successes of the greedy policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

impl Evaluation {
    pub fn row(&self, step: u64) -> EvalRow {
        let n = self.returns.len() as f64;
        let mean = self.returns.iter().sum::<f64>() / n;
        let var = if n > 1.0 {
            self.returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EvalRow {
            step,
            return_mean: mean,
            return_stderr: (var / n).sqrt(),
            success_rate: self.successes.iter().filter(|&&s| s).count() as f64 / n,
        }
    }
}

/// Runs `episodes` greedy episodes in lockstep from seeds
/// `EVAL_SEED_BASE + k`.
pub fn evaluate(agent: &Agent, sim: &Sim, task: Task, n: usize, episodes: usize, gamma: f64) -> Result<Evaluation> {
    let mut states: Vec<WorldState> = (0..episodes).map(|k| sim.reset(task, EVAL_SEED_BASE + k as u64)).collect();
    let mut active: Vec<bool> = vec![true; episodes];
    let mut returns = vec![0.0; episodes];
    let mut successes = vec![false; episodes];
    let mut discount = 1.0;
    // Greedy actions never consult the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    while active.iter().any(|&a| a) {
        let idx: Vec<usize> = (0..episodes).filter(|&k| active[k]).collect();
        let obs = idx
            .iter()
            .map(|&k| sim.render(&states[k], n))
            .collect::<equirl::Result<Vec<_>>>()?;
        let refs: Vec<&FeatureMap<f64>> = obs.iter().collect();
        let actions = agent.act(&refs, 0.0, true, &mut rng)?;
        for (&k, (a, _)) in idx.iter().zip(actions) {
            let out = sim.step(&states[k], &a);
            returns[k] += discount * out.reward;
            if out.done {
                active[k] = false;
                successes[k] = out.reward > 0.0;
            }
            states[k] = out.state;
        }
        discount *= gamma;
    }
    Ok(Evaluation { returns, successes })
}

/// Writes `ckpt` next to `path` and renames it into place, so an
/// interrupted write never replaces a valid checkpoint.
fn save_atomic(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    save_checkpoint(&tmp, ckpt)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub rows: Vec<EvalRow>,
    /// Transitions in the buffer right after the demonstrations were loaded.
    pub demo_transitions: usize,
    pub demo_steps: usize,
}

impl TrainOutcome {
    /// First evaluated step whose success rate reaches `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.success_rate >= threshold).map(|r| r.step)
    }
}

fn transition(obs: FeatureMap<f64>, next_obs: FeatureMap<f64>, a: Action, d: Option<DiscreteAction>, reward: f64, terminal: bool, expert: bool) -> Transition {
    Transition {
        obs,
        action: a,
        discrete: d,
        reward,
        next_obs,
        done: terminal,
        is_expert: expert,
    }
}

/// Loads `cfg.demo_episodes` scripted-expert episodes into `buffer` (with
/// augmentation). Returns the number of environment steps recorded.
pub fn load_demonstrations<R: Rng + ?Sized>(cfg: &RunConfig, sim: &Sim, buffer: &mut ReplayBuffer, rng: &mut R) -> Result<usize> {
    let discrete = cfg.algorithm.is_dqn();
    let mut steps = 0;
    for _ in 0..cfg.demo_episodes {
        let mut s = sim.reset(cfg.task, rng.random());
        loop {
            let a = expert_action(&s);
            let (a, d) = if discrete {
                let d = DiscreteAction::nearest(&a);
                (d.to_action(), Some(d))
            } else {
                (a, None)
            };
            let out = sim.step(&s, &a);
            let terminal = out.done && out.reward > 0.0;
            let t = transition(sim.render(&s, cfg.group_order)?, sim.render(&out.state, cfg.group_order)?, a, d, out.reward, terminal, true);
            buffer.add_with_aug(t, rng)?;
            steps += 1;
            if out.done {
                break;
            }
            s = out.state;
        }
    }
    Ok(steps)
}

/// Trains per `cfg`, writing the config snapshot, CSV log, wall-clock
/// timing and checkpoints into `run_dir`. `on_eval` sees every row.
pub fn train(cfg: &RunConfig, run_dir: &Path, on_eval: &mut dyn FnMut(&EvalRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    cfg.save(run_dir.join(CONFIG_FILE))?;
    let started = Instant::now();
    let n = cfg.group_order;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sim = Sim::new(cfg.sim_config())?;
    let mut agent = Agent::build(cfg, &mut rng)?;
    let mut buffer = ReplayBuffer::new(cfg.replay_config())?;
    let demo_steps = load_demonstrations(cfg, &sim, &mut buffer, &mut rng)?;
    let demo_transitions = buffer.len();

    let mut log = format!("{LOG_HEADER}\n");
    let mut timing = String::from("step,seconds\n");
    std::fs::write(run_dir.join(LOG_FILE), &log)?;
    save_atomic(&run_dir.join(CHECKPOINT_FILE), &agent.to_checkpoint())?;

    let mut states: Vec<WorldState> = (0..cfg.num_envs).map(|_| sim.reset(cfg.task, rng.random())).collect();
    let mut rows = Vec::new();
    let mut step = 0u64;
    while step < cfg.total_steps {
        let eps = linear_schedule(cfg.dqn.eps_start, cfg.dqn.eps_end, cfg.dqn.eps_fraction, step, cfg.total_steps);
        let obs = states
            .iter()
            .map(|s| sim.render(s, n))
            .collect::<equirl::Result<Vec<_>>>()?;
        let refs: Vec<&FeatureMap<f64>> = obs.iter().collect();
        let actions = agent.act(&refs, eps, false, &mut rng)?;
        for ((s, o), (a, d)) in states.iter_mut().zip(obs).zip(actions) {
            let out = sim.step(s, &a);
            let terminal = out.done && out.reward > 0.0;
            let t = transition(o, sim.render(&out.state, n)?, a, d, out.reward, terminal, false);
            buffer.add_with_aug(t, &mut rng)?;
            *s = if out.done { sim.reset(cfg.task, rng.random()) } else { out.state };
        }
        step += cfg.num_envs as u64;

        if buffer.len() >= agent.batch_size() {
            let beta = linear_schedule(cfg.replay.beta0, 1.0, 1.0, step, cfg.total_steps);
            for _ in 0..cfg.updates_per_step {
                agent.update(&mut buffer, beta, &mut rng)?;
            }
        }

        if step % cfg.eval_period == 0 {
            let row = evaluate(&agent, &sim, cfg.task, n, cfg.eval_episodes, cfg.gamma())?.row(step);
            writeln!(log, "{}", row.to_csv())?;
            writeln!(timing, "{step},{:.3}", started.elapsed().as_secs_f64())?;
            std::fs::write(run_dir.join(LOG_FILE), &log)?;
            std::fs::write(run_dir.join(TIMING_FILE), &timing)?;
            save_atomic(&run_dir.join(CHECKPOINT_FILE), &agent.to_checkpoint())?;
            on_eval(&row);
            let stop = cfg.stop_at_success.is_some_and(|t| row.success_rate >= t);
            rows.push(row);
            if stop {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        rows,
        demo_transitions,
        demo_steps,
    })
}

/// Rebuilds the agent of a finished run from its config and checkpoint.
pub fn load_run(run_dir: &Path) -> Result<(RunConfig, Agent)> {
    let cfg = RunConfig::load(run_dir.join(CONFIG_FILE))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut agent = Agent::build(&cfg, &mut rng)?;
    let ckpt = load_checkpoint(&run_dir.join(CHECKPOINT_FILE))?;
    agent.load(&ckpt)?;
    Ok((cfg, agent))
}
