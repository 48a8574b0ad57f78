//! Episode recordings as JSON lines, one [`EpisodeStep`] per line.
//!
//! ```text
//! {"episode":0,"t":0,"state":{...},"action":{...},"reward":0.0,"done":false,"next_state":{...}}
//! ```

use super::{Action, Sim, Task, WorldState};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub episode: u64,
    pub t: usize,
    pub state: WorldState,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub next_state: WorldState,
}

/// Runs `policy` from `sim.reset(task, seed)` until the episode ends. The
/// episode id is the seed.
pub fn rollout(sim: &Sim, task: Task, seed: u64, mut policy: impl FnMut(&WorldState) -> Action) -> Vec<EpisodeStep> {
    let mut state = sim.reset(task, seed);
    let mut steps = Vec::new();
    loop {
        let action = policy(&state);
        let out = sim.step(&state, &action);
        let done = out.done;
        steps.push(EpisodeStep {
            episode: seed,
            t: steps.len(),
            state,
            action,
            reward: out.reward,
            done,
            next_state: out.state.clone(),
        });
        if done {
            return steps;
        }
        state = out.state;
    }
}

pub fn write_episodes(path: impl AsRef<Path>, steps: &[EpisodeStep]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in steps {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_episodes(path: impl AsRef<Path>) -> Result<Vec<EpisodeStep>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}
