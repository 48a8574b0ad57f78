//! Replay storage: rotation augmentation and proportional prioritized
//! sampling over a ring buffer.

use crate::group::{rotate_grid, FeatureMap, Rotation};
use crate::sim::{Action, DiscreteAction};
use crate::{Error, Result};
use rand::Rng;
use std::f64::consts::{FRAC_PI_2, TAU};

/// One environment step as stored for learning.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: FeatureMap<f64>,
    pub action: Action,
    /// Index into the discrete action space for DQN agents.
    pub discrete: Option<DiscreteAction>,
    pub reward: f64,
    pub next_obs: FeatureMap<f64>,
    /// The episode terminated (the task predicate holds). Time limits are
    /// not terminal and keep bootstrapping.
    pub done: bool,
    pub is_expert: bool,
}

/// Rotates every channel of a trivial-field observation by `rotation`.
/// Quarter turns permute pixels; other angles sample bilinearly and fill
/// pixels rotated in from outside the view with the channel's maximum (the
/// table depth for the depth channel, the constant for flag channels).
pub fn rotate_observation(obs: &FeatureMap<f64>, rotation: Rotation) -> Result<FeatureMap<f64>> {
    let (h, w) = (obs.height(), obs.width());
    if h != w {
        return Err(Error::NonSquare { height: h, width: w });
    }
    let mut data = Vec::with_capacity(obs.data().len());
    for c in 0..obs.channels() {
        let plane = obs.channel(c);
        let fill = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        data.extend(rotate_grid(plane, 1, h, rotation, fill));
    }
    FeatureMap::new(obs.field().clone(), h, w, data)
}

/// Rotates the observations and `a_xy` of `t` by `angle` radians; every
/// invariant quantity is copied. A discrete action can only be rotated by a
/// multiple of 90 degrees, where the 3x3 grid maps onto itself.
pub fn augment_transition(angle: f64, t: &Transition) -> Result<Transition> {
    let rotation = Rotation::from_angle(angle);
    let discrete = match t.discrete {
        None => None,
        Some(d) => {
            if rotation.as_quarter_turns().is_none() {
                return Err(Error::invalid(format!(
                    "discrete actions rotate only by quarter turns, got {angle} rad"
                )));
            }
            let a = DiscreteAction::nearest(&d.to_action().rotated(&rotation));
            Some(DiscreteAction { combo: d.combo, ..a })
        }
    };
    Ok(Transition {
        obs: rotate_observation(&t.obs, rotation)?,
        action: t.action.rotated(&rotation),
        discrete,
        reward: t.reward,
        next_obs: rotate_observation(&t.next_obs, rotation)?,
        done: t.done,
        is_expert: t.is_expert,
    })
}

/// Angles drawn for augmented copies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugAngles {
    /// Uniform on `[0, 2 pi)`.
    Continuous,
    /// Uniform over the four quarter turns (needed for discrete actions).
    QuarterTurns,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Augmented copies inserted next to every transition.
    pub aug_factor: usize,
    pub aug_angles: AugAngles,
    pub prioritized: bool,
    /// Priority exponent.
    pub alpha: f64,
    /// Added to the priority of expert transitions.
    pub expert_bonus: f64,
    /// Added to `|TD error|` when priorities are updated.
    pub priority_eps: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            aug_factor: 4,
            aug_angles: AugAngles::Continuous,
            prioritized: true,
            alpha: 0.6,
            expert_bonus: 1.0,
            priority_eps: 1e-6,
        }
    }
}

/// Complete binary tree over `capacity` leaves keeping subtree sums and
/// minima.
#[derive(Clone, Debug)]
pub struct SumTree {
    leaves: usize,
    sum: Vec<f64>,
    min: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            leaves,
            sum: vec![0.0; 2 * leaves],
            min: vec![f64::INFINITY; 2 * leaves],
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut node = i + self.leaves;
        self.sum[node] = value;
        self.min[node] = value;
        while node > 1 {
            node /= 2;
            // Recompute rather than add deltas so rounding does not drift.
            self.sum[node] = self.sum[2 * node] + self.sum[2 * node + 1];
            self.min[node] = self.min[2 * node].min(self.min[2 * node + 1]);
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        self.sum[i + self.leaves]
    }

    pub fn total(&self) -> f64 {
        self.sum[1]
    }

    /// Minimum over set leaves (`inf` when empty).
    pub fn min(&self) -> f64 {
        self.min[1]
    }

    /// Leaf whose cumulative range contains `mass` (clamped to the last
    /// leaf with positive mass).
    pub fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let left = 2 * node;
            if mass < self.sum[left] || self.sum[left + 1] <= 0.0 {
                node = left;
            } else {
                mass -= self.sum[left];
                node = left + 1;
            }
        }
        node - self.leaves
    }
}

/// A channel stored as 16-bit codes over its own range.
#[derive(Clone, Debug)]
enum Plane {
    Constant(f64),
    Coded { lo: f64, step: f64, codes: Vec<u16> },
}

#[derive(Clone, Debug)]
struct StoredMap {
    field: crate::group::FieldType,
    height: usize,
    width: usize,
    planes: Vec<Plane>,
}

impl StoredMap {
    fn encode(map: &FeatureMap<f64>) -> Self {
        let planes = (0..map.channels())
            .map(|c| {
                let v = map.channel(c);
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi == lo {
                    Plane::Constant(lo)
                } else {
                    let step = (hi - lo) / f64::from(u16::MAX);
                    let codes = v.iter().map(|&x| ((x - lo) / step).round() as u16).collect();
                    Plane::Coded { lo, step, codes }
                }
            })
            .collect();
        Self {
            field: map.field().clone(),
            height: map.height(),
            width: map.width(),
            planes,
        }
    }

    fn decode(&self) -> FeatureMap<f64> {
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(self.planes.len() * hw);
        for p in &self.planes {
            match p {
                Plane::Constant(v) => data.extend(std::iter::repeat_n(*v, hw)),
                Plane::Coded { lo, step, codes } => data.extend(codes.iter().map(|&q| lo + step * f64::from(q))),
            }
        }
        FeatureMap::new(self.field.clone(), self.height, self.width, data).expect("stored shape")
    }
}

#[derive(Clone, Debug)]
struct Entry {
    obs: StoredMap,
    action: Action,
    discrete: Option<DiscreteAction>,
    reward: f64,
    next_obs: StoredMap,
    done: bool,
    is_expert: bool,
}

/// Indices drawn from the buffer and their importance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Ring buffer of transitions. Observations are kept as 16-bit codes per
/// channel (constant channels as a single value), so a decoded observation
/// differs from the inserted one by at most half a code step.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    config: ReplayConfig,
    entries: Vec<Entry>,
    next: usize,
    /// Stores `priority^alpha`.
    tree: SumTree,
    priorities: Vec<f64>,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::invalid("replay capacity must be positive"));
        }
        if !(config.alpha >= 0.0 && config.expert_bonus >= 0.0 && config.priority_eps > 0.0) {
            return Err(Error::invalid("replay alpha, expert_bonus and priority_eps must be non-negative (eps positive)"));
        }
        Ok(Self {
            tree: SumTree::new(config.capacity),
            priorities: vec![0.0; config.capacity],
            entries: Vec::with_capacity(config.capacity.min(4096)),
            next: 0,
            max_priority: 1.0,
            config,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.priorities[i]
    }

    /// Sum of `priority^alpha` over stored entries.
    pub fn total_mass(&self) -> f64 {
        self.tree.total()
    }

    pub fn max_priority(&self) -> f64 {
        self.max_priority
    }

    fn set_priority(&mut self, i: usize, p: f64) {
        self.priorities[i] = p;
        self.tree.set(i, p.powf(self.config.alpha));
    }

    /// Inserts one transition at the current maximum priority (plus the
    /// expert bonus), overwriting the oldest entry when full. Returns its
    /// slot.
    pub fn push(&mut self, t: Transition) -> usize {
        let slot = self.next;
        let is_expert = t.is_expert;
        let entry = Entry {
            obs: StoredMap::encode(&t.obs),
            action: t.action,
            discrete: t.discrete,
            reward: t.reward,
            next_obs: StoredMap::encode(&t.next_obs),
            done: t.done,
            is_expert,
        };
        if slot == self.entries.len() {
            self.entries.push(entry);
        } else {
            self.entries[slot] = entry;
        }
        let bonus = if is_expert { self.config.expert_bonus } else { 0.0 };
        self.set_priority(slot, self.max_priority + bonus);
        self.next = (slot + 1) % self.config.capacity;
        slot
    }

    /// Inserts `t` followed by `aug_factor` copies rotated by independent
    /// random angles.
    pub fn add_with_aug<R: Rng + ?Sized>(&mut self, t: Transition, rng: &mut R) -> Result<()> {
        let mut copies = Vec::with_capacity(self.config.aug_factor);
        for _ in 0..self.config.aug_factor {
            let angle = match self.config.aug_angles {
                AugAngles::Continuous => rng.random_range(0.0..TAU),
                AugAngles::QuarterTurns => rng.random_range(0..4) as f64 * FRAC_PI_2,
            };
            copies.push(augment_transition(angle, &t)?);
        }
        self.push(t);
        for c in copies {
            self.push(c);
        }
        Ok(())
    }

    pub fn get(&self, i: usize) -> Result<Transition> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| Error::invalid(format!("replay index {i} out of range ({})", self.len())))?;
        Ok(Transition {
            obs: e.obs.decode(),
            action: e.action,
            discrete: e.discrete,
            reward: e.reward,
            next_obs: e.next_obs.decode(),
            done: e.done,
            is_expert: e.is_expert,
        })
    }

    /// Draws `batch` indices. With prioritization, index `i` is drawn with
    /// probability `p_i^alpha / sum p^alpha` (one draw per equal-mass
    /// stratum) and weighted by `(N P(i))^-beta / max_j (N P(j))^-beta`;
    /// otherwise uniformly with unit weights.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, beta: f64, rng: &mut R) -> Result<Sample> {
        let n = self.len();
        if n == 0 || batch == 0 {
            return Err(Error::invalid(format!("cannot sample {batch} from a buffer of {n}")));
        }
        if !self.config.prioritized {
            return Ok(Sample {
                indices: (0..batch).map(|_| rng.random_range(0..n)).collect(),
                weights: vec![1.0; batch],
            });
        }
        let total = self.tree.total();
        let seg = total / batch as f64;
        let indices: Vec<usize> = (0..batch)
            .map(|k| {
                let mass = seg * (k as f64 + rng.random::<f64>());
                self.tree.find(mass.min(total * (1.0 - 1e-12))).min(n - 1)
            })
            .collect();
        // The largest weight belongs to the smallest probability.
        let w_max = (n as f64 * self.tree.min() / total).powf(-beta);
        let weights = indices
            .iter()
            .map(|&i| (n as f64 * self.tree.get(i) / total).powf(-beta) / w_max)
            .collect();
        Ok(Sample { indices, weights })
    }

    /// Sets priorities to `|td| + eps` (plus the expert bonus).
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::DimensionMismatch {
                expected: indices.len(),
                actual: td_errors.len(),
            });
        }
        if !self.config.prioritized {
            return Ok(());
        }
        for (&i, &e) in indices.iter().zip(td_errors) {
            if i >= self.len() || !e.is_finite() {
                return Err(Error::invalid(format!("bad priority update ({i}, {e})")));
            }
            let p = e.abs() + self.config.priority_eps;
            self.max_priority = self.max_priority.max(p);
            let bonus = if self.entries[i].is_expert { self.config.expert_bonus } else { 0.0 };
            self.set_priority(i, p + bonus);
        }
        Ok(())
    }
}
