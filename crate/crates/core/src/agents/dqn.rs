//! Deep Q-learning over the factored discrete action space: a 3x3 map of
//! planar moves times 18 invariant `(aperture, z, theta)` combinations.

use super::{match_widths, obs_tensor, Transition};
use crate::group::{FeatureMap, FieldType};
use crate::sim::{DiscreteAction, DISCRETE_COMBOS, DISCRETE_XY_MOVES};
use crate::steerable::{Network, NetworkBuilder};
use crate::tensor::{Adam, AdamConfig, Checkpoint, ParamId, Tape, Tensor};
use crate::{Error, Result, Scalar};
use rand::{Rng, SeedableRng};

/// Number of Q values per state.
pub const Q_CELLS: usize = DISCRETE_XY_MOVES * DISCRETE_COMBOS;

#[derive(Clone, Debug, PartialEq)]
pub struct DqnConfig {
    pub lr: f64,
    pub gamma: f64,
    pub batch: usize,
    pub tau: f64,
    pub huber_delta: f64,
    /// Group order of the equivariant network.
    pub n: usize,
    /// Regular-field counts of the six hidden stages.
    pub widths: Vec<usize>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            gamma: 0.95,
            batch: 32,
            tau: 1e-2,
            huber_delta: 1.0,
            n: 4,
            widths: vec![4, 8, 16, 16, 16, 16],
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str| Err(Error::invalid(format!("dqn.{field} is out of range")));
        if !(self.lr > 0.0) {
            return bad("lr");
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
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta");
        }
        if self.n != 4 && self.n != 8 {
            return bad("n");
        }
        if self.widths.len() != 6 || self.widths.contains(&0) {
            return bad("widths");
        }
        Ok(())
    }
}

/// Equivariant Q network: 2 trivial input channels at 64x64 to an
/// `18 x 3 x 3` trivial map, seven steerable stages with regular hidden
/// fields.
pub fn build_equi_dqn<T: Scalar, R: Rng + ?Sized>(n: usize, widths: &[usize], rng: &mut R) -> Result<Network<T>> {
    if widths.len() != 6 {
        return Err(Error::invalid(format!("equivariant DQN takes 6 widths, got {}", widths.len())));
    }
    let reg = |w: usize| FieldType::regular(n, w);
    let mut net = NetworkBuilder::new(FieldType::trivial(n, 2), rng)
        .steerable(reg(widths[0]), 3, 1)?
        .relu()?
        .max_pool()
        .steerable(reg(widths[1]), 3, 1)?
        .relu()?
        .max_pool()
        .steerable(reg(widths[2]), 3, 1)?
        .relu()?
        .max_pool()
        .steerable(reg(widths[3]), 3, 0)?
        .relu()?
        .max_pool()
        .steerable(reg(widths[4]), 3, 1)?
        .relu()?
        .steerable(reg(widths[5]), 1, 0)?
        .relu()?
        .steerable(FieldType::trivial(n, DISCRETE_COMBOS), 1, 0)?
        .build();
    shrink_output(&mut net);
    Ok(net)
}

/// Initial scale of the output kernel relative to the He-style draw. Large
/// initial Q spreads feed the max in the bootstrap target and the estimates
/// drift far above the attainable return before any reward is seen.
const OUTPUT_INIT_SCALE: f64 = 0.01;

fn shrink_output<T: Scalar>(net: &mut Network<T>) {
    let store = net.params_mut();
    if let Some(id) = store.ids().filter(|&id| store.name(id).ends_with("/kernel")).last() {
        for v in store.get_mut(id).data_mut() {
            *v = T::of(v.f64() * OUTPUT_INIT_SCALE);
        }
    }
}

fn plain_dqn_params(channels: &[usize]) -> usize {
    let kernels = [3, 3, 3, 3, 3, 1, 1];
    let mut c_in = 2;
    let mut total = 0;
    for (i, &k) in kernels.iter().enumerate() {
        let c_out = if i < 6 { channels[i] } else { DISCRETE_COMBOS };
        total += c_out * c_in * k * k + c_out;
        c_in = c_out;
    }
    total
}

/// Conventional CNN with the DQN stage layout. Its channel counts are the
/// equivariant model's (`n * widths`) scaled to match that model's free
/// parameter count.
pub fn build_plain_dqn<T: Scalar, R: Rng + ?Sized>(n: usize, widths: &[usize], rng: &mut R) -> Result<Network<T>> {
    if widths.len() != 6 {
        return Err(Error::invalid(format!("plain DQN takes 6 widths, got {}", widths.len())));
    }
    let target = {
        let mut probe = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        build_equi_dqn::<f64, _>(n, widths, &mut probe)?.effective_params()
    };
    let reference: Vec<usize> = widths.iter().map(|w| w * n).collect();
    let c = match_widths(&reference, target, plain_dqn_params);
    let mut net = NetworkBuilder::new(FieldType::trivial(n, 2), rng)
        .plain(c[0], 3, 1)?
        .relu()?
        .max_pool()
        .plain(c[1], 3, 1)?
        .relu()?
        .max_pool()
        .plain(c[2], 3, 1)?
        .relu()?
        .max_pool()
        .plain(c[3], 3, 0)?
        .relu()?
        .max_pool()
        .plain(c[4], 3, 1)?
        .relu()?
        .plain(c[5], 1, 0)?
        .relu()?
        .plain(DISCRETE_COMBOS, 1, 0)?
        .build();
    shrink_output(&mut net);
    Ok(net)
}


/// Greedy action with probability `1 - epsilon`, else uniform over all 162
/// entries. `q` is indexed by [`DiscreteAction::flat`]; ties go to the
/// lowest index.
pub fn dqn_select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> Result<DiscreteAction> {
    if q.len() != Q_CELLS {
        return Err(Error::DimensionMismatch {
            expected: Q_CELLS,
            actual: q.len(),
        });
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return DiscreteAction::from_flat(rng.random_range(0..Q_CELLS));
    }
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    DiscreteAction::from_flat(best)
}

/// Reorders a `B x 18 x 3 x 3` network output into per-sample flat
/// `xy * 18 + combo` rows.
fn flat_q(out: &[f64], batch: usize) -> Vec<Vec<f64>> {
    (0..batch)
        .map(|b| {
            let o = &out[b * Q_CELLS..(b + 1) * Q_CELLS];
            let mut q = vec![0.0; Q_CELLS];
            for c in 0..DISCRETE_COMBOS {
                for xy in 0..DISCRETE_XY_MOVES {
                    q[xy * DISCRETE_COMBOS + c] = o[c * DISCRETE_XY_MOVES + xy];
                }
            }
            q
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DqnStats {
    pub loss: f64,
    pub td_errors: Vec<f64>,
}

/// Online and target Q networks with their optimizer.
#[derive(Clone)]
pub struct DqnAgent<T: Scalar> {
    pub config: DqnConfig,
    online: Network<T>,
    target: Network<T>,
    adam: Adam,
}

impl<T: Scalar> DqnAgent<T> {
    /// Wraps `online`; the target starts as a copy.
    pub fn new(config: DqnConfig, online: Network<T>) -> Result<Self> {
        config.validate()?;
        if online.out_field().total_dim() != DISCRETE_COMBOS {
            return Err(Error::FieldMismatch(format!(
                "Q network must output {DISCRETE_COMBOS} channels, got {}",
                online.out_field()
            )));
        }
        Ok(Self {
            adam: Adam::new(AdamConfig::with_lr(config.lr)),
            target: online.clone(),
            online,
            config,
        })
    }

    pub fn equivariant<R: Rng + ?Sized>(config: DqnConfig, rng: &mut R) -> Result<Self> {
        let net = build_equi_dqn(config.n, &config.widths, rng)?;
        Self::new(config, net)
    }

    pub fn plain<R: Rng + ?Sized>(config: DqnConfig, rng: &mut R) -> Result<Self> {
        let net = build_plain_dqn(config.n, &config.widths, rng)?;
        Self::new(config, net)
    }

    pub fn online(&self) -> &Network<T> {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut Network<T> {
        &mut self.online
    }

    pub fn target(&self) -> &Network<T> {
        &self.target
    }

    /// The `18 x 3 x 3` Q map of one observation.
    pub fn q_map(&self, obs: &FeatureMap<f64>) -> Result<FeatureMap<T>> {
        let x = obs_tensor::<T>(&[obs])?;
        let input = FeatureMap::new(self.online.in_field().clone(), obs.height(), obs.width(), x.into_data())?;
        let out = self.online.forward_map(&input)?;
        if (out.height(), out.width()) != (3, 3) {
            return Err(Error::shape("dqn q_map", &[&[3, 3], &[out.height(), out.width()]]));
        }
        Ok(out)
    }

    fn q_batch(net: &Network<T>, obs: &[&FeatureMap<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let x = tape.constant(obs_tensor::<T>(obs)?);
        let y = net.forward(&mut tape, x)?;
        if tape.shape(y)[1..] != [DISCRETE_COMBOS, 3, 3] {
            return Err(Error::shape("dqn forward", &[tape.shape(y)]));
        }
        Ok(flat_q(&tape.value(y).to_f64(), obs.len()))
    }

    /// Flat Q values (see [`dqn_select_action`]) for a batch of
    /// observations.
    pub fn q_values(&self, obs: &[&FeatureMap<f64>]) -> Result<Vec<Vec<f64>>> {
        Self::q_batch(&self.online, obs)
    }

    /// Weighted Huber TD loss on `batch` and its gradient with respect to
    /// the online parameters. Targets are `r + gamma (1 - done) max_a'
    /// Q_target(s', a')`.
    pub fn loss_gradients(&self, batch: &[Transition], weights: &[f64]) -> Result<(DqnStats, Vec<(ParamId, Vec<T>)>)> {
        let b = batch.len();
        if b == 0 || weights.len() != b {
            return Err(Error::invalid(format!("dqn update with {b} transitions and {} weights", weights.len())));
        }
        let next: Vec<&FeatureMap<f64>> = batch.iter().map(|t| &t.next_obs).collect();
        let q_next = Self::q_batch(&self.target, &next)?;
        let mut y = Vec::with_capacity(b);
        let mut mask = vec![T::zero(); b * Q_CELLS];
        for (i, t) in batch.iter().enumerate() {
            let d = t
                .discrete
                .ok_or_else(|| Error::invalid("dqn update needs discrete actions"))?;
            let best = q_next[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bootstrap = if t.done { 0.0 } else { self.config.gamma * best };
            y.push(T::of(t.reward + bootstrap));
            // Network layout: channel = combo, spatial = xy.
            mask[i * Q_CELLS + d.combo * DISCRETE_XY_MOVES + d.xy] = T::one();
        }

        let obs: Vec<&FeatureMap<f64>> = batch.iter().map(|t| &t.obs).collect();
        let mut tape = Tape::new();
        let x = tape.constant(obs_tensor::<T>(&obs)?);
        let q = self.online.forward(&mut tape, x)?;
        let q = tape.reshape(q, &[b, Q_CELLS])?;
        let m = tape.constant(Tensor::new(vec![b, Q_CELLS], mask)?);
        let picked = tape.mul(q, m)?;
        let q_sa = tape.sum_axis(picked, 1)?;
        let target = tape.constant(Tensor::new(vec![b], y)?);
        let err = tape.sub(q_sa, target)?;
        let h = tape.huber(err, self.config.huber_delta);
        let w = tape.constant(Tensor::new(vec![b], weights.iter().map(|&v| T::of(v)).collect())?);
        let weighted = tape.mul(h, w)?;
        let loss = tape.mean(weighted);

        let td_errors = tape.value(err).to_f64();
        let loss_value = tape.value(loss).item().f64();
        let grads = tape.backward(loss)?;
        let grads = grads.for_store(&tape, self.online.params());
        Ok((
            DqnStats {
                loss: loss_value,
                td_errors,
            },
            grads,
        ))
    }

    /// One Adam step on [`DqnAgent::loss_gradients`] followed by the soft
    /// target update.
    pub fn update(&mut self, batch: &[Transition], weights: &[f64]) -> Result<DqnStats> {
        let (stats, grads) = self.loss_gradients(batch, weights)?;
        self.adam.step(self.online.params_mut(), &grads)?;
        self.target.params_mut().soft_update_from(self.online.params(), self.config.tau)?;
        Ok(stats)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        self.online.to_checkpoint("dqn/online", ckpt);
        self.target.to_checkpoint("dqn/target", ckpt);
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.online.load_checkpoint("dqn/online", ckpt)?;
        self.target.load_checkpoint("dqn/target", ckpt)
    }
}
