//! Equivariant and plain DQN / SAC agents with their replay machinery.
//!
//! Networks consume observations rendered by [`crate::sim`] (two trivial
//! channels: depth and holding flag) scaled by [`OBS_SCALE`]. Training runs
//! in `f32`, verification in `f64`; both go through the same generic code.

mod dqn;
mod replay;
mod sac;

pub use dqn::{build_equi_dqn, build_plain_dqn, dqn_select_action, DqnAgent, DqnConfig, DqnStats, Q_CELLS};
pub use replay::{
    augment_transition, rotate_observation, AugAngles, ReplayBuffer, ReplayConfig, Sample, SumTree, Transition,
};
pub use sac::{
    build_equi_sac, build_plain_sac, critic_action_vector, denormalize_action, equi_critic_head, normalize_action,
    sacfd_l2, squashed_sample, ActorOutput, Critic, SacAgent, SacConfig, SacLosses, SacNoise, SacStats, ACTION_DIM,
    LOG_STD_MAX, LOG_STD_MIN,
};

use crate::group::FeatureMap;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

/// Observations are multiplied by this before entering a network so depths
/// of a few centimetres become order-one inputs.
pub const OBS_SCALE: f64 = 10.0;

/// Stacks observations into a `B x C x H x W` tensor, scaled by
/// [`OBS_SCALE`].
pub fn obs_tensor<T: Scalar>(maps: &[&FeatureMap<f64>]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| Error::invalid("empty observation batch"))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(maps.len() * c * h * w);
    for m in maps {
        if (m.channels(), m.height(), m.width()) != (c, h, w) {
            return Err(Error::shape(
                "obs_tensor",
                &[&[c, h, w], &[m.channels(), m.height(), m.width()]],
            ));
        }
        data.extend(m.data().iter().map(|&v| T::of(v * OBS_SCALE)));
    }
    Tensor::new(vec![maps.len(), c, h, w], data)
}

/// Linear interpolation of the exploration rate or PER exponent: `start`
/// at step 0, `end` from `fraction * total` on.
pub fn linear_schedule(start: f64, end: f64, fraction: f64, step: u64, total: u64) -> f64 {
    let horizon = fraction * total as f64;
    if horizon <= 0.0 {
        return end;
    }
    let f = (step as f64 / horizon).min(1.0);
    start + f * (end - start)
}

/// Plain-network widths `round(f * reference)` with the scale `f` whose
/// parameter count is closest to `target`, then refined one width at a
/// time, which matters when the widths are small.
pub(crate) fn match_widths(reference: &[usize], target: usize, count: impl Fn(&[usize]) -> usize) -> Vec<usize> {
    let mut best = (usize::MAX, reference.to_vec());
    for step in 1..=4000 {
        let f = step as f64 / 400.0;
        let w: Vec<usize> = reference.iter().map(|&c| ((c as f64 * f).round() as usize).max(1)).collect();
        let diff = count(&w).abs_diff(target);
        if diff < best.0 {
            best = (diff, w);
        }
    }
    let (mut diff, mut w) = best;
    loop {
        let mut improved = false;
        for i in 0..w.len() {
            for up in [true, false] {
                let mut c = w.clone();
                c[i] = if up { c[i] + 1 } else { c[i].saturating_sub(1).max(1) };
                let d = count(&c).abs_diff(target);
                if d < diff {
                    (diff, w, improved) = (d, c, true);
                }
            }
        }
        if !improved {
            return w;
        }
    }
}
