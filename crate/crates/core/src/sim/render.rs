use super::{Sim, WorldState, FINGER_HEIGHT, FINGER_PAD, MAX_HALF_OPENING};
use crate::group::{FeatureMap, FieldType};
use crate::Result;

/// Depth and holding flag.
pub const OBS_CHANNELS: usize = 2;

impl Sim {
    /// Top-down observation centred on the gripper, axes aligned with the
    /// world frame, sampled at pixel centres. Channel 0 is the depth below
    /// the fingertip plane (the table sits at `gripper.z`; finger pads are
    /// negative). Channel 1 is all ones while holding, else all zeros.
    /// Layout `(2, R, R)`, row 0 at `+y`.
    pub fn render_raw(&self, state: &WorldState) -> Vec<f64> {
        let r = self.config.resolution;
        let px = self.config.fov / r as f64;
        let c = (r as f64 - 1.0) / 2.0;
        let g = &state.gripper;
        let (cos, sin) = (g.yaw.cos(), g.yaw.sin());
        let spread = MAX_HALF_OPENING * g.aperture + FINGER_PAD;
        let pads = [(spread, 0.0), (-spread, 0.0)];
        let mut out = vec![0.0; OBS_CHANNELS * r * r];
        let (depth, flag) = out.split_at_mut(r * r);
        for i in 0..r {
            let dy = (c - i as f64) * px;
            for j in 0..r {
                let dx = (j as f64 - c) * px;
                let (x, y) = (g.x + dx, g.y + dy);
                let mut h = 0.0f64;
                for o in &state.objects {
                    if o.covers(x, y) {
                        h = h.max(o.top());
                    }
                }
                // Finger pads in the gripper frame.
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                if pads.iter().any(|&(pu, pv)| (u - pu).abs() <= FINGER_PAD && (v - pv).abs() <= FINGER_PAD) {
                    h = h.max(g.z + FINGER_HEIGHT);
                }
                depth[i * r + j] = g.z - h;
            }
        }
        if g.holding.is_some() {
            flag.fill(1.0);
        }
        out
    }

    /// [`Sim::render_raw`] as a two-channel trivial feature map for `C_n`.
    pub fn render(&self, state: &WorldState, n: usize) -> Result<FeatureMap<f64>> {
        let r = self.config.resolution;
        FeatureMap::new(FieldType::trivial(n, OBS_CHANNELS), r, r, self.render_raw(state))
    }
}

#[cfg(test)]
mod tests {
    use crate::sim::{Sim, SimConfig, Task, FINGER_PAD, MAX_HALF_OPENING};

    #[test]
    fn empty_scene_is_flat_outside_the_fingers() {
        let sim = Sim::new(SimConfig::default()).unwrap();
        let mut s = sim.reset(Task::Pick, 0);
        s.objects.clear();
        let obs = sim.render(&s, 4).unwrap();
        let r = sim.config().resolution;
        let px = sim.config().fov / r as f64;
        let c = (r as f64 - 1.0) / 2.0;
        let mut pad_pixels = 0;
        for i in 0..r {
            for j in 0..r {
                let (x, y) = ((j as f64 - c) * px, (c - i as f64) * px);
                let on_pad = (x.abs() - MAX_HALF_OPENING - FINGER_PAD).abs() <= FINGER_PAD && y.abs() <= FINGER_PAD;
                if on_pad {
                    pad_pixels += 1;
                    assert!(obs.get(0, i, j) < 0.0);
                } else {
                    assert_eq!(obs.get(0, i, j), s.gripper.z);
                }
                assert_eq!(obs.get(1, i, j), 0.0);
            }
        }
        assert!(pad_pixels > 0, "fingers must be visible");
    }

    #[test]
    fn holding_flag_fills_the_channel() {
        let sim = Sim::new(SimConfig::default()).unwrap();
        let mut s = sim.reset(Task::Pick, 1);
        s.gripper.holding = Some(0);
        let obs = sim.render(&s, 4).unwrap();
        assert!(obs.channel(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn object_under_the_gripper_is_closer() {
        let sim = Sim::new(SimConfig::default()).unwrap();
        let mut s = sim.reset(Task::Pick, 2);
        s.gripper.x = s.objects[0].x;
        s.gripper.y = s.objects[0].y;
        let obs = sim.render(&s, 4).unwrap();
        let r = sim.config().resolution;
        let centre = obs.get(0, r / 2, r / 2);
        assert!((centre - (s.gripper.z - s.objects[0].top())).abs() < 1e-15);
    }
}
