//! Kinematic top-down manipulation with a rotation-invariant transition
//! function.
//!
//! All dynamics are computed from vectors relative to the gripper and to the
//! workspace pose, and the workspace pose is part of the state, so rotating a
//! state about the gripper commutes with [`Sim::step`].
//!
//! Contact model:
//!
//! * every object collides as a disk of its footprint radius;
//! * a closed gripper below an object's top pushes it along the direction of
//!   motion until the two are `GRIPPER_RADIUS + radius` apart (a flat
//!   pusher); vertical motion alone pushes along the centre-to-centre normal;
//! * closing the fingers grasps the nearest object whose centre is within the
//!   previous half-opening, with the fingertips between its bottom and top and,
//!   for blocks, the yaw aligned to a face within `GRASP_YAW_TOL`;
//! * a held object follows the gripper rigidly and ignores other objects
//!   horizontally; it cannot be lowered through whatever lies below it;
//! * opening the fingers drops the held object onto the highest support under
//!   its centre.

mod expert;
mod record;
mod render;

pub use expert::expert_action;
pub use record::{read_episodes, rollout, write_episodes, EpisodeStep};
pub use render::OBS_CHANNELS;

use crate::group::{GroupElement, Rotation};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

/// Collision radius of the closed fingers.
pub const GRIPPER_RADIUS: f64 = 0.012;
/// Half the finger gap at aperture 1.
pub const MAX_HALF_OPENING: f64 = 0.05;
/// Fingers are rendered as squares of this half size...
pub const FINGER_PAD: f64 = 0.006;
/// ...sticking up this far above the fingertips.
pub const FINGER_HEIGHT: f64 = 0.05;
/// Two objects are in contact when their footprints are this close.
pub const CONTACT_SLACK: f64 = 0.002;
/// Largest yaw misalignment between fingers and a block face for a grasp.
pub const GRASP_YAW_TOL: f64 = PI / 12.0;
/// Planar motion is integrated in this many equal increments.
pub const MOTION_SUBSTEPS: usize = 10;
/// Apertures below this count as closed.
pub const CLOSED_BELOW: f64 = 0.5;

pub const DISCRETE_XY: f64 = 0.02;
pub const DISCRETE_Z: f64 = 0.02;
pub const DISCRETE_THETA: f64 = PI / 16.0;
pub const CONTINUOUS_XY: f64 = 0.05;
pub const CONTINUOUS_Z: f64 = 0.05;
pub const CONTINUOUS_THETA: f64 = PI / 8.0;

/// Number of invariant action combinations `(aperture, z, theta)` in the
/// discrete action space.
pub const DISCRETE_COMBOS: usize = 18;
/// Number of `xy` moves in the discrete action space (a 3x3 grid).
pub const DISCRETE_XY_MOVES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pull,
    Pick,
    Stack,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Pull, Task::Pick, Task::Stack];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pull => "pull",
            Task::Pick => "pick",
            Task::Stack => "stack",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pull" => Ok(Task::Pull),
            "pick" => Ok(Task::Pick),
            "stack" => Ok(Task::Stack),
            _ => Err(Error::invalid(format!("unknown task `{s}` (expected pull, pick or stack)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Disk { radius: f64 },
    Rect { half_x: f64, half_y: f64 },
}

impl Shape {
    /// Radius of the disk used for collisions and support.
    pub fn radius(&self) -> f64 {
        match *self {
            Shape::Disk { radius } => radius,
            Shape::Rect { half_x, half_y } => half_x.max(half_y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    /// Height of the bottom face above the table.
    pub z: f64,
    pub height: f64,
}

impl Object {
    pub fn top(&self) -> f64 {
        self.z + self.height
    }

    pub fn radius(&self) -> f64 {
        self.shape.radius()
    }

    /// Whether the footprint covers the point `(px, py)`.
    pub fn covers(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.x, py - self.y);
        match self.shape {
            Shape::Disk { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Rect { half_x, half_y } => {
                let (c, s) = (self.yaw.cos(), self.yaw.sin());
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                u.abs() <= half_x && v.abs() <= half_y
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub x: f64,
    pub y: f64,
    /// Fingertip height above the table.
    pub z: f64,
    pub yaw: f64,
    /// 0 = closed, 1 = fully open.
    pub aperture: f64,
    pub holding: Option<usize>,
    /// Fingertip height above the held object's bottom.
    pub grip_depth: f64,
}

/// Square workspace; its pose is part of the state so that rotations of the
/// whole scene are representable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub half: f64,
}

impl Workspace {
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    fn to_world(&self, u: f64, v: f64) -> (f64, f64) {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        (self.x + c * u - s * v, self.y + s * u + c * v)
    }

    /// Nearest point of the workspace shrunk by `margin`.
    pub fn clamp(&self, x: f64, y: f64, margin: f64) -> (f64, f64) {
        let (u, v) = self.to_local(x, y);
        let h = self.half - margin;
        if u.abs() <= h && v.abs() <= h {
            return (x, y);
        }
        self.to_world(u.clamp(-h, h), v.clamp(-h, h))
    }

    pub fn contains(&self, x: f64, y: f64, tol: f64) -> bool {
        let (u, v) = self.to_local(x, y);
        u.abs() <= self.half + tol && v.abs() <= self.half + tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub task: Task,
    pub gripper: Gripper,
    pub objects: Vec<Object>,
    pub workspace: Workspace,
    pub step_count: usize,
}

/// `a - b` wrapped into `(-pi, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

impl WorldState {
    /// Largest difference in any continuous coordinate, with yaws compared
    /// modulo a full turn; infinite if the discrete structure differs.
    pub fn max_deviation(&self, other: &WorldState) -> f64 {
        if self.task != other.task
            || self.step_count != other.step_count
            || self.gripper.holding != other.gripper.holding
            || self.objects.len() != other.objects.len()
            || self.objects.iter().zip(&other.objects).any(|(a, b)| a.shape != b.shape)
        {
            return f64::INFINITY;
        }
        let (g, h) = (&self.gripper, &other.gripper);
        let mut dev = [
            g.x - h.x,
            g.y - h.y,
            g.z - h.z,
            angle_diff(g.yaw, h.yaw),
            g.aperture - h.aperture,
            g.grip_depth - h.grip_depth,
            self.workspace.x - other.workspace.x,
            self.workspace.y - other.workspace.y,
            angle_diff(self.workspace.yaw, other.workspace.yaw),
        ]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in self.objects.iter().zip(&other.objects) {
            for d in [a.x - b.x, a.y - b.y, a.z - b.z, angle_diff(a.yaw, b.yaw)] {
                dev = dev.max(d.abs());
            }
        }
        dev
    }

    /// [`WorldState::max_deviation`] after translating both scenes so that
    /// the gripper sits at the origin. Rotations act about the gripper, and
    /// the dynamics only see relative positions, so this is the comparison
    /// under which a step commutes with a rotation.
    pub fn relative_deviation(&self, other: &WorldState) -> f64 {
        self.centred().max_deviation(&other.centred())
    }

    /// The same scene translated so that the gripper is at the origin.
    pub fn centred(&self) -> WorldState {
        let mut out = self.clone();
        let (cx, cy) = (self.gripper.x, self.gripper.y);
        out.gripper.x = 0.0;
        out.gripper.y = 0.0;
        for o in &mut out.objects {
            o.x -= cx;
            o.y -= cy;
        }
        out.workspace.x -= cx;
        out.workspace.y -= cy;
        out
    }

    /// Every object centre and the gripper inside the workspace.
    pub fn within_bounds(&self) -> bool {
        let ws = &self.workspace;
        ws.contains(self.gripper.x, self.gripper.y, 1e-12) && self.objects.iter().all(|o| ws.contains(o.x, o.y, 1e-12))
    }

    /// Highest top under `(x, y)` among objects other than `exclude` and the
    /// held one; 0 for the table.
    pub fn support_top(&self, x: f64, y: f64, exclude: Option<usize>) -> f64 {
        self.objects
            .iter()
            .enumerate()
            .filter(|&(i, o)| Some(i) != exclude && Some(i) != self.gripper.holding && {
                let (dx, dy) = (x - o.x, y - o.y);
                dx * dx + dy * dy <= o.radius() * o.radius()
            })
            .map(|(_, o)| o.top())
            .fold(0.0, f64::max)
    }

    /// Moves every object the closed fingers overlap until it just touches
    /// them. The fingers present a flat face to their direction of motion
    /// `(mx, my)` (a unit vector), so an object is pushed along it; with no
    /// planar motion the object moves out along the centre-to-centre normal.
    fn push_objects(&mut self, motion: Option<(f64, f64)>) {
        let g = &self.gripper;
        let (gx, gy, gz) = (g.x, g.y, g.z);
        for (i, o) in self.objects.iter_mut().enumerate() {
            if Some(i) == g.holding || gz >= o.top() || gz + FINGER_HEIGHT <= o.z {
                continue;
            }
            let reach = GRIPPER_RADIUS + o.radius();
            let (px, py) = (o.x - gx, o.y - gy);
            let d2 = px * px + py * py;
            if d2 >= reach * reach {
                continue;
            }
            let target = match motion {
                Some((mx, my)) => {
                    // Smallest t >= 0 with |p + t m| = reach.
                    let pm = px * mx + py * my;
                    let t = -pm + (pm * pm - d2 + reach * reach).sqrt();
                    (o.x + t * mx, o.y + t * my)
                }
                None if d2 > 0.0 => {
                    let d = d2.sqrt();
                    (gx + px / d * reach, gy + py / d * reach)
                }
                None => continue,
            };
            (o.x, o.y) = self.workspace.clamp(target.0, target.1, 0.0);
        }
    }

    /// Whether the task predicate holds.
    pub fn success(&self) -> bool {
        match self.task {
            Task::Pull => {
                let (a, b) = (&self.objects[0], &self.objects[1]);
                let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                d <= a.radius() + b.radius() + CONTACT_SLACK
            }
            Task::Pick => self.gripper.holding.is_some_and(|i| self.objects[i].z >= LIFT_HEIGHT),
            Task::Stack => {
                let (a, b) = (&self.objects[0], &self.objects[1]);
                let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
                self.gripper.holding.is_none() && d2 <= b.radius() * b.radius() && (a.z - b.top()).abs() <= 1e-9
            }
        }
    }
}

/// A held object counts as lifted once its bottom is this high.
pub const LIFT_HEIGHT: f64 = 0.05;

/// Rotates every pose in the scene about the gripper position. Gripper
/// height, aperture and holding state are unchanged.
pub fn rotate_state(rotation: &Rotation, state: &WorldState) -> WorldState {
    if rotation.as_quarter_turns() == Some(0) {
        return state.clone();
    }
    let mut out = state.clone();
    let (cx, cy) = (state.gripper.x, state.gripper.y);
    let turn = |x: f64, y: f64| {
        let (u, v) = rotation.apply(x - cx, y - cy);
        (cx + u, cy + v)
    };
    let a = rotation.angle();
    out.gripper.yaw += a;
    for o in &mut out.objects {
        (o.x, o.y) = turn(o.x, o.y);
        o.yaw += a;
    }
    (out.workspace.x, out.workspace.y) = turn(state.workspace.x, state.workspace.y);
    out.workspace.yaw += a;
    out
}

/// [`rotate_state`] for a group element.
pub fn rotate_state_by(g: &GroupElement, state: &WorldState) -> WorldState {
    rotate_state(&g.rotation(), state)
}

/// `a = (a_lambda, a_xy, a_z, a_theta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    /// Commanded aperture; below [`CLOSED_BELOW`] closes the fingers.
    pub aperture: f64,
    pub xy: [f64; 2],
    pub z: f64,
    pub theta: f64,
}

impl Action {
    pub fn new(aperture: f64, dx: f64, dy: f64, z: f64, theta: f64) -> Self {
        Self {
            aperture,
            xy: [dx, dy],
            z,
            theta,
        }
    }

    /// Rotates `a_xy`; the invariant components are unchanged.
    pub fn rotated(&self, rotation: &Rotation) -> Action {
        let (x, y) = rotation.apply(self.xy[0], self.xy[1]);
        Action { xy: [x, y], ..*self }
    }

    /// Clamps every component to the continuous action bounds.
    pub fn clamped(&self) -> Action {
        let c = |v: f64, b: f64| if v.is_nan() { 0.0 } else { v.clamp(-b, b) };
        Action {
            aperture: if self.aperture.is_nan() { 1.0 } else { self.aperture.clamp(0.0, 1.0) },
            xy: [c(self.xy[0], CONTINUOUS_XY), c(self.xy[1], CONTINUOUS_XY)],
            z: c(self.z, CONTINUOUS_Z),
            theta: c(self.theta, CONTINUOUS_THETA),
        }
    }

    /// `[aperture, dx, dy, dz, dtheta]`.
    pub fn to_vec(&self) -> [f64; 5] {
        [self.aperture, self.xy[0], self.xy[1], self.z, self.theta]
    }

    pub fn from_slice(v: &[f64]) -> Action {
        Action::new(v[0], v[1], v[2], v[3], v[4])
    }
}

/// Index into the discrete action space: a cell of the 3x3 `xy` grid (row
/// major, row 0 = `+y`, column 0 = `-x`, matching the pixel convention) and
/// one of the 18 `(aperture, z, theta)` combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteAction {
    pub xy: usize,
    pub combo: usize,
}

fn ternary(v: f64, step: f64) -> usize {
    if v > step / 2.0 {
        2
    } else if v < -step / 2.0 {
        0
    } else {
        1
    }
}

impl DiscreteAction {
    pub fn new(xy: usize, combo: usize) -> Result<Self> {
        if xy >= DISCRETE_XY_MOVES || combo >= DISCRETE_COMBOS {
            return Err(Error::invalid(format!("discrete action ({xy}, {combo}) out of range")));
        }
        Ok(Self { xy, combo })
    }

    /// Flat index `xy * 18 + combo`.
    pub fn flat(&self) -> usize {
        self.xy * DISCRETE_COMBOS + self.combo
    }

    pub fn from_flat(i: usize) -> Result<Self> {
        Self::new(i / DISCRETE_COMBOS, i % DISCRETE_COMBOS)
    }

    pub fn to_action(&self) -> Action {
        let (i, j) = (self.xy / 3, self.xy % 3);
        let (l, z, t) = (self.combo / 9, (self.combo / 3) % 3, self.combo % 3);
        Action::new(
            if l == 0 { 1.0 } else { 0.0 },
            (j as f64 - 1.0) * DISCRETE_XY,
            (1.0 - i as f64) * DISCRETE_XY,
            (z as f64 - 1.0) * DISCRETE_Z,
            (t as f64 - 1.0) * DISCRETE_THETA,
        )
    }

    /// Nearest discrete action, thresholding each component at half a step.
    pub fn nearest(a: &Action) -> DiscreteAction {
        let j = ternary(a.xy[0], DISCRETE_XY);
        let i = 2 - ternary(a.xy[1], DISCRETE_XY);
        let l = usize::from(a.aperture < CLOSED_BELOW);
        let z = ternary(a.z, DISCRETE_Z);
        let t = ternary(a.theta, DISCRETE_THETA);
        DiscreteAction {
            xy: i * 3 + j,
            combo: (l * 3 + z) * 3 + t,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Side of the square workspace in meters.
    pub workspace: f64,
    /// Side of the square field of view in meters.
    pub fov: f64,
    /// Observation side in pixels.
    pub resolution: usize,
    pub max_steps: usize,
    pub start_height: f64,
    pub max_height: f64,
    /// Object centres are placed at least this far inside the workspace.
    pub spawn_margin: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            workspace: 0.4,
            fov: 0.6,
            resolution: 64,
            max_steps: 50,
            start_height: 0.1,
            max_height: 0.24,
            spawn_margin: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: WorldState,
    pub reward: f64,
    pub done: bool,
}

/// A simulator for one configuration. Stateless: `reset` and `step` are pure.
#[derive(Clone, Debug, Default)]
pub struct Sim {
    config: SimConfig,
}

const CUBE: f64 = 0.035;

fn cube() -> (Shape, f64) {
    (
        Shape::Rect {
            half_x: CUBE / 2.0,
            half_y: CUBE / 2.0,
        },
        CUBE,
    )
}

const MIN_SPAWN_SIDE: f64 = 0.1;

impl Sim {
    pub fn new(config: SimConfig) -> Result<Self> {
        let c = &config;
        if !(c.workspace > 0.0 && c.fov > 0.0 && c.resolution > 0 && c.max_steps > 0) {
            return Err(Error::invalid("workspace, fov, resolution and max_steps must be positive"));
        }
        if !(0.0..=c.max_height).contains(&c.start_height) {
            return Err(Error::invalid("start_height must lie in [0, max_height]"));
        }
        // Two separated objects must fit comfortably in the spawn square.
        if c.workspace - 2.0 * c.spawn_margin < MIN_SPAWN_SIDE {
            return Err(Error::invalid(format!(
                "workspace minus spawn margins must be at least {MIN_SPAWN_SIDE} m"
            )));
        }
        Ok(Self { config })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// A random scene: objects uniform in the workspace, pairwise separated,
    /// gripper open at the workspace centre and start height.
    pub fn reset(&self, task: Task, seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes: Vec<(Shape, f64)> = match task {
            Task::Pull | Task::Stack => vec![cube(), cube()],
            Task::Pick => vec![match rng.random_range(0..3) {
                0 => cube(),
                1 => (Shape::Disk { radius: 0.02 }, 0.04),
                _ => (
                    Shape::Rect {
                        half_x: 0.025,
                        half_y: 0.015,
                    },
                    0.03,
                ),
            }],
        };
        let half = self.config.workspace / 2.0;
        let lim = half - self.config.spawn_margin;
        let mut objects: Vec<Object> = Vec::new();
        for (shape, height) in shapes {
            let yaw_range = match shape {
                Shape::Rect { half_x, half_y } if half_x == half_y => FRAC_PI_2,
                _ => PI,
            };
            loop {
                let (x, y) = (rng.random_range(-lim..lim), rng.random_range(-lim..lim));
                let clear = objects.iter().all(|o| {
                    let d = ((o.x - x).powi(2) + (o.y - y).powi(2)).sqrt();
                    d >= o.radius() + shape.radius() + 0.04
                });
                if clear {
                    objects.push(Object {
                        shape,
                        x,
                        y,
                        yaw: rng.random_range(0.0..yaw_range),
                        z: 0.0,
                        height,
                    });
                    break;
                }
            }
        }
        WorldState {
            task,
            gripper: Gripper {
                x: 0.0,
                y: 0.0,
                z: self.config.start_height,
                yaw: 0.0,
                aperture: 1.0,
                holding: None,
                grip_depth: 0.0,
            },
            objects,
            workspace: Workspace {
                x: 0.0,
                y: 0.0,
                yaw: 0.0,
                half,
            },
            step_count: 0,
        }
    }

    pub fn step(&self, state: &WorldState, action: &Action) -> StepOutcome {
        let a = action.clamped();
        let mut s = state.clone();
        let was_closed = s.gripper.aperture < CLOSED_BELOW;
        let prev_half_opening = MAX_HALF_OPENING * s.gripper.aperture;

        // Yaw, then planar motion in small increments so that a closed
        // gripper cannot pass through an object within one step.
        s.gripper.yaw += a.theta;
        let held = s.gripper.holding;
        let (x0, y0) = (s.gripper.x, s.gripper.y);
        for k in 1..=MOTION_SUBSTEPS {
            let f = k as f64 / MOTION_SUBSTEPS as f64;
            let (gx, gy) = s.workspace.clamp(x0 + a.xy[0] * f, y0 + a.xy[1] * f, 0.0);
            let (mx, my) = (gx - s.gripper.x, gy - s.gripper.y);
            s.gripper.x = gx;
            s.gripper.y = gy;
            let len = (mx * mx + my * my).sqrt();
            if was_closed && len > 0.0 {
                s.push_objects(Some((mx / len, my / len)));
            }
        }
        let (gx, gy) = (s.gripper.x, s.gripper.y);

        // Height, kept above whatever supports a held object.
        let floor = match held {
            Some(i) => s.support_top(gx, gy, Some(i)) + s.gripper.grip_depth,
            None => 0.0,
        };
        s.gripper.z = (s.gripper.z + a.z).clamp(floor.min(self.config.max_height), self.config.max_height);
        if was_closed {
            s.push_objects(None);
        }
        if let Some(i) = held {
            let o = &mut s.objects[i];
            o.x = gx;
            o.y = gy;
            o.z = s.gripper.z - s.gripper.grip_depth;
            o.yaw += a.theta;
        }

        // Fingers.
        let closing = a.aperture < CLOSED_BELOW;
        if closing && !was_closed && held.is_none() {
            let gz = s.gripper.z;
            let gyaw = s.gripper.yaw;
            let pick = s
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| {
                    let d = ((o.x - gx).powi(2) + (o.y - gy).powi(2)).sqrt();
                    let aligned = match o.shape {
                        Shape::Disk { .. } => true,
                        Shape::Rect { .. } => {
                            let q = angle_diff(gyaw, o.yaw).rem_euclid(FRAC_PI_2);
                            q.min(FRAC_PI_2 - q) <= GRASP_YAW_TOL
                        }
                    };
                    d <= prev_half_opening && gz >= o.z && gz <= o.top() && aligned
                })
                .map(|(i, o)| (i, (o.x - gx).powi(2) + (o.y - gy).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = pick {
                let o = &mut s.objects[i];
                o.x = gx;
                o.y = gy;
                s.gripper.grip_depth = gz - o.z;
                s.gripper.holding = Some(i);
            }
        } else if !closing {
            if let Some(i) = held {
                s.gripper.holding = None;
                let top = s.support_top(s.objects[i].x, s.objects[i].y, Some(i));
                s.objects[i].z = top;
                s.gripper.grip_depth = 0.0;
            }
        }
        s.gripper.aperture = a.aperture;
        s.step_count += 1;

        let success = s.success();
        let done = success || s.step_count >= self.config.max_steps;
        StepOutcome {
            state: s,
            reward: if success { 1.0 } else { 0.0 },
            done,
        }
    }
}
