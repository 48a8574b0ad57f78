//! Scripted waypoint controllers. They read only vectors relative to the
//! gripper and yaw differences, so rotating the state rotates the action.

use super::{
    angle_diff, Action, Shape, Task, WorldState, CLOSED_BELOW, CONTINUOUS_THETA, CONTINUOUS_XY, CONTINUOUS_Z,
    GRASP_YAW_TOL, GRIPPER_RADIUS,
};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

/// Positions within this (per axis) count as reached. Slightly above half a
/// discrete step so that quantized experts converge.
const POS_TOL: f64 = 0.011;
/// Fingertip height while pushing.
const PUSH_Z: f64 = 0.015;
/// Extra gap between the gripper and a block before a push starts.
const PUSH_GAP: f64 = 0.004;
/// Clearance above object tops while travelling.
const CLEARANCE: f64 = 0.02;

const OPEN: f64 = 1.0;
const CLOSE: f64 = 0.0;

/// Scales `(dx, dy)` so that neither component exceeds `bound`, keeping the
/// direction.
fn toward(dx: f64, dy: f64, bound: f64) -> [f64; 2] {
    let m = dx.abs().max(dy.abs());
    if m > bound {
        [dx * bound / m, dy * bound / m]
    } else {
        [dx, dy]
    }
}

fn clamp(v: f64, b: f64) -> f64 {
    v.clamp(-b, b)
}

/// Smallest yaw correction that aligns the fingers with a face of `o`.
fn yaw_error(state: &WorldState, i: usize) -> f64 {
    let o = &state.objects[i];
    match o.shape {
        Shape::Disk { .. } => 0.0,
        Shape::Rect { .. } => {
            let q = angle_diff(o.yaw, state.gripper.yaw).rem_euclid(FRAC_PI_2);
            if q >= FRAC_PI_4 {
                q - FRAC_PI_2
            } else {
                q
            }
        }
    }
}

/// Approach, align, descend and close on object `i`.
fn grasp(state: &WorldState, i: usize) -> Action {
    let g = &state.gripper;
    if g.aperture < CLOSED_BELOW {
        return Action::new(OPEN, 0.0, 0.0, 0.0, 0.0);
    }
    let o = &state.objects[i];
    let (ex, ey) = (o.x - g.x, o.y - g.y);
    let dyaw = clamp(yaw_error(state, i), CONTINUOUS_THETA);
    let xy = toward(ex, ey, CONTINUOUS_XY);
    if ex.abs().max(ey.abs()) > POS_TOL || dyaw.abs() > GRASP_YAW_TOL / 2.0 {
        return Action::new(OPEN, xy[0], xy[1], 0.0, dyaw);
    }
    let dz = o.z + o.height / 2.0 - g.z;
    if dz.abs() > POS_TOL {
        return Action::new(OPEN, xy[0], xy[1], clamp(dz, CONTINUOUS_Z), dyaw);
    }
    Action::new(CLOSE, 0.0, 0.0, 0.0, 0.0)
}

fn pick(state: &WorldState) -> Action {
    if state.gripper.holding.is_some() {
        return Action::new(CLOSE, 0.0, 0.0, CONTINUOUS_Z, 0.0);
    }
    grasp(state, 0)
}

/// Carry object 0 over object 1 and release it on top.
fn stack(state: &WorldState) -> Action {
    let g = &state.gripper;
    match g.holding {
        Some(0) => {
            let b = &state.objects[1];
            let (ex, ey) = (b.x - g.x, b.y - g.y);
            let bottom = g.z - g.grip_depth;
            if ex.abs().max(ey.abs()) > POS_TOL {
                if bottom < b.top() + CLEARANCE - 1e-12 {
                    return Action::new(CLOSE, 0.0, 0.0, CONTINUOUS_Z, 0.0);
                }
                let xy = toward(ex, ey, CONTINUOUS_XY);
                return Action::new(CLOSE, xy[0], xy[1], 0.0, 0.0);
            }
            let dz = b.top() - bottom;
            if dz.abs() > POS_TOL {
                return Action::new(CLOSE, ex, ey, clamp(dz, CONTINUOUS_Z), 0.0);
            }
            Action::new(OPEN, 0.0, 0.0, 0.0, 0.0)
        }
        Some(_) => Action::new(OPEN, 0.0, 0.0, 0.0, 0.0),
        None => grasp(state, 0),
    }
}

/// Push object 0 into object 1 with the closed fingers, one axis at a time:
/// first the smaller offset (unless it is already small), then the larger.
fn pull(state: &WorldState) -> Action {
    let g = &state.gripper;
    if g.holding.is_some() {
        return Action::new(OPEN, 0.0, 0.0, 0.0, 0.0);
    }
    if g.aperture >= CLOSED_BELOW {
        return Action::new(CLOSE, 0.0, 0.0, 0.0, 0.0);
    }
    let (a, b) = (&state.objects[0], &state.objects[1]);
    let d = [b.x - a.x, b.y - a.y];
    let minor = if d[0].abs() <= d[1].abs() { 0 } else { 1 };
    let k = if d[minor].abs() <= 0.02 { 1 - minor } else { minor };
    let sgn = d[k].signum();
    let reach = a.radius() + GRIPPER_RADIUS;
    let pa = [a.x, a.y];
    let pg = [g.x, g.y];
    let rel_k = sgn * (pa[k] - pg[k]);
    let rel_perp = pa[1 - k] - pg[1 - k];

    let low = g.z < a.top();
    if low && (reach - 0.01..=reach + 0.016).contains(&rel_k) && rel_perp.abs() <= 0.012 {
        let mut xy = [0.0; 2];
        xy[k] = sgn * d[k].abs().min(CONTINUOUS_XY);
        return Action::new(CLOSE, xy[0], xy[1], 0.0, 0.0);
    }
    let mut behind = pa;
    behind[k] -= sgn * (reach + PUSH_GAP);
    let (ex, ey) = (behind[0] - pg[0], behind[1] - pg[1]);
    if ex.abs().max(ey.abs()) <= POS_TOL {
        return Action::new(CLOSE, ex, ey, clamp(PUSH_Z - g.z, CONTINUOUS_Z), 0.0);
    }
    let travel = a.top().max(b.top()) + CLEARANCE;
    if g.z < travel - 1e-12 {
        return Action::new(CLOSE, 0.0, 0.0, CONTINUOUS_Z, 0.0);
    }
    let xy = toward(ex, ey, CONTINUOUS_XY);
    Action::new(CLOSE, xy[0], xy[1], 0.0, 0.0)
}

/// Deterministic expert for the state's task, in continuous units. For the
/// discrete action space use [`super::DiscreteAction::nearest`].
pub fn expert_action(state: &WorldState) -> Action {
    match state.task {
        Task::Pull => pull(state),
        Task::Pick => pick(state),
        Task::Stack => stack(state),
    }
}
