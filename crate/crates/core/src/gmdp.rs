//! Finite MDPs carrying a `C_n` action on states and actions.
//!
//! # Text format
//!
//! Whitespace separated, `#` starts a comment, blank lines are ignored.
//!
//! ```text
//! <S> <A> <n> <gamma>
//! S*A lines     T(s, a, .) for s = 0.., a = 0.. (s-major), S numbers each
//! S lines       R(s, .), A numbers each
//! n lines       state map of group element g = 0..n, S indices each
//! n lines       action map of group element g = 0..n, A indices each
//! ```
//!
//! Numbers are written in shortest round-trip form, so save/load is exact.

use crate::group::GroupElement;
use crate::{Error, Result};
use rand::Rng;
use std::fmt::Write as _;
use std::path::Path;

/// Row sums of `T` must be within this of one.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Ties in `argmax` sets.
pub const ARGMAX_TOL: f64 = 1e-9;

/// A finite MDP together with permutations `sigma_g` of the states and
/// `alpha_g` of the actions for every `g` in `C_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularGmdp {
    states: usize,
    actions: usize,
    n: usize,
    gamma: f64,
    /// `T(s, a, s')` at `(s * actions + a) * states + s'`.
    t: Vec<f64>,
    /// `R(s, a)` at `s * actions + a`.
    r: Vec<f64>,
    state_maps: Vec<Vec<usize>>,
    action_maps: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InvarianceReport {
    pub reward_dev: f64,
    pub transition_dev: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimalQReport {
    pub q_dev: f64,
    pub policy_equivariant: bool,
}

/// Optimal action values, row-major `(states, actions)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    states: usize,
    actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(states: usize, actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != states * actions {
            return Err(Error::DimensionMismatch {
                expected: states * actions,
                actual: values.len(),
            });
        }
        Ok(Self { states, actions, values })
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.actions..(s + 1) * self.actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    /// Actions within `tol` of the best value in state `s`, ascending.
    pub fn argmax_set(&self, s: usize, tol: f64) -> Vec<usize> {
        let row = self.row(s);
        let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (0..self.actions).filter(|&a| row[a] >= best - tol).collect()
    }
}

/// Permutations of `0..len` for every element of `C_n`, built from orbits:
/// an orbit of size `d` (which must divide `n`) is shifted cyclically by
/// `g mod d`.
pub fn orbit_action(n: usize, orbit_sizes: &[usize]) -> Result<Vec<Vec<usize>>> {
    if let Some(&d) = orbit_sizes.iter().find(|&&d| d == 0 || n % d != 0) {
        return Err(Error::invalid(format!("orbit size {d} does not divide {n}")));
    }
    Ok((0..n)
        .map(|g| {
            let mut map = Vec::new();
            let mut base = 0;
            for &d in orbit_sizes {
                map.extend((0..d).map(|j| base + (j + g) % d));
                base += d;
            }
            map
        })
        .collect())
}

fn is_permutation(map: &[usize]) -> bool {
    let mut seen = vec![false; map.len()];
    map.iter().all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
}

fn check_group_action(maps: &[Vec<usize>], n: usize, len: usize, what: &str) -> Result<()> {
    if maps.len() != n {
        return Err(Error::invalid(format!("{what}: expected {n} maps, got {}", maps.len())));
    }
    for (g, m) in maps.iter().enumerate() {
        if m.len() != len || !is_permutation(m) {
            return Err(Error::invalid(format!("{what} of element {g} is not a permutation of 0..{len}")));
        }
    }
    if maps[0].iter().enumerate().any(|(i, &j)| i != j) {
        return Err(Error::invalid(format!("{what} of the identity is not the identity")));
    }
    for a in 0..n {
        for b in 0..n {
            let ab = &maps[(a + b) % n];
            if (0..len).any(|i| ab[i] != maps[a][maps[b][i]]) {
                return Err(Error::invalid(format!("{what} is not a group action ({a}*{b})")));
            }
        }
    }
    Ok(())
}

impl TabularGmdp {
    /// Validates shapes, stochasticity of `T`, `gamma` in `[0, 1]` and that the
    /// maps form a group action.
    pub fn new(
        states: usize,
        actions: usize,
        gamma: f64,
        t: Vec<f64>,
        r: Vec<f64>,
        state_maps: Vec<Vec<usize>>,
        action_maps: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = state_maps.len();
        if states == 0 || actions == 0 || n == 0 {
            return Err(Error::invalid("states, actions and group order must be positive"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
        }
        if t.len() != states * actions * states {
            return Err(Error::DimensionMismatch {
                expected: states * actions * states,
                actual: t.len(),
            });
        }
        if r.len() != states * actions {
            return Err(Error::DimensionMismatch {
                expected: states * actions,
                actual: r.len(),
            });
        }
        if !r.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("rewards must be finite"));
        }
        for (row, p) in t.chunks(states).enumerate() {
            if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("T row {row} has an entry outside [0, 1]")));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!("T row {row} sums to {sum}")));
            }
        }
        check_group_action(&state_maps, n, states, "state map")?;
        check_group_action(&action_maps, n, actions, "action map")?;
        Ok(Self {
            states,
            actions,
            n,
            gamma,
            t,
            r,
            state_maps,
            action_maps,
        })
    }

    /// A random MDP over the given orbit structures. Each transition row has
    /// `support` random successors (at least one).
    pub fn random<R: Rng + ?Sized>(
        n: usize,
        state_orbits: &[usize],
        action_orbits: &[usize],
        gamma: f64,
        support: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let state_maps = orbit_action(n, state_orbits)?;
        let action_maps = orbit_action(n, action_orbits)?;
        let (s, a) = (state_maps[0].len(), action_maps[0].len());
        let mut t = vec![0.0; s * a * s];
        for row in t.chunks_mut(s) {
            for _ in 0..support.max(1) {
                row[rng.random_range(0..s)] += rng.random_range(0.1..1.0);
            }
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let r = (0..s * a).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self::new(s, a, gamma, t, r, state_maps, action_maps)
    }

    /// Odd `size` x `size` grid, goal in the centre, actions up/left/down/right
    /// (so a quarter turn maps action `a` to `a + 1 mod 4`). Moving into the
    /// goal pays 1; the goal is absorbing with reward 0; walls block. Cells
    /// are numbered row-major with row 0 at the top.
    pub fn gridworld(size: usize, gamma: f64) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::invalid(format!("gridworld size must be odd, got {size}")));
        }
        let c = (size / 2) as i64;
        let cell = |x: i64, y: i64| ((c - y) * size as i64 + (x + c)) as usize;
        let coords = |s: usize| ((s % size) as i64 - c, c - (s / size) as i64);
        let goal = cell(0, 0);
        let moves = [(0, 1), (-1, 0), (0, -1), (1, 0)];
        let s = size * size;
        let mut t = vec![0.0; s * 4 * s];
        let mut r = vec![0.0; s * 4];
        for st in 0..s {
            for (a, &(dx, dy)) in moves.iter().enumerate() {
                let next = if st == goal {
                    goal
                } else {
                    let (x, y) = coords(st);
                    let (nx, ny) = (x + dx, y + dy);
                    if nx.abs() <= c && ny.abs() <= c {
                        cell(nx, ny)
                    } else {
                        st
                    }
                };
                t[(st * 4 + a) * s + next] = 1.0;
                if st != goal && next == goal {
                    r[st * 4 + a] = 1.0;
                }
            }
        }
        let state_maps = (0..4)
            .map(|g| {
                (0..s)
                    .map(|st| {
                        let (mut x, mut y) = coords(st);
                        for _ in 0..g {
                            (x, y) = (-y, x);
                        }
                        cell(x, y)
                    })
                    .collect()
            })
            .collect();
        let action_maps = orbit_action(4, &[4])?;
        Self::new(s, 4, gamma, t, r, state_maps, action_maps)
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.t[(s * self.actions + a) * self.states + next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.r[s * self.actions + a]
    }

    pub fn set_reward(&mut self, s: usize, a: usize, value: f64) {
        self.r[s * self.actions + a] = value;
    }

    fn element_index(&self, g: &GroupElement) -> Result<usize> {
        if g.order() != self.n {
            return Err(Error::GroupOrderMismatch {
                expected: self.n,
                actual: g.order(),
            });
        }
        Ok(g.index())
    }

    pub fn act_state(&self, g: &GroupElement, s: usize) -> Result<usize> {
        Ok(self.state_maps[self.element_index(g)?][s])
    }

    pub fn act_action(&self, g: &GroupElement, a: usize) -> Result<usize> {
        Ok(self.action_maps[self.element_index(g)?][a])
    }

    /// Worst violation of reward and transition invariance over all group
    /// elements, states and actions.
    pub fn check_invariance(&self) -> InvarianceReport {
        let mut report = InvarianceReport {
            reward_dev: 0.0,
            transition_dev: 0.0,
        };
        for (sm, am) in self.state_maps.iter().zip(&self.action_maps) {
            for s in 0..self.states {
                for a in 0..self.actions {
                    let (gs, ga) = (sm[s], am[a]);
                    report.reward_dev = report.reward_dev.max((self.reward(s, a) - self.reward(gs, ga)).abs());
                    for next in 0..self.states {
                        let d = (self.transition(s, a, next) - self.transition(gs, ga, sm[next])).abs();
                        report.transition_dev = report.transition_dev.max(d);
                    }
                }
            }
        }
        report
    }

    /// Averages `R` and `T` over group orbits so both invariance conditions
    /// hold by construction.
    pub fn symmetrize(&self) -> Self {
        let (s_n, a_n) = (self.states, self.actions);
        let inv = 1.0 / self.n as f64;
        let mut out = self.clone();
        for s in 0..s_n {
            for a in 0..a_n {
                let mut r = 0.0;
                for (sm, am) in self.state_maps.iter().zip(&self.action_maps) {
                    r += self.reward(sm[s], am[a]);
                }
                out.r[s * a_n + a] = r * inv;
                for next in 0..s_n {
                    let mut p = 0.0;
                    for (sm, am) in self.state_maps.iter().zip(&self.action_maps) {
                        p += self.transition(sm[s], am[a], sm[next]);
                    }
                    out.t[(s * a_n + a) * s_n + next] = p * inv;
                }
            }
        }
        out
    }

    /// One synchronous Bellman optimality sweep.
    fn bellman(&self, q: &[f64], out: &mut [f64]) {
        let v: Vec<f64> = q
            .chunks(self.actions)
            .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for (sa, o) in out.iter_mut().enumerate() {
            let row = &self.t[sa * self.states..(sa + 1) * self.states];
            let ev: f64 = row.iter().zip(&v).map(|(p, v)| p * v).sum();
            *o = self.r[sa] + self.gamma * ev;
        }
    }

    /// Synchronous value iteration until the sup-norm Bellman residual of the
    /// returned table is at most `tol`.
    pub fn value_iteration(&self, tol: f64) -> Result<QTable> {
        if !(tol > 0.0) {
            return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
        }
        if self.gamma >= 1.0 {
            return Err(Error::invalid(format!("value iteration needs gamma < 1, got {}", self.gamma)));
        }
        const MAX_SWEEPS: usize = 10_000_000;
        let mut q = vec![0.0; self.states * self.actions];
        let mut next = q.clone();
        for _ in 0..MAX_SWEEPS {
            self.bellman(&q, &mut next);
            let delta = q.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            std::mem::swap(&mut q, &mut next);
            // Residual of the new iterate is at most gamma * delta.
            if self.gamma * delta <= tol {
                self.bellman(&q, &mut next);
                let residual = q.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                if residual <= tol {
                    return QTable::new(self.states, self.actions, q);
                }
            }
        }
        Err(Error::invalid(format!(
            "value iteration did not reach residual {tol} in {MAX_SWEEPS} sweeps"
        )))
    }

    /// Sup-norm Bellman optimality residual of `q`.
    pub fn bellman_residual(&self, q: &QTable) -> f64 {
        let mut next = vec![0.0; q.values.len()];
        self.bellman(&q.values, &mut next);
        q.values.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Invariance of `q` and equivariance of its argmax sets under the
    /// group action. No invariance precondition is enforced, so the check can
    /// be run on asymmetric MDPs to watch it fail.
    pub fn verify_optimal_q(&self, q: &QTable) -> Result<OptimalQReport> {
        if q.states != self.states || q.actions != self.actions {
            return Err(Error::shape("verify_optimal_q", &[&[self.states, self.actions], &[q.states, q.actions]]));
        }
        let mut q_dev = 0.0f64;
        let mut policy_equivariant = true;
        for (sm, am) in self.state_maps.iter().zip(&self.action_maps) {
            for s in 0..self.states {
                for a in 0..self.actions {
                    q_dev = q_dev.max((q.get(s, a) - q.get(sm[s], am[a])).abs());
                }
                let mut moved: Vec<usize> = q.argmax_set(s, ARGMAX_TOL).into_iter().map(|a| am[a]).collect();
                moved.sort_unstable();
                if moved != q.argmax_set(sm[s], ARGMAX_TOL) {
                    policy_equivariant = false;
                }
            }
        }
        Ok(OptimalQReport { q_dev, policy_equivariant })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# S A n gamma");
        let _ = writeln!(out, "{} {} {} {:?}", self.states, self.actions, self.n, self.gamma);
        let join = |xs: &mut dyn Iterator<Item = String>| xs.collect::<Vec<_>>().join(" ");
        let _ = writeln!(out, "# T");
        for row in self.t.chunks(self.states) {
            let _ = writeln!(out, "{}", join(&mut row.iter().map(|v| format!("{v:?}"))));
        }
        let _ = writeln!(out, "# R");
        for row in self.r.chunks(self.actions) {
            let _ = writeln!(out, "{}", join(&mut row.iter().map(|v| format!("{v:?}"))));
        }
        let _ = writeln!(out, "# state maps");
        for m in &self.state_maps {
            let _ = writeln!(out, "{}", join(&mut m.iter().map(|v| v.to_string())));
        }
        let _ = writeln!(out, "# action maps");
        for m in &self.action_maps {
            let _ = writeln!(out, "{}", join(&mut m.iter().map(|v| v.to_string())));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut row = |want: usize, what: &str| -> Result<(usize, Vec<&str>)> {
            let (line, l) = lines.next().ok_or_else(|| Error::Parse {
                line: text.lines().count(),
                msg: format!("unexpected end of input, expected {what}"),
            })?;
            let fields: Vec<&str> = l.split_whitespace().collect();
            if fields.len() != want {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {want} fields for {what}, got {}", fields.len()),
                });
            }
            Ok((line, fields))
        };
        fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse `{s}`"),
            })
        }
        let (line, h) = row(4, "header")?;
        let (s, a, n): (usize, usize, usize) = (num(line, h[0])?, num(line, h[1])?, num(line, h[2])?);
        let gamma: f64 = num(line, h[3])?;
        let mut t = Vec::with_capacity(s * a * s);
        for _ in 0..s * a {
            let (line, f) = row(s, "a transition row")?;
            for x in f {
                t.push(num(line, x)?);
            }
        }
        let mut r = Vec::with_capacity(s * a);
        for _ in 0..s {
            let (line, f) = row(a, "a reward row")?;
            for x in f {
                r.push(num(line, x)?);
            }
        }
        let mut maps = |len: usize, what: &str| -> Result<Vec<Vec<usize>>> {
            (0..n)
                .map(|_| {
                    let (line, f) = row(len, what)?;
                    f.into_iter().map(|x| num(line, x)).collect()
                })
                .collect()
        };
        let state_maps = maps(s, "a state map")?;
        let action_maps = maps(a, "an action map")?;
        if let Some((line, _)) = lines.next() {
            return Err(Error::Parse {
                line,
                msg: "trailing content".into(),
            });
        }
        Self::new(s, a, gamma, t, r, state_maps, action_maps)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
