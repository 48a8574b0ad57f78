use equirl::gmdp::{QTable, TabularGmdp};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Evaluates the greedy policy of `q` exactly by solving `(I - gamma P) V = R`
/// and returns the resulting action values.
fn linear_solve_oracle(m: &TabularGmdp, q: &QTable) -> Vec<f64> {
    let (s, a) = (m.states(), m.actions());
    let policy: Vec<usize> = (0..s).map(|st| q.argmax_set(st, 0.0)[0]).collect();
    let lhs = DMatrix::from_fn(s, s, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - m.gamma() * m.transition(i, policy[i], j)
    });
    let rhs = DVector::from_fn(s, |i, _| m.reward(i, policy[i]));
    let v = lhs.lu().solve(&rhs).expect("I - gamma P is invertible");
    let mut out = Vec::with_capacity(s * a);
    for st in 0..s {
        for ac in 0..a {
            let ev: f64 = (0..s).map(|j| m.transition(st, ac, j) * v[j]).sum();
            out.push(m.reward(st, ac) + m.gamma() * ev);
        }
    }
    out
}

#[test]
fn gridworld_value_iteration_matches_linear_solve() {
    for size in [3, 5] {
        let m = TabularGmdp::gridworld(size, 0.9).unwrap();
        let q = m.value_iteration(1e-12).unwrap();
        assert!(m.bellman_residual(&q) <= 1e-12);
        let oracle = linear_solve_oracle(&m, &q);
        let dev = q.values().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-9, "size {size}: {dev}");
    }
}

#[test]
fn gridworld_optimal_q_is_invariant() {
    let m = TabularGmdp::gridworld(3, 0.9).unwrap();
    let q = m.value_iteration(1e-12).unwrap();
    let rep = m.verify_optimal_q(&q).unwrap();
    assert!(rep.q_dev <= 1e-9 && rep.policy_equivariant, "{rep:?}");
    // A corner cell next to the goal's row/column: the two moves toward the
    // goal tie, so the argmax set has two elements.
    assert_eq!(q.argmax_set(0, 1e-9), vec![2, 3]);
}

#[test]
fn perturbed_reward_breaks_q_invariance() {
    let mut m = TabularGmdp::gridworld(3, 0.9).unwrap();
    m.set_reward(1, 2, 0.5);
    let q = m.value_iteration(1e-12).unwrap();
    assert!(m.verify_optimal_q(&q).unwrap().q_dev > 0.1);
}

#[test]
fn symmetrize_is_idempotent_on_invariant_mdps() {
    let m = TabularGmdp::gridworld(5, 0.9).unwrap();
    assert_eq!(m.symmetrize(), m);
}

#[test]
fn random_symmetrized_mdps_have_invariant_optimal_q() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (states, actions) in [(vec![4; 16], vec![4, 4]), (vec![4, 4, 2, 1, 4], vec![4, 2, 1]), (vec![4; 10], vec![4])] {
        let m = TabularGmdp::random(4, &states, &actions, 0.95, 4, &mut rng).unwrap().symmetrize();
        let q = m.value_iteration(1e-12).unwrap();
        let rep = m.verify_optimal_q(&q).unwrap();
        assert!(rep.q_dev <= 1e-9 && rep.policy_equivariant, "{rep:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn symmetrized_random_mdps_are_invariant(seed in any::<u64>(), orbits in prop::collection::vec(prop::sample::select(vec![1usize, 2, 4]), 1..8)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = TabularGmdp::random(4, &orbits, &[4, 2], 0.9, 3, &mut rng).unwrap();
        let m = raw.symmetrize();
        let rep = m.check_invariance();
        prop_assert!(rep.reward_dev <= 1e-14 && rep.transition_dev <= 1e-14, "{:?}", rep);
        for s in 0..m.states() {
            for a in 0..m.actions() {
                let sum: f64 = (0..m.states()).map(|j| m.transition(s, a, j)).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
        let twice = m.symmetrize();
        for s in 0..m.states() {
            for a in 0..m.actions() {
                prop_assert!((twice.reward(s, a) - m.reward(s, a)).abs() <= 1e-14);
            }
        }
    }
}
