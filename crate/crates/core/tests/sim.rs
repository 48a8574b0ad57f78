use equirl::group::{act_on_feature_map, GroupElement, Rotation};
use equirl::sim::{
    expert_action, rollout, rotate_state, rotate_state_by, Action, DiscreteAction, Sim, SimConfig, Task, WorldState,
    CONTINUOUS_THETA, CONTINUOUS_XY, CONTINUOUS_Z,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sim() -> Sim {
    Sim::new(SimConfig::default()).unwrap()
}

fn random_action(rng: &mut ChaCha8Rng) -> Action {
    if rng.random_bool(0.5) {
        DiscreteAction::from_flat(rng.random_range(0..162)).unwrap().to_action()
    } else {
        Action::new(
            rng.random_range(0.0..1.0),
            rng.random_range(-CONTINUOUS_XY..CONTINUOUS_XY),
            rng.random_range(-CONTINUOUS_XY..CONTINUOUS_XY),
            rng.random_range(-CONTINUOUS_Z..CONTINUOUS_Z),
            rng.random_range(-CONTINUOUS_THETA..CONTINUOUS_THETA),
        )
    }
}

/// A reachable state: a reset followed by a mix of expert and random steps.
fn random_state(sim: &Sim, rng: &mut ChaCha8Rng) -> WorldState {
    let task = Task::ALL[rng.random_range(0..3)];
    let mut s = sim.reset(task, rng.random());
    for _ in 0..rng.random_range(0..30) {
        let a = if rng.random_bool(0.6) { expert_action(&s) } else { random_action(rng) };
        let out = sim.step(&s, &a);
        if out.done {
            break;
        }
        s = out.state;
    }
    s
}

#[test]
fn step_is_equivariant_and_reward_invariant() {
    let sim = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = random_state(&sim, &mut rng);
        let a = random_action(&mut rng);
        let g = GroupElement::new(4, rng.random_range(0..4)).unwrap();
        let r = g.rotation();
        let direct = sim.step(&s, &a);
        let moved = sim.step(&rotate_state(&r, &s), &a.rotated(&r));
        worst = worst.max(rotate_state(&r, &direct.state).relative_deviation(&moved.state));
        assert_eq!((direct.reward, direct.done), (moved.reward, moved.done));
    }
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn step_commutes_with_translation() {
    let sim = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let s = random_state(&sim, &mut rng);
        let a = random_action(&mut rng);
        let direct = sim.step(&s, &a);
        let shifted = sim.step(&s.centred(), &a);
        assert!(direct.state.centred().max_deviation(&shifted.state.centred()) <= 1e-12);
        assert_eq!(direct.reward, shifted.reward);
    }
}

#[test]
fn observation_is_equivariant() {
    let sim = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let s = random_state(&sim, &mut rng);
        let g = GroupElement::new(4, rng.random_range(0..4)).unwrap();
        let obs = sim.render(&s, 4).unwrap();
        let lhs = sim.render(&rotate_state_by(&g, &s), 4).unwrap();
        let rhs = act_on_feature_map(obs.field(), &g, &obs).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }
}

#[test]
fn rotate_state_is_a_group_action() {
    let sim = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let s = random_state(&sim, &mut rng);
        assert_eq!(rotate_state(&Rotation::identity(), &s), s);
        let half = Rotation::quarter_turns(2);
        assert!(rotate_state(&half, &rotate_state(&half, &s)).max_deviation(&s) <= 1e-12);
        for (a, b) in [(0.3, 1.1), (1.0, -2.5)] {
            let two = rotate_state(&Rotation::from_angle(a), &rotate_state(&Rotation::from_angle(b), &s));
            let one = rotate_state(&Rotation::from_angle(a + b), &s);
            assert!(two.max_deviation(&one) <= 1e-12);
        }
        for g1 in GroupElement::elements(4) {
            for g2 in GroupElement::elements(4) {
                let two = rotate_state_by(&g1, &rotate_state_by(&g2, &s));
                let one = rotate_state_by(&g1.compose(&g2).unwrap(), &s);
                assert!(two.max_deviation(&one) <= 1e-12);
            }
        }
    }
}

#[test]
fn resets_are_deterministic_and_in_bounds() {
    let sim = sim();
    for task in Task::ALL {
        assert_eq!(sim.reset(task, 42), sim.reset(task, 42));
    }
    for seed in 0..1000 {
        let task = Task::ALL[seed as usize % 3];
        let s = sim.reset(task, seed);
        assert!(s.within_bounds());
        let expected = if task == Task::Pick { 1 } else { 2 };
        assert_eq!(s.objects.len(), expected);
    }
}

#[test]
fn states_stay_in_bounds() {
    let sim = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..300 {
        assert!(random_state(&sim, &mut rng).within_bounds());
    }
}

#[test]
fn expert_is_equivariant() {
    let sim = sim();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let s = random_state(&sim, &mut rng);
        let g = GroupElement::new(4, rng.random_range(0..4)).unwrap();
        let r = g.rotation();
        let lhs = expert_action(&rotate_state(&r, &s)).to_vec();
        let rhs = expert_action(&s).rotated(&r).to_vec();
        let dev = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev <= 1e-9, "{dev}");
    }
}

#[test]
fn expert_heads_for_a_distant_object_at_full_speed() {
    let sim = sim();
    let mut s = sim.reset(Task::Pick, 8);
    s.gripper.x = s.objects[0].x - 0.15;
    s.gripper.y = s.objects[0].y + 0.05;
    let a = expert_action(&s);
    assert!((a.xy[0] - CONTINUOUS_XY).abs() < 1e-15);
    assert!((a.xy[1] + CONTINUOUS_XY / 3.0).abs() < 1e-15);
}

fn success_rate(task: Task, discrete: bool) -> f64 {
    let sim = sim();
    let wins = (0..200u64)
        .filter(|&seed| {
            let steps = rollout(&sim, task, seed, |s| {
                let a = expert_action(s);
                if discrete {
                    DiscreteAction::nearest(&a).to_action()
                } else {
                    a
                }
            });
            steps.last().unwrap().reward == 1.0
        })
        .count();
    wins as f64 / 200.0
}

#[test]
fn expert_succeeds_on_every_task() {
    for task in Task::ALL {
        for discrete in [false, true] {
            let rate = success_rate(task, discrete);
            println!("{task} discrete={discrete}: {rate}");
            assert!(rate >= 0.95, "{task} discrete={discrete}: {rate}");
        }
    }
}
