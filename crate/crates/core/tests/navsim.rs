use edgenav::navsim::{
    observe, reward_fn, state_vector, success, transition, Action, EnvConfig, EnvState, Events, NavEnv, Observer,
    RewardParts, STATE_DIM,
};
use edgenav::scenegen::WorldBox;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn goal_at(x: f64, y: f64) -> WorldBox {
    WorldBox { class_id: 1, x, y, size: 0.8 }
}

fn state(x: f64, y: f64, heading: f64, boxes: Vec<WorldBox>) -> EnvState {
    let mut s = EnvState {
        x,
        y,
        heading,
        boxes,
        goal_class: 1,
        step_count: 0,
        last_action: None,
        prev_goal_distance: 0.0,
        goal_seen_before: false,
        done: false,
    };
    s.prev_goal_distance = s.goal_distance();
    s
}

#[test]
fn reset_is_deterministic() {
    let a = NavEnv::new(EnvConfig::default(), 9).unwrap();
    let b = NavEnv::new(EnvConfig::default(), 9).unwrap();
    assert_eq!(a.state, b.state);
}

#[test]
fn goals_are_uniform_and_layouts_valid() {
    let cfg = EnvConfig::default();
    let mut env = NavEnv::new(cfg.clone(), 1).unwrap();
    let mut counts = [0usize; 3];
    let n = 10_000;
    for _ in 0..n {
        env.reset(&Observer::Oracle).unwrap();
        let s = &env.state;
        counts[s.goal_class] += 1;
        assert_eq!(s.boxes.len(), 3);
        assert!(s.x > 0.0 && s.x < cfg.room.width && s.y > 0.0 && s.y < cfg.room.depth);
        for (i, a) in s.boxes.iter().enumerate() {
            assert!(a.x - a.size / 2.0 > 0.0 && a.x + a.size / 2.0 < cfg.room.width);
            for b in &s.boxes[i + 1..] {
                assert!((a.x - b.x).hypot(a.y - b.y) >= a.size);
            }
        }
        assert!(!success(s, cfg.reach));
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn reaching_goal_pays_terminal_bonus() {
    let cfg = EnvConfig::default();
    let mut s = state(5.0, 5.0, 0.0, vec![goal_at(5.8, 5.0)]);
    s.goal_seen_before = true;
    let (next, parts, ev) = transition(&s, Action::Forward, &cfg).unwrap();
    assert!(ev.reached_goal && next.done);
    assert_eq!(parts.goal, 10.0);
    let want = 10.0 + -0.01 + 0.5 * (0.8 - next.goal_distance());
    assert_eq!(parts.total(), want);
    assert!(parts.total() >= 9.9);
}

#[test]
fn left_then_right_is_penalized() {
    let cfg = EnvConfig::default();
    let s = state(2.0, 2.0, 0.0, vec![goal_at(8.0, 8.0)]);
    let (s1, p1, _) = transition(&s, Action::Left, &cfg).unwrap();
    assert_eq!(p1.opposite_turn, 0.0);
    let (_, p2, _) = transition(&s1, Action::Right, &cfg).unwrap();
    assert_eq!(p2.opposite_turn, -0.05);
    let (_, p3, _) = transition(&s1, Action::Left, &cfg).unwrap();
    assert_eq!(p3.opposite_turn, 0.0);
}

#[test]
fn halving_distance_earns_one() {
    let cfg = EnvConfig { stride: 2.0, ..EnvConfig::default() };
    let mut s = state(2.0, 5.0, 0.0, vec![goal_at(6.0, 5.0)]);
    s.goal_seen_before = true;
    let (next, parts, _) = transition(&s, Action::Forward, &cfg).unwrap();
    assert_eq!(next.goal_distance(), 2.0);
    assert_eq!(parts.distance, 1.0);
    assert_eq!(parts.total(), 1.0 - 0.01);
}

#[test]
fn wall_collision_penalizes_and_ends() {
    let cfg = EnvConfig::default();
    let s = state(9.75, 5.0, 0.0, vec![goal_at(2.0, 2.0)]);
    let (next, parts, ev) = transition(&s, Action::Forward, &cfg).unwrap();
    assert!(ev.collision && next.done);
    assert_eq!(parts.failure, -2.0);
    assert_eq!(next.x, cfg.room.width - cfg.agent_radius);
    let lenient = EnvConfig { collision_terminates: false, ..cfg };
    let (next, parts, _) = transition(&s, Action::Forward, &lenient).unwrap();
    assert!(!next.done);
    assert_eq!(parts.failure, -2.0);
}

#[test]
fn wrong_box_ends_episode() {
    let cfg = EnvConfig::default();
    let other = WorldBox { class_id: 0, x: 5.7, y: 5.0, size: 0.8 };
    let s = state(5.0, 5.0, 0.0, vec![goal_at(2.0, 8.0), other]);
    let (next, parts, ev) = transition(&s, Action::Forward, &cfg).unwrap();
    assert!(ev.wrong_goal && !ev.reached_goal && next.done);
    assert_eq!(parts.failure, -2.0);
    assert_eq!(parts.goal, 0.0);
}

#[test]
fn step_after_done_is_an_error() {
    let mut s = state(5.0, 5.0, 0.0, vec![goal_at(8.0, 8.0)]);
    s.done = true;
    assert!(transition(&s, Action::Left, &EnvConfig::default()).is_err());
}

#[test]
fn stationary_turn_without_goal_in_sight() {
    let base = Events {
        action: Action::Left,
        last_action: None,
        reached_goal: false,
        wrong_goal: false,
        collision: false,
        goal_in_view: false,
        first_sight: false,
        d_prev: 3.0,
        d_curr: 3.0,
    };
    assert_eq!(reward_fn(&base).total(), -0.01 + 0.005);
    let opp = Events { last_action: Some(Action::Right), ..base };
    assert_eq!(reward_fn(&opp).total(), -0.01 + -0.05 + 0.005);
    let blocked = Events { action: Action::Forward, ..base };
    assert_eq!(reward_fn(&blocked).distance, 0.0);
    assert_eq!(reward_fn(&blocked).total(), -0.01 + 0.01);
}

#[test]
fn first_sight_paid_once() {
    let cfg = EnvConfig::default();
    // Goal straight behind; two 90 degree turns bring it into view.
    let s = state(5.0, 5.0, 0.0, vec![goal_at(2.0, 5.0)]);
    assert!(!s.goal_in_view());
    let cfg90 = EnvConfig { turn_deg: 90.0, ..cfg };
    let (s1, p1, _) = transition(&s, Action::Left, &cfg90).unwrap();
    assert_eq!((p1.first_sight, p1.explore), (0.0, 0.005));
    let (s2, p2, _) = transition(&s1, Action::Left, &cfg90).unwrap();
    assert_eq!((p2.first_sight, p2.explore), (0.1, 0.0));
    let (_, p3, _) = transition(&s2, Action::Forward, &cfg90).unwrap();
    assert_eq!(p3.first_sight, 0.0);
}

#[test]
fn oracle_observation_layout() {
    let cfg = EnvConfig::default();
    let s = state(5.0, 5.0, 0.0, vec![goal_at(8.0, 5.0), WorldBox { class_id: 2, x: 2.0, y: 5.0, size: 0.8 }]);
    let obs = observe(&s, &Observer::Oracle, &cfg).unwrap();
    let v = &obs.state_vector;
    assert_eq!(v.len(), STATE_DIM);
    assert_eq!(STATE_DIM, 18);
    // Class 2 is behind the agent, class 0 absent.
    assert_eq!(&v[8..12], &[0.0; 4]);
    assert_eq!(&v[0..4], &[0.0; 4]);
    assert_eq!(&v[12..15], &[0.0, 1.0, 0.0]);
    assert_eq!(&v[15..18], &[0.0; 3]);
    let k = 2.0 * (75f64.to_radians() / 2.0).tan();
    let near = 3.0 - 0.4;
    let want = [0.5 - 0.4 / (near * k), 0.5 - 0.2 / (near * k), 0.5 + 0.4 / (near * k), 0.5 + 0.6 / (near * k)];
    for (a, b) in v[4..8].iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(state_vector(&[None; 3], 0, Some(Action::Forward))[15..], [0.0, 0.0, 1.0]);
}

#[test]
fn success_is_strict() {
    let s = state(5.0, 5.0, 0.0, vec![goal_at(5.0, 5.0)]);
    assert!(success(&s, 0.6));
    let s = state(5.0, 5.0, 0.0, vec![goal_at(5.5, 5.0)]);
    assert!(!success(&s, 0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (ax, ay, gx, gy) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        let s = state(ax, ay, 0.0, vec![goal_at(gx, gy)]);
        let d = ((ax - gx).powi(2) + (ay - gy).powi(2)).sqrt();
        assert_eq!(success(&s, 1.5), d < 1.5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn episodes_are_deterministic_and_consistent(seed in any::<u64>(), actions in prop::collection::vec(0usize..3, 1..300)) {
        let run = || {
            let mut env = NavEnv::new(EnvConfig::with_objects(3), seed).unwrap();
            let goal = env.state.goal_class;
            let mut out: Vec<(f64, RewardParts, Vec<f64>)> = Vec::new();
            for &a in &actions {
                let r = env.step(Action::from_index(a).unwrap(), &Observer::Oracle).unwrap();
                let p = r.parts;
                // Emitted reward is the row-ordered component sum.
                let sum = p.goal + p.failure + p.step + p.opposite_turn + p.distance + p.first_sight + p.explore;
                assert_eq!(r.reward, sum);
                assert_eq!(r.observation.state_vector[12 + goal], 1.0);
                assert_eq!(r.observation.state_vector[12..15].iter().sum::<f64>(), 1.0);
                out.push((r.reward, p, r.observation.state_vector));
                if r.done {
                    break;
                }
            }
            out
        };
        prop_assert_eq!(run(), run());
    }
}
