use loco_core::autodiff::{Graph, Tensor};
use loco_core::checkpoint::Checkpoint;
use loco_core::config::RunConfig;
use loco_core::envsim::{curriculum_update, MAX_LEVEL};
use loco_core::evalsuite::{combined_eval_metric, training_metric, EvalComponents, TrainRanges, EVAL_WEIGHTS};
use loco_core::model::{EnvDims, Model, ModelConfig};
use loco_core::ppo::compute_gae;
use loco_core::repr::{triplet_loss, triplet_loss_plain, TripletBatch, TripletConfig};
use proptest::prelude::*;

fn rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

fn components() -> impl Strategy<Value = EvalComponents> {
    (0.0f64..2.0, 0.0f64..2.0, 0.0f64..1.0).prop_map(|(lin_err, ang_err, fall_rate)| EvalComponents {
        lin_err,
        ang_err,
        fall_rate,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn triplet_loss_is_non_negative_and_matches_plain(
        (a, p, n) in (1usize..6, 1usize..5).prop_flat_map(|(r, d)| (rows(r, d), rows(r, d), rows(r, d))),
        margin in 0.01f64..1.0,
        normalize in any::<bool>(),
    ) {
        let cfg = TripletConfig { margin, normalize, ..TripletConfig::default() };
        let (r, d) = (a.len(), a[0].len());
        let mut g = Graph::<f64>::new();
        let t = |v: &[Vec<f64>]| Tensor::new(r, d, v.concat()).unwrap();
        let b = TripletBatch {
            anchors: g.constant(t(&a)),
            positives: g.constant(t(&p)),
            negatives: g.constant(t(&n)),
            anchor_agents: vec![0; r],
            negative_agents: vec![1; r],
        };
        let node = triplet_loss(&mut g, &b, &cfg).unwrap();
        let l = g.scalar_value(node);
        prop_assert!(l >= 0.0);
        let plain = triplet_loss_plain(&a, &p, &n, &cfg);
        prop_assert!((l - plain).abs() <= 1e-9 * (1.0 + plain.abs()));
    }

    #[test]
    fn combined_metric_is_permutation_invariant(ms in prop::collection::vec(components(), 1..6), rot in 0usize..6) {
        let (s, _) = combined_eval_metric(&ms).unwrap();
        let k = rot % ms.len();
        let mut rotated = ms.clone();
        rotated.rotate_left(k);
        let (sr, _) = combined_eval_metric(&rotated).unwrap();
        for i in 0..ms.len() {
            prop_assert_eq!(s[(i + k) % ms.len()].to_bits(), sr[i].to_bits());
        }
    }

    #[test]
    fn combined_metric_is_bounded_by_weight_sum(ms in prop::collection::vec(components(), 1..6)) {
        let (s, r) = combined_eval_metric(&ms).unwrap();
        let total: f64 = EVAL_WEIGHTS.iter().sum();
        for x in &s {
            prop_assert!(*x >= 0.0 && *x <= total + 1e-12);
        }
        prop_assert!(r.lin_err.0 <= r.lin_err.1);
    }

    #[test]
    fn training_metric_stays_in_unit_interval_inside_ranges(l in 0.0f64..9.0, rw in 0.0f64..1.0, len in 0.0f64..1000.0) {
        let ranges = TrainRanges { terrain_level: (0.0, 9.0), mean_reward: (0.0, 1.0), episode_length: (0.0, 1000.0) };
        let m = training_metric(l, rw, len, &ranges);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
    }

    #[test]
    fn curriculum_moves_at_most_one_level_and_stays_clamped(level in 0u32..=MAX_LEVEL, err in 0.0f64..2.0, speed in 0.0f64..2.0, fell in any::<bool>()) {
        let next = curriculum_update(level, err, speed, fell);
        prop_assert!(next <= MAX_LEVEL);
        prop_assert!(next.abs_diff(level) <= 1);
        if fell {
            prop_assert_eq!(next, level.saturating_sub(1));
        }
    }

    #[test]
    fn gae_with_zero_lambda_is_one_step_td(
        (r, v) in (1usize..40).prop_flat_map(|n| (prop::collection::vec(-2.0f64..2.0, n), prop::collection::vec(-5.0f64..5.0, n + 1))),
        gamma in 0.5f64..1.0,
    ) {
        let d = vec![false; r.len()];
        let g = compute_gae(&r, &v, &d, gamma, 0.0).unwrap();
        for t in 0..r.len() {
            prop_assert!((g.advantages[t] - (r[t] + gamma * v[t + 1] - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn override_values_reach_the_config(gamma in 0.5f64..0.999, agents in 4usize..128, seed in any::<u32>()) {
        let o = vec![format!("ppo.gamma={gamma:?}"), format!("num_agents={agents}"), format!("seed={seed}")];
        let c = RunConfig::parse("", &o).unwrap();
        prop_assert_eq!(c.ppo.gamma, gamma);
        prop_assert_eq!(c.num_agents, agents);
        prop_assert_eq!(c.seed, seed as u64);
        let again = RunConfig::parse(&c.to_toml(), &[]).unwrap();
        prop_assert_eq!(again, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), iteration in any::<u32>(), lr in 1e-6f64..1e-2) {
        let cfg = ModelConfig { recurrent_hidden: 4, latent: 4, actor_hidden: vec![8], critic_hidden: vec![8], teacher_hidden: vec![8], ..ModelConfig::default() };
        let (_, store) = Model::build::<f32>(&cfg, EnvDims::with_scan(2), seed).unwrap();
        let ck = Checkpoint { config_toml: RunConfig::parse("", &[]).unwrap().to_toml(), iteration: iteration as u64, lr, store, adam: None, runtime: None };
        let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back, ck);
    }
}
