use loco_core::autodiff::{Graph, Tensor};
use loco_core::repr::{sample_cross_agent, triplet_loss, triplet_loss_plain, TripletBatch, TripletConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn raw() -> TripletConfig {
    TripletConfig { normalize: false, ..TripletConfig::default() }
}

fn graph_loss(a: &[f64], p: &[f64], n: &[f64], cfg: &TripletConfig) -> f64 {
    let d = a.len();
    let mut g = Graph::<f64>::new();
    let t = |v: &[f64]| Tensor::new(1, d, v.to_vec()).unwrap();
    let (an, pn, nn) = (g.constant(t(a)), g.constant(t(p)), g.constant(t(n)));
    let b =
        TripletBatch { anchors: an, positives: pn, negatives: nn, anchor_agents: vec![0], negative_agents: vec![1] };
    let l = triplet_loss(&mut g, &b, cfg).unwrap();
    g.scalar_value(l)
}

#[test]
fn margin_satisfied_gives_zero() {
    let l = graph_loss(&[0.0, 0.0], &[0.0, 0.0], &[0.5, 0.0], &raw());
    assert_eq!(l, 0.0);
}

#[test]
fn hinge_at_margin_gives_alpha() {
    let cfg = TripletConfig::default();
    assert_eq!(graph_loss(&[0.3, -0.4], &[0.3, -0.4], &[0.3, -0.4], &cfg), cfg.margin);
    assert_eq!(graph_loss(&[0.3, -0.4], &[0.3, -0.4], &[0.3, -0.4], &raw()), 0.2);
}

#[test]
fn worked_example_gives_point_nineteen() {
    // 0 - 0.01 + 0.2
    let l = graph_loss(&[0.0, 0.0], &[0.0, 0.0], &[0.1, 0.0], &raw());
    assert!((l - 0.19).abs() < 1e-15, "{l}");
    let plain = triplet_loss_plain(&[vec![0.0, 0.0]], &[vec![0.0, 0.0]], &[vec![0.1, 0.0]], &raw());
    assert!((plain - 0.19).abs() < 1e-15);
}

#[test]
fn cross_agent_sampler_never_returns_anchor_agent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let agents = 64;
    let mut seen = vec![0usize; agents];
    for i in 0..1_000_000usize {
        let anchor = i % agents;
        let s = sample_cross_agent(&mut rng, agents, 24, anchor).unwrap();
        assert_ne!(s.agent, anchor);
        assert!(s.step < 24);
        seen[s.agent] += 1;
    }
    assert!(seen.iter().all(|&c| c > 0));
}

#[test]
fn cross_agent_sampler_needs_two_agents() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(sample_cross_agent(&mut rng, 1, 24, 0).is_err());
    assert_eq!(sample_cross_agent(&mut rng, 2, 1, 1).unwrap().agent, 0);
}
