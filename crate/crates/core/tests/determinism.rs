use loco_core::model::Mode;
use loco_core::verify::{determinism, resume_determinism, tiny_run_config};

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = tiny_run_config(Mode::Privileged).unwrap();
    let c = determinism::<f32>(&cfg, 50).unwrap();
    assert!(c.identical(), "{c:?}");
}

#[test]
fn different_seeds_diverge() {
    let a = tiny_run_config(Mode::Privileged).unwrap();
    let b = loco_core::config::RunConfig { seed: a.seed + 1, ..a.clone() };
    let mut ta = loco_core::trainer::Trainer::<f32>::new(a).unwrap();
    let mut tb = loco_core::trainer::Trainer::<f32>::new(b).unwrap();
    assert_ne!(ta.train_iteration().unwrap().row(), tb.train_iteration().unwrap().row());
}

#[test]
fn resuming_from_checkpoint_bytes_continues_identically() {
    let cfg = tiny_run_config(Mode::Privileged).unwrap();
    let c = resume_determinism::<f32>(&cfg, 7, 8).unwrap();
    assert!(c.identical(), "{c:?}");
}
