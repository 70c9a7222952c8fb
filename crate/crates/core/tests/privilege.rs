use loco_core::model::Mode;
use loco_core::verify::{privilege_independence, tiny_run_config};

#[test]
fn flipped_privileged_bits_change_nothing_in_privilege_free_mode() {
    let cfg = tiny_run_config(Mode::PrivilegeFree).unwrap();
    let c = privilege_independence::<f64>(&cfg, 10).unwrap();
    assert!(c.identical(), "{c:?}");
}

#[test]
fn canary_check_rejects_privileged_mode() {
    let cfg = tiny_run_config(Mode::Privileged).unwrap();
    assert!(privilege_independence::<f64>(&cfg, 1).is_err());
}

#[test]
fn canary_is_visible_when_privileged_channels_are_read() {
    let cfg = tiny_run_config(Mode::Privileged).unwrap();
    let mut a = loco_core::trainer::Trainer::<f64>::new(cfg.clone()).unwrap();
    let mut b = loco_core::trainer::Trainer::<f64>::new(cfg).unwrap();
    b.privileged_canary = true;
    let (ra, rb) = (a.train_iteration().unwrap().row(), b.train_iteration().unwrap().row());
    assert_ne!(ra, rb);
}
