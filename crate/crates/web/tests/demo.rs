use loco_web::{eval_weights, gae, scores, triplet};

#[test]
fn triplet_examples() {
    let t = triplet(&[0.0, 0.0], &[0.0, 0.0], &[0.1, 0.0], 0.2, false).unwrap();
    assert!((t.loss - 0.19).abs() < 1e-15);
    assert!((t.anchor_negative - 0.01).abs() < 1e-15);
    assert_eq!(t.anchor_positive, 0.0);
    let far = triplet(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 0.0], 0.2, false).unwrap();
    assert_eq!(far.loss, 0.0);
    let same = triplet(&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8], 0.2, true).unwrap();
    assert_eq!(same.loss, 0.2);
}

#[test]
fn triplet_rejects_bad_input() {
    assert!(triplet(&[0.0], &[0.0, 1.0], &[0.0], 0.2, true).is_err());
    assert!(triplet(&[], &[], &[], 0.2, true).is_err());
    assert!(triplet(&[1.0], &[1.0], &[1.0], 0.0, true).is_err());
}

#[test]
fn gae_returns_advantages_then_returns() {
    let out = gae(&[1.0, 1.0], &[0.5, 0.5, 2.0], &[0, 0], 0.9, 0.5).unwrap();
    assert_eq!(out.len(), 4);
    assert!((out[0] - 1.985).abs() < 1e-12);
    assert!((out[1] - 2.3).abs() < 1e-12);
    assert!((out[2] - 2.485).abs() < 1e-12);
    assert!(gae(&[1.0], &[0.0], &[0], 0.9, 0.5).is_err());
    assert!(gae(&[1.0], &[0.0, 0.0], &[0], 1.5, 0.5).is_err());
}

#[test]
fn scores_are_weighted_min_max() {
    let s = scores(&[0.1, 0.3], &[0.2, 0.1], &[0.0, 0.5]).unwrap();
    let w = eval_weights();
    assert!((s[0] - w[1]).abs() < 1e-12);
    assert!((s[1] - (w[0] + w[2])).abs() < 1e-12);
    assert!(scores(&[0.1], &[], &[]).is_err());
}
