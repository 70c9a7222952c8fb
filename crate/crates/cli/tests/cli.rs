use std::path::{Path, PathBuf};
use std::process::Command;

use loco_cli::commands::{self, Labeled, Progress};
use loco_cli::rundir::{Metrics, RunDir, RunInfo, CHECKPOINT_DIR, COMPLETE_FILE, CONFIG_FILE, METRICS_FILE, RUN_FILE};
use loco_core::checkpoint::Checkpoint;
use loco_core::evalsuite::{EvalDocument, Scenario};
use loco_core::nets::GroupKind;
use loco_core::trainer::IterationMetrics;

const TINY: &str = r#"
iterations = 6
checkpoint_every = 3
num_agents = 8

[env]
height_scan = 4

[model]
cell = "gru"
recurrent_hidden = 8
latent = 8
actor_hidden = [16]
critic_hidden = [16]
teacher_hidden = [16]
dynamics_hidden = [8]
velocity_hidden = [8]

[ppo]
steps_per_iteration = 8
epochs = 1
minibatches = 2
"#;

const SCENARIOS: &str = r#"
[[scenario]]
name = "id"
frictions = [0.5, 1.0]
payloads = [0.0]
command = "eval_id"
episodes = 2
episode_seconds = 0.5

[[scenario]]
name = "ood"
frictions = [0.2]
payloads = [15.0]
command = "eval_ood"
episodes = 2
episode_seconds = 0.5
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn train_tiny(root: &Path, name: &str, overrides: &[&str]) -> RunDir {
    let cfg_path = write(root, "tiny.toml", TINY);
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = commands::load_config(Some(&cfg_path), &o, Some(0)).unwrap();
    let dir = RunDir::new(root.join(name));
    commands::train(cfg, &dir, &Progress::default()).unwrap();
    dir
}

fn loco() -> Command {
    Command::new(env!("CARGO_BIN_EXE_loco"))
}

#[test]
fn training_writes_the_run_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "run", &[]);
    for f in [CONFIG_FILE, RUN_FILE, METRICS_FILE, COMPLETE_FILE] {
        assert!(dir.path.join(f).is_file(), "missing {f}");
    }
    let ckpts: Vec<u64> = dir.checkpoint_iterations().unwrap();
    assert_eq!(ckpts, vec![3, 6]);
    assert!(dir.path.join(CHECKPOINT_DIR).join("ckpt_000006.bin").is_file());
    let info: RunInfo = dir.read_info().unwrap();
    assert_eq!((info.variant.as_str(), info.seed, info.mode.as_str()), ("tar", 0, "privileged"));
    assert_eq!(info.metrics_columns, IterationMetrics::header());
    let m = Metrics::read(&dir.metrics()).unwrap();
    assert_eq!(m.header, IterationMetrics::header());
    assert_eq!(m.column("iteration").unwrap(), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    assert!(m.column("train_metric").unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn existing_run_directory_is_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "run", &[]);
    let cfg = commands::load_config(Some(&tmp.path().join("tiny.toml")), &[], Some(0)).unwrap();
    assert!(commands::train(cfg, &dir, &Progress::default()).is_err());
}

#[test]
fn resume_after_interruption_reproduces_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "run", &[]);
    let full = std::fs::read(dir.metrics()).unwrap();
    // simulate a crash after the first checkpoint
    std::fs::remove_file(dir.complete()).unwrap();
    std::fs::remove_file(dir.checkpoint(6)).unwrap();
    let c = commands::resume(&dir, &Progress::default()).unwrap();
    assert_eq!(c.final_checkpoint, "ckpt_000006.bin");
    assert_eq!(std::fs::read(dir.metrics()).unwrap(), full);
}

#[test]
fn train_or_resume_rejects_a_different_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "run", &[]);
    let cfg = commands::load_config(Some(&tmp.path().join("tiny.toml")), &[], Some(1)).unwrap();
    let err = commands::train_or_resume(cfg, &dir, &Progress::default()).unwrap_err();
    assert!(format!("{err:#}").contains("different config"));
}

#[test]
fn eval_writes_one_block_per_scenario_and_method() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_tiny(tmp.path(), "a", &[]);
    let b = train_tiny(tmp.path(), "b", &["variant=\"no_priv\""]);
    let scen = write(tmp.path(), "s.toml", SCENARIOS);
    let out = tmp.path().join("eval.json");
    let status = loco()
        .args(["eval", "--seeds", "0,1"])
        .arg("--checkpoint")
        .arg(format!("tar={}", a.checkpoint(6).display()))
        .arg("--checkpoint")
        .arg(b.checkpoint(6))
        .arg("--scenario")
        .arg(&scen)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let doc: EvalDocument = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc.methods.len(), 2);
    assert_eq!(doc.methods[0].label, "tar");
    assert!(doc.methods[1].label.ends_with("/b@ckpt_000006"), "{}", doc.methods[1].label);
    for m in &doc.methods {
        let names: Vec<&str> = m.results.iter().map(|r| r.scenario.as_str()).collect();
        assert_eq!(names, ["id", "ood"]);
        assert!(m.results.iter().all(|r| r.seeds == [0, 1] && r.episodes > 0));
    }
    assert_eq!(doc.combined.len(), 2);
    for s in &doc.combined {
        assert_eq!(s.scores.len(), 2);
        assert!(s.scores.values().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn eval_of_a_missing_checkpoint_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let scen = write(tmp.path(), "s.toml", SCENARIOS);
    let out = loco()
        .args(["eval", "--checkpoint", "/nonexistent/ckpt_000001.bin", "--scenario"])
        .arg(&scen)
        .arg("--out")
        .arg(tmp.path().join("e.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
    assert!(!tmp.path().join("e.json").exists());
}

#[test]
fn privileged_teacher_is_rejected_on_a_privilege_free_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let t = train_tiny(tmp.path(), "teacher", &["variant=\"teacher\""]);
    let mut s = Scenario::parse_file(SCENARIOS).unwrap().remove(0);
    s.privileged_inputs = false;
    let c = Labeled { label: "teacher".into(), path: t.checkpoint(6) };
    let err = commands::evaluate(&[c], &[s], &[0], 1).unwrap_err();
    assert!(format!("{err:#}").contains("privileged"), "{err:#}");
}

#[test]
fn height_scan_mismatch_names_both_widths() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_tiny(tmp.path(), "a", &[]);
    let mut s = Scenario::parse_file(SCENARIOS).unwrap().remove(0);
    s.height_scan = Some(187);
    let c = Labeled { label: "a".into(), path: a.checkpoint(6) };
    let msg = format!("{:#}", commands::evaluate(&[c], &[s], &[0], 1).unwrap_err());
    assert!(msg.contains("187") && msg.contains('4'), "{msg}");
}

#[test]
fn finetune_drops_the_teacher_and_freezes_velocity() {
    let tmp = tempfile::tempdir().unwrap();
    let src = train_tiny(tmp.path(), "src", &[]);
    let dir = RunDir::new(tmp.path().join("ft"));
    let parent = src.checkpoint(6);
    commands::finetune(&parent, None, &["iterations=3".into()], None, &dir, &Progress::default()).unwrap();
    let info = dir.read_info().unwrap();
    assert_eq!(info.mode, "privilege_free");
    assert_eq!(info.parent_checkpoint.as_deref(), Some(parent.to_str().unwrap()));
    let m = Metrics::read(&dir.metrics()).unwrap();
    assert!(m.rows.iter().all(|r| r[m.header.iter().position(|h| h == "mode").unwrap()] == "privilege_free"));
    let before = Checkpoint::<commands::Float>::load(&parent).unwrap();
    let after = Checkpoint::<commands::Float>::load(&dir.final_checkpoint().unwrap()).unwrap();
    assert!(!after.store.has_group(GroupKind::Teacher));
    assert_eq!(before.store.group(GroupKind::Velocity), after.store.group(GroupKind::Velocity));
    assert_ne!(before.store.group(GroupKind::Actor), after.store.group(GroupKind::Actor));
}

#[test]
fn finetune_rejects_unsuitable_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let pf = train_tiny(tmp.path(), "pf", &["variant=\"no_priv\"", "mode=\"privilege_free\""]);
    let teacher = train_tiny(tmp.path(), "teacher", &["variant=\"teacher\""]);
    for src in [pf, teacher] {
        let dir = RunDir::new(tmp.path().join("ft"));
        assert!(commands::finetune(&src.checkpoint(6), None, &[], None, &dir, &Progress::default()).is_err());
        assert!(!dir.path.exists());
    }
}

#[test]
fn latent_export_writes_one_row_per_agent_step() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_tiny(tmp.path(), "a", &[]);
    let sweep = write(tmp.path(), "sweep.toml", "[sweep]\npayload = [0.0, 5.0]\nagents = 3\nsteps = 7\n");
    let out = tmp.path().join("z.csv");
    let st = loco()
        .arg("export-latents")
        .arg("--checkpoint")
        .arg(a.checkpoint(6))
        .arg("--sweep")
        .arg(&sweep)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let mut r = csv::Reader::from_path(&out).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..4], ["timestep", "agent", "payload", "phase"]);
    assert_eq!(header.len(), 4 + 8);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 3 * 7);
    let payloads: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.get(2).unwrap()).collect();
    assert_eq!(payloads.len(), 2);
}

#[test]
fn multi_factor_sweep_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_tiny(tmp.path(), "a", &[]);
    let sweep = write(tmp.path(), "sweep.toml", "[sweep]\npayload = [0.0]\nfriction = [1.0]\n");
    let out = loco()
        .arg("export-latents")
        .arg("--checkpoint")
        .arg(a.checkpoint(6))
        .arg("--sweep")
        .arg(&sweep)
        .arg("--out")
        .arg(tmp.path().join("z.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_train_honours_out_and_prints_final_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    let out = loco()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--override", "iterations=3", "--seed", "4", "--log-every", "0", "--out"])
        .arg(tmp.path().join("r"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let printed = String::from_utf8(out.stdout).unwrap();
    assert!(printed.trim().ends_with("ckpt_000003.bin"));
    assert_eq!(RunDir::new(tmp.path().join("r")).read_info().unwrap().seed, 4);
}

#[test]
fn finetune_with_a_privileged_strategy_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let src = train_tiny(tmp.path(), "src", &[]);
    let dir = RunDir::new(tmp.path().join("ft"));
    let o = vec!["triplet.strategy=\"teacher_anchored\"".to_string()];
    let err = commands::finetune(&src.checkpoint(6), None, &o, None, &dir, &Progress::default()).unwrap_err();
    assert!(format!("{err:#}").contains("privilege_free"), "{err:#}");
}

#[test]
fn invalid_overrides_fail_before_creating_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "tiny.toml", TINY);
    for bad in ["ppo.no_such_key=1", "ppo.gamma=\"high\"", "variant=\"unknown\"", "num_agents"] {
        let out = loco()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .args(["--override", bad, "--out"])
            .arg(tmp.path().join("r"))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1), "{bad}");
        assert!(!tmp.path().join("r").exists(), "{bad}");
    }
}

#[test]
fn logged_training_metric_is_recomputable_from_run_json() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train_tiny(tmp.path(), "run", &[]);
    let info = dir.read_info().unwrap();
    let m = Metrics::read(&dir.metrics()).unwrap();
    let (lv, rw, len, logged) = (
        m.column("terrain_level").unwrap(),
        m.column("mean_reward").unwrap(),
        m.column("episode_length").unwrap(),
        m.column("train_metric").unwrap(),
    );
    let r = info.train_metric_ranges;
    let mm = |x: f64, (lo, hi): (f64, f64)| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
    let w = info.train_metric_weights;
    assert_eq!(w, [0.25, 0.6, 0.15]);
    for i in 0..logged.len() {
        let x =
            w[0] * mm(lv[i], r.terrain_level) + w[1] * mm(rw[i], r.mean_reward) + w[2] * mm(len[i], r.episode_length);
        assert!((x - logged[i]).abs() < 1e-9, "row {i}: {x} vs {}", logged[i]);
    }
}
