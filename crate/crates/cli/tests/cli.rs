use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mdscore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdscore")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn frame_count(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| l.starts_with("t=")).count()
}

fn check(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_writes_start_plus_one_frame_per_step() {
    let dir = tempfile::tempdir().unwrap();
    check(&mdscore(&["simulate", "--fixture", "harmonic_3d", "--steps", "100", "--out", s(dir.path())]));
    let xyz = dir.path().join("trajectory.xyz");
    assert_eq!(frame_count(&xyz), 101);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("trajectory.json")).unwrap()).unwrap();
    assert_eq!(meta["frames"], 101);
    assert_eq!(meta["energy"]["total"].as_array().unwrap().len(), 101);
    assert!(meta["energy"]["relative_drift"].as_f64().unwrap() < 1e-5);
    assert!(dir.path().join("simulate.resolved.toml").exists());

    let one = dir.path().join("one");
    check(&mdscore(&["simulate", "--fixture", "harmonic_3d", "--steps", "1", "--out", s(&one)]));
    assert_eq!(frame_count(&one.join("trajectory.xyz")), 2);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    check(&mdscore(&["simulate", "--fixture", "lj_trimer", "--steps", "50", "--temperature", "0.05", "--seed", "4", "--out", s(&a)]));
    let resolved = a.join("simulate.resolved.toml");
    let b = dir.path().join("b");
    check(&mdscore(&["simulate", "--config", s(&resolved), "--out", s(&b)]));
    assert_eq!(std::fs::read(a.join("trajectory.xyz")).unwrap(), std::fs::read(b.join("trajectory.xyz")).unwrap());
}

#[test]
fn bad_inputs_exit_with_code_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let r = mdscore(&["simulate", "--fixture", "no_such_fixture", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let r = mdscore(&["train", "--data", s(&dir.path().join("missing.xyz")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[simulate]\nstepz = 4\n").unwrap();
    assert_eq!(mdscore(&["simulate", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(mdscore(&["frobnicate"]).status.code(), Some(2));

    let junk = dir.path().join("junk.mdsc");
    std::fs::write(&junk, b"MDSCjunk").unwrap();
    let traj = dir.path().join("t");
    check(&mdscore(&["simulate", "--fixture", "harmonic_3d", "--steps", "3", "--out", s(&traj)]));
    let r = mdscore(&["generate", "--checkpoint", s(&junk), "--start", s(&traj.join("trajectory.xyz")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn unstable_integration_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[simulate]\nfixture = \"harmonic_3d\"\nsteps = 2000\ndt = 10.0\n").unwrap();
    let r = mdscore(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
}

fn write_xyz(path: &Path, frames: &[&[[f64; 3]]]) {
    let mut text = String::new();
    for (t, f) in frames.iter().enumerate() {
        text.push_str(&format!("{}\nt={t} dt=1\n", f.len()));
        for p in *f {
            text.push_str(&format!("C {} {} {}\n", p[0], p[1], p[2]));
        }
    }
    std::fs::write(path, text).unwrap();
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("evaluation.json")).unwrap()).unwrap()
}

#[test]
fn evaluate_hand_cases() {
    let dir = tempfile::tempdir().unwrap();
    let (g, r) = (dir.path().join("g.xyz"), dir.path().join("r.xyz"));
    write_xyz(&g, &[&[[3.0, 0.0, 0.0]], &[[0.0, 4.0, 0.0]]]);
    write_xyz(&r, &[&[[0.0, 0.0, 0.0]], &[[0.0, 0.0, 0.0]]]);
    let csv = dir.path().join("errors.csv");
    check(&mdscore(&["evaluate", s(&g), s(&r), "--t1", "0", "--tn", "1", "--dump-csv", s(&csv), "--out", s(dir.path())]));
    let rep = report(dir.path());
    assert!((rep["armse"].as_f64().unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
    assert!(rep["copy_previous_armse"].is_null());
    assert_eq!(rep["copy_start_armse"], 0.0);
    let rows: Vec<String> = std::fs::read_to_string(&csv).unwrap().lines().map(String::from).collect();
    assert_eq!(rows, ["frame,model,copy_previous,copy_start", "0,3,,0", "1,4,,0"]);

    // identical trajectories, with Kabsch alignment requested
    write_xyz(&g, &[&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], &[[0.1, 0.0, 0.0], [1.0, 0.2, 0.0]]]);
    let out = dir.path().join("same");
    check(&mdscore(&["evaluate", s(&g), s(&g), "--kabsch", "--out", s(&out)]));
    let rep = report(&out);
    assert_eq!(rep["armse"], 0.0);
    assert!(rep["kabsch_armse"].as_f64().unwrap() < 1e-12);
    assert_eq!(rep["t1"], 1);

    // roster mismatch
    write_xyz(&r, &[&[[0.0, 0.0, 0.0]], &[[0.0, 0.0, 0.0]]]);
    assert_eq!(mdscore(&["evaluate", s(&g), s(&r), "--out", s(&out)]).status.code(), Some(2));
}

const TINY: &str = r#"
[train]
n_train = 30
n_holdout = 10

[train.model]
layers = 1
heads = 2
feature_dim = 8
attention_dim = 8
ffn_hidden = 8
velocity_hidden = 8
time_dim = 4
dropout = 0.1

[train.model.basis]
n_deg = 2
n_root = 2
n_ord = 2
cutoff = 3.0

[train.optim]
epochs = 3
batch = 8
eval_every = 1

[generate.sampler]
n_predictor = 5
"#;

fn files(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| std::fs::read(dir.join(n)).unwrap()).collect()
}

#[test]
fn train_and_generate_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    check(&mdscore(&[
        "simulate", "--fixture", "lj_trimer", "--steps", "800", "--record-every", "20", "--temperature", "0.05", "--out", s(&data),
    ]));
    let traj = data.join("trajectory.xyz");
    let run = |name: &str| -> PathBuf {
        let out = dir.path().join(name);
        check(&mdscore(&["train", "--config", s(&cfg), "--data", s(&traj), "--out", s(&out)]));
        out
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(files(&a, &["history.jsonl", "model.mdsc"]), files(&b, &["history.jsonl", "model.mdsc"]));
    assert_eq!(std::fs::read_to_string(a.join("history.jsonl")).unwrap().lines().count(), 3);

    let ckpt = a.join("model.mdsc");
    let gen = |name: &str, mode: &str, frames: &str| -> PathBuf {
        let out = dir.path().join(name);
        check(&mdscore(&[
            "generate", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--start", s(&traj), "--start-frame", "30",
            "--frames", frames, "--mode", mode, "--out", s(&out),
        ]));
        out.join("generated.xyz")
    };
    let (o1, o2) = (gen("o1", "ode", "4"), gen("o2", "ode", "4"));
    assert_eq!(std::fs::read(&o1).unwrap(), std::fs::read(&o2).unwrap());
    assert_eq!(frame_count(&o1), 31 + 4);
    let (p1, p2) = (gen("p1", "pc", "4"), gen("p2", "pc", "4"));
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(frame_count(&gen("single", "ode", "1")), 31 + 1);

    let ev = dir.path().join("ev");
    check(&mdscore(&["evaluate", s(&o1), s(&traj), "--out", s(&ev)]));
    let rep = report(&ev);
    assert_eq!(rep["t1"], 31);
    assert_eq!(rep["tn"], 34);
    assert!(rep["armse"].as_f64().unwrap().is_finite());
}
