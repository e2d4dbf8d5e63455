use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 3
expect = "benign"

[data]
d = 64
mu_norm = 0.4
nu_norm = 0.35
sigma_p = 0.1
p_e = 0.4
p_h = 0.3
p_b = 0.3

[weak]
n = 200
eta = 0.1
batch_size = 32
epochs = 20

[strong]
n = 100
m = 4
sigma_0 = 0.01
eta = 0.1
batch_size = 32
epochs = 30

[eval]
n_snapshot = 1000
n_final = 5000
snapshot_every = 5

[sweep]
n_st = [20, 60, 100]
replicates = 2
n_eval_hard = 2000
"#;

fn w2s(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_w2s"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn w2s")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("tiny.toml"), TINY).unwrap();
    tmp
}

#[test]
fn completed_stages_need_force() {
    let tmp = setup();
    let p = tmp.path();
    assert_eq!(
        code(&w2s(
            &["gen-data", "--config", "tiny.toml", "--out", "r"],
            p
        )),
        0
    );
    let again = w2s(&["gen-data", "--config", "tiny.toml", "--out", "r"], p);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(
        code(&w2s(
            &["gen-data", "--config", "tiny.toml", "--out", "r", "--force"],
            p
        )),
        0
    );
}

#[test]
fn staged_and_end_to_end_runs_agree() {
    let tmp = setup();
    let p = tmp.path();
    for cmd in ["gen-data", "train-weak", "pseudo-label", "train-strong"] {
        let o = w2s(&[cmd, "--config", "tiny.toml", "--out", "staged"], p);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // Resumes from the completed stages.
    assert_eq!(code(&w2s(&["w2s", "--out", "staged"], p)), 0);
    assert_eq!(
        code(&w2s(&["w2s", "--config", "tiny.toml", "--out", "whole"], p)),
        0
    );
    for f in [
        "weak_model.bin",
        "strong_model.bin",
        "strong_records.csv",
        "pseudo_data.csv",
        "summary.json",
    ] {
        let a = fs::read(p.join("staged").join(f)).unwrap();
        let b = fs::read(p.join("whole").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("whole/manifest.json")).unwrap()).unwrap();
    for stage in ["data", "weak", "pseudo", "strong", "report"] {
        let s = &manifest["stages"][stage];
        assert_eq!(s["complete"], true, "{stage}");
        for a in s["artifacts"].as_array().unwrap() {
            assert_eq!(a["sha256"].as_str().unwrap().len(), 64);
            assert!(p.join("whole").join(a["file"].as_str().unwrap()).exists());
        }
    }

    let rep = w2s(&["report", "--in", "whole"], p);
    assert_eq!(code(&rep), 0);
    let text = String::from_utf8_lossy(&rep.stdout);
    assert!(text.contains("reproduce: w2s w2s --config"));
    assert!(text.contains("weak test accuracy"));
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = setup();
    let p = tmp.path();
    assert_eq!(
        code(&w2s(
            &["train-weak", "--config", "tiny.toml", "--out", "a"],
            p
        )),
        0
    );
    assert_eq!(
        code(&w2s(
            &[
                "train-weak",
                "--config",
                "tiny.toml",
                "--seed",
                "7",
                "--out",
                "b"
            ],
            p
        )),
        0
    );
    assert_ne!(
        fs::read(p.join("a/weak_model.bin")).unwrap(),
        fs::read(p.join("b/weak_model.bin")).unwrap()
    );
    // A directory stays bound to its config unless forced.
    assert_eq!(
        code(&w2s(
            &[
                "train-weak",
                "--config",
                "tiny.toml",
                "--seed",
                "7",
                "--out",
                "a"
            ],
            p
        )),
        1
    );
}

#[test]
fn plot_is_deterministic() {
    let tmp = setup();
    let p = tmp.path();
    assert_eq!(
        code(&w2s(&["w2s", "--config", "tiny.toml", "--out", "r"], p)),
        0
    );
    assert_eq!(code(&w2s(&["plot", "--in", "r", "--out", "one.svg"], p)), 0);
    assert_eq!(code(&w2s(&["plot", "--in", "r", "--out", "two.svg"], p)), 0);
    let a = fs::read_to_string(p.join("one.svg")).unwrap();
    assert_eq!(a, fs::read_to_string(p.join("two.svg")).unwrap());
    assert!(a.starts_with("<svg") && a.contains("<polyline"));
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let tmp = setup();
    let p = tmp.path();
    assert_eq!(
        code(&w2s(
            &[
                "sweep",
                "--config",
                "tiny.toml",
                "--out",
                "s1",
                "--threads",
                "1"
            ],
            p
        )),
        0
    );
    assert_eq!(
        code(&w2s(
            &[
                "sweep",
                "--config",
                "tiny.toml",
                "--out",
                "s3",
                "--threads",
                "3"
            ],
            p
        )),
        0
    );
    let a = fs::read_to_string(p.join("s1/sweep.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(p.join("s3/sweep.csv")).unwrap());
    assert_eq!(a.lines().count(), 1 + 3 * 2);
}

#[test]
fn exit_codes() {
    let tmp = setup();
    let p = tmp.path();
    assert_eq!(code(&w2s(&["verify"], p)), 0);
    assert_eq!(code(&w2s(&["no-such-command"], p)), 1);
    assert_eq!(code(&w2s(&["gen-data", "--out", "x"], p)), 1);
    assert_eq!(
        code(&w2s(
            &[
                "gen-data",
                "--config",
                "tiny.toml",
                "--set",
                "data.p_e=0.9",
                "--out",
                "x"
            ],
            p
        )),
        1
    );
    assert_eq!(
        code(&w2s(
            &[
                "gen-data",
                "--config",
                "tiny.toml",
                "--set",
                "strong.m=0",
                "--out",
                "x"
            ],
            p
        )),
        1
    );
    assert_eq!(code(&w2s(&["verify", "--set", "strong.eta=-0.1"], p)), 1);
    let mutated = w2s(&["verify", "--flip-eta-sign"], p);
    assert_eq!(code(&mutated), 2);
    let text = String::from_utf8_lossy(&mutated.stdout);
    assert!(text.contains("[pass] weak_reconstruction"));
    assert!(text.contains("[FAIL] strong_monotonicity"));
}
