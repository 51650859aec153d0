use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn skelmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skelmesh")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = skelmesh(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(skelmesh(&[]).status.code(), Some(2));
    assert_eq!(skelmesh(&["train-dsd"]).status.code(), Some(2));
}

#[test]
fn grad_check_passes() {
    let out = skelmesh(&["grad-check", "--trials", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(text.contains("dsd_forward"));
}

#[test]
fn pipeline_smoke_run() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = p(d, "train.cfg");
    std::fs::write(&config, "# smoke run\nbatch_size = 4\nmax_steps = 3\n").unwrap();
    ok(&["gen-data", "--out", &p(d, "data"), "--sequences", "8", "--frames", "12", "--noise", "0.05"]);
    ok(&["train-dsd", "--data", &p(d, "data"), "--out", &p(d, "dsd"), "--config", &config]);
    ok(&["precompute", "--data", &p(d, "data"), "--ckpt", &p(d, "dsd"), "--out", &p(d, "feat")]);
    ok(&[
        "train-satn", "--data", &p(d, "data"), "--features", &p(d, "feat"), "--out", &p(d, "satn"), "--config", &config,
    ]);
    ok(&[
        "eval", "--data", &p(d, "data"), "--features", &p(d, "feat"), "--ckpt", &p(d, "satn"), "--out", &p(d, "r.json"),
    ]);
    ok(&["export-obj", "--data", &p(d, "data"), "--ckpt", &p(d, "dsd"), "--out", &p(d, "mesh.obj")]);

    let log = std::fs::read_to_string(p(d, "dsd/log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p(d, "r.json")).unwrap()).unwrap();
    for key in ["dsd", "satn"] {
        let r = &report[key];
        assert_eq!(r["split"], "heldout");
        assert_eq!(r["n_frames"], 48);
        for m in ["mpjpe", "pa_mpjpe", "mpjve", "mpjae"] {
            assert!(r[m].as_f64().unwrap().is_finite(), "{key}.{m}");
        }
    }
    let obj = std::fs::read_to_string(p(d, "mesh.obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 432);

    let wrong = skelmesh(&["precompute", "--data", &p(d, "data"), "--ckpt", &p(d, "satn"), "--out", &p(d, "x")]);
    assert!(!wrong.status.success());
    assert!(start.elapsed() < Duration::from_secs(300), "{:?}", start.elapsed());
}
