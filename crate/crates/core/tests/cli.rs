use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"
[workload]
kind = "deterministic"
prompt_len = 2
output_len = 1
lambda = 0.0762
horizon = 2000.0
seed = 4

[policy]
name = "rad"
n = 7

[sim]
stop_at_horizon = false
"#;

fn servesim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_servesim"))
        .current_dir(dir)
        .env_remove("SERVESIM_CONFIG")
        .args(args)
        .output()
        .expect("spawn servesim")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn toy_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("toy.toml"), TOY).unwrap();
    dir
}

#[test]
fn gen_trace_is_deterministic() {
    let dir = toy_dir();
    ok(&servesim(dir.path(), &["-c", "toy.toml", "gen-trace", "-o", "a.csv"]));
    ok(&servesim(dir.path(), &["-c", "toy.toml", "gen-trace", "-o", "b.csv"]));
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    assert!(String::from_utf8(a).unwrap().lines().count() > 50);
    ok(&servesim(dir.path(), &["-c", "toy.toml", "gen-trace", "--seed", "5", "-o", "c.csv"]));
    assert_ne!(
        fs::read(dir.path().join("a.csv")).unwrap(),
        fs::read(dir.path().join("c.csv")).unwrap()
    );
}

#[test]
fn unknown_policy_exits_2() {
    let dir = toy_dir();
    let o = servesim(dir.path(), &["-c", "toy.toml", "run", "--policy", "magic"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for p in ["rad", "sarathi", "slai", "distserve"] {
        assert!(err.contains(p), "{err}");
    }
}

#[test]
fn bad_config_exits_2() {
    let dir = toy_dir();
    fs::write(dir.path().join("bad.toml"), "[policy]\nnme = \"rad\"\n").unwrap();
    let o = servesim(dir.path(), &["-c", "bad.toml", "run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_from_env() {
    let dir = toy_dir();
    let o = Command::new(env!("CARGO_BIN_EXE_servesim"))
        .current_dir(dir.path())
        .env("SERVESIM_CONFIG", "toy.toml")
        .args(["bounds"])
        .output()
        .unwrap();
    ok(&o);
    let s = String::from_utf8_lossy(&o.stdout);
    assert!(s.contains("rad_min_n = 7"), "{s}");
}

#[test]
fn run_with_bounds_is_reproducible() {
    let dir = toy_dir();
    ok(&servesim(dir.path(), &["-c", "toy.toml", "run", "--assert-bounds", "-o", "r1"]));
    ok(&servesim(dir.path(), &["-c", "toy.toml", "run", "--assert-bounds", "-o", "r2"]));
    let bounds = fs::read_to_string(dir.path().join("r1/bounds.txt")).unwrap();
    assert!(bounds.contains("bound.cycle.passed = true"), "{bounds}");
    for f in [
        "effective_config.toml",
        "trace.csv",
        "batches.csv",
        "requests.csv",
        "tokens.csv",
        "metrics.csv",
        "summary.txt",
        "bounds.txt",
    ] {
        let a = fs::read(dir.path().join("r1").join(f)).unwrap();
        let b = fs::read(dir.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
}

#[test]
fn run_replays_a_trace_file() {
    let dir = toy_dir();
    ok(&servesim(dir.path(), &["-c", "toy.toml", "gen-trace", "-o", "t.csv"]));
    ok(&servesim(dir.path(), &["-c", "toy.toml", "run", "--trace", "t.csv", "-o", "r"]));
    assert_eq!(
        fs::read(dir.path().join("t.csv")).unwrap(),
        fs::read(dir.path().join("r/trace.csv")).unwrap()
    );
}

#[test]
fn memory_overflow_exits_3() {
    let dir = toy_dir();
    let cfg = format!("{TOY}\n[gpu]\nkv_token_capacity = 2\n").replace("name = \"rad\"\nn = 7", "name = \"vllm\"");
    fs::write(dir.path().join("small.toml"), cfg).unwrap();
    let o = servesim(dir.path(), &["-c", "small.toml", "run", "--lambda", "1.0"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_writes_detail_and_mean_rows() {
    let dir = toy_dir();
    ok(&servesim(
        dir.path(),
        &[
            "-c",
            "toy.toml",
            "sweep",
            "--policies",
            "rad,sarathi",
            "--lambdas",
            "0.02,0.04,0.06",
            "--seeds",
            "1,2",
            "--horizon",
            "500",
            "--paying-frac",
            "0.2",
            "-o",
            "sw",
        ],
    ));
    let csv = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("seed")).count(), 12);
    assert_eq!(rows.iter().filter(|r| r.starts_with("mean,")).count(), 6);
    let classes = fs::read_to_string(dir.path().join("sw/sweep_classes.csv")).unwrap();
    assert!(classes.contains(",paying,"));
    let summary = fs::read_to_string(dir.path().join("sw/summary.txt")).unwrap();
    assert!(summary.contains("failed = 0"), "{summary}");
}

#[test]
fn chat_reference_run() {
    let dir = tempfile::tempdir().unwrap();
    ok(&servesim(
        dir.path(),
        &[
            "run",
            "--preset",
            "reference",
            "--lengths",
            "chat",
            "--policy",
            "sarathi",
            "--lambda",
            "1.0",
            "--horizon",
            "120",
            "-o",
            "r",
        ],
    ));
    let summary = fs::read_to_string(dir.path().join("r/summary.txt")).unwrap();
    assert!(summary.contains("policy = sarathi"), "{summary}");
}
