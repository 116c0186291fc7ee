use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn scenario(name: &str) -> String {
    format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("cssmpc-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn cssmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cssmpc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn terminal_prints_ingredients() {
    let o = cssmpc(&["terminal", "--scenario", &scenario("example1")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("provenance: LyapunovLqr"));
    assert!(text.contains("sigma_f (2x2):"));
    assert!(text.contains("stage cost bound: 9.33089e-3"));
    assert!(text.lines().any(|l| l.starts_with("terminal mean set rows: ")));
}

#[test]
fn vehicle_lqr_terminal_is_infeasible() {
    let dir = scratch("veh-lqr");
    let text = fs::read_to_string(scenario("vehicle")).unwrap();
    let lqr: String = text
        .replace("\"nearest-assignable\"", "\"lyapunov-lqr\"")
        .lines()
        .filter(|l| !l.starts_with("desired_steps") && !l.starts_with("noise_margin"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.join("vehicle_lqr.toml");
    fs::write(&path, lqr).unwrap();
    let o = cssmpc(&["terminal", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("terminal set is empty"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn config_errors_exit_with_four() {
    assert_eq!(cssmpc(&["terminal", "--scenario", "/nonexistent.toml"]).status.code(), Some(4));
    let dir = scratch("bad");
    let path = dir.join("bad.toml");
    fs::write(&path, fs::read_to_string(scenario("example1")).unwrap() + "\nunknown_key = 1\n").unwrap();
    assert_eq!(cssmpc(&["terminal", "--scenario", path.to_str().unwrap()]).status.code(), Some(4));
    let out = dir.join("out");
    let o = cssmpc(&["run", "--scenario", &scenario("example1"), "--controller", "pid", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(cssmpc(&["frobnicate"]).status.code(), Some(4));
    let o = cssmpc(&["steer", "--scenario", &scenario("example1"), "--mu-f", "0", "--sigma-f", "1"]);
    assert_eq!(o.status.code(), Some(4));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn help_exits_cleanly() {
    let o = cssmpc(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("terminal"));
}

#[test]
fn run_writes_reproducible_outputs() {
    let dir = scratch("run");
    let (a, b) = (dir.join("a"), dir.join("b"));
    for (out, parallel) in [(&a, "1"), (&b, "2")] {
        let o = cssmpc(&[
            "run",
            "--scenario",
            &scenario("example1"),
            "--controller",
            "cs-smpc",
            "--steps",
            "4",
            "--rollouts",
            "2",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
            "--parallel",
            parallel,
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("controller: cs-smpc"));
    }
    // Everything but the wall-clock solve time is reproducible.
    let without_timing = |path: PathBuf| -> Vec<String> {
        let text = fs::read_to_string(path).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "solve_ms").unwrap();
        text.lines()
            .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != col).map(|(_, v)| v).collect::<Vec<_>>().join(","))
            .collect()
    };
    for f in ["rollout_000.csv", "rollout_001.csv"] {
        assert_eq!(without_timing(a.join(f)), without_timing(b.join(f)));
    }
    let csv = fs::read_to_string(a.join("rollout_000.csv")).unwrap();
    assert!(csv.starts_with("k,x_0,x_1,u_0,u_1,mode,solve_ms,viol_s0\n"));
    assert_eq!(csv.lines().count(), 5);
    assert!(fs::read_to_string(a.join("summary.toml")).unwrap().contains("rollouts = 2"));
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn steer_reaches_target_mean() {
    let o = cssmpc(&["steer", "--scenario", &scenario("example1"), "--mu-f", "0,0", "--sigma-f", "0.01,0;0,0.01"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("status: Optimal"));
    let mean = text.lines().find(|l| l.starts_with("terminal mean: ")).unwrap();
    let values: Vec<f64> = mean["terminal mean: [".len()..mean.len() - 1]
        .split(", ")
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(values.iter().all(|v| v.abs() < 1e-6), "{values:?}");
    assert!(text.contains("K_9 (2x2):"));
}

#[test]
fn steer_to_unreachable_covariance_is_infeasible() {
    let o = cssmpc(&["steer", "--scenario", &scenario("example1"), "--mu-f", "0,0", "--sigma-f", "0,0;0,0"]);
    assert_eq!(o.status.code(), Some(2));
}
