use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dqrp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dqrp"))
        .args(args)
        .current_dir(dir)
        .env_remove("DQRP_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// y = 0.2 + x1 - 0.5 x2 + noise on a deterministic pseudo-random design.
fn write_data(dir: &Path, n: usize) -> PathBuf {
    let mut s = String::from("y,x1,x2\n");
    let mut state = 12345u64;
    let mut u = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..n {
        let (x1, x2, e) = (u(), u(), u() - 0.5);
        s.push_str(&format!("{},{x1},{x2}\n", 0.2 + x1 - 0.5 * x2 + 0.2 * e));
    }
    let p = dir.join("d.csv");
    std::fs::write(&p, s).unwrap();
    p
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn fit_prints_header_and_pooled_row() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 800);
    let o = dqrp(dir.path(), &["fit", "--data", "d.csv", "--tau", "0.5", "--S", "8", "--seed", "7"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("# dqrp "));
    assert!(text.contains("# config_sha256 "));
    assert!(text.contains("# seed 7"));
    let rows = data_lines(&text);
    assert_eq!(rows[0], "tau,b0,b1,b2");
    let vals: Vec<f64> = rows[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(vals[0], 0.5);
    assert!((vals[2] - 1.0).abs() < 0.1 && (vals[3] + 0.5).abs() < 0.1);
    // resolved config goes to stderr
    assert!(String::from_utf8_lossy(&o.stderr).contains("# config {"));
}

#[test]
fn emitted_config_reproduces_output() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 1200);
    let a = dqrp(
        dir.path(),
        &["ci", "--data", "d.csv", "--tau", "0.3", "--S", "6", "--ci", "normal,t,boot,sandwich", "--emit-config", "c.json"],
    );
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = dqrp(dir.path(), &["ci", "--config", "c.json"]);
    assert!(b.status.success());
    assert_eq!(a.stdout, b.stdout);
    let rows = data_lines(&stdout(&a)).len();
    assert_eq!(rows, 5);
    // the data-dependent defaults were written back
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    assert!(cfg["x0"].is_array() && cfg["sigma"].is_number());
}

#[test]
fn intervals_are_ordered() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 1000);
    let o = dqrp(dir.path(), &["ci", "--data", "d.csv", "--tau", "0.5", "--S", "5", "--ci", "normal,t", "--x0", "0.5,0.5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows = data_lines(&text);
    let width = |r: &str| {
        let f: Vec<&str> = r.split(',').collect();
        f[4].parse::<f64>().unwrap() - f[3].parse::<f64>().unwrap()
    };
    assert!(width(rows[2]) > width(rows[1]));
}

#[test]
fn project_and_cdf() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 1000);
    let o = dqrp(dir.path(), &["project", "--data", "d.csv", "--S", "4", "--K", "30", "--out", "xi.json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("xi.json")).unwrap()).unwrap();
    assert_eq!(doc["projection"]["xi"].as_array().unwrap().len(), 7);
    assert!(doc["meta"]["config_sha256"].is_string());

    let o = dqrp(dir.path(), &["cdf", "--data", "d.csv", "--S", "4", "--K", "30", "--x0", "0.5,0.5", "--y", "-5,0.45,5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let f: Vec<f64> = data_lines(&text)[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(f[0], 0.05);
    assert!(f[1] > 0.05 && f[1] < 0.95);
    assert_eq!(f[2], 0.95);
}

#[test]
fn spline_transform() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("y,x\n");
    for i in 0..600 {
        let x = -1.0 + 2.0 * (i as f64 + 0.5) / 600.0;
        s.push_str(&format!("{},{x}\n", (2.0 * x).sin() + 0.1 * ((i * 7919 % 101) as f64 / 101.0 - 0.5)));
    }
    std::fs::write(dir.path().join("np.csv"), s).unwrap();
    let o = dqrp(
        dir.path(),
        &["fit", "--data", "np.csv", "--tau", "0.5", "--S", "2", "--transform", "spline", "--x-breakpoints", "6"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_lines(&stdout(&o))[0].split(',').count(), 1 + 8);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 200);
    assert_eq!(dqrp(dir.path(), &["fit", "--data", "d.csv", "--bogus"]).status.code(), Some(2));
    assert_eq!(dqrp(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(dqrp(dir.path(), &["fit", "--data", "d.csv", "--tau", "1.5"]).status.code(), Some(2));
    assert_eq!(dqrp(dir.path(), &["fit", "--data", "missing.csv"]).status.code(), Some(2));
    assert_eq!(dqrp(dir.path(), &["fit", "--data", "d.csv", "--S", "100"]).status.code(), Some(2));
    assert_eq!(dqrp(dir.path(), &["ci", "--data", "d.csv", "--ci", "oracle"]).status.code(), Some(2));
    assert_eq!(dqrp(dir.path(), &["fit", "--data", "d.csv", "--reps", "5"]).status.code(), Some(2));

    // a covariate collinear with the intercept makes the Powell matrix singular
    let mut s = String::from("y,x\n");
    for i in 0..200 {
        s.push_str(&format!("{},1\n", (i * 37 % 101) as f64 / 101.0));
    }
    std::fs::write(dir.path().join("const.csv"), s).unwrap();
    let o = dqrp(
        dir.path(),
        &["ci", "--data", "const.csv", "--S", "2", "--tau", "0.5", "--ci", "sandwich", "--c-star", "0.3"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

const SIM: &str = r#"{"seed": 3, "simulation": {"model": {"model": "linear_homo", "m": 4}, "n": 96,
  "s_list": [1, 8], "taus": [0.5, 0.1], "methods": ["oracle", "normal", "t", "boot", "sandwich"],
  "reps": 8, "seed": 3, "boot_b": 60, "mc_draws": 20000}}"#;

#[test]
fn simulate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sim.json"), SIM).unwrap();
    let o = dqrp(dir.path(), &["simulate", "--config", "sim.json", "--out", "cov"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cov.csv")).unwrap();
    let rows = data_lines(&csv);
    assert_eq!(rows[0], "model,n,S,tau,method,R,cover,prop,se");
    assert_eq!(rows.len(), 1 + 4 + 10);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("cov.json")).unwrap()).unwrap();
    assert_eq!(json["report"]["cells"].as_array().unwrap().len(), 14);

    // flags override the simulation section
    let o = dqrp(dir.path(), &["simulate", "--config", "sim.json", "--reps", "3", "--S", "4", "--ci", "oracle", "--out", "small"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("small.csv")).unwrap();
    assert_eq!(data_lines(&csv)[1..].iter().filter(|r| r.contains(",4,") && r.contains(",3,")).count(), 2);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn coordinator_matches_local_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sim.json"), SIM).unwrap();
    assert!(dqrp(dir.path(), &["simulate", "--config", "sim.json", "--out", "local"]).status.success());

    let ports = [free_port(), free_port()];
    let mut workers: Vec<_> = ports
        .iter()
        .map(|p| {
            Command::new(env!("CARGO_BIN_EXE_dqrp"))
                .args(["worker", "--listen", &format!("127.0.0.1:{p}")])
                .stderr(std::process::Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    let endpoints = ports.map(|p| format!("127.0.0.1:{p}")).join(",");
    // wait until both workers accept connections
    for p in ports {
        let deadline = std::time::Instant::now() + std::time::Duration::from_secs(10);
        while std::net::TcpStream::connect(("127.0.0.1", p)).is_err() {
            assert!(std::time::Instant::now() < deadline, "worker did not start");
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
    }
    let o = dqrp(dir.path(), &["coordinator", "--config", "sim.json", "--connect", &endpoints, "--out", "remote"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for w in &mut workers {
        assert!(w.wait().unwrap().success());
    }
    let strip = |name: &str| -> Vec<String> {
        std::fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("# config_sha256"))
            .map(String::from)
            .collect()
    };
    assert_eq!(strip("local.csv"), strip("remote.csv"));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dqrp(dir.path(), &["selftest"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    write_data(dir.path(), 900);
    let one = dqrp(dir.path(), &["fit", "--data", "d.csv", "--S", "6", "--K", "9", "--threads", "1"]);
    let three = dqrp(dir.path(), &["fit", "--data", "d.csv", "--S", "6", "--K", "9", "--threads", "3"]);
    assert!(one.status.success() && three.status.success());
    assert_eq!(one.stdout, three.stdout);
    assert_eq!(dqrp(dir.path(), &["fit", "--data", "d.csv", "--threads", "0"]).status.code(), Some(2));
}
