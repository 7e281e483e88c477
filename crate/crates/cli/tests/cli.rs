use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn repeater(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repeater"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TRIVIAL: &str = r#"{
  "version": 1,
  "hardware": {"p_gen": 1.0, "p_swap": 1.0, "w0": 0.9, "t_coh": "inf"},
  "eval": {"ttr": 1, "backend": "direct"},
  "protocol": {"type": "swap", "left": {"type": "gen"}, "right": {"type": "gen"}}
}"#;

const CHAIN: &str = r#"{
  "version": 1,
  "hardware": {"p_gen": 0.1, "p_swap": 0.4, "w0": 0.98, "t_coh": 600},
  "eval": {"ttr": 600, "backend": "fast"},
  "nested_swap": {"levels": 2, "strategy": "dif_time", "cutoffs": [30]}
}"#;

#[test]
fn trivial_chain_gives_one_row() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", TRIVIAL);
    let out = dir.path().join("d.csv");
    let o = repeater(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--format",
        "csv",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,pmf,cdf,werner,fidelity");
    assert_eq!(lines.len(), 2);
    let f: Vec<f64> = lines[1].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(f[0], 1.0);
    assert_eq!(f[1], 1.0);
    assert!((f[3] - 0.81).abs() < 1e-15);
    assert!((f[4] - (1.0 + 3.0 * 0.81) / 4.0).abs() < 1e-15);

    let side: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("d.csv.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(side["manifest"]["command"], "evaluate");
    assert_eq!(side["manifest"]["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(side["manifest"]["backend"], "direct");
    assert!(side["report"]["rate"].as_f64().unwrap() > 0.0);
}

#[test]
fn json_output_mirrors_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", CHAIN);
    let csv = dir.path().join("d.csv");
    let json = dir.path().join("d.json");
    assert!(
        repeater(&["evaluate", "--config", s(&cfg), "--out", s(&csv)])
            .status
            .success()
    );
    assert!(repeater(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        s(&json),
        "--format",
        "json"
    ])
    .status
    .success());
    let v: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 600);
    let csv_text = fs::read_to_string(&csv).unwrap();
    let last: Vec<f64> = csv_text
        .lines()
        .last()
        .unwrap()
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!(rows[599]["pmf"].as_f64().unwrap(), last[1]);
    assert_eq!(rows[599]["werner"].as_f64().unwrap(), last[3]);
    assert!(v["report"]["rate"].as_f64().unwrap() > 0.0);
    assert_eq!(v["manifest"]["ttr"], 600);
}

#[test]
fn config_hash_ignores_formatting() {
    let dir = TempDir::new().unwrap();
    let a = config(&dir, "a.json", CHAIN);
    let b = config(&dir, "b.json", &CHAIN.replace('\n', " ").replace("  ", " "));
    let hash = |cfg: &Path, out: &str| {
        let out = dir.path().join(out);
        assert!(
            repeater(&["evaluate", "--config", s(cfg), "--out", s(&out)])
                .status
                .success()
        );
        let v: Value = serde_json::from_str(
            &fs::read_to_string(format!("{}.manifest.json", s(&out))).unwrap(),
        )
        .unwrap();
        v["manifest"]["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&a, "a.csv"), hash(&b, "b.csv"));
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = repeater(&[
        "evaluate",
        "--config",
        "/nonexistent/c.json",
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", &CHAIN.replace("\"ttr\": 600", "\"ttr\": 0"));
    let o = repeater(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ttr"));
}

#[test]
fn fast_backend_with_fidelity_is_rejected() {
    let dir = TempDir::new().unwrap();
    let body = CHAIN.replace(
        "\"dif_time\", \"cutoffs\": [30]",
        "\"fidelity\", \"cutoffs\": [0.9]",
    );
    let cfg = config(&dir, "c.json", &body);
    let o = repeater(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = repeater(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--backend",
        "fourier",
        "--ttr",
        "200",
        "--out",
        s(&dir.path().join("y.csv")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unwritable_output_exits_4() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", TRIVIAL);
    let o = repeater(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        "/nonexistent/dir/d.csv",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn bad_thread_cap_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", TRIVIAL);
    let o = Command::new(env!("CARGO_BIN_EXE_repeater"))
        .args([
            "evaluate",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("d.csv")),
        ])
        .env("REPEATER_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_repeater"))
        .args([
            "evaluate",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("d.csv")),
        ])
        .env("REPEATER_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
}

#[test]
fn optimize_is_reproducible_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", CHAIN);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = repeater(&[
            "optimize",
            "--config",
            s(&cfg),
            "--mode",
            "uniform",
            "--seed",
            "5",
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let a = run("a.json");
    assert_eq!(a, run("b.json"));
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert!(v["rate"].as_f64().unwrap() >= v["baseline_rate"].as_f64().unwrap());
    assert_eq!(v["thresholds"].as_array().unwrap().len(), 1);
}

#[test]
fn threshold_range_confines_the_search() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", CHAIN);
    let out = dir.path().join("o.json");
    let base = [
        "optimize",
        "--config",
        s(&cfg),
        "--mode",
        "uniform",
        "--seed",
        "2",
        "--out",
        s(&out),
    ];
    let o = repeater(
        &[
            &base[..],
            &["--min-threshold", "40", "--max-threshold", "60"],
        ]
        .concat(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let tau = v["thresholds"][0].as_f64().unwrap();
    assert!((40.0..=60.0).contains(&tau), "{tau}");

    let o = repeater(
        &[
            &base[..],
            &["--min-threshold", "60", "--max-threshold", "40"],
        ]
        .concat(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn optimize_without_key_reports_zero() {
    let dir = TempDir::new().unwrap();
    let body = CHAIN.replace("\"w0\": 0.98", "\"w0\": 0.5");
    let cfg = config(&dir, "c.json", &body);
    let out = dir.path().join("o.json");
    let o = repeater(&[
        "optimize",
        "--config",
        s(&cfg),
        "--mode",
        "uniform",
        "--seed",
        "1",
        "--max-generations",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["rate"].as_f64().unwrap(), 0.0);
    assert_eq!(v["no_key"], true);
}

#[test]
fn optimize_needs_a_nested_chain() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", TRIVIAL);
    let o = repeater(&[
        "optimize",
        "--config",
        s(&cfg),
        "--mode",
        "uniform",
        "--out",
        s(&dir.path().join("o.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn samples_agree_with_their_own_distribution() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", CHAIN);
    let exact = dir.path().join("d.csv");
    let samples = dir.path().join("s.json");
    assert!(
        repeater(&["evaluate", "--config", s(&cfg), "--out", s(&exact)])
            .status
            .success()
    );
    assert!(repeater(&[
        "sample",
        "--config",
        s(&cfg),
        "-n",
        "20000",
        "--seed",
        "9",
        "--out",
        s(&samples)
    ])
    .status
    .success());
    let report = dir.path().join("r.json");
    let o = repeater(&[
        "compare",
        "--exact",
        s(&exact),
        "--samples",
        s(&samples),
        "--out",
        s(&report),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["pass"], true);

    // A slower chain evaluated on the same window must be told apart.
    let other = config(
        &dir,
        "o.json",
        &CHAIN.replace("\"p_gen\": 0.1", "\"p_gen\": 0.08"),
    );
    let shifted = dir.path().join("e.json");
    assert!(repeater(&[
        "evaluate",
        "--config",
        s(&other),
        "--out",
        s(&shifted),
        "--format",
        "json"
    ])
    .status
    .success());
    let o = repeater(&["compare", "--exact", s(&shifted), "--samples", s(&samples)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn deterministic_chain_has_zero_gap() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", TRIVIAL);
    let exact = dir.path().join("d.csv");
    let samples = dir.path().join("s.json");
    assert!(
        repeater(&["evaluate", "--config", s(&cfg), "--out", s(&exact)])
            .status
            .success()
    );
    assert!(repeater(&[
        "sample",
        "--config",
        s(&cfg),
        "-n",
        "500",
        "--seed",
        "1",
        "--out",
        s(&samples)
    ])
    .status
    .success());
    let o = repeater(&["compare", "--exact", s(&exact), "--samples", s(&samples)]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["report"]["max_cdf_gap"].as_f64().unwrap(), 0.0);
}

#[test]
fn absent_seed_is_recorded() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "c.json", TRIVIAL);
    let out = dir.path().join("s.json");
    let o = repeater(&["sample", "--config", s(&cfg), "-n", "10", "--out", s(&out)]);
    assert!(o.status.success());
    let side: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.json.manifest.json")).unwrap())
            .unwrap();
    let seed = side["manifest"]["seed"].as_u64().unwrap();
    assert!(String::from_utf8_lossy(&o.stderr).contains(&seed.to_string()));
    let est: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(est["seed"].as_u64().unwrap(), seed);
}
