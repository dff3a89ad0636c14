use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn flaim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flaim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = r#"{
    "version": 1,
    "dataset": {"kind": "synthfs", "clients": 8, "rows_per_client": 50, "features": 4, "bins": 6},
    "partition": {"kind": "natural"},
    "workload": {"arity": 2, "size": 4},
    "methods": ["aim", "distaim", "flaim-private"],
    "epsilons": [1.0],
    "rounds": 2,
    "sample_rate": 0.5,
    "train_iterations": 20,
    "final_iterations": 30,
    "repeats": 2,
    "seed": 0
}"#;

/// results.csv with the wall-clock column dropped.
fn metrics(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join("results.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let wall = header.iter().position(|h| *h == "wall_ms").unwrap();
    lines
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != wall)
                .map(|(_, f)| f)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect()
}

#[test]
fn run_is_deterministic_and_auditable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.json");
    fs::write(&cfg, CONFIG).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = flaim(&[
            "run",
            "--config",
            p(&cfg),
            "--seed",
            "7",
            "--out",
            p(out),
            "--jobs",
            "2",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(metrics(&a).len(), 6);

    let o = flaim(&["audit-ledger", p(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).matches("ok ").count(), 6);

    let o = flaim(&["summarize", p(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("flaim-private"));

    // refuses to overwrite without --force
    let o = flaim(&["run", "--config", p(&cfg), "--seed", "7", "--out", p(&a)]);
    assert_eq!(code(&o), 1);
    let o = flaim(&[
        "run",
        "--config",
        p(&cfg),
        "--seed",
        "8",
        "--out",
        p(&a),
        "--force",
        "--repeats",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metrics(&a).len(), 3);
}

#[test]
fn tampered_ledger_fails_audit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out = tmp.path().join("run");
    let o = flaim(&[
        "run",
        "--config",
        p(&cfg),
        "--seed",
        "1",
        "--out",
        p(&out),
        "--methods",
        "aim",
        "--repeats",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ledger = out.join("runs/aim-eps1-r0/ledger.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&ledger).unwrap()).unwrap();
    v["entries"][0]["rho"] = serde_json::json!(1e3);
    fs::write(&ledger, v.to_string()).unwrap();
    let o = flaim(&["audit-ledger", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let o = flaim(&[
        "run",
        "--config",
        p(&missing),
        "--seed",
        "1",
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.json"));

    let o = flaim(&["run", "--config", "x.json", "--out", "o"]);
    assert_eq!(code(&o), 1, "seed is mandatory");
    let o = flaim(&["summarize", "results.csv", "--bogus"]);
    assert_eq!(code(&o), 1);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, CONFIG.replace("\"version\": 1", "\"version\": 9")).unwrap();
    let o = flaim(&[
        "run",
        "--config",
        p(&bad),
        "--seed",
        "1",
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("version"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn synthfs_partition_and_prepare() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("fs");
    let o = flaim(&[
        "synthfs",
        "--beta",
        "1",
        "--clients",
        "10",
        "--rows-per-client",
        "40",
        "--features",
        "3",
        "--bins",
        "8",
        "--seed",
        "4",
        "--out",
        p(&dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let train = fs::read_to_string(dir.join("train.csv")).unwrap();
    let holdout = fs::read_to_string(dir.join("holdout.csv")).unwrap();
    // header plus 90% / 10% of 400 rows
    assert_eq!(train.lines().count() - 1 + holdout.lines().count() - 1, 400);
    assert_eq!(
        fs::read_to_string(dir.join("partition.txt"))
            .unwrap()
            .lines()
            .count(),
        train.lines().count() - 1
    );

    let part = tmp.path().join("part.txt");
    let report = tmp.path().join("het.json");
    let o = flaim(&[
        "partition",
        "--data",
        p(&dir.join("train.csv")),
        "--domain",
        p(&dir.join("domain.json")),
        "--kind",
        "cluster",
        "--clients",
        "4",
        "--seed",
        "2",
        "--out",
        p(&part),
        "--report",
        p(&report),
        "--report-arity",
        "2",
        "--report-queries",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["aggregate"].as_f64().unwrap() > 0.0);

    let raw = tmp.path().join("raw.csv");
    fs::write(&raw, "age,colour\n20,red\n35.5,blue\n99,red\n").unwrap();
    let schema = tmp.path().join("schema.json");
    fs::write(
        &schema,
        r#"{"attributes": [
            {"kind": "continuous", "name": "age", "min": 0, "max": 100, "bins": 4},
            {"kind": "categorical", "name": "colour"}
        ]}"#,
    )
    .unwrap();
    let prepared = tmp.path().join("prepared");
    let o = flaim(&[
        "prepare",
        "--schema",
        p(&schema),
        "--input",
        p(&raw),
        "--out",
        p(&prepared),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = fs::read_to_string(prepared.join("data.csv")).unwrap();
    assert_eq!(
        data.lines().skip(1).collect::<Vec<_>>(),
        ["0,0", "1,1", "3,0"]
    );

    let o = flaim(&[
        "prepare",
        "--schema",
        p(&tmp.path().join("missing.json")),
        "--input",
        p(&raw),
        "--out",
        p(&prepared),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.json"));
}
