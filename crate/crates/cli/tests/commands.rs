use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn mlaqp(args: &[&str], envs: &[(&str, &str)], stdin: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mlaqp"));
    cmd.args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    for key in ["MLAQP_CATALOGUE", "MLAQP_CONFIG", "MLAQP_BIND", "MLAQP_ROUNDS"] {
        cmd.env_remove(key);
    }
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let mut child = cmd.spawn().unwrap();
    {
        let mut input = child.stdin.take().unwrap();
        if let Some(s) = stdin {
            input.write_all(s.as_bytes()).unwrap();
        }
    }
    child.wait_with_output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates a small workload and trains a catalogue; returns (workload dir, catalogue dir).
fn setup(root: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let w = root.join("w");
    let out = mlaqp(
        &["gen-workload", "--dims", "3", "--queries", "300", "--rows", "5000", "--out", p(&w)],
        &[],
        None,
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    for f in ["data.csv", "schema.json", "log.jsonl"] {
        assert!(w.join(f).exists(), "{f}");
    }
    let cat = root.join("cat");
    let out = mlaqp(
        &[
            "train", "--log", p(&w.join("log.jsonl")), "--schema", p(&w.join("schema.json")),
            "--out", p(&cat), "--rounds", "40", "--quantile-rounds", "40",
        ],
        &[],
        None,
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("trained 4 entries"));
    (w, cat)
}

#[test]
fn generate_train_and_query() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cat) = setup(dir.path());
    let input = "SELECT AVG(a1) FROM synth WHERE a1 BETWEEN 1e7 AND 2e7\n\
                 .explain SELECT COUNT(*) FROM synth WHERE a2 = 5\n\
                 SELECT COUNT(* FROM synth\n\
                 .drift\n\
                 .quit\n";
    let out = mlaqp(&["repl", "--catalogue", p(&cat)], &[], Some(input));
    assert!(out.status.success(), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("AVG(a1) = "), "{s}");
    assert!(s.contains("at 90% (AVG(a1)/point)"), "{s}");
    assert!(s.contains("a2           lb=5 ub=5"), "{s}");
    assert!(s.contains("a1           lb=missing ub=missing"), "{s}");
    assert!(s.contains("error: syntax error at position"), "{s}");
    assert!(s.contains("\"workload_k\""), "{s}");
}

#[test]
fn monitor_reports_injected_answer_shift() {
    let dir = tempfile::tempdir().unwrap();
    let (w, cat) = setup(dir.path());
    let log = std::fs::read_to_string(w.join("log.jsonl")).unwrap();
    let mut live = String::new();
    for _ in 0..2 {
        live.push_str(&log);
    }
    // same queries, answers moved far outside the training range
    for line in log.lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        let c = v["answers"]["COUNT(*)"].as_f64().unwrap();
        v["answers"]["COUNT(*)"] = (c * 10.0 + 1000.0).into();
        live.push_str(&v.to_string());
        live.push('\n');
    }
    let live_path = dir.path().join("live.jsonl");
    std::fs::write(&live_path, live).unwrap();
    let out = mlaqp(
        &["monitor", "--catalogue", p(&cat), "--log", p(&live_path), "--window", "200", "--check-every", "50"],
        &[],
        None,
    );
    assert!(out.status.success(), "{}", text(&out.stderr));
    let events: Vec<serde_json::Value> = text(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let data: Vec<_> = events.iter().filter(|e| e["kind"] == "data").collect();
    assert!(!data.is_empty(), "{events:?}");
    assert!(data.iter().all(|e| e["af"] == "COUNT(*)"));
    assert_eq!(data[0]["retrain_recommended"], true);
    assert!(data[0]["ts"].as_str().unwrap().ends_with('Z'));
}

#[test]
fn settings_precedence_is_flag_env_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cat) = setup(dir.path());
    let missing = dir.path().join("nope");
    let cfg = dir.path().join("mlaqp.toml");
    std::fs::write(&cfg, format!("catalogue = {:?}\n", p(&cat))).unwrap();

    let from_file = mlaqp(&["repl", "--config", p(&cfg)], &[], Some(".quit\n"));
    assert!(from_file.status.success(), "{}", text(&from_file.stderr));

    let env_wins = mlaqp(&["repl", "--config", p(&cfg)], &[("MLAQP_CATALOGUE", p(&missing))], Some(".quit\n"));
    assert!(!env_wins.status.success());

    let flag_wins = mlaqp(
        &["repl", "--config", p(&cfg), "--catalogue", p(&cat)],
        &[("MLAQP_CATALOGUE", p(&missing))],
        Some(".quit\n"),
    );
    assert!(flag_wins.status.success(), "{}", text(&flag_wins.stderr));

    let none = mlaqp(&["repl"], &[], Some(".quit\n"));
    assert!(!none.status.success());
    assert!(text(&none.stderr).contains("MLAQP_CATALOGUE"));
}

#[test]
fn train_reports_bad_lines_and_empty_logs() {
    let dir = tempfile::tempdir().unwrap();
    let schema = dir.path().join("schema.json");
    std::fs::write(&schema, r#"{"name": "t", "attributes": [{"name": "x", "kind": "numeric"}]}"#).unwrap();
    let log = dir.path().join("log.jsonl");
    std::fs::write(&log, "").unwrap();
    let cat = dir.path().join("cat");
    let args = ["train", "--log", p(&log), "--schema", p(&schema), "--out", p(&cat)];
    let out = mlaqp(&args, &[], None);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("no usable query-answer pairs"), "{}", text(&out.stderr));

    let mut lines = String::new();
    for i in 0..20 {
        lines.push_str(&format!(
            "{{\"sql\": \"SELECT COUNT(*) FROM t WHERE x <= {i}\", \"answers\": {{\"COUNT(*)\": {i}}}}}\n"
        ));
    }
    lines.push_str("SELECT garbage\n");
    std::fs::write(&log, lines).unwrap();
    let out = mlaqp(&args, &[], None);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains(":21:"), "{}", text(&out.stderr));
    assert!(cat.join("manifest.json").exists());
}
