use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn netmarl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_netmarl"))
        .args(args)
        .env_remove("NETMARL_SEED")
        .env_remove("NETMARL_JOBS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_cmd(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    netmarl(&args)
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_CHAIN: &str = r#"{
  "schema": 1,
  "seed": 5,
  "graphs": {"n": 3, "state_edges": [[1, 2], [2, 3]]},
  "trainer": {"episodes": 4, "final_window": 2, "seeds": 2, "horizon": 5, "consensus_iters": 5}
}"#;

#[test]
fn empty_edges_give_singleton_learning_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"schema": 1, "graphs": {"n": 4}}"#);
    let o = run_cmd("analyze", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let a = json(&dir.path().join("out/analysis.json"));
    for i in 0..4 {
        assert_eq!(a["per_agent"][i]["learning_set"], serde_json::json!([i + 1]));
    }
    assert_eq!(a["learning_edges"], serde_json::json!([]));
}

#[test]
fn complete_learning_graph_exits_two_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ring100.json");
    let o = run_cmd("analyze", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let a = json(&dir.path().join("analysis.json"));
    assert_eq!(a["assumptions"]["partial_lvf"], false);
    assert_eq!(a["learning_edges"].as_array().unwrap().len(), 9900);
}

#[test]
fn outputs_carry_config_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY_CHAIN);
    let out = dir.path().join("out");
    let o = run_cmd("run", &cfg, &out, &["--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let hash = hex::encode(Sha256::digest(TINY_CHAIN.as_bytes()));
    let trace = fs::read_to_string(out.join("traces/centralized_one-point_seed000.csv")).unwrap();
    let first = trace.lines().next().unwrap();
    assert!(first.starts_with("# netmarl "), "{first}");
    assert!(first.ends_with(&format!("config_sha256={hash} seed=9")), "{first}");
    assert!(!trace.contains('\r'));
    let s = json(&out.join("summary.json"));
    assert_eq!(s["header"]["config_sha256"], hash.as_str());
    assert_eq!(s["header"]["seed"], 9);
    assert_eq!(s["runs"].as_array().unwrap().len(), 4);
}

#[test]
fn zero_step_single_episode_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema": 1, "graphs": {"n": 3, "state_edges": [[1, 2], [2, 3]]},
            "policy": {"init_theta": 0.25},
            "trainer": {"episodes": 1, "final_window": 1, "seeds": 2, "step_size": 0.0}}"#,
    );
    let out = dir.path().join("out");
    let o = run_cmd("run", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for entry in fs::read_dir(out.join("traces")).unwrap() {
        let text = fs::read_to_string(entry.unwrap().path()).unwrap();
        assert_eq!(text.lines().count(), 3, "header, columns, one episode");
    }
    let mut checkpoints = 0;
    for entry in fs::read_dir(out.join("checkpoints")).unwrap() {
        let c = json(&entry.unwrap().path());
        let theta = c["params"]["theta"].as_array().unwrap();
        assert!(!theta.is_empty());
        assert!(theta.iter().all(|x| x.as_f64() == Some(0.25)));
        checkpoints += 1;
    }
    assert_eq!(checkpoints, 8);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY_CHAIN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run_cmd("run", &cfg, &a, &["--jobs", "1"]).status.code(), Some(0));
    assert_eq!(run_cmd("run", &cfg, &b, &["--jobs", "2"]).status.code(), Some(0));
    let names: Vec<_> = fs::read_dir(a.join("traces")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 8);
    for n in names {
        assert_eq!(fs::read(a.join("traces").join(&n)).unwrap(), fs::read(b.join("traces").join(&n)).unwrap());
    }
    assert_eq!(fs::read(a.join("summary.json")).unwrap(), fs::read(b.join("summary.json")).unwrap());
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"schema": 1, "seed": 3, "graphs": {"n": 2}}"#);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_netmarl"))
        .args(["analyze", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .env("NETMARL_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&out.join("analysis.json"))["header"]["seed"], 77);
}

#[test]
fn lvf_without_partial_learning_sets_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "ring.json",
        r#"{"schema": 1, "graphs": {"n": 3, "state_edges": [[1, 2], [2, 3], [3, 1]]},
            "trainer": {"variants": ["distributed-lvf"], "episodes": 2, "final_window": 1, "seeds": 1}}"#,
    );
    let o = run_cmd("run", &cfg, &dir.path().join("a"), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("--force"));
    let o = run_cmd("run", &cfg, &dir.path().join("b"), &["--force"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn asymmetric_communication_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema": 1, "graphs": {"n": 3, "state_edges": [[1, 2], [2, 3]], "reward_edges": [[3, 1]],
            "comm_edges": [[1, 2], [2, 3]]}}"#,
    );
    let o = run_cmd("verify", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("not undirected"), "{}", stderr(&o));
    assert!(!stderr(&o).contains("assumption"), "{}", stderr(&o));
}

#[test]
fn malformed_config_reports_line_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", "{\"schema\": 1,\n  \"graphs\": {\"n\": 3,,}\n}");
    let o = run_cmd("analyze", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad.json:2:"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(netmarl(&["run"]).status.code(), Some(1));
    assert_eq!(netmarl(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY_CHAIN);
    let o = run_cmd("run", &cfg, dir.path(), &["--variant", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("distributed-lvf"));
    assert_eq!(netmarl(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_rows_have_non_decreasing_group_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "path.json",
        r#"{"schema": 1, "graphs": {"n": 5, "state_edges": [[1, 2], [2, 3], [3, 4], [4, 5]], "clusters": "singletons"},
            "trainer": {"variants": ["distributed-tlvf"], "feedback": ["two-point"], "episodes": 3, "final_window": 2, "seeds": 2},
            "verify": {"gap_samples": 500}}"#,
    );
    let out = dir.path().join("out");
    let o = run_cmd("sweep", &cfg, &out, &["--kappa", "0,1,2,4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# netmarl"));
    let cols: Vec<&str> = lines.next().unwrap().split(',').collect();
    let n0 = cols.iter().position(|c| *c == "n0").unwrap();
    let gap = cols.iter().position(|c| *c == "gap_norm").unwrap();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "1", "2", "4"]);
    let sizes: Vec<usize> = rows.iter().map(|r| r[n0].parse().unwrap()).collect();
    assert!(sizes.windows(2).all(|w| w[0] <= w[1]), "{sizes:?}");
    assert_eq!(sizes[3], 5);
    assert_eq!(rows[3][gap], "0");
}

#[test]
fn sweep_without_kappa_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema": 1, "graphs": {"n": 2}, "trainer": {"variants": ["centralized"], "kappa": []}}"#,
    );
    let o = run_cmd("sweep", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("kappa"));
}

#[test]
fn verify_writes_report_for_small_instance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"schema": 1, "graphs": {"n": 3, "state_edges": [[1, 2], [2, 3]]},
            "verify": {"samples": 4000, "draws": 2000, "gap_samples": 2000, "lipschitz_pairs": 10}}"#,
    );
    let o = run_cmd("verify", &cfg, dir.path(), &[]);
    let report = json(&dir.path().join("verify.json"));
    let reports = report["reports"].as_array().unwrap();
    let failed = reports.iter().filter(|r| r["pass"] == false).count();
    assert_eq!(o.status.code(), Some(if failed == 0 { 0 } else { 3 }));
    for r in reports {
        for key in ["check", "lemma_ref", "claimed", "measured", "pass", "seed"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
    }
    let anchor = reports.iter().find(|r| r["lemma_ref"] == "truncation-residual-anchor").unwrap();
    assert!((anchor["measured"].as_f64().unwrap() - 0.0279936).abs() < 1e-12);
}
