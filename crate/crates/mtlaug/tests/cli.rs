mod common;

use common::{mtlaug, stdout_path, write_config};

#[test]
fn synth_then_eval_loso_from_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("runs");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let r = mtlaug(&["synth", "--config", c, "--out", o]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let synth_dir = stdout_path(&r);
    let manifest = synth_dir.join("synth").join("manifest.csv");
    assert!(manifest.exists());
    let m = format!("corpus.manifest={}", manifest.display());

    let r = mtlaug(&["eval-loso", "--config", c, "--out", o, "--set", &m]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let dir = stdout_path(&r);
    assert!(dir.ends_with("eval-loso"));
    let hash = dir.parent().unwrap().file_name().unwrap().to_str().unwrap().to_string();
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "protocol,arm,repeat,fold,uar,config_hash,seed");
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 3);
    for row in rows {
        assert!(row.ends_with(&format!(",{},3", hash)), "{row}");
    }
    let stderr = String::from_utf8_lossy(&r.stderr);
    for line in stderr.lines() {
        serde_json::from_str::<serde_json::Value>(line).expect("log lines are JSON");
    }

    let r = mtlaug(&["report", "--config", c, "--out", o, "--set", &m]);
    assert!(r.status.success());
    let tables = std::fs::read_to_string(stdout_path(&r).join("tables.md")).unwrap();
    assert!(tables.contains("eval-loso"));
}

#[test]
fn schema_violation_exits_2_with_field_path() {
    let r = mtlaug(&["eval-loso", "--out", "/nonexistent/x", "--set", "train.lr=fast"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("train.lr"));

    let r = mtlaug(&["eval-loso", "--out", "/nonexistent/x", "--set", "train.learning_rate=0.1"]);
    assert_eq!(r.status.code(), Some(2));

    let r = mtlaug(&["eval-loso", "--out", "/nonexistent/x", "--set", "model.ablation=9"]);
    assert_eq!(r.status.code(), Some(2));

    let r = mtlaug(&["no-such-command"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_corpus_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tmp.path().to_str().unwrap();
    let r = mtlaug(&["eval-loso", "--out", o, "--set", "corpus.manifest=/nonexistent/manifest.csv"]);
    assert_eq!(r.status.code(), Some(3));
    let last = String::from_utf8_lossy(&r.stderr).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert_eq!(v["level"], "error");
}

#[test]
fn zero_budget_attack_matches_clean() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = tmp.path().join("runs");
    let r = mtlaug(&[
        "eval-attack",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        o.to_str().unwrap(),
        "--set",
        "protocol.attack_eps=0",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = std::fs::read_to_string(stdout_path(&r).join("report.json")).unwrap();
    let run: mtlaug::report::RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(run.reports.len(), 3);
    for rep in &run.reports[1..] {
        assert_eq!(rep.mean_uar, run.reports[0].mean_uar, "{}", rep.arm);
    }
}

#[test]
fn identical_config_and_seed_give_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let mut dirs = Vec::new();
    for run in ["a", "b"] {
        let o = tmp.path().join(run);
        let r = mtlaug(&["study-aug", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        dirs.push(stdout_path(&r));
    }
    for f in ["metrics.csv", "fig_aug.csv"] {
        let a = std::fs::read(dirs[0].join(f)).unwrap();
        let b = std::fs::read(dirs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn train_resumes_from_its_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = tmp.path().join("runs");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--out", o.to_str().unwrap()];
    let r = mtlaug(&args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let dir = stdout_path(&r);
    assert!(dir.join("checkpoint").join("index.json").exists());
    let first = std::fs::read(dir.join("history.csv")).unwrap();
    let metrics = std::fs::read(dir.join("metrics.csv")).unwrap();

    let r = mtlaug(&args);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("\"resume\""));
    assert_eq!(std::fs::read(dir.join("history.csv")).unwrap(), first);
    assert_eq!(std::fs::read(dir.join("metrics.csv")).unwrap(), metrics);
}
