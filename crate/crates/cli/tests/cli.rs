use std::path::Path;
use std::process::{Command, Output};

fn fairtat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairtat")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    let text = format!(
        "# three-class scenario\nrun.seeds = 4\noutput.dir = {}\ndataset.n_per_class = 30\n\
         train.epochs = 5\ntrain.batch_size = 32\ntrain.hidden = 8\ntrain.learning_rate = 0.05\n\
         attack.num_steps = 3\neval.num_steps = 3\neval.severities = 1, 3\n{extra}",
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn dry_run_prints_defaults_and_runs_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("empty.cfg");
    std::fs::write(&cfg, "").unwrap();
    let out = fairtat(&["run", cfg.to_str().unwrap(), "--dry-run", "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains(&format!("attack.epsilon = {}", 8.0 / 255.0)), "{text}");
    assert!(text.contains("train.lambda1 = 0.5"));
    assert!(text.contains("run.mode = fair_tat"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn config_errors_name_line_and_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "run.seeds = 1\ntrain.epochs = many\n").unwrap();
    let out = fairtat(&["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 2") && err.contains("train.epochs"), "{err}");
}

#[test]
fn paired_runs_eval_and_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let cfg_s = cfg.to_str().unwrap();
    for mode in ["fair_tat", "untargeted_at"] {
        let out = fairtat(&["run", cfg_s, "--mode", mode]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("seed 4  epoch")).count(), 5);
        let dir = tmp.path().join("out").join(mode);
        for f in ["report.json", "per_class.csv", "cfps.csv", "corruption.csv", "checkpoints/seed4_averaged.ckpt"] {
            assert!(dir.join(f).exists(), "{mode}/{f}");
        }
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["runs"][0]["mode"], mode);
        assert_eq!(report["runs"][0]["history"].as_array().unwrap().len(), 5);
        let cfps = std::fs::read_to_string(dir.join("cfps.csv")).unwrap();
        assert!(cfps.starts_with("class,cfps\n0,"));

        let out = fairtat(&["verify", dir.join("report.json").to_str().unwrap()]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).starts_with("verified 1 run(s)"));
    }

    let ckpt = tmp.path().join("out/fair_tat/checkpoints/seed4_final.ckpt");
    let out = fairtat(&["eval", ckpt.to_str().unwrap(), cfg_s]);
    assert!(out.status.success(), "{}", stderr(&out));
    let evaluated: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out/fair_tat/report.json")).unwrap()).unwrap();
    assert_eq!(evaluated["clean"], report["runs"][0]["models"][0]["clean"]);
    assert_eq!(evaluated["robust"], report["runs"][0]["models"][0]["robust"]);
}

#[test]
fn seed_override_and_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "eval.corruptions = pixelate\n");
    let out = fairtat(&["run", cfg.to_str().unwrap(), "--seed", "9", "--quiet"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("seed 9 failed"), "{}", stderr(&out));
    let report = std::fs::read_to_string(tmp.path().join("out/fair_tat/report.json")).unwrap();
    assert!(report.contains("\"status\": \"failed\""));
}

#[test]
fn verify_rejects_missing_report() {
    let out = fairtat(&["verify", "/nonexistent/report.json"]);
    assert!(!out.status.success());
}
