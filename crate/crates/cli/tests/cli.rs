use std::path::Path;
use std::process::{Command, Output};

fn mf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mf"))
        .args(args)
        .env("MF_LOG_LEVEL", "warn")
        .output()
        .expect("run mf")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, extra: &[&str]) -> String {
    let world = dir.join("world");
    let mut args = vec!["synth", "--out", world.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = mf(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    world.join("run.json").to_string_lossy().into_owned()
}

#[test]
fn stages_compose_on_synthetic_world() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path(), &[]);
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    for stage in ["probe", "select", "forecast", "evaluate"] {
        let o = mf(&[stage, "--config", &run, "--out", out, "--personas", "500", "--templates", "2"]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert!(Path::new(out).join(stage).join("meta.json").exists());
    }
    let rates = std::fs::read_to_string(Path::new(out).join("evaluate/win_rates.csv")).unwrap();
    assert!(rates.starts_with("group_by,group,wins,total,rate"));
}

#[test]
fn pipeline_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path(), &["--corruption", "0.5"]);
    let mut dirs = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("out{workers}"));
        let o = mf(&[
            "--workers", workers, "pipeline", "--config", &run, "--out", out.to_str().unwrap(), "--personas", "300",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        dirs.push(out);
    }
    for stage in ["forecast/activations.mfw", "forecast/distributions.csv", "evaluate/win_rates.csv", "select/meta.json"] {
        assert_eq!(
            std::fs::read(dirs[0].join(stage)).unwrap(),
            std::fs::read(dirs[1].join(stage)).unwrap(),
            "{stage}"
        );
    }
}

#[test]
fn missing_corpus_is_a_user_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path(), &[]);
    let corpus = dir.path().join("world/corpus.csv");
    std::fs::remove_file(&corpus).unwrap();
    let o = mf(&["probe", "--config", &run, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus.csv"), "{}", stderr(&o));
}

#[test]
fn bad_flag_values_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path(), &[]);
    let out = dir.path().join("out");
    let o = mf(&["forecast", "--config", &run, "--out", out.to_str().unwrap(), "--personas", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = mf(&["pipeline", "--config", &run, "--norm", "cubic"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mf(&["synth", "--out", out.to_str().unwrap(), "--corruption=-0.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn evaluate_without_survey_fails() {
    let dir = tempfile::tempdir().unwrap();
    let run = synth(dir.path(), &[]);
    let text = std::fs::read_to_string(&run).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v.as_object_mut().unwrap().remove("survey");
    std::fs::write(&run, v.to_string()).unwrap();
    let o = mf(&["evaluate", "--config", &run, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("survey"));
}
