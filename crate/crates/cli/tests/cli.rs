use std::path::Path;
use std::process::{Command, Output};

fn dudes(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dudes"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value_of(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim().to_string())
    })
}

#[test]
fn show_config_prints_every_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = dudes(&["show-config"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(value_of(&text, "teacher.members").as_deref(), Some("10"));
    assert_eq!(value_of(&text, "scene.classes").as_deref(), Some("6"));
    for key in dudes::config::ExperimentConfig::KEYS {
        assert!(value_of(&text, key).is_some(), "{key} missing");
    }
}

#[test]
fn set_overrides_file_and_flags_override_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# local\ntrain.epochs = 7\nseed = 3\nteacher.members = 4\n").unwrap();
    let path = cfg.to_str().unwrap();

    let o = dudes(&["show-config", "--config", path], dir.path());
    let text = stdout(&o);
    assert_eq!(value_of(&text, "train.epochs").as_deref(), Some("7"));
    assert_eq!(value_of(&text, "seed").as_deref(), Some("3"));

    let o = dudes(
        &["show-config", "--config", path, "--set", "train.epochs=9", "--set", "seed=5", "--members", "6"],
        dir.path(),
    );
    let text = stdout(&o);
    assert_eq!(value_of(&text, "train.epochs").as_deref(), Some("9"));
    assert_eq!(value_of(&text, "seed").as_deref(), Some("5"));
    assert_eq!(value_of(&text, "teacher.members").as_deref(), Some("6"));

    let o = dudes(&["show-config", "--config", path, "--set", "seed=5", "--seed", "8"], dir.path());
    assert_eq!(value_of(&stdout(&o), "seed").as_deref(), Some("8"));
}

#[test]
fn unknown_key_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = dudes(&["show-config", "--set", "train.epoch=3"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("train.epoch"), "{err}");

    std::fs::write(dir.path().join("bad.cfg"), "seed = 1\nbogus.key = 2\n").unwrap();
    let o = dudes(&["show-config", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn missing_config_file_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = dudes(&["show-config", "--config", "nope.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn eval_before_student_reports_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let tiny = [
        "--set", "scene.size=32",
        "--set", "data.train=4",
        "--set", "data.test=2",
        "--set", "model.encoder_widths=2,3",
        "--set", "model.decoder_width=3",
        "--set", "model.input_size=32",
        "--set", "teacher.epochs=1",
        "--members", "2",
        "--out", "run",
    ];
    for stage in ["gen-data", "train-teacher"] {
        let mut args = vec![stage];
        args.extend(tiny);
        let o = dudes(&args, dir.path());
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
        assert!(stdout(&o).starts_with(&format!("{stage}: done")), "{}", stdout(&o));
    }
    let mut args = vec!["gen-data"];
    args.extend(tiny);
    assert!(stdout(&dudes(&args, dir.path())).starts_with("gen-data: up to date"));

    let mut args = vec!["eval"];
    args.extend(tiny);
    let o = dudes(&args, dir.path());
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("missing student checkpoint"), "{err}");
    assert!(dir.path().join("run/teacher/member_01.ckpt").exists());
}
