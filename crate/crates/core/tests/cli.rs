use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use margin_fsl::datasets::{load_csv, DataFiles};

const SMALL: &str = r#"
seed = 3

[model]
widths = [16, 8]

[loss]
kind = "task_relevant"

[train]
episodes = 40
val_every = 20
val_episodes = 10

[eval]
episodes = 60
gfsl_shots = [1, 5]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_margin-fsl"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.toml");
    fs::write(&config, SMALL).unwrap();
    Fixture {
        _dir: dir,
        root,
        config,
    }
}

fn train_into(f: &Fixture, name: &str) -> PathBuf {
    let out = f.root.join(name);
    let o = run(&["train", "--config", path(&f.config), "--out", path(&out)]);
    assert!(o.status.success());
    out
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let f = fixture();
    let out = f.root.join("data");
    let o = run(&["gen-data", "--config", path(&f.config), "--out", path(&out)]);
    assert!(o.status.success());
    let (ds, store) = load_csv(&DataFiles::in_dir(&out)).unwrap();
    assert_eq!(ds.samples().len(), 30 * 60);
    assert_eq!(ds.n_classes(), 30);
    assert_eq!(store.len(), 30);
    let features = fs::read_to_string(out.join("features.csv")).unwrap();
    assert_eq!(features.lines().count(), 30 * 60 + 1);
}

#[test]
fn seed_flag_changes_generated_data() {
    let f = fixture();
    let (a, b, c) = (f.root.join("a"), f.root.join("b"), f.root.join("c"));
    for (dir, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let o = run(&[
            "gen-data",
            "--config",
            path(&f.config),
            "--seed",
            seed,
            "--out",
            path(dir),
        ]);
        assert!(o.status.success());
    }
    let read = |d: &Path| fs::read(d.join("features.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn train_and_eval_artifacts_are_byte_identical_across_runs() {
    let f = fixture();
    let (a, b) = (train_into(&f, "a"), train_into(&f, "b"));
    for file in ["checkpoint.json", "train_log.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 41);

    let ck = a.join("checkpoint.json");
    for (cmd, files) in [
        ("eval", ["eval.csv", "eval.txt"]),
        ("gfsl-eval", ["gfsl.csv", "gfsl.txt"]),
    ] {
        let (x, y) = (
            f.root.join(format!("{cmd}-x")),
            f.root.join(format!("{cmd}-y")),
        );
        for dir in [&x, &y] {
            let o = run(&[cmd, "--checkpoint", path(&ck), "--out", path(dir)]);
            assert!(o.status.success(), "{cmd}");
        }
        for file in files {
            assert_eq!(
                fs::read(x.join(file)).unwrap(),
                fs::read(y.join(file)).unwrap(),
                "{file}"
            );
        }
    }
    let eval = fs::read_to_string(f.root.join("eval-x/eval.csv")).unwrap();
    assert!(eval.starts_with("n_episodes,mean,ci95\n60,"), "{eval}");
    let gfsl = fs::read_to_string(f.root.join("gfsl-eval-x/gfsl.csv")).unwrap();
    assert_eq!(gfsl.lines().count(), 3);
}

#[test]
fn json_output_parses() {
    let f = fixture();
    let ck = train_into(&f, "t").join("checkpoint.json");
    let o = run(&[
        "eval",
        "--checkpoint",
        path(&ck),
        "--out",
        path(&f.root.join("e")),
        "--json",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["n_episodes"], 60);
    assert!(v["mean"].as_f64().unwrap() > 20.0);
    assert_eq!(v["per_episode"].as_array().unwrap().len(), 60);
}

#[test]
fn gradcheck_passes_and_writes_its_report() {
    let f = fixture();
    let out = f.root.join("g");
    let o = run(&[
        "gradcheck",
        "--config",
        path(&f.config),
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);

    let ck = train_into(&f, "t").join("checkpoint.json");
    let o = run(&["gradcheck", "--checkpoint", path(&ck), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn impossible_gradcheck_tolerance_exits_one() {
    let f = fixture();
    let strict = f.root.join("strict.toml");
    fs::write(
        &strict,
        format!("{SMALL}\n[gradcheck]\ntolerance = 1e-300\nfloor = 1e-300\n"),
    )
    .unwrap();
    let o = run(&[
        "gradcheck",
        "--config",
        path(&strict),
        "--out",
        path(&f.root),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_agrees_on_a_hundred_episodes() {
    let o = run(&["oracle", "--episodes", "100", "--seed", "5", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["episodes"], 100);
    assert_eq!(v["passed"], true);
}

#[test]
fn config_errors_name_the_key_and_exit_two() {
    let f = fixture();
    let bad = f.root.join("bad.toml");
    fs::write(&bad, "seed = 1\n\n[train]\nepisodez = 5\n").unwrap();
    let o = bin()
        .args(["train", "--config", path(&bad), "--out", path(&f.root)])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("episodez") && err.contains("line 4"), "{err}");

    let o = bin()
        .args(["eval", "--out", path(&f.root)])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .args(["eval", "--checkpoint", path(&f.root.join("none.json"))])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
}
