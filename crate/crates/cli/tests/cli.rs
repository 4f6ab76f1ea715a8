use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use markovgen::table::read_csv;

fn markovgen(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_markovgen")).args(args).current_dir(dir).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_OU: &str = "[ou]\ndraws = 800\ntrajectories = 3\n";

#[test]
fn malformed_config_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "seed = 1\n[sample]\nsampler = \"warp\"\n");
    let out = markovgen(&["sample-path", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 3"), "{err}");

    let cfg = write_config(dir.path(), "typo.toml", "[grid]\nbudgte = 10\n");
    let out = markovgen(&["train", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("budgte"));
}

#[test]
fn invalid_values_and_kind_mismatch_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "pmf.toml", "[target]\nkind = \"finite\"\npmf = [0.7, 0.7]\n");
    assert_eq!(markovgen(&["sample-path", "--config", &cfg], dir.path()).status.code(), Some(2));
    let cfg = write_config(dir.path(), "kind.toml", "kind = \"rate\"\n");
    assert_eq!(markovgen(&["ou-figures", "--config", &cfg], dir.path()).status.code(), Some(2));
    assert_eq!(markovgen(&["run"], dir.path()).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(markovgen(&["verify", "--config", missing.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_markovgen"))
        .args(["ou-figures", "--out", "o"])
        .env("MARKOVGEN_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ou_figures_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ou.toml", SMALL_OU);
    for o in ["a", "b"] {
        let out = markovgen(&["ou-figures", "--config", &cfg, "--seed", "7", "--out", o], dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for f in ["trajectories.csv", "histogram.csv", "moments.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
        assert!(!a.contains(&b'\r'));
    }
    let (header, rows) = read_csv(&dir.path().join("a/moments.csv")).unwrap();
    assert_eq!(header, ["quantity", "empirical", "exact"]);
    assert!(rows.iter().any(|r| r[0] == "variance"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn seed_changes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ou.toml", SMALL_OU);
    for (o, s) in [("a", "1"), ("b", "2")] {
        assert!(markovgen(&["ou-figures", "--config", &cfg, "--seed", s, "--out", o], dir.path()).status.success());
    }
    let a = fs::read(dir.path().join("a/histogram.csv")).unwrap();
    assert_ne!(a, fs::read(dir.path().join("b/histogram.csv")).unwrap());
}

#[test]
fn run_dispatches_on_config_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "ou.toml", &format!("kind = \"ou-figures\"\nout = \"from-config\"\n{SMALL_OU}"));
    let out = markovgen(&["run", "--config", &cfg], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("from-config/histogram.csv").exists());
}

#[test]
fn sample_path_samplers_stay_within_band() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("flow", "[sample]\nsampler = \"flow\"\nn = 2000\n[grid]\nblocks = 8\nt_end = 0.95\n"),
        ("sde", "[sample]\nsampler = \"sde\"\nn = 2000\n[path]\nkind = \"vanilla-fm\"\ndiffusion = 0.5\n[grid]\nblocks = 8\nt_end = 0.9\n"),
        ("jump", "[sample]\nsampler = \"jump\"\nn = 4000\n[path]\nkind = \"mixture\"\n[grid]\nt_end = 0.8\n"),
        ("ctmc", "[sample]\nsampler = \"ctmc\"\nn = 4000\n[target]\nkind = \"finite\"\npmf = [0.2, 0.3, 0.5]\n[path]\nkind = \"mixture\"\n[grid]\nt_end = 0.8\n"),
    ];
    for (name, text) in cases {
        let cfg = write_config(dir.path(), &format!("{name}.toml"), text);
        let out = markovgen(&["sample-path", "--config", &cfg, "--out", name], dir.path());
        assert_eq!(out.status.code(), Some(0), "{name}: {}{}", stderr(&out), String::from_utf8_lossy(&out.stdout));
        let (header, rows) = read_csv(&dir.path().join(name).join("comparison.csv")).unwrap();
        assert_eq!(header, ["statistic", "value", "band", "within_band"]);
        assert!(rows.iter().all(|r| r[3] == "true"), "{name}: {rows:?}");
    }
}

#[test]
fn small_training_run_writes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let text = "[grid]\nbudget = 256\n[train]\nn = 256\neval_points = 500\n[train.config]\nsteps = 40\ncertify_points = 50\n";
    let cfg = write_config(dir.path(), "train.toml", text);
    let out = markovgen(&["train", "--config", &cfg, "--out", "t"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let t = dir.path().join("t");
    for f in ["curve.csv", "blocks.csv", "eval.csv", "block_00.ckpt"] {
        assert!(t.join(f).exists(), "{f}");
    }
    let ckpt = fs::read(t.join("block_00.ckpt")).unwrap();
    assert!(markovgen_core::nets::ConstrainedNet::from_bytes(&ckpt).is_ok());
}
