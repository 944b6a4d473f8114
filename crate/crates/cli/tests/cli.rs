use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acros_cli::manifest::{sha256_file, ExperimentManifest};

const STAGES: [&str; 9] = ["train-base", "induce", "convert-backpack", "diagnose-svd", "eval-wsd", "eval-steer", "adapt", "eval-retrieval", "report"];

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml")
}

fn acros(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acros")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("cfg.toml");
    let base = std::fs::read_to_string(demo_config()).unwrap();
    std::fs::write(&p, format!("{base}\n{extra}")).unwrap();
    p
}

fn run_stage(stage: &str, config: &Path, out: &Path) {
    let o = acros(&[stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert!(o.status.success(), "{stage}: {}", stderr(&o));
}

#[test]
fn out_of_range_alpha_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[induction]\nalpha = 1.5\n").unwrap();
    let o = acros(&["induce", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("induction.alpha"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[steering]\nbost = 1.2\n").unwrap();
    let o = acros(&["eval-steer", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bost"), "{}", stderr(&o));
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    let o = acros(&["induce"]);
    assert_eq!(o.status.code(), Some(2));
    let o = acros(&["induce", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_1_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = demo_config();
    let o = acros(&["induce", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("base.ckpt"), "{}", stderr(&o));
    let o = acros(&["report", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn demo_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = demo_config();
    run_stage("train-base", &cfg, &out);
    let data: Vec<PathBuf> = std::fs::read_dir(out.join("data")).unwrap().map(|e| e.unwrap().path()).collect();
    let before: Vec<String> = data.iter().map(|p| sha256_file(p).unwrap()).collect();
    let base_hash = sha256_file(&out.join("checkpoints/base.ckpt")).unwrap();
    for stage in &STAGES[1..] {
        run_stage(stage, &cfg, &out);
    }
    // later stages only read the data files and the base checkpoint
    let after: Vec<String> = data.iter().map(|p| sha256_file(p).unwrap()).collect();
    assert_eq!(before, after);
    assert_eq!(base_hash, sha256_file(&out.join("checkpoints/base.ckpt")).unwrap());

    for stage in STAGES {
        let m = ExperimentManifest::load(&out.join(format!("manifest/{stage}.json"))).unwrap();
        assert_eq!(m.subcommand, stage);
        assert_eq!(m.seed, 7);
        for (name, text) in &m.tables {
            assert_eq!(&std::fs::read_to_string(out.join(format!("tables/{name}.txt"))).unwrap(), text);
        }
        for (path, hash) in &m.artifacts {
            if !path.starts_with("tables/report") {
                assert_eq!(&sha256_file(&out.join(path)).unwrap(), hash, "{stage}: {path}");
            }
        }
    }
    let induce = ExperimentManifest::load(&out.join("manifest/induce.json")).unwrap();
    assert_eq!(induce.inputs["checkpoints/base.ckpt"], base_hash);

    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    for heading in ["Conversion bottleneck", "Word sense disambiguation", "Lexical steering", "Cipher adaptation"] {
        assert!(report.contains(&format!("== {heading}")), "{heading}");
    }
    assert!(!report.contains("not run"));
    for row in ["base (frozen)", "ACROS", "Backpack (cpt)", "Backpack (distill)", "Backpack (distill-frozen)", "target-best", "dense-coordinate", "gloss-likelihood"] {
        assert!(report.contains(row), "{row}");
    }
}

#[test]
fn stages_rerun_in_isolation_and_seed_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = demo_config();
    for stage in ["train-base", "induce", "eval-steer"] {
        run_stage(stage, &cfg, &out);
    }
    let first = std::fs::read_to_string(out.join("tables/steer.txt")).unwrap();
    run_stage("eval-steer", &cfg, &out);
    assert_eq!(first, std::fs::read_to_string(out.join("tables/steer.txt")).unwrap());

    let other = dir.path().join("seeded");
    let o = acros(&["train-base", "--config", cfg.to_str().unwrap(), "--out", other.to_str().unwrap(), "--seed", "11", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = ExperimentManifest::load(&other.join("manifest/train-base.json")).unwrap();
    assert_eq!(m.seed, 11);
    assert!(m.config.contains("seed = 11"));
    assert_ne!(sha256_file(&other.join("data/train.txt")).unwrap(), sha256_file(&out.join("data/train.txt")).unwrap());
}

#[test]
fn external_data_directory_is_read_not_regenerated() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    run_stage("train-base", &demo_config(), &first);
    let cfg = write_config(dir.path(), "");
    let cfg_text = std::fs::read_to_string(&cfg).unwrap().replace("[paths]", &format!("[paths]\ndata = {:?}", first.join("data")));
    std::fs::write(&cfg, cfg_text).unwrap();
    let second = dir.path().join("second");
    run_stage("train-base", &cfg, &second);
    assert!(!second.join("data").exists());
    assert_eq!(sha256_file(&first.join("checkpoints/base.ckpt")).unwrap(), sha256_file(&second.join("checkpoints/base.ckpt")).unwrap());
    let m = ExperimentManifest::load(&second.join("manifest/train-base.json")).unwrap();
    assert!(m.inputs.keys().any(|k| k.ends_with("train.txt")));
}
