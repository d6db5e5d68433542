use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conformal_kit::io::{self, load_records, read_coverage_csv, snapshot, RecordFormat};
use conformal_kit::model::{LinearClassifier, TrainConfig};
use conformal_kit::synth::{generate, Scenario};
use conformal_kit::Split;

const SMALL: &str = r#"
seeds = [0, 1]
alphas = [0.1, 0.2]
n_total = 1000

[scenario]
kind = "covariate-shift"
noise = [0.6, 0.8, 1.2, 2.0]
test_weights = [0.1, 0.15, 0.3, 0.45]

[model]
epochs = 100

[verify]
n_mc = 500

[[calibrators]]
kind = "naive"

[[calibrators]]
name = "oracle"
kind = "covariate"
ratio = "oracle"

[[calibrators]]
kind = "kmeans"
k = 3

[[calibrators]]
kind = "ncp"
k = 30
"#;

fn cli(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conformal-kit"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn staged_run_matches_one_shot_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let staged = dir.path().join("staged");
    for stage in ["generate", "train", "calibrate", "predict", "sweep", "verify", "report"] {
        let o = cli(&[stage], &config, &staged);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let whole = dir.path().join("whole");
    assert!(cli(&["run"], &config, &whole).status.success());
    assert_eq!(snapshot(&staged).unwrap(), snapshot(&whole).unwrap());

    let files = snapshot(&whole).unwrap();
    for expected in ["config.toml", "aggregate.csv", "coverage.csv", "decomposition.jsonl", "summary.md", "seed-1/predictions/ncp.jsonl", "seed-0/calibrators/oracle.json"] {
        assert!(files.contains_key(Path::new(expected)), "missing {expected}");
    }
    let rows = read_coverage_csv(&whole.join("coverage.csv")).unwrap();
    assert_eq!(rows.len(), 2 * 4 * 2);
    assert!(rows.iter().all(|(_, _, r)| (0.0..=1.0).contains(&r.coverage) && r.avg_set_size <= 4.0));
}

#[test]
fn seed_flag_runs_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_conformal-kit"))
        .args(["run", "--seed", "7", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("seed-7").is_dir());
    assert!(!out.join("seed-0").exists());
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["alphas = [1.5]", "seeds = []", "bogus = 1", "[[calibrators]]\nkind = \"covariate\"\nratio = \"oracle\""] {
        let config = write_config(dir.path(), text);
        let o = cli(&["run"], &config, &dir.path().join("out"));
        assert_eq!(o.status.code(), Some(2), "{text}: {}", stderr(&o));
        assert!(stderr(&o).contains("config stage failed"));
    }
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_conformal-kit"))
        .args(["generate", "--config"])
        .arg(&config)
        .env("CONFORMAL_KIT_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_io_errors_tagged_with_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let o = cli(&["calibrate"], &config, &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(10));
    assert!(stderr(&o).contains("calibrate stage failed"), "{}", stderr(&o));
    let o = cli(&["run"], &dir.path().join("nope.toml"), &dir.path().join("x"));
    assert_eq!(o.status.code(), Some(10));
}

#[test]
fn degenerate_training_data_fails_in_train_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert!(cli(&["generate", "--seed", "0"], &config, &out).status.success());
    // every training label rewritten to class 0
    let train = out.join("seed-0/data/train.jsonl");
    let mut records = load_records(&train, RecordFormat::Jsonl).unwrap();
    for r in &mut records {
        r.label = Some(0);
    }
    io::save_records(&train, &records, RecordFormat::Jsonl).unwrap();
    let o = cli(&["train", "--seed", "0"], &config, &out);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn report_rejects_results_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = write_config(dir.path(), SMALL);
    assert!(cli(&["run"], &config, &out).status.success());
    let config = write_config(dir.path(), &SMALL.replace("alphas = [0.1, 0.2]", "alphas = [0.1, 0.3]"));
    let o = cli(&["report"], &config, &out);
    assert_eq!(o.status.code(), Some(9), "{}", stderr(&o));
}

#[test]
fn ingested_records_are_calibrated_and_swept() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate(&Scenario::iid(), 2000, 3).unwrap();
    let d = &generated.dataset;
    let model = LinearClassifier::train(&d.split(Split::Train), 4, &TrainConfig::default(), 3).unwrap();
    let scored = |s| d.split(s).iter().map(|r| model.featurize(r).unwrap()).collect::<Vec<_>>();
    io::save_records(&dir.path().join("cal.csv"), &scored(Split::Calibration), RecordFormat::Csv).unwrap();
    io::save_records(&dir.path().join("test.jsonl"), &scored(Split::Test), RecordFormat::Jsonl).unwrap();
    let config = write_config(
        dir.path(),
        "seeds = [0]\nalphas = [0.1]\n[ingest]\ncalibration = \"cal.csv\"\ntest = \"test.jsonl\"\n[[calibrators]]\nkind = \"naive\"\n[[calibrators]]\nkind = \"ncp\"\nk = 50\n",
    );
    let out = dir.path().join("out");
    let o = cli(&["run"], &config, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.join("seed-0/data").exists());
    assert!(!out.join("decomposition.jsonl").exists());
    let rows = read_coverage_csv(&out.join("seed-0/coverage.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].2.coverage > 0.8, "{:?}", rows[0]);
}
