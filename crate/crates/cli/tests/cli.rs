use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cxrseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cxrseq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = cxrseq(args);
    assert!(o.status.success(), "{args:?} failed:\n{}", stderr(&o));
    stdout(&o)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = walkdir::WalkDir::new(dir)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().to_path_buf(), fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

fn value_after<'a>(text: &'a str, key: &str) -> &'a str {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("{key} in {text}"));
    line[key.len()..].trim()
}

#[test]
fn missing_metadata_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let work = dir.path().join("work");
    let o = cxrseq(&[
        "preprocess",
        "--metadata",
        "/nonexistent/Data_Entry.csv",
        "--work-dir",
        work.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[missing-input]:"), "{err}");
    assert!(err.contains("/nonexistent/Data_Entry.csv"), "{err}");
}

#[test]
fn synth_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--seed", "7", "--patients", "5", "--image-size", "32", "--out", out.to_str().unwrap()]);
    }
    assert_eq!(tree(&a), tree(&b));
    for f in ["metadata.csv", "tally.csv", "stages.csv", "spec.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 15);

    let o = cxrseq(&["synth", "--patients", "0", "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[synth]:"), "{}", stderr(&o));
    assert!(stderr(&o).contains("n_patients"));
}

#[test]
fn full_workflow_on_a_synthetic_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let work = dir.path().join("work");
    let cohort_s = cohort.to_str().unwrap();
    let config = dir.path().join("pipeline.toml");
    fs::write(
        &config,
        format!(
            "seed = 3\n[paths]\nmetadata = \"{c}/metadata.csv\"\nimage_root = \"{c}/images\"\nwork_dir = \"{w}\"\n\
             [model]\ninput_size = 32\n[training]\nbatch_size = 16\n",
            c = cohort_s,
            w = work.display()
        ),
    )
    .unwrap();
    let cfg = config.to_str().unwrap();

    let synth = ok(&[
        "synth",
        "--seed",
        "3",
        "--patients",
        "30",
        "--image-size",
        "32",
        "--short-patients",
        "2",
        "--mixed-view-patients",
        "3",
        "--out",
        cohort_s,
    ]);
    assert!(synth.contains("after filter 1: 33, after filter 2: 30"), "{synth}");

    let pre = ok(&["--config", cfg, "preprocess"]);
    assert_eq!(value_after(&pre, "after filter 1:"), "33");
    assert_eq!(value_after(&pre, "after filter 2:"), "30");

    let built = ok(&["--config", cfg, "build-samples"]);
    assert!(built.contains("PA: 30 patients, 30 samples; AP: 0 patients, 0 samples"), "{built}");
    let pa = fs::read(work.join("manifest_pa.csv")).unwrap();
    let ap = fs::read_to_string(work.join("manifest_ap.csv")).unwrap();
    assert_eq!(ap.lines().count(), 1, "AP manifest should be header only");
    ok(&["--config", cfg, "build-samples"]);
    assert_eq!(fs::read(work.join("manifest_pa.csv")).unwrap(), pa);

    let three = ok(&["--config", cfg, "train", "--view", "PA", "--backbone", "tiny", "--no-lstm"]);
    assert_eq!(value_after(&three, "epochs:"), "10");
    let lstm = ok(&["--config", cfg, "train", "--view", "PA", "--backbone", "tiny", "--lstm", "--epochs", "2"]);
    assert_ne!(value_after(&three, "parameters:"), value_after(&lstm, "parameters:"));
    let one = ok(&["--config", cfg, "train", "--view", "PA", "--backbone", "tiny", "--no-lstm", "--branches", "1"]);
    assert!(value_after(&one, "model:").ends_with("_1img"));

    let models = work.join("models");
    let single = models.join("PA_tiny_nolstm_1img.ckpt");
    let triple = models.join("PA_tiny_nolstm_3img.ckpt");
    let eval = ok(&["--config", cfg, "evaluate", single.to_str().unwrap(), triple.to_str().unwrap()]);
    assert!(eval.contains("PA_tiny_nolstm_3img: "), "{eval}");
    let reports = work.join("reports");
    for f in [
        "PA_tiny_nolstm_3img.csv",
        "PA_tiny_nolstm_3img_roc.svg",
        "PA_tiny_nolstm_3img_loss.svg",
        "PA_tiny_nolstm_1img.csv",
        "auc_tables.txt",
        "comparison.txt",
    ] {
        assert!(reports.join(f).exists(), "{f}");
    }

    let o = cxrseq(&["--config", cfg, "evaluate", triple.to_str().unwrap(), "--view", "AP"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error[view-mismatch]:"), "{err}");
    assert!(err.contains("PA_tiny_nolstm_3img") && err.contains("AP_tiny_nolstm_3img"), "{err}");
}
