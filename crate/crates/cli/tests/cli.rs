use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn visreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visreg"))
        .args(args)
        .env_remove("VISREG_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    let text = format!(
        "seed = 3\noutput = {out}\n\n[dataset]\nname = mnist\ndir = mnist-5k\ntrain_subset = 300\ntest_subset = 100\n\n\
         [architecture]\nlayers = input(28x28) -- fc(8) -- output(10)\nactivation = tanh\n\n\
         [regularizers]\nmu1 = 0.001\nmu2 = 0.01\nlambda = 0.01\n\n\
         [trainer]\nlr = 0.05\nepochs = {epochs}\nbatch_size = 50\ncheckpoint_every = 1\n",
        out = dir.join("run").display()
    );
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn train_tiny(dir: &Path) -> Output {
    let cfg = tiny_config(dir, 2);
    let data = data_dir();
    visreg(&["train", cfg.to_str().unwrap(), "--data-dir", data.to_str().unwrap()])
}

#[test]
fn verify_passes_and_flip_mutation_fails() {
    let ok = visreg(&["verify"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    let text = stdout(&ok);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{text}");

    let bad = visreg(&["verify", "--inject-flip-mutation"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).lines().any(|l| l.starts_with("FAIL") && l.contains("vl2_gradient")));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let out = visreg(&["train", cfg.to_str().unwrap(), "--data-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file not found"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[trainer]\nepochs = many\n").unwrap();
    let out = visreg(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
    let out = visreg(&["train", dir.path().join("absent.cfg").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_training_run_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("seed 3"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("final test accuracy:")), "{text}");

    let run = dir.path().join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,lr,train_loss"));
    for name in ["config.cfg", "timing.csv", "epoch-0001.ckpt", "final.ckpt"] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    // The last epoch is saved once, as final.ckpt.
    assert!(!run.join("epoch-0002.ckpt").exists());

    // A second seeded run reproduces the metrics byte for byte.
    let again = tempfile::tempdir().unwrap();
    assert!(train_tiny(again.path()).status.success());
    assert_eq!(std::fs::read_to_string(again.path().join("run/metrics.csv")).unwrap(), metrics);
}

#[test]
fn visualize_exports_images_and_rejects_bad_counts() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train_tiny(dir.path()).status.success());
    let ckpt = dir.path().join("run/final.ckpt");
    let out_dir = dir.path().join("vis");
    let out = visreg(&["visualize", ckpt.to_str().unwrap(), out_dir.to_str().unwrap(), "--count", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("loss_table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next(), Some("image,vl1,vl2"));
    let pgms = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 6);

    let too_many = visreg(&["visualize", ckpt.to_str().unwrap(), out_dir.to_str().unwrap(), "--count", "9"]);
    assert_eq!(too_many.status.code(), Some(2));
    let png = visreg(&[
        "visualize",
        ckpt.to_str().unwrap(),
        dir.path().join("png").to_str().unwrap(),
        "--count",
        "1",
        "--format",
        "png",
    ]);
    assert!(png.status.success());
    assert!(dir.path().join("png/loss_table.csv").exists());
}

#[test]
fn bench_reports_all_three_timings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1);
    let out = visreg(&["bench", cfg.to_str().unwrap(), "--reps", "3", "--widths", "8,16", "--batches", "10,20"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for col in ["t_vr", "t_l2", "t_backprop"] {
        assert!(text.contains(col), "{col} missing from:\n{text}");
    }
}
