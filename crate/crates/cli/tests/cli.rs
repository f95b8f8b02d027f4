use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tumorseg::LabelVolume;

fn tumorseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumorseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tumorseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phantom_through_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["phantom", "--out", s(d), "--count", "2", "--seed", "3"]);
    let vol = d.join("phantom_0003.mmv");
    let truth = d.join("phantom_0003_labels.mmv");
    assert!(vol.exists() && truth.exists() && d.join("phantom_0004.mmv").exists());

    let norm = d.join("norm.mmv");
    ok(&["preprocess", "--input", s(&vol), "--out", s(&norm)]);

    let fused = d.join("fused.mmv");
    ok(&["fuse", "--axial", s(&truth), "--coronal", s(&truth), "--sagittal", s(&truth), "--out", s(&fused)]);
    assert_eq!(fs::read(&fused).unwrap(), fs::read(&truth).unwrap());

    let cleaned = d.join("clean.mmv");
    let mut args = vec!["postprocess", "--labels", s(&truth), "--volume", s(&norm), "--out", s(&cleaned)];
    for k in ["1", "2", "3", "4", "5", "6"] {
        args.extend(["--skip-step", k]);
    }
    ok(&args);
    assert_eq!(LabelVolume::load(&cleaned).unwrap(), LabelVolume::load(&truth).unwrap());
    ok(&["postprocess", "--labels", s(&truth), "--volume", s(&norm), "--out", s(&cleaned), "--theta", "theta31=0.2"]);

    let report = d.join("report.json");
    ok(&["evaluate", "--pred", s(&truth), "--truth", s(&truth), "--out", s(&report)]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let text = json.to_string();
    for region in ["complete", "core", "enhancing"] {
        assert!(text.contains(region), "{text}");
    }
}

#[test]
fn failures_exit_nonzero_with_a_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = tumorseg(&["preprocess", "--input", s(&dir.path().join("missing.mmv")), "--out", s(&dir.path().join("x.mmv"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("preprocess"), "{err}");

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"pool": 2}"#).unwrap();
    let out = tumorseg(&["segment", "--config", s(&bad), "--input", s(&dir.path().join("v.mmv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = tumorseg(&["postprocess", "--labels", "a", "--volume", "b", "--out", "c", "--theta", "nonsense"]);
    assert!(!out.status.success());
}

#[test]
fn stepwise_training_and_segmentation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let models = d.join("models");
    ok(&["phantom", "--out", s(&data), "--count", "2"]);
    let cfg = d.join("cfg.json");
    let config = serde_json::json!({
        "pool": 1,
        "width": 2,
        "patches_per_class": 10,
        "crf_slices_per_volume": 1,
        "crf": {"w": [1.0, 1.0], "mu": tumorseg::crf::potts(5), "theta": [160.0, 3.0, 3.0], "T": 1},
        "step1": {"learning_rate": 1e-3, "epochs": 3, "batch_size": 8},
        "step2": {"learning_rate": 1e-3, "epochs": 2},
    });
    fs::write(&cfg, config.to_string()).unwrap();

    let train = |step: &str| {
        ok(&["train", "--config", s(&cfg), "--data", s(&data), "--model-dir", s(&models), "--view", "axial", "--step", step]);
    };
    train("1");
    let fcnn = models.join("axial.fcnn");
    let crf = models.join("axial.crf");
    assert!(fcnn.exists());
    assert!(!crf.exists());
    let losses: Vec<f64> = serde_json::from_str(&fs::read_to_string(models.join("axial_step1_loss.json")).unwrap()).unwrap();
    assert_eq!(losses.len(), 3);

    let before = fs::read(&fcnn).unwrap();
    train("2");
    assert_eq!(fs::read(&fcnn).unwrap(), before);
    assert!(crf.exists());
    let losses: Vec<f64> = serde_json::from_str(&fs::read_to_string(models.join("axial_step2_loss.json")).unwrap()).unwrap();
    assert_eq!(losses.len(), 2);

    let input = data.join("phantom_0000.mmv");
    let out = d.join("seg.mmv");
    let dump = d.join("dump");
    ok(&[
        "segment", "--config", s(&cfg), "--input", s(&input), "--out", s(&out), "--model-dir", s(&models), "--view", "axial", "--dump",
        s(&dump),
    ]);
    let labels = LabelVolume::load(&out).unwrap();
    assert_eq!(fs::read(dump.join("phantom_0000_final.mmv")).unwrap(), fs::read(&out).unwrap());
    for name in ["phantom_0000_normalized.mmv", "phantom_0000_axial.mmv", "phantom_0000_fused.mmv"] {
        assert!(dump.join(name).exists(), "{name}");
    }
    // A single view fuses to itself.
    assert_eq!(fs::read(dump.join("phantom_0000_axial.mmv")).unwrap(), fs::read(dump.join("phantom_0000_fused.mmv")).unwrap());

    // Replaying post-processing from the dumps reproduces the output.
    let replay = d.join("replay.mmv");
    let (fused, normalized) = (dump.join("phantom_0000_fused.mmv"), dump.join("phantom_0000_normalized.mmv"));
    let args = ["postprocess", "--labels", s(&fused), "--volume", s(&normalized), "--out", s(&replay), "--config", s(&cfg)];
    ok(&args);
    assert_eq!(LabelVolume::load(&replay).unwrap(), labels);

    let out = tumorseg(&["segment", "--input", s(&input), "--model-dir", s(&d.join("nowhere")), "--view", "axial"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("load models"));
}
