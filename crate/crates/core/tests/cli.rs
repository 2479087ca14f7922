//! The `isnet` binary on a tiny configuration.

use std::path::Path;
use std::process::Command;

fn isnet(args: &[&str], dir: &Path) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_isnet"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run isnet");
    assert!(
        out.status.success(),
        "isnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "\
# tiny run
train_size=120
val_size=30
test_size=30
epochs=1
calibration_epochs=1
batch_size=16
";

#[test]
fn train_evaluate_explain_tune_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();

    let stdout = isnet(&["train", "--variant", "selective", "--engine", "explicit", "--config", "tiny.cfg", "--out", "run"], dir);
    assert!(stdout.contains("selective"));
    for f in ["checkpoint.txt", "loss_curve.csv", "report.csv", "confusion.csv", "epochs.csv", "config.txt"] {
        assert!(dir.join("run").join(f).exists(), "{f} missing");
    }
    let used = std::fs::read_to_string(dir.join("run/config.txt")).unwrap();
    assert!(used.contains("variant=selective") && used.contains("range.0="));

    let report = isnet(&["evaluate", "--checkpoint", "run/checkpoint.txt", "--regimes", "ood,deceiving", "--config", "tiny.cfg"], dir);
    assert!(report.starts_with("regime,accuracy\nood,"));

    let listing = isnet(
        &[
            "explain", "--checkpoint", "run/checkpoint.txt", "--image", "test:0", "--target", "logit-c3",
            "--config", "tiny.cfg", "--capture", "3", "--out", "maps",
        ],
        dir,
    );
    let files: Vec<&str> = listing.lines().filter(|l| l.ends_with(".pgm")).collect();
    assert_eq!(files.len(), 2);
    assert!(files[0].contains("logit-c3_layer0"));
    let pgm = std::fs::read(dir.join(files[0])).unwrap();
    assert!(pgm.starts_with(b"P5\n28 28\n255\n"));
    assert_eq!(pgm.len(), b"P5\n28 28\n255\n".len() + 784);

    let pgm_path = dir.join(files[0]);
    let flex = isnet(
        &[
            "explain", "--checkpoint", "run/checkpoint.txt", "--image", pgm_path.to_str().unwrap(), "--target",
            "softmax-c1", "--engine", "flex", "--out", "maps",
        ],
        dir,
    );
    assert!(flex.contains("softmax-c1_layer0.pgm"));

    let ranges = isnet(&["tune-range", "--variant", "stochastic", "--config", "tiny.cfg"], dir);
    assert!(ranges.starts_with("range.0="));

    isnet(
        &["bench", "--classes", "2,4", "--variants", "selective", "--images", "16", "--config", "tiny.cfg", "--out", "bench.csv"],
        dir,
    );
    let bench = std::fs::read_to_string(dir.join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 3);
}

#[test]
fn bad_config_reports_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("bad.cfg"), "epochs=2\nlearning_rate=fast\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_isnet"))
        .args(["train", "--config", "bad.cfg"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
