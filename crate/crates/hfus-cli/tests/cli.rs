//! End-to-end tests that drive the compiled `hfus` binary.

use hfus_core::dataset::{generate_synthetic_study, save_dataset, ConfounderMode};
use hfus_core::model::FibrosisModel;
use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::OnceLock;
use tempfile::TempDir;

fn hfus(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_hfus"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hfus(args);
    assert!(
        out.status.success(),
        "hfus {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn fails(args: &[&str]) -> String {
    let out = hfus(args);
    assert!(!out.status.success(), "hfus {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Sorted (relative path, bytes) snapshot of a directory tree.
fn tree_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).expect("readable file")));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// One 24-study corpus plus one trained ghif_vsp checkpoint, shared by the
/// read-only tests.
struct Fixture {
    _dir: TempDir,
    manifest: PathBuf,
    checkpoint: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let corpus = dir.path().join("corpus");
        let run = dir.path().join("run");
        ok(&[
            "gen-data",
            "--out",
            path_str(&corpus),
            "--studies",
            "24",
            "--seed",
            "2",
            "--max-images",
            "3",
            "--image-size",
            "32x32",
        ]);
        let manifest = corpus.join("manifest.jsonl");
        ok(&[
            "train",
            "--manifest",
            path_str(&manifest),
            "--out",
            path_str(&run),
            "--variant",
            "ghif_vsp",
            "--norm",
            "instance",
            "--epochs",
            "2",
            "--widths",
            "4,6,8",
            "--input-size",
            "32x32",
            "--seed",
            "9",
        ]);
        Fixture { checkpoint: run.join("checkpoint.hfus"), manifest, _dir: dir }
    })
}

#[test]
fn gen_data_reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("corpus");
    let args = [
        "gen-data",
        "--out",
        path_str(&out),
        "--studies",
        "10",
        "--seed",
        "7",
        "--image-size",
        "32x32",
    ];
    let stdout = ok(&args);
    assert!(stdout.contains("5 positive / 5 negative"), "{stdout}");
    let first = tree_snapshot(&out);
    ok(&args);
    assert_eq!(first, tree_snapshot(&out), "rerun changed the tree");
}

#[test]
fn gen_data_fixed_image_count_and_manifest_bookkeeping() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("corpus");
    ok(&[
        "gen-data",
        "--out",
        path_str(&out),
        "--studies",
        "12",
        "--seed",
        "1",
        "--min-images",
        "3",
        "--max-images",
        "3",
        "--image-size",
        "32x32",
    ]);
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 12 * 3, "one manifest line per image");
    let mut per_study = std::collections::HashMap::new();
    for line in &lines {
        let study = line.split("\"study_id\":\"").nth(1).unwrap().split('"').next().unwrap();
        *per_study.entry(study.to_string()).or_insert(0usize) += 1;
    }
    assert_eq!(per_study.len(), 12);
    assert!(per_study.values().all(|&k| k == 3), "every study has exactly 3 images");
    assert_eq!(lines.len(), out.join("images").read_dir().unwrap().count());
}

#[test]
fn gen_data_rejects_bad_ranges() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c");
    let err =
        fails(&["gen-data", "--out", path_str(&out), "--min-images", "5", "--max-images", "2"]);
    assert!(err.contains("invalid image count range"), "{err}");
    let err = fails(&["gen-data", "--out", path_str(&out), "--confounder", "sometimes"]);
    assert!(err.contains("unknown confounder mode"), "{err}");
}

#[test]
fn train_writes_artifacts_and_reruns_bit_identically() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&[
        "gen-data",
        "--out",
        path_str(&corpus),
        "--studies",
        "40",
        "--seed",
        "3",
        "--max-images",
        "3",
        "--image-size",
        "32x32",
    ]);
    let manifest = corpus.join("manifest.jsonl");
    let train = |out: &Path| {
        ok(&[
            "train",
            "--manifest",
            path_str(&manifest),
            "--out",
            path_str(out),
            "--variant",
            "ghif_vsp",
            "--norm",
            "instance",
            "--epochs",
            "2",
            "--widths",
            "4,6,8",
            "--input-size",
            "32x32",
            "--seed",
            "11",
        ]);
    };
    let (run_a, run_b) = (dir.path().join("a"), dir.path().join("b"));
    train(&run_a);
    for artifact in ["checkpoint.hfus", "history.csv", "config.toml"] {
        let path = run_a.join(artifact);
        assert!(path.exists(), "missing {artifact}");
        assert!(std::fs::metadata(&path).unwrap().len() > 0, "{artifact} is empty");
    }
    let echo = std::fs::read_to_string(run_a.join("config.toml")).unwrap();
    assert!(echo.contains("variant = \"ghif_vsp\""), "{echo}");
    assert!(echo.contains("epochs = 2"), "{echo}");

    train(&run_b);
    assert_eq!(
        std::fs::read(run_a.join("checkpoint.hfus")).unwrap(),
        std::fs::read(run_b.join("checkpoint.hfus")).unwrap(),
        "identical invocations must produce identical checkpoints"
    );
    assert_eq!(
        std::fs::read(run_a.join("history.csv")).unwrap(),
        std::fs::read(run_b.join("history.csv")).unwrap()
    );
}

#[test]
fn train_missing_manifest_fails_with_message() {
    let dir = TempDir::new().unwrap();
    let err = fails(&[
        "train",
        "--manifest",
        path_str(&dir.path().join("absent.jsonl")),
        "--out",
        path_str(&dir.path().join("run")),
        "--variant",
        "ghif",
    ]);
    assert!(err.contains("absent.jsonl"), "{err}");
}

#[test]
fn train_resolves_config_file_with_flag_overrides() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("run.toml");
    let out = dir.path().join("run");
    std::fs::write(
        &cfg_path,
        format!(
            "[data]\nmanifest = \"{}\"\n\
             [model]\nvariant = \"imagewise\"\ninput_size = [32, 32]\nwidths = [4, 6, 8]\n\
             [train]\nepochs = 7\nseed = 4\n\
             [output]\nout = \"{}\"\n",
            fx.manifest.display(),
            out.display()
        ),
    )
    .unwrap();
    // the flag beats the file: 1 epoch, not 7
    ok(&["train", "--config", path_str(&cfg_path), "--epochs", "1"]);
    let echo = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echo.contains("epochs = 1"), "{echo}");
    assert!(echo.contains("variant = \"imagewise\""), "{echo}");
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2, "header plus one epoch row");
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "[train]\nlearning_rate = 0.1\n").unwrap();
    let err = fails(&["train", "--config", path_str(&cfg_path)]);
    assert!(err.contains("learning_rate"), "error must name the unknown key: {err}");
}

#[test]
fn eval_writes_metrics_roc_and_echo() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m").join("metrics_fold0.csv");
    ok(&[
        "eval",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--manifest",
        path_str(&fx.manifest),
        "--fold",
        "0",
        "--seed",
        "9",
        "--out",
        path_str(&out),
    ]);
    let metrics = std::fs::read_to_string(&out).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("fold,variant,norm,auc,pauc30,r_at_p90,r_at_p85,r_at_p80"),
        "exact column contract"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("0,ghif_vsp,instance,"), "{row}");
    assert_eq!(lines.next(), None, "one row per eval invocation");

    let roc = std::fs::read_to_string(out.with_file_name("roc_fold0.csv")).unwrap();
    let rows: Vec<&str> = roc.lines().collect();
    assert_eq!(rows[0], "fpr,tpr,threshold");
    assert_eq!(rows[1], "0.000000,0.000000,inf");
    assert!(rows.last().unwrap().starts_with("1.000000,1.000000,"), "{roc}");
    assert!(out.with_file_name("metrics_fold0.config.toml").exists());
}

#[test]
fn eval_single_view_tags_rows_and_counts_skips() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("metrics_view2.csv");
    ok(&[
        "eval",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--manifest",
        path_str(&fx.manifest),
        "--fold",
        "0",
        "--seed",
        "9",
        "--out",
        path_str(&out),
        "--single-view",
        "2",
    ]);
    let metrics = std::fs::read_to_string(&out).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("fold,variant,norm,auc,pauc30,r_at_p90,r_at_p85,r_at_p80,view,skipped_studies")
    );
    let row = lines.next().unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[8], "2", "view tag: {row}");
    let skipped: usize = fields[9].parse().expect("skip count");
    assert!(skipped < 24, "sane skip count: {row}");
    assert!(out.with_file_name("roc_fold0_view2.csv").exists());
}

#[test]
fn eval_rejects_bad_fold_and_view() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.csv");
    let base = [
        "eval",
        "--checkpoint",
        path_str(&fx.checkpoint),
        "--manifest",
        path_str(&fx.manifest),
        "--out",
        path_str(&out),
    ];
    let mut args = base.to_vec();
    args.extend(["--fold", "5"]);
    assert!(fails(&args).contains("out of range"));
    let mut args = base.to_vec();
    args.extend(["--single-view", "9"]);
    assert!(fails(&args).contains("outside 1..=6"));
}

#[test]
fn eval_zero_head_checkpoint_scores_every_study_half() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let mut model = FibrosisModel::load(&fx.checkpoint).unwrap();
    for name in ["head.weight", "head.bias"] {
        let id = model.store().find(name).expect(name);
        model.store_mut().get_mut(id).value_mut().data_mut().fill(0.0);
    }
    let zeroed = dir.path().join("zeroed.hfus");
    model.save(&zeroed).unwrap();

    let out = dir.path().join("metrics.csv");
    ok(&[
        "eval",
        "--checkpoint",
        path_str(&zeroed),
        "--manifest",
        path_str(&fx.manifest),
        "--fold",
        "0",
        "--seed",
        "9",
        "--out",
        path_str(&out),
    ]);
    let metrics = std::fs::read_to_string(&out).unwrap();
    let fields: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    // every prediction is sigmoid(0) = 0.5: one big tie group, the diagonal
    assert_eq!(fields[3], "0.500000", "AUC of the all-ties diagonal");
    assert_eq!(fields[4], "0.150000", "normalized pAUC of the diagonal at 0.3");
}

#[test]
fn predict_prints_study_probability_and_contributions() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();

    // single image: probability strictly inside (0, 1)
    let study = generate_synthetic_study(5, 0, 1, &[4], ConfounderMode::Off, (32, 32)).unwrap();
    let single = dir.path().join("single");
    save_dataset(std::slice::from_ref(&study), &single).unwrap();
    let stdout =
        ok(&["predict", "--checkpoint", path_str(&fx.checkpoint), "--study-dir", path_str(&single)]);
    let prob: f64 = stdout
        .lines()
        .next()
        .and_then(|l| l.split_whitespace().last())
        .and_then(|v| v.parse().ok())
        .expect("probability line");
    assert!(prob > 0.0 && prob < 1.0, "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with("image")).count(), 1);

    // fourteen images: full-cardinality studies work end to end
    let views: Vec<u8> = (0..14).map(|i| (i % 6 + 1) as u8).collect();
    let study = generate_synthetic_study(6, 1, 0, &views, ConfounderMode::Off, (32, 32)).unwrap();
    let full = dir.path().join("full");
    save_dataset(std::slice::from_ref(&study), &full).unwrap();
    let stdout =
        ok(&["predict", "--checkpoint", path_str(&fx.checkpoint), "--study-dir", path_str(&full)]);
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with("image")).count(), 14);
}

#[test]
fn predict_is_invariant_to_manifest_order() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let views: Vec<u8> = vec![1, 3, 3, 5, 2];
    let study = generate_synthetic_study(7, 2, 1, &views, ConfounderMode::Off, (32, 32)).unwrap();
    let study_dir = dir.path().join("study");
    save_dataset(std::slice::from_ref(&study), &study_dir).unwrap();

    let args =
        ["predict", "--checkpoint", path_str(&fx.checkpoint), "--study-dir", path_str(&study_dir)];
    let prob_line = |stdout: &str| stdout.lines().next().unwrap().to_string();
    let before = prob_line(&ok(&args));

    let manifest_path = study_dir.join("manifest.jsonl");
    let manifest = std::fs::read_to_string(&manifest_path).unwrap();
    let reversed: Vec<&str> = manifest.lines().rev().collect();
    std::fs::write(&manifest_path, reversed.join("\n")).unwrap();
    let after = prob_line(&ok(&args));
    assert_eq!(before, after, "image order must not change the fused probability");
}

#[test]
fn export_roc_emits_mean_grid_legend_and_reruns_identically() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let metrics_dir = dir.path().join("m");
    for fold in ["0", "1"] {
        ok(&[
            "eval",
            "--checkpoint",
            path_str(&fx.checkpoint),
            "--manifest",
            path_str(&fx.manifest),
            "--fold",
            fold,
            "--seed",
            "9",
            "--out",
            path_str(&metrics_dir.join(format!("metrics_fold{fold}.csv"))),
        ]);
    }
    let out = dir.path().join("export").join("roc.csv");
    let args = ["export-roc", "--metrics-dir", path_str(&metrics_dir), "--out", path_str(&out)];
    ok(&args);

    let mean = std::fs::read_to_string(&out).unwrap();
    assert_eq!(mean.lines().count(), 202, "header plus the 201-point grid");
    assert_eq!(mean.lines().next(), Some("fpr,tpr"));
    assert_eq!(mean.lines().nth(1), Some("0.000000,0.000000"));
    assert!(mean.lines().last().unwrap().starts_with("1.000000,"));

    for fold in ["0", "1"] {
        let copy = out.with_file_name(format!("roc_fold{fold}.csv"));
        let text = std::fs::read_to_string(&copy).unwrap();
        assert_eq!(text.lines().nth(1), Some("0.000000,0.000000,inf"), "origin present");
        assert!(text.lines().last().unwrap().starts_with("1.000000,1.000000,"));
    }
    let legend = std::fs::read_to_string(out.with_file_name("roc_legend.csv")).unwrap();
    assert_eq!(legend.lines().next(), Some("fold,pauc30"));
    assert_eq!(legend.lines().count(), 4, "two folds plus the mean row");
    assert!(legend.lines().last().unwrap().starts_with("mean,"));

    let first = tree_snapshot(out.parent().unwrap());
    ok(&args);
    assert_eq!(first, tree_snapshot(out.parent().unwrap()), "re-export changed bytes");
}

#[test]
fn export_roc_requires_staircases() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let err = fails(&[
        "export-roc",
        "--metrics-dir",
        path_str(&empty),
        "--out",
        path_str(&dir.path().join("roc.csv")),
    ]);
    assert!(err.contains("no per-fold staircases"), "{err}");
}

#[test]
fn thread_cap_is_validated() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c");
    let run = |threads: &str| {
        std::process::Command::new(env!("CARGO_BIN_EXE_hfus"))
            .env("HFUS_THREADS", threads)
            .args([
                "gen-data",
                "--out",
                path_str(&out),
                "--studies",
                "10",
                "--image-size",
                "32x32",
            ])
            .output()
            .expect("binary runs")
    };
    let bad = run("0");
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("HFUS_THREADS"));
    assert!(run("2").status.success(), "a higher cap is accepted");
}
