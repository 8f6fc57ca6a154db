//! Implementations of the five subcommands. Every command echoes its
//! effective configuration next to its outputs and validates that each
//! artifact landed on disk before returning success.

use crate::config::TrainSetup;
use anyhow::{ensure, Context, Result};
use hfus_core::dataset::{
    generate_corpus, load_manifest, save_dataset, ConfounderMode, CorpusConfig, Study,
};
use hfus_core::eval::{
    mean_roc_grid, parse_roc_csv, partial_auc, roc_curve, score_studies, write_mean_roc_csv,
    write_metrics_csv, write_roc_csv, MetricsReport, MetricsRow, PARTIAL_AUC_FPR_MAX,
};
use hfus_core::layers::Phase;
use hfus_core::model::{FibrosisModel, ModelVariant};
use hfus_core::train::{split_folds, train as run_training, write_history_csv, TrainConfig};
use serde::Serialize;
use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// Confirm that every declared artifact exists and is non-empty; commands
/// exit successfully only after this passes.
fn ensure_written(paths: &[&Path]) -> Result<()> {
    for path in paths {
        let meta = std::fs::metadata(path)
            .with_context(|| format!("output {} was not written", path.display()))?;
        ensure!(meta.len() > 0, "output {} is empty", path.display());
    }
    Ok(())
}

fn write_echo<T: Serialize>(path: &Path, echo: &T) -> Result<()> {
    let text = toml::to_string(echo).context("serializing effective config")?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `<dir>/<stem>.config.toml` for an output file `<dir>/<stem>.<ext>`.
fn echo_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    out.with_file_name(format!("{stem}.config.toml"))
}

/// Patient ids in order of first appearance; the canonical split input.
fn patient_order(studies: &[Study]) -> Vec<String> {
    let mut seen = HashSet::new();
    studies
        .iter()
        .filter(|s| seen.insert(s.patient_id.clone()))
        .map(|s| s.patient_id.clone())
        .collect()
}

// ---- gen-data ---------------------------------------------------------------

pub struct GenDataParams {
    pub out: PathBuf,
    pub studies: usize,
    pub seed: u64,
    pub min_images: usize,
    pub max_images: usize,
    pub confounder: ConfounderMode,
    pub image_size: (usize, usize),
}

#[derive(Serialize)]
struct GenDataEcho {
    command: String,
    out: PathBuf,
    studies: usize,
    seed: u64,
    min_images: usize,
    max_images: usize,
    confounder: String,
    image_size: [usize; 2],
}

pub fn gen_data(p: &GenDataParams) -> Result<()> {
    let cfg = CorpusConfig {
        studies: p.studies,
        seed: p.seed,
        min_images: p.min_images,
        max_images: p.max_images,
        confounder: p.confounder,
        image_size: p.image_size,
    };
    let studies = generate_corpus(&cfg).context("generating corpus")?;
    std::fs::create_dir_all(&p.out)
        .with_context(|| format!("creating output directory {}", p.out.display()))?;
    let manifest = save_dataset(&studies, &p.out).context("writing dataset")?;
    let echo = p.out.join("config.toml");
    write_echo(
        &echo,
        &GenDataEcho {
            command: "gen-data".into(),
            out: p.out.clone(),
            studies: p.studies,
            seed: p.seed,
            min_images: p.min_images,
            max_images: p.max_images,
            confounder: p.confounder.to_string(),
            image_size: [p.image_size.0, p.image_size.1],
        },
    )?;
    ensure_written(&[&manifest, &echo])?;

    let images: usize = studies.iter().map(|s| s.images.len()).sum();
    let positive = studies.iter().filter(|s| s.label == 1).count();
    let k_min = studies.iter().map(|s| s.images.len()).min().unwrap_or(0);
    let k_max = studies.iter().map(|s| s.images.len()).max().unwrap_or(0);
    let mut view_counts = [0usize; 6];
    for s in &studies {
        for im in &s.images {
            view_counts[(im.view - 1) as usize] += 1;
        }
    }
    println!("wrote {} studies ({} images) to {}", studies.len(), images, p.out.display());
    println!("labels: {} positive / {} negative", positive, studies.len() - positive);
    println!("images per study: min {k_min} max {k_max}");
    let views: Vec<String> =
        (0..6).map(|v| format!("view{} {}", v + 1, view_counts[v])).collect();
    println!("view counts: {}", views.join("  "));
    Ok(())
}

// ---- train -------------------------------------------------------------------

pub fn train(setup: &TrainSetup) -> Result<()> {
    let variant = setup.variant()?;
    let norm = setup.norm()?;
    ensure!(
        setup.train.fold < setup.train.folds,
        "fold {} out of range for {} folds",
        setup.train.fold,
        setup.train.folds
    );
    if variant == ModelVariant::GlobalFusion && norm == hfus_core::layers::NormKind::Batch {
        eprintln!(
            "warning: global_fusion with batch normalization mixes statistics across \
             variable-size studies; training is expected to be unstable"
        );
    }

    let studies = load_manifest(&setup.data.manifest, setup.input_size())
        .with_context(|| format!("loading manifest {}", setup.data.manifest.display()))?;
    let split = split_folds(&patient_order(&studies), setup.train.folds, setup.train.seed)?;
    let fold = &split.folds[setup.train.fold];
    let train_refs = hfus_core::train::studies_for(&studies, &fold.train);
    let val_refs = hfus_core::train::studies_for(&studies, &fold.val);

    let cfg = TrainConfig {
        lr: setup.train.lr,
        epochs: setup.train.epochs,
        batch_size: setup.train.batch_size,
        seed: setup.train.seed,
        variant,
        norm,
        augment: setup.augmentation(),
        input_size: setup.input_size(),
        widths: setup.model.widths.clone(),
        strides: setup.model.strides.clone(),
    };
    let (model, history) = run_training(&train_refs, &val_refs, &cfg)?;

    let out = &setup.output.out;
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let ckpt = out.join("checkpoint.hfus");
    let hist = out.join("history.csv");
    let echo = out.join("config.toml");
    model.save(&ckpt)?;
    write_history_csv(&hist, &history)?;
    std::fs::write(&echo, setup.to_toml())?;
    ensure_written(&[&ckpt, &hist, &echo])?;

    let best_val = history
        .iter()
        .map(|r| r.val_auc)
        .filter(|v| !v.is_nan())
        .fold(f64::NAN, f64::max);
    println!(
        "trained {} fold {}/{}: {} epochs, final train loss {:.6}, best val AUC {}",
        variant,
        setup.train.fold,
        setup.train.folds,
        history.len(),
        history.last().map(|r| r.train_loss).unwrap_or(f64::NAN),
        if best_val.is_nan() { "n/a".to_string() } else { format!("{best_val:.6}") },
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

// ---- eval --------------------------------------------------------------------

pub struct EvalParams {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub fold: usize,
    pub folds: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub single_view: Option<u8>,
}

#[derive(Serialize)]
struct EvalEcho {
    command: String,
    checkpoint: PathBuf,
    manifest: PathBuf,
    fold: usize,
    folds: usize,
    seed: u64,
    out: PathBuf,
    single_view: Option<u8>,
}

pub fn eval(p: &EvalParams) -> Result<()> {
    ensure!(p.fold < p.folds, "fold {} out of range for {} folds", p.fold, p.folds);
    if let Some(v) = p.single_view {
        ensure!((1..=6).contains(&v), "view {v} outside 1..=6");
    }
    let mut model = FibrosisModel::load(&p.checkpoint)
        .with_context(|| format!("loading checkpoint {}", p.checkpoint.display()))?;
    let studies = load_manifest(&p.manifest, model.config().input_size)
        .with_context(|| format!("loading manifest {}", p.manifest.display()))?;
    let split = split_folds(&patient_order(&studies), p.folds, p.seed)?;
    let test_ids: HashSet<&String> = split.folds[p.fold].test.iter().collect();
    let test: Vec<Study> =
        studies.into_iter().filter(|s| test_ids.contains(&s.patient_id)).collect();
    ensure!(!test.is_empty(), "fold {} has an empty test split", p.fold);

    let (scores, labels, skipped) = score_studies(&mut model, &test, p.single_view)?;
    ensure!(
        !scores.is_empty(),
        "no studies scored: all {} test studies lack view {}",
        test.len(),
        p.single_view.map(|v| v.to_string()).unwrap_or_default()
    );
    let dir = p.out.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
    }
    let report = MetricsReport::from_scores(&scores, &labels)?;
    let row = MetricsRow {
        fold: p.fold.to_string(),
        variant: model.variant().to_string(),
        norm: model.config().norm_kind.as_str().to_string(),
        report,
        view: p.single_view,
        skipped_studies: p.single_view.map(|_| skipped),
    };
    write_metrics_csv(&p.out, &[row])
        .with_context(|| format!("writing {}", p.out.display()))?;

    let curve = roc_curve(&scores, &labels)?;
    let roc_name = match p.single_view {
        None => format!("roc_fold{}.csv", p.fold),
        Some(v) => format!("roc_fold{}_view{}.csv", p.fold, v),
    };
    let roc_path = dir.join(roc_name);
    write_roc_csv(&roc_path, &curve)?;

    let echo = echo_path_for(&p.out);
    write_echo(
        &echo,
        &EvalEcho {
            command: "eval".into(),
            checkpoint: p.checkpoint.clone(),
            manifest: p.manifest.clone(),
            fold: p.fold,
            folds: p.folds,
            seed: p.seed,
            out: p.out.clone(),
            single_view: p.single_view,
        },
    )?;
    ensure_written(&[&p.out, &roc_path, &echo])?;

    println!(
        "fold {}: {} studies scored{}, AUC {:.6}, pAUC30 {:.6}",
        p.fold,
        scores.len(),
        if p.single_view.is_some() { format!(" ({skipped} skipped)") } else { String::new() },
        report.auc,
        report.pauc30,
    );
    println!("metrics: {}", p.out.display());
    Ok(())
}

// ---- predict -----------------------------------------------------------------

pub fn predict(checkpoint: &Path, study_dir: &Path) -> Result<()> {
    let mut model = FibrosisModel::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let manifest = study_dir.join("manifest.jsonl");
    let studies = load_manifest(&manifest, model.config().input_size)
        .with_context(|| format!("loading study directory {}", study_dir.display()))?;
    ensure!(!studies.is_empty(), "no studies in {}", study_dir.display());
    for study in &studies {
        let inputs = study.inputs();
        let prob = model.predict_study(&inputs, Phase::Eval)?;
        println!("study {}  probability {:.6}", study.study_id, prob);
        let pooled = model.pooled_vectors(&inputs, Phase::Eval)?;
        for (i, (img, vec)) in study.images.iter().zip(&pooled).enumerate() {
            let mean = vec.iter().sum::<f64>() / vec.len() as f64;
            let max = vec.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "  image {:02}  view {}  pooled mean {:.6}  pooled max {:.6}",
                i, img.view, mean, max
            );
        }
    }
    Ok(())
}

// ---- export-roc ---------------------------------------------------------------

#[derive(Serialize)]
struct ExportEcho {
    command: String,
    metrics_dir: PathBuf,
    out: PathBuf,
    folds: Vec<usize>,
}

/// Per-fold staircase files `roc_fold<k>.csv` under `dir`, ordered by fold.
fn fold_staircases(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut found = Vec::new();
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading metrics directory {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(rest) = name.strip_prefix("roc_fold") else { continue };
        let Some(digits) = rest.strip_suffix(".csv") else { continue };
        if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
            found.push((digits.parse().expect("digits"), path));
        }
    }
    found.sort();
    ensure!(
        !found.is_empty(),
        "no per-fold staircases (roc_fold<k>.csv) in {}",
        dir.display()
    );
    Ok(found)
}

pub fn export_roc(metrics_dir: &Path, out: &Path) -> Result<()> {
    let staircases = fold_staircases(metrics_dir)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("roc");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
    }

    let mut curves = Vec::new();
    let mut paucs = Vec::new();
    let mut written = Vec::new();
    for (fold, path) in &staircases {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let curve = parse_roc_csv(&text)
            .with_context(|| format!("parsing staircase {}", path.display()))?;
        paucs.push((*fold, partial_auc(&curve, PARTIAL_AUC_FPR_MAX)?));
        curves.push(curve);
        let copy = out.with_file_name(format!("{stem}_fold{fold}.csv"));
        std::fs::write(&copy, &text).with_context(|| format!("writing {}", copy.display()))?;
        written.push(copy);
    }

    let grid = mean_roc_grid(&curves)?;
    write_mean_roc_csv(out, &grid)?;

    let mut legend = String::from("fold,pauc30\n");
    for (fold, pauc) in &paucs {
        legend.push_str(&format!("{fold},{pauc:.6}\n"));
    }
    let mean_pauc = paucs.iter().map(|(_, p)| p).sum::<f64>() / paucs.len() as f64;
    legend.push_str(&format!("mean,{mean_pauc:.6}\n"));
    let legend_path = out.with_file_name(format!("{stem}_legend.csv"));
    std::fs::write(&legend_path, legend)
        .with_context(|| format!("writing {}", legend_path.display()))?;

    let echo = echo_path_for(out);
    write_echo(
        &echo,
        &ExportEcho {
            command: "export-roc".into(),
            metrics_dir: metrics_dir.to_path_buf(),
            out: out.to_path_buf(),
            folds: paucs.iter().map(|(f, _)| *f).collect(),
        },
    )?;

    let mut check: Vec<&Path> = vec![out, &legend_path, &echo];
    check.extend(written.iter().map(|p| p.as_path()));
    ensure_written(&check)?;

    println!(
        "exported {} fold curves + {}-point mean to {}",
        curves.len(),
        grid.len(),
        out.display()
    );
    println!("mean pAUC30: {mean_pauc:.6}");
    Ok(())
}
