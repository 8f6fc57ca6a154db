//! Patient-level cross-validation splits, random-combination sampling,
//! data augmentation, and the training loop for every model variant.

use crate::dataset::{sample_bilinear, sample_nearest, Study};
use crate::eval::{auc, roc_curve};
use crate::layers::{Bindings, NormKind, Phase};
use crate::model::{FibrosisModel, ModelError, ModelVariant, StudyImage};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {min} patients, got {got}")]
    TooFewPatients { got: usize, min: usize },
    #[error("duplicate patient id {0}")]
    DuplicatePatient(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss while training on study {0}")]
    NonFiniteLoss(String),
    #[error("training requires a non-empty train partition")]
    EmptyTrainSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MIN_PATIENTS: usize = 10;

// ---- cross-validation splits -------------------------------------------------

/// One fold's disjoint patient-id partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
}

/// Patient-level split: shuffle once with the seed, then rotate the order
/// per fold and cut 70% / 20% / 10% into train / test / validation.
pub fn split_folds(
    patient_ids: &[String],
    n_folds: usize,
    seed: u64,
) -> Result<FoldSplit, TrainError> {
    let n = patient_ids.len();
    if n < MIN_PATIENTS {
        return Err(TrainError::TooFewPatients { got: n, min: MIN_PATIENTS });
    }
    if n_folds == 0 {
        return Err(TrainError::BadConfig("need at least one fold".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for id in patient_ids {
        if !seen.insert(id) {
            return Err(TrainError::DuplicatePatient(id.clone()));
        }
    }
    let mut shuffled: Vec<String> = patient_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n_train = (0.7 * n as f64).round() as usize;
    let n_test = (0.2 * n as f64).round() as usize;
    let n_val = n - n_train - n_test;
    if n_val == 0 || n_test == 0 {
        return Err(TrainError::BadConfig(format!(
            "{n} patients leave an empty partition under a 70/20/10 split"
        )));
    }

    let mut folds = Vec::with_capacity(n_folds);
    for k in 0..n_folds {
        let offset = k * n / n_folds;
        let rotated: Vec<String> =
            (0..n).map(|i| shuffled[(i + offset) % n].clone()).collect();
        folds.push(Fold {
            train: rotated[..n_train].to_vec(),
            test: rotated[n_train..n_train + n_test].to_vec(),
            val: rotated[n_train + n_test..].to_vec(),
        });
    }
    Ok(FoldSplit { folds })
}

/// Select the studies whose patient id is in `ids`, preserving study order.
pub fn studies_for<'a>(studies: &'a [Study], ids: &[String]) -> Vec<&'a Study> {
    let set: std::collections::HashSet<&String> = ids.iter().collect();
    studies.iter().filter(|s| set.contains(&s.patient_id)).collect()
}

// ---- combination sampling --------------------------------------------------

/// Random non-empty image subset: the size is uniform over `1..=count`,
/// then that many indices are drawn uniformly without replacement. Returned
/// sorted for a canonical order.
pub fn sample_combination(count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    assert!(count >= 1, "a study always has at least one image");
    let k = rng.gen_range(1..=count);
    let mut idx = rand::seq::index::sample(rng, count, k).into_vec();
    idx.sort_unstable();
    idx
}

// ---- augmentation -------------------------------------------------------------

/// Ranges for the four augmentation draws. Every range must contain the
/// identity (0 brightness shift, factor 1 contrast, 0 degrees, factor 1
/// scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            brightness: (-0.1, 0.1),
            contrast: (0.8, 1.2),
            rotation_deg: (-10.0, 10.0),
            scale: (0.9, 1.1),
        }
    }
}

impl AugmentationConfig {
    /// Identity-only ranges: augmentation becomes a no-op.
    pub fn identity() -> Self {
        AugmentationConfig {
            brightness: (0.0, 0.0),
            contrast: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let contains = |(lo, hi): (f64, f64), id: f64| lo <= id && id <= hi && lo <= hi;
        if !contains(self.brightness, 0.0)
            || !contains(self.contrast, 1.0)
            || !contains(self.rotation_deg, 0.0)
            || !contains(self.scale, 1.0)
        {
            return Err(TrainError::BadConfig(
                "augmentation ranges must contain the identity transform".into(),
            ));
        }
        if self.scale.0 <= 0.0 {
            return Err(TrainError::BadConfig("scale range must be positive".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Rotate (counterclockwise in row/column coordinates) and scale about the
/// image center; the image resamples bilinearly, the mask nearest-neighbour,
/// with identical transform parameters.
pub fn warp_rotate_scale(
    image: &Tensor,
    mask: &Tensor,
    angle_deg: f64,
    scale: f64,
) -> (Tensor, Tensor) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let (cr, cc) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let mut img_out = Vec::with_capacity(h * w);
    let mut mask_out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let dr = (r as f64 - cr) / scale;
            let dc = (c as f64 - cc) / scale;
            // inverse mapping: rotate the destination offset by -theta
            let sr = cr + dr * cos_t + dc * sin_t;
            let sc = cc - dr * sin_t + dc * cos_t;
            img_out.push(sample_bilinear(image, sr, sc));
            mask_out.push(sample_nearest(mask, sr, sc));
        }
    }
    (
        Tensor::from_vec(vec![h, w], img_out).expect("warp shape"),
        Tensor::from_vec(vec![h, w], mask_out).expect("warp shape"),
    )
}

/// Draw brightness, contrast, rotation, and scale (in that fixed order) and
/// apply them: photometric changes to the image only, the geometric warp to
/// image and mask jointly. Output pixels are clamped to `[0, 1]`; the mask
/// stays binary. Identity draws leave the inputs bit-exact.
pub fn augment(
    image: &Tensor,
    mask: &Tensor,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let brightness = draw(rng, cfg.brightness);
    let contrast = draw(rng, cfg.contrast);
    let rotation = draw(rng, cfg.rotation_deg);
    let scale = draw(rng, cfg.scale);

    let (mut img, mask) = if rotation != 0.0 || scale != 1.0 {
        warp_rotate_scale(image, mask, rotation, scale)
    } else {
        (image.clone(), mask.clone())
    };
    if contrast != 1.0 {
        let mean = img.data().iter().sum::<f64>() / img.numel() as f64;
        for v in img.data_mut() {
            *v = (*v - mean) * contrast + mean;
        }
    }
    if brightness != 0.0 {
        for v in img.data_mut() {
            *v += brightness;
        }
    }
    if contrast != 1.0 || brightness != 0.0 {
        for v in img.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    (img, mask)
}

// ---- training loop ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: ModelVariant,
    pub norm: NormKind,
    pub augment: AugmentationConfig,
    pub input_size: (usize, usize),
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            variant: ModelVariant::GhifVsp,
            norm: NormKind::Instance,
            augment: AugmentationConfig::default(),
            input_size: (64, 64),
            widths: vec![16, 32, 64],
            strides: vec![1, 2, 2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!("lr {} must be positive", self.lr)));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when the validation split is empty or single-class.
    pub val_auc: f64,
}

/// Write the per-epoch history as CSV (columns epoch, train_loss, val_auc).
pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,train_loss,val_auc\n");
    for row in history {
        let val = if row.val_auc.is_nan() {
            "nan".to_string()
        } else {
            format!("{:.6}", row.val_auc)
        };
        out.push_str(&format!("{},{:.6},{}\n", row.epoch, row.train_loss, val));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Images selected for one study in one step, after augmentation. Owns its
/// tensors so the batch can borrow them for the model call.
struct PreparedStudy {
    study_id: String,
    label: f64,
    images: Vec<(Tensor, u8, Tensor)>,
    /// image-wise variants score each image as its own sample
    per_image: bool,
}

impl PreparedStudy {
    fn inputs(&self) -> Vec<StudyImage<'_>> {
        self.images
            .iter()
            .map(|(img, view, roi)| StudyImage { image: img, view: *view, roi })
            .collect()
    }
}

/// Train a model on `train_studies`, validating on `val_studies` after each
/// epoch. Returns the parameters with the best validation AUC (the final
/// epoch's when no validation AUC is computable) plus the per-epoch history.
pub fn train(
    train_studies: &[&Study],
    val_studies: &[&Study],
    cfg: &TrainConfig,
) -> Result<(FibrosisModel, Vec<HistoryRow>), TrainError> {
    cfg.validate()?;
    if train_studies.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FibrosisModel::new(
        cfg.variant,
        cfg.norm,
        cfg.input_size,
        cfg.widths.clone(),
        cfg.strides.clone(),
        &mut init_rng,
    )?;
    // epoch-level draws (shuffling, combinations, augmentation) come from
    // their own stream so they never overlap the initialization draws
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<u8>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_studies.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut prepared = Vec::with_capacity(chunk.len());
            for &si in chunk {
                prepared.push(prepare_study(train_studies[si], cfg, &mut rng));
            }
            let batch_samples: usize = prepared
                .iter()
                .map(|p| if p.per_image { p.images.len() } else { 1 })
                .sum();
            let loss = training_step(&mut model, &prepared, cfg.lr)?;
            loss_sum += loss * batch_samples as f64;
            sample_count += batch_samples;
        }

        let val_auc = validation_auc(&mut model, val_studies)?;
        history.push(HistoryRow {
            epoch,
            train_loss: loss_sum / sample_count as f64,
            val_auc,
        });
        // Ties prefer the later epoch: a small validation split saturates
        // early, and among equally ranked checkpoints the one with more
        // training has the better-calibrated probabilities.
        if !val_auc.is_nan() && best.as_ref().map_or(true, |(b, _)| val_auc >= *b) {
            best = Some((val_auc, model.to_bytes()));
        }
    }

    if let Some((_, bytes)) = best {
        model = FibrosisModel::from_bytes(&bytes)?;
    }
    Ok((model, history))
}

/// Select and augment one study's images for a training step: a random
/// combination for the random-combination variants, the full set for
/// global fusion, every image (as independent samples) for the image-wise
/// variants.
fn prepare_study(study: &Study, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> PreparedStudy {
    let indices: Vec<usize> = match cfg.variant {
        ModelVariant::Ghif | ModelVariant::GhifVsp => {
            sample_combination(study.images.len(), rng)
        }
        _ => (0..study.images.len()).collect(),
    };
    let images = indices
        .iter()
        .map(|&i| {
            let im = &study.images[i];
            let (img, roi) = augment(&im.image, &im.roi, &cfg.augment, rng);
            (img, im.view, roi)
        })
        .collect();
    PreparedStudy {
        study_id: study.study_id.clone(),
        label: study.label as f64,
        images,
        per_image: !cfg.variant.fused(),
    }
}

/// One optimizer step over a prepared batch; returns the batch loss (mean
/// binary cross-entropy over the batch's samples).
fn training_step(
    model: &mut FibrosisModel,
    batch: &[PreparedStudy],
    lr: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let mut binds = Bindings::new();
    let mut prob_vals = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for study in batch {
        let inputs = study.inputs();
        let probs = if study.per_image {
            // each image is an independent sample with the study label
            let mut per_image = Vec::with_capacity(inputs.len());
            for img in &inputs {
                per_image.push(model.study_probs_on_tape(
                    &mut tape,
                    &mut binds,
                    std::slice::from_ref(img),
                    Phase::Train,
                )?);
            }
            tape.concat(&per_image)?
        } else {
            model.study_probs_on_tape(&mut tape, &mut binds, &inputs, Phase::Train)?
        };
        if !tape.value(probs).all_finite() {
            return Err(TrainError::NonFiniteLoss(study.study_id.clone()));
        }
        let n = tape.value(probs).numel();
        targets.extend(std::iter::repeat(study.label).take(n));
        prob_vals.push(probs);
    }
    let all_probs = tape.concat(&prob_vals)?;
    let loss = tape.bce_loss(all_probs, &targets)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        let first = batch.first().map(|s| s.study_id.clone()).unwrap_or_default();
        return Err(TrainError::NonFiniteLoss(first));
    }
    tape.backward(loss)?;
    binds.apply_grads(&tape, model.store_mut());
    model.store_mut().sgd_step(lr)?;
    Ok(loss_value)
}

/// Study-level AUC on the validation split; NaN when it cannot be computed
/// (empty split or a single class present).
fn validation_auc(
    model: &mut FibrosisModel,
    val_studies: &[&Study],
) -> Result<f64, TrainError> {
    if val_studies.is_empty() {
        return Ok(f64::NAN);
    }
    let mut scores = Vec::with_capacity(val_studies.len());
    let mut labels = Vec::with_capacity(val_studies.len());
    for study in val_studies {
        scores.push(model.predict_study(&study.inputs(), Phase::Eval)?);
        labels.push(study.label);
    }
    match roc_curve(&scores, &labels) {
        Ok(curve) => Ok(auc(&curve)),
        Err(_) => Ok(f64::NAN),
    }
}
