//! The study classifier: backbone, region pooling, fusion head, and the
//! per-variant prediction paths, plus the binary checkpoint format.
//!
//! All five model variants share one parameter layout — a three-stage
//! convolutional backbone (conv, norm, ReLU per stage) and a linear head —
//! and differ only in how per-image feature maps are pooled and combined:
//!
//! - `imagewise`: plain global average pooling, one logit per image;
//! - `imagewise_roi`: pooling restricted to the clinical region of interest
//!   (study-level scores come from median late fusion at evaluation time);
//! - `global_fusion` / `ghif` / `ghif_vsp`: pooled vectors of all images in
//!   the forward set are fused into one mean/variance/max descriptor and
//!   classified jointly; `ghif_vsp` additionally gives every view its own
//!   normalization banks.

use crate::layers::{
    Bindings, ConvLayer, DenseLayer, LayerError, NormKind, NormLayer, ParamId, ParamStore, Phase,
};
use crate::tensor::{Tape, Tensor, TensorError, Val};
use rand::Rng;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("image has shape {got:?}, expected [{h}, {w}]", h = expected.0, w = expected.1)]
    InputSize { got: Vec<usize>, expected: (usize, usize) },
    #[error("study prediction needs at least one image")]
    EmptyStudy,
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("mask shape {mask:?} does not divide evenly into {target:?}")]
    MaskNotDivisible { mask: Vec<usize>, target: (usize, usize) },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Imagewise,
    ImagewiseRoi,
    GlobalFusion,
    Ghif,
    GhifVsp,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Imagewise,
        ModelVariant::ImagewiseRoi,
        ModelVariant::GlobalFusion,
        ModelVariant::Ghif,
        ModelVariant::GhifVsp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::Imagewise => "imagewise",
            ModelVariant::ImagewiseRoi => "imagewise_roi",
            ModelVariant::GlobalFusion => "global_fusion",
            ModelVariant::Ghif => "ghif",
            ModelVariant::GhifVsp => "ghif_vsp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Whether study images are fused into one descriptor before the head.
    pub fn fused(self) -> bool {
        matches!(self, ModelVariant::GlobalFusion | ModelVariant::Ghif | ModelVariant::GhifVsp)
    }

    /// Whether pooling is restricted by the clinical ROI mask.
    pub fn uses_roi(self) -> bool {
        !matches!(self, ModelVariant::Imagewise)
    }

    /// Whether normalization banks are selected per view.
    pub fn view_specific(self) -> bool {
        matches!(self, ModelVariant::GhifVsp)
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture of the convolutional feature extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_size: (usize, usize),
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub norm_kind: NormKind,
    pub vsp_enabled: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(ModelError::Config(format!(
                "{} widths vs {} strides; need equal, non-zero counts",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(ModelError::Config("stride 0".into()));
        }
        let fs = self.feature_stride();
        let (h, w) = self.input_size;
        if h % fs != 0 || w % fs != 0 {
            return Err(ModelError::Config(format!(
                "feature stride {fs} does not divide input {h}x{w}"
            )));
        }
        let (fh, fw) = self.feature_dims();
        if fh < 2 || fw < 2 {
            return Err(ModelError::Config(format!(
                "feature map {fh}x{fw} too small; need at least 2x2"
            )));
        }
        Ok(())
    }

    /// Product of the stage strides.
    pub fn feature_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Spatial dims of the final feature map.
    pub fn feature_dims(&self) -> (usize, usize) {
        let fs = self.feature_stride();
        (self.input_size.0 / fs, self.input_size.1 / fs)
    }

    pub fn final_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

/// One study image handed to the model: grayscale pixels in `[0, 1]`, the
/// probe view, and the clinical ROI mask at input resolution.
pub struct StudyImage<'a> {
    pub image: &'a Tensor,
    pub view: u8,
    pub roi: &'a Tensor,
}

struct Stage {
    conv: ConvLayer,
    norm: NormLayer,
}

pub struct FibrosisModel {
    variant: ModelVariant,
    config: BackboneConfig,
    store: ParamStore,
    stages: Vec<Stage>,
    head: DenseLayer,
}

const KERNEL: usize = 3;
const PAD: usize = 1;

impl FibrosisModel {
    pub fn new(
        variant: ModelVariant,
        norm_kind: NormKind,
        input_size: (usize, usize),
        widths: Vec<usize>,
        strides: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        let config = BackboneConfig {
            input_size,
            widths,
            strides,
            norm_kind,
            vsp_enabled: variant.view_specific(),
        };
        config.validate()?;
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut c_in = 1;
        for (i, (&c_out, &stride)) in config.widths.iter().zip(&config.strides).enumerate() {
            let prefix = format!("stage{}", i + 1);
            let conv = ConvLayer::new(
                &mut store,
                &format!("{prefix}.conv"),
                c_in,
                c_out,
                KERNEL,
                stride,
                PAD,
                rng,
            );
            let norm = NormLayer::new(
                &mut store,
                &format!("{prefix}.norm"),
                norm_kind,
                c_out,
                config.vsp_enabled,
            );
            stages.push(Stage { conv, norm });
            c_in = c_out;
        }
        let head_in = if variant.fused() { 3 * config.final_width() } else { config.final_width() };
        let head = DenseLayer::new(&mut store, "head", head_in, 1, rng);
        Ok(FibrosisModel { variant, config, store, stages, head })
    }

    /// Standard desk-scale architecture: 64x64 input, widths 16/32/64,
    /// strides 1/2/2.
    pub fn with_defaults(
        variant: ModelVariant,
        norm_kind: NormKind,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        Self::new(variant, norm_kind, (64, 64), vec![16, 32, 64], vec![1, 2, 2], rng)
    }

    pub fn variant(&self) -> ModelVariant {
        self.variant
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Parameter ids of every normalization affine bank (the view-indexed
    /// set when view-specific).
    pub fn norm_param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.norm.param_ids()).collect()
    }

    /// Total scalar count of normalization affine parameters.
    pub fn norm_affine_value_count(&self) -> usize {
        self.stages.iter().map(|s| s.norm.affine_value_count()).sum()
    }

    fn check_image(&self, t: &Tensor) -> Result<(), ModelError> {
        let (h, w) = self.config.input_size;
        if t.shape() != [h, w] {
            return Err(ModelError::InputSize {
                got: t.shape().to_vec(),
                expected: self.config.input_size,
            });
        }
        Ok(())
    }

    /// Stack per-image `[H, W]` tensors into an untracked `[K, 1, H, W]`
    /// batch leaf.
    fn stack_images(&self, tape: &mut Tape, images: &[StudyImage]) -> Result<Val, ModelError> {
        if images.is_empty() {
            return Err(ModelError::EmptyStudy);
        }
        let (h, w) = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            self.check_image(img.image)?;
            data.extend_from_slice(img.image.data());
        }
        let t = Tensor::from_vec(vec![images.len(), 1, h, w], data)?;
        Ok(tape.constant(t))
    }

    /// Run the backbone over a `[N, 1, H, W]` batch.
    fn backbone(
        &mut self,
        tape: &mut Tape,
        binds: &mut Bindings,
        mut x: Val,
        views: &[u8],
        phase: Phase,
    ) -> Result<Val, ModelError> {
        for stage in &mut self.stages {
            x = stage.conv.forward(tape, &self.store, binds, x)?;
            x = stage.norm.forward(tape, &self.store, binds, x, views, phase)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    fn pooling_masks(&self, images: &[StudyImage]) -> Result<Option<Vec<Tensor>>, ModelError> {
        if !self.variant.uses_roi() {
            return Ok(None);
        }
        let dims = self.config.feature_dims();
        let masks = images
            .iter()
            .map(|img| {
                self.check_image(img.roi)?;
                downsample_mask(img.roi, dims)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Some(masks))
    }

    /// Study probability as a tape value (scalar for fused variants, one
    /// probability per image otherwise). This is the training entry point;
    /// several studies may share one tape and one [`Bindings`] list.
    pub fn study_probs_on_tape(
        &mut self,
        tape: &mut Tape,
        binds: &mut Bindings,
        images: &[StudyImage],
        phase: Phase,
    ) -> Result<Val, ModelError> {
        let x = self.stack_images(tape, images)?;
        let views: Vec<u8> = images.iter().map(|i| i.view).collect();
        let feats = self.backbone(tape, binds, x, &views, phase)?;
        let masks = self.pooling_masks(images)?;
        let pooled = tape.spatial_mean(feats, masks.as_deref())?;
        let logits = if self.variant.fused() {
            let fused = tape.fuse_stats(pooled)?;
            self.head.forward(tape, &self.store, binds, fused)?
        } else {
            self.head.forward(tape, &self.store, binds, pooled)?
        };
        Ok(tape.sigmoid(logits))
    }

    /// Study-level probability: the fused prediction for fusion variants,
    /// median late fusion of per-image predictions otherwise.
    pub fn predict_study(&mut self, images: &[StudyImage], phase: Phase) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let probs = self.study_probs_on_tape(&mut tape, &mut binds, images, phase)?;
        let values = tape.value(probs).data();
        if self.variant.fused() {
            Ok(values[0])
        } else {
            median_late_fusion(values)
        }
    }

    /// Probability for a single image.
    pub fn predict_image(
        &mut self,
        image: &Tensor,
        view: u8,
        roi: &Tensor,
        phase: Phase,
    ) -> Result<f64, ModelError> {
        let imgs = [StudyImage { image, view, roi }];
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let probs = self.study_probs_on_tape(&mut tape, &mut binds, &imgs, phase)?;
        Ok(tape.value(probs).data()[0])
    }

    /// Per-image pooled feature vectors `[K, C]`, for inspection tooling.
    pub fn pooled_vectors(
        &mut self,
        images: &[StudyImage],
        phase: Phase,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let x = self.stack_images(&mut tape, images)?;
        let views: Vec<u8> = images.iter().map(|i| i.view).collect();
        let feats = self.backbone(&mut tape, &mut binds, x, &views, phase)?;
        let masks = self.pooling_masks(images)?;
        let pooled = tape.spatial_mean(feats, masks.as_deref())?;
        let c = self.config.final_width();
        let data = tape.value(pooled).data();
        Ok(data.chunks(c).map(|row| row.to_vec()).collect())
    }

    /// Feature map of one image under its view's normalization bank.
    pub fn extract_features(
        &mut self,
        image: &Tensor,
        view: u8,
        phase: Phase,
    ) -> Result<Tensor, ModelError> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let mut binds = Bindings::new();
        let (h, w) = self.config.input_size;
        let x = Tensor::from_vec(vec![1, 1, h, w], image.data().to_vec())?;
        let xv = tape.constant(x);
        let feats = self.backbone(&mut tape, &mut binds, xv, &[view], phase)?;
        let (fh, fw) = self.config.feature_dims();
        let c = self.config.final_width();
        Ok(Tensor::from_vec(vec![c, fh, fw], tape.value(feats).data().to_vec())?)
    }
}

/// Average-pool a binary input-resolution mask over each stride-by-stride
/// cell and binarize at coverage >= 0.5.
pub fn downsample_mask(mask: &Tensor, target: (usize, usize)) -> Result<Tensor, ModelError> {
    let (th, tw) = target;
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(ModelError::MaskNotDivisible { mask: other.to_vec(), target })
        }
    };
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(ModelError::MaskNotDivisible { mask: mask.shape().to_vec(), target });
    }
    let (sh, sw) = (h / th, w / tw);
    let cell = (sh * sw) as f64;
    let mut out = vec![0.0; th * tw];
    for r in 0..th {
        for c in 0..tw {
            let mut sum = 0.0;
            for dr in 0..sh {
                let row = r * sh + dr;
                for dc in 0..sw {
                    sum += mask.data()[row * w + c * sw + dc];
                }
            }
            out[r * tw + c] = if sum / cell >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    Ok(Tensor::from_vec(vec![th, tw], out)?)
}

/// Masked global average pooling of a single feature map `[C, H', W']`
/// against a `[H', W']` mask, dividing by the full spatial area.
pub fn clinical_roi_pool(
    tape: &mut Tape,
    feats: Val,
    mask: &Tensor,
) -> Result<Val, TensorError> {
    tape.spatial_mean(feats, Some(std::slice::from_ref(mask)))
}

/// Median of per-image probabilities; even-length lists take the midpoint
/// of the two central values.
pub fn median_late_fusion(probs: &[f64]) -> Result<f64, ModelError> {
    if probs.is_empty() {
        return Err(ModelError::EmptyStudy);
    }
    if let Some(&bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(ModelError::BadProbability(bad));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite probabilities"));
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

// ---- checkpoint format --------------------------------------------------
//
// Layout: magic "HFUS1" | u64 LE manifest byte length | manifest (UTF-8)
// | payload (little-endian f64, row-major, in manifest order).
//
// Manifest line 1 is the config record:
//   config variant=<v> norm=<kind> vsp=<bool> input=<H>x<W> widths=a,b,c strides=a,b,c
// Every following line is one tensor: `<name> <d0,d1,...> <byte offset>`.
// Normalization running statistics ride along as `<stage>.norm.running_mean`
// / `.running_var` tensors so batch-norm models restore exactly.

const CHECKPOINT_MAGIC: &[u8; 5] = b"HFUS1";

impl FibrosisModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.config;
        let mut manifest = format!(
            "config variant={} norm={} vsp={} input={}x{} widths={} strides={}\n",
            self.variant.as_str(),
            cfg.norm_kind.as_str(),
            cfg.vsp_enabled,
            cfg.input_size.0,
            cfg.input_size.1,
            join_usize(&cfg.widths),
            join_usize(&cfg.strides),
        );
        let mut payload: Vec<u8> = Vec::new();
        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        for p in self.store.iter() {
            tensors.push((p.name().to_string(), p.value().shape().to_vec(), p.value().data()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let (rm, rv) = stage.norm.running_stats();
            tensors.push((format!("stage{}.norm.running_mean", i + 1), vec![rm.len()], rm));
            tensors.push((format!("stage{}.norm.running_var", i + 1), vec![rv.len()], rv));
        }
        for (name, shape, data) in tensors {
            manifest.push_str(&format!("{name} {} {}\n", join_usize(&shape), payload.len()));
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(5 + 8 + manifest.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let fail = |msg: &str| ModelError::Checkpoint(msg.to_string());
        if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic; not a model checkpoint"));
        }
        let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let manifest_end = 13usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("manifest length exceeds file size"))?;
        let manifest = std::str::from_utf8(&bytes[13..manifest_end])
            .map_err(|_| fail("manifest is not UTF-8"))?;
        let payload = &bytes[manifest_end..];

        let mut lines = manifest.lines();
        let config_line = lines.next().ok_or_else(|| fail("empty manifest"))?;
        let (variant, norm_kind, vsp, input_size, widths, strides) =
            parse_config_record(config_line).ok_or_else(|| {
                ModelError::Checkpoint(format!("malformed config record: {config_line}"))
            })?;
        let mut model = FibrosisModel::new(
            variant,
            norm_kind,
            input_size,
            widths,
            strides,
            // all values are overwritten below; any generator works
            &mut rand::rngs::mock::StepRng::new(1, 1),
        )?;
        if model.config.vsp_enabled != vsp {
            return Err(fail("vsp flag inconsistent with variant"));
        }

        let mut seen = std::collections::HashSet::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            let (name, shape_s, offset_s) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) if parts.next().is_none() => (a, b, c),
                _ => return Err(ModelError::Checkpoint(format!("malformed tensor line: {line}"))),
            };
            let shape = parse_usize_list(shape_s)
                .ok_or_else(|| ModelError::Checkpoint(format!("bad shape in: {line}")))?;
            let offset: usize = offset_s
                .parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad offset in: {line}")))?;
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if end > payload.len() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name} extends past payload end"
                )));
            }
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let b: [u8; 8] = payload[offset + i * 8..offset + (i + 1) * 8].try_into().unwrap();
                data.push(f64::from_le_bytes(b));
            }
            if !seen.insert(name.to_string()) {
                return Err(ModelError::Checkpoint(format!("duplicate tensor {name}")));
            }
            if let Some(stats_target) = name.strip_suffix(".running_mean") {
                set_running(&mut model, stats_target, RunningSlot::Mean, data, &shape)?;
            } else if let Some(stats_target) = name.strip_suffix(".running_var") {
                set_running(&mut model, stats_target, RunningSlot::Var, data, &shape)?;
            } else {
                let id = model.store.find(name).ok_or_else(|| {
                    ModelError::Checkpoint(format!("unknown tensor {name}"))
                })?;
                let param = model.store.get_mut(id);
                if param.value().shape() != shape.as_slice() {
                    return Err(ModelError::Checkpoint(format!(
                        "tensor {name}: shape {:?} in file, {:?} in model",
                        shape,
                        param.value().shape()
                    )));
                }
                *param.value_mut() = Tensor::from_vec(shape, data)?;
            }
        }
        let missing: Vec<&str> = model
            .store
            .iter()
            .map(|p| p.name())
            .filter(|n| !seen.contains(*n))
            .collect();
        if !missing.is_empty() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint is missing tensors: {}",
                missing.join(", ")
            )));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

enum RunningSlot {
    Mean,
    Var,
}

fn set_running(
    model: &mut FibrosisModel,
    prefix: &str,
    slot: RunningSlot,
    data: Vec<f64>,
    shape: &[usize],
) -> Result<(), ModelError> {
    // prefix is e.g. "stage2.norm"
    let idx = prefix
        .strip_prefix("stage")
        .and_then(|s| s.strip_suffix(".norm"))
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| i >= 1 && i <= model.stages.len())
        .ok_or_else(|| ModelError::Checkpoint(format!("unknown running-stats owner {prefix}")))?;
    let stage = &mut model.stages[idx - 1];
    if shape != [stage.norm.channels()] {
        return Err(ModelError::Checkpoint(format!(
            "running stats for {prefix}: got {shape:?}, expected [{}]",
            stage.norm.channels()
        )));
    }
    let (rm, rv) = stage.norm.running_stats();
    let (mut rm, mut rv) = (rm.to_vec(), rv.to_vec());
    match slot {
        RunningSlot::Mean => rm = data,
        RunningSlot::Var => rv = data,
    }
    stage.norm.set_running_stats(rm, rv);
    Ok(())
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_usize_list(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|p| p.parse().ok()).collect()
}

type ConfigRecord =
    (ModelVariant, NormKind, bool, (usize, usize), Vec<usize>, Vec<usize>);

fn parse_config_record(line: &str) -> Option<ConfigRecord> {
    let mut variant = None;
    let mut norm = None;
    let mut vsp = None;
    let mut input = None;
    let mut widths = None;
    let mut strides = None;
    let mut fields = line.split(' ');
    if fields.next() != Some("config") {
        return None;
    }
    for field in fields {
        let (key, value) = field.split_once('=')?;
        match key {
            "variant" => variant = ModelVariant::parse(value),
            "norm" => norm = NormKind::parse(value),
            "vsp" => vsp = value.parse::<bool>().ok(),
            "input" => {
                let (h, w) = value.split_once('x')?;
                input = Some((h.parse().ok()?, w.parse().ok()?));
            }
            "widths" => widths = parse_usize_list(value),
            "strides" => strides = parse_usize_list(value),
            _ => return None,
        }
    }
    Some((variant?, norm?, vsp?, input?, widths?, strides?))
}
