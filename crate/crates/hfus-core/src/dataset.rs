//! Study/image data model, clinical-ROI construction from liver masks,
//! PGM + JSONL manifest file formats, and the seeded synthetic phantom
//! generator used for end-to-end validation.
//!
//! A *study* is one patient exam: up to 14 grayscale ultrasound images,
//! each tagged with a probe view in 1..6 and paired with a binary liver
//! mask. The clinical region of interest is a filled rectangle covering
//! the top half of the liver plus a margin above its upper border; it is
//! derived from the mask at load time and cached on each image.

use crate::model::StudyImage;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed PGM {path}: {detail}")]
    MalformedPgm { path: PathBuf, detail: String },
    #[error("manifest line {line}: {detail}")]
    BadRecord { line: usize, detail: String },
    #[error("manifest line {line}: view {view} outside 1..6")]
    BadView { line: usize, view: u8 },
    #[error("study {study_id} has inconsistent labels (line {line})")]
    InconsistentLabel { study_id: String, line: usize },
    #[error("liver mask is empty; cannot derive a region of interest")]
    EmptyMask,
    #[error("study needs 1..=14 images, got {0}")]
    BadImageCount(usize),
    #[error("view {0} outside 1..6")]
    ViewOutOfRange(u8),
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub const MAX_IMAGES_PER_STUDY: usize = 14;
pub const NUM_VIEWS: u8 = 6;

// ---- clinical region of interest -----------------------------------------

/// Filled axis-aligned rectangle covering the top half of the liver mask
/// plus a margin above its upper border. Bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClinicalRoi {
    pub row_top: usize,
    pub row_bottom: usize,
    pub col_left: usize,
    pub col_right: usize,
}

impl ClinicalRoi {
    pub fn to_mask(&self, h: usize, w: usize) -> Tensor {
        let mut data = vec![0.0; h * w];
        for r in self.row_top..=self.row_bottom.min(h - 1) {
            for c in self.col_left..=self.col_right.min(w - 1) {
                data[r * w + c] = 1.0;
            }
        }
        Tensor::from_vec(vec![h, w], data).expect("mask shape")
    }
}

/// Margin added above the liver's top border, proportional to image height
/// (10 rows at a 128-row reference, at least 1).
fn roi_extension(h: usize) -> usize {
    ((10.0 * h as f64 / 128.0).round() as usize).max(1)
}

/// Derive the clinical ROI rectangle from a binary liver mask: rows from
/// `max(0, r_min - ext)` down to the vertical midpoint of the mask's
/// bounding box, all bounding-box columns.
pub fn roi_from_liver_mask(mask: &Tensor) -> Result<ClinicalRoi, DatasetError> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(DatasetError::BadConfig(format!("mask must be 2-D, got {other:?}")))
        }
    };
    let (mut r_min, mut r_max, mut c_min, mut c_max) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if mask.data()[r * w + c] != 0.0 {
                r_min = r_min.min(r);
                r_max = r_max.max(r);
                c_min = c_min.min(c);
                c_max = c_max.max(c);
            }
        }
    }
    if r_min == usize::MAX {
        return Err(DatasetError::EmptyMask);
    }
    Ok(ClinicalRoi {
        row_top: r_min.saturating_sub(roi_extension(h)),
        row_bottom: r_min + (r_max - r_min) / 2,
        col_left: c_min,
        col_right: c_max,
    })
}

// ---- PGM (P5) -------------------------------------------------------------

/// Read an 8-bit binary PGM into a `[H, W]` tensor with values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor, DatasetError> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io(e)
        }
    })?;
    let fail = |detail: &str| DatasetError::MalformedPgm {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(fail("missing P5 magic"));
    }
    // header tokens (width, height, maxval) separated by whitespace, with
    // '#' comments running to end of line
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated or non-numeric header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are UTF-8")
            .parse()
            .map_err(|_| fail("header value out of range"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(fail("zero dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(fail("maxval must be in 1..=255 (8-bit)"));
    }
    // exactly one whitespace byte between maxval and the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fail("missing raster separator"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != w * h {
        return Err(fail(&format!("raster has {} bytes, expected {}", raster.len(), w * h)));
    }
    // divide rather than multiply by a reciprocal so values land exactly on
    // the k/maxval grid the writer quantizes to
    let data = raster.iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(Tensor::from_vec(vec![h, w], data)?)
}

/// Write a `[H, W]` tensor with values in `[0, 1]` as binary PGM, maxval 255.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<(), DatasetError> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(DatasetError::BadConfig(format!("PGM image must be 2-D, got {other:?}")))
        }
    };
    let mut out = Vec::with_capacity(20 + h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Binarize a grayscale mask image at the 128/255 threshold.
pub fn threshold_mask(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(t.shape().to_vec(), data).expect("same shape")
}

// ---- resampling helpers ----------------------------------------------------

/// Bilinear sample at fractional coordinates, clamping to the border.
pub fn sample_bilinear(img: &Tensor, r: f64, c: f64) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let rc = r.clamp(0.0, (h - 1) as f64);
    let cc = c.clamp(0.0, (w - 1) as f64);
    let r0 = rc.floor() as usize;
    let c0 = cc.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = rc - r0 as f64;
    let fc = cc - c0 as f64;
    let d = img.data();
    let top = d[r0 * w + c0] * (1.0 - fc) + d[r0 * w + c1] * fc;
    let bot = d[r1 * w + c0] * (1.0 - fc) + d[r1 * w + c1] * fc;
    top * (1.0 - fr) + bot * fr
}

/// Nearest-neighbour sample, clamping to the border.
pub fn sample_nearest(img: &Tensor, r: f64, c: f64) -> f64 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let ri = (r.round().max(0.0) as usize).min(h - 1);
    let ci = (c.round().max(0.0) as usize).min(w - 1);
    img.data()[ri * w + ci]
}

fn resize_with(img: &Tensor, target: (usize, usize), f: impl Fn(&Tensor, f64, f64) -> f64) -> Tensor {
    let (h_in, w_in) = (img.shape()[0], img.shape()[1]);
    let (h, w) = target;
    let sr = h_in as f64 / h as f64;
    let sc = w_in as f64 / w as f64;
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            // pixel-center alignment
            let rin = (r as f64 + 0.5) * sr - 0.5;
            let cin = (c as f64 + 0.5) * sc - 0.5;
            data.push(f(img, rin, cin));
        }
    }
    Tensor::from_vec(vec![h, w], data).expect("resize shape")
}

pub fn resize_bilinear(img: &Tensor, target: (usize, usize)) -> Tensor {
    resize_with(img, target, sample_bilinear)
}

pub fn resize_nearest(img: &Tensor, target: (usize, usize)) -> Tensor {
    resize_with(img, target, sample_nearest)
}

// ---- study model ------------------------------------------------------------

/// One image of a study: pixels in `[0, 1]`, probe view, ground-truth liver
/// mask, and the derived clinical ROI mask (all at input resolution).
#[derive(Debug, Clone, PartialEq)]
pub struct StudyImageData {
    pub view: u8,
    pub image: Tensor,
    pub liver_mask: Tensor,
    pub roi: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub patient_id: String,
    pub label: u8,
    pub images: Vec<StudyImageData>,
}

impl Study {
    /// Borrow all images in model-input form.
    pub fn inputs(&self) -> Vec<StudyImage<'_>> {
        self.images
            .iter()
            .map(|im| StudyImage { image: &im.image, view: im.view, roi: &im.roi })
            .collect()
    }

    /// Borrow the images at `indices` in model-input form.
    pub fn inputs_for(&self, indices: &[usize]) -> Vec<StudyImage<'_>> {
        indices
            .iter()
            .map(|&i| {
                let im = &self.images[i];
                StudyImage { image: &im.image, view: im.view, roi: &im.roi }
            })
            .collect()
    }
}

// ---- manifest I/O -------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    study_id: String,
    patient_id: String,
    label: u8,
    view: u8,
    image_path: String,
    mask_path: String,
}

/// Load a JSON Lines manifest into studies grouped by `study_id`, resizing
/// images (bilinear) and masks (nearest) to `input_size` when stored
/// dimensions differ. Grouping preserves file order within each study.
pub fn load_manifest(path: &Path, input_size: (usize, usize)) -> Result<Vec<Study>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io(e)
        }
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut studies: Vec<Study> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| DatasetError::BadRecord { line: line_num, detail: e.to_string() })?;
        if rec.view == 0 || rec.view > NUM_VIEWS {
            return Err(DatasetError::BadView { line: line_num, view: rec.view });
        }
        if rec.label > 1 {
            return Err(DatasetError::BadRecord {
                line: line_num,
                detail: format!("label {} outside {{0, 1}}", rec.label),
            });
        }
        let mut image = read_pgm(&base.join(&rec.image_path))?;
        let mut mask = threshold_mask(&read_pgm(&base.join(&rec.mask_path))?);
        if image.shape() != [input_size.0, input_size.1] {
            image = resize_bilinear(&image, input_size);
        }
        if mask.shape() != [input_size.0, input_size.1] {
            mask = resize_nearest(&mask, input_size);
        }
        let roi = roi_from_liver_mask(&mask)?.to_mask(input_size.0, input_size.1);
        let img = StudyImageData { view: rec.view, image, liver_mask: mask, roi };
        match index.get(&rec.study_id) {
            Some(&i) => {
                if studies[i].label != rec.label {
                    return Err(DatasetError::InconsistentLabel {
                        study_id: rec.study_id,
                        line: line_num,
                    });
                }
                if studies[i].patient_id != rec.patient_id {
                    return Err(DatasetError::BadRecord {
                        line: line_num,
                        detail: format!(
                            "study {} maps to two patient ids",
                            rec.study_id
                        ),
                    });
                }
                studies[i].images.push(img);
            }
            None => {
                index.insert(rec.study_id.clone(), studies.len());
                studies.push(Study {
                    study_id: rec.study_id,
                    patient_id: rec.patient_id,
                    label: rec.label,
                    images: vec![img],
                });
            }
        }
    }
    for s in &studies {
        if s.images.is_empty() || s.images.len() > MAX_IMAGES_PER_STUDY {
            return Err(DatasetError::BadImageCount(s.images.len()));
        }
    }
    Ok(studies)
}

/// Write studies as PGM files plus a JSONL manifest under `dir`; returns the
/// manifest path. Paths inside the manifest are relative to it.
pub fn save_dataset(studies: &[Study], dir: &Path) -> Result<PathBuf, DatasetError> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut lines = String::new();
    for study in studies {
        for (i, img) in study.images.iter().enumerate() {
            let image_path = format!("images/{}_{:02}.pgm", study.study_id, i);
            let mask_path = format!("masks/{}_{:02}.pgm", study.study_id, i);
            write_pgm(&dir.join(&image_path), &img.image)?;
            write_pgm(&dir.join(&mask_path), &img.liver_mask)?;
            let rec = ManifestRecord {
                study_id: study.study_id.clone(),
                patient_id: study.patient_id.clone(),
                label: study.label,
                view: img.view,
                image_path,
                mask_path,
            };
            lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            lines.push('\n');
        }
    }
    std::fs::write(&manifest_path, lines)?;
    Ok(manifest_path)
}

// ---- synthetic phantom generator ---------------------------------------------

/// Whether generated studies carry a corner intensity patch correlated with
/// the label (`Train`), anti-correlated (`Flipped`), or absent (`Off`).
/// Used to probe shortcut learning: the patch sits outside every clinical
/// ROI's receptive field, so ROI pooling cannot reach it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfounderMode {
    Off,
    Train,
    Flipped,
}

impl ConfounderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ConfounderMode::Off => "off",
            ConfounderMode::Train => "train",
            ConfounderMode::Flipped => "flipped",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "off" => Some(ConfounderMode::Off),
            "train" => Some(ConfounderMode::Train),
            "flipped" => Some(ConfounderMode::Flipped),
            _ => None,
        }
    }
}

impl fmt::Display for ConfounderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How informative each probe view is: views 1-2 show the markers clearly,
/// views 5-6 least. Indexed by `view - 1`.
const VIEW_GAIN: [f64; 6] = [1.0, 1.0, 0.9, 0.8, 0.65, 0.5];

/// Probability that an individual image carries a strongly attenuated
/// texture signal, making single images unreliable and multi-image fusion
/// worthwhile.
const SIGNAL_DROPOUT: f64 = 0.3;

/// Ellipse placement per view at the 64x64 reference scale:
/// (center_row, center_col, semi_axis_row, semi_axis_col, angle_degrees).
/// Centers sit low enough that the liver's top border stays at or below row
/// 17 under the worst combination of jitter, rotation, and border
/// nodularity — see the `PATCH` note for why that margin matters.
const VIEW_ELLIPSE: [(f64, f64, f64, f64, f64); 6] = [
    (37.0, 32.0, 14.0, 20.0, 0.0),
    (36.0, 28.0, 13.0, 21.0, 10.0),
    (38.0, 35.0, 15.0, 18.0, -12.0),
    (36.0, 30.0, 12.0, 22.0, 18.0),
    (39.0, 33.0, 14.0, 19.0, -8.0),
    (36.0, 34.0, 13.0, 18.0, 5.0),
];

const BACKGROUND_LEVEL: f64 = 0.38;
const LIVER_LEVEL: f64 = 0.52;
const SPECKLE_SIGMA: f64 = 0.18;
const COARSE_AMPLITUDE: f64 = 0.16;
const FINE_AMPLITUDE: f64 = 0.05;
const COARSE_CELL: usize = 4;
const NODULARITY_AMPLITUDE: f64 = 0.10;
/// Confounder patch occupies rows and columns `0..PATCH`, mimicking a
/// burned-in annotation glyph in the dead corner of a clinical capture. The
/// view ellipses keep the liver's top border at row >= 17 (64x64 scale), so
/// the clinical ROI rectangle starts at row >= 12 and only stride-4 feature
/// cells at grid row >= 3 carry ROI weight; their 9-pixel receptive fields
/// start at input row 8, strictly below the patch. Whole-image pooling can
/// exploit the patch while ROI pooling cannot reach it through any
/// receptive field.
const PATCH: usize = 4;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniform draws per sample keeps the stream simple
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Zero-mean noise field with the given cell size (correlation length),
/// bilinearly upsampled from a coarse grid.
fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    if cell <= 1 {
        return (0..h * w).map(|_| gaussian(rng)).collect();
    }
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| gaussian(rng)).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let gr = r as f64 / cell as f64;
            let gc = c as f64 / cell as f64;
            let r0 = gr.floor() as usize;
            let c0 = gc.floor() as usize;
            let fr = gr - r0 as f64;
            let fc = gc - c0 as f64;
            let g = |rr: usize, cc: usize| grid[rr.min(gh - 1) * gw + cc.min(gw - 1)];
            let top = g(r0, c0) * (1.0 - fc) + g(r0, c0 + 1) * fc;
            let bot = g(r0 + 1, c0) * (1.0 - fc) + g(r0 + 1, c0 + 1) * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

/// Deterministically generate one study. The RNG stream is derived from
/// `(seed, study_index)`, so studies can be produced independently and in
/// any order.
pub fn generate_synthetic_study(
    seed: u64,
    study_index: u64,
    label: u8,
    views: &[u8],
    confounder: ConfounderMode,
    size: (usize, usize),
) -> Result<Study, DatasetError> {
    if views.is_empty() || views.len() > MAX_IMAGES_PER_STUDY {
        return Err(DatasetError::BadImageCount(views.len()));
    }
    if let Some(&v) = views.iter().find(|&&v| v == 0 || v > NUM_VIEWS) {
        return Err(DatasetError::ViewOutOfRange(v));
    }
    if label > 1 {
        return Err(DatasetError::BadConfig(format!("label {label} outside {{0, 1}}")));
    }
    let (h, w) = size;
    if h < 32 || w < 32 {
        return Err(DatasetError::BadConfig(format!("image size {h}x{w} below 32x32 minimum")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(study_index);

    let mut images = Vec::with_capacity(views.len());
    for &view in views {
        images.push(generate_image(&mut rng, label, view, confounder, h, w)?);
    }
    Ok(Study {
        study_id: format!("study{study_index:04}"),
        patient_id: format!("patient{study_index:04}"),
        label,
        images,
    })
}

fn generate_image(
    rng: &mut ChaCha8Rng,
    label: u8,
    view: u8,
    confounder: ConfounderMode,
    h: usize,
    w: usize,
) -> Result<StudyImageData, DatasetError> {
    let gain = VIEW_GAIN[view as usize - 1];
    let (scale_r, scale_c) = (h as f64 / 64.0, w as f64 / 64.0);
    let geo = scale_r.min(scale_c);

    // liver ellipse: per-view placement plus a small jitter
    let (cr0, cc0, ar0, ac0, ang0) = VIEW_ELLIPSE[view as usize - 1];
    let cr = (cr0 + rng.gen_range(-2.0..2.0)) * scale_r;
    let cc = (cc0 + rng.gen_range(-2.0..2.0)) * scale_c;
    let ar = (ar0 + rng.gen_range(-1.5..1.5)) * geo;
    let ac = (ac0 + rng.gen_range(-1.5..1.5)) * geo;
    let angle = (ang0 + rng.gen_range(-4.0..4.0)).to_radians();

    // fibrosis markers: coarse in-liver texture and upper-border nodularity
    let dropped = rng.gen_range(0.0..1.0) < SIGNAL_DROPOUT;
    let texture_gain = if label == 1 {
        COARSE_AMPLITUDE * gain * if dropped { 0.25 } else { 1.0 }
    } else {
        FINE_AMPLITUDE
    };
    let cell = if label == 1 { (COARSE_CELL as f64 * geo).round() as usize } else { 1 };
    let texture = smooth_noise(rng, h, w, cell.max(1));
    let nod_amp = if label == 1 { NODULARITY_AMPLITUDE * gain } else { 0.0 };
    let nod_freq = 8.0 + rng.gen_range(-1.0..1.0);
    let nod_phase = rng.gen_range(0.0..std::f64::consts::TAU);

    let (sin_a, cos_a) = angle.sin_cos();
    let mut pixels = vec![0.0_f64; h * w];
    let mut mask = vec![0.0_f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let dr = r as f64 - cr;
            let dc = c as f64 - cc;
            // ellipse-aligned normalized coordinates
            let u = (dr * cos_a + dc * sin_a) / ar;
            let v = (-dr * sin_a + dc * cos_a) / ac;
            let rho = (u * u + v * v).sqrt();
            // nodularity perturbs the boundary radius on the upper border
            let upper = (-dr / (0.3 * ar)).clamp(0.0, 1.0);
            let phi = v.atan2(u);
            let boundary = 1.0 + nod_amp * upper * (nod_freq * phi + nod_phase).sin();
            let inside = rho <= boundary;
            let base = if inside {
                LIVER_LEVEL + texture_gain * texture[r * w + c]
            } else {
                BACKGROUND_LEVEL + 0.02 * texture[r * w + c]
            };
            let speckle =
                (SPECKLE_SIGMA * gaussian(rng) - 0.5 * SPECKLE_SIGMA * SPECKLE_SIGMA).exp();
            pixels[r * w + c] = (base * speckle).clamp(0.0, 1.0);
            if inside {
                mask[r * w + c] = 1.0;
            }
        }
    }

    // corner patch correlated (or anti-correlated) with the label; sits in
    // rows/cols 0..PATCH, above every ROI-weighted receptive field
    let bright = match confounder {
        ConfounderMode::Off => None,
        ConfounderMode::Train => Some(label == 1),
        ConfounderMode::Flipped => Some(label == 0),
    };
    if let Some(bright) = bright {
        let level = if bright { 0.9 } else { 0.1 } + rng.gen_range(-0.05..0.05);
        let ph = ((PATCH as f64 * scale_r).round() as usize).min(h);
        let pw = ((PATCH as f64 * scale_c).round() as usize).min(w);
        for r in 0..ph {
            for c in 0..pw {
                pixels[r * w + c] = (level + 0.03 * gaussian(rng)).clamp(0.0, 1.0);
            }
        }
    }

    // snap to the 8-bit grid so a PGM round trip is pixel-exact
    for v in &mut pixels {
        *v = (*v * 255.0).round() / 255.0;
    }

    let image = Tensor::from_vec(vec![h, w], pixels)?;
    let liver_mask = Tensor::from_vec(vec![h, w], mask)?;
    let roi = roi_from_liver_mask(&liver_mask)?.to_mask(h, w);
    Ok(StudyImageData { view, image, liver_mask, roi })
}

/// Parameters for a full synthetic corpus.
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub studies: usize,
    pub seed: u64,
    pub min_images: usize,
    pub max_images: usize,
    pub confounder: ConfounderMode,
    pub image_size: (usize, usize),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            studies: 200,
            seed: 0,
            min_images: 1,
            max_images: 14,
            confounder: ConfounderMode::Off,
            image_size: (64, 64),
        }
    }
}

/// Generate a corpus of studies, one patient per study, with alternating
/// labels (ceil(N/2) positive) and uniformly drawn image counts and views.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Study>, DatasetError> {
    if cfg.studies == 0 {
        return Err(DatasetError::BadConfig("corpus needs at least one study".into()));
    }
    if cfg.min_images == 0
        || cfg.min_images > cfg.max_images
        || cfg.max_images > MAX_IMAGES_PER_STUDY
    {
        return Err(DatasetError::BadConfig(format!(
            "image count range {}..={} invalid (must lie in 1..={MAX_IMAGES_PER_STUDY})",
            cfg.min_images, cfg.max_images
        )));
    }
    let mut studies = Vec::with_capacity(cfg.studies);
    for i in 0..cfg.studies {
        // per-study draws (count, views) come from a dedicated stream so the
        // study body's stream stays aligned with generate_synthetic_study
        let mut meta = ChaCha8Rng::seed_from_u64(cfg.seed);
        meta.set_stream(u64::MAX - i as u64);
        let k = meta.gen_range(cfg.min_images..=cfg.max_images);
        let views: Vec<u8> = (0..k).map(|_| meta.gen_range(1..=NUM_VIEWS)).collect();
        let label = (i % 2 == 0) as u8;
        studies.push(generate_synthetic_study(
            cfg.seed,
            i as u64,
            label,
            &views,
            cfg.confounder,
            cfg.image_size,
        )?);
    }
    Ok(studies)
}
