//! ROC construction, full and partial AUC, recall-at-precision, study
//! scoring, and cross-fold aggregation, plus the CSV report formats.

use crate::dataset::Study;
use crate::layers::Phase;
use crate::model::{FibrosisModel, ModelError};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels must contain both classes")]
    SingleClass,
    #[error("invalid evaluation input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC staircase from (0, 0) to (1, 1). Tied scores advance true and false
/// positives jointly, producing one diagonal segment per tie group.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn points(&self) -> &[RocPoint] {
        &self.points
    }

    /// Rebuild a curve from staircase points (for example, parsed back from
    /// an exported CSV). Points must start at (0, 0), end at (1, 1), and be
    /// coordinate-wise nondecreasing with nonincreasing thresholds.
    pub fn from_points(points: Vec<RocPoint>) -> Result<Self, EvalError> {
        let bad = |msg: String| Err(EvalError::BadInput(msg));
        match (points.first(), points.last()) {
            (Some(first), Some(last)) => {
                if (first.fpr, first.tpr) != (0.0, 0.0) {
                    return bad(format!("curve starts at ({}, {})", first.fpr, first.tpr));
                }
                if (last.fpr, last.tpr) != (1.0, 1.0) {
                    return bad(format!("curve ends at ({}, {})", last.fpr, last.tpr));
                }
            }
            _ => return bad("empty point list".into()),
        }
        for w in points.windows(2) {
            if w[1].fpr < w[0].fpr || w[1].tpr < w[0].tpr || w[1].threshold > w[0].threshold {
                return bad(format!(
                    "non-monotone staircase near fpr {} tpr {}",
                    w[1].fpr, w[1].tpr
                ));
            }
        }
        Ok(RocCurve { points })
    }

    /// Upper-envelope TPR at a false-positive rate: at a vertical run the
    /// upper value applies (it is what holds immediately rightward).
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        let pts = &self.points;
        let mut i = pts.len() - 1;
        while pts[i].fpr > fpr {
            i -= 1; // pts[0].fpr == 0.0 <= fpr terminates the walk
        }
        if pts[i].fpr >= fpr || i + 1 == pts.len() {
            pts[i].tpr
        } else {
            let (a, b) = (&pts[i], &pts[i + 1]);
            a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)
        }
    }
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::BadInput(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(EvalError::BadInput("empty score list".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::BadInput(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::BadInput(format!("label {l} outside {{0, 1}}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Scores sorted descending and grouped by distinct value, with the
/// cumulative (tp, fp) after each group.
fn cumulative_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut groups = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        groups.push((s, tp, fp));
    }
    groups
}

/// Build the ROC staircase. Requires at least one positive and one negative.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve, EvalError> {
    let (pos, neg) = check_scores(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    for (s, tp, fp) in cumulative_groups(scores, labels) {
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the staircase (diagonal tie segments earn half
/// credit, matching the concordant-pair statistic).
pub fn auc(curve: &RocCurve) -> f64 {
    let pts = curve.points();
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0;
    }
    area
}

/// Trapezoidal area over FPR in `[0, fpr_max]`, normalized by `fpr_max`.
/// Vertical segments contribute their upper TPR rightward.
pub fn partial_auc(curve: &RocCurve, fpr_max: f64) -> Result<f64, EvalError> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(EvalError::BadInput(format!("fpr_max {fpr_max} outside (0, 1]")));
    }
    let pts = curve.points();
    let mut area = 0.0;
    for w in pts.windows(2) {
        let (x0, y0, x1, y1) = (w[0].fpr, w[0].tpr, w[1].fpr, w[1].tpr);
        if x0 >= fpr_max {
            break;
        }
        if x1 <= fpr_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let t = (fpr_max - x0) / (x1 - x0);
            let y_clip = y0 + t * (y1 - y0);
            area += (fpr_max - x0) * (y0 + y_clip) / 2.0;
        }
    }
    Ok(area / fpr_max)
}

/// Maximum recall over all score cuts whose precision is at least `p`;
/// 0 when no cut qualifies. Cuts exist only at distinct score values.
pub fn recall_at_precision(scores: &[f64], labels: &[u8], p: f64) -> Result<f64, EvalError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(EvalError::BadInput(format!("precision target {p} outside (0, 1]")));
    }
    let (pos, _) = check_scores(scores, labels)?;
    if pos == 0 {
        return Err(EvalError::BadInput("recall needs at least one positive".into()));
    }
    let mut best = 0.0_f64;
    for (_, tp, fp) in cumulative_groups(scores, labels) {
        let precision = tp as f64 / (tp + fp) as f64;
        if precision >= p {
            best = best.max(tp as f64 / pos as f64);
        }
    }
    Ok(best)
}

/// Per-fold metric bundle matching the reporting protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub pauc30: f64,
    pub r_at_p90: f64,
    pub r_at_p85: f64,
    pub r_at_p80: f64,
}

pub const PARTIAL_AUC_FPR_MAX: f64 = 0.3;

impl MetricsReport {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self, EvalError> {
        let curve = roc_curve(scores, labels)?;
        Ok(MetricsReport {
            auc: auc(&curve),
            pauc30: partial_auc(&curve, PARTIAL_AUC_FPR_MAX)?,
            r_at_p90: recall_at_precision(scores, labels, 0.90)?,
            r_at_p85: recall_at_precision(scores, labels, 0.85)?,
            r_at_p80: recall_at_precision(scores, labels, 0.80)?,
        })
    }
}

/// Arithmetic mean of per-fold reports.
pub fn cross_fold_mean(reports: &[MetricsReport]) -> Result<MetricsReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::BadInput("no reports to average".into()));
    }
    let n = reports.len() as f64;
    Ok(MetricsReport {
        auc: reports.iter().map(|r| r.auc).sum::<f64>() / n,
        pauc30: reports.iter().map(|r| r.pauc30).sum::<f64>() / n,
        r_at_p90: reports.iter().map(|r| r.r_at_p90).sum::<f64>() / n,
        r_at_p85: reports.iter().map(|r| r.r_at_p85).sum::<f64>() / n,
        r_at_p80: reports.iter().map(|r| r.r_at_p80).sum::<f64>() / n,
    })
}

pub const ROC_GRID_POINTS: usize = 201;

/// Mean ROC graph: average each curve's upper-envelope TPR on a fixed
/// 201-point FPR grid.
pub fn mean_roc_grid(curves: &[RocCurve]) -> Result<Vec<(f64, f64)>, EvalError> {
    if curves.is_empty() {
        return Err(EvalError::BadInput("no curves to average".into()));
    }
    let mut grid = Vec::with_capacity(ROC_GRID_POINTS);
    for i in 0..ROC_GRID_POINTS {
        let fpr = i as f64 / (ROC_GRID_POINTS - 1) as f64;
        let tpr = curves.iter().map(|c| c.tpr_at(fpr)).sum::<f64>() / curves.len() as f64;
        grid.push((fpr, tpr));
    }
    Ok(grid)
}

// ---- study scoring ---------------------------------------------------------

/// Study-level scores for a test split: the fused prediction for fusion
/// variants, median late fusion otherwise (both inside `predict_study`).
/// With `single_view`, each study is restricted to images of that view;
/// studies lacking it are skipped and counted.
pub fn score_studies(
    model: &mut FibrosisModel,
    studies: &[Study],
    single_view: Option<u8>,
) -> Result<(Vec<f64>, Vec<u8>, usize), EvalError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0usize;
    for study in studies {
        let inputs = match single_view {
            None => study.inputs(),
            Some(v) => {
                let idx: Vec<usize> = study
                    .images
                    .iter()
                    .enumerate()
                    .filter(|(_, im)| im.view == v)
                    .map(|(i, _)| i)
                    .collect();
                if idx.is_empty() {
                    skipped += 1;
                    continue;
                }
                study.inputs_for(&idx)
            }
        };
        scores.push(model.predict_study(&inputs, Phase::Eval)?);
        labels.push(study.label);
    }
    Ok((scores, labels, skipped))
}

// ---- CSV reports -------------------------------------------------------------

/// One row of the metrics CSV; `fold` is a label so the mean row can say
/// "mean". `view`/`skipped_studies` appear only in single-view mode.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub fold: String,
    pub variant: String,
    pub norm: String,
    pub report: MetricsReport,
    pub view: Option<u8>,
    pub skipped_studies: Option<usize>,
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

/// Render the metrics CSV (columns fold, variant, norm, auc, pauc30,
/// r_at_p90, r_at_p85, r_at_p80, plus view and skipped_studies when any
/// row carries them).
pub fn render_metrics_csv(rows: &[MetricsRow]) -> String {
    let single_view = rows.iter().any(|r| r.view.is_some());
    let mut out = String::from("fold,variant,norm,auc,pauc30,r_at_p90,r_at_p85,r_at_p80");
    if single_view {
        out.push_str(",view,skipped_studies");
    }
    out.push('\n');
    for row in rows {
        let r = &row.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}",
            row.fold,
            row.variant,
            row.norm,
            fmt_metric(r.auc),
            fmt_metric(r.pauc30),
            fmt_metric(r.r_at_p90),
            fmt_metric(r.r_at_p85),
            fmt_metric(r.r_at_p80),
        ));
        if single_view {
            let view = row.view.map(|v| v.to_string()).unwrap_or_default();
            let skipped = row.skipped_studies.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(",{view},{skipped}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_metrics_csv(rows).as_bytes())?;
    Ok(())
}

/// Render one fold's staircase as CSV with columns fpr, tpr, threshold.
pub fn render_roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in curve.points() {
        out.push_str(&format!(
            "{},{},{}\n",
            fmt_metric(p.fpr),
            fmt_metric(p.tpr),
            if p.threshold.is_finite() { fmt_metric(p.threshold) } else { "inf".to_string() }
        ));
    }
    out
}

pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_roc_csv(curve).as_bytes())?;
    Ok(())
}

/// Parse a staircase CSV produced by [`render_roc_csv`]. The rounding to six
/// decimals survives the round trip because the validation in
/// [`RocCurve::from_points`] only needs monotonicity, which rounding
/// preserves.
pub fn parse_roc_csv(text: &str) -> Result<RocCurve, EvalError> {
    let mut lines = text.lines();
    match lines.next() {
        Some("fpr,tpr,threshold") => {}
        other => {
            return Err(EvalError::BadInput(format!(
                "expected header fpr,tpr,threshold, got {other:?}"
            )))
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let mut next = || {
            fields
                .next()
                .ok_or_else(|| EvalError::BadInput(format!("row {}: too few fields", i + 2)))
        };
        let fpr: f64 = next()?.parse().map_err(|e| {
            EvalError::BadInput(format!("row {}: bad fpr ({e})", i + 2))
        })?;
        let tpr: f64 = next()?.parse().map_err(|e| {
            EvalError::BadInput(format!("row {}: bad tpr ({e})", i + 2))
        })?;
        let raw = next()?;
        let threshold = if raw == "inf" {
            f64::INFINITY
        } else {
            raw.parse().map_err(|e| {
                EvalError::BadInput(format!("row {}: bad threshold ({e})", i + 2))
            })?
        };
        if fields.next().is_some() {
            return Err(EvalError::BadInput(format!("row {}: too many fields", i + 2)));
        }
        points.push(RocPoint { fpr, tpr, threshold });
    }
    RocCurve::from_points(points)
}

/// Render the 201-row mean curve as CSV with columns fpr, tpr.
pub fn render_mean_roc_csv(grid: &[(f64, f64)]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in grid {
        out.push_str(&format!("{},{}\n", fmt_metric(*fpr), fmt_metric(*tpr)));
    }
    out
}

pub fn write_mean_roc_csv(path: &Path, grid: &[(f64, f64)]) -> Result<(), EvalError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(render_mean_roc_csv(grid).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HAND_SCORES: [f64; 4] = [0.9, 0.7, 0.6, 0.3];
    const HAND_LABELS: [u8; 4] = [1, 0, 1, 0];

    #[test]
    fn hand_traced_staircase() {
        let curve = roc_curve(&HAND_SCORES, &HAND_LABELS).unwrap();
        let got: Vec<(f64, f64)> = curve.points().iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(
            got,
            vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0)]
        );
        assert_eq!(curve.points()[0].threshold, f64::INFINITY);
        assert_eq!(auc(&curve), 0.75);
        assert_eq!(partial_auc(&curve, 0.3).unwrap(), 0.5);
        assert_eq!(recall_at_precision(&HAND_SCORES, &HAND_LABELS, 0.9).unwrap(), 0.5);
        assert_eq!(recall_at_precision(&HAND_SCORES, &HAND_LABELS, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn perfect_and_anti_perfect_classifiers() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let perfect = roc_curve(&scores, &[1, 1, 0, 0]).unwrap();
        assert!(perfect.points().iter().any(|p| p.fpr == 0.0 && p.tpr == 1.0));
        assert_eq!(auc(&perfect), 1.0);
        assert_eq!(partial_auc(&perfect, 0.3).unwrap(), 1.0);
        assert_eq!(recall_at_precision(&scores, &[1, 1, 0, 0], 0.9).unwrap(), 1.0);

        let anti = roc_curve(&scores, &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc(&anti), 0.0);
        assert_eq!(partial_auc(&anti, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn single_class_labels_are_rejected() {
        assert!(matches!(
            roc_curve(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::SingleClass)
        ));
        assert!(matches!(
            roc_curve(&[0.1, 0.2], &[0, 0]),
            Err(EvalError::SingleClass)
        ));
    }

    #[test]
    fn curve_is_monotone_with_exact_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (scores, labels) = random_instance(&mut rng);
            let curve = roc_curve(&scores, &labels).unwrap();
            let pts = curve.points();
            assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
            let last = pts.last().unwrap();
            assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for w in pts.windows(2) {
                assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }
    }

    /// Random instance with n <= 20, ties injected via a coarse score grid,
    /// both classes guaranteed.
    fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
        let n = rng.gen_range(2..=20usize);
        let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1u8)).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        // a couple of exact duplicates to stress tie grouping
        if n >= 4 {
            scores[1] = scores[0];
            scores[n - 2] = scores[n - 1];
        }
        (scores, labels)
    }

    #[test]
    fn auc_matches_concordant_pair_oracle() {
        // oracle: fraction of positive-negative pairs ranked correctly,
        // ties worth one half
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (scores, labels) = random_instance(&mut rng);
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &li) in labels.iter().enumerate() {
                for (j, &lj) in labels.iter().enumerate() {
                    if li == 1 && lj == 0 {
                        den += 1.0;
                        num += if scores[i] > scores[j] {
                            1.0
                        } else if scores[i] == scores[j] {
                            0.5
                        } else {
                            0.0
                        };
                    }
                }
            }
            let curve = roc_curve(&scores, &labels).unwrap();
            assert!((auc(&curve) - num / den).abs() < 1e-9);
        }
    }

    #[test]
    fn partial_auc_matches_dense_integration() {
        // independent oracle: midpoint Riemann sum on a 1e5-point grid
        // refined with the curve's vertex positions, so every cell lies
        // inside one linear piece
        let oracle = |curve: &RocCurve, fmax: f64| {
            let mut cuts: Vec<f64> = (0..=100_000).map(|i| fmax * i as f64 / 100_000.0).collect();
            cuts.extend(curve.points().iter().map(|p| p.fpr).filter(|&f| f > 0.0 && f < fmax));
            cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            cuts.dedup();
            let mut area = 0.0;
            for w in cuts.windows(2) {
                area += curve.tpr_at((w[0] + w[1]) / 2.0) * (w[1] - w[0]);
            }
            area / fmax
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (scores, labels) = random_instance(&mut rng);
            let curve = roc_curve(&scores, &labels).unwrap();
            for fmax in [0.3, 0.17, 0.85] {
                let got = partial_auc(&curve, fmax).unwrap();
                assert!((got - oracle(&curve, fmax)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn partial_auc_at_one_equals_full_auc() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let (scores, labels) = random_instance(&mut rng);
            let curve = roc_curve(&scores, &labels).unwrap();
            assert!((partial_auc(&curve, 1.0).unwrap() - auc(&curve)).abs() <= 1e-12);
        }
        assert!(partial_auc(&roc_curve(&HAND_SCORES, &HAND_LABELS).unwrap(), 0.0).is_err());
        assert!(partial_auc(&roc_curve(&HAND_SCORES, &HAND_LABELS).unwrap(), 1.5).is_err());
    }

    #[test]
    fn recall_is_monotone_in_the_precision_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let (scores, labels) = random_instance(&mut rng);
            let mut prev = f64::INFINITY;
            for i in 1..=20 {
                let p = i as f64 / 20.0;
                let r = recall_at_precision(&scores, &labels, p).unwrap();
                assert!(r <= prev + 1e-15, "recall rose from {prev} to {r} at p={p}");
                prev = r;
            }
            let report = MetricsReport::from_scores(&scores, &labels).unwrap();
            assert!(report.r_at_p80 >= report.r_at_p85);
            assert!(report.r_at_p85 >= report.r_at_p90);
        }
    }

    #[test]
    fn metrics_are_invariant_under_monotone_score_maps() {
        let maps: [fn(f64) -> f64; 3] =
            [|x| 2.0 * x + 1.0, |x| x.powi(3), |x| (4.0 * x).exp()];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let (scores, labels) = random_instance(&mut rng);
            let base = MetricsReport::from_scores(&scores, &labels).unwrap();
            for map in maps {
                let mapped: Vec<f64> = scores.iter().map(|&s| map(s)).collect();
                let got = MetricsReport::from_scores(&mapped, &labels).unwrap();
                assert_eq!(got, base);
            }
        }
    }

    #[test]
    fn cross_fold_mean_examples() {
        let r1 = MetricsReport::from_scores(&HAND_SCORES, &HAND_LABELS).unwrap();
        let single = cross_fold_mean(&[r1]).unwrap();
        assert_eq!(single, r1);

        let mut r2 = r1;
        r2.auc = 0.9;
        let mut r3 = r1;
        r3.auc = 0.8;
        assert!((cross_fold_mean(&[r2, r3]).unwrap().auc - 0.85).abs() < 1e-12);
        assert!(cross_fold_mean(&[]).is_err());
    }

    #[test]
    fn mean_roc_grid_has_201_points_and_is_idempotent() {
        let curve = roc_curve(&HAND_SCORES, &HAND_LABELS).unwrap();
        let grid = mean_roc_grid(&[curve.clone(), curve.clone()]).unwrap();
        assert_eq!(grid.len(), ROC_GRID_POINTS);
        assert_eq!(grid[0], (0.0, 0.5), "upper envelope at fpr 0");
        assert_eq!(grid[200], (1.0, 1.0));
        // averaging identical curves reproduces the curve at the grid
        for &(f, t) in &grid {
            assert_eq!(t, curve.tpr_at(f));
        }
        // interior grid point on the flat segment between 0 and 0.5
        let quarter = grid.iter().find(|(f, _)| (*f - 0.25).abs() < 1e-12).unwrap();
        assert_eq!(quarter.1, 0.5);
    }

    #[test]
    fn metrics_csv_format_is_stable() {
        let report = MetricsReport::from_scores(&HAND_SCORES, &HAND_LABELS).unwrap();
        let rows = vec![
            MetricsRow {
                fold: "0".into(),
                variant: "ghif_vsp".into(),
                norm: "instance".into(),
                report,
                view: None,
                skipped_studies: None,
            },
            MetricsRow {
                fold: "mean".into(),
                variant: "ghif_vsp".into(),
                norm: "instance".into(),
                report,
                view: None,
                skipped_studies: None,
            },
        ];
        let csv = render_metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "fold,variant,norm,auc,pauc30,r_at_p90,r_at_p85,r_at_p80"
        );
        assert_eq!(
            lines.next().unwrap(),
            "0,ghif_vsp,instance,0.750000,0.500000,0.500000,0.500000,0.500000"
        );
        assert_eq!(
            lines.next().unwrap(),
            "mean,ghif_vsp,instance,0.750000,0.500000,0.500000,0.500000,0.500000"
        );

        // single-view mode appends two columns
        let sv_rows = vec![MetricsRow {
            fold: "2".into(),
            variant: "ghif_vsp".into(),
            norm: "instance".into(),
            report,
            view: Some(3),
            skipped_studies: Some(4),
        }];
        let sv = render_metrics_csv(&sv_rows);
        assert!(sv.starts_with(
            "fold,variant,norm,auc,pauc30,r_at_p90,r_at_p85,r_at_p80,view,skipped_studies\n"
        ));
        assert!(sv.contains(",3,4\n"));
    }

    #[test]
    fn roc_csv_format_is_stable() {
        let curve = roc_curve(&HAND_SCORES, &HAND_LABELS).unwrap();
        let csv = render_roc_csv(&curve);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "fpr,tpr,threshold");
        assert_eq!(lines[1], "0.000000,0.000000,inf");
        assert_eq!(lines[2], "0.000000,0.500000,0.900000");
        assert_eq!(lines.len(), 6);

        let grid = mean_roc_grid(&[curve]).unwrap();
        let mean_csv = render_mean_roc_csv(&grid);
        assert_eq!(mean_csv.lines().count(), ROC_GRID_POINTS + 1);
        assert!(mean_csv.starts_with("fpr,tpr\n0.000000,0.500000\n"));
    }
}
