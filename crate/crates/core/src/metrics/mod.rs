//! Segmentation and uncertainty metrics: IoU, class-wise uncertainty,
//! sparsification curves, detection AUROC and accuracy maps.

mod bench;
mod report;

pub use bench::{bench_inference, Timing, TimingReport};
pub use report::{
    evaluate, predict_ensemble, predict_model, write_panels, CurvePoint, MetricReport, ParamReport, Prediction,
};

use crate::error::{Error, Result};
use crate::VOID;

/// Streaming `C x C` confusion counts, indexed `[gt][pred]`. Void pixels are
/// skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// `None` for classes with an empty union.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; `None` if no class is present.
    pub miou: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn index(&self, pred: u8, gt: u8) -> Result<Option<usize>> {
        if gt == VOID {
            return Ok(None);
        }
        let c = self.classes;
        if gt as usize >= c || pred as usize >= c {
            return Err(Error::Domain {
                op: "confusion",
                detail: format!("label pair (gt {gt}, pred {pred}) outside {c} classes"),
            });
        }
        Ok(Some(gt as usize * c + pred as usize))
    }

    pub fn add(&mut self, pred: u8, gt: u8) -> Result<()> {
        if let Some(i) = self.index(pred, gt)? {
            self.counts[i] += 1;
        }
        Ok(())
    }

    pub fn remove(&mut self, pred: u8, gt: u8) -> Result<()> {
        if let Some(i) = self.index(pred, gt)? {
            self.counts[i] = self.counts[i]
                .checked_sub(1)
                .ok_or_else(|| Error::Invalid("confusion count underflow".into()))?;
        }
        Ok(())
    }

    pub fn add_maps(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.add(p, g)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion merge", &[self.classes], &[other.classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        iou(self)
    }
}

pub fn iou(confusion: &ConfusionMatrix) -> IouReport {
    let c = confusion.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = confusion.count(k, k);
            let fn_ = (0..c).map(|p| confusion.count(k, p)).sum::<u64>() - tp;
            let fp = (0..c).map(|g| confusion.count(g, k)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let miou = mean_present(&per_class);
    IouReport { per_class, miou }
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassUncertainty {
    /// `None` for classes without any pixel.
    pub per_class: Vec<Option<f64>>,
    pub munc: Option<f64>,
}

/// Accumulates uncertainty sums per class across images.
#[derive(Clone, Debug)]
pub struct UncertaintyAccumulator {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl UncertaintyAccumulator {
    pub fn new(classes: usize) -> Self {
        UncertaintyAccumulator {
            sums: vec![0.0; classes],
            counts: vec![0; classes],
        }
    }

    /// Adds pixels grouped by `class_map`; void entries in the map are
    /// skipped, as are classes beyond the accumulator's range.
    pub fn add(&mut self, class_map: &[u8], uncertainty: &[f32]) -> Result<()> {
        if class_map.len() != uncertainty.len() {
            return Err(Error::shape("class_uncertainty", &[class_map.len()], &[uncertainty.len()]));
        }
        for (&c, &u) in class_map.iter().zip(uncertainty) {
            if let Some(sum) = self.sums.get_mut(c as usize) {
                *sum += u as f64;
                self.counts[c as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> ClassUncertainty {
        let per_class: Vec<Option<f64>> = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
            .collect();
        let munc = mean_present(&per_class);
        ClassUncertainty { per_class, munc }
    }
}

/// Mean uncertainty over pixels grouped by predicted class, and the
/// unweighted class mean.
pub fn class_uncertainty(pred: &[u8], uncertainty: &[f32], classes: usize) -> Result<ClassUncertainty> {
    let mut acc = UncertaintyAccumulator::new(classes);
    acc.add(pred, uncertainty)?;
    Ok(acc.finish())
}

/// As [`class_uncertainty`] but grouped by ground-truth class; void pixels
/// are skipped.
pub fn class_uncertainty_by_ground_truth(gt: &[u8], uncertainty: &[f32], classes: usize) -> Result<ClassUncertainty> {
    class_uncertainty(gt, uncertainty, classes)
}

pub const DEFAULT_FRACTIONS: [f64; 10] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// mIoU after removing the most uncertain non-void pixels.
///
/// For each fraction `f` the `round(f * n)` most uncertain of the `n`
/// non-void pixels are dropped; equal uncertainties are removed in pixel
/// index order. Fractions must be strictly increasing and lie in `[0, 1)`.
pub fn sparsification_curve(
    pred: &[u8],
    gt: &[u8],
    uncertainty: &[f32],
    classes: usize,
    fractions: &[f64],
) -> Result<Vec<(f64, Option<f64>)>> {
    if pred.len() != gt.len() || pred.len() != uncertainty.len() {
        return Err(Error::shape("sparsification_curve", &[pred.len(), gt.len()], &[uncertainty.len()]));
    }
    validate_fractions(fractions)?;
    let mut order: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] != VOID).collect();
    order.sort_by(|&a, &b| uncertainty[b].total_cmp(&uncertainty[a]).then(a.cmp(&b)));
    let mut cm = ConfusionMatrix::new(classes);
    cm.add_maps(pred, gt)?;
    let n = order.len();
    let mut removed = 0;
    let mut curve = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let target = ((f * n as f64).round() as usize).min(n);
        for &i in &order[removed..target] {
            cm.remove(pred[i], gt[i])?;
        }
        removed = target;
        curve.push((f, cm.iou().miou));
    }
    Ok(curve)
}

pub fn validate_fractions(fractions: &[f64]) -> Result<()> {
    let in_range = fractions.iter().all(|f| (0.0..1.0).contains(f));
    let increasing = fractions.windows(2).all(|w| w[0] < w[1]);
    if fractions.is_empty() || !in_range || !increasing {
        return Err(Error::Domain {
            op: "sparsification_curve",
            detail: format!("fractions must be strictly increasing in [0, 1), got {fractions:?}"),
        });
    }
    Ok(())
}

/// Rank-based AUROC of `scores` separating `positives` from the rest, with
/// midranks for ties. `None` if either class is empty.
pub fn detection_auroc(scores: &[f32], positives: &[bool]) -> Result<Option<f64>> {
    if scores.len() != positives.len() {
        return Err(Error::shape("detection_auroc", &[scores.len()], &[positives.len()]));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j + 2) as f64 / 2.0;
        let pos_in_run = order[i..=j].iter().filter(|&&k| positives[k]).count();
        pos_rank_sum += midrank * pos_in_run as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Scores and positive flags for misclassification detection: non-void
/// pixels only, positive where the prediction is wrong.
pub fn error_detection_set(pred: &[u8], gt: &[u8], uncertainty: &[f32]) -> (Vec<f32>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut flags = Vec::new();
    for ((&p, &g), &u) in pred.iter().zip(gt).zip(uncertainty) {
        if g != VOID {
            scores.push(u);
            flags.push(p != g);
        }
    }
    (scores, flags)
}

/// Positive flags for out-of-domain detection: every void-labeled pixel.
pub fn ood_flags(gt: &[u8]) -> Vec<bool> {
    gt.iter().map(|&g| g == VOID).collect()
}

/// 255 where the prediction is wrong or the label is void, 0 elsewhere.
pub fn binary_accuracy_map(pred: &[u8], gt: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("binary_accuracy_map", &[pred.len()], &[gt.len()]));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| if g == VOID || p != g { 255 } else { 0 })
        .collect())
}
