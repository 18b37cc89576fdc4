//! Image-level precision/recall/accuracy and ranked-detection AP/mAP.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::classes::DefectClass;
use crate::detector::{iou, BBox, Detection};
use crate::error::{invalid, Result};

/// Image-level outcome tallies: an image is defective when it has at least
/// one ground-truth box and predicted defective when it has at least one
/// detection at or above the confidence threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// A percentage that may rest on an empty denominator, in which case it is
/// reported as 0 and flagged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Percent {
    pub value: f64,
    pub degenerate: bool,
}

fn percent(num: usize, den: usize, what: &str) -> Percent {
    if den == 0 {
        log::warn!("{what} has an empty denominator; reporting 0");
        Percent {
            value: 0.0,
            degenerate: true,
        }
    } else {
        Percent {
            value: 100.0 * num as f64 / den as f64,
            degenerate: false,
        }
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `TP / (TP + FP)`.
    pub fn precision(&self) -> Percent {
        percent(self.tp, self.tp + self.fp, "precision")
    }

    /// `TP / (TP + FN)`.
    pub fn recall(&self) -> Percent {
        percent(self.tp, self.tp + self.fn_, "recall")
    }

    /// `(TP + TN) / total`.
    pub fn accuracy(&self) -> Percent {
        percent(self.tp + self.tn, self.total(), "accuracy")
    }
}

/// Detections and ground truth of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub id: String,
    pub ground_truth: Vec<(BBox, DefectClass)>,
    pub detections: Vec<Detection>,
}

pub fn confusion_counts(images: &[ImageResult], conf_thr: f64) -> Result<ConfusionCounts> {
    let mut seen = HashSet::new();
    let mut c = ConfusionCounts::default();
    for img in images {
        if !seen.insert(img.id.as_str()) {
            return Err(invalid!("duplicate image id {:?}", img.id));
        }
        let predicted = img.detections.iter().any(|d| d.score >= conf_thr);
        let actual = !img.ground_truth.is_empty();
        match (actual, predicted) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// A detection of one class somewhere in the dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Ground truth of one class in image `image`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ApMode {
    /// Area under the precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, …, 1.
    ElevenPoint,
}

/// Greedy matching in descending score order (ties keep input order). Each
/// detection takes the unmatched ground truth of its image with the highest
/// IoU, if that IoU reaches `iou_thr`. Returns the detections in ranking
/// order with their true-positive flags.
pub fn match_ranked(dets: &[RankedBox], gts: &[GtBox], iou_thr: f64) -> Vec<(usize, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.image != d.image {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= iou_thr && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, j));
                }
            }
            if let Some((_, j)) = best {
                used[j] = true;
            }
            (i, best.is_some())
        })
        .collect()
}

/// `(recall, precision)` after each detection in ranking order.
pub fn pr_curve(dets: &[RankedBox], gts: &[GtBox], iou_thr: f64) -> Vec<(f64, f64)> {
    let total = gts.len() as f64;
    let mut tp = 0usize;
    match_ranked(dets, gts, iou_thr)
        .into_iter()
        .enumerate()
        .map(|(rank, (_, hit))| {
            tp += hit as usize;
            (tp as f64 / total, tp as f64 / (rank + 1) as f64)
        })
        .collect()
}

/// AP of one class; `None` when the class has no ground truth.
pub fn average_precision(dets: &[RankedBox], gts: &[GtBox], iou_thr: f64, mode: ApMode) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let curve = pr_curve(dets, gts, iou_thr);
    // precision envelope: best precision at this recall or beyond
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    Some(match mode {
        ApMode::AllPoints => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (i, &(r, _)) in curve.iter().enumerate() {
                if r > prev {
                    ap += (r - prev) * envelope[i];
                    prev = r;
                }
            }
            ap
        }
        ApMode::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let level = t as f64 / 10.0;
                let best = curve
                    .iter()
                    .zip(&envelope)
                    .find(|((r, _), _)| *r >= level - 1e-12)
                    .map_or(0.0, |(_, e)| *e);
                sum += best;
            }
            sum / 11.0
        }
    })
}

/// Unweighted mean of the defined APs.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(invalid!("no class has ground truth; mAP is undefined"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Fraction of ground truth matched by detections scoring at least
/// `conf_thr`; `None` without ground truth.
pub fn per_class_recall(dets: &[RankedBox], gts: &[GtBox], iou_thr: f64, conf_thr: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let kept: Vec<RankedBox> = dets.iter().filter(|d| d.score >= conf_thr).copied().collect();
    let hits = match_ranked(&kept, gts, iou_thr).iter().filter(|(_, h)| *h).count();
    Some(hits as f64 / gts.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: DefectClass,
    pub gt_count: usize,
    pub ap: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: Option<f64>,
    pub counts: ConfusionCounts,
    pub iou_thr: f64,
    pub conf_thr: f64,
}

/// Splits a dataset's results by class for the box-level metrics.
pub fn class_inputs(images: &[ImageResult], class: DefectClass) -> (Vec<RankedBox>, Vec<GtBox>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, img) in images.iter().enumerate() {
        dets.extend(img.detections.iter().filter(|d| d.class == class).map(|d| RankedBox {
            image: i,
            bbox: d.bbox,
            score: d.score,
        }));
        gts.extend(
            img.ground_truth
                .iter()
                .filter(|(_, c)| *c == class)
                .map(|(b, _)| GtBox { image: i, bbox: *b }),
        );
    }
    (dets, gts)
}

pub fn evaluate(images: &[ImageResult], iou_thr: f64, conf_thr: f64, mode: ApMode) -> Result<EvalReport> {
    let counts = confusion_counts(images, conf_thr)?;
    let classes: Vec<ClassReport> = DefectClass::ALL
        .iter()
        .map(|&class| {
            let (dets, gts) = class_inputs(images, class);
            ClassReport {
                class,
                gt_count: gts.len(),
                ap: average_precision(&dets, &gts, iou_thr, mode),
                recall: per_class_recall(&dets, &gts, iou_thr, conf_thr),
            }
        })
        .collect();
    let aps: Vec<Option<f64>> = classes.iter().map(|c| c.ap).collect();
    Ok(EvalReport {
        map: mean_ap(&aps).ok(),
        classes,
        counts,
        iou_thr,
        conf_thr,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{:.4}", 100.0 * v))
}

impl EvalReport {
    /// Percentages; one row per class, then a summary row. The timing
    /// column is the only non-deterministic field.
    pub fn to_csv(&self, mean_seconds_per_image: Option<f64>) -> String {
        let mut out = String::from("row,ap,recall,map,precision,accuracy,iou_thr,conf_thr,testing_time_s\n");
        for c in &self.classes {
            writeln!(out, "{},{},{},,,,,,", c.class, pct(c.ap), pct(c.recall)).unwrap();
        }
        writeln!(
            out,
            "summary,,{:.4},{},{:.4},{:.4},{},{},{}",
            self.counts.recall().value,
            pct(self.map),
            self.counts.precision().value,
            self.counts.accuracy().value,
            self.iou_thr,
            self.conf_thr,
            mean_seconds_per_image.map_or_else(String::new, |t| format!("{t:.6}")),
        )
        .unwrap();
        out
    }
}
