//! Two-stage detection on the gated pyramid: an anchor-based proposal head
//! shared across levels, proposal selection, fixed-size region pooling and
//! a fully connected classifier/regressor.

pub mod anchors;
pub mod boxes;

use serde::{Deserialize, Serialize};

pub use anchors::{generate_anchors, match_anchors, match_boxes, sample_matches, Anchor, AnchorSet, Match};
pub use boxes::{decode_deltas, encode_deltas, iou, nms, BBox, DeltaWeights, UNIT_WEIGHTS};

use crate::backbone::{FeatureSet, LEVEL_STRIDES};
use crate::classes::DefectClass;
use crate::error::{invalid, Error, Result};
use crate::params::{ConvParams, LinearParams, ParamStore, Session};
use crate::tensor::{RoiRegion, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    /// Anchor side at level ℓ is `anchor_base · 2^ℓ`.
    pub anchor_base: f64,
    pub anchor_ratios: Vec<f64>,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    /// Anchors sampled per image for the objectness loss.
    pub rpn_batch: usize,
    pub rpn_pos_fraction: f64,
    pub pre_nms_top_k: usize,
    pub post_nms_top_k: usize,
    pub proposal_nms: f64,
    /// Proposals sampled per image for the second stage.
    pub roi_batch: usize,
    pub roi_pos_fraction: f64,
    pub roi_fg_iou: f64,
    pub roi_size: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub smooth_l1_beta: f64,
    /// Scaling of second-stage regression targets.
    pub box_weights: DeltaWeights,
    /// Class scores below this are never reported.
    pub score_floor: f64,
    pub final_nms: f64,
    pub max_detections: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            anchor_base: 8.0,
            anchor_ratios: anchors::DEFAULT_RATIOS.to_vec(),
            rpn_pos_iou: 0.5,
            rpn_neg_iou: 0.3,
            rpn_batch: 256,
            rpn_pos_fraction: 0.5,
            pre_nms_top_k: 1000,
            post_nms_top_k: 100,
            proposal_nms: 0.7,
            roi_batch: 64,
            roi_pos_fraction: 0.25,
            roi_fg_iou: 0.5,
            roi_size: 7,
            hidden: 256,
            dropout: 0.5,
            smooth_l1_beta: 1.0 / 9.0,
            box_weights: [10.0, 10.0, 5.0, 5.0],
            score_floor: 0.05,
            final_nms: 0.5,
            max_detections: 100,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.anchor_ratios.is_empty() || self.anchor_ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid!("anchor ratios must be positive and non-empty"));
        }
        if !(self.anchor_base > 0.0) {
            return Err(invalid!("anchor base must be positive"));
        }
        if !(unit(self.rpn_neg_iou) && unit(self.rpn_pos_iou) && self.rpn_neg_iou <= self.rpn_pos_iou) {
            return Err(invalid!("need 0 <= rpn negative IoU <= rpn positive IoU <= 1"));
        }
        for (name, v) in [
            ("rpn positive fraction", self.rpn_pos_fraction),
            ("roi positive fraction", self.roi_pos_fraction),
            ("roi foreground IoU", self.roi_fg_iou),
            ("proposal nms", self.proposal_nms),
            ("final nms", self.final_nms),
            ("score floor", self.score_floor),
        ] {
            if !unit(v) {
                return Err(invalid!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.roi_size == 0 || self.hidden == 0 || self.rpn_batch == 0 || self.roi_batch == 0 {
            return Err(invalid!("roi size, hidden width and sample sizes must be positive"));
        }
        if !(self.smooth_l1_beta > 0.0) || self.box_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid!("smooth-L1 beta and box weights must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub rpn_conv: ConvParams,
    pub rpn_objectness: ConvParams,
    pub rpn_deltas: ConvParams,
    pub fc: LinearParams,
    pub cls: LinearParams,
    pub reg: LinearParams,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, channels: usize, config: &DetectorConfig) -> Self {
        let a = config.anchors_per_cell();
        let k = DefectClass::COUNT;
        let pooled = channels * config.roi_size * config.roi_size;
        Self {
            rpn_conv: ConvParams::new(store, "detector.rpn.conv", channels, channels, 3, 1, 1),
            rpn_objectness: ConvParams::new(store, "detector.rpn.objectness", channels, a, 1, 1, 0),
            rpn_deltas: ConvParams::new(store, "detector.rpn.deltas", channels, 4 * a, 1, 1, 0),
            fc: LinearParams::new(store, "detector.fc", pooled, config.hidden),
            cls: LinearParams::new(store, "detector.cls", config.hidden, k + 1),
            reg: LinearParams::new(store, "detector.reg", config.hidden, 4 * k),
        }
    }
}

/// Shared 3×3 conv and relu, then per-cell objectness logits `[N, A, H, W]`
/// and deltas `[N, 4A, H, W]` (channel `a·4 + j`).
pub fn proposal_head(s: &mut Session, x: Var, p: &HeadParams) -> Result<(Var, Var)> {
    let h = s.conv(x, &p.rpn_conv)?;
    let h = s.tape.relu(h);
    let obj = s.conv(h, &p.rpn_objectness)?;
    let deltas = s.conv(h, &p.rpn_deltas)?;
    Ok((obj, deltas))
}

/// Proposal-head outputs of every level flattened and concatenated, so one
/// loss op can index any anchor of any image.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub objectness: Var,
    pub deltas: Var,
    pub batch: usize,
}

pub fn run_proposal_heads(s: &mut Session, features: &FeatureSet, p: &HeadParams) -> Result<HeadOutputs> {
    let mut objs = Vec::with_capacity(4);
    let mut dels = Vec::with_capacity(4);
    let batch = s.tape.shape(features.levels[0])[0];
    for &level in &features.levels {
        let (o, d) = proposal_head(s, level, p)?;
        let no = s.tape.value(o).numel();
        let nd = s.tape.value(d).numel();
        objs.push(s.tape.reshape(o, &[no])?);
        dels.push(s.tape.reshape(d, &[nd])?);
    }
    Ok(HeadOutputs {
        objectness: s.tape.concat(&objs)?,
        deltas: s.tape.concat(&dels)?,
        batch,
    })
}

impl AnchorSet {
    /// Position of anchor `g` of image `n` in [`HeadOutputs::objectness`].
    pub fn objectness_index(&self, batch: usize, n: usize, g: usize) -> usize {
        let (slot, y, x, a) = self.locate(g);
        let before: usize = self.grids[..slot].iter().map(|l| l.cells()).sum();
        let grid = &self.grids[slot];
        batch * self.per_cell * before + ((n * self.per_cell + a) * grid.height + y) * grid.width + x
    }

    /// Position of coordinate `j` of anchor `g` of image `n` in
    /// [`HeadOutputs::deltas`].
    pub fn delta_index(&self, batch: usize, n: usize, g: usize, j: usize) -> usize {
        let (slot, y, x, a) = self.locate(g);
        let before: usize = self.grids[..slot].iter().map(|l| l.cells()).sum();
        let grid = &self.grids[slot];
        let channels = 4 * self.per_cell;
        batch * channels * before + ((n * channels + a * 4 + j) * grid.height + y) * grid.width + x
    }

    /// Objectness logits and deltas of every anchor of image `n`, in anchor
    /// order.
    pub fn gather(&self, tape: &Tape, heads: &HeadOutputs, n: usize) -> (Vec<f64>, Vec<[f64; 4]>) {
        let obj = tape.value(heads.objectness).data();
        let del = tape.value(heads.deltas).data();
        let logits = (0..self.len())
            .map(|g| obj[self.objectness_index(heads.batch, n, g)])
            .collect();
        let deltas = (0..self.len())
            .map(|g| std::array::from_fn(|j| del[self.delta_index(heads.batch, n, g, j)]))
            .collect();
        (logits, deltas)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Objectness logit.
    pub score: f64,
}

/// Indices of the `k` best-scored candidates, descending, ties by index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Decodes the `pre_nms_k` most object-like anchors of one image, drops
/// degenerate boxes, suppresses overlaps and keeps the best `post_nms_k`,
/// sorted by descending objectness.
#[allow(clippy::too_many_arguments)]
pub fn select_proposals(
    anchors: &AnchorSet,
    logits: &[f64],
    deltas: &[[f64; 4]],
    image: (usize, usize),
    pre_nms_k: usize,
    post_nms_k: usize,
    iou_thr: f64,
) -> Vec<Proposal> {
    let (h, w) = (image.0 as f64, image.1 as f64);
    let mut cands: Vec<Proposal> = top_k(logits, pre_nms_k)
        .into_iter()
        .map(|g| Proposal {
            bbox: decode_deltas(&deltas[g], &anchors.anchors[g].bbox, UNIT_WEIGHTS, w, h),
            score: logits[g],
        })
        .filter(|p| p.bbox.is_valid())
        .collect();
    let boxes: Vec<BBox> = cands.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|p| p.score).collect();
    let mut keep = nms(&boxes, &scores, iou_thr);
    keep.truncate(post_nms_k);
    let kept: Vec<Proposal> = keep.iter().map(|&i| cands[i]).collect();
    cands.clear();
    kept
}

/// Pyramid level for a region: `clamp(⌊2 + log2(√area / 32)⌋, 2, 5)`.
pub fn roi_level(b: &BBox) -> Result<usize> {
    if !b.is_valid() {
        return Err(invalid!("degenerate box {b:?}"));
    }
    let l = (2.0 + (b.area().sqrt() / 32.0).log2()).floor();
    Ok(l.clamp(2.0, 5.0) as usize)
}

/// A region of interest in image `batch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Roi {
    pub batch: usize,
    pub bbox: BBox,
}

/// Max-pools every region from its assigned level into a `size × size`
/// grid. Output rows are grouped by level; `order[r]` is the input index of
/// output row `r`.
pub fn pool_rois(tape: &mut Tape, features: &FeatureSet, rois: &[Roi], size: usize) -> Result<(Var, Vec<usize>)> {
    if rois.is_empty() {
        return Err(invalid!("no regions to pool"));
    }
    let mut by_level: [Vec<usize>; 4] = Default::default();
    for (i, r) in rois.iter().enumerate() {
        by_level[roi_level(&r.bbox)? - 2].push(i);
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(rois.len());
    for (slot, idx) in by_level.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let stride = LEVEL_STRIDES[slot] as f64;
        let regions: Vec<RoiRegion> = idx
            .iter()
            .map(|&i| {
                let b = rois[i].bbox;
                RoiRegion {
                    batch: rois[i].batch,
                    x1: b.x1 / stride,
                    y1: b.y1 / stride,
                    x2: b.x2 / stride,
                    y2: b.y2 / stride,
                }
            })
            .collect();
        parts.push(tape.roi_pool(features.levels[slot], &regions, size)?);
        order.extend_from_slice(idx);
    }
    let pooled = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
    Ok((pooled, order))
}

/// Flatten, FC + relu (+ dropout in training), then class logits
/// `[R, K+1]` and per-class deltas `[R, 4K]`.
pub fn classify_and_regress(s: &mut Session, pooled: Var, p: &HeadParams, dropout: f64) -> Result<(Var, Var)> {
    let shape = s.tape.shape(pooled).to_vec();
    let rows = shape[0];
    let flat = s.tape.reshape(pooled, &[rows, shape[1..].iter().product()])?;
    let h = s.linear(flat, &p.fc)?;
    let h = s.tape.relu(h);
    let h = s.dropout(h, dropout)?;
    let logits = s.linear(h, &p.cls)?;
    let deltas = s.linear(h, &p.reg)?;
    Ok((logits, deltas))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: DefectClass,
    pub score: f64,
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Turns second-stage outputs for one image into final detections: class
/// posteriors, class-specific box decoding, per-class NMS, then a global
/// sort by descending score (ties by class, then proposal order).
pub fn postprocess(
    proposals: &[BBox],
    logits: &[f64],
    deltas: &[f64],
    image: (usize, usize),
    config: &DetectorConfig,
) -> Vec<Detection> {
    let k = DefectClass::COUNT;
    let (h, w) = (image.0 as f64, image.1 as f64);
    let mut out = Vec::new();
    let posteriors: Vec<Vec<f64>> = (0..proposals.len())
        .map(|r| softmax_row(&logits[r * (k + 1)..(r + 1) * (k + 1)]))
        .collect();
    for class in DefectClass::ALL {
        let c = class.index();
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        for (r, prop) in proposals.iter().enumerate() {
            let score = posteriors[r][c + 1];
            if score < config.score_floor {
                continue;
            }
            let d = &deltas[r * 4 * k + 4 * c..r * 4 * k + 4 * c + 4];
            let b = decode_deltas(d, prop, config.box_weights, w, h);
            if b.is_valid() {
                boxes.push(b);
                scores.push(score);
            }
        }
        for i in nms(&boxes, &scores, config.final_nms) {
            out.push(Detection {
                bbox: boxes[i],
                class,
                score: scores[i],
            });
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(config.max_detections);
    out
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image: String,
    class: String,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// One JSON object: `{"image", "class", "score", "box": [x1, y1, x2, y2]}`.
pub fn detection_json(image: &str, d: &Detection) -> String {
    serde_json::to_string(&DetectionRecord {
        image: image.to_string(),
        class: d.class.name().to_string(),
        score: d.score,
        bbox: d.bbox.to_array(),
    })
    .expect("detections serialize")
}

/// Parses a JSON-lines detection file; blank lines are skipped.
pub fn parse_detections(text: &str) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(line).map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let class = rec
            .class
            .parse::<DefectClass>()
            .map_err(|e| Error::parse(i + 1, e.to_string()))?;
        let [x1, y1, x2, y2] = rec.bbox;
        let bbox = BBox::new(x1, y1, x2, y2);
        if !bbox.is_valid() {
            return Err(Error::parse(i + 1, format!("degenerate box {:?}", rec.bbox)));
        }
        out.push((
            rec.image,
            Detection {
                bbox,
                class,
                score: rec.score,
            },
        ));
    }
    Ok(out)
}
