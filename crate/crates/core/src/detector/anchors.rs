use rand::seq::index::sample;
use rand::Rng;

use super::boxes::{encode_deltas, iou, BBox, DeltaWeights};
use crate::backbone::LEVEL_STRIDES;

/// Height-to-width ratios of the anchors at every cell.
pub const DEFAULT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    /// Pyramid level, 2 (stride 4) through 5 (stride 32).
    pub level: usize,
    /// Position in the flat anchor list.
    pub index: usize,
}

/// Where one pyramid level's anchors sit in the flat anchor list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGrid {
    pub level: usize,
    pub height: usize,
    pub width: usize,
    pub offset: usize,
}

impl LevelGrid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
    pub grids: [LevelGrid; 4],
    pub per_cell: usize,
}

impl AnchorSet {
    pub fn boxes(&self) -> Vec<BBox> {
        self.anchors.iter().map(|a| a.bbox).collect()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// `(level slot, cell y, cell x, ratio slot)` of a flat anchor index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize, usize) {
        let slot = self
            .grids
            .iter()
            .rposition(|g| g.offset <= index)
            .expect("anchor index in range");
        let g = &self.grids[slot];
        let local = index - g.offset;
        let cell = local / self.per_cell;
        (slot, cell / g.width, cell % g.width, local % self.per_cell)
    }
}

/// Anchors for an `height × width` image: at level ℓ every stride-2^ℓ cell
/// gets one anchor per ratio, of area `(base·2^ℓ)²`, centred on the cell.
/// Within a level the flat order is `(y·W + x)·A + a`; levels follow each
/// other finest first.
pub fn generate_anchors(height: usize, width: usize, base: f64, ratios: &[f64]) -> AnchorSet {
    let mut anchors = Vec::new();
    let grids = std::array::from_fn(|slot| {
        let stride = LEVEL_STRIDES[slot];
        let level = slot + 2;
        let (gh, gw) = (height / stride, width / stride);
        let offset = anchors.len();
        let side = base * stride as f64;
        for y in 0..gh {
            for x in 0..gw {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                for &r in ratios {
                    let index = anchors.len();
                    anchors.push(Anchor {
                        bbox: BBox::from_center(cx, cy, side / r.sqrt(), side * r.sqrt()),
                        level,
                        index,
                    });
                }
            }
        }
        LevelGrid {
            level,
            height: gh,
            width: gw,
            offset,
        }
    });
    AnchorSet {
        anchors,
        grids,
        per_cell: ratios.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Match {
    Positive { gt: usize, deltas: [f64; 4] },
    Negative,
    Ignore,
}

impl Match {
    pub fn is_positive(&self) -> bool {
        matches!(self, Match::Positive { .. })
    }
}

/// Labels each candidate box against the ground truth.
///
/// A candidate is positive when its best IoU reaches `pos_thr`, negative
/// below `neg_thr`, ignored otherwise. With `force_best`, the candidates
/// with the highest IoU for a ground-truth box are made positive for that
/// box as well, so no ground truth goes without a positive.
pub fn match_boxes(
    candidates: &[BBox],
    gt: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
    force_best: bool,
    weights: DeltaWeights,
) -> Vec<Match> {
    assert!(
        (0.0..=1.0).contains(&neg_thr) && neg_thr <= pos_thr && pos_thr <= 1.0,
        "thresholds must satisfy 0 <= neg <= pos <= 1"
    );
    if gt.is_empty() {
        return vec![Match::Negative; candidates.len()];
    }
    let mut best = vec![(0.0f64, 0usize); candidates.len()];
    let mut gt_best = vec![0.0f64; gt.len()];
    for (i, c) in candidates.iter().enumerate() {
        for (j, g) in gt.iter().enumerate() {
            let v = iou(c, g);
            if v > best[i].0 {
                best[i] = (v, j);
            }
            gt_best[j] = gt_best[j].max(v);
        }
    }
    let mut labels: Vec<Match> = best
        .iter()
        .map(|&(v, _)| if v < neg_thr { Match::Negative } else { Match::Ignore })
        .collect();
    let mut assigned: Vec<Option<usize>> = best
        .iter()
        .map(|&(v, j)| (v >= pos_thr).then_some(j))
        .collect();
    if force_best {
        for (i, c) in candidates.iter().enumerate() {
            if assigned[i].is_some() {
                continue;
            }
            if let Some(j) = (0..gt.len()).find(|&j| gt_best[j] > 0.0 && iou(c, &gt[j]) == gt_best[j]) {
                assigned[i] = Some(j);
            }
        }
    }
    for (i, a) in assigned.iter().enumerate() {
        if let Some(j) = *a {
            labels[i] = Match::Positive {
                gt: j,
                deltas: encode_deltas(&gt[j], &candidates[i], weights),
            };
        }
    }
    labels
}

/// `match_boxes` with forced best matches, as used for anchors.
pub fn match_anchors(anchors: &[BBox], gt: &[BBox], pos_thr: f64, neg_thr: f64) -> Vec<Match> {
    match_boxes(anchors, gt, pos_thr, neg_thr, true, super::boxes::UNIT_WEIGHTS)
}

/// Draws at most `total` labelled indices with at most `pos_fraction` of
/// them positive; negatives fill the remainder. Returns `(positives,
/// negatives)`, each sorted.
pub fn sample_matches(
    labels: &[Match],
    total: usize,
    pos_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == Match::Negative)
        .collect();
    let want_pos = ((total as f64 * pos_fraction).floor() as usize).min(pos.len());
    let want_neg = (total - want_pos).min(neg.len());
    let pick = |from: &[usize], k: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
        let mut idx: Vec<usize> = sample(rng, from.len(), k).into_iter().map(|i| from[i]).collect();
        idx.sort_unstable();
        idx
    };
    let p = pick(&pos, want_pos, rng);
    let n = pick(&neg, want_neg, rng);
    (p, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_counts_and_first_anchor() {
        let set = generate_anchors(320, 320, 8.0, &DEFAULT_RATIOS);
        assert_eq!(set.len(), 25_500);
        assert_eq!(set.len(), 3 * (6400 + 1600 + 400 + 100));
        let square = set.anchors[1];
        assert_eq!(square.level, 2);
        assert_eq!(square.bbox, BBox::new(-14.0, -14.0, 18.0, 18.0));
        assert_eq!(square.bbox.center(), (2.0, 2.0));
        assert!(set.anchors.iter().all(|a| a.bbox.area() > 0.0));
        let tall = set.anchors[2].bbox;
        assert!((tall.height() / tall.width() - 2.0).abs() < 1e-12);
        assert!((tall.area() - 1024.0).abs() < 1e-9);
    }

    #[test]
    fn locate_inverts_layout() {
        let set = generate_anchors(64, 96, 8.0, &DEFAULT_RATIOS);
        for a in &set.anchors {
            let (slot, y, x, r) = set.locate(a.index);
            let g = set.grids[slot];
            assert_eq!(g.level, a.level);
            assert_eq!(g.offset + (y * g.width + x) * 3 + r, a.index);
        }
    }

    #[test]
    fn threshold_enumeration() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0);
        // IoUs 0.6, 0.4 and 0.1 against the ground truth
        let a = BBox::new(0.0, 0.0, 10.0, 6.0);
        let b = BBox::new(0.0, 0.0, 10.0, 4.0);
        let c = BBox::new(0.0, 0.0, 10.0, 1.0);
        let labels = match_anchors(&[a, b, c], &[gt], 0.5, 0.3);
        assert!(labels[0].is_positive());
        assert_eq!(labels[1], Match::Ignore);
        assert_eq!(labels[2], Match::Negative);
    }

    #[test]
    fn identical_anchor_has_zero_deltas_and_empty_gt_is_negative() {
        let g = BBox::new(3.0, 4.0, 20.0, 30.0);
        let labels = match_anchors(&[g], &[g], 0.5, 0.3);
        assert_eq!(labels[0], Match::Positive { gt: 0, deltas: [0.0; 4] });
        let none = match_anchors(&[g, g], &[], 0.5, 0.3);
        assert!(none.iter().all(|m| *m == Match::Negative));
    }

    #[test]
    fn every_gt_gets_a_positive() {
        let set = generate_anchors(128, 128, 8.0, &DEFAULT_RATIOS);
        // a thin streak and a tiny speck that no anchor covers at 0.5
        let gt = [BBox::new(40.0, 5.0, 43.0, 120.0), BBox::new(90.0, 90.0, 98.0, 97.0)];
        let labels = match_anchors(&set.boxes(), &gt, 0.5, 0.3);
        for j in 0..gt.len() {
            assert!(labels.iter().any(|m| matches!(m, Match::Positive { gt, .. } if *gt == j)));
        }
    }

    #[test]
    fn sampling_respects_quota() {
        let mut labels = vec![Match::Negative; 500];
        for l in labels.iter_mut().take(300) {
            *l = Match::Positive { gt: 0, deltas: [0.0; 4] };
        }
        labels[499] = Match::Ignore;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (p, n) = sample_matches(&labels, 256, 0.5, &mut rng);
        assert_eq!((p.len(), n.len()), (128, 128));
        assert!(p.iter().all(|&i| i < 300));
        assert!(n.iter().all(|&i| (300..499).contains(&i)));
        let (p, n) = sample_matches(&labels[250..], 256, 0.5, &mut rng);
        assert_eq!((p.len(), n.len()), (50, 199));
    }
}
