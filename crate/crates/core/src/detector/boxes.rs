use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels, origin top-left. The area is
/// `(x2 − x1)·(y2 − y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Upper bound on `dw`/`dh` before exponentiation, so a wild regression
/// output cannot overflow.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    /// Finite coordinates and positive area.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).min(1.0)
}

/// Per-coordinate scaling of regression targets.
pub type DeltaWeights = [f64; 4];

pub const UNIT_WEIGHTS: DeltaWeights = [1.0; 4];

/// Center-size offsets of `b` relative to `anchor`:
/// `(wx·(cx − cxa)/wa, wy·(cy − cya)/ha, ww·ln(w/wa), wh·ln(h/ha))`.
pub fn encode_deltas(b: &BBox, anchor: &BBox, weights: DeltaWeights) -> [f64; 4] {
    let (cx, cy) = b.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        weights[0] * (cx - ax) / aw,
        weights[1] * (cy - ay) / ah,
        weights[2] * (b.width() / aw).ln(),
        weights[3] * (b.height() / ah).ln(),
    ]
}

/// Inverse of [`encode_deltas`], clipped to a `width × height` image. The
/// result can be degenerate; callers drop such boxes.
pub fn decode_deltas(d: &[f64], anchor: &BBox, weights: DeltaWeights, width: f64, height: f64) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = d[0] / weights[0] * aw + ax;
    let cy = d[1] / weights[1] * ah + ay;
    let w = (d[2] / weights[2]).min(MAX_LOG_SCALE).exp() * aw;
    let h = (d[3] / weights[3]).min(MAX_LOG_SCALE).exp() * ah;
    BBox::from_center(cx, cy, w, h).clip(width, height)
}

/// Greedy suppression: visit boxes by descending score (ties by lower
/// index) and drop any box whose IoU with an already kept box exceeds
/// `iou_thr`. Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thr) {
            kept.push(i);
        }
    }
    kept
}
