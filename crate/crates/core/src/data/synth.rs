//! Procedural textile surrogate: a woven texture with painted defects.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::pgm::GrayImage;
use super::{Annotation, Sample};
use crate::classes::DefectClass;
use crate::detector::{iou, BBox};

/// Largest side of a sundries cluster in pixels.
pub const SUNDRIES_MAX_SIDE: usize = 16;
const NOISE_SIGMA: f64 = 6.0;
const PLACEMENT_TRIES: usize = 30;

/// Float canvas that is quantized once at the end.
struct Canvas {
    width: usize,
    height: usize,
    v: Vec<f64>,
}

impl Canvas {
    fn add(&mut self, x: usize, y: usize, delta: f64) {
        if x < self.width && y < self.height {
            self.v[y * self.width + x] += delta;
        }
    }

    fn into_image(self) -> GrayImage {
        let pixels = self.v.iter().map(|p| p.round().clamp(0.0, 255.0) as u8).collect();
        GrayImage {
            width: self.width,
            height: self.height,
            pixels,
        }
    }
}

fn texture(width: usize, height: usize, rng: &mut impl Rng) -> Canvas {
    let px = rng.gen_range(5.0..9.0);
    let py = rng.gen_range(5.0..9.0);
    let base = rng.gen_range(120.0..140.0);
    let amp = rng.gen_range(10.0..16.0);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let mut v = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let weave = (2.0 * PI * x as f64 / px).sin() * (2.0 * PI * y as f64 / py).sin();
            v.push(base + amp * weave + noise.sample(rng));
        }
    }
    Canvas { width, height, v }
}

/// Painted extent in integer pixel coordinates, end-exclusive.
fn region(x0: usize, y0: usize, w: usize, h: usize) -> BBox {
    BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64)
}

fn streak(c: &mut Canvas, rng: &mut impl Rng, vertical: bool) -> BBox {
    let (across, along) = if vertical { (c.width, c.height) } else { (c.height, c.width) };
    let thick = rng.gen_range(2..=4);
    let len = rng.gen_range(along / 4..=along * 3 / 4);
    let a0 = rng.gen_range(0..=across - thick);
    let s0 = rng.gen_range(0..=along - len);
    let depth = rng.gen_range(60.0..85.0);
    for s in s0..s0 + len {
        for a in a0..a0 + thick {
            let (x, y) = if vertical { (a, s) } else { (s, a) };
            c.add(x, y, -depth);
        }
    }
    if vertical {
        region(a0, s0, thick, len)
    } else {
        region(s0, a0, len, thick)
    }
}

/// Paints a Gaussian bump of peak `amp` inside the square of half-side
/// `r` centered at (cx, cy).
fn blob(c: &mut Canvas, cx: usize, cy: usize, r: usize, amp: f64) {
    let sigma = r as f64 / 2.0;
    for y in cy - r..cy + r {
        for x in cx - r..cx + r {
            let dx = x as f64 + 0.5 - cx as f64;
            let dy = y as f64 + 0.5 - cy as f64;
            c.add(x, y, amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
}

fn oil_stain(c: &mut Canvas, rng: &mut impl Rng) -> BBox {
    let r = rng.gen_range(15..=30);
    let cx = rng.gen_range(r..=c.width - r);
    let cy = rng.gen_range(r..=c.height - r);
    blob(c, cx, cy, r, -rng.gen_range(70.0..95.0));
    region(cx - r, cy - r, 2 * r, 2 * r)
}

fn felter(c: &mut Canvas, rng: &mut impl Rng) -> BBox {
    let side = rng.gen_range(30..=60);
    let x0 = rng.gen_range(0..=c.width - side);
    let y0 = rng.gen_range(0..=c.height - side);
    let count = rng.gen_range(3..=6);
    let (mut lo_x, mut lo_y, mut hi_x, mut hi_y) = (usize::MAX, usize::MAX, 0, 0);
    for i in 0..count {
        let r = rng.gen_range(5..=side / 4);
        // the first two blobs pin opposite corners so the cluster spans the region
        let (cx, cy) = match i {
            0 => (x0 + r, y0 + r),
            1 => (x0 + side - r, y0 + side - r),
            _ => (rng.gen_range(x0 + r..=x0 + side - r), rng.gen_range(y0 + r..=y0 + side - r)),
        };
        blob(c, cx, cy, r, rng.gen_range(60.0..85.0));
        lo_x = lo_x.min(cx - r);
        lo_y = lo_y.min(cy - r);
        hi_x = hi_x.max(cx + r);
        hi_y = hi_y.max(cy + r);
    }
    region(lo_x, lo_y, hi_x - lo_x, hi_y - lo_y)
}

fn sundries(c: &mut Canvas, rng: &mut impl Rng) -> BBox {
    let side = rng.gen_range(8..=SUNDRIES_MAX_SIDE);
    let x0 = rng.gen_range(0..=c.width - side);
    let y0 = rng.gen_range(0..=c.height - side);
    // a solid dark core keeps the cluster visible at stride 4
    for y in y0 + side / 4..y0 + side - side / 4 {
        for x in x0 + side / 4..x0 + side - side / 4 {
            c.add(x, y, -70.0);
        }
    }
    // speckles, with the four corners always marked so the extent is exact
    let mut dots = vec![(x0, y0), (x0 + side - 1, y0), (x0, y0 + side - 1), (x0 + side - 1, y0 + side - 1)];
    for _ in 0..side * 2 {
        dots.push((rng.gen_range(x0..x0 + side), rng.gen_range(y0..y0 + side)));
    }
    for (x, y) in dots {
        c.add(x, y, -rng.gen_range(70.0..110.0));
    }
    region(x0, y0, side, side)
}

fn paint(c: &mut Canvas, rng: &mut impl Rng, class: DefectClass) -> BBox {
    match class {
        DefectClass::BrokenEnd => streak(c, rng, true),
        DefectClass::BrokenPick => streak(c, rng, false),
        DefectClass::OilStains => oil_stain(c, rng),
        DefectClass::Felter => felter(c, rng),
        DefectClass::Sundries => sundries(c, rng),
    }
}

/// Renders a `size × size` sample carrying one defect per class in
/// `labels` (empty means defect-free). Placement is redrawn a few times to
/// avoid heavy overlap; overlap is allowed once the retries run out.
/// `size` must be at least 64.
pub fn generate_sample(rng: &mut impl Rng, labels: &[DefectClass], size: usize, id: impl Into<String>) -> Sample {
    let mut canvas = texture(size, size, rng);
    let mut annotations: Vec<Annotation> = Vec::with_capacity(labels.len());
    for &class in labels {
        let mut attempt = 0;
        let bbox = loop {
            let snapshot = canvas.v.clone();
            let b = paint(&mut canvas, rng, class);
            attempt += 1;
            if attempt >= PLACEMENT_TRIES || annotations.iter().all(|a| iou(&a.bbox, &b) < 0.05) {
                break b;
            }
            canvas.v = snapshot;
        };
        annotations.push(Annotation { bbox, class });
    }
    Sample {
        id: id.into(),
        image: canvas.into_image(),
        annotations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normal_sample_is_texture_only() {
        let s = generate_sample(&mut ChaCha8Rng::seed_from_u64(1), &[], 64, "n");
        assert!(s.annotations.is_empty());
        let m = s.image.mean();
        assert!((110.0..150.0).contains(&m), "{m}");
    }

    #[test]
    fn sundries_are_small() {
        for seed in 0..200 {
            let s = generate_sample(&mut ChaCha8Rng::seed_from_u64(seed), &[DefectClass::Sundries], 320, "s");
            assert_eq!(s.annotations.len(), 1);
            let b = s.annotations[0].bbox;
            assert!(b.width().max(b.height()) <= SUNDRIES_MAX_SIDE as f64);
            assert!(b.width() >= 8.0);
        }
    }

    #[test]
    fn painter_extents() {
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = generate_sample(&mut rng, &DefectClass::ALL, 320, "all");
            assert_eq!(s.annotations.len(), 5);
            for a in &s.annotations {
                let b = a.bbox;
                assert!(b.is_valid() && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 320.0 && b.y2 <= 320.0);
                match a.class {
                    DefectClass::BrokenEnd => assert!((2.0..=4.0).contains(&b.width()) && b.height() >= 80.0),
                    DefectClass::BrokenPick => assert!((2.0..=4.0).contains(&b.height()) && b.width() >= 80.0),
                    DefectClass::OilStains => assert!(b.width() == b.height() && (30.0..=60.0).contains(&b.width())),
                    DefectClass::Felter => assert!(b.width() <= 60.0 && b.height() <= 60.0),
                    DefectClass::Sundries => assert!(b.width() <= 16.0),
                }
            }
        }
    }

    #[test]
    fn defects_change_pixels_inside_their_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = generate_sample(&mut rng, &[DefectClass::OilStains], 320, "o");
        let b = s.annotations[0].bbox;
        let inner = s.image.crop(
            (b.center().0 - 4.0) as usize,
            (b.center().1 - 4.0) as usize,
            8,
            8,
        );
        assert!(inner.mean() < s.image.mean() - 30.0);
    }

    #[test]
    fn same_seed_same_sample() {
        let labels = [DefectClass::Felter, DefectClass::Sundries];
        let a = generate_sample(&mut ChaCha8Rng::seed_from_u64(9), &labels, 128, "x");
        let b = generate_sample(&mut ChaCha8Rng::seed_from_u64(9), &labels, 128, "x");
        assert_eq!(a, b);
    }
}
