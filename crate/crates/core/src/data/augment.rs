//! Tiling, translation and rotation with box bookkeeping.

use super::pgm::GrayImage;
use super::{Annotation, Sample};
use crate::detector::BBox;
use crate::error::{invalid, Result};

/// Fraction of a box's area that must survive clipping for it to be kept.
pub const MIN_RETAINED_AREA: f64 = 0.25;
pub const MAX_SHIFT: i64 = 50;
pub const MIN_ANGLE_DEG: f64 = 5.0;
pub const MAX_ANGLE_DEG: f64 = 20.0;

/// Non-overlapping `tile × tile` crops from the top-left, row by row.
/// Edge remainders are discarded. Boxes are clipped to each tile and kept
/// only where at least a quarter of their area survives.
pub fn crop_tiles(sample: &Sample, tile: usize) -> Result<Vec<Sample>> {
    let img = &sample.image;
    if tile == 0 || img.width < tile || img.height < tile {
        return Err(invalid!("{}x{} image is smaller than tile {tile}", img.width, img.height));
    }
    let (cols, rows) = (img.width / tile, img.height / tile);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = ((c * tile) as f64, (r * tile) as f64);
            let annotations = sample
                .annotations
                .iter()
                .filter_map(|a| {
                    let moved = a.bbox.translate(-x0, -y0);
                    let clipped = moved.clip(tile as f64, tile as f64);
                    (clipped.is_valid() && clipped.area() >= MIN_RETAINED_AREA * a.bbox.area()).then_some(Annotation {
                        bbox: clipped,
                        class: a.class,
                    })
                })
                .collect();
            let id = if rows * cols == 1 {
                sample.id.clone()
            } else {
                format!("{}_r{r}c{c}", sample.id)
            };
            out.push(Sample {
                id,
                image: img.crop(c * tile, r * tile, tile, tile),
                annotations,
            });
        }
    }
    Ok(out)
}

fn keep_inside(annotations: impl Iterator<Item = Annotation>, w: f64, h: f64) -> Vec<Annotation> {
    annotations
        .filter_map(|a| {
            let bbox = a.bbox.clip(w, h);
            bbox.is_valid().then_some(Annotation { bbox, class: a.class })
        })
        .collect()
}

/// Shifts content right by `dx` and down by `dy`; vacated pixels copy the
/// nearest original edge.
pub fn translate(sample: &Sample, dx: i64, dy: i64) -> Result<Sample> {
    if !(0..=MAX_SHIFT).contains(&dx) || !(0..=MAX_SHIFT).contains(&dy) {
        return Err(invalid!("shift ({dx}, {dy}) outside 0..={MAX_SHIFT}"));
    }
    let img = &sample.image;
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height as i64 {
        for x in 0..img.width as i64 {
            pixels.push(img.get_clamped(x - dx, y - dy));
        }
    }
    let moved = sample.annotations.iter().map(|a| Annotation {
        bbox: a.bbox.translate(dx as f64, dy as f64),
        class: a.class,
    });
    Ok(Sample {
        id: sample.id.clone(),
        image: GrayImage {
            width: img.width,
            height: img.height,
            pixels,
        },
        annotations: keep_inside(moved, img.width as f64, img.height as f64),
    })
}

/// Axis-aligned bounds of `b` after rotating its corners by `theta_deg`
/// about (cx, cy). With y pointing down, positive angles turn clockwise
/// on screen.
pub fn rotate_box(b: &BBox, theta_deg: f64, cx: f64, cy: f64) -> BBox {
    let (s, c) = theta_deg.to_radians().sin_cos();
    let corners = [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)];
    let mut out = BBox::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        let rx = cx + (x - cx) * c - (y - cy) * s;
        let ry = cy + (x - cx) * s + (y - cy) * c;
        out = BBox::new(out.x1.min(rx), out.y1.min(ry), out.x2.max(rx), out.y2.max(ry));
    }
    out
}

/// Rotation about the image center with nearest-neighbour sampling and
/// edge replication. Boxes become the clipped bounds of their rotated
/// corners.
pub fn rotate(sample: &Sample, theta_deg: f64) -> Result<Sample> {
    if !(MIN_ANGLE_DEG..=MAX_ANGLE_DEG).contains(&theta_deg.abs()) {
        return Err(invalid!("rotation {theta_deg} deg outside {MIN_ANGLE_DEG}..={MAX_ANGLE_DEG} in magnitude"));
    }
    let img = &sample.image;
    let (cx, cy) = (img.width as f64 / 2.0, img.height as f64 / 2.0);
    let (s, c) = theta_deg.to_radians().sin_cos();
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in 0..img.width {
            // inverse map of the output pixel center
            let (ox, oy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = cx + ox * c + oy * s;
            let sy = cy - ox * s + oy * c;
            pixels.push(img.get_clamped(sx.floor() as i64, sy.floor() as i64));
        }
    }
    let turned = sample.annotations.iter().map(|a| Annotation {
        bbox: rotate_box(&a.bbox, theta_deg, cx, cy),
        class: a.class,
    });
    Ok(Sample {
        id: sample.id.clone(),
        image: GrayImage {
            width: img.width,
            height: img.height,
            pixels,
        },
        annotations: keep_inside(turned, img.width as f64, img.height as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::DefectClass;
    use crate::data::synth::generate_sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain(width: usize, height: usize, boxes: &[BBox]) -> Sample {
        let pixels = (0..width * height).map(|i| (i % 251) as u8).collect();
        Sample {
            id: "p".into(),
            image: GrayImage::new(width, height, pixels).unwrap(),
            annotations: boxes
                .iter()
                .map(|&bbox| Annotation {
                    bbox,
                    class: DefectClass::Felter,
                })
                .collect(),
        }
    }

    #[test]
    fn tiling_counts_and_box_assignment() {
        let s = plain(1280, 1024, &[BBox::new(330.0, 10.0, 350.0, 30.0)]);
        let tiles = crop_tiles(&s, 320).unwrap();
        assert_eq!(tiles.len(), 12);
        let with_box: Vec<_> = tiles.iter().filter(|t| !t.annotations.is_empty()).collect();
        assert_eq!(with_box.len(), 1);
        assert_eq!(with_box[0].id, "p_r0c1");
        assert_eq!(with_box[0].annotations[0].bbox, BBox::new(10.0, 10.0, 30.0, 30.0));
        assert_eq!(tiles[5].image.get(0, 0), s.image.get(320, 320));

        let one = plain(320, 320, &[BBox::new(1.0, 2.0, 3.0, 4.0)]);
        assert_eq!(crop_tiles(&one, 320).unwrap(), vec![one.clone()]);
        assert!(crop_tiles(&plain(319, 400, &[]), 320).is_err());
    }

    #[test]
    fn tiling_drops_small_remnants() {
        // 30% of the box sits in tile 0, 70% in tile 1; a second box splits 20/80
        let s = plain(640, 320, &[BBox::new(311.0, 0.0, 341.0, 10.0), BBox::new(314.0, 50.0, 344.0, 60.0)]);
        let tiles = crop_tiles(&s, 320).unwrap();
        assert_eq!(tiles[0].annotations.len(), 1);
        assert_eq!(tiles[0].annotations[0].bbox, BBox::new(311.0, 0.0, 320.0, 10.0));
        assert_eq!(tiles[1].annotations.len(), 2);
    }

    #[test]
    fn translation() {
        let s = plain(100, 80, &[BBox::new(10.0, 5.0, 20.0, 15.0), BBox::new(70.0, 0.0, 100.0, 10.0)]);
        assert_eq!(translate(&s, 0, 0).unwrap(), s);
        let t = translate(&s, 50, 0).unwrap();
        assert_eq!(t.annotations[0].bbox, BBox::new(60.0, 5.0, 70.0, 15.0));
        assert_eq!(t.annotations.len(), 1, "box pushed past the right edge is dropped");
        let t = translate(&s, 10, 3).unwrap();
        assert_eq!(t.image.get(0, 0), s.image.get(0, 0));
        assert_eq!(t.image.get(5, 1), s.image.get(0, 0));
        assert_eq!(t.image.get(15, 9), s.image.get(5, 6));
        assert_eq!(t.annotations[1].bbox, BBox::new(80.0, 3.0, 100.0, 13.0));
        assert!(translate(&s, 51, 0).is_err());
        assert!(translate(&s, 0, -1).is_err());
    }

    #[test]
    fn rotated_box_matches_corner_arithmetic() {
        let b = rotate_box(&BBox::new(100.0, 100.0, 120.0, 120.0), 20.0, 160.0, 160.0);
        // corners relative to center: (-60,-60), (-40,-60), (-60,-40), (-40,-40)
        let (s, c) = 20f64.to_radians().sin_cos();
        let xs = [-60.0 * c + 60.0 * s, -40.0 * c + 60.0 * s, -60.0 * c + 40.0 * s, -40.0 * c + 40.0 * s];
        let ys = [-60.0 * s - 60.0 * c, -40.0 * s - 60.0 * c, -60.0 * s - 40.0 * c, -40.0 * s - 40.0 * c];
        let lo = |v: [f64; 4]| v.iter().cloned().fold(f64::INFINITY, f64::min) + 160.0;
        let hi = |v: [f64; 4]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 160.0;
        let want = [lo(xs), lo(ys), hi(xs), hi(ys)];
        for (g, w) in b.to_array().iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        // independently computed: (117.2992, 83.0972, 142.9335, 108.7315)
        for (g, w) in b.to_array().iter().zip([117.299248, 83.097234, 142.933504, 108.731489]) {
            assert!((g - w).abs() < 1e-6, "{b:?}");
        }
    }

    #[test]
    fn rotate_there_and_back_contains_original() {
        let orig = BBox::new(150.0, 150.0, 170.0, 170.0);
        for theta in [5.0, 12.5, 20.0, -7.0] {
            let s = plain(320, 320, &[orig]);
            let back = rotate(&rotate(&s, theta).unwrap(), -theta).unwrap();
            let b = back.annotations[0].bbox;
            assert!(b.x1 <= orig.x1 && b.y1 <= orig.y1 && b.x2 >= orig.x2 && b.y2 >= orig.y2);
        }
        assert!(rotate(&plain(32, 32, &[]), 4.9).is_err());
        assert!(rotate(&plain(32, 32, &[]), -21.0).is_err());
    }

    #[test]
    fn rotation_preserves_mean_and_moves_pixels_consistently() {
        let s = generate_sample(&mut ChaCha8Rng::seed_from_u64(4), &[DefectClass::OilStains], 320, "o");
        let r = rotate(&s, 15.0).unwrap();
        let (m0, m1) = (s.image.mean(), r.image.mean());
        assert!((m1 - m0).abs() / m0 < 0.02, "{m0} {m1}");
        // the dark stain centre still lies in the rotated box
        let b = r.annotations[0].bbox;
        let (cx, cy) = b.center();
        assert!((r.image.get(cx as usize, cy as usize) as f64) < m1 - 30.0);
    }
}
