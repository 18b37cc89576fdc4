//! Minimal hand-written SVG charts.

use std::fmt::Write;

use crate::data::GrayImage;
use crate::detector::Detection;
use crate::trainer::{LossParts, TrainLog, TrainOutcome};

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, w: f64, h: f64) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Axes, tick labels and one polyline per series inside the box at
/// (x0, y0) of size w × h.
fn panel(out: &mut String, x0: f64, y0: f64, w: f64, h: f64, title: &str, series: &[Series]) {
    let (left, right, top, bottom) = (60.0, 10.0, 22.0, 28.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let (xl, xh) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (yl, yh) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| x0 + left + (x - xl) / (xh - xl) * pw;
    let sy = |y: f64| y0 + top + ph - (y - yl) / (yh - yl) * ph;
    writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-weight="bold">{}</text>"#, x0 + left, y0 + 14.0, escape(title)).unwrap();
    writeln!(
        out,
        r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#888"/>"##,
        x0 + left,
        y0 + top
    )
    .unwrap();
    for (v, y) in [(yh, y0 + top + 4.0), (yl, y0 + top + ph)] {
        writeln!(out, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{v:.4}</text>"#, x0 + left - 4.0).unwrap();
    }
    for (v, x, anchor) in [(xl, x0 + left, "start"), (xh, x0 + left + pw, "end")] {
        writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="{anchor}">{v}</text>"#, y0 + top + ph + 14.0).unwrap();
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.join(" ")).unwrap();
        if pts.len() == 1 {
            let (x, y) = s.points[0];
            writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(x), sy(y)).unwrap();
        }
        if series.len() > 1 {
            writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
                x0 + left + 6.0,
                y0 + top + 14.0 + 13.0 * i as f64,
                escape(s.name)
            )
            .unwrap();
        }
    }
}

pub fn line_chart(title: &str, series: &[Series]) -> String {
    let mut out = String::new();
    open(&mut out, 640.0, 360.0);
    panel(&mut out, 0.0, 0.0, 640.0, 360.0, title, series);
    out.push_str("</svg>\n");
    out
}

/// One small panel per entry, three to a row.
pub fn small_multiples(panels: &[(String, Vec<(f64, f64)>)]) -> String {
    let (cols, pw, ph) = (3usize, 320.0, 200.0);
    let rows = panels.len().div_ceil(cols).max(1);
    let mut out = String::new();
    open(&mut out, pw * cols as f64, ph * rows as f64);
    for (i, (title, points)) in panels.iter().enumerate() {
        let (x0, y0) = ((i % cols) as f64 * pw, (i / cols) as f64 * ph);
        let series = [Series {
            name: title,
            points: points.clone(),
        }];
        panel(&mut out, x0, y0, pw, ph, title, &series);
    }
    out.push_str("</svg>\n");
    out
}

/// Grouped bars on a 0..1 scale; missing values leave a gap.
pub fn bar_chart(title: &str, categories: &[&str], series: &[(&str, Vec<Option<f64>>)]) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, top, bottom) = (50.0, 30.0, 40.0);
    let ph = h - top - bottom;
    let group = (w - left - 20.0) / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    let mut out = String::new();
    open(&mut out, w, h);
    writeln!(out, r#"<text x="{left}" y="18" font-weight="bold">{}</text>"#, escape(title)).unwrap();
    for tick in [0.0, 0.5, 1.0] {
        let y = top + ph * (1.0 - tick);
        writeln!(out, r##"<line x1="{left}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - 20.0).unwrap();
        writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.1}</text>"#, left - 4.0, y + 4.0).unwrap();
    }
    for (c, name) in categories.iter().enumerate() {
        let gx = left + group * c as f64 + group * 0.1;
        for (s, (_, values)) in series.iter().enumerate() {
            if let Some(v) = values.get(c).copied().flatten() {
                let bh = ph * v.clamp(0.0, 1.0);
                writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="{}"/>"#,
                    gx + bar * s as f64,
                    top + ph - bh,
                    bar * 0.95,
                    PALETTE[s % PALETTE.len()]
                )
                .unwrap();
            }
        }
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            h - bottom + 16.0,
            escape(name)
        )
        .unwrap();
    }
    for (s, (name, _)) in series.iter().enumerate() {
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{}">{}</text>"#,
            w - 140.0,
            18.0 + 13.0 * s as f64,
            PALETTE[s % PALETTE.len()],
            escape(name)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// The image as a grid of gray cells (block-averaged down to at most about
/// 80 cells a side) with detection boxes drawn on top.
pub fn overlay(image: &GrayImage, detections: &[Detection]) -> String {
    let block = (image.width.max(image.height) / 80).max(1);
    let (w, h) = (image.width as f64, image.height as f64);
    let mut out = String::new();
    open(&mut out, w, h);
    for by in (0..image.height).step_by(block) {
        for bx in (0..image.width).step_by(block) {
            let (bw, bh) = (block.min(image.width - bx), block.min(image.height - by));
            let mut sum = 0u32;
            for y in by..by + bh {
                for x in bx..bx + bw {
                    sum += image.get(x, y) as u32;
                }
            }
            let g = sum / (bw * bh) as u32;
            writeln!(out, r#"<rect x="{bx}" y="{by}" width="{bw}" height="{bh}" fill="rgb({g},{g},{g})"/>"#).unwrap();
        }
    }
    for d in detections {
        let color = PALETTE[d.class.index() % PALETTE.len()];
        let b = d.bbox;
        writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            b.x1,
            b.y1,
            b.width(),
            b.height()
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{} {:.2}</text>"#,
            b.x1,
            (b.y1 - 2.0).max(10.0),
            d.class.name(),
            d.score
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Total loss and its four parts against iteration.
pub fn loss_chart(log: &TrainLog) -> String {
    let pick = |f: fn(&LossParts) -> f64| -> Vec<(f64, f64)> { log.losses.iter().map(|(i, p)| (*i as f64, f(p))).collect() };
    line_chart(
        "training loss",
        &[
            Series {
                name: "total",
                points: pick(|p| p.total()),
            },
            Series {
                name: "proposal_cls",
                points: pick(|p| p.proposal_cls),
            },
            Series {
                name: "proposal_reg",
                points: pick(|p| p.proposal_reg),
            },
            Series {
                name: "cls",
                points: pick(|p| p.cls),
            },
            Series {
                name: "reg",
                points: pick(|p| p.reg),
            },
        ],
    )
}

/// One panel per tracked weight.
pub fn weights_chart(log: &TrainLog) -> String {
    let mut panels: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in &log.weights {
        let title = format!("{} {}", r.module, r.weight_id);
        let point = (r.iteration as f64, r.value);
        match panels.iter_mut().find(|(t, _)| *t == title) {
            Some(p) => p.1.push(point),
            None => panels.push((title, vec![point])),
        }
    }
    small_multiples(&panels)
}

/// Final loss and validation mAP against beta, side by side.
pub fn sweep_chart(runs: &[(f64, &TrainOutcome)]) -> String {
    let loss = runs.iter().filter_map(|(b, r)| r.log.final_total().map(|l| (*b, l))).collect();
    let map = runs.iter().filter_map(|(b, r)| r.val_map.map(|m| (*b, m))).collect();
    small_multiples(&[("final loss vs beta".to_string(), loss), ("val mAP vs beta".to_string(), map)])
}
