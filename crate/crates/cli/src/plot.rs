//! Minimal SVG plotter: line charts with gap-aware polylines and box plots.
//! Output is plain text with fixed-precision coordinates, so identical inputs
//! produce identical bytes.

use std::fmt::Write;

use crate::eval::EvalReport;

const EKF_COLOR: &str = "#1f77b4";
const BASE_COLOR: &str = "#ff7f0e";

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "0.00".into()
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && (a >= 1e4 || a < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// A polyline broken into contiguous segments (gaps where the estimator
/// emitted nothing).
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub segments: Vec<Vec<(f64, f64)>>,
}

struct Bounds {
    lo: f64,
    hi: f64,
}

impl Bounds {
    fn of(values: impl Iterator<Item = f64>) -> Bounds {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = (hi - lo) * 0.05;
        Bounds { lo: lo - pad, hi: hi + pad }
    }

    fn map(&self, v: f64, a: f64, b: f64) -> f64 {
        a + (v - self.lo) / (self.hi - self.lo) * (b - a)
    }
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

impl Frame {
    /// Axes box, four ticks per axis, panel title.
    fn chrome(&self, out: &mut String, title: &str, xb: &Bounds, yb: &Bounds) {
        let _ = write!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>",
            fmt(self.x0),
            fmt(self.y0),
            fmt(self.w),
            fmt(self.h)
        );
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" font-family=\"sans-serif\">{title}</text>",
            fmt(self.x0 + self.w / 2.0),
            fmt(self.y0 - 8.0)
        );
        for i in 0..=4 {
            let s = i as f64 / 4.0;
            let xv = xb.lo + s * (xb.hi - xb.lo);
            let x = self.x0 + s * self.w;
            let _ = write!(
                out,
                "<line x1=\"{x}\" y1=\"{y}\" x2=\"{x}\" y2=\"{y2}\" stroke=\"#333\"/>\
                 <text x=\"{x}\" y=\"{ty}\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\">{label}</text>",
                x = fmt(x),
                y = fmt(self.y0 + self.h),
                y2 = fmt(self.y0 + self.h + 4.0),
                ty = fmt(self.y0 + self.h + 16.0),
                label = tick_label(xv),
            );
            let yv = yb.lo + s * (yb.hi - yb.lo);
            let y = self.y0 + self.h - s * self.h;
            let _ = write!(
                out,
                "<line x1=\"{x1}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"#333\"/>\
                 <text x=\"{tx}\" y=\"{ty}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{label}</text>",
                x1 = fmt(self.x0 - 4.0),
                x2 = fmt(self.x0),
                y = fmt(y),
                tx = fmt(self.x0 - 6.0),
                ty = fmt(y + 3.0),
                label = tick_label(yv),
            );
        }
    }
}

/// Line chart panel; returns the SVG fragment.
pub fn line_panel(x0: f64, y0: f64, w: f64, h: f64, title: &str, series: &[Series]) -> String {
    let frame = Frame { x0, y0, w, h };
    let xb = Bounds::of(series.iter().flat_map(|s| s.segments.iter().flatten().map(|p| p.0)));
    let yb = Bounds::of(series.iter().flat_map(|s| s.segments.iter().flatten().map(|p| p.1)));
    let mut out = String::new();
    frame.chrome(&mut out, title, &xb, &yb);
    for (si, s) in series.iter().enumerate() {
        for seg in &s.segments {
            if seg.is_empty() {
                continue;
            }
            let pts: Vec<String> = seg
                .iter()
                .map(|(x, y)| format!("{},{}", fmt(xb.map(*x, x0, x0 + w)), fmt(yb.map(*y, y0 + h, y0))))
                .collect();
            if seg.len() == 1 {
                let mut it = pts[0].split(',');
                let (px, py) = (it.next().unwrap(), it.next().unwrap());
                let _ = write!(out, "<circle cx=\"{px}\" cy=\"{py}\" r=\"1.5\" fill=\"{}\"/>", s.color);
            } else {
                let _ = write!(
                    out,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.2\"/>",
                    pts.join(" "),
                    s.color
                );
            }
        }
        let ly = y0 + 14.0 + 14.0 * si as f64;
        let _ = write!(
            out,
            "<line x1=\"{x1}\" y1=\"{ly}\" x2=\"{x2}\" y2=\"{ly}\" stroke=\"{c}\" stroke-width=\"2\"/>\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" font-family=\"sans-serif\">{label}</text>",
            x1 = fmt(x0 + w - 110.0),
            x2 = fmt(x0 + w - 90.0),
            ly = fmt(ly),
            c = s.color,
            tx = fmt(x0 + w - 85.0),
            ty = fmt(ly + 4.0),
            label = s.label,
        );
    }
    out
}

fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if i + 1 < sorted.len() {
            sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
        } else {
            sorted[i]
        }
    };
    (q(0.25), q(0.5), q(0.75))
}

/// Box plot panel: median, quartile box, min/max whiskers per group.
pub fn box_panel(x0: f64, y0: f64, w: f64, h: f64, title: &str, groups: &[(String, Vec<f64>)]) -> String {
    let frame = Frame { x0, y0, w, h };
    let yb = Bounds::of(groups.iter().flat_map(|(_, v)| v.iter().copied()));
    let xb = Bounds { lo: 0.0, hi: groups.len() as f64 };
    let mut out = String::new();
    frame.chrome(&mut out, title, &Bounds { lo: 0.0, hi: 1.0 }, &yb);
    let slot_w = w / groups.len() as f64;
    for (gi, (label, values)) in groups.iter().enumerate() {
        let cx = x0 + xb.map(gi as f64 + 0.5, 0.0, w);
        let _ = write!(
            out,
            "<text x=\"{tx}\" y=\"{ty}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{label} (n={n})</text>",
            tx = fmt(cx),
            ty = fmt(y0 + h + 30.0),
            n = values.len(),
        );
        let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        if sorted.is_empty() {
            continue;
        }
        sorted.sort_by(|a, b| a.total_cmp(b));
        let (q1, med, q3) = quartiles(&sorted);
        let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
        let bw = slot_w * 0.4;
        let y = |v: f64| yb.map(v, y0 + h, y0);
        let _ = write!(
            out,
            "<line x1=\"{cx}\" y1=\"{ylo}\" x2=\"{cx}\" y2=\"{yhi}\" stroke=\"#333\"/>\
             <rect x=\"{bx}\" y=\"{by}\" width=\"{bw}\" height=\"{bh}\" fill=\"#9ecae1\" stroke=\"#333\"/>\
             <line x1=\"{bx}\" y1=\"{my}\" x2=\"{bx2}\" y2=\"{my}\" stroke=\"#333\" stroke-width=\"2\"/>",
            cx = fmt(cx),
            ylo = fmt(y(lo)),
            yhi = fmt(y(hi)),
            bx = fmt(cx - bw / 2.0),
            by = fmt(y(q3)),
            bw = fmt(bw),
            bh = fmt((y(q1) - y(q3)).max(0.5)),
            my = fmt(y(med)),
            bx2 = fmt(cx + bw / 2.0),
        );
    }
    out
}

pub fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>{body}</svg>\n",
        w = fmt(width),
        h = fmt(height),
    )
}

fn error_series(
    report: &EvalReport,
    ekf: bool,
    pick: fn(&crate::eval::FrameErr) -> f64,
) -> Vec<Vec<(f64, f64)>> {
    let mut segments = Vec::new();
    let mut current: Vec<(f64, f64)> = Vec::new();
    for pf in &report.per_frame {
        let err = if ekf { pf.ekf.as_ref() } else { pf.baseline.as_ref() };
        match err {
            Some(e) => current.push((pf.t_s, pick(e))),
            None => {
                if !current.is_empty() {
                    segments.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        segments.push(current);
    }
    segments
}

/// Per-frame error lines for both angles plus error box plots, one page.
pub fn eval_plots(report: &EvalReport) -> String {
    let panel = |y0: f64, title: &str, pick: fn(&crate::eval::FrameErr) -> f64| {
        line_panel(
            60.0,
            y0,
            840.0,
            220.0,
            title,
            &[
                Series { label: "EKF".into(), color: EKF_COLOR, segments: error_series(report, true, pick) },
                Series {
                    label: "baseline".into(),
                    color: BASE_COLOR,
                    segments: error_series(report, false, pick),
                },
            ],
        )
    };
    let mut body = panel(30.0, "polar angle error vs time [deg]", |e| e.dtheta_deg);
    body.push_str(&panel(320.0, "azimuth error vs time [deg]", |e| e.dphi_deg));
    let collect = |ekf: bool, pick: fn(&crate::eval::FrameErr) -> f64| -> Vec<f64> {
        report
            .per_frame
            .iter()
            .filter_map(|pf| if ekf { pf.ekf.as_ref() } else { pf.baseline.as_ref() })
            .map(pick)
            .collect()
    };
    body.push_str(&box_panel(
        60.0,
        610.0,
        840.0,
        220.0,
        "error distribution [deg]",
        &[
            ("EKF θ".into(), collect(true, |e| e.dtheta_deg)),
            ("baseline θ".into(), collect(false, |e| e.dtheta_deg)),
            ("EKF φ".into(), collect(true, |e| e.dphi_deg)),
            ("baseline φ".into(), collect(false, |e| e.dphi_deg)),
        ],
    ));
    document(960.0, 880.0, &body)
}
