//! Minimal SVG scatter/trajectory plots of the first two coordinates.

use std::fmt::Write;

use hbridge::{EditTrace, Label};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn xy(v: &[f64]) -> (f64, f64) {
    (v.first().copied().unwrap_or(0.0), v.get(1).copied().unwrap_or(0.0))
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            return Frame { x0: -1.0, x1: 1.0, y0: -1.0, y1: 1.0 };
        }
        let pad = |lo: f64, hi: f64| {
            let span = (hi - lo).max(1e-9);
            (lo - 0.08 * span - 0.5, hi + 0.08 * span + 0.5)
        };
        let (x0, x1) = pad(f.x0, f.x1);
        let (y0, y1) = pad(f.y0, f.y1);
        Frame { x0, x1, y0, y1 }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let px = MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN);
        let py = HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN);
        (px, py)
    }
}

fn polyline(out: &mut String, frame: &Frame, pts: &[(f64, f64)], stroke: &str, dash: bool) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&p| {
            let (x, y) = frame.map(p);
            format!("{x:.3},{y:.3}")
        })
        .collect();
    if coords.len() < 2 {
        return;
    }
    let dash = if dash { " stroke-dasharray=\"4 3\"" } else { "" };
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"{stroke}\" stroke-width=\"1.2\"{dash} points=\"{}\"/>",
        coords.join(" ")
    );
}

fn circle(out: &mut String, frame: &Frame, p: (f64, f64), r: f64, fill: &str, stroke: &str) {
    if !(p.0.is_finite() && p.1.is_finite()) {
        return;
    }
    let (x, y) = frame.map(p);
    let _ = writeln!(out, "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"{r}\" fill=\"{fill}\" stroke=\"{stroke}\"/>");
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Data samples colored by label, original and edited trajectories, and their endpoints.
pub fn render(title: &str, samples: &[(Label, Vec<f64>)], traces: &[EditTrace<f64>]) -> String {
    let mut pts: Vec<(f64, f64)> = samples.iter().map(|(_, v)| xy(v)).collect();
    for tr in traces {
        for s in &tr.steps {
            pts.push(xy(&s.x_orig));
            pts.push(xy(&s.x_edit));
        }
    }
    let frame = Frame::fit(pts.into_iter());

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(out, "<text x=\"{MARGIN}\" y=\"28\" font-family=\"sans-serif\" font-size=\"14\">{}</text>", escape(title));
    let _ = writeln!(
        out,
        "<text x=\"{MARGIN}\" y=\"{:.3}\" font-family=\"sans-serif\" font-size=\"10\">x0 [{:.3}, {:.3}]  x1 [{:.3}, {:.3}]</text>",
        HEIGHT - 16.0,
        frame.x0,
        frame.x1,
        frame.y0,
        frame.y1
    );

    for (label, v) in samples {
        let c = PALETTE[*label as usize % PALETTE.len()];
        circle(&mut out, &frame, xy(v), 1.5, c, "none");
    }
    for tr in traces {
        let orig: Vec<(f64, f64)> = tr.steps.iter().map(|s| xy(&s.x_orig)).collect();
        let edit: Vec<(f64, f64)> = tr.steps.iter().map(|s| xy(&s.x_edit)).collect();
        polyline(&mut out, &frame, &orig, "#888888", true);
        polyline(&mut out, &frame, &edit, "#222222", false);
        circle(&mut out, &frame, xy(&tr.x0_orig), 3.5, "white", "#222222");
        circle(&mut out, &frame, xy(&tr.x0_edit), 3.5, "#222222", "#222222");
    }
    out.push_str("</svg>\n");
    out
}
