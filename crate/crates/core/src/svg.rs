//! Self-contained SVG charts: grouped bars and polylines on shared axes.
//!
//! Output depends only on the inputs (fixed float formatting, no clock),
//! so re-rendering the same data is byte-identical.

use std::fmt::Write as _;

use crate::gmm::{GmmFit, LayerDistribution};
use crate::probe::FeatureCountProfile;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }

    /// Same series with y divided by its largest magnitude.
    pub fn normalized(&self) -> Series {
        let max = self.points.iter().map(|p| p.1.abs()).fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
        Series {
            name: self.name.clone(),
            points: self.points.iter().map(|&(x, y)| (x, y * scale)).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    bars: Vec<Series>,
    lines: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Plot {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            ..Default::default()
        }
    }

    pub fn bars(mut self, s: Series) -> Self {
        self.bars.push(s);
        self
    }

    pub fn line(mut self, s: Series) -> Self {
        self.lines.push(s);
        self
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        let pts = self.bars.iter().chain(&self.lines).flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
        for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        if !self.bars.is_empty() {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        (x0, x1, y0, y1 * 1.05)
    }

    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.extent();
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut s = String::new();
        let w = &mut s;
        writeln!(
            w,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(
            w,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            MARGIN_L + pw / 2.0,
            esc(&self.title)
        )
        .unwrap();
        // Axes and ticks.
        let (bx, by) = (MARGIN_L, MARGIN_T + ph);
        writeln!(
            w,
            r#"<path d="M{bx:.1},{:.1} V{by:.1} H{:.1}" stroke="black" fill="none"/>"#,
            MARGIN_T,
            MARGIN_L + pw
        )
        .unwrap();
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            let y = sy(v);
            writeln!(
                w,
                r#"<line x1="{:.1}" y1="{y:.1}" x2="{bx:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                bx - 4.0,
                bx - 6.0,
                y + 4.0,
                tick(v)
            )
            .unwrap();
        }
        for v in x_ticks(x0, x1) {
            let x = sx(v);
            writeln!(
                w,
                r#"<line x1="{x:.1}" y1="{by:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                by + 4.0,
                by + 18.0,
                tick(v)
            )
            .unwrap();
        }
        writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 10.0,
            esc(&self.x_label)
        )
        .unwrap();
        writeln!(
            w,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            esc(&self.y_label)
        )
        .unwrap();

        let groups = self.bars.len().max(1) as f64;
        let unit = pw / (x1 - x0);
        let bar_w = 0.8 * unit / groups;
        let mut legend = Vec::new();
        for (gi, b) in self.bars.iter().enumerate() {
            let color = PALETTE[gi % PALETTE.len()];
            legend.push((b.name.as_str(), color, true));
            for &(x, y) in &b.points {
                let left = sx(x) - 0.4 * unit + gi as f64 * bar_w;
                let (top, bottom) = (sy(y.max(0.0)), sy(y.min(0.0)));
                writeln!(
                    w,
                    r#"<rect x="{left:.1}" y="{top:.1}" width="{bar_w:.1}" height="{:.1}" fill="{color}" fill-opacity="0.7"/>"#,
                    bottom - top
                )
                .unwrap();
            }
        }
        for (li, l) in self.lines.iter().enumerate() {
            let color = PALETTE[(self.bars.len() + li) % PALETTE.len()];
            legend.push((l.name.as_str(), color, false));
            let pts: Vec<String> = l
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                .collect();
            writeln!(
                w,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            )
            .unwrap();
        }
        for (i, (name, color, filled)) in legend.iter().enumerate() {
            let y = MARGIN_T + 10.0 + 18.0 * i as f64;
            let x = WIDTH - MARGIN_R + 10.0;
            if *filled {
                writeln!(w, r#"<rect x="{x:.1}" y="{:.1}" width="12" height="10" fill="{color}"/>"#, y - 9.0)
                    .unwrap();
            } else {
                writeln!(
                    w,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/>"#,
                    y - 4.0,
                    x + 12.0,
                    y - 4.0
                )
                .unwrap();
            }
            writeln!(w, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 18.0, esc(name)).unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v == v.round() && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn x_ticks(x0: f64, x1: f64) -> Vec<f64> {
    let (lo, hi) = (x0.ceil() as i64, x1.floor() as i64);
    let span = (hi - lo).max(1);
    let step = ((span as f64) / 10.0).ceil().max(1.0) as i64;
    (lo..=hi).step_by(step as usize).map(|v| v as f64).collect()
}

/// Reasoning-feature count per probed layer.
pub fn feature_profile_chart(profile: &FeatureCountProfile) -> String {
    let pts = profile.entries.iter().map(|&(l, c)| (l as f64, c as f64)).collect();
    Plot::new("Reasoning features per layer", "layer", "feature count")
        .bars(Series::new("features", pts))
        .render()
}

/// Score and feature count against layer, each scaled to its maximum.
pub fn score_feature_overlay(scores: &[(usize, f64)], profile: &FeatureCountProfile) -> String {
    let counts = Series::new(
        "feature count",
        profile.entries.iter().map(|&(l, c)| (l as f64, c as f64)).collect(),
    );
    let scores = Series::new(
        "exact match",
        scores.iter().map(|&(l, s)| (l as f64, s)).collect(),
    );
    Plot::new("Score and feature count by layer", "layer", "fraction of maximum")
        .bars(counts.normalized())
        .line(scores.normalized())
        .render()
}

/// Normalized distributions as bars with their fitted mixture densities.
pub fn gmm_overlay(
    a: (&str, &LayerDistribution, &GmmFit),
    b: (&str, &LayerDistribution, &GmmFit),
) -> String {
    let mut plot = Plot::new("Layer distributions and 3-component fits", "layer", "probability");
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (name, dist, _) in [a, b] {
        let pts: Vec<(f64, f64)> = dist
            .positions
            .iter()
            .copied()
            .zip(dist.normalized())
            .collect();
        for &(x, _) in &pts {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        plot = plot.bars(Series::new(name, pts));
    }
    for (name, _, fit) in [a, b] {
        let n = 200;
        let pts = (0..=n)
            .map(|i| {
                let x = lo + (hi - lo) * i as f64 / n as f64;
                (x, fit.density(x))
            })
            .collect();
        plot = plot.line(Series::new(format!("{name} fit"), pts));
    }
    plot.render()
}
