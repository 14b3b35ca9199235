//! Static SVG figures built from run outputs. Output is a pure function of the
//! input data: fixed layout, fixed number formatting, no timestamps.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::controller::{convergence_ellipse, GainTerms};
use crate::engine::{GlobalWRecord, StepRecord};
use crate::{Error, Point, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 560.0;
const MARGIN: f64 = 60.0;
const ELLIPSE_POINTS: usize = 96;
const COLORS: [&str; 8] = [
    "#d62728", "#1f77b4", "#e6a700", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Trajectories,
    DeltaW,
    Ellipses,
    GlobalW,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectories" => Ok(PlotKind::Trajectories),
            "deltaw" => Ok(PlotKind::DeltaW),
            "ellipses" => Ok(PlotKind::Ellipses),
            "globalw" => Ok(PlotKind::GlobalW),
            other => Err(Error::invalid(format!(
                "unknown plot kind `{other}` (trajectories, deltaw, ellipses, globalw)"
            ))),
        }
    }
}

impl PlotKind {
    pub fn file_name(self) -> &'static str {
        match self {
            PlotKind::Trajectories => "trajectories.svg",
            PlotKind::DeltaW => "deltaw.svg",
            PlotKind::Ellipses => "ellipses.svg",
            PlotKind::GlobalW => "globalw.svg",
        }
    }
}

/// Inclusive step window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub lo: usize,
    pub hi: usize,
}

impl Window {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::invalid(format!("empty window [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    fn contains(&self, k: usize) -> bool {
        (self.lo..=self.hi).contains(&k)
    }
}

fn f(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>, equal_aspect: bool) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |lo: f64, hi: f64| {
            let span = hi - lo;
            let p = if span > 0.0 {
                0.05 * span
            } else {
                0.5f64.max(lo.abs() * 0.05)
            };
            (lo - p, hi + p)
        };
        let (mut x, mut y) = (pad(x0, x1), pad(y0, y1));
        if equal_aspect {
            let sx = (x.1 - x.0) / (WIDTH - 2.0 * MARGIN);
            let sy = (y.1 - y.0) / (HEIGHT - 2.0 * MARGIN);
            let s = sx.max(sy);
            let cx = 0.5 * (x.0 + x.1);
            let cy = 0.5 * (y.0 + y.1);
            x = (
                cx - 0.5 * s * (WIDTH - 2.0 * MARGIN),
                cx + 0.5 * s * (WIDTH - 2.0 * MARGIN),
            );
            y = (
                cy - 0.5 * s * (HEIGHT - 2.0 * MARGIN),
                cy + 0.5 * s * (HEIGHT - 2.0 * MARGIN),
            );
        }
        Frame { x, y }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    fn pt(&self, x: f64, y: f64) -> String {
        format!("{},{}", f(self.px(x)), f(self.py(y)))
    }
}

struct Svg {
    body: String,
    frame: Frame,
}

impl Svg {
    fn new(frame: Frame, title: &str, xlabel: &str, ylabel: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
            w = WIDTH,
            h = HEIGHT
        );
        let _ = writeln!(body, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<rect class="axes" x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            f(WIDTH - 2.0 * MARGIN),
            f(HEIGHT - 2.0 * MARGIN),
            m = MARGIN
        );
        let _ = writeln!(
            body,
            r#"<text x="{}" y="30" text-anchor="middle" font-size="15">{}</text>"#,
            f(WIDTH / 2.0),
            escape(title)
        );
        let _ = writeln!(
            body,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            f(WIDTH / 2.0),
            f(HEIGHT - 15.0),
            escape(xlabel)
        );
        let _ = writeln!(
            body,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            f(HEIGHT / 2.0),
            f(HEIGHT / 2.0),
            escape(ylabel)
        );
        let mut svg = Svg { body, frame };
        svg.ticks();
        svg
    }

    fn ticks(&mut self) {
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = self.frame.x.0 + t * (self.frame.x.1 - self.frame.x.0);
            let yv = self.frame.y.0 + t * (self.frame.y.1 - self.frame.y.0);
            let (x, y) = (self.frame.px(xv), self.frame.py(yv));
            let _ = writeln!(
                self.body,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                f(x),
                f(HEIGHT - MARGIN + 16.0),
                tick(xv)
            );
            let _ = writeln!(
                self.body,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                f(MARGIN - 6.0),
                f(y + 4.0),
                tick(yv)
            );
        }
    }

    fn polyline(&mut self, class: &str, pts: &[(f64, f64)], stroke: &str, dashed: bool, width: f64) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|&(x, y)| self.frame.pt(x, y)).collect();
        let dash = if dashed { r#" stroke-dasharray="5,4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline class="{class}" points="{}" fill="none" stroke="{stroke}" stroke-width="{}"{dash}/>"#,
            coords.join(" "),
            f(width)
        );
    }

    fn circle(&mut self, class: &str, x: f64, y: f64, r: f64, fill: &str, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle class="{class}" cx="{}" cy="{}" r="{}" fill="{fill}" stroke="{stroke}"/>"#,
            f(self.frame.px(x)),
            f(self.frame.py(y)),
            f(r)
        );
    }

    fn cross(&mut self, x: f64, y: f64, color: &str) {
        let (cx, cy) = (self.frame.px(x), self.frame.py(y));
        let _ = writeln!(
            self.body,
            r#"<path class="start" d="M{} {} L{} {} M{} {} L{} {}" stroke="{color}" stroke-width="2"/>"#,
            f(cx - 5.0),
            f(cy - 5.0),
            f(cx + 5.0),
            f(cy + 5.0),
            f(cx - 5.0),
            f(cy + 5.0),
            f(cx + 5.0),
            f(cy - 5.0)
        );
    }

    fn legend(&mut self, entries: &[(&str, &str, bool)]) {
        for (i, (label, color, dashed)) in entries.iter().enumerate() {
            let y = MARGIN + 14.0 + 16.0 * i as f64;
            let x = WIDTH - MARGIN - 150.0;
            let dash = if *dashed { r#" stroke-dasharray="5,4""# } else { "" };
            let _ = writeln!(
                self.body,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{}">{}</text>"#,
                f(x),
                f(y),
                f(x + 24.0),
                f(y),
                f(x + 30.0),
                f(y + 4.0),
                escape(label)
            );
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        f(v)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn windowed(records: &[StepRecord], window: Option<Window>) -> impl Iterator<Item = &StepRecord> {
    records.iter().filter(move |r| window.is_none_or(|w| w.contains(r.k)))
}

/// Agent trajectories over the reference cloud. Reference points are drawn
/// with area proportional to their weight.
pub fn plot_trajectories(
    reference: &[(Point, f64)],
    trajectory: &[(usize, usize, Point)],
    window: Option<Window>,
) -> Result<String> {
    let rows: Vec<&(usize, usize, Point)> = trajectory
        .iter()
        .filter(|(_, k, _)| window.is_none_or(|w| w.contains(*k)))
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("trajectory is empty in the requested window"));
    }
    let frame = Frame::fit(
        reference
            .iter()
            .map(|(p, _)| (p.x, p.y))
            .chain(rows.iter().map(|(_, _, p)| (p.x, p.y))),
        true,
    );
    let mut svg = Svg::new(frame, "Agent trajectories", "x [m]", "y [m]");
    let wmax = reference.iter().map(|r| r.1).fold(0.0, f64::max);
    for (p, w) in reference {
        let r = if wmax > 0.0 { 0.6 + 1.4 * (w / wmax).sqrt() } else { 1.0 };
        svg.circle("sample", p.x, p.y, r, "#b0b0b0", "none");
    }
    let n_agents = rows.iter().map(|r| r.0).max().map_or(0, |a| a + 1);
    for a in 0..n_agents {
        let mut pts: Vec<(usize, Point)> = rows.iter().filter(|r| r.0 == a).map(|r| (r.1, r.2)).collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_by_key(|p| p.0);
        let color = COLORS[a % COLORS.len()];
        let line: Vec<(f64, f64)> = pts.iter().map(|(_, p)| (p.x, p.y)).collect();
        svg.polyline("trajectory", &line, color, false, 1.2);
        let (s, e) = (line[0], line[line.len() - 1]);
        svg.cross(s.0, s.1, "#1f3fbf");
        svg.circle("end", e.0, e.1, 5.0, "#ffd700", "black");
    }
    Ok(svg.finish())
}

/// Piecewise local distance: each step draws `W(k|k)^2` to the predicted
/// `W(k+P|k)^2` for the applied input (solid) and for the unconstrained
/// optimum (dashed).
pub fn plot_deltaw(
    records: &[StepRecord],
    agent: usize,
    relative_degree: usize,
    window: Option<Window>,
) -> Result<String> {
    let rows: Vec<&StepRecord> = windowed(records, window).filter(|r| r.agent == agent).collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "no metrics for agent {agent} in the requested window"
        )));
    }
    let p = relative_degree.max(1) as f64;
    let segs: Vec<[(f64, f64); 3]> = rows
        .iter()
        .map(|r| {
            let k0 = r.k as f64 - 1.0;
            let w0 = r.local_w * r.local_w;
            [
                (k0, w0),
                (k0 + p, w0 + r.delta_w),
                (k0 + p, w0 + r.delta_w_unconstrained),
            ]
        })
        .collect();
    let frame = Frame::fit(segs.iter().flat_map(|s| s.iter().copied()), false);
    let mut svg = Svg::new(
        frame,
        &format!("Local Wasserstein distance, agent {}", agent + 1),
        "step k",
        "W^2",
    );
    for s in &segs {
        svg.polyline("deltaw-free", &[s[0], s[2]], "#d62728", true, 1.2);
        svg.polyline("deltaw", &[s[0], s[1]], "#1f77b4", false, 1.2);
    }
    svg.legend(&[("applied input", "#1f77b4", false), ("unconstrained", "#d62728", true)]);
    Ok(svg.finish())
}

fn gains_of(r: &StepRecord) -> Option<GainTerms> {
    let m = r.d2.len();
    (m > 0 && r.d1.len() == m * m).then(|| GainTerms {
        d1: DMatrix::from_row_slice(m, m, &r.d1),
        d2: DVector::from_column_slice(&r.d2),
        d3: r.d3,
    })
}

/// Convergence ranges in input space with the applied and unconstrained
/// input sequences. Needs two-dimensional inputs.
pub fn plot_ellipses(records: &[StepRecord], agent: usize, window: Option<Window>) -> Result<String> {
    let rows: Vec<&StepRecord> = windowed(records, window).filter(|r| r.agent == agent).collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!(
            "no metrics for agent {agent} in the requested window"
        )));
    }
    if rows.iter().any(|r| r.u.len() != 2) {
        return Err(Error::Unsupported("ellipse plot needs a two-dimensional input".into()));
    }
    let ellipses: Vec<Vec<(f64, f64)>> = rows
        .iter()
        .filter_map(|r| gains_of(r))
        .filter_map(|g| convergence_ellipse(&g, ELLIPSE_POINTS).ok())
        .map(|pts| {
            let mut v: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
            v.push(v[0]);
            v
        })
        .collect();
    let applied: Vec<(f64, f64)> = rows.iter().map(|r| (r.u[0], r.u[1])).collect();
    let free: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.u_unconstrained[0], r.u_unconstrained[1]))
        .collect();
    let frame = Frame::fit(ellipses.iter().flatten().chain(&applied).chain(&free).copied(), true);
    let mut svg = Svg::new(frame, &format!("Convergence range, agent {}", agent + 1), "u1", "u2");
    for e in &ellipses {
        svg.polyline("ellipse", e, "#808080", true, 1.0);
    }
    svg.polyline("trace-unconstrained", &free, "#d62728", true, 1.6);
    svg.polyline("trace-constrained", &applied, "#1f77b4", false, 1.6);
    for &(x, y) in &applied {
        svg.circle("input", x, y, 2.5, "#1f77b4", "none");
    }
    svg.legend(&[
        ("applied input", "#1f77b4", false),
        ("unconstrained", "#d62728", true),
        ("convergence range", "#808080", true),
    ]);
    Ok(svg.finish())
}

pub fn plot_global_w(series: &[GlobalWRecord], window: Option<Window>) -> Result<String> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|g| window.is_none_or(|w| w.contains(g.k)))
        .map(|g| (g.k as f64, g.w2))
        .collect();
    if pts.is_empty() {
        return Err(Error::invalid("global-W series is empty in the requested window"));
    }
    let frame = Frame::fit(pts.iter().copied().chain([(pts[0].0, 0.0)]), false);
    let mut svg = Svg::new(frame, "Global Wasserstein distance", "step k", "W2");
    svg.polyline("globalw", &pts, "#1f77b4", false, 1.6);
    for &(x, y) in &pts {
        svg.circle("globalw-point", x, y, 2.0, "#1f77b4", "none");
    }
    Ok(svg.finish())
}
