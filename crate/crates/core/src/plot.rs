//! Self-contained SVG figures: focus heat maps and decision boundaries for
//! two-dimensional data, quadrant dynamics and threshold curves.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::{Dataset, Split};
use crate::error::{Result, SdcError};
use crate::fcam::FcamModel;
use crate::par::Execution;
use crate::training::DynamicsLog;

/// Cells per side of spatial grids.
pub const GRID_CELLS: usize = 200;

/// Fraction of the data extent added on every side of spatial plots.
pub const GRID_PADDING: f64 = 0.1;

/// Instances drawn in scatter overlays.
const SCATTER_LIMIT: usize = 400;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const BACKGROUND_COLOR: &str = "#7f7f7f";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlotKind {
    FocusHeatmap,
    DecisionBoundary,
    Dynamics,
    Threshold,
}

impl PlotKind {
    pub const ALL: [PlotKind; 4] = [
        PlotKind::FocusHeatmap,
        PlotKind::DecisionBoundary,
        PlotKind::Dynamics,
        PlotKind::Threshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::FocusHeatmap => "focus-heatmap",
            PlotKind::DecisionBoundary => "decision-boundary",
            PlotKind::Dynamics => "dynamics",
            PlotKind::Threshold => "threshold",
        }
    }

    /// Kinds drawn over the input plane.
    pub fn is_spatial(self) -> bool {
        matches!(self, PlotKind::FocusHeatmap | PlotKind::DecisionBoundary)
    }
}

impl fmt::Display for PlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotKind {
    type Err = SdcError;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = PlotKind::ALL.iter().map(|k| k.name()).collect();
            SdcError::UnsupportedPlot(format!("unknown plot kind {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Axis-aligned data window mapped onto the plot area.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Frame {
    /// Bounding box of `points` widened by [`GRID_PADDING`] on every side.
    pub fn padded(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = (f64::INFINITY, f64::NEG_INFINITY);
        for (px, py) in points {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let pad = |(lo, hi): (f64, f64)| {
            if !lo.is_finite() {
                return (-1.0, 1.0);
            }
            let span = (hi - lo).max(1e-9);
            (lo - GRID_PADDING * span, hi + GRID_PADDING * span)
        };
        Frame { x: pad(x), y: pad(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }

    /// Centers of a `cells x cells` grid, row-major from the top row.
    pub fn grid_centers(&self, cells: usize) -> Vec<(f64, f64)> {
        let dx = (self.x.1 - self.x.0) / cells as f64;
        let dy = (self.y.1 - self.y.0) / cells as f64;
        (0..cells * cells)
            .map(|i| {
                let (r, c) = (i / cells, i % cells);
                (self.x.0 + (c as f64 + 0.5) * dx, self.y.1 - (r as f64 + 0.5) * dy)
            })
            .collect()
    }
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(body, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        Svg { body }
    }

    fn axes(&mut self, frame: &Frame, xlabel: &str, ylabel: &str) {
        let (x0, x1) = (frame.px(frame.x.0), frame.px(frame.x.1));
        let (y0, y1) = (frame.py(frame.y.0), frame.py(frame.y.1));
        let _ = writeln!(
            self.body,
            r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
            x1 - x0,
            y0 - y1
        );
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let xv = frame.x.0 + t * (frame.x.1 - frame.x.0);
            let yv = frame.y.0 + t * (frame.y.1 - frame.y.0);
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                frame.px(xv),
                y0 + 16.0,
                tick(xv)
            );
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                frame.py(yv) + 4.0,
                tick(yv)
            );
        }
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            self.body,
            r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(ylabel)
        );
    }

    /// Row-major cell colors; horizontal runs of one color become one rect.
    fn cells(&mut self, frame: &Frame, cells: usize, colors: &[String]) {
        let w = (frame.px(frame.x.1) - frame.px(frame.x.0)) / cells as f64;
        let h = (frame.py(frame.y.0) - frame.py(frame.y.1)) / cells as f64;
        let (left, top) = (frame.px(frame.x.0), frame.py(frame.y.1));
        for r in 0..cells {
            let row = &colors[r * cells..(r + 1) * cells];
            let mut c = 0;
            while c < cells {
                let run = row[c..].iter().take_while(|v| **v == row[c]).count();
                let _ = writeln!(
                    self.body,
                    r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}" shape-rendering="crispEdges"/>"#,
                    left + c as f64 * w,
                    top + r as f64 * h,
                    run as f64 * w + 0.05,
                    h + 0.05,
                    row[c]
                );
                c += run;
            }
        }
    }

    fn point(&mut self, frame: &Frame, (x, y): (f64, f64), color: &str) {
        let _ = writeln!(
            self.body,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}" stroke="#000" stroke-width="0.3"/>"##,
            frame.px(x),
            frame.py(y)
        );
    }

    fn polyline(&mut self, frame: &Frame, points: &[(f64, f64)], color: &str, label: &str) {
        let coords: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline data-series="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            escape(label),
            coords.join(" ")
        );
    }

    fn legend(&mut self, entries: &[(String, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = MARGIN + 8.0 + 16.0 * i as f64;
            let x = WIDTH - MARGIN + 6.0;
            let _ = writeln!(
                self.body,
                r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{color}"/>"#,
                y - 9.0
            );
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{y:.2}" font-size="10">{}</text>"#,
                x + 13.0,
                escape(label)
            );
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// Blue through white to red for `t` in `[0, 1]`, quantized to 64 levels.
fn diverging(t: f64) -> String {
    let t = (t.clamp(0.0, 1.0) * 63.0).round() / 63.0;
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (59.0 + u * 196.0, 76.0 + u * 179.0, 192.0 + u * 63.0)
    } else {
        let u = (t - 0.5) / 0.5;
        (255.0 - u * 75.0, 255.0 - u * 251.0, 255.0 - u * 217.0)
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

fn lighten(hex: &str) -> String {
    let v = u32::from_str_radix(&hex[1..], 16).unwrap_or(0);
    let mix = |c: u32| (c + 2 * 255) / 3;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(v >> 16 & 0xff),
        mix(v >> 8 & 0xff),
        mix(v & 0xff)
    )
}

fn class_color(c: usize) -> &'static str {
    PALETTE[c % PALETTE.len()]
}

fn require_plane(model: &FcamModel, dataset: &Dataset, kind: PlotKind) -> Result<()> {
    if dataset.dims().d != 2 || model.segment_dim() != 2 {
        return Err(SdcError::UnsupportedPlot(format!(
            "{kind} needs two-dimensional segments, got d={}",
            dataset.dims().d
        )));
    }
    Ok(())
}

/// Base points for the scatter overlay: `(point, Some(class))` for
/// foreground segments, `(point, None)` for background.
fn base_points(dataset: &Dataset) -> Vec<((f64, f64), Option<usize>)> {
    let view = dataset.eval_view(Split::All);
    let mut out = Vec::new();
    for s in view.iter().take(SCATTER_LIMIT) {
        for (j, seg) in s.segments.chunks(2).enumerate() {
            let class = (j == s.fg_index).then_some(s.label);
            out.push(((seg[0], seg[1]), class));
        }
    }
    out
}

/// Focus scores over a grid around the data, with base points on top.
pub fn focus_heatmap(model: &FcamModel, dataset: &Dataset) -> Result<String> {
    require_plane(model, dataset, PlotKind::FocusHeatmap)?;
    let points = base_points(dataset);
    let frame = Frame::padded(points.iter().map(|(p, _)| *p));
    let grid: Vec<f64> = frame.grid_centers(GRID_CELLS).iter().flat_map(|(x, y)| [*x, *y]).collect();
    let scores = model.focus_scores(&grid)?;
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = hi - lo;
    let colors: Vec<String> = scores
        .iter()
        .map(|v| diverging(if span > 1e-12 { (v - lo) / span } else { 0.5 }))
        .collect();

    let mut svg = Svg::new(&format!("focus scores (min {lo:.3}, max {hi:.3})"));
    svg.cells(&frame, GRID_CELLS, &colors);
    for (p, class) in points.iter().filter(|(_, c)| c.is_none()) {
        svg.point(&frame, *p, class.map_or(BACKGROUND_COLOR, class_color));
    }
    for (p, class) in points.iter().filter(|(_, c)| c.is_some()) {
        svg.point(&frame, *p, class.map_or(BACKGROUND_COLOR, class_color));
    }
    svg.axes(&frame, "x1", "x2");
    let mut legend = vec![("background".to_string(), BACKGROUND_COLOR)];
    legend.extend((0..dataset.dims().k).map(|c| (format!("class {c}"), class_color(c))));
    svg.legend(&legend);
    Ok(svg.finish())
}

/// Classifier regions over a grid with the attended inputs on top. Needs
/// averaging at the input layer so that attended inputs live in the plane.
pub fn decision_boundary(model: &FcamModel, dataset: &Dataset) -> Result<String> {
    require_plane(model, dataset, PlotKind::DecisionBoundary)?;
    if model.config().averaging_layer != 0 {
        return Err(SdcError::UnsupportedPlot(format!(
            "decision-boundary needs averaging at layer 0, model averages at layer {}",
            model.config().averaging_layer
        )));
    }
    let view = dataset.eval_view(Split::All);
    let samples: Vec<_> = view.iter().take(SCATTER_LIMIT).collect();
    let segments: Vec<&[f64]> = samples.iter().map(|s| s.segments).collect();
    let inferences = model.infer_many(&segments, Execution::Parallel)?;
    let attended: Vec<((f64, f64), usize)> = samples
        .iter()
        .zip(&inferences)
        .map(|(s, inf)| {
            let (mut x, mut y) = (0.0, 0.0);
            for (a, seg) in inf.alpha.iter().zip(s.segments.chunks(2)) {
                x += a * seg[0];
                y += a * seg[1];
            }
            ((x, y), s.label)
        })
        .collect();
    let frame = Frame::padded(attended.iter().map(|(p, _)| *p));
    let colors = frame
        .grid_centers(GRID_CELLS)
        .iter()
        .map(|(x, y)| {
            let probs = model.classify_feature(&[*x, *y])?;
            Ok(lighten(class_color(crate::attention::hard_select(&probs))))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut svg = Svg::new("classifier regions and attended inputs");
    svg.cells(&frame, GRID_CELLS, &colors);
    for (p, label) in &attended {
        svg.point(&frame, *p, class_color(*label));
    }
    svg.axes(&frame, "attended x1", "attended x2");
    let legend: Vec<_> = (0..dataset.dims().k).map(|c| (format!("class {c}"), class_color(c))).collect();
    svg.legend(&legend);
    Ok(svg.finish())
}

/// Quadrant fractions against epoch.
pub fn dynamics(log: &DynamicsLog) -> Result<String> {
    if log.records.is_empty() {
        return Err(SdcError::UnsupportedPlot("dynamics log has no records".into()));
    }
    let last = log.records.last().map_or(1, |r| r.epoch);
    let first = log.records[0].epoch.min(last);
    let frame = Frame {
        x: (first as f64, (last as f64).max(first as f64 + 1.0)),
        y: (0.0, 1.0),
    };
    let mut svg = Svg::new("focus / prediction quadrants");
    type Pick = fn(&crate::training::DynamicsRecord) -> f64;
    let series: [(&str, Pick, &str); 4] = [
        ("FTPT", |r| r.ftpt, PALETTE[2]),
        ("FFPT", |r| r.ffpt, PALETTE[1]),
        ("FTPF", |r| r.ftpf, PALETTE[0]),
        ("FFPF", |r| r.ffpf, PALETTE[3]),
    ];
    for (name, pick, color) in series {
        let points: Vec<(f64, f64)> = log.records.iter().map(|r| (r.epoch as f64, pick(r))).collect();
        svg.polyline(&frame, &points, color, name);
    }
    svg.axes(&frame, "epoch", "fraction of instances");
    svg.legend(&series.map(|(n, _, c)| (n.to_string(), c)));
    Ok(svg.finish())
}

/// Fraction of instances with foreground weight above each threshold, one
/// curve per variant.
pub fn threshold(grid: &[f64], curves: &[(String, Vec<f64>)]) -> Result<String> {
    if grid.is_empty() || curves.iter().any(|(_, c)| c.len() != grid.len()) {
        return Err(SdcError::UnsupportedPlot("threshold curves do not match their grid".into()));
    }
    let frame = Frame {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    let mut svg = Svg::new("foreground weight above threshold");
    let mut legend = Vec::new();
    for (i, (name, curve)) in curves.iter().enumerate() {
        let points: Vec<(f64, f64)> = grid.iter().copied().zip(curve.iter().copied()).collect();
        svg.polyline(&frame, &points, class_color(i), name);
        legend.push((name.clone(), class_color(i)));
    }
    svg.axes(&frame, "threshold", "fraction of instances");
    svg.legend(&legend);
    Ok(svg.finish())
}
