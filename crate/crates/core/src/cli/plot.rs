//! Static SVG figures.

use plotters::coord::ranged1d::{AsRangedCoord, ValueFormatter};
use plotters::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    EmptySeries,
    #[error("non-finite value in series {0}")]
    NonFinite(String),
    #[error("drawing failed: {0}")]
    Draw(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    LambdaVsEps,
    ResidualLoglog,
    KappaProfile,
    PhiDensity,
}

impl PlotKind {
    pub fn file_name(&self) -> &'static str {
        match self {
            PlotKind::LambdaVsEps => "lambda_vs_eps.svg",
            PlotKind::ResidualLoglog => "residual_loglog.svg",
            PlotKind::KappaProfile => "kappa_profile.svg",
            PlotKind::PhiDensity => "phi_density.svg",
        }
    }

    fn labels(&self) -> (&'static str, &'static str, &'static str) {
        match self {
            PlotKind::LambdaVsEps => (
                "Top Lyapunov exponent",
                "epsilon",
                "lambda (1/rescaled time)",
            ),
            PlotKind::ResidualLoglog => (
                "Remainder of the expansion",
                "epsilon",
                "|lambda_mc - lambda_asym| (1/rescaled time)",
            ),
            PlotKind::KappaProfile => ("Phase density correction", "phi (rad)", "kappa"),
            PlotKind::PhiDensity => ("Phase density", "phi (rad)", "density (1/rad)"),
        }
    }
}

/// How a series is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Markers,
    Line,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub style: Style,
    /// `(x, y, stderr)`.
    pub points: Vec<(f64, f64, Option<f64>)>,
}

impl Series {
    pub fn markers(label: &str, points: Vec<(f64, f64, Option<f64>)>) -> Self {
        Self {
            label: label.to_string(),
            style: Style::Markers,
            points,
        }
    }

    pub fn line(label: &str, xy: impl IntoIterator<Item = (f64, f64)>) -> Self {
        Self {
            label: label.to_string(),
            style: Style::Line,
            points: xy.into_iter().map(|(x, y)| (x, y, None)).collect(),
        }
    }
}

const WIDTH: u32 = 720;
const HEIGHT: u32 = 480;
const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
];

/// Range with a margin; degenerate ranges are widened so one point still
/// gets finite axes.
fn linear_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        (lo - pad, hi + pad)
    }
}

fn log_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo / 1.3, hi * 1.3)
    } else {
        (lo / 2.0, hi * 2.0)
    }
}

/// Log axes when every value is positive and the span reaches two decades.
fn wants_log(values: &[f64]) -> bool {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    lo > 0.0 && hi / lo >= 100.0
}

/// Renders `series` as a self-contained SVG document.
pub fn emit_plot(series: &[Series], kind: PlotKind) -> Result<String, PlotError> {
    let total: usize = series.iter().map(|s| s.points.len()).sum();
    if total == 0 {
        return Err(PlotError::EmptySeries);
    }
    for s in series {
        if s.points.iter().any(|(x, y, e)| !x.is_finite() || !y.is_finite() || e.is_some_and(|e| !e.is_finite())) {
            return Err(PlotError::NonFinite(s.label.clone()));
        }
    }
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(_, y, e) in &s.points {
            ys.push(y);
            if let Some(e) = e {
                ys.push(y - e);
                ys.push(y + e);
            }
        }
    }
    let log_x = kind == PlotKind::ResidualLoglog || wants_log(&xs);
    let log_y = kind == PlotKind::ResidualLoglog || wants_log(&ys);
    let (log_x, log_y) = (log_x && xs.iter().all(|v| *v > 0.0), log_y && ys.iter().all(|v| *v > 0.0));
    let bounds = |v: &[f64], log: bool| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if log {
            log_range(lo, hi)
        } else {
            linear_range(lo, hi)
        }
    };
    let (x0, x1) = bounds(&xs, log_x);
    let (y0, y1) = bounds(&ys, log_y);
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (WIDTH, HEIGHT)).into_drawing_area();
        match (log_x, log_y) {
            (false, false) => draw(&root, series, kind, x0..x1, y0..y1),
            (true, false) => draw(&root, series, kind, (x0..x1).log_scale(), y0..y1),
            (false, true) => draw(&root, series, kind, x0..x1, (y0..y1).log_scale()),
            (true, true) => draw(&root, series, kind, (x0..x1).log_scale(), (y0..y1).log_scale()),
        }?;
        root.present().map_err(|e| PlotError::Draw(e.to_string()))?;
    }
    Ok(out)
}

fn draw<DB, X, Y>(
    root: &DrawingArea<DB, plotters::coord::Shift>,
    series: &[Series],
    kind: PlotKind,
    x: X,
    y: Y,
) -> Result<(), PlotError>
where
    DB: DrawingBackend,
    X: AsRangedCoord<Value = f64>,
    Y: AsRangedCoord<Value = f64>,
    X::CoordDescType: ValueFormatter<f64>,
    Y::CoordDescType: ValueFormatter<f64>,
{
    let err = |e: &dyn std::fmt::Display| PlotError::Draw(e.to_string());
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let (title, xl, yl) = kind.labels();
    let mut chart = ChartBuilder::on(root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(80)
        .build_cartesian_2d(x, y)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc(xl)
        .y_desc(yl)
        .x_label_formatter(&|v| format!("{v:.3}"))
        .y_label_formatter(&|v| format!("{v:.3e}"))
        .draw()
        .map_err(|e| err(&e))?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        match s.style {
            Style::Line => {
                chart
                    .draw_series(LineSeries::new(s.points.iter().map(|p| (p.0, p.1)), color.stroke_width(2)))
                    .map_err(|e| err(&e))?
                    .label(s.label.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
            }
            Style::Markers => {
                chart
                    .draw_series(
                        s.points
                            .iter()
                            .filter_map(|&(x, y, e)| e.map(|e| ErrorBar::new_vertical(x, y - e, y, y + e, color, 8))),
                    )
                    .map_err(|e| err(&e))?;
                chart
                    .draw_series(s.points.iter().map(|&(x, y, _)| Circle::new((x, y), 4, color.filled())))
                    .map_err(|e| err(&e))?
                    .label(s.label.clone())
                    .legend(move |(x, y)| Circle::new((x + 10, y), 4, color.filled()));
            }
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_series_is_rejected() {
        assert!(matches!(emit_plot(&[], PlotKind::LambdaVsEps), Err(PlotError::EmptySeries)));
        let s = Series::markers("x", vec![]);
        assert!(matches!(emit_plot(&[s], PlotKind::LambdaVsEps), Err(PlotError::EmptySeries)));
    }

    #[test]
    fn single_point_has_finite_axes() {
        let s = Series::markers("mc", vec![(0.1, -0.2, Some(1e-3))]);
        let svg = emit_plot(&[s], PlotKind::LambdaVsEps).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        assert!(svg.contains("1/rescaled time"));
    }

    #[test]
    fn wide_ranges_switch_to_log_axes() {
        assert!(wants_log(&[1e-7, 1e-4]));
        assert!(!wants_log(&[1.0, 2.0]));
        assert!(!wants_log(&[-1.0, 1e3]));
    }

    #[test]
    fn output_is_deterministic() {
        let s = vec![
            Series::markers("mc", vec![(0.05, 3e-7, Some(2e-8)), (0.2, 8e-5, Some(1e-7))]),
            Series::line("fit", [(0.05, 3e-7), (0.2, 8e-5)]),
        ];
        let a = emit_plot(&s, PlotKind::ResidualLoglog).unwrap();
        let b = emit_plot(&s, PlotKind::ResidualLoglog).unwrap();
        assert_eq!(a, b);
    }
}
