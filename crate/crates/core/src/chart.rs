//! Static SVG line charts for the tracked training dynamics. One chart per
//! metric, written natively — no renderer dependency.

use crate::error::Result;
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 44.0;

const SERIES_COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Render a line chart to an SVG file. Series with no finite points are
/// skipped; an all-empty chart still renders axes.
pub fn line_chart(path: &Path, title: &str, x_label: &str, series: &[Series]) -> Result<()> {
    let mut pts: Vec<&(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (x_min, x_max) = match (pts.first(), pts.last()) {
        (Some(lo), Some(hi)) if hi.0 > lo.0 => (lo.0, hi.0),
        (Some(lo), _) => (lo.0 - 0.5, lo.0 + 0.5),
        _ => (0.0, 1.0),
    };
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for &&(_, y) in &pts {
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if y_max - y_min < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_T + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = write!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        svg,
        r#"<text x="{}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );

    // gridlines and tick labels
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let y = y_min + t * (y_max - y_min);
        let py = sy(y);
        let _ = write!(
            svg,
            r##"<line x1="{MARGIN_L}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#dddddd" stroke-width="1"/>"##,
            WIDTH - MARGIN_R
        );
        let _ = write!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            MARGIN_L - 6.0,
            py + 4.0,
            format_tick(y)
        );
        let x = x_min + t * (x_max - x_min);
        let px = sx(x);
        let _ = write!(
            svg,
            r#"<text x="{px:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN_B + 18.0,
            format_tick(x)
        );
    }
    // axes
    let _ = write!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{:.1}" stroke="black"/>"#,
        HEIGHT - MARGIN_B
    );
    let _ = write!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    );

    for (i, s) in series.iter().enumerate() {
        let finite: Vec<(f64, f64)> =
            s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        if finite.is_empty() {
            continue;
        }
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let path_points: Vec<String> =
            finite.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            path_points.join(" ")
        );
        // legend
        let ly = MARGIN_T + 14.0 * i as f64;
        let _ = write!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="3" fill="{color}"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            WIDTH - MARGIN_R - 130.0,
            ly,
            WIDTH - MARGIN_R - 115.0,
            ly + 5.0,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, svg)?;
    Ok(())
}

fn format_tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e4 || (a > 0.0 && a < 1e-2) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Emit one SVG per metric from a metric log, keyed by metric name.
pub fn charts_from_records(
    dir: &Path,
    records: &[crate::metrics::MetricsRecord],
) -> Result<Vec<std::path::PathBuf>> {
    let steps: Vec<f64> = records.iter().map(|r| r.step as f64).collect();
    let mut written = Vec::new();

    let mut emit = |name: &str, series: Vec<Series>| -> Result<()> {
        if series.iter().all(|s| s.points.is_empty()) {
            return Ok(());
        }
        let path = dir.join(format!("{name}.svg"));
        line_chart(&path, name, "step", &series)?;
        written.push(path);
        Ok(())
    };

    let opt_series = |name: &'static str, f: &dyn Fn(&crate::metrics::MetricsRecord) -> Option<f64>| -> Series<'static> {
        Series {
            name,
            points: records
                .iter()
                .zip(&steps)
                .filter_map(|(r, &s)| f(r).map(|v| (s, v)))
                .collect(),
        }
    };

    emit(
        "risks",
        vec![
            opt_series("backcopy_risk", &|r| r.backcopy_risk),
            opt_series("bigram_excess_risk", &|r| r.bigram_risk),
        ],
    )?;
    emit("attn_sink", vec![opt_series("attn_sink", &|r| Some(r.attn_sink))])?;
    emit("val_norm_sink", vec![opt_series("val_norm_sink", &|r| Some(r.val_norm_sink))])?;
    emit(
        "delta_logit_sink",
        vec![opt_series("delta_logit_sink", &|r| Some(r.delta_logit_sink))],
    )?;
    emit("mean_gate_sink", vec![opt_series("mean_gate_sink", &|r| r.mean_gate_sink)])?;
    emit("perplexity", vec![opt_series("perplexity", &|r| r.perplexity)])?;
    emit("max_io_norm", vec![opt_series("max_io_norm", &|r| r.max_io_norm)])?;
    emit("avg_kurtosis", vec![opt_series("avg_kurtosis", &|r| r.avg_kurtosis)])?;
    emit(
        "residual_norm_sink",
        vec![opt_series("residual_norm_sink", &|r| r.residual_norm_sink)],
    )?;
    Ok(written)
}
