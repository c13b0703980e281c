//! Standalone SVG bar charts of (label, metric) pairs.

use crate::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Smallest "nice" value (1, 2 or 5 times a power of ten) at or above `v`.
fn nice_ceiling(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if m * p >= v {
            return m * p;
        }
    }
    10.0 * p
}

/// One `<rect class="bar">` per point, in input order, plus axis and labels.
/// Negative values are drawn as empty bars at the baseline.
pub fn bar_chart(points: &[(String, f64)], title: &str, metric: &str) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Config("plot needs at least one point".into()));
    }
    if let Some((l, _)) = points.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite value for {l:?}")));
    }
    let max = nice_ceiling(points.iter().map(|p| p.1).fold(0.0, f64::max));
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let slot = plot_w / points.len() as f64;
    let bar_w = slot * 0.7;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" data-axis-max=\"{max}\">\n"
    );
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        WIDTH / 2.0,
        MARGIN / 2.0,
        escape(title)
    ));
    let base = HEIGHT - MARGIN;
    svg.push_str(&format!(
        "<line x1=\"{MARGIN}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{base}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{max}</text>\n\
         <text x=\"12\" y=\"{}\" font-size=\"11\" transform=\"rotate(-90 12 {})\">{}</text>\n",
        WIDTH - MARGIN,
        MARGIN - 4.0,
        MARGIN + 4.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(metric)
    ));
    for (i, (label, value)) in points.iter().enumerate() {
        let h = value.max(0.0) / max * plot_h;
        let x = MARGIN + i as f64 * slot + (slot - bar_w) / 2.0;
        svg.push_str(&format!(
            "<rect class=\"bar\" x=\"{x:.3}\" y=\"{:.3}\" width=\"{bar_w:.3}\" height=\"{h:.3}\" fill=\"#4a7ab5\" data-value=\"{value}\"/>\n",
            base - h
        ));
        svg.push_str(&format!(
            "<text x=\"{:.3}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
            x + bar_w / 2.0,
            base + 14.0,
            escape(label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Number of data elements in an emitted chart.
pub fn count_bars(svg: &str) -> usize {
    svg.matches("<rect class=\"bar\"").count()
}
