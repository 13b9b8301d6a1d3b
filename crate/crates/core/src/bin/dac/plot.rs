//! Self-contained SVG curve plots and grayscale heatmap encoding. The SVG
//! output is pure geometry and text — no scripts, styles, or external assets.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, Context, Result};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const PLOT_LEFT: f64 = 70.0;
const PLOT_RIGHT: f64 = 735.0;
const PLOT_TOP: f64 = 20.0;
const PLOT_BOTTOM: f64 = 425.0;

pub struct Series {
    pub label: String,
    pub color: &'static str,
    /// SVG stroke-dasharray; empty for a solid line.
    pub dash: &'static str,
    pub points: Vec<(f64, f64)>,
}

/// Stable per-method line colors: each standard/discriminative pairing
/// shares a hue (light = standard, dark = discriminative); baselines are gray.
pub fn method_color(name: &str) -> &'static str {
    match name {
        "ingrads" => "#9ecae1",
        "d-ingrads" => "#1f77b4",
        "ig" => "#a1d99b",
        "d-ig" => "#2ca02c",
        "dl" => "#fdae6b",
        "d-dl" => "#e6550d",
        "gc" => "#bcbddc",
        "d-gc" => "#756bb1",
        "ggc" => "#f7b6d2",
        "d-ggc" => "#e377c2",
        "residual" => "#525252",
        "random" => "#969696",
        _ => "#000000",
    }
}

/// Dash patterns cycled per dataset when several runs share one plot.
pub const DASHES: [&str; 4] = ["", "7,4", "2,3", "9,3,2,3"];

/// Render mean Δf-vs-mask-fraction curves. The x domain is [0,1]; the y
/// domain spans the data and always includes zero.
pub fn curve_svg(title: &str, series: &[Series]) -> String {
    let mut y_min = 0.0f64;
    let mut y_max = 0.0f64;
    for s in series {
        for &(_, y) in &s.points {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if y_max - y_min < 1e-12 {
        y_max += 1.0;
        y_min -= 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    y_min -= pad;
    y_max += pad;

    let sx = |x: f64| PLOT_LEFT + x * (PLOT_RIGHT - PLOT_LEFT);
    let sy = |y: f64| PLOT_BOTTOM - (y - y_min) / (y_max - y_min) * (PLOT_BOTTOM - PLOT_TOP);

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = write!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n");
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"14\" font-size=\"13\">{}</text>\n",
        PLOT_LEFT,
        escape(title)
    );

    // Axes.
    let _ = write!(
        svg,
        "<line x1=\"{l:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n\
         <line x1=\"{l:.2}\" y1=\"{t:.2}\" x2=\"{l:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n",
        l = PLOT_LEFT,
        r = PLOT_RIGHT,
        t = PLOT_TOP,
        b = PLOT_BOTTOM
    );
    for i in 0..=4 {
        let x = i as f64 / 4.0;
        let px = sx(x);
        let _ = write!(
            svg,
            "<line x1=\"{px:.2}\" y1=\"{b:.2}\" x2=\"{px:.2}\" y2=\"{b2:.2}\" stroke=\"black\"/>\n\
             <text x=\"{px:.2}\" y=\"{ty:.2}\" text-anchor=\"middle\">{x}</text>\n",
            b = PLOT_BOTTOM,
            b2 = PLOT_BOTTOM + 5.0,
            ty = PLOT_BOTTOM + 19.0
        );
    }
    for i in 0..=4 {
        let y = y_min + (y_max - y_min) * i as f64 / 4.0;
        let py = sy(y);
        let _ = write!(
            svg,
            "<line x1=\"{l2:.2}\" y1=\"{py:.2}\" x2=\"{l:.2}\" y2=\"{py:.2}\" stroke=\"black\"/>\n\
             <text x=\"{tx:.2}\" y=\"{ty:.2}\" text-anchor=\"end\">{y:.3}</text>\n",
            l = PLOT_LEFT,
            l2 = PLOT_LEFT - 5.0,
            tx = PLOT_LEFT - 8.0,
            ty = py + 4.0
        );
    }
    // Zero line for orientation when the domain crosses it.
    if y_min < 0.0 && y_max > 0.0 {
        let py = sy(0.0);
        let _ = write!(
            svg,
            "<line x1=\"{l:.2}\" y1=\"{py:.2}\" x2=\"{r:.2}\" y2=\"{py:.2}\" \
             stroke=\"#cccccc\" stroke-dasharray=\"3,3\"/>\n",
            l = PLOT_LEFT,
            r = PLOT_RIGHT
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{mx:.2}\" y=\"{my:.2}\" text-anchor=\"middle\">mask fraction</text>\n\
         <text x=\"16\" y=\"{cy:.2}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {cy:.2})\">mean delta_f</text>\n",
        mx = (PLOT_LEFT + PLOT_RIGHT) / 2.0,
        my = HEIGHT - 6.0,
        cy = (PLOT_TOP + PLOT_BOTTOM) / 2.0
    );

    for s in series {
        let mut pts = String::new();
        for &(x, y) in &s.points {
            let _ = write!(pts, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let dash = if s.dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{}\"", s.dash)
        };
        let _ = write!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"{}/>\n",
            pts.trim_end(),
            s.color,
            dash
        );
    }

    // Legend, top-right inside the plot area.
    for (i, s) in series.iter().enumerate() {
        let y = PLOT_TOP + 14.0 + 16.0 * i as f64;
        let dash = if s.dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{}\"", s.dash)
        };
        let _ = write!(
            svg,
            "<line x1=\"{x1:.2}\" y1=\"{y:.2}\" x2=\"{x2:.2}\" y2=\"{y:.2}\" \
             stroke=\"{c}\" stroke-width=\"2\"{dash}/>\n\
             <text x=\"{tx:.2}\" y=\"{ty:.2}\">{label}</text>\n",
            x1 = PLOT_RIGHT - 150.0,
            x2 = PLOT_RIGHT - 122.0,
            c = s.color,
            tx = PLOT_RIGHT - 116.0,
            ty = y + 4.0,
            label = escape(&s.label)
        );
    }

    svg.push_str("</svg>\n");
    svg
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Map a signed value field to 8-bit gray: zero -> mid-gray 128, +max -> 255,
/// -max -> 0. A uniformly zero field renders flat mid-gray.
pub fn heatmap_bytes(data: &[f64]) -> Vec<u8> {
    let max_abs = data.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    data.iter()
        .map(|&v| {
            let g = if max_abs == 0.0 { 127.5 } else { 127.5 + 127.5 * v / max_abs };
            g.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

pub fn write_heatmap_png(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    assert_eq!(data.len(), h * w, "heatmap data does not match {h}x{w}");
    let img = image::GrayImage::from_raw(w as u32, h as u32, heatmap_bytes(data))
        .ok_or_else(|| anyhow!("heatmap buffer does not fill {w}x{h}"))?;
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
