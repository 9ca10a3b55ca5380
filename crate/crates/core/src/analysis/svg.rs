//! Hand-rolled SVG renderers. Output bytes are a pure function of the
//! input: fixed float formatting, no timestamps, stable iteration order.

use std::fs;
use std::path::Path;

use super::{AnalysisError, HeatmapGrid, LayerCurve};

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

/// Three-stop diverging colormap (blue -> near-white -> red).
fn color_for(t: f64) -> String {
    let stops = [(0x31, 0x36, 0x95), (0xf7, 0xf7, 0xf7), (0xa5, 0x00, 0x26)];
    let t = t.clamp(0.0, 1.0);
    let (a, b, local) = if t < 0.5 {
        (stops[0], stops[1], t * 2.0)
    } else {
        (stops[1], stops[2], (t - 0.5) * 2.0)
    };
    let lerp = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * local).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(a.0, b.0),
        lerp(a.1, b.1),
        lerp(a.2, b.2)
    )
}

const MISSING_FILL: &str = "#c8c8c8";
const PALETTE: [&str; 6] = [
    "#2ca02c", "#d62728", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Renders a token x layer heatmap with axis labels and a numeric scale bar.
/// `scale` is the fixed (lo, hi) color range.
pub fn render_heatmap_svg(
    grid: &HeatmapGrid,
    scale: (f64, f64),
    title: &str,
    path: &Path,
) -> Result<(), AnalysisError> {
    let (lo, hi) = scale;
    let cell_w = 34.0;
    let cell_h = 20.0;
    let left = 84.0;
    let top = 56.0;
    let bar_w = 14.0;
    let n_rows = grid.token_texts.len();
    let n_cols = grid.layers.len();
    let width = left + n_cols as f64 * cell_w + 96.0;
    let height = top + n_rows as f64 * cell_h + 28.0;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        f2(width),
        f2(height),
        f2(width),
        f2(height)
    ));
    s.push_str("<style>text{font-family:monospace;font-size:11px;fill:#222}</style>\n");
    s.push_str(&format!(
        "<rect width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
        f2(width),
        f2(height)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-size=\"13px\">{}</text>\n",
        f2(left),
        esc(title)
    ));

    // Column labels.
    for (c, layer) in grid.layers.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">L{layer}</text>\n",
            f2(left + (c as f64 + 0.5) * cell_w),
            f2(top - 6.0)
        ));
    }
    // Rows.
    for (r, text) in grid.token_texts.iter().enumerate() {
        let y = top + r as f64 * cell_h;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            f2(left - 6.0),
            f2(y + cell_h * 0.72),
            esc(&format!("{r:>2} {text}"))
        ));
        for c in 0..n_cols {
            let fill = match grid.values[r][c] {
                Some(v) => color_for((v - lo) / (hi - lo)),
                None => MISSING_FILL.to_string(),
            };
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\" stroke=\"#ffffff\" stroke-width=\"0.5\"/>\n",
                f2(left + c as f64 * cell_w),
                f2(y),
                f2(cell_w),
                f2(cell_h),
                fill
            ));
        }
    }

    // Scale bar with numeric labels.
    let bar_x = left + n_cols as f64 * cell_w + 24.0;
    let bar_h = (n_rows as f64 * cell_h).max(60.0);
    let steps = 24usize;
    for i in 0..steps {
        let t = 1.0 - i as f64 / (steps - 1) as f64;
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
            f2(bar_x),
            f2(top + i as f64 * bar_h / steps as f64),
            f2(bar_w),
            f2(bar_h / steps as f64 + 0.5),
            color_for(t)
        ));
    }
    for (frac, value) in [(0.0, hi), (0.5, lo + (hi - lo) / 2.0), (1.0, lo)] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            f2(bar_x + bar_w + 4.0),
            f2(top + frac * bar_h + 4.0),
            format!("{value:.2}")
        ));
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}

/// Renders a per-layer mean curve with a translucent +-std band.
pub fn render_curve_svg(
    curve: &LayerCurve,
    title: &str,
    y_label: &str,
    path: &Path,
) -> Result<(), AnalysisError> {
    let width = 560.0;
    let height = 360.0;
    let left = 64.0;
    let right = 20.0;
    let top = 44.0;
    let bottom = 52.0;
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;

    let n = curve.layers.len().max(1);
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for i in 0..curve.mean.len() {
        y_min = y_min.min(curve.mean[i] - curve.std[i]);
        y_max = y_max.max(curve.mean[i] + curve.std[i]);
    }
    y_min = y_min.min(0.0);
    y_max = y_max.max(0.0);
    let pad = ((y_max - y_min) * 0.08).max(1e-6);
    y_min -= pad;
    y_max += pad;

    let x_of = |i: usize| left + plot_w * i as f64 / (n.max(2) - 1) as f64;
    let y_of = |v: f64| top + plot_h * (1.0 - (v - y_min) / (y_max - y_min));

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        f2(width), f2(height), f2(width), f2(height)
    ));
    s.push_str("<style>text{font-family:monospace;font-size:11px;fill:#222}</style>\n");
    s.push_str(&format!(
        "<rect width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
        f2(width),
        f2(height)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-size=\"13px\">{}</text>\n",
        f2(left),
        esc(title)
    ));

    // Axes.
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#222\"/>\n",
        f2(left),
        f2(top),
        f2(left),
        f2(top + plot_h)
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#222\"/>\n",
        f2(left),
        f2(top + plot_h),
        f2(left + plot_w),
        f2(top + plot_h)
    ));
    // Zero line.
    if y_min < 0.0 && y_max > 0.0 {
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#bbbbbb\" stroke-dasharray=\"3,3\"/>\n",
            f2(left),
            f2(y_of(0.0)),
            f2(left + plot_w),
            f2(y_of(0.0))
        ));
    }
    // Y ticks.
    for i in 0..=4 {
        let v = y_min + (y_max - y_min) * i as f64 / 4.0;
        let y = y_of(v);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#222\"/>\n",
            f2(left - 4.0),
            f2(y),
            f2(left),
            f2(y)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            f2(left - 7.0),
            f2(y + 4.0),
            format!("{v:.2}")
        ));
    }
    // X ticks (layers).
    for (i, layer) in curve.layers.iter().enumerate() {
        let x = x_of(i);
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#222\"/>\n",
            f2(x),
            f2(top + plot_h),
            f2(x),
            f2(top + plot_h + 4.0)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{layer}</text>\n",
            f2(x),
            f2(top + plot_h + 16.0)
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">layer</text>\n",
        f2(left + plot_w / 2.0),
        f2(height - 14.0)
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>\n",
        f2(top + plot_h / 2.0),
        f2(top + plot_h / 2.0),
        esc(y_label)
    ));

    // Std band.
    if curve.mean.len() > 1 {
        let mut pts = String::new();
        for i in 0..curve.mean.len() {
            pts.push_str(&format!(
                "{},{} ",
                f2(x_of(i)),
                f2(y_of(curve.mean[i] + curve.std[i]))
            ));
        }
        for i in (0..curve.mean.len()).rev() {
            pts.push_str(&format!(
                "{},{} ",
                f2(x_of(i)),
                f2(y_of(curve.mean[i] - curve.std[i]))
            ));
        }
        s.push_str(&format!(
            "<polygon points=\"{}\" fill=\"#1f77b4\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
            pts.trim_end()
        ));
        let line: Vec<String> = (0..curve.mean.len())
            .map(|i| format!("{},{}", f2(x_of(i)), f2(y_of(curve.mean[i]))))
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n",
            line.join(" ")
        ));
    }
    for i in 0..curve.mean.len() {
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"#1f77b4\"/>\n",
            f2(x_of(i)),
            f2(y_of(curve.mean[i]))
        ));
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}

/// Renders a 2-D class-colored scatter (PCA snapshot) with a legend and an
/// annotation line (e.g. the cell's Vi and Acc).
pub fn render_scatter_svg(
    points: &[(f64, f64)],
    class_of: &[usize],
    class_names: &[String],
    annotation: &str,
    title: &str,
    path: &Path,
) -> Result<(), AnalysisError> {
    if points.is_empty() || points.len() != class_of.len() {
        return Err(AnalysisError::EmptyInput("points"));
    }
    let width = 440.0;
    let height = 440.0;
    let left = 50.0;
    let top = 56.0;
    let plot = 330.0;

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for &(x, y) in points {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let pad_x = ((x_max - x_min) * 0.08).max(1e-9);
    let pad_y = ((y_max - y_min) * 0.08).max(1e-9);
    x_min -= pad_x;
    x_max += pad_x;
    y_min -= pad_y;
    y_max += pad_y;
    let sx = |x: f64| left + plot * (x - x_min) / (x_max - x_min);
    let sy = |y: f64| top + plot * (1.0 - (y - y_min) / (y_max - y_min));

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n",
        f2(width), f2(height), f2(width), f2(height)
    ));
    s.push_str("<style>text{font-family:monospace;font-size:11px;fill:#222}</style>\n");
    s.push_str(&format!(
        "<rect width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
        f2(width),
        f2(height)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-size=\"13px\">{}</text>\n",
        f2(left),
        esc(title)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"34\">{}</text>\n",
        f2(left),
        esc(annotation)
    ));
    s.push_str(&format!(
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#222\"/>\n",
        f2(left),
        f2(top),
        f2(plot),
        f2(plot)
    ));
    for (i, &(x, y)) in points.iter().enumerate() {
        let color = PALETTE[class_of[i] % PALETTE.len()];
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.75\"/>\n",
            f2(sx(x)),
            f2(sy(y)),
            color
        ));
    }
    // Legend.
    for (k, name) in class_names.iter().enumerate() {
        let y = top + plot + 24.0 + 14.0 * k as f64;
        s.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"{}\"/>\n",
            f2(left + 6.0),
            f2(y - 4.0),
            PALETTE[k % PALETTE.len()]
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            f2(left + 16.0),
            f2(y),
            esc(name)
        ));
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::Tap;

    #[test]
    fn renderers_are_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let grid = HeatmapGrid {
            tap: Tap::Block,
            token_texts: vec!["a".into(), "<".into()],
            layers: vec![0, 1, 2],
            values: vec![
                vec![Some(0.1), Some(0.6), None],
                vec![Some(-0.05), Some(0.9), Some(0.98)],
            ],
        };
        let p1 = dir.path().join("h1.svg");
        let p2 = dir.path().join("h2.svg");
        render_heatmap_svg(&grid, (-0.1, 1.0), "test <heatmap>", &p1).unwrap();
        render_heatmap_svg(&grid, (-0.1, 1.0), "test <heatmap>", &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let body = fs::read_to_string(&p1).unwrap();
        assert!(body.contains("&lt;"), "escapes row label");
        assert!(body.contains(MISSING_FILL), "missing cell rendered grey");

        let curve = LayerCurve {
            layers: vec![0, 1, 2, 3],
            mean: vec![0.0, 0.2, 0.6, 0.9],
            std: vec![0.0, 0.05, 0.08, 0.02],
            n: 10,
        };
        let c1 = dir.path().join("c1.svg");
        let c2 = dir.path().join("c2.svg");
        render_curve_svg(&curve, "curve", "v-info (bits)", &c1).unwrap();
        render_curve_svg(&curve, "curve", "v-info (bits)", &c2).unwrap();
        assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());

        let pts = vec![(0.0, 0.0), (1.0, 1.0), (-1.0, 0.5)];
        let cls = vec![0, 1, 0];
        let names = vec!["factual".to_string(), "counterfactual".to_string()];
        let s1 = dir.path().join("s1.svg");
        let s2 = dir.path().join("s2.svg");
        render_scatter_svg(&pts, &cls, &names, "Vi=0.91 Acc=0.95", "layer 3", &s1).unwrap();
        render_scatter_svg(&pts, &cls, &names, "Vi=0.91 Acc=0.95", "layer 3", &s2).unwrap();
        assert_eq!(fs::read(&s1).unwrap(), fs::read(&s2).unwrap());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(color_for(0.0), "#313695");
        assert_eq!(color_for(1.0), "#a50026");
        assert_eq!(color_for(0.5), "#f7f7f7");
    }
}
