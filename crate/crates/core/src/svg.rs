//! Plain SVG charts: heatmaps, bar charts and line charts.

use std::fmt::Write;

const VIRIDIS: [(f64, f64, f64); 5] = [
    (68.0, 1.0, 84.0),
    (59.0, 82.0, 139.0),
    (33.0, 145.0, 140.0),
    (94.0, 201.0, 98.0),
    (253.0, 231.0, 37.0),
];

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Colour of `t` in `[0, 1]` on a viridis-like ramp.
pub fn ramp(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    let mix = |u: f64, v: f64| (u + f * (v - u)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Log-scale colour of `|value|` between `log10` limits `lo..hi`.
pub fn log_color(value: f64, lo: f64, hi: f64) -> String {
    let l = value.abs().log10();
    let t = if hi > lo { (l - lo) / (hi - lo) } else { 1.0 };
    ramp(t)
}

/// `log10` range of the non-zero finite magnitudes, or `None` if there are none.
pub fn log_range(values: impl IntoIterator<Item = f64>) -> Option<(f64, f64)> {
    let mut r: Option<(f64, f64)> = None;
    for v in values {
        let a = v.abs();
        if a > 0.0 && a.is_finite() {
            let l = a.log10();
            r = Some(match r {
                Some((lo, hi)) => (lo.min(l), hi.max(l)),
                None => (l, l),
            });
        }
    }
    r
}

fn header(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
}

/// Lower-triangular heatmap of `matrix[row][col]` for `col < row`; rows are the
/// evaluated generation, columns the ablated one. Cells carry their value in
/// `data-value`; negative values get a dashed outline.
pub fn heatmap(matrix: &[Vec<f64>], title: &str, row_label: &str, col_label: &str) -> String {
    let n = matrix.len();
    let cell = 36.0;
    let (left, top) = (60.0, 40.0);
    let legend_w = 90.0;
    let w = left + cell * n as f64 + legend_w + 20.0;
    let h = top + cell * n as f64 + 50.0;
    let cells = matrix
        .iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().take(r).copied());
    let (lo, hi) = log_range(cells).unwrap_or((0.0, 0.0));
    let mut out = String::new();
    header(&mut out, w, h, title);
    for (r, row) in matrix.iter().enumerate() {
        for (c, v) in row.iter().enumerate().take(r) {
            let x = left + c as f64 * cell;
            let y = top + r as f64 * cell;
            let fill = if *v == 0.0 || !v.is_finite() {
                "#eeeeee".to_string()
            } else {
                log_color(*v, lo, hi)
            };
            let dash = if *v < 0.0 {
                r#" stroke="black" stroke-dasharray="3,2""#
            } else {
                r#" stroke="white""#
            };
            let _ = writeln!(
                out,
                r#"<rect class="cell" x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}"{dash} data-row="{r}" data-col="{c}" data-value="{v}"/>"#
            );
        }
    }
    for i in 0..n {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{i}</text>"#,
            left - 6.0,
            top + (i as f64 + 0.6) * cell
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{i}</text>"#,
            left + (i as f64 + 0.5) * cell,
            top + n as f64 * cell + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + n as f64 * cell / 2.0,
        top + n as f64 * cell + 36.0,
        escape(col_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + n as f64 * cell / 2.0,
        top + n as f64 * cell / 2.0,
        escape(row_label)
    );
    // legend
    let lx = left + n as f64 * cell + 20.0;
    let steps = 20;
    let lh = (n as f64 * cell).max(100.0);
    for s in 0..steps {
        let t = 1.0 - s as f64 / (steps - 1) as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{}" width="16" height="{}" fill="{}"/>"#,
            top + s as f64 * lh / steps as f64,
            lh / steps as f64 + 0.5,
            ramp(t)
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}">1e{hi:.1}</text>"#, lx + 20.0, top + 10.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}">1e{lo:.1}</text>"#, lx + 20.0, top + lh);
    out.push_str("</svg>\n");
    out
}

/// Bars with symmetric error whiskers.
pub fn bar_chart(labels: &[String], values: &[f64], errors: &[f64], title: &str, y_label: &str) -> String {
    let n = labels.len();
    let (left, top, plot_h) = (60.0, 40.0, 240.0);
    let bar = 60.0;
    let gap = 30.0;
    let w = left + n as f64 * (bar + gap) + gap;
    let h = top + plot_h + 60.0;
    let ymax = values
        .iter()
        .zip(errors)
        .map(|(v, e)| v + e)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(1e-12)
        * 1.1;
    let y = |v: f64| top + plot_h * (1.0 - (v / ymax).clamp(0.0, 1.0));
    let mut out = String::new();
    header(&mut out, w, h, title);
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h
    );
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        w - 10.0,
        top + plot_h
    );
    for k in 0..=4 {
        let v = ymax * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (i, ((l, v), e)) in labels.iter().zip(values).zip(errors).enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let _ = writeln!(
            out,
            r#"<rect class="bar" x="{x}" y="{}" width="{bar}" height="{}" fill="{}" data-value="{v}"/>"#,
            y(*v),
            (top + plot_h - y(*v)).max(0.0),
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + bar / 2.0;
        let _ = writeln!(
            out,
            r#"<line x1="{cx}" y1="{}" x2="{cx}" y2="{}" stroke="black"/>"#,
            y(v - e),
            y(v + e)
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx}" y="{}" text-anchor="middle">{}</text>"#,
            top + plot_h + 18.0,
            escape(l)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(y_label)
    );
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    /// `(x, y, se)`; `se` draws a band when positive.
    pub points: Vec<(f64, f64, f64)>,
    pub dashed: bool,
}

/// Line chart with optional logarithmic y axis; non-positive values are dropped on a log axis.
pub fn line_chart(series: &[Series], title: &str, x_label: &str, y_label: &str, log_y: bool) -> String {
    let (left, top, pw, ph) = (70.0, 40.0, 480.0, 280.0);
    let w = left + pw + 180.0;
    let h = top + ph + 50.0;
    let tf = |v: f64| if log_y { v.log10() } else { v };
    let usable = |v: f64| v.is_finite() && (!log_y || v > 0.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, se) in pts {
        if !usable(y) {
            continue;
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        for v in [y, y - se, y + se] {
            if usable(v) {
                y0 = y0.min(tf(v));
                y1 = y1.max(tf(v));
            }
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| left + pw * (x - x0) / (x1 - x0);
    let sy = |y: f64| top + ph * (1.0 - (tf(y) - y0) / (y1 - y0));
    let mut out = String::new();
    header(&mut out, w, h, title);
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let label = if log_y {
            format!("1e{fy:.1}")
        } else {
            format!("{fy:.3}")
        };
        let py = top + ph * (1.0 - k as f64 / 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, left - 6.0, py + 4.0);
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{fx:.1}</text>"#,
            left + pw * k as f64 / 4.0,
            top + ph + 16.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let kept: Vec<&(f64, f64, f64)> = s.points.iter().filter(|p| usable(p.1)).collect();
        let band: Vec<(f64, f64, f64)> = kept
            .iter()
            .filter(|p| p.2 > 0.0 && usable(p.1 - p.2))
            .map(|p| (p.0, p.1 - p.2, p.1 + p.2))
            .collect();
        if band.len() > 1 {
            let mut d = String::new();
            for (j, (x, lo, _)) in band.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if j == 0 { "M" } else { "L" }, sx(*x), sy(*lo));
            }
            for (x, _, hi) in band.iter().rev() {
                let _ = write!(d, "L{:.2},{:.2} ", sx(*x), sy(*hi));
            }
            let _ = writeln!(out, r#"<path d="{}Z" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, d);
        }
        let poly: Vec<String> = kept.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let dash = if s.dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            poly.join(" ")
        );
        if !s.dashed {
            for p in &kept {
                let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(p.0), sy(p.1));
            }
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#,
            left + pw + 12.0,
            left + pw + 36.0
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, left + pw + 42.0, ly + 4.0, escape(&s.name));
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        top + ph + 36.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
        assert_eq!(ramp(f64::NAN), "#440154");
    }

    #[test]
    fn heatmap_cells_follow_values() {
        let m = vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.01, -0.1, 0.0],
        ];
        let svg = heatmap(&m, "t", "n", "k");
        assert_eq!(svg.matches(r#"class="cell""#).count(), 3);
        assert!(svg.contains(r##"data-row="1" data-col="0" data-value="1""##));
        assert!(svg.contains(&format!(r#"fill="{}""#, ramp(1.0))));
        assert!(svg.contains(&format!(r#"fill="{}""#, ramp(0.0))));
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn bars_and_lines_render() {
        let svg = bar_chart(&["a".into(), "b<".into()], &[0.5, 0.0], &[0.1, 0.0], "t", "eta");
        assert_eq!(svg.matches(r#"class="bar""#).count(), 2);
        assert!(svg.contains("b&lt;"));
        let s = Series {
            name: "x".into(),
            points: vec![(0.0, 1.0, 0.1), (1.0, 0.0, 0.0), (2.0, 10.0, 1.0)],
            dashed: false,
        };
        let svg = line_chart(&[s], "t", "i", "y", true);
        assert_eq!(svg.matches("<circle").count(), 2);
    }
}
