//! Minimal SVG rendering for prediction ribbons, phase bars and bar charts.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 240.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, height: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="20" font-family="sans-serif" font-size="13">{}</text>"#,
        escape(title)
    );
}

/// One named line over frame indices.
pub struct Series<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
}

/// Lines over `frames` with an optional shaded `(low, high)` band, y from 0 to `y_max`.
pub fn ribbon_svg(title: &str, frames: &[usize], series: &[Series], band: Option<(&[f64], &[f64])>, y_max: f64) -> String {
    let mut out = String::new();
    header(&mut out, title, HEIGHT);
    let x_max = frames.last().copied().unwrap_or(1).max(1) as f64;
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let px = |f: usize| MARGIN + (WIDTH - 2.0 * MARGIN) * f as f64 / x_max;
    let py = |v: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * (v / y_max).clamp(0.0, 1.0);
    let _ = writeln!(
        out,
        r##"<line x1="{MARGIN}" y1="{b}" x2="{r}" y2="{b}" stroke="#333"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{b}" stroke="#333"/>"##,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    if let Some((lo, hi)) = band {
        let mut pts: Vec<String> = frames.iter().zip(hi).map(|(&f, &v)| format!("{:.1},{:.1}", px(f), py(v))).collect();
        pts.extend(frames.iter().zip(lo).rev().map(|(&f, &v)| format!("{:.1},{:.1}", px(f), py(v))));
        let _ = writeln!(out, r##"<polygon points="{}" fill="#d62728" fill-opacity="0.2" stroke="none"/>"##, pts.join(" "));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = frames.iter().zip(s.values).map(|(&f, &v)| format!("{:.1},{:.1}", px(f), py(v))).collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            MARGIN + 14.0 * i as f64,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Stacked rows of colored phase segments, one row per sequence.
pub fn phase_bars_svg(title: &str, rows: &[(&str, &[usize])]) -> String {
    let row_h = 24.0;
    let height = MARGIN + rows.len() as f64 * (row_h + 8.0) + 10.0;
    let mut out = String::new();
    header(&mut out, title, height);
    let left = MARGIN + 60.0;
    let span = WIDTH - left - MARGIN;
    for (r, (label, phases)) in rows.iter().enumerate() {
        let y = MARGIN + r as f64 * (row_h + 8.0);
        let _ = writeln!(
            out,
            r#"<text x="{MARGIN}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            y + 16.0,
            escape(label)
        );
        let n = phases.len().max(1) as f64;
        let mut start = 0;
        while start < phases.len() {
            let mut end = start;
            while end < phases.len() && phases[end] == phases[start] {
                end += 1;
            }
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{y}" width="{:.1}" height="{row_h}" fill="{}"/>"#,
                left + span * start as f64 / n,
                span * (end - start) as f64 / n,
                PALETTE[phases[start] % PALETTE.len()]
            );
            start = end;
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Vertical bars for named values.
pub fn bar_chart_svg(title: &str, bars: &[(&str, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title, HEIGHT);
    let max = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let slot = (WIDTH - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = (HEIGHT - 2.0 * MARGIN) * (v / max).max(0.0);
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            HEIGHT - MARGIN - h,
            slot * 0.7,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{}" font-family="sans-serif" font-size="11">{} ({v:.3})</text>"#,
            HEIGHT - MARGIN + 14.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}
