//! Minimal SVG box plots. Every box carries its statistics as `data-*`
//! attributes so the figure can be checked without rasterizing it.

use std::fmt::Write;

use dceseg_core::eval::BoxStats;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 280.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 40.0;
const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

pub struct Panel {
    pub metric: String,
    pub title: String,
    pub boxes: Vec<(String, BoxStats)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn value_range(panel: &Panel) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, b) in &panel.boxes {
        for v in [b.whisker_low, b.whisker_high].iter().chain(&b.outliers) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !(lo < hi) {
        let c = if lo.is_finite() { lo } else { 0.0 };
        return (c - 0.5, c + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn panel(out: &mut String, p: &Panel, x0: f64) {
    let (lo, hi) = value_range(p);
    let plot_h = PANEL_H - MARGIN_T - MARGIN_B;
    let plot_w = PANEL_W - MARGIN_L - MARGIN_R;
    let y = |v: f64| MARGIN_T + (hi - v) / (hi - lo) * plot_h;
    let left = x0 + MARGIN_L;

    let _ = writeln!(out, r#"<g class="panel" data-metric="{}">"#, escape(&p.metric));
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        left + plot_w / 2.0,
        escape(&p.title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left:.1}" y="{MARGIN_T:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#999"/>"##
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            left - 4.0,
            y(v) + 3.0,
            format_tick(v)
        );
    }

    let slot = plot_w / p.boxes.len().max(1) as f64;
    for (i, (label, b)) in p.boxes.iter().enumerate() {
        let cx = left + slot * (i as f64 + 0.5);
        let half = (slot * 0.3).min(30.0);
        let color = PALETTE[i % PALETTE.len()];
        let s = &b.summary;
        let _ = writeln!(
            out,
            r#"<g class="box" data-metric="{}" data-label="{}" data-median="{}" data-q1="{}" data-q3="{}" data-whisker-low="{}" data-whisker-high="{}" data-outliers="{}">"#,
            escape(&p.metric),
            escape(label),
            s.median,
            s.q1,
            s.q3,
            b.whisker_low,
            b.whisker_high,
            b.outliers.len()
        );
        let _ = writeln!(
            out,
            r#"<line class="whisker" x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.whisker_low),
            y(b.whisker_high)
        );
        for w in [b.whisker_low, b.whisker_high] {
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
                cx - half / 2.0,
                y(w),
                cx + half / 2.0,
                y(w)
            );
        }
        let _ = writeln!(
            out,
            r#"<rect class="iqr" x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}" fill-opacity="0.6" stroke="black"/>"#,
            cx - half,
            y(s.q3),
            2.0 * half,
            (y(s.q1) - y(s.q3)).max(0.5)
        );
        let _ = writeln!(
            out,
            r#"<line class="median" x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            y(s.median),
            cx + half,
            y(s.median)
        );
        for &o in &b.outliers {
            let _ = writeln!(
                out,
                r#"<circle class="outlier" cx="{cx:.1}" cy="{:.1}" r="2.5" fill="none" stroke="black" data-value="{o}"/>"#,
                y(o)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
            PANEL_H - MARGIN_B + 16.0,
            escape(label)
        );
        out.push_str("</g>\n");
    }
    out.push_str("</g>\n");
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len() as f64;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    out.push('\n');
    for (i, p) in panels.iter().enumerate() {
        panel(&mut out, p, PANEL_W * i as f64);
    }
    out.push_str("</svg>\n");
    out
}
