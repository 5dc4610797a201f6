//! Minimal SVG charts for sweep tables and evaluation reports.

use std::fmt::Write;

use crate::metrics::EvalReport;
use crate::train::SweepRow;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        W / 2.0,
        escape(title),
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 14.0,
        escape(x_label),
        TOP + (H - TOP - BOTTOM) / 2.0,
        TOP + (H - TOP - BOTTOM) / 2.0,
        escape(y_label),
    );
    let y0 = H - BOTTOM;
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{y0}" stroke="black"/>"#,
        W - RIGHT
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/><line x1="{LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text>"##,
            LEFT - 4.0,
            W - RIGHT,
            LEFT - 8.0,
            y + 4.0
        );
    }
}

/// Maps a score in [0, 1] to a y coordinate.
fn y_of(v: f64) -> f64 {
    H - BOTTOM - v.clamp(0.0, 1.0) * (H - TOP - BOTTOM)
}

/// Line chart of macro-F1 against the share of edges removed.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    frame(&mut out, "Macro-F1 under edge cutting", "share of edges removed", "macro F1");
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r.ratio), h.max(r.ratio)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x_of = |r: f64| LEFT + 16.0 + (r - lo) / span * (W - LEFT - RIGHT - 32.0);
    let pts: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", x_of(r.ratio), y_of(r.macro_f1)))
        .collect();
    let _ = writeln!(
        out,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        pts.join(" ")
    );
    for r in rows {
        let (x, y) = (x_of(r.ratio), y_of(r.macro_f1));
        let _ = writeln!(
            out,
            r##"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="#1f77b4"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{:.3}</text><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            y - 9.0,
            r.macro_f1,
            H - BOTTOM + 16.0,
            r.ratio
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bar chart of per-class F1 with the macro mean as a dashed line.
pub fn report_svg(report: &EvalReport) -> String {
    let mut out = String::new();
    let title = match &report.tag {
        Some(t) => format!("Per-class F1 ({t})"),
        None => "Per-class F1".to_string(),
    };
    frame(&mut out, &title, "class", "F1");
    let n = report.per_class.len().max(1);
    let slot = (W - LEFT - RIGHT) / n as f64;
    let bar = (slot * 0.8).max(1.0);
    for (k, (name, m)) in report.per_class.iter().enumerate() {
        let x = LEFT + k as f64 * slot + (slot - bar) / 2.0;
        let y = y_of(m.f1);
        let _ = writeln!(
            out,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{bar:.2}" height="{:.2}" fill="#4c9a2a"><title>{}: {:.3}</title></rect>"##,
            H - BOTTOM - y,
            escape(name),
            m.f1
        );
        if n <= 24 {
            let cx = x + bar / 2.0;
            let cy = H - BOTTOM + 12.0;
            let _ = writeln!(
                out,
                r#"<text x="{cx:.2}" y="{cy:.2}" text-anchor="end" font-size="9" transform="rotate(-45 {cx:.2} {cy:.2})">{}</text>"#,
                escape(name)
            );
        }
    }
    let y = y_of(report.macro_avg.f1);
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#d62728" stroke-dasharray="6 4"/><text x="{}" y="{:.2}" text-anchor="end" fill="#d62728">macro {:.3}</text>"##,
        W - RIGHT,
        W - RIGHT,
        y - 6.0,
        report.macro_avg.f1
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_plot_has_one_marker_per_row() {
        let rows = vec![
            SweepRow { ratio: 0.0, edges: 9, macro_f1: 0.9 },
            SweepRow { ratio: 0.5, edges: 4, macro_f1: 0.7 },
            SweepRow { ratio: 0.75, edges: 2, macro_f1: 0.6 },
        ];
        let svg = sweep_svg(&rows);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn report_plot_has_one_bar_per_class() {
        let names: Vec<String> = ["a", "b<c"].iter().map(|s| s.to_string()).collect();
        let r = EvalReport::from_predictions(&[0, 1], &[0, 0], &names).unwrap().with_tag("full");
        let svg = report_svg(&r);
        assert_eq!(svg.matches("<rect x=").count(), 2);
        assert!(svg.contains("b&lt;c"));
    }
}
