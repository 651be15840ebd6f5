//! Minimal SVG charts for reports.

use std::fmt::Write as _;

use super::{AttentionAnalysis, MetricsReport};

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"24\" font-size=\"14\">{title}</text>\n"
    )
}

/// MAE against horizon step, one polyline per model.
pub fn horizon_mae_svg(report: &MetricsReport) -> String {
    let mut out = header("MAE by horizon step");
    let max = report
        .models
        .values()
        .flat_map(|m| m.per_horizon.mae.iter().flatten())
        .fold(0.0f64, |a, &b| a.max(b))
        .max(1e-9);
    let k = report.k.max(2) as f64 - 1.0;
    let x = |s: usize| PAD + (W - 2.0 * PAD) * s as f64 / k;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / max;
    writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    )
    .expect("string write");
    writeln!(out, "<text x=\"4\" y=\"{PAD}\">{max:.2}</text>").expect("string write");
    for (i, (name, m)) in report.models.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = m
            .per_horizon
            .mae
            .iter()
            .enumerate()
            .filter_map(|(s, v)| v.map(|v| format!("{:.1},{:.1}", x(s), y(v))))
            .collect();
        writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            pts.join(" "),
            W - PAD - 120.0,
            PAD + 16.0 * i as f64
        )
        .expect("string write");
    }
    out.push_str("</svg>\n");
    out
}

/// Share of each edge type within the high-attention group.
pub fn attention_proportions_svg(a: &AttentionAnalysis) -> String {
    let mut out = header("Edge types among high-attention edges");
    let bw = (W - 2.0 * PAD) / a.types.len().max(1) as f64;
    for (i, (ty, s)) in a.types.iter().enumerate() {
        let h = (H - 2.0 * PAD) * s.high_proportion;
        let x = PAD + bw * i as f64;
        writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>\n<text x=\"{:.1}\" y=\"{}\">{ty} {:.3}</text>",
            x + 8.0,
            H - PAD - h,
            bw - 16.0,
            COLORS[i % COLORS.len()],
            x + 8.0,
            H - PAD + 16.0,
            s.high_proportion
        )
        .expect("string write");
    }
    out.push_str("</svg>\n");
    out
}
