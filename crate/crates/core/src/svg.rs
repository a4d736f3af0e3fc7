//! Minimal SVG line plots for sweep results.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::experiment::ExperimentRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: [f64; 4] = [70.0, 150.0, 30.0, 50.0]; // left, right, top, bottom
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over seeds of `‖F‖/‖G‖` against `L`, one line per `(p, N)`,
/// logarithmic ratio axis. Runs without a ratio are left out.
pub fn ratio_vs_depth(records: &[ExperimentRecord]) -> String {
    let mut groups: BTreeMap<(u64, u64), BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    for r in records {
        if let Some(ratio) = r.ratio.filter(|x| *x > 0.0 && x.is_finite()) {
            groups
                .entry((r.p.to_bits(), r.inv_eps))
                .or_default()
                .entry(r.depth)
                .or_default()
                .push(ratio);
        }
    }
    let lines: Vec<(String, Vec<(f64, f64)>)> = groups
        .into_iter()
        .map(|((p, n), by_depth)| {
            let pts = by_depth
                .into_iter()
                .map(|(l, mut v)| (l as f64, median(&mut v).log10()))
                .collect();
            (format!("p={} N={n}", f64::from_bits(p)), pts)
        })
        .collect();

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let all: Vec<(f64, f64)> = lines.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if all.is_empty() {
        let _ = writeln!(out, r#"<text x="20" y="40">no ratios to plot</text></svg>"#);
        return out;
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < 1.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    y0 = y0.floor();
    y1 = y1.ceil().max(y0 + 1.0);
    let [ml, mr, mt, mb] = MARGIN;
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (WIDTH - ml - mr);
    let py = |y: f64| HEIGHT - mb - (y - y0) / (y1 - y0) * (HEIGHT - mt - mb);

    let _ = writeln!(
        out,
        r#"<g stroke="black" fill="none"><line x1="{ml}" y1="{}" x2="{}" y2="{}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}"/></g>"#,
        HEIGHT - mb,
        WIDTH - mr,
        HEIGHT - mb,
        HEIGHT - mb
    );
    let mut l = x0.ceil();
    while l <= x1 {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{l}</text>"#,
            px(l),
            HEIGHT - mb + 18.0
        );
        l += 1.0;
    }
    let mut e = y0;
    while e <= y1 {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">1e{e}</text><line x1="{ml}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="lightgray"/>"#,
            ml - 6.0,
            py(e) + 4.0,
            py(e),
            WIDTH - mr,
            py(e)
        );
        e += 1.0;
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">depth L</text>"#,
        0.5 * (ml + WIDTH - mr),
        HEIGHT - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">median ‖F‖/‖G‖</text>"#,
        0.5 * HEIGHT,
        0.5 * HEIGHT
    );
    for (i, (label, pts)) in lines.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let ly = mt + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{label}</text>"#,
            WIDTH - mr + 10.0,
            WIDTH - mr + 30.0,
            WIDTH - mr + 36.0,
            ly + 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}
