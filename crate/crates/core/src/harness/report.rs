//! Text table and SVG chart rendered from a results directory.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-segment mIoU means per variant, parsed back out of summary.csv.
#[derive(Debug, Clone, Default)]
pub struct ReportData {
    /// variant -> (segment labels in order, per-segment mIoU means, overall mean)
    pub variants: BTreeMap<String, (Vec<String>, Vec<f64>, f64)>,
}

pub fn load(results_dir: &Path) -> Result<ReportData> {
    let path = results_dir.join("summary.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    // variant -> segment label -> (sum, count)
    let mut acc: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    let mut seg_order: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::config(format!(
                "{}: line {}: expected 5 columns",
                path.display(),
                i + 1
            )));
        }
        let (variant, segment, miou) = (cols[0], cols[2], cols[4]);
        let miou: f64 = miou
            .parse()
            .map_err(|e| Error::config(format!("line {}: bad miou: {e}", i + 1)))?;
        if segment != "overall" && !seg_order.iter().any(|s| s == segment) {
            seg_order.push(segment.to_string());
        }
        let entry = acc
            .entry(variant.to_string())
            .or_default()
            .entry(segment.to_string())
            .or_insert((0.0, 0));
        entry.0 += miou;
        entry.1 += 1;
    }
    let mut data = ReportData::default();
    for (variant, segs) in acc {
        let series: Vec<f64> = seg_order
            .iter()
            .map(|s| segs.get(s).map_or(0.0, |(sum, n)| sum / *n as f64))
            .collect();
        let overall = segs.get("overall").map_or(0.0, |(sum, n)| sum / *n as f64);
        data.variants.insert(variant, (seg_order.clone(), series, overall));
    }
    Ok(data)
}

/// Fixed-width table of per-segment mIoU means; one row per variant.
pub fn render_table(data: &ReportData) -> String {
    let seg_labels = data
        .variants
        .values()
        .next()
        .map(|(labels, _, _)| labels.clone())
        .unwrap_or_default();
    let mut out = format!("{:<12}", "variant");
    for label in &seg_labels {
        out.push_str(&format!("{label:>14}"));
    }
    out.push_str(&format!("{:>10}\n", "overall"));
    for (variant, (_, series, overall)) in &data.variants {
        out.push_str(&format!("{variant:<12}"));
        for v in series {
            out.push_str(&format!("{v:>14.4}"));
        }
        out.push_str(&format!("{overall:>10.4}\n"));
    }
    out
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Per-segment mIoU line chart, one polyline per variant. Pure markup, no
/// external renderer.
pub fn render_svg(data: &ReportData) -> String {
    let (w, h) = (760.0, 420.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let n_segs = data
        .variants
        .values()
        .next()
        .map(|(labels, _, _)| labels.len())
        .unwrap_or(0);

    let mut svg = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"##
    );
    svg.push_str(&format!(
        r##"<rect width="{w}" height="{h}" fill="white"/>"##
    ));
    // Axes and horizontal grid lines at 0.0..1.0.
    for i in 0..=5 {
        let frac = i as f64 / 5.0;
        let y = top + plot_h * (1.0 - frac);
        svg.push_str(&format!(
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            left + plot_w
        ));
        svg.push_str(&format!(
            r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end" fill="#333333">{frac:.1}</text>"##,
            left - 6.0,
            y + 4.0
        ));
    }
    if n_segs > 0 {
        if let Some((labels, _, _)) = data.variants.values().next() {
            for (i, label) in labels.iter().enumerate() {
                let x = left + plot_w * (i as f64 + 0.5) / n_segs as f64;
                svg.push_str(&format!(
                    r##"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle" fill="#333333">{label}</text>"##,
                    h - bottom + 16.0
                ));
            }
        }
    }
    svg.push_str(&format!(
        r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="#333333"/>"##,
        top + plot_h
    ));
    svg.push_str(&format!(
        r##"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333333"/>"##,
        top + plot_h,
        left + plot_w,
        top + plot_h
    ));
    svg.push_str(&format!(
        r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" fill="#333333" transform="rotate(-90 14 {mid:.1})">mIoU</text>"##,
        14.0,
        (top + plot_h / 2.0),
        mid = top + plot_h / 2.0
    ));

    for (vi, (variant, (_, series, _))) in data.variants.iter().enumerate() {
        let color = PALETTE[vi % PALETTE.len()];
        let points: Vec<String> = series
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let x = left + plot_w * (i as f64 + 0.5) / n_segs.max(1) as f64;
                let y = top + plot_h * (1.0 - v.clamp(0.0, 1.0));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        svg.push_str(&format!(
            r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"##,
            points.join(" ")
        ));
        let ly = top + 14.0 + 16.0 * vi as f64;
        let lx = w - right + 10.0;
        svg.push_str(&format!(
            r##"<line x1="{lx}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"##,
            lx + 18.0
        ));
        svg.push_str(&format!(
            r##"<text x="{:.1}" y="{:.1}" font-size="11" fill="#333333">{variant}</text>"##,
            lx + 24.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>");
    svg
}

/// Loads a results directory, writes `report.svg` next to the summary, and
/// returns the rendered table.
pub fn report(results_dir: &Path) -> Result<String> {
    let data = load(results_dir)?;
    let svg = render_svg(&data);
    std::fs::write(results_dir.join("report.svg"), svg)?;
    Ok(render_table(&data))
}
