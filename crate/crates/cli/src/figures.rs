//! Static SVG figures: a confidence-interval forest plot and an attention heatmap.

use anyhow::{Context, Result};
use serde::Deserialize;
use std::fmt::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestRow {
    pub label: String,
    pub mean: f64,
    pub low: f64,
    pub up: f64,
    pub significant: bool,
}

#[derive(Deserialize)]
struct ReportLine {
    drug: usize,
    effect: String,
    mean: Option<f64>,
    low: Option<f64>,
    up: Option<f64>,
    p_adj: Option<f64>,
}

/// Rows of a screen CSV that carry an estimate.
pub fn read_forest_rows(path: &Path) -> Result<Vec<ForestRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for line in reader.deserialize() {
        let l: ReportLine = line.with_context(|| format!("parsing {}", path.display()))?;
        if let (Some(mean), Some(low), Some(up)) = (l.mean, l.low, l.up) {
            rows.push(ForestRow {
                label: format!("drug {} {}", l.drug, l.effect.replace('_', " ")),
                mean,
                low,
                up,
                significant: l.p_adj.is_some_and(|p| p < 0.05),
            });
        }
    }
    Ok(rows)
}

#[derive(Deserialize)]
struct AttentionLine {
    covariate: usize,
    subgroup: usize,
    score: Option<f64>,
}

pub fn read_attention_cells(path: &Path) -> Result<Vec<(usize, usize, Option<f64>)>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .map(|l| {
            let l: AttentionLine = l.with_context(|| format!("parsing {}", path.display()))?;
            Ok((l.covariate, l.subgroup, l.score))
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const ROW_H: f64 = 18.0;
const LABEL_W: f64 = 170.0;
const PLOT_W: f64 = 420.0;

pub fn forest_svg(rows: &[ForestRow]) -> String {
    let (mut lo, mut hi) = rows
        .iter()
        .fold((0.0f64, 0.0f64), |(a, b), r| (a.min(r.low), b.max(r.up)));
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let x = |v: f64| LABEL_W + (v - lo) / (hi - lo) * PLOT_W;
    let height = 40.0 + ROW_H * rows.len() as f64;
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{height}" font-family="sans-serif" font-size="11">"#,
        w = LABEL_W + PLOT_W + 20.0
    );
    let _ = write!(
        s,
        r##"<line x1="{z:.2}" y1="10" x2="{z:.2}" y2="{y2:.2}" stroke="#999" stroke-dasharray="3,3"/>"##,
        z = x(0.0),
        y2 = height - 20.0
    );
    for (i, r) in rows.iter().enumerate() {
        let y = 20.0 + ROW_H * i as f64;
        let color = if r.significant { "#c0392b" } else { "#34495e" };
        let _ = write!(s, r#"<text x="4" y="{:.2}">{}</text>"#, y + 4.0, escape(&r.label));
        let _ = write!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="1.5"/>"#,
            x(r.low),
            x(r.up)
        );
        let _ = write!(s, r#"<circle cx="{:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#, x(r.mean));
    }
    let _ = write!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="start">{lo:.3}</text><text x="{:.2}" y="{:.2}" text-anchor="end">{hi:.3}</text>"#,
        LABEL_W,
        height - 4.0,
        LABEL_W + PLOT_W,
        height - 4.0
    );
    s.push_str("</svg>\n");
    s
}

/// Heatmap of relative attention. Rows are the covariates scoring above
/// `1 / K` in some subgroup, or every covariate when none does.
pub fn heatmap_svg(cells: &[(usize, usize, Option<f64>)]) -> String {
    let k = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    let cut = if k > 0 { 1.0 / k as f64 } else { 0.0 };
    let mut covs: Vec<usize> = cells
        .iter()
        .filter(|c| c.2.is_some_and(|v| v > cut + 1e-12))
        .map(|c| c.0)
        .collect();
    if covs.is_empty() {
        covs = cells.iter().map(|c| c.0).collect();
    }
    covs.sort_unstable();
    covs.dedup();
    let cell = 14.0;
    let left = 60.0;
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif" font-size="10">"#,
        left + cell * k as f64 + 10.0,
        30.0 + cell * covs.len() as f64
    );
    for g in 0..k {
        let _ = write!(
            s,
            r#"<text x="{:.2}" y="14" text-anchor="middle">{g}</text>"#,
            left + cell * (g as f64 + 0.5)
        );
    }
    for (row, &c) in covs.iter().enumerate() {
        let y = 20.0 + cell * row as f64;
        let _ = write!(s, r#"<text x="4" y="{:.2}">code {c}</text>"#, y + cell * 0.75);
        for &(_, g, v) in cells.iter().filter(|x| x.0 == c) {
            let fill = match v {
                // White at the uniform share, dark red at 1.
                Some(v) => {
                    let t = ((v - cut) / (1.0 - cut)).clamp(0.0, 1.0);
                    let shade = (255.0 * (1.0 - t)).round() as u8;
                    format!("rgb(255,{shade},{shade})")
                }
                None => "#ddd".into(),
            };
            let _ = write!(
                s,
                r##"<rect x="{:.2}" y="{y:.2}" width="{cell}" height="{cell}" fill="{fill}" stroke="#fff"/>"##,
                left + cell * g as f64
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
