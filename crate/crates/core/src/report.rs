//! Result persistence: CSV table, JSON manifest, and optional SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::game::{ExperimentConfig, GameResult};

pub const CSV_HEADER: &str =
    "variant,r,N,attacker,forgery_success,ci_lo,ci_hi,fnr,fpr_fw,seed_count";

/// Hex SHA-256 of the config's canonical JSON serialization.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_string(config)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// One row per cell; numeric fields are printed with fixed precision so
/// identical runs produce byte-identical files.
pub fn render_csv(results: &[GameResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.variant,
            r.r,
            r.n,
            r.attacker,
            r.forgery_success,
            r.ci_lo,
            r.ci_hi,
            r.fnr,
            r.fpr_fw,
            r.seed_count
        );
    }
    out
}

pub fn write_csv(path: &Path, results: &[GameResult]) -> Result<()> {
    std::fs::write(path, render_csv(results))?;
    Ok(())
}

/// Full run record: config, its hash, creation time, and every cell result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub created_unix: u64,
    pub config: ExperimentConfig,
    pub results: Vec<GameResult>,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, results: Vec<GameResult>) -> Result<Self> {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            config_hash: config_hash(config)?,
            created_unix,
            config: config.clone(),
            results,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Forgery success against key count, one polyline per variant.
pub fn svg_success_vs_r(results: &[GameResult]) -> String {
    let series = group_series(results, |r| r.r as f64);
    line_chart("forgery success vs key count", "r", &series)
}

/// Forgery success against attacker sample budget, one polyline per variant.
pub fn svg_success_vs_n(results: &[GameResult]) -> String {
    let series = group_series(results, |r| r.n as f64);
    line_chart("forgery success vs training samples", "N", &series)
}

fn group_series(results: &[GameResult], x_of: impl Fn(&GameResult) -> f64) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for r in results {
        let x = x_of(r);
        match series.iter_mut().find(|s| s.label == r.variant) {
            Some(s) => s.points.push((x, r.forgery_success)),
            None => series.push(Series {
                label: r.variant.clone(),
                points: vec![(x, r.forgery_success)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        s.points.dedup_by(|a, b| a.0 == b.0);
    }
    series
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let x_max = xs.iter().copied().fold(1.0, f64::max);
    let span = (x_max - x_min).max(1e-9);
    let sx = move |x: f64| left + (x - x_min) / span * plot_w;
    let sy = move |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * plot_h;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = write!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>",
        left + plot_w / 2.0
    );
    // Axes and y ticks every 0.25.
    let _ = write!(
        svg,
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>",
        top + plot_h
    );
    let _ = write!(
        svg,
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        top + plot_h,
        left + plot_w,
        top + plot_h
    );
    for i in 0..=4 {
        let y = i as f64 * 0.25;
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{y:.2}</text>",
            left - 6.0,
            sy(y) + 4.0
        );
        let _ = write!(
            svg,
            "<line x1=\"{left}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#dddddd\"/>",
            sy(y),
            left + plot_w
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>",
        left + plot_w / 2.0,
        h - 12.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if pts.len() > 1 {
            let _ = write!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        for &(x, y) in &s.points {
            let _ = write!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            );
            // x tick label under each point
            let _ = write!(
                svg,
                "<text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{x}</text>",
                sx(x),
                top + plot_h + 16.0
            );
        }
        let ly = top + 14.0 * i as f64;
        let _ = write!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>",
            left + plot_w + 12.0,
            ly
        );
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            left + plot_w + 26.0,
            ly + 9.0,
            s.label
        );
    }
    svg.push_str("</svg>");
    svg
}
