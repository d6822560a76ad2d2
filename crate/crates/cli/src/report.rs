//! Accuracy-vs-pruned-FLOPs curves and energy histograms across run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use crate::commands::{SummaryRow, ENERGY, PRUNE_SUMMARY, RESOLVED_CONFIG};
use crate::config::Config;

pub const CURVE_CSV: &str = "accuracy_vs_flops.csv";
pub const CURVE_SVG: &str = "accuracy_vs_flops.svg";
pub const HISTOGRAM_CSV: &str = "energy_histogram.csv";
pub const HISTOGRAM_SVG: &str = "energy_histogram.svg";

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub struct Series {
    pub label: String,
    pub summary: Vec<SummaryRow>,
    pub energies: Vec<f64>,
}

#[derive(Deserialize)]
struct EnergyRow {
    energy: f64,
}

fn load_series(dir: &Path) -> Result<Series> {
    let config_text = fs::read_to_string(dir.join(RESOLVED_CONFIG))?;
    let config = Config::from_toml(&config_text, &[])?;
    let mut summary = Vec::new();
    for row in csv::Reader::from_path(dir.join(PRUNE_SUMMARY))?.deserialize() {
        summary.push(
            row.with_context(|| format!("bad row in {}", dir.join(PRUNE_SUMMARY).display()))?,
        );
    }
    let mut energies = Vec::new();
    for row in csv::Reader::from_path(dir.join(ENERGY))?.deserialize() {
        let row: EnergyRow =
            row.with_context(|| format!("bad row in {}", dir.join(ENERGY).display()))?;
        energies.push(row.energy);
    }
    Ok(Series {
        label: config.train.regularizer.name().to_string(),
        summary,
        energies,
    })
}

/// Loads every run directory; all missing inputs are reported together.
pub fn load_runs(dirs: &[PathBuf]) -> Result<Vec<Series>> {
    let missing: Vec<String> = dirs
        .iter()
        .flat_map(|d| [RESOLVED_CONFIG, PRUNE_SUMMARY, ENERGY].map(|f| d.join(f)))
        .filter(|p| !p.is_file())
        .map(|p| format!("  missing {}", p.display()))
        .collect();
    if !missing.is_empty() {
        bail!("report inputs not found:\n{}", missing.join("\n"));
    }
    let mut series = Vec::new();
    for d in dirs {
        series.push(load_series(d).with_context(|| format!("reading run {}", d.display()))?);
    }
    // disambiguate repeated labels with the run directory name
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in &series {
        *counts.entry(s.label.clone()).or_default() += 1;
    }
    for (s, d) in series.iter_mut().zip(dirs) {
        if counts[&s.label] > 1 {
            let name = d
                .file_name()
                .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into());
            s.label = format!("{}:{name}", s.label);
        }
    }
    Ok(series)
}

/// `series,iteration,pruned_flops_ratio,accuracy_before_fine_tune,accuracy_after_fine_tune`;
/// iteration 0 is the unpruned origin.
pub fn curve_csv(series: &[Series]) -> String {
    let mut s = String::from(
        "series,iteration,pruned_flops_ratio,accuracy_before_fine_tune,accuracy_after_fine_tune\n",
    );
    for run in series {
        for r in &run.summary {
            writeln!(
                s,
                "{},{},{},{},{}",
                run.label,
                r.iteration,
                r.achieved_ratio,
                r.accuracy_before_fine_tune,
                r.accuracy_after_fine_tune
            )
            .unwrap();
        }
    }
    s
}

/// Counts of energies normalised by the run's largest energy, in `bins`
/// equal-width bins over `[0, 1]`.
pub fn histogram(energies: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let max = energies.iter().cloned().fold(0.0, f64::max);
    for &e in energies {
        let f = if max > 0.0 { e / max } else { 0.0 };
        counts[((f * bins as f64) as usize).min(bins - 1)] += 1;
    }
    counts
}

pub fn histogram_csv(series: &[Series], bins: usize) -> String {
    let mut s = String::from("series,bin,lower,upper,count\n");
    for run in series {
        for (b, c) in histogram(&run.energies, bins).iter().enumerate() {
            let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
            writeln!(s, "{},{b},{lo},{hi},{c}", run.label).unwrap();
        }
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const M: f64 = 48.0;

fn frame(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#,
        W / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<path d="M{M} {M} V{} H{}" stroke="black" fill="none"/>"#,
        H - M,
        W - M
    )
    .unwrap();
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (x, y) = (M + t * (W - 2.0 * M), H - M - t * (H - 2.0 * M));
        writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t:.2}</text>"#,
            H - M + 14.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.2}</text>"#,
            M - 4.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        W / 2.0,
        H - 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    )
    .unwrap();
    s
}

fn legend(s: &mut String, labels: impl Iterator<Item = String>) {
    for (i, label) in labels.enumerate() {
        let y = M + 4.0 + 14.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        writeln!(
            s,
            r#"<rect x="{}" y="{y:.1}" width="10" height="10" fill="{color}"/>"#,
            W - M - 110.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}">{label}</text>"#,
            W - M - 96.0,
            y + 9.0
        )
        .unwrap();
    }
}

fn px(fx: f64, fy: f64) -> (f64, f64) {
    (
        M + fx.clamp(0.0, 1.0) * (W - 2.0 * M),
        H - M - fy.clamp(0.0, 1.0) * (H - 2.0 * M),
    )
}

pub fn curve_svg(series: &[Series]) -> String {
    let mut s = frame(
        "accuracy before fine-tuning vs pruned FLOPs",
        "pruned FLOPs ratio",
        "accuracy",
    );
    for (i, run) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = run
            .summary
            .iter()
            .map(|r| {
                let (x, y) = px(r.achieved_ratio, r.accuracy_before_fine_tune);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        )
        .unwrap();
        for p in &points {
            let (x, y) = p.split_once(',').unwrap();
            writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#).unwrap();
        }
    }
    legend(&mut s, series.iter().map(|r| r.label.clone()));
    s.push_str("</svg>\n");
    s
}

pub fn histogram_svg(series: &[Series], bins: usize) -> String {
    let mut s = frame(
        "out-in-channel energy distribution",
        "energy / max energy",
        "fraction of groups",
    );
    let slot = (W - 2.0 * M) / bins as f64;
    let bar = slot / (series.len().max(1) as f64 + 1.0);
    for (i, run) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let total = run.energies.len().max(1) as f64;
        for (b, &c) in histogram(&run.energies, bins).iter().enumerate() {
            let h = c as f64 / total * (H - 2.0 * M);
            let x = M + b as f64 * slot + bar * (i as f64 + 0.5);
            writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bar:.2}" height="{h:.2}" fill="{color}"/>"#,
                H - M - h
            )
            .unwrap();
        }
    }
    legend(&mut s, series.iter().map(|r| r.label.clone()));
    s.push_str("</svg>\n");
    s
}

pub fn cmd_report(dirs: &[PathBuf], out: &Path, bins: usize) -> Result<()> {
    if dirs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let series = load_runs(dirs)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CURVE_CSV), curve_csv(&series))?;
    fs::write(out.join(CURVE_SVG), curve_svg(&series))?;
    fs::write(out.join(HISTOGRAM_CSV), histogram_csv(&series, bins))?;
    fs::write(out.join(HISTOGRAM_SVG), histogram_svg(&series, bins))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_every_group() {
        let e = [0.0, 0.1, 0.5, 0.99, 1.0, 2.0, 2.0];
        let h = histogram(&e, 10);
        assert_eq!(h.iter().sum::<usize>(), e.len());
        assert_eq!(h[9], 2);
        assert_eq!(histogram(&[0.0, 0.0], 4), vec![2, 0, 0, 0]);
    }
}
