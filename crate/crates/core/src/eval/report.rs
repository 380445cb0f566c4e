//! Report files: `metrics.csv`, `summary.json` and one SVG bar chart per
//! evaluation condition.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{mean_std, AttackMode, Metrics};
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CSV_HEADER: &str = "mode,epsilon,density,seed,SR,CR,DE";

/// Attack mode plus the two numeric knobs that define an evaluation setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Condition {
    pub mode: AttackMode,
    pub epsilon: f64,
    pub density: f64,
}

impl Condition {
    /// Grouping key at the precision written to disk.
    fn key(&self) -> (AttackMode, String, String) {
        (self.mode, format!("{:.4}", self.epsilon), format!("{:.4}", self.density))
    }

    pub fn slug(&self) -> String {
        format!("{}_eps{:.4}_rho{:.4}", self.mode, self.epsilon, self.density)
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub condition: Condition,
    pub seed: u64,
    pub sr: f64,
    pub cr: f64,
    pub de: f64,
}

impl MetricRow {
    pub fn new(condition: Condition, seed: u64, m: &Metrics) -> Self {
        MetricRow {
            condition,
            seed,
            sr: m.sr,
            cr: m.cr,
            de: m.de,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation across seeds; absent for one seed.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub seeds: Vec<u64>,
    #[serde(rename = "SR")]
    pub sr: MetricSummary,
    #[serde(rename = "CR")]
    pub cr: MetricSummary,
    #[serde(rename = "DE")]
    pub de: MetricSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<&'static str>,
}

pub fn write_metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let c = &r.condition;
        writeln!(
            out,
            "{},{:.4},{:.4},{},{:.4},{:.4},{:.4}",
            c.mode, c.epsilon, c.density, r.seed, r.sr, r.cr, r.de
        )
        .expect("writing to a String");
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        Some(h) => return Err(Error::format(format!("unexpected metrics header {h:?}"))),
        None => return Err(Error::format("empty metrics file")),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(Error::format(format!("metrics row {} has {} fields", i + 2, f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(format!("bad number {s:?} in metrics row {}", i + 2)))
            };
            Ok(MetricRow {
                condition: Condition {
                    mode: f[0].parse().map_err(|_| Error::format(format!("bad mode {:?}", f[0])))?,
                    epsilon: num(f[1])?,
                    density: num(f[2])?,
                },
                seed: f[3]
                    .parse()
                    .map_err(|_| Error::format(format!("bad seed {:?} in metrics row {}", f[3], i + 2)))?,
                sr: num(f[4])?,
                cr: num(f[5])?,
                de: num(f[6])?,
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    parse_metrics_csv(&fs::read_to_string(path)?)
}

/// Groups rows by condition, in first-appearance order.
pub fn summarize(rows: &[MetricRow]) -> Vec<ConditionSummary> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<_, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let k = r.condition.key();
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let stat = |f: fn(&MetricRow) -> f64| {
                let (mean, std) = mean_std(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
                MetricSummary { mean, std }
            };
            ConditionSummary {
                condition: g[0].condition,
                seeds: g.iter().map(|r| r.seed).collect(),
                sr: stat(|r| r.sr),
                cr: stat(|r| r.cr),
                de: stat(|r| r.de),
                note: (g[0].condition.mode == AttackMode::RandomTrigger)
                    .then_some("baseline: the attack budget is spent on uniformly random timesteps"),
            }
        })
        .collect()
}

/// Bar chart of mean SR and CR with one-standard-deviation whiskers.
pub fn render_svg(s: &ConditionSummary) -> String {
    const W: f64 = 320.0;
    const H: f64 = 240.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 200.0;
    let scale = BOTTOM - TOP;
    let c = &s.condition;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{x}" y="20" font-family="sans-serif" font-size="12" text-anchor="middle">{mode}  eps={eps:.4}  rho={rho:.4}  seeds={n}</text>
<line x1="40" y1="{BOTTOM}" x2="300" y2="{BOTTOM}" stroke="black"/>
<line x1="40" y1="{TOP}" x2="40" y2="{BOTTOM}" stroke="black"/>
<text x="35" y="{TOP}" font-family="sans-serif" font-size="10" text-anchor="end">1.0</text>
<text x="35" y="{BOTTOM}" font-family="sans-serif" font-size="10" text-anchor="end">0.0</text>
"#,
        x = W / 2.0,
        mode = c.mode,
        eps = c.epsilon,
        rho = c.density,
        n = s.seeds.len(),
    );
    for (i, (label, m, colour)) in [("SR", s.sr, "#4c72b0"), ("CR", s.cr, "#c44e52")].into_iter().enumerate() {
        let x = 80.0 + 120.0 * i as f64;
        let h = m.mean.clamp(0.0, 1.0) * scale;
        write!(
            svg,
            r#"<rect x="{x}" y="{y:.2}" width="60" height="{h:.2}" fill="{colour}"/>
<text x="{cx}" y="{ly}" font-family="sans-serif" font-size="11" text-anchor="middle">{label} {mean:.4}</text>
"#,
            y = BOTTOM - h,
            cx = x + 30.0,
            ly = BOTTOM + 16.0,
            mean = m.mean,
        )
        .expect("writing to a String");
        if let Some(sd) = m.std {
            let lo = BOTTOM - (m.mean - sd).clamp(0.0, 1.0) * scale;
            let hi = BOTTOM - (m.mean + sd).clamp(0.0, 1.0) * scale;
            write!(
                svg,
                r#"<line x1="{cx}" y1="{lo:.2}" x2="{cx}" y2="{hi:.2}" stroke="black"/>
"#,
                cx = x + 30.0
            )
            .expect("writing to a String");
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn summary_json(summaries: &[ConditionSummary]) -> String {
    let doc = serde_json::json!({
        "dispersion": "sample standard deviation across seeds (null with a single seed)",
        "de_definition": "mean ego speed over all steps of all episodes, m/s",
        "conditions": summaries,
    });
    serde_json::to_string_pretty(&doc).expect("summary serialises") + "\n"
}

fn plot_path(dir: &Path, s: &ConditionSummary) -> PathBuf {
    dir.join(format!("plot_{}.svg", s.condition.slug()))
}

/// Writes `metrics.csv`, `summary.json` and the plots. Returns the plot
/// paths.
pub fn emit_report(rows: &[MetricRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let csv = write_metrics_csv(rows);
    fs::write(out_dir.join(METRICS_FILE), &csv)?;
    // summarise what was written so a later regeneration is identical
    write_summary_and_plots(&parse_metrics_csv(&csv)?, out_dir)
}

fn write_summary_and_plots(rows: &[MetricRow], dir: &Path) -> Result<Vec<PathBuf>> {
    let summaries = summarize(rows);
    fs::write(dir.join(SUMMARY_FILE), summary_json(&summaries))?;
    summaries
        .iter()
        .map(|s| {
            let p = plot_path(dir, s);
            fs::write(&p, render_svg(s))?;
            Ok(p)
        })
        .collect()
}

/// Rebuilds `summary.json` and the plots from an existing `metrics.csv`.
pub fn regenerate_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_metrics_csv(&dir.join(METRICS_FILE))?;
    write_summary_and_plots(&rows, dir)
}

/// Replaces rows of the same condition and seed, keeping order otherwise.
pub fn merge_rows(existing: Vec<MetricRow>, new: &[MetricRow]) -> Vec<MetricRow> {
    let same = |a: &MetricRow, b: &MetricRow| a.seed == b.seed && a.condition.key() == b.condition.key();
    let mut rows: Vec<MetricRow> = existing
        .into_iter()
        .filter(|r| !new.iter().any(|n| same(r, n)))
        .collect();
    rows.extend_from_slice(new);
    rows
}
