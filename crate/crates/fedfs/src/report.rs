//! Artifact persistence and the human-readable report.
//!
//! CSV files are the canonical metric outputs: fixed header, canonical row
//! order, shortest-round-trip float formatting — identical configs yield
//! byte-identical files. Wall-clock timings are quarantined in
//! `experiment_log.json`; `summary.json` holds only deterministic content.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::convergence::BoundsReport;
use crate::error::{Error, Result};
use crate::eval::ModeSummary;
use crate::experiment::{
    ConvergenceReport, ExperimentConfig, ExperimentResult, ExperimentSummary, HistogramRow,
    MetricsRow, Preset, RunOutcome,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTOGRAMS_FILE: &str = "histograms.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOG_FILE: &str = "experiment_log.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Canonical metrics CSV: one row per client per metric per operating point.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (
            &a.run,
            a.seed,
            &a.mode,
            a.client_id,
            &a.metric,
            &a.operating_point,
        )
            .cmp(&(
                &b.run,
                b.seed,
                &b.mode,
                b.client_id,
                &b.metric,
                &b.operating_point,
            ))
    });
    let mut out =
        String::from("run,seed,mode,client_id,identity_id,metric,operating_point,value\n");
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.run,
            r.seed,
            r.mode,
            r.client_id,
            r.identity_id,
            r.metric,
            r.operating_point,
            fmt_value(r.value)
        );
    }
    out
}

pub fn histograms_csv(rows: &[HistogramRow]) -> String {
    let mut sorted: Vec<&HistogramRow> = rows.iter().collect();
    sorted.sort_by(|a, b| {
        (&a.run, a.seed, a.kind, a.bin_lo.to_bits()).cmp(&(
            &b.run,
            b.seed,
            b.kind,
            b.bin_lo.to_bits(),
        ))
    });
    let mut out = String::from("run,seed,kind,bin_lo,bin_hi,mass\n");
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.run, r.seed, r.kind, r.bin_lo, r.bin_hi, r.mass
        );
    }
    out
}

/// The deterministic slice of the results (no wall-clock content).
#[derive(Serialize)]
struct StableSummary<'a> {
    preset: &'a str,
    runs: Vec<StableRun<'a>>,
}

#[derive(Serialize)]
struct StableRun<'a> {
    name: &'a str,
    participation_rate: f64,
    use_reg_loss: bool,
    use_adaptive_soft_label: bool,
    median_auroc: f64,
    median_tpir: &'a [(f64, Option<f64>)],
    median_overlap: f64,
    median_intra_class_variance: f64,
    per_seed: Vec<StableSeed<'a>>,
}

#[derive(Serialize)]
struct StableSeed<'a> {
    seed: u64,
    summary: &'a ModeSummary,
    convergence: &'a Option<ConvergenceReport>,
}

fn stable_view(summary: &ExperimentSummary) -> StableSummary<'_> {
    StableSummary {
        preset: &summary.preset,
        runs: summary
            .runs
            .iter()
            .map(|r| StableRun {
                name: &r.spec.name,
                participation_rate: r.spec.participation_rate,
                use_reg_loss: r.spec.use_reg_loss,
                use_adaptive_soft_label: r.spec.use_adaptive_soft_label,
                median_auroc: r.median_auroc,
                median_tpir: &r.median_tpir,
                median_overlap: r.median_overlap,
                median_intra_class_variance: r.median_intra_class_variance,
                per_seed: r
                    .per_seed
                    .iter()
                    .map(|s| StableSeed {
                        seed: s.seed,
                        summary: &s.summary,
                        convergence: &s.convergence,
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Simple ROC polyline rendering; CSV stays the canonical output.
pub fn roc_svg(title: &str, mated: &[f64], non_mated: &[f64]) -> String {
    let (w, h, margin) = (480.0, 480.0, 48.0);
    let mut thresholds: Vec<f64> = mated.iter().chain(non_mated).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![(0.0f64, 0.0f64)];
    for t in thresholds {
        let tpr = mated.iter().filter(|&&s| s >= t).count() as f64 / mated.len() as f64;
        let fpr = non_mated.iter().filter(|&&s| s >= t).count() as f64 / non_mated.len() as f64;
        points.push((fpr, tpr));
    }
    points.push((1.0, 1.0));

    let map = |p: (f64, f64)| {
        (
            margin + p.0 * (w - 2.0 * margin),
            h - margin - p.1 * (h - 2.0 * margin),
        )
    };
    let path: Vec<String> = points
        .iter()
        .map(|&p| {
            let (x, y) = map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let (x0, y0) = map((0.0, 0.0));
    let (x1, y1) = map((1.0, 1.0));
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n",
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"#bbbbbb\" ",
            "stroke-dasharray=\"6,4\"/>\n",
            "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\" points=\"{pts}\"/>\n",
            "<text x=\"{tx}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
            "<text x=\"{cx}\" y=\"{bx}\" font-family=\"sans-serif\" font-size=\"12\">FPR</text>\n",
            "<text x=\"12\" y=\"{cy}\" font-family=\"sans-serif\" font-size=\"12\" ",
            "transform=\"rotate(-90 12 {cy})\">TPR</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        x0 = x0,
        y0 = y0,
        x1 = x1,
        y1 = y1,
        pts = path.join(" "),
        title = title,
        tx = margin,
        cx = w / 2.0,
        bx = h - 12.0,
        cy = h / 2.0,
    )
}

/// Writes every artifact of a finished experiment into `out_dir`.
pub fn write_artifacts(
    out_dir: &Path,
    config: &ExperimentConfig,
    preset: Preset,
    result: &ExperimentResult,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let echo = format!(
        "preset = \"{}\"\n{}",
        preset.label(),
        toml::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?
    );
    std::fs::write(out_dir.join(CONFIG_ECHO_FILE), echo)?;
    std::fs::write(out_dir.join(METRICS_FILE), metrics_csv(&result.metrics))?;
    std::fs::write(
        out_dir.join(HISTOGRAMS_FILE),
        histograms_csv(&result.histograms),
    )?;
    std::fs::write(
        out_dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&stable_view(&result.summary))?,
    )?;
    std::fs::write(
        out_dir.join(LOG_FILE),
        serde_json::to_string_pretty(&result.summary)?,
    )?;
    if config.emit_svg {
        for (run, seed, mated, non_mated) in &result.roc_scores {
            let name = format!("roc_{run}_seed{seed}.svg");
            std::fs::write(
                out_dir.join(&name),
                roc_svg(&format!("{run} (seed {seed})"), mated, non_mated),
            )?;
        }
    }
    Ok(())
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path.display().to_string()))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

/// Renders the summary of a finished experiment directory as a table in the
/// shape of the AUROC / participation-rate comparisons.
pub fn render_report(dir: &Path) -> Result<String> {
    let summary_path = require(dir.join(SUMMARY_FILE))?;
    let text = std::fs::read_to_string(summary_path)?;
    let summary: serde_json::Value = serde_json::from_str(&text)?;

    let preset = summary["preset"].as_str().unwrap_or("?");
    let runs = summary["runs"]
        .as_array()
        .ok_or_else(|| Error::Validation("summary.json has no runs".into()))?;

    let baseline_auroc = runs
        .iter()
        .find(|r| r["name"] == "pretrained")
        .and_then(|r| r["median_auroc"].as_f64());

    let mut out = String::new();
    let _ = writeln!(out, "preset: {preset}");
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>14} {:>9}  median TPIR@FPIR",
        "run", "rate", "median AUROC", "vs pre."
    );
    for r in runs {
        let name = r["name"].as_str().unwrap_or("?");
        let rate = r["participation_rate"].as_f64().unwrap_or(0.0);
        let auroc = r["median_auroc"].as_f64();
        let delta = match (auroc, baseline_auroc) {
            (Some(a), Some(b)) if name != "pretrained" && b > 0.0 => {
                format!("{:+.1}%", (a - b) / b * 100.0)
            }
            _ => "-".into(),
        };
        let tpir: Vec<String> = r["median_tpir"]
            .as_array()
            .map(|points| {
                points
                    .iter()
                    .map(|p| {
                        let f = p[0].as_f64().unwrap_or(f64::NAN);
                        let v = p[1].as_f64();
                        format!("@{f}={}", fmt_opt(v))
                    })
                    .collect()
            })
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>14} {:>9}  {}",
            name,
            if rate > 0.0 {
                format!("{rate}")
            } else {
                "-".into()
            },
            fmt_opt(auroc),
            delta,
            tpir.join(" ")
        );
    }

    // convergence one-liner for the first run that has a report
    'outer: for r in runs {
        if let Some(seeds) = r["per_seed"].as_array() {
            for s in seeds {
                let c = &s["convergence"];
                if c.is_object() {
                    let _ = writeln!(
                        out,
                        "convergence (run {}, seed {}): L̂_global={:.4} L̂_personal={:.4} \
                         bound satisfaction w={:.2} θ={:.2}",
                        r["name"].as_str().unwrap_or("?"),
                        s["seed"],
                        c["lipschitz_global"].as_f64().unwrap_or(f64::NAN),
                        c["lipschitz_personal"].as_f64().unwrap_or(f64::NAN),
                        c["bounds"]["global_bound_fraction"]
                            .as_f64()
                            .unwrap_or(f64::NAN),
                        c["bounds"]["personal_bound_fraction"]
                            .as_f64()
                            .unwrap_or(f64::NAN),
                    );
                    break 'outer;
                }
            }
        }
    }
    Ok(out)
}

/// Re-serializable convergence section embedded in the experiment log.
#[allow(dead_code)]
fn _types_used(_: &BoundsReport, _: &RunOutcome) {}
