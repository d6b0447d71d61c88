use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::MetricsReport;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutcome {
    /// Markdown comparison table; the first loaded run is the baseline.
    pub table: String,
    /// Runs that were skipped and why.
    pub warnings: Vec<String>,
    pub table_path: PathBuf,
    pub curves_path: PathBuf,
}

struct Run {
    name: String,
    report: MetricsReport,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_run(dir: &Path) -> std::result::Result<Run, String> {
    for split in ["test", "validation"] {
        let path = dir.join(format!("metrics-{split}.json"));
        if path.exists() {
            return MetricsReport::read_json(&path)
                .map(|report| Run {
                    name: run_name(dir),
                    report,
                })
                .map_err(|e| format!("{}: {e}", path.display()));
        }
    }
    Err(format!("{}: no metrics-test.json or metrics-validation.json", dir.display()))
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into())
}

fn fmt_delta(v: Option<f64>, base: Option<f64>) -> String {
    match (v, base) {
        (Some(a), Some(b)) => format!("{:+.4}", a - b),
        _ => "n/a".into(),
    }
}

/// Metric columns as (header, value) pairs in a fixed order.
fn columns(r: &MetricsReport) -> Vec<(String, Option<f64>)> {
    let mut cols = Vec::new();
    for (name, b) in [("purchase", &r.purchase), ("click", &r.click)] {
        for m in &b.at {
            cols.push((format!("{name} HR@{}", m.k), m.hr));
            cols.push((format!("{name} NDCG@{}", m.k), m.ndcg));
        }
    }
    for (k, cr) in r.ks.iter().zip(&r.cumulative_reward) {
        cols.push((format!("CR@{k}"), Some(*cr)));
    }
    cols
}

fn table(runs: &[Run]) -> String {
    let base = columns(&runs[0].report);
    let mut out = String::new();
    let header: Vec<&str> = base.iter().map(|(h, _)| h.as_str()).collect();
    let _ = writeln!(out, "| run | split | seeds | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|---|---|{}", "---|".repeat(header.len()));
    for run in runs {
        let vals: Vec<String> = columns(&run.report).iter().map(|(_, v)| fmt(*v)).collect();
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} |",
            run.name,
            run.report.split,
            run.report.seeds.len(),
            vals.join(" | ")
        );
    }
    if runs.len() > 1 {
        let _ = writeln!(out, "\nDifference from {}:\n", runs[0].name);
        let _ = writeln!(out, "| run | {} |", header.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(header.len()));
        for run in &runs[1..] {
            let cols = columns(&run.report);
            let vals: Vec<String> = cols
                .iter()
                .zip(&base)
                .map(|((_, v), (_, b))| fmt_delta(*v, *b))
                .collect();
            let _ = writeln!(out, "| {} | {} |", run.name, vals.join(" | "));
        }
    }
    out
}

#[derive(Deserialize)]
struct CurvePoint {
    seed: u64,
    step: u64,
    value_loss: Option<f64>,
    policy_loss: f64,
    reward_loss: Option<f64>,
    transition_loss: Option<f64>,
    combined: f64,
    mean_weight: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Appends the step logs under `dir` to the curves CSV.
fn append_curves(out: &mut String, name: &str, dir: &Path, warnings: &mut Vec<String>) {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return;
    };
    let mut seeds: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("steps.jsonl").is_file())
        .collect();
    seeds.sort();
    for seed_dir in seeds {
        let path = seed_dir.join("steps.jsonl");
        let Ok(text) = std::fs::read_to_string(&path) else {
            warnings.push(format!("{}: unreadable", path.display()));
            continue;
        };
        for (n, line) in text.lines().enumerate() {
            match serde_json::from_str::<CurvePoint>(line) {
                Ok(p) => {
                    let _ = writeln!(
                        out,
                        "{name},{},{},{},{},{},{},{},{}",
                        p.seed,
                        p.step,
                        opt(p.value_loss),
                        p.policy_loss,
                        opt(p.reward_loss),
                        opt(p.transition_loss),
                        p.combined,
                        p.mean_weight
                    );
                }
                Err(e) => {
                    warnings.push(format!("{}:{}: {e}", path.display(), n + 1));
                    break;
                }
            }
        }
    }
}

/// Builds `report.md` and `curves.csv` in `out` from completed run directories.
///
/// Runs without a readable metrics report are skipped with a warning.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    let mut warnings = Vec::new();
    let mut runs = Vec::new();
    for dir in run_dirs {
        match load_run(dir) {
            Ok(r) => runs.push(r),
            Err(w) => warnings.push(w),
        }
    }
    if runs.is_empty() {
        return Err(Error::Config(format!(
            "no run has a readable metrics report: {}",
            warnings.join("; ")
        )));
    }
    let table = table(&runs);
    let mut curves = String::from("run,seed,step,value_loss,policy_loss,reward_loss,transition_loss,combined,mean_weight\n");
    for dir in run_dirs {
        if runs.iter().any(|r| r.name == run_name(dir)) {
            append_curves(&mut curves, &run_name(dir), dir, &mut warnings);
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let table_path = out.join("report.md");
    let curves_path = out.join("curves.csv");
    std::fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    std::fs::write(&curves_path, &curves).map_err(|e| Error::io(&curves_path, e))?;
    Ok(ReportOutcome {
        table,
        warnings,
        table_path,
        curves_path,
    })
}
