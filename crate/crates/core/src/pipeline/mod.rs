//! End-to-end commands: preprocess, train, evaluate, report and synth.
//!
//! Layout under the output directory:
//!
//! ```text
//! dataset.srlf                  preprocessed split (unless `cache` is set)
//! seed-<n>/config.txt           resolved configuration
//! seed-<n>/run.json             digests of the config and dataset
//! seed-<n>/steps.jsonl          one StepReport per line
//! seed-<n>/checkpoint.srlc      final parameters
//! seed-<n>/checkpoint-<k>.srlc  periodic parameters
//! seed-<n>/metrics-<split>.json per-seed metrics (and .csv)
//! metrics-<split>.json          mean over seeds (and .csv)
//! ```

mod config;
mod report;

pub use config::{AblationOverrides, RunConfig};
pub use report::{report, ReportOutcome};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{filter_and_split, parse_events, write_events, DatasetCache, DatasetStats, SplitName, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{aggregate_reports, evaluate as evaluate_policy, MetricsReport};
use crate::mcrl::{load_checkpoint, read_header, write_checkpoint, StepReport, TrainData, Trainer};

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn split_name(s: &str) -> Result<SplitName> {
    match s {
        "train" => Ok(SplitName::Train),
        "validation" | "valid" | "val" => Ok(SplitName::Validation),
        "test" => Ok(SplitName::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}; expected validation or test"))),
    }
}

fn split_label(s: SplitName) -> &'static str {
    match s {
        SplitName::Train => "train",
        SplitName::Validation => "validation",
        SplitName::Test => "test",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessOutcome {
    pub cache: PathBuf,
    pub digest: String,
    pub stats: DatasetStats,
}

/// Parses the raw log, filters, splits and writes the `SRLF1` cache.
///
/// The cache digest hashes the raw bytes together with every setting that
/// shapes the split, so identical inputs give byte-identical caches.
pub fn preprocess(cfg: &RunConfig) -> Result<PreprocessOutcome> {
    let path = cfg
        .data
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset path; set `data`".into()))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let events = parse_events(&bytes[..], &cfg.format_spec()?)?;
    let split = filter_and_split(&events, &cfg.split)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    h.update(cfg.data_text()?.as_bytes());
    let digest = hex::encode(h.finalize());
    let stats = split.stats();
    let cache = cfg.cache_path();
    let c = DatasetCache { digest: digest.clone(), split };
    write_file(&cache, &c.to_bytes())?;
    Ok(PreprocessOutcome { cache, digest, stats })
}

/// Digests recorded next to each run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub dataset_digest: String,
    pub seed: u64,
    pub steps: u64,
}

#[derive(Serialize)]
struct StepLine<'a> {
    config_digest: &'a str,
    seed: u64,
    #[serde(flatten)]
    report: &'a StepReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub last: Option<StepReport>,
}

/// Trains one run per seed. `on_step` sees every report as it is produced.
pub fn train(cfg: &RunConfig, on_step: &mut dyn FnMut(u64, &StepReport)) -> Result<Vec<TrainOutcome>> {
    let cache = DatasetCache::read(&cfg.cache_path())?;
    let digest = cfg.digest()?;
    let data = TrainData::new(&cache.split.train, cache.split.item_count)?;
    let mut outcomes = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        create_dir(&dir)?;
        let text = format!("# config-digest: {digest}\n{}", cfg.to_text()?);
        write_file(&dir.join("config.txt"), text.as_bytes())?;
        let manifest = RunManifest {
            config_digest: digest.clone(),
            dataset_digest: cache.digest.clone(),
            seed,
            steps: cfg.train.steps,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&dir.join("run.json"), json.as_bytes())?;

        let mut trainer = Trainer::new(cfg.train_config(seed)?, data.clone())?;
        let log_path = dir.join("steps.jsonl");
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut last = None;
        for _ in 0..cfg.train.steps {
            let r = trainer.step()?;
            let line = StepLine {
                config_digest: &digest,
                seed,
                report: &r,
            };
            serde_json::to_writer(&mut log, &line).expect("step line serializes");
            log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
            on_step(seed, &r);
            if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && r.step < cfg.train.steps {
                write_checkpoint(&dir.join(format!("checkpoint-{}.srlc", r.step)), &trainer.nets, &digest, r.step)?;
            }
            last = Some(r);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let checkpoint = dir.join("checkpoint.srlc");
        write_checkpoint(&checkpoint, &trainer.nets, &digest, trainer.steps_done())?;
        outcomes.push(TrainOutcome {
            seed,
            dir,
            checkpoint,
            last,
        });
    }
    Ok(outcomes)
}

fn write_report(stem: &Path, report: &MetricsReport) -> Result<()> {
    report.write_json(&stem.with_extension("json"))?;
    write_file(&stem.with_extension("csv"), report.to_csv().as_bytes())
}

/// Evaluates the final checkpoint of every seed, or `checkpoint` alone when
/// given, and writes per-seed and aggregated reports.
///
/// Checkpoints trained under a different configuration, or runs recorded
/// against a different dataset cache, are refused.
pub fn evaluate(cfg: &RunConfig, split: SplitName, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let cache = DatasetCache::read(&cfg.cache_path())?;
    let digest = cfg.digest()?;
    let label = split_label(split);
    let sessions = cache.split.sessions(split);
    let targets: Vec<(u64, PathBuf)> = match checkpoint {
        Some(p) => vec![(cfg.seeds[0], p.to_path_buf())],
        None => cfg
            .seeds
            .iter()
            .map(|&s| (s, cfg.seed_dir(s).join("checkpoint.srlc")))
            .collect(),
    };
    let mut reports = Vec::with_capacity(targets.len());
    for (seed, path) in &targets {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, _) = read_header(&bytes)?;
        if header.config_digest != digest {
            return Err(Error::DigestMismatch {
                expected: digest,
                found: header.config_digest,
            });
        }
        if let Some(dir) = path.parent() {
            let manifest_path = dir.join("run.json");
            if let Ok(text) = std::fs::read_to_string(&manifest_path) {
                let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
                    kind: "run manifest",
                    msg: e.to_string(),
                })?;
                if m.dataset_digest != cache.digest {
                    return Err(Error::DigestMismatch {
                        expected: cache.digest.clone(),
                        found: m.dataset_digest,
                    });
                }
            }
        }
        let (_, nets) = load_checkpoint(&bytes, &cfg.train_config(*seed)?)?;
        let mut report = evaluate_policy(&nets.policy, sessions, &cfg.ks, cfg.exclude_seen)?;
        report.seeds = vec![*seed];
        report.config_digest = digest.clone();
        report.split = label.to_string();
        if checkpoint.is_none() {
            write_report(&cfg.seed_dir(*seed).join(format!("metrics-{label}")), &report)?;
        }
        reports.push(report);
    }
    let agg = aggregate_reports(&reports)?;
    create_dir(&cfg.out)?;
    write_report(&cfg.out.join(format!("metrics-{label}")), &agg)?;
    Ok(agg)
}

/// Writes a synthetic interaction log in the standard CSV format.
pub fn synth(synth: &SynthConfig, path: &Path) -> Result<DatasetStats> {
    let (events, _) = synth.generate()?;
    let mut buf = Vec::new();
    write_events(&mut buf, &events).map_err(|e| Error::io(path, e))?;
    write_file(path, &buf)?;
    let mut stats = DatasetStats {
        sessions: synth.sessions,
        items: synth.items as usize,
        clicks: 0,
        purchases: 0,
    };
    for e in &events {
        match e.behavior {
            crate::data::Behavior::Click => stats.clicks += 1,
            crate::data::Behavior::Purchase => stats.purchases += 1,
        }
    }
    Ok(stats)
}
