use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    /// Events ranked within `k` (a mean across seeds once aggregated).
    pub hits: f64,
    /// `None` when the behavior has no events.
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    pub events: usize,
    pub at: Vec<KMetrics>,
}

impl BehaviorMetrics {
    pub fn get(&self, k: usize) -> Option<&KMetrics> {
        self.at.iter().find(|m| m.k == k)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Seeds whose runs contributed; one entry for a single run.
    pub seeds: Vec<u64>,
    pub config_digest: String,
    pub split: String,
    pub ks: Vec<usize>,
    pub click: BehaviorMetrics,
    pub purchase: BehaviorMetrics,
    /// `0.2 * click hits + 1.0 * purchase hits` per entry of `ks`.
    pub cumulative_reward: Vec<f64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(text).map_err(|e| Error::Format {
            kind: "report",
            msg: e.to_string(),
        })?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Format {
                kind: "report",
                msg: format!("schema version {} (expected {SCHEMA_VERSION})", r.schema_version),
            });
        }
        Ok(r)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// One row per (behavior, K).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("behavior,k,events,hits,hr,ndcg,cumulative_reward\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (name, b) in [("click", &self.click), ("purchase", &self.purchase)] {
            for (i, m) in b.at.iter().enumerate() {
                let cr = self.cumulative_reward.get(i).copied().unwrap_or(f64::NAN);
                let _ = writeln!(
                    out,
                    "{name},{},{},{},{},{},{cr}",
                    m.k,
                    b.events,
                    m.hits,
                    opt(m.hr),
                    opt(m.ndcg)
                );
            }
        }
        out
    }

    pub fn hr(&self, purchase: bool, k: usize) -> Option<f64> {
        let b = if purchase { &self.purchase } else { &self.click };
        b.get(k).and_then(|m| m.hr)
    }

    pub fn ndcg(&self, purchase: bool, k: usize) -> Option<f64> {
        let b = if purchase { &self.purchase } else { &self.click };
        b.get(k).and_then(|m| m.ndcg)
    }
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Element-wise mean of reports over seeds. All reports must share the
/// cutoffs, split and config digest.
pub fn aggregate_reports(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or(Error::EmptyDataset)?;
    for r in reports {
        if r.ks != first.ks || r.split != first.split || r.config_digest != first.config_digest {
            return Err(Error::Config(
                "cannot aggregate reports with different cutoffs, splits or configs".into(),
            ));
        }
    }
    let n = reports.len() as f64;
    let behavior = |pick: fn(&MetricsReport) -> &BehaviorMetrics| BehaviorMetrics {
        events: pick(first).events,
        at: (0..first.ks.len())
            .map(|i| KMetrics {
                k: first.ks[i],
                hits: reports.iter().map(|r| pick(r).at[i].hits).sum::<f64>() / n,
                hr: mean_present(reports.iter().map(|r| pick(r).at[i].hr)),
                ndcg: mean_present(reports.iter().map(|r| pick(r).at[i].ndcg)),
            })
            .collect(),
    };
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        config_digest: first.config_digest.clone(),
        split: first.split.clone(),
        ks: first.ks.clone(),
        click: behavior(|r| &r.click),
        purchase: behavior(|r| &r.purchase),
        cumulative_reward: (0..first.ks.len())
            .map(|i| reports.iter().map(|r| r.cumulative_reward[i]).sum::<f64>() / n)
            .collect(),
    })
}
