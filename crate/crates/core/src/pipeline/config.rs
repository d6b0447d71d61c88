use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{Behavior, FormatSpec, HeaderMode, SplitConfig};
use crate::error::{Error, Result};
use crate::eval::DEFAULT_KS;
use crate::mcrl::{Ablation, TrainConfig};

/// Everything a pipeline run needs.
///
/// Text form is one `key = value` pair per line; `#` starts a comment. Keys
/// are the kebab-case names listed in [`RunConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    /// `standard` or `retailrocket`.
    pub format: String,
    /// Overrides the preset's behavior tokens, e.g. `view=click,buy=purchase`.
    pub mapping: Option<String>,
    pub delimiter: Option<char>,
    pub header: Option<HeaderMode>,
    pub cache: Option<PathBuf>,
    pub split: SplitConfig,
    /// Ablation preset the individual flags start from.
    pub variant: String,
    pub flags: AblationOverrides,
    pub train: TrainConfig,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub exclude_seen: bool,
    pub ks: Vec<usize>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

/// Per-flag overrides applied on top of the variant preset.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AblationOverrides {
    pub no_value: Option<bool>,
    pub no_reward_model: Option<bool>,
    pub no_transition_model: Option<bool>,
    pub no_contrastive: Option<bool>,
    pub reward_reweight: Option<bool>,
    pub clamp_weight: Option<bool>,
    pub grad_through_zprime: Option<bool>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            format: "standard".into(),
            mapping: None,
            delimiter: None,
            header: None,
            cache: None,
            split: SplitConfig::default(),
            variant: "mcrl".into(),
            flags: AblationOverrides::default(),
            train: TrainConfig::default(),
            checkpoint_every: 0,
            exclude_seen: false,
            ks: DEFAULT_KS.to_vec(),
            out: PathBuf::from("runs"),
            seeds: vec![0],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data",
        "format",
        "mapping",
        "delimiter",
        "header",
        "cache",
        "min-item-freq",
        "min-session-len",
        "split-ratios",
        "data-seed",
        "sample-sessions",
        "variant",
        "no-value",
        "no-reward-model",
        "no-transition-model",
        "no-contrastive",
        "reward-reweight",
        "clamp-weight",
        "grad-through-zprime",
        "gamma",
        "tau-exp",
        "tau-temp",
        "alpha",
        "negatives",
        "batch-size",
        "lr",
        "polyak",
        "steps",
        "dim",
        "encoder",
        "checkpoint-every",
        "exclude-seen",
        "ks",
        "out",
        "seeds",
    ];

    /// Sets one field from its text form. Underscores in `key` are accepted
    /// in place of dashes.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let v = value.trim();
        let k = key.as_str();
        let f = &mut self.flags;
        match k {
            "data" => self.data = Some(PathBuf::from(v)),
            "format" => {
                FormatSpec::preset(v).ok_or_else(|| Error::Config(format!("unknown format {v:?}")))?;
                self.format = v.to_string();
            }
            "mapping" => {
                FormatSpec::parse_mapping(v)?;
                self.mapping = Some(v.to_string());
            }
            "delimiter" => {
                let c = match v {
                    "tab" | "\\t" => '\t',
                    _ if v.chars().count() == 1 => v.chars().next().expect("one char"),
                    _ => return Err(Error::Config(format!("delimiter must be one character, got {v:?}"))),
                };
                self.delimiter = Some(c);
            }
            "header" => {
                self.header = Some(match v {
                    "present" => HeaderMode::Present,
                    "absent" => HeaderMode::Absent,
                    "auto" => HeaderMode::Auto,
                    _ => return Err(Error::Config(format!("header must be present, absent or auto, got {v:?}"))),
                })
            }
            "cache" => self.cache = Some(PathBuf::from(v)),
            "min-item-freq" => self.split.min_item_freq = parse(k, v)?,
            "min-session-len" => self.split.min_session_len = parse(k, v)?,
            "split-ratios" => {
                let r: Vec<u32> = v.split([':', ',']).map(|s| parse(k, s.trim())).collect::<Result<_>>()?;
                self.split.ratios = r
                    .try_into()
                    .map_err(|_| Error::Config(format!("{k}: expected three ratios, got {v:?}")))?;
            }
            "data-seed" => self.split.seed = parse(k, v)?,
            "sample-sessions" => {
                self.split.sample_sessions = match v {
                    "" | "none" | "all" => None,
                    _ => Some(parse(k, v)?),
                }
            }
            "variant" => {
                Ablation::preset(v)?;
                self.variant = v.to_string();
            }
            "no-value" => f.no_value = Some(parse_bool(k, v)?),
            "no-reward-model" => f.no_reward_model = Some(parse_bool(k, v)?),
            "no-transition-model" => f.no_transition_model = Some(parse_bool(k, v)?),
            "no-contrastive" => f.no_contrastive = Some(parse_bool(k, v)?),
            "reward-reweight" => f.reward_reweight = Some(parse_bool(k, v)?),
            "clamp-weight" => f.clamp_weight = Some(parse_bool(k, v)?),
            "grad-through-zprime" => f.grad_through_zprime = Some(parse_bool(k, v)?),
            "gamma" => self.train.gamma = parse(k, v)?,
            "tau-exp" => self.train.tau_exp = parse(k, v)?,
            "tau-temp" => self.train.tau_temp = parse(k, v)?,
            "alpha" => self.train.alpha = parse(k, v)?,
            "negatives" => self.train.negatives = parse(k, v)?,
            "batch-size" => self.train.batch_size = parse(k, v)?,
            "lr" => self.train.lr = parse(k, v)?,
            "polyak" => self.train.polyak = parse(k, v)?,
            "steps" => self.train.steps = parse(k, v)?,
            "dim" => self.train.dim = parse(k, v)?,
            "encoder" => self.train.encoder = parse(k, v)?,
            "checkpoint-every" => self.checkpoint_every = parse(k, v)?,
            "exclude-seen" => self.exclude_seen = parse_bool(k, v)?,
            "ks" => self.ks = parse_list(k, v)?,
            "out" => self.out = PathBuf::from(v),
            "seeds" => self.seeds = parse_list(k, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` text, reporting the offending line on error.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Applies the optional file, then `overrides` in order, on top of `self`.
    pub fn resolve(mut self, file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            self.apply_text(&text)?;
        }
        for (k, v) in overrides {
            self.set(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a non-empty list of positive cutoffs".into()));
        }
        if self.split.ratios.iter().sum::<u32>() == 0 {
            return Err(Error::Config("split ratios sum to zero".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Result<Ablation> {
        let mut a = Ablation::preset(&self.variant)?;
        let f = self.flags;
        let apply = |slot: &mut bool, v: Option<bool>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        apply(&mut a.no_value, f.no_value);
        apply(&mut a.no_reward_model, f.no_reward_model);
        apply(&mut a.no_transition_model, f.no_transition_model);
        apply(&mut a.no_contrastive, f.no_contrastive);
        apply(&mut a.reward_reweight, f.reward_reweight);
        apply(&mut a.clamp_weight, f.clamp_weight);
        apply(&mut a.grad_through_zprime, f.grad_through_zprime);
        Ok(a)
    }

    /// Training settings for one seed.
    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            seed,
            ablation: self.ablation()?,
            ..self.train.clone()
        })
    }

    pub fn format_spec(&self) -> Result<FormatSpec> {
        let mut spec = FormatSpec::preset(&self.format)
            .ok_or_else(|| Error::Config(format!("unknown format {:?}", self.format)))?;
        if let Some(m) = &self.mapping {
            spec.behaviors = FormatSpec::parse_mapping(m)?;
        }
        if let Some(d) = self.delimiter {
            spec.delimiter = d;
        }
        if let Some(h) = self.header {
            spec.header = h;
        }
        Ok(spec)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("dataset.srlf"))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed-{seed}"))
    }

    /// Settings that shape the preprocessed dataset, in canonical text form.
    pub fn data_text(&self) -> Result<String> {
        let spec = self.format_spec()?;
        let behaviors: Vec<String> = spec
            .behaviors
            .iter()
            .map(|(t, b)| format!("{t}={}", b.map(Behavior::as_str).unwrap_or("skip")))
            .collect();
        let s = &self.split;
        Ok(format!(
            "delimiter = {:?}\nheader = {:?}\ncolumns = {:?}\nbehaviors = {}\nmin-item-freq = {}\nmin-session-len = {}\nsplit-ratios = {}\ndata-seed = {}\nsample-sessions = {}\n",
            spec.delimiter,
            spec.header,
            spec.columns,
            behaviors.join(","),
            s.min_item_freq,
            s.min_session_len,
            join(&s.ratios),
            s.seed,
            s.sample_sessions.map(|n| n.to_string()).unwrap_or_else(|| "all".into()),
        ))
    }

    /// Canonical text of every setting that affects trained parameters. Seeds,
    /// paths and evaluation settings are left out.
    pub fn digest_text(&self) -> Result<String> {
        let t = &self.train;
        let a = self.ablation()?;
        Ok(format!(
            "{}gamma = {}\ntau-exp = {}\ntau-temp = {}\nalpha = {}\nnegatives = {}\nbatch-size = {}\nlr = {}\npolyak = {}\nsteps = {}\ndim = {}\nencoder = {}\nno-value = {}\nno-reward-model = {}\nno-transition-model = {}\nno-contrastive = {}\nreward-reweight = {}\nclamp-weight = {}\ngrad-through-zprime = {}\n",
            self.data_text()?,
            t.gamma,
            t.tau_exp,
            t.tau_temp,
            t.alpha,
            t.negatives,
            t.batch_size,
            t.lr,
            t.polyak,
            t.steps,
            t.dim,
            t.encoder,
            a.no_value,
            a.no_reward_model,
            a.no_transition_model,
            a.no_contrastive,
            a.reward_reweight,
            a.clamp_weight,
            a.grad_through_zprime,
        ))
    }

    /// SHA-256 of [`RunConfig::digest_text`], hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.digest_text()?.as_bytes())))
    }

    /// Full resolved configuration as re-readable `key = value` text.
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        if let Some(d) = &self.data {
            put("data", d.display().to_string());
        }
        put("format", self.format.clone());
        let spec = self.format_spec()?;
        let behaviors: Vec<String> = spec
            .behaviors
            .iter()
            .map(|(t, b)| format!("{t}={}", b.map(Behavior::as_str).unwrap_or("skip")))
            .collect();
        put("mapping", behaviors.join(","));
        put(
            "delimiter",
            if spec.delimiter == '\t' { "tab".into() } else { spec.delimiter.to_string() },
        );
        put("header", format!("{:?}", spec.header).to_lowercase());
        put("cache", self.cache_path().display().to_string());
        let s = &self.split;
        put("min-item-freq", s.min_item_freq.to_string());
        put("min-session-len", s.min_session_len.to_string());
        put("split-ratios", s.ratios.map(|r| r.to_string()).join(":"));
        put("data-seed", s.seed.to_string());
        put(
            "sample-sessions",
            s.sample_sessions.map(|n| n.to_string()).unwrap_or_else(|| "all".into()),
        );
        put("variant", self.variant.clone());
        let a = self.ablation()?;
        put("no-value", a.no_value.to_string());
        put("no-reward-model", a.no_reward_model.to_string());
        put("no-transition-model", a.no_transition_model.to_string());
        put("no-contrastive", a.no_contrastive.to_string());
        put("reward-reweight", a.reward_reweight.to_string());
        put("clamp-weight", a.clamp_weight.to_string());
        put("grad-through-zprime", a.grad_through_zprime.to_string());
        let t = &self.train;
        put("gamma", t.gamma.to_string());
        put("tau-exp", t.tau_exp.to_string());
        put("tau-temp", t.tau_temp.to_string());
        put("alpha", t.alpha.to_string());
        put("negatives", t.negatives.to_string());
        put("batch-size", t.batch_size.to_string());
        put("lr", t.lr.to_string());
        put("polyak", t.polyak.to_string());
        put("steps", t.steps.to_string());
        put("dim", t.dim.to_string());
        put("encoder", t.encoder.to_string());
        put("checkpoint-every", self.checkpoint_every.to_string());
        put("exclude-seen", self.exclude_seen.to_string());
        put("ks", join(&self.ks));
        put("out", self.out.display().to_string());
        put("seeds", join(&self.seeds));
        Ok(out)
    }
}
