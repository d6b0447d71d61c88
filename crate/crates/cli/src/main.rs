use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use srl_core::data::SynthConfig;
use srl_core::pipeline::{self, RunConfig};
use srl_core::Error;

/// Default for the `out` key when neither the config file nor a flag sets it.
const OUTPUT_ROOT_ENV: &str = "SRL_OUTPUT_ROOT";

const BOOL_KEYS: &[&str] = &[
    "no-value",
    "no-reward-model",
    "no-transition-model",
    "no-contrastive",
    "reward-reweight",
    "clamp-weight",
    "grad-through-zprime",
    "exclude-seen",
];

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value configuration file"),
    );
    RunConfig::KEYS.iter().fold(cmd, |cmd, &key| {
        let arg = Arg::new(key).long(key).value_name("VALUE");
        let arg = if BOOL_KEYS.contains(&key) {
            arg.num_args(0..=1).default_missing_value("true")
        } else {
            arg
        };
        cmd.arg(arg)
    })
}

fn cli() -> Command {
    Command::new("srl")
        .about("Offline contrastive reinforcement learning for sequential recommendation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("preprocess").about("Parse, filter and split a raw log into a dataset cache"),
        ))
        .subcommand(config_args(
            Command::new("train").about("Train one run per seed from a dataset cache"),
        ))
        .subcommand(config_args(
            Command::new("evaluate")
                .about("Rank the full catalog on a held-out split")
                .arg(
                    Arg::new("split")
                        .long("split")
                        .default_value("test")
                        .value_parser(["validation", "test"]),
                )
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_name("FILE")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("evaluate this checkpoint instead of every seed's final one"),
                ),
        ))
        .subcommand(
            Command::new("report")
                .about("Compare finished runs and export loss curves")
                .arg(
                    Arg::new("runs")
                        .required(true)
                        .num_args(1..)
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("run output directories; the first is the baseline"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_name("DIR")
                        .value_parser(clap::value_parser!(PathBuf))
                        .default_value("report"),
                ),
        )
        .subcommand(synth_args(
            Command::new("synth").about("Write a synthetic interaction log with planted next-item structure"),
        ))
}

fn synth_args(cmd: Command) -> Command {
    let num = |name: &'static str| Arg::new(name).long(name).value_name("VALUE");
    cmd.arg(
        Arg::new("out")
            .long("out")
            .required(true)
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf)),
    )
    .arg(num("items"))
    .arg(num("sessions"))
    .arg(num("purchase-rate"))
    .arg(num("branching"))
    .arg(num("follow-prob"))
    .arg(num("min-len"))
    .arg(num("max-len"))
    .arg(num("seed"))
    .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue))
}

fn run_config(m: &ArgMatches) -> Result<RunConfig, Error> {
    let mut base = RunConfig::default();
    if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
        if !root.is_empty() {
            base.out = PathBuf::from(root);
        }
    }
    let overrides: Vec<(String, String)> = RunConfig::KEYS
        .iter()
        .filter_map(|&k| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    base.resolve(m.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides)
}

fn parse_num<T: std::str::FromStr>(m: &ArgMatches, name: &str, default: T) -> Result<T, Error> {
    match m.get_one::<String>(name) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("--{name}: cannot parse {v:?}"))),
        None => Ok(default),
    }
}

fn run(m: &ArgMatches) -> Result<(), Error> {
    match m.subcommand() {
        Some(("preprocess", m)) => {
            let cfg = run_config(m)?;
            let out = pipeline::preprocess(&cfg)?;
            let s = out.stats;
            println!("cache      {}", out.cache.display());
            println!("digest     {}", out.digest);
            println!("sessions   {}", s.sessions);
            println!("items      {}", s.items);
            println!("clicks     {}", s.clicks);
            println!("purchases  {}", s.purchases);
        }
        Some(("train", m)) => {
            let cfg = run_config(m)?;
            let every = (cfg.train.steps / 20).max(1);
            let total = cfg.train.steps;
            let mut progress = |seed: u64, r: &srl_core::mcrl::StepReport| {
                if r.step % every == 0 || r.step == total {
                    eprintln!(
                        "seed {seed} step {}/{total} policy {:.4} combined {:.4} ({:.0} ms)",
                        r.step, r.policy_loss, r.combined, r.elapsed_ms
                    );
                }
            };
            for o in pipeline::train(&cfg, &mut progress)? {
                println!("seed {} -> {}", o.seed, o.checkpoint.display());
            }
        }
        Some(("evaluate", m)) => {
            let cfg = run_config(m)?;
            let split = pipeline::split_name(m.get_one::<String>("split").expect("has default"))?;
            let ckpt = m.get_one::<PathBuf>("checkpoint").map(PathBuf::as_path);
            let report = pipeline::evaluate(&cfg, split, ckpt)?;
            print!("{}", report.to_csv());
        }
        Some(("report", m)) => {
            let runs: Vec<PathBuf> = m.get_many::<PathBuf>("runs").expect("required").cloned().collect();
            let out = m.get_one::<PathBuf>("out").expect("has default");
            let r = pipeline::report(&runs, out)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", r.table);
        }
        Some(("synth", m)) => {
            let d = SynthConfig::default();
            let cfg = SynthConfig {
                items: parse_num(m, "items", d.items)?,
                sessions: parse_num(m, "sessions", d.sessions)?,
                purchase_rate: parse_num(m, "purchase-rate", d.purchase_rate)?,
                branching: parse_num(m, "branching", d.branching)?,
                follow_prob: parse_num(m, "follow-prob", d.follow_prob)?,
                min_len: parse_num(m, "min-len", d.min_len)?,
                max_len: parse_num(m, "max-len", d.max_len)?,
                seed: parse_num(m, "seed", d.seed)?,
                ..d
            };
            let path = m.get_one::<PathBuf>("out").expect("required");
            let s = pipeline::synth(&cfg, path)?;
            if !m.get_flag("quiet") {
                println!("wrote {} ({} sessions, {} clicks, {} purchases)", path.display(), s.sessions, s.clicks, s.purchases);
            }
        }
        _ => unreachable!("subcommand is required"),
    }
    Ok(())
}

/// 1 usage, 2 data, 3 numeric abort.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
