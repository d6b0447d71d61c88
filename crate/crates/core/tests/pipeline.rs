use std::path::{Path, PathBuf};

use srl_core::data::{DatasetCache, SplitName};
use srl_core::eval::{aggregate_reports, MetricsReport};
use srl_core::mcrl::{read_checkpoint, Nets};
use srl_core::pipeline::{self, RunConfig};
use srl_core::Error;

/// Ten sessions. Item 999 occurs twice and session 10 is too short, so the
/// filtered log keeps 9 sessions over 4 items with 24 clicks and 4 purchases.
const TOY_LOG: &str = "\
session_id,timestamp,item_id,behavior
1,1,100,click
1,2,101,click
1,3,102,purchase
2,1,101,click
2,2,102,click
2,3,103,click
3,1,100,click
3,2,103,click
3,3,101,purchase
4,1,102,click
4,2,100,click
4,3,999,click
4,4,101,click
5,1,103,click
5,2,102,click
5,3,100,click
6,1,100,click
6,2,101,click
6,3,100,purchase
7,1,101,click
7,2,103,click
7,3,102,click
7,4,100,click
8,1,102,click
8,2,101,click
8,3,103,purchase
9,1,103,click
9,2,100,click
9,3,102,click
10,1,999,click
10,2,100,click
";

fn toy_config(root: &Path, out: &str, extra: &[(&str, &str)]) -> RunConfig {
    let data = root.join("toy.csv");
    if !data.exists() {
        std::fs::write(&data, TOY_LOG).unwrap();
    }
    let mut pairs: Vec<(String, String)> = vec![
        ("data".into(), data.display().to_string()),
        ("out".into(), root.join(out).display().to_string()),
        ("dim".into(), "6".into()),
        ("batch-size".into(), "8".into()),
        ("negatives".into(), "2".into()),
        ("steps".into(), "4".into()),
    ];
    pairs.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::default().resolve(None, &pairs).unwrap()
}

fn no_steps(_: u64, _: &srl_core::mcrl::StepReport) {}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn preprocess_matches_the_hand_count_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "run", &[]);
    let out = pipeline::preprocess(&cfg).unwrap();
    let s = out.stats;
    assert_eq!((s.sessions, s.items, s.clicks, s.purchases), (9, 4, 24, 4));
    let first = read(&out.cache);
    assert_eq!(&first[..5], b"SRLF1");
    let again = pipeline::preprocess(&cfg).unwrap();
    assert_eq!(read(&again.cache), first);
    assert_eq!(again.digest, out.digest);
    let cache = DatasetCache::read(&out.cache).unwrap();
    assert_eq!(cache.split.remap, vec![100, 101, 102, 103]);
    assert_eq!((cache.split.train.len(), cache.split.validation.len(), cache.split.test.len()), (7, 0, 2));

    let other = toy_config(dir.path(), "run", &[("data-seed", "5")]);
    assert_ne!(pipeline::preprocess(&other).unwrap().digest, out.digest);
}

#[test]
fn preprocess_reports_missing_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(dir.path(), "run", &[]);
    cfg.data = Some(dir.path().join("absent.csv"));
    assert!(matches!(pipeline::preprocess(&cfg), Err(Error::Io { .. })));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "1,1,100,click\n1,x,101,click\n").unwrap();
    cfg.data = Some(bad);
    match pipeline::preprocess(&cfg) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "run", &[("steps", "0"), ("seeds", "7")]);
    pipeline::preprocess(&cfg).unwrap();
    let runs = pipeline::train(&cfg, &mut no_steps).unwrap();
    assert_eq!(runs.len(), 1);
    let tc = cfg.train_config(7).unwrap();
    let (header, nets) = read_checkpoint(&runs[0].checkpoint, &tc).unwrap();
    assert_eq!(header.step, 0);
    assert_eq!(header.config_digest, cfg.digest().unwrap());
    assert_eq!(nets, Nets::init(&tc, 4).unwrap());
}

fn step_lines(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("steps.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn step_log_lists_only_active_losses() {
    let dir = tempfile::tempdir().unwrap();
    for (variant, models) in [("mcrl", true), ("none", false)] {
        let cfg = toy_config(dir.path(), variant, &[("variant", variant)]);
        pipeline::preprocess(&cfg).unwrap();
        let runs = pipeline::train(&cfg, &mut no_steps).unwrap();
        let lines = step_lines(&runs[0].dir);
        assert_eq!(lines.len(), 4);
        for (i, l) in lines.iter().enumerate() {
            assert_eq!(l["step"], i as u64 + 1);
            assert_eq!(l["config_digest"], cfg.digest().unwrap().as_str());
            assert!(l.get("value_loss").is_some());
            assert_eq!(l.get("reward_loss").is_some(), models, "{variant}");
            assert_eq!(l.get("transition_loss").is_some(), models, "{variant}");
        }
    }
}

#[test]
fn seeds_get_independent_runs_and_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "run", &[("seeds", "1,2"), ("checkpoint-every", "2")]);
    pipeline::preprocess(&cfg).unwrap();
    let runs = pipeline::train(&cfg, &mut no_steps).unwrap();
    assert_eq!(runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2]);
    assert_ne!(read(&runs[0].checkpoint), read(&runs[1].checkpoint));
    for r in &runs {
        assert!(r.dir.join("checkpoint-2.srlc").is_file());
        assert!(!r.dir.join("checkpoint-4.srlc").exists());
        let text = std::fs::read_to_string(r.dir.join("config.txt")).unwrap();
        assert!(text.contains(&cfg.digest().unwrap()));
        let mut back = RunConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back.digest().unwrap(), cfg.digest().unwrap());
    }
}

#[test]
fn evaluate_writes_reports_and_refuses_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "run", &[("seeds", "1,2")]);
    pipeline::preprocess(&cfg).unwrap();
    pipeline::train(&cfg, &mut no_steps).unwrap();
    let agg = pipeline::evaluate(&cfg, SplitName::Test, None).unwrap();
    assert_eq!(agg.seeds, vec![1, 2]);
    assert_eq!(agg.split, "test");
    assert_eq!(agg.config_digest, cfg.digest().unwrap());
    let per_seed: Vec<MetricsReport> = [1, 2]
        .iter()
        .map(|s| MetricsReport::read_json(&cfg.seed_dir(*s).join("metrics-test.json")).unwrap())
        .collect();
    assert_eq!(aggregate_reports(&per_seed).unwrap(), agg);
    assert_eq!(MetricsReport::read_json(&cfg.out.join("metrics-test.json")).unwrap(), agg);
    let csv = std::fs::read_to_string(cfg.out.join("metrics-test.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    let changed = toy_config(dir.path(), "run", &[("seeds", "1,2"), ("lr", "0.001")]);
    assert!(matches!(
        pipeline::evaluate(&changed, SplitName::Test, None),
        Err(Error::DigestMismatch { .. })
    ));

    // A run recorded against another dataset cache is refused too.
    let resplit = toy_config(dir.path(), "run", &[("seeds", "1,2"), ("cache", "other.srlf")]);
    let mut resplit = resplit;
    resplit.cache = Some(dir.path().join("other.srlf"));
    resplit.split.min_item_freq = 3;
    std::fs::write(dir.path().join("toy2.csv"), TOY_LOG.replace("9,3,102,click", "9,3,101,click")).unwrap();
    resplit.data = Some(dir.path().join("toy2.csv"));
    pipeline::preprocess(&resplit).unwrap();
    assert!(matches!(
        pipeline::evaluate(&resplit, SplitName::Test, None),
        Err(Error::DigestMismatch { .. })
    ));
}

#[test]
fn aggregating_identical_reports_is_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config(dir.path(), "run", &[]);
    pipeline::preprocess(&cfg).unwrap();
    pipeline::train(&cfg, &mut no_steps).unwrap();
    let r = pipeline::evaluate(&cfg, SplitName::Test, None).unwrap();
    let agg = aggregate_reports(&[r.clone(), r.clone(), r.clone()]).unwrap();
    assert_eq!(agg.click, r.click);
    assert_eq!(agg.purchase, r.purchase);
    assert_eq!(agg.cumulative_reward, r.cumulative_reward);
    assert_eq!(agg.seeds.len(), 3);
}

fn finished_run(root: &Path, name: &str, extra: &[(&str, &str)]) -> PathBuf {
    let cfg = toy_config(root, name, extra);
    pipeline::preprocess(&cfg).unwrap();
    pipeline::train(&cfg, &mut no_steps).unwrap();
    pipeline::evaluate(&cfg, SplitName::Test, None).unwrap();
    cfg.out
}

#[test]
fn report_tables_runs_and_their_differences() {
    let dir = tempfile::tempdir().unwrap();
    let base = finished_run(dir.path(), "supervised", &[("variant", "supervised")]);
    let one = pipeline::report(&[base.clone()], &dir.path().join("r1")).unwrap();
    let rows: Vec<&str> = one.table.lines().filter(|l| l.starts_with("| supervised")).collect();
    assert_eq!(rows.len(), 1);
    assert!(!one.table.contains("Difference"));

    let mcrl = finished_run(dir.path(), "mcrl", &[("steps", "6")]);
    let broken = dir.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::write(broken.join("metrics-test.json"), "{ not json").unwrap();
    let two = pipeline::report(&[base.clone(), mcrl.clone(), broken], &dir.path().join("r2")).unwrap();
    assert_eq!(two.warnings.len(), 1);
    assert!(two.warnings[0].contains("broken"));

    let b = MetricsReport::read_json(&base.join("metrics-test.json")).unwrap();
    let m = MetricsReport::read_json(&mcrl.join("metrics-test.json")).unwrap();
    let delta_row = two
        .table
        .lines()
        .skip_while(|l| !l.starts_with("Difference"))
        .find(|l| l.starts_with("| mcrl"))
        .unwrap();
    let first_delta = delta_row.split('|').nth(2).unwrap().trim();
    let expected = match (m.hr(true, 5), b.hr(true, 5)) {
        (Some(x), Some(y)) => format!("{:+.4}", x - y),
        _ => "n/a".into(),
    };
    assert_eq!(first_delta, expected);
    let click_col = delta_row.split('|').nth(1 + 2 * 3 + 1).unwrap().trim();
    let click = m.hr(false, 5).unwrap() - b.hr(false, 5).unwrap();
    assert_eq!(click_col, format!("{click:+.4}"));

    let curves = std::fs::read_to_string(&two.curves_path).unwrap();
    let lines: Vec<&str> = curves.lines().collect();
    assert!(lines[0].starts_with("run,seed,step"));
    assert_eq!(lines.len(), 1 + 4 + 6);
    assert!(lines.iter().any(|l| l.starts_with("mcrl,0,6,")));
    assert!(pipeline::report(&[dir.path().join("nothing")], &dir.path().join("r3")).is_err());
}

#[test]
fn synth_writes_a_parseable_log() {
    let dir = tempfile::tempdir().unwrap();
    let synth = srl_core::data::SynthConfig {
        items: 30,
        sessions: 40,
        seed: 2,
        ..Default::default()
    };
    let path = dir.path().join("synth.csv");
    let stats = pipeline::synth(&synth, &path).unwrap();
    assert_eq!(stats.sessions, 40);
    let cfg = RunConfig::default()
        .resolve(
            None,
            &[
                ("data".into(), path.display().to_string()),
                ("out".into(), dir.path().join("o").display().to_string()),
            ],
        )
        .unwrap();
    let pre = pipeline::preprocess(&cfg).unwrap();
    assert!(pre.stats.sessions > 0 && pre.stats.sessions <= 40);
    assert!(pre.stats.clicks + pre.stats.purchases <= stats.clicks + stats.purchases);
}
