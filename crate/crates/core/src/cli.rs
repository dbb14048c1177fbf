//! `corr-ceiling` command line.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::bound::{bound_sweep, sweep_to_csv, CEILING_LIMIT};
use crate::data::{
    filter_overlap, load_items, load_pairs, load_triplets, synth_generate, write_pairs,
    FeatureTable, PairFormat, ScoredPair, SynthConfig,
};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::VarianceGuard;
use crate::pipeline::{
    evaluate, run_ceiling_experiment, train_stage1, train_stage2, EvalReport, ExperimentConfig,
    StageConfig, TrainingLog,
};

/// Overrides the default output root (`runs/`).
pub const OUT_ROOT_ENV: &str = "CORR_CEILING_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_TIMING_FILE: &str = "train_timing.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const EVAL_INITIAL_FILE: &str = "eval_initial.json";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const EXPERIMENT_CSV_FILE: &str = "experiment.csv";
pub const EXPERIMENT_JSON_FILE: &str = "experiment.json";

#[derive(Debug, Parser)]
#[command(name = "corr-ceiling", version, about = "Spearman ceiling analysis and two-stage similarity tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sweep the best Spearman a binary predictor can reach.
    Bound(BoundArgs),
    /// Drop train pairs that also occur in any test set.
    Filter(FilterArgs),
    /// Generate a synthetic scored-pair dataset.
    Synth(SynthArgs),
    /// Contrastive tuning on triplets.
    Train1(Train1Args),
    /// Pearson-loss tuning from a stage-I checkpoint.
    Train2(Train2Args),
    /// Spearman evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Stage I vs. contrastive continuation vs. Pearson stage II.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct BoundArgs {
    /// Comma-separated sizes, e.g. `4,10,100`.
    #[arg(long, value_delimiter = ',', conflicts_with = "n_range", required_unless_present = "n_range")]
    n_list: Vec<u64>,
    /// `start:end[:step]` or `start:end:log`.
    #[arg(long)]
    n_range: Option<String>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long = "test", required = true, num_args = 1..)]
    tests: Vec<PathBuf>,
    /// Kept train pairs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    removed_out: Option<PathBuf>,
    /// `tsv` or `jsonl`; guessed from each file's extension when omitted.
    #[arg(long)]
    format: Option<PairFormat>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML or JSON synthetic-data config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_items: Option<usize>,
    #[arg(long)]
    num_pairs: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    observation_noise: Option<f64>,
    #[arg(long)]
    score_noise: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StageFlags {
    /// TOML or JSON stage config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
}

impl StageFlags {
    fn resolve(&self, base: StageConfig) -> Result<StageConfig> {
        let mut c = match &self.config {
            Some(p) => read_config(p)?,
            None => base,
        };
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.lr {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct Train1Args {
    /// Dataset directory with `items.jsonl`, `triplets.jsonl` and splits.
    #[arg(long)]
    data: PathBuf,
    /// Triplets file, defaulting to the dataset's own.
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[command(flatten)]
    stage: StageFlags,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    embed: usize,
    /// Encoder initialization seed; defaults to the stage seed.
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Train2Args {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    from_checkpoint: PathBuf,
    /// Scored pairs, defaulting to the dataset's `train.jsonl`.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[command(flatten)]
    stage: StageFlags,
    /// Fail on a constant-prediction batch instead of flooring its spread.
    #[arg(long)]
    strict_variance: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `name=path`; defaults to the dataset's dev and test splits.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric_failure() {
                EXIT_NUMERIC
            } else {
                EXIT_INPUT
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Bound(a) => cmd_bound(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train1(a) => cmd_train1(a),
        Command::Train2(a) => cmd_train2(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn out_dir(explicit: Option<PathBuf>, subcommand: &str) -> Result<PathBuf> {
    let dir = explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(subcommand)
    });
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    } else {
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })
    }
}

/// Wall time and a timestamp, kept out of the reproducible artifacts.
fn write_meta(dir: &Path, started: Instant) -> Result<()> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    write_json(
        &dir.join(RUN_META_FILE),
        &serde_json::json!({ "timestamp_unix": now, "wall_secs": started.elapsed().as_secs_f64() }),
    )
}

fn parse_n_range(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::invalid(format!("--n-range {spec:?} is not start:end[:step] or start:end:log"));
    let parts: Vec<&str> = spec.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(bad());
    }
    let start: u64 = parts[0].parse().map_err(|_| bad())?;
    let end: u64 = parts[1].parse().map_err(|_| bad())?;
    if start > end {
        return Err(bad());
    }
    match parts.get(2) {
        Some(&"log") => {
            // ten points per decade, plus both endpoints
            let (lo, hi) = ((start.max(1) as f64).log10(), (end as f64).log10());
            let steps = ((hi - lo) * 10.0).ceil() as u64;
            let mut v: Vec<u64> = (0..=steps)
                .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / steps.max(1) as f64).round() as u64)
                .chain([start, end])
                .filter(|n| (start..=end).contains(n))
                .collect();
            v.sort_unstable();
            v.dedup();
            Ok(v)
        }
        Some(step) => {
            let step: u64 = step.parse().map_err(|_| bad())?;
            if step == 0 {
                return Err(bad());
            }
            Ok((start..=end).step_by(step as usize).collect())
        }
        None => Ok((start..=end).collect()),
    }
}

fn cmd_bound(a: BoundArgs) -> Result<()> {
    let ns = match &a.n_range {
        Some(r) => parse_n_range(r)?,
        None => a.n_list.clone(),
    };
    if let Some(bad) = ns.iter().find(|&&n| n < 2) {
        return Err(Error::invalid(format!("n must be at least 2, got {bad}")));
    }
    let csv = sweep_to_csv(&bound_sweep(&ns)?);
    match &a.out {
        Some(p) => fs::write(p, &csv).map_err(|e| Error::io(p, e))?,
        None => print!("{csv}"),
    }
    eprintln!("max rho approaches 7/8 = {CEILING_LIMIT} as n grows");
    Ok(())
}

fn load_pairs_guess(path: &Path, format: Option<PairFormat>) -> Result<Vec<ScoredPair>> {
    load_pairs(path, format.unwrap_or_else(|| PairFormat::from_path(path)))
}

fn cmd_filter(a: FilterArgs) -> Result<()> {
    let train = load_pairs_guess(&a.train, a.format)?;
    let tests = a
        .tests
        .iter()
        .map(|p| load_pairs_guess(p, a.format))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[ScoredPair]> = tests.iter().map(Vec::as_slice).collect();
    let (kept, removed) = filter_overlap(&train, &refs);
    let out_format = a.format.unwrap_or_else(|| PairFormat::from_path(&a.out));
    write_pairs(&a.out, &kept, out_format)?;
    if let Some(p) = &a.removed_out {
        write_pairs(p, &removed, a.format.unwrap_or_else(|| PairFormat::from_path(p)))?;
    }
    println!("{}: {} → {} ({} removed)", a.train.display(), train.len(), kept.len(), removed.len());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let started = Instant::now();
    let mut c: SynthConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => SynthConfig::default(),
    };
    macro_rules! apply {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { c.$f = v; } )* };
    }
    apply!(seed, num_items, num_pairs, latent_dim, feature_dim, observation_noise, score_noise);
    let dir = out_dir(a.out, "synth")?;
    eprintln!("generating {} items, {} pairs (seed {})", c.num_items, c.num_pairs, c.seed);
    let ds = synth_generate(&c)?;
    let manifest = ds.write_dir(&dir)?;
    write_json(&dir.join(CONFIG_ECHO_FILE), &c)?;
    write_meta(&dir, started)?;
    println!(
        "wrote {}: {} train / {} dev / {} test pairs, {} triplets",
        dir.display(),
        manifest.counts["train"],
        manifest.counts["dev"],
        manifest.counts["test"],
        manifest.counts["triplets"]
    );
    Ok(())
}

fn load_table(data: &Path) -> Result<FeatureTable> {
    FeatureTable::new(load_items(&data.join("items.jsonl"))?)
}

/// The dataset's dev and test splits, whichever exist.
fn default_eval_sets(data: &Path) -> Result<Vec<(String, Vec<ScoredPair>)>> {
    ["dev", "test"]
        .iter()
        .map(|n| (n, data.join(format!("{n}.jsonl"))))
        .filter(|(_, p)| p.exists())
        .map(|(n, p)| Ok((n.to_string(), load_pairs(&p, PairFormat::Jsonl)?)))
        .collect()
}

fn eval_into(params: &EncoderParams, table: &FeatureTable, sets: &[(String, Vec<ScoredPair>)], path: &Path) -> Result<Option<EvalReport>> {
    if sets.is_empty() {
        return Ok(None);
    }
    let refs: Vec<(&str, &[ScoredPair])> = sets.iter().map(|(n, p)| (n.as_str(), p.as_slice())).collect();
    let report = evaluate(params, &params.checkpoint_id(), table, &refs)?;
    write_json(path, &report)?;
    Ok(Some(report))
}

fn write_training_outputs(dir: &Path, params: &EncoderParams, log: &TrainingLog) -> Result<()> {
    params.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
    for f in [TRAIN_LOG_FILE, TRAIN_TIMING_FILE] {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    log.append_jsonl(&dir.join(TRAIN_LOG_FILE))?;
    log.append_timing(&dir.join(TRAIN_TIMING_FILE))
}

fn dev_split(sets: &[(String, Vec<ScoredPair>)]) -> Option<&[ScoredPair]> {
    sets.iter().find(|(n, _)| n == "dev").map(|(_, p)| p.as_slice())
}

fn summarize(report: Option<EvalReport>) {
    if let Some(r) = report {
        let parts: Vec<String> = r.per_dataset.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
        println!("checkpoint {}: {} (avg {:.2})", r.checkpoint, parts.join(", "), r.average);
    }
}

fn cmd_train1(a: Train1Args) -> Result<()> {
    let started = Instant::now();
    let mut config = a.stage.resolve(StageConfig::stage1())?;
    if let Some(t) = a.temperature {
        config.temperature = Some(t);
    }
    config.expect_stage(crate::pipeline::Stage::I)?;
    let table = load_table(&a.data)?;
    let triplets = load_triplets(&a.triplets.clone().unwrap_or_else(|| a.data.join("triplets.jsonl")))?;
    let sets = default_eval_sets(&a.data)?;
    let dims = EncoderDims { input: table.dim(), hidden: a.hidden, embed: a.embed };
    let init = EncoderParams::init(dims, a.init_seed.unwrap_or(config.seed))?;
    let dir = out_dir(a.out, "train1")?;
    write_json(
        &dir.join(CONFIG_ECHO_FILE),
        &serde_json::json!({ "stage": config, "encoder": dims, "init_seed": init.seed(), "data": a.data }),
    )?;
    eprintln!("stage I: {} triplets, {} epochs", triplets.len(), config.epochs);
    let (params, log) = train_stage1(init, &triplets, &table, &config, dev_split(&sets))?;
    write_training_outputs(&dir, &params, &log)?;
    summarize(eval_into(&params, &table, &sets, &dir.join(EVAL_REPORT_FILE))?);
    write_meta(&dir, started)
}

fn cmd_train2(a: Train2Args) -> Result<()> {
    let started = Instant::now();
    let mut config = a.stage.resolve(StageConfig::stage2())?;
    if a.strict_variance {
        config.variance_guard = VarianceGuard::Strict;
    }
    config.expect_stage(crate::pipeline::Stage::II)?;
    let start = EncoderParams::load_checkpoint(&a.from_checkpoint)?;
    let table = load_table(&a.data)?;
    let pairs = load_pairs_guess(&a.pairs.clone().unwrap_or_else(|| a.data.join("train.jsonl")), None)?;
    let sets = default_eval_sets(&a.data)?;
    let dir = out_dir(a.out, "train2")?;
    write_json(
        &dir.join(CONFIG_ECHO_FILE),
        &serde_json::json!({ "stage": config, "from_checkpoint": a.from_checkpoint, "data": a.data }),
    )?;
    // evaluated before any update: must match the stage-I report
    eval_into(&start, &table, &sets, &dir.join(EVAL_INITIAL_FILE))?;
    eprintln!("stage II: {} pairs, {} epochs", pairs.len(), config.epochs);
    let (params, log) = train_stage2(start, &pairs, &table, &config, dev_split(&sets))?;
    write_training_outputs(&dir, &params, &log)?;
    summarize(eval_into(&params, &table, &sets, &dir.join(EVAL_REPORT_FILE))?);
    write_meta(&dir, started)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let params = EncoderParams::load_checkpoint(&a.checkpoint)?;
    let table = load_table(&a.data)?;
    let sets = if a.sets.is_empty() {
        default_eval_sets(&a.data)?
    } else {
        a.sets
            .iter()
            .map(|s| {
                let (name, path) = s
                    .split_once('=')
                    .ok_or_else(|| Error::invalid(format!("--set {s:?} is not name=path")))?;
                Ok((name.to_string(), load_pairs_guess(Path::new(path), None)?))
            })
            .collect::<Result<_>>()?
    };
    if sets.is_empty() {
        return Err(Error::invalid(format!("no dev.jsonl or test.jsonl in {}", a.data.display())));
    }
    let dir = out_dir(a.out, "eval")?;
    write_json(
        &dir.join(CONFIG_ECHO_FILE),
        &serde_json::json!({ "checkpoint": a.checkpoint, "data": a.data, "sets": a.sets }),
    )?;
    summarize(eval_into(&params, &table, &sets, &dir.join(EVAL_REPORT_FILE))?);
    write_meta(&dir, started)
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let started = Instant::now();
    let mut config: ExperimentConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seeds {
        config.seeds = s;
    }
    config.validate()?;
    let dir = out_dir(a.out, "experiment")?;
    write_json(&dir.join(CONFIG_ECHO_FILE), &config)?;
    eprintln!("running {} seeds x 3 arms", config.seeds.len());
    let report = run_ceiling_experiment(&config)?;
    let csv = report.to_csv();
    let p = dir.join(EXPERIMENT_CSV_FILE);
    fs::write(&p, &csv).map_err(|e| Error::io(&p, e))?;
    write_json(&dir.join(EXPERIMENT_JSON_FILE), &report)?;
    write_meta(&dir, started)?;
    print!("{csv}");
    let s = &report.summary;
    println!(
        "median gain of Pearson stage II over stage I: {:.2} points; continuation <= Pearson in every seed: {}",
        s.median_gain_x100, s.continuation_at_most_pearson_every_seed
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_range_forms() {
        assert_eq!(parse_n_range("2:6").unwrap(), vec![2, 3, 4, 5, 6]);
        assert_eq!(parse_n_range("2:10:4").unwrap(), vec![2, 6, 10]);
        let log = parse_n_range("2:1000000:log").unwrap();
        assert_eq!(log.first(), Some(&2));
        assert_eq!(log.last(), Some(&1_000_000));
        assert!(log.windows(2).all(|w| w[0] < w[1]));
        assert!(log.len() > 40 && log.len() < 80);
        for bad in ["2", "5:2", "2:5:0", "a:b", "1:2:3:4"] {
            assert!(parse_n_range(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["corr-ceiling", "bound", "--n-list", "1"]), EXIT_INPUT);
        assert_eq!(run(["corr-ceiling", "eval", "--data", "x"]), EXIT_INPUT);
        assert_eq!(run(["corr-ceiling", "nonsense"]), EXIT_INPUT);
        assert_eq!(run(["corr-ceiling", "--help"]), EXIT_OK);
    }
}
