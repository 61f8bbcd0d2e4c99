//! Argument parsing and the subcommands.

use std::fs;
use std::io::{self, BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mlaqp_core::catalogue::{disk_size, ModelCatalogue};
use mlaqp_core::drift::MonitorConfig;
use mlaqp_core::engine::{self, EnsembleOptions, TrainOptions};
use mlaqp_core::eval::{self, ProtocolOptions};
use mlaqp_core::gbdt::GbdtConfig;
use mlaqp_core::workload::{self, AnalystSpec, WorkloadSpec};
use mlaqp_core::DatasetSchema;

use crate::config::{pick, require, FileConfig};
use crate::monitor::{tail, LiveMonitor};
use crate::repl::Repl;
use crate::server;

#[derive(Debug, Parser)]
#[command(name = "mlaqp", version, about = "Learned approximate answers to SQL aggregate queries")]
pub struct Cli {
    /// TOML config file. Flags and MLAQP_* variables take precedence over it.
    #[arg(long, global = true, env = "MLAQP_CONFIG")]
    pub config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "MLAQP_LOG", default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and an answered query log.
    GenWorkload(GenArgs),
    /// Train a catalogue from a query log.
    Train(TrainArgs),
    /// Split a log, train, and report held-out accuracy and latency.
    Eval(EvalArgs),
    /// Serve predictions over HTTP.
    Serve(ServeArgs),
    /// Interactive query loop.
    Repl(ReplArgs),
    /// Watch a live query log for data and workload drift.
    Monitor(MonitorArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10)]
    pub dims: usize,
    #[arg(long, default_value_t = 2)]
    pub predicates: usize,
    #[arg(long, default_value_t = 1000)]
    pub queries: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = workload::DEFAULT_ROWS)]
    pub rows: usize,
    /// Target fraction of rows selected per query.
    #[arg(long, conflicts_with = "bins")]
    pub selectivity: Option<f64>,
    /// Use the histogram bin width with this many bins as the range size.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Gaussian query centers, one per analyst, instead of uniform ones.
    #[arg(long)]
    pub analysts: Option<usize>,
    /// Analyst center spread as a fraction of the column range.
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    /// Skip writing data.csv.
    #[arg(long)]
    pub no_data: bool,
    /// Output directory for data.csv, schema.json and log.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// Interval miscoverage; 0.1 gives 90% intervals.
    #[arg(long, env = "MLAQP_MISCOVERAGE")]
    pub miscoverage: Option<f64>,
    /// Skip the quantile models.
    #[arg(long)]
    pub no_intervals: bool,
    /// Fraction of pairs held out to calibrate intervals; 0 disables.
    #[arg(long, env = "MLAQP_CALIBRATION")]
    pub calibration: Option<f64>,
    /// Also fit a cluster ensemble per aggregate.
    #[arg(long)]
    pub ensemble: bool,
    /// Fixed cluster growth threshold; adaptive when absent.
    #[arg(long, env = "MLAQP_GROWTH_THRESHOLD")]
    pub growth_threshold: Option<f64>,
    #[arg(long, env = "MLAQP_ROUNDS")]
    pub rounds: Option<usize>,
    #[arg(long, env = "MLAQP_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
    #[arg(long, env = "MLAQP_MAX_DEPTH")]
    pub max_depth: Option<usize>,
    #[arg(long, env = "MLAQP_MIN_SAMPLES_LEAF")]
    pub min_samples_leaf: Option<usize>,
    #[arg(long, env = "MLAQP_QUANTILE_ROUNDS")]
    pub quantile_rounds: Option<usize>,
    #[arg(long, env = "MLAQP_QUANTILE_LEARNING_RATE")]
    pub quantile_learning_rate: Option<f64>,
    /// Categorical attributes with more distinct values than this are hashed.
    #[arg(long, env = "MLAQP_CARDINALITY_THRESHOLD")]
    pub cardinality_threshold: Option<usize>,
    /// Aggregates with fewer pairs are skipped.
    #[arg(long, env = "MLAQP_MIN_PAIRS")]
    pub min_pairs: Option<usize>,
}

impl TrainFlags {
    pub fn resolve(&self, file: &FileConfig) -> TrainOptions {
        let f = &file.train;
        let d = TrainOptions::default();
        let mut point = GbdtConfig::point_default();
        point.rounds = pick(self.rounds, f.rounds, point.rounds);
        point.learning_rate = pick(self.learning_rate, f.learning_rate, point.learning_rate);
        point.max_depth = pick(self.max_depth, f.max_depth, point.max_depth);
        point.min_samples_leaf = pick(self.min_samples_leaf, f.min_samples_leaf, point.min_samples_leaf);
        let mut quantile = GbdtConfig::quantile_default();
        quantile.rounds = pick(self.quantile_rounds, f.quantile_rounds, quantile.rounds);
        quantile.learning_rate = pick(self.quantile_learning_rate, f.quantile_learning_rate, quantile.learning_rate);
        quantile.max_depth = point.max_depth;
        quantile.min_samples_leaf = point.min_samples_leaf;
        let intervals = !self.no_intervals && f.intervals.unwrap_or(true);
        let calibration = pick(self.calibration, f.calibration, d.interval_calibration.unwrap_or(0.0));
        let ensemble = self.ensemble || f.ensemble.unwrap_or(false);
        TrainOptions {
            point,
            quantile: intervals.then_some(quantile),
            miscoverage: pick(self.miscoverage, f.miscoverage, d.miscoverage),
            interval_calibration: (calibration > 0.0).then_some(calibration),
            ensemble: ensemble.then(|| EnsembleOptions {
                growth_threshold: self.growth_threshold.or(f.growth_threshold),
            }),
            cardinality_threshold: pick(self.cardinality_threshold, f.cardinality_threshold, d.cardinality_threshold),
            max_bad_fraction: d.max_bad_fraction,
            min_pairs: pick(self.min_pairs, f.min_pairs, d.min_pairs),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON-lines query log.
    #[arg(long)]
    pub log: PathBuf,
    /// Schema JSON.
    #[arg(long)]
    pub schema: PathBuf,
    /// Catalogue directory to write.
    #[arg(long, env = "MLAQP_CATALOGUE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    /// Training fraction.
    #[arg(long, default_value_t = 0.7)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training sizes for the error curve, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 300, 1000])]
    pub curve: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub latency_samples: usize,
    /// Write the full report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Keep the trained catalogue here.
    #[arg(long)]
    pub catalogue: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "MLAQP_CATALOGUE")]
    pub catalogue: Option<PathBuf>,
    /// Default 127.0.0.1:8080.
    #[arg(long, env = "MLAQP_BIND")]
    pub bind: Option<String>,
    /// Manifest polling period for hot reload; 0 disables. Default 2000.
    #[arg(long, env = "MLAQP_RELOAD_INTERVAL_MS")]
    pub reload_interval_ms: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct MonitorFlags {
    #[arg(long, env = "MLAQP_ALPHA")]
    pub alpha: Option<f64>,
    /// Sliding window length.
    #[arg(long, env = "MLAQP_WINDOW")]
    pub window: Option<usize>,
    /// Queries between checks.
    #[arg(long, env = "MLAQP_CHECK_EVERY")]
    pub check_every: Option<usize>,
    /// Chebyshev exceedance bound.
    #[arg(long, env = "MLAQP_WORKLOAD_BOUND")]
    pub workload_bound: Option<f64>,
}

impl MonitorFlags {
    pub fn resolve(&self, file: &FileConfig) -> MonitorConfig {
        let f = &file.monitor;
        let d = MonitorConfig::default();
        MonitorConfig {
            alpha: pick(self.alpha, f.alpha, d.alpha),
            window: pick(self.window, f.window, d.window),
            check_every: pick(self.check_every, f.check_every, d.check_every),
            workload_bound: pick(self.workload_bound, f.workload_bound, d.workload_bound),
        }
    }
}

#[derive(Debug, Args)]
pub struct ReplArgs {
    #[arg(long, env = "MLAQP_CATALOGUE")]
    pub catalogue: Option<PathBuf>,
    #[command(flatten)]
    pub monitor: MonitorFlags,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    #[arg(long, env = "MLAQP_CATALOGUE")]
    pub catalogue: Option<PathBuf>,
    /// JSON-lines log of executed queries with their answers.
    #[arg(long)]
    pub log: PathBuf,
    /// Keep polling the log for new lines.
    #[arg(long)]
    pub follow: bool,
    #[arg(long, default_value_t = 200)]
    pub poll_ms: u64,
    #[command(flatten)]
    pub monitor: MonitorFlags,
}

pub fn read_schema(path: &Path) -> anyhow::Result<DatasetSchema> {
    let text = fs::read_to_string(path).with_context(|| format!("reading schema {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing schema {}", path.display()))
}

fn gen_workload(a: &GenArgs) -> anyhow::Result<()> {
    let ds = workload::gen_dataset(a.dims, a.rows, a.seed)?;
    let range_size = match a.bins {
        Some(b) => workload::derive_range_size(&ds, b)?,
        None => workload::range_for_selectivity(
            &ds,
            a.predicates,
            a.selectivity.unwrap_or(workload::DEFAULT_SELECTIVITY),
        )?,
    };
    let afs = workload::default_afs("a1");
    let queries = match a.analysts {
        Some(n) => {
            let spec = AnalystSpec {
                n_analysts: n,
                sigma: a.sigma,
                n_queries: a.queries,
                predicates: a.predicates,
                range_size,
                seed: a.seed.wrapping_add(1),
                afs,
            };
            workload::gen_analyst_workload(&spec, &ds)?.queries
        }
        None => {
            let spec = WorkloadSpec {
                n_queries: a.queries,
                dims: a.dims,
                predicates: a.predicates,
                range_size,
                seed: a.seed.wrapping_add(1),
                afs,
            };
            workload::gen_queries(&spec, &ds)?
        }
    };
    fs::create_dir_all(&a.out)?;
    if !a.no_data {
        ds.to_csv(&a.out.join("data.csv"))?;
    }
    fs::write(a.out.join("schema.json"), serde_json::to_vec_pretty(ds.schema())?)?;
    let mut log = BufWriter::new(fs::File::create(a.out.join("log.jsonl"))?);
    for q in &queries {
        serde_json::to_writer(&mut log, &q.to_record())?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    println!(
        "wrote {} queries over {} rows x {} columns to {} (range size {range_size})",
        queries.len(),
        a.rows,
        a.dims,
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs, file: &FileConfig) -> anyhow::Result<()> {
    let out = require(a.out.clone(), file.catalogue.clone(), "catalogue")?;
    let opts = a.train.resolve(file);
    let schema = read_schema(&a.schema)?;
    let records = engine::read_log(&a.log)?;
    let prep = engine::prepare_log(&records, &schema, opts.cardinality_threshold)?;
    for e in &prep.errors {
        eprintln!("{}:{}: {}", a.log.display(), e.line, e.message);
    }
    let cat = engine::train_catalogue(&prep, &opts)?;
    cat.save(&out)?;
    println!(
        "trained {} entries ({}) from {} lines, {} skipped; {} bytes in {}",
        cat.entries.len(),
        cat.keys().join(", "),
        prep.lines,
        prep.errors.len(),
        disk_size(&out)?,
        out.display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs, file: &FileConfig) -> anyhow::Result<()> {
    let schema = read_schema(&a.schema)?;
    let records: Vec<_> = engine::read_log(&a.log)?
        .into_iter()
        .filter_map(|(line, r)| match r {
            Ok(r) => Some(r),
            Err(e) => {
                eprintln!("{}:{line}: {e}", a.log.display());
                None
            }
        })
        .collect();
    let opts = ProtocolOptions {
        split: a.split,
        seed: a.seed,
        train: a.train.resolve(file),
        curve: a.curve.clone(),
        latency_samples: a.latency_samples,
        catalogue_dir: a.catalogue.clone(),
    };
    let report = eval::run_protocol(&records, &schema, &opts)?;
    println!("{}", report.to_table());
    if let Some(p) = &a.report {
        eval::write_report(&report, p)?;
    }
    Ok(())
}

fn serve(a: &ServeArgs, file: &FileConfig) -> anyhow::Result<()> {
    let dir = require(a.catalogue.clone(), file.catalogue.clone(), "catalogue")?;
    let bind = pick(a.bind.clone(), file.bind.clone(), "127.0.0.1:8080".to_string());
    let reload = Duration::from_millis(pick(a.reload_interval_ms, file.reload_interval_ms, 2000));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(server::serve(dir, &bind, reload))
}

fn repl(a: &ReplArgs, file: &FileConfig) -> anyhow::Result<()> {
    let dir = require(a.catalogue.clone(), file.catalogue.clone(), "catalogue")?;
    let engine = engine::Engine::load(&dir)?;
    let mut r = Repl::new(engine, a.monitor.resolve(file));
    let stdin = io::stdin();
    let prompt = stdin.is_terminal();
    r.run(stdin.lock(), &mut io::stdout().lock(), prompt)?;
    Ok(())
}

fn monitor(a: &MonitorArgs, file: &FileConfig) -> anyhow::Result<()> {
    let dir = require(a.catalogue.clone(), file.catalogue.clone(), "catalogue")?;
    let cat = ModelCatalogue::load(&dir)?;
    let mut m = LiveMonitor::new(cat, a.monitor.resolve(file))?;
    let mut stdout = io::stdout().lock();
    let mut events = 0usize;
    tail(&a.log, a.follow, Duration::from_millis(a.poll_ms), |line, rec| {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                eprintln!("{}:{line}: {e}", a.log.display());
                return Ok(());
            }
        };
        match m.observe(&rec) {
            Ok(evs) => {
                for ev in evs {
                    events += 1;
                    serde_json::to_writer(&mut stdout, &ev)?;
                    stdout.write_all(b"\n")?;
                    stdout.flush()?;
                }
            }
            Err(e) => eprintln!("{}:{line}: {e}", a.log.display()),
        }
        Ok(())
    })?;
    eprintln!("{events} drift events");
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load_optional(cli.config.as_deref())?;
    match &cli.command {
        Command::GenWorkload(a) => gen_workload(a),
        Command::Train(a) => train(a, &file),
        Command::Eval(a) => eval_cmd(a, &file),
        Command::Serve(a) => serve(a, &file),
        Command::Repl(a) => repl(a, &file),
        Command::Monitor(a) => monitor(a, &file),
    }
}
