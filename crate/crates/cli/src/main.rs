use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use swap_core::analysis::{analysis_csv, analyze, LengthBuckets};
use swap_core::pipeline::shape_log;
use swap_core::simlab::{sample_log, sweep, sweep_table, train_run, TrainConfig};
use swap_core::trace::{parse_rollout_log_with, write_rollout_log, ParseOptions};
use swap_core::{Error, ShapingMode, SwapConfig};

#[derive(Parser)]
#[command(name = "swap", version, about = "Stepwise length-penalized credit assignment for reasoning rollouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shaping mode (swap, outcome_only, step_only, no_penalty, static_penalty, uniform_penalty).
    #[arg(long)]
    mode: Option<ShapingMode>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Shape advantages for every rollout in a log.
    Shape {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Skip groups that fail validation instead of aborting.
        #[arg(long)]
        lenient: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy policy on the synthetic task and write metrics CSV.
    Train {
        /// Metrics CSV, or a directory when `--sweep` is given.
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Sweep one parameter: `name=v1,v2,...`.
        #[arg(long)]
        sweep: Option<String>,
        /// Write a rollout log sampled from the initial policy.
        #[arg(long, value_name = "PATH")]
        log_before: Option<PathBuf>,
        /// Write a rollout log sampled from the trained policy.
        #[arg(long, value_name = "PATH")]
        log_after: Option<PathBuf>,
        /// Number of groups in each sampled log.
        #[arg(long, default_value_t = 64)]
        log_groups: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Histogram of step gains and high-gain share per length bucket.
    Analyze {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = swap_core::analysis::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Fixed increasing length-bucket edges instead of quintiles.
        #[arg(long, value_delimiter = ',')]
        length_edges: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Builds the effective config. Log processing starts from the plain shaping
/// defaults; training starts from the simulation defaults.
fn load_config(common: &Common, training: bool) -> Result<TrainConfig, Error> {
    let mut cfg = TrainConfig::default();
    if !training {
        cfg.swap = SwapConfig::default();
    }
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(mode) = common.mode {
        cfg.swap.shaping_mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn open(path: &Path) -> Result<BufReader<fs::File>, Error> {
    fs::File::open(path).map(BufReader::new).map_err(|e| io_err(path, e))
}

fn write_log(path: &Path, groups: &[swap_core::RolloutGroup]) -> Result<(), Error> {
    let mut buf = Vec::new();
    write_rollout_log(&mut buf, groups)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Shape {
            input,
            output,
            lenient,
            common,
        } => {
            let cfg = load_config(&common, false)?;
            let scorer = cfg.task.scorer();
            let out = shape_log(open(&input)?, &cfg.swap, Some(&scorer), lenient)?;
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            write_file(&output, &out.text)
        }
        Command::Train {
            output,
            seed,
            sweep: spec,
            log_before,
            log_after,
            log_groups,
            common,
        } => {
            let mut cfg = load_config(&common, true)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            match spec {
                Some(spec) => run_sweep(&cfg, &spec, &output),
                None => {
                    let run = train_run(&cfg)?;
                    write_file(&output, &run.metrics.to_csv())?;
                    let log_seed = cfg.seed.wrapping_add(1);
                    if let Some(path) = log_before {
                        write_log(&path, &sample_log(&run.initial_policy, &cfg, log_groups, log_seed)?)?;
                    }
                    if let Some(path) = log_after {
                        write_log(&path, &sample_log(&run.final_policy, &cfg, log_groups, log_seed)?)?;
                    }
                    Ok(())
                }
            }
        }
        Command::Analyze {
            input,
            output,
            threshold,
            length_edges,
            common,
        } => {
            if !threshold.is_finite() {
                return Err(Error::Config("threshold must be finite".into()));
            }
            let cfg = load_config(&common, false)?;
            let groups = parse_rollout_log_with(open(&input)?, ParseOptions { allow_tokenless: true })?;
            let buckets = match length_edges {
                Some(edges) => {
                    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::Config("length edges must be at least two increasing values".into()));
                    }
                    LengthBuckets::Fixed(edges)
                }
                None => LengthBuckets::default(),
            };
            let scorer = cfg.task.scorer();
            let a = analyze(&groups, &cfg.swap, Some(&scorer), threshold, &buckets);
            if a.skipped > 0 {
                eprintln!("warning: skipped {} rollouts without tokens or ell", a.skipped);
            }
            write_file(&output, &analysis_csv(&a))
        }
    }
}

fn run_sweep(cfg: &TrainConfig, spec: &str, dir: &Path) -> Result<(), Error> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected --sweep name=v1,v2,..., got `{spec}`")))?;
    let key = key.trim();
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    let cells = sweep(cfg, key, &values)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut first_err = None;
    for cell in &cells {
        match &cell.result {
            Ok(m) => write_file(&dir.join(format!("{key}={}.csv", cell.value)), &m.to_csv())?,
            Err(e) => {
                eprintln!("error: {key}={}: {e}", cell.value);
                first_err.get_or_insert_with(|| match e {
                    Error::Divergence { update, mean_abs_logit } => Error::Divergence {
                        update: *update,
                        mean_abs_logit: *mean_abs_logit,
                    },
                    other => Error::Config(other.to_string()),
                });
            }
        }
    }
    write_file(&dir.join("comparison.csv"), &sweep_table(key, &cells, cfg.metric_window))?;
    first_err.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
