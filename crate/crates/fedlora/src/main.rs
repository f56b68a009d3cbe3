use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedlora::codec;
use fedlora::config::{self, Plan, SEED_ENV};
use fedlora::output;
use fedlora::presets;
use fedlora::runner::{self, RunError, WriteOptions};
use fedlora::Parallel;
use fedlora_core::data::gen_mixture;
use fedlora_core::federation::{prepare_base, split_pool, Experiment, ExperimentConfig, Sequential};

#[derive(Parser)]
#[command(name = "fedlora", version, about = "Federated low-rank adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Config file (TOML). Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set federation.rounds=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train clients one at a time instead of on the thread pool.
    #[arg(long)]
    sequential: bool,
    /// Worker threads for client training (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Also write every client's final adapter.
    #[arg(long)]
    save_adapters: bool,
    /// Print the resolved config and the planned runs, then exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment(s) described by a config file.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        #[command(flatten)]
        flags: RunFlags,
        /// Use this dataset file instead of generating one; must match the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Use this pretrained base instead of pretraining; must match the config.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Run a shipped preset.
    Preset {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(presets::names().collect::<Vec<_>>()))]
        name: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Generate the synthetic dataset of a config.
    GenData {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "data.fvlm")]
        out: PathBuf,
    },
    /// Pretrain and save the frozen base of a config.
    Pretrain {
        #[command(flatten)]
        overrides: Overrides,
        /// Dataset file from `gen-data`; generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "base.fvlm")]
        out: PathBuf,
    },
    /// Recompute the summary of a rounds table.
    Report {
        rounds: PathBuf,
    },
}

/// Errors split by exit status: bad input is 2, failed execution is 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => Failure::Usage(c.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn load_plan(text: &str, sets: &[String]) -> Result<Plan, Failure> {
    config::load_plan(text, sets, env_seed().as_deref()).map_err(|e| Failure::Usage(e.to_string()))
}

fn load_single(o: &Overrides) -> Result<ExperimentConfig, Failure> {
    let text = match &o.config {
        Some(p) => String::from_utf8(read(p)?).map_err(|_| Failure::Usage(format!("{}: not UTF-8", p.display())))?,
        None => String::new(),
    };
    config::load_config(&text, &o.set, env_seed().as_deref()).map_err(|e| Failure::Usage(e.to_string()))
}

fn with_pool<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Failure>
where
    T: Send,
{
    match threads {
        None => Ok(f()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Usage(format!("--threads: {e}")))
            .map(|pool| pool.install(f)),
    }
}

fn run_plan(plan: &Plan, out: &Path, flags: &RunFlags) -> Result<(), Failure> {
    if flags.dry_run {
        for spec in runner::expand(plan).map_err(|e| Failure::Usage(e.to_string()))? {
            println!("# {}", out.join(&spec.dir).display());
            print!("{}", config::render(&spec.table));
        }
        return Ok(());
    }
    let opts = WriteOptions {
        save_adapters: flags.save_adapters,
    };
    let progress = |spec: &runner::RunSpec, reports: &[fedlora_core::federation::RoundReport]| {
        let last = reports.last().expect("round 0");
        eprintln!(
            "{}: round {} mean accuracy {}",
            out.join(&spec.dir).display(),
            last.round,
            output::g6(last.mean_accuracy())
        );
    };
    let digests = if flags.sequential {
        runner::run_plan(plan, out, &Sequential, opts, progress)?
    } else {
        with_pool(flags.threads, || runner::run_plan(plan, out, &Parallel, opts, progress))??
    };
    if digests.len() > 1 {
        eprintln!("wrote {}", out.join("aggregate.csv").display());
    }
    Ok(())
}

/// A single run built around cached data and/or base files.
fn run_cached(
    overrides: &Overrides,
    flags: &RunFlags,
    data: Option<&Path>,
    base: Option<&Path>,
) -> Result<(), Failure> {
    let text = match &overrides.config {
        Some(p) => String::from_utf8(read(p)?).map_err(|_| Failure::Usage(format!("{}: not UTF-8", p.display())))?,
        None => String::new(),
    };
    let plan = load_plan(&text, &overrides.set)?;
    let specs = runner::expand(&plan).map_err(|e| Failure::Usage(e.to_string()))?;
    let [spec] = specs.as_slice() else {
        return Err(Failure::Usage("--data/--base need a single run (no sweep, seeds = 1)".into()));
    };
    let cfg = &spec.config;
    let full = match data {
        Some(p) => {
            let ds = codec::decode_dataset(&read(p)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            if ds.config != cfg.data.mixture || ds.seed != cfg.seed {
                return Err(Failure::Usage(format!("{}: dataset does not match the config", p.display())));
            }
            ds
        }
        None => gen_mixture(&cfg.data.mixture, cfg.seed).map_err(|e| Failure::Runtime(e.to_string()))?,
    };
    let (pool, fed) = split_pool(cfg, &full).map_err(|e| Failure::Runtime(e.to_string()))?;
    let base = match base {
        Some(p) => {
            let b = codec::decode_base(&read(p)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            if *b.config() != cfg.model_config() {
                return Err(Failure::Usage(format!("{}: base does not match the config", p.display())));
            }
            b
        }
        None => prepare_base(cfg, &pool).map_err(|e| Failure::Runtime(e.to_string()))?,
    };
    let mut exp = Experiment::with_base(cfg.clone(), base, fed).map_err(|e| Failure::Runtime(e.to_string()))?;
    let reports = if flags.sequential {
        exp.run(&Sequential)
    } else {
        with_pool(flags.threads, || exp.run(&Parallel))?
    }
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    let out = flags.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    runner::write_bundle(
        &out.join(&spec.dir),
        spec,
        &exp,
        &reports,
        WriteOptions {
            save_adapters: flags.save_adapters,
        },
    )?;
    Ok(())
}

fn main_inner(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            overrides,
            flags,
            data,
            base,
        } => {
            if (data.is_some() || base.is_some()) && !flags.dry_run {
                return run_cached(&overrides, &flags, data.as_deref(), base.as_deref());
            }
            let text = match &overrides.config {
                Some(p) => {
                    String::from_utf8(read(p)?).map_err(|_| Failure::Usage(format!("{}: not UTF-8", p.display())))?
                }
                None => String::new(),
            };
            let plan = load_plan(&text, &overrides.set)?;
            let out = flags.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            run_plan(&plan, &out, &flags)
        }
        Command::Preset { name, set, flags } => {
            let text = presets::get(&name).expect("validated by clap");
            let plan = load_plan(text, &set)?;
            let out = flags.out.clone().unwrap_or_else(|| PathBuf::from("out").join(&name));
            run_plan(&plan, &out, &flags)
        }
        Command::GenData { overrides, out } => {
            let cfg = load_single(&overrides)?;
            let ds = gen_mixture(&cfg.data.mixture, cfg.seed).map_err(|e| Failure::Runtime(e.to_string()))?;
            runner::write_file(&out, &codec::encode_dataset(&ds))?;
            eprintln!("wrote {} examples to {}", ds.len(), out.display());
            Ok(())
        }
        Command::Pretrain { overrides, data, out } => {
            let cfg = load_single(&overrides)?;
            let full = match data {
                Some(p) => codec::decode_dataset(&read(&p)?).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
                None => gen_mixture(&cfg.data.mixture, cfg.seed).map_err(|e| Failure::Runtime(e.to_string()))?,
            };
            if full.config != cfg.data.mixture || full.seed != cfg.seed {
                return Err(Failure::Usage("dataset does not match the config".into()));
            }
            let (pool, _) = split_pool(&cfg, &full).map_err(|e| Failure::Runtime(e.to_string()))?;
            let base = prepare_base(&cfg, &pool).map_err(|e| Failure::Runtime(e.to_string()))?;
            runner::write_file(&out, &codec::encode_base(&base))?;
            eprintln!(
                "pretrained on {} examples, holdout accuracy {}; wrote {}",
                base.meta().pooled_size,
                output::g6(base.meta().accuracy),
                out.display()
            );
            Ok(())
        }
        Command::Report { rounds } => {
            let text = String::from_utf8(read(&rounds)?).map_err(|_| Failure::Usage("rounds table is not UTF-8".into()))?;
            let rows = output::parse_rounds(&text).map_err(|e| Failure::Usage(format!("{}: {e}", rounds.display())))?;
            // the echo file next to the table supplies the [run] section
            let echo = rounds.with_file_name("config.toml");
            let run = match std::fs::read_to_string(&echo) {
                Ok(t) => Some(output::run_section(
                    &config::load_config(&t, &[], None).map_err(|e| Failure::Usage(format!("{}: {e}", echo.display())))?,
                )),
                Err(_) => None,
            };
            let summary = output::summary(&rows, run.as_ref()).map_err(|e| Failure::Usage(e.to_string()))?;
            print!("{summary}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
