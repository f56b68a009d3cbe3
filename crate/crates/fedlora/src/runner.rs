//! Executes plans and writes their output bundles.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedlora_core::federation::{Executor, Experiment, ExperimentConfig, RoundReport};
use toml::{Table, Value};

use crate::codec;
use crate::config::{self, ConfigError, Plan};
use crate::output::{self, RunDigest};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Experiment(#[from] fedlora_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| RunError::Io {
            path: dir.into(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| RunError::Io {
        path: path.into(),
        source,
    })
}

/// One concrete run of a plan.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub variant: Option<String>,
    pub config: ExperimentConfig,
    /// Echo of exactly this run: `seeds = 1`, no sweep.
    pub table: Table,
    /// Directory relative to the output root.
    pub dir: PathBuf,
}

pub fn expand(plan: &Plan) -> Result<Vec<RunSpec>, ConfigError> {
    let nested = plan.sweep.is_some() || plan.seeds > 1;
    let mut specs = Vec::new();
    for (variant, table) in plan.expand()? {
        let base_seed = table["seed"].as_integer().expect("typed") as u64;
        for s in 0..plan.seeds {
            let seed = base_seed + s;
            let mut t = table.clone();
            t.insert("seed".into(), Value::Integer(seed as i64));
            t.insert("seeds".into(), Value::Integer(1));
            let config = config::from_table(&t)?;
            let mut dir = PathBuf::new();
            if let Some(v) = &variant {
                dir.push(v);
            }
            if nested {
                dir.push(format!("seed-{seed}"));
            }
            specs.push(RunSpec {
                variant: variant.clone(),
                config,
                table: t,
                dir,
            });
        }
    }
    Ok(specs)
}

/// Runs all rounds, filling in wall time.
pub fn execute<E: Executor>(cfg: &ExperimentConfig, executor: &E) -> Result<(Experiment, Vec<RoundReport>), RunError> {
    let mut exp = Experiment::new(cfg.clone())?;
    let mut reports = Vec::with_capacity(cfg.federation.rounds as usize + 1);
    let t = Instant::now();
    reports.push(exp.initial_report(executor)?);
    reports[0].wall_time_secs = t.elapsed().as_secs_f64();
    for _ in 0..cfg.federation.rounds {
        let t = Instant::now();
        let mut r = exp.run_round(executor)?;
        r.wall_time_secs = t.elapsed().as_secs_f64();
        reports.push(r);
    }
    Ok((exp, reports))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WriteOptions {
    pub save_adapters: bool,
}

/// Writes `rounds.csv`, `pooled.csv`, `summary.toml` and `config.toml`.
pub fn write_bundle(
    dir: &Path,
    spec: &RunSpec,
    exp: &Experiment,
    reports: &[RoundReport],
    opts: WriteOptions,
) -> Result<(), RunError> {
    let rounds = output::rounds_csv(reports);
    let rows = output::parse_rounds(&rounds).expect("own table parses");
    let summary = output::summary(&rows, Some(&output::run_section(&spec.config))).expect("round 0 present");
    write_file(&dir.join("rounds.csv"), rounds.as_bytes())?;
    write_file(&dir.join("pooled.csv"), output::pooled_csv(reports).as_bytes())?;
    write_file(&dir.join("summary.toml"), summary.as_bytes())?;
    write_file(&dir.join("config.toml"), config::render(&spec.table).as_bytes())?;
    if opts.save_adapters {
        for c in &exp.clients {
            let path = dir.join("adapters").join(format!("client-{}.fvlm", c.id));
            write_file(&path, &codec::encode_adapter(&c.adapter))?;
        }
    }
    Ok(())
}

/// Runs every spec of `plan` under `out`, plus `aggregate.csv` when the plan
/// has more than one run. Returns the digests in run order.
pub fn run_plan<E: Executor>(
    plan: &Plan,
    out: &Path,
    executor: &E,
    opts: WriteOptions,
    mut progress: impl FnMut(&RunSpec, &[RoundReport]),
) -> Result<Vec<RunDigest>, RunError> {
    let specs = expand(plan)?;
    let mut digests = Vec::with_capacity(specs.len());
    for spec in &specs {
        let (exp, reports) = execute(&spec.config, executor)?;
        write_bundle(&out.join(&spec.dir), spec, &exp, &reports, opts)?;
        progress(spec, &reports);
        digests.push(RunDigest::new(
            spec.variant.as_deref().unwrap_or("default"),
            spec.config.seed,
            &reports,
        ));
    }
    if specs.len() > 1 {
        write_file(&out.join("aggregate.csv"), output::aggregate_csv(&digests).as_bytes())?;
    }
    Ok(digests)
}
