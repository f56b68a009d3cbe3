//! TOML experiment configs.
//!
//! The default config rendered as a table doubles as the schema: a key is
//! valid exactly when the defaults contain it, and its value must have the
//! default's type. Precedence is defaults < file < `--set` < `FEDLORA_SEED`.

use fedlora_core::adapters::StrategyKind;
use fedlora_core::federation::{AggregatorKind, ExperimentConfig, PartitionKind, RunMode, ScaleMode};
use fedlora_core::metrics::Averaging;
use toml::{Table, Value};

pub const SEED_ENV: &str = "FEDLORA_SEED";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{0}: unknown key")]
    UnknownKey(String),
    #[error("{path}: expected {expected}, found {found}")]
    Type {
        path: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("--set {0}: expected key=value")]
    BadOverride(String),
}

impl ConfigError {
    /// Dotted path of the offending field, when there is one.
    pub fn path(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey(p) => Some(p),
            ConfigError::Type { path, .. } | ConfigError::Invalid { path, .. } => Some(path),
            _ => None,
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

fn invalid(path: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.into(),
        reason: reason.into(),
    }
}

/// A parameter varied across the runs of one plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<Value>,
}

/// A config file: one experiment, optionally repeated over seeds and a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// Fully resolved table without the sweep, `seeds` included.
    pub table: Table,
    pub seeds: u64,
    pub sweep: Option<Sweep>,
}

fn mode_name(m: RunMode) -> &'static str {
    m.as_str()
}

fn partition_name(p: PartitionKind) -> &'static str {
    p.as_str()
}

fn averaging_name(a: Averaging) -> &'static str {
    match a {
        Averaging::Macro => "macro",
        Averaging::Micro => "micro",
    }
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

/// `cfg` as a config table, including the runner-level `seeds` key.
pub fn to_table(cfg: &ExperimentConfig, seeds: u64) -> Table {
    let mix = &cfg.data.mixture;
    let (num_shards, shards_per_client) = match cfg.data.partition {
        PartitionKind::Shards {
            num_shards,
            shards_per_client,
        } => (num_shards, shards_per_client),
        _ => (80, 2),
    };
    let mut t = Table::new();
    t.insert("seed".into(), Value::Integer(cfg.seed as i64));
    t.insert("seeds".into(), Value::Integer(seeds as i64));
    t.insert("mode".into(), mode_name(cfg.mode).into());

    let mut data = Table::new();
    data.insert("num_classes".into(), int(mix.num_classes));
    data.insert("per_class".into(), int(mix.per_class.first().copied().unwrap_or(0)));
    data.insert("visual_dim".into(), int(mix.visual_dim));
    data.insert("text_dim".into(), int(mix.text_dim));
    data.insert("visual_tokens".into(), int(mix.visual_tokens));
    data.insert("text_tokens".into(), int(mix.text_tokens));
    data.insert("separation".into(), mix.separation.into());
    data.insert("noise_std".into(), mix.noise_std.into());
    data.insert("num_domains".into(), int(mix.num_domains));
    data.insert("domain_skew".into(), mix.domain_skew.into());
    data.insert("partition".into(), partition_name(cfg.data.partition).into());
    data.insert("num_shards".into(), int(num_shards));
    data.insert("shards_per_client".into(), int(shards_per_client));
    data.insert("eval_fraction".into(), cfg.data.eval_fraction.into());
    data.insert("pretrain_fraction".into(), cfg.data.pretrain_fraction.into());
    t.insert("data".into(), data.into());

    let mut model = Table::new();
    model.insert("hidden_dim".into(), int(cfg.hidden_dim));
    t.insert("model".into(), model.into());

    let mut pre = Table::new();
    pre.insert("epochs".into(), int(cfg.pretrain.epochs as usize));
    pre.insert("lr".into(), cfg.pretrain.lr.into());
    pre.insert("batch_size".into(), int(cfg.pretrain.batch_size));
    pre.insert("holdout_fraction".into(), cfg.pretrain.holdout_fraction.into());
    t.insert("pretrain".into(), pre.into());

    let a = &cfg.adapter;
    let mut ad = Table::new();
    ad.insert("rank".into(), int(a.rank));
    ad.insert("alpha".into(), a.alpha.into());
    ad.insert("dropout".into(), a.dropout.into());
    ad.insert("scale_mode".into(), a.scale_mode.as_str().into());
    ad.insert("strategy".into(), a.strategy.as_str().into());
    ad.insert("ffa_shared_a".into(), a.ffa_shared_a.into());
    t.insert("adapter".into(), ad.into());

    let f = &cfg.federation;
    let mut fed = Table::new();
    fed.insert("clients".into(), int(f.clients));
    fed.insert("rounds".into(), int(f.rounds as usize));
    fed.insert("local_epochs".into(), int(f.local_epochs as usize));
    fed.insert("batch_size".into(), int(f.batch_size));
    fed.insert("lr".into(), f.lr.into());
    fed.insert("aggregator".into(), f.aggregator.as_str().into());
    fed.insert("prox".into(), f.prox.into());
    fed.insert("mu".into(), f.mu.into());
    fed.insert("participation".into(), f.participation.into());
    fed.insert("averaging".into(), averaging_name(f.averaging).into());
    t.insert("federation".into(), fed.into());
    t
}

fn defaults() -> Table {
    to_table(&ExperimentConfig::default(), 1)
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Replaces the value at `path` in `target`, checking it against the schema.
fn set_path(target: &mut Table, schema: &Table, path: &str, value: Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let (mut t, mut s) = (target, schema);
    while let Some(key) = parts.next() {
        let expected = s.get(key).ok_or_else(|| ConfigError::UnknownKey(path.into()))?;
        if parts.peek().is_none() {
            let value = coerce(path, expected, value)?;
            t.insert(key.into(), value);
            return Ok(());
        }
        match expected {
            Value::Table(sub) => {
                s = sub;
                t = match t.get_mut(key) {
                    Some(Value::Table(tt)) => tt,
                    _ => unreachable!("target mirrors schema"),
                };
            }
            _ => return Err(ConfigError::UnknownKey(path.into())),
        }
    }
    Err(ConfigError::UnknownKey(path.into()))
}

fn coerce(path: &str, expected: &Value, value: Value) -> Result<Value> {
    match (expected, value) {
        (Value::Table(_), v) => Err(ConfigError::Type {
            path: path.into(),
            expected: "table",
            found: type_name(&v),
        }),
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (e, v) if std::mem::discriminant(e) == std::mem::discriminant(&v) => {
            if let Value::Integer(i) = v {
                if i < 0 {
                    return Err(invalid(path, "must be >= 0"));
                }
            }
            Ok(v)
        }
        (e, v) => Err(ConfigError::Type {
            path: path.into(),
            expected: type_name(e),
            found: type_name(&v),
        }),
    }
}

/// Flattens `src` into dotted leaf assignments.
fn leaves(prefix: &str, src: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => leaves(&path, t, out),
            other => out.push((path, other.clone())),
        }
    }
}

/// Parses a `--set` value: a TOML literal, or a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.into()),
    }
}

fn split_override(raw: &str) -> Result<(&str, Value)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| ConfigError::BadOverride(raw.into()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::BadOverride(raw.into()));
    }
    Ok((k, parse_value(v.trim())))
}

fn parse_sweep(v: Value, schema: &Table) -> Result<Sweep> {
    let Value::Table(mut t) = v else {
        return Err(ConfigError::Type {
            path: "sweep".into(),
            expected: "table",
            found: type_name(&v),
        });
    };
    let key = match t.remove("key") {
        Some(Value::String(s)) => s,
        Some(other) => {
            return Err(ConfigError::Type {
                path: "sweep.key".into(),
                expected: "string",
                found: type_name(&other),
            })
        }
        None => return Err(invalid("sweep.key", "missing")),
    };
    let values = match t.remove("values") {
        Some(Value::Array(a)) if !a.is_empty() => a,
        Some(Value::Array(_)) => return Err(invalid("sweep.values", "must not be empty")),
        Some(other) => {
            return Err(ConfigError::Type {
                path: "sweep.values".into(),
                expected: "array",
                found: type_name(&other),
            })
        }
        None => return Err(invalid("sweep.values", "missing")),
    };
    if let Some(k) = t.keys().next() {
        return Err(ConfigError::UnknownKey(format!("sweep.{k}")));
    }
    if key == "seed" || key == "seeds" {
        return Err(invalid("sweep.key", "seeds are swept with the `seeds` key"));
    }
    // every value must be assignable
    let mut probe = schema.clone();
    for v in &values {
        set_path(&mut probe, schema, &key, v.clone()).map_err(|e| match e {
            ConfigError::UnknownKey(_) => invalid("sweep.key", format!("unknown key {key}")),
            other => other,
        })?;
    }
    Ok(Sweep { key, values })
}

/// Parses config text, then applies `--set` overrides and the seed override.
pub fn load_plan(text: &str, sets: &[String], env_seed: Option<&str>) -> Result<Plan> {
    let schema = defaults();
    let mut file: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
    let sweep_value = file.remove("sweep");
    let mut table = schema.clone();
    let mut assigned = Vec::new();
    leaves("", &file, &mut assigned);
    // an empty sub-table in the file is fine, but must be a known section
    for (k, v) in &file {
        if let Value::Table(t) = v {
            if t.is_empty() && !matches!(schema.get(k), Some(Value::Table(_))) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
        }
    }
    for (path, v) in assigned {
        set_path(&mut table, &schema, &path, v)?;
    }
    let mut sweep = sweep_value.map(|v| parse_sweep(v, &schema)).transpose()?;
    for raw in sets {
        let (k, v) = split_override(raw)?;
        if let Some(rest) = k.strip_prefix("sweep.") {
            let s = sweep.get_or_insert(Sweep {
                key: String::new(),
                values: Vec::new(),
            });
            match (rest, v) {
                ("key", Value::String(key)) => s.key = key,
                ("values", Value::Array(a)) => s.values = a,
                (_, v) => {
                    return Err(ConfigError::Type {
                        path: k.into(),
                        expected: if rest == "key" { "string" } else { "array" },
                        found: type_name(&v),
                    })
                }
            }
            continue;
        }
        set_path(&mut table, &schema, k, v)?;
    }
    if let Some(s) = sweep.take() {
        let mut t = Table::new();
        t.insert("key".into(), s.key.into());
        t.insert("values".into(), s.values.into());
        sweep = Some(parse_sweep(t.into(), &schema)?);
    }
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| invalid(SEED_ENV, format!("not an unsigned integer: {raw:?}")))?;
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    let seeds = match table.get("seeds") {
        Some(Value::Integer(n)) if *n >= 1 => *n as u64,
        _ => return Err(invalid("seeds", "must be >= 1")),
    };
    // surface range errors now rather than at run time
    let plan = Plan { table, seeds, sweep };
    for (_, t) in plan.expand()? {
        from_table(&t)?;
    }
    Ok(plan)
}

pub fn load_config(text: &str, sets: &[String], env_seed: Option<&str>) -> Result<ExperimentConfig> {
    let plan = load_plan(text, sets, env_seed)?;
    from_table(&plan.table)
}

impl Plan {
    /// One `(variant name, single-run table)` per sweep value, or a single
    /// unnamed entry. The tables keep `seeds`.
    pub fn expand(&self) -> Result<Vec<(Option<String>, Table)>> {
        let schema = defaults();
        match &self.sweep {
            None => Ok(vec![(None, self.table.clone())]),
            Some(s) => s
                .values
                .iter()
                .map(|v| {
                    let mut t = self.table.clone();
                    set_path(&mut t, &schema, &s.key, v.clone())?;
                    Ok((Some(variant_name(&s.key, v)), t))
                })
                .collect(),
        }
    }
}

pub fn variant_name(key: &str, v: &Value) -> String {
    let last = key.rsplit('.').next().unwrap_or(key);
    let val = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    format!("{last}-{val}")
}

fn get<'a>(t: &'a Table, path: &str) -> &'a Value {
    let mut cur = t;
    let mut parts = path.split('.').peekable();
    while let Some(p) = parts.next() {
        let v = cur.get(p).expect("resolved table mirrors schema");
        if parts.peek().is_none() {
            return v;
        }
        cur = v.as_table().expect("section");
    }
    unreachable!()
}

fn get_usize(t: &Table, path: &str) -> Result<usize> {
    let i = get(t, path).as_integer().expect("typed by schema");
    usize::try_from(i).map_err(|_| invalid(path, "out of range"))
}

fn get_u32(t: &Table, path: &str) -> Result<u32> {
    u32::try_from(get_usize(t, path)?).map_err(|_| invalid(path, "out of range"))
}

fn get_f64(t: &Table, path: &str) -> f64 {
    get(t, path).as_float().expect("typed by schema")
}

fn get_bool(t: &Table, path: &str) -> bool {
    get(t, path).as_bool().expect("typed by schema")
}

fn get_enum<T: std::str::FromStr>(t: &Table, path: &str, allowed: &str) -> Result<T> {
    let s = get(t, path).as_str().expect("typed by schema");
    s.parse()
        .map_err(|_| invalid(path, format!("unknown value {s:?}; expected one of {allowed}")))
}

/// Builds and validates a single-run config from a resolved table.
pub fn from_table(t: &Table) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig {
        seed: get(t, "seed").as_integer().expect("typed") as u64,
        mode: get_enum(t, "mode", "federated, centralized")?,
        ..ExperimentConfig::default()
    };

    let m = &mut c.data.mixture;
    m.num_classes = get_usize(t, "data.num_classes")?;
    m.per_class = vec![get_usize(t, "data.per_class")?; m.num_classes];
    m.visual_dim = get_usize(t, "data.visual_dim")?;
    m.text_dim = get_usize(t, "data.text_dim")?;
    m.visual_tokens = get_usize(t, "data.visual_tokens")?;
    m.text_tokens = get_usize(t, "data.text_tokens")?;
    m.separation = get_f64(t, "data.separation");
    m.noise_std = get_f64(t, "data.noise_std");
    m.num_domains = get_usize(t, "data.num_domains")?;
    m.domain_skew = get_f64(t, "data.domain_skew");
    c.data.partition = match get(t, "data.partition").as_str().expect("typed") {
        "iid" => PartitionKind::Iid,
        "domains" => PartitionKind::Domains,
        "shards" => PartitionKind::Shards {
            num_shards: get_usize(t, "data.num_shards")?,
            shards_per_client: get_usize(t, "data.shards_per_client")?,
        },
        other => {
            return Err(invalid(
                "data.partition",
                format!("unknown value {other:?}; expected one of iid, domains, shards"),
            ))
        }
    };
    c.data.eval_fraction = get_f64(t, "data.eval_fraction");
    c.data.pretrain_fraction = get_f64(t, "data.pretrain_fraction");
    c.hidden_dim = get_usize(t, "model.hidden_dim")?;

    c.pretrain.epochs = get_u32(t, "pretrain.epochs")?;
    c.pretrain.lr = get_f64(t, "pretrain.lr");
    c.pretrain.batch_size = get_usize(t, "pretrain.batch_size")?;
    c.pretrain.holdout_fraction = get_f64(t, "pretrain.holdout_fraction");

    c.adapter.rank = get_usize(t, "adapter.rank")?;
    c.adapter.alpha = get_f64(t, "adapter.alpha");
    c.adapter.dropout = get_f64(t, "adapter.dropout");
    c.adapter.scale_mode = get_enum::<ScaleMode>(t, "adapter.scale_mode", "alpha, multiplier")?;
    c.adapter.strategy = get_enum::<StrategyKind>(t, "adapter.strategy", "plora, full_lora, ffa_lora")?;
    c.adapter.ffa_shared_a = get_bool(t, "adapter.ffa_shared_a");

    let f = &mut c.federation;
    f.clients = get_usize(t, "federation.clients")?;
    f.rounds = get_u32(t, "federation.rounds")?;
    f.local_epochs = get_u32(t, "federation.local_epochs")?;
    f.batch_size = get_usize(t, "federation.batch_size")?;
    f.lr = get_f64(t, "federation.lr");
    f.aggregator = get_enum::<AggregatorKind>(t, "federation.aggregator", "mean, weighted")?;
    f.prox = get_bool(t, "federation.prox");
    f.mu = get_f64(t, "federation.mu");
    f.participation = get_f64(t, "federation.participation");
    f.averaging = match get(t, "federation.averaging").as_str().expect("typed") {
        "macro" => Averaging::Macro,
        "micro" => Averaging::Micro,
        other => {
            return Err(invalid(
                "federation.averaging",
                format!("unknown value {other:?}; expected one of macro, micro"),
            ))
        }
    };
    if let Err(errs) = c.validate() {
        let e = &errs[0];
        return Err(invalid(e.path, e.reason.clone()));
    }
    Ok(c)
}

/// The echo file: every field, defaults included, sorted by key.
pub fn render(t: &Table) -> String {
    toml::to_string(t).expect("tables of plain values always serialize")
}
