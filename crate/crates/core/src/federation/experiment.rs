//! End-to-end experiment: data, frozen base, clients, rounds.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::aggregate::AggregatorKind;
use super::client::{ClientState, LocalHyper, TrainingContext};
use super::round::{initial_report, run_round, Executor, RoundReport, ServerState};
use crate::adapters::{init_adapter, AdapterSpec, SharedMatrices, StrategyKind};
use crate::data::{
    carve_pretraining_pool, gen_mixture, partition_domains, partition_iid, partition_shards, Dataset, MixtureConfig,
    Partition,
};
use crate::error::{Error, Result};
use crate::linalg::{tag, RngStream};
use crate::metrics::Averaging;
use crate::model::{build_base, pretrain_base, FrozenBase, ModelConfig, PretrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RunMode {
    #[default]
    Federated,
    /// One client holding every train and eval example, no aggregation.
    Centralized,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Federated => "federated",
            RunMode::Centralized => "centralized",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunMode {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        match s {
            "federated" => Ok(RunMode::Federated),
            "centralized" => Ok(RunMode::Centralized),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PartitionKind {
    Iid,
    /// Label shards dealt to clients.
    Shards { num_shards: usize, shards_per_client: usize },
    /// Domain `d` goes to client `d % K`.
    #[default]
    Domains,
}

impl PartitionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionKind::Iid => "iid",
            PartitionKind::Shards { .. } => "shards",
            PartitionKind::Domains => "domains",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub mixture: MixtureConfig,
    pub partition: PartitionKind,
    /// Fraction of each client's data held out for evaluation.
    pub eval_fraction: f64,
    /// Fraction of every domain reserved for pretraining the base.
    pub pretrain_fraction: f64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            mixture: MixtureConfig::default(),
            partition: PartitionKind::Domains,
            eval_fraction: 0.2,
            pretrain_fraction: 0.2,
        }
    }
}

/// How `adapter.alpha` turns into the adapter-path multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleMode {
    /// `s = alpha / rank`.
    #[default]
    Alpha,
    /// `s = alpha` at every rank.
    Multiplier,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::Alpha => "alpha",
            ScaleMode::Multiplier => "multiplier",
        }
    }
}

impl FromStr for ScaleMode {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        match s {
            "alpha" => Ok(ScaleMode::Alpha),
            "multiplier" => Ok(ScaleMode::Multiplier),
            _ => Err(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterSettings {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub scale_mode: ScaleMode,
    pub strategy: StrategyKind,
    /// Under FFA-LoRA, start every client from the same frozen `A`.
    pub ffa_shared_a: bool,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
            scale_mode: ScaleMode::Alpha,
            strategy: StrategyKind::PLora,
            ffa_shared_a: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FederationSettings {
    pub clients: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub aggregator: AggregatorKind,
    /// Adds the proximal term to the local objective.
    pub prox: bool,
    pub mu: f64,
    pub participation: f64,
    pub averaging: Averaging,
}

impl Default for FederationSettings {
    fn default() -> Self {
        Self {
            clients: 4,
            rounds: 5,
            local_epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            aggregator: AggregatorKind::Mean,
            prox: false,
            mu: 0.01,
            participation: 1.0,
            averaging: Averaging::Macro,
        }
    }
}

impl FederationSettings {
    pub fn effective_mu(&self) -> f64 {
        if self.prox {
            self.mu
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub data: DataSettings,
    pub hidden_dim: usize,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterSettings,
    pub federation: FederationSettings,
}

/// A validation failure naming the offending config path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldError {
    pub path: &'static str,
    pub reason: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}

fn fraction_ok(v: f64, open_top: bool) -> bool {
    v.is_finite() && v >= 0.0 && if open_top { v < 1.0 } else { v <= 1.0 }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: RunMode::Federated,
            data: DataSettings::default(),
            hidden_dim: 64,
            pretrain: PretrainConfig::default(),
            adapter: AdapterSettings::default(),
            federation: FederationSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.data.mixture;
        ModelConfig {
            visual_dim: m.visual_dim,
            text_dim: m.text_dim,
            visual_tokens: m.visual_tokens,
            text_tokens: m.text_tokens,
            hidden_dim: self.hidden_dim,
            num_classes: m.num_classes,
            seed: self.seed,
        }
    }

    pub fn adapter_spec(&self) -> AdapterSpec {
        AdapterSpec {
            m: self.data.mixture.num_classes,
            n: self.hidden_dim,
            rank: self.adapter.rank,
            alpha: match self.adapter.scale_mode {
                ScaleMode::Alpha => self.adapter.alpha,
                ScaleMode::Multiplier => self.adapter.alpha * self.adapter.rank as f64,
            },
            dropout: self.adapter.dropout,
            strategy: self.adapter.strategy,
        }
    }

    /// Every violated constraint, each tagged with its field path.
    pub fn validate(&self) -> core::result::Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        let mut bad = |path: &'static str, reason: &str| {
            errs.push(FieldError {
                path,
                reason: String::from(reason),
            })
        };
        let mix = &self.data.mixture;
        if mix.num_classes < 2 {
            bad("data.num_classes", "must be >= 2");
        }
        if mix.per_class.len() != mix.num_classes || mix.per_class.contains(&0) {
            bad("data.per_class", "must be >= 1");
        }
        for (path, v) in [
            ("data.visual_dim", mix.visual_dim),
            ("data.text_dim", mix.text_dim),
            ("data.visual_tokens", mix.visual_tokens),
            ("data.text_tokens", mix.text_tokens),
            ("data.num_domains", mix.num_domains),
            ("model.hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                bad(path, "must be >= 1");
            }
        }
        if !(mix.separation.is_finite() && mix.separation > 0.0) {
            bad("data.separation", "must be finite and > 0");
        }
        if !(mix.noise_std.is_finite() && mix.noise_std >= 0.0) {
            bad("data.noise_std", "must be finite and >= 0");
        }
        if !fraction_ok(mix.domain_skew, false) {
            bad("data.domain_skew", "must lie in [0, 1]");
        }
        if !fraction_ok(self.data.eval_fraction, true) {
            bad("data.eval_fraction", "must lie in [0, 1)");
        }
        if !fraction_ok(self.data.pretrain_fraction, true) || self.data.pretrain_fraction == 0.0 {
            bad("data.pretrain_fraction", "must lie in (0, 1)");
        }
        let k = self.federation.clients;
        if k == 0 {
            bad("federation.clients", "must be >= 1");
        }
        if let PartitionKind::Shards {
            num_shards,
            shards_per_client,
        } = self.data.partition
        {
            if shards_per_client == 0 {
                bad("data.shards_per_client", "must be >= 1");
            } else if num_shards != k * shards_per_client {
                bad("data.num_shards", "must equal federation.clients * data.shards_per_client");
            }
        }
        if self.pretrain.batch_size == 0 {
            bad("pretrain.batch_size", "must be >= 1");
        }
        if !(self.pretrain.lr.is_finite() && self.pretrain.lr > 0.0) {
            bad("pretrain.lr", "must be finite and > 0");
        }
        if !fraction_ok(self.pretrain.holdout_fraction, true) || self.pretrain.holdout_fraction == 0.0 {
            bad("pretrain.holdout_fraction", "must lie in (0, 1)");
        }
        let (m, n, r) = (mix.num_classes, self.hidden_dim, self.adapter.rank);
        if r == 0 || r >= m.min(n) {
            bad("adapter.rank", "must satisfy 1 <= rank < min(num_classes, hidden_dim)");
        }
        if !(self.adapter.alpha.is_finite() && self.adapter.alpha > 0.0) {
            bad("adapter.alpha", "must be finite and > 0");
        }
        if !fraction_ok(self.adapter.dropout, true) {
            bad("adapter.dropout", "must lie in [0, 1)");
        }
        let f = &self.federation;
        if f.batch_size == 0 {
            bad("federation.batch_size", "must be >= 1");
        }
        if f.local_epochs == 0 {
            bad("federation.local_epochs", "must be >= 1");
        }
        if !(f.lr.is_finite() && f.lr > 0.0) {
            bad("federation.lr", "must be finite and > 0");
        }
        if !(f.mu.is_finite() && f.mu >= 0.0) {
            bad("federation.mu", "must be finite and >= 0");
        }
        if !(f.participation.is_finite() && f.participation > 0.0 && f.participation <= 1.0) {
            bad("federation.participation", "must lie in (0, 1]");
        }
        if self.mode == RunMode::Centralized && f.participation < 1.0 {
            bad("federation.participation", "must be 1 in centralized mode");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Generates the mixture and splits off the pretraining pool.
/// Returns `(pool, federated)`; neither depends on the client count.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    split_pool(cfg, &gen_mixture(&cfg.data.mixture, cfg.seed)?)
}

/// [`prepare_data`] for an already generated mixture.
pub fn split_pool(cfg: &ExperimentConfig, full: &Dataset) -> Result<(Dataset, Dataset)> {
    let (pool, rest) = carve_pretraining_pool(
        full,
        cfg.data.pretrain_fraction,
        &RngStream::new(cfg.seed, &[tag::PRETRAIN, 0]),
    )?;
    Ok((full.subset(&pool)?, full.subset(&rest)?))
}

pub fn prepare_base(cfg: &ExperimentConfig, pool: &Dataset) -> Result<FrozenBase> {
    let base = build_base(&cfg.model_config())?;
    let base = pretrain_base(&base, pool, &cfg.pretrain, &RngStream::new(cfg.seed, &[tag::PRETRAIN, 1]))?;
    let chance = 1.0 / cfg.data.mixture.num_classes as f64;
    if cfg.pretrain.epochs > 0 && !(base.meta().accuracy > chance) {
        return Err(Error::invalid("pretrain", "holdout accuracy is not above chance"));
    }
    Ok(base.seal())
}

pub fn partition(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Partition> {
    let mut rng = RngStream::new(cfg.seed, &[tag::PARTITION]);
    let k = cfg.federation.clients;
    let frac = cfg.data.eval_fraction;
    let mut p = match cfg.data.partition {
        PartitionKind::Iid => partition_iid(dataset, k, frac, &mut rng)?,
        PartitionKind::Shards {
            num_shards,
            shards_per_client,
        } => partition_shards(dataset, num_shards, shards_per_client, k, frac, &mut rng)?,
        PartitionKind::Domains => partition_domains(dataset, k, frac, &mut rng)?,
    };
    if cfg.mode == RunMode::Centralized {
        let mut merged = p.clients.iter().fold(crate::data::ClientSplit::default(), |mut acc, c| {
            acc.train.extend_from_slice(&c.train);
            acc.eval.extend_from_slice(&c.eval);
            acc
        });
        merged.train.sort_unstable();
        merged.eval.sort_unstable();
        p.clients = alloc::vec![merged];
    }
    for c in &mut p.clients {
        c.train.sort_unstable();
        c.eval.sort_unstable();
    }
    Ok(p)
}

/// Key of the adapter init stream shared by all clients.
const COMMON_INIT: u64 = u64::MAX;

pub struct Experiment {
    pub config: ExperimentConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub context: TrainingContext,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let (pool, data) = prepare_data(&config)?;
        let base = prepare_base(&config, &pool)?;
        Self::with_base(config, base, data)
    }

    /// Builds clients around an already pretrained base and federated data.
    pub fn with_base(config: ExperimentConfig, base: FrozenBase, data: Dataset) -> Result<Self> {
        if let Err(errs) = config.validate() {
            let e = &errs[0];
            return Err(Error::Invalid {
                field: e.path,
                reason: e.reason.clone(),
            });
        }
        let base = base.seal();
        let part = partition(&config, &data)?;
        let spec = config.adapter_spec();
        let strategy = spec.strategy;
        let common = strategy == StrategyKind::FullLora
            || (strategy == StrategyKind::FfaLora && config.adapter.ffa_shared_a);
        let hyper = LocalHyper {
            lr: config.federation.lr,
            batch_size: config.federation.batch_size,
            local_epochs: config.federation.local_epochs,
            prox_mu: config.federation.effective_mu(),
        };
        let mut clients = Vec::with_capacity(part.num_clients());
        for (id, split) in part.clients.into_iter().enumerate() {
            if split.train.is_empty() || split.eval.is_empty() {
                return Err(Error::invalid("federation.clients", "a client received an empty split"));
            }
            let key = if common { COMMON_INIT } else { id as u64 };
            let adapter = init_adapter(&spec, &mut RngStream::new(config.seed, &[tag::ADAPTER, key]))?;
            let reference = Some(SharedMatrices::of(&adapter, strategy));
            clients.push(ClientState {
                id,
                train: split.train,
                eval: split.eval,
                adapter,
                hyper,
                reference,
                seed: config.seed,
                stream: id as u64,
            });
        }
        let server = ServerState {
            round: 0,
            global: SharedMatrices::of(&clients[0].adapter, strategy),
            aggregator: config.federation.aggregator,
            strategy,
            aggregate: config.mode == RunMode::Federated,
            participation: config.federation.participation,
            seed: config.seed,
            base_fingerprint: base.fingerprint(),
        };
        Ok(Self {
            server,
            clients,
            context: TrainingContext::new(base, data)?,
            config,
        })
    }

    pub fn initial_report<E: Executor>(&self, executor: &E) -> Result<RoundReport> {
        initial_report(executor, &self.context, &self.clients, self.config.federation.averaging)
    }

    pub fn run_round<E: Executor>(&mut self, executor: &E) -> Result<RoundReport> {
        run_round(
            &mut self.server,
            &mut self.clients,
            &self.context,
            executor,
            self.config.federation.averaging,
        )
    }

    /// Round 0 followed by every configured round.
    pub fn run<E: Executor>(&mut self, executor: &E) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::with_capacity(self.config.federation.rounds as usize + 1);
        reports.push(self.initial_report(executor)?);
        for _ in 0..self.config.federation.rounds {
            reports.push(self.run_round(executor)?);
        }
        Ok(reports)
    }
}
