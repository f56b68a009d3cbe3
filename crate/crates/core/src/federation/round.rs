use alloc::boxed::Box;
use alloc::vec::Vec;

use super::aggregate::{aggregate, AggregatorKind};
use super::client::{local_train, predict, score, ClientState, LocalOutcome, Prediction, TrainingContext};
use crate::adapters::{extract_uplink, install_downlink, wire, SharedMatrices, StrategyKind};
use crate::error::{Error, Result};
use crate::linalg::{tag, RngStream};
use crate::metrics::{Averaging, MetricsReport};

/// Runs independent per-client jobs. Implementations may run them in any
/// order or concurrently, but must return results in index order.
pub trait Executor {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(job).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    /// Last completed round; 0 before any training.
    pub round: u32,
    pub global: SharedMatrices,
    pub aggregator: AggregatorKind,
    pub strategy: StrategyKind,
    /// `false` in centralized mode: the single client keeps its own matrices.
    pub aggregate: bool,
    /// Fraction of clients selected each round.
    pub participation: f64,
    pub seed: u64,
    pub base_fingerprint: [u8; 32],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    /// The client's freshly trained model, before aggregation.
    Local,
    /// The model after installing the downlink.
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Local => "local",
            Split::Eval => "eval",
        }
    }
}

/// One row of a round: metrics of one client on its eval split.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub split: Split,
    pub metrics: MetricsReport,
    /// Mean loss of the last local epoch; absent on rows without training.
    pub train_loss: Option<f64>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: u32,
    /// Ordered by client id, then split.
    pub rows: Vec<ClientRoundMetrics>,
    pub participants: Vec<usize>,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Metrics over the union of all eval splits, each example scored by its
    /// own client's post-downlink model.
    pub pooled: MetricsReport,
    /// Filled in by hosts that have a clock; never part of output files.
    pub wall_time_secs: f64,
}

impl RoundReport {
    pub fn eval_rows(&self) -> impl Iterator<Item = &ClientRoundMetrics> {
        self.rows.iter().filter(|r| r.split == Split::Eval)
    }

    /// Unweighted mean over clients of the post-downlink accuracy.
    pub fn mean_accuracy(&self) -> f64 {
        let accs: Vec<f64> = self.eval_rows().map(|r| r.metrics.accuracy).collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    }
}

/// Clients taking part in `round`; everyone at participation 1.
pub fn select_participants(server: &ServerState, num_clients: usize, round: u32) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..num_clients).collect();
    if server.participation >= 1.0 {
        return ids;
    }
    let want = libm::ceil(server.participation * num_clients as f64) as usize;
    let mut rng = RngStream::new(server.seed, &[tag::PARTICIPATION, u64::from(round)]);
    rng.shuffle(&mut ids);
    ids.truncate(want.clamp(1, num_clients));
    ids.sort_unstable();
    ids
}

fn evaluate_all<E: Executor>(
    executor: &E,
    ctx: &TrainingContext,
    clients: &[ClientState],
) -> Result<Vec<Vec<Prediction>>> {
    executor
        .map(clients.len(), |i| predict(ctx, &clients[i].adapter, &clients[i].eval))
        .into_iter()
        .collect()
}

fn pooled_report(predictions: &[Vec<Prediction>], classes: usize, averaging: Averaging) -> Result<MetricsReport> {
    let mut all: Vec<Prediction> = predictions.iter().flatten().copied().collect();
    all.sort_by_key(|p| p.index);
    score(&all, classes, averaging)
}

/// Metrics before any fine-tuning. Both splits carry the same values.
pub fn initial_report<E: Executor>(
    executor: &E,
    ctx: &TrainingContext,
    clients: &[ClientState],
    averaging: Averaging,
) -> Result<RoundReport> {
    let classes = ctx.dataset.num_classes();
    let predictions = evaluate_all(executor, ctx, clients)?;
    let mut rows = Vec::with_capacity(2 * clients.len());
    for (c, preds) in clients.iter().zip(&predictions) {
        let metrics = score(preds, classes, averaging)?;
        for split in [Split::Local, Split::Eval] {
            rows.push(ClientRoundMetrics {
                client: c.id,
                split,
                metrics,
                train_loss: None,
                uplink_bytes: 0,
                downlink_bytes: 0,
            });
        }
    }
    Ok(RoundReport {
        round: 0,
        rows,
        participants: Vec::new(),
        uplink_bytes: 0,
        downlink_bytes: 0,
        pooled: pooled_report(&predictions, classes, averaging)?,
        wall_time_secs: 0.0,
    })
}

/// One federated round: local training, uplink, aggregation, downlink to
/// every client, evaluation.
///
/// Nothing is modified unless the whole round succeeds, so a failing client
/// leaves every client and the server at their previous state.
pub fn run_round<E: Executor>(
    server: &mut ServerState,
    clients: &mut [ClientState],
    ctx: &TrainingContext,
    executor: &E,
    averaging: Averaging,
) -> Result<RoundReport> {
    if clients.is_empty() {
        return Err(Error::Empty("clients"));
    }
    if let Some(c) = clients.iter().find(|c| c.adapter.strategy() != server.strategy) {
        return Err(Error::StrategyMismatch {
            adapter: c.adapter.strategy(),
            requested: server.strategy,
        });
    }
    let round = server.round.checked_add(1).ok_or(Error::invalid("round", "counter overflow"))?;
    let participants = select_participants(server, clients.len(), round);
    let classes = ctx.dataset.num_classes();

    let outcomes = executor.map(participants.len(), |j| -> Result<(LocalOutcome, Vec<Prediction>)> {
        let c = &clients[participants[j]];
        let out = local_train(c, ctx, round).map_err(|e| Error::ClientFailed {
            client: c.id,
            source: Box::new(e),
        })?;
        let preds = predict(ctx, &out.state.adapter, &out.state.eval)?;
        Ok((out, preds))
    });
    let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let mut next: Vec<ClientState> = clients.to_vec();
    let mut uplink = Vec::with_capacity(outcomes.len());
    let mut local_rows = Vec::with_capacity(outcomes.len());
    for (&i, (out, preds)) in participants.iter().zip(&outcomes) {
        let c = &out.state;
        if server.aggregate {
            let payload = extract_uplink(
                &c.adapter,
                server.strategy,
                c.id as u32,
                round,
                c.train.len() as u64,
            )?;
            uplink.push(payload);
        }
        local_rows.push((i, score(preds, classes, averaging)?, out.train_loss));
        next[i] = out.state.clone();
    }

    let mut up_bytes = vec_of(clients.len());
    let mut down_bytes = vec_of(clients.len());
    let global = if server.aggregate {
        for p in &uplink {
            up_bytes[p.client_id as usize] = p.byte_size as u64;
        }
        let global = aggregate(server.aggregator, &uplink)?;
        let size = wire::message_len(&global) as u64;
        for (c, d) in next.iter_mut().zip(down_bytes.iter_mut()) {
            c.adapter = install_downlink(&c.adapter, &global, server.strategy)?;
            c.reference = Some(global.clone());
            *d = size;
        }
        global
    } else {
        if next.len() != 1 {
            return Err(Error::invalid("clients", "centralized mode runs exactly one client"));
        }
        let own = SharedMatrices::of(&next[0].adapter, server.strategy);
        next[0].reference = Some(own.clone());
        own
    };

    let predictions = evaluate_all(executor, ctx, &next)?;
    let mut rows = Vec::with_capacity(2 * next.len());
    for (i, (c, preds)) in next.iter().zip(&predictions).enumerate() {
        if let Some((_, metrics, loss)) = local_rows.iter().find(|r| r.0 == i) {
            rows.push(ClientRoundMetrics {
                client: c.id,
                split: Split::Local,
                metrics: *metrics,
                train_loss: Some(*loss),
                uplink_bytes: 0,
                downlink_bytes: 0,
            });
        }
        rows.push(ClientRoundMetrics {
            client: c.id,
            split: Split::Eval,
            metrics: score(preds, classes, averaging)?,
            train_loss: local_rows.iter().find(|r| r.0 == i).map(|r| r.2),
            uplink_bytes: up_bytes[i],
            downlink_bytes: down_bytes[i],
        });
    }
    let report = RoundReport {
        round,
        rows,
        uplink_bytes: up_bytes.iter().sum(),
        downlink_bytes: down_bytes.iter().sum(),
        participants,
        pooled: pooled_report(&predictions, classes, averaging)?,
        wall_time_secs: 0.0,
    };

    clients.clone_from_slice(&next);
    server.round = round;
    server.global = global;
    Ok(report)
}

fn vec_of(n: usize) -> Vec<u64> {
    alloc::vec![0; n]
}
