use alloc::vec::Vec;

use crate::adapters::{LoraAdapter, SharedMatrices};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{argmax, lora_backward, make_dropout_mask, sequence_cross_entropy, DropoutMask, GradPair};
use crate::linalg::{tag, Matrix, RngStream};
use crate::metrics::{confusion_from_predictions, metrics, Averaging, MetricsReport};
use crate::model::FrozenBase;

/// Local optimizer settings of one client.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: u32,
    /// Proximal weight; `0` is plain SGD.
    pub prox_mu: f64,
}

impl Default for LocalHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            local_epochs: 3,
            prox_mu: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub adapter: LoraAdapter,
    pub hyper: LocalHyper,
    /// Matrices received at the last downlink; the proximal anchor.
    pub reference: Option<SharedMatrices>,
    /// Master seed of this client's random streams.
    pub seed: u64,
    /// Key of this client's streams under the seed; the client id by default.
    pub stream: u64,
}

impl ClientState {
    /// Stream used for shuffling and dropout in `round`.
    pub fn round_stream(&self, round: u32) -> RngStream {
        RngStream::new(self.seed, &[tag::LOCAL_TRAIN, self.stream, u64::from(round)])
    }
}

/// Frozen base plus precomputed features of every dataset example.
///
/// The base never changes during federation, so the extractor output of each
/// example is computed once and shared by every client.
#[derive(Clone, Debug)]
pub struct TrainingContext {
    pub base: FrozenBase,
    pub dataset: Dataset,
    features: Vec<Vec<f64>>,
}

impl TrainingContext {
    pub fn new(base: FrozenBase, dataset: Dataset) -> Result<Self> {
        let features = dataset
            .examples
            .iter()
            .map(|ex| base.features(ex))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            dataset,
            features,
        })
    }

    pub fn features(&self, index: usize) -> &[f64] {
        &self.features[index]
    }

    pub fn label(&self, index: usize) -> usize {
        self.dataset.examples[index].label
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub state: ClientState,
    /// Mean per-example loss over the last local epoch.
    pub train_loss: f64,
}

/// Gradient of `(μ/2)‖M − M_ref‖²` added in place.
fn add_prox(grad: &mut Matrix, current: &Matrix, reference: &Matrix, mu: f64) -> Result<()> {
    current.check_same_shape(reference, "prox")?;
    for ((g, m), r) in grad.as_mut_slice().iter_mut().zip(current.as_slice()).zip(reference.as_slice()) {
        *g += mu * (m - r);
    }
    Ok(())
}

/// Mini-batch gradient of the token loss plus the proximal term, without
/// updating anything. Returns the summed batch loss.
pub fn batch_gradient(
    ctx: &TrainingContext,
    adapter: &LoraAdapter,
    batch: &[usize],
    masks: &[DropoutMask],
    reference: Option<&SharedMatrices>,
    prox_mu: f64,
) -> Result<(f64, GradPair)> {
    let head = ctx.base.head();
    let mut grad = GradPair::zeros_like(adapter);
    let weight = 1.0 / batch.len() as f64;
    let mut loss_sum = 0.0;
    for (&i, mask) in batch.iter().zip(masks) {
        let features = ctx.features(i);
        let logits = ctx.base.adapted_logits(adapter, features, mask)?;
        let (loss, dlogits) = sequence_cross_entropy(&[logits], &[ctx.label(i)])?;
        let g = lora_backward(head, adapter, features, mask, &dlogits[0])?;
        grad.accumulate(weight, &g)?;
        loss_sum += loss;
    }
    if prox_mu > 0.0 {
        let reference = reference.ok_or(Error::MissingReference { client: usize::MAX })?;
        add_prox(&mut grad.d_b, adapter.b(), reference.b(), prox_mu)?;
        if let Some(a_ref) = reference.a() {
            add_prox(&mut grad.d_a, adapter.a(), a_ref, prox_mu)?;
        }
    }
    Ok((loss_sum, grad))
}

/// Runs `local_epochs` epochs of mini-batch SGD on the client's train split.
///
/// The proximal term anchors only matrices that arrived by downlink: `B`
/// always, and `A` only when the strategy shares it. Under FFA-LoRA `A`
/// receives no update at all.
pub fn local_train(client: &ClientState, ctx: &TrainingContext, round: u32) -> Result<LocalOutcome> {
    let hyper = client.hyper;
    if hyper.prox_mu > 0.0 && client.reference.is_none() {
        return Err(Error::MissingReference { client: client.id });
    }
    if client.train.is_empty() {
        return Err(Error::Empty("client train split"));
    }
    let mut adapter = client.adapter.clone();
    let mut rng = client.round_stream(round);
    let trains_a = adapter.strategy().trains_a();
    let dim = adapter.n();
    let mut order = client.train.clone();
    let mut last_epoch_loss = 0.0;
    for _ in 0..hyper.local_epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let masks = batch
                .iter()
                .map(|_| make_dropout_mask(dim, adapter.dropout(), &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = batch_gradient(ctx, &adapter, batch, &masks, client.reference.as_ref(), hyper.prox_mu)
                .map_err(|e| match e {
                    Error::MissingReference { .. } => Error::MissingReference { client: client.id },
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            epoch_loss += loss;
            let (a, b) = adapter.factors_mut();
            b.axpy(-hyper.lr, &grad.d_b)?;
            if trains_a {
                a.axpy(-hyper.lr, &grad.d_a)?;
            }
        }
        last_epoch_loss = epoch_loss / order.len() as f64;
    }
    if !adapter.a().is_finite() || !adapter.b().is_finite() {
        return Err(Error::NonFinite("adapter weights"));
    }
    Ok(LocalOutcome {
        state: ClientState {
            adapter,
            ..client.clone()
        },
        train_loss: last_epoch_loss,
    })
}

/// One evaluated example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    pub loss: f64,
}

/// Eval-mode predictions of `adapter` on `indices`.
pub fn predict(ctx: &TrainingContext, adapter: &LoraAdapter, indices: &[usize]) -> Result<Vec<Prediction>> {
    let keep = DropoutMask::keep_all(adapter.n());
    indices
        .iter()
        .map(|&i| {
            let logits = ctx.base.adapted_logits(adapter, ctx.features(i), &keep)?;
            let label = ctx.label(i);
            let (loss, _) = sequence_cross_entropy(&[&logits[..]], &[label])?;
            Ok(Prediction {
                index: i,
                label,
                predicted: argmax(&logits),
                loss,
            })
        })
        .collect()
}

pub fn score(predictions: &[Prediction], classes: usize, averaging: Averaging) -> Result<MetricsReport> {
    let truth: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let pred: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    let losses: Vec<f64> = predictions.iter().map(|p| p.loss).collect();
    metrics(&confusion_from_predictions(&truth, &pred, classes)?, &losses, averaging)
}

pub fn evaluate(
    ctx: &TrainingContext,
    adapter: &LoraAdapter,
    indices: &[usize],
    averaging: Averaging,
) -> Result<MetricsReport> {
    score(&predict(ctx, adapter, indices)?, ctx.dataset.num_classes(), averaging)
}
