//! Frozen base network: projection/concat front-end, ReLU extractor and a
//! linear head that carries the only adapter.

use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::adapters::LoraAdapter;
use crate::data::{split_train_eval, Dataset, Example};
use crate::error::{Error, Result};
use crate::layers::{
    argmax, linear_backward, linear_forward, lora_forward, make_dropout_mask, relu_in_place, softmax_cross_entropy,
    DropoutMask, LinearLayer,
};
use crate::linalg::{gaussian_matrix, tag, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub visual_dim: usize,
    pub text_dim: usize,
    pub visual_tokens: usize,
    pub text_tokens: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual_dim: 8,
            text_dim: 4,
            visual_tokens: 2,
            text_tokens: 2,
            hidden_dim: 64,
            num_classes: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.visual_dim,
            self.text_dim,
            self.visual_tokens,
            self.text_tokens,
            self.hidden_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model", "all dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("model.num_classes", "need at least 2 classes"));
        }
        Ok(())
    }

    /// Length of the flattened `[V·Pᵀ ; T]` input.
    pub fn input_dim(&self) -> usize {
        (self.visual_tokens + self.text_tokens) * self.text_dim
    }
}

/// Maps visual tokens into the text embedding width.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionLayer {
    /// `D_t x D_v`.
    pub weight: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorLayer {
    pub linear: LinearLayer,
    pub activation: Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PretrainMeta {
    pub epochs: u32,
    pub pooled_size: u64,
    /// Held-out accuracy after pretraining.
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseStage {
    Initialized,
    Pretrained,
    /// Handed to federation; no further pretraining.
    Sealed,
}

impl BaseStage {
    pub fn tag(self) -> u8 {
        match self {
            BaseStage::Initialized => 0,
            BaseStage::Pretrained => 1,
            BaseStage::Sealed => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(BaseStage::Initialized),
            1 => Some(BaseStage::Pretrained),
            2 => Some(BaseStage::Sealed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBase {
    config: ModelConfig,
    projection: ProjectionLayer,
    extractor: Vec<ExtractorLayer>,
    head: LinearLayer,
    meta: PretrainMeta,
    stage: BaseStage,
}

/// Whether dropout is active on the adapter path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl FrozenBase {
    /// Reassembles a base from stored parts, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        projection: ProjectionLayer,
        extractor: Vec<ExtractorLayer>,
        head: LinearLayer,
        meta: PretrainMeta,
        stage: BaseStage,
    ) -> Result<Self> {
        config.validate()?;
        if projection.weight.shape() != (config.text_dim, config.visual_dim) {
            return Err(Error::ShapeMismatch {
                op: "FrozenBase::projection",
                left: projection.weight.shape(),
                right: (config.text_dim, config.visual_dim),
            });
        }
        let mut width = config.input_dim();
        for layer in &extractor {
            if layer.linear.in_dim() != width {
                return Err(Error::LengthMismatch {
                    op: "FrozenBase::extractor",
                    expected: width,
                    actual: layer.linear.in_dim(),
                });
            }
            width = layer.linear.out_dim();
        }
        if head.weight.shape() != (config.num_classes, config.hidden_dim) || width != config.hidden_dim {
            return Err(Error::ShapeMismatch {
                op: "FrozenBase::head",
                left: head.weight.shape(),
                right: (config.num_classes, config.hidden_dim),
            });
        }
        Ok(Self {
            config,
            projection,
            extractor,
            head,
            meta,
            stage,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn projection(&self) -> &ProjectionLayer {
        &self.projection
    }

    pub fn extractor(&self) -> &[ExtractorLayer] {
        &self.extractor
    }

    /// The adapter attachment point, `W0: C x H`.
    pub fn head(&self) -> &LinearLayer {
        &self.head
    }

    pub fn meta(&self) -> &PretrainMeta {
        &self.meta
    }

    pub fn stage(&self) -> BaseStage {
        self.stage
    }

    /// Marks the base as in use by federation.
    pub fn seal(mut self) -> Self {
        self.stage = BaseStage::Sealed;
        self
    }

    /// SHA-256 over every parameter, independent of stage and metadata.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.projection.weight.fingerprint());
        for layer in &self.extractor {
            h.update(layer.linear.weight.fingerprint());
            h.update([layer.activation.tag()]);
            if let Some(b) = &layer.linear.bias {
                for v in b {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.update(self.head.weight.fingerprint());
        if let Some(b) = &self.head.bias {
            for v in b {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Hidden representation fed to the head.
    pub fn features(&self, example: &Example) -> Result<Vec<f64>> {
        let mut x = project_concat(&example.visual, &example.text, &self.projection)?;
        for layer in &self.extractor {
            x = linear_forward(&layer.linear, &x)?;
            if layer.activation == Activation::Relu {
                relu_in_place(&mut x);
            }
        }
        Ok(x)
    }

    /// Logits of the unadapted network.
    pub fn forward(&self, example: &Example) -> Result<Vec<f64>> {
        linear_forward(&self.head, &self.features(example)?)
    }

    fn check_adapter(&self, adapter: &LoraAdapter) -> Result<()> {
        if self.head.weight.shape() != (adapter.m(), adapter.n()) {
            return Err(Error::ShapeMismatch {
                op: "forward_adapted",
                left: self.head.weight.shape(),
                right: (adapter.m(), adapter.n()),
            });
        }
        Ok(())
    }

    /// Adapted logits from precomputed features.
    pub fn adapted_logits(&self, adapter: &LoraAdapter, features: &[f64], mask: &DropoutMask) -> Result<Vec<f64>> {
        self.check_adapter(adapter)?;
        lora_forward(&self.head, adapter, features, mask)
    }
}

/// Gaussian-initialized base: one hidden ReLU layer between the
/// projected input and the head.
pub fn build_base(config: &ModelConfig) -> Result<FrozenBase> {
    config.validate()?;
    let mut rng = RngStream::new(config.seed, &[tag::BASE_INIT]);
    let he = |fan_in: usize| libm::sqrt(2.0 / fan_in as f64);
    let projection = ProjectionLayer {
        weight: gaussian_matrix(config.text_dim, config.visual_dim, 1.0 / libm::sqrt(config.visual_dim as f64), &mut rng)?,
    };
    let hidden = LinearLayer::new(
        gaussian_matrix(config.hidden_dim, config.input_dim(), he(config.input_dim()), &mut rng)?,
        Some(vec![0.0; config.hidden_dim]),
    )?;
    let head = LinearLayer::new(
        gaussian_matrix(config.num_classes, config.hidden_dim, 1.0 / libm::sqrt(config.hidden_dim as f64), &mut rng)?,
        Some(vec![0.0; config.num_classes]),
    )?;
    FrozenBase::from_parts(
        *config,
        projection,
        vec![ExtractorLayer {
            linear: hidden,
            activation: Activation::Relu,
        }],
        head,
        PretrainMeta::default(),
        BaseStage::Initialized,
    )
}

/// Flattened row concatenation `[V·Pᵀ ; T]`.
pub fn project_concat(visual: &Matrix, text: &Matrix, proj: &ProjectionLayer) -> Result<Vec<f64>> {
    if visual.cols() != proj.weight.cols() {
        return Err(Error::ShapeMismatch {
            op: "project_concat",
            left: visual.shape(),
            right: proj.weight.shape(),
        });
    }
    if text.cols() != proj.weight.rows() {
        return Err(Error::ShapeMismatch {
            op: "project_concat",
            left: text.shape(),
            right: proj.weight.shape(),
        });
    }
    let projected = visual.matmul(&proj.weight.transpose())?;
    let mut out = Vec::with_capacity(projected.as_slice().len() + text.as_slice().len());
    out.extend_from_slice(projected.as_slice());
    out.extend_from_slice(text.as_slice());
    Ok(out)
}

/// `logits = lora_forward(head, adapter, extractor(project_concat(input)))`.
/// Dropout is drawn from `rng` in train mode only.
pub fn forward_adapted(
    base: &FrozenBase,
    adapter: &LoraAdapter,
    example: &Example,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    base.check_adapter(adapter)?;
    let features = base.features(example)?;
    let mask = match mode {
        Mode::Train => make_dropout_mask(features.len(), adapter.dropout(), rng)?,
        Mode::Eval => DropoutMask::keep_all(features.len()),
    };
    lora_forward(&base.head, adapter, &features, &mask)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            batch_size: 16,
            holdout_fraction: 0.2,
        }
    }
}

/// Parameter-shaped gradient buffers for the whole network.
struct NetGrads {
    projection: Matrix,
    layers: Vec<(Matrix, Vec<f64>)>,
    head: (Matrix, Vec<f64>),
}

impl NetGrads {
    fn zeros(base: &FrozenBase) -> Self {
        Self {
            projection: Matrix::zeros(base.projection.weight.rows(), base.projection.weight.cols()),
            layers: base
                .extractor
                .iter()
                .map(|l| {
                    (
                        Matrix::zeros(l.linear.out_dim(), l.linear.in_dim()),
                        vec![0.0; l.linear.out_dim()],
                    )
                })
                .collect(),
            head: (
                Matrix::zeros(base.head.out_dim(), base.head.in_dim()),
                vec![0.0; base.head.out_dim()],
            ),
        }
    }
}

fn add_vec(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Loss and full-network gradient of one example, accumulated into `grads`.
fn accumulate_example(base: &FrozenBase, example: &Example, grads: &mut NetGrads) -> Result<f64> {
    let input = project_concat(&example.visual, &example.text, &base.projection)?;
    let mut activations = vec![input];
    let mut pre = Vec::with_capacity(base.extractor.len());
    for layer in &base.extractor {
        let z = linear_forward(&layer.linear, activations.last().unwrap())?;
        let mut a = z.clone();
        if layer.activation == Activation::Relu {
            relu_in_place(&mut a);
        }
        pre.push(z);
        activations.push(a);
    }
    let logits = linear_forward(&base.head, activations.last().unwrap())?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, example.label)?;

    let head = linear_backward(&base.head, activations.last().unwrap(), &dlogits)?;
    grads.head.0.axpy(1.0, &head.d_weight)?;
    add_vec(&mut grads.head.1, &dlogits);
    let mut upstream = head.d_input;
    for (li, layer) in base.extractor.iter().enumerate().rev() {
        if layer.activation == Activation::Relu {
            for (u, z) in upstream.iter_mut().zip(&pre[li]) {
                if *z <= 0.0 {
                    *u = 0.0;
                }
            }
        }
        let g = linear_backward(&layer.linear, &activations[li], &upstream)?;
        grads.layers[li].0.axpy(1.0, &g.d_weight)?;
        add_vec(&mut grads.layers[li].1, &upstream);
        upstream = g.d_input;
    }
    // the first N_v * D_t inputs are the projected visual tokens
    let dt = base.config.text_dim;
    for (t, du) in upstream.chunks_exact(dt).take(base.config.visual_tokens).enumerate() {
        grads.projection.axpy(1.0, &Matrix::outer(du, example.visual.row(t)))?;
    }
    Ok(loss)
}

fn apply_grads(base: &mut FrozenBase, grads: &NetGrads, step: f64) -> Result<()> {
    base.projection.weight.axpy(-step, &grads.projection)?;
    for (layer, (dw, db)) in base.extractor.iter_mut().zip(&grads.layers) {
        layer.linear.weight.axpy(-step, dw)?;
        if let Some(b) = layer.linear.bias.as_mut() {
            for (bi, g) in b.iter_mut().zip(db) {
                *bi -= step * g;
            }
        }
    }
    base.head.weight.axpy(-step, &grads.head.0)?;
    if let Some(b) = base.head.bias.as_mut() {
        for (bi, g) in b.iter_mut().zip(&grads.head.1) {
            *bi -= step * g;
        }
    }
    Ok(())
}

/// Accuracy of the unadapted network on `indices`.
pub fn base_accuracy(base: &FrozenBase, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    for &i in indices {
        let ex = &dataset.examples[i];
        correct += usize::from(argmax(&base.forward(ex)?) == ex.label);
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Central full-network SGD on a pooled dataset, before any federation.
///
/// A `holdout_fraction` share of the pool is kept aside and the achieved
/// accuracy on it is recorded in [`PretrainMeta`]; pretraining that does not
/// beat chance is reported as an error.
pub fn pretrain_base(base: &FrozenBase, pool: &Dataset, cfg: &PretrainConfig, rng: &RngStream) -> Result<FrozenBase> {
    if base.stage == BaseStage::Sealed {
        return Err(Error::BaseSealed);
    }
    if pool.is_empty() {
        return Err(Error::Empty("pretraining pool"));
    }
    if cfg.epochs == 0 {
        return Ok(base.clone());
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("pretrain", "batch_size and lr must be positive"));
    }
    let all: Vec<usize> = (0..pool.len()).collect();
    let (train, holdout) = split_train_eval(&all, cfg.holdout_fraction, &mut rng.derive(&[0]))?;
    let mut net = base.clone();
    let mut order = train.clone();
    for epoch in 0..cfg.epochs {
        rng.derive(&[1, u64::from(epoch)]).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = NetGrads::zeros(&net);
            for &i in batch {
                let loss = accumulate_example(&net, &pool.examples[i], &mut grads)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite("pretraining loss"));
                }
            }
            apply_grads(&mut net, &grads, cfg.lr / batch.len() as f64)?;
        }
    }
    let accuracy = base_accuracy(&net, pool, &holdout)?;
    if accuracy <= 1.0 / net.config.num_classes as f64 {
        return Err(Error::invalid(
            "pretrain",
            alloc::format!("held-out accuracy {accuracy} does not exceed chance"),
        ));
    }
    net.meta = PretrainMeta {
        epochs: cfg.epochs,
        pooled_size: pool.len() as u64,
        accuracy,
    };
    net.stage = BaseStage::Pretrained;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, AdapterSpec, StrategyKind};
    use crate::data::{carve_pretraining_pool, gen_mixture, MixtureConfig};

    fn example(cfg: &ModelConfig, rng: &mut RngStream) -> Example {
        Example {
            visual: gaussian_matrix(cfg.visual_tokens, cfg.visual_dim, 1.0, rng).unwrap(),
            text: gaussian_matrix(cfg.text_tokens, cfg.text_dim, 1.0, rng).unwrap(),
            label: 0,
            domain: 0,
        }
    }

    fn adapter_for(base: &FrozenBase, seed: u64) -> LoraAdapter {
        let spec = AdapterSpec {
            m: base.config.num_classes,
            n: base.config.hidden_dim,
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
            strategy: StrategyKind::PLora,
        };
        init_adapter(&spec, &mut RngStream::new(seed, &[9])).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_shaped() {
        let cfg = ModelConfig {
            seed: 4,
            ..ModelConfig::default()
        };
        let a = build_base(&cfg).unwrap();
        assert_eq!(a, build_base(&cfg).unwrap());
        assert_eq!(a.head().weight.shape(), (8, 64));
        let logits = a.forward(&example(&cfg, &mut RngStream::new(1, &[]))).unwrap();
        assert_eq!(logits.len(), 8);
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!(build_base(&ModelConfig {
            num_classes: 1,
            ..cfg
        })
        .is_err());
    }

    #[test]
    fn projection_cases() {
        let mut rng = RngStream::new(2, &[]);
        let v = gaussian_matrix(2, 3, 1.0, &mut rng).unwrap();
        let t = gaussian_matrix(3, 3, 1.0, &mut rng).unwrap();
        let id = ProjectionLayer {
            weight: Matrix::identity(3),
        };
        let flat = project_concat(&v, &t, &id).unwrap();
        assert_eq!(&flat[..6], v.as_slice());
        assert_eq!(&flat[6..], t.as_slice());

        let p = ProjectionLayer {
            weight: gaussian_matrix(4, 3, 1.0, &mut rng).unwrap(),
        };
        let t4 = gaussian_matrix(1, 4, 1.0, &mut rng).unwrap();
        let zero = project_concat(&Matrix::zeros(2, 3), &t4, &p).unwrap();
        assert!(zero[..8].iter().all(|&x| x == 0.0));

        let got = project_concat(&v, &t4, &p).unwrap();
        for tok in 0..2 {
            for d in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += v.get(tok, k) * p.weight.get(d, k);
                }
                assert_eq!(got[tok * 4 + d], s);
            }
        }
        assert!(project_concat(&t4, &t4, &p).is_err());
    }

    #[test]
    fn zero_b_adapter_matches_frozen_forward() {
        let base = build_base(&ModelConfig::default()).unwrap();
        let adapter = adapter_for(&base, 1);
        let mut rng = RngStream::new(3, &[]);
        for _ in 0..10 {
            let ex = example(base.config(), &mut rng);
            let frozen = base.forward(&ex).unwrap();
            let adapted = forward_adapted(&base, &adapter, &ex, Mode::Train, &mut rng).unwrap();
            assert!(frozen.iter().zip(&adapted).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn modes_are_reproducible() {
        let base = build_base(&ModelConfig::default()).unwrap();
        let mut adapter = adapter_for(&base, 2);
        adapter.factors_mut().1.as_mut_slice().iter_mut().for_each(|v| *v = 0.1);
        let ex = example(base.config(), &mut RngStream::new(4, &[]));
        let e1 = forward_adapted(&base, &adapter, &ex, Mode::Eval, &mut RngStream::new(1, &[])).unwrap();
        let e2 = forward_adapted(&base, &adapter, &ex, Mode::Eval, &mut RngStream::new(2, &[])).unwrap();
        assert_eq!(e1, e2);
        let t1 = forward_adapted(&base, &adapter, &ex, Mode::Train, &mut RngStream::new(5, &[1])).unwrap();
        let t2 = forward_adapted(&base, &adapter, &ex, Mode::Train, &mut RngStream::new(5, &[1])).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn adapter_shape_mismatch_is_rejected() {
        let base = build_base(&ModelConfig::default()).unwrap();
        let spec = AdapterSpec {
            m: 8,
            n: 32,
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
            strategy: StrategyKind::PLora,
        };
        let wrong = init_adapter(&spec, &mut RngStream::new(0, &[])).unwrap();
        let ex = example(base.config(), &mut RngStream::new(4, &[]));
        assert!(forward_adapted(&base, &wrong, &ex, Mode::Eval, &mut RngStream::new(0, &[])).is_err());
    }

    #[test]
    fn adapter_locality() {
        let base = build_base(&ModelConfig::default()).unwrap();
        let mut rng = RngStream::new(6, &[]);
        for _ in 0..10 {
            let mut a1 = adapter_for(&base, rng.next_u64());
            let mut a2 = adapter_for(&base, rng.next_u64());
            *a1.factors_mut().1 = gaussian_matrix(8, 4, 0.5, &mut rng).unwrap();
            *a2.factors_mut().1 = gaussian_matrix(8, 4, 0.5, &mut rng).unwrap();
            let ex = example(base.config(), &mut rng);
            let h = base.features(&ex).unwrap();
            let keep = DropoutMask::keep_all(h.len());
            let y1 = base.adapted_logits(&a1, &h, &keep).unwrap();
            let y2 = base.adapted_logits(&a2, &h, &keep).unwrap();
            let d = a1.delta().sub(&a2.delta()).unwrap().scale(a1.scale());
            let expect = d.matvec(&h).unwrap();
            for i in 0..8 {
                assert!(((y1[i] - y2[i]) - expect[i]).abs() < 1e-9);
            }
        }
    }

    /// Full-network gradient, checked against central differences.
    #[test]
    fn pretraining_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            hidden_dim: 6,
            num_classes: 3,
            seed: 8,
            ..ModelConfig::default()
        };
        let base = build_base(&cfg).unwrap();
        let mut ex = example(&cfg, &mut RngStream::new(9, &[]));
        ex.label = 2;
        let mut grads = NetGrads::zeros(&base);
        accumulate_example(&base, &ex, &mut grads).unwrap();
        let loss = |b: &FrozenBase| softmax_cross_entropy(&b.forward(&ex).unwrap(), 2).unwrap().0;
        let eps = 1e-6;
        let check = |analytic: f64, bump: &dyn Fn(f64) -> FrozenBase| {
            let fd = (loss(&bump(eps)) - loss(&bump(-eps))) / (2.0 * eps);
            assert!((fd - analytic).abs() <= 1e-5 * fd.abs().max(analytic.abs()).max(1e-3), "{analytic} vs {fd}");
        };
        for idx in 0..grads.projection.as_slice().len() {
            check(grads.projection.as_slice()[idx], &|d| {
                let mut b = base.clone();
                b.projection.weight.as_mut_slice()[idx] += d;
                b
            });
        }
        for idx in 0..grads.layers[0].0.as_slice().len() {
            check(grads.layers[0].0.as_slice()[idx], &|d| {
                let mut b = base.clone();
                b.extractor[0].linear.weight.as_mut_slice()[idx] += d;
                b
            });
        }
        for idx in 0..grads.head.0.as_slice().len() {
            check(grads.head.0.as_slice()[idx], &|d| {
                let mut b = base.clone();
                b.head.weight.as_mut_slice()[idx] += d;
                b
            });
        }
    }

    #[test]
    fn pretraining_beats_chance_and_respects_stage() {
        let data = gen_mixture(&MixtureConfig::default(), 1).unwrap();
        let (pool, _) = carve_pretraining_pool(&data, 0.2, &RngStream::new(1, &[])).unwrap();
        let pool = data.subset(&pool).unwrap();
        let base = build_base(&ModelConfig::default()).unwrap();
        let rng = RngStream::new(1, &[tag::PRETRAIN]);

        let same = pretrain_base(
            &base,
            &pool,
            &PretrainConfig {
                epochs: 0,
                ..PretrainConfig::default()
            },
            &rng,
        )
        .unwrap();
        assert_eq!(same, base);

        let trained = pretrain_base(&base, &pool, &PretrainConfig::default(), &rng).unwrap();
        assert!(trained.meta().accuracy > 0.5, "{:?}", trained.meta());
        assert_eq!(trained.stage(), BaseStage::Pretrained);

        let sealed = trained.seal();
        assert_eq!(
            pretrain_base(&sealed, &pool, &PretrainConfig::default(), &rng).unwrap_err(),
            Error::BaseSealed
        );
        let empty = pool.subset(&[]).unwrap();
        assert!(pretrain_base(&base, &empty, &PretrainConfig::default(), &rng).is_err());
    }

    #[test]
    fn zero_adapter_evaluation_equals_base_after_pretraining() {
        let data = gen_mixture(
            &MixtureConfig {
                per_class: vec![50; 8],
                ..MixtureConfig::default()
            },
            2,
        )
        .unwrap();
        let base = pretrain_base(
            &build_base(&ModelConfig::default()).unwrap(),
            &data,
            &PretrainConfig {
                epochs: 3,
                ..PretrainConfig::default()
            },
            &RngStream::new(2, &[]),
        )
        .unwrap();
        let adapter = adapter_for(&base, 3);
        for ex in data.examples.iter().take(20) {
            let a = forward_adapted(&base, &adapter, ex, Mode::Eval, &mut RngStream::new(0, &[])).unwrap();
            assert_eq!(a, base.forward(ex).unwrap());
        }
    }
}
