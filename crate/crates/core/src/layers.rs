//! Forward and backward rules with hand-written gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(Error::LengthMismatch {
                    op: "LinearLayer::new",
                    expected: weight.rows(),
                    actual: b.len(),
                });
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// `y = W x (+ b)`.
pub fn linear_forward(layer: &LinearLayer, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = layer.weight.matvec(x)?;
    if let Some(b) = &layer.bias {
        for (yi, bi) in y.iter_mut().zip(b) {
            *yi += bi;
        }
    }
    Ok(y)
}

/// Gradients of a dense layer for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub d_weight: Matrix,
    pub d_bias: Option<Vec<f64>>,
    pub d_input: Vec<f64>,
}

pub fn linear_backward(layer: &LinearLayer, x: &[f64], upstream: &[f64]) -> Result<LinearGrads> {
    if x.len() != layer.in_dim() {
        return Err(Error::LengthMismatch {
            op: "linear_backward",
            expected: layer.in_dim(),
            actual: x.len(),
        });
    }
    let d_input = layer.weight.matvec_transposed(upstream)?;
    Ok(LinearGrads {
        d_weight: Matrix::outer(upstream, x),
        d_bias: layer.bias.as_ref().map(|_| upstream.to_vec()),
        d_input,
    })
}

/// Inverted-dropout mask over the adapter-path input.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    rate: f64,
    scale: f64,
}

impl DropoutMask {
    /// The evaluation-mode mask.
    pub fn keep_all(dim: usize) -> Self {
        Self {
            keep: vec![true; dim],
            rate: 0.0,
            scale: 1.0,
        }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    /// `mask ⊙ x · scale`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.keep.len() {
            return Err(Error::LengthMismatch {
                op: "DropoutMask::apply",
                expected: self.keep.len(),
                actual: x.len(),
            });
        }
        Ok(x.iter()
            .zip(&self.keep)
            .map(|(&v, &k)| if k { v * self.scale } else { 0.0 })
            .collect())
    }
}

pub fn make_dropout_mask(dim: usize, rate: f64, rng: &mut RngStream) -> Result<DropoutMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", "rate must lie in [0, 1)"));
    }
    if rate == 0.0 {
        return Ok(DropoutMask::keep_all(dim));
    }
    let keep = (0..dim).map(|_| !rng.bernoulli(rate)).collect();
    Ok(DropoutMask {
        keep,
        rate,
        scale: 1.0 / (1.0 - rate),
    })
}

fn check_adapter(w0: &LinearLayer, adapter: &LoraAdapter, x: &[f64], mask: &DropoutMask) -> Result<()> {
    if w0.weight.shape() != (adapter.m(), adapter.n()) {
        return Err(Error::ShapeMismatch {
            op: "lora",
            left: w0.weight.shape(),
            right: (adapter.m(), adapter.n()),
        });
    }
    if adapter.rank() >= adapter.m().min(adapter.n()) {
        return Err(Error::NotLowRank {
            rank: adapter.rank(),
            m: adapter.m(),
            n: adapter.n(),
        });
    }
    if x.len() != adapter.n() || mask.len() != adapter.n() {
        return Err(Error::LengthMismatch {
            op: "lora",
            expected: adapter.n(),
            actual: if x.len() != adapter.n() { x.len() } else { mask.len() },
        });
    }
    Ok(())
}

/// `h = W0 x (+ b) + s · B A (mask ⊙ x)`.
pub fn lora_forward(w0: &LinearLayer, adapter: &LoraAdapter, x: &[f64], mask: &DropoutMask) -> Result<Vec<f64>> {
    check_adapter(w0, adapter, x, mask)?;
    let mut h = linear_forward(w0, x)?;
    let x_tilde = mask.apply(x)?;
    let ax = adapter.a().matvec(&x_tilde)?;
    let bax = adapter.b().matvec(&ax)?;
    let s = adapter.scale();
    for (hi, v) in h.iter_mut().zip(bax) {
        *hi += s * v;
    }
    Ok(h)
}

/// Gradients of the adapter factors.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub d_a: Matrix,
    pub d_b: Matrix,
}

impl GradPair {
    pub fn zeros_like(adapter: &LoraAdapter) -> Self {
        Self {
            d_a: Matrix::zeros(adapter.rank(), adapter.n()),
            d_b: Matrix::zeros(adapter.m(), adapter.rank()),
        }
    }

    /// `self += weight · other`.
    pub fn accumulate(&mut self, weight: f64, other: &GradPair) -> Result<()> {
        self.d_a.axpy(weight, &other.d_a)?;
        self.d_b.axpy(weight, &other.d_b)
    }
}

/// With `x̃ = mask ⊙ x`: `dB = s·g·(A x̃)ᵀ`, `dA = s·Bᵀ g x̃ᵀ`. `W0` gets nothing.
pub fn lora_backward(
    w0: &LinearLayer,
    adapter: &LoraAdapter,
    x: &[f64],
    mask: &DropoutMask,
    upstream: &[f64],
) -> Result<GradPair> {
    check_adapter(w0, adapter, x, mask)?;
    if upstream.len() != adapter.m() {
        return Err(Error::LengthMismatch {
            op: "lora_backward",
            expected: adapter.m(),
            actual: upstream.len(),
        });
    }
    let s = adapter.scale();
    let x_tilde = mask.apply(x)?;
    let ax = adapter.a().matvec(&x_tilde)?;
    let g: Vec<f64> = upstream.iter().map(|u| s * u).collect();
    let bt_g = adapter.b().matvec_transposed(&g)?;
    Ok(GradPair {
        d_a: Matrix::outer(&bt_g, &x_tilde),
        d_b: Matrix::outer(&g, &ax),
    })
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| libm::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]` and its gradient `softmax − onehot`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() < 2 {
        return Err(Error::invalid("logits", "need at least two classes"));
    }
    if target >= logits.len() {
        return Err(Error::OutOfRange {
            what: "target class",
            index: target,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| libm::exp(z - max)).sum();
    let log_z = max + libm::log(sum);
    let loss = log_z - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|&z| libm::exp(z - log_z)).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Teacher-forced token loss: per-step cross entropies summed.
pub fn sequence_cross_entropy<L: AsRef<[f64]>>(step_logits: &[L], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if step_logits.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    if step_logits.len() != targets.len() {
        return Err(Error::LengthMismatch {
            op: "sequence_cross_entropy",
            expected: step_logits.len(),
            actual: targets.len(),
        });
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for (logits, &t) in step_logits.iter().zip(targets) {
        let (l, g) = softmax_cross_entropy(logits.as_ref(), t)?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub(crate) fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, AdapterSpec, StrategyKind};
    use crate::linalg::gaussian_matrix;

    fn dense_oracle(w: &Matrix, x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|i| {
                let mut s = 0.0;
                for (j, xj) in x.iter().enumerate() {
                    s += w.get(i, j) * xj;
                }
                s
            })
            .collect()
    }

    fn worked_example() -> (LinearLayer, LoraAdapter, Vec<f64>) {
        let w0 = LinearLayer::new(Matrix::identity(2), None).unwrap();
        // r = 1 needs min(m, n) > 1, satisfied for 2x2.
        let a = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [0.0]]).unwrap();
        let adapter = LoraAdapter::from_parts(a, b, 2.0, 0.0, StrategyKind::PLora).unwrap();
        (w0, adapter, vec![1.0, 2.0])
    }

    #[test]
    fn linear_cases() {
        let id = LinearLayer::new(Matrix::identity(2), Some(vec![0.0, 0.0])).unwrap();
        assert_eq!(linear_forward(&id, &[5.0, 7.0]).unwrap(), vec![5.0, 7.0]);
        let zero = LinearLayer::new(Matrix::zeros(3, 2), None).unwrap();
        assert_eq!(linear_forward(&zero, &[5.0, 7.0]).unwrap(), vec![0.0; 3]);
        assert!(linear_forward(&zero, &[1.0]).is_err());

        let mut rng = RngStream::new(1, &[]);
        let w = gaussian_matrix(4, 3, 1.0, &mut rng).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let layer = LinearLayer::new(w.clone(), None).unwrap();
        assert_eq!(linear_forward(&layer, &x).unwrap(), dense_oracle(&w, &x));
    }

    #[test]
    fn lora_worked_example() {
        let (w0, adapter, x) = worked_example();
        let mask = DropoutMask::keep_all(2);
        assert_eq!(lora_forward(&w0, &adapter, &x, &mask).unwrap(), vec![7.0, 2.0]);
        let g = lora_backward(&w0, &adapter, &x, &mask, &[1.0, 1.0]).unwrap();
        assert_eq!(g.d_b.as_slice(), &[6.0, 6.0]);
        assert_eq!(g.d_a.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn fresh_adapter_is_transparent() {
        let mut rng = RngStream::new(4, &[]);
        let w0 = LinearLayer::new(gaussian_matrix(6, 10, 1.0, &mut rng).unwrap(), Some(vec![0.5; 6])).unwrap();
        let spec = AdapterSpec {
            m: 6,
            n: 10,
            rank: 3,
            alpha: 8.0,
            dropout: 0.1,
            strategy: StrategyKind::PLora,
        };
        let adapter = init_adapter(&spec, &mut rng).unwrap();
        let x: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let mask = make_dropout_mask(10, 0.5, &mut rng).unwrap();
        let h = lora_forward(&w0, &adapter, &x, &mask).unwrap();
        let base = linear_forward(&w0, &x).unwrap();
        assert!(h.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
        let g = lora_backward(&w0, &adapter, &x, &mask, &[1.0; 6]).unwrap();
        assert_eq!(g.d_a.max_abs(), 0.0);
    }

    #[test]
    fn unit_scale_when_alpha_equals_rank() {
        let (w0, adapter, x) = worked_example();
        let adapter = adapter.with_alpha(1.0).unwrap();
        let h = lora_forward(&w0, &adapter, &x, &DropoutMask::keep_all(2)).unwrap();
        assert_eq!(h, vec![4.0, 2.0]);
    }

    #[test]
    fn rejects_full_rank_and_bad_shapes() {
        let w0 = LinearLayer::new(Matrix::identity(2), None).unwrap();
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            LoraAdapter::from_parts(a, Matrix::zeros(2, 2), 1.0, 0.0, StrategyKind::PLora),
            Err(Error::NotLowRank { .. })
        ));
        let (_, adapter, _) = worked_example();
        let mask = DropoutMask::keep_all(3);
        assert!(lora_forward(&w0, &adapter, &[1.0, 2.0, 3.0], &mask).is_err());
        assert!(lora_backward(&w0, &adapter, &[1.0, 2.0], &DropoutMask::keep_all(2), &[1.0]).is_err());
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        for case in 0..10u64 {
            let mut rng = RngStream::new(100 + case, &[]);
            let (m, n, r) = (5, 7, 2);
            let w0 = LinearLayer::new(gaussian_matrix(m, n, 1.0, &mut rng).unwrap(), None).unwrap();
            let a = gaussian_matrix(r, n, 0.5, &mut rng).unwrap();
            let b = gaussian_matrix(m, r, 0.5, &mut rng).unwrap();
            let adapter = LoraAdapter::from_parts(a, b, 4.0, 0.2, StrategyKind::PLora).unwrap();
            let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let mask = make_dropout_mask(n, 0.2, &mut rng).unwrap();
            // scalar loss = Σ h, so upstream = 1
            let g = lora_backward(&w0, &adapter, &x, &mask, &vec![1.0; m]).unwrap();
            let loss = |ad: &LoraAdapter| lora_forward(&w0, ad, &x, &mask).unwrap().iter().sum::<f64>();
            let eps = 1e-5;
            for which in 0..2 {
                let analytic = if which == 0 { &g.d_a } else { &g.d_b };
                for idx in 0..analytic.as_slice().len() {
                    let bump = |delta: f64| {
                        let mut ad = adapter.clone();
                        let (fa, fb) = ad.factors_mut();
                        let target = if which == 0 { fa } else { fb };
                        target.as_mut_slice()[idx] += delta;
                        loss(&ad)
                    };
                    let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    let an = analytic.as_slice()[idx];
                    let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-8);
                    assert!(rel < 1e-6 || (fd - an).abs() < 1e-9, "case {case} idx {idx}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = softmax_cross_entropy(&[0.3; 4], 2).unwrap();
        assert!((l - libm::log(4.0)).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);

        let (l, _) = softmax_cross_entropy(&[0.0, 50.0, 0.0], 1).unwrap();
        assert!(l < 1e-9);

        assert!(matches!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(Error::OutOfRange { .. })
        ));
        assert!(softmax_cross_entropy(&[0.0], 0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(21, &[]);
        for _ in 0..20 {
            let z: Vec<f64> = (0..6).map(|_| 3.0 * rng.normal()).collect();
            let t = rng.below(6);
            let (_, g) = softmax_cross_entropy(&z, t).unwrap();
            let eps = 1e-5;
            for i in 0..6 {
                let mut zp = z.clone();
                zp[i] += eps;
                let mut zm = z.clone();
                zm[i] -= eps;
                let fd = (softmax_cross_entropy(&zp, t).unwrap().0 - softmax_cross_entropy(&zm, t).unwrap().0)
                    / (2.0 * eps);
                assert!((fd - g[i]).abs() < 1e-7, "{} vs {}", g[i], fd);
            }
        }
    }

    #[test]
    fn sequence_loss_is_additive() {
        let (l1, g1) = sequence_cross_entropy(&[[1.0, -2.0, 0.5]], &[2]).unwrap();
        let (l, g) = softmax_cross_entropy(&[1.0, -2.0, 0.5], 2).unwrap();
        assert_eq!((l1, &g1[0]), (l, &g));

        let (l2, _) = sequence_cross_entropy(&[[0.0; 4], [0.0; 4]], &[0, 3]).unwrap();
        assert!((l2 - 2.0 * libm::log(4.0)).abs() < 1e-12);

        let mut rng = RngStream::new(5, &[]);
        let steps: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
        let targets = [4, 0, 2];
        let (total, grads) = sequence_cross_entropy(&steps, &targets).unwrap();
        let mut oracle = 0.0;
        for (s, &t) in steps.iter().zip(&targets) {
            oracle += softmax_cross_entropy(s, t).unwrap().0;
        }
        assert_eq!(total, oracle);
        assert_eq!(grads.len(), 3);

        let empty: [[f64; 2]; 0] = [];
        assert_eq!(sequence_cross_entropy(&empty, &[]).unwrap_err(), Error::Empty("sequence"));
    }

    #[test]
    fn dropout_masks() {
        let m = make_dropout_mask(8, 0.0, &mut RngStream::new(1, &[])).unwrap();
        assert_eq!(m, DropoutMask::keep_all(8));
        assert_eq!(m.scale(), 1.0);

        let a = make_dropout_mask(100, 0.3, &mut RngStream::new(2, &[9])).unwrap();
        let b = make_dropout_mask(100, 0.3, &mut RngStream::new(2, &[9])).unwrap();
        assert_eq!(a, b);
        assert!(make_dropout_mask(4, 1.0, &mut RngStream::new(0, &[])).is_err());

        let big = make_dropout_mask(100_000, 0.1, &mut RngStream::new(3, &[])).unwrap();
        let kept = big.keep().iter().filter(|&&k| k).count() as f64 / 100_000.0;
        assert!((kept - 0.9).abs() < 0.005, "{kept}");
    }

    #[test]
    fn inverted_dropout_is_unbiased() {
        let x: Vec<f64> = (1..=6).map(|v| v as f64).collect();
        let mut rng = RngStream::new(77, &[]);
        let mut acc = [0.0; 6];
        let trials = 10_000;
        for _ in 0..trials {
            let m = make_dropout_mask(6, 0.1, &mut rng).unwrap();
            for (a, v) in acc.iter_mut().zip(m.apply(&x).unwrap()) {
                *a += v;
            }
        }
        for (a, v) in acc.iter().zip(&x) {
            let mean = a / trials as f64;
            assert!((mean - v).abs() / v < 0.02, "{mean} vs {v}");
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
