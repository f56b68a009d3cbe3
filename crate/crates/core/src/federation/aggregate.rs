//! Server-side averaging of uplinked matrices.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::adapters::{SharedMatrices, UplinkPayload};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AggregatorKind {
    /// Unweighted mean over clients.
    #[default]
    Mean,
    /// Mean weighted by each payload's sample count.
    Weighted,
}

impl AggregatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorKind::Mean => "mean",
            AggregatorKind::Weighted => "weighted",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregatorKind {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        match s {
            "mean" => Ok(AggregatorKind::Mean),
            "weighted" => Ok(AggregatorKind::Weighted),
            _ => Err(()),
        }
    }
}

/// Error-free sum: `a + b == s + e` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Error-free product: `a · b == p + e` exactly (barring underflow).
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, libm::fma(a, b, -p))
}

/// Exact sum of doubles as a nonoverlapping expansion, smallest component
/// first, zeros dropped.
#[derive(Default)]
struct Expansion(Vec<f64>);

impl Expansion {
    fn add(&mut self, x: f64) {
        let mut q = x;
        let mut out = Vec::with_capacity(self.0.len() + 1);
        for &h in &self.0 {
            let (s, e) = two_sum(q, h);
            if e != 0.0 {
                out.push(e);
            }
            q = s;
        }
        if q != 0.0 {
            out.push(q);
        }
        self.0 = out;
    }

    fn add_product(&mut self, a: f64, b: f64) {
        let (p, e) = two_prod(a, b);
        self.add(e);
        self.add(p);
    }

    /// The largest component carries the sign.
    fn signum(&self) -> i8 {
        match self.0.last() {
            None => 0,
            Some(x) if *x > 0.0 => 1,
            Some(_) => -1,
        }
    }

    fn approx(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `Σ w_k·x_k / Σ w_k` rounded once, to nearest with ties to even.
///
/// The weights must be integers below 2^53 so that `W = Σw` and every
/// product are exact; the numerator is then held exactly and the quotient
/// nudged until it is the double nearest the true ratio. A consequence is
/// that the result does not depend on payload order, identical payloads
/// are a fixed point, and equal weights give exactly the unweighted mean.
fn exact_mean(xs: impl Iterator<Item = (f64, f64)>) -> Result<f64> {
    let mut num = Expansion::default();
    let mut total = 0.0;
    for (x, w) in xs {
        num.add_product(x, w);
        total += w;
    }
    let mut q = num.approx() / total;
    if !q.is_finite() {
        return Err(Error::NonFinite("aggregate"));
    }
    // residual sign decides the direction; comparing 2E against (q + q')W
    // decides whether the neighbour is nearer
    for _ in 0..64 {
        let mut r = Expansion(num.0.clone());
        r.add_product(-q, total);
        let dir = r.signum();
        if dir == 0 {
            break;
        }
        let next = if dir > 0 { q.next_up() } else { q.next_down() };
        let mut d = Expansion::default();
        for &c in &num.0 {
            d.add(2.0 * c);
        }
        d.add_product(-q, total);
        d.add_product(-next, total);
        let side = d.signum() * dir;
        if side > 0 || (side == 0 && next.to_bits() & 1 == 0) {
            q = next;
        } else {
            break;
        }
    }
    Ok(q)
}

fn weighted_mean<'a>(items: impl Iterator<Item = (&'a Matrix, f64)> + Clone) -> Result<Matrix> {
    let mut it = items.clone();
    let (first, _) = it.next().ok_or(Error::Empty("payloads"))?;
    for (x, _) in it {
        first.check_same_shape(x, "aggregate")?;
    }
    let mut out = first.clone();
    for (j, v) in out.as_mut_slice().iter_mut().enumerate() {
        *v = exact_mean(items.clone().map(|(x, w)| (x.as_slice()[j], w)))?;
    }
    Ok(out)
}

fn check_layout(payloads: &[UplinkPayload]) -> Result<()> {
    let first = payloads.first().ok_or(Error::Empty("payloads"))?;
    for p in &payloads[1..] {
        if p.strategy != first.strategy || !p.shared.same_layout(&first.shared) {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                left: first.shared.b().shape(),
                right: p.shared.b().shape(),
            });
        }
    }
    Ok(())
}

fn combine(payloads: &[UplinkPayload], weights: &[f64]) -> Result<SharedMatrices> {
    check_layout(payloads)?;
    let b = weighted_mean(payloads.iter().map(|p| p.shared.b()).zip(weights.iter().copied()))?;
    match payloads[0].shared {
        SharedMatrices::BOnly { .. } => Ok(SharedMatrices::BOnly { b }),
        SharedMatrices::Full { .. } => {
            let a = weighted_mean(
                payloads
                    .iter()
                    .map(|p| p.shared.a().expect("layout checked"))
                    .zip(weights.iter().copied()),
            )?;
            Ok(SharedMatrices::Full { a, b })
        }
    }
}

/// Elementwise arithmetic mean of every shared matrix.
pub fn aggregate_mean(payloads: &[UplinkPayload]) -> Result<SharedMatrices> {
    let ones: Vec<f64> = payloads.iter().map(|_| 1.0).collect();
    combine(payloads, &ones)
}

/// `Σ (n_k / Σn) · M_k` with `n_k` the payload sample counts.
pub fn aggregate_weighted(payloads: &[UplinkPayload]) -> Result<SharedMatrices> {
    if payloads.iter().any(|p| p.sample_count == 0) {
        return Err(Error::invalid("sample_count", "weighted aggregation needs positive counts"));
    }
    let weights: Vec<f64> = payloads.iter().map(|p| p.sample_count as f64).collect();
    combine(payloads, &weights)
}

pub fn aggregate(kind: AggregatorKind, payloads: &[UplinkPayload]) -> Result<SharedMatrices> {
    match kind {
        AggregatorKind::Mean => aggregate_mean(payloads),
        AggregatorKind::Weighted => aggregate_weighted(payloads),
    }
}
