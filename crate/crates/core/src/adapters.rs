//! LoRA adapter lifecycle.
//!
//! An adapter attached to a frozen `m x n` weight `W0` carries `A: r x n`
//! and `B: m x r`; the adapted map is `W0 x + s B A x` with `s = alpha / r`.
//! Which of the two factors leaves the client depends on [`StrategyKind`]:
//!
//! | strategy    | trained | shared (uplink/downlink) |
//! |-------------|---------|--------------------------|
//! | `PLora`     | A, B    | B                        |
//! | `FullLora`  | A, B    | A, B                     |
//! | `FfaLora`   | B       | B                        |

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    /// Personal `A`, aggregated `B`.
    PLora,
    /// Both factors aggregated.
    FullLora,
    /// `A` frozen at initialization, `B` aggregated.
    FfaLora,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::PLora, StrategyKind::FullLora, StrategyKind::FfaLora];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::PLora => "plora",
            StrategyKind::FullLora => "full_lora",
            StrategyKind::FfaLora => "ffa_lora",
        }
    }

    /// Wire tag used by payloads and checkpoints.
    pub fn tag(self) -> u8 {
        match self {
            StrategyKind::PLora => 1,
            StrategyKind::FullLora => 2,
            StrategyKind::FfaLora => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(StrategyKind::PLora),
            2 => Some(StrategyKind::FullLora),
            3 => Some(StrategyKind::FfaLora),
            _ => None,
        }
    }

    pub fn shares_a(self) -> bool {
        matches!(self, StrategyKind::FullLora)
    }

    pub fn trains_a(self) -> bool {
        !matches!(self, StrategyKind::FfaLora)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = ();

    fn from_str(s: &str) -> core::result::Result<Self, ()> {
        match s {
            "plora" => Ok(StrategyKind::PLora),
            "full_lora" => Ok(StrategyKind::FullLora),
            "ffa_lora" => Ok(StrategyKind::FfaLora),
            _ => Err(()),
        }
    }
}

/// Shape and hyperparameters of an adapter, before any weights exist.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterSpec {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub strategy: StrategyKind,
}

impl AdapterSpec {
    pub fn validate(&self) -> Result<()> {
        check_low_rank(self.rank, self.m, self.n)?;
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(Error::invalid("alpha", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn check_low_rank(rank: usize, m: usize, n: usize) -> Result<()> {
    if rank == 0 || rank >= m.min(n) {
        return Err(Error::NotLowRank { rank, m, n });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
    dropout: f64,
    strategy: StrategyKind,
}

impl LoraAdapter {
    /// Assembles an adapter from explicit factors.
    pub fn from_parts(a: Matrix, b: Matrix, alpha: f64, dropout: f64, strategy: StrategyKind) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::ShapeMismatch {
                op: "LoraAdapter::from_parts",
                left: b.shape(),
                right: a.shape(),
            });
        }
        let spec = AdapterSpec {
            m: b.rows(),
            n: a.cols(),
            rank: a.rows(),
            alpha,
            dropout,
            strategy,
        };
        spec.validate()?;
        Ok(Self {
            a,
            b,
            alpha,
            dropout,
            strategy,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Output dimension of the adapted layer.
    pub fn m(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension of the adapted layer.
    pub fn n(&self) -> usize {
        self.a.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn strategy(&self) -> StrategyKind {
        self.strategy
    }

    /// Effective scale `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn spec(&self) -> AdapterSpec {
        AdapterSpec {
            m: self.m(),
            n: self.n(),
            rank: self.rank(),
            alpha: self.alpha,
            dropout: self.dropout,
            strategy: self.strategy,
        }
    }

    /// Copy of this adapter with a different `alpha`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::from_parts(self.a.clone(), self.b.clone(), alpha, self.dropout, self.strategy)
    }

    pub(crate) fn factors_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a, &mut self.b)
    }

    /// `B · A`, the unscaled update.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors conform by construction")
    }
}

/// Fresh adapter: `B = 0`, `A ~ Normal(0, 1/n)`.
pub fn init_adapter(spec: &AdapterSpec, rng: &mut RngStream) -> Result<LoraAdapter> {
    spec.validate()?;
    let std = 1.0 / libm::sqrt(spec.n as f64);
    let a = gaussian_matrix(spec.rank, spec.n, std, rng)?;
    let b = Matrix::zeros(spec.m, spec.rank);
    LoraAdapter::from_parts(a, b, spec.alpha, spec.dropout, spec.strategy)
}

/// The matrices a strategy moves between client and server.
///
/// Strategies that keep `A` local produce [`SharedMatrices::BOnly`], so a
/// payload built from them cannot carry `A` coefficients at all.
#[derive(Clone, Debug, PartialEq)]
pub enum SharedMatrices {
    BOnly { b: Matrix },
    Full { a: Matrix, b: Matrix },
}

impl SharedMatrices {
    pub fn b(&self) -> &Matrix {
        match self {
            SharedMatrices::BOnly { b } | SharedMatrices::Full { b, .. } => b,
        }
    }

    pub fn a(&self) -> Option<&Matrix> {
        match self {
            SharedMatrices::BOnly { .. } => None,
            SharedMatrices::Full { a, .. } => Some(a),
        }
    }

    pub fn coefficient_count(&self) -> usize {
        self.b().as_slice().len() + self.a().map_or(0, |a| a.as_slice().len())
    }

    /// Shares of `adapter` under `strategy`.
    pub fn of(adapter: &LoraAdapter, strategy: StrategyKind) -> Self {
        if strategy.shares_a() {
            SharedMatrices::Full {
                a: adapter.a.clone(),
                b: adapter.b.clone(),
            }
        } else {
            SharedMatrices::BOnly { b: adapter.b.clone() }
        }
    }

    pub(crate) fn same_layout(&self, other: &SharedMatrices) -> bool {
        self.b().shape() == other.b().shape() && self.a().map(Matrix::shape) == other.a().map(Matrix::shape)
    }
}

/// Client-to-server message for one round.
#[derive(Clone, Debug, PartialEq)]
pub struct UplinkPayload {
    pub client_id: u32,
    pub round: u32,
    pub strategy: StrategyKind,
    pub sample_count: u64,
    pub shared: SharedMatrices,
    /// Exact length of [`wire::encode_uplink`] output.
    pub byte_size: usize,
}

pub fn extract_uplink(
    adapter: &LoraAdapter,
    strategy: StrategyKind,
    client_id: u32,
    round: u32,
    sample_count: u64,
) -> Result<UplinkPayload> {
    if adapter.strategy != strategy {
        return Err(Error::StrategyMismatch {
            adapter: adapter.strategy,
            requested: strategy,
        });
    }
    let shared = SharedMatrices::of(adapter, strategy);
    let byte_size = wire::message_len(&shared);
    Ok(UplinkPayload {
        client_id,
        round,
        strategy,
        sample_count,
        shared,
        byte_size,
    })
}

/// Installs aggregated matrices received from the server.
///
/// `PLora` and `FfaLora` replace `B` only and leave `A` bit-identical;
/// `FullLora` replaces both.
pub fn install_downlink(adapter: &LoraAdapter, global: &SharedMatrices, strategy: StrategyKind) -> Result<LoraAdapter> {
    if adapter.strategy != strategy {
        return Err(Error::StrategyMismatch {
            adapter: adapter.strategy,
            requested: strategy,
        });
    }
    global.b().check_same_shape(&adapter.b, "install_downlink")?;
    let mut next = adapter.clone();
    next.b = global.b().clone();
    match (strategy.shares_a(), global.a()) {
        (true, Some(a)) => {
            a.check_same_shape(&adapter.a, "install_downlink")?;
            next.a = a.clone();
        }
        (true, None) => return Err(Error::Payload("FULL_LORA downlink is missing A")),
        (false, Some(_)) => return Err(Error::Payload("downlink carries A for a strategy that keeps A local")),
        (false, None) => {}
    }
    Ok(next)
}

/// `W0 + s·B·A`, for inspection only.
pub fn effective_weights(w0: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    if w0.shape() != (adapter.m(), adapter.n()) {
        return Err(Error::ShapeMismatch {
            op: "effective_weights",
            left: w0.shape(),
            right: (adapter.m(), adapter.n()),
        });
    }
    w0.add(&adapter.delta().scale(adapter.scale()))
}

/// Byte layout of uplink and downlink messages.
///
/// A 40-byte little-endian header followed by `B` row-major and, only when
/// the `has_a` flag is set, `A` row-major:
///
/// ```text
/// 0..8   magic "FVLM-MSG"     8   version (1)       9  direction (0 up, 1 down)
/// 10     strategy tag         11  has_a (0 or 1)
/// 12..16 client id (u32)      16..20 round (u32)    20..28 sample count (u64)
/// 28..32 m (u32)              32..36 r (u32)        36..40 n (u32, 0 without A)
/// ```
pub mod wire {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"FVLM-MSG";
    pub const VERSION: u8 = 1;
    pub const HEADER_LEN: usize = 40;

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Direction {
        Uplink,
        Downlink,
    }

    /// Decoded message header.
    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub struct Header {
        pub direction: Direction,
        pub strategy: StrategyKind,
        pub has_a: bool,
        pub client_id: u32,
        pub round: u32,
        pub sample_count: u64,
        pub m: u32,
        pub r: u32,
        pub n: u32,
    }

    pub fn message_len(shared: &SharedMatrices) -> usize {
        HEADER_LEN + 8 * shared.coefficient_count()
    }

    pub fn encode_uplink(p: &UplinkPayload) -> Vec<u8> {
        encode(Direction::Uplink, p.strategy, p.client_id, p.round, p.sample_count, &p.shared)
    }

    pub fn encode(
        direction: Direction,
        strategy: StrategyKind,
        client_id: u32,
        round: u32,
        sample_count: u64,
        shared: &SharedMatrices,
    ) -> Vec<u8> {
        let b = shared.b();
        let mut out = Vec::with_capacity(message_len(shared));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(match direction {
            Direction::Uplink => 0,
            Direction::Downlink => 1,
        });
        out.push(strategy.tag());
        out.push(shared.a().is_some() as u8);
        out.extend_from_slice(&client_id.to_le_bytes());
        out.extend_from_slice(&round.to_le_bytes());
        out.extend_from_slice(&sample_count.to_le_bytes());
        out.extend_from_slice(&(b.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(b.cols() as u32).to_le_bytes());
        out.extend_from_slice(&(shared.a().map_or(0, |a| a.cols()) as u32).to_le_bytes());
        for v in b.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(a) = shared.a() {
            for v in a.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn u32_at(bytes: &[u8], at: usize) -> u32 {
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
    }

    pub fn decode_header(bytes: &[u8]) -> Result<Header> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Payload("truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Payload("bad magic"));
        }
        if bytes[8] != VERSION {
            return Err(Error::Payload("unsupported version"));
        }
        let direction = match bytes[9] {
            0 => Direction::Uplink,
            1 => Direction::Downlink,
            _ => return Err(Error::Payload("bad direction")),
        };
        let strategy = StrategyKind::from_tag(bytes[10]).ok_or(Error::Payload("unknown strategy tag"))?;
        let has_a = match bytes[11] {
            0 => false,
            1 => true,
            _ => return Err(Error::Payload("bad has_a flag")),
        };
        Ok(Header {
            direction,
            strategy,
            has_a,
            client_id: u32_at(bytes, 12),
            round: u32_at(bytes, 16),
            sample_count: u64::from_le_bytes(bytes[20..28].try_into().unwrap()),
            m: u32_at(bytes, 28),
            r: u32_at(bytes, 32),
            n: u32_at(bytes, 36),
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<(Header, SharedMatrices)> {
        let h = decode_header(bytes)?;
        let (m, r, n) = (h.m as usize, h.r as usize, h.n as usize);
        let b_len = m.checked_mul(r).ok_or(Error::Payload("shape overflow"))?;
        let a_len = if h.has_a {
            r.checked_mul(n).ok_or(Error::Payload("shape overflow"))?
        } else {
            if n != 0 {
                return Err(Error::Payload("n must be 0 without A"));
            }
            0
        };
        let expected = (b_len + a_len)
            .checked_mul(8)
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or(Error::Payload("shape overflow"))?;
        if bytes.len() != expected {
            return Err(Error::Payload("body length does not match header shapes"));
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let b = Matrix::from_vec(m, r, floats.by_ref().take(b_len).collect())?;
        let shared = if h.has_a {
            let a = Matrix::from_vec(r, n, floats.collect())?;
            SharedMatrices::Full { a, b }
        } else {
            SharedMatrices::BOnly { b }
        };
        Ok((h, shared))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn spec(strategy: StrategyKind) -> AdapterSpec {
        AdapterSpec {
            m: 16,
            n: 32,
            rank: 4,
            alpha: 8.0,
            dropout: 0.1,
            strategy,
        }
    }

    fn trained(strategy: StrategyKind, seed: u64) -> LoraAdapter {
        let mut rng = RngStream::new(seed, &[0]);
        let mut a = init_adapter(&spec(strategy), &mut rng).unwrap();
        a.b = gaussian_matrix(16, 4, 0.3, &mut rng).unwrap();
        a
    }

    #[test]
    fn fresh_adapter_is_identity_start() {
        let a = init_adapter(&spec(StrategyKind::PLora), &mut RngStream::new(1, &[2])).unwrap();
        assert_eq!(a.b().max_abs(), 0.0);
        assert_eq!(a.delta().max_abs(), 0.0);
        assert!(a.a().max_abs() > 0.0);
    }

    #[test]
    fn default_scale_is_alpha_over_rank() {
        let a = init_adapter(&spec(StrategyKind::PLora), &mut RngStream::new(1, &[])).unwrap();
        assert_eq!(a.scale(), 2.0);
    }

    #[test]
    fn distinct_paths_give_distinct_a() {
        let s = spec(StrategyKind::PLora);
        let a0 = init_adapter(&s, &mut RngStream::new(3, &[0])).unwrap();
        let a1 = init_adapter(&s, &mut RngStream::new(3, &[1])).unwrap();
        assert!(a0.a().as_slice().iter().zip(a1.a().as_slice()).any(|(x, y)| x != y));
    }

    #[test]
    fn rank_must_be_low() {
        let mut s = spec(StrategyKind::PLora);
        s.rank = 16;
        assert_eq!(
            init_adapter(&s, &mut RngStream::new(0, &[])).unwrap_err(),
            Error::NotLowRank { rank: 16, m: 16, n: 32 }
        );
        s.rank = 0;
        assert!(init_adapter(&s, &mut RngStream::new(0, &[])).is_err());
    }

    #[test]
    fn payload_coefficient_counts() {
        let p = extract_uplink(&trained(StrategyKind::PLora, 1), StrategyKind::PLora, 0, 1, 10).unwrap();
        let f = extract_uplink(&trained(StrategyKind::FullLora, 1), StrategyKind::FullLora, 0, 1, 10).unwrap();
        let ffa = extract_uplink(&trained(StrategyKind::FfaLora, 1), StrategyKind::FfaLora, 0, 1, 10).unwrap();
        assert_eq!(p.shared.coefficient_count(), 64);
        assert_eq!(f.shared.coefficient_count(), 192);
        assert_eq!(ffa.shared.coefficient_count(), p.shared.coefficient_count());
        for payload in [&p, &f, &ffa] {
            assert_eq!(wire::encode_uplink(payload).len(), payload.byte_size);
        }
        assert_eq!(p.byte_size, wire::HEADER_LEN + 8 * 16 * 4);
    }

    #[test]
    fn uplink_rejects_strategy_mismatch() {
        let a = trained(StrategyKind::PLora, 2);
        assert!(matches!(
            extract_uplink(&a, StrategyKind::FullLora, 0, 0, 1),
            Err(Error::StrategyMismatch { .. })
        ));
    }

    #[test]
    fn wire_roundtrip_and_purity() {
        let p = extract_uplink(&trained(StrategyKind::PLora, 4), StrategyKind::PLora, 3, 7, 99).unwrap();
        let bytes = wire::encode_uplink(&p);
        let (h, shared) = wire::decode(&bytes).unwrap();
        assert!(!h.has_a);
        assert_eq!((h.client_id, h.round, h.sample_count), (3, 7, 99));
        assert!(shared.b().bit_eq(p.shared.b()));
        assert!(wire::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn plora_install_keeps_a() {
        let local = trained(StrategyKind::PLora, 5);
        let global = SharedMatrices::BOnly {
            b: gaussian_matrix(16, 4, 1.0, &mut RngStream::new(6, &[])).unwrap(),
        };
        let next = install_downlink(&local, &global, StrategyKind::PLora).unwrap();
        assert!(next.a().bit_eq(local.a()));
        assert!(next.b().bit_eq(global.b()));

        let w0 = gaussian_matrix(16, 32, 1.0, &mut RngStream::new(7, &[])).unwrap();
        let eff = effective_weights(&w0, &next).unwrap();
        let oracle = w0.add(&global.b().matmul(local.a()).unwrap().scale(2.0)).unwrap();
        assert!(eff.bit_eq(&oracle));

        let zero = SharedMatrices::BOnly { b: Matrix::zeros(16, 4) };
        let reset = install_downlink(&local, &zero, StrategyKind::PLora).unwrap();
        assert!(effective_weights(&w0, &reset).unwrap().bit_eq(&w0));
    }

    #[test]
    fn full_install_replaces_both() {
        let local = trained(StrategyKind::FullLora, 8);
        let other = trained(StrategyKind::FullLora, 9);
        let global = SharedMatrices::of(&other, StrategyKind::FullLora);
        let next = install_downlink(&local, &global, StrategyKind::FullLora).unwrap();
        assert_eq!(next, other);
        let b_only = SharedMatrices::BOnly { b: other.b().clone() };
        assert!(install_downlink(&local, &b_only, StrategyKind::FullLora).is_err());
    }

    #[test]
    fn install_rejects_shape_mismatch() {
        let local = trained(StrategyKind::PLora, 10);
        let bad = SharedMatrices::BOnly { b: Matrix::zeros(16, 3) };
        assert!(matches!(
            install_downlink(&local, &bad, StrategyKind::PLora),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn effective_weights_linear_in_alpha() {
        let a = trained(StrategyKind::PLora, 11);
        let w0 = gaussian_matrix(16, 32, 1.0, &mut RngStream::new(12, &[])).unwrap();
        assert!(effective_weights(&w0, &init_adapter(&a.spec(), &mut RngStream::new(0, &[])).unwrap())
            .unwrap()
            .bit_eq(&w0));
        let d1 = effective_weights(&w0, &a).unwrap().sub(&w0).unwrap();
        let d2 = effective_weights(&w0, &a.with_alpha(16.0).unwrap())
            .unwrap()
            .sub(&w0)
            .unwrap();
        let diff = d2.sub(&d1.scale(2.0)).unwrap().max_abs();
        assert!(diff <= 1e-12 * d2.max_abs().max(1.0), "{diff}");
    }
}
