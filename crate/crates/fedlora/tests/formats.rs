use fedlora::codec::*;
use fedlora_core::adapters::{init_adapter, AdapterSpec, LoraAdapter, StrategyKind};
use fedlora_core::data::{gen_mixture, MixtureConfig};
use fedlora_core::federation::{prepare_base, split_pool, ExperimentConfig};
use fedlora_core::linalg::{gaussian_matrix, RngStream};
use proptest::prelude::*;

fn adapter(m: usize, n: usize, rank: usize, seed: u64, strategy: StrategyKind) -> LoraAdapter {
    let mut rng = RngStream::new(seed, &[]);
    let spec = AdapterSpec {
        m,
        n,
        rank,
        alpha: 8.0,
        dropout: 0.1,
        strategy,
    };
    let a = init_adapter(&spec, &mut rng).unwrap();
    // nonzero B so the round trip covers both blocks
    let b = gaussian_matrix(m, rank, 1.0, &mut rng).unwrap();
    LoraAdapter::from_parts(a.a().clone(), b, 8.0, 0.1, strategy).unwrap()
}

#[test]
fn adapter_header_layout() {
    let ad = adapter(8, 64, 4, 1, StrategyKind::FullLora);
    let bytes = encode_adapter(&ad);
    assert_eq!(ADAPTER_HEADER_LEN, 41);
    assert_eq!(bytes.len(), ADAPTER_HEADER_LEN + 8 * (8 * 4 + 4 * 64));
    assert_eq!(&bytes[..11], b"FVLM-ADPT/1");
    assert_eq!(bytes[11], VERSION);
    assert_eq!(bytes[12], StrategyKind::FullLora.tag());
    assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 8);
    assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 64);
    assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 4);
    assert_eq!(f64::from_le_bytes(bytes[25..33].try_into().unwrap()), 8.0);
    assert_eq!(f64::from_le_bytes(bytes[33..41].try_into().unwrap()), 0.1);
    assert_eq!(f64::from_le_bytes(bytes[41..49].try_into().unwrap()), ad.b().as_slice()[0]);
}

#[test]
fn adapter_errors_are_distinct() {
    let bytes = encode_adapter(&adapter(8, 16, 2, 2, StrategyKind::PLora));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_adapter(&bad), Err(CodecError::CorruptHeader(_))));
    let mut bad = bytes.clone();
    bad[11] = 9;
    assert!(matches!(decode_adapter(&bad), Err(CodecError::CorruptHeader(_))));
    let mut bad = bytes.clone();
    bad[12] = 77;
    assert!(matches!(decode_adapter(&bad), Err(CodecError::CorruptHeader(_))));

    let mut bad = bytes.clone();
    bad[13..17].copy_from_slice(&u32::MAX.to_le_bytes());
    bad[21..25].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(decode_adapter(&bad), Err(CodecError::ShapeOverflow(_))));

    // huge but representable shape: rejected before allocating
    let mut bad = bytes.clone();
    bad[13..17].copy_from_slice(&1_000_000u32.to_le_bytes());
    assert!(matches!(decode_adapter(&bad), Err(CodecError::Truncated { .. })));

    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(decode_adapter(cut), Err(CodecError::Truncated { .. })));

    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(decode_adapter(&long).unwrap_err(), CodecError::TrailingBytes(1));
}

#[test]
fn base_and_dataset_round_trip() {
    let mut cfg = ExperimentConfig::new();
    cfg.data.mixture.per_class = vec![60; 8];
    cfg.hidden_dim = 16;
    cfg.pretrain.epochs = 5;
    let full = gen_mixture(&cfg.data.mixture, cfg.seed).unwrap();
    let bytes = encode_dataset(&full);
    assert_eq!(&bytes[..11], DATA_MAGIC);
    assert_eq!(decode_dataset(&bytes).unwrap(), full);
    assert!(matches!(
        decode_dataset(&bytes[..bytes.len() / 2]),
        Err(CodecError::Truncated { .. })
    ));

    let (pool, _) = split_pool(&cfg, &full).unwrap();
    let base = prepare_base(&cfg, &pool).unwrap();
    let bytes = encode_base(&base);
    assert_eq!(&bytes[..11], BASE_MAGIC);
    let back = decode_base(&bytes).unwrap();
    assert_eq!(back.fingerprint(), base.fingerprint());
    assert_eq!(encode_base(&back), bytes);
    assert!(matches!(decode_base(&bytes[..20]), Err(CodecError::Truncated { .. })));
}

#[test]
fn mixture_config_survives_dataset_codec() {
    let mix = MixtureConfig {
        per_class: vec![3, 5, 1, 2, 4, 1, 6, 2],
        domain_skew: 0.5,
        ..MixtureConfig::default()
    };
    let ds = gen_mixture(&mix, 9).unwrap();
    let back = decode_dataset(&encode_dataset(&ds)).unwrap();
    assert_eq!(back.config, mix);
    assert_eq!(back.seed, 9);
}

proptest! {
    #[test]
    fn adapters_round_trip(
        m in 2usize..12,
        n in 2usize..40,
        r in 1usize..8,
        seed in any::<u64>(),
        s in 0usize..3,
    ) {
        let rank = 1 + r % (m.min(n) - 1);
        let ad = adapter(m, n, rank, seed, StrategyKind::ALL[s]);
        let bytes = encode_adapter(&ad);
        prop_assert_eq!(bytes.len(), ADAPTER_HEADER_LEN + 8 * rank * (m + n));
        prop_assert_eq!(decode_adapter(&bytes).unwrap(), ad);
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..200, seed in any::<u64>()) {
        let bytes = encode_adapter(&adapter(4, 8, 2, seed, StrategyKind::PLora));
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode_adapter(&bytes[..cut]).is_err());
    }
}
