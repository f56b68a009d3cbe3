//! Binary files: adapter checkpoints, frozen bases and generated datasets.
//!
//! All integers are little-endian; matrices are stored row-major as `f64`.

use fedlora_core::adapters::{LoraAdapter, StrategyKind};
use fedlora_core::data::{Dataset, Example, MixtureConfig};
use fedlora_core::layers::LinearLayer;
use fedlora_core::linalg::Matrix;
use fedlora_core::model::{
    Activation, BaseStage, ExtractorLayer, FrozenBase, ModelConfig, PretrainMeta, ProjectionLayer,
};

pub const ADAPTER_MAGIC: &[u8; 11] = b"FVLM-ADPT/1";
pub const BASE_MAGIC: &[u8; 11] = b"FVLM-BASE/1";
pub const DATA_MAGIC: &[u8; 11] = b"FVLM-DATA/1";
pub const VERSION: u8 = 1;

/// Bytes before the first matrix coefficient of an adapter file.
pub const ADAPTER_HEADER_LEN: usize = 11 + 1 + 1 + 12 + 16;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodecError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("shape overflow: {0}")]
    ShapeOverflow(String),
    #[error("truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Model(#[from] fedlora_core::Error),
}

type Result<T> = std::result::Result<T, CodecError>;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn coeffs(&mut self, m: &Matrix) {
        for &v in m.as_slice() {
            self.f64(v);
        }
    }

    /// Shape-prefixed matrix.
    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        self.coeffs(m);
    }

    fn linear(&mut self, l: &LinearLayer) {
        self.matrix(&l.weight);
        match &l.bias {
            None => self.u8(0),
            Some(b) => {
                self.u8(1);
                for &v in b {
                    self.f64(v);
                }
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let rest = self.buf.len() - self.pos;
        if n > rest {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n - rest,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &[u8; 11]) -> Result<()> {
        let got = self.take(magic.len()).map_err(|_| header("file shorter than its magic"))?;
        if got != magic {
            return Err(header(format!("expected magic {}", String::from_utf8_lossy(magic))));
        }
        let v = self.u8().map_err(|_| header("missing version byte"))?;
        if v != VERSION {
            return Err(header(format!("unsupported version {v}")));
        }
        Ok(())
    }

    /// Checks that `rows * cols` coefficients can exist before allocating.
    fn coeff_count(&self, rows: usize, cols: usize, what: &str) -> Result<usize> {
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| CodecError::ShapeOverflow(format!("{what}: {rows}x{cols}")))?;
        let rest = self.buf.len() - self.pos;
        if n * 8 > rest {
            return Err(CodecError::Truncated {
                offset: self.pos,
                needed: n * 8 - rest,
            });
        }
        Ok(n)
    }

    fn coeffs(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let n = self.coeff_count(rows, cols, what)?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Matrix::from_vec(rows, cols, data)?)
    }

    fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        self.coeffs(rows, cols, what)
    }

    fn linear(&mut self, what: &str) -> Result<LinearLayer> {
        let weight = self.matrix(what)?;
        let bias = match self.u8()? {
            0 => None,
            1 => {
                self.coeff_count(weight.rows(), 1, what)?;
                Some((0..weight.rows()).map(|_| self.f64()).collect::<Result<Vec<_>>>()?)
            }
            t => return Err(header(format!("{what}: bad bias flag {t}"))),
        };
        Ok(LinearLayer::new(weight, bias)?)
    }

    fn finish(self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(CodecError::TrailingBytes(n)),
        }
    }
}

fn header(msg: impl Into<String>) -> CodecError {
    CodecError::CorruptHeader(msg.into())
}

pub fn encode_adapter(adapter: &LoraAdapter) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(ADAPTER_MAGIC);
    w.u8(VERSION);
    w.u8(adapter.strategy().tag());
    w.u32(adapter.m());
    w.u32(adapter.n());
    w.u32(adapter.rank());
    w.f64(adapter.alpha());
    w.f64(adapter.dropout());
    w.coeffs(adapter.b());
    w.coeffs(adapter.a());
    w.0
}

pub fn decode_adapter(bytes: &[u8]) -> Result<LoraAdapter> {
    let mut r = Reader::new(bytes);
    r.magic(ADAPTER_MAGIC)?;
    let tag = r.u8().map_err(|_| header("missing strategy byte"))?;
    let strategy = StrategyKind::from_tag(tag).ok_or_else(|| header(format!("unknown strategy tag {tag}")))?;
    let (m, n, rank) = (r.u32()?, r.u32()?, r.u32()?);
    let alpha = r.f64()?;
    let dropout = r.f64()?;
    let b = r.coeffs(m, rank, "B")?;
    let a = r.coeffs(rank, n, "A")?;
    r.finish()?;
    Ok(LoraAdapter::from_parts(a, b, alpha, dropout, strategy)?)
}

pub fn encode_base(base: &FrozenBase) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(BASE_MAGIC);
    w.u8(VERSION);
    w.u8(base.stage().tag());
    let c = base.config();
    for d in [c.visual_dim, c.text_dim, c.visual_tokens, c.text_tokens, c.hidden_dim, c.num_classes] {
        w.u32(d);
    }
    w.u64(c.seed);
    w.matrix(&base.projection().weight);
    w.u32(base.extractor().len());
    for layer in base.extractor() {
        w.u8(layer.activation.tag());
        w.linear(&layer.linear);
    }
    w.linear(base.head());
    let meta = base.meta();
    w.u32(meta.epochs as usize);
    w.u64(meta.pooled_size);
    w.f64(meta.accuracy);
    w.0
}

pub fn decode_base(bytes: &[u8]) -> Result<FrozenBase> {
    let mut r = Reader::new(bytes);
    r.magic(BASE_MAGIC)?;
    let tag = r.u8()?;
    let stage = BaseStage::from_tag(tag).ok_or_else(|| header(format!("unknown stage tag {tag}")))?;
    let config = ModelConfig {
        visual_dim: r.u32()?,
        text_dim: r.u32()?,
        visual_tokens: r.u32()?,
        text_tokens: r.u32()?,
        hidden_dim: r.u32()?,
        num_classes: r.u32()?,
        seed: r.u64()?,
    };
    let projection = ProjectionLayer {
        weight: r.matrix("projection")?,
    };
    let layers = r.u32()?;
    // every layer needs at least its activation byte and a shape
    if layers > (bytes.len() - r.pos) / 9 {
        return Err(CodecError::ShapeOverflow(format!("{layers} extractor layers")));
    }
    let mut extractor = Vec::with_capacity(layers);
    for _ in 0..layers {
        let tag = r.u8()?;
        let activation = Activation::from_tag(tag).ok_or_else(|| header(format!("unknown activation tag {tag}")))?;
        extractor.push(ExtractorLayer {
            linear: r.linear("extractor")?,
            activation,
        });
    }
    let head = r.linear("head")?;
    let meta = PretrainMeta {
        epochs: r.u32()? as u32,
        pooled_size: r.u64()?,
        accuracy: r.f64()?,
    };
    r.finish()?;
    Ok(FrozenBase::from_parts(config, projection, extractor, head, meta, stage)?)
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(DATA_MAGIC);
    w.u8(VERSION);
    let c = &ds.config;
    for d in [c.num_classes, c.visual_dim, c.text_dim, c.visual_tokens, c.text_tokens, c.num_domains] {
        w.u32(d);
    }
    for &n in &c.per_class {
        w.u32(n);
    }
    w.f64(c.separation);
    w.f64(c.noise_std);
    w.f64(c.domain_skew);
    w.u64(ds.seed);
    w.u64(ds.examples.len() as u64);
    for ex in &ds.examples {
        w.u32(ex.label);
        w.u32(ex.domain);
        w.coeffs(&ex.visual);
        w.coeffs(&ex.text);
    }
    w.0
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATA_MAGIC)?;
    let (num_classes, visual_dim, text_dim, visual_tokens, text_tokens, num_domains) =
        (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if num_classes > (bytes.len() - r.pos) / 4 {
        return Err(CodecError::ShapeOverflow(format!("{num_classes} classes")));
    }
    let per_class = (0..num_classes).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let config = MixtureConfig {
        num_classes,
        visual_dim,
        text_dim,
        visual_tokens,
        text_tokens,
        per_class,
        separation: r.f64()?,
        noise_std: r.f64()?,
        num_domains,
        domain_skew: r.f64()?,
    };
    let seed = r.u64()?;
    let count = r.u64()?;
    let per_example = visual_tokens
        .checked_mul(visual_dim)
        .and_then(|v| text_tokens.checked_mul(text_dim).and_then(|t| v.checked_add(t)))
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(8))
        .ok_or_else(|| CodecError::ShapeOverflow("example size".into()))?;
    let count = usize::try_from(count)
        .ok()
        .filter(|&c| c.checked_mul(per_example).is_some())
        .ok_or_else(|| CodecError::ShapeOverflow(format!("{count} examples")))?;
    let rest = bytes.len() - r.pos;
    if count * per_example > rest {
        return Err(CodecError::Truncated {
            offset: r.pos,
            needed: count * per_example - rest,
        });
    }
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.u32()?;
        let domain = r.u32()?;
        examples.push(Example {
            visual: r.coeffs(visual_tokens, visual_dim, "visual")?,
            text: r.coeffs(text_tokens, text_dim, "text")?,
            label,
            domain,
        });
    }
    r.finish()?;
    let ds = Dataset { config, seed, examples };
    ds.validate()?;
    Ok(ds)
}
