//! Synthetic two-modality classification data and client partitioning.
//!
//! Each example carries a visual token matrix `N_v x D_v`, a text token
//! matrix `N_t x D_t` and a class label. Classes are Gaussian clusters; each
//! domain rotates both modalities by its own fixed orthogonal map and owns a
//! skewed share of the label space, so domains are label-compatible but
//! distribution-shifted.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, tag, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub visual: Matrix,
    pub text: Matrix,
    pub label: usize,
    pub domain: usize,
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureConfig {
    pub num_classes: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub visual_tokens: usize,
    pub text_tokens: usize,
    /// Examples generated for each class.
    pub per_class: Vec<usize>,
    /// Norm of each class centroid in visual space; text prototypes use half.
    pub separation: f64,
    pub noise_std: f64,
    pub num_domains: usize,
    /// Fraction of each class placed in its home domain `class % num_domains`;
    /// the rest is spread evenly over all domains.
    pub domain_skew: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            visual_dim: 8,
            text_dim: 4,
            visual_tokens: 2,
            text_tokens: 2,
            per_class: vec![400; 8],
            separation: 3.0,
            noise_std: 1.0,
            num_domains: 4,
            domain_skew: 1.0,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least 2 classes"));
        }
        if self.visual_dim == 0 || self.text_dim == 0 || self.visual_tokens == 0 || self.text_tokens == 0 {
            return Err(Error::invalid("dims", "all modality dimensions must be positive"));
        }
        if self.per_class.len() != self.num_classes {
            return Err(Error::invalid("per_class", "one count per class required"));
        }
        if self.per_class.contains(&0) {
            return Err(Error::invalid("per_class", "counts must be >= 1"));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(Error::invalid("separation", "must be finite and > 0"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise_std", "must be finite and >= 0"));
        }
        if self.num_domains == 0 {
            return Err(Error::invalid("num_domains", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.domain_skew) {
            return Err(Error::invalid("domain_skew", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: MixtureConfig,
    pub seed: u64,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    /// New dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut examples = Vec::with_capacity(indices.len());
        for &i in indices {
            let ex = self.examples.get(i).ok_or(Error::OutOfRange {
                what: "example",
                index: i,
                len: self.len(),
            })?;
            examples.push(ex.clone());
        }
        Ok(Dataset {
            config: self.config.clone(),
            seed: self.seed,
            examples,
        })
    }

    pub fn indices_of_domain(&self, domain: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.examples[i].domain == domain).collect()
    }

    /// Checks labels and domains against the config.
    pub fn validate(&self) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.label >= self.num_classes() {
                return Err(Error::OutOfRange {
                    what: "label",
                    index: ex.label,
                    len: self.num_classes(),
                });
            }
            if ex.domain >= self.num_domains() {
                return Err(Error::OutOfRange {
                    what: "domain",
                    index: ex.domain,
                    len: self.num_domains(),
                });
            }
            let vs = (self.config.visual_tokens, self.config.visual_dim);
            let ts = (self.config.text_tokens, self.config.text_dim);
            if ex.visual.shape() != vs || ex.text.shape() != ts {
                return Err(Error::invalid("example", alloc::format!("example {i} has wrong token shapes")));
            }
            if !ex.visual.is_finite() || !ex.text.is_finite() {
                return Err(Error::NonFinite("dataset features"));
            }
        }
        Ok(())
    }
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian draw.
fn random_rotation(dim: usize, rng: &mut RngStream) -> Matrix {
    loop {
        let g = gaussian_matrix(dim, dim, 1.0, rng).expect("std is valid");
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut ok = true;
        for i in 0..dim {
            let mut v = g.row(i).to_vec();
            for q in &rows {
                let p: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= p * qi;
                }
            }
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
        if ok {
            return Matrix::from_rows(&rows).expect("square");
        }
    }
}

fn unit_direction(rows: usize, cols: usize, norm: f64, rng: &mut RngStream) -> Matrix {
    let g = gaussian_matrix(rows, cols, 1.0, rng).expect("std is valid");
    let n = g.frobenius_norm();
    g.scale(norm / n)
}

/// Rotates every token (row) of `tokens` by `rotation`: row ↦ R·row.
fn rotate_tokens(tokens: &Matrix, rotation: &Matrix) -> Matrix {
    tokens.matmul(&rotation.transpose()).expect("rotation matches token width")
}

/// How many examples of a class of size `count` land in each domain.
pub fn domain_counts(count: usize, class: usize, num_domains: usize, skew: f64) -> Vec<usize> {
    let home = class % num_domains;
    let home_extra = libm::round(skew * count as f64) as usize;
    let rest = count - home_extra.min(count);
    let mut counts = vec![rest / num_domains; num_domains];
    for c in counts.iter_mut().take(rest % num_domains) {
        *c += 1;
    }
    counts[home] += home_extra.min(count);
    counts
}

/// Generates the class/domain mixture. Examples are ordered by class, then domain.
pub fn gen_mixture(config: &MixtureConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let root = RngStream::new(seed, &[tag::DATA]);
    let mut proto_rng = root.derive(&[0]);
    let visual_centroids: Vec<Matrix> = (0..config.num_classes)
        .map(|_| unit_direction(config.visual_tokens, config.visual_dim, config.separation, &mut proto_rng))
        .collect();
    let text_prototypes: Vec<Matrix> = (0..config.num_classes)
        .map(|_| unit_direction(config.text_tokens, config.text_dim, 0.5 * config.separation, &mut proto_rng))
        .collect();
    let mut rot_rng = root.derive(&[1]);
    let rotations: Vec<(Matrix, Matrix)> = (0..config.num_domains)
        .map(|_| {
            (
                random_rotation(config.visual_dim, &mut rot_rng),
                random_rotation(config.text_dim, &mut rot_rng),
            )
        })
        .collect();

    let mut examples = Vec::with_capacity(config.per_class.iter().sum());
    for (class, &count) in config.per_class.iter().enumerate() {
        let mut noise_rng = root.derive(&[2, class as u64]);
        let counts = domain_counts(count, class, config.num_domains, config.domain_skew);
        for (domain, &n) in counts.iter().enumerate() {
            let (rv, rt) = &rotations[domain];
            for _ in 0..n {
                let v = visual_centroids[class].add(&gaussian_matrix(
                    config.visual_tokens,
                    config.visual_dim,
                    config.noise_std,
                    &mut noise_rng,
                )?)?;
                let t = text_prototypes[class].add(&gaussian_matrix(
                    config.text_tokens,
                    config.text_dim,
                    config.noise_std,
                    &mut noise_rng,
                )?)?;
                examples.push(Example {
                    visual: rotate_tokens(&v, rv),
                    text: rotate_tokens(&t, rt),
                    label: class,
                    domain,
                });
            }
        }
    }
    Ok(Dataset {
        config: config.clone(),
        seed,
        examples,
    })
}

/// Train and eval indices of one client.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<ClientSplit>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// True when the splits cover `0..len` exactly once.
    pub fn is_exact_cover(&self, len: usize) -> bool {
        let mut seen = vec![false; len];
        for c in &self.clients {
            for &i in c.train.iter().chain(&c.eval) {
                if i >= len || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn check_fraction(eval_fraction: f64) -> Result<()> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::invalid("eval_fraction", "must lie strictly between 0 and 1"));
    }
    Ok(())
}

/// Disjoint, exhaustive train/eval split; both sides come back sorted.
pub fn split_train_eval(indices: &[usize], eval_fraction: f64, rng: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(eval_fraction)?;
    if indices.len() < 2 {
        return Err(Error::invalid("indices", "need at least 2 indices to split"));
    }
    let mut shuffled = indices.to_vec();
    rng.shuffle(&mut shuffled);
    let n_eval = (libm::round(eval_fraction * indices.len() as f64) as usize).clamp(1, indices.len() - 1);
    let mut eval = shuffled[..n_eval].to_vec();
    let mut train = shuffled[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok((train, eval))
}

fn split_each(groups: Vec<Vec<usize>>, eval_fraction: f64, rng: &RngStream) -> Result<Partition> {
    let clients = groups
        .into_iter()
        .enumerate()
        .map(|(c, g)| {
            let (train, eval) = split_train_eval(&g, eval_fraction, &mut rng.derive(&[c as u64]))?;
            Ok(ClientSplit { train, eval })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition { clients })
}

/// Uniform shuffle into `k` equal parts; the remainder goes to the lowest ids.
pub fn partition_iid(dataset: &Dataset, k: usize, eval_fraction: f64, rng: &mut RngStream) -> Result<Partition> {
    check_fraction(eval_fraction)?;
    if k == 0 || k > dataset.len() {
        return Err(Error::invalid("clients", "need 1 <= k <= dataset size"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut groups = Vec::with_capacity(k);
    let mut at = 0;
    for c in 0..k {
        let size = base + usize::from(c < extra);
        groups.push(order[at..at + size].to_vec());
        at += size;
    }
    split_each(groups, eval_fraction, rng)
}

/// Label-sorted contiguous shards dealt at random, `shards_per_client` each.
pub fn partition_shards(
    dataset: &Dataset,
    num_shards: usize,
    shards_per_client: usize,
    k: usize,
    eval_fraction: f64,
    rng: &mut RngStream,
) -> Result<Partition> {
    check_fraction(eval_fraction)?;
    if k == 0 || shards_per_client == 0 || num_shards != k * shards_per_client {
        return Err(Error::invalid("shards", "num_shards must equal clients * shards_per_client"));
    }
    if dataset.len() < num_shards {
        return Err(Error::invalid("shards", "dataset smaller than the number of shards"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| (dataset.examples[i].label, i));
    let base = order.len() / num_shards;
    let extra = order.len() % num_shards;
    let mut shards = Vec::with_capacity(num_shards);
    let mut at = 0;
    for s in 0..num_shards {
        let size = base + usize::from(s < extra);
        shards.push(&order[at..at + size]);
        at += size;
    }
    let mut deal: Vec<usize> = (0..num_shards).collect();
    rng.shuffle(&mut deal);
    let groups = (0..k)
        .map(|c| {
            deal[c * shards_per_client..(c + 1) * shards_per_client]
                .iter()
                .flat_map(|&s| shards[s].iter().copied())
                .collect()
        })
        .collect();
    split_each(groups, eval_fraction, rng)
}

/// Domain `d` goes to client `d % k`. Each domain is split into train and
/// eval on its own stream, so the set of eval examples does not depend on `k`.
pub fn partition_domains(dataset: &Dataset, k: usize, eval_fraction: f64, rng: &mut RngStream) -> Result<Partition> {
    check_fraction(eval_fraction)?;
    if k == 0 || dataset.num_domains() < k {
        return Err(Error::invalid("clients", "fewer domains than clients"));
    }
    let mut clients = vec![ClientSplit::default(); k];
    for d in 0..dataset.num_domains() {
        let idx = dataset.indices_of_domain(d);
        if idx.is_empty() {
            continue;
        }
        let (train, eval) = split_train_eval(&idx, eval_fraction, &mut rng.derive(&[d as u64]))?;
        let c = &mut clients[d % k];
        c.train.extend(train);
        c.eval.extend(eval);
    }
    for c in &mut clients {
        c.train.sort_unstable();
        c.eval.sort_unstable();
        if c.train.is_empty() || c.eval.is_empty() {
            return Err(Error::invalid("clients", "a client received no examples"));
        }
    }
    Ok(Partition { clients })
}

/// Per-domain fraction reserved for pretraining; returns `(pool, rest)`, both sorted.
pub fn carve_pretraining_pool(dataset: &Dataset, fraction: f64, rng: &RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
    check_fraction(fraction)?;
    let mut pool = Vec::new();
    let mut rest = Vec::new();
    for d in 0..dataset.num_domains() {
        let mut idx = dataset.indices_of_domain(d);
        rng.derive(&[d as u64]).shuffle(&mut idx);
        let take = libm::round(fraction * idx.len() as f64) as usize;
        pool.extend_from_slice(&idx[..take]);
        rest.extend_from_slice(&idx[take..]);
    }
    pool.sort_unstable();
    rest.sort_unstable();
    Ok((pool, rest))
}

/// Normalized label histogram of `indices`.
pub fn label_histogram(dataset: &Dataset, indices: &[usize]) -> Vec<f64> {
    let mut h = vec![0.0; dataset.num_classes()];
    for &i in indices {
        h[dataset.examples[i].label] += 1.0;
    }
    let n = indices.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean pairwise total-variation distance between client train label histograms.
pub fn mean_pairwise_tv(dataset: &Dataset, partition: &Partition) -> f64 {
    let hists: Vec<Vec<f64>> = partition
        .clients
        .iter()
        .map(|c| label_histogram(dataset, &c.train))
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..hists.len() {
        for j in i + 1..hists.len() {
            total += total_variation(&hists[i], &hists[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
