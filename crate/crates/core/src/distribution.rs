//! Neighbor-list distributions, interpolation, cached training supervision
//! and sparsity statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, Vocabulary, UNK_ID};
use crate::datastore::{compute_keys, Datastore, NeighborList, Provenance};
use crate::error::{invalid, Error, Result};
use crate::io::{self, Reader, Writer};
use crate::lm::LanguageModel;

const MAGIC: &[u8; 4] = b"MDDC";
const VERSION: u32 = 1;
/// Queries per search call while caching.
const CACHE_BATCH: usize = 256;
/// Tolerance on the total mass of a stored distribution.
pub const NORM_TOL: f64 = 1e-6;

/// A distribution over a small set of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDist {
    support: Vec<(u32, f32)>,
    pub tau: f32,
    pub k: u32,
}

impl SparseDist {
    /// Validates sortedness, positivity, normalization and the support bound.
    pub fn new(support: Vec<(u32, f32)>, tau: f32, k: u32) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::NoSupervision);
        }
        if support.len() > k as usize {
            return Err(invalid(format!("support {} exceeds k = {k}", support.len())));
        }
        if support.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(invalid("support ids must be distinct and sorted"));
        }
        if support.iter().any(|&(_, p)| !(p > 0.0 && p.is_finite())) {
            return Err(invalid("support probabilities must be positive"));
        }
        let mass: f64 = support.iter().map(|&(_, p)| f64::from(p)).sum();
        if (mass - 1.0).abs() > NORM_TOL {
            return Err(Error::Unnormalized(mass));
        }
        Ok(SparseDist { support, tau, k })
    }

    pub fn support(&self) -> &[(u32, f32)] {
        &self.support
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.support
            .binary_search_by_key(&token, |&(t, _)| t)
            .map_or(0.0, |i| f64::from(self.support[i].1))
    }

    pub fn top1(&self) -> f64 {
        self.support
            .iter()
            .map(|&(_, p)| f64::from(p))
            .fold(0.0, f64::max)
    }

    pub fn densify(&self, vocab_size: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; vocab_size];
        for &(t, p) in &self.support {
            *out.get_mut(t as usize)
                .ok_or_else(|| invalid(format!("token {t} outside vocabulary")))? = f64::from(p);
        }
        Ok(out)
    }
}

/// `p(v) ∝ Σ_{i: value_i = v} exp(-d_i / τ)`, computed with the minimum
/// distance factored out.
pub fn knn_distribution(neighbors: &NeighborList, tau: f64) -> Result<SparseDist> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let entries = &neighbors.entries;
    if entries.is_empty() {
        return Err(Error::NoSupervision);
    }
    let dmin = entries.iter().map(|n| n.distance).fold(f64::INFINITY, f64::min);
    let mut mass: BTreeMap<u32, f64> = BTreeMap::new();
    for n in entries {
        *mass.entry(n.value).or_default() += (-(n.distance - dmin) / tau).exp();
    }
    let total: f64 = mass.values().sum();
    let support: Vec<(u32, f32)> = mass
        .into_iter()
        .map(|(t, m)| (t, (m / total) as f32))
        .filter(|&(_, p)| p > 0.0)
        .collect();
    SparseDist::new(support, tau as f32, neighbors.k.max(entries.len()) as u32)
}

fn check_weight(w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(invalid(format!("interpolation weight {w} outside [0, 1]")))
    }
}

fn renormalize(mut r: Vec<f64>) -> Vec<f64> {
    let s: f64 = r.iter().sum();
    for v in &mut r {
        *v /= s;
    }
    r
}

/// `w * q + (1 - w) * p` over dense distributions.
pub fn interpolate(p: &[f64], q: &[f64], w: f64) -> Result<Vec<f64>> {
    check_weight(w)?;
    if p.len() != q.len() {
        return Err(invalid(format!(
            "vocabulary sizes differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if w == 0.0 {
        return Ok(p.to_vec());
    }
    if w == 1.0 {
        return Ok(q.to_vec());
    }
    Ok(renormalize(
        p.iter().zip(q).map(|(&a, &b)| w * b + (1.0 - w) * a).collect(),
    ))
}

/// As [`interpolate`] with a sparse `q`.
pub fn interpolate_sparse(p: &[f64], q: &SparseDist, w: f64) -> Result<Vec<f64>> {
    check_weight(w)?;
    let dense = q.densify(p.len())?;
    if w == 0.0 {
        return Ok(p.to_vec());
    }
    if w == 1.0 {
        return Ok(dense);
    }
    let mut r: Vec<f64> = p.iter().map(|&a| (1.0 - w) * a).collect();
    for &(t, prob) in q.support() {
        r[t as usize] += w * f64::from(prob);
    }
    Ok(renormalize(r))
}

/// Retrieval and mixing hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpParams {
    pub k: usize,
    pub tau: f64,
    /// kNN-LM weight on the retrieval distribution.
    pub lambda: f64,
    /// Weight on the memory decoder at inference.
    pub alpha: f64,
    /// Weight on the KL term during memory decoder training.
    pub beta: f64,
}

impl Default for InterpParams {
    fn default() -> Self {
        InterpParams {
            k: 32,
            tau: 1.0,
            lambda: 0.25,
            alpha: 0.6,
            beta: 0.5,
        }
    }
}

impl InterpParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("tau must be positive"));
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheMeta {
    pub datastore_hash: u64,
    pub vocab_hash: u64,
    pub corpus_hash: u64,
    pub corpus: String,
    pub k: u32,
    pub tau: f32,
    pub exclude_self: bool,
}

/// Cached supervision; `entries[i]` belongs to corpus position `i + 1` and
/// is `None` where no neighbor was eligible.
#[derive(Clone, Debug, PartialEq)]
pub struct DistCache {
    pub meta: CacheMeta,
    pub entries: Vec<Option<SparseDist>>,
}

/// Retrieval supervision for every position of `seq` against `store`, with
/// queries computed by `model` exactly as the store's keys were.
pub fn cache_distributions(
    seq: &TokenSeq,
    store: &Datastore,
    model: &LanguageModel,
    k: usize,
    tau: f64,
    exclude_self: bool,
) -> Result<DistCache> {
    store.check_model(model)?;
    seq.check_vocab(model.config.vocab_size)?;
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let m = store.meta();
    let d = store.dim();
    let keys = compute_keys(model, &seq.ids, m.layer as usize, m.windowing)?;
    let source = seq.source.id();
    let n = seq.len().saturating_sub(1);
    let mut entries = Vec::with_capacity(n);
    for b0 in (0..n).step_by(CACHE_BATCH) {
        let nb = CACHE_BATCH.min(n - b0);
        let excludes: Vec<Option<Provenance>> = (b0..b0 + nb)
            .map(|i| {
                exclude_self.then_some(Provenance {
                    source,
                    offset: (i + 1) as u64,
                })
            })
            .collect();
        let lists = store.search_batch(&keys[b0 * d..(b0 + nb) * d], k, &excludes)?;
        for l in &lists {
            entries.push(match knn_distribution(l, tau) {
                Ok(dist) => Some(dist),
                Err(Error::NoSupervision) => None,
                Err(e) => return Err(e),
            });
        }
    }
    Ok(DistCache {
        meta: CacheMeta {
            datastore_hash: store.fingerprint(),
            vocab_hash: m.vocab_hash,
            corpus_hash: seq.fingerprint(),
            corpus: seq.source.to_string(),
            k: k as u32,
            tau: tau as f32,
            exclude_self,
        },
        entries,
    })
}

impl DistCache {
    /// Supervision for position `t` (1-based target index).
    pub fn at(&self, t: usize) -> Option<&SparseDist> {
        self.entries.get(t.checked_sub(1)?)?.as_ref()
    }

    /// Errors unless this cache was built over `seq`.
    pub fn check_corpus(&self, seq: &TokenSeq) -> Result<()> {
        if self.meta.corpus_hash != seq.fingerprint() || self.entries.len() + 1 != seq.len() {
            return Err(Error::Incompatible(format!(
                "cache built over {} does not align with corpus {}",
                self.meta.corpus, seq.source
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u64 {
        io::crc64(&self.payload())
    }

    /// The same supervision expressed in another vocabulary, matched by
    /// token string, for `seq` (the same text encoded with `to`). Tokens
    /// missing from `to` fold into its unknown id.
    pub fn remap_vocab(&self, from: &Vocabulary, to: &Vocabulary, seq: &TokenSeq) -> Result<DistCache> {
        if self.meta.vocab_hash != from.fingerprint() {
            return Err(Error::VocabMismatch {
                expected: self.meta.vocab_hash,
                found: from.fingerprint(),
            });
        }
        if self.entries.len() + 1 != seq.len() {
            return Err(Error::Incompatible(format!(
                "cache has {} positions, corpus {} has {}",
                self.entries.len(),
                seq.source,
                seq.len().saturating_sub(1)
            )));
        }
        let map = |id: u32| from.token(id).and_then(|t| to.id(t)).unwrap_or(UNK_ID);
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let Some(d) = e else { return Ok(None) };
                let mut acc: BTreeMap<u32, f64> = BTreeMap::new();
                for &(t, p) in d.support() {
                    *acc.entry(map(t)).or_default() += f64::from(p);
                }
                let z: f64 = acc.values().sum();
                let support = acc.into_iter().map(|(t, p)| (t, (p / z) as f32)).collect();
                SparseDist::new(support, d.tau, d.k).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DistCache {
            meta: CacheMeta {
                vocab_hash: to.fingerprint(),
                corpus_hash: seq.fingerprint(),
                corpus: seq.source.to_string(),
                ..self.meta.clone()
            },
            entries,
        })
    }

    fn payload(&self) -> Vec<u8> {
        let m = &self.meta;
        let mut w = Writer::new();
        w.u64(m.datastore_hash);
        w.u64(m.vocab_hash);
        w.u64(m.corpus_hash);
        w.str(&m.corpus);
        w.u32(m.k);
        w.f32(m.tau);
        w.u8(m.exclude_self as u8);
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            match e {
                None => w.varint(0),
                Some(dist) => {
                    w.varint(dist.support.len() as u64);
                    for &(t, _) in &dist.support {
                        w.u32(t);
                    }
                    for &(_, p) in &dist.support {
                        w.f32(p);
                    }
                }
            }
        }
        w.into_inner()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        io::seal(MAGIC, VERSION, &self.payload())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "distribution cache";
        let payload = io::unseal(bytes, MAGIC, VERSION, WHAT)?;
        let mut r = Reader::new(payload, WHAT);
        let meta = CacheMeta {
            datastore_hash: r.u64()?,
            vocab_hash: r.u64()?,
            corpus_hash: r.u64()?,
            corpus: r.str()?,
            k: r.u32()?,
            tau: r.f32()?,
            exclude_self: r.u8()? != 0,
        };
        let n = r.u64()? as usize;
        let mut entries = Vec::with_capacity(n.min(payload.len()));
        for _ in 0..n {
            let size = r.varint()? as usize;
            if size == 0 {
                entries.push(None);
                continue;
            }
            if size > meta.k as usize {
                return Err(r.malformed("support larger than k"));
            }
            let ids = (0..size).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let probs = r.f32s(size)?;
            let dist = SparseDist::new(ids.into_iter().zip(probs).collect(), meta.tau, meta.k)
                .map_err(|e| r.malformed(&e.to_string()))?;
            entries.push(Some(dist));
        }
        r.finish()?;
        Ok(DistCache { meta, entries })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityStats {
    pub positions: usize,
    pub supervised: usize,
    pub mean_top1: f64,
    pub median_top1: f64,
    pub mean_support: f64,
    /// `histogram[s]` counts distributions with support size `s`.
    pub histogram: Vec<usize>,
}

pub fn sparsity_stats(cache: &DistCache) -> Result<SparsityStats> {
    let present: Vec<&SparseDist> = cache.entries.iter().flatten().collect();
    if present.is_empty() {
        return Err(invalid("cache holds no supervised positions"));
    }
    let n = present.len() as f64;
    let mut top1: Vec<f64> = present.iter().map(|d| d.top1()).collect();
    top1.sort_by(f64::total_cmp);
    let median_top1 = if top1.len() % 2 == 1 {
        top1[top1.len() / 2]
    } else {
        (top1[top1.len() / 2 - 1] + top1[top1.len() / 2]) / 2.0
    };
    let max_support = present.iter().map(|d| d.support.len()).max().unwrap();
    let mut histogram = vec![0; max_support + 1];
    for d in &present {
        histogram[d.support.len()] += 1;
    }
    Ok(SparsityStats {
        positions: cache.entries.len(),
        supervised: present.len(),
        mean_top1: top1.iter().sum::<f64>() / n,
        median_top1,
        mean_support: present.iter().map(|d| d.support.len() as f64).sum::<f64>() / n,
        histogram,
    })
}
