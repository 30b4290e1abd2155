//! Key-value datastore of hidden-state keys and next-token values, with
//! exact k-nearest-neighbor search.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::Path;

use crate::corpus::{make_windows, TokenSeq};
use crate::error::{invalid, Error, Result};
use crate::io::{self, Hasher, Reader, Writer};
use crate::lm::LanguageModel;
use crate::tensor::{gemm, MatRef};

const MAGIC: &[u8; 4] = b"MDKV";
const VERSION: u32 = 1;

/// Queries processed per GEMM block.
const QUERY_BLOCK: usize = 64;
/// Keys processed per GEMM block.
const KEY_BLOCK: usize = 2048;
/// Windows per forward pass when computing keys.
const KEY_BATCH: usize = 32;

/// Where a datastore entry came from: the corpus and the position of its
/// value token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Provenance {
    pub source: u64,
    pub offset: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SquaredL2,
}

impl Metric {
    pub fn id(self) -> u8 {
        match self {
            Metric::SquaredL2 => 1,
        }
    }

    fn from_id(id: u8) -> Option<Self> {
        (id == 1).then_some(Metric::SquaredL2)
    }
}

/// How keys are computed from a token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyWindowing {
    /// Model input length per window.
    pub context_len: usize,
    /// Fresh positions per window after the first.
    pub score_len: usize,
}

impl KeyWindowing {
    /// Full model context, half of it fresh per window.
    pub fn for_model(model: &LanguageModel) -> Self {
        let c = model.config.context_len;
        KeyWindowing {
            context_len: c,
            score_len: (c / 2).max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatastoreMeta {
    pub model_hash: u64,
    pub vocab_hash: u64,
    pub corpus_hash: u64,
    /// Hidden layer used for keys, 1-based.
    pub layer: u32,
    pub metric: Metric,
    pub vocab_size: u32,
    pub windowing: KeyWindowing,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub value: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborList {
    /// Ascending distance, ties by ascending index.
    pub entries: Vec<Neighbor>,
    /// Number of neighbors requested.
    pub k: usize,
    pub query: Option<Provenance>,
}

#[derive(Clone, Debug)]
pub struct Datastore {
    meta: DatastoreMeta,
    dim: usize,
    keys: Vec<f32>,
    values: Vec<u32>,
    positions: Vec<Provenance>,
    norms: Vec<f64>,
    max_norm: f64,
    index: HashMap<Provenance, usize>,
}

impl PartialEq for Datastore {
    fn eq(&self, o: &Self) -> bool {
        self.meta == o.meta
            && self.dim == o.dim
            && self.values == o.values
            && self.positions == o.positions
            && self.keys.len() == o.keys.len()
            && self
                .keys
                .iter()
                .zip(&o.keys)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// The distance used throughout: squared Euclidean, accumulated in `f64`.
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Keys for every position `1..len` of `ids`; row `t - 1` belongs to the
/// prediction of token `t`.
pub fn compute_keys(
    model: &LanguageModel,
    ids: &[u32],
    layer: usize,
    windowing: KeyWindowing,
) -> Result<Vec<f32>> {
    let d = model.config.d_model;
    if ids.len() < 2 {
        return Ok(Vec::new());
    }
    let windows = make_windows(ids.len(), windowing.context_len + 1, windowing.score_len)?;
    let mut keys = vec![0.0f32; (ids.len() - 1) * d];
    for batch in windows.chunks(KEY_BATCH) {
        let inputs: Vec<&[u32]> = batch.iter().map(|w| w.inputs(ids)).collect();
        let out = model.forward_batch(&inputs, Some(layer), false)?;
        let hidden = out.hidden.unwrap();
        for (w, &off) in batch.iter().zip(&out.offsets) {
            for r in w.first_scored_row()..w.len - 1 {
                let target = w.start + r + 1;
                keys[(target - 1) * d..target * d].copy_from_slice(hidden.row(off + r));
            }
        }
    }
    Ok(keys)
}

/// Builds a datastore over `seq` with keys from `model` at `layer`
/// (defaults to the model's configured key layer).
pub fn build_datastore(
    model: &LanguageModel,
    seq: &TokenSeq,
    layer: Option<usize>,
    windowing: KeyWindowing,
) -> Result<Datastore> {
    if seq.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    seq.check_vocab(model.config.vocab_size)?;
    let layer = layer.unwrap_or(model.config.key_layer);
    if windowing.context_len > model.config.context_len {
        return Err(invalid(format!(
            "key window {} exceeds model context {}",
            windowing.context_len, model.config.context_len
        )));
    }
    let keys = compute_keys(model, &seq.ids, layer, windowing)?;
    let source = seq.source.id();
    let meta = DatastoreMeta {
        model_hash: model.fingerprint(),
        vocab_hash: model.vocab_hash,
        corpus_hash: seq.fingerprint(),
        layer: layer as u32,
        metric: Metric::SquaredL2,
        vocab_size: model.config.vocab_size as u32,
        windowing,
    };
    let positions = (1..seq.len())
        .map(|t| Provenance {
            source,
            offset: t as u64,
        })
        .collect();
    Datastore::from_parts(meta, model.config.d_model, keys, seq.ids[1..].to_vec(), positions)
}

impl Datastore {
    pub fn from_parts(
        meta: DatastoreMeta,
        dim: usize,
        keys: Vec<f32>,
        values: Vec<u32>,
        positions: Vec<Provenance>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("key dimension must be positive"));
        }
        if keys.len() != values.len() * dim || positions.len() != values.len() {
            return Err(invalid("keys, values and positions disagree in length"));
        }
        if let Some(v) = values.iter().find(|&&v| v >= meta.vocab_size) {
            return Err(invalid(format!("value {v} outside vocabulary")));
        }
        if keys.iter().any(|k| !k.is_finite()) {
            return Err(invalid("non-finite key"));
        }
        let norms: Vec<f64> = keys
            .chunks_exact(dim)
            .map(|k| k.iter().map(|&x| f64::from(x) * f64::from(x)).sum())
            .collect();
        let max_norm = norms.iter().fold(0.0f64, |m, &n| m.max(n)).sqrt();
        let mut index = HashMap::with_capacity(positions.len());
        for (i, p) in positions.iter().enumerate() {
            if index.insert(*p, i).is_some() {
                return Err(invalid(format!("duplicate provenance {p:?}")));
            }
        }
        Ok(Datastore {
            meta,
            dim,
            keys,
            values,
            positions,
            norms,
            max_norm,
            index,
        })
    }

    pub fn meta(&self) -> &DatastoreMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn positions(&self) -> &[Provenance] {
        &self.positions
    }

    pub fn index_of(&self, p: &Provenance) -> Option<usize> {
        self.index.get(p).copied()
    }

    /// Content hash over metadata and all entries.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Hasher::new();
        h.update(&self.payload_meta());
        h.update_f32s(&self.keys);
        for v in &self.values {
            h.update(&v.to_le_bytes());
        }
        for p in &self.positions {
            h.update(&p.source.to_le_bytes());
            h.update(&p.offset.to_le_bytes());
        }
        h.finish()
    }

    /// Errors unless keys from `model` are comparable with the stored keys.
    pub fn check_model(&self, model: &LanguageModel) -> Result<()> {
        if model.vocab_hash != self.meta.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.meta.vocab_hash,
                found: model.vocab_hash,
            });
        }
        if model.fingerprint() != self.meta.model_hash {
            return Err(Error::Incompatible(format!(
                "datastore keys come from model {:016x}, not {:016x}",
                self.meta.model_hash,
                model.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn search(
        &self,
        query: &[f32],
        k: usize,
        exclude: Option<Provenance>,
    ) -> Result<NeighborList> {
        Ok(self.search_batch(query, k, &[exclude])?.pop().unwrap())
    }

    /// Exact search for `excludes.len()` row-major queries.
    ///
    /// Distances are screened with a single-precision inner-product
    /// expansion, then every candidate that could belong to the top `k`
    /// under a rounding-error bound is re-scored with [`squared_l2`].
    pub fn search_batch(
        &self,
        queries: &[f32],
        k: usize,
        excludes: &[Option<Provenance>],
    ) -> Result<Vec<NeighborList>> {
        let nq = excludes.len();
        if k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if queries.len() != nq * self.dim {
            return Err(invalid(format!(
                "query block has {} values, expected {} x {}",
                queries.len(),
                nq,
                self.dim
            )));
        }
        if queries.iter().any(|q| !q.is_finite()) {
            return Err(invalid("non-finite query"));
        }
        let mut out = Vec::with_capacity(nq);
        for q0 in (0..nq).step_by(QUERY_BLOCK) {
            let nb = QUERY_BLOCK.min(nq - q0);
            let block = &queries[q0 * self.dim..(q0 + nb) * self.dim];
            out.extend(self.search_block(block, nb, k, &excludes[q0..q0 + nb]));
        }
        Ok(out)
    }

    fn search_block(
        &self,
        queries: &[f32],
        nb: usize,
        k: usize,
        excludes: &[Option<Provenance>],
    ) -> Vec<NeighborList> {
        let d = self.dim;
        let n = self.len();
        let skip: Vec<Option<usize>> = excludes
            .iter()
            .map(|e| e.and_then(|p| self.index_of(&p)))
            .collect();
        // Worst-case rounding of the f32 dot product, doubled for the
        // expansion, plus a margin for the f64 terms.
        let u = f64::from(f32::EPSILON) / 2.0;
        let gamma = (d as f64 + 2.0) * u / (1.0 - (d as f64 + 2.0) * u);
        let bounds: Vec<f64> = queries
            .chunks_exact(d)
            .map(|q| {
                let qn = q.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                let kn = self.max_norm;
                2.0 * gamma * (kn * kn + 2.0 * qn * kn) + 1e-12 * (qn + kn).powi(2) + 1e-30
            })
            .collect();

        let mut states: Vec<QueryState> = (0..nb).map(|_| QueryState::new(k)).collect();
        let mut dots = vec![0.0f32; nb * KEY_BLOCK];
        let qm = MatRef::new(queries, nb, d);
        for k0 in (0..n).step_by(KEY_BLOCK) {
            let kb = KEY_BLOCK.min(n - k0);
            let km = MatRef::new(&self.keys[k0 * d..(k0 + kb) * d], kb, d);
            let dots = &mut dots[..nb * kb];
            gemm(qm, km.t(), dots, 1.0, 0.0);
            for (i, st) in states.iter_mut().enumerate() {
                let row = &dots[i * kb..(i + 1) * kb];
                let norms = &self.norms[k0..k0 + kb];
                let margin = 2.0 * bounds[i];
                for (j, (&dot, &norm)) in row.iter().zip(norms).enumerate() {
                    let approx = norm - 2.0 * f64::from(dot);
                    if approx <= st.threshold(margin) {
                        let idx = k0 + j;
                        if Some(idx) != skip[i] {
                            st.push(approx, idx as u32, margin);
                        }
                    }
                }
            }
        }

        states
            .into_iter()
            .enumerate()
            .map(|(i, st)| {
                let q = &queries[i * d..(i + 1) * d];
                let margin = 2.0 * bounds[i];
                let limit = st.threshold(margin);
                let mut exact: Vec<Neighbor> = st
                    .candidates
                    .into_iter()
                    .filter(|&(a, _)| a <= limit)
                    .map(|(_, idx)| {
                        let idx = idx as usize;
                        Neighbor {
                            index: idx,
                            distance: squared_l2(q, self.key(idx)),
                            value: self.values[idx],
                        }
                    })
                    .collect();
                exact.sort_by(|a, b| {
                    a.distance
                        .total_cmp(&b.distance)
                        .then(a.index.cmp(&b.index))
                });
                exact.truncate(k);
                NeighborList {
                    entries: exact,
                    k,
                    query: excludes[i],
                }
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, &self.to_bytes())
    }

    fn payload_meta(&self) -> Vec<u8> {
        let m = &self.meta;
        let mut w = Writer::new();
        w.u64(m.model_hash);
        w.u64(m.vocab_hash);
        w.u64(m.corpus_hash);
        w.u32(m.layer);
        w.u8(m.metric.id());
        w.u32(m.vocab_size);
        w.u32(m.windowing.context_len as u32);
        w.u32(m.windowing.score_len as u32);
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        w.into_inner()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.payload_meta());
        w.f32s(&self.keys);
        for &v in &self.values {
            w.u32(v);
        }
        for p in &self.positions {
            w.u64(p.source);
            w.u64(p.offset);
        }
        io::seal(MAGIC, VERSION, &w.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "datastore";
        let payload = io::unseal(bytes, MAGIC, VERSION, WHAT)?;
        let mut r = Reader::new(payload, WHAT);
        let model_hash = r.u64()?;
        let vocab_hash = r.u64()?;
        let corpus_hash = r.u64()?;
        let layer = r.u32()?;
        let metric = Metric::from_id(r.u8()?).ok_or_else(|| r.malformed("unknown metric id"))?;
        let vocab_size = r.u32()?;
        let context_len = r.u32()? as usize;
        let score_len = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let n = usize::try_from(r.u64()?).map_err(|_| r.malformed("entry count"))?;
        let keys = r.f32s(n.checked_mul(dim).ok_or_else(|| r.malformed("entry count"))?)?;
        let values = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let positions = (0..n)
            .map(|_| {
                Ok(Provenance {
                    source: r.u64()?,
                    offset: r.u64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let meta = DatastoreMeta {
            model_hash,
            vocab_hash,
            corpus_hash,
            layer,
            metric,
            vocab_size,
            windowing: KeyWindowing {
                context_len,
                score_len,
            },
        };
        Datastore::from_parts(meta, dim, keys, values, positions).map_err(|e| Error::Malformed {
            what: WHAT,
            detail: e.to_string(),
        })
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Approx(f64);

impl Eq for Approx {}

impl PartialOrd for Approx {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Approx {
    fn cmp(&self, o: &Self) -> Ordering {
        self.0.total_cmp(&o.0)
    }
}

/// Running screen for one query: the `k` smallest approximate distances
/// seen so far and every entry within the error margin of them.
struct QueryState {
    k: usize,
    best: BinaryHeap<Approx>,
    candidates: Vec<(f64, u32)>,
    prune_at: usize,
}

impl QueryState {
    fn new(k: usize) -> Self {
        QueryState {
            k,
            best: BinaryHeap::with_capacity(k + 1),
            candidates: Vec::new(),
            prune_at: (8 * k).max(256),
        }
    }

    #[inline]
    fn threshold(&self, margin: f64) -> f64 {
        if self.best.len() < self.k {
            f64::INFINITY
        } else {
            self.best.peek().unwrap().0 + margin
        }
    }

    fn push(&mut self, approx: f64, idx: u32, margin: f64) {
        self.best.push(Approx(approx));
        if self.best.len() > self.k {
            self.best.pop();
        }
        self.candidates.push((approx, idx));
        if self.candidates.len() >= self.prune_at {
            let limit = self.threshold(margin);
            self.candidates.retain(|&(a, _)| a <= limit);
            self.prune_at = (2 * self.candidates.len()).max(self.prune_at);
        }
    }
}
