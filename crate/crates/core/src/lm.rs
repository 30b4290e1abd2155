//! Decoder-only transformer used as the base model, the memory decoder and
//! the domain-adapted baseline.
//!
//! Architecture: learned token and position embeddings, pre-norm blocks
//! (attention then GELU MLP, both residual), a final layer norm, and a
//! bias-free output head that starts at zero so an untrained model predicts
//! the uniform distribution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{self, Hasher, Reader, Writer};
use crate::tensor::{softmax_f64, Graph, Scalar, Tensor, Var};

const MAGIC: &[u8; 4] = b"MDLM";
const VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Maximum number of input positions.
    pub context_len: usize,
    pub vocab_size: usize,
    /// Layer whose output serves as the datastore key function, 1-based.
    /// `n_layers` selects the final normalized hidden state.
    pub key_layer: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(invalid(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return err("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len == 0 || self.vocab_size == 0 {
            return err("context_len and vocab_size must be positive".into());
        }
        if !(1..=self.n_layers).contains(&self.key_layer) {
            return err(format!(
                "key_layer {} outside [1, {}]",
                self.key_layer, self.n_layers
            ));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of all parameters, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (self.d_model, self.d_ff, self.vocab_size);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w1"), vec![d, ff]),
                (p("mlp.b1"), vec![ff]),
                (p("mlp.w2"), vec![ff, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gamma".to_string(), vec![d]),
            ("ln_f.beta".to_string(), vec![d]),
            ("head".to_string(), vec![d, v]),
        ]);
        out
    }
}

const PER_LAYER: usize = 16;
pub(crate) const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

fn layer_base(l: usize) -> usize {
    2 + PER_LAYER * l
}

/// Indices of the blocks replaced by cross-vocabulary transfer.
pub(crate) fn head_index(cfg: &ModelConfig) -> usize {
    layer_base(cfg.n_layers) + 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Plm,
    Memdec,
    Dapt,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Plm => 0,
            Role::Memdec => 1,
            Role::Dapt => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Role::Plm),
            1 => Some(Role::Memdec),
            2 => Some(Role::Dapt),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Plm => "plm",
            Role::Memdec => "memdec",
            Role::Dapt => "dapt",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub role: Role,
    /// Fingerprint of the vocabulary this model was built for.
    pub vocab_hash: u64,
    /// Free-form provenance stored in the checkpoint.
    pub meta: BTreeMap<String, String>,
    params: Vec<Tensor>,
}

/// Output of a batched forward pass: rows of all sequences stacked in order.
pub struct BatchOutput {
    pub logits: Option<Tensor>,
    pub hidden: Option<Tensor>,
    /// Row offset of each input sequence.
    pub offsets: Vec<usize>,
}

impl LanguageModel {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, role: Role, vocab_hash: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let params = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if name.ends_with("gamma") {
                    vec![1.0; n]
                } else if name == "head" || shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let s = if name.ends_with("wo") || name.ends_with("w2") {
                        resid_scale
                    } else {
                        1.0
                    };
                    (0..n).map(|_| (normal.sample(&mut rng) * s) as f32).collect()
                };
                Tensor::new(shape, data).unwrap()
            })
            .collect();
        Ok(LanguageModel {
            config,
            role,
            vocab_hash,
            meta: BTreeMap::new(),
            params,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        role: Role,
        vocab_hash: u64,
        params: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = config.param_layout();
        if layout.len() != params.len()
            || layout.iter().zip(&params).any(|((_, s), p)| s.as_slice() != p.shape())
        {
            return Err(invalid("parameter shapes do not match model configuration"));
        }
        Ok(LanguageModel {
            config,
            role,
            vocab_hash,
            meta: BTreeMap::new(),
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config.param_layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Hash over configuration and parameter values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Hasher::new();
        h.update(&config_bytes(&self.config));
        h.update(&self.vocab_hash.to_le_bytes());
        for p in &self.params {
            h.update_f32s(p.data());
        }
        h.finish()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(invalid("empty input sequence"));
        }
        if ids.len() > self.config.context_len {
            return Err(invalid(format!(
                "input length {} exceeds context_len {}",
                ids.len(),
                self.config.context_len
            )));
        }
        if let Some(id) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(invalid(format!("token id {id} outside vocabulary")));
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if (1..=self.config.n_layers).contains(&layer) {
            Ok(())
        } else {
            Err(invalid(format!(
                "hidden layer {layer} outside [1, {}]",
                self.config.n_layers
            )))
        }
    }

    /// Forward pass over several sequences at once.
    pub fn forward_batch(
        &self,
        seqs: &[&[u32]],
        hidden_layer: Option<usize>,
        with_logits: bool,
    ) -> Result<BatchOutput> {
        for s in seqs {
            self.check_ids(s)?;
        }
        if let Some(l) = hidden_layer {
            self.check_layer(l)?;
        }
        let mut g = Graph::<f32>::new();
        let vars = bind(&mut g, &self.params, false);
        let out = build_forward(&mut g, &self.config, &vars, seqs, hidden_layer, with_logits);
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut o = 0;
        for s in seqs {
            offsets.push(o);
            o += s.len();
        }
        Ok(BatchOutput {
            logits: out.logits.map(|v| g.value(v).clone()),
            hidden: out.hidden.map(|v| g.value(v).clone()),
            offsets,
        })
    }

    /// Logits `[len, vocab]`; row `t` scores the token following `ids[t]`.
    pub fn forward_logits(&self, ids: &[u32]) -> Result<Tensor> {
        Ok(self.forward_batch(&[ids], None, true)?.logits.unwrap())
    }

    /// Hidden states `[len, d_model]` after `layer` (1-based).
    pub fn extract_hidden(&self, ids: &[u32], layer: usize) -> Result<Tensor> {
        Ok(self.forward_batch(&[ids], Some(layer), false)?.hidden.unwrap())
    }

    pub fn forward_with_hidden(&self, ids: &[u32], layer: usize) -> Result<(Tensor, Tensor)> {
        let out = self.forward_batch(&[ids], Some(layer), true)?;
        Ok((out.logits.unwrap(), out.hidden.unwrap()))
    }

    /// Next-token distribution after `context`; only the trailing
    /// `context_len` tokens are used.
    pub fn next_token_dist(&self, context: &[u32]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(invalid("empty context"));
        }
        let start = context.len().saturating_sub(self.config.context_len);
        let logits = self.forward_logits(&context[start..])?;
        Ok(softmax_f64(logits.row(logits.rows() - 1)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, &self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        for v in config_fields(&self.config) {
            w.u32(v as u32);
        }
        w.u8(self.role.tag());
        w.u64(self.vocab_hash);
        w.u16(self.meta.len() as u16);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        let names = self.param_names();
        w.u32(self.params.len() as u32);
        for (name, p) in names.iter().zip(&self.params) {
            w.str(name);
            w.u8(p.shape().len() as u8);
            for &d in p.shape() {
                w.u32(d as u32);
            }
            w.f32s(p.data());
        }
        io::seal(MAGIC, VERSION, &w.into_inner())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "checkpoint";
        let payload = io::unseal(bytes, MAGIC, VERSION, WHAT)?;
        let mut r = Reader::new(payload, WHAT);
        let mut f = [0usize; 7];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            n_layers: f[0],
            n_heads: f[1],
            d_model: f[2],
            d_ff: f[3],
            context_len: f[4],
            vocab_size: f[5],
            key_layer: f[6],
        };
        config.validate().map_err(|e| r.malformed(&e.to_string()))?;
        let role = Role::from_tag(r.u8()?).ok_or_else(|| r.malformed("unknown role tag"))?;
        let vocab_hash = r.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..r.u16()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let layout = config.param_layout();
        let n = r.u32()? as usize;
        if n != layout.len() {
            return Err(r.malformed("parameter count does not match configuration"));
        }
        let mut params = Vec::with_capacity(n);
        for (name, shape) in &layout {
            if &r.str()? != name {
                return Err(r.malformed(&format!("expected tensor {name}")));
            }
            let ndim = r.u8()? as usize;
            let dims: Vec<usize> = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<_>>()?;
            if &dims != shape {
                return Err(r.malformed(&format!("tensor {name} has shape {dims:?}")));
            }
            let data = r.f32s(dims.iter().product())?;
            params.push(Tensor::new(dims, data)?);
        }
        r.finish()?;
        let mut model = Self::from_parts(config, role, vocab_hash, params)?;
        model.meta = meta;
        Ok(model)
    }

    /// Errors unless `other` shares this model's vocabulary.
    pub fn check_compatible(&self, vocab_hash: u64) -> Result<()> {
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash,
                found: vocab_hash,
            });
        }
        Ok(())
    }
}

fn config_fields(c: &ModelConfig) -> [usize; 7] {
    [
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_ff,
        c.context_len,
        c.vocab_size,
        c.key_layer,
    ]
}

fn config_bytes(c: &ModelConfig) -> Vec<u8> {
    config_fields(c)
        .iter()
        .flat_map(|&v| (v as u64).to_le_bytes())
        .collect()
}

/// Loads parameters into a graph as leaves.
pub(crate) fn bind<S: Scalar>(g: &mut Graph<S>, params: &[Tensor<S>], trainable: bool) -> Vec<Var> {
    params
        .iter()
        .map(|p| {
            if trainable {
                g.param(p.clone())
            } else {
                g.constant(p.clone())
            }
        })
        .collect()
}

pub(crate) struct ForwardVars {
    pub logits: Option<Var>,
    pub hidden: Option<Var>,
}

/// Records the forward computation for stacked sequences.
pub(crate) fn build_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &ModelConfig,
    p: &[Var],
    seqs: &[&[u32]],
    hidden_layer: Option<usize>,
    with_logits: bool,
) -> ForwardVars {
    let ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<u32> = seqs
        .iter()
        .flat_map(|s| (0..s.len() as u32).collect::<Vec<_>>())
        .collect();
    let rows = ids.len();
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    let attn_scale = 1.0 / (dh as f64).sqrt();

    let tok = g.embedding(p[TOK_EMB], &ids);
    let pos = g.embedding(p[POS_EMB], &positions);
    let mut x = g.add(tok, pos);
    let mut hidden = None;

    for l in 0..cfg.n_layers {
        let w = &p[layer_base(l)..layer_base(l) + PER_LAYER];
        let h = g.layer_norm(x, w[0], w[1]);
        let q = g.matmul(h, w[2]);
        let q = g.add_row(q, w[3]);
        let k = g.matmul(h, w[4]);
        let k = g.add_row(k, w[5]);
        let v = g.matmul(h, w[6]);
        let v = g.add_row(v, w[7]);

        let mut parts = Vec::with_capacity(seqs.len() * cfg.n_heads);
        let mut offset = 0;
        for s in seqs {
            let t = s.len();
            for head in 0..cfg.n_heads {
                let c0 = head * dh;
                let qs = g.slice(q, offset, t, c0, dh);
                let ks = g.slice(k, offset, t, c0, dh);
                let vs = g.slice(v, offset, t, c0, dh);
                let scores = g.matmul_nt(qs, ks);
                let scores = g.scale(scores, attn_scale);
                let masked = g.causal_mask(scores);
                let attn = g.softmax(masked);
                let ctx = g.matmul(attn, vs);
                parts.push((ctx, offset, c0));
            }
            offset += t;
        }
        let att = g.assemble(rows, d, &parts);
        let o = g.matmul(att, w[8]);
        let o = g.add_row(o, w[9]);
        x = g.add(x, o);

        let h2 = g.layer_norm(x, w[10], w[11]);
        let f = g.matmul(h2, w[12]);
        let f = g.add_row(f, w[13]);
        let f = g.gelu(f);
        let f = g.matmul(f, w[14]);
        let f = g.add_row(f, w[15]);
        x = g.add(x, f);

        if hidden_layer == Some(l + 1) && l + 1 < cfg.n_layers {
            hidden = Some(x);
        }
    }
    let base = layer_base(cfg.n_layers);
    let fin = g.layer_norm(x, p[base], p[base + 1]);
    if hidden_layer == Some(cfg.n_layers) {
        hidden = Some(fin);
    }
    let logits = with_logits.then(|| g.matmul(fin, p[base + 2]));
    ForwardVars { logits, hidden }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn tiny_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_len: 12,
            vocab_size: vocab,
            key_layer: 2,
        }
    }

    /// Random model with a non-zero head.
    pub fn random_model(vocab: usize, seed: u64) -> LanguageModel {
        let mut m = LanguageModel::new(tiny_config(vocab), Role::Plm, 7, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
        let normal = Normal::new(0.0, 0.3).unwrap();
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        m
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(5);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_config(5);
        c.key_layer = 0;
        assert!(c.validate().is_err());
        c.key_layer = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logits_shape_and_uniform_zero_head() {
        let m = LanguageModel::new(tiny_config(7), Role::Plm, 0, 1).unwrap();
        let ids = [1, 2, 3, 4, 5];
        let logits = m.forward_logits(&ids).unwrap();
        assert_eq!(logits.shape(), [5, 7]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let p = m.next_token_dist(&ids).unwrap();
        assert!(p.iter().all(|&v| v == 1.0 / 7.0));
    }

    #[test]
    fn empty_and_oversized_inputs_rejected() {
        let m = LanguageModel::new(tiny_config(7), Role::Plm, 0, 1).unwrap();
        assert!(m.forward_logits(&[]).is_err());
        assert!(m.forward_logits(&[1; 13]).is_err());
        assert!(m.forward_logits(&[9]).is_err());
        assert!(m.next_token_dist(&[]).is_err());
        assert!(m.extract_hidden(&[1, 2], 0).is_err());
        assert!(m.extract_hidden(&[1, 2], 3).is_err());
    }

    #[test]
    fn causality_every_layer() {
        let m = random_model(9, 3);
        let base: Vec<u32> = vec![1, 4, 2, 8, 3, 3, 7, 5];
        let ref_logits = m.forward_logits(&base).unwrap();
        let ref_h1 = m.extract_hidden(&base, 1).unwrap();
        let ref_h2 = m.extract_hidden(&base, 2).unwrap();
        for t in 0..base.len() {
            let mut ids = base.clone();
            ids[t] = (ids[t] + 1) % 9;
            let l = m.forward_logits(&ids).unwrap();
            let h1 = m.extract_hidden(&ids, 1).unwrap();
            let h2 = m.extract_hidden(&ids, 2).unwrap();
            for r in 0..t {
                assert_eq!(l.row(r), ref_logits.row(r), "logits row {r} changed by token {t}");
                assert_eq!(h1.row(r), ref_h1.row(r));
                assert_eq!(h2.row(r), ref_h2.row(r));
            }
            assert_ne!(l.row(t), ref_logits.row(t));
        }
    }

    #[test]
    fn hidden_is_deterministic_and_layer_specific() {
        let m = random_model(9, 4);
        let ids = [1, 2, 3, 4];
        let a = m.extract_hidden(&ids, 2).unwrap();
        let b = m.extract_hidden(&ids, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [4, 16]);
        assert_ne!(a, m.extract_hidden(&ids, 1).unwrap());
    }

    #[test]
    fn batch_matches_single() {
        let m = random_model(9, 5);
        let a: &[u32] = &[1, 2, 3];
        let b: &[u32] = &[4, 5, 6, 7, 8];
        let out = m.forward_batch(&[a, b], Some(2), true).unwrap();
        let la = m.forward_logits(a).unwrap();
        let lb = m.forward_logits(b).unwrap();
        let logits = out.logits.unwrap();
        for r in 0..3 {
            assert_eq!(logits.row(r), la.row(r));
        }
        for r in 0..5 {
            assert_eq!(logits.row(3 + r), lb.row(r));
        }
    }

    #[test]
    fn next_token_dist_sums_to_one() {
        let m = random_model(9, 6);
        let p = m.next_token_dist(&[3, 1, 4, 1, 5]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut m = random_model(9, 7);
        m.meta.insert("beta".into(), "0.5".into());
        let bytes = m.to_bytes();
        let back = LanguageModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        let ids = [1, 2, 3, 4, 5];
        assert_eq!(
            back.forward_logits(&ids).unwrap(),
            m.forward_logits(&ids).unwrap()
        );
        assert_eq!(back.fingerprint(), m.fingerprint());

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(
            LanguageModel::from_bytes(&bad),
            Err(Error::Checksum { .. })
        ));
        assert!(matches!(
            LanguageModel::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Truncated { .. })
        ));
    }
}
