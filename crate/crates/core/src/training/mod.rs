//! Training loops for the base model, the memory decoder and the
//! domain-adapted baseline, plus cross-vocabulary transfer.

mod loss;
mod optim;

pub use loss::{
    ablation_loss, memdec_loss, position_loss, AblationHyper, LossBreakdown, LossKind,
};
pub use optim::{clip_grad_norm, AdamW, AdamWConfig, Schedule};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::distribution::DistCache;
use crate::error::{invalid, Error, Result};
use crate::lm::{self, LanguageModel, ModelConfig, Role};
use crate::tensor::{finite_diff_check, GradCheckReport, Graph, SparseRow, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Sequences per step.
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub beta: f64,
    pub loss: LossKind,
    pub warmup_steps: usize,
    pub min_lr_frac: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ablation: AblationHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            steps: 1000,
            seed: 0,
            beta: 0.5,
            loss: LossKind::Hybrid,
            warmup_steps: 50,
            min_lr_frac: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            ablation: AblationHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid(format!("beta = {} outside [0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(invalid("min_lr_frac outside [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(invalid("adam betas outside [0, 1)"));
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return Err(invalid("negative optimizer hyperparameter"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            lr: self.lr,
            warmup_steps: self.warmup_steps.min(self.steps),
            total_steps: self.steps,
            min_lr_frac: self.min_lr_frac,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One optimizer step as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    pub loss: LossBreakdown,
}

/// Called after every step with the record and the updated model.
pub type Observer<'a> = &'a mut dyn FnMut(&StepRecord, &LanguageModel) -> Result<()>;

/// A contiguous training span; inputs are `start..end-1`, targets
/// `start+1..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Chunk {
    start: usize,
    end: usize,
}

/// Chunks covering every target position once, with a random phase.
fn epoch_chunks(len: usize, context_len: usize, rng: &mut ChaCha8Rng) -> Vec<Chunk> {
    let phase = rng.random_range(0..context_len);
    let mut out = Vec::new();
    let mut start = 0;
    let mut end = if phase == 0 { context_len } else { phase };
    while start + 1 < len {
        let e = (end + 1).min(len);
        out.push(Chunk { start, end: e });
        start = e - 1;
        end = start + context_len;
    }
    out.shuffle(rng);
    out
}

/// Continues training `model` on `seq`; `cache` supplies retrieval
/// supervision per position.
pub fn train(
    model: &mut LanguageModel,
    seq: &TokenSeq,
    cache: Option<&DistCache>,
    cfg: &TrainConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if seq.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    seq.check_vocab(model.config.vocab_size)?;
    if let Some(c) = cache {
        c.check_corpus(seq)?;
        model.check_compatible(c.meta.vocab_hash)?;
    }
    let supervision: Vec<Option<SparseRow>> = match cache {
        Some(c) => c
            .entries
            .iter()
            .map(|e| e.as_ref().map(SparseRow::from))
            .collect(),
        None => vec![None; seq.len() - 1],
    };

    let ctx = model.config.context_len;
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue: Vec<Chunk> = Vec::new();
    let mut epoch = 0;
    let mut records = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if queue.is_empty() {
                epoch += 1;
                queue = epoch_chunks(seq.len(), ctx, &mut rng);
            }
            batch.push(queue.pop().unwrap());
        }
        let inputs: Vec<&[u32]> = batch
            .iter()
            .map(|c| &seq.ids[c.start..c.end - 1])
            .collect();
        let mut targets = Vec::new();
        let mut sup = Vec::new();
        for c in &batch {
            targets.extend_from_slice(&seq.ids[c.start + 1..c.end]);
            sup.extend_from_slice(&supervision[c.start..c.end - 1]);
        }

        let mut g = Graph::<f32>::new();
        let vars = lm::bind(&mut g, model.params(), true);
        let fwd = lm::build_forward(&mut g, &model.config, &vars, &inputs, None, true);
        let lv = loss::build_loss(
            &mut g,
            fwd.logits.unwrap(),
            &targets,
            &sup,
            cfg.loss,
            cfg.beta,
            &cfg.ablation,
        )?;
        let breakdown = lv.read(&g);
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                loss: breakdown.total,
            });
        }
        g.backward(lv.total)?;
        let mut grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(model.params())
            .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f32]>::to_vec))
            .collect();
        drop(g);
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: step + 1,
                loss: breakdown.total,
            });
        }
        let lr = schedule.lr_at(step);
        opt.step(model.params_mut(), &grads, lr);

        let rec = StepRecord {
            step: step + 1,
            epoch,
            lr,
            grad_norm,
            tokens: targets.len(),
            loss: breakdown,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&rec, model)?;
        }
        records.push(rec);
    }
    Ok(records)
}

/// Finite-difference check of the training objective of `model` in double
/// precision. Each span of `seq` feeds `span[..n-1]` and predicts
/// `span[1..]`; `supervision` holds one entry per predicted position, in
/// span order.
#[allow(clippy::too_many_arguments)]
pub fn check_model_gradients(
    model: &LanguageModel,
    spans: &[&[u32]],
    supervision: &[Option<SparseRow>],
    kind: LossKind,
    beta: f64,
    eps: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let inputs: Vec<&[u32]> = spans.iter().map(|s| &s[..s.len() - 1]).collect();
    for s in &inputs {
        if s.is_empty() || s.len() > model.config.context_len {
            return Err(invalid("span length outside [2, context_len + 1]"));
        }
    }
    let targets: Vec<u32> = spans.iter().flat_map(|s| s[1..].iter().copied()).collect();
    let params: Vec<Tensor<f64>> = model.params().iter().map(Tensor::cast).collect();
    let hyper = AblationHyper::default();
    let cfg = &model.config;
    // the closure cannot return errors, so validate the loss inputs once
    {
        let mut g = Graph::<f64>::new();
        let vars = lm::bind(&mut g, &params, false);
        let fwd = lm::build_forward(&mut g, cfg, &vars, &inputs, None, true);
        loss::build_loss(&mut g, fwd.logits.unwrap(), &targets, supervision, kind, beta, &hyper)?;
    }
    finite_diff_check(&params, eps, n_samples, seed, |g, vars| {
        let fwd = lm::build_forward(g, cfg, vars, &inputs, None, true);
        loss::build_loss(g, fwd.logits.unwrap(), &targets, supervision, kind, beta, &hyper)
            .expect("validated above")
            .total
    })
}

/// Mean of each loss term per epoch, token-weighted.
pub fn epoch_means(records: &[StepRecord]) -> Vec<(usize, LossBreakdown)> {
    let mut out: Vec<(usize, LossBreakdown, f64)> = Vec::new();
    for r in records {
        if out.last().map(|e| e.0) != Some(r.epoch) {
            out.push((r.epoch, LossBreakdown::default(), 0.0));
        }
        let (_, acc, w) = out.last_mut().unwrap();
        let t = r.tokens as f64;
        acc.total += t * r.loss.total;
        acc.kl += t * r.loss.kl;
        acc.lm += t * r.loss.lm;
        acc.lm_unsupervised += t * r.loss.lm_unsupervised;
        if let Some(a) = r.loss.ablation {
            *acc.ablation.get_or_insert(0.0) += t * a;
        }
        *w += t;
    }
    out.into_iter()
        .map(|(e, mut l, w)| {
            l.total /= w;
            l.kl /= w;
            l.lm /= w;
            l.lm_unsupervised /= w;
            l.ablation = l.ablation.map(|a| a / w);
            (e, l)
        })
        .collect()
}

/// Trains a fresh base model with the language-modeling objective.
pub fn train_lm(
    seq: &TokenSeq,
    model_config: ModelConfig,
    vocab_hash: u64,
    cfg: &TrainConfig,
    observer: Option<Observer<'_>>,
) -> Result<(LanguageModel, Vec<StepRecord>)> {
    let mut model = LanguageModel::new(model_config, Role::Plm, vocab_hash, cfg.seed)?;
    let log = train(&mut model, seq, None, cfg, observer)?;
    Ok((model, log))
}

/// Trains a fresh memory decoder against cached retrieval distributions.
pub fn train_memdec(
    seq: &TokenSeq,
    cache: &DistCache,
    model_config: ModelConfig,
    vocab_hash: u64,
    cfg: &TrainConfig,
    observer: Option<Observer<'_>>,
) -> Result<(LanguageModel, Vec<StepRecord>)> {
    let mut model = LanguageModel::new(model_config, Role::Memdec, vocab_hash, cfg.seed)?;
    let log = train(&mut model, seq, Some(cache), cfg, observer)?;
    stamp(&mut model, cache, cfg);
    Ok((model, log))
}

fn stamp(model: &mut LanguageModel, cache: &DistCache, cfg: &TrainConfig) {
    model.meta.insert("cache".into(), format!("{:016x}", cache.fingerprint()));
    model.meta.insert("beta".into(), cfg.beta.to_string());
    model.meta.insert("loss".into(), cfg.loss.to_string());
}

/// Continues LM training of `base` on a domain corpus.
pub fn train_dapt(
    base: &LanguageModel,
    seq: &TokenSeq,
    cfg: &TrainConfig,
    observer: Option<Observer<'_>>,
) -> Result<(LanguageModel, Vec<StepRecord>)> {
    let mut model = base.clone();
    model.role = Role::Dapt;
    let log = train(&mut model, seq, None, cfg, observer)?;
    Ok((model, log))
}

/// Fresh memory decoder for a new vocabulary whose interior weights are
/// copied from `source`. Token embeddings and the output head are
/// re-initialized from `seed`.
pub fn cross_vocab_transfer(
    source: &LanguageModel,
    new_config: ModelConfig,
    vocab_hash: u64,
    seed: u64,
) -> Result<LanguageModel> {
    let mut target = LanguageModel::new(new_config, Role::Memdec, vocab_hash, seed)?;
    let head = lm::head_index(&target.config);
    let src = source.params();
    if src.len() != target.params().len() {
        return Err(invalid("source and target differ in depth"));
    }
    for (i, (t, s)) in target.params_mut().iter_mut().zip(src).enumerate() {
        if i == lm::TOK_EMB || i == head {
            continue;
        }
        if t.shape() != s.shape() {
            return Err(invalid(format!(
                "interior parameter {i} has shape {:?} in the source but {:?} in the target",
                s.shape(),
                t.shape()
            )));
        }
        *t = s.clone();
    }
    target.meta.insert("transferred_from".into(), format!("{:016x}", source.fingerprint()));
    Ok(target)
}

/// Transfer followed by training on the new cache.
pub fn transfer_and_train(
    source: &LanguageModel,
    new_config: ModelConfig,
    vocab_hash: u64,
    seq: &TokenSeq,
    cache: &DistCache,
    cfg: &TrainConfig,
    observer: Option<Observer<'_>>,
) -> Result<(LanguageModel, Vec<StepRecord>)> {
    let mut model = cross_vocab_transfer(source, new_config, vocab_hash, cfg.seed)?;
    let log = train(&mut model, seq, Some(cache), cfg, observer)?;
    stamp(&mut model, cache, cfg);
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Source, Split};

    #[test]
    fn chunks_cover_each_target_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for len in [2usize, 3, 10, 65, 200] {
            for _ in 0..5 {
                let chunks = epoch_chunks(len, 8, &mut rng);
                let mut seen = vec![0; len];
                for c in &chunks {
                    assert!(c.end - c.start - 1 <= 8 && c.end - c.start >= 2);
                    for t in c.start + 1..c.end {
                        seen[t] += 1;
                    }
                }
                assert_eq!(seen[0], 0);
                assert!(seen[1..].iter().all(|&s| s == 1), "{len}: {seen:?}");
            }
        }
    }

    fn periodic(n: usize) -> TokenSeq {
        TokenSeq {
            ids: (0..n).map(|i| 1 + (i % 2) as u32).collect(),
            source: Source::new("abab", Split::Train),
        }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            context_len: 8,
            vocab_size: 3,
            key_layer: 1,
        }
    }

    #[test]
    fn zero_steps_leaves_model_unchanged() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let (m, log) = train_lm(&periodic(40), small(), 0, &cfg, None).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, LanguageModel::new(small(), Role::Plm, 0, cfg.seed).unwrap());
    }

    #[test]
    fn periodic_corpus_is_learned() {
        let cfg = TrainConfig {
            steps: 150,
            batch_size: 4,
            lr: 1e-2,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let (m, log) = train_lm(&periodic(200), small(), 0, &cfg, None).unwrap();
        assert!(log.last().unwrap().loss.total < log[0].loss.total);
        let p = m.next_token_dist(&[1, 2, 1, 2, 1]).unwrap();
        assert!(p[2] > 0.9, "{p:?}");
        // training perplexity approaches 1
        assert!(log.last().unwrap().loss.nll().exp() < 1.2);
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = train_lm(&periodic(60), small(), 0, &cfg, None).unwrap();
        let b = train_lm(&periodic(60), small(), 0, &cfg, None).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = TrainConfig {
            steps: 3,
            lr: 1e38,
            weight_decay: 0.0,
            warmup_steps: 0,
            grad_clip: 0.0,
            ..TrainConfig::default()
        };
        match train_lm(&periodic(60), small(), 0, &cfg, None) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 2),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.len())),
        }
    }

    #[test]
    fn transfer_copies_interior_only() {
        let src = LanguageModel::new(small(), Role::Memdec, 1, 3).unwrap();
        let mut cfg = small();
        cfg.vocab_size = 7;
        let t = cross_vocab_transfer(&src, cfg.clone(), 2, 9).unwrap();
        let head = lm::head_index(&t.config);
        for (i, (a, b)) in t.params().iter().zip(src.params()).enumerate() {
            if i == lm::TOK_EMB || i == head {
                assert_ne!(a.shape(), b.shape());
            } else {
                assert_eq!(a, b);
            }
        }
        cfg.d_model = 8;
        cfg.n_heads = 1;
        assert!(cross_vocab_transfer(&src, cfg, 2, 9).is_err());
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let m = LanguageModel::new(small(), Role::Memdec, 0, 4).unwrap();
        let spans: [&[u32]; 2] = [&[1, 2, 1, 2, 0], &[2, 2, 1, 0]];
        let sup = vec![
            Some(SparseRow { entries: vec![(1, 0.7), (2, 0.3)] }),
            None,
            Some(SparseRow { entries: vec![(2, 1.0)] }),
            Some(SparseRow { entries: vec![(0, 0.5), (1, 0.5)] }),
            None,
            Some(SparseRow { entries: vec![(0, 1.0)] }),
            Some(SparseRow { entries: vec![(2, 0.25), (0, 0.75)] }),
        ];
        let rep = check_model_gradients(&m, &spans, &sup, LossKind::Hybrid, 0.5, 1e-5, 300, 1).unwrap();
        assert_eq!(rep.checked, 300);
        assert!(rep.max_rel_error < 1e-3, "{rep:?}");
        // wrong supervision length is reported, not panicked on
        assert!(check_model_gradients(&m, &spans, &sup[1..], LossKind::Hybrid, 0.5, 1e-5, 1, 1).is_err());
    }
}
