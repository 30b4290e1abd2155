use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use memdec::corpus::{Source, Split, TokenMode, TokenSeq, Vocabulary};
use memdec::datastore::{build_datastore, Datastore, KeyWindowing};
use memdec::distribution::{cache_distributions, sparsity_stats, DistCache};
use memdec::eval::{
    bench_latency, sliding_window_ppl, token_case_study, tune_weight, PplReport, Scorer,
    TuneReport, REFERENCE_OVERHEAD,
};
use memdec::lm::LanguageModel;
use memdec::training::{
    self, epoch_means, LossKind, StepRecord, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Overrides, RunConfig};
use crate::manifest::Manifest;
use crate::report::{write_json, Table};

pub const VOCAB: &str = "vocab.json";
pub const PLM: &str = "plm.mdlm";
pub const DATASTORE: &str = "datastore.mdkv";
pub const CACHE: &str = "cache.mddc";
pub const MEMDEC: &str = "memdec.mdlm";
pub const DAPT: &str = "dapt.mdlm";
pub const ALPHA: &str = "alpha.json";

/// Steps between intermediate checkpoints.
const CHECKPOINT_EVERY: usize = 500;

/// Shared state of one command invocation.
pub struct Ctx {
    pub cfg: RunConfig,
    pub ov: Overrides,
    hash: String,
    command: &'static str,
    manifest: Manifest,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Corpus {
    General,
    Domain,
}

impl Ctx {
    pub fn new(cfg: RunConfig, ov: Overrides, command: &'static str) -> Result<Self> {
        std::fs::create_dir_all(&cfg.paths.out_dir)
            .with_context(|| format!("creating {}", cfg.paths.out_dir.display()))?;
        let manifest = Manifest::open(&cfg.paths.out_dir)?;
        Ok(Ctx {
            hash: cfg.hash(),
            cfg,
            ov,
            command,
            manifest,
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out(name)
    }

    fn record(&mut self, name: &str) -> Result<()> {
        let dir = self.cfg.paths.out_dir.clone();
        self.manifest.add_output(&dir, name, self.command, &self.hash)
    }

    pub fn finish(mut self) -> Result<()> {
        let dir = self.cfg.paths.out_dir.clone();
        self.manifest.save(&dir, self.cfg.manifest.deterministic_clock)
    }

    fn corpus_name(&self, c: Corpus) -> String {
        match c {
            Corpus::General => self.cfg.corpus.general.clone(),
            Corpus::Domain => self.cfg.corpus.domain.clone(),
        }
    }

    fn text(&mut self, c: Corpus, split: Split) -> Result<String> {
        let name = self.corpus_name(c);
        let path = self.cfg.corpus_file(&name, &split.to_string());
        self.manifest.add_input(&format!("{name}/{split}.txt"), &path)?;
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))
    }

    fn seq(&mut self, vocab: &Vocabulary, c: Corpus, split: Split) -> Result<TokenSeq> {
        let text = self.text(c, split)?;
        Ok(TokenSeq::encode(&text, vocab, Source::new(self.corpus_name(c), split)))
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.out(VOCAB)).map_err(|e| missing(e, VOCAB, "train-lm"))
    }

    fn model(&self, name: &str, producer: &str) -> Result<LanguageModel> {
        let m = LanguageModel::load(&self.out(name)).map_err(|e| missing(e, name, producer))?;
        Ok(m)
    }

    fn has(&self, name: &str) -> bool {
        self.out(name).is_file()
    }

    fn ppl(&self, scorer: &Scorer<'_>, seq: &TokenSeq) -> Result<PplReport> {
        Ok(sliding_window_ppl(
            scorer,
            seq,
            self.cfg.eval.context_len,
            self.cfg.eval.score_len,
        )?)
    }

    fn save_model(&mut self, m: &LanguageModel, name: &str) -> Result<()> {
        m.save(&self.out(name))?;
        self.record(name)
    }

    /// Runs `train_fn` with a JSONL log and periodic checkpoints.
    fn train_logged<F>(&mut self, stage: &str, name: &str, cfg: &TrainConfig, train_fn: F) -> Result<(LanguageModel, Vec<StepRecord>)>
    where
        F: FnOnce(training::Observer<'_>) -> memdec::Result<(LanguageModel, Vec<StepRecord>)>,
    {
        let log_name = format!("{stage}.log.jsonl");
        let mut log = BufWriter::new(File::create(self.out(&log_name))?);
        let header = json!({
            "kind": "header",
            "stage": stage,
            "config": cfg,
            "kl_averaging": "per-token",
        });
        writeln!(log, "{header}")?;
        let start = Instant::now();
        let deterministic = self.cfg.manifest.deterministic_clock;
        let ckpt = self.out(name);
        let (loss_kind, beta) = (cfg.loss, cfg.beta);
        let mut io_err: Option<std::io::Error> = None;
        let mut observer = |r: &StepRecord, m: &LanguageModel| -> memdec::Result<()> {
            let wall = if deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
            let rec = json!({
                "kind": "step",
                "step": r.step,
                "epoch": r.epoch,
                "lr": r.lr,
                "grad_norm": r.grad_norm,
                "tokens": r.tokens,
                "total": r.loss.total,
                "kl": r.loss.kl,
                "lm": r.loss.lm,
                "lm_unsupervised": r.loss.lm_unsupervised,
                "ablation": r.loss.ablation,
                "identity_residual": r.loss.identity_residual(loss_kind, beta),
                "wall_time": wall,
            });
            if let Err(e) = writeln!(log, "{rec}") {
                io_err.get_or_insert(e);
            }
            if r.step.is_multiple_of(CHECKPOINT_EVERY) {
                m.save(&ckpt)?;
            }
            Ok(())
        };
        let out = train_fn(&mut observer)?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        log.flush()?;
        drop(log);
        self.record(&log_name)?;
        self.save_model(&out.0, name)?;
        Ok(out)
    }
}

fn missing(e: memdec::Error, name: &str, producer: &str) -> anyhow::Error {
    match e {
        memdec::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            anyhow!("{name} not found in the run directory; run `{producer}` first")
        }
        other => anyhow::Error::new(other).context(format!("loading {name}")),
    }
}

fn summarize_training(stage: &str, log: &[StepRecord], cfg: &TrainConfig) {
    let Some(last) = epoch_means(log).pop() else {
        println!("{stage}: 0 steps");
        return;
    };
    let worst = log
        .iter()
        .map(|r| r.loss.identity_residual(cfg.loss, cfg.beta).abs())
        .fold(0.0, f64::max);
    let b = last.1;
    println!(
        "{stage}: {} steps, {} epochs; last epoch mean total={:.4} kl={:.4} lm={:.4}; max identity residual {:.2e}",
        log.len(),
        last.0,
        b.total,
        b.kl,
        b.lm + b.lm_unsupervised,
        worst
    );
}

pub fn train_lm(ctx: &mut Ctx) -> Result<()> {
    let general = ctx.text(Corpus::General, Split::Train)?;
    let domain = ctx.text(Corpus::Domain, Split::Train)?;
    let c = &ctx.cfg.corpus;
    let vocab = Vocabulary::build(&format!("{general}{domain}"), c.mode, c.max_vocab)?;
    vocab.save(&ctx.out(VOCAB))?;
    ctx.record(VOCAB)?;
    let seq = TokenSeq::encode(&general, &vocab, Source::new(ctx.corpus_name(Corpus::General), Split::Train));
    let mcfg = ctx.cfg.plm.with_vocab(vocab.size());
    let tcfg = ctx.cfg.train.plm.clone();
    let vh = vocab.fingerprint();
    let (plm, log) = ctx.train_logged("plm", PLM, &tcfg, |obs| {
        training::train_lm(&seq, mcfg, vh, &tcfg, Some(obs))
    })?;
    summarize_training("train-lm", &log, &tcfg);
    let valid = ctx.seq(&vocab, Corpus::General, Split::Valid)?;
    let r = ctx.ppl(&Scorer::Base(&plm), &valid)?;
    println!(
        "vocabulary {} tokens; {} parameters; general valid ppl {:.4}",
        vocab.size(),
        plm.param_count(),
        r.ppl
    );
    Ok(())
}

pub fn build_datastore_cmd(ctx: &mut Ctx) -> Result<()> {
    let vocab = ctx.vocab()?;
    let plm = ctx.model(PLM, "train-lm")?;
    let seq = ctx.seq(&vocab, Corpus::Domain, Split::Train)?;
    let store = build_datastore(&plm, &seq, None, KeyWindowing::for_model(&plm))?;
    store.save(&ctx.out(DATASTORE))?;
    ctx.record(DATASTORE)?;
    println!(
        "build-datastore: {} entries, key dim {}, layer {}",
        store.len(),
        store.dim(),
        store.meta().layer
    );
    Ok(())
}

fn load_store(ctx: &Ctx) -> Result<Datastore> {
    Datastore::load(&ctx.out(DATASTORE)).map_err(|e| missing(e, DATASTORE, "build-datastore"))
}

fn load_cache(ctx: &Ctx) -> Result<DistCache> {
    DistCache::load(&ctx.out(CACHE)).map_err(|e| missing(e, CACHE, "cache-dists"))
}

pub fn cache_dists(ctx: &mut Ctx) -> Result<()> {
    let vocab = ctx.vocab()?;
    let plm = ctx.model(PLM, "train-lm")?;
    let store = load_store(ctx)?;
    let seq = ctx.seq(&vocab, Corpus::Domain, Split::Train)?;
    let i = ctx.cfg.interp;
    let cache = cache_distributions(&seq, &store, &plm, i.k, i.tau, true)?;
    cache.save(&ctx.out(CACHE))?;
    ctx.record(CACHE)?;
    let st = sparsity_stats(&cache)?;
    println!(
        "cache-dists: {} positions ({} supervised), k={}, tau={}; mean top-1 {:.4}, mean support {:.3}",
        st.positions, st.supervised, i.k, i.tau, st.mean_top1, st.mean_support
    );
    Ok(())
}

pub fn train_memdec(ctx: &mut Ctx) -> Result<()> {
    let vocab = ctx.vocab()?;
    let cache = load_cache(ctx)?;
    let seq = ctx.seq(&vocab, Corpus::Domain, Split::Train)?;
    let mcfg = ctx.cfg.memdec.with_vocab(vocab.size());
    let tcfg = ctx.cfg.train.memdec.clone();
    let vh = vocab.fingerprint();
    let (_, log) = ctx.train_logged("memdec", MEMDEC, &tcfg, |obs| {
        training::train_memdec(&seq, &cache, mcfg, vh, &tcfg, Some(obs))
    })?;
    summarize_training("train-memdec", &log, &tcfg);
    Ok(())
}

pub fn train_dapt(ctx: &mut Ctx) -> Result<()> {
    let vocab = ctx.vocab()?;
    let plm = ctx.model(PLM, "train-lm")?;
    let seq = ctx.seq(&vocab, Corpus::Domain, Split::Train)?;
    let tcfg = ctx.cfg.train.dapt.clone();
    let (dapt, log) = ctx.train_logged("dapt", DAPT, &tcfg, |obs| {
        training::train_dapt(&plm, &seq, &tcfg, Some(obs))
    })?;
    summarize_training("train-dapt", &log, &tcfg);
    let valid = ctx.seq(&vocab, Corpus::Domain, Split::Valid)?;
    let before = ctx.ppl(&Scorer::Base(&plm), &valid)?;
    let after = ctx.ppl(&Scorer::Dapt(&dapt), &valid)?;
    println!("domain valid ppl: base {:.4}, dapt {:.4}", before.ppl, after.ppl);
    Ok(())
}

#[derive(Serialize)]
struct TransferReport {
    source_vocab: usize,
    target_vocab: usize,
    budget_steps: usize,
    full_steps: usize,
    transferred_ppl: f64,
    scratch_ppl: f64,
}

pub fn transfer_vocab(ctx: &mut Ctx) -> Result<()> {
    let vocab = ctx.vocab()?;
    let memdec = ctx.model(MEMDEC, "train-memdec")?;
    let cache = load_cache(ctx)?;
    let domain_train = ctx.text(Corpus::Domain, Split::Train)?;
    // a tokenizer fitted to the domain alone: different ids and size
    let new_vocab = Vocabulary::build(&domain_train, TokenMode::Char, ctx.cfg.corpus.max_vocab)?;
    if new_vocab.fingerprint() == vocab.fingerprint() {
        bail!("the domain-only vocabulary equals the original; nothing to transfer");
    }
    new_vocab.save(&ctx.out("transfer_vocab.json"))?;
    ctx.record("transfer_vocab.json")?;
    let name = ctx.corpus_name(Corpus::Domain);
    let seq = TokenSeq::encode(&domain_train, &new_vocab, Source::new(name.clone(), Split::Train));
    let old_seq = TokenSeq::encode(&domain_train, &vocab, Source::new(name, Split::Train));
    cache.check_corpus(&old_seq)?;
    let new_cache = cache.remap_vocab(&vocab, &new_vocab, &seq)?;

    let full = ctx.cfg.train.memdec.clone();
    let budget = ((full.steps as f64 * ctx.cfg.transfer.budget_frac).ceil() as usize).max(1);
    let tcfg = TrainConfig {
        steps: budget,
        warmup_steps: full.warmup_steps.min(budget / 10),
        ..full.clone()
    };
    let new_cfg = memdec::lm::ModelConfig {
        vocab_size: new_vocab.size(),
        ..memdec.config.clone()
    };
    let vh = new_vocab.fingerprint();
    let (transferred, _) = ctx.train_logged("transfer", "memdec_transfer.mdlm", &tcfg, |obs| {
        training::transfer_and_train(&memdec, new_cfg.clone(), vh, &seq, &new_cache, &tcfg, Some(obs))
    })?;
    let (scratch, _) = ctx.train_logged("scratch", "memdec_scratch.mdlm", &tcfg, |obs| {
        training::train_memdec(&seq, &new_cache, new_cfg.clone(), vh, &tcfg, Some(obs))
    })?;
    let test_text = ctx.text(Corpus::Domain, Split::Test)?;
    let test = TokenSeq::encode(&test_text, &new_vocab, Source::new(ctx.corpus_name(Corpus::Domain), Split::Test));
    let report = TransferReport {
        source_vocab: vocab.size(),
        target_vocab: new_vocab.size(),
        budget_steps: budget,
        full_steps: full.steps,
        transferred_ppl: ctx.ppl(&Scorer::Base(&transferred), &test)?.ppl,
        scratch_ppl: ctx.ppl(&Scorer::Base(&scratch), &test)?.ppl,
    };
    write_json(&ctx.cfg.paths.out_dir, "transfer.json", &report, &ctx.hash)?;
    ctx.record("transfer.json")?;
    println!(
        "transfer-vocab: vocabulary {} -> {}, {} of {} steps; domain test ppl transferred {:.4}, from scratch {:.4}",
        report.source_vocab,
        report.target_vocab,
        budget,
        full.steps,
        report.transferred_ppl,
        report.scratch_ppl
    );
    Ok(())
}

/// Tuned weights as written by `tune-alpha`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Tuned {
    pub memdec: Option<f64>,
    pub dapt: Option<f64>,
}

fn tuned(ctx: &Ctx) -> Result<Tuned> {
    if !ctx.has(ALPHA) {
        return Ok(Tuned::default());
    }
    let v: Value = serde_json::from_str(&std::fs::read_to_string(ctx.out(ALPHA))?)?;
    Ok(Tuned {
        memdec: v["memdec"]["best"].as_f64(),
        dapt: v["dapt"]["best"].as_f64(),
    })
}

fn tune_table(t: &mut Table, family: &str, r: &TuneReport) {
    for (w, p) in &r.points {
        t.push(vec![
            json!(family),
            json!(w),
            json!(p.ppl),
            json!(if *w == r.best { "best" } else { "" }),
        ]);
    }
}

pub fn tune_alpha(ctx: &mut Ctx) -> Result<()> {
    let vocab = ctx.vocab()?;
    let plm = ctx.model(PLM, "train-lm")?;
    let memdec = ctx.model(MEMDEC, "train-memdec")?;
    let valid = ctx.seq(&vocab, Corpus::Domain, Split::Valid)?;
    let grid = ctx.cfg.eval.alpha_grid.clone();
    let (c, s) = (ctx.cfg.eval.context_len, ctx.cfg.eval.score_len);
    let mem = tune_weight(&grid, &valid, c, s, |alpha| Scorer::MemdecInterp {
        plm: &plm,
        memdec: &memdec,
        alpha,
    })?;
    let mut table = Table::new(&["family", "alpha", "valid_ppl", "note"]);
    tune_table(&mut table, "memdec-interp", &mem);
    let mut doc = json!({ "memdec": &mem, "grid": &grid });
    if ctx.has(DAPT) {
        let dapt = ctx.model(DAPT, "train-dapt")?;
        let d = tune_weight(&grid, &valid, c, s, |alpha| Scorer::DaptInterp {
            plm: &plm,
            dapt: &dapt,
            alpha,
        })?;
        tune_table(&mut table, "dapt-interp", &d);
        doc["dapt"] = json!(&d);
    }
    write_json(&ctx.cfg.paths.out_dir, ALPHA, &doc, &ctx.hash)?;
    ctx.record(ALPHA)?;
    print!("{}", table.render());
    println!("tune-alpha: memdec alpha = {}", mem.best);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScorerKind {
    Base,
    KnnLm,
    MemdecInterp,
    Dapt,
    DaptInterp,
}

/// Every loaded component a scorer may need.
struct Components {
    plm: LanguageModel,
    memdec: Option<LanguageModel>,
    dapt: Option<LanguageModel>,
    store: Option<Datastore>,
}

impl Components {
    fn load(ctx: &Ctx, kinds: &[ScorerKind]) -> Result<Self> {
        let need = |k: &[ScorerKind]| kinds.iter().any(|x| k.contains(x));
        let memdec = need(&[ScorerKind::MemdecInterp])
            .then(|| ctx.model(MEMDEC, "train-memdec"))
            .transpose()?;
        let dapt = need(&[ScorerKind::Dapt, ScorerKind::DaptInterp])
            .then(|| ctx.model(DAPT, "train-dapt"))
            .transpose()?;
        let store = need(&[ScorerKind::KnnLm]).then(|| load_store(ctx)).transpose()?;
        Ok(Components {
            plm: ctx.model(PLM, "train-lm")?,
            memdec,
            dapt,
            store,
        })
    }

    fn scorer(&self, kind: ScorerKind, ctx: &Ctx, t: &Tuned) -> Scorer<'_> {
        let i = &ctx.cfg.interp;
        let weight = |tuned: Option<f64>| ctx.ov.alpha.or(tuned).unwrap_or(i.alpha);
        match kind {
            ScorerKind::Base => Scorer::Base(&self.plm),
            ScorerKind::KnnLm => Scorer::KnnLm {
                plm: &self.plm,
                store: self.store.as_ref().unwrap(),
                k: i.k,
                tau: i.tau,
                lambda: i.lambda,
            },
            ScorerKind::MemdecInterp => Scorer::MemdecInterp {
                plm: &self.plm,
                memdec: self.memdec.as_ref().unwrap(),
                alpha: weight(t.memdec),
            },
            ScorerKind::Dapt => Scorer::Dapt(self.dapt.as_ref().unwrap()),
            ScorerKind::DaptInterp => Scorer::DaptInterp {
                plm: &self.plm,
                dapt: self.dapt.as_ref().unwrap(),
                alpha: weight(t.dapt),
            },
        }
    }
}

fn available(ctx: &Ctx) -> Vec<ScorerKind> {
    let mut k = vec![ScorerKind::Base];
    if ctx.has(DATASTORE) {
        k.push(ScorerKind::KnnLm);
    }
    if ctx.has(MEMDEC) {
        k.push(ScorerKind::MemdecInterp);
    }
    if ctx.has(DAPT) {
        k.extend([ScorerKind::Dapt, ScorerKind::DaptInterp]);
    }
    k
}

fn weight_of(s: &Scorer<'_>) -> Value {
    match *s {
        Scorer::KnnLm { lambda, .. } => json!(lambda),
        Scorer::MemdecInterp { alpha, .. } | Scorer::DaptInterp { alpha, .. } => json!(alpha),
        _ => Value::Null,
    }
}

pub fn eval(ctx: &mut Ctx, kinds: &[ScorerKind], split: Split) -> Result<()> {
    let kinds = if kinds.is_empty() { available(ctx) } else { kinds.to_vec() };
    let vocab = ctx.vocab()?;
    let comp = Components::load(ctx, &kinds)?;
    let t = tuned(ctx)?;
    let seq = ctx.seq(&vocab, Corpus::Domain, split)?;
    let mut table = Table::new(&["scorer", "kind", "weight", "tokens", "nll", "ppl"]);
    let mut by_kind = Vec::new();
    for &k in &kinds {
        let s = comp.scorer(k, ctx, &t);
        let r = ctx.ppl(&s, &seq)?;
        println!("eval {:<44} tokens={} ppl={:.6}", r.scorer, r.tokens, r.ppl);
        table.push(vec![
            json!(r.scorer),
            json!(s.kind()),
            weight_of(&s),
            json!(r.tokens),
            json!(r.nll),
            json!(r.ppl),
        ]);
        by_kind.push((k, r.ppl));
    }
    let files = table.write(&ctx.cfg.paths.out_dir, "eval", &ctx.hash)?;
    for f in files {
        ctx.record(&f)?;
    }
    let get = |k| by_kind.iter().find(|x| x.0 == k).map(|x| x.1);
    if let (Some(b), Some(d), Some(m)) = (
        get(ScorerKind::Base),
        get(ScorerKind::DaptInterp),
        get(ScorerKind::MemdecInterp),
    ) {
        let mut cmp = Table::new(&["base_model", "params", "baseline_ppl", "dapt_interp_ppl", "memdec_interp_ppl"]);
        cmp.push(vec![
            json!("plm"),
            json!(comp.plm.param_count()),
            json!(b),
            json!(d),
            json!(m),
        ]);
        print!("{}", cmp.render());
        for f in cmp.write(&ctx.cfg.paths.out_dir, "dapt_comparison", &ctx.hash)? {
            ctx.record(&f)?;
        }
    }
    Ok(())
}

pub fn bench(ctx: &mut Ctx) -> Result<()> {
    let kinds: Vec<ScorerKind> = available(ctx)
        .into_iter()
        .filter(|k| matches!(k, ScorerKind::Base | ScorerKind::MemdecInterp | ScorerKind::KnnLm))
        .collect();
    let vocab = ctx.vocab()?;
    let comp = Components::load(ctx, &kinds)?;
    let t = tuned(ctx)?;
    let mut seq = ctx.seq(&vocab, Corpus::Domain, Split::Test)?;
    seq.ids.truncate(ctx.cfg.bench.max_tokens);
    // base, memory decoder, kNN-LM
    let mut order = kinds.clone();
    order.sort_by_key(|k| match k {
        ScorerKind::Base => 0,
        ScorerKind::MemdecInterp => 1,
        _ => 2,
    });
    let scorers: Vec<Scorer<'_>> = order.iter().map(|&k| comp.scorer(k, ctx, &t)).collect();
    let b = &ctx.cfg.bench;
    let parallel = b.parallel || workers() > 1;
    let rep = bench_latency(
        &scorers,
        &seq,
        ctx.cfg.eval.context_len,
        ctx.cfg.eval.score_len,
        b.warmup,
        b.repetitions,
        parallel,
    )?;
    let entries = comp.store.as_ref().map_or(0, Datastore::len);
    let params = |s: &str| -> usize {
        let p = comp.plm.param_count();
        match s {
            "memdec-interp" => p + comp.memdec.as_ref().map_or(0, LanguageModel::param_count),
            _ => p,
        }
    };
    let mut table = Table::new(&[
        "scorer",
        "mode",
        "mean_us_per_token",
        "median_us_per_token",
        "tokens_per_second",
        "relative",
        "reference_relative",
        "parameters",
        "datastore_entries",
    ]);
    for r in &rep.rows {
        let reference = REFERENCE_OVERHEAD
            .iter()
            .find(|x| x.0 == r.scorer)
            .map_or(Value::Null, |x| json!(x.1));
        table.push(vec![
            json!(r.scorer),
            json!(r.mode),
            json!(r.mean_us_per_token),
            json!(r.median_us_per_token),
            json!(r.tokens_per_second),
            json!(r.relative),
            reference,
            json!(params(&r.scorer)),
            json!(if r.scorer == "knn-lm" { entries } else { 0 }),
        ]);
    }
    print!("{}", table.render());
    println!(
        "bench: {} tokens x {} repetitions on {}",
        rep.tokens, rep.repetitions, rep.environment
    );
    println!(
        "reference overheads with billion-parameter models (context only): memdec-interp {:.2}x, knn-lm {:.2}x",
        REFERENCE_OVERHEAD[0].1, REFERENCE_OVERHEAD[1].1
    );
    for f in table.write(&ctx.cfg.paths.out_dir, "bench", &ctx.hash)? {
        ctx.record(&f)?;
    }
    Ok(())
}

/// Worker count from `MEMDEC_WORKERS`; more than one enables the threaded
/// memory decoder mode in `bench`.
fn workers() -> usize {
    std::env::var("MEMDEC_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

pub fn analyze_sparsity(ctx: &mut Ctx) -> Result<()> {
    let cache = load_cache(ctx)?;
    let st = sparsity_stats(&cache)?;
    write_json(&ctx.cfg.paths.out_dir, "sparsity.json", &st, &ctx.hash)?;
    ctx.record("sparsity.json")?;
    println!(
        "analyze-sparsity: {} of {} positions supervised; top-1 mean {:.4}, median {:.4}; mean support {:.3} (k = {})",
        st.supervised, st.positions, st.mean_top1, st.median_top1, st.mean_support, cache.meta.k
    );
    let mut t = Table::new(&["support", "count", "share"]);
    for (s, &n) in st.histogram.iter().enumerate().filter(|x| *x.1 > 0) {
        t.push(vec![json!(s), json!(n), json!(n as f64 / st.supervised as f64)]);
    }
    print!("{}", t.render());
    Ok(())
}

pub fn case_study(ctx: &mut Ctx, context: &str, target: &str) -> Result<()> {
    let vocab = ctx.vocab()?;
    let target_id = vocab
        .id(target)
        .ok_or_else(|| anyhow!("target {target:?} is not a vocabulary token"))?;
    let ids = vocab.encode(context);
    let kinds = available(ctx);
    let comp = Components::load(ctx, &kinds)?;
    let t = tuned(ctx)?;
    let mut scorers: Vec<Scorer<'_>> = kinds.iter().map(|&k| comp.scorer(k, ctx, &t)).collect();
    if let Some(m) = &comp.memdec {
        scorers.insert(1, Scorer::Base(m));
    }
    let rows = token_case_study(&ids, target_id, &scorers)?;
    let mut table = Table::new(&["scorer", "probability", "rank"]);
    for (s, r) in scorers.iter().zip(&rows) {
        let name = match s {
            Scorer::Base(m) if m.role == memdec::lm::Role::Memdec => "memdec".to_string(),
            _ => r.scorer.clone(),
        };
        table.push(vec![json!(name), json!(r.probability), json!(r.rank)]);
    }
    println!("case-study: p({target:?} | {context:?})");
    print!("{}", table.render());
    for f in table.write(&ctx.cfg.paths.out_dir, "case_study", &ctx.hash)? {
        ctx.record(&f)?;
    }
    Ok(())
}

pub fn ablate(ctx: &mut Ctx) -> Result<()> {
    let vocab = ctx.vocab()?;
    let plm = ctx.model(PLM, "train-lm")?;
    let cache = load_cache(ctx)?;
    let seq = ctx.seq(&vocab, Corpus::Domain, Split::Train)?;
    let valid = ctx.seq(&vocab, Corpus::Domain, Split::Valid)?;
    let base = ctx.cfg.train.memdec.clone();
    let steps = match ctx.cfg.ablation.steps {
        0 => (base.steps / 5).max(1),
        s => s,
    };
    let alpha = ctx.ov.alpha.or(tuned(ctx)?.memdec).unwrap_or(ctx.cfg.interp.alpha);
    let mcfg = ctx.cfg.memdec.with_vocab(vocab.size());
    let mut table = Table::new(&[
        "loss",
        "steps",
        "final_total",
        "final_kl",
        "final_lm",
        "final_ablation",
        "max_identity_residual",
        "memdec_valid_ppl",
        "interp_valid_ppl",
    ]);
    for kind in std::iter::once(LossKind::Hybrid).chain(LossKind::ABLATIONS) {
        let tcfg = TrainConfig {
            steps,
            warmup_steps: base.warmup_steps.min(steps / 10),
            loss: kind,
            ..base.clone()
        };
        let (m, log) = training::train_memdec(&seq, &cache, mcfg.clone(), vocab.fingerprint(), &tcfg, None)?;
        let last = epoch_means(&log).pop().map(|x| x.1).unwrap_or_default();
        let worst = log
            .iter()
            .map(|r| r.loss.identity_residual(kind, tcfg.beta).abs())
            .fold(0.0, f64::max);
        let alone = ctx.ppl(&Scorer::Base(&m), &valid)?;
        let mixed = ctx.ppl(
            &Scorer::MemdecInterp {
                plm: &plm,
                memdec: &m,
                alpha,
            },
            &valid,
        )?;
        println!("ablate: {kind} done, interp valid ppl {:.4}", mixed.ppl);
        table.push(vec![
            json!(kind.to_string()),
            json!(steps),
            json!(last.total),
            json!(last.kl),
            json!(last.lm + last.lm_unsupervised),
            json!(last.ablation),
            json!(worst),
            json!(alone.ppl),
            json!(mixed.ppl),
        ]);
    }
    print!("{}", table.render());
    for f in table.write(&ctx.cfg.paths.out_dir, "ablation", &ctx.hash)? {
        ctx.record(&f)?;
    }
    Ok(())
}

pub fn synth_corpus(out: &Path, cfg: &memdec::synth::SynthConfig) -> Result<()> {
    let c = memdec::synth::generate(cfg);
    c.write(out)?;
    println!(
        "synth-corpus: general {} / {} / {} chars, domain {} / {} / {} chars under {}",
        c.general.train.len(),
        c.general.valid.len(),
        c.general.test.len(),
        c.domain.train.len(),
        c.domain.valid.len(),
        c.domain.test.len(),
        out.display()
    );
    Ok(())
}
