//! Sliding-window perplexity for every scorer, interpolation-weight tuning,
//! latency measurement and single-token case studies.

use std::time::Instant;

use serde::Serialize;

use crate::corpus::{make_windows, TokenSeq, Window};
use crate::datastore::Datastore;
use crate::distribution::{interpolate, interpolate_sparse, knn_distribution};
use crate::error::{invalid, Error, Result};
use crate::lm::LanguageModel;
use crate::tensor::softmax_f64;

/// Windows scored per forward pass.
const EVAL_BATCH: usize = 16;

/// Overheads relative to the base model observed with billion-parameter
/// models; printed next to local measurements for orientation only.
pub const REFERENCE_OVERHEAD: [(&str, f64); 2] = [("memdec-interp", 1.28), ("knn-lm", 2.17)];

/// A way of producing next-token distributions.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    Base(&'a LanguageModel),
    KnnLm {
        plm: &'a LanguageModel,
        store: &'a Datastore,
        k: usize,
        tau: f64,
        lambda: f64,
    },
    MemdecInterp {
        plm: &'a LanguageModel,
        memdec: &'a LanguageModel,
        alpha: f64,
    },
    Dapt(&'a LanguageModel),
    DaptInterp {
        plm: &'a LanguageModel,
        dapt: &'a LanguageModel,
        alpha: f64,
    },
}

fn check_pair(a: &LanguageModel, b: &LanguageModel) -> Result<()> {
    a.check_compatible(b.vocab_hash)?;
    if a.config.vocab_size != b.config.vocab_size {
        return Err(Error::Incompatible(format!(
            "vocabulary sizes differ: {} vs {}",
            a.config.vocab_size, b.config.vocab_size
        )));
    }
    Ok(())
}

fn check_unit(name: &str, w: f64) -> Result<()> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {w} outside [0, 1]")))
    }
}

impl<'a> Scorer<'a> {
    pub fn kind(&self) -> &'static str {
        match self {
            Scorer::Base(_) => "base",
            Scorer::KnnLm { .. } => "knn-lm",
            Scorer::MemdecInterp { .. } => "memdec-interp",
            Scorer::Dapt(_) => "dapt",
            Scorer::DaptInterp { .. } => "dapt-interp",
        }
    }

    /// Kind plus mixing weight.
    pub fn describe(&self) -> String {
        match *self {
            Scorer::KnnLm {
                k, tau, lambda, ..
            } => format!("knn-lm(k={k},tau={tau},lambda={lambda})"),
            Scorer::MemdecInterp { alpha, .. } => format!("memdec-interp(alpha={alpha})"),
            Scorer::DaptInterp { alpha, .. } => format!("dapt-interp(alpha={alpha})"),
            _ => self.kind().to_string(),
        }
    }

    /// Checks weights and that all components share one vocabulary.
    pub fn validate(&self) -> Result<()> {
        match *self {
            Scorer::Base(_) | Scorer::Dapt(_) => Ok(()),
            Scorer::KnnLm {
                plm,
                store,
                k,
                tau,
                lambda,
            } => {
                check_unit("lambda", lambda)?;
                if k == 0 || !(tau > 0.0) {
                    return Err(invalid("k must be positive and tau > 0"));
                }
                store.check_model(plm)
            }
            Scorer::MemdecInterp {
                plm,
                memdec: aux,
                alpha,
            }
            | Scorer::DaptInterp {
                plm,
                dapt: aux,
                alpha,
            } => {
                check_unit("alpha", alpha)?;
                check_pair(plm, aux)
            }
        }
    }

    /// Longest input every component accepts.
    pub fn context_len(&self) -> usize {
        match *self {
            Scorer::Base(m) | Scorer::Dapt(m) | Scorer::KnnLm { plm: m, .. } => {
                m.config.context_len
            }
            Scorer::MemdecInterp {
                plm, memdec: aux, ..
            }
            | Scorer::DaptInterp { plm, dapt: aux, .. } => {
                plm.config.context_len.min(aux.config.context_len)
            }
        }
    }

    pub fn vocab_size(&self) -> usize {
        match *self {
            Scorer::Base(m) | Scorer::Dapt(m) => m.config.vocab_size,
            Scorer::KnnLm { plm, .. }
            | Scorer::MemdecInterp { plm, .. }
            | Scorer::DaptInterp { plm, .. } => plm.config.vocab_size,
        }
    }

    /// Next-token distributions after `rows[i][j]` of `seqs[i]`, flattened
    /// in order.
    pub fn predict(&self, seqs: &[&[u32]], rows: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        if seqs.len() != rows.len() {
            return Err(invalid("one row list per sequence"));
        }
        let dists = |m: &LanguageModel| -> Result<Vec<Vec<f64>>> {
            let out = m.forward_batch(seqs, None, true)?;
            let logits = out.logits.unwrap();
            Ok(rows
                .iter()
                .zip(&out.offsets)
                .flat_map(|(rs, &o)| rs.iter().map(move |&r| o + r))
                .map(|r| softmax_f64(logits.row(r)))
                .collect())
        };
        match *self {
            Scorer::Base(m) | Scorer::Dapt(m) => dists(m),
            Scorer::MemdecInterp {
                plm,
                memdec: aux,
                alpha: w,
            }
            | Scorer::DaptInterp {
                plm,
                dapt: aux,
                alpha: w,
            } => {
                let p = dists(plm)?;
                if w == 0.0 {
                    return Ok(p);
                }
                let q = dists(aux)?;
                p.iter().zip(&q).map(|(p, q)| interpolate(p, q, w)).collect()
            }
            Scorer::KnnLm {
                plm,
                store,
                k,
                tau,
                lambda,
            } => {
                if lambda == 0.0 {
                    return dists(plm);
                }
                let layer = store.meta().layer as usize;
                let out = plm.forward_batch(seqs, Some(layer), true)?;
                let (logits, hidden) = (out.logits.unwrap(), out.hidden.unwrap());
                let flat: Vec<usize> = rows
                    .iter()
                    .zip(&out.offsets)
                    .flat_map(|(rs, &o)| rs.iter().map(move |&r| o + r))
                    .collect();
                let queries: Vec<f32> = flat
                    .iter()
                    .flat_map(|&r| hidden.row(r).iter().copied())
                    .collect();
                let lists = store.search_batch(&queries, k, &vec![None; flat.len()])?;
                flat.iter()
                    .zip(&lists)
                    .map(|(&r, l)| {
                        let p = softmax_f64(logits.row(r));
                        if l.entries.is_empty() {
                            return Ok(p);
                        }
                        interpolate_sparse(&p, &knn_distribution(l, tau)?, lambda)
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PplReport {
    pub scorer: String,
    pub tokens: usize,
    /// Summed negative log-likelihood in nats.
    pub nll: f64,
    pub ppl: f64,
}

fn check_windowing(scorer: &Scorer<'_>, context_len: usize) -> Result<()> {
    if context_len > scorer.context_len() {
        return Err(invalid(format!(
            "evaluation context {context_len} exceeds model context {}",
            scorer.context_len()
        )));
    }
    Ok(())
}

/// Log-probability of every token after the first, as `(position, logp)`,
/// scored with sliding windows.
pub fn score_positions(
    scorer: &Scorer<'_>,
    seq: &TokenSeq,
    context_len: usize,
    score_len: usize,
) -> Result<Vec<(usize, f64)>> {
    scorer.validate()?;
    check_windowing(scorer, context_len)?;
    seq.check_vocab(scorer.vocab_size())?;
    let windows = make_windows(seq.len(), context_len + 1, score_len)?;
    let mut out = Vec::with_capacity(seq.len().saturating_sub(1));
    for batch in windows.chunks(EVAL_BATCH) {
        out.extend(score_windows(scorer, &seq.ids, batch)?);
    }
    Ok(out)
}

fn score_windows(scorer: &Scorer<'_>, ids: &[u32], windows: &[Window]) -> Result<Vec<(usize, f64)>> {
    let inputs: Vec<&[u32]> = windows.iter().map(|w| w.inputs(ids)).collect();
    let rows: Vec<Vec<usize>> = windows
        .iter()
        .map(|w| (w.first_scored_row()..w.len - 1).collect())
        .collect();
    let dists = scorer.predict(&inputs, &rows)?;
    let positions = windows.iter().flat_map(|w| w.scored_positions());
    Ok(positions
        .zip(&dists)
        .map(|(t, p)| (t, p[ids[t] as usize].ln()))
        .collect())
}

/// Perplexity over all tokens after the first.
pub fn sliding_window_ppl(
    scorer: &Scorer<'_>,
    seq: &TokenSeq,
    context_len: usize,
    score_len: usize,
) -> Result<PplReport> {
    let scored = score_positions(scorer, seq, context_len, score_len)?;
    if scored.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let nll: f64 = -scored.iter().map(|&(_, lp)| lp).sum::<f64>();
    Ok(PplReport {
        scorer: scorer.describe(),
        tokens: scored.len(),
        nll,
        ppl: (nll / scored.len() as f64).exp(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TuneReport {
    pub best: f64,
    pub points: Vec<(f64, PplReport)>,
}

/// Evaluates `make(w)` for every weight in `grid` and keeps the lowest
/// perplexity; ties go to the smaller weight.
pub fn tune_weight<'a>(
    grid: &[f64],
    seq: &TokenSeq,
    context_len: usize,
    score_len: usize,
    make: impl Fn(f64) -> Scorer<'a>,
) -> Result<TuneReport> {
    if grid.is_empty() {
        return Err(invalid("empty weight grid"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &w in grid {
        points.push((w, sliding_window_ppl(&make(w), seq, context_len, score_len)?));
    }
    let best = points
        .iter()
        .min_by(|a, b| a.1.ppl.total_cmp(&b.1.ppl).then(a.0.total_cmp(&b.0)))
        .unwrap()
        .0;
    Ok(TuneReport { best, points })
}

/// Tunes the memory decoder weight on a validation sequence.
pub fn tune_alpha(
    plm: &LanguageModel,
    memdec: &LanguageModel,
    valid: &TokenSeq,
    grid: &[f64],
    context_len: usize,
    score_len: usize,
) -> Result<TuneReport> {
    tune_weight(grid, valid, context_len, score_len, |alpha| {
        Scorer::MemdecInterp { plm, memdec, alpha }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMode {
    /// Components run one after another on one thread.
    Sequential,
    /// Base model and memory decoder run on separate threads.
    Parallel,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyRow {
    pub scorer: String,
    pub mode: LatencyMode,
    pub mean_us_per_token: f64,
    pub median_us_per_token: f64,
    pub tokens_per_second: f64,
    /// Median relative to the base scorer.
    pub relative: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    pub tokens: usize,
    pub repetitions: usize,
    pub environment: String,
}

pub fn environment_descriptor() -> String {
    format!(
        "{}-{}, {} logical cpu(s)",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

/// Memory decoder interpolation with both forward passes on their own
/// threads.
fn predict_parallel(
    plm: &LanguageModel,
    memdec: &LanguageModel,
    alpha: f64,
    seqs: &[&[u32]],
    rows: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let (p, q) = std::thread::scope(|s| {
        let h = s.spawn(|| Scorer::Base(memdec).predict(seqs, rows));
        let p = Scorer::Base(plm).predict(seqs, rows);
        (p, h.join().expect("memory decoder thread panicked"))
    });
    let (p, q) = (p?, q?);
    p.iter().zip(&q).map(|(p, q)| interpolate(p, q, alpha)).collect()
}

/// Per-token latency of each scorer over the same windows, one window per
/// call. The first scorer is the reference for relative overheads.
pub fn bench_latency(
    scorers: &[Scorer<'_>],
    seq: &TokenSeq,
    context_len: usize,
    score_len: usize,
    warmup: usize,
    repetitions: usize,
    parallel: bool,
) -> Result<LatencyReport> {
    if scorers.is_empty() || repetitions == 0 {
        return Err(invalid("need at least one scorer and one repetition"));
    }
    let windows = make_windows(seq.len(), context_len + 1, score_len)?;
    let tokens: usize = windows.iter().map(|w| w.scored_positions().len()).sum();
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut variants: Vec<(Scorer<'_>, LatencyMode)> =
        scorers.iter().map(|&s| (s, LatencyMode::Sequential)).collect();
    if parallel {
        variants.extend(
            scorers
                .iter()
                .filter(|s| matches!(s, Scorer::MemdecInterp { .. }))
                .map(|&s| (s, LatencyMode::Parallel)),
        );
    }
    for (s, _) in &variants {
        s.validate()?;
        check_windowing(s, context_len)?;
    }

    let run = |s: &Scorer<'_>, mode: LatencyMode| -> Result<f64> {
        let start = Instant::now();
        for w in &windows {
            let inputs = [w.inputs(&seq.ids)];
            let rows = [(w.first_scored_row()..w.len - 1).collect::<Vec<_>>()];
            let out = match (mode, *s) {
                (LatencyMode::Parallel, Scorer::MemdecInterp { plm, memdec, alpha }) => {
                    predict_parallel(plm, memdec, alpha, &inputs, &rows)?
                }
                _ => s.predict(&inputs, &rows)?,
            };
            std::hint::black_box(out);
        }
        Ok(start.elapsed().as_secs_f64() * 1e6 / tokens as f64)
    };

    let mut rows = Vec::with_capacity(variants.len());
    for (s, mode) in &variants {
        for _ in 0..warmup {
            run(s, *mode)?;
        }
        let mut samples = (0..repetitions)
            .map(|_| run(s, *mode))
            .collect::<Result<Vec<f64>>>()?;
        samples.sort_by(f64::total_cmp);
        let median = if samples.len() % 2 == 1 {
            samples[samples.len() / 2]
        } else {
            0.5 * (samples[samples.len() / 2 - 1] + samples[samples.len() / 2])
        };
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        rows.push(LatencyRow {
            scorer: s.kind().to_string(),
            mode: *mode,
            mean_us_per_token: mean,
            median_us_per_token: median,
            tokens_per_second: 1e6 / median,
            relative: 0.0,
        });
    }
    let base = rows[0].median_us_per_token;
    for r in &mut rows {
        r.relative = r.median_us_per_token / base;
    }
    Ok(LatencyReport {
        rows,
        tokens,
        repetitions,
        environment: environment_descriptor(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseStudyRow {
    pub scorer: String,
    pub probability: f64,
    /// Rank of the target among all tokens, 1 = most likely.
    pub rank: usize,
}

/// Probability each scorer assigns to `target` right after `context`
/// (trailing tokens beyond the context window are dropped).
pub fn token_case_study(
    context: &[u32],
    target: u32,
    scorers: &[Scorer<'_>],
) -> Result<Vec<CaseStudyRow>> {
    if context.is_empty() {
        return Err(invalid("empty context"));
    }
    scorers
        .iter()
        .map(|s| {
            s.validate()?;
            if target as usize >= s.vocab_size() {
                return Err(invalid(format!("target {target} outside vocabulary")));
            }
            let start = context.len().saturating_sub(s.context_len());
            let ctx = &context[start..];
            let p = s.predict(&[ctx], &[vec![ctx.len() - 1]])?.remove(0);
            let pt = p[target as usize];
            Ok(CaseStudyRow {
                scorer: s.describe(),
                probability: pt,
                rank: 1 + p.iter().filter(|&&v| v > pt).count(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Source, Split};
    use crate::datastore::{build_datastore, KeyWindowing};
    use crate::lm::tests::random_model;
    use crate::lm::{ModelConfig, Role};

    fn seq(n: usize, v: u32) -> TokenSeq {
        TokenSeq {
            ids: (0..n as u32).map(|i| (i * 7 + i / 3) % v).collect(),
            source: Source::new("toy", Split::Test),
        }
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 8,
            d_ff: 8,
            context_len: 8,
            vocab_size: 11,
            key_layer: 1,
        };
        let m = LanguageModel::new(cfg, Role::Plm, 0, 0).unwrap();
        let r = sliding_window_ppl(&Scorer::Base(&m), &seq(50, 11), 8, 4).unwrap();
        assert_eq!(r.tokens, 49);
        assert!((r.ppl - 11.0).abs() < 1e-9, "{}", r.ppl);
    }

    #[test]
    fn zero_weight_interpolations_equal_base() {
        let plm = random_model(9, 1);
        let aux = random_model(9, 2);
        let s = seq(60, 9);
        let store = build_datastore(&plm, &s, None, KeyWindowing::for_model(&plm)).unwrap();
        let base = sliding_window_ppl(&Scorer::Base(&plm), &s, 12, 6).unwrap();
        for sc in [
            Scorer::MemdecInterp {
                plm: &plm,
                memdec: &aux,
                alpha: 0.0,
            },
            Scorer::DaptInterp {
                plm: &plm,
                dapt: &aux,
                alpha: 0.0,
            },
            Scorer::KnnLm {
                plm: &plm,
                store: &store,
                k: 4,
                tau: 1.0,
                lambda: 0.0,
            },
        ] {
            let r = sliding_window_ppl(&sc, &s, 12, 6).unwrap();
            assert_eq!(r.nll, base.nll, "{}", sc.describe());
        }
    }

    #[test]
    fn mismatched_components_rejected() {
        let plm = random_model(9, 1);
        let mut other = random_model(9, 2);
        other.vocab_hash = 99;
        let s = seq(30, 9);
        let sc = Scorer::MemdecInterp {
            plm: &plm,
            memdec: &other,
            alpha: 0.5,
        };
        let err = sliding_window_ppl(&sc, &s, 12, 6).unwrap_err();
        assert!(err.is_incompatibility());
        let store = build_datastore(&other, &s, None, KeyWindowing::for_model(&other)).unwrap();
        let sc = Scorer::KnnLm {
            plm: &plm,
            store: &store,
            k: 4,
            tau: 1.0,
            lambda: 0.5,
        };
        assert!(sliding_window_ppl(&sc, &s, 12, 6).unwrap_err().is_incompatibility());
    }

    #[test]
    fn batching_does_not_change_nll() {
        let plm = random_model(9, 4);
        let s = seq(300, 9);
        let one = sliding_window_ppl(&Scorer::Base(&plm), &s, 12, 6).unwrap();
        let per: f64 = -score_positions(&Scorer::Base(&plm), &s, 12, 6)
            .unwrap()
            .iter()
            .rev()
            .map(|x| x.1)
            .sum::<f64>();
        assert!(((one.nll - per) / one.nll).abs() < 1e-9);
    }

    #[test]
    fn tune_prefers_smaller_weight_on_ties() {
        let plm = random_model(9, 1);
        let s = seq(40, 9);
        let r = tune_alpha(&plm, &plm, &s, &[0.9, 0.4, 0.6], 12, 6).unwrap();
        assert_eq!(r.best, 0.4);
        assert_eq!(r.points.len(), 3);
    }

    #[test]
    fn case_study_and_latency_smoke() {
        let plm = random_model(9, 1);
        let aux = random_model(9, 2);
        let sc = [
            Scorer::Base(&plm),
            Scorer::MemdecInterp {
                plm: &plm,
                memdec: &aux,
                alpha: 0.5,
            },
        ];
        let rows = token_case_study(&[1, 2, 3, 4, 5, 6, 7, 8, 1, 2, 3, 4, 5, 6], 3, &sc).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.probability > 0.0 && r.rank >= 1));
        let rep = bench_latency(&sc, &seq(80, 9), 12, 6, 0, 3, true).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert_eq!(rep.rows[0].relative, 1.0);
    }
}
