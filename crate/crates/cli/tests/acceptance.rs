//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
//! a failure status if any criterion fails.
//!
//! Criteria 4, 5 and 7 to 10 share one end-to-end run of the `memdec` binary
//! over the bundled corpora with `configs/toy.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use memdec::corpus::{Source, Split, TokenMode, TokenSeq, Vocabulary};
use memdec::datastore::{
    build_datastore, Datastore, DatastoreMeta, KeyWindowing, Metric, Neighbor, NeighborList,
    Provenance,
};
use memdec::distribution::{cache_distributions, knn_distribution, DistCache, NORM_TOL};
use memdec::lm::{LanguageModel, ModelConfig, Role};
use memdec::tensor::{check_all_ops, SparseRow};
use memdec::training::{check_model_gradients, train_lm, train_memdec, LossKind, TrainConfig};
use memdec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// Seed for every randomized check in this suite.
const SEED: u64 = 20_250_101;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn memdec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memdec"))
        .args(args)
        .output()
        .expect("spawning memdec")
}

fn read_jsonl(path: &Path) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| format!("{}: {e}", path.display())))
        .collect()
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Perplexity per scorer kind from an `eval.jsonl`.
fn eval_ppl(dir: &Path) -> Result<BTreeMap<String, f64>, String> {
    read_jsonl(&dir.join("eval.jsonl"))?
        .iter()
        .map(|r| {
            let kind = r["kind"].as_str().ok_or("eval row without kind")?.to_string();
            let ppl = r["ppl"].as_f64().ok_or("eval row without ppl")?;
            Ok((kind, ppl))
        })
        .collect()
}

/// Artifacts and measurements of the end-to-end run.
struct Run {
    dir: PathBuf,
    failure: Option<String>,
    /// train-lm through eval.
    pipeline_time: Duration,
    eval: BTreeMap<String, f64>,
    alpha_zero: BTreeMap<String, f64>,
    lambda_zero: BTreeMap<String, f64>,
    bench_stdout: String,
}

fn end_to_end(dir: &Path) -> Run {
    let config = root().join("configs/toy.toml");
    let config = config.to_str().unwrap();
    let out = dir.to_str().unwrap();
    let mut run = Run {
        dir: dir.to_path_buf(),
        failure: None,
        pipeline_time: Duration::ZERO,
        eval: BTreeMap::new(),
        alpha_zero: BTreeMap::new(),
        lambda_zero: BTreeMap::new(),
        bench_stdout: String::new(),
    };
    let step = |args: &[&str]| -> Result<String, String> {
        let mut full = vec![args[0], "--config", config, "--out", out];
        full.extend_from_slice(&args[1..]);
        let t = Instant::now();
        let o = memdec(&full);
        eprintln!("  {} finished in {:.1} s", full.join(" "), t.elapsed().as_secs_f64());
        if o.status.success() {
            Ok(String::from_utf8_lossy(&o.stdout).into_owned())
        } else {
            Err(format!(
                "`memdec {}` failed ({}): {}",
                args.join(" "),
                o.status,
                String::from_utf8_lossy(&o.stderr)
            ))
        }
    };
    let result = (|| -> Result<(), String> {
        let start = Instant::now();
        for s in ["train-lm", "build-datastore", "cache-dists", "train-memdec", "tune-alpha", "eval"] {
            step(&[s])?;
        }
        run.pipeline_time = start.elapsed();
        run.eval = eval_ppl(dir)?;
        step(&["eval", "--alpha", "0", "--scorer", "memdec-interp"])?;
        run.alpha_zero = eval_ppl(dir)?;
        step(&["eval", "--lambda", "0", "--scorer", "knn-lm"])?;
        run.lambda_zero = eval_ppl(dir)?;
        step(&["train-dapt"])?;
        step(&["tune-alpha"])?;
        step(&["eval", "--scorer", "base", "--scorer", "dapt-interp", "--scorer", "memdec-interp"])?;
        run.bench_stdout = step(&["bench"])?;
        step(&["analyze-sparsity"])?;
        step(&["transfer-vocab"])?;
        step(&["ablate"])?;
        let (context, target) = rare_continuation()?;
        step(&["case-study", "--context", &context, "--target", &target])?;
        Ok(())
    })();
    run.failure = result.err();
    run
}

/// A context ending right before the receptor name of a rare term, with
/// the receptor's first character, as it appears in the domain corpus.
fn rare_continuation() -> Result<(String, String), String> {
    let text = std::fs::read_to_string(root().join("data/domain/train.txt")).map_err(|e| e.to_string())?;
    let term = memdec::synth::RARE_TERMS[0];
    let context = format!("{term} binds the ");
    let at = text.find(&context).ok_or(format!("`{context}` not in the domain corpus"))?;
    let target = text[at + context.len()..].chars().next().ok_or("corpus ends early")?;
    Ok((context, target.to_string()))
}

fn needs(run: &Run) -> Result<(), String> {
    match &run.failure {
        Some(f) => Err(format!("end-to-end run failed: {f}")),
        None => Ok(()),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let ops = check_all_ops().map_err(|e| e.to_string())?;
    let (worst_op, worst) = ops
        .iter()
        .map(|(n, r)| (*n, r.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure!(worst < 1e-3, "op {worst_op}: max relative error {worst:.3e}");

    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        d_ff: 64,
        context_len: 8,
        vocab_size: 11,
        key_layer: 2,
    };
    let model = LanguageModel::new(cfg, Role::Memdec, 0, SEED).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let spans: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..9).map(|_| rng.random_range(0..11)).collect())
        .collect();
    let span_refs: Vec<&[u32]> = spans.iter().map(Vec::as_slice).collect();
    let supervision: Vec<Option<SparseRow>> = (0..16)
        .map(|i| {
            (i % 4 != 3).then(|| {
                let a = rng.random_range(0..11u32);
                let b = (a + 1 + rng.random_range(0..10u32)) % 11;
                let p = rng.random_range(0.1..0.9);
                SparseRow { entries: vec![(a, p), (b, 1.0 - p)] }
            })
        })
        .collect();
    let rep = check_model_gradients(&model, &span_refs, &supervision, LossKind::Hybrid, 0.5, 1e-5, usize::MAX, SEED)
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(
        rep.max_rel_error < 1e-3,
        "hybrid objective: max relative error {:.3e} at {:?}",
        rep.max_rel_error,
        rep.worst
    );
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "{} ops worst {worst:.2e} ({worst_op}); full objective {:.2e} over all {} coordinates; {secs:.1} s",
        ops.len(),
        rep.max_rel_error,
        rep.checked
    ))
}

fn random_store(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Datastore {
    let mut keys: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    // exact duplicates exercise the index tie-break
    for i in (100..n).step_by(97) {
        let (a, b) = keys.split_at_mut(i * dim);
        b[..dim].copy_from_slice(&a[(i - 1) * dim..]);
    }
    let meta = DatastoreMeta {
        model_hash: 0,
        vocab_hash: 0,
        corpus_hash: 0,
        layer: 1,
        metric: Metric::SquaredL2,
        vocab_size: 50,
        windowing: KeyWindowing {
            context_len: 8,
            score_len: 4,
        },
    };
    let values = (0..n).map(|_| rng.random_range(0..50)).collect();
    let positions = (0..n)
        .map(|i| Provenance {
            source: 1,
            offset: i as u64 + 1,
        })
        .collect();
    Datastore::from_parts(meta, dim, keys, values, positions).unwrap()
}

/// Full scan, full sort: ascending distance, then ascending index.
fn naive_knn(store: &Datastore, q: &[f32], k: usize, skip: Option<usize>) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = (0..store.len())
        .filter(|&i| Some(i) != skip)
        .map(|i| {
            let d = q
                .iter()
                .zip(store.key(i))
                .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                .sum();
            (d, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|x| x.1).collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (n, dim, k) = (10_000, 32, 32);
    let store = random_store(n, dim, &mut rng);
    let mut compared = 0;
    for qi in 0..100 {
        // half fresh vectors, half stored keys (including duplicated ones)
        let own = rng.random_range(0..n);
        let q: Vec<f32> = if qi % 2 == 0 {
            (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()
        } else {
            store.key(own).to_vec()
        };
        for exclude in [false, true] {
            let ex = exclude.then(|| store.positions()[own]);
            let got: Vec<usize> = store
                .search(&q, k, ex)
                .map_err(|e| e.to_string())?
                .entries
                .iter()
                .map(|nb| nb.index)
                .collect();
            let want = naive_knn(&store, &q, k, exclude.then_some(own));
            ensure!(got == want, "query {qi} (exclusion {exclude}): {got:?} vs {want:?}");
            compared += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1} s");
    Ok(format!("{compared} neighbor lists identical to the full sort, {n} entries; {secs:.1} s"))
}

/// Softmax over negative scaled distances, summed per value, via log-sum-exp.
fn brute_distribution(list: &NeighborList, tau: f64) -> BTreeMap<u32, f64> {
    let logits: Vec<f64> = list.entries.iter().map(|n| -n.distance / tau).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let mut out = BTreeMap::new();
    for (n, l) in list.entries.iter().zip(&logits) {
        *out.entry(n.value).or_insert(0.0) += (l - m).exp() / z;
    }
    out
}

fn criterion_3(run: &Run) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = 0.0f64;
    let mut lists = 0;
    for tau in [0.1, 1.0, 13.0] {
        for _ in 0..200 {
            let k = rng.random_range(1..=32);
            let mut entries: Vec<Neighbor> = (0..k)
                .map(|i| Neighbor {
                    index: i,
                    distance: rng.random_range(0.0..40.0),
                    value: rng.random_range(0..12),
                })
                .collect();
            entries.sort_by(|a, b| a.distance.total_cmp(&b.distance));
            let list = NeighborList {
                entries,
                k,
                query: None,
            };
            let got = knn_distribution(&list, tau).map_err(|e| e.to_string())?;
            let want = brute_distribution(&list, tau);
            for v in 0..12 {
                let d = (got.prob(v) - want.get(&v).copied().unwrap_or(0.0)).abs();
                worst = worst.max(d);
            }
            lists += 1;
        }
    }
    ensure!(worst <= 1e-6, "max deviation {worst:.3e}");

    needs(run)?;
    let cache = DistCache::load(&run.dir.join("cache.mddc")).map_err(|e| e.to_string())?;
    let k = cache.meta.k as usize;
    let mut checked = 0;
    let mut worst_norm = 0.0f64;
    for d in cache.entries.iter().flatten() {
        let mass: f64 = d.support().iter().map(|&(_, p)| f64::from(p)).sum();
        worst_norm = worst_norm.max((mass - 1.0).abs());
        ensure!(d.support().len() <= k, "support {} exceeds k = {k}", d.support().len());
        checked += 1;
    }
    ensure!(worst_norm <= NORM_TOL, "cached mass off by {worst_norm:.3e}");
    Ok(format!(
        "{lists} lists over tau 0.1/1/13, max deviation {worst:.2e}; {checked} cached distributions, mass error <= {worst_norm:.2e}, support <= {k}"
    ))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_4(run: &Run) -> Outcome {
    needs(run)?;
    let base = run.eval["base"];
    let a0 = *run.alpha_zero.get("memdec-interp").ok_or("no alpha = 0 row")?;
    let l0 = *run.lambda_zero.get("knn-lm").ok_or("no lambda = 0 row")?;
    ensure!(rel(a0, base) <= 1e-6, "alpha = 0: {a0} vs base {base}");
    ensure!(rel(l0, base) <= 1e-6, "lambda = 0: {l0} vs base {base}");
    Ok(format!("base {base:.6}, alpha = 0 {a0:.6}, lambda = 0 {l0:.6}"))
}

fn criterion_5(run: &Run) -> Outcome {
    needs(run)?;
    let base = run.eval["base"];
    let knn = run.eval["knn-lm"];
    let mem = run.eval["memdec-interp"];
    let alpha = read_json(&run.dir.join("alpha.json"))?["memdec"]["best"].clone();
    let domain_chars: usize = ["train", "valid", "test"]
        .iter()
        .map(|s| std::fs::read_to_string(root().join("data/domain").join(format!("{s}.txt"))).map_or(0, |t| t.len()))
        .sum();
    let mins = run.pipeline_time.as_secs_f64() / 60.0;
    let gain = |x: f64| 1.0 - x / base;
    ensure!(gain(knn) >= 0.05, "kNN-LM {knn:.4} vs base {base:.4}");
    ensure!(gain(mem) >= 0.05, "memdec-interp {mem:.4} vs base {base:.4}");
    ensure!(mins < 30.0, "pipeline took {mins:.1} min");

    // the rare continuation gains probability, and the mixture is exact
    let rows = read_jsonl(&run.dir.join("case_study.jsonl"))?;
    let p = |name: &str| -> Result<f64, String> {
        rows.iter()
            .find(|r| r["scorer"].as_str().is_some_and(|s| s == name || s.starts_with(&format!("{name}("))))
            .and_then(|r| r["probability"].as_f64())
            .ok_or(format!("case study has no {name} row"))
    };
    let (pb, pm, pi) = (p("base")?, p("memdec")?, p("memdec-interp")?);
    let a = alpha.as_f64().ok_or("alpha.json has no memdec weight")?;
    ensure!(pi > pb, "rare continuation: memdec-interp {pi:.4} vs base {pb:.4}");
    ensure!((pi - (a * pm + (1.0 - a) * pb)).abs() <= 1e-9, "case study mixture {pi} is not {a} * {pm} + {} * {pb}", 1.0 - a);
    let (context, target) = rare_continuation()?;
    Ok(format!(
        "domain {domain_chars} chars; base {base:.4}, kNN-LM {knn:.4} (-{:.1}%), memdec-interp alpha {alpha} {mem:.4} (-{:.1}%); pipeline {mins:.1} min; p({target:?} | {context:?}) base {pb:.4} -> memdec-interp {pi:.4}",
        100.0 * gain(knn),
        100.0 * gain(mem)
    ))
}

fn criterion_6(run: &Run) -> Outcome {
    needs(run)?;
    let store = Datastore::load(&run.dir.join("datastore.mdkv")).map_err(|e| e.to_string())?;
    let cache = DistCache::load(&run.dir.join("cache.mddc")).map_err(|e| e.to_string())?;
    ensure!(cache.meta.exclude_self, "cache built without exclusion");
    let (k, tau) = (cache.meta.k as usize, f64::from(cache.meta.tau));
    let source = store.positions()[0].source;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let picks = rand::seq::index::sample(&mut rng, cache.entries.len(), 1000);
    for i in picks {
        let t = i + 1;
        let own = store
            .index_of(&Provenance {
                source,
                offset: t as u64,
            })
            .ok_or(format!("position {t} missing from the datastore"))?;
        let q = store.key(own);
        let entries: Vec<Neighbor> = naive_knn(&store, q, k, Some(own))
            .into_iter()
            .map(|j| Neighbor {
                index: j,
                distance: memdec::datastore::squared_l2(q, store.key(j)),
                value: store.values()[j],
            })
            .collect();
        let list = NeighborList {
            entries,
            k,
            query: None,
        };
        let want = knn_distribution(&list, tau).map_err(|e| e.to_string())?;
        let got = cache.at(t).ok_or(format!("position {t} has no supervision"))?;
        ensure!(got == &want, "position {t}: cached {:?} vs re-search {:?}", got.support(), want.support());
    }
    Ok(format!("1000 of {} positions agree exactly with a re-search that removes the own entry", cache.entries.len()))
}

fn criterion_7(run: &Run) -> Outcome {
    needs(run)?;
    let rows = read_jsonl(&run.dir.join("bench.jsonl"))?;
    let get = |name: &str, field: &str| -> Result<f64, String> {
        rows.iter()
            .find(|r| r["scorer"] == name && r["mode"] == "sequential")
            .and_then(|r| r[field].as_f64())
            .ok_or(format!("bench has no sequential {name} row"))
    };
    let entries = get("knn-lm", "datastore_entries")?;
    ensure!(entries >= 100_000.0, "datastore has {entries} entries");
    let (b, m, k) = (
        get("base", "mean_us_per_token")?,
        get("memdec-interp", "mean_us_per_token")?,
        get("knn-lm", "mean_us_per_token")?,
    );
    ensure!(b < m && m < k, "latency base {b:.1} us, memdec-interp {m:.1} us, knn-lm {k:.1} us");
    ensure!(
        run.bench_stdout.contains("1.28x") && run.bench_stdout.contains("2.17x"),
        "reference ratios missing from the bench output"
    );
    Ok(format!(
        "{entries} entries; per token base {b:.0} us < memdec-interp {m:.0} us ({:.2}x) < knn-lm {k:.0} us ({:.2}x)",
        m / b,
        k / b
    ))
}

fn criterion_8(run: &Run) -> Outcome {
    // beta = 0 reduces memory decoder training to plain language modeling
    let text = "the zephyrin assay was calibrated at 40 mg per litre. zephyrin binds the kappa-7 receptor. ";
    let v = Vocabulary::build(text, TokenMode::Char, 256).map_err(|e| e.to_string())?;
    let s = TokenSeq::encode(&text.repeat(6), &v, Source::new("toy", Split::Train));
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        context_len: 16,
        vocab_size: v.size(),
        key_layer: 2,
    };
    let tc = TrainConfig {
        steps: 20,
        batch_size: 4,
        warmup_steps: 2,
        beta: 0.0,
        seed: SEED,
        ..TrainConfig::default()
    };
    let (plm, _) = train_lm(&s, cfg.clone(), v.fingerprint(), &tc, None).map_err(|e| e.to_string())?;
    let store = build_datastore(&plm, &s, None, KeyWindowing::for_model(&plm)).map_err(|e| e.to_string())?;
    let cache = cache_distributions(&s, &store, &plm, 8, 1.0, true).map_err(|e| e.to_string())?;
    let (mem, a) = train_memdec(&s, &cache, cfg.clone(), v.fingerprint(), &tc, None).map_err(|e| e.to_string())?;
    let (lm, b) = train_lm(&s, cfg, v.fingerprint(), &tc, None).map_err(|e| e.to_string())?;
    for (x, y) in a.iter().zip(&b) {
        ensure!(
            (x.loss.total - y.loss.total).abs() <= 1e-6 * y.loss.total.max(1.0),
            "beta = 0 step {}: {} vs {}",
            x.step,
            x.loss.total,
            y.loss.total
        );
    }
    ensure!(mem.params() == lm.params(), "beta = 0 final weights differ from LM training");

    needs(run)?;
    let log = read_jsonl(&run.dir.join("memdec.log.jsonl"))?;
    let steps: Vec<&Value> = log.iter().filter(|r| r["kind"] == "step").collect();
    let mut worst = 0.0f64;
    for r in &steps {
        let res = r["identity_residual"].as_f64().ok_or("step without residual")?;
        let kl = r["kl"].as_f64().ok_or("step without kl")?;
        worst = worst.max(res.abs());
        ensure!(res.abs() <= 1e-6, "step {}: identity residual {res:.3e}", r["step"]);
        ensure!(kl >= 0.0, "step {}: KL {kl}", r["step"]);
    }
    ensure!(!steps.is_empty(), "memdec log has no steps");
    let ablation = read_jsonl(&run.dir.join("ablation.jsonl"))?;
    let mut names = Vec::new();
    for r in &ablation {
        let name = r["loss"].as_str().unwrap_or("?").to_string();
        for f in ["final_total", "memdec_valid_ppl", "interp_valid_ppl"] {
            let x = r[f].as_f64().ok_or(format!("{name}: missing {f}"))?;
            ensure!(x.is_finite(), "{name}: {f} = {x}");
        }
        names.push(format!("{name} {:.3}", r["interp_valid_ppl"].as_f64().unwrap()));
    }
    let expected = 1 + LossKind::ABLATIONS.len();
    ensure!(ablation.len() == expected, "ablation table has {} rows, want {expected}", ablation.len());
    Ok(format!(
        "{} logged steps, max residual {worst:.2e}, KL >= 0; beta = 0 matches LM training bit for bit; ablation valid ppl: {}",
        steps.len(),
        names.join(", ")
    ))
}

fn criterion_9(run: &Run) -> Outcome {
    needs(run)?;
    let rows = read_jsonl(&run.dir.join("dapt_comparison.jsonl"))?;
    let r = rows.first().ok_or("empty comparison table")?;
    let f = |k: &str| r[k].as_f64().ok_or(format!("missing {k}"));
    let (b, d, m) = (f("baseline_ppl")?, f("dapt_interp_ppl")?, f("memdec_interp_ppl")?);
    ensure!(d < b, "DAPT-interp {d:.4} does not beat base {b:.4}");
    ensure!(m < b, "memdec-interp {m:.4} does not beat base {b:.4}");
    Ok(format!("baseline {b:.4} | +DAPT-interp {d:.4} | +memdec-interp {m:.4}"))
}

fn criterion_10(run: &Run) -> Outcome {
    needs(run)?;
    let r = read_json(&run.dir.join("transfer.json"))?;
    let f = |k: &str| r[k].as_f64().ok_or(format!("missing {k}"));
    let (t, s) = (f("transferred_ppl")?, f("scratch_ppl")?);
    ensure!(t < s, "transferred {t:.4} vs from scratch {s:.4}");
    Ok(format!(
        "vocabulary {} -> {}, {} steps: transferred {t:.4} < from scratch {s:.4}",
        r["source_vocab"], r["target_vocab"], r["budget_steps"]
    ))
}

fn corrupted(bytes: &[u8]) -> Vec<u8> {
    let mut b = bytes.to_vec();
    let i = b.len() / 2;
    b[i] ^= 0x10;
    b
}

fn criterion_11(run: &Run) -> Outcome {
    needs(run)?;
    let dir = &run.dir;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));

    let store = Datastore::load(&dir.join("datastore.mdkv")).map_err(|e| e.to_string())?;
    let cache = DistCache::load(&dir.join("cache.mddc")).map_err(|e| e.to_string())?;
    let plm = LanguageModel::load(&dir.join("plm.mdlm")).map_err(|e| e.to_string())?;
    store.save(&tmp.path().join("a.mdkv")).map_err(|e| e.to_string())?;
    cache.save(&tmp.path().join("a.mddc")).map_err(|e| e.to_string())?;
    plm.save(&tmp.path().join("a.mdlm")).map_err(|e| e.to_string())?;
    for (orig, copy) in [("datastore.mdkv", "a.mdkv"), ("cache.mddc", "a.mddc"), ("plm.mdlm", "a.mdlm")] {
        ensure!(read(&dir.join(orig))? == read(&tmp.path().join(copy))?, "{orig} does not round-trip bit-identically");
    }

    let checksum = |r: Result<(), Error>, what: &str| -> Result<(), String> {
        match r {
            Err(Error::Checksum { .. }) => Ok(()),
            other => Err(format!("corrupted {what}: expected a checksum error, got {other:?}")),
        }
    };
    checksum(Datastore::from_bytes(&corrupted(&store.to_bytes())).map(drop), "datastore")?;
    checksum(DistCache::from_bytes(&corrupted(&cache.to_bytes())).map(drop), "cache")?;
    checksum(LanguageModel::from_bytes(&corrupted(&plm.to_bytes())).map(drop), "checkpoint")?;

    let mut other = plm.clone();
    other.vocab_hash ^= 1;
    ensure!(
        matches!(store.check_model(&other), Err(Error::VocabMismatch { .. })),
        "datastore accepted a model with another vocabulary"
    );
    ensure!(
        matches!(other.check_compatible(cache.meta.vocab_hash), Err(Error::VocabMismatch { .. })),
        "checkpoint accepted a cache with another vocabulary"
    );

    // the CLI reports the same failures with exit status 3
    let copy = tmp.path().join("run");
    std::fs::create_dir(&copy).map_err(|e| e.to_string())?;
    for f in ["vocab.json", "plm.mdlm", "datastore.mdkv", "cache.mddc"] {
        std::fs::copy(dir.join(f), copy.join(f)).map_err(|e| e.to_string())?;
    }
    std::fs::write(copy.join("cache.mddc"), corrupted(&read(&dir.join("cache.mddc"))?)).map_err(|e| e.to_string())?;
    let config = root().join("configs/toy.toml");
    let o = memdec(&["analyze-sparsity", "--config", config.to_str().unwrap(), "--out", copy.to_str().unwrap()]);
    ensure!(o.status.code() == Some(3), "corrupted cache: exit status {:?}", o.status.code());
    Ok("datastore, cache and checkpoint re-save bit-identically; corruption and vocabulary mismatch rejected (CLI exit 3)".into())
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    eprintln!("acceptance: end-to-end run in {}", tmp.path().display());
    let t = Instant::now();
    let run = end_to_end(tmp.path());
    eprintln!("acceptance: end-to-end run took {:.1} min", t.elapsed().as_secs_f64() / 60.0);

    let checks: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient correctness", Box::new(criterion_1)),
        ("exact search matches full sort", Box::new(criterion_2)),
        ("retrieval distributions", Box::new(|| criterion_3(&run))),
        ("interpolation endpoints via CLI", Box::new(|| criterion_4(&run))),
        ("domain perplexity ordering", Box::new(|| criterion_5(&run))),
        ("self-exclusion in the training cache", Box::new(|| criterion_6(&run))),
        ("latency ordering", Box::new(|| criterion_7(&run))),
        ("loss identities and alternative objectives", Box::new(|| criterion_8(&run))),
        ("DAPT comparison", Box::new(|| criterion_9(&run))),
        ("cross-vocabulary transfer", Box::new(|| criterion_10(&run))),
        ("persistence", Box::new(|| criterion_11(&run))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
