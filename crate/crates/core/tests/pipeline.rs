use memdec::corpus::{make_windows, Source, Split, TokenMode, TokenSeq, Vocabulary};
use memdec::datastore::{build_datastore, squared_l2, Datastore, KeyWindowing, Provenance};
use memdec::distribution::{cache_distributions, knn_distribution, sparsity_stats};
use memdec::eval::{
    score_positions, sliding_window_ppl, token_case_study, tune_alpha, Scorer,
};
use memdec::lm::{LanguageModel, ModelConfig};
use memdec::training::{train_lm, train_memdec, LossKind, TrainConfig};

const TEXT: &str = "the zephyrin assay was calibrated at 40 mg per litre. \
    the old farmer walked to the market. zephyrin binds the kappa-7 receptor. \
    the young child found the green boat near the river. ";

fn vocab() -> Vocabulary {
    Vocabulary::build(TEXT, TokenMode::Char, 256).unwrap()
}

fn seq(v: &Vocabulary, n: usize, split: Split) -> TokenSeq {
    let text: String = TEXT.chars().cycle().skip(n / 3).take(n).collect();
    TokenSeq::encode(&text, v, Source::new("toy", split))
}

fn config(v: &Vocabulary) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        context_len: 16,
        vocab_size: v.size(),
        key_layer: 2,
    }
}

fn trained(v: &Vocabulary, steps: usize) -> LanguageModel {
    let cfg = TrainConfig {
        steps,
        batch_size: 4,
        warmup_steps: 2,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    train_lm(&seq(v, 400, Split::Train), config(v), v.fingerprint(), &cfg, None)
        .unwrap()
        .0
}

/// Full scan with the declared ordering.
fn oracle(store: &Datastore, q: &[f32], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..store.len())
        .filter(|&i| Some(i) != skip)
        .map(|i| (i, squared_l2(q, store.key(i))))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

#[test]
fn datastore_values_follow_the_corpus() {
    let v = vocab();
    let m = trained(&v, 5);
    let s = seq(&v, 50, Split::Train);
    let store = build_datastore(&m, &s, None, KeyWindowing::for_model(&m)).unwrap();
    assert_eq!(store.len(), 49);
    for i in 0..store.len() {
        assert_eq!(store.values()[i], s.ids[i + 1]);
        assert_eq!(store.positions()[i].offset, i as u64 + 1);
    }
    let again = build_datastore(&m, &s, None, KeyWindowing::for_model(&m)).unwrap();
    assert_eq!(store, again);
    assert!(store
        .keys()
        .iter()
        .zip(again.keys())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn keys_match_direct_extraction() {
    // every key equals the hidden state of its own window, recomputed alone
    let v = vocab();
    let m = trained(&v, 5);
    let s = seq(&v, 120, Split::Train);
    let w = KeyWindowing::for_model(&m);
    let store = build_datastore(&m, &s, None, w).unwrap();
    for win in make_windows(s.len(), w.context_len + 1, w.score_len).unwrap() {
        let h = m.extract_hidden(win.inputs(&s.ids), 2).unwrap();
        for t in win.scored_positions() {
            let row = h.row(t - 1 - win.start);
            assert_eq!(store.key(t - 1), row);
        }
    }
}

#[test]
fn training_cache_excludes_own_entry() {
    let v = vocab();
    let m = trained(&v, 20);
    let s = seq(&v, 600, Split::Train);
    let store = build_datastore(&m, &s, None, KeyWindowing::for_model(&m)).unwrap();
    let cache = cache_distributions(&s, &store, &m, 8, 1.0, true).unwrap();
    let source = s.source.id();
    for t in 1..s.len() {
        let own = store
            .index_of(&Provenance {
                source,
                offset: t as u64,
            })
            .unwrap();
        let q = store.key(own);
        let got = store
            .search(q, 8, Some(store.positions()[own]))
            .unwrap();
        assert!(got.entries.iter().all(|n| n.index != own));
        let want = oracle(&store, q, 8, Some(own));
        let idx: Vec<usize> = got.entries.iter().map(|n| n.index).collect();
        assert_eq!(idx, want.iter().map(|x| x.0).collect::<Vec<_>>(), "position {t}");
        let d = cache.at(t).unwrap();
        assert_eq!(d, &knn_distribution(&got, 1.0).unwrap());
    }
    let st = sparsity_stats(&cache).unwrap();
    assert!(st.mean_support <= 8.0 && st.mean_top1 <= 1.0);
}

#[test]
fn periodic_cache_concentrates() {
    let v = Vocabulary::build("abab", TokenMode::Char, 10).unwrap();
    let text = "ab".repeat(200);
    let s = TokenSeq::encode(&text, &v, Source::new("abab", Split::Train));
    let cfg = ModelConfig {
        vocab_size: v.size(),
        ..config(&v)
    };
    let tc = TrainConfig {
        steps: 40,
        batch_size: 4,
        warmup_steps: 2,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    let (m, _) = train_lm(&s, cfg, v.fingerprint(), &tc, None).unwrap();
    let store = build_datastore(&m, &s, None, KeyWindowing::for_model(&m)).unwrap();
    let cache = cache_distributions(&s, &store, &m, 8, 1.0, true).unwrap();
    let b = v.id("b").unwrap();
    for t in (1..s.len()).filter(|&t| s.ids[t - 1] == v.id("a").unwrap()) {
        assert!(cache.at(t).unwrap().prob(b) > 0.9, "position {t}");
    }
}

#[test]
fn knn_lm_matches_naive_reimplementation() {
    let v = vocab();
    let m = trained(&v, 20);
    let domain = seq(&v, 300, Split::Train);
    let test = seq(&v, 200, Split::Test);
    let store = build_datastore(&m, &domain, None, KeyWindowing::for_model(&m)).unwrap();
    let (k, tau, lambda) = (6, 2.0, 0.25);
    let scorer = Scorer::KnnLm {
        plm: &m,
        store: &store,
        k,
        tau,
        lambda,
    };
    let got = score_positions(&scorer, &test, 16, 8).unwrap();
    let mut want = Vec::new();
    for w in make_windows(test.len(), 17, 8).unwrap() {
        let inputs = w.inputs(&test.ids);
        let (logits, hidden) = m.forward_with_hidden(inputs, 2).unwrap();
        for t in w.scored_positions() {
            let r = t - 1 - w.start;
            let row = logits.row(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x as f64));
            let z: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum();
            let near = oracle(&store, hidden.row(r), k, None);
            let listed = store.search(hidden.row(r), k, None).unwrap();
            assert_eq!(
                listed.entries.iter().map(|n| n.index).collect::<Vec<_>>(),
                near.iter().map(|x| x.0).collect::<Vec<_>>()
            );
            let dmin = near[0].1;
            let wsum: f64 = near.iter().map(|x| (-(x.1 - dmin) / tau).exp()).sum();
            let y = test.ids[t];
            let pk: f64 = near
                .iter()
                .filter(|x| store.values()[x.0] == y)
                .map(|x| (-(x.1 - dmin) / tau).exp() / wsum)
                .sum();
            let pp = (row[y as usize] as f64 - mx).exp() / z;
            want.push((t, (lambda * pk + (1.0 - lambda) * pp).ln()));
        }
    }
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.0, w.0);
        // retrieval probabilities are stored in single precision
        assert!((g.1 - w.1).abs() < 1e-6, "position {}: {} vs {}", g.0, g.1, w.1);
    }
}

#[test]
fn endpoints_and_case_study() {
    let v = vocab();
    let plm = trained(&v, 10);
    let train = seq(&v, 400, Split::Train);
    let store = build_datastore(&plm, &train, None, KeyWindowing::for_model(&plm)).unwrap();
    let cache = cache_distributions(&train, &store, &plm, 8, 1.0, true).unwrap();
    let tc = TrainConfig {
        steps: 10,
        batch_size: 4,
        warmup_steps: 2,
        ..TrainConfig::default()
    };
    let (mem, _) = train_memdec(&train, &cache, config(&v), v.fingerprint(), &tc, None).unwrap();
    let test = seq(&v, 150, Split::Test);

    let base = sliding_window_ppl(&Scorer::Base(&plm), &test, 16, 8).unwrap();
    let r = tune_alpha(&plm, &mem, &test, &[0.0], 16, 8).unwrap();
    assert_eq!(r.best, 0.0);
    assert_eq!(r.points[0].1.nll, base.nll);

    let alone = sliding_window_ppl(&Scorer::Base(&mem), &test, 16, 8).unwrap();
    let full = Scorer::MemdecInterp {
        plm: &plm,
        memdec: &mem,
        alpha: 1.0,
    };
    let one = sliding_window_ppl(&full, &test, 16, 8).unwrap();
    assert!(((one.ppl - alone.ppl) / alone.ppl).abs() < 1e-6);

    let ctx = &test.ids[..20];
    let target = test.ids[20];
    let alpha = 0.6;
    let rows = token_case_study(
        ctx,
        target,
        &[
            Scorer::Base(&plm),
            Scorer::Base(&mem),
            Scorer::MemdecInterp {
                plm: &plm,
                memdec: &mem,
                alpha,
            },
        ],
    )
    .unwrap();
    let expect = alpha * rows[1].probability + (1.0 - alpha) * rows[0].probability;
    assert!((rows[2].probability - expect).abs() < 1e-12);
    assert!(token_case_study(ctx, v.size() as u32, &[Scorer::Base(&plm)]).is_err());
}

#[test]
fn beta_zero_memdec_is_lm_training() {
    let v = vocab();
    let plm = trained(&v, 5);
    let s = seq(&v, 400, Split::Train);
    let store = build_datastore(&plm, &s, None, KeyWindowing::for_model(&plm)).unwrap();
    let cache = cache_distributions(&s, &store, &plm, 8, 1.0, true).unwrap();
    let tc = TrainConfig {
        steps: 15,
        batch_size: 4,
        warmup_steps: 3,
        beta: 0.0,
        loss: LossKind::Hybrid,
        ..TrainConfig::default()
    };
    let (_, a) = train_memdec(&s, &cache, config(&v), v.fingerprint(), &tc, None).unwrap();
    let (_, b) = train_lm(&s, config(&v), v.fingerprint(), &tc, None).unwrap();
    for (x, y) in a.iter().zip(&b) {
        let (lx, ly) = (x.loss.nll(), y.loss.nll());
        assert!((lx - ly).abs() <= 1e-6 * ly.max(1.0), "step {}: {lx} vs {ly}", x.step);
        assert!(x.loss.kl >= 0.0);
    }
}
