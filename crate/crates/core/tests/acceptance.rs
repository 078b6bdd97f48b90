//! Acceptance suite: one line per criterion, PASS, FAIL or BLOCKED.
//!
//! Runs as a plain binary (`harness = false`) so the lines appear in
//! `cargo test` output. Criteria that need the GMB NER CSV read it from
//! `TAGFORGE_GMB_CSV` (default `data/ner_dataset.csv`); without it they
//! report BLOCKED plus a clearly labelled synthetic supplement, and do not
//! fail the run.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use tagforge::cli::{self, ExperimentConfig, ModelKind};
use tagforge::corpus::{load_gmb_csv, map_entities, split, Sentence, Token, Vocab};
use tagforge::crf::{self, nll_and_gradient, CrfModel, CrfTrainConfig, CrfTrainData, FeatureSet};
use tagforge::eval::{analyze_curve, confusion_matrix, curve_points, evaluate, flat_f1, Averaging, DEFAULT_PLATEAU_EPS};
use tagforge::numgrad::{grad_check, seeded_rng, GradCheckConfig, ParamStore, Rng, Tape, Tensor, Var, WarmupSchedule};
use tagforge::par;
use tagforge::synth::{synthetic_corpus, to_gmb_csv};
use tagforge::taggers::{
    composite_loss, encoder_layer, init_encoder_layer, lstm_step, train_tagger, BertLikeConfig, BertLikeTagger, BiLstmConfig,
    BiLstmTagger, OptimizerSpec, SeqBatch, SequenceTagger, TaggerError, TrainConfig, TransformerConfig, TransformerTagger,
};
use tagforge::tokenizer::{encode_sentence, recombine_predictions, wordpiece_tokenize, WordPieceVocab};

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}
use Verdict::{Blocked, Fail, Pass};

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn gmb_path() -> PathBuf {
    std::env::var_os("TAGFORGE_GMB_CSV").map_or_else(|| PathBuf::from("data/ner_dataset.csv"), PathBuf::from)
}

fn gmb() -> Option<&'static [Sentence]> {
    static DATA: OnceLock<Option<Vec<Sentence>>> = OnceLock::new();
    DATA.get_or_init(|| {
        let p = gmb_path();
        if !p.exists() {
            return None;
        }
        match load_gmb_csv(&p) {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("cannot read {}: {e}", p.display());
                None
            }
        }
    })
    .as_deref()
}

fn blocked_reason() -> String {
    format!("GMB CSV not found at {} (set TAGFORGE_GMB_CSV)", gmb_path().display())
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// ---------------------------------------------------------------- 1

/// Score of a labelling computed directly from the four weight tensors.
fn direct_score(m: &CrfModel, x: &[FeatureSet], y: &[usize]) -> f64 {
    let ny = m.num_labels();
    let labels = m.labels();
    let mut s = m.begin().data()[y[0]] + m.end().data()[y[y.len() - 1]];
    for (t, fs) in x.iter().enumerate() {
        for f in fs.iter() {
            s += m.state_weight(f, &labels[y[t]]);
        }
        if t > 0 {
            s += m.transitions().data()[y[t - 1] * ny + y[t]];
        }
    }
    s
}

fn random_crf(rng: &mut Rng, ny: usize, nf: usize) -> CrfModel {
    let labels = (0..ny).map(|i| format!("L{i}")).collect();
    let features = (0..nf).map(|i| format!("f{i}")).collect();
    let mut m = CrfModel::new(labels, features);
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        for v in m.params_mut().get_mut(id).data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    m
}

fn random_features(rng: &mut Rng, t: usize, nf: usize) -> Vec<FeatureSet> {
    (0..t)
        .map(|_| {
            let k = rng.random_range(1..=3);
            FeatureSet((0..k).map(|_| format!("f{}", rng.random_range(0..nf))).collect())
        })
        .collect()
}

fn crf_oracle() -> Verdict {
    let mut rng = seeded_rng(2024);
    let (mut worst_z, mut worst_v, mut path_mismatch) = (0.0f64, 0.0f64, 0);
    for _ in 0..200 {
        let t = rng.random_range(1..=6);
        let ny = rng.random_range(1..=4);
        let m = random_crf(&mut rng, ny, 6);
        let x = random_features(&mut rng, t, 6);
        // enumerate Y^T in lexicographic order; strict > keeps the first maximum
        let mut z = 0.0;
        let mut best = (f64::NEG_INFINITY, Vec::new());
        let mut y = vec![0usize; t];
        loop {
            let s = direct_score(&m, &x, &y);
            z += s.exp();
            if s > best.0 {
                best = (s, y.clone());
            }
            let Some(pos) = (0..t).rev().find(|&p| y[p] + 1 < ny) else {
                break;
            };
            y[pos] += 1;
            y[pos + 1..].iter_mut().for_each(|v| *v = 0);
        }
        worst_z = worst_z.max(rel(m.log_partition(&x).exp(), z, 0.0));
        let (path, score) = m.viterbi_decode(&x);
        worst_v = worst_v.max(rel(score, best.0, 1.0));
        let expect: Vec<String> = best.1.iter().map(|&i| m.labels()[i].clone()).collect();
        if path != expect {
            path_mismatch += 1;
        }
    }
    check(
        worst_z <= 1e-9 && worst_v <= 1e-9 && path_mismatch == 0,
        format!("200 instances; max rel error Z {worst_z:.2e}, Viterbi score {worst_v:.2e}; path mismatches {path_mismatch}"),
    )
}

// ---------------------------------------------------------------- 2

fn crf_gradient() -> (bool, f64) {
    let mut rng = seeded_rng(5);
    let mut model = random_crf(&mut rng, 3, 5);
    for id in model.params().ids().collect::<Vec<_>>() {
        model.params_mut().get_mut(id).scale_assign(0.25);
    }
    let data: Vec<_> = (0..4)
        .map(|_| {
            let t = rng.random_range(1..=5);
            let x = random_features(&mut rng, t, 5);
            let y: Vec<String> = (0..t).map(|_| format!("L{}", rng.random_range(0..3))).collect();
            let y: Vec<&str> = y.iter().map(String::as_str).collect();
            model.encode(&x, &y).unwrap()
        })
        .collect();
    let l2 = 0.3;
    let (_, grads) = nll_and_gradient(&data, &model, l2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in model.params().ids().collect::<Vec<_>>() {
        for k in 0..model.params().get(id).len() {
            let mut plus = model.clone();
            plus.params_mut().get_mut(id).data_mut()[k] += h;
            let mut minus = model.clone();
            minus.params_mut().get_mut(id).data_mut()[k] -= h;
            let numeric = (nll_and_gradient(&data, &plus, l2).0 - nll_and_gradient(&data, &minus, l2).0) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(rel(analytic, numeric, 1e-3));
        }
    }
    (worst <= 1e-6, worst)
}

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn transformer_block_gradient() -> (bool, f64) {
    let mut rng = seeded_rng(8);
    let mut store = ParamStore::new();
    init_encoder_layer(&mut store, &mut rng, "blk", 8, 12);
    let xt = random_tensor(&mut rng, &[2 * 4, 8], 1.0);
    let batch = SeqBatch {
        ids: vec![1; 8],
        lengths: vec![4, 3],
        width: 4,
    };
    let report = grad_check(
        &store,
        |tape, s| -> Result<Var, TaggerError> {
            let x = tape.constant(xt.clone());
            let y = encoder_layer(tape, s, "blk", x, &batch, 2, 0.0, None)?;
            let y = tape.tanh(y);
            let y = tape.mul(y, y)?;
            Ok(tape.sum(y))
        },
        GradCheckConfig {
            tol: 1e-5,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    (report.passed(), report.max_rel_error())
}

fn lstm_step_gradient() -> (bool, f64) {
    let mut rng = seeded_rng(9);
    let (rows, d, u) = (3, 4, 3);
    let mut store = ParamStore::new();
    store.insert("cell.wx", random_tensor(&mut rng, &[d, 4 * u], 0.5));
    store.insert("cell.wh", random_tensor(&mut rng, &[u, 4 * u], 0.5));
    store.insert("cell.b", random_tensor(&mut rng, &[4 * u], 0.5));
    let xt = random_tensor(&mut rng, &[rows, d], 1.0);
    let ht = random_tensor(&mut rng, &[rows, u], 1.0);
    let ct = random_tensor(&mut rng, &[rows, u], 1.0);
    let wt = random_tensor(&mut rng, &[rows, u], 1.0);
    let report = grad_check(
        &store,
        |tape, s| -> Result<Var, TaggerError> {
            let wx = tape.param(s, s.id("cell.wx").unwrap());
            let b = tape.param(s, s.id("cell.b").unwrap());
            let x = tape.constant(xt.clone());
            let gx = tape.linear(x, wx, b)?;
            let h0 = tape.constant(ht.clone());
            let c0 = tape.constant(ct.clone());
            let (h, c) = lstm_step(tape, s, "cell", gx, h0, c0)?;
            let w = tape.constant(wt.clone());
            let hw = tape.mul(h, w)?;
            let cc = tape.mul(c, c)?;
            let y = tape.add(hw, cc)?;
            Ok(tape.sum(y))
        },
        GradCheckConfig::default(),
    )
    .unwrap();
    (report.passed(), report.max_rel_error())
}

fn tiny_wordpiece() -> WordPieceVocab {
    WordPieceVocab::from_words(["alice", "went", "to", "paris", "china", "today", "her", "father"], 1)
}

/// Batch, labels, active mask and position targets for BERT-style input.
fn bert_inputs(m: &BertLikeTagger, words: &[Vec<&str>], labels: &[Vec<i64>]) -> (SeqBatch, Vec<i64>, Vec<bool>, Vec<i64>) {
    let enc = m.encode_words(words, Some(labels), false).unwrap();
    let width = enc.iter().map(|e| e.length).max().unwrap();
    let mut batch = SeqBatch {
        ids: vec![],
        lengths: vec![],
        width,
    };
    let (mut lab, mut act, mut pos) = (vec![], vec![], vec![]);
    for e in &enc {
        batch.ids.extend_from_slice(&e.ids[..width]);
        batch.lengths.push(e.length);
        lab.extend_from_slice(&e.labels.as_ref().unwrap()[..width]);
        act.extend_from_slice(&e.active[..width]);
        pos.extend((0..width).map(|p| if p < e.length { p as i64 } else { -1 }));
    }
    (batch, lab, act, pos)
}

fn bert_composite_gradient() -> (bool, f64) {
    let cfg = BertLikeConfig {
        num_layers: 1,
        hidden: 8,
        num_heads: 2,
        ffn_dim: 12,
        fc_dropout: 0.0,
        maxlen: 12,
        lambda_pos: 0.7,
    };
    let m = BertLikeTagger::new(cfg, tiny_wordpiece(), vec!["O".into(), "PER".into(), "GPE".into()], 4).unwrap();
    let words = vec![vec!["Alice", "went", "to", "Pariss"], vec!["Her", "father"]];
    let labels = vec![vec![1, 0, 0, 2], vec![0, 0]];
    let (batch, lab, act, pos) = bert_inputs(&m, &words, &labels);
    let report = grad_check(
        &m.params,
        |tape, p| {
            let (t, q) = m.forward_with(tape, p, &batch, None)?;
            composite_loss(tape, t, q, &lab, &act, &pos, 0.7)
        },
        GradCheckConfig {
            tol: 1e-5,
            max_samples: 24,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    (report.passed(), report.max_rel_error())
}

fn gradient_suites() -> Verdict {
    let (a, ea) = crf_gradient();
    let (b, eb) = transformer_block_gradient();
    let (c, ec) = lstm_step_gradient();
    let (d, ed) = bert_composite_gradient();
    check(
        a && b && c && d,
        format!("max rel error: CRF nll {ea:.1e} (tol 1e-6), transformer block {eb:.1e} (1e-5), LSTM step {ec:.1e} (1e-6), BERT-style composite {ed:.1e} (1e-5)"),
    )
}

// ---------------------------------------------------------------- 3 and 4

struct CrfRun {
    model: CrfModel,
    f1: f64,
    sentences: usize,
    elapsed: Duration,
}

fn crf_run(corpus: &[Sentence]) -> CrfRun {
    let start = Instant::now();
    let (train, valid) = split(corpus, 0.8, 0).unwrap();
    let (model, _) = crf::train(&CrfTrainData::from_corpus(&train), &CrfTrainConfig::default(), |_, _| {}).unwrap();
    let vdata = CrfTrainData::from_corpus(&valid);
    let pred = model.predict(&vdata.x);
    let f1 = flat_f1(&vdata.y, &pred, Averaging::Weighted, true).unwrap();
    CrfRun {
        model,
        f1,
        sentences: corpus.len(),
        elapsed: start.elapsed(),
    }
}

fn gmb_crf() -> Option<&'static CrfRun> {
    static RUN: OnceLock<Option<CrfRun>> = OnceLock::new();
    RUN.get_or_init(|| gmb().map(|c| crf_run(&c[..c.len().min(5000)]))).as_ref()
}

fn synthetic_crf() -> &'static CrfRun {
    static RUN: OnceLock<CrfRun> = OnceLock::new();
    RUN.get_or_init(|| crf_run(&synthetic_corpus(5000, 3)))
}

fn crf_desk_scale() -> Verdict {
    match gmb_crf() {
        Some(r) => check(
            r.f1 >= 0.70 && r.elapsed < Duration::from_secs(600),
            format!(
                "weighted flat F1 {:.4} on validation of {} GMB sentences (need >= 0.70), {:.0?}",
                r.f1, r.sentences, r.elapsed
            ),
        ),
        None => {
            let s = synthetic_crf();
            Blocked(format!(
                "{}; synthetic supplement (not the criterion): F1 {:.4} on {} template sentences",
                blocked_reason(),
                s.f1,
                s.sentences
            ))
        }
    }
}

/// Continuation of an entity is B-x -> I-x and I-x -> I-x; both must be
/// positive. org -> geo averages B-org -> B-geo and I-org -> B-geo.
fn transition_summary(m: &CrfModel) -> Option<([f64; 2], [f64; 2], f64)> {
    let cont = |e: &str| -> Option<[f64; 2]> {
        let (b, i) = (format!("B-{e}"), format!("I-{e}"));
        Some([m.transition(&b, &i)?, m.transition(&i, &i)?])
    };
    let og = (m.transition("B-org", "B-geo")? + m.transition("I-org", "B-geo")?) / 2.0;
    Some((cont("per")?, cont("tim")?, og))
}

fn crf_transitions() -> Verdict {
    let describe = |m: &CrfModel| match transition_summary(m) {
        Some((p, t, o)) => (
            p.iter().chain(&t).all(|&w| w > 0.0) && o < 0.0,
            format!(
                "per->per B->I {:+.4} I->I {:+.4}, tim->tim B->I {:+.4} I->I {:+.4}, org->geo {o:+.4}",
                p[0], p[1], t[0], t[1]
            ),
        ),
        None => (false, "required labels missing from the model".into()),
    };
    match gmb_crf() {
        Some(r) => {
            let (ok, d) = describe(&r.model);
            check(ok, d)
        }
        None => {
            let (ok, d) = describe(&synthetic_crf().model);
            Blocked(format!(
                "{}; synthetic supplement (not the criterion): {d}, signs {}",
                blocked_reason(),
                if ok { "as expected" } else { "differ" }
            ))
        }
    }
}

// ---------------------------------------------------------------- 5

fn mean_entity_f1<M: SequenceTagger>(m: &M, valid: &[Sentence]) -> f64 {
    let words: Vec<Vec<&str>> = valid.iter().map(|s| s.words()).collect();
    let truth: Vec<Vec<&str>> = valid.iter().map(|s| s.tags()).collect();
    let pred = m.predict(&words).unwrap();
    let pred: Vec<Vec<&str>> = pred.iter().map(|p| p.iter().map(String::as_str).collect()).collect();
    let r = evaluate(&truth, &pred, &[], Averaging::Weighted, true).unwrap();
    let f = |l: &str| r.label(l).map_or(0.0, |s| s.f1);
    (f("PER") + f("GPE")) / 2.0
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Median over three seeds of the mean PER/GPE F1 for both taggers.
fn ordering_run(corpus: &[Sentence], epochs: usize) -> (f64, f64, Duration) {
    let start = Instant::now();
    let keep: BTreeSet<String> = ["PER", "GPE"].iter().map(|s| s.to_string()).collect();
    let mapped = map_entities(corpus, &keep).unwrap();
    let vocab = Vocab::build(&mapped, 1);
    let (train, valid) = split(&mapped, 0.8, 0).unwrap();
    let tcfg = |seed| TrainConfig {
        epochs,
        batch_size: 32,
        seed,
        optimizer: OptimizerSpec::adamw(1e-3),
        ..TrainConfig::transformer()
    };
    let (mut tr, mut bl) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        let tc = TransformerConfig {
            emb_dim: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_dim: 256,
            ..TransformerConfig::default()
        };
        let mut t = TransformerTagger::new(tc, vocab.clone(), None, seed).unwrap();
        train_tagger(&mut t, &train, &valid, &tcfg(seed), |_, _| {}).unwrap();
        tr.push(mean_entity_f1(&t, &valid));
        let mut b = BiLstmTagger::new(BiLstmConfig::default(), vocab.clone(), None, seed).unwrap();
        train_tagger(&mut b, &train, &valid, &tcfg(seed), |_, _| {}).unwrap();
        bl.push(mean_entity_f1(&b, &valid));
    }
    (median(tr), median(bl), start.elapsed())
}

fn tagger_ordering() -> Verdict {
    match gmb() {
        Some(c) => {
            let (t, b, el) = ordering_run(&c[..c.len().min(2000)], 5);
            check(
                t >= b - 0.02 && el < Duration::from_secs(1200),
                format!(
                    "median mean PER/GPE F1: transformer {t:.4}, BiLSTM {b:.4} (need transformer >= BiLSTM - 0.02), {el:.0?}"
                ),
            )
        }
        None => {
            let (t, b, _) = ordering_run(&synthetic_corpus(600, 4), 5);
            Blocked(format!(
                "{}; synthetic supplement (not the criterion): transformer {t:.4}, BiLSTM {b:.4}",
                blocked_reason()
            ))
        }
    }
}

// ---------------------------------------------------------------- 6

fn active_masking() -> (bool, f64) {
    let mut rng = seeded_rng(12);
    let (n, c, p) = (7, 3, 5);
    let labels = [1, 0, 2, -1, 1, 0, -1];
    let active = [false, true, true, false, false, true, false];
    let positions = [0, 1, 2, 3, 4, -1, -1];
    let run = |tag: &Tensor, pos: &Tensor| {
        let mut store = ParamStore::new();
        let tid = store.insert("tag", tag.clone());
        let pid = store.insert("pos", pos.clone());
        let mut tape = Tape::new();
        let t = tape.param(&store, tid);
        let q = tape.param(&store, pid);
        let loss = composite_loss(&mut tape, t, q, &labels, &active, &positions, 0.5).unwrap();
        let value = tape.value(loss).item();
        let g = tape.backward(loss).unwrap();
        (value, g.get(tid).unwrap().clone(), g.get(pid).unwrap().clone())
    };
    let tag = random_tensor(&mut rng, &[n, c], 2.0);
    let pos = random_tensor(&mut rng, &[n, p], 2.0);
    let (l0, gt0, gp0) = run(&tag, &pos);
    let mut perturbed = tag.clone();
    for (r, &a) in active.iter().enumerate() {
        if !a {
            for v in perturbed.row_mut(r) {
                *v += rng.random_range(-50.0..50.0);
            }
        }
    }
    let (l1, gt1, gp1) = run(&perturbed, &pos);
    let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let worst = (l0 - l1).abs().max(diff(&gt0, &gt1)).max(diff(&gp0, &gp1));
    (worst <= 1e-12, worst)
}

fn random_word_sentences(rng: &mut Rng, n: usize, words: &[&str]) -> Vec<Sentence> {
    (0..n)
        .map(|id| {
            let len = rng.random_range(3..=10);
            Sentence::new(
                id,
                (0..len).map(|_| Token::new(*words.choose(rng).unwrap(), "NN", "O")).collect(),
            )
        })
        .collect()
}

fn position_head() -> (bool, f64) {
    let words = ["alice", "went", "to", "paris", "china", "today", "her", "father"];
    let mut rng = seeded_rng(21);
    let train = random_word_sentences(&mut rng, 40, &words);
    let valid = random_word_sentences(&mut rng, 8, &words);
    let cfg = BertLikeConfig {
        num_layers: 1,
        hidden: 16,
        num_heads: 2,
        ffn_dim: 32,
        fc_dropout: 0.0,
        maxlen: 12,
        lambda_pos: 1.0,
    };
    let mut m = BertLikeTagger::new(cfg, tiny_wordpiece(), vec!["O".into()], 2).unwrap();
    // 40 sentences in batches of 8 for 40 epochs = 200 optimizer steps
    let tcfg = TrainConfig {
        epochs: 40,
        batch_size: 8,
        seed: 2,
        optimizer: OptimizerSpec::adamw(1e-2),
        warmup_steps: None,
        ..TrainConfig::bertlike()
    };
    train_tagger(&mut m, &train, &valid, &tcfg, |_, _| {}).unwrap();
    let probe = random_word_sentences(&mut rng, 50, &words);
    let w: Vec<Vec<&str>> = probe.iter().map(|s| s.words()).collect();
    let l: Vec<Vec<i64>> = probe.iter().map(|s| vec![0; s.len()]).collect();
    let (batch, _, _, pos) = bert_inputs(&m, &w, &l);
    let mut tape = Tape::new();
    let (_, q) = m.forward(&mut tape, &batch, None).unwrap();
    let am = tape.value(q).argmax_rows();
    let (hit, total) = pos
        .iter()
        .zip(&am)
        .filter(|(p, _)| **p >= 0)
        .fold((0, 0), |(h, t), (p, a)| (h + (*p as usize == *a) as usize, t + 1));
    let acc = hit as f64 / total as f64;
    (acc >= 0.99, acc)
}

fn bert_equivariance() -> (bool, f64) {
    let cfg = BertLikeConfig {
        num_layers: 2,
        hidden: 8,
        num_heads: 2,
        ffn_dim: 16,
        maxlen: 12,
        ..BertLikeConfig::default()
    };
    let mut m = BertLikeTagger::new(cfg, tiny_wordpiece(), vec!["O".into()], 6).unwrap();
    let id = m.params.id("pos_emb").unwrap();
    m.params.get_mut(id).data_mut().fill(0.0);
    let (batch, _, _, _) = bert_inputs(&m, &[vec!["alice", "went", "to", "china", "today"]], &[vec![0; 5]]);
    let n = batch.width;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seeded_rng(1));
    let permuted = SeqBatch {
        ids: perm.iter().map(|&i| batch.ids[i]).collect(),
        ..batch.clone()
    };
    let hidden = |b: &SeqBatch| {
        let mut tape = Tape::new();
        let h = m.encode(&mut tape, b).unwrap();
        tape.value(h).clone()
    };
    let (a, b) = (hidden(&batch), hidden(&permuted));
    let mut worst = 0.0f64;
    for (i, &src) in perm.iter().enumerate() {
        for (x, y) in b.row(i).iter().zip(a.row(src)) {
            worst = worst.max((x - y).abs());
        }
    }
    (worst <= 1e-9, worst)
}

fn bert_invariants() -> Verdict {
    let (a, ea) = active_masking();
    let (b, acc) = position_head();
    let (c, ec) = bert_equivariance();
    check(
        a && b && c,
        format!("inactive-logit perturbation max change {ea:.1e}; position accuracy after 200 steps {acc:.4}; equivariance error {ec:.1e}"),
    )
}

// ---------------------------------------------------------------- 7

fn tokenizer_round_trips() -> Verdict {
    let start = Instant::now();
    let corpus = match gmb() {
        Some(c) => c.to_vec(),
        None => synthetic_corpus(2000, 6),
    };
    let vocab = Vocab::build(&corpus, 1);
    // pieces come from a small slice, so most words must be spelled out and
    // characters never seen there give [UNK]
    let slice = &corpus[..(corpus.len() / 20).max(1)];
    let pieces = WordPieceVocab::from_words(slice.iter().flat_map(|s| s.words()), 3);
    let mut bad_words = 0;
    let mut spelled = 0;
    for w in vocab.tokens().iter().skip(2) {
        let lw = w.to_lowercase();
        let ids = wordpiece_tokenize(&lw, &pieces);
        let unk = ids == [WordPieceVocab::UNK_ID];
        let joined: String = ids
            .iter()
            .map(|&i| pieces.piece(i).unwrap().trim_start_matches("##"))
            .collect();
        spelled += (ids.len() > 1) as usize;
        if !(unk || joined == lw) {
            bad_words += 1;
        }
    }
    let mut rng = seeded_rng(7);
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyzéü0123456789-'.".chars().collect();
    let mut bad_sentences = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=15);
        let words: Vec<String> = (0..n)
            .map(|_| {
                (0..rng.random_range(1..=9))
                    .map(|_| *alphabet.choose(&mut rng).unwrap())
                    .collect()
            })
            .collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let enc = encode_sentence(&refs, None, &pieces, 1 + 9 * n, false).unwrap();
        let back = recombine_predictions(&enc, &enc.word_index).unwrap();
        if back != (0..n as i64).collect::<Vec<_>>() {
            bad_sentences += 1;
        }
    }
    let el = start.elapsed();
    check(
        bad_words == 0 && bad_sentences == 0 && el < Duration::from_secs(10),
        format!(
            "{} vocab words ({spelled} multi-piece), {bad_words} bad; 1000 random sentences, {bad_sentences} bad; {el:.1?}",
            vocab.num_tokens() - 2
        ),
    )
}

// ---------------------------------------------------------------- 8

fn metric_hand_checks() -> Verdict {
    let truth = vec![vec!["O", "GPE", "PER"]];
    let pred = vec![vec!["O", "GPE", "GPE"]];
    let five_ninths = flat_f1(&truth, &pred, Averaging::Weighted, true).unwrap();
    // (1 + 2/3 + 0) / 3 evaluated in the same order as the weighted sum
    let hand = (1.0 + 2.0 / 3.0 + 0.0) / 3.0;
    let identity = flat_f1(&truth, &truth, Averaging::Weighted, true).unwrap();
    let labels: Vec<String> = ["O", "PER", "GPE", "ORG"].iter().map(|s| s.to_string()).collect();
    let mut rng = seeded_rng(8);
    let mut marginal_failures = 0;
    for _ in 0..100 {
        let sents = rng.random_range(1..6);
        let (mut t, mut p) = (Vec::new(), Vec::new());
        for _ in 0..sents {
            let len = rng.random_range(1..8);
            t.push((0..len).map(|_| labels.choose(&mut rng).unwrap().clone()).collect::<Vec<_>>());
            p.push((0..len).map(|_| labels.choose(&mut rng).unwrap().clone()).collect::<Vec<_>>());
        }
        let cm = confusion_matrix(&t, &p, &labels).unwrap();
        let count = |seqs: &[Vec<String>], l: &str| seqs.iter().flatten().filter(|x| *x == l).count();
        let rows_ok = labels.iter().zip(cm.row_sums()).all(|(l, r)| r == count(&t, l));
        let cols_ok = labels.iter().zip(cm.col_sums()).all(|(l, c)| c == count(&p, l));
        if !(rows_ok && cols_ok) {
            marginal_failures += 1;
        }
    }
    check(
        (five_ninths - hand).abs() <= 1e-15 && identity == 1.0 && marginal_failures == 0,
        format!("worked example {five_ninths:.6} (hand 5/9 = {hand:.6}); identity {identity}; marginal failures {marginal_failures}/100"),
    )
}

// ---------------------------------------------------------------- 9

fn schedule_exactness() -> Verdict {
    let s = WarmupSchedule::new(3e-5, 2500, 10_000).unwrap();
    let got = [s.lr(0).unwrap(), s.lr(1250).unwrap(), s.lr(2500).unwrap()];
    check(
        got[0].to_bits() == 0.0f64.to_bits() && got[1].to_bits() == 1.5e-5f64.to_bits() && got[2].to_bits() == 3e-5f64.to_bits(),
        format!("lr(0) = {:e}, lr(1250) = {:e}, lr(2500) = {:e}", got[0], got[1], got[2]),
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("toy.csv");
    std::fs::write(&data, to_gmb_csv(&synthetic_corpus(60, 9))).unwrap();
    let mut differing = Vec::new();
    for kind in [ModelKind::Crf, ModelKind::Transformer, ModelKind::Bilstm, ModelKind::Bertlike] {
        let mut cfg = ExperimentConfig::new(&data, kind, 13);
        cfg.crf.epochs = 4;
        cfg.transformer = TransformerConfig {
            emb_dim: 8,
            num_heads: 2,
            num_layers: 1,
            ffn_dim: 16,
            dropout: 0.1,
            ..TransformerConfig::default()
        };
        cfg.bilstm = BiLstmConfig {
            emb_dim: 8,
            units: 6,
            ..BiLstmConfig::default()
        };
        cfg.bertlike = BertLikeConfig {
            num_layers: 1,
            hidden: 8,
            num_heads: 2,
            ffn_dim: 16,
            ..BertLikeConfig::default()
        };
        if kind != ModelKind::Crf {
            let mut t = cfg.train_config();
            t.epochs = 3;
            t.batch_size = 16;
            t.warmup_steps = t.warmup_steps.map(|_| 4);
            cfg.train = Some(t);
        }
        let dir = |run: &str| tmp.path().join(format!("{}-{run}", kind.name()));
        cfg.output_dir = Some(dir("a"));
        cli::cmd_train(&cfg, &mut std::io::sink()).unwrap();
        // the rerun uses one worker thread, so thread count must not matter either
        cfg.output_dir = Some(dir("b"));
        par::sequential(|| cli::cmd_train(&cfg, &mut std::io::sink())).unwrap();
        for f in ["trace.csv", "best.model", "checkpoints/epoch-002.model"] {
            if std::fs::read(dir("a").join(f)).unwrap() != std::fs::read(dir("b").join(f)).unwrap() {
                differing.push(format!("{}/{f}", kind.name()));
            }
        }
    }
    check(
        differing.is_empty(),
        if differing.is_empty() {
            "trace CSVs, best models and checkpoints byte-identical for crf, transformer, bilstm, bertlike".into()
        } else {
            format!("differing files: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 11

fn curve_analysis() -> Verdict {
    let pts = curve_points(&[1.0, 0.6, 0.4, 0.3], &[0.9, 0.5, 0.6, 0.7]);
    let r = analyze_curve(&pts, DEFAULT_PLATEAU_EPS).unwrap();
    check(
        r.checkpoint_epoch == 2 && r.overfit_onset == Some(3),
        format!("checkpoint epoch {}, overfit onset {:?}", r.checkpoint_epoch, r.overfit_onset),
    )
}

fn main() {
    // libtest flags such as --list are not understood; listing nothing is
    // the honest answer for a custom harness
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 11] = [
        ("CRF oracle equivalence", crf_oracle),
        ("gradient suites", gradient_suites),
        ("CRF desk-scale training", crf_desk_scale),
        ("CRF transition sanity", crf_transitions),
        ("transformer vs BiLSTM ordering", tagger_ordering),
        ("BERT-style tagger invariants", bert_invariants),
        ("tokenizer round-trips", tokenizer_round_trips),
        ("metric hand-checks", metric_hand_checks),
        ("schedule exactness", schedule_exactness),
        ("determinism", determinism),
        ("curve analysis", curve_analysis),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match verdict {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Blocked(d) => ("BLOCKED", d),
        };
        println!("criterion {:>2} {tag:<7} {name}: {detail} [{:.1?}]", i + 1, start.elapsed());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
