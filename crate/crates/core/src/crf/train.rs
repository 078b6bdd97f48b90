use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{BEGIN, END, STATE, TRANSITIONS};
use super::{sentence_features, CrfError, CrfModel, EncodedSequence};
use crate::corpus::Sentence;
use crate::numgrad::{seeded_rng, AdamW, AdamWConfig, Grads, Tensor};
use crate::par;

/// Sentences per parallel work unit in [`nll_and_gradient`]. Fixed so the
/// summation order, and therefore the result, does not depend on the pool.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfTrainConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// `None` is full-batch: one optimizer step per epoch.
    pub batch_size: Option<usize>,
}

impl Default for CrfTrainConfig {
    fn default() -> Self {
        Self {
            l2: 0.1,
            epochs: 30,
            lr: 0.1,
            seed: 0,
            batch_size: None,
        }
    }
}

/// Per-epoch progress handed to the training callback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrfEpoch {
    /// 1-based.
    pub epoch: usize,
    /// Regularized negative log-likelihood divided by the sentence count,
    /// measured before the epoch's update.
    pub loss: f64,
    pub lr: f64,
}

/// Training sentences already turned into features and label names.
#[derive(Debug, Clone, Default)]
pub struct CrfTrainData {
    pub x: Vec<Vec<super::FeatureSet>>,
    pub y: Vec<Vec<String>>,
}

impl CrfTrainData {
    pub fn from_corpus(corpus: &[Sentence]) -> Self {
        Self {
            x: par::map(corpus, |s| sentence_features(&s.tokens)),
            y: corpus
                .iter()
                .map(|s| s.tokens.iter().map(|t| t.ner.clone()).collect())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Labels by descending frequency, ties lexicographic.
pub fn label_order<'a>(labels: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().map(|(l, _)| l.to_string()).collect()
}

/// Per-chunk gradient with a sparse state table.
#[derive(Default)]
struct Partial {
    loss: f64,
    state: BTreeMap<usize, Vec<f64>>,
    trans: Vec<f64>,
    begin: Vec<f64>,
    end: Vec<f64>,
}

fn sequence_gradient(model: &CrfModel, seq: &EncodedSequence, acc: &mut Partial) {
    let ny = model.num_labels();
    let n = seq.labels.len();
    if n == 0 {
        return;
    }
    let lat = model.lattice(&seq.features);
    let trans = model.transitions().data();
    acc.loss += lat.log_z - model.score_encoded(&seq.features, &seq.labels);
    for t in 0..n {
        let marg: Vec<f64> = (0..ny)
            .map(|y| (lat.alpha[t * ny + y] + lat.beta[t * ny + y] - lat.log_z).exp())
            .collect();
        let gold = seq.labels[t];
        for &f in &seq.features[t] {
            let row = acc.state.entry(f).or_insert_with(|| vec![0.0; ny]);
            for (r, m) in row.iter_mut().zip(&marg) {
                *r += m;
            }
            row[gold] -= 1.0;
        }
        if t == 0 {
            for (b, m) in acc.begin.iter_mut().zip(&marg) {
                *b += m;
            }
            acc.begin[gold] -= 1.0;
        } else {
            for a in 0..ny {
                let base = lat.alpha[(t - 1) * ny + a] - lat.log_z;
                for b in 0..ny {
                    let lp = base + trans[a * ny + b] + lat.unary[t * ny + b] + lat.beta[t * ny + b];
                    acc.trans[a * ny + b] += lp.exp();
                }
            }
            acc.trans[seq.labels[t - 1] * ny + gold] -= 1.0;
        }
        if t + 1 == n {
            for (e, m) in acc.end.iter_mut().zip(&marg) {
                *e += m;
            }
            acc.end[gold] -= 1.0;
        }
    }
}

/// Regularized negative log-likelihood over `data` and its gradient:
/// `Σ (log Z − score) + (l2/2)‖w‖²`, where `w` covers state, transition,
/// begin and end weights.
pub fn nll_and_gradient(data: &[EncodedSequence], model: &CrfModel, l2: f64) -> (f64, Grads) {
    let ny = model.num_labels();
    let partials = par::map_chunks(data, CHUNK, |_, chunk| {
        let mut acc = Partial {
            trans: vec![0.0; ny * ny],
            begin: vec![0.0; ny],
            end: vec![0.0; ny],
            ..Partial::default()
        };
        for seq in chunk {
            sequence_gradient(model, seq, &mut acc);
        }
        acc
    });

    let params = model.params();
    let mut loss = 0.0;
    let mut g_state = Tensor::zeros(model.state().shape());
    let mut g_trans = Tensor::zeros(model.transitions().shape());
    let mut g_begin = Tensor::zeros(&[ny]);
    let mut g_end = Tensor::zeros(&[ny]);
    for p in partials {
        loss += p.loss;
        for (f, row) in p.state {
            for (g, r) in g_state.row_mut(f).iter_mut().zip(row) {
                *g += r;
            }
        }
        for (dst, src) in [(&mut g_trans, p.trans), (&mut g_begin, p.begin), (&mut g_end, p.end)] {
            for (g, s) in dst.data_mut().iter_mut().zip(src) {
                *g += s;
            }
        }
    }

    let mut grads = Grads::new();
    for (name, mut g) in [(STATE, g_state), (TRANSITIONS, g_trans), (BEGIN, g_begin), (END, g_end)] {
        let w = params.by_name(name).expect("crf parameter");
        if l2 != 0.0 {
            loss += 0.5 * l2 * w.sq_norm();
            for (gi, wi) in g.data_mut().iter_mut().zip(w.data()) {
                *gi += l2 * wi;
            }
        }
        grads.accumulate(params.id(name).expect("crf parameter"), g);
    }
    (loss, grads)
}

/// Fits a CRF by AdamW on [`nll_and_gradient`]. The L2 term lives in the
/// loss, so the optimizer's own decay is off.
///
/// `on_epoch` runs after every update with the epoch's pre-update loss and
/// the updated model. Returns the final model and the loss trace.
pub fn train(
    data: &CrfTrainData,
    config: &CrfTrainConfig,
    mut on_epoch: impl FnMut(&CrfEpoch, &CrfModel),
) -> Result<(CrfModel, Vec<f64>), CrfError> {
    if data.is_empty() {
        return Err(CrfError::EmptyCorpus);
    }
    if config.epochs == 0 || !(config.lr > 0.0) || !(config.l2 >= 0.0) {
        return Err(CrfError::Config(format!(
            "need epochs ≥ 1, lr > 0 and l2 ≥ 0 (got {}, {}, {})",
            config.epochs, config.lr, config.l2
        )));
    }
    let labels = label_order(data.y.iter().flatten());
    let features: BTreeSet<&str> = data.x.iter().flatten().flat_map(|fs| fs.iter()).collect();
    let mut model = CrfModel::new(labels, features.into_iter().map(str::to_string).collect());
    let encoded = data
        .x
        .iter()
        .zip(&data.y)
        .map(|(x, y)| {
            let y: Vec<&str> = y.iter().map(String::as_str).collect();
            model.encode(x, &y)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let epoch_loss = match config.batch_size {
            None => {
                let (loss, grads) = nll_and_gradient(&encoded, &model, config.l2);
                if !loss.is_finite() {
                    return Err(CrfError::NonFinite { epoch });
                }
                opt.step(model.params_mut(), &grads, config.lr)?;
                loss / encoded.len() as f64
            }
            Some(bs) => {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let batches: Vec<&[usize]> = order.chunks(bs.max(1)).collect();
                // the penalty is spread over batches so one epoch applies it once
                let share = config.l2 / batches.len() as f64;
                for idx in batches {
                    let batch: Vec<EncodedSequence> = idx.iter().map(|&i| encoded[i].clone()).collect();
                    let (loss, grads) = nll_and_gradient(&batch, &model, share);
                    if !loss.is_finite() {
                        return Err(CrfError::NonFinite { epoch });
                    }
                    total += loss;
                    opt.step(model.params_mut(), &grads, config.lr)?;
                }
                total / encoded.len() as f64
            }
        };
        trace.push(epoch_loss);
        log::info!("crf epoch {epoch}: loss {epoch_loss:.6}");
        on_epoch(
            &CrfEpoch {
                epoch,
                loss: epoch_loss,
                lr: config.lr,
            },
            &model,
        );
    }
    Ok((model, trace))
}

impl CrfModel {
    /// Mean unregularized negative log-likelihood per sentence. Unknown
    /// labels make a sentence impossible, so they are an error.
    pub fn mean_nll(&self, x: &[Vec<super::FeatureSet>], y: &[Vec<String>]) -> Result<f64, CrfError> {
        if x.is_empty() {
            return Ok(0.0);
        }
        let encoded = x
            .iter()
            .zip(y)
            .map(|(x, y)| {
                let y: Vec<&str> = y.iter().map(String::as_str).collect();
                self.encode(x, &y)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let (loss, _) = nll_and_gradient(&encoded, self, 0.0);
        Ok(loss / x.len() as f64)
    }

    /// Viterbi labels for every sentence, in input order.
    pub fn predict(&self, x: &[Vec<super::FeatureSet>]) -> Vec<Vec<String>> {
        par::map(x, |s| self.viterbi_decode(s).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Token;
    use crate::crf::FeatureSet;
    use crate::numgrad::{seeded_rng, ParamId};
    use rand::Rng as _;

    fn random_model(rng: &mut crate::numgrad::Rng, nf: usize, ny: usize) -> CrfModel {
        let labels = (0..ny).map(|i| format!("L{i}")).collect();
        let feats = (0..nf).map(|i| format!("f{i}")).collect();
        let mut m = CrfModel::new(labels, feats);
        let ids: Vec<ParamId> = m.params().ids().collect();
        for id in ids {
            for v in m.params_mut().get_mut(id).data_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        m
    }

    fn random_data(rng: &mut crate::numgrad::Rng, nf: usize, ny: usize, n: usize) -> Vec<EncodedSequence> {
        (0..n)
            .map(|_| {
                let t = rng.random_range(1..6);
                EncodedSequence {
                    features: (0..t).map(|_| (0..nf).filter(|_| rng.random_bool(0.4)).collect()).collect(),
                    labels: (0..t).map(|_| rng.random_range(0..ny)).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = seeded_rng(11);
        let mut model = random_model(&mut rng, 5, 3);
        let data = random_data(&mut rng, 5, 3, 7);
        let l2 = 0.3;
        let (_, grads) = nll_and_gradient(&data, &model, l2);
        let h = 1e-5;
        let ids: Vec<ParamId> = model.params().ids().collect();
        for id in ids {
            let g = grads.get(id).unwrap().clone();
            for i in 0..g.len() {
                let orig = model.params().get(id).data()[i];
                model.params_mut().get_mut(id).data_mut()[i] = orig + h;
                let plus = nll_and_gradient(&data, &model, l2).0;
                model.params_mut().get_mut(id).data_mut()[i] = orig - h;
                let minus = nll_and_gradient(&data, &model, l2).0;
                model.params_mut().get_mut(id).data_mut()[i] = orig;
                let num = (plus - minus) / (2.0 * h);
                let a = g.data()[i];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-3);
                assert!(rel < 1e-6, "{} [{i}]: {a} vs {num}", model.params().name(id));
            }
        }
    }

    #[test]
    fn marginals_sum_to_one() {
        let mut rng = seeded_rng(3);
        let model = random_model(&mut rng, 4, 4);
        let x: Vec<FeatureSet> = (0..5).map(|t| FeatureSet(vec![format!("f{}", t % 4), "f0".into()])).collect();
        for row in model.marginals(&x) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn data_gradient_vanishes_when_model_matches_empirical_distribution() {
        // A single featureless position with zero weights is uniform; a data
        // set holding each label once has the same empirical distribution.
        let model = CrfModel::new(vec!["A".into(), "B".into()], vec![]);
        let data: Vec<EncodedSequence> = (0..2)
            .map(|y| EncodedSequence {
                features: vec![vec![]],
                labels: vec![y],
            })
            .collect();
        let (_, grads) = nll_and_gradient(&data, &model, 0.0);
        for (_, g) in grads.iter() {
            assert!(g.data().iter().all(|v| v.abs() < 1e-15));
        }
    }

    fn separable_corpus() -> Vec<Sentence> {
        let vocab = [
            ("alice", "B-per"),
            ("paris", "B-geo"),
            ("went", "O"),
            ("to", "O"),
            ("monday", "B-tim"),
        ];
        let mut rng = seeded_rng(5);
        (0..50)
            .map(|id| {
                let n = rng.random_range(2..7);
                let toks = (0..n)
                    .map(|_| {
                        let (w, t) = vocab[rng.random_range(0..vocab.len())];
                        Token::new(w, "NN", t)
                    })
                    .collect();
                Sentence::new(id, toks)
            })
            .collect()
    }

    #[test]
    fn separable_corpus_is_learned_with_non_increasing_loss() {
        let corpus = separable_corpus();
        let data = CrfTrainData::from_corpus(&corpus);
        let cfg = CrfTrainConfig {
            epochs: 40,
            lr: 0.05,
            ..CrfTrainConfig::default()
        };
        let mut seen = 0;
        let (model, trace) = train(&data, &cfg, |e, _| seen = e.epoch).unwrap();
        assert_eq!(seen, 40);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{trace:?}");
        }
        let pred = model.predict(&data.x);
        assert_eq!(pred, data.y);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = separable_corpus();
        let data = CrfTrainData::from_corpus(&corpus);
        let cfg = CrfTrainConfig {
            epochs: 5,
            batch_size: Some(8),
            ..CrfTrainConfig::default()
        };
        let a = train(&data, &cfg, |_, _| {}).unwrap();
        let b = train(&data, &cfg, |_, _| {}).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn strong_l2_shrinks_weights() {
        let data = CrfTrainData::from_corpus(&separable_corpus());
        let norm = |l2| {
            let cfg = CrfTrainConfig {
                epochs: 60,
                l2,
                ..CrfTrainConfig::default()
            };
            train(&data, &cfg, |_, _| {}).unwrap().0.state().sq_norm()
        };
        assert!(norm(1e4) < 0.01 * norm(0.0));
    }

    #[test]
    fn label_order_puts_frequent_first() {
        let ls: Vec<String> = ["B", "O", "O", "A", "B", "O"].iter().map(|s| s.to_string()).collect();
        assert_eq!(label_order(&ls), ["O", "B", "A"]);
    }

    #[test]
    fn bad_config_and_empty_data() {
        assert!(matches!(
            train(&CrfTrainData::default(), &CrfTrainConfig::default(), |_, _| {}),
            Err(CrfError::EmptyCorpus)
        ));
        let data = CrfTrainData::from_corpus(&separable_corpus());
        let cfg = CrfTrainConfig {
            epochs: 0,
            ..CrfTrainConfig::default()
        };
        assert!(matches!(train(&data, &cfg, |_, _| {}), Err(CrfError::Config(_))));
    }
}
