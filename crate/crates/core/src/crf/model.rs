use std::collections::HashMap;

use super::{CrfError, FeatureSet};
use crate::numgrad::{ParamId, ParamStore, Tensor};

/// `(from, to, weight)` of one transition.
pub type Transition = (String, String, f64);

pub(crate) const STATE: &str = "crf.state";
pub(crate) const TRANSITIONS: &str = "crf.transitions";
pub(crate) const BEGIN: &str = "crf.begin";
pub(crate) const END: &str = "crf.end";

/// A sequence with feature names and labels replaced by indices. Features
/// the model has never seen are dropped (their weight is zero anyway).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub features: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

/// Linear-chain CRF weights: a dense `[features × labels]` state table, a
/// `[labels × labels]` transition matrix (`from` is the row), and begin/end
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    labels: Vec<String>,
    label_index: HashMap<String, usize>,
    features: Vec<String>,
    feature_index: HashMap<String, usize>,
    params: ParamStore,
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Forward–backward quantities for one sequence.
pub(crate) struct Lattice {
    pub unary: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub log_z: f64,
}

impl CrfModel {
    pub fn new(labels: Vec<String>, features: Vec<String>) -> Self {
        let (f, y) = (features.len(), labels.len());
        let mut params = ParamStore::new();
        params.insert(STATE, Tensor::zeros(&[f, y]));
        params.insert(TRANSITIONS, Tensor::zeros(&[y, y]));
        params.insert(BEGIN, Tensor::zeros(&[y]));
        params.insert(END, Tensor::zeros(&[y]));
        Self::from_params(labels, features, params).expect("fresh parameters are well-formed")
    }

    pub(crate) fn from_params(labels: Vec<String>, features: Vec<String>, params: ParamStore) -> Result<Self, CrfError> {
        let (f, y) = (features.len(), labels.len());
        let expect = |name: &str, shape: &[usize]| -> Result<(), CrfError> {
            match params.by_name(name) {
                Some(t) if t.shape() == shape && t.is_finite() => Ok(()),
                _ => Err(CrfError::BadModel(format!("`{name}` missing, misshapen or non-finite"))),
            }
        };
        expect(STATE, &[f, y])?;
        expect(TRANSITIONS, &[y, y])?;
        expect(BEGIN, &[y])?;
        expect(END, &[y])?;
        let label_index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        let feature_index = features.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(Self {
            labels,
            label_index,
            features,
            feature_index,
            params,
        })
    }

    /// Builds a model from sparse `(feature, label, weight)` entries plus
    /// dense transition tensors. Pairs not listed are zero.
    pub fn from_sparse(
        labels: Vec<String>,
        entries: &[(String, String, f64)],
        transitions: Tensor,
        begin: Tensor,
        end: Tensor,
    ) -> Result<Self, CrfError> {
        let mut features: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
        features.sort();
        features.dedup();
        let mut model = Self::new(labels, features);
        let y = model.num_labels();
        for (f, l, w) in entries {
            let fi = model.feature_index[f];
            let li = model.label(l)?;
            model.params.get_mut(model.id(STATE)).data_mut()[fi * y + li] = *w;
        }
        for (name, t) in [(TRANSITIONS, transitions), (BEGIN, begin), (END, end)] {
            let id = model.id(name);
            if model.params.get(id).shape() != t.shape() {
                return Err(CrfError::BadModel(format!("`{name}` has shape {:?}", t.shape())));
            }
            *model.params.get_mut(id) = t;
        }
        Ok(model)
    }

    /// Non-zero state weights as `(feature, label, weight)`, sorted.
    pub fn sparse_state_weights(&self) -> Vec<(String, String, f64)> {
        let y = self.num_labels();
        let state = self.state();
        let mut out = Vec::new();
        for (fi, f) in self.features.iter().enumerate() {
            for (li, l) in self.labels.iter().enumerate() {
                let w = state.data()[fi * y + li];
                if w != 0.0 {
                    out.push((f.clone(), l.clone(), w));
                }
            }
        }
        out.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        out
    }

    fn id(&self, name: &str) -> ParamId {
        self.params.id(name).expect("crf parameter")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn state(&self) -> &Tensor {
        self.params.by_name(STATE).expect("state")
    }

    pub fn transitions(&self) -> &Tensor {
        self.params.by_name(TRANSITIONS).expect("transitions")
    }

    pub fn begin(&self) -> &Tensor {
        self.params.by_name(BEGIN).expect("begin")
    }

    pub fn end(&self) -> &Tensor {
        self.params.by_name(END).expect("end")
    }

    pub fn state_weight(&self, feature: &str, label: &str) -> f64 {
        match (self.feature_index.get(feature), self.label_index.get(label)) {
            (Some(&f), Some(&l)) => self.state().data()[f * self.num_labels() + l],
            _ => 0.0,
        }
    }

    pub fn transition(&self, from: &str, to: &str) -> Option<f64> {
        let (f, t) = (self.label_index.get(from)?, self.label_index.get(to)?);
        Some(self.transitions().data()[f * self.num_labels() + t])
    }

    pub fn label(&self, name: &str) -> Result<usize, CrfError> {
        self.label_index
            .get(name)
            .copied()
            .ok_or_else(|| CrfError::UnknownLabel(name.to_string()))
    }

    pub fn encode_features(&self, x: &[FeatureSet]) -> Vec<Vec<usize>> {
        x.iter()
            .map(|fs| fs.iter().filter_map(|f| self.feature_index.get(f).copied()).collect())
            .collect()
    }

    pub fn encode(&self, x: &[FeatureSet], y: &[&str]) -> Result<EncodedSequence, CrfError> {
        if x.len() != y.len() {
            return Err(CrfError::LengthMismatch {
                features: x.len(),
                labels: y.len(),
            });
        }
        Ok(EncodedSequence {
            features: self.encode_features(x),
            labels: y.iter().map(|l| self.label(l)).collect::<Result<_, _>>()?,
        })
    }

    /// `[T × Y]` sums of state weights per position and label.
    pub(crate) fn unary(&self, x: &[Vec<usize>]) -> Vec<f64> {
        let y = self.num_labels();
        let state = self.state().data();
        let mut u = vec![0.0; x.len() * y];
        for (t, feats) in x.iter().enumerate() {
            let row = &mut u[t * y..(t + 1) * y];
            for &f in feats {
                for (o, w) in row.iter_mut().zip(&state[f * y..(f + 1) * y]) {
                    *o += w;
                }
            }
        }
        u
    }

    pub(crate) fn score_encoded(&self, x: &[Vec<usize>], labels: &[usize]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        let y = self.num_labels();
        let state = self.state().data();
        let trans = self.transitions().data();
        let mut s = self.begin().data()[labels[0]] + self.end().data()[labels[labels.len() - 1]];
        for (t, (&l, feats)) in labels.iter().zip(x).enumerate() {
            for &f in feats {
                s += state[f * y + l];
            }
            if t > 0 {
                s += trans[labels[t - 1] * y + l];
            }
        }
        s
    }

    /// Score of a labelled sequence: state weights, begin, transitions, end.
    pub fn sequence_score(&self, x: &[FeatureSet], y: &[&str]) -> Result<f64, CrfError> {
        let enc = self.encode(x, y)?;
        Ok(self.score_encoded(&enc.features, &enc.labels))
    }

    pub(crate) fn lattice(&self, x: &[Vec<usize>]) -> Lattice {
        let ny = self.num_labels();
        let n = x.len();
        let unary = self.unary(x);
        let trans = self.transitions().data();
        let begin = self.begin().data();
        let end = self.end().data();
        let mut alpha = vec![0.0; n * ny];
        let mut beta = vec![0.0; n * ny];
        if n == 0 {
            return Lattice {
                unary,
                alpha,
                beta,
                log_z: 0.0,
            };
        }
        for y in 0..ny {
            alpha[y] = begin[y] + unary[y];
        }
        for t in 1..n {
            for y in 0..ny {
                let prev = &alpha[(t - 1) * ny..t * ny];
                let lse = log_sum_exp((0..ny).map(|p| prev[p] + trans[p * ny + y]));
                alpha[t * ny + y] = unary[t * ny + y] + lse;
            }
        }
        let last = (n - 1) * ny;
        beta[last..].copy_from_slice(end);
        for t in (0..n - 1).rev() {
            for y in 0..ny {
                let lse = log_sum_exp((0..ny).map(|q| trans[y * ny + q] + unary[(t + 1) * ny + q] + beta[(t + 1) * ny + q]));
                beta[t * ny + y] = lse;
            }
        }
        let log_z = log_sum_exp((0..ny).map(|y| alpha[last + y] + end[y]));
        Lattice {
            unary,
            alpha,
            beta,
            log_z,
        }
    }

    /// `log Σ_y exp(score(x, y))` by the forward recursion.
    pub fn log_partition(&self, x: &[FeatureSet]) -> f64 {
        self.lattice(&self.encode_features(x)).log_z
    }

    /// Per-position label marginals, `[T][Y]`.
    pub fn marginals(&self, x: &[FeatureSet]) -> Vec<Vec<f64>> {
        let ny = self.num_labels();
        let lat = self.lattice(&self.encode_features(x));
        (0..x.len())
            .map(|t| {
                (0..ny)
                    .map(|y| (lat.alpha[t * ny + y] + lat.beta[t * ny + y] - lat.log_z).exp())
                    .collect()
            })
            .collect()
    }

    pub(crate) fn viterbi_encoded(&self, x: &[Vec<usize>]) -> (Vec<usize>, f64) {
        let ny = self.num_labels();
        let n = x.len();
        if n == 0 || ny == 0 {
            return (Vec::new(), 0.0);
        }
        let unary = self.unary(x);
        let trans = self.transitions().data();
        let mut delta: Vec<f64> = (0..ny).map(|y| self.begin().data()[y] + unary[y]).collect();
        let mut back = vec![0usize; n * ny];
        for t in 1..n {
            let mut next = vec![0.0; ny];
            for y in 0..ny {
                // strict `>` keeps the lowest index on ties
                let mut best = 0;
                let mut best_v = delta[0] + trans[y];
                for p in 1..ny {
                    let v = delta[p] + trans[p * ny + y];
                    if v > best_v {
                        best = p;
                        best_v = v;
                    }
                }
                back[t * ny + y] = best;
                next[y] = best_v + unary[t * ny + y];
            }
            delta = next;
        }
        let end = self.end().data();
        let mut last = 0;
        let mut best = delta[0] + end[0];
        for y in 1..ny {
            if delta[y] + end[y] > best {
                last = y;
                best = delta[y] + end[y];
            }
        }
        let mut path = vec![last; n];
        for t in (1..n).rev() {
            path[t - 1] = back[t * ny + path[t]];
        }
        (path, best)
    }

    /// Highest-scoring label sequence and its score. Among equal scores the
    /// lowest label index wins at each backtracking step, starting from the
    /// last position.
    pub fn viterbi_decode(&self, x: &[FeatureSet]) -> (Vec<String>, f64) {
        let (path, score) = self.viterbi_encoded(&self.encode_features(x));
        (path.into_iter().map(|i| self.labels[i].clone()).collect(), score)
    }

    /// The `k` largest and `k` smallest transition weights as
    /// `(from, to, weight)`; `k` is clamped to `|Y|²`.
    pub fn top_transitions(&self, k: usize) -> (Vec<Transition>, Vec<Transition>) {
        let ny = self.num_labels();
        if k > ny * ny {
            log::warn!("requested {k} transitions but only {} exist", ny * ny);
        }
        let k = k.min(ny * ny);
        let mut all: Vec<(usize, usize, f64)> = (0..ny)
            .flat_map(|f| (0..ny).map(move |t| (f, t)))
            .map(|(f, t)| (f, t, self.transitions().data()[f * ny + t]))
            .collect();
        all.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        let name = |(f, t, w): (usize, usize, f64)| (self.labels[f].clone(), self.labels[t].clone(), w);
        let likely = all[..k].iter().copied().map(name).collect();
        let unlikely = all[all.len() - k..].iter().rev().copied().map(name).collect();
        (likely, unlikely)
    }
}
