use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::container::{ModelContainer, SparseTable};
use super::{CliError, ModelKind};
use crate::corpus::{Token, Vocab};
use crate::crf::{sentence_features, CrfModel, CrfTrainConfig};
use crate::numgrad::ParamStore;
use crate::taggers::{
    BertLikeConfig, BertLikeTagger, BiLstmConfig, BiLstmTagger, SequenceTagger, TransformerConfig, TransformerTagger,
};
use crate::tokenizer::WordPieceVocab;

const CRF_STATE: &str = "crf.state";
const CRF_TENSORS: [&str; 3] = ["crf.transitions", "crf.begin", "crf.end"];

/// A trained model of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Crf(CrfModel),
    Transformer(TransformerTagger),
    Bilstm(BiLstmTagger),
    Bertlike(BertLikeTagger),
}

#[derive(Serialize, Deserialize)]
struct CrfLabels {
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SubwordVocab {
    pieces: WordPieceVocab,
    tags: Vec<String>,
}

fn tensors_of(params: &ParamStore) -> Vec<(String, crate::numgrad::Tensor)> {
    params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn params_of(c: &ModelContainer) -> ParamStore {
    let mut p = ParamStore::new();
    for (n, t) in &c.tensors {
        p.insert(n.clone(), t.clone());
    }
    p
}

fn field<T: serde::de::DeserializeOwned>(c: &ModelContainer, key: &str) -> Result<T, CliError> {
    let v = c
        .config
        .get(key)
        .ok_or_else(|| CliError::Config(format!("model snapshot lacks `{key}`")))?;
    Ok(serde_json::from_value(v.clone())?)
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Crf(_) => ModelKind::Crf,
            Model::Transformer(_) => ModelKind::Transformer,
            Model::Bilstm(_) => ModelKind::Bilstm,
            Model::Bertlike(_) => ModelKind::Bertlike,
        }
    }

    pub fn tags(&self) -> Vec<String> {
        match self {
            Model::Crf(m) => m.labels().to_vec(),
            Model::Transformer(m) => m.tags().to_vec(),
            Model::Bilstm(m) => m.tags().to_vec(),
            Model::Bertlike(m) => m.tags().to_vec(),
        }
    }

    /// Snapshot with `experiment` (the experiment config, or null) stored
    /// alongside the model's own hyperparameters and vocabulary.
    pub fn to_container(&self, experiment: &Value) -> Result<ModelContainer, CliError> {
        let kind = self.kind().name().to_string();
        Ok(match self {
            Model::Crf(m) => {
                let entries = m.sparse_state_weights();
                ModelContainer {
                    kind,
                    config: json!({
                        "model": experiment.get("crf").cloned().unwrap_or(serde_json::to_value(CrfTrainConfig::default())?),
                        "vocab": CrfLabels { labels: m.labels().to_vec() },
                        "experiment": experiment,
                    }),
                    tensors: vec![
                        (CRF_TENSORS[0].into(), m.transitions().clone()),
                        (CRF_TENSORS[1].into(), m.begin().clone()),
                        (CRF_TENSORS[2].into(), m.end().clone()),
                    ],
                    sparse: vec![SparseTable {
                        name: CRF_STATE.into(),
                        keys: entries.iter().map(|(f, l, _)| (f.clone(), l.clone())).collect(),
                        values: entries.iter().map(|e| e.2).collect(),
                    }],
                }
            }
            Model::Transformer(m) => ModelContainer {
                kind,
                config: json!({"model": m.config, "vocab": m.vocab, "experiment": experiment}),
                tensors: tensors_of(&m.params),
                sparse: vec![],
            },
            Model::Bilstm(m) => ModelContainer {
                kind,
                config: json!({"model": m.config, "vocab": m.vocab, "experiment": experiment}),
                tensors: tensors_of(&m.params),
                sparse: vec![],
            },
            Model::Bertlike(m) => ModelContainer {
                kind,
                config: json!({
                    "model": m.config,
                    "vocab": SubwordVocab { pieces: m.vocab.clone(), tags: m.tags.clone() },
                    "experiment": experiment,
                }),
                tensors: tensors_of(&m.params),
                sparse: vec![],
            },
        })
    }

    pub fn from_container(c: &ModelContainer) -> Result<Self, CliError> {
        let kind = ModelKind::parse(&c.kind).ok_or_else(|| CliError::Config(format!("unknown model kind `{}`", c.kind)))?;
        Ok(match kind {
            ModelKind::Crf => {
                let labels: CrfLabels = field(c, "vocab")?;
                let state = c
                    .sparse_table(CRF_STATE)
                    .ok_or_else(|| CliError::Config(format!("missing `{CRF_STATE}`")))?;
                let dense = CRF_TENSORS
                    .iter()
                    .map(|n| c.tensor(n).cloned().ok_or_else(|| CliError::Config(format!("missing `{n}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                let entries: Vec<(String, String, f64)> = state
                    .keys
                    .iter()
                    .zip(&state.values)
                    .map(|((f, l), w)| (f.clone(), l.clone(), *w))
                    .collect();
                let [t, b, e]: [_; 3] = dense.try_into().expect("three tensors");
                Model::Crf(CrfModel::from_sparse(labels.labels, &entries, t, b, e)?)
            }
            ModelKind::Transformer => {
                let cfg: TransformerConfig = field(c, "model")?;
                let vocab: Vocab = field(c, "vocab")?;
                Model::Transformer(TransformerTagger::from_parts(cfg, vocab, params_of(c))?)
            }
            ModelKind::Bilstm => {
                let cfg: BiLstmConfig = field(c, "model")?;
                let vocab: Vocab = field(c, "vocab")?;
                Model::Bilstm(BiLstmTagger::from_parts(cfg, vocab, params_of(c))?)
            }
            ModelKind::Bertlike => {
                let cfg: BertLikeConfig = field(c, "model")?;
                let v: SubwordVocab = field(c, "vocab")?;
                Model::Bertlike(BertLikeTagger::from_parts(cfg, v.pieces, v.tags, params_of(c))?)
            }
        })
    }

    /// Tags for `(word, POS)` sentences. POS only feeds the CRF features.
    pub fn predict(&self, sentences: &[Vec<(String, String)>]) -> Result<Vec<Vec<String>>, CliError> {
        let words: Vec<Vec<&str>> = sentences
            .iter()
            .map(|s| s.iter().map(|(w, _)| w.as_str()).collect())
            .collect();
        Ok(match self {
            Model::Crf(m) => {
                let empty = sentences.iter().filter(|s| s.is_empty()).count();
                if empty > 0 {
                    log::warn!("skipping {empty} empty sentence(s)");
                }
                crate::par::map(sentences, |s| {
                    if s.is_empty() {
                        return Vec::new();
                    }
                    let tokens: Vec<Token> = s.iter().map(|(w, p)| Token::new(w.as_str(), p.as_str(), "O")).collect();
                    m.viterbi_decode(&sentence_features(&tokens)).0
                })
            }
            Model::Transformer(m) => m.predict(&words)?,
            Model::Bilstm(m) => m.predict(&words)?,
            Model::Bertlike(m) => m.predict(&words)?,
        })
    }
}
