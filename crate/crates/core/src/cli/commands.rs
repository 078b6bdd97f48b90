use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::container::{load_model, save_model};
use super::model::Model;
use super::{io_err, CliError, ExperimentConfig, ModelKind};
use crate::corpus::{
    label_histogram, load_conll, load_gmb_csv, map_entities, repair_bio, split, validate_bio, write_conll, Sentence, Vocab,
};
use crate::crf::{self, CrfError, CrfTrainData};
use crate::eval::{analyze_curve, evaluate, Averaging, CurvePoint, CurveReport, EvalReport, DEFAULT_PLATEAU_EPS};
use crate::taggers::{
    load_embeddings, train_tagger, BertLikeTagger, BiLstmTagger, EpochRecord, SequenceTagger, TaggerError, TransformerTagger,
};
use crate::tokenizer::{encode_sentence, wordpiece_tokenize, WordPieceVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepReport {
    pub sentences: usize,
    pub train: usize,
    pub valid: usize,
    pub bio_violations: usize,
    pub repaired: bool,
    pub label_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub train: Vec<Sentence>,
    pub valid: Vec<Sentence>,
    /// Built from the whole (prepared) corpus.
    pub vocab: Vocab,
    pub report: PrepReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: ModelKind,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

fn load_any(path: &Path) -> Result<Vec<Sentence>, CliError> {
    let csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    Ok(if csv { load_gmb_csv(path)? } else { load_conll(path)? })
}

/// BIO repair and entity mapping as configured; returns the violation count.
fn normalize(corpus: Vec<Sentence>, cfg: &ExperimentConfig) -> Result<(Vec<Sentence>, usize), CliError> {
    let violations = validate_bio(&corpus).len();
    let mut corpus = if cfg.repair_bio {
        repair_bio(&corpus)
    } else {
        if violations > 0 {
            log::warn!("{violations} BIO violation(s) left unrepaired");
        }
        corpus
    };
    if let Some(keep) = &cfg.entity_map {
        let keep: BTreeSet<String> = keep.iter().map(|k| k.to_uppercase()).collect();
        corpus = map_entities(&corpus, &keep)?;
    }
    Ok((corpus, violations))
}

/// Loads, normalizes and splits the dataset in memory.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    cfg.validate()?;
    let mut corpus = load_any(&cfg.dataset)?;
    if let Some(n) = cfg.max_sentences {
        corpus.truncate(n);
    }
    let (corpus, violations) = normalize(corpus, cfg)?;
    let vocab = Vocab::build(&corpus, cfg.min_count);
    let (train, valid) = split(&corpus, cfg.split_ratio, cfg.seed)?;
    let report = PrepReport {
        sentences: corpus.len(),
        train: train.len(),
        valid: valid.len(),
        bio_violations: violations,
        repaired: cfg.repair_bio && violations > 0,
        label_histogram: label_histogram(&corpus),
    };
    Ok(Prepared {
        train,
        valid,
        vocab,
        report,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn write_snapshots(p: &Prepared, dir: &Path, min_count: usize) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("train.snap"), write_conll(&p.train))?;
    write_file(&dir.join("valid.snap"), write_conll(&p.valid))?;
    write_file(&dir.join("vocab.txt"), p.vocab.tokens_to_text())?;
    let pieces = WordPieceVocab::from_words(p.train.iter().chain(&p.valid).flat_map(|s| s.words()), min_count);
    write_file(&dir.join("wordpiece.txt"), pieces.to_text())?;
    write_file(&dir.join("prep_report.json"), serde_json::to_string_pretty(&p.report)? + "\n")
}

/// Writes `train.snap`, `valid.snap`, `vocab.txt`, `wordpiece.txt` and
/// `prep_report.json` to the output directory.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<PrepReport, CliError> {
    let p = prepare(cfg)?;
    write_snapshots(&p, cfg.output_dir()?, cfg.min_count)?;
    Ok(p.report)
}

/// Files of one training run.
struct RunFiles<'a> {
    dir: &'a Path,
    experiment: Value,
    keep_best_only: bool,
}

impl RunFiles<'_> {
    fn checkpoint(&self, model: &Model, epoch: usize) -> Result<(), CliError> {
        if self.keep_best_only {
            return Ok(());
        }
        let dir = self.dir.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_model(
            dir.join(format!("epoch-{epoch:03}.model")),
            &model.to_container(&self.experiment)?,
        )?;
        Ok(())
    }

    fn best(&self, model: &Model) -> Result<(), CliError> {
        save_model(self.dir.join("best.model"), &model.to_container(&self.experiment)?)?;
        Ok(())
    }

    fn finish(&self, summary: &TrainSummary) -> Result<(), CliError> {
        let mut csv = String::from("epoch,train_loss,valid_loss,lr\n");
        for r in &summary.epochs {
            let _ = writeln!(csv, "{},{},{},{}", r.epoch, r.train_loss, r.valid_loss, r.lr);
        }
        write_file(&self.dir.join("trace.csv"), csv)?;
        write_file(&self.dir.join("run.json"), serde_json::to_string_pretty(summary)? + "\n")
    }
}

fn progress_line(r: &EpochRecord) -> String {
    format!(
        "epoch={} train_loss={} valid_loss={} lr={}",
        r.epoch, r.train_loss, r.valid_loss, r.lr
    )
}

/// Trains the configured model. Prints one progress line per epoch to
/// `out` and writes per-epoch checkpoints (unless `keep_best_only`),
/// `trace.csv`, `run.json` and `best.model`. On divergence the best model
/// so far is still written before the error is returned.
pub fn cmd_train(cfg: &ExperimentConfig, out: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let p = prepare(cfg)?;
    let dir = cfg.output_dir()?;
    write_snapshots(&p, dir, cfg.min_count)?;
    let files = RunFiles {
        dir,
        experiment: serde_json::to_value(cfg)?,
        keep_best_only: cfg.keep_best_only,
    };
    let summary = match cfg.model {
        ModelKind::Crf => train_crf(cfg, &p, &files, out)?,
        ModelKind::Transformer => {
            let emb = embeddings(cfg, &p.vocab, cfg.transformer.emb_dim)?;
            let mut m = TransformerTagger::new(cfg.transformer.clone(), p.vocab.clone(), emb, cfg.seed)?;
            train_neural(&mut m, Model::Transformer, cfg, &p, &files, out)?
        }
        ModelKind::Bilstm => {
            let emb = embeddings(cfg, &p.vocab, cfg.bilstm.emb_dim)?;
            let mut m = BiLstmTagger::new(cfg.bilstm.clone(), p.vocab.clone(), emb, cfg.seed)?;
            train_neural(&mut m, Model::Bilstm, cfg, &p, &files, out)?
        }
        ModelKind::Bertlike => {
            let words = p.train.iter().chain(&p.valid).flat_map(|s| s.words());
            let pieces = WordPieceVocab::from_words(words, cfg.min_count);
            let mut m = BertLikeTagger::new(cfg.bertlike.clone(), pieces, p.vocab.tags().to_vec(), cfg.seed)?;
            train_neural(&mut m, Model::Bertlike, cfg, &p, &files, out)?
        }
    };
    files.finish(&summary)?;
    Ok(summary)
}

fn embeddings(cfg: &ExperimentConfig, vocab: &Vocab, dim: usize) -> Result<Option<crate::numgrad::Tensor>, CliError> {
    match &cfg.embeddings {
        None => Ok(None),
        Some(path) => {
            let (table, found) = load_embeddings(path, vocab, dim, cfg.seed)?;
            log::info!("pretrained vectors for {found} of {} words", vocab.num_tokens());
            Ok(Some(table))
        }
    }
}

fn train_neural<M: SequenceTagger + Clone>(
    model: &mut M,
    wrap: fn(M) -> Model,
    cfg: &ExperimentConfig,
    p: &Prepared,
    files: &RunFiles<'_>,
    out: &mut dyn Write,
) -> Result<TrainSummary, CliError> {
    let tcfg = cfg.train_config();
    let mut failure: Option<CliError> = None;
    let mut completed = 0usize;
    let result = train_tagger(model, &p.train, &p.valid, &tcfg, |r, m| {
        completed += 1;
        if failure.is_some() {
            return;
        }
        let step = writeln!(out, "{}", progress_line(r))
            .map_err(io_err(Path::new("<stdout>")))
            .and_then(|_| files.checkpoint(&wrap(m.clone()), r.epoch));
        if let Err(e) = step {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    match result {
        Ok(run) => {
            files.best(&wrap(model.clone()))?;
            Ok(TrainSummary {
                kind: cfg.model,
                seed: cfg.seed,
                best_epoch: run.best_epoch,
                epochs: run.epochs,
            })
        }
        Err(e @ TaggerError::Diverged { .. }) => {
            if completed > 0 {
                files.best(&wrap(model.clone()))?;
            }
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn train_crf(cfg: &ExperimentConfig, p: &Prepared, files: &RunFiles<'_>, out: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let ccfg = cfg.crf_config();
    let data = CrfTrainData::from_corpus(&p.train);
    // validation sentences with labels unseen in training have zero
    // probability under the model and are left out of the loss
    let seen: BTreeSet<&str> = p.train.iter().flat_map(|s| s.tags()).collect();
    let valid: Vec<Sentence> = p
        .valid
        .iter()
        .filter(|s| s.tags().iter().all(|t| seen.contains(t)))
        .cloned()
        .collect();
    if valid.len() < p.valid.len() {
        log::warn!(
            "{} validation sentence(s) carry labels unseen in training; excluded from the validation loss",
            p.valid.len() - valid.len()
        );
    }
    let vdata = CrfTrainData::from_corpus(&valid);
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, crf::CrfModel)> = None;
    let mut failure: Option<CliError> = None;
    let result = crf::train(&data, &ccfg, |e, m| {
        if failure.is_some() {
            return;
        }
        let step = (|| -> Result<(), CliError> {
            let valid_loss = m.mean_nll(&vdata.x, &vdata.y)?;
            let r = EpochRecord {
                epoch: e.epoch,
                train_loss: e.loss,
                valid_loss,
                lr: e.lr,
            };
            writeln!(out, "{}", progress_line(&r)).map_err(io_err(Path::new("<stdout>")))?;
            files.checkpoint(&Model::Crf(m.clone()), e.epoch)?;
            if best.as_ref().is_none_or(|b| valid_loss < b.0) {
                best = Some((valid_loss, e.epoch, m.clone()));
            }
            records.push(r);
            Ok(())
        })();
        if let Err(err) = step {
            failure = Some(err);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    match result {
        Ok(_) => {
            let (_, best_epoch, model) = best.expect("at least one epoch");
            files.best(&Model::Crf(model))?;
            Ok(TrainSummary {
                kind: ModelKind::Crf,
                seed: cfg.seed,
                best_epoch,
                epochs: records,
            })
        }
        Err(e @ CrfError::NonFinite { .. }) => {
            if let Some((_, _, model)) = best {
                files.best(&Model::Crf(model))?;
            }
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Evaluates a saved model on a dataset, applying the BIO repair and
/// entity mapping the model was trained with. Writes `report.json` and
/// `confusion.csv` to `out_dir` when given; returns the report.
pub fn cmd_eval(
    model_path: &Path,
    dataset: &Path,
    out_dir: Option<&Path>,
    averaging: Averaging,
    include_o: bool,
) -> Result<EvalReport, CliError> {
    let container = load_model(model_path)?;
    let model = Model::from_container(&container)?;
    let corpus = load_any(dataset)?;
    let corpus = match container.config.get("experiment") {
        Some(v) if !v.is_null() => {
            let exp: ExperimentConfig = serde_json::from_value(v.clone())?;
            normalize(corpus, &exp)?.0
        }
        _ => corpus,
    };
    let input: Vec<Vec<(String, String)>> = corpus
        .iter()
        .map(|s| s.tokens.iter().map(|t| (t.word.clone(), t.pos.clone())).collect())
        .collect();
    let truth: Vec<Vec<String>> = corpus
        .iter()
        .map(|s| s.tags().iter().map(|t| t.to_string()).collect())
        .collect();
    let pred = model.predict(&input)?;
    let report = evaluate(&truth, &pred, &model.tags(), averaging, include_o)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        write_file(&dir.join("confusion.csv"), report.confusion.to_csv())?;
    }
    Ok(report)
}

/// Splits a whitespace token into word and POS at its last `|`.
fn word_pos(token: &str) -> (String, String) {
    match token.rsplit_once('|') {
        Some((w, p)) if !w.is_empty() && !p.is_empty() => (w.to_string(), p.to_string()),
        _ => (token.to_string(), "_".to_string()),
    }
}

/// One sentence per input line (`word` or `word|POS` tokens). Each line
/// yields a block of `word<TAB>POS<TAB>tag` lines and a blank separator;
/// a missing POS prints as `_`.
pub fn cmd_predict(model_path: &Path, text: &str) -> Result<String, CliError> {
    let model = Model::from_container(&load_model(model_path)?)?;
    let sentences: Vec<Vec<(String, String)>> = text.lines().map(|l| l.split_whitespace().map(word_pos).collect()).collect();
    let tags = model.predict(&sentences)?;
    let mut out = String::new();
    for (s, t) in sentences.iter().zip(&tags) {
        for ((w, p), tag) in s.iter().zip(t) {
            let _ = writeln!(out, "{w}\t{p}\t{tag}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// `id<TAB>piece<TAB>word_index<TAB>active` per subword, `[CLS]` included,
/// with a blank line after each input line. Empty lines give empty blocks.
pub fn cmd_tokenize(vocab_path: &Path, text: &str) -> Result<String, CliError> {
    let vocab = WordPieceVocab::load(vocab_path)?;
    let mut out = String::new();
    for line in text.lines() {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            log::warn!("empty input line");
            out.push('\n');
            continue;
        }
        let needed = 1 + words
            .iter()
            .map(|w| wordpiece_tokenize(&w.to_lowercase(), &vocab).len())
            .sum::<usize>();
        let enc = encode_sentence(&words, None, &vocab, needed, false)?;
        for p in 0..enc.length {
            let id = enc.ids[p];
            let piece = vocab.piece(id).unwrap_or("[UNK]");
            let _ = writeln!(out, "{id}\t{piece}\t{}\t{}", enc.word_index[p], enc.active[p] as u8);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Two blocks of `k` rows, most likely then least likely transitions.
pub fn cmd_inspect_transitions(model_path: &Path, k: usize) -> Result<String, CliError> {
    let container = load_model(model_path)?;
    let Model::Crf(m) = Model::from_container(&container)? else {
        return Err(CliError::WrongKind {
            expected: "crf",
            found: container.kind,
        });
    };
    let (likely, unlikely) = m.top_transitions(k);
    let mut out = String::new();
    for (title, rows) in [("Top likely transitions:", likely), ("Top unlikely transitions:", unlikely)] {
        let _ = writeln!(out, "{title}");
        for (from, to, w) in rows {
            let _ = writeln!(out, "{from:<8} → {to:<8} {w:.6}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Reads `epoch`, `train_loss` and `valid_loss` columns from a trace CSV.
pub fn read_trace(path: &Path) -> Result<Vec<CurvePoint>, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::Config(format!("trace lacks a `{name}` column")))
    };
    let (ce, ct, cv) = (col("epoch")?, col("train_loss")?, col("valid_loss")?);
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64, CliError> {
            rec.get(c)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::Config(format!("trace row {}: bad number in column {c}", i + 1)))
        };
        points.push(CurvePoint {
            epoch: num(ce)? as usize,
            train_loss: num(ct)?,
            valid_loss: num(cv)?,
        });
    }
    Ok(points)
}

/// Curve analysis of a trace CSV; also writes it as JSON to `json_out`.
pub fn cmd_curves(trace: &Path, json_out: Option<&Path>) -> Result<CurveReport, CliError> {
    let report = analyze_curve(&read_trace(trace)?, DEFAULT_PLATEAU_EPS)?;
    if let Some(p) = json_out {
        write_file(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}
