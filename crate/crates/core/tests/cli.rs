use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tagforge::cli::{self, load_model, save_model, ExperimentConfig, Model, ModelContainer, ModelKind};
use tagforge::eval::{Averaging, EvalReport};
use tagforge::synth::{synthetic_corpus, to_gmb_csv};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tagforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("TAGFORGE_LOG", "warn").output().expect("spawn tagforge")
}

fn toy_dataset(dir: &Path, n: usize) -> PathBuf {
    let p = dir.join("toy.csv");
    std::fs::write(&p, to_gmb_csv(&synthetic_corpus(n, 11))).unwrap();
    p
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string(cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained_crf(dir: &Path, n: usize) -> PathBuf {
    let data = toy_dataset(dir, n);
    let mut cfg = ExperimentConfig::new(&data, ModelKind::Crf, 3);
    cfg.crf.epochs = 8;
    cfg.output_dir = Some(dir.join("run"));
    cli::cmd_train(&cfg, &mut std::io::sink()).unwrap();
    dir.join("run/best.model")
}

#[test]
fn prepare_splits_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_dataset(tmp.path(), 100);
    let cfg = write_config(tmp.path(), &ExperimentConfig::new(&data, ModelKind::Crf, 5));
    for out in ["a", "b"] {
        let o = run(&["prepare", "--config", s(&cfg), "--out", s(&tmp.path().join(out))]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report: cli::PrepReport = serde_json::from_slice(&std::fs::read(tmp.path().join("a/prep_report.json")).unwrap()).unwrap();
    assert_eq!((report.train, report.valid), (80, 20));
    for f in ["train.snap", "valid.snap", "vocab.txt", "wordpiece.txt"] {
        assert_eq!(
            std::fs::read(tmp.path().join("a").join(f)).unwrap(),
            std::fs::read(tmp.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn entity_mapping_keeps_only_requested_types() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_dataset(tmp.path(), 60);
    let mut cfg = ExperimentConfig::new(&data, ModelKind::Crf, 5);
    cfg.entity_map = Some(vec!["per".into(), "gpe".into()]);
    cfg.output_dir = Some(tmp.path().join("out"));
    let report = cli::cmd_prepare(&cfg).unwrap();
    let labels: Vec<&str> = report.label_histogram.keys().map(String::as_str).collect();
    assert_eq!(labels, ["GPE", "O", "PER"]);
}

#[test]
fn crf_train_emits_best_model_and_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_dataset(tmp.path(), 50);
    let mut c = ExperimentConfig::new(&data, ModelKind::Crf, 1);
    c.crf.epochs = 6;
    let cfg = write_config(tmp.path(), &c);
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let progress: Vec<&str> = stdout.lines().filter(|l| l.starts_with("epoch=")).collect();
    assert_eq!(progress.len(), 6);
    assert!(progress[0].contains(" train_loss=") && progress[0].contains(" lr="));
    assert!(out.join("best.model").exists());
    assert_eq!(std::fs::read_dir(out.join("checkpoints")).unwrap().count(), 6);
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 6);

    let slim = tmp.path().join("slim");
    let o = run(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&slim),
        "--keep-best-only",
        "--epochs",
        "2",
    ]);
    assert!(o.status.success());
    assert!(slim.join("best.model").exists() && !slim.join("checkpoints").exists());
    assert_eq!(std::fs::read_to_string(slim.join("trace.csv")).unwrap().lines().count(), 3);
}

#[test]
fn eval_reports_and_exclude_o_only_changes_the_average() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained_crf(tmp.path(), 80);
    let data = tmp.path().join("toy.csv");
    let with = tmp.path().join("with");
    let without = tmp.path().join("without");
    assert!(run(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(&with)])
        .status
        .success());
    let o = run(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--out",
        s(&without),
        "--exclude-O",
    ]);
    assert!(o.status.success());
    let read =
        |d: &Path| -> EvalReport { serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap() };
    let (a, b) = (read(&with), read(&without));
    // the synthetic corpus is separable, so the training set is fit exactly
    assert_eq!(a.flat_f1, 1.0);
    assert_eq!(a.labels, b.labels);
    assert!(a.include_o && !b.include_o);
    assert_eq!(
        serde_json::from_str::<EvalReport>(&serde_json::to_string(&a).unwrap()).unwrap(),
        a
    );
    assert!(std::fs::read_to_string(with.join("confusion.csv"))
        .unwrap()
        .starts_with("true\\pred,"));

    let direct = cli::cmd_eval(&model, &data, None, Averaging::Macro, true).unwrap();
    assert_eq!(direct.averaging, Averaging::Macro);
}

#[test]
fn predict_blocks_and_warnings() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained_crf(tmp.path(), 80);
    let input = tmp.path().join("in.txt");
    std::fs::write(
        &input,
        "Alice will go to China this Saturday! Her father works in WHO .\n\nParis|NNP\n",
    )
    .unwrap();
    let o = run(&["predict", "--model", s(&model), "--input", s(&input)]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout.clone()).unwrap();
    // every block, empty or not, ends with a blank line
    let mut blocks: Vec<Vec<&str>> = vec![vec![]];
    for line in text.lines() {
        match line {
            "" => blocks.push(vec![]),
            l => blocks.last_mut().unwrap().push(l),
        }
    }
    assert_eq!(blocks.pop(), Some(vec![]));
    assert_eq!(blocks.len(), 3);
    assert_eq!(blocks[0].len(), 13);
    assert!(blocks[0].iter().all(|l| l.split('\t').count() == 3));
    assert!(blocks[1].is_empty());
    assert!(blocks[2][0].starts_with("Paris\tNNP\t"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty"));
    assert_eq!(run(&["predict", "--model", s(&model), "--input", s(&input)]).stdout, o.stdout);
}

#[test]
fn inspect_transitions_blocks() {
    let tmp = tempfile::tempdir().unwrap();
    let model = trained_crf(tmp.path(), 80);
    let o = run(&["inspect-transitions", "--model", s(&model), "-k", "10"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let blocks: Vec<Vec<&str>> = text.trim_end().split("\n\n").map(|b| b.lines().skip(1).collect()).collect();
    assert_eq!(blocks.len(), 2);
    assert!(blocks.iter().all(|b| b.len() == 10 && b.iter().all(|r| r.contains(" → "))));
    let weight = |r: &str| r.split_whitespace().last().unwrap().parse::<f64>().unwrap();
    assert!(blocks[0].windows(2).all(|w| weight(w[0]) >= weight(w[1])));
    assert!(blocks[1].windows(2).all(|w| weight(w[0]) <= weight(w[1])));
}

#[test]
fn inspect_transitions_rejects_neural_models() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_dataset(tmp.path(), 30);
    let mut cfg = ExperimentConfig::new(&data, ModelKind::Bilstm, 1);
    cfg.bilstm.emb_dim = 4;
    cfg.bilstm.units = 3;
    cfg.set_epochs(1);
    cfg.output_dir = Some(tmp.path().join("run"));
    cli::cmd_train(&cfg, &mut std::io::sink()).unwrap();
    let o = run(&["inspect-transitions", "--model", s(&tmp.path().join("run/best.model"))]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("crf"));
}

#[test]
fn container_round_trip_and_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let path = trained_crf(tmp.path(), 60);
    let c = load_model(&path).unwrap();
    let copy = tmp.path().join("copy.model");
    save_model(&copy, &c).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&path).unwrap());
    let model = Model::from_container(&c).unwrap();
    assert_eq!(model.to_container(&c.config["experiment"]).unwrap(), c);

    let bytes = std::fs::read(&path).unwrap();
    let cut = tmp.path().join("cut.model");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(ModelContainer::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    let o = run(&["inspect-transitions", "--model", s(&cut)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
}

#[test]
fn tokenize_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy_dataset(tmp.path(), 40);
    let mut cfg = ExperimentConfig::new(&data, ModelKind::Bertlike, 1);
    cfg.output_dir = Some(tmp.path().join("prep"));
    cli::cmd_prepare(&cfg).unwrap();
    let input = tmp.path().join("in.txt");
    std::fs::write(&input, "Paris Zzyzx\n").unwrap();
    let o = run(&[
        "tokenize",
        "--vocab",
        s(&tmp.path().join("prep/wordpiece.txt")),
        "--input",
        s(&input),
    ]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows[0][1], "[CLS]");
    assert_eq!(rows[1][1..], ["paris", "0", "1"]);
    // an unseen word spells out in known characters
    let zz: String = rows[2..].iter().map(|r| r[1].trim_start_matches("##")).collect();
    assert_eq!(zz, "zzyzx");
    assert_eq!(rows[2..].iter().filter(|r| r[3] == "1").count(), 1);
}

#[test]
fn curves_command() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace.csv");
    std::fs::write(
        &trace,
        "epoch,train_loss,valid_loss,lr\n1,1.0,0.9,0.1\n2,0.7,0.6,0.1\n3,0.5,0.65,0.1\n4,0.4,0.7,0.1\n",
    )
    .unwrap();
    let json = tmp.path().join("curves.json");
    let o = run(&["curves", "--trace", s(&trace), "--json", s(&json)]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["checkpoint_epoch"], 2);
    assert_eq!(v["overfit_onset"], 3);
}

#[test]
fn errors_exit_nonzero_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        &ExperimentConfig::new(tmp.path().join("missing.csv"), ModelKind::Crf, 1),
    );
    let o = run(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!o.status.success());
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));
}
