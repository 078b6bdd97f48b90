use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tagforge::cli::{self, CliError, ExperimentConfig};
use tagforge::eval::Averaging;

/// Sequence-labeling experiments: CRF, transformer, BiLSTM and BERT-style
/// taggers.
#[derive(Parser)]
#[command(name = "tagforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.output_dir = Some(self.out.clone());
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AveragingArg {
    Weighted,
    Macro,
}

#[derive(Subcommand)]
enum Command {
    /// Load, repair, map and split a dataset into snapshots.
    Prepare(ExperimentArgs),
    /// Train the configured model.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        epochs: Option<usize>,
        /// Write only best.model, no per-epoch checkpoints.
        #[arg(long)]
        keep_best_only: bool,
    },
    /// Score a model on a labelled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.json and confusion.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "weighted")]
        averaging: AveragingArg,
        /// Leave O out of the averaged score.
        #[arg(long = "exclude-O")]
        exclude_o: bool,
    },
    /// Tag one sentence per input line (`-` reads standard input).
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "-")]
        input: PathBuf,
    },
    /// Show WordPiece pieces for one sentence per input line.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value = "-")]
        input: PathBuf,
    },
    /// Print the strongest and weakest CRF transitions.
    InspectTransitions {
        #[arg(long)]
        model: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
    /// Checkpoint, overfitting and plateau analysis of a trace CSV.
    Curves {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn read_input(path: &Path) -> Result<String, CliError> {
    let mut s = String::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut s).map_err(|source| CliError::Io {
            path: "<stdin>".into(),
            source,
        })?;
    } else {
        s = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(s)
}

fn run(command: Command) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let text = match command {
        Command::Prepare(exp) => {
            let report = cli::cmd_prepare(&exp.load()?)?;
            serde_json::to_string_pretty(&report)? + "\n"
        }
        Command::Train {
            exp,
            epochs,
            keep_best_only,
        } => {
            let mut cfg = exp.load()?;
            if let Some(e) = epochs {
                cfg.set_epochs(e);
            }
            cfg.keep_best_only |= keep_best_only;
            let summary = cli::cmd_train(&cfg, &mut out)?;
            format!("best_epoch={}\n", summary.best_epoch)
        }
        Command::Eval {
            model,
            data,
            out: dir,
            averaging,
            exclude_o,
        } => {
            let averaging = match averaging {
                AveragingArg::Weighted => Averaging::Weighted,
                AveragingArg::Macro => Averaging::Macro,
            };
            cli::cmd_eval(&model, &data, dir.as_deref(), averaging, !exclude_o)?.to_table()
        }
        Command::Predict { model, input } => cli::cmd_predict(&model, &read_input(&input)?)?,
        Command::Tokenize { vocab, input } => cli::cmd_tokenize(&vocab, &read_input(&input)?)?,
        Command::InspectTransitions { model, k } => cli::cmd_inspect_transitions(&model, k)?,
        Command::Curves { trace, json } => cli::cmd_curves(&trace, json.as_deref())?.to_text(),
    };
    out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
        path: "<stdout>".into(),
        source,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TAGFORGE_LOG", "warn"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
