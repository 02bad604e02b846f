//! `inflect`: extract, split, train, predict, evaluate and inspect.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
//! failure during training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inflect_core::model::ModelError;

use config::Mode;

/// Bad flags, bad config values or a refused overwrite.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "inflect", version, about = "Morphological inflection from treebank data")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Collect (lemma, tags, form) triples with counts from CoNLL-U files.
    Extract(ExtractArgs),
    /// Lemma-disjoint, frequency-weighted train/dev/test split of one corpus.
    Split(SplitArgs),
    /// Train one model per language (mono) or one joint model (multi).
    Train(TrainArgs),
    /// Inflect the lemmas of a file with a trained model.
    Predict(PredictArgs),
    /// Exact-match accuracy on test sets, optionally against a second model.
    Evaluate(EvaluateArgs),
    /// Size and copy-rate summary of canonical triple files.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// CoNLL-U input files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub language: String,
    /// Output file; defaults to `<corpora>/<language>.tsv`.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub lowercase: bool,
    #[arg(long)]
    pub nfc: bool,
    /// Keep tokens whose lemma or form is `_`.
    #[arg(long)]
    pub keep_underscore: bool,
    /// UPOS values to drop.
    #[arg(long, value_delimiter = ',')]
    pub skip_upos: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub language: String,
    /// Canonical corpus; defaults to `<corpora>/<language>.tsv`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Defaults to `<splits>/<language>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Target mass fractions for train, dev and test.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub ratios: Option<Vec<f64>>,
    #[arg(long)]
    pub min_lemmas: Option<usize>,
    /// Replace an existing split.
    #[arg(long)]
    pub force: bool,
    /// Only re-audit the split files already in the output directory.
    #[arg(long, conflicts_with = "force")]
    pub audit: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, value_delimiter = ',')]
    pub languages: Option<Vec<String>>,
    /// Directory holding `<language>/{train,dev}.tsv`.
    #[arg(long)]
    pub splits_dir: Option<PathBuf>,
    /// Run directory; defaults to `<checkpoints>/<mode>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Also decode the training set once training ends and report its accuracy.
    #[arg(long)]
    pub report_train_accuracy: bool,
    /// Replace existing checkpoints.
    #[arg(long)]
    pub force: bool,
    /// No per-evaluation progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum QueryFormat {
    /// `lemma\ttags[\tform[\tcount]]`
    Canonical,
    LemmaFormTags,
    LemmaTagsForm,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Run directory (holding `model.ckpt`, or one subdirectory per language).
    #[arg(long, required_unless_present = "checkpoint")]
    pub model: Option<PathBuf>,
    #[arg(long, requires = "vocab", conflicts_with = "model")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "canonical")]
    pub format: QueryFormat,
    #[arg(long)]
    pub language: String,
    /// `-` for standard output.
    #[arg(long, short, default_value = "-")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory of the model under test.
    #[arg(long)]
    pub model: PathBuf,
    /// Second run directory; adds a per-language comparison.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Display names of the two models; defaults to the directory names.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub names: Option<Vec<String>>,
    /// `language=path` test files; defaults to `<splits>/<language>/test.tsv`
    /// for every configured language.
    #[arg(long = "test")]
    pub tests: Vec<String>,
    #[arg(long)]
    pub languages: Option<Vec<String>>,
    /// Defaults to `<reports>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Compare forms after Unicode NFC instead of byte for byte.
    #[arg(long)]
    pub nfc: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

/// Exit code for an error: numerical failures 3, usage 1, anything else 2.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| matches!(e.downcast_ref::<ModelError>(), Some(ModelError::NonFiniteLoss { .. }))) {
        3
    } else if err.chain().any(|e| e.is::<UsageError>()) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = config::RunConfig::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Extract(a) => commands::extract(&cfg, a),
        Command::Split(a) => commands::split(&cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Stats(a) => commands::stats(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
