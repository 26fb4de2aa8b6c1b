//! `etm`: preprocess a corpus, fit word embeddings and topic models,
//! evaluate them and inspect the results.

mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::settings::FileConfig;

#[derive(Debug, Parser)]
#[command(name = "etm", version, about = "Embedded topic model toolkit")]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// key = value file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs and, by default, inputs from earlier steps.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize, build the vocabulary and split the corpus.
    Preprocess(PreprocessArgs),
    /// Fit CBOW word embeddings on the training split.
    TrainEmbeddings(EmbeddingArgs),
    /// Fit the topic model.
    Train(TrainArgs),
    /// Coherence, diversity, quality and document completion on the test split.
    Eval(EvalArgs),
    /// Top words of each topic, most used topics first.
    Topics(TopicsArgs),
    /// Nearest neighbors of a term in embedding space.
    Neighbors(NeighborsArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Text file with one document per line, or a directory of .txt files.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Minimum number of documents a term must appear in [default: 2].
    #[arg(long)]
    pub min_docs: Option<usize>,
    /// Maximum document frequency of a term [default: 0.7].
    #[arg(long)]
    pub max_df: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbeddingArgs {
    /// Directory holding the preprocessed corpus [default: --out-dir].
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Embedding dimension [default: 300].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Context words on each side [default: 4].
    #[arg(long)]
    pub window: Option<usize>,
    /// [default: 5]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Token positions per step [default: 256].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.01]
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Number of topics [default: 50].
    #[arg(long, short = 'k')]
    pub num_topics: Option<usize>,
    /// Embedding dimension in joint mode [default: 300].
    #[arg(long)]
    pub dim: Option<usize>,
    /// Comma-separated encoder hidden widths [default: 800,800,800].
    #[arg(long)]
    pub hidden: Option<String>,
    /// Documents per minibatch [default: 1000].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 0.002]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 1.2e-6]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// `labeled` (fixed embeddings) or `joint` [default: joint].
    #[arg(long)]
    pub mode: Option<String>,
    /// Word embedding file; required in labeled mode.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Early-stopping patience in epochs of validation ELBO.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// [default: <out-dir>/model.etm]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TopicsArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Words shown per topic [default: 10].
    #[arg(long, short = 'n')]
    pub top_n: Option<usize>,
    /// Show only the most used topics.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NeighborsArgs {
    pub term: String,
    /// Neighbors to list [default: 10].
    #[arg(long, short = 'k')]
    pub k: Option<usize>,
    /// Word embedding file; otherwise the checkpoint's embeddings are used.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

pub struct Globals {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub file: FileConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let seed = file.get_or(cli.seed, "seed", 0)?;
    let out_dir = file.get_or(cli.out_dir, "out_dir", PathBuf::from("."))?;
    if let Some(n) = file.get::<usize>(cli.threads, "threads")? {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set up {n} threads: {e}")))?;
    }
    let g = Globals { seed, out_dir, file };
    match cli.command {
        Command::Preprocess(a) => commands::preprocess(&g, a),
        Command::TrainEmbeddings(a) => commands::train_embeddings(&g, a),
        Command::Train(a) => commands::train(&g, a),
        Command::Eval(a) => commands::eval(&g, a),
        Command::Topics(a) => commands::topics(&g, a),
        Command::Neighbors(a) => commands::neighbors(&g, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let err = CliError::Config(e.to_string().trim().to_owned());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
