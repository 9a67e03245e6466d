//! `recloop`: data preparation, batch rollouts, evaluation, scoring and the
//! session server behind one binary.
//!
//! Exit codes: 0 on success, 1 on a domain error (reported on stderr as one
//! `error: ...` line), 2 on a usage error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "recloop", version, about = "Multi-turn reasoning-retrieval recommendation environment")]
pub struct Cli {
    /// Environment config file (TOML)
    #[arg(long, global = true, env = "DEEPREC_CONFIG")]
    pub config: Option<PathBuf>,

    /// Worker threads [default: all cores for rollout and eval, 1 otherwise]
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter raw interactions into per-user chronological sequences
    Ingest(IngestArgs),
    /// Leave-one-out split of sequences into train, valid and test samples
    Split(SplitArgs),
    /// Keep samples whose label the history-only retriever ranks highly
    Select(SelectArgs),
    /// Run the HTTP session server
    Serve(ServeArgs),
    /// Run a policy over samples and write one record per episode
    Rollout(RolloutArgs),
    /// Recall and NDCG for the retriever, policies or saved batches
    Eval(EvalArgs),
    /// Score one trajectory record against a label
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Item catalog, JSON lines with external_id, title and optional aux_text
    #[arg(long)]
    pub items: PathBuf,
    /// Interactions CSV with a header: user, item, rating, timestamp
    #[arg(long)]
    pub interactions: PathBuf,
    /// Output directory for items.jsonl, sequences.jsonl and ingest_report.json
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum interactions per user and per item [config: ingest.min_count; default: 5]
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Keep ratings strictly above this [config: ingest.min_rating; default: 3.0]
    #[arg(long)]
    pub min_rating: Option<f64>,
    /// Keep the most recent interactions per user [config: ingest.max_len; default: 20]
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Sequences file written by ingest
    #[arg(long)]
    pub sequences: PathBuf,
    /// Output samples file (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Samples to filter [config: corpus.samples]
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Output samples file (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
    /// Largest label rank kept [config: select.max_rank; default: 100]
    #[arg(long)]
    pub max_rank: Option<usize>,
    /// Filter every split instead of train only [config: select.train_only = false]
    #[arg(long)]
    pub all_splits: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen port [config: server.port; default: 8080]
    #[arg(long, env = "DEEPREC_PORT")]
    pub port: Option<u16>,
    /// Listen address
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// Samples file [config: corpus.samples]
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// Which split to run [config: batch.split; default: test]
    #[arg(long, value_enum)]
    pub split: Option<SplitChoice>,
    /// Use only the first N selected samples
    #[arg(long)]
    pub limit: Option<usize>,
    /// Episodes per sample [config: batch.rollouts; default: 1]
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Batch seed [config: rollout.seed; default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Policy: oracle, random:<seed>, template:<file.json> or remote:<url>
    #[arg(long)]
    pub policy: String,
    #[command(flatten)]
    pub batch: BatchArgs,
    /// Output batch file (JSON lines)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Policy to roll out and evaluate; repeatable
    #[arg(long)]
    pub policy: Vec<String>,
    /// Saved batch file to evaluate; repeatable
    #[arg(long = "batch-file")]
    pub batch_file: Vec<PathBuf>,
    #[command(flatten)]
    pub batch: BatchArgs,
    /// Cutoffs, comma separated [config: eval.ks; default: 5,10]
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Record file, one JSON line per table row
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageChoice {
    ColdStart,
    Recommendation,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// JSON file with {"trajectory": <trajectory record>, "label": <item id>}
    #[arg(long)]
    pub input: PathBuf,
    /// Stage whose total is reported [config: rewards.stage; default: recommendation]
    #[arg(long, value_enum)]
    pub stage: Option<StageChoice>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
