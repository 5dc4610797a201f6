//! `pillgraph` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
//! 3 missing or stale upstream artifact.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pillgraph::{EdgeWeighting, Error};

#[derive(Parser)]
#[command(name = "pillgraph", version, about = "Pill recognition with a prescription knowledge graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Experiment config (TOML). Defaults to the built-in full-size settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the co-prescription knowledge graph from a corpus.
    BuildGraph {
        #[arg(long)]
        corpus: PathBuf,
        /// Class order; defaults to a `dictionary.json` next to the corpus.
        #[arg(long)]
        dictionary: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        cut_ratio: f64,
        #[arg(long, value_enum, default_value = "shared-only")]
        weighting: WeightingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train node embeddings for a graph.
    EmbedGraph {
        #[arg(long)]
        graph: PathBuf,
        /// Corpus the graph came from (its hash goes into the embedding
        /// header). Defaults to the one recorded in the graph's manifest.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the recognition model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Embedding file from `embed-graph` (not needed for the baseline).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained run on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one ablation variant (or all of them) end to end.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// full, baseline, no-pseudo, no-projection-attention or all.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        cut_ratio: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per edge-cut ratio.
    SweepEdges {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.2,0.5,0.75")]
        ratios: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an evaluation report (.json) or sweep table (.csv) as SVG.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum WeightingArg {
    SharedOnly,
    AllDiagnoses,
}

impl From<WeightingArg> for EdgeWeighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::SharedOnly => EdgeWeighting::SharedOnly,
            WeightingArg::AllDiagnoses => EdgeWeighting::AllDiagnoses,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> pillgraph::Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg, &out),
        Command::BuildGraph {
            corpus,
            dictionary,
            cut_ratio,
            weighting,
            out,
        } => commands::build_graph(&corpus, dictionary.as_deref(), cut_ratio, weighting.into(), &out),
        Command::EmbedGraph { graph, corpus, cfg, out } => {
            commands::embed_graph(&graph, corpus.as_deref(), &cfg, &out)
        }
        Command::Train {
            data,
            embeddings,
            cfg,
            variant,
            out,
        } => commands::train(&data, embeddings.as_deref(), &cfg, variant.as_deref(), &out),
        Command::Eval {
            data,
            run,
            embeddings,
            split,
            out,
        } => commands::eval(&data, &run, embeddings.as_deref(), &split, &out),
        Command::Ablate {
            data,
            cfg,
            mode,
            cut_ratio,
            out,
        } => commands::ablate(&data, &cfg, &mode, cut_ratio, &out),
        Command::SweepEdges { data, cfg, ratios, out } => commands::sweep_edges(&data, &cfg, &ratios, &out),
        Command::Plot { report, out } => commands::plot(&report, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
