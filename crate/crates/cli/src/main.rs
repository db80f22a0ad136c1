//! `sono-align` command-line entry point.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid config or input,
//! 3 numeric abort during training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sono_align::dataset::Split;
use sono_align::{Ablation, ErrorKind};

#[derive(Parser)]
#[command(name = "sono-align", version, about = "Taxonomy-aware image-text alignment on synthetic ultrasound data")]
struct Cli {
    #[command(flatten)]
    catalog: CatalogArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct CatalogArgs {
    /// Run config (JSON); supplies catalog and similarity-table paths to every command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra similarity-table file applied on top of the catalog (repeatable).
    #[arg(long = "sim-table", global = true)]
    pub sim_tables: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its case-level split manifest.
    GenData {
        /// Output directory for records.jsonl and split.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split manifest; a fresh split is drawn from the config when absent.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training log path (defaults to `<checkpoint stem>.log.jsonl`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// full, Ds, Dg, or Dsg.
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Zero-shot and retrieval metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Partition to evaluate; needs a manifest.
        #[arg(long)]
        split: Option<Split>,
        /// Split manifest used with --split.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// JSON report path; the text table always goes to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Retrieval cutoffs, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Print the batch prior and its coverage for the given image ids.
    ShowPrior {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        batch_ids: Vec<String>,
        /// Also export the matrix as CSV (coverage goes next to it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one record's lesion-attribute graph.
    InspectGraph {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        image_id: String,
        /// Write the graph in DOT format to this path.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Write image, text, and fused embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> sono_align::Result<()> {
    let ctx = commands::Context::load(&cli.catalog)?;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&ctx, &out),
        Command::Train {
            data,
            split,
            out,
            log,
            epochs,
            ablation,
        } => commands::train(
            ctx,
            commands::TrainArgs {
                data,
                split,
                out,
                log,
                epochs,
                ablation,
            },
        ),
        Command::Eval {
            checkpoint,
            data,
            split,
            manifest,
            report,
            k,
        } => commands::eval(
            &ctx,
            commands::EvalArgs {
                checkpoint,
                data,
                split,
                manifest,
                report,
                ks: k,
            },
        ),
        Command::ShowPrior { data, batch_ids, out } => commands::show_prior(&ctx, data, &batch_ids, out),
        Command::InspectGraph { data, image_id, dot } => commands::inspect_graph(&ctx, data, &image_id, dot),
        Command::ExportEmbeddings { checkpoint, data, out } => commands::export(&ctx, &checkpoint, data, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Io => 1,
                ErrorKind::Validation => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}
