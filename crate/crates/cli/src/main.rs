use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use embedrec::config::RunConfig;
use embedrec::pipeline::{self, ModelKind};
use embedrec::{Error, Result};

#[derive(Parser)]
#[command(
    name = "embedrec",
    version,
    about = "CF-embedding recommender on a small language model"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "embedrec.toml")]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest interactions; write the catalog and split.
    Prepare,
    /// Fit WALS user/item factors on the training split.
    CfFit,
    /// Train Stage 1, Stage 2, or the text-only baseline.
    Train {
        #[arg(long, value_parser = ["1", "2"], conflicts_with = "baseline", required_unless_present = "baseline")]
        stage: Option<String>,
        #[arg(long)]
        baseline: bool,
    },
    /// Rank the full catalog for every user and write HR/NDCG reports.
    Eval {
        #[arg(long, value_parser = ["val", "test"], default_value = "test")]
        which: String,
        #[arg(long, value_parser = ["stage1", "stage2", "baseline"], default_value = "stage2")]
        model: String,
        /// Also write per-user rankings.
        #[arg(long)]
        dump_rankings: bool,
    },
    /// Summarize test-split reports of all evaluated models.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.config)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Prepare => pipeline::cmd_prepare(&cfg),
        Command::CfFit => pipeline::cmd_cf_fit(&cfg),
        Command::Train { stage, baseline } => {
            let kind = match (stage.as_deref(), baseline) {
                (_, true) => ModelKind::Baseline,
                (Some("1"), _) => ModelKind::Stage1,
                _ => ModelKind::Stage2,
            };
            pipeline::cmd_train(&cfg, kind)
        }
        Command::Eval {
            which,
            model,
            dump_rankings,
        } => {
            let which = pipeline::parse_which(&which)?;
            let report = pipeline::cmd_eval(&cfg, model.parse()?, which, dump_rankings)?;
            for s in &report.slices {
                let v = s.values;
                println!(
                    "{}\t{}\tHR@5 {:.4}\tNDCG@5 {:.4}\tHR@10 {:.4}\tNDCG@10 {:.4}",
                    s.task.name(),
                    s.regime.name(),
                    v[0],
                    v[1],
                    v[2],
                    v[3]
                );
            }
            Ok(())
        }
        Command::Report => {
            print!("{}", pipeline::cmd_report(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
