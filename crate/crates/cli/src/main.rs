use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use asrep::pipeline::{self, DataFormat, Mode, PipelineConfig, Stage};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

/// Reverse pre-training, pseudo-prior augmentation and fine-tuning for
/// sequential recommendation.
#[derive(Debug, Parser)]
#[command(name = "asrep", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the dataset and write the vocabulary and sequences.
    Ingest,
    /// Train the reverse model.
    Pretrain,
    /// Prepend pseudo-prior items to short sequences.
    Augment,
    /// Train the forward model.
    Finetune,
    /// Rank held-out test items and write the report.
    Evaluate,
    /// Every stage.
    Run,
    /// Full runs over a grid of k and M, summarized in sweep.csv.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        ms: Vec<usize>,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Asrep,
    ReTrain,
    NoAugmentBaseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Asrep => Mode::Asrep,
            ModeArg::ReTrain => Mode::ReTrain,
            ModeArg::NoAugmentBaseline => Mode::NoAugmentBaseline,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    JsonLines,
    Tsv,
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML configuration file; flags below take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Pseudo-prior items to generate per short sequence.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Length threshold: sequences no longer than this are augmented.
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
}

impl Overrides {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v.into();
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.m {
            cfg.m = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = self.format {
            cfg.format = match v {
                FormatArg::JsonLines => DataFormat::JsonLines,
                FormatArg::Tsv => DataFormat::Tsv,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_report(report: &asrep::evaluation::EvalReport) {
    let o = &report.overall;
    println!("users      {}", o.cases);
    println!("recall@5   {:.4}", o.recall_at_5);
    println!("ndcg@5     {:.4}", o.ndcg_at_5);
    println!("mrr        {:.4}", o.mrr);
    for (bucket, m) in &report.buckets {
        println!("  {bucket:>5}  n={:<6} recall@5 {:.4}  ndcg@5 {:.4}", m.cases, m.recall_at_5, m.ndcg_at_5);
    }
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    let stage = match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        Command::Sweep { ks, ms } => {
            let rows = pipeline::sweep(&cfg, &ks, &ms)?;
            println!("k,m,recall@5,ndcg@5,mrr");
            for r in rows {
                let o = r.report.overall;
                println!("{},{},{:.4},{:.4},{:.4}", r.k, r.m, o.recall_at_5, o.ndcg_at_5, o.mrr);
            }
            return Ok(());
        }
        Command::Ingest => Stage::Ingest,
        Command::Pretrain => Stage::Pretrain,
        Command::Augment => Stage::Augment,
        Command::Finetune => Stage::Finetune,
        Command::Evaluate | Command::Run => Stage::Evaluate,
    };
    let out = pipeline::run_until(&cfg, stage)?;
    for a in &out.manifest.artifacts {
        println!("{:<11} {}", a.name, a.path.display());
    }
    if let Some(report) = &out.report {
        print_report(report);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
