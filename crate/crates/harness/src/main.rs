use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mergelab::config::{ExperimentConfig, Stage};
use mergelab::report::paper_scale_accounting;
use mergelab::{run_config, Result};
use mergelab_core::interventions::{count_extra_params, InterventionSpec};

#[derive(Parser, Debug)]
#[command(
    name = "mergelab",
    version,
    about = "Merge task models and repair them with interventions"
)]
struct Cli {
    /// Experiment config (`key = value` lines). Built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `experiment.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic tasks.
    Gen,
    /// Pre-train the shared backbone.
    Pretrain,
    /// Fine-tune one model per task.
    Finetune,
    /// Merge the task models with every configured method.
    Merge,
    /// Train task-specific interventions on the merged models.
    Intervene,
    /// Evaluate every model and record metrics.
    Eval,
    /// Stitched-network probe over split points.
    Stitch,
    /// Write figure CSVs and the summary.
    Report,
    /// Print extra-parameter counts.
    Params,
    /// Run several stages (default: those listed in the config).
    Run {
        /// Comma-separated stage names.
        #[arg(long, value_delimiter = ',')]
        stage: Vec<Stage>,
    },
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn print_params(cfg: &ExperimentConfig) {
    println!("ViT-B/32 scale, 8 tasks:");
    for (name, count, quoted) in paper_scale_accounting() {
        println!("  {name:<36} {count:>8}  (quoted {quoted})");
    }
    let (t, n, k) = (cfg.tasks, cfg.encoder.blocks, cfg.encoder.dim);
    println!("this config ({t} tasks, {n} blocks, width {k}):");
    println!(
        "  {:<36} {:>8}",
        format!("intervention {}", cfg.intervention.pattern),
        count_extra_params(&cfg.intervention, t, n, k)
    );
    println!(
        "  {:<36} {:>8}",
        format!("surgery r={}", cfg.surgery_rank),
        count_extra_params(&InterventionSpec::surgery(cfg.surgery_rank), t, n, k)
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load(&cli).and_then(|mut cfg| {
        let stages = match &cli.command {
            Command::Gen => vec![Stage::Gen],
            Command::Pretrain => vec![Stage::Pretrain],
            Command::Finetune => vec![Stage::Finetune],
            Command::Merge => vec![Stage::Merge],
            Command::Intervene => vec![Stage::Intervene],
            Command::Eval => vec![Stage::Eval],
            Command::Stitch => vec![Stage::Stitch],
            Command::Report => vec![Stage::Report],
            Command::Params => {
                print_params(&cfg);
                return Ok(());
            }
            Command::Run { stage } if !stage.is_empty() => stage.clone(),
            Command::Run { .. } => cfg.stages.clone(),
        };
        cfg.stages = stages;
        let out = run_config(&cfg)?;
        println!(
            "stages: {}",
            out.stages.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        );
        println!("metrics: {}", out.metrics.display());
        println!("summary: {}", out.summary.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
