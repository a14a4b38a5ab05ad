mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use learngene::vit::ModelConfig;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::stages::Layout;

#[derive(Parser, Debug)]
#[command(name = "learngene", version, about = "Learngene search, extraction and descendant building")]
struct Cli {
    /// Pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the configuration.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the task family and the held-out task.
    SynthData,
    /// Pretrain the ancestry network on the union of tasks.
    PretrainAns,
    /// Turn the ancestry network into a super-network.
    Expand,
    /// Train the super-network and infer per-task paths in both routing modes.
    TrainSearch,
    /// Tally base-block usage and extract the learngene.
    Extract,
    /// Expand the learngene into descendant networks.
    Build {
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Fine-tune descendant networks on the held-out task.
    Finetune {
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Evaluate fine-tuned networks, or one model on one dataset.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Learngene-initialized descendants against scratch twins.
    Compare {
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Batch-mode against Img-mode selected base blocks.
    ReportOverlap,
    /// Parameter storage of the learngene against per-depth descendants.
    ReportStorage {
        /// Use a named reference architecture instead of the extracted learngene.
        #[arg(long, value_parser = ["deit-b"])]
        reference: Option<String>,
        /// Depth list, `5..15` or `6,9,12`.
        #[arg(long, value_parser = parse_depth_list)]
        depths: Option<DepthList>,
        #[arg(long)]
        learngene_layers: Option<usize>,
    },
    /// Validate the configuration and print it with defaults filled in.
    ValidateConfig,
}

#[derive(Debug, Clone)]
struct DepthList(Vec<usize>);

fn parse_depth_list(text: &str) -> Result<DepthList, String> {
    stages::parse_depths(text).map(DepthList)
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let layout = Layout::new(&cfg.output_dir);
    match cli.command {
        Command::SynthData => stages::synth_data(&cfg, &layout),
        Command::PretrainAns => stages::pretrain(&cfg, &layout),
        Command::Expand => stages::expand(&cfg, &layout),
        Command::TrainSearch => stages::train_search(&cfg, &layout),
        Command::Extract => stages::extract(&cfg, &layout),
        Command::Build { depth } => stages::build(&cfg, &layout, depth),
        Command::Finetune { depth } => stages::finetune(&cfg, &layout, depth),
        Command::Eval { model, dataset } => stages::eval(&cfg, &layout, model.as_deref(), dataset.as_deref()),
        Command::Compare { depth } => stages::compare(&cfg, &layout, depth),
        Command::ReportOverlap => stages::report_overlap(&layout),
        Command::ReportStorage {
            reference,
            depths,
            learngene_layers,
        } => {
            let reference = reference.map(|_| ModelConfig::deit_b_reference());
            stages::report_storage(&cfg, &layout, reference, learngene_layers, depths.map(|d| d.0))
        }
        Command::ValidateConfig => {
            print!("{}", toml::to_string(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            let err = CliError::Usage(first.to_string());
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
