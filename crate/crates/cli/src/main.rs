use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kwsf::dataset::Split;
use kwsf_cli::{
    cmd_eval, cmd_export_trajectory, cmd_make_fixture, cmd_pbt, cmd_prepare_data, cmd_train, exit_code, write_run_json,
    RunConfig, RunDir,
};

#[derive(Parser)]
#[command(name = "kwsf", version, about = "Keyword spotting with mean-teacher training and population-based tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; must be absent or empty.
    #[arg(long)]
    out: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent PBT members.
    #[arg(long, env = "KWSF_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Build a split manifest from a corpus directory.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// Corpus root; overrides `data_root`.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Write the synthetic fixture corpus.
    MakeFixture {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Population-based training.
    Pbt {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy and confusion matrix of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Re-export a PBT trajectory log in canonical order.
    ExportTrajectory {
        #[command(flatten)]
        common: Common,
        /// A `trajectory.jsonl` file or the PBT run directory holding it.
        #[arg(long)]
        input: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train_labeled" => Ok(Split::TrainLabeled),
        "train_unlabeled" => Ok(Split::TrainUnlabeled),
        "holdout" => Ok(Split::Holdout),
        "validation" => Ok(Split::Validation),
        _ => Err(format!("unknown split {s:?}")),
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.override_seed(s);
    }
    if common.workers == 0 {
        anyhow::bail!(kwsf_cli::InputError("--workers must be at least 1".into()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let (name, common) = match &cli.command {
        Command::PrepareData { common, .. } => ("prepare-data", common),
        Command::MakeFixture { common, .. } => ("make-fixture", common),
        Command::Train { common } => ("train", common),
        Command::Pbt { common } => ("pbt", common),
        Command::Eval { common, .. } => ("eval", common),
        Command::ExportTrajectory { common, .. } => ("export-trajectory", common),
    };
    let mut cfg = load_config(common)?;
    match &cli.command {
        Command::PrepareData { root: Some(r), .. } => cfg.data_root = Some(r.clone()),
        Command::MakeFixture { n_per_class: Some(n), .. } => cfg.fixture.n_per_class = *n,
        Command::Eval { checkpoint, split, .. } => {
            if let Some(c) = checkpoint {
                cfg.eval.checkpoint = Some(c.clone());
            }
            if let Some(s) = split {
                cfg.eval.split = *s;
            }
        }
        _ => {}
    }

    let dir = RunDir::create(&common.out)?;
    write_run_json(&dir, name, common.workers, &cfg)?;
    let result = match &cli.command {
        Command::PrepareData { .. } => cmd_prepare_data(&cfg, &dir),
        Command::MakeFixture { .. } => cmd_make_fixture(&cfg, &dir.path("")),
        Command::Train { .. } => cmd_train(&cfg, &dir),
        Command::Pbt { .. } => cmd_pbt(&cfg, common.workers, &dir),
        Command::Eval { .. } => cmd_eval(&cfg, &dir),
        Command::ExportTrajectory { input, .. } => cmd_export_trajectory(input, &dir),
    };
    let out = dir.finish()?;
    result.map(|report| format!("{report}output: {}\n", out.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
