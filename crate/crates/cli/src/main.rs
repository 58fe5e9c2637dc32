use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fnri_core::error_profile::{computational_error, physical_error, ErrorGrid};
use fnri_core::experiment::{
    evaluate, load_checkpoint, prior_from_grids, read_runlog, train, write_error_grids,
    ExperimentConfig, CHECKPOINT_FILE, COMPUTATIONAL_GRID_FILE, PHYSICAL_GRID_FILE, PRIOR_FILE,
    RUNLOG_FILE,
};
use fnri_core::sim::{generate_dataset, Dataset, DatasetSplits, Split, SplitCounts};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

/// Simulate particle systems, profile integration error, train and evaluate
/// uncertainty-aware relational models.
#[derive(Parser)]
#[command(name = "fnri", version)]
struct Cli {
    /// Every relative path is resolved against this directory.
    #[arg(long, global = true, default_value = ".")]
    run_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in configuration: desk or full.
    #[arg(long)]
    profile: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a built-in configuration to a file.
    Init {
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long, default_value = "config.toml")]
        out: PathBuf,
    },
    /// Generate train/validation/test trajectory files.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        /// Overrides simulator.rng_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Error-growth grids and the prior schedule derived from them.
    ErrorProfile {
        kind: ProfileKind,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output CSV (directory for `both`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training data, needed by `prior`.
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Train a model; writes the checkpoint and run log into --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Free-rollout metrics, z-score histograms and fits for a checkpoint.
    Evaluate {
        #[arg(long, default_value = CHECKPOINT_FILE)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Run log used for the constant-sigma check; defaults to the one
        /// next to the checkpoint.
        #[arg(long)]
        runlog: Option<PathBuf>,
    },
    /// Summarise a run log as a table.
    Report {
        #[arg(long, default_value = RUNLOG_FILE)]
        runlog: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileKind {
    /// Deviation versus integration step.
    Comp,
    /// Deviation versus initial perturbation.
    Phys,
    /// Both grids into a directory.
    Both,
    /// Prior widths for the KL loss (--out, default prior.csv); the two grids
    /// are rewritten into the run directory on the way.
    Prior,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_config(args: &ConfigArgs, run_dir: &Path) -> Result<ExperimentConfig> {
    Ok(match (&args.config, &args.profile) {
        (Some(p), _) => ExperimentConfig::load(&run_dir.join(p))?,
        (None, Some(name)) => ExperimentConfig::profile(name)?,
        (None, None) => {
            let default = run_dir.join("config.toml");
            if default.exists() {
                ExperimentConfig::load(&default)?
            } else {
                ExperimentConfig::desk()
            }
        }
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let dir = &cli.run_dir;
    fs::create_dir_all(dir)?;
    match cli.command {
        Command::Init { profile, out } => {
            let cfg = ExperimentConfig::profile(&profile)?;
            fs::write(dir.join(&out), cfg.to_toml()?)?;
            println!("wrote {}", dir.join(out).display());
        }
        Command::Simulate {
            cfg,
            out,
            train,
            val,
            test,
            seed,
        } => {
            let cfg = load_config(&cfg, dir)?;
            let counts = SplitCounts {
                train: train.unwrap_or(cfg.data.train),
                validation: val.unwrap_or(cfg.data.validation),
                test: test.unwrap_or(cfg.data.test),
            };
            let seed = seed.unwrap_or(cfg.simulator.rng_seed);
            let splits = generate_dataset(&cfg.simulator, counts, seed)?;
            splits.write_dir(&dir.join(&out))?;
            println!(
                "wrote {} / {} / {} trajectories to {}",
                counts.train,
                counts.validation,
                counts.test,
                dir.join(out).display()
            );
        }
        Command::ErrorProfile {
            kind,
            cfg,
            out,
            data,
        } => {
            let cfg = load_config(&cfg, dir)?;
            let p = &cfg.error_profile;
            let write = |grid: &ErrorGrid, default: &str| -> Result<()> {
                let path = dir.join(out.clone().unwrap_or_else(|| PathBuf::from(default)));
                grid.write_csv(&path)?;
                println!("wrote {}", path.display());
                Ok(())
            };
            match kind {
                ProfileKind::Comp => write(
                    &computational_error(
                        &cfg.simulator,
                        &p.dt_grid,
                        p.reference_dt,
                        p.horizon,
                        p.n_runs,
                        cfg.seeds.profile,
                    )?,
                    COMPUTATIONAL_GRID_FILE,
                )?,
                ProfileKind::Phys => write(
                    &physical_error(
                        &cfg.simulator,
                        &p.sigma_grid,
                        p.horizon,
                        p.n_runs,
                        cfg.seeds.profile,
                    )?,
                    PHYSICAL_GRID_FILE,
                )?,
                ProfileKind::Both => {
                    let target = dir.join(out.unwrap_or_else(|| PathBuf::from(".")));
                    write_error_grids(&cfg, &target)?;
                    println!(
                        "wrote {COMPUTATIONAL_GRID_FILE} and {PHYSICAL_GRID_FILE} to {}",
                        target.display()
                    );
                }
                ProfileKind::Prior => {
                    let (comp, phys) = write_error_grids(&cfg, dir)?;
                    let train = Dataset::load(
                        &dir.join(&data).join(Split::Train.file_name()),
                        Split::Train,
                    )?;
                    let prior = prior_from_grids(&cfg, &comp, &phys, &train)?;
                    let path = dir.join(out.unwrap_or_else(|| PathBuf::from(PRIOR_FILE)));
                    prior.write_csv(&path)?;
                    if prior.clamped_dt || prior.clamped_seed || prior.clamped_time {
                        eprintln!("warning: prior lookups were clamped to the grid edges");
                    }
                    println!("wrote {}", path.display());
                }
            }
        }
        Command::Train { cfg, data, out } => {
            let cfg = load_config(&cfg, dir)?;
            let splits = DatasetSplits::read_dir(&dir.join(data))?;
            let out = dir.join(out);
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let outcome = train(&cfg, &splits, &out, &mut |r| {
                println!(
                    "epoch {:>4}  lr {:.2e}  train {:.6e}  val {:.6e}  val_mse {:.4e}  edges {:.2}%{}",
                    r.epoch,
                    r.lr,
                    r.train.total,
                    r.val.total,
                    r.val_mse,
                    r.val_edge_accuracy,
                    if r.checkpointed { "  *" } else { "" }
                );
            })?;
            if let Some(epoch) = outcome.aborted_at {
                eprintln!(
                    "non-finite loss at epoch {epoch}; kept checkpoint from epoch {:?}",
                    outcome.best_epoch
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
            split,
            runlog,
        } => {
            let checkpoint = dir.join(checkpoint);
            let (cfg, model) = load_checkpoint(&checkpoint)?;
            let split = Split::from(split);
            let dataset = Dataset::load(&dir.join(data).join(split.file_name()), split)?;
            let runlog = match runlog {
                Some(p) => Some(dir.join(p)),
                None => checkpoint
                    .parent()
                    .map(|p| p.join(RUNLOG_FILE))
                    .filter(|p| p.exists()),
            };
            let sigma_log = match runlog {
                Some(p) => Some(
                    read_runlog(&p)?
                        .into_iter()
                        .map(|r| r.sigma)
                        .collect::<Vec<_>>(),
                ),
                None => None,
            };
            let eval = evaluate(&model, &cfg, &dataset, sigma_log.as_deref())?;
            eval.write(&dir.join(&out))?;
            print!("{}", eval.report_text());
        }
        Command::Report { runlog } => {
            let log = read_runlog(&dir.join(runlog))?;
            println!("epoch,lr,train_total,val_total,val_mse,val_edge_accuracy,sigma_median,sigma_iqr,checkpointed");
            for r in &log {
                println!(
                    "{},{},{},{},{},{},{},{},{}",
                    r.epoch,
                    r.lr,
                    r.train.total,
                    r.val.total,
                    r.val_mse,
                    r.val_edge_accuracy,
                    r.sigma.median,
                    r.sigma.iqr,
                    r.checkpointed
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("FNRI_THREADS") {
        match n.parse::<usize>() {
            Ok(n) => {
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    eprintln!("error: {e}");
                    return ExitCode::FAILURE;
                }
            }
            Err(_) => {
                eprintln!("error: FNRI_THREADS must be a positive integer, got `{n}`");
                return ExitCode::FAILURE;
            }
        }
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
