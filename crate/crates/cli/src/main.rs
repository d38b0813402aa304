use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use gin_cli::commands::{provenance_summary, DATASET_FILE};
use gin_cli::config::OUTPUT_DIR_ENV;
use gin_cli::{
    analyze, config_keys_help, full_experiment, gen_data, selftest, train, CliError, CliResult,
    ExperimentConfig, InjectFault, Preset, TrainRequest, EXIT_ACCEPTANCE, EXIT_OK,
};

/// Volume-preserving coupling flows for nonlinear ICA on synthetic mixtures.
#[derive(Parser)]
#[command(name = "gin", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON experiment config; see the key list below.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config to start from (default exp1).
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    /// Overrides data.n_classes.
    #[arg(long, global = true)]
    classes: Option<usize>,
    /// Overrides data.n_samples.
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Overrides data.data_seed.
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    /// Overrides data.mixer_seed.
    #[arg(long, global = true)]
    mixer_seed: Option<u64>,
    /// Overrides attempts.train_seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    train_seeds: Option<Vec<u64>>,
    /// Overrides attempts.required.
    #[arg(long, global = true)]
    required: Option<usize>,
    /// Overrides train.max_epochs_per_phase.
    #[arg(long, global = true)]
    max_epochs_per_phase: Option<usize>,
    /// Overrides train.checkpoint_every.
    #[arg(long, global = true)]
    checkpoint_every: Option<usize>,
    /// Overrides output_dir.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut c = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, p) => ExperimentConfig::preset(p.unwrap_or(Preset::Exp1)),
        };
        if let Some(v) = self.classes {
            c.data.n_classes = v;
        }
        if let Some(v) = self.samples {
            c.data.n_samples = v;
        }
        if let Some(v) = self.data_seed {
            c.data.data_seed = v;
        }
        if let Some(v) = self.mixer_seed {
            c.data.mixer_seed = v;
        }
        if let Some(v) = &self.train_seeds {
            c.attempts.train_seeds = v.clone();
            c.attempts.required = c.attempts.required.min(v.len());
        }
        if let Some(v) = self.required {
            c.attempts.required = v;
        }
        if let Some(v) = self.max_epochs_per_phase {
            c.train.max_epochs_per_phase = v;
        }
        if let Some(v) = self.checkpoint_every {
            c.train.checkpoint_every = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset and its mixer into the output dir.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the estimating flow on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset file (default: <output_dir>/dataset.bin).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint with training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs, leaving a resumable checkpoint.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Write report.json, spectrum CSVs and a scatter plot for a checkpoint.
    Analyze {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run gradient, bijectivity, volume and loss checks.
    Selftest {
        /// Break one backward rule on purpose.
        #[arg(long, value_enum)]
        inject_fault: Option<InjectFault>,
    },
    /// Generate, train every attempt, analyze, and print PASS or FAIL.
    FullExperiment {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the resolved config as JSON.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::GenData { config } => {
            let c = config.resolve()?;
            let (data, _) = gen_data(&c, &c.output_dir)?;
            println!("wrote {}", c.output_dir.join(DATASET_FILE).display());
            println!("{}", provenance_summary(&data));
            Ok(EXIT_OK)
        }
        Command::Train {
            config,
            data,
            seed,
            resume,
            max_epochs,
        } => {
            let c = config.resolve()?;
            let dataset = data.unwrap_or_else(|| c.output_dir.join(DATASET_FILE));
            let seed = seed.unwrap_or(c.train.seed);
            let result = train(&TrainRequest {
                config: &c,
                dataset: &dataset,
                out_dir: &c.output_dir,
                seed,
                resume: resume.as_deref(),
                max_epochs,
            })?;
            let o = &result.outcome;
            println!(
                "{} after {} steps; phases capped {:?}; last epoch loss {}",
                if o.finished { "finished" } else { "stopped" },
                o.steps,
                o.capped,
                result.last_epoch_loss.map_or("n/a".into(), |l| format!("{l:.6}"))
            );
            if let Some(l) = o.full_pass_loss {
                println!("full-pass loss {l:.6}");
            }
            println!("checkpoint {}", result.checkpoint.display());
            println!("history {}", result.history.display());
            Ok(EXIT_OK)
        }
        Command::Analyze {
            config,
            checkpoint,
            data,
        } => {
            let c = config.resolve()?;
            let report = analyze(&c.analysis, &checkpoint, &data, &c.output_dir)?;
            let v = &report.verdict;
            println!(
                "informative {} gap {} recovered {} structure {:?}",
                report.spectrum.informative_count,
                report.spectrum.gap_ratio.map_or("n/a".into(), |g| format!("{g:.2}")),
                v.recovered,
                v.structure_ok
            );
            if let Some(l) = &report.l_matrix {
                println!(
                    "L matrix rank {} of {}, enough conditions {}",
                    l.rank, l.nk, l.enough_conditions
                );
            }
            println!("report {}", c.output_dir.join("report.json").display());
            Ok(EXIT_OK)
        }
        Command::Selftest { inject_fault } => {
            let report = selftest(inject_fault)?;
            for check in &report.checks {
                println!(
                    "{} {}: {}",
                    if check.passed { "ok  " } else { "FAIL" },
                    check.name,
                    check.detail
                );
            }
            let failed = report.failures().count();
            println!(
                "{} checks, {} failed, {:.1}s",
                report.checks.len(),
                failed,
                report.elapsed.as_secs_f64()
            );
            Ok(if failed == 0 { EXIT_OK } else { EXIT_ACCEPTANCE })
        }
        Command::FullExperiment { config } => {
            let c = config.resolve()?;
            let summary = full_experiment(&c, |msg| eprintln!("{msg}"))?;
            println!(
                "{} {}: {} of {} attempts met the expectation ({:?}), {} required",
                if summary.passed { "PASS" } else { "FAIL" },
                summary.name,
                summary.successes,
                summary.attempts.len(),
                summary.expectation,
                summary.required
            );
            Ok(if summary.passed { EXIT_OK } else { EXIT_ACCEPTANCE })
        }
        Command::Config { config } => {
            print!("{}", config.resolve()?.to_json());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let command = Cli::command().after_help(config_keys_help());
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `gin --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
