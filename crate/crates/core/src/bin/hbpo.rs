use clap::{Parser, Subcommand, ValueEnum};
use hbpo::analysis::EvalSetting;
use hbpo::cli::{self, CliError, Overrides};
use hbpo::reward::BudgetLevel;
use std::path::PathBuf;
use std::process::ExitCode;

/// Hierarchical budget policy optimization on a synthetic length environment.
#[derive(Parser)]
#[command(name = "hbpo", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Setting {
    Natural,
    Minimal,
    Budget,
}

#[derive(clap::Args)]
struct RunFlags {
    /// Overrides the config's output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Rollout worker threads (0 = one per core).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunFlags {
    fn overrides(self) -> Overrides {
        Overrides {
            output_dir: self.output_dir,
            workers: self.workers,
            steps: self.steps,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "natural")]
        setting: Setting,
        /// Token budget for `--setting budget`.
        #[arg(long)]
        budget: Option<u32>,
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Train once per budget count k at a fixed mean budget and compare.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        k: Vec<usize>,
        #[arg(long, default_value_t = cli::SWEEP_MEAN_BUDGET)]
        mean: u32,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Export reward curves and pairwise complexity thresholds as CSV.
    RewardCurves {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Thinking proportion and reflection keywords of JSONL transcripts.
    Analyze {
        #[arg(long)]
        transcripts: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated keywords replacing the default set.
        #[arg(long, value_delimiter = ',')]
        keywords: Option<Vec<String>>,
    },
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { config, run } => {
            let s = cli::cmd_train(&config, &run.overrides())?;
            let n = &s.final_eval.natural;
            let m = &s.final_eval.minimal_prompt;
            println!("run directory: {}", s.output_dir.display());
            println!(
                "natural: accuracy {:.4}, mean tokens {:.1}, adaptation ratio {}",
                n.overall_accuracy,
                n.overall_mean_tokens,
                n.adaptation_ratio.map_or("-".into(), |r| format!("{r:.3}"))
            );
            println!(
                "minimal prompt: accuracy {:.4}, mean tokens {:.1}",
                m.overall_accuracy, m.overall_mean_tokens
            );
        }
        Command::Eval {
            config,
            checkpoint,
            setting,
            budget,
            n_eval,
        } => {
            let setting = match (setting, budget) {
                (Setting::Natural, None) => EvalSetting::Natural,
                (Setting::Minimal, None) => EvalSetting::MinimalPrompt,
                (Setting::Budget, Some(b)) => EvalSetting::FixedBudget(BudgetLevel(b)),
                (Setting::Budget, None) => {
                    return Err(CliError::Config("--setting budget needs --budget".into()))
                }
                (_, Some(_)) => {
                    return Err(CliError::Config(
                        "--budget only applies to --setting budget".into(),
                    ))
                }
            };
            let report = cli::cmd_eval(&config, &checkpoint, setting, n_eval)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serialises")
            );
        }
        Command::Sweep {
            config,
            k,
            mean,
            run,
        } => {
            let s = cli::cmd_sweep(&config, &k, mean, &run.overrides())?;
            print!("{}", s.table);
        }
        Command::RewardCurves { config, out } => {
            let (curves, thresholds) = cli::cmd_reward_curves(&config, &out)?;
            println!("{}\n{}", curves.display(), thresholds.display());
        }
        Command::Analyze {
            transcripts,
            out,
            keywords,
        } => {
            let o = cli::cmd_analyze(&transcripts, &out, keywords.as_deref())?;
            println!(
                "{} transcripts analyzed into {}",
                o.summary.transcripts,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hbpo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
