//! Subcommand implementations behind the `hbpo` executable.
//!
//! Each command returns a [`CliError`] whose [`exit_code`](CliError::exit_code)
//! is 2 for configuration or validation problems and 1 for anything that goes
//! wrong while running.
//!
//! A training run directory holds:
//!
//! ```text
//! config.json            effective configuration
//! dataset.jsonl          training problem pool
//! run.jsonl              one record per step (plus advantage records if enabled)
//! checkpoints/           step_NNNNN.json every `checkpoint_every` steps, final.json
//! final_eval.json        natural and minimal-prompt evaluation of the final policy
//! curves/training.csv    per-step training curves
//! ```

use crate::analysis::{
    evaluate, export_training_curves, read_transcripts, summarize, transcripts_csv, EvalReport,
    EvalSetting, TranscriptResult, TranscriptSummary, DEFAULT_KEYWORDS,
};
use crate::config::{ConfigError, RunConfig};
use crate::env::write_dataset_jsonl;
use crate::hierarchy::{make_schedule, BudgetSchedule};
use crate::policy::PolicyParams;
use crate::reward::{complexity_threshold, complexity_threshold_tokens, reward};
use crate::trainer::{train, training_dataset, RunLogLine, StepReport};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(path, contents).map_err(io_at(path))
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serialises") + "\n"
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

/// Loads, overrides and re-validates a run config.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(dir) = &overrides.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(w) = overrides.workers {
        cfg.trainer.workers = w;
    }
    if let Some(s) = overrides.steps {
        cfg.trainer.steps = s;
    }
    if let Some(s) = overrides.seed {
        cfg.trainer.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub natural: EvalReport,
    pub minimal_prompt: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub policy: PolicyParams,
    pub reports: Vec<StepReport>,
    pub final_eval: FinalEval,
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:05}.json"))
}

/// Trains under `cfg` and fills `cfg.output_dir` with the run directory.
pub fn run_training(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(dir.join("checkpoints")).map_err(io_at(&dir))?;
    write_file(&dir.join("config.json"), cfg.to_json().as_bytes())?;

    let setup = cfg.setup();
    let mut dataset = Vec::new();
    write_dataset_jsonl(&training_dataset(&setup), &mut dataset).map_err(runtime)?;
    write_file(&dir.join("dataset.jsonl"), &dataset)?;

    let log_path = dir.join("run.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(io_at(&log_path))?);
    let every = cfg.trainer.checkpoint_every;
    let log_advantages = cfg.trainer.log_advantages;
    let (policy, reports) = train(cfg.initial_policy(), &setup, |out| {
        let mut line = |record: &RunLogLine| -> Result<(), String> {
            serde_json::to_writer(&mut log, record).map_err(|e| e.to_string())?;
            log.write_all(b"\n").map_err(|e| e.to_string())
        };
        line(&RunLogLine::Step(out.report.clone()))?;
        if log_advantages {
            for set in &out.advantages {
                line(&RunLogLine::Advantages {
                    step: out.report.step,
                    set: set.clone(),
                })?;
            }
        }
        log.flush()
            .map_err(|e| format!("{}: {e}", log_path.display()))?;
        if every > 0 && out.report.step % every == 0 {
            out.policy
                .save(&checkpoint_path(&dir, out.report.step))
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    })
    .map_err(runtime)?;
    drop(log);
    policy
        .save(&dir.join("checkpoints").join("final.json"))
        .map_err(runtime)?;

    let curves = export_training_curves(&log_path).map_err(runtime)?;
    write_file(&dir.join("curves").join("training.csv"), curves.as_bytes())?;

    let eval = |setting| {
        evaluate(
            &policy,
            &cfg.env,
            cfg.reward.l_max,
            setting,
            cfg.eval.n_eval,
            cfg.eval.seed,
        )
        .map_err(runtime)
    };
    let final_eval = FinalEval {
        natural: eval(EvalSetting::Natural)?,
        minimal_prompt: eval(EvalSetting::MinimalPrompt)?,
    };
    write_file(
        &dir.join("final_eval.json"),
        pretty_json(&final_eval).as_bytes(),
    )?;

    Ok(TrainSummary {
        output_dir: dir,
        policy,
        reports,
        final_eval,
    })
}

pub fn cmd_train(config_path: &Path, overrides: &Overrides) -> Result<TrainSummary, CliError> {
    run_training(&load_config(config_path, overrides)?)
}

/// Evaluates a saved checkpoint under the environment of `config_path`.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint: &Path,
    setting: EvalSetting,
    n_eval: Option<usize>,
) -> Result<EvalReport, CliError> {
    let cfg = load_config(config_path, &Overrides::default())?;
    if let EvalSetting::FixedBudget(b) = setting {
        if b.0 == 0 || b.0 > cfg.reward.l_max {
            return Err(CliError::Config(format!(
                "budget: {b} must be in 1..={}",
                cfg.reward.l_max
            )));
        }
    }
    let n_eval = n_eval.unwrap_or(cfg.eval.n_eval);
    if n_eval == 0 {
        return Err(CliError::Config("n_eval: must be >= 1".into()));
    }
    let policy = PolicyParams::load(checkpoint)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", checkpoint.display())))?;
    if policy.tiers != cfg.env.tiers {
        return Err(CliError::Runtime(format!(
            "{}: checkpoint has {} tiers but env.tiers = {}",
            checkpoint.display(),
            policy.tiers,
            cfg.env.tiers
        )));
    }
    evaluate(
        &policy,
        &cfg.env,
        cfg.reward.l_max,
        setting,
        n_eval,
        cfg.eval.seed,
    )
    .map_err(runtime)
}

/// One row of the granularity sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub budgets: String,
    pub accuracy: f64,
    pub mean_tokens: f64,
    pub adaptation_ratio: Option<f64>,
    pub minimal_accuracy: f64,
    pub minimal_mean_tokens: f64,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub table: String,
}

pub const SWEEP_MEAN_BUDGET: u32 = 1536;

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!(
        "{:>3}  {:<24}  {:>8}  {:>11}  {:>10}  {:>11}  {:>14}\n",
        "k", "budgets", "accuracy", "mean_tokens", "adaptation", "minimal_acc", "minimal_tokens"
    );
    for r in rows {
        let ratio = r
            .adaptation_ratio
            .map(|x| format!("{x:.3}"))
            .unwrap_or_else(|| "-".into());
        s += &format!(
            "{:>3}  {:<24}  {:>8.4}  {:>11.1}  {:>10}  {:>11.4}  {:>14.1}\n",
            r.k,
            r.budgets,
            r.accuracy,
            r.mean_tokens,
            ratio,
            r.minimal_accuracy,
            r.minimal_mean_tokens
        );
    }
    s
}

/// Trains once per `k` with a `k`-budget schedule at mean budget `mean`,
/// each into `<output_dir>/k<k>`, and writes `sweep.csv` and `sweep.txt`.
/// Every `k` is validated before any training starts.
pub fn cmd_sweep(
    config_path: &Path,
    ks: &[usize],
    mean: u32,
    overrides: &Overrides,
) -> Result<SweepSummary, CliError> {
    let base = load_config(config_path, overrides)?;
    if ks.is_empty() {
        return Err(CliError::Config("k: at least one value is required".into()));
    }
    let mut runs: Vec<(usize, BudgetSchedule)> = Vec::with_capacity(ks.len());
    for &k in ks {
        let schedule = make_schedule(k, mean, base.schedule.rollouts_per_query, base.reward.l_max)
            .map_err(|e| CliError::Config(format!("k = {k}: {e}")))?;
        runs.push((k, schedule));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for (k, schedule) in runs {
        let mut cfg = base.clone();
        cfg.output_dir = base.output_dir.join(format!("k{k}"));
        cfg.schedule = schedule;
        cfg.validate()?;
        let out = run_training(&cfg)?;
        let budgets: Vec<String> = cfg
            .schedule
            .budgets
            .iter()
            .map(|b| b.0.to_string())
            .collect();
        let (nat, min) = (&out.final_eval.natural, &out.final_eval.minimal_prompt);
        rows.push(SweepRow {
            k,
            budgets: budgets.join(";"),
            accuracy: nat.overall_accuracy,
            mean_tokens: nat.overall_mean_tokens,
            adaptation_ratio: nat.adaptation_ratio,
            minimal_accuracy: min.overall_accuracy,
            minimal_mean_tokens: min.overall_mean_tokens,
        });
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "k",
        "budgets",
        "accuracy",
        "mean_tokens",
        "adaptation_ratio",
        "minimal_accuracy",
        "minimal_mean_tokens",
    ])
    .map_err(runtime)?;
    for r in &rows {
        w.write_record([
            r.k.to_string(),
            r.budgets.clone(),
            r.accuracy.to_string(),
            r.mean_tokens.to_string(),
            opt_cell(r.adaptation_ratio),
            r.minimal_accuracy.to_string(),
            r.minimal_mean_tokens.to_string(),
        ])
        .map_err(runtime)?;
    }
    let csv_bytes = w.into_inner().map_err(|e| runtime(e.into_error()))?;
    write_file(&base.output_dir.join("sweep.csv"), &csv_bytes)?;
    let table = sweep_table(&rows);
    write_file(&base.output_dir.join("sweep.txt"), table.as_bytes())?;
    Ok(SweepSummary { rows, table })
}

/// Companion path for the threshold table: `<stem>_thresholds.csv`.
pub fn thresholds_path(curves_csv: &Path) -> PathBuf {
    let stem = curves_csv
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "reward_curves".into());
    curves_csv.with_file_name(format!("{stem}_thresholds.csv"))
}

/// Writes the correct-response reward of every configured budget at each
/// `n_gen` in `1..=l_max`, and the complexity threshold of every budget pair.
/// Returns the two paths written.
pub fn cmd_reward_curves(
    config_path: &Path,
    out_csv: &Path,
) -> Result<(PathBuf, PathBuf), CliError> {
    let cfg = load_config(config_path, &Overrides::default())?;
    let budgets = &cfg.schedule.budgets;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["n_gen".to_string()];
    header.extend(budgets.iter().map(|b| format!("b{}", b.0)));
    w.write_record(&header).map_err(runtime)?;
    for n in 1..=cfg.reward.l_max {
        let mut row = vec![n.to_string()];
        row.extend(
            budgets
                .iter()
                .map(|&b| reward(n, true, b, &cfg.reward).value.to_string()),
        );
        w.write_record(&row).map_err(runtime)?;
    }
    let curves = w.into_inner().map_err(|e| runtime(e.into_error()))?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["b_low", "b_high", "threshold", "threshold_tokens"])
        .map_err(runtime)?;
    for (i, &lo) in budgets.iter().enumerate() {
        for &hi in &budgets[i + 1..] {
            let t = complexity_threshold(lo, hi, &cfg.reward).map_err(runtime)?;
            let tokens = complexity_threshold_tokens(lo, hi, &cfg.reward).map_err(runtime)?;
            w.write_record([
                lo.0.to_string(),
                hi.0.to_string(),
                opt_cell(t),
                tokens.map(|n| n.to_string()).unwrap_or_default(),
            ])
            .map_err(runtime)?;
        }
    }
    let thresholds = w.into_inner().map_err(|e| runtime(e.into_error()))?;

    let tpath = thresholds_path(out_csv);
    write_file(out_csv, &curves)?;
    write_file(&tpath, &thresholds)?;
    Ok((out_csv.to_path_buf(), tpath))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeOutput {
    pub keywords: Vec<String>,
    pub transcripts: Vec<TranscriptResult>,
    pub summary: TranscriptSummary,
}

/// Analyzes a JSONL file of `{id, text}` transcripts. Writes per-transcript
/// statistics and the summary to `<out_dir>/stats.json`, and one CSV row per
/// transcript to `<out_dir>/aggregate.csv`.
pub fn cmd_analyze(
    transcripts: &Path,
    out_dir: &Path,
    keywords: Option<&[String]>,
) -> Result<AnalyzeOutput, CliError> {
    let keywords: Vec<String> = match keywords {
        Some(k) => {
            if let Some(i) = k.iter().position(|w| w.trim().is_empty()) {
                return Err(CliError::Config(format!(
                    "keywords[{i}]: must not be empty"
                )));
            }
            k.to_vec()
        }
        None => DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
    };
    let input = read_transcripts(transcripts).map_err(|e| match e {
        crate::analysis::AnalysisError::Io(io) => {
            CliError::Runtime(format!("{}: {io}", transcripts.display()))
        }
        other => runtime(other),
    })?;
    let results: Vec<TranscriptResult> = input
        .into_iter()
        .map(|t| TranscriptResult {
            id: t.id,
            stats: crate::analysis::analyze_transcript(&t.text, &keywords),
        })
        .collect();
    let summary = summarize(&results, &keywords);
    let csv_text = transcripts_csv(&results, &keywords).map_err(runtime)?;
    let output = AnalyzeOutput {
        keywords,
        transcripts: results,
        summary,
    };
    write_file(&out_dir.join("stats.json"), pretty_json(&output).as_bytes())?;
    write_file(&out_dir.join("aggregate.csv"), csv_text.as_bytes())?;
    Ok(output)
}
