//! Evaluation of trained policies, training-curve export, and the
//! transcript analyzer for thinking proportion and reflection keywords.

use crate::env::{correctness_prob, make_dataset, EnvConfig};
use crate::policy::{sample_length, Context, LengthPolicy, PolicyError};
use crate::reward::BudgetLevel;
use crate::rng::{DrawStream, StreamTag};
use crate::trainer::{RunLogLine, StepReport};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("n_eval must be >= 1")]
    EmptyEval,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// The reflection keywords counted by default.
pub const DEFAULT_KEYWORDS: [&str; 6] = [
    "wait",
    "alternatively",
    "but",
    "remember",
    "check",
    "verify",
];

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSetting {
    /// No budget prompt.
    Natural,
    /// The "minimal tokens" prompt.
    MinimalPrompt,
    FixedBudget(BudgetLevel),
}

impl EvalSetting {
    pub fn context(self, tier: usize, l_max: u32) -> Context {
        match self {
            EvalSetting::Natural => Context::natural(tier),
            EvalSetting::MinimalPrompt => Context::minimal(tier),
            EvalSetting::FixedBudget(b) => Context::with_budget(tier, b, l_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: EvalSetting,
    pub n_eval: usize,
    pub tier_counts: Vec<usize>,
    /// Indexed by tier − 1; `None` for tiers absent from the eval set.
    pub tier_accuracy: Vec<Option<f64>>,
    pub tier_mean_tokens: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    pub overall_mean_tokens: f64,
    /// Mean length on the hardest tier over the easiest.
    pub adaptation_ratio: Option<f64>,
}

/// Samples one response per problem of a fresh `n_eval`-problem dataset
/// drawn from `seed`, and aggregates accuracy and length per tier.
pub fn evaluate<P: LengthPolicy + ?Sized>(
    policy: &P,
    env: &EnvConfig,
    l_max: u32,
    setting: EvalSetting,
    n_eval: usize,
    seed: u64,
) -> Result<EvalReport, AnalysisError> {
    if n_eval == 0 {
        return Err(AnalysisError::EmptyEval);
    }
    let problems = make_dataset(
        n_eval,
        env,
        &mut DrawStream::new(seed, StreamTag::Dataset, &[1]),
    );
    let mut counts = vec![0usize; env.tiers];
    let mut correct = vec![0usize; env.tiers];
    let mut tokens = vec![0.0f64; env.tiers];
    for p in &problems {
        let mut rng = DrawStream::new(seed, StreamTag::Eval, &[p.id]);
        let ctx = setting.context(p.tier, l_max);
        let s = sample_length(policy, &ctx, &mut rng)?;
        let ok = rng.uniform() < correctness_prob(s.n_gen, p, env);
        counts[p.tier - 1] += 1;
        correct[p.tier - 1] += usize::from(ok);
        tokens[p.tier - 1] += f64::from(s.n_gen);
    }
    let per_tier = |v: &[f64]| -> Vec<Option<f64>> {
        v.iter()
            .zip(&counts)
            .map(|(x, &c)| (c > 0).then(|| x / c as f64))
            .collect()
    };
    let correct_f: Vec<f64> = correct.iter().map(|&c| c as f64).collect();
    let tier_mean_tokens = per_tier(&tokens);
    let adaptation_ratio = match (tier_mean_tokens.first(), tier_mean_tokens.last()) {
        (Some(Some(easy)), Some(Some(hard))) if *easy > 0.0 => Some(hard / easy),
        _ => None,
    };
    Ok(EvalReport {
        setting,
        n_eval,
        tier_accuracy: per_tier(&correct_f),
        tier_mean_tokens,
        overall_accuracy: correct.iter().sum::<usize>() as f64 / n_eval as f64,
        overall_mean_tokens: tokens.iter().sum::<f64>() / n_eval as f64,
        adaptation_ratio,
        tier_counts: counts,
    })
}

/// Reads the step records of a run log, skipping advantage records.
pub fn read_run_log(path: &Path) -> Result<Vec<StepReport>, AnalysisError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut steps = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunLogLine>(&line) {
            Ok(RunLogLine::Step(report)) => steps.push(report),
            Ok(RunLogLine::Advantages { .. }) => {}
            Err(e) => {
                return Err(AnalysisError::Malformed {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(steps)
}

pub const CURVE_COLUMNS: [&str; 5] = [
    "step",
    "mean_length",
    "std_length",
    "accuracy",
    "mean_reward",
];

/// Training curves as CSV, one row per logged step in step order.
pub fn export_training_curves(run_log: &Path) -> Result<String, AnalysisError> {
    let mut steps = read_run_log(run_log)?;
    steps.sort_by_key(|s| s.step);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVE_COLUMNS)?;
    for s in &steps {
        // `Display` for f64 is the shortest representation that round-trips.
        w.write_record([
            s.step.to_string(),
            s.mean_length.to_string(),
            s.std_length.to_string(),
            s.accuracy.to_string(),
            s.mean_reward.to_string(),
        ])?;
    }
    Ok(
        String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)
            .expect("csv output is utf-8"),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptStats {
    pub total_tokens: usize,
    pub thinking_tokens: usize,
    pub thinking_proportion: f64,
    pub keyword_counts: BTreeMap<String, usize>,
    pub keywords_in_solution: usize,
    /// Set when a `<think>` tag is never closed; the rest of the text then
    /// counts as thinking.
    pub unclosed_think: bool,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn count_phrase(haystack: &[String], phrase: &[String]) -> usize {
    if phrase.is_empty() || phrase.len() > haystack.len() {
        return 0;
    }
    haystack
        .windows(phrase.len())
        .filter(|w| *w == phrase)
        .count()
}

fn strip_tags(s: &str) -> String {
    s.replace(THINK_OPEN, " ").replace(THINK_CLOSE, " ")
}

/// Splits `text` into the first thinking segment and the solution around it.
fn segments(text: &str) -> (String, String, bool) {
    let Some(open) = text.find(THINK_OPEN) else {
        return (String::new(), strip_tags(text), false);
    };
    let before = &text[..open];
    let rest = &text[open + THINK_OPEN.len()..];
    match rest.find(THINK_CLOSE) {
        Some(close) => {
            let thinking = &rest[..close];
            let after = &rest[close + THINK_CLOSE.len()..];
            (
                strip_tags(thinking),
                strip_tags(&format!("{before} {after}")),
                false,
            )
        }
        None => (strip_tags(rest), strip_tags(before), true),
    }
}

/// Thinking proportion over whitespace tokens (tags excluded) and
/// case-insensitive whole-word keyword counts.
pub fn analyze_transcript<S: AsRef<str>>(text: &str, keywords: &[S]) -> TranscriptStats {
    let (thinking, solution, unclosed_think) = segments(text);
    let thinking_tokens = thinking.split_whitespace().count();
    let total_tokens = thinking_tokens + solution.split_whitespace().count();
    let thinking_words = words(&thinking);
    let solution_words = words(&solution);
    let mut keyword_counts = BTreeMap::new();
    let mut keywords_in_solution = 0;
    for kw in keywords {
        let phrase = words(kw.as_ref());
        let in_solution = count_phrase(&solution_words, &phrase);
        let total = count_phrase(&thinking_words, &phrase) + in_solution;
        keywords_in_solution += in_solution;
        *keyword_counts
            .entry(kw.as_ref().to_lowercase())
            .or_insert(0) += total;
    }
    TranscriptStats {
        total_tokens,
        thinking_tokens,
        thinking_proportion: if total_tokens == 0 {
            0.0
        } else {
            thinking_tokens as f64 / total_tokens as f64
        },
        keyword_counts,
        keywords_in_solution,
        unclosed_think,
    }
}

/// One line of transcript input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: serde_json::Value,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptResult {
    pub id: serde_json::Value,
    #[serde(flatten)]
    pub stats: TranscriptStats,
}

/// Means over all transcripts; `None` when there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub transcripts: usize,
    pub mean_thinking_proportion: Option<f64>,
    pub mean_keyword_counts: BTreeMap<String, Option<f64>>,
    pub mean_keywords_in_solution: Option<f64>,
}

pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>, AnalysisError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| AnalysisError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(t);
    }
    Ok(out)
}

pub fn summarize<S: AsRef<str>>(results: &[TranscriptResult], keywords: &[S]) -> TranscriptSummary {
    let n = results.len();
    let mean = |f: &dyn Fn(&TranscriptResult) -> f64| {
        (n > 0).then(|| results.iter().map(f).sum::<f64>() / n as f64)
    };
    let mean_keyword_counts = keywords
        .iter()
        .map(|k| {
            let key = k.as_ref().to_lowercase();
            let m = mean(&|r| r.stats.keyword_counts.get(&key).copied().unwrap_or(0) as f64);
            (key, m)
        })
        .collect();
    TranscriptSummary {
        transcripts: n,
        mean_thinking_proportion: mean(&|r| r.stats.thinking_proportion),
        mean_keyword_counts,
        mean_keywords_in_solution: mean(&|r| r.stats.keywords_in_solution as f64),
    }
}

fn id_text(id: &serde_json::Value) -> String {
    match id {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One CSV row per transcript with a column per keyword, in keyword order.
pub fn transcripts_csv<S: AsRef<str>>(
    results: &[TranscriptResult],
    keywords: &[S],
) -> Result<String, AnalysisError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let keys: Vec<String> = keywords.iter().map(|k| k.as_ref().to_lowercase()).collect();
    let mut header = vec![
        "id".to_string(),
        "total_tokens".into(),
        "thinking_tokens".into(),
        "thinking_proportion".into(),
    ];
    header.extend(keys.iter().cloned());
    header.push("keywords_in_solution".into());
    header.push("unclosed_think".into());
    w.write_record(&header)?;
    for r in results {
        let s = &r.stats;
        let mut row = vec![
            id_text(&r.id),
            s.total_tokens.to_string(),
            s.thinking_tokens.to_string(),
            s.thinking_proportion.to_string(),
        ];
        row.extend(
            keys.iter()
                .map(|k| s.keyword_counts.get(k).copied().unwrap_or(0).to_string()),
        );
        row.push(s.keywords_in_solution.to_string());
        row.push(s.unclosed_think.to_string());
        w.write_record(&row)?;
    }
    Ok(
        String::from_utf8(w.into_inner().map_err(|e| e.into_error())?)
            .expect("csv output is utf-8"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{FixedLengthPolicy, PolicyParams, DEFAULT_BIN_LENGTHS};

    #[test]
    fn no_tags_means_no_thinking() {
        let s = analyze_transcript("just the answer, but checked", &DEFAULT_KEYWORDS);
        assert_eq!(s.thinking_proportion, 0.0);
        assert_eq!(s.total_tokens, 5);
        assert_eq!(s.keyword_counts["but"], 1);
        assert_eq!(s.keyword_counts["check"], 0);
        assert_eq!(s.keywords_in_solution, 1);
    }

    #[test]
    fn hand_counted_example() {
        let s = analyze_transcript("<think> wait wait check </think> done", &DEFAULT_KEYWORDS);
        assert_eq!(s.thinking_proportion, 0.75);
        assert_eq!(s.keyword_counts["wait"], 2);
        assert_eq!(s.keyword_counts["check"], 1);
        assert_eq!(s.keyword_counts["verify"], 0);
        assert_eq!(s.keywords_in_solution, 0);
        assert!(!s.unclosed_think);
    }

    #[test]
    fn whole_word_case_insensitive() {
        let s = analyze_transcript(
            "<think>Attribute BUT Wait, waiting</think>",
            &DEFAULT_KEYWORDS,
        );
        assert_eq!(s.keyword_counts["but"], 1);
        assert_eq!(s.keyword_counts["wait"], 1);
        assert_eq!(s.thinking_proportion, 1.0);
    }

    #[test]
    fn unclosed_tag_flags_and_counts_rest_as_thinking() {
        let s = analyze_transcript("intro <think> hmm wait", &DEFAULT_KEYWORDS);
        assert!(s.unclosed_think);
        assert_eq!((s.thinking_tokens, s.total_tokens), (2, 3));
    }

    #[test]
    fn default_keyword_set() {
        assert_eq!(
            DEFAULT_KEYWORDS,
            [
                "wait",
                "alternatively",
                "but",
                "remember",
                "check",
                "verify"
            ]
        );
    }

    #[test]
    fn uniform_policy_eval_is_tier_symmetric() {
        let env = EnvConfig::default();
        let p = PolicyParams::zeros(3, DEFAULT_BIN_LENGTHS.to_vec());
        let r = evaluate(&p, &env, 4096, EvalSetting::Natural, 6000, 1).unwrap();
        let mean_bins = DEFAULT_BIN_LENGTHS
            .iter()
            .map(|&b| f64::from(b))
            .sum::<f64>()
            / 8.0;
        // Bin lengths have sd ≈ 990, so ~2000 draws per tier give se ≈ 22.
        for t in r.tier_mean_tokens.iter().flatten() {
            assert!((t - mean_bins).abs() < 90.0, "{t} vs {mean_bins}");
        }
        assert_eq!(r.tier_counts.iter().sum::<usize>(), 6000);
        let again = evaluate(&p, &env, 4096, EvalSetting::Natural, 6000, 1).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn fixed_length_baseline_accuracy() {
        let env = EnvConfig::default();
        let r = evaluate(
            &FixedLengthPolicy::new(3072),
            &env,
            4096,
            EvalSetting::Natural,
            4000,
            2,
        )
        .unwrap();
        assert_eq!(r.overall_mean_tokens, 3072.0);
        assert_eq!(r.adaptation_ratio, Some(1.0));
        assert!((r.overall_accuracy - 0.95).abs() < 0.015);
        assert!(matches!(
            evaluate(
                &FixedLengthPolicy::new(1),
                &env,
                4096,
                EvalSetting::Natural,
                0,
                2
            ),
            Err(AnalysisError::EmptyEval)
        ));
    }
}
