#![allow(dead_code)]

use hbpo::advantage::{RolloutRecord, SubgroupBatch};
use hbpo::analysis::TranscriptStats;
use hbpo::hierarchy::BudgetSchedule;
use hbpo::policy::{Context, PolicyParams};
use hbpo::reward::{BudgetLevel, RewardConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A well-formed batch of `k` subgroups of `m` records each with rewards
/// drawn from a mix of zeros, budget baselines and arbitrary values.
pub fn random_batch(rng: &mut ChaCha8Rng, k: usize, m: usize) -> SubgroupBatch {
    let pool = [256u32, 512, 1024, 1536, 2048, 2560, 3072];
    let mut budgets: Vec<u32> = pool.to_vec();
    // Random ascending subset of size k.
    while budgets.len() > k {
        let i = rng.random_range(0..budgets.len());
        budgets.remove(i);
    }
    let schedule = BudgetSchedule {
        budgets: budgets.iter().copied().map(BudgetLevel).collect(),
        rollouts_per_query: k * m,
    };
    let mut records = Vec::with_capacity(k * m);
    for (i, &b) in budgets.iter().enumerate() {
        for _ in 0..m {
            let correct = rng.random_bool(0.6);
            let reward = if correct {
                rng.random_range(-0.2..1.0)
            } else {
                0.0
            };
            records.push(RolloutRecord {
                subgroup: i,
                budget: BudgetLevel(b),
                n_gen: rng.random_range(1..4096),
                correct,
                reward,
                old_logprob: rng.random_range(-5.0..0.0),
            });
        }
    }
    SubgroupBatch::new(rng.random(), records, schedule).expect("well-formed batch")
}

/// Straight-line reference for the two advantage terms.
pub fn oracle_advantages(
    batch: &SubgroupBatch,
    cfg: &RewardConfig,
    eps_std: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = batch.records.len();
    let mut intra = vec![0.0; n];
    for (i, b) in batch.schedule.budgets.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0.0;
        for r in &batch.records {
            if r.subgroup == i {
                sum += r.reward;
                count += 1.0;
            }
        }
        let baseline =
            cfg.beta * (std::f64::consts::PI * f64::from(b.0) / (2.0 * f64::from(cfg.l_max))).cos();
        for (j, r) in batch.records.iter().enumerate() {
            if r.subgroup == i {
                intra[j] = sum / count - baseline;
            }
        }
    }
    let mut mean = 0.0;
    for r in &batch.records {
        mean += r.reward;
    }
    mean /= n as f64;
    let mut var = 0.0;
    for r in &batch.records {
        var += (r.reward - mean) * (r.reward - mean);
    }
    let std = (var / n as f64).sqrt();
    let mut inter = vec![0.0; n];
    if std >= eps_std {
        for (j, r) in batch.records.iter().enumerate() {
            inter[j] = (r.reward - mean) / std;
        }
    }
    let combined = (0..n).map(|j| intra[j] + inter[j]).collect();
    (intra, inter, combined)
}

pub fn random_params(rng: &mut ChaCha8Rng, tiers: usize, bin_lengths: Vec<u32>) -> PolicyParams {
    let mut p = PolicyParams::zeros(tiers, bin_lengths);
    for v in p.theta_base.iter_mut().chain(p.theta_budget.iter_mut()) {
        *v = rng.random_range(-2.0..2.0);
    }
    p
}

pub fn random_context(rng: &mut ChaCha8Rng, tiers: usize) -> Context {
    let tier = rng.random_range(1..=tiers);
    match rng.random_range(0..3) {
        0 => Context::natural(tier),
        1 => Context::minimal(tier),
        _ => Context::with_budget(tier, BudgetLevel(rng.random_range(1..=4096)), 4096),
    }
}

/// Central differences of `f` with respect to every parameter, laid out as
/// `theta_base` followed by `theta_budget`.
pub fn finite_diff<F: Fn(&PolicyParams) -> f64>(params: &PolicyParams, h: f64, f: F) -> Vec<f64> {
    let nb = params.theta_base.len();
    let total = nb + params.theta_budget.len();
    (0..total)
        .map(|i| {
            let bump = |delta: f64| {
                let mut p = params.clone();
                if i < nb {
                    p.theta_base[i] += delta;
                } else {
                    p.theta_budget[i - nb] += delta;
                }
                f(&p)
            };
            (bump(h) - bump(-h)) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied())
        .max(norm(&mut b.iter().copied()))
        .max(1e-8);
    diff / scale
}

/// Range and consistency invariants every transcript result must satisfy.
pub fn transcript_invariants(s: &TranscriptStats) -> Result<(), String> {
    if !(0.0..=1.0).contains(&s.thinking_proportion) {
        return Err(format!(
            "thinking_proportion {} outside [0, 1]",
            s.thinking_proportion
        ));
    }
    if s.thinking_tokens > s.total_tokens {
        return Err(format!(
            "{} thinking tokens of {}",
            s.thinking_tokens, s.total_tokens
        ));
    }
    let total: usize = s.keyword_counts.values().sum();
    if s.keywords_in_solution > total {
        return Err(format!(
            "{} keywords in solution of {total}",
            s.keywords_in_solution
        ));
    }
    if s.total_tokens == 0 && s.thinking_proportion != 0.0 {
        return Err("empty text with nonzero thinking proportion".into());
    }
    Ok(())
}

/// Arbitrary text biased towards tags, keywords and odd whitespace.
pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 14] = [
        "<think>", "</think>", "<think", "think>", "wait", "WAIT", "but", "Verify", " ", "\n",
        "\t", "check-", "é", "\u{0}",
    ];
    let len = rng.random_range(0..40);
    let mut s = String::new();
    for _ in 0..len {
        if rng.random_bool(0.5) {
            s.push_str(PIECES[rng.random_range(0..PIECES.len())]);
        } else {
            s.push(char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?'));
        }
    }
    s
}
