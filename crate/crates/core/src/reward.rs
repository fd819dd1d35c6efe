//! Budget-aware piecewise reward.
//!
//! A correct response of `n_gen` tokens under budget `b` earns the budget's
//! cosine value while it stays within budget, and a cosine-decayed value
//! minus a deviation penalty once it runs over. Anything incorrect, or
//! longer than the context window, earns zero.
//!
//! For a fixed `n_gen` the same formula read across budgets gives a
//! preference ordering: short responses favour small budgets, long ones
//! favour large budgets. The crossing points between two budget curves are
//! the complexity thresholds exposed by [`complexity_threshold`].

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Stride of the coarse scan used by [`complexity_threshold`].
pub const THRESHOLD_SCAN_STRIDE: u32 = 16;
/// Absolute tolerance (tokens) of the threshold bisection.
pub const THRESHOLD_TOLERANCE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("{what} = {value} exceeds l_max = {l_max}")]
    Domain {
        what: &'static str,
        value: u32,
        l_max: u32,
    },
    #[error("invalid reward config: {0}")]
    Config(String),
}

/// Scale, deviation sensitivity and context length of the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub beta: f64,
    pub alpha: f64,
    pub l_max: u32,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha: 1e-4,
            l_max: 4096,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(RewardError::Config(format!(
                "beta must be finite and > 0, got {}",
                self.beta
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(RewardError::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.l_max == 0 {
            return Err(RewardError::Config("l_max must be >= 1".into()));
        }
        Ok(())
    }

    fn cosine(&self, tokens: f64) -> f64 {
        self.beta * (PI * tokens / (2.0 * f64::from(self.l_max))).cos()
    }
}

/// A token budget assigned to one rollout subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BudgetLevel(pub u32);

impl BudgetLevel {
    pub fn tokens(self) -> u32 {
        self.0
    }
}

impl std::fmt::Display for BudgetLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardBranch {
    OverBudgetCorrect,
    WithinBudgetCorrect,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardOutcome {
    pub value: f64,
    pub branch: RewardBranch,
}

/// Budget baseline `β·cos(π·b / 2L_max)`.
pub fn f2(budget: BudgetLevel, cfg: &RewardConfig) -> Result<f64, RewardError> {
    if budget.0 > cfg.l_max {
        return Err(RewardError::Domain {
            what: "budget",
            value: budget.0,
            l_max: cfg.l_max,
        });
    }
    Ok(cfg.cosine(f64::from(budget.0)))
}

/// Over-budget reward `β·cos(π·n / 2L_max) − α·|n − b|`. Not clamped, so it
/// can go negative far past the budget.
pub fn f1(n_gen: u32, budget: BudgetLevel, cfg: &RewardConfig) -> Result<f64, RewardError> {
    if n_gen > cfg.l_max {
        return Err(RewardError::Domain {
            what: "n_gen",
            value: n_gen,
            l_max: cfg.l_max,
        });
    }
    Ok(over_budget(f64::from(n_gen), budget, cfg))
}

fn over_budget(n_gen: f64, budget: BudgetLevel, cfg: &RewardConfig) -> f64 {
    cfg.cosine(n_gen) - cfg.alpha * (n_gen - f64::from(budget.0)).abs()
}

/// Reward of a correct response, extended to real-valued lengths so the
/// threshold finder can bisect between integer token counts.
fn correct_reward(n_gen: f64, budget: BudgetLevel, cfg: &RewardConfig) -> f64 {
    if n_gen > f64::from(budget.0) {
        over_budget(n_gen, budget, cfg)
    } else {
        cfg.cosine(f64::from(budget.0))
    }
}

/// The full piecewise reward. Total over every `n_gen`.
pub fn reward(n_gen: u32, correct: bool, budget: BudgetLevel, cfg: &RewardConfig) -> RewardOutcome {
    if !correct || n_gen > cfg.l_max {
        return RewardOutcome {
            value: 0.0,
            branch: RewardBranch::Zero,
        };
    }
    if n_gen > budget.0 {
        RewardOutcome {
            value: over_budget(f64::from(n_gen), budget, cfg),
            branch: RewardBranch::OverBudgetCorrect,
        }
    } else {
        RewardOutcome {
            value: cfg.cosine(f64::from(budget.0)),
            branch: RewardBranch::WithinBudgetCorrect,
        }
    }
}

fn check_ascending(budgets: &[BudgetLevel]) -> Result<(), RewardError> {
    if budgets.is_empty() {
        return Err(RewardError::Config("budget list is empty".into()));
    }
    if let Some(w) = budgets.windows(2).find(|w| w[0] >= w[1]) {
        return Err(RewardError::Config(format!(
            "budgets must be strictly ascending, found {} followed by {}",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// Ranks budgets by the reward a correct `n_gen`-token response would earn
/// under each, best first. Ties go to the smaller budget.
pub fn budget_preference(
    n_gen: u32,
    budgets: &[BudgetLevel],
    cfg: &RewardConfig,
) -> Result<Vec<(BudgetLevel, f64)>, RewardError> {
    check_ascending(budgets)?;
    if n_gen > cfg.l_max {
        return Err(RewardError::Domain {
            what: "n_gen",
            value: n_gen,
            l_max: cfg.l_max,
        });
    }
    let mut ranked: Vec<_> = budgets
        .iter()
        .map(|&b| (b, reward(n_gen, true, b, cfg).value))
        .collect();
    // Input is ascending, so a stable sort keeps smaller budgets first on ties.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

/// Smallest generation length at which the larger budget's reward catches
/// up with the smaller budget's, or `None` if the curves never cross in
/// `(0, l_max]`.
///
/// Coarse integer scan at [`THRESHOLD_SCAN_STRIDE`], then bisection on the
/// first bracketing interval down to [`THRESHOLD_TOLERANCE`]. The returned
/// value is the upper end of the final bracket, so the larger budget is
/// already at least as good there.
pub fn complexity_threshold(
    b_low: BudgetLevel,
    b_high: BudgetLevel,
    cfg: &RewardConfig,
) -> Result<Option<f64>, RewardError> {
    if b_low >= b_high {
        return Err(RewardError::Config(format!(
            "complexity threshold needs b_low < b_high, got {b_low} and {b_high}"
        )));
    }
    let gap = |n: f64| correct_reward(n, b_high, cfg) - correct_reward(n, b_low, cfg);

    let mut prev = None;
    let mut n = 1u32;
    loop {
        if gap(f64::from(n)) >= 0.0 {
            break;
        }
        prev = Some(n);
        if n == cfg.l_max {
            return Ok(None);
        }
        n = (n + THRESHOLD_SCAN_STRIDE).min(cfg.l_max);
    }
    let Some(lo) = prev else {
        return Ok(Some(f64::from(n)));
    };

    let (mut lo, mut hi) = (f64::from(lo), f64::from(n));
    while hi - lo > THRESHOLD_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if gap(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// Smallest integer length where the larger budget's reward is at least the
/// smaller one's, refined from [`complexity_threshold`].
pub fn complexity_threshold_tokens(
    b_low: BudgetLevel,
    b_high: BudgetLevel,
    cfg: &RewardConfig,
) -> Result<Option<u32>, RewardError> {
    let Some(t) = complexity_threshold(b_low, b_high, cfg)? else {
        return Ok(None);
    };
    let first = (t - THRESHOLD_TOLERANCE).floor().max(1.0) as u32;
    let last = (t.ceil() as u32).min(cfg.l_max);
    Ok((first..=last)
        .find(|&n| reward(n, true, b_high, cfg).value >= reward(n, true, b_low, cfg).value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    // Expected values from a 30-digit mpmath evaluation of the closed forms.
    const COS_PI_16: f64 = 0.980_785_280_403_230_4;
    const COS_PI_4: f64 = 0.707_106_781_186_547_5;

    #[test]
    fn f2_closed_form() {
        assert!((f2(BudgetLevel(512), &cfg()).unwrap() - COS_PI_16).abs() < 1e-12);
        assert!((f2(BudgetLevel(2048), &cfg()).unwrap() - COS_PI_4).abs() < 1e-12);
        assert_eq!(f2(BudgetLevel(0), &cfg()).unwrap(), 1.0);
        assert!(matches!(
            f2(BudgetLevel(4097), &cfg()),
            Err(RewardError::Domain { .. })
        ));
    }

    #[test]
    fn f1_closed_form() {
        let v = f1(1024, BudgetLevel(512), &cfg()).unwrap();
        assert!((v - 0.872_679_532_511_286_8).abs() < 1e-12);
        let v = f1(3000, BudgetLevel(2560), &cfg()).unwrap();
        assert!((v - 0.364_044_162_864_978_7).abs() < 1e-12);
        assert!(f1(4097, BudgetLevel(512), &cfg()).is_err());
        for b in [1, 512, 2560, 4096] {
            let c = RewardConfig {
                alpha: 0.37,
                ..cfg()
            };
            assert_eq!(
                f1(b, BudgetLevel(b), &c).unwrap(),
                f2(BudgetLevel(b), &c).unwrap()
            );
        }
    }

    #[test]
    fn f1_goes_negative_without_clamping() {
        let c = RewardConfig {
            alpha: 1e-3,
            ..cfg()
        };
        assert!(f1(4000, BudgetLevel(64), &c).unwrap() < 0.0);
    }

    #[test]
    fn reward_branches() {
        let b = BudgetLevel(512);
        let r = reward(100, false, b, &cfg());
        assert_eq!((r.value, r.branch), (0.0, RewardBranch::Zero));
        let r = reward(400, true, b, &cfg());
        assert_eq!(r.branch, RewardBranch::WithinBudgetCorrect);
        assert!((r.value - COS_PI_16).abs() < 1e-12);
        let r = reward(5000, true, b, &cfg());
        assert_eq!((r.value, r.branch), (0.0, RewardBranch::Zero));
        let r = reward(4096, true, b, &cfg());
        assert_eq!(r.branch, RewardBranch::OverBudgetCorrect);
    }

    #[test]
    fn preference_orderings() {
        let budgets: Vec<_> = [512, 1024, 2048, 2560].map(BudgetLevel).to_vec();
        let order = |n| {
            budget_preference(n, &budgets, &cfg())
                .unwrap()
                .into_iter()
                .map(|(b, _)| b.0)
                .collect::<Vec<_>>()
        };
        assert_eq!(order(300), vec![512, 1024, 2048, 2560]);
        assert_eq!(order(3000), vec![2560, 2048, 1024, 512]);
        let single = budget_preference(700, &[BudgetLevel(1536)], &cfg()).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].0, BudgetLevel(1536));
    }

    #[test]
    fn preference_rejects_bad_lists() {
        assert!(budget_preference(10, &[], &cfg()).is_err());
        let dup = [BudgetLevel(512), BudgetLevel(512)];
        assert!(budget_preference(10, &dup, &cfg()).is_err());
        let desc = [BudgetLevel(1024), BudgetLevel(512)];
        assert!(budget_preference(10, &desc, &cfg()).is_err());
    }

    #[test]
    fn preference_ties_prefer_smaller_budget() {
        // alpha = 0 and n above both budgets: both curves equal the plain cosine.
        let c = RewardConfig {
            alpha: 0.0,
            ..cfg()
        };
        let ranked = budget_preference(3000, &[BudgetLevel(512), BudgetLevel(1024)], &c).unwrap();
        assert_eq!(ranked[0].1, ranked[1].1);
        assert_eq!(ranked[0].0, BudgetLevel(512));
    }

    #[test]
    fn threshold_for_default_extremes() {
        let t = complexity_threshold(BudgetLevel(512), BudgetLevel(2560), &cfg())
            .unwrap()
            .unwrap();
        assert!(t > 2000.0 && t < 2100.0, "{t}");
        // Brute-force integer scan (mpmath) puts the first tie at 2043.
        let n = complexity_threshold_tokens(BudgetLevel(512), BudgetLevel(2560), &cfg()).unwrap();
        assert_eq!(n, Some(2043));
    }

    #[test]
    fn threshold_without_penalty_is_upper_budget() {
        let c = RewardConfig {
            alpha: 0.0,
            ..cfg()
        };
        for (lo, hi) in [(512, 1024), (512, 2560), (2048, 2560)] {
            let t = complexity_threshold(BudgetLevel(lo), BudgetLevel(hi), &c)
                .unwrap()
                .unwrap();
            assert!((t - f64::from(hi)).abs() <= THRESHOLD_TOLERANCE, "{t}");
            let n = complexity_threshold_tokens(BudgetLevel(lo), BudgetLevel(hi), &c).unwrap();
            assert_eq!(n, Some(hi));
        }
    }

    #[test]
    fn threshold_rejects_degenerate_pair() {
        assert!(complexity_threshold(BudgetLevel(512), BudgetLevel(512), &cfg()).is_err());
        assert!(complexity_threshold(BudgetLevel(1024), BudgetLevel(512), &cfg()).is_err());
    }

    #[test]
    fn threshold_none_when_curves_never_meet() {
        // For budgets inside the window the curves always meet by b_high;
        // only a budget beyond l_max leaves no crossing.
        let c = RewardConfig {
            alpha: 0.0,
            l_max: 600,
            ..cfg()
        };
        let t = complexity_threshold(BudgetLevel(100), BudgetLevel(700), &c).unwrap();
        assert_eq!(t, None);
    }
}
