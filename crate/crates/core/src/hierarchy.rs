//! Budget subgroups and the prompts that condition them.

use crate::reward::BudgetLevel;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least one budget")]
    Empty,
    #[error("budgets must be strictly ascending, found {0} followed by {1}")]
    NotAscending(BudgetLevel, BudgetLevel),
    #[error("budget {0} must be positive")]
    NonPositive(i64),
    #[error("budget {budget} exceeds l_max = {l_max}")]
    ExceedsContext { budget: i64, l_max: u32 },
    #[error("rollouts_per_query = {n} is not divisible by {k} budgets")]
    Indivisible { n: usize, k: usize },
}

/// Ascending budgets `b_1 < … < b_k` and the number of rollouts drawn per
/// query, split evenly across them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSchedule {
    pub budgets: Vec<BudgetLevel>,
    pub rollouts_per_query: usize,
}

impl Default for BudgetSchedule {
    fn default() -> Self {
        Self {
            budgets: [512, 1024, 2048, 2560].map(BudgetLevel).to_vec(),
            rollouts_per_query: 16,
        }
    }
}

impl BudgetSchedule {
    pub fn new(
        budgets: Vec<BudgetLevel>,
        rollouts_per_query: usize,
    ) -> Result<Self, ScheduleError> {
        let schedule = Self {
            budgets,
            rollouts_per_query,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let k = self.budgets.len();
        if k == 0 {
            return Err(ScheduleError::Empty);
        }
        if let Some(&b) = self.budgets.iter().find(|b| b.0 == 0) {
            return Err(ScheduleError::NonPositive(i64::from(b.0)));
        }
        if let Some(w) = self.budgets.windows(2).find(|w| w[0] >= w[1]) {
            return Err(ScheduleError::NotAscending(w[0], w[1]));
        }
        if self.rollouts_per_query == 0 || !self.rollouts_per_query.is_multiple_of(k) {
            return Err(ScheduleError::Indivisible {
                n: self.rollouts_per_query,
                k,
            });
        }
        Ok(())
    }

    /// Also checks every budget fits the context window.
    pub fn validate_for(&self, l_max: u32) -> Result<(), ScheduleError> {
        self.validate()?;
        match self.budgets.iter().find(|b| b.0 > l_max) {
            Some(b) => Err(ScheduleError::ExceedsContext {
                budget: i64::from(b.0),
                l_max,
            }),
            None => Ok(()),
        }
    }

    pub fn k(&self) -> usize {
        self.budgets.len()
    }

    pub fn subgroup_size(&self) -> usize {
        self.rollouts_per_query / self.budgets.len()
    }

    pub fn mean_budget(&self) -> f64 {
        self.budgets.iter().map(|b| f64::from(b.0)).sum::<f64>() / self.budgets.len() as f64
    }
}

/// One rollout slot of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub query_id: u64,
    pub index: usize,
    pub subgroup: usize,
    pub budget: BudgetLevel,
}

/// Assigns slot `j` to subgroup `j / (n/k)`.
pub fn partition(query_id: u64, schedule: &BudgetSchedule) -> Result<Vec<Slot>, ScheduleError> {
    schedule.validate()?;
    let m = schedule.subgroup_size();
    Ok((0..schedule.rollouts_per_query)
        .map(|index| {
            let subgroup = index / m;
            Slot {
                query_id,
                index,
                subgroup,
                budget: schedule.budgets[subgroup],
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptBudget {
    Tokens(BudgetLevel),
    Minimal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPrompt {
    pub text: String,
    pub budget: PromptBudget,
}

pub fn render_prompt(budget: PromptBudget) -> BudgetPrompt {
    let text = match budget {
        PromptBudget::Tokens(b) => format!("I will answer the question within {} tokens", b.0),
        PromptBudget::Minimal => "I will answer the question with minimal tokens".to_string(),
    };
    BudgetPrompt { text, budget }
}

/// Anchor of the smallest budget in generated multi-budget schedules.
pub const SCHEDULE_LOW_ANCHOR: i64 = 512;

/// Builds a `k`-budget schedule whose mean is exactly `mean_target`.
///
/// `k = 1` is the single budget itself. Otherwise budgets are evenly spaced
/// from 512 up to `2·mean − 512`, which gives `{512, 2560}` for `k = 2`.
/// The 4-budget set at mean 1536 is the fixed `{512, 1024, 2048, 2560}`.
/// After rounding to whole tokens the largest budget absorbs the residual.
pub fn make_schedule(
    k: usize,
    mean_target: u32,
    rollouts_per_query: usize,
    l_max: u32,
) -> Result<BudgetSchedule, ScheduleError> {
    if k == 0 {
        return Err(ScheduleError::Empty);
    }
    if rollouts_per_query == 0 || !rollouts_per_query.is_multiple_of(k) {
        return Err(ScheduleError::Indivisible {
            n: rollouts_per_query,
            k,
        });
    }
    let mean = i64::from(mean_target);
    let raw: Vec<i64> = match k {
        1 => vec![mean],
        4 if mean_target == 1536 => vec![512, 1024, 2048, 2560],
        _ => {
            let lo = SCHEDULE_LOW_ANCHOR as f64;
            let hi = (2 * mean - SCHEDULE_LOW_ANCHOR) as f64;
            let step = (hi - lo) / (k - 1) as f64;
            let mut v: Vec<i64> = (0..k)
                .map(|i| (lo + step * i as f64).round() as i64)
                .collect();
            let residual = mean * k as i64 - v.iter().sum::<i64>();
            *v.last_mut().expect("k >= 2") += residual;
            v
        }
    };
    if let Some(&b) = raw.iter().find(|&&b| b <= 0) {
        return Err(ScheduleError::NonPositive(b));
    }
    if let Some(&b) = raw.iter().find(|&&b| b > i64::from(l_max)) {
        return Err(ScheduleError::ExceedsContext { budget: b, l_max });
    }
    let budgets = raw.into_iter().map(|b| BudgetLevel(b as u32)).collect();
    BudgetSchedule::new(budgets, rollouts_per_query)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(s: &BudgetSchedule) -> Vec<u32> {
        s.budgets.iter().map(|b| b.0).collect()
    }

    #[test]
    fn partition_default_schedule() {
        let slots = partition(7, &BudgetSchedule::default()).unwrap();
        assert_eq!(slots.len(), 16);
        for b in [512, 1024, 2048, 2560] {
            assert_eq!(slots.iter().filter(|s| s.budget.0 == b).count(), 4);
        }
        assert_eq!(slots[5].subgroup, 1);
        assert_eq!(slots[15].budget, BudgetLevel(2560));
    }

    #[test]
    fn partition_minimal_and_invalid() {
        let s = BudgetSchedule {
            rollouts_per_query: 4,
            ..BudgetSchedule::default()
        };
        let slots = partition(0, &s).unwrap();
        assert_eq!(
            slots.iter().map(|s| s.subgroup).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        let bad = BudgetSchedule {
            rollouts_per_query: 6,
            ..BudgetSchedule::default()
        };
        assert_eq!(
            partition(0, &bad),
            Err(ScheduleError::Indivisible { n: 6, k: 4 })
        );
    }

    #[test]
    fn prompts_are_bit_exact() {
        let p = |b| render_prompt(PromptBudget::Tokens(BudgetLevel(b))).text;
        assert_eq!(p(512), "I will answer the question within 512 tokens");
        assert_eq!(p(2560), "I will answer the question within 2560 tokens");
        assert_eq!(
            render_prompt(PromptBudget::Minimal).text,
            "I will answer the question with minimal tokens"
        );
    }

    #[test]
    fn ablation_schedules() {
        assert_eq!(
            tokens(&make_schedule(1, 1536, 16, 4096).unwrap()),
            vec![1536]
        );
        assert_eq!(
            tokens(&make_schedule(2, 1536, 16, 4096).unwrap()),
            vec![512, 2560]
        );
        assert_eq!(
            tokens(&make_schedule(4, 1536, 16, 4096).unwrap()),
            vec![512, 1024, 2048, 2560]
        );
    }

    #[test]
    fn generated_schedules_keep_the_mean() {
        for k in [3, 4, 6, 8] {
            for mean in [700, 1000, 1536, 2000] {
                let s = make_schedule(k, mean, 48, 4096).unwrap();
                let sum: u32 = tokens(&s).iter().sum();
                assert_eq!(sum, mean * k as u32, "k={k} mean={mean}");
                assert_eq!(s.budgets[0].0, 512);
            }
        }
    }

    #[test]
    fn make_schedule_errors() {
        assert!(matches!(
            make_schedule(4, 1536, 6, 4096),
            Err(ScheduleError::Indivisible { .. })
        ));
        assert!(matches!(
            make_schedule(2, 3000, 16, 4096),
            Err(ScheduleError::ExceedsContext { .. })
        ));
        assert!(matches!(
            make_schedule(2, 400, 16, 4096),
            Err(ScheduleError::NotAscending(..))
        ));
        assert!(matches!(
            make_schedule(1, 0, 16, 4096),
            Err(ScheduleError::NonPositive(0))
        ));
    }

    #[test]
    fn schedule_rejects_context_overflow() {
        let s = BudgetSchedule::default();
        assert!(s.validate_for(4096).is_ok());
        assert!(matches!(
            s.validate_for(2048),
            Err(ScheduleError::ExceedsContext { budget: 2560, .. })
        ));
    }
}
