//! Two-level advantages over one query's budget subgroups.
//!
//! The intra term compares a subgroup's mean reward with its budget
//! baseline `f2(b_i)` and is shared by every response in the subgroup. The
//! inter term standardises each reward against the whole query's rewards.
//! The final advantage is their plain sum.

use crate::hierarchy::BudgetSchedule;
use crate::reward::{f2, BudgetLevel, RewardConfig, RewardError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvantageError {
    #[error("subgroup {0} has no records")]
    EmptySubgroup(usize),
    #[error("need at least 2 records to standardise, got {0}")]
    TooFewRecords(usize),
    #[error("malformed batch: {0}")]
    Layout(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// One sampled response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub subgroup: usize,
    pub budget: BudgetLevel,
    pub n_gen: u32,
    pub correct: bool,
    pub reward: f64,
    pub old_logprob: f64,
}

/// All rollouts of one query, ordered by subgroup.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupBatch {
    pub query_id: u64,
    pub records: Vec<RolloutRecord>,
    pub schedule: BudgetSchedule,
}

impl SubgroupBatch {
    pub fn new(
        query_id: u64,
        records: Vec<RolloutRecord>,
        schedule: BudgetSchedule,
    ) -> Result<Self, AdvantageError> {
        let batch = Self {
            query_id,
            records,
            schedule,
        };
        batch.check()?;
        Ok(batch)
    }

    fn check(&self) -> Result<(), AdvantageError> {
        let k = self.schedule.k();
        let mut counts = vec![0usize; k];
        let mut last = 0;
        for (j, r) in self.records.iter().enumerate() {
            if r.subgroup >= k {
                return Err(AdvantageError::Layout(format!(
                    "record {j} names subgroup {} but the schedule has {k}",
                    r.subgroup
                )));
            }
            if r.subgroup < last {
                return Err(AdvantageError::Layout(format!(
                    "record {j} is out of subgroup order"
                )));
            }
            if r.budget != self.schedule.budgets[r.subgroup] {
                return Err(AdvantageError::Layout(format!(
                    "record {j} has budget {} but subgroup {} carries {}",
                    r.budget, r.subgroup, self.schedule.budgets[r.subgroup]
                )));
            }
            last = r.subgroup;
            counts[r.subgroup] += 1;
        }
        match counts.iter().position(|&c| c == 0) {
            Some(i) => Err(AdvantageError::EmptySubgroup(i)),
            None => Ok(()),
        }
    }

    fn subgroup_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges = Vec::with_capacity(self.schedule.k());
        let mut start = 0;
        for i in 0..self.schedule.k() {
            let len = self.records[start..]
                .iter()
                .take_while(|r| r.subgroup == i)
                .count();
            ranges.push(start..start + len);
            start += len;
        }
        ranges
    }
}

/// How the intra term is assigned to records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraMode {
    /// `μ_i − f2(b_i)`, identical for every record of subgroup `i`.
    #[default]
    SubgroupMean,
    /// `R_ij − f2(b_i)` per record; ablation only.
    PerRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvantageConfig {
    pub eps_std: f64,
    pub intra_mode: IntraMode,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            eps_std: 1e-8,
            intra_mode: IntraMode::SubgroupMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupStats {
    pub budget: BudgetLevel,
    pub size: usize,
    pub mean_reward: f64,
    pub baseline: f64,
    pub intra: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub query_id: u64,
    pub subgroups: Vec<SubgroupStats>,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
    pub combined: Vec<f64>,
}

pub fn intra_advantage(
    batch: &SubgroupBatch,
    cfg: &RewardConfig,
) -> Result<Vec<SubgroupStats>, AdvantageError> {
    batch.check()?;
    batch
        .subgroup_ranges()
        .into_iter()
        .zip(&batch.schedule.budgets)
        .map(|(range, &budget)| {
            let rewards = &batch.records[range];
            let mean_reward = rewards.iter().map(|r| r.reward).sum::<f64>() / rewards.len() as f64;
            let baseline = f2(budget, cfg)?;
            Ok(SubgroupStats {
                budget,
                size: rewards.len(),
                mean_reward,
                baseline,
                intra: mean_reward - baseline,
            })
        })
        .collect()
}

struct Standardised {
    mean: f64,
    std: f64,
    values: Vec<f64>,
}

fn standardise(batch: &SubgroupBatch, eps_std: f64) -> Result<Standardised, AdvantageError> {
    let n = batch.records.len();
    if n < 2 {
        return Err(AdvantageError::TooFewRecords(n));
    }
    let mean = batch.records.iter().map(|r| r.reward).sum::<f64>() / n as f64;
    let var = batch
        .records
        .iter()
        .map(|r| (r.reward - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    let values = if std < eps_std {
        vec![0.0; n]
    } else {
        batch
            .records
            .iter()
            .map(|r| (r.reward - mean) / std)
            .collect()
    };
    Ok(Standardised { mean, std, values })
}

/// Rewards standardised over every record of the query (population std).
/// All zeros when the std falls below `eps_std`.
pub fn inter_advantage(batch: &SubgroupBatch, eps_std: f64) -> Result<Vec<f64>, AdvantageError> {
    Ok(standardise(batch, eps_std)?.values)
}

pub fn combined_advantage(
    batch: &SubgroupBatch,
    reward_cfg: &RewardConfig,
    cfg: &AdvantageConfig,
) -> Result<AdvantageSet, AdvantageError> {
    let subgroups = intra_advantage(batch, reward_cfg)?;
    let Standardised {
        mean,
        std,
        values: inter,
    } = standardise(batch, cfg.eps_std)?;
    let intra: Vec<f64> = batch
        .records
        .iter()
        .map(|r| {
            let s = &subgroups[r.subgroup];
            match cfg.intra_mode {
                IntraMode::SubgroupMean => s.intra,
                IntraMode::PerRecord => r.reward - s.baseline,
            }
        })
        .collect();
    let combined = intra.iter().zip(&inter).map(|(a, b)| a + b).collect();
    Ok(AdvantageSet {
        query_id: batch.query_id,
        subgroups,
        mean_reward: mean,
        std_reward: std,
        intra,
        inter,
        combined,
    })
}
