//! Hierarchical rollouts, two-level advantages and clipped policy-gradient
//! updates.
//!
//! Each step draws a batch of queries, rolls out `n` responses per query
//! split across the budget subgroups, scores them, and takes one plain
//! gradient-descent step on the clipped surrogate averaged over every
//! response of the step. Rollouts run on a rayon pool; every slot draws
//! from its own counted stream and the gradient is reduced in query order,
//! so results do not depend on the worker count.

use crate::advantage::{
    combined_advantage, AdvantageConfig, AdvantageError, AdvantageSet, IntraMode, RolloutRecord,
    SubgroupBatch,
};
use crate::env::{make_dataset, sample_outcome, EnvConfig, Problem};
use crate::hierarchy::{partition, BudgetSchedule, ScheduleError};
use crate::policy::{Context, PolicyError, PolicyGrad, PolicyParams};
use crate::reward::{reward, RewardConfig};
use crate::rng::{DrawStream, StreamTag};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("{0}")]
    Observer(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<TrainError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub learning_rate: f64,
    /// Queries per step.
    pub batch_size: usize,
    pub steps: usize,
    /// KL regularisation is disabled; only 0 is accepted.
    pub kl_coeff: f64,
    pub seed: u64,
    /// Size of the training problem pool queries are drawn from.
    pub dataset_size: usize,
    /// Write a checkpoint every this many steps (0 disables periodic ones).
    pub checkpoint_every: usize,
    /// Rollout worker threads; 0 lets rayon decide.
    pub workers: usize,
    pub eps_std: f64,
    pub intra_mode: IntraMode,
    /// Also log every query's advantage set to the run log.
    pub log_advantages: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            learning_rate: 0.5,
            batch_size: 32,
            steps: 500,
            kl_coeff: 0.0,
            seed: 0,
            dataset_size: 4096,
            checkpoint_every: 100,
            workers: 0,
            eps_std: 1e-8,
            intra_mode: IntraMode::SubgroupMean,
            log_advantages: false,
        }
    }
}

impl TrainerConfig {
    /// Returns the offending field name alongside the message.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.eps_low) {
            return Err((
                "eps_low",
                format!("must be in (0, 1), got {}", self.eps_low),
            ));
        }
        if !open_unit(self.eps_high) {
            return Err((
                "eps_high",
                format!("must be in (0, 1), got {}", self.eps_high),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err((
                "learning_rate",
                format!("must be finite and > 0, got {}", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(("steps", "must be >= 1".into()));
        }
        if self.kl_coeff != 0.0 {
            return Err((
                "kl_coeff",
                format!("KL is disabled, must be 0, got {}", self.kl_coeff),
            ));
        }
        if self.dataset_size == 0 {
            return Err(("dataset_size", "must be >= 1".into()));
        }
        if !(self.eps_std.is_finite() && self.eps_std > 0.0) {
            return Err((
                "eps_std",
                format!("must be finite and > 0, got {}", self.eps_std),
            ));
        }
        Ok(())
    }

    pub fn advantage(&self) -> AdvantageConfig {
        AdvantageConfig {
            eps_std: self.eps_std,
            intra_mode: self.intra_mode,
        }
    }
}

/// Everything a training step reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub reward: &'a RewardConfig,
    pub schedule: &'a BudgetSchedule,
    pub env: &'a EnvConfig,
    pub trainer: &'a TrainerConfig,
}

/// Per-step metrics, one run-log line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub std_length: f64,
    /// Indexed by tier − 1; `None` when no query of that tier was drawn.
    pub tier_mean_length: Vec<Option<f64>>,
    pub loss: f64,
    pub accuracy: f64,
    pub param_max_abs: f64,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum RunLogLine {
    Step(StepReport),
    Advantages { step: usize, set: AdvantageSet },
}

fn check_finite(v: f64, what: &str) -> Result<(), TrainError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Numeric(format!("{what} is {v}")))
    }
}

/// Per-sample negative clipped surrogate `−min(ρA, clip(ρ, 1−ε_low, 1+ε_high)·A)`.
pub fn clipped_loss_term(
    ratio: f64,
    advantage: f64,
    eps_low: f64,
    eps_high: f64,
) -> Result<f64, TrainError> {
    check_finite(ratio, "ratio")?;
    check_finite(advantage, "advantage")?;
    if ratio <= 0.0 {
        return Err(TrainError::Numeric(format!(
            "ratio must be > 0, got {ratio}"
        )));
    }
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    Ok(-(ratio * advantage).min(clipped * advantage))
}

/// `d/dρ` of [`clipped_loss_term`]: `−A` where the unclipped branch is
/// active, zero where the clip has taken over.
pub fn clipped_loss_ratio_grad(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    if ratio * advantage <= clipped * advantage {
        -advantage
    } else {
        0.0
    }
}

/// A response frozen for loss evaluation: its context, chosen bin, the
/// behaviour policy's log-probability and its advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenSample {
    pub ctx: Context,
    pub bin: usize,
    pub old_logprob: f64,
    pub advantage: f64,
}

/// Mean clipped surrogate loss of `params` over a frozen batch.
pub fn surrogate_loss(
    params: &PolicyParams,
    samples: &[FrozenSample],
    eps_low: f64,
    eps_high: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        let ratio = (params.log_prob(&s.ctx, s.bin)? - s.old_logprob).exp();
        total += clipped_loss_term(ratio, s.advantage, eps_low, eps_high)?;
    }
    Ok(total / samples.len() as f64)
}

fn accumulate_surrogate_grad(
    params: &PolicyParams,
    samples: &[FrozenSample],
    eps_low: f64,
    eps_high: f64,
    grad: &mut PolicyGrad,
) -> Result<f64, TrainError> {
    let mut loss = 0.0;
    for s in samples {
        let ratio = (params.log_prob(&s.ctx, s.bin)? - s.old_logprob).exp();
        loss += clipped_loss_term(ratio, s.advantage, eps_low, eps_high)?;
        // ∇ρ = ρ·∇log π
        let w = clipped_loss_ratio_grad(ratio, s.advantage, eps_low, eps_high) * ratio;
        if w != 0.0 {
            params.accumulate_grad_log_prob(&s.ctx, s.bin, w, grad)?;
        }
    }
    Ok(loss)
}

/// Analytic gradient of [`surrogate_loss`].
pub fn surrogate_grad(
    params: &PolicyParams,
    samples: &[FrozenSample],
    eps_low: f64,
    eps_high: f64,
) -> Result<PolicyGrad, TrainError> {
    let mut grad = PolicyGrad::zeros_like(params);
    accumulate_surrogate_grad(params, samples, eps_low, eps_high, &mut grad)?;
    grad.scale(1.0 / samples.len() as f64);
    Ok(grad)
}

struct QueryOutcome {
    tier: usize,
    grad: PolicyGrad,
    loss_sum: f64,
    records: Vec<RolloutRecord>,
    advantages: AdvantageSet,
}

fn roll_out_query(
    policy: &PolicyParams,
    setup: &TrainSetup<'_>,
    step: usize,
    query_index: usize,
    problem: &Problem,
) -> Result<QueryOutcome, TrainError> {
    let cfg = setup.trainer;
    let mut records = Vec::with_capacity(setup.schedule.rollouts_per_query);
    let mut frozen = Vec::with_capacity(setup.schedule.rollouts_per_query);
    for slot in partition(problem.id, setup.schedule)? {
        let mut rng = DrawStream::new(
            cfg.seed,
            StreamTag::Rollout,
            &[step as u64, query_index as u64, slot.index as u64],
        );
        let ctx = Context::with_budget(problem.tier, slot.budget, setup.reward.l_max);
        let sample = policy.sample(&ctx, &mut rng)?;
        let correct = sample_outcome(sample.n_gen, problem, setup.env, &mut rng);
        let outcome = reward(sample.n_gen, correct, slot.budget, setup.reward);
        records.push(RolloutRecord {
            subgroup: slot.subgroup,
            budget: slot.budget,
            n_gen: sample.n_gen,
            correct,
            reward: outcome.value,
            old_logprob: sample.log_prob,
        });
        frozen.push(FrozenSample {
            ctx,
            bin: sample.bin,
            old_logprob: sample.log_prob,
            advantage: 0.0,
        });
    }
    let batch = SubgroupBatch::new(problem.id, records, setup.schedule.clone())?;
    let advantages = combined_advantage(&batch, setup.reward, &cfg.advantage())?;
    for (f, a) in frozen.iter_mut().zip(&advantages.combined) {
        f.advantage = *a;
    }
    let mut grad = PolicyGrad::zeros_like(policy);
    let loss_sum =
        accumulate_surrogate_grad(policy, &frozen, cfg.eps_low, cfg.eps_high, &mut grad)?;
    Ok(QueryOutcome {
        tier: problem.tier,
        grad,
        loss_sum,
        records: batch.records,
        advantages,
    })
}

/// The training problem pool for a setup.
pub fn training_dataset(setup: &TrainSetup<'_>) -> Vec<Problem> {
    let mut rng = DrawStream::new(setup.env.seed, StreamTag::Dataset, &[0]);
    make_dataset(setup.trainer.dataset_size, setup.env, &mut rng)
}

/// Result of one step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub policy: PolicyParams,
    pub report: StepReport,
    pub advantages: Vec<AdvantageSet>,
}

/// One iteration: rollouts for `batch_size` queries, advantages, and a
/// single descent step. `step` is 1-based and keys the random streams.
pub fn train_step(
    policy: &PolicyParams,
    setup: &TrainSetup<'_>,
    dataset: &[Problem],
    step: usize,
    pool: &rayon::ThreadPool,
) -> Result<StepOutput, TrainError> {
    let cfg = setup.trainer;
    check_finite(cfg.learning_rate, "learning_rate")?;
    if dataset.is_empty() {
        return Err(TrainError::Config("training dataset is empty".into()));
    }
    let mut pick = DrawStream::new(cfg.seed, StreamTag::BatchSelect, &[step as u64]);
    let queries: Vec<Problem> = (0..cfg.batch_size)
        .map(|_| dataset[pick.below(dataset.len())])
        .collect();

    let outcomes: Vec<QueryOutcome> = pool.install(|| {
        queries
            .par_iter()
            .enumerate()
            .map(|(q, problem)| roll_out_query(policy, setup, step, q, problem))
            .collect::<Result<_, _>>()
    })?;

    let mut grad = PolicyGrad::zeros_like(policy);
    let mut loss = 0.0;
    let mut count = 0usize;
    let (mut reward_sum, mut len_sum, mut len_sq, mut correct) = (0.0, 0.0, 0.0, 0usize);
    let mut tier_len = vec![(0.0, 0usize); policy.tiers];
    for o in &outcomes {
        grad.add_assign(&o.grad);
        loss += o.loss_sum;
        for r in &o.records {
            let len = f64::from(r.n_gen);
            count += 1;
            reward_sum += r.reward;
            len_sum += len;
            len_sq += len * len;
            correct += usize::from(r.correct);
            tier_len[o.tier - 1].0 += len;
            tier_len[o.tier - 1].1 += 1;
        }
    }
    let n = count as f64;
    grad.scale(1.0 / n);
    let mut next = policy.clone();
    next.descend(&grad, cfg.learning_rate);

    let mean_length = len_sum / n;
    let report = StepReport {
        step,
        mean_reward: reward_sum / n,
        mean_length,
        std_length: (len_sq / n - mean_length * mean_length).max(0.0).sqrt(),
        tier_mean_length: tier_len
            .iter()
            .map(|&(s, c)| (c > 0).then(|| s / c as f64))
            .collect(),
        loss: loss / n,
        accuracy: correct as f64 / n,
        param_max_abs: next.max_abs(),
    };
    check_finite(report.loss, "loss")?;
    check_finite(report.param_max_abs, "parameter")?;
    Ok(StepOutput {
        policy: next,
        report,
        advantages: outcomes.into_iter().map(|o| o.advantages).collect(),
    })
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TrainError::Config(format!("cannot build worker pool: {e}")))
}

/// Runs `steps` iterations. `observer` sees every step as it completes (the
/// run log and checkpoints hang off it); an error from it aborts training.
pub fn train<F>(
    policy_init: PolicyParams,
    setup: &TrainSetup<'_>,
    mut observer: F,
) -> Result<(PolicyParams, Vec<StepReport>), TrainError>
where
    F: FnMut(&StepOutput) -> Result<(), String>,
{
    let pool = thread_pool(setup.trainer.workers)?;
    let dataset = training_dataset(setup);
    let mut policy = policy_init;
    let mut reports = Vec::with_capacity(setup.trainer.steps);
    for step in 1..=setup.trainer.steps {
        let at = |e: TrainError| TrainError::AtStep {
            step,
            source: Box::new(e),
        };
        let out = train_step(&policy, setup, &dataset, step, &pool).map_err(at)?;
        observer(&out).map_err(|e| at(TrainError::Observer(e)))?;
        policy = out.policy;
        reports.push(out.report);
    }
    Ok((policy, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::DEFAULT_BIN_LENGTHS;
    use crate::reward::BudgetLevel;

    #[test]
    fn clip_hand_cases() {
        for a in [-3.0, 0.0, 0.7] {
            assert_eq!(clipped_loss_term(1.0, a, 0.2, 0.28).unwrap(), -a);
        }
        assert_eq!(clipped_loss_term(1.5, 2.0, 0.2, 0.28).unwrap(), -2.56);
        assert_eq!(clipped_loss_term(0.5, -1.0, 0.2, 0.28).unwrap(), 0.8);
    }

    #[test]
    fn clip_rejects_bad_inputs() {
        assert!(clipped_loss_term(0.0, 1.0, 0.2, 0.28).is_err());
        assert!(clipped_loss_term(f64::NAN, 1.0, 0.2, 0.28).is_err());
        assert!(clipped_loss_term(1.0, f64::INFINITY, 0.2, 0.28).is_err());
    }

    #[test]
    fn ratio_grad_zero_when_clipped() {
        assert_eq!(clipped_loss_ratio_grad(1.5, 2.0, 0.2, 0.28), 0.0);
        assert_eq!(clipped_loss_ratio_grad(1.5, -2.0, 0.2, 0.28), 2.0);
        assert_eq!(clipped_loss_ratio_grad(0.5, -1.0, 0.2, 0.28), 0.0);
        assert_eq!(clipped_loss_ratio_grad(1.0, 0.3, 0.2, 0.28), -0.3);
    }

    fn setup_parts() -> (RewardConfig, BudgetSchedule, EnvConfig, TrainerConfig) {
        (
            RewardConfig::default(),
            BudgetSchedule::default(),
            EnvConfig::default(),
            TrainerConfig {
                batch_size: 4,
                steps: 3,
                dataset_size: 64,
                ..TrainerConfig::default()
            },
        )
    }

    #[test]
    fn zero_learning_rate_leaves_params() {
        let (r, s, e, mut t) = setup_parts();
        t.learning_rate = 0.0;
        let setup = TrainSetup {
            reward: &r,
            schedule: &s,
            env: &e,
            trainer: &t,
        };
        let p = PolicyParams::zeros(3, DEFAULT_BIN_LENGTHS.to_vec());
        let pool = thread_pool(1).unwrap();
        let out = train_step(&p, &setup, &training_dataset(&setup), 1, &pool).unwrap();
        assert_eq!(out.policy, p);
        assert_eq!(out.report.step, 1);
        assert_eq!(out.advantages.len(), 4);
    }

    #[test]
    fn positive_advantage_bins_gain_logit() {
        // One tier, two bins, one budget, always-correct environment.
        let r = RewardConfig::default();
        let s = BudgetSchedule::new(vec![BudgetLevel(512)], 16).unwrap();
        let e = EnvConfig {
            tiers: 1,
            required_lengths: vec![128],
            p_floor: 1.0,
            p_ceil: 1.0,
            ..EnvConfig::default()
        };
        let t = TrainerConfig {
            batch_size: 4,
            dataset_size: 8,
            ..TrainerConfig::default()
        };
        let setup = TrainSetup {
            reward: &r,
            schedule: &s,
            env: &e,
            trainer: &t,
        };
        let p = PolicyParams::zeros(1, vec![256, 1024]);
        let pool = thread_pool(1).unwrap();
        let out = train_step(&p, &setup, &training_dataset(&setup), 1, &pool).unwrap();
        // 256 stays within budget and earns f2(512); 1024 runs over and earns
        // f1 < f2, so the short bin carries the positive advantage.
        let ctx = Context::with_budget(1, BudgetLevel(512), r.l_max);
        let before = p.logits(&ctx).unwrap();
        let after = out.policy.logits(&ctx).unwrap();
        assert!(after[0] > before[0], "{after:?}");
        assert!(after[1] < before[1], "{after:?}");
    }

    #[test]
    fn steps_are_reproducible() {
        let (r, s, e, t) = setup_parts();
        let setup = TrainSetup {
            reward: &r,
            schedule: &s,
            env: &e,
            trainer: &t,
        };
        let p = PolicyParams::zeros(3, DEFAULT_BIN_LENGTHS.to_vec());
        let (a, ra) = train(p.clone(), &setup, |_| Ok(())).unwrap();
        let (b, rb) = train(p, &setup, |_| Ok(())).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn observer_error_carries_step() {
        let (r, s, e, t) = setup_parts();
        let setup = TrainSetup {
            reward: &r,
            schedule: &s,
            env: &e,
            trainer: &t,
        };
        let p = PolicyParams::zeros(3, DEFAULT_BIN_LENGTHS.to_vec());
        let err = train(p, &setup, |o| {
            if o.report.step == 2 {
                Err("disk full".into())
            } else {
                Ok(())
            }
        })
        .unwrap_err();
        assert!(matches!(err, TrainError::AtStep { step: 2, .. }));
        assert!(err.to_string().contains("disk full"));
    }

    #[test]
    fn config_validation_names_fields() {
        let ok = TrainerConfig::default();
        assert!(ok.validate().is_ok());
        let cases = [
            (
                TrainerConfig {
                    eps_low: 0.0,
                    ..ok.clone()
                },
                "eps_low",
            ),
            (
                TrainerConfig {
                    eps_high: 1.0,
                    ..ok.clone()
                },
                "eps_high",
            ),
            (
                TrainerConfig {
                    learning_rate: 0.0,
                    ..ok.clone()
                },
                "learning_rate",
            ),
            (
                TrainerConfig {
                    steps: 0,
                    ..ok.clone()
                },
                "steps",
            ),
            (
                TrainerConfig {
                    kl_coeff: 0.1,
                    ..ok.clone()
                },
                "kl_coeff",
            ),
            (
                TrainerConfig {
                    batch_size: 0,
                    ..ok.clone()
                },
                "batch_size",
            ),
        ];
        for (cfg, field) in cases {
            assert_eq!(cfg.validate().unwrap_err().0, field);
        }
    }
}
