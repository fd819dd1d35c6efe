//! Synthetic reasoning-length environment.
//!
//! Each problem has a latent difficulty tier with a required length. The
//! chance of answering correctly rises along a sigmoid in the number of
//! tokens spent, centred on that required length.

use crate::rng::DrawStream;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid env config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub tiers: usize,
    pub required_lengths: Vec<u32>,
    pub p_floor: f64,
    pub p_ceil: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            tiers: 3,
            required_lengths: vec![128, 512, 1536],
            p_floor: 0.05,
            p_ceil: 0.95,
            tau: 64.0,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, l_max: u32) -> Result<(), EnvError> {
        let err = |m: String| Err(EnvError::Config(m));
        if self.tiers == 0 {
            return err("tiers must be >= 1".into());
        }
        if self.required_lengths.len() != self.tiers {
            return err(format!(
                "required_lengths has {} entries but tiers = {}",
                self.required_lengths.len(),
                self.tiers
            ));
        }
        if let Some(w) = self.required_lengths.windows(2).find(|w| w[0] >= w[1]) {
            return err(format!(
                "required_lengths must be strictly increasing, found {} followed by {}",
                w[0], w[1]
            ));
        }
        let hardest = *self.required_lengths.last().expect("tiers >= 1");
        if hardest >= l_max {
            return err(format!(
                "required length {hardest} of the hardest tier must be below l_max = {l_max}"
            ));
        }
        if !(0.0 <= self.p_floor && self.p_floor < self.p_ceil && self.p_ceil <= 1.0) {
            return err(format!(
                "need 0 <= p_floor < p_ceil <= 1, got p_floor = {}, p_ceil = {}",
                self.p_floor, self.p_ceil
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return err(format!("tau must be finite and > 0, got {}", self.tau));
        }
        Ok(())
    }
}

/// A query with a latent difficulty. Tiers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: u64,
    pub tier: usize,
    pub required_length: u32,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `p_floor + (p_ceil − p_floor)·σ((n − L_req) / τ)`.
pub fn correctness_prob(n_gen: u32, problem: &Problem, cfg: &EnvConfig) -> f64 {
    let z = (f64::from(n_gen) - f64::from(problem.required_length)) / cfg.tau;
    cfg.p_floor + (cfg.p_ceil - cfg.p_floor) * sigmoid(z)
}

/// One Bernoulli draw at [`correctness_prob`]; advances `rng` by one draw.
pub fn sample_outcome(
    n_gen: u32,
    problem: &Problem,
    cfg: &EnvConfig,
    rng: &mut DrawStream,
) -> bool {
    rng.uniform() < correctness_prob(n_gen, problem, cfg)
}

/// `n` problems with uniformly drawn tiers, ids `0..n`.
pub fn make_dataset(n: usize, cfg: &EnvConfig, rng: &mut DrawStream) -> Vec<Problem> {
    (0..n as u64)
        .map(|id| {
            let tier = 1 + rng.below(cfg.tiers);
            Problem {
                id,
                tier,
                required_length: cfg.required_lengths[tier - 1],
            }
        })
        .collect()
}

#[derive(Serialize)]
struct DatasetLine {
    id: u64,
    tier: usize,
    #[serde(rename = "L_req")]
    l_req: u32,
}

pub fn write_dataset_jsonl<W: Write>(problems: &[Problem], mut out: W) -> std::io::Result<()> {
    for p in problems {
        let line = DatasetLine {
            id: p.id,
            tier: p.tier,
            l_req: p.required_length,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
