//! Categorical policy over response-length bins.
//!
//! Logits for a context are `theta_base[tier] + theta_budget · g`, where `g`
//! is the budget feature: `b / L_max` while training under a budget prompt,
//! `0` for natural inference and `−1` for the minimal-tokens prompt.

use crate::reward::BudgetLevel;
use crate::rng::DrawStream;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("tier {tier} outside 1..={tiers}")]
    UnknownTier { tier: usize, tiers: usize },
    #[error("bin {bin} outside 0..{bins}")]
    BinOutOfRange { bin: usize, bins: usize },
    #[error("invalid policy: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const DEFAULT_BIN_LENGTHS: [u32; 8] = [64, 128, 256, 512, 1024, 1536, 2048, 3072];

/// Conditioning for one draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub tier: usize,
    pub budget_feature: f64,
}

impl Context {
    pub fn natural(tier: usize) -> Self {
        Self {
            tier,
            budget_feature: 0.0,
        }
    }

    pub fn minimal(tier: usize) -> Self {
        Self {
            tier,
            budget_feature: -1.0,
        }
    }

    pub fn with_budget(tier: usize, budget: BudgetLevel, l_max: u32) -> Self {
        Self {
            tier,
            budget_feature: f64::from(budget.0) / f64::from(l_max),
        }
    }
}

/// Anything that yields a distribution over length bins per context.
pub trait LengthPolicy {
    fn bin_lengths(&self) -> &[u32];
    fn probs(&self, ctx: &Context) -> Result<Vec<f64>, PolicyError>;
}

/// A sampled response length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub bin: usize,
    pub n_gen: u32,
    pub log_prob: f64,
}

/// Inverse-CDF draw from any [`LengthPolicy`].
pub fn sample_length<P: LengthPolicy + ?Sized>(
    policy: &P,
    ctx: &Context,
    rng: &mut DrawStream,
) -> Result<Sample, PolicyError> {
    let probs = policy.probs(ctx)?;
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut bin = probs.len() - 1;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            bin = a;
            break;
        }
    }
    // Floating-point slack at the top of the CDF can land on a zero-mass tail.
    while probs[bin] == 0.0 && bin > 0 {
        bin -= 1;
    }
    Ok(Sample {
        bin,
        n_gen: policy.bin_lengths()[bin],
        log_prob: probs[bin].ln(),
    })
}

/// Trainable parameters. `theta_base` is row-major `[tiers × bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub tiers: usize,
    pub theta_base: Vec<f64>,
    pub theta_budget: Vec<f64>,
    pub bin_lengths: Vec<u32>,
}

/// Gradient with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrad {
    pub theta_base: Vec<f64>,
    pub theta_budget: Vec<f64>,
}

impl PolicyGrad {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            theta_base: vec![0.0; params.theta_base.len()],
            theta_budget: vec![0.0; params.theta_budget.len()],
        }
    }

    pub fn add_assign(&mut self, other: &PolicyGrad) {
        for (a, b) in self.theta_base.iter_mut().zip(&other.theta_base) {
            *a += b;
        }
        for (a, b) in self.theta_budget.iter_mut().zip(&other.theta_budget) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.theta_base.iter_mut().for_each(|v| *v *= c);
        self.theta_budget.iter_mut().for_each(|v| *v *= c);
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.theta_base.iter().chain(&self.theta_budget)
    }
}

impl PolicyParams {
    /// All-zero parameters, i.e. the uniform policy.
    pub fn zeros(tiers: usize, bin_lengths: Vec<u32>) -> Self {
        let bins = bin_lengths.len();
        Self {
            tiers,
            theta_base: vec![0.0; tiers * bins],
            theta_budget: vec![0.0; bins],
            bin_lengths,
        }
    }

    pub fn bins(&self) -> usize {
        self.bin_lengths.len()
    }

    pub fn validate(&self, l_max: u32) -> Result<(), PolicyError> {
        let bins = self.bins();
        if bins < 2 {
            return Err(PolicyError::Config(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        if self.tiers == 0 {
            return Err(PolicyError::Config("need at least 1 tier".into()));
        }
        if let Some(w) = self.bin_lengths.windows(2).find(|w| w[0] >= w[1]) {
            return Err(PolicyError::Config(format!(
                "bin_lengths must be ascending, found {} followed by {}",
                w[0], w[1]
            )));
        }
        if let Some(b) = self.bin_lengths.iter().find(|&&b| b > l_max) {
            return Err(PolicyError::Config(format!(
                "bin length {b} exceeds l_max = {l_max}"
            )));
        }
        if self.theta_base.len() != self.tiers * bins || self.theta_budget.len() != bins {
            return Err(PolicyError::Config(
                "parameter shapes do not match tiers × bins".into(),
            ));
        }
        if !self
            .theta_base
            .iter()
            .chain(&self.theta_budget)
            .all(|v| v.is_finite())
        {
            return Err(PolicyError::Config("non-finite parameter".into()));
        }
        Ok(())
    }

    fn row(&self, tier: usize) -> Result<&[f64], PolicyError> {
        if tier == 0 || tier > self.tiers {
            return Err(PolicyError::UnknownTier {
                tier,
                tiers: self.tiers,
            });
        }
        let bins = self.bins();
        Ok(&self.theta_base[(tier - 1) * bins..tier * bins])
    }

    pub fn logits(&self, ctx: &Context) -> Result<Vec<f64>, PolicyError> {
        let row = self.row(ctx.tier)?;
        Ok(row
            .iter()
            .zip(&self.theta_budget)
            .map(|(base, w)| base + w * ctx.budget_feature)
            .collect())
    }

    /// Log-softmax of the logits, stabilised by subtracting the max.
    pub fn log_probs(&self, ctx: &Context) -> Result<Vec<f64>, PolicyError> {
        let z = self.logits(ctx)?;
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(z.into_iter().map(|v| v - max - lse).collect())
    }

    pub fn log_prob(&self, ctx: &Context, bin: usize) -> Result<f64, PolicyError> {
        let bins = self.bins();
        if bin >= bins {
            return Err(PolicyError::BinOutOfRange { bin, bins });
        }
        Ok(self.log_probs(ctx)?[bin])
    }

    pub fn sample(&self, ctx: &Context, rng: &mut DrawStream) -> Result<Sample, PolicyError> {
        let mut s = sample_length(self, ctx, rng)?;
        // Report the log-softmax value rather than ln(p) so ratios against
        // `log_prob` are exact.
        s.log_prob = self.log_prob(ctx, s.bin)?;
        Ok(s)
    }

    /// Adds `weight · ∇ log π(bin | ctx)` into `grad`.
    pub fn accumulate_grad_log_prob(
        &self,
        ctx: &Context,
        bin: usize,
        weight: f64,
        grad: &mut PolicyGrad,
    ) -> Result<(), PolicyError> {
        let bins = self.bins();
        if bin >= bins {
            return Err(PolicyError::BinOutOfRange { bin, bins });
        }
        let probs: Vec<f64> = self.log_probs(ctx)?.into_iter().map(f64::exp).collect();
        let offset = (ctx.tier - 1) * bins;
        for (a, p) in probs.iter().enumerate() {
            let d = if a == bin { 1.0 - p } else { -p };
            grad.theta_base[offset + a] += weight * d;
            grad.theta_budget[a] += weight * d * ctx.budget_feature;
        }
        Ok(())
    }

    pub fn grad_log_prob(&self, ctx: &Context, bin: usize) -> Result<PolicyGrad, PolicyError> {
        let mut grad = PolicyGrad::zeros_like(self);
        self.accumulate_grad_log_prob(ctx, bin, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// `θ ← θ − η·grad`.
    pub fn descend(&mut self, grad: &PolicyGrad, learning_rate: f64) {
        for (t, g) in self.theta_base.iter_mut().zip(&grad.theta_base) {
            *t -= learning_rate * g;
        }
        for (t, g) in self.theta_budget.iter_mut().zip(&grad.theta_budget) {
            *t -= learning_rate * g;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.theta_base
            .iter()
            .chain(&self.theta_budget)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let bins = self.bins();
        Checkpoint {
            arrays: vec![
                NamedArray {
                    name: "theta_base".into(),
                    shape: vec![self.tiers, bins],
                    data: self.theta_base.clone(),
                },
                NamedArray {
                    name: "theta_budget".into(),
                    shape: vec![bins],
                    data: self.theta_budget.clone(),
                },
                NamedArray {
                    name: "bin_lengths".into(),
                    shape: vec![bins],
                    data: self.bin_lengths.iter().map(|&b| f64::from(b)).collect(),
                },
            ],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PolicyError> {
        let get = |name: &str| {
            ckpt.arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| PolicyError::Checkpoint(format!("missing array `{name}`")))
        };
        let base = get("theta_base")?;
        let budget = get("theta_budget")?;
        let lengths = get("bin_lengths")?;
        let [tiers, bins] = base.shape[..] else {
            return Err(PolicyError::Checkpoint("theta_base must be 2-D".into()));
        };
        for a in [base, budget, lengths] {
            if a.data.len() != a.shape.iter().product::<usize>() {
                return Err(PolicyError::Checkpoint(format!(
                    "`{}` has {} values for shape {:?}",
                    a.name,
                    a.data.len(),
                    a.shape
                )));
            }
        }
        if budget.shape != [bins] || lengths.shape != [bins] {
            return Err(PolicyError::Checkpoint("bin dimension mismatch".into()));
        }
        if lengths
            .data
            .iter()
            .any(|v| v.fract() != 0.0 || *v < 0.0 || *v > f64::from(u32::MAX))
        {
            return Err(PolicyError::Checkpoint(
                "bin_lengths must be whole token counts".into(),
            ));
        }
        Ok(Self {
            tiers,
            theta_base: base.data.clone(),
            theta_budget: budget.data.clone(),
            bin_lengths: lengths.data.iter().map(|&v| v as u32).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let ckpt: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

impl LengthPolicy for PolicyParams {
    fn bin_lengths(&self) -> &[u32] {
        &self.bin_lengths
    }

    fn probs(&self, ctx: &Context) -> Result<Vec<f64>, PolicyError> {
        Ok(self.log_probs(ctx)?.into_iter().map(f64::exp).collect())
    }
}

/// Always answers with the same length, whatever the context.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedLengthPolicy {
    lengths: [u32; 1],
}

impl FixedLengthPolicy {
    pub fn new(n_gen: u32) -> Self {
        Self { lengths: [n_gen] }
    }
}

impl LengthPolicy for FixedLengthPolicy {
    fn bin_lengths(&self) -> &[u32] {
        &self.lengths
    }

    fn probs(&self, _ctx: &Context) -> Result<Vec<f64>, PolicyError> {
        Ok(vec![1.0])
    }
}

/// Checkpoint file: a flat list of named float arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub arrays: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
