//! Clipped policy-gradient update with a low-variance KL penalty.
//!
//! One update consumes a batch of samples carrying the action, the log
//! probability at sampling time, the log probability under a frozen
//! reference policy, and a group-baselined advantage. The loss is the
//! standard clipped surrogate plus `kl_coef` times the k3 estimator of
//! KL(current, reference); both gradients are analytic.

use crate::policy::{Action, CoPolicy, PolicyError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("probability ratio {ratio} is not positive")]
    RatioDomain { ratio: f64 },
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub lr: f64,
    pub clip_eps: f64,
    pub kl_coef: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            clip_eps: 0.2,
            kl_coef: 0.01,
        }
    }
}

/// One action with everything the update needs to weigh it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub action: Action,
    pub logp_old: f64,
    pub logp_ref: f64,
    pub advantage: f64,
}

/// The k3 estimator of KL divergence from a single probability ratio
/// r = p_ref / p_current: (r - 1) - ln r. Nonnegative, zero at r = 1.
pub fn k3_kl(ratio: f64) -> Result<f64, PpoError> {
    if ratio <= 0.0 || !ratio.is_finite() {
        return Err(PpoError::RatioDomain { ratio });
    }
    Ok((ratio - 1.0) - ratio.ln())
}

/// Mean clipped surrogate loss over a batch of probability ratios.
pub fn ppo_clip_loss(ratios: &[f64], advantages: &[f64], clip_eps: f64) -> f64 {
    let n = ratios.len();
    if n == 0 {
        return 0.0;
    }
    ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| {
            let clipped = r.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            -(r * a).min(clipped * a)
        })
        .sum::<f64>()
        / n as f64
}

/// Subtracts the group mean reward from each sample, so every group's
/// advantages sum to zero.
pub fn advantage_baseline(rewards: &[f64], groups: &[usize]) -> Vec<f64> {
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut sums = vec![0.0; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (&r, &g) in rewards.iter().zip(groups) {
        sums[g] += r;
        counts[g] += 1;
    }
    rewards
        .iter()
        .zip(groups)
        .map(|(&r, &g)| r - sums[g] / counts[g] as f64)
        .collect()
}

/// Loss and gradient at the policy's current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoEval {
    pub loss: f64,
    pub kl: f64,
    pub grad: Vec<f64>,
}

/// Evaluates the clipped-surrogate-plus-KL objective and its gradient
/// without touching the policy.
pub fn ppo_loss_and_grad(
    policy: &CoPolicy,
    samples: &[Sample],
    config: &PpoConfig,
) -> Result<PpoEval, PpoError> {
    if samples.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let n = samples.len() as f64;
    let mut loss = 0.0;
    let mut kl = 0.0;
    let mut grad = vec![0.0; policy.n_params()];
    for sample in samples {
        let logp_new = policy.logp(&sample.action)?;
        let ratio = (logp_new - sample.logp_old).exp();
        let a = sample.advantage;
        let clipped = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
        loss += -(ratio * a).min(clipped * a);
        // the unclipped branch wins ties, matching min's left bias
        let clip_coef = if ratio * a <= clipped * a { -a * ratio } else { 0.0 };

        let ref_ratio = (sample.logp_ref - logp_new).exp();
        kl += k3_kl(ref_ratio)?;
        // d k3(e^(ref - x)) / dx = 1 - e^(ref - x)
        let kl_coef = config.kl_coef * (1.0 - ref_ratio);

        let g = policy.grad_logp(&sample.action)?;
        let w = clip_coef + kl_coef;
        for (slot, gi) in grad.iter_mut().zip(&g) {
            *slot += w * gi;
        }
    }
    loss /= n;
    kl /= n;
    for slot in &mut grad {
        *slot /= n;
    }
    loss += config.kl_coef * kl;
    Ok(PpoEval { loss, kl, grad })
}

/// What one update did: objective value, mean KL to the reference, and the
/// norm of the applied gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub loss: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// One gradient-descent step on the PPO objective.
pub fn ppo_update(
    policy: &mut CoPolicy,
    samples: &[Sample],
    config: &PpoConfig,
) -> Result<UpdateReport, PpoError> {
    let eval = ppo_loss_and_grad(policy, samples, config)?;
    let mut params = policy.params();
    for (p, g) in params.iter_mut().zip(&eval.grad) {
        *p -= config.lr * g;
    }
    policy.set_params(&params)?;
    let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(UpdateReport {
        loss: eval.loss,
        kl: eval.kl,
        grad_norm,
    })
}
