//! Group sequence policy optimization: reward mixing, group-normalized
//! advantages, length-normalized sequence importance ratios and the clipped
//! surrogate, plus a small categorical policy for exercising the loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{exp, log_sum_exp, sqrt};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GspoError {
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence length must be >= 1")]
    ZeroLength,
    #[error("non-finite log-probability")]
    NonFiniteLogProb,
    #[error("non-finite policy parameters at step {step}: {detail}")]
    NonFiniteParameters { step: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardMix {
    pub alpha: f64,
    pub beta: f64,
    /// Weight of the auxiliary reward; 0 disables the hook.
    pub gamma: f64,
}

impl Default for RewardMix {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.0,
        }
    }
}

impl RewardMix {
    pub fn validate(&self) -> Result<(), GspoError> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|v| !v.is_finite()) {
            return Err(GspoError::InvalidConfig("reward weights must be finite".into()));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(GspoError::InvalidConfig("at least one reward weight must be nonzero".into()));
        }
        Ok(())
    }
}

/// `α·r_diff + β·r_cor (+ γ·r_aux when the hook is enabled)`.
pub fn mix_reward(r_diff: f64, r_cor: f64, r_aux: Option<f64>, mix: &RewardMix) -> f64 {
    let base = mix.alpha * r_diff + mix.beta * r_cor;
    match r_aux {
        Some(aux) if mix.gamma != 0.0 => base + mix.gamma * aux,
        _ => base,
    }
}

/// `(R − mean)/max(std, floor)` with population std. A group whose rewards
/// are all identical gets zero advantages.
pub fn normalize_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let k = rewards.len();
    if k == 0 || rewards.iter().all(|r| r.to_bits() == rewards[0].to_bits()) {
        return vec![0.0; k];
    }
    let mean = rewards.iter().sum::<f64>() / k as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k as f64;
    let scale = sqrt(var).max(std_floor);
    let mut adv: Vec<f64> = rewards.iter().map(|r| (r - mean) / scale).collect();
    // Second centering pass removes the rounding residue of the first.
    let resid = adv.iter().sum::<f64>() / k as f64;
    if resid != 0.0 {
        adv.iter_mut().for_each(|a| *a -= resid);
    }
    adv
}

/// Ceiling on the per-token log-ratio before exponentiation.
pub const LOG_RATIO_CEILING: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRatio {
    pub value: f64,
    /// The log-ratio exceeded [`LOG_RATIO_CEILING`] and was clamped.
    pub clamped: bool,
}

/// `exp((logp_new − logp_old)/length)`.
pub fn sequence_importance_ratio(logp_new: f64, logp_old: f64, length: usize) -> Result<ImportanceRatio, GspoError> {
    if length == 0 {
        return Err(GspoError::ZeroLength);
    }
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(GspoError::NonFiniteLogProb);
    }
    let log_ratio = (logp_new - logp_old) / length as f64;
    if log_ratio > LOG_RATIO_CEILING {
        return Ok(ImportanceRatio {
            value: exp(LOG_RATIO_CEILING),
            clamped: true,
        });
    }
    Ok(ImportanceRatio {
        value: exp(log_ratio),
        clamped: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub completions: Vec<Vec<u32>>,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub lengths: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<(), GspoError> {
        let k = self.rewards.len();
        if k < 2 {
            return Err(GspoError::InvalidGroup(format!("group size {k} < 2")));
        }
        for (name, len) in [
            ("completions", self.completions.len()),
            ("logp_new", self.logp_new.len()),
            ("logp_old", self.logp_old.len()),
            ("lengths", self.lengths.len()),
        ] {
            if len != k {
                return Err(GspoError::InvalidGroup(format!("{name} has {len} entries, expected {k}")));
            }
        }
        if self.lengths.contains(&0) {
            return Err(GspoError::ZeroLength);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GspoConfig {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub advantage_std_floor: f64,
    /// Surrogate ascent steps per sampled batch; ratios leave 1 from the
    /// second update on.
    pub inner_updates: usize,
}

impl Default for GspoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip_epsilon: 0.1,
            learning_rate: 0.5,
            steps: 200,
            seed: 42,
            advantage_std_floor: 1e-8,
            inner_updates: 2,
        }
    }
}

impl GspoConfig {
    pub fn validate(&self) -> Result<(), GspoError> {
        let bad = |m: &str| Err(GspoError::InvalidConfig(String::from(m)));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.advantage_std_floor > 0.0) {
            return bad("advantage_std_floor must be > 0");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be > 0");
        }
        if self.inner_updates == 0 {
            return bad("inner_updates must be >= 1");
        }
        Ok(())
    }
}

/// Surrogate value and its sensitivity to each `logp_new`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub objective: f64,
    /// ∂objective/∂logp_new[k].
    pub logp_coefficients: Vec<f64>,
    pub advantages: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Fraction of completions whose clipped branch binds (zero gradient).
    pub clip_fraction: f64,
    pub clamped: bool,
}

/// Clipped surrogate with the clip range `(1−ε, 1+ε)`. `clip_epsilon` may
/// be infinite here to disable clipping.
pub fn gspo_surrogate(group: &RolloutGroup, clip_epsilon: f64, std_floor: f64) -> Result<Surrogate, GspoError> {
    group.validate()?;
    let k = group.rewards.len();
    let adv = normalize_advantages(&group.rewards, std_floor);
    let inv_k = 1.0 / k as f64;
    let mut objective = 0.0;
    let mut coeffs = vec![0.0; k];
    let mut ratios = Vec::with_capacity(k);
    let mut clipped = 0usize;
    let mut clamped = false;
    for i in 0..k {
        let r = sequence_importance_ratio(group.logp_new[i], group.logp_old[i], group.lengths[i])?;
        clamped |= r.clamped;
        let rho = r.value;
        let a = adv[i];
        let clipped_rho = rho.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
        let unclipped = rho * a;
        let bound = clipped_rho * a;
        if bound < unclipped {
            objective += bound;
            clipped += 1;
        } else {
            objective += unclipped;
            if !r.clamped {
                coeffs[i] = inv_k * a * rho / group.lengths[i] as f64;
            }
        }
        ratios.push(rho);
    }
    Ok(Surrogate {
        objective: objective * inv_k,
        logp_coefficients: coeffs,
        advantages: adv,
        ratios,
        clip_fraction: clipped as f64 / k as f64,
        clamped,
    })
}

/// `(1/K) Σ min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn gspo_objective(group: &RolloutGroup, config: &GspoConfig) -> Result<f64, GspoError> {
    config.validate()?;
    Ok(gspo_surrogate(group, config.clip_epsilon, config.advantage_std_floor)?.objective)
}

/// A sequence model that can sample completions and score them.
pub trait GenerativePolicy {
    fn sample(&self, prompt: usize, k: usize, seed: u64) -> Vec<Vec<u32>>;
    /// Total log-probability of the response tokens.
    fn logprob(&self, prompt: usize, sequence: &[u32]) -> f64;
}

/// Independent categorical logits per (prompt, position). With `eos` set,
/// sampling stops after that token and it counts toward the length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub num_prompts: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub eos: Option<u32>,
    pub logits: Vec<f64>,
}

pub const TOY_MAX_VOCAB: usize = 16;
pub const TOY_MAX_LEN: usize = 8;

impl ToyPolicy {
    pub fn uniform(num_prompts: usize, vocab: usize, max_len: usize, eos: Option<u32>) -> Result<Self, GspoError> {
        if !(2..=TOY_MAX_VOCAB).contains(&vocab) || !(1..=TOY_MAX_LEN).contains(&max_len) || num_prompts == 0 {
            return Err(GspoError::InvalidConfig(format!(
                "toy policy needs 1+ prompts, vocab in 2..={TOY_MAX_VOCAB}, length in 1..={TOY_MAX_LEN}"
            )));
        }
        if eos.is_some_and(|e| e as usize >= vocab) {
            return Err(GspoError::InvalidConfig("eos token outside vocabulary".into()));
        }
        Ok(Self {
            num_prompts,
            vocab,
            max_len,
            eos,
            logits: vec![0.0; num_prompts * max_len * vocab],
        })
    }

    fn slot(&self, prompt: usize, pos: usize) -> usize {
        (prompt * self.max_len + pos) * self.vocab
    }

    fn log_probs(&self, prompt: usize, pos: usize) -> Vec<f64> {
        let s = self.slot(prompt, pos);
        let row = &self.logits[s..s + self.vocab];
        let lse = log_sum_exp(row);
        row.iter().map(|z| z - lse).collect()
    }

    /// Adds `scale · ∇ logprob(prompt, sequence)` into `grad`.
    pub fn accumulate_logprob_grad(&self, prompt: usize, sequence: &[u32], scale: f64, grad: &mut [f64]) {
        for (pos, &tok) in sequence.iter().enumerate() {
            let s = self.slot(prompt, pos);
            let lp = self.log_probs(prompt, pos);
            for v in 0..self.vocab {
                let onehot = if v == tok as usize { 1.0 } else { 0.0 };
                grad[s + v] += scale * (onehot - exp(lp[v]));
            }
        }
    }
}

impl GenerativePolicy for ToyPolicy {
    fn sample(&self, prompt: usize, k: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut r = rng::seeded(seed);
        (0..k)
            .map(|_| {
                let mut seq = Vec::with_capacity(self.max_len);
                for pos in 0..self.max_len {
                    let lp = self.log_probs(prompt, pos);
                    let u = rng::uniform(&mut r);
                    let mut acc = 0.0;
                    let mut tok = self.vocab - 1;
                    for (v, l) in lp.iter().enumerate() {
                        acc += exp(*l);
                        if u < acc {
                            tok = v;
                            break;
                        }
                    }
                    seq.push(tok as u32);
                    if self.eos == Some(tok as u32) {
                        break;
                    }
                }
                seq
            })
            .collect()
    }

    fn logprob(&self, prompt: usize, sequence: &[u32]) -> f64 {
        sequence
            .iter()
            .enumerate()
            .map(|(pos, &tok)| self.log_probs(prompt, pos)[tok as usize])
            .sum()
    }
}

/// Surrogate and its gradient in the toy policy's logits for one group
/// whose `logp_old` values are fixed.
pub fn toy_surrogate_gradient(
    policy: &ToyPolicy,
    prompt: usize,
    completions: &[Vec<u32>],
    logp_old: &[f64],
    rewards: &[f64],
    clip_epsilon: f64,
    std_floor: f64,
) -> Result<(Surrogate, Vec<f64>), GspoError> {
    let group = RolloutGroup {
        prompt_id: format!("{prompt}"),
        completions: completions.to_vec(),
        logp_new: completions.iter().map(|c| policy.logprob(prompt, c)).collect(),
        logp_old: logp_old.to_vec(),
        lengths: completions.iter().map(Vec::len).collect(),
        rewards: rewards.to_vec(),
    };
    let s = gspo_surrogate(&group, clip_epsilon, std_floor)?;
    let mut grad = vec![0.0; policy.logits.len()];
    for (c, &coef) in completions.iter().zip(&s.logp_coefficients) {
        if coef != 0.0 {
            policy.accumulate_logprob_grad(prompt, c, coef, &mut grad);
        }
    }
    Ok((s, grad))
}

/// "Emit the target token": each prompt has a target token; rewards grow
/// with how often it appears.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub num_prompts: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub eos: Option<u32>,
    pub targets: Vec<u32>,
}

impl ToyTask {
    pub fn emit_target(num_prompts: usize, vocab: usize, max_len: usize, eos: Option<u32>) -> Self {
        let usable = eos.map_or(vocab, |_| vocab - 1) as u32;
        Self {
            num_prompts,
            vocab,
            max_len,
            eos,
            targets: (0..num_prompts as u32).map(|p| p % usable.max(1)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentRewards {
    pub r_diff: f64,
    pub r_cor: f64,
    pub r_aux: Option<f64>,
}

/// `r_diff = 2·(target fraction) − 1`, `r_cor = ±1` on whether the target
/// appears at all.
pub fn target_token_reward(task: &ToyTask, prompt: usize, sequence: &[u32]) -> ComponentRewards {
    let t = task.targets[prompt];
    let hits = sequence.iter().filter(|&&s| s == t).count();
    let frac = hits as f64 / sequence.len().max(1) as f64;
    ComponentRewards {
        r_diff: 2.0 * frac - 1.0,
        r_cor: if hits > 0 { 1.0 } else { -1.0 },
        r_aux: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainResult {
    pub curve: Vec<CurvePoint>,
    pub policy: ToyPolicy,
    pub diagnostics: Vec<String>,
}

/// Per step: snapshot the sampling policy, draw K completions per prompt,
/// mix rewards, then take `inner_updates` gradient-ascent steps on the
/// surrogate. `curve[s]` reports the rewards sampled at step `s` (before its
/// update), so `steps + 1` points are returned.
pub fn train_toy_policy<F>(
    task: &ToyTask,
    reward_fn: F,
    mix: &RewardMix,
    config: &GspoConfig,
) -> Result<ToyTrainResult, GspoError>
where
    F: Fn(&ToyTask, usize, &[u32]) -> ComponentRewards,
{
    config.validate()?;
    mix.validate()?;
    let mut policy = ToyPolicy::uniform(task.num_prompts, task.vocab, task.max_len, task.eos)?;
    let mut curve = Vec::with_capacity(config.steps + 1);
    let mut diagnostics = Vec::new();
    let k = config.group_size;
    for step in 0..=config.steps {
        let old = policy.clone();
        let mut batches = Vec::with_capacity(task.num_prompts);
        let mut reward_sum = 0.0;
        for p in 0..task.num_prompts {
            let seed = rng::derive_seed(config.seed, (step * task.num_prompts + p) as u64);
            let completions = old.sample(p, k, seed);
            let rewards: Vec<f64> = completions
                .iter()
                .map(|c| {
                    let r = reward_fn(task, p, c);
                    mix_reward(r.r_diff, r.r_cor, r.r_aux, mix)
                })
                .collect();
            reward_sum += rewards.iter().sum::<f64>();
            let logp_old: Vec<f64> = completions.iter().map(|c| old.logprob(p, c)).collect();
            batches.push((completions, logp_old, rewards));
        }
        let mean_reward = reward_sum / (task.num_prompts * k) as f64;
        if step == config.steps {
            curve.push(CurvePoint {
                step,
                mean_reward,
                mean_ratio: 1.0,
                clip_fraction: 0.0,
            });
            break;
        }
        let (mut ratio_sum, mut clip_sum) = (0.0, 0.0);
        for _ in 0..config.inner_updates {
            let mut grad = vec![0.0; policy.logits.len()];
            ratio_sum = 0.0;
            clip_sum = 0.0;
            for (p, (completions, logp_old, rewards)) in batches.iter().enumerate() {
                let (s, g) = toy_surrogate_gradient(
                    &policy,
                    p,
                    completions,
                    logp_old,
                    rewards,
                    config.clip_epsilon,
                    config.advantage_std_floor,
                )?;
                if s.clamped {
                    diagnostics.push(format!("step {step}: importance ratio clamped for prompt {p}"));
                }
                ratio_sum += s.ratios.iter().sum::<f64>() / k as f64;
                clip_sum += s.clip_fraction;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = config.learning_rate / task.num_prompts as f64;
            for (w, g) in policy.logits.iter_mut().zip(&grad) {
                *w += scale * g;
            }
            if let Some(bad) = policy.logits.iter().position(|w| !w.is_finite()) {
                return Err(GspoError::NonFiniteParameters {
                    step,
                    detail: format!("logit {bad} became {}", policy.logits[bad]),
                });
            }
        }
        curve.push(CurvePoint {
            step,
            mean_reward,
            mean_ratio: ratio_sum / task.num_prompts as f64,
            clip_fraction: clip_sum / task.num_prompts as f64,
        });
    }
    Ok(ToyTrainResult {
        curve,
        policy,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::LN_2;

    #[test]
    fn reward_mixing() {
        let mix = RewardMix::default();
        assert!((mix_reward(0.6, 1.0, None, &mix) - 0.8).abs() < 1e-15);
        assert_eq!(mix_reward(0.0, -1.0, None, &mix), -0.5);
        let with_aux = RewardMix { gamma: 0.3, ..mix };
        let d = mix_reward(0.2, 1.0, Some(1.0), &with_aux) - mix_reward(0.2, 1.0, None, &with_aux);
        assert!((d - 0.3).abs() < 1e-15);
        assert!(RewardMix { alpha: 0.0, beta: 0.0, gamma: 0.0 }.validate().is_err());
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(normalize_advantages(&[2.0, 0.0], 1e-8), vec![1.0, -1.0]);
        assert_eq!(normalize_advantages(&[0.7; 4], 1e-8), vec![0.0; 4]);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(sequence_importance_ratio(-3.0, -3.0, 5).unwrap().value, 1.0);
        let r = sequence_importance_ratio(-1.0 + 4.0 * LN_2, -1.0, 4).unwrap();
        assert!((r.value - 2.0).abs() < 1e-12);
        let r2 = sequence_importance_ratio(-1.0 + 4.0 * LN_2, -1.0, 8).unwrap();
        assert!((r2.value - r.value.sqrt()).abs() < 1e-12);
        let big = sequence_importance_ratio(1e6, 0.0, 1).unwrap();
        assert!(big.clamped && big.value.is_finite());
        assert_eq!(sequence_importance_ratio(0.0, 0.0, 0), Err(GspoError::ZeroLength));
    }

    fn group(logp_new: Vec<f64>, rewards: Vec<f64>) -> RolloutGroup {
        let k = rewards.len();
        RolloutGroup {
            prompt_id: "p".into(),
            completions: vec![vec![0]; k],
            logp_old: vec![0.0; k],
            lengths: vec![1; k],
            logp_new,
            rewards,
        }
    }

    #[test]
    fn objective_examples() {
        let cfg = GspoConfig::default();
        let g = group(vec![0.0; 3], vec![1.0, 5.0, -2.0]);
        assert!(gspo_objective(&g, &cfg).unwrap().abs() < 1e-15);
        // ρ = 2 with A = +1 and ρ = 0.5 with A = −1.
        let g = group(vec![LN_2, -LN_2], vec![1.0, -1.0]);
        let s = gspo_surrogate(&g, 0.1, 1e-8).unwrap();
        assert_eq!(s.advantages, vec![1.0, -1.0]);
        assert!((s.objective - 0.5 * (1.1 - 0.9)).abs() < 1e-12);
        assert_eq!(s.clip_fraction, 1.0);
        assert_eq!(s.logp_coefficients, vec![0.0, 0.0]);
    }

    #[test]
    fn invalid_groups_and_configs() {
        assert!(group(vec![0.0], vec![1.0]).validate().is_err());
        let mut g = group(vec![0.0; 2], vec![1.0, 0.0]);
        g.lengths[1] = 0;
        assert_eq!(g.validate(), Err(GspoError::ZeroLength));
        let cfg = GspoConfig {
            clip_epsilon: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ToyPolicy::uniform(1, 17, 4, None).is_err());
        assert!(ToyPolicy::uniform(1, 4, 9, None).is_err());
    }

    #[test]
    fn toy_sampling_is_deterministic_and_logprob_finite() {
        let mut p = ToyPolicy::uniform(2, 5, 6, Some(4)).unwrap();
        p.logits[3] = 2.0;
        let a = p.sample(1, 8, 11);
        assert_eq!(a, p.sample(1, 8, 11));
        for s in &a {
            assert!(!s.is_empty() && s.len() <= 6);
            assert!(p.logprob(1, s).is_finite());
        }
    }
}
