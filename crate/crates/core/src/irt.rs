//! Item response theory calibration.
//!
//! 1PL/2PL/3PL logistic models fit to a [`ResponseMatrix`] by stochastic
//! variational inference with a mean-field Gaussian guide, reparameterized
//! Monte-Carlo likelihood gradients and closed-form Gaussian KL terms. A
//! component-wise random-walk Metropolis sampler provides an independent
//! 1PL fit for cross-checking.
//!
//! Discrimination is parameterized as `a = exp(α)` and guessing as
//! `c = σ(γ)`; the guide is Gaussian over the unconstrained `α`, `γ`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::ResponseMatrix;
use crate::math::{exp, ln, log_sigmoid, sigmoid, softplus, sqrt};
use crate::optim::Adam;
use crate::rng::{self, DetRng};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IrtError {
    #[error("response matrix is empty")]
    EmptyMatrix,
    #[error("posterior shape does not match the matrix: {0}")]
    DimensionMismatch(String),
    #[error("non-finite gradient at step {step}; lower the learning rate")]
    NonFiniteGradient { step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid item parameter: {0}")]
    InvalidParameter(String),
    #[error("matrix has no held-out cells")]
    NoHoldout,
    #[error("held-out cells contain a single class; AUC is undefined (Brier {brier:.4}%)")]
    UndefinedAuc { brier: f64 },
    #[error("{0} is only implemented for the 1PL model")]
    Unsupported(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "onePL")]
    OnePL,
    #[serde(rename = "twoPL")]
    TwoPL,
    #[serde(rename = "threePL")]
    ThreePL,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::OnePL => "1-PL",
            ModelKind::TwoPL => "2-PL",
            ModelKind::ThreePL => "3-PL",
        }
    }

    fn has_disc(self) -> bool {
        self != ModelKind::OnePL
    }

    fn has_guess(self) -> bool {
        self == ModelKind::ThreePL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// Fixed Normal priors: N(0,1) on θ, d and log-discrimination.
    Vague,
    /// θ, d and log-discrimination drawn from group Normals whose location
    /// and log-scale carry N(0,1) hyperpriors.
    Hierarchical,
}

impl PriorKind {
    pub fn label(self) -> &'static str {
        match self {
            PriorKind::Vague => "vague",
            PriorKind::Hierarchical => "hierarchical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtModelConfig {
    pub model_kind: ModelKind,
    pub prior_kind: PriorKind,
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
}

impl Default for IrtModelConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::OnePL,
            prior_kind: PriorKind::Vague,
            seed: 42,
            steps: 2000,
            learning_rate: 0.1,
            mc_samples: 4,
        }
    }
}

impl IrtModelConfig {
    pub fn validate(&self) -> Result<(), IrtError> {
        if self.steps == 0 {
            return Err(IrtError::InvalidConfig("steps must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(IrtError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.mc_samples == 0 {
            return Err(IrtError::InvalidConfig("mc_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which parameter family a pooled group governs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Ability,
    Difficulty,
    Discrimination,
}

/// Guide over one hierarchical group's location and log-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPosterior {
    pub group: GroupKind,
    pub loc_mean: f64,
    pub loc_std: f64,
    pub log_scale_mean: f64,
    pub log_scale_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub theta_mean: Vec<f64>,
    pub theta_std: Vec<f64>,
    pub diff_mean: Vec<f64>,
    pub diff_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_std: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess_std: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<GroupPosterior>,
}

impl VariationalPosterior {
    pub fn model_kind(&self) -> ModelKind {
        match (&self.disc_mean, &self.guess_mean) {
            (_, Some(_)) => ModelKind::ThreePL,
            (Some(_), None) => ModelKind::TwoPL,
            _ => ModelKind::OnePL,
        }
    }

    /// The starting guide used by [`fit_svi`].
    pub fn initial(m: usize, n: usize, model: ModelKind, prior: PriorKind) -> Self {
        let layout = Layout::new(m, n, model, prior);
        layout.to_posterior(&layout.initial_params())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    Svi,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub method: FitMethod,
    pub posterior: VariationalPosterior,
    pub point_abilities: Vec<f64>,
    pub point_difficulties: Vec<f64>,
    /// `exp` of the log-discrimination means (2PL/3PL).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_discriminations: Option<Vec<f64>>,
    /// `σ` of the logit-guessing means (3PL).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_guessing: Option<Vec<f64>>,
    pub elbo_trace: Vec<f64>,
    pub config: IrtModelConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl CalibrationResult {
    fn from_posterior(
        method: FitMethod,
        posterior: VariationalPosterior,
        elbo_trace: Vec<f64>,
        config: IrtModelConfig,
        diagnostics: Vec<String>,
    ) -> Self {
        Self {
            method,
            point_abilities: posterior.theta_mean.clone(),
            point_difficulties: posterior.diff_mean.clone(),
            point_discriminations: posterior
                .disc_mean
                .as_ref()
                .map(|v| v.iter().map(|&x| exp(x)).collect()),
            point_guessing: posterior
                .guess_mean
                .as_ref()
                .map(|v| v.iter().map(|&x| sigmoid(x)).collect()),
            posterior,
            elbo_trace,
            config,
            diagnostics,
        }
    }

    /// Point-estimate probability of a correct response for cell (i, j).
    pub fn predict(&self, i: usize, j: usize) -> f64 {
        let a = self.point_discriminations.as_ref().map(|v| v[j]);
        let c = self.point_guessing.as_ref().map(|v| v[j]);
        predict_unchecked(self.point_abilities[i], self.point_difficulties[j], a, c)
    }
}

/// Probability of a correct response: σ(θ−d), σ(a(θ−d)) or c+(1−c)σ(a(θ−d)).
pub fn predict_correct_prob(theta: f64, d: f64, a: Option<f64>, c: Option<f64>) -> Result<f64, IrtError> {
    if let Some(a) = a {
        if !(a > 0.0) {
            return Err(IrtError::InvalidParameter(format!("discrimination must be > 0, got {a}")));
        }
    }
    if let Some(c) = c {
        if !(0.0..1.0).contains(&c) {
            return Err(IrtError::InvalidParameter(format!("guessing must lie in [0, 1), got {c}")));
        }
    }
    Ok(predict_unchecked(theta, d, a, c))
}

fn predict_unchecked(theta: f64, d: f64, a: Option<f64>, c: Option<f64>) -> f64 {
    let s = sigmoid(a.unwrap_or(1.0) * (theta - d));
    match c {
        Some(c) => c + (1.0 - c) * s,
        None => s,
    }
}

// Fixed prior locations/scales.
const GUESS_PRIOR_MEAN: f64 = -2.0;
const INIT_LOG_STD: f64 = -core::f64::consts::LN_10; // ln 0.1
const LR_DECAY: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Theta,
    Diff,
    Disc,
    Guess,
}

/// Flat layout of guide parameters: all latent means, then all log-stds.
/// Latents are θ (M), d (N), α (N, 2PL+), γ (N, 3PL), then two per pooled
/// group (location, log-scale).
#[derive(Debug, Clone)]
struct Layout {
    m: usize,
    n: usize,
    model: ModelKind,
    prior: PriorKind,
    theta: usize,
    diff: usize,
    disc: Option<usize>,
    guess: Option<usize>,
    /// (group, offset of its two latents, pooled block start, block len)
    groups: Vec<(GroupKind, usize, usize, usize)>,
    latents: usize,
}

impl Layout {
    fn new(m: usize, n: usize, model: ModelKind, prior: PriorKind) -> Self {
        let theta = 0;
        let diff = m;
        let mut next = m + n;
        let disc = model.has_disc().then(|| {
            let o = next;
            next += n;
            o
        });
        let guess = model.has_guess().then(|| {
            let o = next;
            next += n;
            o
        });
        let mut groups = Vec::new();
        if prior == PriorKind::Hierarchical {
            groups.push((GroupKind::Ability, next, theta, m));
            next += 2;
            groups.push((GroupKind::Difficulty, next, diff, n));
            next += 2;
            if let Some(o) = disc {
                groups.push((GroupKind::Discrimination, next, o, n));
                next += 2;
            }
        }
        Self {
            m,
            n,
            model,
            prior,
            theta,
            diff,
            disc,
            guess,
            groups,
            latents: next,
        }
    }

    fn block_of(&self, idx: usize) -> Block {
        if idx < self.diff {
            Block::Theta
        } else if idx < self.diff + self.n {
            Block::Diff
        } else if self.disc.is_some_and(|o| idx < o + self.n) {
            Block::Disc
        } else {
            Block::Guess
        }
    }

    fn fixed_prior(&self, block: Block) -> (f64, f64) {
        match block {
            Block::Guess => (GUESS_PRIOR_MEAN, 1.0),
            _ => (0.0, 1.0),
        }
    }

    fn pooled(&self, block: Block) -> bool {
        self.prior == PriorKind::Hierarchical && block != Block::Guess
    }

    fn initial_params(&self) -> Vec<f64> {
        let mut p = vec![0.0; 2 * self.latents];
        if let Some(g) = self.guess {
            for v in &mut p[g..g + self.n] {
                *v = GUESS_PRIOR_MEAN;
            }
        }
        for v in &mut p[self.latents..] {
            *v = INIT_LOG_STD;
        }
        p
    }

    fn to_posterior(&self, params: &[f64]) -> VariationalPosterior {
        let l = self.latents;
        let mean = |o: usize, len: usize| params[o..o + len].to_vec();
        let std = |o: usize, len: usize| params[l + o..l + o + len].iter().map(|&r| exp(r)).collect::<Vec<_>>();
        VariationalPosterior {
            theta_mean: mean(self.theta, self.m),
            theta_std: std(self.theta, self.m),
            diff_mean: mean(self.diff, self.n),
            diff_std: std(self.diff, self.n),
            disc_mean: self.disc.map(|o| mean(o, self.n)),
            disc_std: self.disc.map(|o| std(o, self.n)),
            guess_mean: self.guess.map(|o| mean(o, self.n)),
            guess_std: self.guess.map(|o| std(o, self.n)),
            groups: self
                .groups
                .iter()
                .map(|&(group, o, _, _)| GroupPosterior {
                    group,
                    loc_mean: params[o],
                    loc_std: exp(params[l + o]),
                    log_scale_mean: params[o + 1],
                    log_scale_std: exp(params[l + o + 1]),
                })
                .collect(),
        }
    }

    fn from_posterior(&self, post: &VariationalPosterior) -> Result<Vec<f64>, IrtError> {
        let mismatch = |what: &str| IrtError::DimensionMismatch(String::from(what));
        if post.theta_mean.len() != self.m || post.theta_std.len() != self.m {
            return Err(mismatch("theta"));
        }
        if post.diff_mean.len() != self.n || post.diff_std.len() != self.n {
            return Err(mismatch("difficulty"));
        }
        let l = self.latents;
        let mut p = vec![0.0; 2 * l];
        let mut put = |o: usize, means: &[f64], stds: &[f64]| -> Result<(), IrtError> {
            if means.len() != stds.len() {
                return Err(mismatch("mean/std length"));
            }
            for (k, (&mu, &s)) in means.iter().zip(stds).enumerate() {
                if !(s > 0.0) {
                    return Err(IrtError::InvalidParameter(format!("posterior std must be > 0, got {s}")));
                }
                p[o + k] = mu;
                p[l + o + k] = ln(s);
            }
            Ok(())
        };
        put(self.theta, &post.theta_mean, &post.theta_std)?;
        put(self.diff, &post.diff_mean, &post.diff_std)?;
        if let Some(o) = self.disc {
            let (Some(mu), Some(s)) = (&post.disc_mean, &post.disc_std) else {
                return Err(mismatch("discrimination"));
            };
            if mu.len() != self.n {
                return Err(mismatch("discrimination"));
            }
            put(o, mu, s)?;
        }
        if let Some(o) = self.guess {
            let (Some(mu), Some(s)) = (&post.guess_mean, &post.guess_std) else {
                return Err(mismatch("guessing"));
            };
            if mu.len() != self.n {
                return Err(mismatch("guessing"));
            }
            put(o, mu, s)?;
        }
        for &(group, o, _, _) in &self.groups {
            let g = post
                .groups
                .iter()
                .find(|g| g.group == group)
                .ok_or_else(|| mismatch("hierarchical group"))?;
            put(o, &[g.loc_mean, g.log_scale_mean], &[g.loc_std, g.log_scale_std])?;
        }
        Ok(p)
    }
}

/// Components of one ELBO estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub expected_log_lik: f64,
    pub kl: f64,
}

impl ElboBreakdown {
    pub fn elbo(&self) -> f64 {
        self.expected_log_lik - self.kl
    }
}

/// `KL(N(m, e^ρ) ‖ N(μ0, σ0))` and its partials in (m, ρ, μ0, log σ0).
#[inline]
fn gauss_kl(m: f64, rho: f64, mu0: f64, log_sigma0: f64) -> (f64, f64, f64, f64, f64) {
    let s2 = exp(2.0 * rho);
    let inv_var0 = exp(-2.0 * log_sigma0);
    let dm = m - mu0;
    let kl = log_sigma0 - rho + 0.5 * (s2 + dm * dm) * inv_var0 - 0.5;
    let d_m = dm * inv_var0;
    let d_rho = -1.0 + s2 * inv_var0;
    let d_mu0 = -d_m;
    let d_logsig0 = 1.0 - (s2 + dm * dm) * inv_var0;
    (kl, d_m, d_rho, d_mu0, d_logsig0)
}

/// Training cells as (i, j, y), precomputed once per fit.
fn training_cells(matrix: &ResponseMatrix) -> Vec<(u32, u32, u8)> {
    let (m, n) = matrix.shape();
    let mut cells = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            if matrix.is_training(i, j) {
                cells.push((i as u32, j as u32, matrix.get(i, j)));
            }
        }
    }
    cells
}

/// Log-likelihood of one cell and its partials in (θ, d, α, γ).
#[inline]
fn cell_loglik(model: ModelKind, y: u8, theta: f64, d: f64, alpha: f64, gamma: f64) -> (f64, f64, f64, f64, f64) {
    let u = theta - d;
    match model {
        ModelKind::OnePL => {
            let g = f64::from(y) - sigmoid(u);
            (f64::from(y) * u - softplus(u), g, -g, 0.0, 0.0)
        }
        ModelKind::TwoPL => {
            let a = exp(alpha);
            let x = a * u;
            let g = f64::from(y) - sigmoid(x);
            (f64::from(y) * x - softplus(x), g * a, -g * a, g * a * u, 0.0)
        }
        ModelKind::ThreePL => {
            let a = exp(alpha);
            let x = a * u;
            let s = sigmoid(x);
            let c = sigmoid(gamma);
            let (ll, dx, dgamma) = if y == 1 {
                let p = c + (1.0 - c) * s;
                (ln(p), (1.0 - c) * s * (1.0 - s) / p, (1.0 - s) * c * (1.0 - c) / p)
            } else {
                (log_sigmoid(-gamma) + log_sigmoid(-x), -s, -c)
            };
            (ll, dx * a, -dx * a, dx * a * u, dgamma)
        }
    }
}

/// ELBO value and gradient (∂ELBO/∂params) for fixed standard-normal noise.
/// `noise` holds `samples × latents` values.
fn elbo_and_grad(
    layout: &Layout,
    cells: &[(u32, u32, u8)],
    params: &[f64],
    noise: &[f64],
    samples: usize,
    grad: &mut [f64],
) -> ElboBreakdown {
    let l = layout.latents;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let inv_s = 1.0 / samples as f64;
    let mut z = vec![0.0; l];
    let mut dz = vec![0.0; l];
    let mut ll_total = 0.0;
    let mut kl_total = 0.0;

    // Closed-form KL for blocks with fixed priors.
    for idx in 0..layout.groups.first().map_or(l, |g| g.1) {
        let block = layout.block_of(idx);
        if layout.pooled(block) {
            continue;
        }
        let (mu0, s0) = layout.fixed_prior(block);
        let (kl, d_m, d_rho, _, _) = gauss_kl(params[idx], params[l + idx], mu0, ln(s0));
        kl_total += kl;
        grad[idx] -= d_m;
        grad[l + idx] -= d_rho;
    }
    // Hyperprior KL for pooled groups: N(0,1) on both location and log-scale.
    for &(_, o, _, _) in &layout.groups {
        for k in o..o + 2 {
            let (kl, d_m, d_rho, _, _) = gauss_kl(params[k], params[l + k], 0.0, 0.0);
            kl_total += kl;
            grad[k] -= d_m;
            grad[l + k] -= d_rho;
        }
    }

    for s in 0..samples {
        let eps = &noise[s * l..(s + 1) * l];
        for k in 0..l {
            z[k] = params[k] + exp(params[l + k]) * eps[k];
        }
        dz.iter_mut().for_each(|v| *v = 0.0);

        let mut ll = 0.0;
        for &(i, j, y) in cells {
            let (i, j) = (i as usize, j as usize);
            let alpha = layout.disc.map_or(0.0, |o| z[o + j]);
            let gamma = layout.guess.map_or(0.0, |o| z[o + j]);
            let (v, dth, dd, da, dg) = cell_loglik(layout.model, y, z[layout.theta + i], z[layout.diff + j], alpha, gamma);
            ll += v;
            dz[layout.theta + i] += dth;
            dz[layout.diff + j] += dd;
            if let Some(o) = layout.disc {
                dz[o + j] += da;
            }
            if let Some(o) = layout.guess {
                dz[o + j] += dg;
            }
        }
        ll_total += ll * inv_s;

        // Conditional KL of pooled blocks given the sampled group parameters.
        for &(_, o, start, len) in &layout.groups {
            let (loc, log_scale) = (z[o], z[o + 1]);
            let mut kl = 0.0;
            for k in start..start + len {
                let (v, d_m, d_rho, d_loc, d_ls) = gauss_kl(params[k], params[l + k], loc, log_scale);
                kl += v;
                grad[k] -= d_m * inv_s;
                grad[l + k] -= d_rho * inv_s;
                dz[o] -= d_loc;
                dz[o + 1] -= d_ls;
            }
            kl_total += kl * inv_s;
        }

        for k in 0..l {
            let sd = exp(params[l + k]);
            grad[k] += dz[k] * inv_s;
            grad[l + k] += dz[k] * sd * eps[k] * inv_s;
        }
    }
    ElboBreakdown {
        expected_log_lik: ll_total,
        kl: kl_total,
    }
}

fn draw_noise(rng: &mut DetRng, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    rng::fill_normal(rng, &mut v);
    v
}

/// Monte-Carlo ELBO of `posterior` on the training cells of `matrix`.
pub fn elbo_estimate(
    matrix: &ResponseMatrix,
    posterior: &VariationalPosterior,
    prior_kind: PriorKind,
    seed: u64,
    mc_samples: usize,
) -> Result<ElboBreakdown, IrtError> {
    if mc_samples == 0 {
        return Err(IrtError::InvalidConfig("mc_samples must be >= 1".into()));
    }
    let (m, n) = matrix.shape();
    let layout = Layout::new(m, n, posterior.model_kind(), prior_kind);
    let params = layout.from_posterior(posterior)?;
    let cells = training_cells(matrix);
    let noise = draw_noise(&mut rng::seeded(seed), mc_samples * layout.latents);
    let mut grad = vec![0.0; params.len()];
    Ok(elbo_and_grad(&layout, &cells, &params, &noise, mc_samples, &mut grad))
}

/// ELBO and analytic gradient for caller-supplied noise; exposed for
/// gradient checking. Gradient layout: all latent means, then log-stds.
pub fn elbo_with_gradient(
    matrix: &ResponseMatrix,
    posterior: &VariationalPosterior,
    prior_kind: PriorKind,
    noise: &[f64],
    mc_samples: usize,
) -> Result<(ElboBreakdown, Vec<f64>), IrtError> {
    let (m, n) = matrix.shape();
    let layout = Layout::new(m, n, posterior.model_kind(), prior_kind);
    if noise.len() != mc_samples * layout.latents {
        return Err(IrtError::DimensionMismatch(format!(
            "expected {} noise values, got {}",
            mc_samples * layout.latents,
            noise.len()
        )));
    }
    let params = layout.from_posterior(posterior)?;
    let cells = training_cells(matrix);
    let mut grad = vec![0.0; params.len()];
    let b = elbo_and_grad(&layout, &cells, &params, noise, mc_samples, &mut grad);
    Ok((b, grad))
}

/// Number of latent variables (and noise values per MC sample).
pub fn latent_count(m: usize, n: usize, model: ModelKind, prior: PriorKind) -> usize {
    Layout::new(m, n, model, prior).latents
}

/// Stochastic variational inference: Adam ascent on the reparameterized
/// ELBO with a learning rate decaying geometrically to 5% of its start.
pub fn fit_svi(matrix: &ResponseMatrix, config: &IrtModelConfig) -> Result<CalibrationResult, IrtError> {
    config.validate()?;
    if matrix.is_empty() {
        return Err(IrtError::EmptyMatrix);
    }
    let (m, n) = matrix.shape();
    let layout = Layout::new(m, n, config.model_kind, config.prior_kind);
    let cells = training_cells(matrix);
    let mut params = layout.initial_params();
    let mut grad = vec![0.0; params.len()];
    let mut neg = vec![0.0; params.len()];
    let mut opt = Adam::new(params.len(), config.learning_rate);
    let mut rng = rng::seeded(config.seed);
    let mut noise = vec![0.0; config.mc_samples * layout.latents];
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        rng::fill_normal(&mut rng, &mut noise);
        let b = elbo_and_grad(&layout, &cells, &params, &noise, config.mc_samples, &mut grad);
        if grad.iter().any(|g| !g.is_finite()) || !b.elbo().is_finite() {
            return Err(IrtError::NonFiniteGradient { step });
        }
        trace.push(b.elbo());
        for (d, g) in neg.iter_mut().zip(&grad) {
            *d = -g;
        }
        let frac = step as f64 / config.steps as f64;
        let lr = config.learning_rate * crate::math::powf(LR_DECAY, frac);
        opt.step_with_lr(&mut params, &neg, lr);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(IrtError::NonFiniteGradient { step: config.steps });
    }
    Ok(CalibrationResult::from_posterior(
        FitMethod::Svi,
        layout.to_posterior(&params),
        trace,
        config.clone(),
        Vec::new(),
    ))
}

// ---------------------------------------------------------------------------
// MCMC cross-check (1PL)
// ---------------------------------------------------------------------------

const TARGET_ACCEPT: f64 = 0.44;

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for k in 0..x.len() {
            let d = x[k] - self.mean[k];
            self.mean[k] += d / self.n;
            self.m2[k] += d * (x[k] - self.mean[k]);
        }
    }

    fn std(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|v| sqrt(v / (self.n - 1.0).max(1.0)).max(1e-12))
            .collect()
    }
}

#[inline]
fn normal_logpdf(x: f64, mu: f64, log_sigma: f64) -> f64 {
    let z = (x - mu) * exp(-log_sigma);
    -0.5 * z * z - log_sigma
}

/// Component-wise random-walk Metropolis for the 1PL model. The first half
/// of `config.steps` sweeps adapts per-parameter proposal scales and is
/// discarded; point estimates are means of the remaining sweeps.
pub fn fit_mcmc(matrix: &ResponseMatrix, config: &IrtModelConfig) -> Result<CalibrationResult, IrtError> {
    config.validate()?;
    if config.model_kind != ModelKind::OnePL {
        return Err(IrtError::Unsupported("MCMC"));
    }
    if matrix.is_empty() {
        return Err(IrtError::EmptyMatrix);
    }
    let (m, n) = matrix.shape();
    let hier = config.prior_kind == PriorKind::Hierarchical;
    // Per-row and per-column training cells.
    let mut by_row: Vec<Vec<(u32, u8)>> = vec![Vec::new(); m];
    let mut by_col: Vec<Vec<(u32, u8)>> = vec![Vec::new(); n];
    for (i, j, y) in training_cells(matrix) {
        by_row[i as usize].push((j, y));
        by_col[j as usize].push((i, y));
    }
    let mut rng = rng::seeded(config.seed);
    let mut theta = vec![0.0; m];
    let mut diff = vec![0.0; n];
    // hyper: [loc_theta, logscale_theta, loc_diff, logscale_diff]
    let mut hyper = [0.0f64; 4];
    let mut step_theta = vec![0.5; m];
    let mut step_diff = vec![0.5; n];
    let mut step_hyper = [0.2f64; 4];
    let mut acc_theta = vec![0u32; m];
    let mut acc_diff = vec![0u32; n];
    let mut acc_hyper = [0u32; 4];

    let burn_in = config.steps / 2;
    let kept = config.steps - burn_in;
    let adapt_every = 25usize;
    let mut stats = Welford::new(m + n);
    let mut state = vec![0.0; m + n];
    let mut kept_accepts = 0u64;
    let mut kept_proposals = 0u64;

    let cell_ll = |u: f64, y: u8| f64::from(y) * u - softplus(u);

    for sweep in 0..config.steps {
        let (loc_t, ls_t, loc_d, ls_d) = if hier {
            (hyper[0], hyper[1], hyper[2], hyper[3])
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
        let mut sweep_acc = 0u64;
        for i in 0..m {
            let old = theta[i];
            let new = old + step_theta[i] * rng::normal(&mut rng);
            let mut delta = normal_logpdf(new, loc_t, ls_t) - normal_logpdf(old, loc_t, ls_t);
            for &(j, y) in &by_row[i] {
                let d = diff[j as usize];
                delta += cell_ll(new - d, y) - cell_ll(old - d, y);
            }
            if ln(rng::uniform(&mut rng)) < delta {
                theta[i] = new;
                acc_theta[i] += 1;
                sweep_acc += 1;
            }
        }
        for j in 0..n {
            let old = diff[j];
            let new = old + step_diff[j] * rng::normal(&mut rng);
            let mut delta = normal_logpdf(new, loc_d, ls_d) - normal_logpdf(old, loc_d, ls_d);
            for &(i, y) in &by_col[j] {
                let t = theta[i as usize];
                delta += cell_ll(t - new, y) - cell_ll(t - old, y);
            }
            if ln(rng::uniform(&mut rng)) < delta {
                diff[j] = new;
                acc_diff[j] += 1;
                sweep_acc += 1;
            }
        }
        let mut proposals = (m + n) as u64;
        if hier {
            for k in 0..4 {
                let values: &[f64] = if k < 2 { &theta } else { &diff };
                let (loc_idx, ls_idx) = if k < 2 { (0, 1) } else { (2, 3) };
                let old = hyper[k];
                let new = old + step_hyper[k] * rng::normal(&mut rng);
                let mut cand = hyper;
                cand[k] = new;
                let logp = |h: &[f64; 4]| {
                    let mut lp = normal_logpdf(h[loc_idx], 0.0, 0.0) + normal_logpdf(h[ls_idx], 0.0, 0.0);
                    for &v in values {
                        lp += normal_logpdf(v, h[loc_idx], h[ls_idx]);
                    }
                    lp
                };
                if ln(rng::uniform(&mut rng)) < logp(&cand) - logp(&hyper) {
                    hyper = cand;
                    acc_hyper[k] += 1;
                    sweep_acc += 1;
                }
            }
            proposals += 4;
        }

        if sweep < burn_in {
            if (sweep + 1) % adapt_every == 0 {
                let adapt = |step: &mut f64, acc: &mut u32| {
                    let rate = f64::from(*acc) / adapt_every as f64;
                    *step *= exp(rate - TARGET_ACCEPT);
                    *acc = 0;
                };
                step_theta.iter_mut().zip(acc_theta.iter_mut()).for_each(|(s, a)| adapt(s, a));
                step_diff.iter_mut().zip(acc_diff.iter_mut()).for_each(|(s, a)| adapt(s, a));
                step_hyper.iter_mut().zip(acc_hyper.iter_mut()).for_each(|(s, a)| adapt(s, a));
            }
        } else {
            kept_accepts += sweep_acc;
            kept_proposals += proposals;
            state[..m].copy_from_slice(&theta);
            state[m..].copy_from_slice(&diff);
            stats.push(&state);
        }
    }

    let mut diagnostics = Vec::new();
    let rate = if kept_proposals > 0 {
        kept_accepts as f64 / kept_proposals as f64
    } else {
        0.0
    };
    if kept == 0 || !(0.05..=0.95).contains(&rate) {
        diagnostics.push(format!(
            "post-adaptation acceptance rate {rate:.3} outside [0.05, 0.95]"
        ));
    }
    let std = stats.std();
    let posterior = VariationalPosterior {
        theta_mean: stats.mean[..m].to_vec(),
        theta_std: std[..m].to_vec(),
        diff_mean: stats.mean[m..].to_vec(),
        diff_std: std[m..].to_vec(),
        disc_mean: None,
        disc_std: None,
        guess_mean: None,
        guess_std: None,
        groups: Vec::new(),
    };
    Ok(CalibrationResult::from_posterior(
        FitMethod::Mcmc,
        posterior,
        Vec::new(),
        config.clone(),
        diagnostics,
    ))
}

// ---------------------------------------------------------------------------
// Held-out evaluation
// ---------------------------------------------------------------------------

/// Held-out scores, both as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutScores {
    pub auc_roc: f64,
    pub brier: f64,
}

/// Scores point-estimate predictions on the held-out, administered cells.
pub fn evaluate_holdout(result: &CalibrationResult, matrix: &ResponseMatrix) -> Result<HoldoutScores, IrtError> {
    let (m, n) = matrix.shape();
    if result.point_abilities.len() < m || result.point_difficulties.len() != n {
        return Err(IrtError::DimensionMismatch(format!(
            "calibration covers {}x{}, matrix is {m}x{n}",
            result.point_abilities.len(),
            result.point_difficulties.len()
        )));
    }
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if matrix.is_held_out(i, j) && !matrix.is_missing(i, j) {
                preds.push(result.predict(i, j));
                labels.push(matrix.get(i, j) == 1);
            }
        }
    }
    score_predictions(&preds, &labels)
}

/// AUC-ROC and Brier (percent) for probabilistic predictions.
pub fn score_predictions(preds: &[f64], labels: &[bool]) -> Result<HoldoutScores, IrtError> {
    if preds.is_empty() {
        return Err(IrtError::NoHoldout);
    }
    let brier = 100.0
        * preds
            .iter()
            .zip(labels)
            .map(|(p, &y)| {
                let e = p - f64::from(u8::from(y));
                e * e
            })
            .sum::<f64>()
        / preds.len() as f64;
    match stats::auc_roc(preds, labels) {
        Some(auc) => Ok(HoldoutScores {
            auc_roc: 100.0 * auc,
            brier,
        }),
        None => Err(IrtError::UndefinedAuc { brier }),
    }
}

/// Rank agreement between difficulties fitted on a base matrix and on the
/// same questions after extra students are appended.
pub fn difficulty_shift_stability(
    base: &ResponseMatrix,
    extended: &ResponseMatrix,
    config: &IrtModelConfig,
) -> Result<stats::RankCorrelation, IrtError> {
    if base.questions != extended.questions {
        return Err(IrtError::DimensionMismatch("question columns differ".into()));
    }
    let a = fit_svi(base, config)?;
    let b = fit_svi(extended, config)?;
    stats::rank_correlations(&a.point_difficulties, &b.point_difficulties)
        .map_err(|e| IrtError::InvalidParameter(format!("{e}")))
}
