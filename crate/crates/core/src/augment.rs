//! Synthetic students for densifying IRT fits: a VAE over response rows
//! and independent Bernoulli draws from per-question correctness rates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{DataError, Origin, ResponseMatrix, StudentRecord};
use crate::math::{exp, softplus};
use crate::nn::Mlp;
use crate::optim::Adam;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("question `{0}` has no observed responses")]
    NoObservations(String),
    #[error("rate for question {index} is {rate}, outside [0, 1]")]
    InvalidRate { index: usize, rate: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("VAE training needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("non-finite VAE loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("row width {got} differs from matrix width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub kld_weight: f64,
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub num_generate: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            kld_weight: 0.5,
            hidden_dims: vec![256, 128],
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 42,
            num_generate: 200,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(String::from(m)));
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1");
        }
        if !(self.kld_weight >= 0.0) {
            return bad("kld_weight must be >= 0");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub num_generate: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            num_generate: 200,
            seed: 42,
        }
    }
}

/// Per-question correctness rate over training (non-held-out, administered)
/// cells.
pub fn empirical_rates(matrix: &ResponseMatrix) -> Result<Vec<f64>, AugmentError> {
    let (m, n) = matrix.shape();
    if matrix.is_empty() {
        return Err(DataError::Empty("response matrix").into());
    }
    (0..n)
        .map(|j| {
            let (mut hits, mut total) = (0usize, 0usize);
            for i in 0..m {
                if matrix.is_training(i, j) {
                    total += 1;
                    hits += usize::from(matrix.get(i, j));
                }
            }
            if total == 0 {
                Err(AugmentError::NoObservations(matrix.questions[j].clone()))
            } else {
                Ok(hits as f64 / total as f64)
            }
        })
        .collect()
}

/// `T` rows with entry (t, j) ~ Bernoulli(rates[j]); row `t` draws from its
/// own stream derived from `(seed, t)`.
pub fn sample_students(rates: &[f64], config: &SamplingConfig) -> Result<Vec<Vec<u8>>, AugmentError> {
    if let Some((index, &rate)) = rates.iter().enumerate().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
        return Err(AugmentError::InvalidRate { index, rate });
    }
    Ok((0..config.num_generate)
        .map(|t| {
            let mut r = rng::stream(config.seed, t as u64);
            rates.iter().map(|&p| rng::bernoulli(&mut r, p)).collect()
        })
        .collect())
}

/// Trained VAE: encoder `N → hidden → 2·latent` (means, log-variances) and
/// mirrored decoder `latent → reversed hidden → N` logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeGenerator {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub config: VaeConfig,
    /// Mean per-row loss over the training rows after each epoch.
    pub loss_trace: Vec<f64>,
}

const FILL_UNOBSERVED: f64 = 0.5;

fn encoder_input(matrix: &ResponseMatrix, i: usize, out: &mut [f64], obs: &mut [f64]) {
    for j in 0..matrix.num_questions() {
        if matrix.is_training(i, j) {
            out[j] = f64::from(matrix.get(i, j));
            obs[j] = 1.0;
        } else {
            out[j] = FILL_UNOBSERVED;
            obs[j] = 0.0;
        }
    }
}

/// Bernoulli NLL of `x` under logits, summed over observed cells.
fn bernoulli_nll(logit: f64, x: f64) -> f64 {
    softplus(logit) - x * logit
}

pub fn train_vae(matrix: &ResponseMatrix, config: &VaeConfig) -> Result<VaeGenerator, AugmentError> {
    config.validate()?;
    let (m, n) = matrix.shape();
    if m < 2 {
        return Err(AugmentError::TooFewRows(m));
    }
    if n == 0 {
        return Err(DataError::Empty("question set").into());
    }
    let l = config.latent_dim;
    let mut enc_sizes = vec![n];
    enc_sizes.extend_from_slice(&config.hidden_dims);
    enc_sizes.push(2 * l);
    let mut dec_sizes = vec![l];
    dec_sizes.extend(config.hidden_dims.iter().rev());
    dec_sizes.push(n);
    let mut encoder = Mlp::new(&enc_sizes, rng::derive_seed(config.seed, 1));
    let mut decoder = Mlp::new(&dec_sizes, rng::derive_seed(config.seed, 2));

    let mut inputs = vec![0.0; m * n];
    let mut observed = vec![0.0; m * n];
    for i in 0..m {
        encoder_input(matrix, i, &mut inputs[i * n..(i + 1) * n], &mut observed[i * n..(i + 1) * n]);
    }

    let mut enc_opt = Adam::new(encoder.params.len(), config.learning_rate);
    let mut dec_opt = Adam::new(decoder.params.len(), config.learning_rate);
    let mut enc_grad = vec![0.0; encoder.params.len()];
    let mut dec_grad = vec![0.0; decoder.params.len()];
    let mut shuffle_rng = rng::stream(config.seed, 3);
    let mut noise_rng = rng::stream(config.seed, 4);
    let mut order: Vec<usize> = (0..m).collect();
    let beta = config.kld_weight;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut eval_eps = vec![0.0; m * l];
    rng::fill_normal(&mut rng::stream(config.seed, 5), &mut eval_eps);

    for epoch in 0..config.epochs {
        // Cosine decay to zero over the run.
        let progress = epoch as f64 / config.epochs as f64;
        let lr = 0.5 * config.learning_rate * (1.0 + libm::cos(core::f64::consts::PI * progress));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let inv_b = 1.0 / b as f64;
            let mut x = Vec::with_capacity(b * n);
            let mut obs = Vec::with_capacity(b * n);
            for &i in chunk {
                x.extend_from_slice(&inputs[i * n..(i + 1) * n]);
                obs.extend_from_slice(&observed[i * n..(i + 1) * n]);
            }
            let (enc_out, enc_cache) = encoder.forward_train(&x, b, 0.0, &mut noise_rng);
            let mut eps = vec![0.0; b * l];
            rng::fill_normal(&mut noise_rng, &mut eps);
            let mut z = vec![0.0; b * l];
            for r in 0..b {
                for k in 0..l {
                    let mu = enc_out[r * 2 * l + k];
                    let lv = enc_out[r * 2 * l + l + k];
                    z[r * l + k] = mu + exp(0.5 * lv) * eps[r * l + k];
                }
            }
            let (logits, dec_cache) = decoder.forward_train(&z, b, 0.0, &mut noise_rng);

            let mut batch_loss = 0.0;
            let mut d_logits = vec![0.0; b * n];
            for k in 0..b * n {
                if obs[k] > 0.0 {
                    batch_loss += bernoulli_nll(logits[k], x[k]);
                    d_logits[k] = (crate::math::sigmoid(logits[k]) - x[k]) * inv_b;
                }
            }
            dec_grad.iter_mut().for_each(|g| *g = 0.0);
            let dz = decoder.backward(&dec_cache, &d_logits, &mut dec_grad);

            let mut d_enc = vec![0.0; b * 2 * l];
            for r in 0..b {
                for k in 0..l {
                    let mu = enc_out[r * 2 * l + k];
                    let lv = enc_out[r * 2 * l + l + k];
                    let g = dz[r * l + k];
                    let sd = exp(0.5 * lv);
                    let mut d_mu = g;
                    let mut d_lv = g * 0.5 * sd * eps[r * l + k];
                    if beta > 0.0 {
                        batch_loss += beta * 0.5 * (mu * mu + sd * sd - 1.0 - lv);
                        d_mu += beta * mu * inv_b;
                        d_lv += beta * 0.5 * (sd * sd - 1.0) * inv_b;
                    }
                    d_enc[r * 2 * l + k] = d_mu;
                    d_enc[r * 2 * l + l + k] = d_lv;
                }
            }
            enc_grad.iter_mut().for_each(|g| *g = 0.0);
            encoder.backward(&enc_cache, &d_enc, &mut enc_grad);

            if !batch_loss.is_finite() {
                return Err(AugmentError::NonFiniteLoss(epoch));
            }
            dec_opt.step_with_lr(&mut decoder.params, &dec_grad, lr);
            enc_opt.step_with_lr(&mut encoder.params, &enc_grad, lr);
        }
        let loss = full_loss(&encoder, &decoder, &inputs, &observed, m, beta, &eval_eps);
        if !loss.is_finite() {
            return Err(AugmentError::NonFiniteLoss(epoch));
        }
        loss_trace.push(loss);
    }
    Ok(VaeGenerator {
        encoder,
        decoder,
        latent_dim: l,
        config: config.clone(),
        loss_trace,
    })
}

/// Mean per-row loss over all rows with fixed reparameterization noise,
/// so successive epochs are compared on the same draw.
fn full_loss(encoder: &Mlp, decoder: &Mlp, x: &[f64], obs: &[f64], m: usize, beta: f64, eps: &[f64]) -> f64 {
    let l = eps.len() / m;
    let enc = encoder.forward(x, m);
    let mut z = vec![0.0; m * l];
    let mut total = 0.0;
    for r in 0..m {
        for k in 0..l {
            let mu = enc[r * 2 * l + k];
            let lv = enc[r * 2 * l + l + k];
            z[r * l + k] = mu + exp(0.5 * lv) * eps[r * l + k];
            if beta > 0.0 {
                total += beta * 0.5 * (mu * mu + exp(lv) - 1.0 - lv);
            }
        }
    }
    let logits = decoder.forward(&z, m);
    for k in 0..logits.len() {
        if obs[k] > 0.0 {
            total += bernoulli_nll(logits[k], x[k]);
        }
    }
    total / m as f64
}

impl VaeGenerator {
    pub fn num_questions(&self) -> usize {
        self.decoder.output_dim()
    }

    /// Correctness probabilities decoded from latent codes (`count × latent`).
    pub fn decode(&self, z: &[f64], count: usize) -> Vec<f64> {
        self.decoder
            .forward(z, count)
            .into_iter()
            .map(crate::math::sigmoid)
            .collect()
    }

    /// Mean per-row Bernoulli NLL over training cells, decoding each row
    /// from its posterior mean code.
    pub fn reconstruction_nll(&self, matrix: &ResponseMatrix) -> Result<f64, AugmentError> {
        let (m, n) = matrix.shape();
        if n != self.num_questions() {
            return Err(AugmentError::WidthMismatch {
                expected: self.num_questions(),
                got: n,
            });
        }
        let mut total = 0.0;
        let mut x = vec![0.0; n];
        let mut obs = vec![0.0; n];
        let l = self.latent_dim;
        for i in 0..m {
            encoder_input(matrix, i, &mut x, &mut obs);
            let enc = self.encoder.forward(&x, 1);
            let logits = self.decoder.forward(&enc[..l], 1);
            for j in 0..n {
                if obs[j] > 0.0 {
                    total += bernoulli_nll(logits[j], x[j]);
                }
            }
        }
        Ok(total / m as f64)
    }
}

/// `count` rows, each decoded from z ~ N(0, I) and sampled element-wise.
/// Row `s` uses a stream derived from `(seed, s)`.
pub fn generate_vae_students(generator: &VaeGenerator, count: usize, seed: u64) -> Vec<Vec<u8>> {
    let l = generator.latent_dim;
    (0..count)
        .map(|s| {
            let mut r = rng::stream(seed, s as u64);
            let mut z = vec![0.0; l];
            rng::fill_normal(&mut r, &mut z);
            generator
                .decode(&z, 1)
                .into_iter()
                .map(|p| rng::bernoulli(&mut r, p))
                .collect()
        })
        .collect()
}

pub fn synthetic_id(origin: Origin, index: usize) -> String {
    match origin {
        Origin::Vae => format!("vae-{index:03}"),
        Origin::Sampled => format!("smp-{index:03}"),
        Origin::Real => format!("real-{index:03}"),
    }
}

/// Stacks synthetic rows under `base`. Synthetic cells are never held out.
pub fn augment_matrix(
    base: &ResponseMatrix,
    vae_rows: &[Vec<u8>],
    sampled_rows: &[Vec<u8>],
) -> Result<ResponseMatrix, AugmentError> {
    let n = base.num_questions();
    let mut out = base.clone();
    let extra = vae_rows.len() + sampled_rows.len();
    out.entries.reserve(extra * n);
    for (origin, rows) in [(Origin::Vae, vae_rows), (Origin::Sampled, sampled_rows)] {
        for (k, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(AugmentError::WidthMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            out.students.push(StudentRecord::synthetic(synthetic_id(origin, k), origin));
            out.entries.extend_from_slice(row);
            if let Some(mask) = out.holdout_mask.as_mut() {
                mask.extend(core::iter::repeat_n(false, n));
            }
            if let Some(mask) = out.missing_mask.as_mut() {
                mask.extend(core::iter::repeat_n(false, n));
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_follow_columns() {
        let m = ResponseMatrix::from_rows(&[vec![1, 1], vec![1, 0]]).unwrap();
        assert_eq!(empirical_rates(&m).unwrap(), vec![1.0, 0.5]);
    }

    #[test]
    fn degenerate_rates_give_constant_columns() {
        let rows = sample_students(&[1.0, 0.0], &SamplingConfig::default()).unwrap();
        assert_eq!(rows.len(), 200);
        assert!(rows.iter().all(|r| r == &vec![1, 0]));
        assert!(sample_students(&[1.5], &SamplingConfig::default()).is_err());
    }

    #[test]
    fn empty_augmentation_is_identity() {
        let m = ResponseMatrix::from_rows(&[vec![1, 0, 1], vec![0, 0, 1]]).unwrap();
        assert_eq!(augment_matrix(&m, &[], &[]).unwrap(), m);
        assert!(augment_matrix(&m, &[vec![1, 0]], &[]).is_err());
    }

    #[test]
    fn defaults() {
        let c = VaeConfig::default();
        assert_eq!((c.latent_dim, c.kld_weight, c.num_generate), (32, 0.5, 200));
        assert_eq!(SamplingConfig::default().num_generate, 200);
    }
}
