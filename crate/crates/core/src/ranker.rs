//! Pairwise difficulty ranker over question embeddings and the derived
//! difficulty reward.
//!
//! Pairs refer to items by index rather than copying embeddings, so large
//! embedding dimensions do not multiply memory by the pair count.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{sigmoid, softplus, sqrt};
use crate::nn::Mlp;
use crate::optim::Adam;
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankerError {
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("no training pairs")]
    NoPairs,
    #[error("all pairs carry label {0}; ranker training needs both classes")]
    DegenerateLabels(u8),
    #[error("pair set is not symmetric: {0}")]
    Asymmetric(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("pair references item {index} but only {len} items were given")]
    UnknownItem { index: usize, len: usize },
    #[error("non-finite training loss in epoch {0}")]
    NonFiniteLoss(usize),
}

/// A calibrated question with its embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankItem {
    pub question_id: String,
    pub topic: String,
    pub embedding: Vec<f64>,
    pub difficulty: f64,
}

/// Ordered pair of items; `label` is 1 iff `left` is harder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankPair {
    pub left: usize,
    pub right: usize,
    pub label: u8,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    pub hidden_dims: Vec<usize>,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub min_gap: f64,
    /// Maximum ordered pairs per topic; larger topics are subsampled.
    pub max_pairs_per_topic: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![512, 256],
            dropout: 0.3,
            batch_size: 64,
            epochs: 8,
            folds: 5,
            learning_rate: 1e-3,
            seed: 42,
            min_gap: 1e-6,
            max_pairs_per_topic: 200_000,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<(), RankerError> {
        let bad = |m: &str| Err(RankerError::InvalidConfig(String::from(m)));
        if self.folds < 2 {
            return bad("folds must be >= 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        if self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.min_gap >= 0.0) {
            return bad("min_gap must be >= 0");
        }
        if self.max_pairs_per_topic < 2 {
            return bad("max_pairs_per_topic must be >= 2");
        }
        Ok(())
    }
}

/// Output of [`generate_pairs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<RankPair>,
    pub dim: usize,
    /// Topics whose pair count hit the cap, with their uncapped ordered count.
    pub capped_topics: Vec<(String, usize)>,
}

fn check_dims(items: &[RankItem]) -> Result<usize, RankerError> {
    let dim = items.first().map_or(0, |it| it.embedding.len());
    for it in items {
        if it.embedding.len() != dim {
            return Err(RankerError::Dimension {
                expected: dim,
                got: it.embedding.len(),
            });
        }
    }
    Ok(dim)
}

/// Every same-topic unordered pair with `|dᵢ − dⱼ| ≥ min_gap`, emitted in
/// both orders with weight `√|dᵢ − dⱼ|`. Topics are visited in name order
/// and items in input order.
pub fn generate_pairs(items: &[RankItem], config: &RankerConfig) -> Result<PairSet, RankerError> {
    config.validate()?;
    let dim = check_dims(items)?;
    let mut by_topic: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, it) in items.iter().enumerate() {
        by_topic.entry(it.topic.as_str()).or_default().push(k);
    }
    let mut pairs = Vec::new();
    let mut capped = Vec::new();
    for (t, (topic, members)) in by_topic.iter().enumerate() {
        let mut unordered = Vec::new();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                if (items[i].difficulty - items[j].difficulty).abs() >= config.min_gap {
                    unordered.push((i, j));
                }
            }
        }
        let limit = config.max_pairs_per_topic / 2;
        if unordered.len() > limit {
            capped.push((String::from(*topic), 2 * unordered.len()));
            let mut r = rng::stream(config.seed, 0x7061_6972 ^ t as u64);
            let mut keep = rand::seq::index::sample(&mut r, unordered.len(), limit).into_vec();
            keep.sort_unstable();
            unordered = keep.into_iter().map(|k| unordered[k]).collect();
        }
        for (i, j) in unordered {
            let gap = items[i].difficulty - items[j].difficulty;
            let w = sqrt(gap.abs());
            let r = u8::from(gap > 0.0);
            pairs.push(RankPair {
                left: i,
                right: j,
                label: r,
                weight: w,
            });
            pairs.push(RankPair {
                left: j,
                right: i,
                label: 1 - r,
                weight: w,
            });
        }
    }
    Ok(PairSet {
        pairs,
        dim,
        capped_topics: capped,
    })
}

/// Every pair's reversed counterpart is present with label `1 − r` and the
/// same weight, and multiplicities match.
pub fn check_symmetric(pairs: &[RankPair]) -> Result<(), RankerError> {
    if !pairs.len().is_multiple_of(2) {
        return Err(RankerError::Asymmetric(format!("odd pair count {}", pairs.len())));
    }
    let mut counts: BTreeMap<(usize, usize, u8, u64), i64> = BTreeMap::new();
    for p in pairs {
        *counts.entry((p.left, p.right, p.label, p.weight.to_bits())).or_default() += 1;
    }
    for (&(l, r, label, w), &c) in &counts {
        if label > 1 {
            return Err(RankerError::Asymmetric(format!("label {label} on ({l}, {r})")));
        }
        let mirror = counts.get(&(r, l, 1 - label, w)).copied().unwrap_or(0);
        if mirror != c {
            return Err(RankerError::Asymmetric(format!(
                "pair ({l}, {r}) label {label} appears {c} times but its counterpart {mirror} times"
            )));
        }
    }
    Ok(())
}

/// `[eᵢ, eⱼ, eᵢ − eⱼ, |eᵢ − eⱼ|]`.
pub fn fuse_features(e_i: &[f64], e_j: &[f64]) -> Result<Vec<f64>, RankerError> {
    if e_i.len() != e_j.len() {
        return Err(RankerError::Dimension {
            expected: e_i.len(),
            got: e_j.len(),
        });
    }
    let mut out = Vec::with_capacity(4 * e_i.len());
    fuse_into(e_i, e_j, &mut out);
    Ok(out)
}

fn fuse_into(e_i: &[f64], e_j: &[f64], out: &mut Vec<f64>) {
    out.extend_from_slice(e_i);
    out.extend_from_slice(e_j);
    out.extend(e_i.iter().zip(e_j).map(|(a, b)| a - b));
    out.extend(e_i.iter().zip(e_j).map(|(a, b)| (a - b).abs()));
}

/// `(1/|B|) Σ w·BCE(r, σ(logit))` over a batch.
pub fn weighted_bce(logits: &[f64], labels: &[u8], weights: &[f64]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&z, &r), &w)| w * (softplus(z) - f64::from(r) * z))
        .sum();
    total / logits.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Held-out AUC per CV fold; `None` where the fold had no test pairs.
    pub fold_auc: Vec<Option<f64>>,
    pub mean_cv_auc: Option<f64>,
    pub num_pairs: usize,
    pub capped_topics: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRanker {
    pub network: Mlp,
    pub config: RankerConfig,
    pub train_metrics: TrainMetrics,
}

impl DifficultyRanker {
    pub fn embedding_dim(&self) -> usize {
        self.network.input_dim() / 4
    }
}

fn fit_network(
    items: &[RankItem],
    pairs: &[RankPair],
    config: &RankerConfig,
    dim: usize,
    seed: u64,
) -> Result<Mlp, RankerError> {
    let mut sizes = vec![4 * dim];
    sizes.extend_from_slice(&config.hidden_dims);
    sizes.push(1);
    let mut net = Mlp::new(&sizes, rng::derive_seed(seed, 1));
    let mut opt = Adam::new(net.params.len(), config.learning_rate);
    let mut grads = vec![0.0; net.params.len()];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = rng::stream(seed, 2);
    let mut dropout_rng = rng::stream(seed, 3);
    let mut x = Vec::with_capacity(config.batch_size * 4 * dim);
    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            x.clear();
            for &k in chunk {
                let p = &pairs[k];
                fuse_into(&items[p.left].embedding, &items[p.right].embedding, &mut x);
            }
            let b = chunk.len();
            let (logits, cache) = net.forward_train(&x, b, config.dropout, &mut dropout_rng);
            let inv_b = 1.0 / b as f64;
            let mut g = vec![0.0; b];
            for (r, &k) in chunk.iter().enumerate() {
                let p = &pairs[k];
                g[r] = p.weight * (sigmoid(logits[r]) - f64::from(p.label)) * inv_b;
                if !logits[r].is_finite() {
                    return Err(RankerError::NonFiniteLoss(epoch));
                }
            }
            grads.iter_mut().for_each(|v| *v = 0.0);
            net.backward(&cache, &g, &mut grads);
            opt.step(&mut net.params, &grads);
        }
    }
    Ok(net)
}

fn logits_for(net: &Mlp, items: &[RankItem], pairs: &[RankPair]) -> Vec<f64> {
    const CHUNK: usize = 256;
    let dim = net.input_dim() / 4;
    let mut out = Vec::with_capacity(pairs.len());
    let mut x = Vec::with_capacity(CHUNK * 4 * dim);
    for chunk in pairs.chunks(CHUNK) {
        x.clear();
        for p in chunk {
            fuse_into(&items[p.left].embedding, &items[p.right].embedding, &mut x);
        }
        out.extend(net.forward(&x, chunk.len()));
    }
    out
}

/// Fold of each item for question-disjoint cross-validation.
pub fn question_folds(items: &[RankItem], folds: usize, seed: u64) -> Vec<usize> {
    let mut ids: Vec<&str> = items.iter().map(|it| it.question_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut rng::stream(seed, 0x666f_6c64));
    let fold_of: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(k, id)| (*id, k % folds)).collect();
    items.iter().map(|it| fold_of[it.question_id.as_str()]).collect()
}

/// Cross-validates with question-disjoint folds (pairs spanning two folds
/// are dropped from that split), then fits the final network on all pairs.
pub fn train_ranker(
    items: &[RankItem],
    pair_set: &PairSet,
    config: &RankerConfig,
) -> Result<DifficultyRanker, RankerError> {
    config.validate()?;
    let pairs = &pair_set.pairs;
    if pairs.is_empty() {
        return Err(RankerError::NoPairs);
    }
    let dim = check_dims(items)?;
    if dim != pair_set.dim {
        return Err(RankerError::Dimension {
            expected: pair_set.dim,
            got: dim,
        });
    }
    if let Some(p) = pairs.iter().find(|p| p.left >= items.len() || p.right >= items.len()) {
        return Err(RankerError::UnknownItem {
            index: p.left.max(p.right),
            len: items.len(),
        });
    }
    let first = pairs[0].label;
    if pairs.iter().all(|p| p.label == first) {
        return Err(RankerError::DegenerateLabels(first));
    }
    check_symmetric(pairs)?;

    let fold_of = question_folds(items, config.folds, config.seed);
    let mut fold_auc = Vec::with_capacity(config.folds);
    for f in 0..config.folds {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for p in pairs {
            match (fold_of[p.left] == f, fold_of[p.right] == f) {
                (true, true) => test.push(*p),
                (false, false) => train.push(*p),
                _ => {}
            }
        }
        if train.is_empty() || test.is_empty() {
            fold_auc.push(None);
            continue;
        }
        let net = fit_network(items, &train, config, dim, rng::derive_seed(config.seed, 100 + f as u64))?;
        let scores = logits_for(&net, items, &test);
        let labels: Vec<bool> = test.iter().map(|p| p.label == 1).collect();
        fold_auc.push(stats::auc_roc(&scores, &labels));
    }
    let scored: Vec<f64> = fold_auc.iter().flatten().copied().collect();
    let mean_cv_auc = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
    let network = fit_network(items, pairs, config, dim, config.seed)?;
    Ok(DifficultyRanker {
        network,
        config: config.clone(),
        train_metrics: TrainMetrics {
            fold_auc,
            mean_cv_auc,
            num_pairs: pairs.len(),
            capped_topics: pair_set.capped_topics.clone(),
        },
    })
}

/// Probability that question `i` is harder than question `j`, kept strictly
/// inside (0, 1).
pub fn score_pair(ranker: &DifficultyRanker, e_i: &[f64], e_j: &[f64]) -> Result<f64, RankerError> {
    let dim = ranker.embedding_dim();
    for e in [e_i, e_j] {
        if e.len() != dim {
            return Err(RankerError::Dimension {
                expected: dim,
                got: e.len(),
            });
        }
    }
    let x = fuse_features(e_i, e_j)?;
    let p = sigmoid(ranker.network.forward(&x, 1)[0]);
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// `p(rewrite, original) − p(original, rewrite)` from two forward passes.
pub fn difficulty_reward(ranker: &DifficultyRanker, e_original: &[f64], e_rewrite: &[f64]) -> Result<f64, RankerError> {
    Ok(score_pair(ranker, e_rewrite, e_original)? - score_pair(ranker, e_original, e_rewrite)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(id: &str, topic: &str, d: f64) -> RankItem {
        RankItem {
            question_id: id.into(),
            topic: topic.into(),
            embedding: vec![d, 0.0],
            difficulty: d,
        }
    }

    #[test]
    fn two_items_give_mirrored_pairs() {
        let set = generate_pairs(&[item("a", "t", 1.5), item("b", "t", 0.5)], &RankerConfig::default()).unwrap();
        assert_eq!(
            set.pairs,
            vec![
                RankPair { left: 0, right: 1, label: 1, weight: 1.0 },
                RankPair { left: 1, right: 0, label: 0, weight: 1.0 },
            ]
        );
    }

    #[test]
    fn cross_topic_and_tied_items_are_skipped() {
        let cfg = RankerConfig::default();
        assert!(generate_pairs(&[item("a", "x", 1.0), item("b", "y", 0.0)], &cfg).unwrap().pairs.is_empty());
        assert!(generate_pairs(&[item("a", "x", 1.0), item("b", "x", 1.0)], &cfg).unwrap().pairs.is_empty());
    }

    #[test]
    fn fused_features_by_hand() {
        assert_eq!(
            fuse_features(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0, 1.0, -1.0, 1.0, 1.0]
        );
        let same = fuse_features(&[0.3, -2.0, 5.0], &[0.3, -2.0, 5.0]).unwrap();
        assert!(same[6..].iter().all(|&v| v == 0.0));
        assert_eq!(fuse_features(&vec![0.0; 3072], &vec![0.0; 3072]).unwrap().len(), 12288);
        assert!(fuse_features(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_network_scores_half() {
        let ranker = DifficultyRanker {
            network: Mlp::zeros(&[8, 4, 1]),
            config: RankerConfig::default(),
            train_metrics: TrainMetrics {
                fold_auc: vec![],
                mean_cv_auc: None,
                num_pairs: 0,
                capped_topics: vec![],
            },
        };
        assert_eq!(score_pair(&ranker, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.5);
        assert_eq!(difficulty_reward(&ranker, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(score_pair(&ranker, &[1.0], &[3.0, 4.0]).is_err());
    }

    #[test]
    fn asymmetric_sets_are_rejected() {
        let p = RankPair { left: 0, right: 1, label: 1, weight: 1.0 };
        assert!(check_symmetric(&[p]).is_err());
        let q = RankPair { left: 1, right: 0, label: 1, weight: 1.0 };
        assert!(check_symmetric(&[p, q]).is_err());
        let q = RankPair { label: 0, ..q };
        assert!(check_symmetric(&[p, q]).is_ok());
    }

    #[test]
    fn cap_subsamples_per_topic() {
        let items: Vec<RankItem> = (0..30).map(|k| item(&format!("q{k}"), "t", k as f64)).collect();
        let cfg = RankerConfig {
            max_pairs_per_topic: 100,
            ..Default::default()
        };
        let set = generate_pairs(&items, &cfg).unwrap();
        assert_eq!(set.pairs.len(), 100);
        assert_eq!(set.capped_topics, vec![(String::from("t"), 870)]);
        check_symmetric(&set.pairs).unwrap();
        assert_eq!(set, generate_pairs(&items, &cfg).unwrap());
    }
}
