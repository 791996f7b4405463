//! TOML pipeline configuration. Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::augment::{SamplingConfig, VaeConfig};
use crate::datamodel::Completeness;
use crate::digest::seed_from_text;
use crate::eval::LevelThresholds;
use crate::gateway::BackendConfig;
use crate::gspo::{GspoConfig, RewardMix};
use crate::irt::{IrtModelConfig, ModelKind, PriorKind};
use crate::ranker::RankerConfig;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Use mock backends even without `--mock`.
    pub mock: bool,
    pub questions: Option<PathBuf>,
    pub rewrites: Option<PathBuf>,
    pub prompts_dir: Option<PathBuf>,
    pub mock_fixture: Option<PathBuf>,
    /// Defaults to `<out>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Connection settings shared by every role; `model_id` is filled per role.
    pub gateway: BackendConfig,
    pub collect: CollectStage,
    pub matrix: MatrixStage,
    pub augment: AugmentStage,
    pub irt: IrtStage,
    pub embed: EmbedStage,
    pub ranker: RankerConfig,
    pub reward: RewardStage,
    pub gspo: GspoStage,
    pub eval: EvalStage,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: "out".into(),
            mock: false,
            questions: None,
            rewrites: None,
            prompts_dir: None,
            mock_fixture: None,
            cache_dir: None,
            gateway: BackendConfig {
                model_id: "unset".into(),
                ..BackendConfig::default()
            },
            collect: CollectStage::default(),
            matrix: MatrixStage::default(),
            augment: AugmentStage::default(),
            irt: IrtStage::default(),
            embed: EmbedStage::default(),
            ranker: RankerConfig::default(),
            reward: RewardStage::default(),
            gspo: GspoStage::default(),
            eval: EvalStage::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Err(e) = self.gateway.with_model("probe").validate() {
            return bad(e.to_string());
        }
        if self.collect.students.is_empty() {
            return bad("collect.students is empty".into());
        }
        if self.collect.samples == 0 {
            return bad("collect.samples must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.matrix.holdout_fraction) {
            return bad(format!("matrix.holdout_fraction {} outside [0, 1]", self.matrix.holdout_fraction));
        }
        if self.embed.dim == 0 {
            return bad("embed.dim must be >= 1".into());
        }
        let checks: [(&str, std::result::Result<(), String>); 5] = [
            ("irt", self.irt.fit_config(self.seed).validate().map_err(|e| e.to_string())),
            ("augment.vae", self.augment.vae.validate().map_err(|e| e.to_string())),
            ("ranker", self.ranker.validate().map_err(|e| e.to_string())),
            ("reward.mix", self.reward.mix.validate().map_err(|e| e.to_string())),
            ("gspo", self.gspo.config(self.seed).validate().map_err(|e| e.to_string())),
        ];
        for (name, r) in checks {
            if let Err(e) = r {
                return bad(format!("{name}: {e}"));
            }
        }
        if self.eval.annotation_threshold == 0 || self.eval.annotation_threshold > self.eval.annotation_runs {
            return bad("eval.annotation_threshold must lie in 1..=annotation_runs".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSpec {
    pub id: String,
    /// Ability used by the mock student backend.
    #[serde(default)]
    pub mock_ability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectStage {
    pub students: Vec<StudentSpec>,
    /// Answers per (student, question); sample 0 feeds the response matrix.
    pub samples: u32,
    pub completeness: Completeness,
}

impl Default for CollectStage {
    fn default() -> Self {
        Self {
            students: Vec::new(),
            samples: 1,
            completeness: Completeness::Strict,
        }
    }
}

impl CollectStage {
    pub fn ability_of(&self, id: &str) -> f64 {
        self.students
            .iter()
            .find(|s| s.id == id)
            .and_then(|s| s.mock_ability)
            .unwrap_or_else(|| rng::normal(&mut rng::seeded(seed_from_text(id))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixStage {
    pub holdout_fraction: f64,
}

impl Default for MatrixStage {
    fn default() -> Self {
        Self { holdout_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentStage {
    pub enabled: bool,
    pub vae: VaeConfig,
    /// Empirically sampled students.
    pub num_sampled: usize,
}

impl Default for AugmentStage {
    fn default() -> Self {
        Self {
            enabled: true,
            vae: VaeConfig::default(),
            num_sampled: 200,
        }
    }
}

impl AugmentStage {
    pub fn vae_config(&self, seed: u64) -> VaeConfig {
        VaeConfig { seed, ..self.vae.clone() }
    }

    pub fn sampling_config(&self, seed: u64) -> SamplingConfig {
        SamplingConfig {
            num_generate: self.num_sampled,
            seed: rng::derive_seed(seed, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrtStage {
    pub model_kind: ModelKind,
    pub prior_kind: PriorKind,
    pub steps: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    /// Fit the main calibration on the augmented matrix when it exists.
    pub use_augmented: bool,
    /// Fit every model × prior × augmentation cell and report holdout scores.
    pub sweep: bool,
    /// Cross-check the 1PL fit with MCMC.
    pub mcmc_check: bool,
}

impl Default for IrtStage {
    fn default() -> Self {
        let d = IrtModelConfig::default();
        Self {
            model_kind: d.model_kind,
            prior_kind: d.prior_kind,
            steps: d.steps,
            learning_rate: d.learning_rate,
            mc_samples: d.mc_samples,
            use_augmented: false,
            sweep: true,
            mcmc_check: true,
        }
    }
}

impl IrtStage {
    pub fn fit_config(&self, seed: u64) -> IrtModelConfig {
        IrtModelConfig {
            model_kind: self.model_kind,
            prior_kind: self.prior_kind,
            seed,
            steps: self.steps,
            learning_rate: self.learning_rate,
            mc_samples: self.mc_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedStage {
    pub model: String,
    /// Expected provider dimension; vectors of any other length are rejected.
    pub dim: usize,
}

impl Default for EmbedStage {
    fn default() -> Self {
        Self {
            model: "text-embedding-3-large".into(),
            dim: 3072,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardStage {
    pub verifier_model: String,
    pub mix: RewardMix,
}

impl Default for RewardStage {
    fn default() -> Self {
        Self {
            verifier_model: "gpt-5-mini".into(),
            mix: RewardMix::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTaskSpec {
    pub prompts: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub eos: Option<u32>,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            prompts: 3,
            vocab: 6,
            max_len: 4,
            eos: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GspoStage {
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub inner_updates: usize,
    pub mix: RewardMix,
    pub task: ToyTaskSpec,
}

impl Default for GspoStage {
    fn default() -> Self {
        let d = GspoConfig::default();
        Self {
            group_size: d.group_size,
            clip_epsilon: d.clip_epsilon,
            learning_rate: d.learning_rate,
            steps: d.steps,
            inner_updates: d.inner_updates,
            mix: RewardMix::default(),
            task: ToyTaskSpec::default(),
        }
    }
}

impl GspoStage {
    pub fn config(&self, seed: u64) -> GspoConfig {
        GspoConfig {
            group_size: self.group_size,
            clip_epsilon: self.clip_epsilon,
            learning_rate: self.learning_rate,
            steps: self.steps,
            seed,
            inner_updates: self.inner_updates,
            ..GspoConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalStage {
    /// Benchmark runs to evaluate; defaults to the `collect` output.
    pub runs: Option<PathBuf>,
    pub original_benchmark: String,
    pub perturbed_benchmark: String,
    pub pass_at: Vec<usize>,
    pub levels: LevelThresholds,
    pub judge_model: String,
    pub judge_rounds: u32,
    pub criteria: String,
    pub annotator_model: String,
    pub annotate: bool,
    pub annotation_runs: usize,
    pub annotation_threshold: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            runs: None,
            original_benchmark: "original".into(),
            perturbed_benchmark: "perturbed".into(),
            pass_at: vec![1, 2, 4, 8],
            levels: LevelThresholds::default(),
            judge_model: "judge".into(),
            judge_rounds: 3,
            criteria: "completeness, clarity, conceptual consistency".into(),
            annotator_model: "annotator".into(),
            annotate: true,
            annotation_runs: 6,
            annotation_threshold: 3,
        }
    }
}

/// A rewritten question, one JSON object per line of the rewrites file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteRecord {
    pub id: String,
    pub original_id: String,
    pub text: String,
    pub answer: String,
    #[serde(default)]
    pub solution: String,
    /// Competing rewrite of the same original, judged against this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    /// Human label of whether the rewrite is valid, for verifier scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_valid: Option<bool>,
}
