//! Stage pipeline: each stage reads declared artifacts from the output
//! directory, writes its own, and records a manifest of digests.

mod config;
mod report;
mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    AugmentStage, CollectStage, EmbedStage, EvalStage, GspoStage, IrtStage, MatrixStage, PipelineConfig,
    RewardStage, RewriteRecord, StudentSpec, ToyTaskSpec,
};
pub use report::{EvalReport, PdrRow};

use crate::digest::{file_digest, sha256_hex};
use crate::gateway::{
    Backend, BackendConfig, Gateway, GatewayError, HttpBackend, MockBackend, MockRole, MockWorld, Templates,
};
use crate::io::{write_json, IoError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs `{}`, which does not exist; run `{producer}` first", artifact.display())]
    MissingDependency {
        stage: &'static str,
        artifact: PathBuf,
        producer: &'static str,
    },
    #[error("backend error: {0}")]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("stage `{stage}` failed: {message}")]
    Compute { stage: &'static str, message: String },
}

impl PipelineError {
    /// 2 config, 3 missing dependency, 4 backend, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::MissingDependency { .. } => 3,
            Self::Backend(_) => 4,
            Self::Io(_) | Self::Compute { .. } => 1,
        }
    }

    fn compute(stage: &'static str, e: impl std::fmt::Display) -> Self {
        Self::Compute {
            stage,
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Collect,
    Matrix,
    Augment,
    IrtFit,
    Embed,
    RankerTrain,
    RewardScore,
    GspoToy,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Collect,
        Stage::Matrix,
        Stage::Augment,
        Stage::IrtFit,
        Stage::Embed,
        Stage::RankerTrain,
        Stage::RewardScore,
        Stage::GspoToy,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Matrix => "matrix",
            Stage::Augment => "augment",
            Stage::IrtFit => "irt-fit",
            Stage::Embed => "embed",
            Stage::RankerTrain => "ranker-train",
            Stage::RewardScore => "reward-score",
            Stage::GspoToy => "gspo-toy",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Written next to every stage's artifacts as `<stage>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Role of a backend within the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Student,
    Embedder,
    Verifier,
    Judge,
    Annotator,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    /// Directory against which relative input paths resolve.
    pub root: PathBuf,
    pub out: PathBuf,
    pub mock: bool,
    templates: Templates,
    calls: Arc<AtomicUsize>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, root: PathBuf, out: PathBuf, mock: bool) -> Result<Self> {
        config.validate()?;
        let prompts_dir = config.prompts_dir.as_ref().map(|p| root.join(p));
        let templates = Templates::load(prompts_dir.as_deref()).map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            config,
            root,
            out,
            mock,
            templates,
            calls: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Loads a TOML config; relative paths inside it resolve against its
    /// directory.
    pub fn from_file(path: &Path, out: Option<PathBuf>, seed: Option<u64>, mock: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = out.unwrap_or_else(|| root.join(&config.out_dir));
        let mock = mock || config.mock;
        Self::new(config, root, out, mock)
    }

    /// Backend calls made so far; cache hits are not counted.
    pub fn backend_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn templates(&self) -> &Templates {
        &self.templates
    }

    pub fn input_path(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn cache_dir(&self) -> PathBuf {
        match &self.config.cache_dir {
            Some(d) => self.root.join(d),
            None => self.out.join("cache"),
        }
    }

    fn backend_config(&self, model_id: &str) -> BackendConfig {
        BackendConfig {
            model_id: model_id.into(),
            cache_dir: Some(self.cache_dir()),
            ..self.config.gateway.clone()
        }
    }

    fn gateway(&self, role: Role, model_id: &str, world: Option<&std::sync::Arc<MockWorld>>) -> Result<Gateway> {
        let cfg = self.backend_config(model_id);
        let backend: Box<dyn Backend> = if self.mock {
            let role = match role {
                Role::Student => MockRole::Student {
                    ability: self.config.collect.ability_of(model_id),
                    world: world.cloned().ok_or_else(|| PipelineError::Config("student mock needs a world".into()))?,
                },
                Role::Embedder => MockRole::Embedder {
                    dim: self.config.embed.dim,
                },
                Role::Verifier => MockRole::Verifier { accept_rate: 0.85 },
                Role::Judge => MockRole::Judge,
                Role::Annotator => MockRole::Annotator,
            };
            let mut mock = MockBackend::new(role);
            if let Some(f) = &self.config.mock_fixture {
                mock = mock.with_fixture(&self.input_path(f))?;
            }
            Box::new(mock)
        } else {
            Box::new(HttpBackend::new(&cfg)?)
        };
        Ok(Gateway::new(cfg, backend)?.with_call_counter(self.calls.clone()))
    }

    fn require(&self, stage: Stage, name: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.artifact(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingDependency {
                stage: stage.name(),
                artifact: p,
                producer: producer.name(),
            })
        }
    }

    fn require_input(&self, stage: Stage, path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
        let p = path.ok_or_else(|| PipelineError::Config(format!("stage `{}` needs `{what}`", stage.name())))?;
        let p = self.input_path(p);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::MissingDependency {
                stage: stage.name(),
                artifact: p,
                producer: "an external input",
            })
        }
    }

    fn write_manifest<C: Serialize>(
        &self,
        stage: Stage,
        section: &C,
        inputs: &[(&str, &Path)],
        outputs: &[&str],
    ) -> Result<Manifest> {
        let digest = |p: &Path| file_digest(p).map_err(|e| PipelineError::compute(stage.name(), e));
        let section_json = serde_json::to_string(section).expect("in-memory JSON serialization");
        let manifest = Manifest {
            stage: stage.name().into(),
            seed: self.config.seed,
            config_digest: sha256_hex(format!("{}\n{section_json}", self.config.seed)),
            inputs: inputs
                .iter()
                .map(|(k, p)| Ok(((*k).to_string(), digest(p)?)))
                .collect::<Result<_>>()?,
            outputs: outputs
                .iter()
                .map(|n| Ok(((*n).to_string(), digest(&self.artifact(n))?)))
                .collect::<Result<_>>()?,
        };
        write_json(&self.artifact(&format!("{}.manifest.json", stage.name())), &manifest)?;
        Ok(manifest)
    }

    pub fn run(&self, stage: Stage) -> Result<Manifest> {
        match stage {
            Stage::Collect => self.collect(),
            Stage::Matrix => self.matrix(),
            Stage::Augment => self.augment(),
            Stage::IrtFit => self.irt_fit(),
            Stage::Embed => self.embed(),
            Stage::RankerTrain => self.ranker_train(),
            Stage::RewardScore => self.reward_score(),
            Stage::GspoToy => self.gspo_toy(),
            Stage::Eval => self.eval(),
        }
    }

    /// Every stage in order; stages whose optional inputs are not
    /// configured are skipped.
    pub fn run_all(&self) -> Result<Vec<Manifest>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let skip = match stage {
                Stage::Augment => !self.config.augment.enabled,
                Stage::RewardScore => self.config.rewrites.is_none(),
                _ => false,
            };
            if !skip {
                out.push(self.run(stage)?);
            }
        }
        Ok(out)
    }
}
