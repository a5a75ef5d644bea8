//! Run configuration files.
//!
//! A run is described by one JSON document. Relative paths resolve against
//! the directory holding the config file. API keys never live here; the
//! HTTP backend reads them from the environment.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, Conversation, CorpusError, CorpusFormat};
use crate::gateway::{Backend, Cassette, CassetteMode, GatewayError, HttpBackend, ThrottleLimits, ThrottledBackend};
use crate::montage::{load_captions, CaptionCache, MontageError};
use crate::pipeline::{Approach, IclResources, Pipeline, PipelineConfig, PipelineError, RunOutcome};
use crate::prompting::{CharHeuristic, PromptBuilder, PromptError, TemplateSet};
use crate::retrieval::{load_cause_indices, RetrievalError, VectorIndex};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Montage(#[from] MontageError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
    Record,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub cassette: Option<PathBuf>,
    pub base_url: String,
    pub max_concurrent: usize,
    pub min_interval_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Replay,
            cassette: None,
            base_url: "https://api.openai.com/v1".into(),
            max_concurrent: 4,
            min_interval_ms: 0,
        }
    }
}

impl BackendConfig {
    pub fn limits(&self) -> ThrottleLimits {
        ThrottleLimits {
            max_concurrent: self.max_concurrent.max(1),
            min_interval_ms: self.min_interval_ms,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IndexPaths {
    pub conversation: Option<PathBuf>,
    pub cause_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub eval_corpus: PathBuf,
    #[serde(default)]
    pub train_corpus: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub indices: IndexPaths,
    #[serde(default)]
    pub captions: Option<PathBuf>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Seed for randomized fixture generation; predictions do not depend on it.
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses and validates `path`, resolving relative paths against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let config = RunConfig::parse(path)?;
        config.validate()?;
        Ok(config)
    }

    /// Like [`RunConfig::load`] without validation, so callers can apply
    /// overrides first.
    pub fn parse(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let read = |message: String| ConfigError::Read {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| read(e.to_string()))?;
        let mut config: RunConfig = serde_json::from_str(&text).map_err(|e| read(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.eval_corpus = resolve(base, &self.eval_corpus);
        self.output_dir = resolve(base, &self.output_dir);
        for p in [
            &mut self.train_corpus,
            &mut self.backend.cassette,
            &mut self.indices.conversation,
            &mut self.indices.cause_dir,
            &mut self.captions,
            &mut self.templates_dir,
        ]
        .into_iter()
        .flatten()
        {
            *p = resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let must_exist = |what: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(ConfigError::Invalid(format!("{what} {} does not exist", p.display())))
            }
        };
        must_exist("eval corpus", &self.eval_corpus)?;
        match self.backend.kind {
            BackendKind::Replay => {
                let cassette = self
                    .backend
                    .cassette
                    .as_deref()
                    .ok_or_else(|| ConfigError::Invalid("replay backend needs a cassette path".into()))?;
                must_exist("cassette", cassette)?;
            }
            BackendKind::Record if self.backend.cassette.is_none() => {
                return Err(ConfigError::Invalid("record backend needs a cassette path".into()))
            }
            _ => {}
        }
        if self.pipeline.approach == Approach::Icl {
            let train = self
                .train_corpus
                .as_deref()
                .ok_or_else(|| ConfigError::Invalid("icl needs train_corpus".into()))?;
            must_exist("train corpus", train)?;
            let conv = self
                .indices
                .conversation
                .as_deref()
                .ok_or_else(|| ConfigError::Invalid("icl needs indices.conversation".into()))?;
            must_exist("conversation index", conv)?;
            let causes = self
                .indices
                .cause_dir
                .as_deref()
                .ok_or_else(|| ConfigError::Invalid("icl needs indices.cause_dir".into()))?;
            must_exist("cause index directory", causes)?;
            if self.pipeline.use_video_captions {
                let captions = self
                    .captions
                    .as_deref()
                    .ok_or_else(|| ConfigError::Invalid("use_video_captions needs a captions file".into()))?;
                must_exist("captions", captions)?;
            }
        }
        if let Some(dir) = &self.templates_dir {
            must_exist("templates directory", dir)?;
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        Ok(match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::default(),
        })
    }

    pub fn eval(&self) -> Result<Vec<Conversation>, ConfigError> {
        Ok(load_corpus(&self.eval_corpus, CorpusFormat::NativeJson)?)
    }

    pub fn captions(&self) -> Result<Option<CaptionCache>, ConfigError> {
        self.captions
            .as_ref()
            .filter(|_| self.pipeline.use_video_captions)
            .map(load_captions)
            .transpose()
            .map_err(Into::into)
    }

    /// Training corpus and indices for the icl approach; `None` otherwise.
    pub fn icl_resources(&self) -> Result<Option<IclResources>, ConfigError> {
        if self.pipeline.approach != Approach::Icl {
            return Ok(None);
        }
        let train = load_corpus(self.train_corpus.as_ref().expect("validated"), CorpusFormat::NativeJson)?;
        let conversation = VectorIndex::load(self.indices.conversation.as_ref().expect("validated"))?;
        let causes = load_cause_indices(self.indices.cause_dir.as_ref().expect("validated"))?;
        Ok(Some(IclResources::new(train, conversation, causes)?))
    }
}

/// A ready backend plus the cassette behind it, if any.
pub struct BackendHandle {
    pub backend: Arc<dyn Backend>,
    pub cassette: Option<Arc<Cassette>>,
}

impl BackendHandle {
    /// Writes recorded entries back to disk (record mode only).
    pub fn persist(&self, config: &BackendConfig) -> Result<(), ConfigError> {
        if let (Some(cassette), Some(path), BackendKind::Record) = (&self.cassette, &config.cassette, config.kind) {
            cassette.save(path)?;
        }
        Ok(())
    }
}

/// Builds the backend described by `config`. Replay never opens a network
/// connection; record wraps the HTTP backend.
pub fn open_backend(config: &BackendConfig) -> Result<BackendHandle, ConfigError> {
    let http = || -> Arc<dyn Backend> {
        Arc::new(ThrottledBackend::new(
            HttpBackend::new(config.base_url.clone()),
            config.limits(),
        ))
    };
    Ok(match config.kind {
        BackendKind::Http => BackendHandle {
            backend: http(),
            cassette: None,
        },
        BackendKind::Replay | BackendKind::Record => {
            let path = config
                .cassette
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("cassette path required".into()))?;
            let (mode, inner) = if config.kind == BackendKind::Replay {
                (CassetteMode::Replay, None)
            } else {
                (CassetteMode::Record, Some(http()))
            };
            let cassette = Arc::new(Cassette::load(path, mode, inner)?);
            BackendHandle {
                backend: cassette.clone(),
                cassette: Some(cassette),
            }
        }
    })
}

/// Loads every input named by `config` and runs the pipeline over the
/// evaluation corpus with `backend`.
pub fn execute(config: &RunConfig, backend: &BackendHandle) -> Result<RunOutcome, ConfigError> {
    let eval = config.eval()?;
    let templates = config.templates()?;
    let icl = config.icl_resources()?;
    let captions = config.captions()?;
    let estimator = CharHeuristic;
    let builder = PromptBuilder::new(&templates, &estimator);
    let mut pipeline = Pipeline::new(
        &config.pipeline,
        backend.backend.as_ref(),
        builder,
        icl.as_ref(),
        captions.as_ref(),
    )?;
    if let Some(cassette) = &backend.cassette {
        pipeline = pipeline.with_cassette_digest(cassette.source_digest());
    }
    Ok(pipeline.run(&eval))
}
