//! Interfaces to every external model the system consults, plus a synthetic
//! planted-evidence world that implements all of them deterministically.
//!
//! Frame subsets passed to oracles are positions in the example's frame grid
//! (candidate positions for training worlds, the 64-frame grid for mining).

mod adapters;
mod config;
mod planted;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CandidateSet, PromptEncoding, ScoreVector, TaskRecord};

#[cfg(feature = "http")]
pub use adapters::HttpQaOracle;
pub use adapters::{LatencyInjected, QA_ENDPOINT_ENV, QA_TIMEOUT_ENV};
pub use config::{AgentSpec, BackendConfig, VerifierSpec};
pub use planted::{
    EvidenceLayout, EvidenceSizes, PlantedAgent, PlantedConfig, PlantedExample, PlantedQa, PlantedWorld, UNSURE_ANSWER,
    WRONG_ANSWER,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// The request violated the backend's input contract.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("unknown example {0}")]
    UnknownExample(u64),

    #[error("unknown video `{0}`")]
    UnknownVideo(String),

    #[error("transport failure: {message}")]
    Transport {
        message: String,
        retry_after_ms: Option<u64>,
    },

    #[error("rate limited; retry after {retry_after_ms} ms")]
    RateLimited { retry_after_ms: u64 },

    /// The service answered, but not in the agreed format.
    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("no backend configured for {0}")]
    Unavailable(&'static str),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. } | BackendError::RateLimited { .. })
    }

    pub fn retry_after(&self) -> Option<Duration> {
        match self {
            BackendError::Transport { retry_after_ms, .. } => retry_after_ms.map(Duration::from_millis),
            BackendError::RateLimited { retry_after_ms } => Some(Duration::from_millis(*retry_after_ms)),
            _ => None,
        }
    }
}

pub type BackendResult<T> = std::result::Result<T, BackendError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub duration_s: f64,
    pub total_frames: u64,
}

pub trait VisualEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn probe(&self, video: &str) -> BackendResult<VideoInfo>;
    /// Uniformly pre-samples `n_frames` frames and embeds them.
    fn encode_video(&self, video: &str, n_frames: usize) -> BackendResult<CandidateSet>;
}

pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn encode(&self, text: &str) -> BackendResult<PromptEncoding>;
}

pub trait SimilarityTeacher: Send + Sync {
    fn score(&self, frame_embedding: &[f64], prompt: &PromptEncoding) -> BackendResult<f64>;

    fn score_all(&self, frames: &CandidateSet, prompt: &PromptEncoding) -> BackendResult<ScoreVector> {
        let emb = frames.embeddings();
        let scores = (0..frames.len())
            .map(|i| self.score(emb.row(i), prompt))
            .collect::<BackendResult<Vec<f64>>>()?;
        ScoreVector::new(scores).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

pub trait TaskLossOracle: Send + Sync {
    /// Downstream loss when the model sees only `subset` (ascending positions).
    fn task_loss(&self, record: &TaskRecord, subset: &[usize]) -> BackendResult<f64>;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRequest {
    pub id: u64,
    pub video: String,
    pub question: String,
    /// Ascending frame positions the model may look at.
    pub frames: Vec<usize>,
}

pub trait QaOracle: Send + Sync {
    fn name(&self) -> &str;
    fn answer(&self, request: &QaRequest) -> BackendResult<String>;
    /// Maximum number of concurrent calls the service tolerates.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Initial,
    DeepDive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub id: u64,
    pub video: String,
    pub question: String,
    pub stage: PromptStage,
    pub prompt: String,
    /// Grid indices of the frames attached to this request.
    pub frames: Vec<usize>,
    /// Grid indices shown in earlier requests for the same instance.
    pub previously_shown: Vec<usize>,
}

pub trait AgentBackend: Send + Sync {
    /// Raw model text; parsing and schema checks happen in the pipeline.
    fn respond(&self, request: &AgentRequest) -> BackendResult<String>;
}

/// One implementation per role. Members are shared handles so a suite can be
/// cloned into worker threads.
#[derive(Clone)]
pub struct BackendSuite {
    pub visual_encoder: Option<Arc<dyn VisualEncoder>>,
    pub text_encoder: Option<Arc<dyn TextEncoder>>,
    pub similarity_teacher: Option<Arc<dyn SimilarityTeacher>>,
    pub task_loss_oracle: Option<Arc<dyn TaskLossOracle>>,
    pub qa_oracle: Option<Arc<dyn QaOracle>>,
    pub agent: Option<Arc<dyn AgentBackend>>,
    pub verifiers: Vec<Arc<dyn QaOracle>>,
    /// Present when the suite is backed by a synthetic world.
    pub world: Option<Arc<PlantedWorld>>,
}

impl BackendSuite {
    pub fn empty() -> Self {
        Self {
            visual_encoder: None,
            text_encoder: None,
            similarity_teacher: None,
            task_loss_oracle: None,
            qa_oracle: None,
            agent: None,
            verifiers: Vec::new(),
            world: None,
        }
    }

    /// Every role served by `world`, with `n_verifiers` planted verifiers.
    pub fn planted(world: Arc<PlantedWorld>, n_verifiers: usize) -> Self {
        Self {
            visual_encoder: Some(world.clone()),
            text_encoder: Some(world.clone()),
            similarity_teacher: Some(world.clone()),
            task_loss_oracle: Some(world.clone()),
            qa_oracle: Some(Arc::new(PlantedQa::new(world.clone(), "qa"))),
            agent: Some(Arc::new(PlantedAgent::new(world.clone()))),
            verifiers: (0..n_verifiers)
                .map(|i| Arc::new(PlantedQa::new(world.clone(), format!("verifier-{i}"))) as Arc<dyn QaOracle>)
                .collect(),
            world: Some(world),
        }
    }

    pub fn visual_encoder(&self) -> BackendResult<&dyn VisualEncoder> {
        self.visual_encoder
            .as_deref()
            .ok_or(BackendError::Unavailable("visual encoder"))
    }

    pub fn text_encoder(&self) -> BackendResult<&dyn TextEncoder> {
        self.text_encoder
            .as_deref()
            .ok_or(BackendError::Unavailable("text encoder"))
    }

    pub fn similarity_teacher(&self) -> BackendResult<&dyn SimilarityTeacher> {
        self.similarity_teacher
            .as_deref()
            .ok_or(BackendError::Unavailable("similarity teacher"))
    }

    pub fn task_loss_oracle(&self) -> BackendResult<&dyn TaskLossOracle> {
        self.task_loss_oracle
            .as_deref()
            .ok_or(BackendError::Unavailable("task-loss oracle"))
    }

    pub fn qa_oracle(&self) -> BackendResult<&dyn QaOracle> {
        self.qa_oracle.as_deref().ok_or(BackendError::Unavailable("qa oracle"))
    }

    pub fn agent(&self) -> BackendResult<&dyn AgentBackend> {
        self.agent.as_deref().ok_or(BackendError::Unavailable("agent"))
    }
}

/// Derives an independent 64-bit seed from a base seed and a stream number.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    planted::mix(seed, stream)
}
