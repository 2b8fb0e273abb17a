//! Synthetic planted-evidence world.
//!
//! Each example owns a unit-norm question vector `q` in a latent space. Its
//! evidence frames are unit vectors at a cosine of at least 0.8 to `q`; all
//! other frames are uniformly random directions. Prompt tokens are noisy
//! copies of `q`, so cosine similarity against the pooled prompt behaves like
//! a contrastive image-text teacher.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    AgentBackend, AgentRequest, BackendError, BackendResult, PromptStage, QaOracle, QaRequest, SimilarityTeacher,
    TaskLossOracle, TextEncoder, VideoInfo, VisualEncoder,
};
use crate::error::{Error, Result};
use crate::tensor::{cosine, norm, Matrix};
use crate::types::{candidate_to_grid, AnnotatedExample, CandidateSet, PromptEncoding, TaskRecord, MINING_GRID};

/// What the planted QA oracle says when the frames do not cover the evidence.
pub const UNSURE_ANSWER: &str = "cannot tell from these frames";
/// What a sabotaged agent or verifier answers.
pub const WRONG_ANSWER: &str = "something else entirely";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvidenceSizes {
    Uniform {
        min: usize,
        max: usize,
    },
    /// Log-normal around `median`, rounded and clipped to `[1, max]`.
    Skewed {
        median: f64,
        sigma: f64,
        max: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceLayout {
    #[default]
    Scattered,
    /// One contiguous run, like a single event in a video.
    Contiguous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub seed: u64,
    pub n_examples: usize,
    /// Frames per example (the grid every subset refers to).
    pub n_frames: usize,
    pub latent_dim: usize,
    pub n_tokens: usize,
    pub evidence: EvidenceSizes,
    pub layout: EvidenceLayout,
    /// Range of the cosine between evidence frames and the question vector.
    pub evidence_cos: [f64; 2],
    pub token_noise: f64,
    pub teacher_noise: f64,
    /// Per-frame cost in the task loss; zero makes the loss purely additive.
    pub cost_eps: f64,
    pub fps: f64,
    pub duration_range: [f64; 2],
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_examples: 500,
            n_frames: 16,
            latent_dim: 32,
            n_tokens: 6,
            evidence: EvidenceSizes::Uniform { min: 2, max: 8 },
            layout: EvidenceLayout::Scattered,
            evidence_cos: [0.8, 0.95],
            token_noise: 0.5,
            teacher_noise: 0.02,
            cost_eps: 0.001,
            fps: 25.0,
            duration_range: [30.0, 600.0],
        }
    }
}

impl PlantedConfig {
    /// A 64-frame world with contiguous events, used for keyframe mining.
    pub fn mining(seed: u64, n_examples: usize) -> Self {
        Self {
            seed,
            n_examples,
            n_frames: MINING_GRID,
            layout: EvidenceLayout::Contiguous,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames == 0 || self.latent_dim < 2 || self.n_tokens == 0 {
            return Err(Error::config(
                "world needs frames, a latent width of at least 2 and tokens",
            ));
        }
        match self.evidence {
            EvidenceSizes::Uniform { min, max } => {
                if min < 1 || min > max || max > self.n_frames {
                    return Err(Error::config(format!(
                        "evidence sizes {min}..={max} must lie within 1..={}",
                        self.n_frames
                    )));
                }
            }
            EvidenceSizes::Skewed { median, sigma, max } => {
                if !(median >= 1.0) || !(sigma > 0.0) || max < 1 || max > self.n_frames {
                    return Err(Error::config(
                        "skewed evidence sizes need median >= 1, sigma > 0, 1 <= max <= N",
                    ));
                }
            }
        }
        let [lo, hi] = self.evidence_cos;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("evidence cosine range must satisfy 0 < lo <= hi <= 1"));
        }
        let [dlo, dhi] = self.duration_range;
        if !(0.0 < dlo && dlo <= dhi) || !(self.fps > 0.0) {
            return Err(Error::config("duration range and fps must be positive"));
        }
        if self.cost_eps < 0.0 || self.teacher_noise < 0.0 || self.token_noise < 0.0 {
            return Err(Error::config("noise scales and cost must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedExample {
    pub id: u64,
    pub video: String,
    pub question: String,
    pub answer: String,
    pub duration_s: f64,
    /// Ascending evidence positions.
    pub evidence: Vec<usize>,
    pub query: Vec<f64>,
    pub frames: Matrix,
    pub tokens: Matrix,
}

impl PlantedExample {
    pub fn is_evidence(&self, pos: usize) -> bool {
        self.evidence.binary_search(&pos).is_ok()
    }

    /// Distance from `pos` to the closest evidence frame.
    pub fn distance_to_evidence(&self, pos: usize) -> usize {
        self.evidence
            .iter()
            .map(|&e| e.abs_diff(pos))
            .min()
            .unwrap_or(usize::MAX)
    }
}

#[derive(Debug)]
pub struct PlantedWorld {
    config: PlantedConfig,
    examples: Vec<PlantedExample>,
    by_video: HashMap<String, usize>,
    by_question: HashMap<String, usize>,
}

/// SplitMix64 finalizer, used to derive independent streams and hash noise.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash to a uniform value in `[0, 1)`.
pub(crate) fn unit_hash(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector orthogonal to the unit vector `q`.
fn random_orthogonal(rng: &mut ChaCha8Rng, q: &[f64]) -> Vec<f64> {
    loop {
        let mut v = random_unit(rng, q.len());
        let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

const ADJECTIVES: [&str; 8] = ["red", "small", "wooden", "striped", "folded", "bright", "round", "old"];
const NOUNS: [&str; 8] = [
    "kettle",
    "boat",
    "lantern",
    "paper crane",
    "bicycle",
    "clock",
    "guitar",
    "umbrella",
];

impl PlantedWorld {
    pub fn generate(config: PlantedConfig) -> Result<Self> {
        config.validate()?;
        let examples: Vec<PlantedExample> = (0..config.n_examples as u64)
            .map(|id| generate_example(&config, id))
            .collect();
        let by_video = examples.iter().enumerate().map(|(i, e)| (e.video.clone(), i)).collect();
        let by_question = examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.question.clone(), i))
            .collect();
        Ok(Self {
            config,
            examples,
            by_video,
            by_question,
        })
    }

    pub fn config(&self) -> &PlantedConfig {
        &self.config
    }

    pub fn examples(&self) -> &[PlantedExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn example(&self, id: u64) -> BackendResult<&PlantedExample> {
        usize::try_from(id)
            .ok()
            .and_then(|i| self.examples.get(i))
            .ok_or(BackendError::UnknownExample(id))
    }

    pub fn example_for_video(&self, video: &str) -> BackendResult<&PlantedExample> {
        self.by_video
            .get(video)
            .map(|&i| &self.examples[i])
            .ok_or_else(|| BackendError::UnknownVideo(video.to_string()))
    }

    pub fn candidate_set(&self, id: u64) -> BackendResult<CandidateSet> {
        let ex = self.example(id)?;
        self.encode_video(&ex.video, self.config.n_frames)
    }

    pub fn prompt(&self, id: u64) -> BackendResult<PromptEncoding> {
        let ex = self.example(id)?;
        PromptEncoding::new(ex.question.clone(), ex.tokens.clone()).map_err(|e| BackendError::Protocol(e.to_string()))
    }

    pub fn task_record(&self, id: u64) -> BackendResult<TaskRecord> {
        let ex = self.example(id)?;
        Ok(TaskRecord {
            id,
            video: ex.video.clone(),
            question: ex.question.clone(),
            answer: ex.answer.clone(),
        })
    }

    /// Ground-truth annotation with the evidence as keyframes on the 64-frame grid.
    pub fn annotation(&self, id: u64) -> BackendResult<AnnotatedExample> {
        let ex = self.example(id)?;
        let n = self.config.n_frames;
        let indices: Vec<usize> = ex.evidence.iter().map(|&p| candidate_to_grid(p, n)).collect();
        Ok(AnnotatedExample {
            id,
            question: ex.question.clone(),
            ground_truth_answer: ex.answer.clone(),
            video: ex.video.clone(),
            keyframes_dir: format!("{}/keyframes", ex.video),
            duration: ex.duration_s,
            num_selected_frames: indices.len(),
            keyframe_indices: Some(indices),
        })
    }

    fn total_frames(&self, ex: &PlantedExample) -> u64 {
        (ex.duration_s * self.config.fps).round() as u64 + 1
    }

    fn check_subset(&self, subset: &[usize]) -> BackendResult<()> {
        if let Some(&bad) = subset.iter().find(|&&p| p >= self.config.n_frames) {
            return Err(BackendError::Precondition(format!(
                "frame position {bad} outside a {}-frame grid",
                self.config.n_frames
            )));
        }
        Ok(())
    }
}

fn generate_example(cfg: &PlantedConfig, id: u64) -> PlantedExample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, id));
    let n = cfg.n_frames;
    let dim = cfg.latent_dim;
    let size = match cfg.evidence {
        EvidenceSizes::Uniform { min, max } => rng.random_range(min..=max),
        EvidenceSizes::Skewed { median, sigma, max } => {
            let d = LogNormal::new(median.ln(), sigma).expect("validated parameters");
            (d.sample(&mut rng).round() as usize).clamp(1, max)
        }
    };
    let mut evidence: Vec<usize> = match cfg.layout {
        EvidenceLayout::Scattered => sample(&mut rng, n, size).into_vec(),
        EvidenceLayout::Contiguous => {
            let start = rng.random_range(0..=n - size);
            (start..start + size).collect()
        }
    };
    evidence.sort_unstable();

    let query = random_unit(&mut rng, dim);
    let mut frames = Matrix::zeros(n, dim);
    for pos in 0..n {
        let row = if evidence.binary_search(&pos).is_ok() {
            let c = rng.random_range(cfg.evidence_cos[0]..=cfg.evidence_cos[1]);
            let u = random_orthogonal(&mut rng, &query);
            let s = (1.0 - c * c).max(0.0).sqrt();
            query.iter().zip(&u).map(|(q, u)| c * q + s * u).collect()
        } else {
            random_unit(&mut rng, dim)
        };
        frames.row_mut(pos).copy_from_slice(&row);
    }

    let mut tokens = Matrix::zeros(cfg.n_tokens, dim);
    for t in 0..cfg.n_tokens {
        let noise = random_unit(&mut rng, dim);
        let v: Vec<f64> = query.iter().zip(&noise).map(|(q, e)| q + cfg.token_noise * e).collect();
        let nv = norm(&v).max(1e-12);
        tokens.row_mut(t).iter_mut().zip(&v).for_each(|(o, x)| *o = x / nv);
    }

    let [dlo, dhi] = cfg.duration_range;
    let duration_s = (rng.random_range(dlo..=dhi) * 1000.0).round() / 1000.0;
    let answer = format!(
        "the {} {}",
        ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
        NOUNS[rng.random_range(0..NOUNS.len())]
    );
    PlantedExample {
        id,
        video: format!("planted://{}/{}", cfg.seed, id),
        question: format!("What object is shown during event {id}?"),
        answer,
        duration_s,
        evidence,
        query,
        frames,
        tokens,
    }
}

impl VisualEncoder for PlantedWorld {
    fn width(&self) -> usize {
        self.config.latent_dim
    }

    fn probe(&self, video: &str) -> BackendResult<VideoInfo> {
        let ex = self.example_for_video(video)?;
        Ok(VideoInfo {
            duration_s: ex.duration_s,
            total_frames: self.total_frames(ex),
        })
    }

    fn encode_video(&self, video: &str, n_frames: usize) -> BackendResult<CandidateSet> {
        let ex = self.example_for_video(video)?;
        if n_frames != self.config.n_frames {
            return Err(BackendError::Precondition(format!(
                "planted videos are pre-sampled at {} frames, {n_frames} requested",
                self.config.n_frames
            )));
        }
        CandidateSet::uniform(
            ex.video.clone(),
            ex.frames.clone(),
            self.total_frames(ex),
            self.config.fps,
        )
        .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

/// Deterministic hashing text encoder: one token per whitespace-separated
/// word, each mapped to a pseudo-random unit vector.
pub(crate) fn hash_tokens(text: &str, dim: usize) -> BackendResult<Matrix> {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return Err(BackendError::Precondition("prompt text is empty".into()));
    }
    let mut m = Matrix::zeros(words.len(), dim);
    for (i, w) in words.iter().enumerate() {
        let h = w.to_lowercase().bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01B3)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        m.row_mut(i).copy_from_slice(&random_unit(&mut rng, dim));
    }
    Ok(m)
}

impl TextEncoder for PlantedWorld {
    fn width(&self) -> usize {
        self.config.latent_dim
    }

    fn encode(&self, text: &str) -> BackendResult<PromptEncoding> {
        let tokens = match self.by_question.get(text) {
            Some(&i) => self.examples[i].tokens.clone(),
            None => hash_tokens(text, self.config.latent_dim)?,
        };
        PromptEncoding::new(text, tokens).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

impl SimilarityTeacher for PlantedWorld {
    fn score(&self, frame_embedding: &[f64], prompt: &PromptEncoding) -> BackendResult<f64> {
        let pooled = prompt.pooled();
        if frame_embedding.len() != pooled.len() {
            return Err(BackendError::Precondition(format!(
                "frame width {} does not match prompt width {}",
                frame_embedding.len(),
                pooled.len()
            )));
        }
        let h = frame_embedding
            .iter()
            .chain(&pooled)
            .fold(self.config.seed, |h, v| mix(h, v.to_bits()));
        let noise = self.config.teacher_noise * (2.0 * unit_hash(h) - 1.0);
        Ok(cosine(frame_embedding, &pooled) + noise)
    }
}

impl TaskLossOracle for PlantedWorld {
    /// `|E \ subset| + eps * |subset|`.
    fn task_loss(&self, record: &TaskRecord, subset: &[usize]) -> BackendResult<f64> {
        let ex = self.example(record.id)?;
        self.check_subset(subset)?;
        let seen: BTreeSet<usize> = subset.iter().copied().collect();
        let missing = ex.evidence.iter().filter(|e| !seen.contains(e)).count();
        Ok(missing as f64 + self.config.cost_eps * seen.len() as f64)
    }
}

/// QA oracle that answers correctly exactly when every evidence frame is
/// among the frames it is shown.
#[derive(Debug, Clone)]
pub struct PlantedQa {
    world: Arc<PlantedWorld>,
    name: String,
    wrong_ids: BTreeSet<u64>,
}

impl PlantedQa {
    pub fn new(world: Arc<PlantedWorld>, name: impl Into<String>) -> Self {
        Self {
            world,
            name: name.into(),
            wrong_ids: BTreeSet::new(),
        }
    }

    /// Always answers wrongly on the given examples.
    pub fn with_wrong_ids(mut self, ids: impl IntoIterator<Item = u64>) -> Self {
        self.wrong_ids.extend(ids);
        self
    }
}

impl QaOracle for PlantedQa {
    fn name(&self) -> &str {
        &self.name
    }

    fn answer(&self, request: &QaRequest) -> BackendResult<String> {
        if request.frames.is_empty() {
            return Err(BackendError::Precondition("no frames supplied".into()));
        }
        let ex = self.world.example(request.id)?;
        self.world.check_subset(&request.frames)?;
        if self.wrong_ids.contains(&request.id) {
            return Ok(WRONG_ANSWER.into());
        }
        let covered = ex.evidence.iter().all(|e| request.frames.contains(e));
        Ok(if covered {
            ex.answer.clone()
        } else {
            UNSURE_ANSWER.into()
        })
    }
}

/// Mining agent over a planted world.
///
/// Relevance is 5 on evidence frames and falls from 3 to 1 with temporal
/// distance from the nearest evidence frame over a window of `N / 2` frames.
/// With probability `flip_prob` a frame's first reported score is wrong
/// (5 reads 3, 1 reads 2, 2 and 3 read 1); the true value is
/// restored through `revised_prev_scores` on later requests, and confidence
/// stays medium while such a score is outstanding.
#[derive(Debug, Clone)]
pub struct PlantedAgent {
    world: Arc<PlantedWorld>,
    flip_prob: f64,
    wrong_ids: BTreeSet<u64>,
}

impl PlantedAgent {
    pub const DEFAULT_FLIP_PROB: f64 = 0.1;

    pub fn new(world: Arc<PlantedWorld>) -> Self {
        Self {
            world,
            flip_prob: Self::DEFAULT_FLIP_PROB,
            wrong_ids: BTreeSet::new(),
        }
    }

    pub fn with_flip_prob(mut self, p: f64) -> Self {
        self.flip_prob = p;
        self
    }

    pub fn with_wrong_ids(mut self, ids: impl IntoIterator<Item = u64>) -> Self {
        self.wrong_ids.extend(ids);
        self
    }

    /// Noise-free relevance of grid position `pos`.
    pub fn base_relevance(&self, ex: &PlantedExample, pos: usize) -> u8 {
        if ex.is_evidence(pos) {
            return 5;
        }
        let window = (self.world.config.n_frames / 2).max(1) as f64;
        let prox = (1.0 - ex.distance_to_evidence(pos) as f64 / window).max(0.0);
        (1 + (3.0 * prox).floor() as u8).min(3)
    }

    fn flipped(&self, ex: &PlantedExample, pos: usize) -> bool {
        let h = mix(mix(self.world.config.seed ^ 0xF11F, ex.id), pos as u64);
        unit_hash(h) < self.flip_prob
    }

    fn first_view(&self, ex: &PlantedExample, pos: usize) -> u8 {
        let base = self.base_relevance(ex, pos);
        match (self.flipped(ex, pos), base) {
            (false, b) => b,
            (true, 5) => 3,
            (true, 1) => 2,
            (true, _) => 1,
        }
    }
}

impl AgentBackend for PlantedAgent {
    fn respond(&self, request: &AgentRequest) -> BackendResult<String> {
        let ex = self.world.example(request.id)?;
        self.world.check_subset(&request.frames)?;
        self.world.check_subset(&request.previously_shown)?;
        let analysis: Vec<_> = request
            .frames
            .iter()
            .map(|&pos| {
                let caption = if ex.is_evidence(pos) {
                    format!("{} clearly visible", ex.answer)
                } else {
                    "unrelated background activity".to_string()
                };
                json!({"index": pos, "caption": caption, "relevance": self.first_view(ex, pos)})
            })
            .collect();
        let revised: Vec<_> = request
            .previously_shown
            .iter()
            .filter(|&&pos| self.flipped(ex, pos))
            .map(|&pos| json!({"index": pos, "relevance": self.base_relevance(ex, pos)}))
            .collect();

        let seen: BTreeSet<usize> = request
            .frames
            .iter()
            .chain(&request.previously_shown)
            .copied()
            .collect();
        let n_seen = ex.evidence.iter().filter(|e| seen.contains(e)).count();
        let pending = request.frames.iter().any(|&p| self.flipped(ex, p));
        let confident = n_seen == ex.evidence.len() && !pending;
        let answer = if self.wrong_ids.contains(&ex.id) {
            WRONG_ANSWER.to_string()
        } else if n_seen >= ex.evidence.len().div_ceil(2) {
            ex.answer.clone()
        } else {
            UNSURE_ANSWER.to_string()
        };
        let confidence = if confident { "high" } else { "medium" };
        let reasoning = format!("{n_seen} of the frames seen so far show the event");
        let body = match request.stage {
            PromptStage::Initial => json!({
                "frame_analysis": analysis,
                "confidence": confidence,
                "answer_attempt": answer,
                "reasoning": reasoning,
            }),
            PromptStage::DeepDive => json!({
                "new_frame_analysis": analysis,
                "revised_prev_scores": revised,
                "confidence": confidence,
                "answer_attempt": answer,
                "reasoning": reasoning,
            }),
        };
        Ok(body.to_string())
    }
}
