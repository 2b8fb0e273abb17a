//! Shared domain types: candidate frame sets, prompt encodings, score
//! vectors, frame-count distributions, selections, annotated records and
//! mining trajectories.
//!
//! Constructors validate their invariants; deserialisation goes through the
//! same constructors so an invalid file never yields a value.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Frames in the uniform grid used by keyframe mining and by
/// [`AnnotatedExample::keyframe_indices`].
pub const MINING_GRID: usize = 64;

/// A video's uniformly pre-sampled candidate frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CandidateSetRaw")]
pub struct CandidateSet {
    video_id: String,
    frame_embeddings: Matrix,
    frame_indices: Vec<u64>,
    timestamps_s: Vec<f64>,
    duration_s: f64,
}

#[derive(Deserialize)]
struct CandidateSetRaw {
    video_id: String,
    frame_embeddings: Matrix,
    frame_indices: Vec<u64>,
    timestamps_s: Vec<f64>,
    duration_s: f64,
}

impl TryFrom<CandidateSetRaw> for CandidateSet {
    type Error = Error;

    fn try_from(r: CandidateSetRaw) -> Result<Self> {
        CandidateSet::new(
            r.video_id,
            r.frame_embeddings,
            r.frame_indices,
            r.timestamps_s,
            r.duration_s,
        )
    }
}

impl CandidateSet {
    pub fn new(
        video_id: impl Into<String>,
        frame_embeddings: Matrix,
        frame_indices: Vec<u64>,
        timestamps_s: Vec<f64>,
        duration_s: f64,
    ) -> Result<Self> {
        let n = frame_embeddings.rows();
        if n == 0 {
            return Err(Error::validation("candidate set must contain at least one frame"));
        }
        if frame_indices.len() != n {
            return Err(Error::Dimension {
                context: "candidate frame indices",
                expected: n,
                actual: frame_indices.len(),
            });
        }
        if timestamps_s.len() != n {
            return Err(Error::Dimension {
                context: "candidate timestamps",
                expected: n,
                actual: timestamps_s.len(),
            });
        }
        if frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("frame indices must be strictly increasing"));
        }
        if !duration_s.is_finite() || duration_s < 0.0 {
            return Err(Error::validation("duration must be finite and non-negative"));
        }
        if timestamps_s
            .iter()
            .any(|&t| !t.is_finite() || t < 0.0 || t > duration_s)
        {
            return Err(Error::validation("timestamps must lie within [0, duration]"));
        }
        if !frame_embeddings.is_finite() {
            return Err(Error::NonFinite("frame embeddings".into()));
        }
        Ok(Self {
            video_id: video_id.into(),
            frame_embeddings,
            frame_indices,
            timestamps_s,
            duration_s,
        })
    }

    /// Candidate set for `n` frames spread uniformly over a video of
    /// `total_frames` frames at `fps`.
    pub fn uniform(video_id: impl Into<String>, frame_embeddings: Matrix, total_frames: u64, fps: f64) -> Result<Self> {
        let n = frame_embeddings.rows();
        let indices = uniform_grid(n, total_frames);
        let duration = total_frames.saturating_sub(1) as f64 / fps;
        let timestamps = indices.iter().map(|&i| i as f64 / fps).collect();
        Self::new(video_id, frame_embeddings, indices, timestamps, duration)
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn len(&self) -> usize {
        self.frame_embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embedding_width(&self) -> usize {
        self.frame_embeddings.cols()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.frame_embeddings
    }

    pub fn frame_indices(&self) -> &[u64] {
        &self.frame_indices
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps_s
    }

    pub fn duration(&self) -> f64 {
        self.duration_s
    }

    /// Same frames in a new order; indices and timestamps are replaced by a
    /// fresh uniform grid so the ascending invariant still holds.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        Self::new(
            self.video_id.clone(),
            self.frame_embeddings.gather_rows(order),
            self.frame_indices.clone(),
            self.timestamps_s.clone(),
            self.duration_s,
        )
    }
}

/// `n` indices spread evenly over `[0, total)`, strictly increasing when
/// `total >= n`.
pub fn uniform_grid(n: usize, total: u64) -> Vec<u64> {
    if n == 1 {
        return vec![0];
    }
    let last = total.saturating_sub(1).max(n as u64 - 1);
    (0..n)
        .map(|j| ((j as f64) * last as f64 / (n - 1) as f64).round() as u64)
        .collect()
}

/// Token-level encoding of a text prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PromptEncodingRaw")]
pub struct PromptEncoding {
    prompt_text: String,
    token_embeddings: Matrix,
    token_count: usize,
}

#[derive(Deserialize)]
struct PromptEncodingRaw {
    prompt_text: String,
    token_embeddings: Matrix,
    token_count: usize,
}

impl TryFrom<PromptEncodingRaw> for PromptEncoding {
    type Error = Error;

    fn try_from(r: PromptEncodingRaw) -> Result<Self> {
        if r.token_count != r.token_embeddings.rows() {
            return Err(Error::Dimension {
                context: "prompt token count",
                expected: r.token_embeddings.rows(),
                actual: r.token_count,
            });
        }
        PromptEncoding::new(r.prompt_text, r.token_embeddings)
    }
}

impl PromptEncoding {
    pub fn new(prompt_text: impl Into<String>, token_embeddings: Matrix) -> Result<Self> {
        if token_embeddings.rows() == 0 {
            return Err(Error::validation("prompt must contain at least one token"));
        }
        if !token_embeddings.is_finite() {
            return Err(Error::NonFinite("prompt token embeddings".into()));
        }
        Ok(Self {
            prompt_text: prompt_text.into(),
            token_count: token_embeddings.rows(),
            token_embeddings,
        })
    }

    pub fn text(&self) -> &str {
        &self.prompt_text
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.token_embeddings
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }

    pub fn embedding_width(&self) -> usize {
        self.token_embeddings.cols()
    }

    /// Mean token embedding.
    pub fn pooled(&self) -> Vec<f64> {
        let m = &self.token_embeddings;
        let mut out = vec![0.0; m.cols()];
        for r in 0..m.rows() {
            for (o, v) in out.iter_mut().zip(m.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= m.rows() as f64);
        out
    }
}

/// Per-frame scores, higher meaning more relevant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreVector(Vec<f64>);

impl TryFrom<Vec<f64>> for ScoreVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ScoreVector::new(v)
    }
}

impl From<ScoreVector> for Vec<f64> {
    fn from(s: ScoreVector) -> Self {
        s.0
    }
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("score vector".into()));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks the length against a candidate set size.
    pub fn expect_len(&self, n: usize) -> Result<()> {
        if self.0.len() != n {
            return Err(Error::Dimension {
                context: "score vector",
                expected: n,
                actual: self.0.len(),
            });
        }
        Ok(())
    }
}

/// Positions of the `k` highest scores, returned in ascending (temporal)
/// order. Equal scores prefer the lower position.
pub fn top_k_positions(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Categorical distribution over frame counts `k = 1..=k_max`; `probs[i]` is
/// the probability of `k = i + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KDistributionRaw")]
pub struct KDistribution {
    probs: Vec<f64>,
    k_max: usize,
}

#[derive(Deserialize)]
struct KDistributionRaw {
    probs: Vec<f64>,
    k_max: usize,
}

impl TryFrom<KDistributionRaw> for KDistribution {
    type Error = Error;

    fn try_from(r: KDistributionRaw) -> Result<Self> {
        if r.k_max != r.probs.len() {
            return Err(Error::Dimension {
                context: "k distribution",
                expected: r.k_max,
                actual: r.probs.len(),
            });
        }
        KDistribution::new(r.probs)
    }
}

pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;

impl KDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::validation("k distribution needs k_max >= 1"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation("probabilities must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(Error::validation(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self {
            k_max: probs.len(),
            probs,
        })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("k head logits".into()));
        }
        Self::new(crate::tensor::softmax(logits))
    }

    pub fn uniform(k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::validation("k distribution needs k_max >= 1"));
        }
        Self::new(vec![1.0 / k_max as f64; k_max])
    }

    pub fn one_hot(k: usize, k_max: usize) -> Result<Self> {
        if k == 0 || k > k_max {
            return Err(Error::validation(format!("k={k} outside [1, {k_max}]")));
        }
        let mut probs = vec![0.0; k_max];
        probs[k - 1] = 1.0;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Probability of selecting exactly `k` frames.
    pub fn prob(&self, k: usize) -> f64 {
        if k == 0 || k > self.k_max {
            0.0
        } else {
            self.probs[k - 1]
        }
    }

    pub fn expectation(&self) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum()
    }

    /// Most probable `k`; ties go to the smaller `k`.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best + 1
    }
}

/// Output of one selection: scores, count distribution, the chosen count and
/// the chosen candidate positions in temporal order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SelectionResultRaw")]
pub struct SelectionResult {
    scores: ScoreVector,
    k_distribution: KDistribution,
    chosen_k: usize,
    selected_indices: Vec<usize>,
}

#[derive(Deserialize)]
struct SelectionResultRaw {
    scores: ScoreVector,
    k_distribution: KDistribution,
    chosen_k: usize,
    selected_indices: Vec<usize>,
}

impl TryFrom<SelectionResultRaw> for SelectionResult {
    type Error = Error;

    fn try_from(r: SelectionResultRaw) -> Result<Self> {
        SelectionResult::new(r.scores, r.k_distribution, r.chosen_k, r.selected_indices)
    }
}

impl SelectionResult {
    /// Adaptive selection: `chosen_k` must lie in `1..=k_max`.
    pub fn new(
        scores: ScoreVector,
        k_distribution: KDistribution,
        chosen_k: usize,
        selected_indices: Vec<usize>,
    ) -> Result<Self> {
        if chosen_k < 1 || chosen_k > k_distribution.k_max() {
            return Err(Error::validation(format!(
                "chosen_k {chosen_k} outside [1, {}]",
                k_distribution.k_max()
            )));
        }
        Self::checked(scores, k_distribution, chosen_k, selected_indices)
    }

    /// Selection whose size was fixed by the caller rather than the count head.
    pub fn fixed(
        scores: ScoreVector,
        k_distribution: KDistribution,
        k: usize,
        selected_indices: Vec<usize>,
    ) -> Result<Self> {
        if k < 1 || k > scores.len() {
            return Err(Error::validation(format!("k {k} outside [1, {}]", scores.len())));
        }
        Self::checked(scores, k_distribution, k, selected_indices)
    }

    fn checked(
        scores: ScoreVector,
        k_distribution: KDistribution,
        chosen_k: usize,
        selected_indices: Vec<usize>,
    ) -> Result<Self> {
        if selected_indices.len() != chosen_k {
            return Err(Error::Dimension {
                context: "selected indices",
                expected: chosen_k,
                actual: selected_indices.len(),
            });
        }
        if selected_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation("selected indices must be strictly ascending"));
        }
        if selected_indices != top_k_positions(scores.as_slice(), chosen_k) {
            return Err(Error::validation(
                "selected indices are not the top-k positions by score",
            ));
        }
        Ok(Self {
            scores,
            k_distribution,
            chosen_k,
            selected_indices,
        })
    }

    pub fn scores(&self) -> &ScoreVector {
        &self.scores
    }

    pub fn k_distribution(&self) -> &KDistribution {
        &self.k_distribution
    }

    pub fn chosen_k(&self) -> usize {
        self.chosen_k
    }

    pub fn selected_indices(&self) -> &[usize] {
        &self.selected_indices
    }
}

/// One keyframe-annotated video question, with the JSON key names of the
/// released dataset. `keyframe_indices` is an optional extension holding the
/// annotated positions in the 64-frame mining grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedExample {
    pub id: u64,
    pub question: String,
    pub ground_truth_answer: String,
    pub video: String,
    pub keyframes_dir: String,
    pub duration: f64,
    pub num_selected_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyframe_indices: Option<Vec<usize>>,
}

impl AnnotatedExample {
    /// Every violated invariant, in a fixed order. Empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut reasons = Vec::new();
        if self.num_selected_frames < 1 {
            reasons.push("num_selected_frames must be at least 1".to_string());
        }
        if !self.duration.is_finite() || self.duration < 0.0 {
            reasons.push("duration must be finite and non-negative".to_string());
        }
        if let Some(idx) = &self.keyframe_indices {
            if idx.len() != self.num_selected_frames {
                reasons.push(format!(
                    "{} keyframe indices listed but num_selected_frames is {}",
                    idx.len(),
                    self.num_selected_frames
                ));
            }
            if let Some(bad) = idx.iter().find(|&&i| i >= MINING_GRID) {
                reasons.push(format!("keyframe index {bad} outside [0, {}]", MINING_GRID - 1));
            }
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != idx.len() {
                reasons.push("keyframe indices contain duplicates".to_string());
            }
        }
        reasons
    }

    pub fn validate(&self) -> bool {
        self.violations().is_empty()
    }

    /// Annotated keyframes mapped from the 64-frame grid onto an `n`-frame
    /// candidate grid (nearest candidate in time, deduplicated, ascending).
    pub fn candidate_positions(&self, n: usize) -> Option<Vec<usize>> {
        self.keyframe_indices.as_ref().map(|idx| {
            let mut out: Vec<usize> = idx.iter().map(|&g| grid_to_candidate(g, n)).collect();
            out.sort_unstable();
            out.dedup();
            out
        })
    }
}

/// Nearest position on an `n`-frame uniform grid to index `g` of the 64-frame
/// mining grid.
pub fn grid_to_candidate(g: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let pos = g as f64 * (n - 1) as f64 / (MINING_GRID - 1) as f64;
    (pos.round() as usize).min(n - 1)
}

/// Inverse of [`grid_to_candidate`] for `n <= 64`.
pub fn candidate_to_grid(j: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    (j as f64 * (MINING_GRID - 1) as f64 / (n - 1) as f64).round() as usize
}

/// Inputs a task-loss or QA oracle needs to identify one question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub video: String,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    High,
    Medium,
    Low,
}

impl std::str::FromStr for Confidence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(Confidence::High),
            "medium" => Ok(Confidence::Medium),
            "low" => Ok(Confidence::Low),
            other => Err(Error::AgentResponse(format!("unknown confidence `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    AnswerMismatch,
    Insufficient,
}

/// What the mining agent said about one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub caption: String,
    pub relevance: u8,
    pub iteration_seen: usize,
}

/// Everything one keyframe-mining run observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningTrajectory {
    pub visited: BTreeMap<usize, FrameRecord>,
    pub confidence_history: Vec<Confidence>,
    pub answer_history: Vec<String>,
    pub final_answer: String,
    pub verdict: Verdict,
}

impl MiningTrajectory {
    pub fn violations(&self) -> Vec<String> {
        let mut reasons = Vec::new();
        for (&idx, rec) in &self.visited {
            if idx >= MINING_GRID {
                reasons.push(format!("visited index {idx} outside the mining grid"));
            }
            if !(1..=5).contains(&rec.relevance) {
                reasons.push(format!("relevance {} at frame {idx} outside 1..5", rec.relevance));
            }
        }
        if self.confidence_history.is_empty() {
            reasons.push("histories must be non-empty".into());
        }
        if self.confidence_history.len() != self.answer_history.len() {
            reasons.push("confidence and answer histories differ in length".into());
        }
        reasons
    }

    pub fn relevance(&self, idx: usize) -> Option<u8> {
        self.visited.get(&idx).map(|r| r.relevance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn appendix_record() -> AnnotatedExample {
        AnnotatedExample {
            id: 30,
            question: "What folding technique is demonstrated first in the video?".into(),
            ground_truth_answer: "The 'SHIKAKU NO GI' (Square Fold) technique is demonstrated first.".into(),
            video: "/srv/nfs/video_data/video/ytb_8yhoV5C3bT8.mp4".into(),
            keyframes_dir: "/srv/nfs/video_data/extracted_frames/ytb_8yhoV5C3bT8".into(),
            duration: 126.893,
            num_selected_frames: 8,
            keyframe_indices: None,
        }
    }

    #[test]
    fn published_record_is_valid() {
        assert!(appendix_record().validate());
    }

    #[test]
    fn zero_frames_is_invalid() {
        let mut r = appendix_record();
        r.num_selected_frames = 0;
        assert!(!r.validate());
        assert_eq!(r.violations().len(), 1);
    }

    #[test]
    fn index_count_mismatch_is_invalid() {
        let mut r = appendix_record();
        r.keyframe_indices = Some(vec![0, 5, 9, 20, 31, 40, 63]);
        assert!(!r.validate());
        assert!(r.violations()[0].contains("7 keyframe indices"));
    }

    #[test]
    fn out_of_grid_index_is_invalid() {
        let mut r = appendix_record();
        r.num_selected_frames = 2;
        r.keyframe_indices = Some(vec![3, 64]);
        assert!(!r.validate());
    }

    #[test]
    fn candidate_set_rejects_unsorted_indices() {
        let emb = Matrix::zeros(2, 3);
        assert!(CandidateSet::new("v", emb.clone(), vec![4, 2], vec![0.0, 0.1], 1.0).is_err());
        assert!(CandidateSet::new("v", emb, vec![2, 4], vec![0.0, 0.1], 1.0).is_ok());
        assert!(CandidateSet::new("v", Matrix::zeros(0, 3), vec![], vec![], 1.0).is_err());
    }

    #[test]
    fn candidate_set_rejects_non_finite_rows() {
        let mut emb = Matrix::zeros(1, 2);
        emb.set(0, 1, f64::NAN);
        assert!(CandidateSet::new("v", emb, vec![0], vec![0.0], 1.0).is_err());
    }

    #[test]
    fn candidate_set_deserialisation_validates() {
        let json = r#"{"video_id":"v","frame_embeddings":{"rows":1,"cols":1,"data":[0.0]},
            "frame_indices":[0],"timestamps_s":[5.0],"duration_s":1.0}"#;
        assert!(serde_json::from_str::<CandidateSet>(json).is_err());
    }

    #[test]
    fn top_k_breaks_ties_towards_earlier_frames() {
        assert_eq!(top_k_positions(&[0.0; 6], 3), vec![0, 1, 2]);
        assert_eq!(top_k_positions(&[0.1, 0.9, 0.5, 0.9], 2), vec![1, 3]);
        assert_eq!(top_k_positions(&[3.0, 1.0, 2.0], 1), vec![0]);
    }

    #[test]
    fn selection_rejects_unsorted_indices() {
        let scores = ScoreVector::new(vec![0.1, 0.9, 0.8]).unwrap();
        let dist = KDistribution::uniform(3).unwrap();
        assert!(SelectionResult::new(scores.clone(), dist.clone(), 2, vec![2, 1]).is_err());
        assert!(SelectionResult::new(scores.clone(), dist.clone(), 2, vec![0, 1]).is_err());
        assert!(SelectionResult::new(scores, dist, 2, vec![1, 2]).is_ok());
    }

    #[test]
    fn k_distribution_checks_normalisation() {
        assert!(KDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(KDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(KDistribution::new(vec![1.5, -0.5]).is_err());
        let d = KDistribution::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert_eq!(d.expectation(), 2.5);
        assert_eq!(d.argmax(), 1);
    }

    #[test]
    fn grid_mapping_round_trips_for_small_grids() {
        for n in [1usize, 8, 16, 32, 64] {
            for j in 0..n {
                assert_eq!(grid_to_candidate(candidate_to_grid(j, n), n), j);
            }
        }
    }

    #[test]
    fn confidence_parses_case_insensitively() {
        assert_eq!("High".parse::<Confidence>().unwrap(), Confidence::High);
        assert!("certain".parse::<Confidence>().is_err());
    }
}
