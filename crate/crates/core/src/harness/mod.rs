//! User-facing operations on a trained selector: adaptive and fixed-size
//! selection, evaluation against a QA oracle, token accounting, dataset
//! statistics and file formats.

pub mod io;
pub mod stats;

pub use io::{
    parse_dataset, read_dataset, read_embeddings, write_dataset_json, write_dataset_jsonl, write_embeddings,
    EmbeddingDtype, EMBEDDING_HEADER_LEN, EMBEDDING_MAGIC,
};
pub use stats::{dataset_stats, write_histograms, DatasetStats, Histogram, Summary};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::answers::AnswerMatcher;
use crate::backends::{BackendSuite, QaOracle, QaRequest};
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::selector::{KDecode, SelectorParams};
use crate::trainer::TrainExample;
use crate::types::{top_k_positions, AnnotatedExample, CandidateSet, KDistribution, PromptEncoding, SelectionResult};

/// Visual tokens per frame for the reference backbone (11,644 tokens for 16 frames).
pub const DEFAULT_TOKENS_PER_FRAME: f64 = 727.75;

/// Frame count the count head asks for, capped at `k_max` and at `n`.
pub fn decode_k(dist: &KDistribution, decode: KDecode, n: usize) -> usize {
    let k = match decode {
        KDecode::Argmax => dist.argmax(),
        KDecode::Expectation => dist.expectation().round() as usize,
    };
    k.clamp(1, dist.k_max()).min(n)
}

/// Adaptive selection: the count head picks `k`, the rank head picks which
/// `k` frames. Selected positions come back in temporal order.
pub fn select(params: &SelectorParams, frames: &CandidateSet, prompt: &PromptEncoding) -> Result<SelectionResult> {
    if frames.is_empty() {
        return Err(Error::validation("candidate set is empty"));
    }
    let (scores, dist) = params.forward(frames, prompt)?;
    let k = decode_k(&dist, params.config().k_decode, frames.len());
    let selected = top_k_positions(scores.as_slice(), k);
    SelectionResult::new(scores, dist, k, selected)
}

/// Fixed-size selection from the rank head alone.
pub fn select_topk(
    params: &SelectorParams,
    frames: &CandidateSet,
    prompt: &PromptEncoding,
    k: usize,
) -> Result<SelectionResult> {
    if k < 1 || k > frames.len() {
        return Err(Error::validation(format!("k {k} outside [1, {}]", frames.len())));
    }
    let (scores, dist) = params.forward(frames, prompt)?;
    let selected = top_k_positions(scores.as_slice(), k);
    SelectionResult::fixed(scores, dist, k, selected)
}

pub fn estimate_visual_tokens(n_frames: f64, tokens_per_frame: f64) -> Result<f64> {
    if !(n_frames >= 0.0 && tokens_per_frame >= 0.0) || !n_frames.is_finite() || !tokens_per_frame.is_finite() {
        return Err(Error::validation(
            "frame count and token rate must be finite and non-negative",
        ));
    }
    Ok(n_frames * tokens_per_frame)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Adaptive,
    TopK(usize),
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Adaptive => write!(f, "adaptive"),
            EvalMode::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "adaptive" {
            return Ok(EvalMode::Adaptive);
        }
        s.strip_prefix("topk:")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(EvalMode::TopK)
            .ok_or_else(|| Error::validation(format!("unknown mode `{s}` (expected `adaptive` or `topk:K`)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub matcher: AnswerMatcher,
    pub tokens_per_frame: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::Adaptive,
            matcher: AnswerMatcher::Normalized,
            tokens_per_frame: DEFAULT_TOKENS_PER_FRAME,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleEval {
    pub id: u64,
    pub chosen_k: usize,
    pub selected: Vec<usize>,
    /// `None` when the QA oracle failed.
    pub correct: Option<bool>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    /// Annotated keyframe count on the candidate grid.
    pub true_k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub n_examples: usize,
    pub mean_chosen_k: f64,
    /// Share of correct answers among examples the oracle answered.
    pub accuracy: f64,
    pub backend_failures: usize,
    pub keyframe_recall: Option<f64>,
    pub keyframe_precision: Option<f64>,
    /// Mean `|chosen_k - true_k|` over annotated examples.
    pub mean_abs_k_error: Option<f64>,
    pub token_estimate_mean: f64,
    pub per_example: Vec<ExampleEval>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn eval_one(params: &SelectorParams, ex: &TrainExample, qa: &dyn QaOracle, opts: &EvalOptions) -> Result<ExampleEval> {
    let sel = match opts.mode {
        EvalMode::Adaptive => select(params, &ex.frames, &ex.prompt)?,
        EvalMode::TopK(k) => select_topk(params, &ex.frames, &ex.prompt, k)?,
    };
    let selected = sel.selected_indices().to_vec();
    let request = QaRequest {
        id: ex.record.id,
        video: ex.record.video.clone(),
        question: ex.record.question.clone(),
        frames: selected.clone(),
    };
    let correct = qa
        .answer(&request)
        .ok()
        .map(|a| opts.matcher.matches(&a, &ex.record.answer));
    let truth = ex
        .annotation
        .as_ref()
        .and_then(|a| a.candidate_positions(ex.frames.len()));
    let (recall, precision, true_k) = match &truth {
        Some(t) if !t.is_empty() => {
            let hit = selected.iter().filter(|s| t.contains(s)).count() as f64;
            (
                Some(hit / t.len() as f64),
                Some(hit / selected.len() as f64),
                Some(t.len()),
            )
        }
        _ => (None, None, None),
    };
    Ok(ExampleEval {
        id: ex.record.id,
        chosen_k: sel.chosen_k(),
        selected,
        correct,
        recall,
        precision,
        true_k,
    })
}

/// Selection plus QA on every example. Oracle failures are counted, not
/// fatal; selection errors (bad inputs) are.
pub fn evaluate(
    params: &SelectorParams,
    examples: &[TrainExample],
    qa: &dyn QaOracle,
    opts: &EvalOptions,
    exec: Exec,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    let mut per_example = exec
        .map(examples, |ex| eval_one(params, ex, qa, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    per_example.sort_by_key(|e| e.id);
    let mean_chosen_k = mean(per_example.iter().map(|e| e.chosen_k as f64)).unwrap_or(0.0);
    let answered: Vec<bool> = per_example.iter().filter_map(|e| e.correct).collect();
    let accuracy = mean(answered.iter().map(|&c| if c { 1.0 } else { 0.0 })).unwrap_or(0.0);
    Ok(EvalReport {
        mode: opts.mode,
        n_examples: per_example.len(),
        mean_chosen_k,
        accuracy,
        backend_failures: per_example.len() - answered.len(),
        keyframe_recall: mean(per_example.iter().filter_map(|e| e.recall)),
        keyframe_precision: mean(per_example.iter().filter_map(|e| e.precision)),
        mean_abs_k_error: mean(
            per_example
                .iter()
                .filter_map(|e| e.true_k.map(|t| (e.chosen_k as f64 - t as f64).abs())),
        ),
        token_estimate_mean: estimate_visual_tokens(mean_chosen_k, opts.tokens_per_frame)?,
        per_example,
    })
}

/// Model inputs for dataset records, built with the suite's encoders.
pub fn examples_from_dataset(
    records: &[AnnotatedExample],
    backends: &BackendSuite,
    n_frames: usize,
) -> Result<Vec<TrainExample>> {
    let visual = backends.visual_encoder()?;
    let text = backends.text_encoder()?;
    records
        .iter()
        .map(|r| {
            Ok(TrainExample {
                frames: visual.encode_video(&r.video, n_frames)?,
                prompt: text.encode(&r.question)?,
                record: crate::types::TaskRecord {
                    id: r.id,
                    video: r.video.clone(),
                    question: r.question.clone(),
                    answer: r.ground_truth_answer.clone(),
                },
                annotation: Some(r.clone()),
            })
        })
        .collect()
}
