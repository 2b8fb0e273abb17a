//! Keyframe dataset construction: agent-driven mining over a 64-frame grid
//! (Stage I), then relevance filtering and unanimous cross-model sufficiency
//! checks (Stage II).

pub mod explore;
pub mod prompts;

pub use explore::{
    choose_segment, deepen, dense_anchors, initial_probe, mine, should_stop, ExplorationState, MiningConfig,
    MiningOutcome, StopReason, INITIAL_ANCHORS,
};
pub use prompts::{format_indices, parse_agent_response, AgentResponse, FrameAnalysis, PromptTemplates, Revision};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::answers::AnswerMatcher;
use crate::backends::{BackendResult, BackendSuite, QaOracle, QaRequest};
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::types::{AnnotatedExample, MiningTrajectory, TaskRecord, Verdict};

/// Visited frames scored at least `lambda_rel`, ascending.
pub fn filter_keyframes(traj: &MiningTrajectory, lambda_rel: u8) -> Vec<usize> {
    traj.visited
        .iter()
        .filter(|(_, r)| r.relevance >= lambda_rel)
        .map(|(&i, _)| i)
        .collect()
}

fn with_retries<T>(retries: usize, mut call: impl FnMut() -> BackendResult<T>) -> BackendResult<T> {
    let mut attempt = 0;
    loop {
        match call() {
            Err(e) if e.is_retryable() && attempt < retries => {
                attempt += 1;
                if let Some(wait) = e.retry_after() {
                    std::thread::sleep(wait.min(Duration::from_secs(5)));
                }
            }
            other => return other,
        }
    }
}

/// True iff every verifier, shown only `keyframes`, answers `record.answer`.
/// Stops at the first wrong answer.
pub fn verify_sufficiency(
    record: &TaskRecord,
    keyframes: &[usize],
    verifiers: &[Arc<dyn QaOracle>],
    matcher: AnswerMatcher,
    retries: usize,
) -> Result<bool> {
    if verifiers.is_empty() {
        return Err(Error::config("sufficiency check needs at least one verifier"));
    }
    if keyframes.is_empty() {
        return Ok(false);
    }
    let request = QaRequest {
        id: record.id,
        video: record.video.clone(),
        question: record.question.clone(),
        frames: keyframes.to_vec(),
    };
    for v in verifiers {
        let answer = with_retries(retries, || v.answer(&request))?;
        if !matcher.matches(&answer, &record.answer) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    AnswerMismatch,
    Insufficient,
    VerificationFailed,
    MalformedResponse,
    BackendError,
}

impl DiscardReason {
    fn from_error(e: &Error) -> Self {
        match e {
            Error::AgentResponse(_) => DiscardReason::MalformedResponse,
            _ => DiscardReason::BackendError,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum InstanceOutcome {
    Retained { keyframes: Vec<usize> },
    Discarded { reason: DiscardReason, detail: String },
}

/// One line of the trajectory log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceLog {
    pub id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<MiningTrajectory>,
    pub outcome: InstanceOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBuild {
    pub examples: Vec<AnnotatedExample>,
    /// Every input instance, ordered by id.
    pub logs: Vec<InstanceLog>,
}

impl DatasetBuild {
    pub fn discard_counts(&self) -> BTreeMap<DiscardReason, usize> {
        let mut counts = BTreeMap::new();
        for log in &self.logs {
            if let InstanceOutcome::Discarded { reason, .. } = log.outcome {
                *counts.entry(reason).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn write_logs(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for log in &self.logs {
            out.push_str(&serde_json::to_string(log)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub n_instances: usize,
    pub n_retained: usize,
    pub discards: BTreeMap<DiscardReason, usize>,
}

impl From<&DatasetBuild> for MiningReport {
    fn from(build: &DatasetBuild) -> Self {
        Self {
            n_instances: build.logs.len(),
            n_retained: build.examples.len(),
            discards: build.discard_counts(),
        }
    }
}

fn discarded(
    id: u64,
    stop: Option<StopReason>,
    trajectory: Option<MiningTrajectory>,
    reason: DiscardReason,
    detail: impl Into<String>,
) -> InstanceLog {
    InstanceLog {
        id,
        stop,
        trajectory,
        outcome: InstanceOutcome::Discarded {
            reason,
            detail: detail.into(),
        },
    }
}

fn process(
    record: &TaskRecord,
    backends: &BackendSuite,
    templates: &PromptTemplates,
    cfg: &MiningConfig,
) -> (InstanceLog, Option<AnnotatedExample>) {
    let id = record.id;
    let duration = match backends
        .visual_encoder()
        .and_then(|enc| with_retries(cfg.retries, || enc.probe(&record.video)))
    {
        Ok(info) => info.duration_s,
        Err(e) => {
            return (
                discarded(id, None, None, DiscardReason::BackendError, e.to_string()),
                None,
            )
        }
    };
    let agent = match backends.agent() {
        Ok(a) => a,
        Err(e) => {
            return (
                discarded(id, None, None, DiscardReason::BackendError, e.to_string()),
                None,
            )
        }
    };
    let outcome = match mine(record, duration, agent, templates, cfg) {
        Ok(o) => o,
        Err(e) => {
            return (
                discarded(id, None, None, DiscardReason::from_error(&e), e.to_string()),
                None,
            )
        }
    };
    let MiningOutcome { mut trajectory, stop } = outcome;
    if trajectory.verdict == Verdict::AnswerMismatch {
        let detail = if stop == StopReason::BudgetExhausted {
            "budget_exhausted".to_string()
        } else {
            format!("final answer `{}`", trajectory.final_answer)
        };
        return (
            discarded(id, Some(stop), Some(trajectory), DiscardReason::AnswerMismatch, detail),
            None,
        );
    }
    let keyframes = filter_keyframes(&trajectory, cfg.lambda_rel);
    if keyframes.is_empty() {
        trajectory.verdict = Verdict::Insufficient;
        let detail = format!("no frame scored at least {}", cfg.lambda_rel);
        return (
            discarded(id, Some(stop), Some(trajectory), DiscardReason::Insufficient, detail),
            None,
        );
    }
    match verify_sufficiency(record, &keyframes, &backends.verifiers, cfg.matcher, cfg.retries) {
        Ok(true) => {}
        Ok(false) => {
            trajectory.verdict = Verdict::Insufficient;
            return (
                discarded(
                    id,
                    Some(stop),
                    Some(trajectory),
                    DiscardReason::VerificationFailed,
                    "a verifier disagreed",
                ),
                None,
            );
        }
        Err(e) => {
            return (
                discarded(
                    id,
                    Some(stop),
                    Some(trajectory),
                    DiscardReason::from_error(&e),
                    e.to_string(),
                ),
                None,
            )
        }
    }
    let example = AnnotatedExample {
        id,
        question: record.question.clone(),
        ground_truth_answer: record.answer.clone(),
        video: record.video.clone(),
        keyframes_dir: format!("{}/{}", cfg.keyframes_root, id),
        duration,
        num_selected_frames: keyframes.len(),
        keyframe_indices: Some(keyframes.clone()),
    };
    let log = InstanceLog {
        id,
        stop: Some(stop),
        trajectory: Some(trajectory),
        outcome: InstanceOutcome::Retained { keyframes },
    };
    (log, Some(example))
}

/// Mines and verifies every corpus instance. Per-instance failures become
/// discard records; only configuration problems abort the batch.
pub fn build_dataset(
    corpus: &[TaskRecord],
    backends: &BackendSuite,
    templates: &PromptTemplates,
    cfg: &MiningConfig,
    exec: Exec,
) -> Result<DatasetBuild> {
    if backends.verifiers.is_empty() {
        return Err(Error::config("sufficiency check needs at least one verifier"));
    }
    let mut workers = cfg.workers.max(1);
    for v in &backends.verifiers {
        if let Some(limit) = v.max_concurrency() {
            workers = workers.min(limit.max(1));
        }
    }
    let mut results = exec.with_workers(workers, || exec.map(corpus, |r| process(r, backends, templates, cfg)));
    results.sort_by_key(|(log, _)| log.id);
    let mut examples = Vec::new();
    let mut logs = Vec::with_capacity(results.len());
    for (log, ex) in results {
        logs.push(log);
        examples.extend(ex);
    }
    Ok(DatasetBuild { examples, logs })
}

/// Re-runs the sufficiency check on finished records; one flag per record.
pub fn reverify(
    examples: &[AnnotatedExample],
    verifiers: &[Arc<dyn QaOracle>],
    matcher: AnswerMatcher,
    exec: Exec,
) -> Result<Vec<bool>> {
    exec.map(examples, |ex| {
        let record = TaskRecord {
            id: ex.id,
            video: ex.video.clone(),
            question: ex.question.clone(),
            answer: ex.ground_truth_answer.clone(),
        };
        let keyframes = ex.keyframe_indices.clone().unwrap_or_default();
        verify_sufficiency(&record, &keyframes, verifiers, matcher, 0)
    })
    .into_iter()
    .collect()
}

/// One line of an input corpus; `id` defaults to the line number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    #[serde(default)]
    pub id: Option<u64>,
    pub video: String,
    pub question: String,
    pub answer: String,
}

pub fn parse_corpus(text: &str) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CorpusEntry =
            serde_json::from_str(line).map_err(|e| Error::validation(format!("corpus line {}: {e}", line_no + 1)))?;
        out.push(TaskRecord {
            id: entry.id.unwrap_or(line_no as u64),
            video: entry.video,
            question: entry.question,
            answer: entry.answer,
        });
    }
    let mut ids: Vec<u64> = out.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation("corpus ids must be unique"));
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<TaskRecord>> {
    parse_corpus(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendError, PlantedConfig, PlantedQa, PlantedWorld};
    use crate::types::FrameRecord;

    fn traj(rel: &[(usize, u8)]) -> MiningTrajectory {
        MiningTrajectory {
            visited: rel
                .iter()
                .map(|&(i, r)| {
                    (
                        i,
                        FrameRecord {
                            caption: String::new(),
                            relevance: r,
                            iteration_seen: 1,
                        },
                    )
                })
                .collect(),
            confidence_history: vec![],
            answer_history: vec![],
            final_answer: String::new(),
            verdict: Verdict::Accepted,
        }
    }

    #[test]
    fn threshold_filter() {
        let t = traj(&[(0, 2), (31, 5), (44, 4), (63, 1)]);
        assert_eq!(filter_keyframes(&t, 4), vec![31, 44]);
        assert!(filter_keyframes(&traj(&[(0, 3), (31, 2)]), 4).is_empty());
        assert_eq!(filter_keyframes(&t, 1), vec![0, 31, 44, 63]);
    }

    struct Fixed(&'static str);

    impl QaOracle for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn answer(&self, _: &QaRequest) -> BackendResult<String> {
            Ok(self.0.into())
        }
    }

    struct Panics;

    impl QaOracle for Panics {
        fn name(&self) -> &str {
            "panics"
        }
        fn answer(&self, _: &QaRequest) -> BackendResult<String> {
            panic!("must not be called")
        }
    }

    fn rec() -> TaskRecord {
        TaskRecord {
            id: 1,
            video: "v".into(),
            question: "q".into(),
            answer: "a cat".into(),
        }
    }

    #[test]
    fn unanimity() {
        let right: Arc<dyn QaOracle> = Arc::new(Fixed("A cat."));
        let wrong: Arc<dyn QaOracle> = Arc::new(Fixed("a dog"));
        let m = AnswerMatcher::Normalized;
        let three = vec![right.clone(), right.clone(), right.clone()];
        assert!(verify_sufficiency(&rec(), &[3], &three, m, 0).unwrap());
        let two = vec![right.clone(), wrong, right];
        assert!(!verify_sufficiency(&rec(), &[3], &two, m, 0).unwrap());
        assert!(verify_sufficiency(&rec(), &[3], &[], m, 0).is_err());
        let never: Vec<Arc<dyn QaOracle>> = vec![Arc::new(Panics)];
        assert!(!verify_sufficiency(&rec(), &[], &never, m, 0).unwrap());
    }

    struct Flaky(std::sync::atomic::AtomicUsize);

    impl QaOracle for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn answer(&self, _: &QaRequest) -> BackendResult<String> {
            if self.0.fetch_sub(1, std::sync::atomic::Ordering::SeqCst) > 0 {
                Err(BackendError::RateLimited { retry_after_ms: 1 })
            } else {
                Ok("a cat".into())
            }
        }
    }

    #[test]
    fn retryable_verifier_errors_are_retried() {
        let v: Vec<Arc<dyn QaOracle>> = vec![Arc::new(Flaky(2.into()))];
        assert!(verify_sufficiency(&rec(), &[1], &v, AnswerMatcher::Normalized, 2).unwrap());
        let v: Vec<Arc<dyn QaOracle>> = vec![Arc::new(Flaky(3.into()))];
        let err = verify_sufficiency(&rec(), &[1], &v, AnswerMatcher::Normalized, 2).unwrap_err();
        assert!(err.is_backend());
    }

    #[test]
    fn corpus_ids_default_to_line_numbers() {
        let text = "{\"video\":\"a\",\"question\":\"q\",\"answer\":\"x\"}\n\n{\"id\":7,\"video\":\"b\",\"question\":\"q\",\"answer\":\"y\"}\n";
        let c = parse_corpus(text).unwrap();
        assert_eq!(c[0].id, 0);
        assert_eq!(c[1].id, 7);
        assert!(parse_corpus("{\"video\":1}").is_err());
        assert!(parse_corpus("{\"video\":\"a\",\"question\":\"q\",\"answer\":\"x\"}\n{\"id\":0,\"video\":\"a\",\"question\":\"q\",\"answer\":\"x\"}").is_err());
    }

    fn planted(n: usize) -> (Arc<PlantedWorld>, Vec<TaskRecord>) {
        let world = Arc::new(PlantedWorld::generate(PlantedConfig::mining(0, n)).unwrap());
        let corpus = (0..n as u64).map(|i| world.task_record(i).unwrap()).collect();
        (world, corpus)
    }

    #[test]
    fn planted_build_is_a_verification_fixed_point() {
        let (world, corpus) = planted(40);
        let suite = BackendSuite::planted(world, 3);
        let cfg = MiningConfig::default();
        let build = build_dataset(&corpus, &suite, &PromptTemplates::default(), &cfg, Exec::Parallel).unwrap();
        assert_eq!(build.logs.len(), 40);
        assert!(!build.examples.is_empty());
        let flags = reverify(&build.examples, &suite.verifiers, cfg.matcher, Exec::Sequential).unwrap();
        assert!(flags.iter().all(|&f| f));
        for ex in &build.examples {
            assert!(ex.validate());
            assert_eq!(ex.keyframes_dir, format!("keyframes/{}", ex.id));
        }
    }

    #[test]
    fn wrong_verifier_discards_as_verification_failure() {
        let (world, corpus) = planted(10);
        let mut suite = BackendSuite::planted(world.clone(), 2);
        suite
            .verifiers
            .push(Arc::new(PlantedQa::new(world, "bad").with_wrong_ids([3u64])));
        let build = build_dataset(
            &corpus,
            &suite,
            &PromptTemplates::default(),
            &MiningConfig::default(),
            Exec::Sequential,
        )
        .unwrap();
        assert!(build.examples.iter().all(|e| e.id != 3));
        let log = &build.logs[3];
        assert!(matches!(
            log.outcome,
            InstanceOutcome::Discarded {
                reason: DiscardReason::VerificationFailed | DiscardReason::AnswerMismatch,
                ..
            }
        ));
    }
}
