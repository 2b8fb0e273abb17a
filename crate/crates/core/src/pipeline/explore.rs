//! Stage I: iterative coarse-to-fine exploration of the 64-frame grid.
//!
//! The agent first scores three anchors. Each later iteration picks the
//! adjacent pair of scored frames with the highest summed relevance, scores
//! up to four new frames between them and makes that gap the new current
//! segment. Ties favour the current segment, so the search keeps descending
//! until a pair elsewhere looks strictly more promising or the segment runs
//! out of unscored frames.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::prompts::{parse_agent_response, AgentResponse, PromptTemplates};
use crate::answers::{normalize_answer, AnswerMatcher};
use crate::backends::{AgentBackend, AgentRequest, BackendError, PromptStage};
use crate::error::{Error, Result};
use crate::types::{Confidence, FrameRecord, MiningTrajectory, TaskRecord, Verdict, MINING_GRID};

pub const INITIAL_ANCHORS: [usize; 3] = [0, 31, 63];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub max_iterations: usize,
    /// Extra attempts after a malformed or failed agent reply.
    pub retries: usize,
    /// Stage II relevance threshold.
    pub lambda_rel: u8,
    /// New frames scored per deepening step.
    pub dense_count: usize,
    /// Upper bound on instances processed concurrently.
    pub workers: usize,
    pub matcher: AnswerMatcher,
    /// Parent directory recorded in `keyframes_dir`.
    pub keyframes_root: String,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            retries: 2,
            lambda_rel: 4,
            dense_count: 4,
            workers: 4,
            matcher: AnswerMatcher::Normalized,
            keyframes_root: "keyframes".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplorationState {
    pub record: TaskRecord,
    pub duration_s: f64,
    /// Nested segments; the last one is current. The root spans the grid.
    pub segments: Vec<(usize, usize)>,
    pub trajectory: MiningTrajectory,
    pub iteration: usize,
}

impl ExplorationState {
    pub fn current_segment(&self) -> (usize, usize) {
        *self.segments.last().expect("root segment is never popped")
    }

    pub fn visited(&self) -> BTreeSet<usize> {
        self.trajectory.visited.keys().copied().collect()
    }

    /// Everything scored so far, one line per frame in temporal order.
    pub fn buffer(&self) -> String {
        self.trajectory
            .visited
            .iter()
            .map(|(i, r)| format!("frame {i}: relevance {}; {}", r.relevance, r.caption))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn ask(agent: &dyn AgentBackend, request: &AgentRequest, retries: usize) -> Result<AgentResponse> {
    let mut last = None;
    for _ in 0..=retries {
        match agent.respond(request) {
            Ok(text) => match parse_agent_response(&text, request.stage, &request.frames, &request.previously_shown) {
                Ok(r) => return Ok(r),
                Err(e) => last = Some(e),
            },
            Err(e) if e.is_retryable() => {
                if let Some(wait) = e.retry_after() {
                    std::thread::sleep(wait.min(std::time::Duration::from_secs(5)));
                }
                last = Some(Error::Backend(e));
            }
            Err(e) => return Err(Error::Backend(e)),
        }
    }
    Err(last.unwrap_or(Error::Backend(BackendError::Unavailable("agent"))))
}

fn record_reply(state: &mut ExplorationState, reply: AgentResponse) {
    let iteration = state.iteration;
    for f in reply.frame_analysis {
        state.trajectory.visited.insert(
            f.index,
            FrameRecord {
                caption: f.caption,
                relevance: f.relevance,
                iteration_seen: iteration,
            },
        );
    }
    for r in reply.revised_prev_scores {
        if let Some(rec) = state.trajectory.visited.get_mut(&r.index) {
            rec.relevance = r.relevance;
        }
    }
    state.trajectory.confidence_history.push(reply.confidence);
    state.trajectory.final_answer = reply.answer_attempt.clone();
    state.trajectory.answer_history.push(reply.answer_attempt);
}

/// Iteration 1: scores the anchors 0, 31 and 63.
pub fn initial_probe(
    record: &TaskRecord,
    duration_s: f64,
    agent: &dyn AgentBackend,
    templates: &PromptTemplates,
    cfg: &MiningConfig,
) -> Result<ExplorationState> {
    let frames = INITIAL_ANCHORS.to_vec();
    let request = AgentRequest {
        id: record.id,
        video: record.video.clone(),
        question: record.question.clone(),
        stage: PromptStage::Initial,
        prompt: templates.render_initial(duration_s, &frames, &record.question),
        frames,
        previously_shown: Vec::new(),
    };
    let reply = ask(agent, &request, cfg.retries)?;
    let mut state = ExplorationState {
        record: record.clone(),
        duration_s,
        segments: vec![(0, MINING_GRID - 1)],
        trajectory: MiningTrajectory {
            visited: Default::default(),
            confidence_history: Vec::new(),
            answer_history: Vec::new(),
            final_answer: String::new(),
            verdict: Verdict::Insufficient,
        },
        iteration: 1,
    };
    record_reply(&mut state, reply);
    Ok(state)
}

/// Innermost segment on the stack containing `gap`.
fn enclosing_level(state: &ExplorationState, gap: (usize, usize)) -> usize {
    state
        .segments
        .iter()
        .rposition(|&(s, e)| s <= gap.0 && gap.1 <= e)
        .unwrap_or(0)
}

/// The gap to explore next and the stack level it belongs to.
fn locate(state: &ExplorationState) -> Option<(usize, (usize, usize))> {
    let visited: Vec<(usize, u8)> = state
        .trajectory
        .visited
        .iter()
        .map(|(&i, r)| (i, r.relevance))
        .collect();
    let mut best: Option<(u32, usize, (usize, usize))> = None;
    for w in visited.windows(2) {
        let ((a, ra), (b, rb)) = (w[0], w[1]);
        if b - a < 2 {
            continue;
        }
        let sum = ra as u32 + rb as u32;
        let level = enclosing_level(state, (a, b));
        if best.is_none_or(|(s, l, _)| sum > s || (sum == s && level > l)) {
            best = Some((sum, level, (a, b)));
        }
    }
    best.map(|(_, level, gap)| (level, gap))
}

/// The gap to explore next: the adjacent pair of scored frames with the
/// largest summed relevance whose interior still holds an unscored frame.
/// Ties go to the pair inside the innermost segment, then to the earlier
/// pair. When the winner lies outside the current segment, the search
/// returns to the innermost segment that contains it.
pub fn choose_segment(state: &ExplorationState) -> Option<(usize, usize)> {
    locate(state).map(|(_, gap)| gap)
}

/// Up to `count` unvisited frames spread evenly over the open interval
/// `(start, end)`: the evenly spaced positions
/// `round((start * (count - i) + end * (i + 1)) / (count + 1))`, with any
/// position that is already taken replaced by the nearest free one. When at
/// most `count` free positions remain, all of them are returned.
pub fn dense_anchors(start: usize, end: usize, visited: &BTreeSet<usize>, count: usize) -> Vec<usize> {
    let free: Vec<usize> = (start + 1..end).filter(|i| !visited.contains(i)).collect();
    if free.len() <= count {
        return free;
    }
    let mut chosen = BTreeSet::new();
    for i in 0..count {
        let target = ((start * (count - i) + end * (i + 1)) as f64 / (count + 1) as f64).round() as usize;
        let pick = free
            .iter()
            .copied()
            .filter(|p| !chosen.contains(p))
            .min_by_key(|&p| (p.abs_diff(target), p))
            .expect("more free positions than picks");
        chosen.insert(pick);
    }
    chosen.into_iter().collect()
}

/// One deepening iteration. Returns `false` when no unexplored gap remains.
pub fn deepen(
    state: &mut ExplorationState,
    agent: &dyn AgentBackend,
    templates: &PromptTemplates,
    cfg: &MiningConfig,
) -> Result<bool> {
    let Some((level, gap)) = locate(state) else {
        return Ok(false);
    };
    let previously_shown: Vec<usize> = state.trajectory.visited.keys().copied().collect();
    let frames = dense_anchors(gap.0, gap.1, &state.visited(), cfg.dense_count);
    let request = AgentRequest {
        id: state.record.id,
        video: state.record.video.clone(),
        question: state.record.question.clone(),
        stage: PromptStage::DeepDive,
        prompt: templates.render_deep_dive(state.duration_s, &state.record.question, &state.buffer(), &frames, gap),
        frames,
        previously_shown,
    };
    let reply = ask(agent, &request, cfg.retries)?;
    state.segments.truncate(level + 1);
    if state.current_segment() != gap {
        state.segments.push(gap);
    }
    state.iteration += 1;
    record_reply(state, reply);
    Ok(true)
}

fn stable(state: &ExplorationState) -> bool {
    let t = &state.trajectory;
    let n = t.answer_history.len();
    t.confidence_history.last() == Some(&Confidence::High)
        && n >= 2
        && normalize_answer(&t.answer_history[n - 1]) == normalize_answer(&t.answer_history[n - 2])
}

/// Stop once the agent is confident with a repeated answer, every frame has
/// been scored, or the iteration budget is spent.
pub fn should_stop(state: &ExplorationState, max_iterations: usize) -> bool {
    stable(state) || state.trajectory.visited.len() >= MINING_GRID || state.iteration >= max_iterations
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StableAnswer,
    AllFramesSeen,
    BudgetExhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiningOutcome {
    pub trajectory: MiningTrajectory,
    pub stop: StopReason,
}

/// Full Stage I run. The verdict is `answer_mismatch` when the final answer
/// disagrees with the ground truth or the budget ran out before the answer
/// stabilised; otherwise `accepted` (pending Stage II).
pub fn mine(
    record: &TaskRecord,
    duration_s: f64,
    agent: &dyn AgentBackend,
    templates: &PromptTemplates,
    cfg: &MiningConfig,
) -> Result<MiningOutcome> {
    let mut state = initial_probe(record, duration_s, agent, templates, cfg)?;
    while !should_stop(&state, cfg.max_iterations) {
        if !deepen(&mut state, agent, templates, cfg)? {
            break;
        }
    }
    let stop = if stable(&state) {
        StopReason::StableAnswer
    } else if state.trajectory.visited.len() >= MINING_GRID {
        StopReason::AllFramesSeen
    } else {
        StopReason::BudgetExhausted
    };
    let correct = cfg.matcher.matches(&state.trajectory.final_answer, &record.answer);
    state.trajectory.verdict = if correct && stop != StopReason::BudgetExhausted {
        Verdict::Accepted
    } else {
        Verdict::AnswerMismatch
    };
    Ok(MiningOutcome {
        trajectory: state.trajectory,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackendResult;
    use serde_json::json;
    use std::collections::BTreeMap;

    fn record() -> TaskRecord {
        TaskRecord {
            id: 0,
            video: "v".into(),
            question: "q".into(),
            answer: "yes".into(),
        }
    }

    fn state_with(rel: &[(usize, u8)]) -> ExplorationState {
        ExplorationState {
            record: record(),
            duration_s: 10.0,
            segments: vec![(0, 63)],
            trajectory: MiningTrajectory {
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
                    .collect::<BTreeMap<_, _>>(),
                confidence_history: vec![Confidence::Medium],
                answer_history: vec!["a".into()],
                final_answer: "a".into(),
                verdict: Verdict::Insufficient,
            },
            iteration: 1,
        }
    }

    #[test]
    fn segment_choice_follows_summed_relevance() {
        assert_eq!(choose_segment(&state_with(&[(0, 2), (31, 5), (63, 3)])), Some((31, 63)));
        assert_eq!(choose_segment(&state_with(&[(0, 3), (31, 2), (63, 3)])), Some((0, 31)));
    }

    #[test]
    fn search_returns_to_a_more_promising_sibling() {
        let mut s = state_with(&[(0, 1), (6, 1), (12, 1), (19, 1), (25, 1), (31, 2), (63, 3)]);
        s.segments.push((0, 31));
        assert_eq!(locate(&s), Some((0, (31, 63))));
        let mut s = state_with(&[(0, 1), (6, 1), (12, 1), (19, 1), (25, 2), (31, 2), (63, 2)]);
        s.segments.push((0, 31));
        assert_eq!(locate(&s), Some((1, (25, 31))));
    }

    #[test]
    fn dense_anchor_placement() {
        let visited: BTreeSet<usize> = [0, 31, 63].into();
        assert_eq!(dense_anchors(31, 63, &visited, 4), vec![37, 44, 50, 57]);
        let visited: BTreeSet<usize> = [31, 36, 37, 63].into();
        let picks = dense_anchors(31, 63, &visited, 4);
        assert_eq!(picks.len(), 4);
        assert!(picks.iter().all(|p| !visited.contains(p) && (32..63).contains(p)));
        let visited: BTreeSet<usize> = [10, 11, 13, 14].into();
        assert_eq!(dense_anchors(10, 14, &visited, 4), vec![12]);
    }

    #[test]
    fn stop_rule() {
        let mut s = state_with(&[(0, 1), (31, 1), (63, 1)]);
        s.trajectory.confidence_history = vec![Confidence::High];
        assert!(!should_stop(&s, 10));
        s.trajectory.confidence_history = vec![Confidence::Medium, Confidence::High, Confidence::High];
        s.trajectory.answer_history = vec!["x".into(), "The cat".into(), "the cat.".into()];
        assert!(should_stop(&s, 10));
        s.trajectory.answer_history[2] = "a dog".into();
        assert!(!should_stop(&s, 10));
        let all: Vec<(usize, u8)> = (0..64).map(|i| (i, 1)).collect();
        assert!(should_stop(&state_with(&all), 10));
        let mut b = state_with(&[(0, 1)]);
        b.iteration = 10;
        assert!(should_stop(&b, 10));
    }

    /// Reports fixed relevances and always answers `yes` with high confidence.
    struct Scripted {
        relevance: fn(usize) -> u8,
        malformed_first: std::sync::atomic::AtomicUsize,
    }

    impl AgentBackend for Scripted {
        fn respond(&self, req: &AgentRequest) -> BackendResult<String> {
            use std::sync::atomic::Ordering;
            if self.malformed_first.load(Ordering::SeqCst) > 0 {
                self.malformed_first.fetch_sub(1, Ordering::SeqCst);
                return Ok("sorry, I cannot comply".into());
            }
            let frames: Vec<_> = req
                .frames
                .iter()
                .map(|&i| json!({"index": i, "caption": "c", "relevance": (self.relevance)(i)}))
                .collect();
            let key = match req.stage {
                PromptStage::Initial => "frame_analysis",
                PromptStage::DeepDive => "new_frame_analysis",
            };
            Ok(
                json!({key: frames, "revised_prev_scores": [], "confidence": "high", "answer_attempt": "yes"})
                    .to_string(),
            )
        }
    }

    fn scripted(malformed: usize) -> Scripted {
        Scripted {
            relevance: |i| if (40..44).contains(&i) { 5 } else { 2 },
            malformed_first: std::sync::atomic::AtomicUsize::new(malformed),
        }
    }

    #[test]
    fn mining_descends_and_stops_when_stable() {
        let out = mine(
            &record(),
            10.0,
            &scripted(0),
            &PromptTemplates::default(),
            &MiningConfig::default(),
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::StableAnswer);
        assert_eq!(out.trajectory.verdict, Verdict::Accepted);
        assert!(out.trajectory.visited.contains_key(&31));
        assert_eq!(out.trajectory.visited.len(), 7);
        assert!(out.trajectory.violations().is_empty());
    }

    #[test]
    fn malformed_replies_are_retried_then_fail() {
        let cfg = MiningConfig::default();
        assert!(mine(&record(), 10.0, &scripted(2), &PromptTemplates::default(), &cfg).is_ok());
        let err = mine(&record(), 10.0, &scripted(3), &PromptTemplates::default(), &cfg).unwrap_err();
        assert!(matches!(err, Error::AgentResponse(_)));
    }

    #[test]
    fn wrong_final_answer_is_a_mismatch() {
        let mut rec = record();
        rec.answer = "no".into();
        let out = mine(
            &rec,
            10.0,
            &scripted(0),
            &PromptTemplates::default(),
            &MiningConfig::default(),
        )
        .unwrap();
        assert_eq!(out.trajectory.verdict, Verdict::AnswerMismatch);
    }
}
