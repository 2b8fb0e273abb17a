//! Training objectives and target generation for the four curriculum stages.

mod cache;
mod count;
mod ranking;

pub use cache::{CacheEntry, TargetCache};
pub use count::{
    class_target, evo_loss, evo_loss_grad, k_head_loss, k_head_loss_grad, smooth_l1, KHeadLoss, LOG_CLAMP,
};
pub use ranking::{pairwise_labels, ranknet_loss, ranknet_loss_grad, PairwiseLabels};

use serde::{Deserialize, Serialize};

use crate::backends::TaskLossOracle;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::types::{top_k_positions, AnnotatedExample, CandidateSet, KDistribution, ScoreVector, TaskRecord};

/// Frame-cost penalty per selected frame in the k* search.
pub const DEFAULT_LAMBDA_K: f64 = 0.0105;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KTargetConfig {
    pub lambda_k: f64,
    /// Candidate counts to evaluate, strictly increasing.
    pub k_grid: Vec<usize>,
    /// Weight of the KL term; `1 - alpha` weights the expectation term.
    pub alpha: f64,
    /// Width of the Gaussian soft target.
    pub sigma: f64,
}

impl KTargetConfig {
    /// Defaults with the full grid `1..=k_max`.
    pub fn for_k_max(k_max: usize) -> Self {
        Self {
            lambda_k: DEFAULT_LAMBDA_K,
            k_grid: (1..=k_max).collect(),
            alpha: 0.5,
            sigma: 1.0,
        }
    }

    pub(crate) fn validate_mix(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn validate(&self, k_max: usize) -> Result<()> {
        self.validate_mix()?;
        if !self.lambda_k.is_finite() {
            return Err(Error::config("lambda_k must be finite"));
        }
        if self.k_grid.is_empty() {
            return Err(Error::config("k grid is empty"));
        }
        if self.k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("k grid must be strictly increasing"));
        }
        if self.k_grid[0] < 1 || *self.k_grid.last().expect("non-empty") > k_max {
            return Err(Error::config(format!("k grid must lie within [1, {k_max}]")));
        }
        Ok(())
    }
}

/// Supervision for one example in one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum StageTargets {
    TeacherScores(ScoreVector),
    LooScores(ScoreVector),
    KStar(usize),
    Sft { keyframes: Vec<usize>, k_true: usize },
}

impl StageTargets {
    pub fn stage(&self) -> u8 {
        match self {
            StageTargets::TeacherScores(_) => 1,
            StageTargets::LooScores(_) => 2,
            StageTargets::KStar(_) => 3,
            StageTargets::Sft { .. } => 4,
        }
    }
}

fn call(oracle: &dyn TaskLossOracle, record: &TaskRecord, subset: Vec<usize>) -> Result<f64> {
    oracle
        .task_loss(record, &subset)
        .map_err(|source| Error::Oracle { subset, source })
}

/// Leave-one-out importance: `score_i = L(V \ {f_i}) - L(V)`.
///
/// Issues exactly `N + 1` oracle calls, possibly concurrently; the first
/// failure in position order is reported.
pub fn loo_targets(
    frames: &CandidateSet,
    record: &TaskRecord,
    oracle: &dyn TaskLossOracle,
    exec: Exec,
) -> Result<ScoreVector> {
    let n = frames.len();
    let losses = exec.map_range(n + 1, |c| {
        let subset: Vec<usize> = if c == 0 {
            (0..n).collect()
        } else {
            (0..n).filter(|&j| j != c - 1).collect()
        };
        call(oracle, record, subset)
    });
    let losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
    let full = losses[0];
    ScoreVector::new(losses[1..].iter().map(|l| l - full).collect())
}

/// Population z-scores; a constant vector maps to all zeros.
pub fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let first = values.first().copied().unwrap_or(0.0);
    if values.iter().all(|&v| v == first) {
        return vec![0.0; values.len()];
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Arg-min over the grid of `zscore(losses)_k + lambda_k * k`; ties resolve
/// to the smaller `k`.
pub fn kstar_from_losses(grid: &[usize], losses: &[f64], lambda_k: f64) -> Result<usize> {
    if grid.is_empty() || grid.len() != losses.len() {
        return Err(Error::config("k grid and loss list must be non-empty and equally long"));
    }
    let z = zscore(losses);
    let mut best = 0;
    let mut best_obj = f64::INFINITY;
    for (i, (&k, zk)) in grid.iter().zip(&z).enumerate() {
        let obj = zk + lambda_k * k as f64;
        if obj < best_obj {
            best_obj = obj;
            best = i;
        }
    }
    Ok(grid[best])
}

/// Frame count that best trades task loss against frame cost, evaluating the
/// oracle on the top-`k` frames by `rank_scores` for every `k` in the grid.
pub fn kstar_target(
    frames: &CandidateSet,
    rank_scores: &ScoreVector,
    record: &TaskRecord,
    oracle: &dyn TaskLossOracle,
    cfg: &KTargetConfig,
    exec: Exec,
) -> Result<usize> {
    rank_scores.expect_len(frames.len())?;
    cfg.validate(frames.len())?;
    let scores = rank_scores.as_slice();
    let losses = exec.map(&cfg.k_grid, |&k| call(oracle, record, top_k_positions(scores, k)));
    let losses = losses.into_iter().collect::<Result<Vec<f64>>>()?;
    kstar_from_losses(&cfg.k_grid, &losses, cfg.lambda_k)
}

/// Binary teacher scores (1 on annotated keyframes) and the annotated count,
/// mapped onto an `n`-frame candidate grid with counts capped at `k_max`.
pub fn sft_targets(annotation: &AnnotatedExample, n: usize, k_max: usize) -> Result<(Vec<f64>, usize)> {
    let positions = annotation
        .candidate_positions(n)
        .ok_or_else(|| Error::validation(format!("example {} has no keyframe indices", annotation.id)))?;
    let mut teacher = vec![0.0; n];
    for p in positions {
        teacher[p] = 1.0;
    }
    let k_true = annotation.num_selected_frames.clamp(1, k_max);
    Ok((teacher, k_true))
}

/// Supervised loss on an annotated example:
/// `w_rank · ranknet(binary keyframe teacher) + k_head_loss(k_true)`.
pub fn sft_loss(
    scores: &ScoreVector,
    dist: &KDistribution,
    annotation: &AnnotatedExample,
    cfg: &KTargetConfig,
    w_rank: f64,
) -> Result<f64> {
    let (teacher, k_true) = sft_targets(annotation, scores.len(), dist.k_max())?;
    let labels = pairwise_labels(&ScoreVector::new(teacher)?);
    let rank = ranknet_loss(scores, &labels)?;
    let k = k_head_loss(dist, k_true, cfg)?;
    Ok(w_rank * rank + k.value)
}

/// [`sft_loss`] with gradients w.r.t. the raw scores and the count logits.
pub fn sft_loss_grad(
    scores: &[f64],
    k_logits: &[f64],
    annotation: &AnnotatedExample,
    cfg: &KTargetConfig,
    w_rank: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (teacher, k_true) = sft_targets(annotation, scores.len(), k_logits.len())?;
    let labels = pairwise_labels(&ScoreVector::new(teacher)?);
    let (rank, mut g_scores) = ranknet_loss_grad(scores, &labels)?;
    g_scores.iter_mut().for_each(|g| *g *= w_rank);
    let (k, g_logits) = k_head_loss_grad(k_logits, k_true, cfg)?;
    Ok((w_rank * rank + k, g_scores, g_logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackendError;
    use crate::tensor::Matrix;
    use std::collections::BTreeSet;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Planted {
        evidence: BTreeSet<usize>,
        calls: AtomicUsize,
    }

    impl TaskLossOracle for Planted {
        fn task_loss(&self, _: &TaskRecord, subset: &[usize]) -> Result<f64, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(self.evidence.iter().filter(|e| !subset.contains(e)).count() as f64)
        }
    }

    struct Constant;

    impl TaskLossOracle for Constant {
        fn task_loss(&self, _: &TaskRecord, _: &[usize]) -> Result<f64, BackendError> {
            Ok(2.5)
        }
    }

    struct Failing;

    impl TaskLossOracle for Failing {
        fn task_loss(&self, _: &TaskRecord, subset: &[usize]) -> Result<f64, BackendError> {
            if subset.len() < 3 {
                Err(BackendError::Transport {
                    message: "boom".into(),
                    retry_after_ms: None,
                })
            } else {
                Ok(0.0)
            }
        }
    }

    fn frames(n: usize) -> CandidateSet {
        CandidateSet::uniform("v", Matrix::zeros(n, 2), 1000, 25.0).unwrap()
    }

    fn record() -> TaskRecord {
        TaskRecord {
            id: 0,
            video: "v".into(),
            question: "q".into(),
            answer: "a".into(),
        }
    }

    #[test]
    fn loo_recovers_planted_frames_with_n_plus_one_calls() {
        let oracle = Planted {
            evidence: [2, 5].into(),
            calls: AtomicUsize::new(0),
        };
        let s = loo_targets(&frames(8), &record(), &oracle, Exec::Parallel).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(oracle.calls.load(Ordering::SeqCst), 9);
    }

    #[test]
    fn loo_of_constant_oracle_is_zero() {
        let s = loo_targets(&frames(5), &record(), &Constant, Exec::Sequential).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loo_single_frame_compares_with_empty_set() {
        let oracle = Planted {
            evidence: [0].into(),
            calls: AtomicUsize::new(0),
        };
        let s = loo_targets(&frames(1), &record(), &oracle, Exec::Sequential).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);
    }

    #[test]
    fn oracle_failures_carry_the_subset() {
        let err = loo_targets(&frames(3), &record(), &Failing, Exec::Parallel).unwrap_err();
        match err {
            Error::Oracle { subset, .. } => assert_eq!(subset, vec![1, 2]),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn kstar_worked_example() {
        assert_eq!(
            kstar_from_losses(&[1, 2, 3, 4], &[4.0, 2.0, 1.0, 1.0], 0.0105).unwrap(),
            3
        );
        let z = zscore(&[4.0, 2.0, 1.0, 1.0]);
        let expected = [1.633, 0.0, -0.8165, -0.8165];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn flat_losses_pick_the_smallest_k() {
        assert_eq!(kstar_from_losses(&[2, 4, 6], &[0.3, 0.3, 0.3], 0.0105).unwrap(), 2);
        assert_eq!(zscore(&[7.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn kstar_rejects_bad_grids() {
        let cfg = KTargetConfig {
            k_grid: vec![],
            ..KTargetConfig::for_k_max(4)
        };
        let scores = ScoreVector::new(vec![0.0; 4]).unwrap();
        assert!(kstar_target(&frames(4), &scores, &record(), &Constant, &cfg, Exec::Sequential).is_err());
        let cfg = KTargetConfig {
            k_grid: vec![1, 3, 2],
            ..KTargetConfig::for_k_max(4)
        };
        assert!(cfg.validate(4).is_err());
    }

    #[test]
    fn kstar_on_planted_coverage_equals_evidence_size() {
        let oracle = Planted {
            evidence: [1, 4, 6].into(),
            calls: AtomicUsize::new(0),
        };
        let mut s = vec![0.0; 8];
        for e in [1, 4, 6] {
            s[e] = 1.0;
        }
        let scores = ScoreVector::new(s).unwrap();
        let k = kstar_target(
            &frames(8),
            &scores,
            &record(),
            &oracle,
            &KTargetConfig::for_k_max(8),
            Exec::Parallel,
        )
        .unwrap();
        assert_eq!(k, 3);
    }

    fn annotated(indices: Vec<usize>) -> AnnotatedExample {
        AnnotatedExample {
            id: 1,
            question: "q".into(),
            ground_truth_answer: "a".into(),
            video: "v".into(),
            keyframes_dir: "k".into(),
            duration: 10.0,
            num_selected_frames: indices.len(),
            keyframe_indices: Some(indices),
        }
    }

    #[test]
    fn sft_loss_vanishes_for_a_perfect_prediction() {
        // 8 candidates; grid indices 9 and 27 map to positions 1 and 3
        let ann = annotated(vec![9, 27]);
        let mut s = vec![-50.0; 8];
        s[1] = 50.0;
        s[3] = 50.0;
        let scores = ScoreVector::new(s).unwrap();
        let dist = KDistribution::one_hot(2, 8).unwrap();
        let cfg = KTargetConfig {
            sigma: 1e-3,
            ..KTargetConfig::for_k_max(8)
        };
        assert!(sft_loss(&scores, &dist, &ann, &cfg, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn sft_rank_term_is_zero_when_every_frame_is_annotated() {
        let ann = annotated((0..8).map(|j| crate::types::candidate_to_grid(j, 8)).collect());
        let scores = ScoreVector::new(vec![0.3, -1.0, 2.0, 0.0, 1.0, 0.5, -0.2, 0.9]).unwrap();
        let dist = KDistribution::one_hot(8, 8).unwrap();
        let cfg = KTargetConfig {
            alpha: 0.0,
            ..KTargetConfig::for_k_max(8)
        };
        assert_eq!(sft_loss(&scores, &dist, &ann, &cfg, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn sft_needs_indices() {
        let mut ann = annotated(vec![1]);
        ann.keyframe_indices = None;
        let scores = ScoreVector::new(vec![0.0; 4]).unwrap();
        let dist = KDistribution::uniform(4).unwrap();
        assert!(sft_loss(&scores, &dist, &ann, &KTargetConfig::for_k_max(4), 1.0).is_err());
    }
}
