//! The four-stage training curriculum.
//!
//! | stage | supervision               | trainable (rate)                              | frozen    |
//! |-------|---------------------------|-----------------------------------------------|-----------|
//! | 1     | teacher similarity ranks  | projectors, encoder, rank head (1e-4)         | K head    |
//! | 2     | leave-one-out importance  | rank head (1e-4), projectors + encoder (1e-5) | K head    |
//! | 3     | k* from the task oracle   | K head (1e-4), projectors + encoder (1e-7)    | rank head |
//! | 4     | annotated keyframes       | both heads (5e-5), projectors + encoder (1e-5)| none      |
//!
//! Each stage starts a fresh optimizer and an RNG seeded from `(seed, stage)`,
//! so resuming from a stage checkpoint reproduces an uninterrupted run.

mod config;
mod optimizer;

pub use config::{ModelConfig, StageOverride, TrainConfig};
pub use optimizer::{cosine_lr, AdamW, AdamWConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSuite, PlantedWorld};
use crate::error::{Error, Result};
use crate::objectives::{
    k_head_loss_grad, kstar_target, loo_targets, pairwise_labels, ranknet_loss_grad, sft_loss_grad, sft_targets,
    KTargetConfig, PairwiseLabels, StageTargets, TargetCache,
};
use crate::parallel::Exec;
use crate::selector::{save_checkpoint, DropoutRng, GroupName, OutputGrad, ParamGrads, SelectorParams};
use crate::types::{AnnotatedExample, CandidateSet, PromptEncoding, ScoreVector, TaskRecord, MINING_GRID};

/// Candidate-set size of a trained selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Frames16,
    Frames64,
}

impl Variant {
    pub fn n_frames(self) -> usize {
        match self {
            Variant::Frames16 => 16,
            Variant::Frames64 => MINING_GRID,
        }
    }

    /// Largest predictable frame count; the 64-frame variant is capped at 16.
    pub fn k_max(self) -> usize {
        16
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Frames16 => "frames16",
            Variant::Frames64 => "frames64",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frames16" => Ok(Variant::Frames16),
            "frames64" => Ok(Variant::Frames64),
            other => Err(Error::config(format!(
                "unknown variant `{other}` (expected frames16 or frames64)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    RanknetTeacher,
    RanknetLoo,
    KHead,
    Sft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub group_learning_rates: BTreeMap<GroupName, f64>,
    pub frozen_groups: BTreeSet<GroupName>,
    pub batch_size: usize,
    pub max_steps: usize,
    pub loss_kind: LossKind,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.stage) {
            return Err(Error::config(format!("stage {} outside 1..=4", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!(
                "stage {}: batch size must be positive",
                self.stage
            )));
        }
        for g in GroupName::ALL {
            let lr = self.group_learning_rates.get(&g).copied();
            if self.frozen_groups.contains(&g) {
                if lr.is_some_and(|r| r != 0.0) {
                    return Err(Error::config(format!(
                        "stage {}: frozen group {g} has a learning rate",
                        self.stage
                    )));
                }
            } else if !lr.is_some_and(|r| r > 0.0 && r.is_finite()) {
                return Err(Error::config(format!(
                    "stage {}: trainable group {g} needs a positive learning rate",
                    self.stage
                )));
            }
        }
        Ok(())
    }

    /// Scheduled per-group rates at `step`.
    pub fn learning_rates(&self, step: usize, lr_scale: f64) -> BTreeMap<GroupName, f64> {
        self.group_learning_rates
            .iter()
            .filter(|(g, _)| !self.frozen_groups.contains(g))
            .map(|(&g, &base)| (g, cosine_lr(base * lr_scale, step, self.max_steps)))
            .collect()
    }

    fn trainable_flags(&self) -> Vec<(&'static str, bool)> {
        GroupName::ALL
            .iter()
            .map(|g| (g.as_str(), !self.frozen_groups.contains(g)))
            .collect()
    }
}

/// Step budgets sized for the synthetic world on one CPU.
pub const DEFAULT_MAX_STEPS: [usize; 4] = [1000, 1000, 1500, 1500];

/// Common multiplier on the stage rates for desk-scale runs. The small
/// selector trained for a few thousand steps does not leave its random
/// initialization at the unscaled rates.
pub const DESK_LR_SCALE: f64 = 100.0;

pub fn default_stage_configs(variant: Variant) -> Vec<StageConfig> {
    use GroupName::*;
    let batch = match variant {
        Variant::Frames16 => [16, 16, 16, 8],
        Variant::Frames64 => [2, 16, 16, 8],
    };
    let rates: [&[(GroupName, f64)]; 4] = [
        &[(Projectors, 1e-4), (Encoder, 1e-4), (RankHead, 1e-4)],
        &[(Projectors, 1e-5), (Encoder, 1e-5), (RankHead, 1e-4)],
        &[(Projectors, 1e-7), (Encoder, 1e-7), (KHead, 1e-4)],
        &[(Projectors, 1e-5), (Encoder, 1e-5), (RankHead, 5e-5), (KHead, 5e-5)],
    ];
    let frozen: [&[GroupName]; 4] = [&[KHead], &[KHead], &[RankHead], &[]];
    let kinds = [
        LossKind::RanknetTeacher,
        LossKind::RanknetLoo,
        LossKind::KHead,
        LossKind::Sft,
    ];
    (0..4)
        .map(|i| StageConfig {
            stage: i as u8 + 1,
            group_learning_rates: rates[i].iter().copied().collect(),
            frozen_groups: frozen[i].iter().copied().collect(),
            batch_size: batch[i],
            max_steps: DEFAULT_MAX_STEPS[i],
            loss_kind: kinds[i],
        })
        .collect()
}

/// One training instance: model inputs plus whatever supervision exists.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub frames: CandidateSet,
    pub prompt: PromptEncoding,
    pub record: TaskRecord,
    pub annotation: Option<AnnotatedExample>,
}

impl TrainExample {
    /// Example `id` of a planted world, annotated with its evidence.
    pub fn from_world(world: &PlantedWorld, id: u64) -> Result<Self> {
        Ok(Self {
            frames: world.candidate_set(id)?,
            prompt: world.prompt(id)?,
            record: world.task_record(id)?,
            annotation: Some(world.annotation(id)?),
        })
    }

    pub fn range_from_world(world: &PlantedWorld, ids: std::ops::Range<u64>) -> Result<Vec<Self>> {
        ids.map(|id| Self::from_world(world, id)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Multiplies every stage learning rate.
    pub lr_scale: f64,
    pub adamw: AdamWConfig,
    /// Defaults to the full grid `1..=k_max`.
    pub k_target: Option<KTargetConfig>,
    pub w_rank: f64,
    /// Checkpoints, metrics and targets are written here when set.
    pub out_dir: Option<PathBuf>,
    /// Previously generated targets for stages 1, 2 and 4.
    pub reuse_targets: Option<TargetCache>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            exec: Exec::default(),
            lr_scale: 1.0,
            adamw: AdamWConfig::default(),
            k_target: None,
            w_rank: 1.0,
            out_dir: None,
            reuse_targets: None,
        }
    }
}

impl TrainOptions {
    fn k_target(&self, k_max: usize) -> Result<KTargetConfig> {
        let cfg = self.k_target.clone().unwrap_or_else(|| KTargetConfig::for_k_max(k_max));
        cfg.validate(k_max)?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub history: Vec<MetricRecord>,
    pub targets: Vec<(u64, StageTargets)>,
}

impl StageReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.history.first().map(|m| m.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|m| m.loss)
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: SelectorParams,
    pub optimizer: AdamW,
    /// Steps taken in the current stage.
    pub step: usize,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: SelectorParams, seed: u64) -> Self {
        let optimizer = AdamW::new(&params, AdamWConfig::default());
        Self {
            params,
            optimizer,
            step: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

fn stage_seed(seed: u64, stage: u8) -> u64 {
    crate::backends::mix_seed(seed, stage as u64)
}

enum Supervision {
    Ranking(Vec<PairwiseLabels>),
    Count(Vec<usize>),
    Sft(Vec<AnnotatedExample>),
}

fn prepare_targets(
    cfg: &StageConfig,
    params: &SelectorParams,
    data: &[TrainExample],
    backends: &BackendSuite,
    opts: &TrainOptions,
) -> Result<(Supervision, Vec<(u64, StageTargets)>)> {
    let cached = |ex: &TrainExample| {
        opts.reuse_targets
            .as_ref()
            .and_then(|c| c.get(ex.record.id, cfg.stage))
            .cloned()
    };
    let targets: Vec<StageTargets> = match cfg.loss_kind {
        LossKind::RanknetTeacher => {
            let teacher = backends.similarity_teacher()?;
            opts.exec
                .map(data, |ex| match cached(ex) {
                    Some(t) => Ok(t),
                    None => Ok(StageTargets::TeacherScores(teacher.score_all(&ex.frames, &ex.prompt)?)),
                })
                .into_iter()
                .collect::<Result<_>>()?
        }
        LossKind::RanknetLoo => {
            let oracle = backends.task_loss_oracle()?;
            opts.exec
                .map(data, |ex| match cached(ex) {
                    Some(t) => Ok(t),
                    None => Ok(StageTargets::LooScores(loo_targets(
                        &ex.frames,
                        &ex.record,
                        oracle,
                        Exec::Sequential,
                    )?)),
                })
                .into_iter()
                .collect::<Result<_>>()?
        }
        LossKind::KHead => {
            let oracle = backends.task_loss_oracle()?;
            let kcfg = opts.k_target(params.config().k_max)?;
            opts.exec
                .map(data, |ex| {
                    let (scores, _) = params.forward(&ex.frames, &ex.prompt)?;
                    let grid = KTargetConfig {
                        k_grid: kcfg.k_grid.iter().copied().filter(|&k| k <= ex.frames.len()).collect(),
                        ..kcfg.clone()
                    };
                    let k = kstar_target(&ex.frames, &scores, &ex.record, oracle, &grid, Exec::Sequential)?;
                    Ok(StageTargets::KStar(k))
                })
                .into_iter()
                .collect::<Result<_>>()?
        }
        LossKind::Sft => data
            .iter()
            .map(|ex| {
                let ann = ex.annotation.as_ref().ok_or_else(|| {
                    Error::validation(format!("example {} has no annotation for stage 4", ex.record.id))
                })?;
                let (teacher, k_true) = sft_targets(ann, ex.frames.len(), params.config().k_max)?;
                let keyframes = (0..teacher.len()).filter(|&j| teacher[j] > 0.0).collect();
                Ok(StageTargets::Sft { keyframes, k_true })
            })
            .collect::<Result<_>>()?,
    };
    let supervision = match cfg.loss_kind {
        LossKind::RanknetTeacher | LossKind::RanknetLoo => Supervision::Ranking(
            targets
                .iter()
                .map(|t| match t {
                    StageTargets::TeacherScores(s) | StageTargets::LooScores(s) => Ok(pairwise_labels(s)),
                    _ => Err(Error::validation("cached target has the wrong kind")),
                })
                .collect::<Result<_>>()?,
        ),
        LossKind::KHead => Supervision::Count(
            targets
                .iter()
                .map(|t| match t {
                    StageTargets::KStar(k) => Ok(*k),
                    _ => Err(Error::validation("cached target has the wrong kind")),
                })
                .collect::<Result<_>>()?,
        ),
        LossKind::Sft => Supervision::Sft(data.iter().filter_map(|ex| ex.annotation.clone()).collect()),
    };
    let keyed = data.iter().map(|ex| ex.record.id).zip(targets).collect();
    Ok((supervision, keyed))
}

/// Runs one stage: applies the freeze mask, builds targets once, then takes
/// `max_steps` AdamW steps on mini-batches drawn by epoch-wise shuffling.
pub fn run_stage(
    state: TrainState,
    cfg: &StageConfig,
    data: &[TrainExample],
    backends: &BackendSuite,
    opts: &TrainOptions,
) -> Result<(TrainState, StageReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config(format!("stage {} has no training data", cfg.stage)));
    }
    let mut params = state.params.set_trainable(cfg.trainable_flags())?;
    let mut optimizer = AdamW::new(&params, opts.adamw);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(state.seed, cfg.stage));
    let (supervision, targets) = prepare_targets(cfg, &params, data, backends, opts)?;
    let kcfg = opts.k_target(params.config().k_max)?;
    let use_dropout = params.config().dropout > 0.0;

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.max_steps);
    let train_err = |step: usize, e: Error| Error::Training {
        stage: cfg.stage,
        step,
        message: e.to_string(),
    };

    for step in 0..cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let seeds: Vec<(usize, u64)> = batch.iter().map(|&i| (i, rng.random())).collect();
        let results = opts.exec.map(&seeds, |&(i, seed)| {
            let ex = &data[i];
            let mut drop_rng = DropoutRng::seed_from_u64(seed);
            let dropout = use_dropout.then_some(&mut drop_rng);
            params.loss_and_grad(&ex.frames, &ex.prompt, dropout, |out| {
                let n = out.scores.len();
                let k = out.k_logits.len();
                match &supervision {
                    Supervision::Ranking(labels) => {
                        let (loss, g) = ranknet_loss_grad(&out.scores, &labels[i])?;
                        Ok((
                            loss,
                            OutputGrad {
                                scores: g,
                                k_logits: vec![0.0; k],
                            },
                        ))
                    }
                    Supervision::Count(kstar) => {
                        let (loss, g) = k_head_loss_grad(&out.k_logits, kstar[i], &kcfg)?;
                        Ok((
                            loss,
                            OutputGrad {
                                scores: vec![0.0; n],
                                k_logits: g,
                            },
                        ))
                    }
                    Supervision::Sft(anns) => {
                        let (loss, gs, gk) = sft_loss_grad(&out.scores, &out.k_logits, &anns[i], &kcfg, opts.w_rank)?;
                        Ok((
                            loss,
                            OutputGrad {
                                scores: gs,
                                k_logits: gk,
                            },
                        ))
                    }
                }
            })
        });
        let mut grads = ParamGrads::zeros_like(&params);
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r.map_err(|e| train_err(step, e))?;
            loss += l;
            grads.add_assign(&g);
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        grads.scale(scale);
        if !loss.is_finite() {
            return Err(train_err(step, Error::NonFinite("batch loss".into())));
        }
        let lrs = cfg.learning_rates(step, opts.lr_scale);
        optimizer
            .step(&mut params, &grads, &lrs)
            .map_err(|e| train_err(step, e))?;
        history.push(MetricRecord {
            step,
            stage: cfg.stage,
            loss,
            lr: lrs.values().copied().fold(0.0, f64::max),
        });
    }
    if !params.is_finite() {
        return Err(train_err(cfg.max_steps, Error::NonFinite("parameters".into())));
    }
    let state = TrainState {
        params,
        optimizer,
        step: cfg.max_steps,
        seed: state.seed,
        rng,
    };
    Ok((
        state,
        StageReport {
            stage: cfg.stage,
            history,
            targets,
        },
    ))
}

/// Training data per stage number.
#[derive(Clone, Debug, Default)]
pub struct CurriculumData {
    stages: BTreeMap<u8, Arc<Vec<TrainExample>>>,
}

impl CurriculumData {
    /// The same examples feed every stage.
    pub fn shared(examples: Vec<TrainExample>) -> Self {
        let all = Arc::new(examples);
        Self {
            stages: (1..=4).map(|s| (s, all.clone())).collect(),
        }
    }

    pub fn with_stage(mut self, stage: u8, examples: Vec<TrainExample>) -> Self {
        self.stages.insert(stage, Arc::new(examples));
        self
    }

    pub fn stage(&self, stage: u8) -> Option<&[TrainExample]> {
        self.stages.get(&stage).map(|v| v.as_slice())
    }
}

#[derive(Clone, Debug)]
pub struct CurriculumOutput {
    pub params: SelectorParams,
    pub reports: Vec<StageReport>,
}

/// Runs `stages` in order starting from `params`. Stage numbers must be
/// strictly increasing. With an output directory each completed stage leaves
/// a checkpoint in `stage{n}/`, its metrics in `metrics.jsonl` and its
/// targets in `targets.jsonl`, so a failure keeps all finished stages.
pub fn run_curriculum(
    params: SelectorParams,
    seed: u64,
    stages: &[StageConfig],
    data: &CurriculumData,
    backends: &BackendSuite,
    opts: &TrainOptions,
) -> Result<CurriculumOutput> {
    if stages.is_empty() {
        return Err(Error::config("no stages to run"));
    }
    if stages.windows(2).any(|w| w[0].stage >= w[1].stage) {
        let order: Vec<u8> = stages.iter().map(|s| s.stage).collect();
        return Err(Error::config(format!(
            "stages must run in increasing order, got {order:?}"
        )));
    }
    for cfg in stages {
        cfg.validate()?;
        if data.stage(cfg.stage).is_none() {
            return Err(Error::config(format!("no data routed to stage {}", cfg.stage)));
        }
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut cache = TargetCache::new();
    let mut state = TrainState::new(params, seed);
    let mut reports = Vec::with_capacity(stages.len());
    for cfg in stages {
        let examples = data.stage(cfg.stage).expect("checked above");
        let (next, report) = run_stage(state, cfg, examples, backends, opts)?;
        state = next;
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&state.params, &dir.join(format!("stage{}", cfg.stage)))?;
            let mut log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.jsonl"))?;
            for m in &report.history {
                serde_json::to_writer(&mut log, m)?;
                log.write_all(b"\n")?;
            }
            for (id, t) in &report.targets {
                cache.insert(*id, t.clone());
            }
            cache.save(&dir.join("targets.jsonl"))?;
        }
        reports.push(report);
    }
    Ok(CurriculumOutput {
        params: state.params,
        reports,
    })
}

/// Scores of `params` on one example, for callers that only need ranking.
pub fn rank_scores(params: &SelectorParams, ex: &TrainExample) -> Result<ScoreVector> {
    Ok(params.forward(&ex.frames, &ex.prompt)?.0)
}
