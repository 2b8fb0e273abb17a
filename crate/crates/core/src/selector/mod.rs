//! The selection policy network.
//!
//! Frame embeddings and prompt token embeddings are projected into a shared
//! width and concatenated as `[frames ∥ tokens]`, then run through a pre-norm
//! Transformer encoder. The rank head maps every frame position to a scalar
//! relevance score; the count head maps the mean of the frame positions to
//! logits over `k = 1..=k_max`.
//!
//! Attention keys at prompt positions carry a fixed `-ln T` logit offset, so
//! the prompt block as a whole holds the same attention mass however many
//! tokens it has. Repeating every prompt token therefore leaves all outputs
//! unchanged.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::types::{CandidateSet, KDistribution, PromptEncoding, ScoreVector};

/// How the count head's distribution is turned into a frame count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KDecode {
    #[default]
    Argmax,
    /// Round the expectation to the nearest integer.
    Expectation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub k_max: usize,
    pub dropout: f64,
    /// Hidden width of the feed-forward blocks.
    pub d_ff: usize,
    /// Longest candidate set the frame position table covers.
    pub max_frames: usize,
    pub frame_position_embeddings: bool,
    #[serde(default)]
    pub k_decode: KDecode,
}

impl SelectorConfig {
    /// Full-size defaults: width 256, 4 layers, 8 heads.
    pub fn new(d_v: usize, d_t: usize, k_max: usize) -> Self {
        Self {
            d_model: 256,
            n_layers: 4,
            n_heads: 8,
            d_v,
            d_t,
            k_max,
            dropout: 0.1,
            d_ff: 512,
            max_frames: 64,
            frame_position_embeddings: true,
            k_decode: KDecode::Argmax,
        }
    }

    /// Small encoder that trains in seconds on a CPU.
    pub fn compact(d_v: usize, d_t: usize, k_max: usize) -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            dropout: 0.0,
            ..Self::new(d_v, d_t, k_max)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("k_max", self.k_max),
            ("d_ff", self.d_ff),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The four independently trainable parts of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupName {
    Projectors,
    Encoder,
    RankHead,
    KHead,
}

impl GroupName {
    pub const ALL: [GroupName; 4] = [
        GroupName::Projectors,
        GroupName::Encoder,
        GroupName::RankHead,
        GroupName::KHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::Projectors => "projectors",
            GroupName::Encoder => "encoder",
            GroupName::RankHead => "rank_head",
            GroupName::KHead => "k_head",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupName::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::UnknownGroup(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: GroupName,
    pub trainable: bool,
    pub tensors: Vec<NamedTensor>,
}

/// All learnable tensors, partitioned by [`GroupName`] in declaration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorParams {
    config: SelectorConfig,
    groups: Vec<ParamGroup>,
}

// Tensor positions inside each group.
const VISUAL_W: usize = 0;
const VISUAL_B: usize = 1;
const TEXT_W: usize = 2;
const TEXT_B: usize = 3;
const FRAME_POS: usize = 4;

const LAYER_TENSORS: usize = 13;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const BO: usize = 6;
const LN2_G: usize = 7;
const LN2_B: usize = 8;
const FF1_W: usize = 9;
const FF1_B: usize = 10;
const FF2_W: usize = 11;
const FF2_B: usize = 12;

const HEAD_W1: usize = 0;
const HEAD_B1: usize = 1;
const HEAD_W2: usize = 2;
const HEAD_B2: usize = 3;

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn xavier(&mut self, rows: usize, cols: usize) -> Matrix {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        Matrix::from_vec(rows, cols, data)
    }
}

fn tensor(name: impl Into<String>, value: Matrix) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        value,
    }
}

/// Deterministic initialisation: identical `(config, seed)` gives
/// bit-identical parameters. Every group starts trainable.
pub fn init_params(config: &SelectorConfig, seed: u64) -> Result<SelectorParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let d = config.d_model;

    let projectors = vec![
        tensor("visual_w", init.xavier(config.d_v, d)),
        tensor("visual_b", Matrix::zeros(1, d)),
        tensor("text_w", init.xavier(config.d_t, d)),
        tensor("text_b", Matrix::zeros(1, d)),
        tensor("frame_pos", init.normal(config.max_frames, d, 0.02)),
    ];

    let mut encoder = Vec::with_capacity(config.n_layers * LAYER_TENSORS + 2);
    for l in 0..config.n_layers {
        let name = |s: &str| format!("layer{l}.{s}");
        encoder.extend([
            tensor(name("ln1_g"), Matrix::filled(1, d, 1.0)),
            tensor(name("ln1_b"), Matrix::zeros(1, d)),
            tensor(name("wq"), init.xavier(d, d)),
            tensor(name("wk"), init.xavier(d, d)),
            tensor(name("wv"), init.xavier(d, d)),
            tensor(name("wo"), init.xavier(d, d)),
            tensor(name("bo"), Matrix::zeros(1, d)),
            tensor(name("ln2_g"), Matrix::filled(1, d, 1.0)),
            tensor(name("ln2_b"), Matrix::zeros(1, d)),
            tensor(name("ff1_w"), init.xavier(d, config.d_ff)),
            tensor(name("ff1_b"), Matrix::zeros(1, config.d_ff)),
            tensor(name("ff2_w"), init.xavier(config.d_ff, d)),
            tensor(name("ff2_b"), Matrix::zeros(1, d)),
        ]);
    }
    encoder.push(tensor("final_ln_g", Matrix::filled(1, d, 1.0)));
    encoder.push(tensor("final_ln_b", Matrix::zeros(1, d)));

    let rank_head = vec![
        tensor("w1", init.xavier(d, d)),
        tensor("b1", Matrix::zeros(1, d)),
        tensor("w2", init.xavier(d, 1)),
        tensor("b2", Matrix::zeros(1, 1)),
    ];
    let k_head = vec![
        tensor("w1", init.xavier(d, d)),
        tensor("b1", Matrix::zeros(1, d)),
        tensor("w2", init.xavier(d, config.k_max)),
        tensor("b2", Matrix::zeros(1, config.k_max)),
    ];

    let groups = [projectors, encoder, rank_head, k_head]
        .into_iter()
        .zip(GroupName::ALL)
        .map(|(tensors, name)| ParamGroup {
            name,
            trainable: true,
            tensors,
        })
        .collect();
    Ok(SelectorParams {
        config: config.clone(),
        groups,
    })
}

/// Raw network outputs for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub scores: Vec<f64>,
    pub k_logits: Vec<f64>,
}

impl ForwardOutput {
    pub fn score_vector(&self) -> Result<ScoreVector> {
        ScoreVector::new(self.scores.clone())
    }

    pub fn k_distribution(&self) -> Result<KDistribution> {
        KDistribution::from_logits(&self.k_logits)
    }
}

/// Gradient of an objective with respect to the network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub scores: Vec<f64>,
    pub k_logits: Vec<f64>,
}

/// Per-tensor gradients laid out like [`SelectorParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub groups: Vec<Vec<Matrix>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &SelectorParams) -> Self {
        Self {
            groups: params
                .groups
                .iter()
                .map(|g| {
                    g.tensors
                        .iter()
                        .map(|t| Matrix::zeros(t.value.rows(), t.value.cols()))
                        .collect()
                })
                .collect(),
        }
    }

    fn absorb(&mut self, grads: Gradients) {
        for (id, g) in grads.params {
            self.groups[id.group][id.tensor].add_assign(&g);
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.groups.iter_mut().flatten().for_each(|m| m.scale(factor));
    }

    pub fn get(&self, group: GroupName, tensor: usize) -> &Matrix {
        &self.groups[group.index()][tensor]
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(Matrix::is_finite)
    }
}

/// Dropout source for a training-mode forward pass.
pub type DropoutRng = ChaCha8Rng;

impl SelectorParams {
    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: GroupName) -> &ParamGroup {
        &self.groups[name.index()]
    }

    pub fn group_mut(&mut self, name: GroupName) -> &mut ParamGroup {
        &mut self.groups[name.index()]
    }

    pub(crate) fn from_parts(config: SelectorConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, 0)?;
        if groups.len() != GroupName::ALL.len() {
            return Err(Error::validation("expected exactly four parameter groups"));
        }
        for (g, r) in groups.iter().zip(&reference.groups) {
            if g.name != r.name || g.tensors.len() != r.tensors.len() {
                return Err(Error::validation(format!("group `{}` has the wrong layout", r.name)));
            }
            for (t, rt) in g.tensors.iter().zip(&r.tensors) {
                if t.name != rt.name || t.value.shape() != rt.value.shape() {
                    return Err(Error::validation(format!(
                        "tensor `{}` in `{}` has the wrong name or shape",
                        rt.name, r.name
                    )));
                }
                if !t.value.is_finite() {
                    return Err(Error::NonFinite(format!("{}.{}", r.name, rt.name)));
                }
            }
        }
        Ok(Self { config, groups })
    }

    pub fn trainable_groups(&self) -> BTreeSet<GroupName> {
        self.groups.iter().filter(|g| g.trainable).map(|g| g.name).collect()
    }

    /// Copy with the given groups' trainable flags replaced. Groups not
    /// mentioned keep their flag.
    pub fn set_trainable<I, S>(&self, flags: I) -> Result<SelectorParams>
    where
        I: IntoIterator<Item = (S, bool)>,
        S: AsRef<str>,
    {
        let mut out = self.clone();
        for (name, flag) in flags {
            let group: GroupName = name.as_ref().parse()?;
            out.group_mut(group).trainable = flag;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flat_map(|g| &g.tensors).all(|t| t.value.is_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.tensors).map(|t| t.value.len()).sum()
    }

    /// Scores and count distribution for one candidate set and prompt.
    pub fn forward(&self, frames: &CandidateSet, prompt: &PromptEncoding) -> Result<(ScoreVector, KDistribution)> {
        let out = self.forward_raw(frames, prompt)?;
        Ok((out.score_vector()?, out.k_distribution()?))
    }

    /// Inference-mode forward pass returning raw scores and count logits.
    pub fn forward_raw(&self, frames: &CandidateSet, prompt: &PromptEncoding) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.build(&mut tape, frames, prompt, None)?;
        read_outputs(&tape, vars)
    }

    /// Forward pass, then back-propagation of `objective`, which receives the
    /// raw outputs and returns the loss with its gradient w.r.t. those outputs.
    pub fn loss_and_grad<F>(
        &self,
        frames: &CandidateSet,
        prompt: &PromptEncoding,
        dropout: Option<&mut DropoutRng>,
        objective: F,
    ) -> Result<(f64, ParamGrads)>
    where
        F: FnOnce(&ForwardOutput) -> Result<(f64, OutputGrad)>,
    {
        let mut tape = Tape::new();
        let vars = self.build(&mut tape, frames, prompt, dropout)?;
        let out = read_outputs(&tape, vars)?;
        let (loss, grad) = objective(&out)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let n = out.scores.len();
        let seeds = vec![
            (vars.scores, Matrix::from_vec(n, 1, grad.scores)),
            (vars.k_logits, Matrix::from_vec(1, self.config.k_max, grad.k_logits)),
        ];
        let mut grads = ParamGrads::zeros_like(self);
        grads.absorb(tape.backward_many(seeds));
        Ok((loss, grads))
    }

    fn build(
        &self,
        tape: &mut Tape,
        frames: &CandidateSet,
        prompt: &PromptEncoding,
        mut dropout: Option<&mut DropoutRng>,
    ) -> Result<OutputVars> {
        let cfg = &self.config;
        let n = frames.len();
        let t = prompt.token_count();
        if frames.embedding_width() != cfg.d_v {
            return Err(Error::Dimension {
                context: "frame embedding width",
                expected: cfg.d_v,
                actual: frames.embedding_width(),
            });
        }
        if prompt.embedding_width() != cfg.d_t {
            return Err(Error::Dimension {
                context: "prompt embedding width",
                expected: cfg.d_t,
                actual: prompt.embedding_width(),
            });
        }
        if n > cfg.max_frames {
            return Err(Error::Dimension {
                context: "candidate set length (max_frames)",
                expected: cfg.max_frames,
                actual: n,
            });
        }

        let p = |tape: &mut Tape, group: GroupName, idx: usize| {
            tape.param(
                ParamId {
                    group: group.index(),
                    tensor: idx,
                },
                self.groups[group.index()].tensors[idx].value.clone(),
            )
        };
        let drop_rate = if dropout.is_some() { cfg.dropout } else { 0.0 };
        let mut apply_dropout = |tape: &mut Tape, x: Var| -> Var {
            match dropout.as_deref_mut() {
                Some(rng) if drop_rate > 0.0 => {
                    let (r, c) = tape.value(x).shape();
                    let keep = 1.0 / (1.0 - drop_rate);
                    let mask = (0..r * c)
                        .map(|_| if rng.random::<f64>() < drop_rate { 0.0 } else { keep })
                        .collect();
                    tape.mask(x, Matrix::from_vec(r, c, mask))
                }
                _ => x,
            }
        };

        use GroupName::*;
        let frame_in = tape.input(frames.embeddings().clone());
        let w = p(tape, Projectors, VISUAL_W);
        let b = p(tape, Projectors, VISUAL_B);
        let xf = tape.matmul(frame_in, w);
        let mut xf = tape.add_row(xf, b);
        if cfg.frame_position_embeddings {
            let pos = p(tape, Projectors, FRAME_POS);
            let pos = tape.slice_rows(pos, 0, n);
            xf = tape.add(xf, pos);
        }
        let text_in = tape.input(prompt.embeddings().clone());
        let w = p(tape, Projectors, TEXT_W);
        let b = p(tape, Projectors, TEXT_B);
        let xt = tape.matmul(text_in, w);
        let xt = tape.add_row(xt, b);
        let mut x = tape.concat_rows(&[xf, xt]);

        let text_offset = -(t as f64).ln();
        let key_bias: Vec<f64> = (0..n + t).map(|i| if i < n { 0.0 } else { text_offset }).collect();
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        for l in 0..cfg.n_layers {
            let base = l * LAYER_TENSORS;
            let g = p(tape, Encoder, base + LN1_G);
            let bb = p(tape, Encoder, base + LN1_B);
            let h = tape.layer_norm(x, g, bb);
            let wq = p(tape, Encoder, base + WQ);
            let wk = p(tape, Encoder, base + WK);
            let wv = p(tape, Encoder, base + WV);
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, inv_sqrt);
                let a = tape.softmax_rows(s, Some(&key_bias));
                heads.push(tape.matmul(a, vh));
            }
            let cat = if heads.len() == 1 {
                heads[0]
            } else {
                tape.concat_cols(&heads)
            };
            let wo = p(tape, Encoder, base + WO);
            let bo = p(tape, Encoder, base + BO);
            let o = tape.matmul(cat, wo);
            let o = tape.add_row(o, bo);
            let o = apply_dropout(tape, o);
            x = tape.add(x, o);

            let g = p(tape, Encoder, base + LN2_G);
            let bb = p(tape, Encoder, base + LN2_B);
            let h = tape.layer_norm(x, g, bb);
            let w1 = p(tape, Encoder, base + FF1_W);
            let b1 = p(tape, Encoder, base + FF1_B);
            let w2 = p(tape, Encoder, base + FF2_W);
            let b2 = p(tape, Encoder, base + FF2_B);
            let f = tape.matmul(h, w1);
            let f = tape.add_row(f, b1);
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            let f = apply_dropout(tape, f);
            x = tape.add(x, f);
        }
        let final_base = cfg.n_layers * LAYER_TENSORS;
        let g = p(tape, Encoder, final_base);
        let bb = p(tape, Encoder, final_base + 1);
        let x = tape.layer_norm(x, g, bb);
        let frame_out = tape.slice_rows(x, 0, n);

        let head = |tape: &mut Tape, group: GroupName, input: Var| {
            let w1 = p(tape, group, HEAD_W1);
            let b1 = p(tape, group, HEAD_B1);
            let w2 = p(tape, group, HEAD_W2);
            let b2 = p(tape, group, HEAD_B2);
            let h = tape.matmul(input, w1);
            let h = tape.add_row(h, b1);
            let h = tape.gelu(h);
            let o = tape.matmul(h, w2);
            tape.add_row(o, b2)
        };
        let scores = head(tape, RankHead, frame_out);
        let pooled = tape.mean_rows(frame_out);
        let k_logits = head(tape, KHead, pooled);
        Ok(OutputVars { scores, k_logits })
    }
}

#[derive(Clone, Copy)]
struct OutputVars {
    scores: Var,
    k_logits: Var,
}

fn read_outputs(tape: &Tape, vars: OutputVars) -> Result<ForwardOutput> {
    let scores = tape.value(vars.scores).as_slice().to_vec();
    let k_logits = tape.value(vars.k_logits).as_slice().to_vec();
    if scores.iter().chain(&k_logits).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("selector forward outputs".into()));
    }
    Ok(ForwardOutput { scores, k_logits })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    fn inputs(n: usize, t: usize, dv: usize, dt: usize, seed: u64) -> (CandidateSet, PromptEncoding) {
        let frames = CandidateSet::uniform("v", random_matrix(n, dv, seed), 64 * 30, 30.0).unwrap();
        let prompt = PromptEncoding::new("q", random_matrix(t, dt, seed + 1)).unwrap();
        (frames, prompt)
    }

    fn small_config() -> SelectorConfig {
        SelectorConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 24,
            dropout: 0.0,
            ..SelectorConfig::new(6, 5, 16)
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_config();
        assert_eq!(init_params(&cfg, 1).unwrap(), init_params(&cfg, 1).unwrap());
        assert_ne!(init_params(&cfg, 1).unwrap(), init_params(&cfg, 2).unwrap());
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = SelectorConfig {
            d_model: 64,
            n_heads: 5,
            ..small_config()
        };
        assert!(matches!(init_params(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes_follow_inputs() {
        let params = init_params(&small_config(), 3).unwrap();
        let (frames, prompt) = inputs(16, 8, 6, 5, 9);
        let (scores, dist) = params.forward(&frames, &prompt).unwrap();
        assert_eq!(scores.len(), 16);
        assert_eq!(dist.k_max(), 16);
        assert!((dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let params = init_params(&small_config(), 3).unwrap();
        let (frames, prompt) = inputs(4, 3, 7, 5, 9);
        assert!(matches!(params.forward(&frames, &prompt), Err(Error::Dimension { .. })));
    }

    #[test]
    fn too_many_frames_is_rejected() {
        let cfg = SelectorConfig {
            max_frames: 4,
            ..small_config()
        };
        let params = init_params(&cfg, 3).unwrap();
        let (frames, prompt) = inputs(5, 3, 6, 5, 9);
        assert!(params.forward(&frames, &prompt).is_err());
    }

    #[test]
    fn scores_are_permutation_equivariant_without_positions() {
        let cfg = SelectorConfig {
            frame_position_embeddings: false,
            ..small_config()
        };
        let params = init_params(&cfg, 5).unwrap();
        let (frames, prompt) = inputs(10, 4, 6, 5, 11);
        let perm = [3usize, 7, 0, 9, 1, 5, 2, 8, 6, 4];
        let (base, _) = params.forward(&frames, &prompt).unwrap();
        let (permuted, _) = params.forward(&frames.reordered(&perm).unwrap(), &prompt).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            assert!((permuted.as_slice()[j] - base.as_slice()[src]).abs() < 1e-5);
        }
    }

    #[test]
    fn repeated_prompt_tokens_do_not_change_outputs() {
        let params = init_params(&small_config(), 8).unwrap();
        let (frames, prompt) = inputs(8, 5, 6, 5, 21);
        let emb = prompt.embeddings();
        let mut doubled = emb.as_slice().to_vec();
        doubled.extend_from_slice(emb.as_slice());
        let prompt2 = PromptEncoding::new("q", Matrix::from_vec(10, 5, doubled)).unwrap();
        let a = params.forward_raw(&frames, &prompt).unwrap();
        let b = params.forward_raw(&frames, &prompt2).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x - y).abs() < 1e-4);
        }
        for (x, y) in a.k_logits.iter().zip(&b.k_logits) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn zeroed_rank_head_gives_equal_scores() {
        let mut params = init_params(&small_config(), 2).unwrap();
        for t in &mut params.group_mut(GroupName::RankHead).tensors {
            t.value = Matrix::zeros(t.value.rows(), t.value.cols());
        }
        let (frames, prompt) = inputs(12, 4, 6, 5, 1);
        let (scores, _) = params.forward(&frames, &prompt).unwrap();
        assert!(scores.as_slice().iter().all(|&s| s == scores.as_slice()[0]));
        assert_eq!(crate::types::top_k_positions(scores.as_slice(), 3), vec![0, 1, 2]);
    }

    #[test]
    fn set_trainable_rejects_unknown_groups() {
        let params = init_params(&small_config(), 2).unwrap();
        assert!(matches!(
            params.set_trainable([("decoder", false)]),
            Err(Error::UnknownGroup(_))
        ));
        let frozen = params.set_trainable([("k_head", false)]).unwrap();
        assert!(!frozen.group(GroupName::KHead).trainable);
        assert!(frozen.group(GroupName::RankHead).trainable);
    }

    #[test]
    fn dropout_only_applies_in_training_mode() {
        let cfg = SelectorConfig {
            dropout: 0.5,
            ..small_config()
        };
        let params = init_params(&cfg, 2).unwrap();
        let (frames, prompt) = inputs(6, 3, 6, 5, 1);
        let a = params.forward_raw(&frames, &prompt).unwrap();
        let b = params.forward_raw(&frames, &prompt).unwrap();
        assert_eq!(a, b);
        let mut rng = DropoutRng::seed_from_u64(0);
        let (_, grads) = params
            .loss_and_grad(&frames, &prompt, Some(&mut rng), |out| {
                Ok((
                    out.scores.iter().sum(),
                    OutputGrad {
                        scores: vec![1.0; out.scores.len()],
                        k_logits: vec![0.0; out.k_logits.len()],
                    },
                ))
            })
            .unwrap();
        assert!(grads.is_finite());
    }
}
