//! `frameoracle` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage, validation or configuration errors,
//! 2 when an external backend fails.

use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use frameoracle::answers::AnswerMatcher;
use frameoracle::backends::{BackendConfig, BackendSuite, PlantedWorld};
use frameoracle::harness::{
    dataset_stats, evaluate, examples_from_dataset, read_dataset, read_embeddings, select, select_topk,
    write_dataset_json, write_histograms, EvalMode, EvalOptions, DEFAULT_TOKENS_PER_FRAME,
};
use frameoracle::pipeline::{build_dataset, load_corpus, MiningConfig, MiningReport, PromptTemplates};
use frameoracle::selector::{init_params, load_checkpoint, save_checkpoint};
use frameoracle::trainer::{run_curriculum, CurriculumData, TrainConfig, TrainExample, Variant};
use frameoracle::types::{CandidateSet, TaskRecord};
use frameoracle::{Error, Exec, Result};

#[derive(Parser, Debug)]
#[command(
    name = "frameoracle",
    version,
    about = "Adaptive keyframe selection for video question answering"
)]
struct Cli {
    /// Overrides the seed from the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Command configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Backend configuration file (TOML); defaults to the planted world.
    #[arg(long, global = true)]
    backends: Option<PathBuf>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run curriculum stages on the configured world.
    Train(TrainArgs),
    /// Mine and verify keyframes for a corpus.
    Mine(MineArgs),
    /// Select frames for one video and prompt.
    Select(SelectArgs),
    /// Evaluate a checkpoint on a dataset or on world examples.
    Eval(EvalArgs),
    /// Summary statistics and histograms of a dataset.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `frames16` or `frames64`; sets the candidate-set size.
    #[arg(long)]
    variant: Option<Variant>,
    /// Stage range such as `1-4` or `3`.
    #[arg(long, default_value = "1-4", value_parser = parse_stages)]
    stages: RangeInclusive<u8>,
    /// Output directory for per-stage checkpoints, metrics and targets.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to start from instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Number of world examples to train on (the first ones).
    #[arg(long)]
    examples: Option<usize>,
}

#[derive(Args, Debug)]
struct MineArgs {
    /// JSONL corpus of {video, question, answer}; defaults to every world example.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Stage II relevance threshold.
    #[arg(long = "lambda")]
    lambda_rel: Option<u8>,
    /// Output directory for the dataset, trajectory log, discards and stats.
    #[arg(long)]
    out: PathBuf,
    /// Concurrent mining instances (capped by verifier limits).
    #[arg(long)]
    workers: Option<usize>,
    /// Directory with `stage1_initial.txt` and `stage2_deepdive.txt`.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Compare answers by their leading option letter.
    #[arg(long)]
    multiple_choice: bool,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Precomputed frame embeddings file.
    #[arg(long, conflicts_with = "video")]
    embeddings: Option<PathBuf>,
    /// Video to encode with the configured visual encoder.
    #[arg(long, required_unless_present = "embeddings")]
    video: Option<String>,
    /// Question or instruction the frames should answer.
    #[arg(long)]
    prompt: String,
    /// `adaptive` or `topk:K`.
    #[arg(long, default_value = "adaptive")]
    mode: EvalMode,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; without it, world examples `--ids` are used.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// World example range `start..end`.
    #[arg(long, conflicts_with = "dataset", value_parser = parse_ids)]
    ids: Option<std::ops::Range<u64>>,
    /// `adaptive` or `topk:K`.
    #[arg(long, default_value = "adaptive")]
    mode: EvalMode,
    /// Visual tokens per frame for the token estimate.
    #[arg(long, default_value_t = DEFAULT_TOKENS_PER_FRAME)]
    tokens_per_frame: f64,
    /// Compare answers by their leading option letter.
    #[arg(long)]
    multiple_choice: bool,
    /// Write the full report (with per-example rows) here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Dataset file (JSON array or JSONL).
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for `stats.json` and the histogram CSV/SVG files.
    #[arg(long)]
    out: PathBuf,
}

fn parse_stages(s: &str) -> std::result::Result<RangeInclusive<u8>, String> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let lo: u8 = a.trim().parse().map_err(|_| format!("bad stage `{a}`"))?;
    let hi: u8 = b.trim().parse().map_err(|_| format!("bad stage `{b}`"))?;
    if !(1..=4).contains(&lo) || !(1..=4).contains(&hi) || lo > hi {
        return Err(format!("stage range `{s}` must lie within 1-4"));
    }
    Ok(lo..=hi)
}

fn parse_ids(s: &str) -> std::result::Result<std::ops::Range<u64>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected start..end, got `{s}`"))?;
    let lo: u64 = a.parse().map_err(|_| format!("bad id `{a}`"))?;
    let hi: u64 = b.parse().map_err(|_| format!("bad id `{b}`"))?;
    if lo >= hi {
        return Err(format!("empty id range `{s}`"));
    }
    Ok(lo..hi)
}

fn backend_config(cli: &Cli) -> Result<BackendConfig> {
    let mut cfg = match &cli.backends {
        Some(p) => BackendConfig::load(p)?,
        None => BackendConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.world.seed = seed;
    }
    Ok(cfg)
}

fn exec(cli: &Cli) -> Exec {
    if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    let mut bcfg = backend_config(cli)?;
    bcfg.world.n_frames = cfg.variant.n_frames();
    if let Some(n) = args.examples {
        bcfg.world.n_examples = n;
    }
    let backends = bcfg.build()?;
    let world = backends
        .world
        .clone()
        .ok_or_else(|| Error::config("training needs a planted world"))?;
    let data = TrainExample::range_from_world(&world, 0..world.len() as u64)?;
    let params = match &args.resume {
        Some(dir) => load_checkpoint(dir)?,
        None => init_params(
            &cfg.selector_config(world.config().latent_dim, world.config().latent_dim)?,
            cfg.seed,
        )?,
    };
    let stages: Vec<_> = cfg
        .stage_configs()?
        .into_iter()
        .filter(|s| args.stages.contains(&s.stage))
        .collect();
    let mut opts = cfg.train_options()?;
    opts.exec = exec(cli);
    opts.out_dir = Some(args.out.clone());
    let out = run_curriculum(
        params,
        cfg.seed,
        &stages,
        &CurriculumData::shared(data),
        &backends,
        &opts,
    )?;
    save_checkpoint(&out.params, &args.out.join("final"))?;
    let stages: Vec<_> = out
        .reports
        .iter()
        .map(|r| json!({"stage": r.stage, "steps": r.history.len(), "initial_loss": r.initial_loss(), "final_loss": r.final_loss()}))
        .collect();
    print_json(
        &json!({"variant": cfg.variant.to_string(), "seed": cfg.seed, "stages": stages, "checkpoint": args.out.join("final")}),
    )
}

fn mine(cli: &Cli, args: &MineArgs) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            toml::from_str::<MiningConfig>(&std::fs::read_to_string(p)?).map_err(|e| Error::config(e.to_string()))?
        }
        None => MiningConfig::default(),
    };
    if let Some(l) = args.lambda_rel {
        if !(1..=5).contains(&l) {
            return Err(Error::validation("--lambda must lie in 1..=5"));
        }
        cfg.lambda_rel = l;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if args.multiple_choice {
        cfg.matcher = AnswerMatcher::MultipleChoice;
    }
    let mut bcfg = backend_config(cli)?;
    if cli.backends.is_none() {
        bcfg.world = frameoracle::backends::PlantedConfig::mining(bcfg.world.seed, 200);
    }
    let backends = bcfg.build()?;
    let corpus: Vec<TaskRecord> = match &args.corpus {
        Some(p) => load_corpus(p)?,
        None => world_records(&backends)?,
    };
    let templates = match &args.templates {
        Some(dir) => PromptTemplates::load_dir(dir)?,
        None => PromptTemplates::default(),
    };
    let build = build_dataset(&corpus, &backends, &templates, &cfg, exec(cli))?;
    std::fs::create_dir_all(&args.out)?;
    write_dataset_json(&args.out.join("dataset.json"), &build.examples)?;
    build.write_logs(&args.out.join("trajectories.jsonl"))?;
    let report = MiningReport::from(&build);
    std::fs::write(args.out.join("discards.json"), serde_json::to_string_pretty(&report)?)?;
    if !build.examples.is_empty() {
        write_histograms(&dataset_stats(&build.examples)?, &args.out.join("stats"))?;
    }
    print_json(&serde_json::to_value(&report)?)
}

fn world_records(backends: &BackendSuite) -> Result<Vec<TaskRecord>> {
    let world: &Arc<PlantedWorld> = backends
        .world
        .as_ref()
        .ok_or_else(|| Error::config("no corpus given and no planted world configured"))?;
    (0..world.len() as u64).map(|i| Ok(world.task_record(i)?)).collect()
}

fn select_cmd(cli: &Cli, args: &SelectArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let backends = backend_config(cli)?.build()?;
    let frames = match (&args.embeddings, &args.video) {
        (Some(path), _) => {
            let m = read_embeddings(path)?;
            let n = m.rows() as u64;
            CandidateSet::uniform(path.display().to_string(), m, n.max(1), 1.0)?
        }
        (None, Some(video)) => backends
            .visual_encoder()?
            .encode_video(video, params.config().max_frames)?,
        (None, None) => return Err(Error::validation("pass --embeddings or --video")),
    };
    let prompt = backends.text_encoder()?.encode(&args.prompt)?;
    let sel = match args.mode {
        EvalMode::Adaptive => select(&params, &frames, &prompt)?,
        EvalMode::TopK(k) => select_topk(&params, &frames, &prompt, k)?,
    };
    print_json(&json!({
        "mode": args.mode.to_string(),
        "chosen_k": sel.chosen_k(),
        "selected_indices": sel.selected_indices(),
        "frame_indices": sel.selected_indices().iter().map(|&i| frames.frame_indices()[i]).collect::<Vec<_>>(),
        "scores": sel.scores().as_slice(),
        "k_distribution": sel.k_distribution().probs(),
    }))
}

fn eval_cmd(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let params = load_checkpoint(&args.checkpoint)?;
    let mut bcfg = backend_config(cli)?;
    bcfg.world.n_frames = params.config().max_frames;
    if let Some(ids) = &args.ids {
        // examples do not depend on the world size, so held-out ids can lie past it
        bcfg.world.n_examples = bcfg.world.n_examples.max(ids.end as usize);
    }
    let backends = bcfg.build()?;
    let examples = match (&args.dataset, &args.ids) {
        (Some(path), _) => examples_from_dataset(&read_dataset(path)?, &backends, params.config().max_frames)?,
        (None, Some(ids)) => {
            let world = backends
                .world
                .as_ref()
                .ok_or_else(|| Error::config("--ids needs a planted world"))?;
            TrainExample::range_from_world(world, ids.clone())?
        }
        (None, None) => return Err(Error::validation("pass --dataset or --ids")),
    };
    let opts = EvalOptions {
        mode: args.mode,
        matcher: if args.multiple_choice {
            AnswerMatcher::MultipleChoice
        } else {
            AnswerMatcher::Normalized
        },
        tokens_per_frame: args.tokens_per_frame,
    };
    let report = evaluate(&params, &examples, backends.qa_oracle()?, &opts, exec(cli))?;
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&json!({
        "mode": report.mode.to_string(),
        "n_examples": report.n_examples,
        "mean_chosen_k": report.mean_chosen_k,
        "accuracy": report.accuracy,
        "backend_failures": report.backend_failures,
        "keyframe_recall": report.keyframe_recall,
        "keyframe_precision": report.keyframe_precision,
        "mean_abs_k_error": report.mean_abs_k_error,
        "token_estimate_mean": report.token_estimate_mean,
    }))
}

fn stats_cmd(args: &StatsArgs) -> Result<()> {
    let stats = dataset_stats(&read_dataset(&args.dataset)?)?;
    write_histograms(&stats, &args.out)?;
    print_json(&json!({
        "n_examples": stats.n_examples,
        "keyframes": stats.keyframes,
        "frac_at_most_10": stats.frac_at_most_10,
        "duration": stats.duration,
        "outputs": args.out,
    }))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Mine(a) => mine(cli, a),
        Command::Select(a) => select_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Stats(a) => stats_cmd(a),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_backend() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
