//! Reproducibility: execution policy, reruns and resumed training must not
//! change any output.

use std::sync::Arc;

use frameoracle::backends::{BackendSuite, EvidenceSizes, PlantedConfig, PlantedWorld};
use frameoracle::harness::{evaluate, write_dataset_json, EvalOptions};
use frameoracle::pipeline::{build_dataset, MiningConfig, PromptTemplates};
use frameoracle::selector::{init_params, load_checkpoint, SelectorConfig, SelectorParams};
use frameoracle::trainer::{
    default_stage_configs, run_curriculum, CurriculumData, StageConfig, TrainExample, TrainOptions, Variant,
};
use frameoracle::types::TaskRecord;
use frameoracle::Exec;

fn mined_bytes(exec: Exec) -> (Vec<u8>, Vec<u8>) {
    let world = Arc::new(PlantedWorld::generate(PlantedConfig::mining(3, 30)).unwrap());
    let corpus: Vec<TaskRecord> = (0..30).map(|id| world.task_record(id).unwrap()).collect();
    let suite = BackendSuite::planted(world, 2);
    let build = build_dataset(
        &corpus,
        &suite,
        &PromptTemplates::default(),
        &MiningConfig::default(),
        exec,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset_json(&dir.path().join("d.json"), &build.examples).unwrap();
    build.write_logs(&dir.path().join("t.jsonl")).unwrap();
    (
        std::fs::read(dir.path().join("d.json")).unwrap(),
        std::fs::read(dir.path().join("t.jsonl")).unwrap(),
    )
}

#[test]
fn mining_output_is_byte_identical_across_runs_and_policies() {
    let seq = mined_bytes(Exec::Sequential);
    assert_eq!(seq, mined_bytes(Exec::Parallel));
    assert_eq!(seq, mined_bytes(Exec::Parallel));
}

fn small_setup() -> (Arc<PlantedWorld>, Vec<TrainExample>, SelectorParams, Vec<StageConfig>) {
    let world = Arc::new(
        PlantedWorld::generate(PlantedConfig {
            seed: 5,
            n_examples: 24,
            n_frames: 8,
            latent_dim: 8,
            evidence: EvidenceSizes::Uniform { min: 1, max: 3 },
            ..PlantedConfig::default()
        })
        .unwrap(),
    );
    let data = TrainExample::range_from_world(&world, 0..24).unwrap();
    let params = init_params(&SelectorConfig::compact(8, 8, 8), 5).unwrap();
    let stages = default_stage_configs(Variant::Frames16)
        .into_iter()
        .map(|mut s| {
            s.max_steps = 12;
            s.batch_size = s.batch_size.min(4);
            s
        })
        .collect();
    (world, data, params, stages)
}

#[test]
fn resuming_after_stage_two_matches_an_uninterrupted_run() {
    let (world, data, params, stages) = small_setup();
    let backends = BackendSuite::planted(world, 1);
    let data = CurriculumData::shared(data);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        lr_scale: 50.0,
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    let full = run_curriculum(params.clone(), 9, &stages, &data, &backends, &opts).unwrap();

    let partial_dir = tempfile::tempdir().unwrap();
    let partial_opts = TrainOptions {
        out_dir: Some(partial_dir.path().to_path_buf()),
        ..opts.clone()
    };
    run_curriculum(params, 9, &stages[..2], &data, &backends, &partial_opts).unwrap();
    let resumed_from = load_checkpoint(&partial_dir.path().join("stage2")).unwrap();
    assert_eq!(resumed_from, load_checkpoint(&dir.path().join("stage2")).unwrap());
    let resumed = run_curriculum(resumed_from, 9, &stages[2..], &data, &backends, &opts).unwrap();
    assert_eq!(resumed.params, full.params);
}

#[test]
fn training_and_evaluation_do_not_depend_on_the_policy() {
    let (world, data, params, stages) = small_setup();
    let backends = BackendSuite::planted(world, 1);
    let shared = CurriculumData::shared(data.clone());
    let run = |exec| {
        let opts = TrainOptions {
            exec,
            lr_scale: 50.0,
            ..TrainOptions::default()
        };
        run_curriculum(params.clone(), 1, &stages, &shared, &backends, &opts)
            .unwrap()
            .params
    };
    let seq = run(Exec::Sequential);
    assert_eq!(seq, run(Exec::Parallel));

    let qa = backends.qa_oracle().unwrap();
    let a = evaluate(&seq, &data, qa, &EvalOptions::default(), Exec::Sequential).unwrap();
    let b = evaluate(&seq, &data, qa, &EvalOptions::default(), Exec::Parallel).unwrap();
    assert_eq!(a, b);
}
