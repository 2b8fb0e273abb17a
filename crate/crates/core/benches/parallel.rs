//! Sequential vs data-parallel execution on the loops the policy controls:
//! per-example gradients, leave-one-out sweeps, evaluation and mining.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use frameoracle::backends::{BackendSuite, PlantedConfig, PlantedWorld, SimilarityTeacher};
use frameoracle::harness::{evaluate, EvalOptions};
use frameoracle::objectives::{loo_targets, pairwise_labels, ranknet_loss_grad};
use frameoracle::pipeline::{build_dataset, MiningConfig, PromptTemplates};
use frameoracle::selector::{init_params, OutputGrad, SelectorConfig};
use frameoracle::trainer::TrainExample;
use frameoracle::types::TaskRecord;
use frameoracle::Exec;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn selector_workloads(c: &mut Criterion) {
    let world = Arc::new(
        PlantedWorld::generate(PlantedConfig {
            n_examples: 64,
            ..PlantedConfig::default()
        })
        .unwrap(),
    );
    let examples = TrainExample::range_from_world(&world, 0..64).unwrap();
    let d = world.config().latent_dim;
    let params = init_params(&SelectorConfig::compact(d, d, 16), 0).unwrap();
    let backends = BackendSuite::planted(world.clone(), 1);
    let qa = backends.qa_oracle().unwrap();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                exec.map(&examples, |ex| {
                    let teacher = world.score_all(&ex.frames, &ex.prompt).unwrap();
                    let labels = pairwise_labels(&teacher);
                    params
                        .loss_and_grad(&ex.frames, &ex.prompt, None, |out| {
                            let (l, g) = ranknet_loss_grad(&out.scores, &labels)?;
                            Ok((
                                l,
                                OutputGrad {
                                    scores: g,
                                    k_logits: vec![0.0; out.k_logits.len()],
                                },
                            ))
                        })
                        .unwrap()
                        .0
                })
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("loo_sweep");
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                for ex in &examples[..16] {
                    black_box(loo_targets(&ex.frames, &ex.record, world.as_ref(), exec).unwrap());
                }
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate(&params, &examples, qa, &EvalOptions::default(), exec).unwrap()))
        });
    }
    group.finish();
}

fn mining(c: &mut Criterion) {
    let world = Arc::new(PlantedWorld::generate(PlantedConfig::mining(0, 32)).unwrap());
    let corpus: Vec<TaskRecord> = (0..32).map(|id| world.task_record(id).unwrap()).collect();
    let suite = BackendSuite::planted(world, 3);
    let templates = PromptTemplates::default();
    let cfg = MiningConfig::default();
    let mut group = c.benchmark_group("build_dataset");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(build_dataset(&corpus, &suite, &templates, &cfg, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, selector_workloads, mining);
criterion_main!(benches);
