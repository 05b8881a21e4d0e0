//! Sequential vs rayon fan-out for attack scoring, plus one training step.
//!
//! Without the `parallel` feature both variants run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pialab_core::attacks::{score_targets, AttackMethod, MethodKind, Target};
use pialab_core::data::{gen_dataset, DatasetKind};
use pialab_core::model::{EpsilonModel, ModelArch};
use pialab_core::parallel::Execution;
use pialab_core::schedule::{DiscreteSchedule, NoiseSchedule, Time};
use pialab_core::train::batch_loss_and_grad;

fn scoring(c: &mut Criterion) {
    let sched = NoiseSchedule::Discrete(DiscreteSchedule::linear(100, 1e-4, 0.005).unwrap());
    let model = EpsilonModel::new(ModelArch::standard(2), 3).unwrap();
    let ds = gen_dataset(DatasetKind::GaussianMixture, 256, 2, 0).unwrap();
    let targets: Vec<Target<'_>> = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, x0)| Target {
            sample_id: i,
            is_member: i % 2 == 0,
            x0,
        })
        .collect();

    let mut group = c.benchmark_group("score_targets");
    for kind in [MethodKind::Pia, MethodKind::SecMi] {
        let method = AttackMethod::new(kind, 20usize, 4.0);
        for exec in [Execution::Sequential, Execution::Parallel] {
            group.bench_with_input(
                BenchmarkId::new(kind.tag(), format!("{exec:?}")),
                &exec,
                |b, &exec| b.iter(|| score_targets(&model, black_box(&targets), &method, &sched, exec).unwrap()),
            );
        }
    }
    group.finish();

    let xs: Vec<&[f64]> = ds.samples.iter().take(64).map(|s| s.data()).collect();
    let ts: Vec<Time> = (0..xs.len()).map(|i| Time::Step(1 + i % 100)).collect();
    let noise: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| -v).collect()).collect();
    c.bench_function("batch_loss_and_grad/64", |b| {
        b.iter(|| batch_loss_and_grad(&model, black_box(&xs), &ts, &noise, &sched).unwrap())
    });
}

criterion_group!(benches, scoring);
criterion_main!(benches);
