use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use relab_core::algorithms::{group_update, opmd_grad, reinforce_grad};
use relab_core::oracle::{finite_diff_grad, optimal_kl_regularized_policy, FD_STEP};
use relab_core::rng::RandomStream;
use relab_core::trainer::{run, ExactEvaluator, OptimizerConfig};
use relab_core::{
    AlgorithmConfig, AlgorithmKind, ClipConfig, LossNorm, RewardRule, ScheduleConfig, SequenceTask, TabularPolicy,
    Task, TokenSeq,
};

fn task(v: usize, l: usize) -> Task {
    let prompts = vec![TokenSeq::new(), TokenSeq::from_ids(&[0])];
    Task::Sequence(SequenceTask::new(v, l, prompts, None, RewardRule::Parity).unwrap())
}

fn sampling(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_group");
    for (v, l) in [(3, 3), (4, 5), (6, 6)] {
        let t = task(v, l);
        let pol = TabularPolicy::random(t.shape(), 1.0, &mut RandomStream::from_seed(1));
        let prompt = t.prompts()[0].clone();
        g.bench_with_input(BenchmarkId::from_parameter(format!("V{v}_L{l}_K64")), &(), |b, _| {
            let mut rng = RandomStream::from_seed(2);
            b.iter(|| t.generate_group(&pol, &prompt, 64, 0, &mut rng).unwrap())
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let t = task(4, 5);
    let mut rng = RandomStream::from_seed(3);
    let anchor = TabularPolicy::random(t.shape(), 1.0, &mut rng);
    let pol = TabularPolicy::random(t.shape(), 1.0, &mut rng);
    let prompt = t.prompts()[0].clone();
    let group = t.generate_group(&anchor, &prompt, 64, 0, &mut rng).unwrap();

    let mut g = c.benchmark_group("group_gradient_K64");
    g.bench_function("reinforce", |b| {
        b.iter(|| reinforce_grad(black_box(&group), &pol, LossNorm::PerGroupK).unwrap())
    });
    g.bench_function("opmd", |b| {
        b.iter(|| opmd_grad(black_box(&group), &pol, &anchor, 0.5).unwrap())
    });
    for (name, cfg) in [
        (
            "grpo",
            AlgorithmConfig::new(AlgorithmKind::Grpo).with_clip(ClipConfig::new(0.2, 0.2).unwrap()),
        ),
        (
            "rec_ring",
            AlgorithmConfig::new(AlgorithmKind::RecRingNoIs)
                .with_clip(ClipConfig::with_outer(0.2, 0.2, 0.6, 2.0).unwrap()),
        ),
        ("red_weight", AlgorithmConfig::new(AlgorithmKind::RedWeight)),
    ] {
        g.bench_function(name, |b| {
            let mut rng = RandomStream::from_seed(4);
            b.iter(|| group_update(&cfg, black_box(&group), &pol, &mut rng).unwrap())
        });
    }
    g.finish();
}

fn oracles(c: &mut Criterion) {
    let t = task(4, 5);
    let mut rng = RandomStream::from_seed(5);
    let anchor = TabularPolicy::random(t.shape(), 1.0, &mut rng);
    let prompt = t.prompts()[0].clone();
    let evaluator = ExactEvaluator::new(&t).unwrap();

    let mut g = c.benchmark_group("oracle_V4_L5");
    g.bench_function("exact_metrics", |b| {
        b.iter(|| evaluator.evaluate(black_box(&anchor), &anchor))
    });
    g.bench_function("optimal_kl_regularized_policy", |b| {
        b.iter(|| optimal_kl_regularized_policy(&t, black_box(&anchor), 0.5, &prompt).unwrap())
    });
    g.finish();

    let small = task(3, 3);
    let pol = TabularPolicy::random(small.shape(), 1.0, &mut rng);
    let group = small.generate_group(&pol, &small.prompts()[0], 8, 0, &mut rng).unwrap();
    c.bench_function("finite_diff_opmd_V3_L3", |b| {
        b.iter(|| {
            finite_diff_grad(
                |p| relab_core::algorithms::opmd_loss(&group, p, &pol, 0.5),
                black_box(&pol),
                FD_STEP,
            )
            .unwrap()
        })
    });
}

fn training(c: &mut Criterion) {
    let bandit = Task::Bandit(relab_core::BanditTask::new(vec![0.0, 0.8, 1.0]).unwrap());
    let init = TabularPolicy::zeros(bandit.shape())
        .with_root_probs(&[0.3, 0.6, 0.1])
        .unwrap();
    let opt = OptimizerConfig {
        eta: 0.5,
        grad_clip_norm: None,
        steps: 100,
        batch_prompts: 1,
        k: 1024,
        seed: 0,
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("bandit_K1024_100_steps", |b| {
        b.iter(|| {
            run(
                &bandit,
                &init,
                &AlgorithmConfig::new(AlgorithmKind::Reinforce),
                &ScheduleConfig::offline(),
                &opt,
            )
            .unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, sampling, gradients, oracles, training);
criterion_main!(benches);
