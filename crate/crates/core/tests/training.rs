use relab_core::algorithms::{AlgorithmConfig, AlgorithmKind, ClipConfig};
use relab_core::rng::RandomStream;
use relab_core::scheduler::ScheduleConfig;
use relab_core::tasks::{MultiStepTask, TrajectoryReward};
use relab_core::trainer::{read_metrics, run, run_with, write_metrics, Checkpoint, OptimizerConfig};
use relab_core::{RewardRule, SequenceTask, TabularPolicy, Task, TokenSeq};

fn sequence_task() -> Task {
    let prompts = vec![TokenSeq::new(), TokenSeq::from_ids(&[1])];
    let targets = vec![TokenSeq::from_ids(&[0, 1, 2]), TokenSeq::from_ids(&[1, 2])];
    Task::Sequence(SequenceTask::new(3, 3, prompts, None, RewardRule::TargetMatch { targets }).unwrap())
}

fn multi_step_task() -> Task {
    Task::MultiStep(
        MultiStepTask::new(
            4,
            2,
            3,
            vec![1, 2, 3, 0, 3, 1, 3, 3],
            vec![0],
            TrajectoryReward::ReachGoal { goal: 3 },
        )
        .unwrap(),
    )
}

fn opt(steps: u64, seed: u64) -> OptimizerConfig {
    OptimizerConfig {
        eta: 0.5,
        grad_clip_norm: None,
        steps,
        batch_prompts: 2,
        k: 8,
        seed,
    }
}

fn config_for(kind: AlgorithmKind) -> AlgorithmConfig {
    let mut c = AlgorithmConfig::new(kind).with_tau(0.5);
    if kind.uses_clip() {
        let clip = if kind == AlgorithmKind::RecRingNoIs {
            ClipConfig::with_outer(0.2, 0.2, 0.6, 2.0).unwrap()
        } else {
            ClipConfig::new(0.2, 0.2).unwrap()
        };
        c = c.with_clip(clip);
    }
    c
}

#[test]
fn every_algorithm_trains_without_error() {
    for kind in AlgorithmKind::ALL {
        let task = if kind == AlgorithmKind::MultiStepReinforce {
            multi_step_task()
        } else {
            sequence_task()
        };
        let init = TabularPolicy::zeros(task.shape());
        let out = run(
            &task,
            &init,
            &config_for(kind),
            &ScheduleConfig::new(2, 1).unwrap(),
            &opt(6, 1),
        )
        .unwrap_or_else(|e| panic!("{kind}: {e}"));
        assert_eq!(out.metrics.len(), 6, "{kind}");
        for m in &out.metrics {
            assert!(m.mean_reward.is_finite() && m.kl_to_init >= 0.0, "{kind}: {m:?}");
            assert!((0.0..=1.0).contains(&m.clip_fraction), "{kind}: {m:?}");
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let task = sequence_task();
    let init = TabularPolicy::random(task.shape(), 0.5, &mut RandomStream::from_seed(9));
    let algo = config_for(AlgorithmKind::RedDrop);
    let sched = ScheduleConfig::new(3, 2).unwrap();
    let go = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&task, &init, &algo, &sched, &opt(15, 4)).unwrap())
    };
    let one = go(1);
    let four = go(4);
    assert_eq!(one.metrics, four.metrics);
    assert_eq!(one.policy, four.policy);
}

#[test]
fn recorded_staleness_follows_the_schedule() {
    let task = sequence_task();
    let init = TabularPolicy::zeros(task.shape());
    let algo = AlgorithmConfig::new(AlgorithmKind::Reinforce);
    for sched in [
        ScheduleConfig::on_policy(),
        ScheduleConfig::offline(),
        ScheduleConfig::new(4, 0).unwrap(),
        ScheduleConfig::new(2, 3).unwrap(),
    ] {
        let out = run(&task, &init, &algo, &sched, &opt(12, 0)).unwrap();
        for m in &out.metrics {
            assert_eq!(
                m.off_policyness,
                sched.off_policyness(m.step),
                "{sched:?} step {}",
                m.step
            );
        }
    }
}

#[test]
fn streamed_records_match_returned_metrics() {
    let task = sequence_task();
    let init = TabularPolicy::zeros(task.shape());
    let mut seen = Vec::new();
    let out = run_with(
        &task,
        &init,
        &AlgorithmConfig::new(AlgorithmKind::Grpo).with_clip(ClipConfig::new(0.2, 0.2).unwrap()),
        &ScheduleConfig::new(2, 0).unwrap(),
        &opt(10, 2),
        |r| {
            seen.push(r.clone());
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(seen, out.metrics);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    write_metrics(&path, &out.metrics).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), out.metrics);
}

#[test]
fn checkpoint_file_round_trips_trained_policy() {
    let task = multi_step_task();
    let init = TabularPolicy::zeros(task.shape());
    let out = run(
        &task,
        &init,
        &AlgorithmConfig::new(AlgorithmKind::MultiStepReinforce),
        &ScheduleConfig::on_policy(),
        &opt(30, 5),
    )
    .unwrap();
    let ckpt = Checkpoint {
        policy: out.policy.clone(),
        seed: 5,
        step: 30,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
    bytes.truncate(bytes.len() - 2);
    assert!(Checkpoint::read_from(bytes.as_slice()).is_err());
}

#[test]
fn opmd_improves_multi_step_reward() {
    let task = multi_step_task();
    let init = TabularPolicy::zeros(task.shape());
    let out = run(
        &task,
        &init,
        &AlgorithmConfig::new(AlgorithmKind::Opmd).with_tau(0.5),
        &ScheduleConfig::new(4, 0).unwrap(),
        &OptimizerConfig {
            grad_clip_norm: Some(5.0),
            ..opt(150, 1)
        },
    )
    .unwrap();
    let first = out.metrics[0].mean_reward;
    let last = out.metrics.last().unwrap().mean_reward;
    assert!(last > 0.9 && last > first, "{first} -> {last}");
}
