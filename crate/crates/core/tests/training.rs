use ncp_core::denoiser::{Arch, DenoiserModel};
use ncp_core::objectives::{CleanPair, ObjectiveConfig, ObjectiveKind};
use ncp_core::pref_graph::filter_dataset;
use ncp_core::rng::{gaussian_vec, rng_from};
use ncp_core::schedule::VarianceSchedule;
use ncp_core::train_eval::*;
use ncp_core::Error;

fn setup() -> (ToyTask, VarianceSchedule, Arch) {
    let task = ToyTask::default();
    let sched = VarianceSchedule::linear(50, 2e-3, 0.3).unwrap();
    let arch = Arch {
        input_dim: 2,
        hidden: 32,
        embed: 8,
        conditions: 4,
        timesteps: 50,
    };
    (task, sched, arch)
}

fn quick_pretrain() -> PretrainConfig {
    PretrainConfig {
        steps: 1500,
        batch_size: 64,
        eval_batch: 512,
        ..PretrainConfig::default()
    }
}

fn base() -> (ToyTask, VarianceSchedule, DenoiserModel) {
    let (task, sched, arch) = setup();
    let (m, _) = pretrain(&task, arch, &sched, &quick_pretrain(), 11).unwrap();
    (task, sched, m)
}

fn pairs(task: &ToyTask, seed: u64) -> Vec<CleanPair> {
    let corpus = make_toy_preferences(task, 300, 4, seed).unwrap();
    let (kept, _) = filter_dataset(&corpus.records).unwrap();
    ToyCorpus::clean_pairs(&kept, &corpus.items).unwrap()
}

fn train_cfg(kind: ObjectiveKind, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 16,
        eval_every: 50,
        eval_prompts: 100,
        objective: ObjectiveConfig {
            beta_t_product: 20.0,
            ..ObjectiveConfig::new(kind)
        },
        ..TrainConfig::default()
    }
}

#[test]
fn pretraining_halves_the_loss_and_is_deterministic() {
    let (task, sched, arch) = setup();
    let (a, log) = pretrain(&task, arch, &sched, &quick_pretrain(), 11).unwrap();
    assert!(log.final_loss < 0.5 * log.initial_loss, "{log:?}");
    let (b, _) = pretrain(&task, arch, &sched, &quick_pretrain(), 11).unwrap();
    let bits = |m: &DenoiserModel| m.params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn pretraining_rejects_mismatched_architecture() {
    let (task, sched, arch) = setup();
    let wrong = Arch {
        conditions: 3,
        ..arch
    };
    assert!(matches!(
        pretrain(&task, wrong, &sched, &quick_pretrain(), 1),
        Err(Error::ArchMismatch(_))
    ));
}

#[test]
fn pretraining_diverges_loudly() {
    let (task, sched, arch) = setup();
    let cfg = PretrainConfig {
        steps: 50,
        optimizer: OptimizerConfig {
            learning_rate: 1e150,
            ..OptimizerConfig::default()
        },
        ..quick_pretrain()
    };
    match pretrain(&task, arch, &sched, &cfg, 1) {
        Err(Error::Divergence { step, .. }) => assert!(step < 50),
        other => panic!("expected divergence, got {other:?}"),
    }
}

struct NoiseOnly;
impl Generator for NoiseOnly {
    fn generate(&self, _c: usize, seed: u64) -> ncp_core::Result<Vec<f64>> {
        Ok(gaussian_vec(&mut rng_from(seed), 2))
    }
}

#[test]
fn pretrained_samples_beat_noise_and_sit_near_modes() {
    let (task, sched, m) = base();
    let prompts = held_out_prompts(&task, 200, 5);
    let sampler = DiffusionSampler {
        model: &m,
        sched: &sched,
        n_steps: 50,
    };
    let model_r = mean_reward(&sampler, &task, &prompts).unwrap();
    let noise_r = mean_reward(&NoiseOnly, &task, &prompts).unwrap();
    assert!(model_r > noise_r, "{model_r} vs {noise_r}");
    // Data samples sit at squared distance 2 * spread^2 = 0.5 on average.
    assert!(model_r > -1.0, "{model_r}");
    // Strided sampling still lands near the modes.
    let strided = DiffusionSampler {
        n_steps: 10,
        ..sampler
    };
    assert!(mean_reward(&strided, &task, &prompts).unwrap() > noise_r);
}

#[test]
fn zero_steps_returns_base() {
    let (task, sched, m) = base();
    let out = train_preference(
        &m,
        &sched,
        &task,
        &pairs(&task, 1),
        &train_cfg(ObjectiveKind::NcpDpo, 0),
        3,
    )
    .unwrap();
    assert_eq!(out.model, m);
    assert!(out.metrics.is_empty());
}

#[test]
fn dpo_starts_at_ln2_and_logs_monotone_metrics() {
    let (task, sched, m) = base();
    let out = train_preference(
        &m,
        &sched,
        &task,
        &pairs(&task, 1),
        &train_cfg(ObjectiveKind::Dpo, 120),
        3,
    )
    .unwrap();
    let first = &out.metrics[0];
    assert_eq!(first.step, 0);
    assert!((first.loss - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(first.win_rate, 0.5);
    let steps: Vec<usize> = out.metrics.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 50, 100, 120]);
    assert!(out
        .metrics
        .windows(2)
        .all(|w| w[0].wall_clock_seconds <= w[1].wall_clock_seconds));
    for r in &out.metrics {
        assert!(r.loss.is_finite() && r.mean_reward.is_finite() && r.win_rate.is_finite());
        assert_eq!(r.per_term["loss"], r.loss);
    }
}

#[test]
fn reference_is_untouched_and_training_is_reproducible() {
    let (task, sched, m) = base();
    let before = m.clone();
    let data = pairs(&task, 2);
    let cfg = train_cfg(ObjectiveKind::NcpCpo, 40);
    let a = train_preference(&m, &sched, &task, &data, &cfg, 9).unwrap();
    let b = train_preference(&m, &sched, &task, &data, &cfg, 9).unwrap();
    assert_eq!(m, before);
    assert!(a.reference.is_frozen());
    assert_eq!(a.reference.params(), before.params());
    assert_ne!(a.model.params(), before.params());
    assert_eq!(a.model, b.model);
    let losses = |o: &TrainOutcome| {
        o.metrics
            .iter()
            .map(|r| r.loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn ncp_dpo_improves_reward_over_base() {
    let (task, sched, m) = base();
    let out = train_preference(
        &m,
        &sched,
        &task,
        &pairs(&task, 3),
        &train_cfg(ObjectiveKind::NcpDpo, 400),
        4,
    )
    .unwrap();
    let prompts = held_out_prompts(&task, 300, 77);
    let s = |model| DiffusionSampler {
        model,
        sched: &sched,
        n_steps: 50,
    };
    let base_r = mean_reward(&s(&m), &task, &prompts).unwrap();
    let tuned_r = mean_reward(&s(&out.model), &task, &prompts).unwrap();
    assert!(tuned_r > base_r, "{tuned_r} <= {base_r}");
    assert!(win_rate(&s(&out.model), &s(&m), &task, &prompts).unwrap() > 0.5);
}

#[test]
fn training_rejects_bad_inputs() {
    let (task, sched, m) = base();
    let cfg = train_cfg(ObjectiveKind::Dpo, 5);
    assert!(matches!(
        train_preference(&m, &sched, &task, &[], &cfg, 1),
        Err(Error::EmptyBatch)
    ));
    let other = VarianceSchedule::linear(20, 1e-3, 0.2).unwrap();
    assert!(train_preference(&m, &other, &task, &pairs(&task, 1), &cfg, 1).is_err());
    let bad = TrainConfig {
        batch_size: 0,
        ..cfg
    };
    assert!(train_preference(&m, &sched, &task, &pairs(&task, 1), &bad, 1).is_err());
}

#[test]
fn time_budget_stops_training() {
    let (task, sched, m) = base();
    let cfg = TrainConfig {
        steps: usize::MAX,
        eval_every: 1_000_000,
        time_budget_seconds: Some(0.2),
        ..train_cfg(ObjectiveKind::Sft, 0)
    };
    let out = train_preference(&m, &sched, &task, &pairs(&task, 1), &cfg, 1).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert!(out.metrics[1].step > 0);
}
