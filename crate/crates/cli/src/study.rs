//! Equal-budget comparison on the toy task: NCP-DPO against the pretrained
//! model and against SFT, and NCP-DPO on curated pairs against NCP-DPO on the
//! raw (contradiction-heavy) corpus.

use std::collections::BTreeMap;

use anyhow::Result;
use ncp_core::objectives::{CleanPair, ObjectiveKind};
use ncp_core::pref_graph::filter_dataset;
use ncp_core::rng::derive_seed;
use ncp_core::schedule::VarianceSchedule;
use ncp_core::train_eval::{
    held_out_prompts, make_toy_preferences, pretrain, prompt_rewards, train_preference,
    win_rate_from_rewards, DiffusionSampler, MetricRecord, PretrainLog, ToyCorpus, TrainConfig,
    TrainOutcome,
};

use crate::config::RunConfig;

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub seed: u64,
    pub pretrain: PretrainLog,
    pub raw_pairs: usize,
    pub filtered_pairs: usize,
    /// Metric log of NCP-DPO on curated pairs.
    pub ncp_metrics: Vec<MetricRecord>,
    /// Mean reward of the pretrained model on the metric prompts.
    pub baseline_reward: f64,
    /// Held-out mean reward per run, keyed by run name.
    pub mean_rewards: BTreeMap<String, f64>,
    pub steps: BTreeMap<String, usize>,
    pub win_rate_vs_sft: f64,
    pub win_rate_filtered_vs_raw: f64,
}

impl StudyOutcome {
    /// Every metric point in the second half of the run (by training time)
    /// has a higher mean reward than the pretrained model.
    pub fn curve_dominates_baseline(&self) -> bool {
        let Some(end) = self.ncp_metrics.last() else {
            return false;
        };
        let mid = end.wall_clock_seconds / 2.0;
        let tail: Vec<_> = self
            .ncp_metrics
            .iter()
            .filter(|m| m.wall_clock_seconds >= mid)
            .collect();
        !tail.is_empty() && tail.iter().all(|m| m.mean_reward > self.baseline_reward)
    }

    /// Pass/fail of the three comparisons: curve dominance, win rate against
    /// SFT, win rate of curated against raw data.
    pub fn checks(&self, cfg: &RunConfig) -> [bool; 3] {
        [
            self.curve_dominates_baseline(),
            self.win_rate_vs_sft >= cfg.study.min_win_rate_vs_sft,
            self.win_rate_filtered_vs_raw >= cfg.study.min_win_rate_filtered_vs_raw,
        ]
    }
}

pub const NCP_FILTERED: &str = "ncp-dpo/filtered";
pub const SFT_FILTERED: &str = "sft/filtered";
pub const NCP_RAW: &str = "ncp-dpo/raw";

pub fn run_study(cfg: &RunConfig, seed: u64) -> Result<StudyOutcome> {
    cfg.validate()?;
    let sched = VarianceSchedule::from_spec(&cfg.schedule)?;
    let (base, log) = pretrain(
        &cfg.task,
        cfg.arch(),
        &sched,
        &cfg.pretrain,
        derive_seed(seed, "study/pretrain"),
    )?;
    let corpus = make_toy_preferences(
        &cfg.task,
        cfg.data.n_prompts,
        cfg.data.samples_per_prompt,
        derive_seed(seed, "study/data"),
    )?;
    let (kept, _) = filter_dataset(&corpus.records)?;
    let raw = ToyCorpus::clean_pairs(&corpus.records, &corpus.items)?;
    let filtered = ToyCorpus::clean_pairs(&kept, &corpus.items)?;

    let train_seed = derive_seed(seed, "study/train");
    let run = |kind: ObjectiveKind, pairs: &[CleanPair]| -> Result<TrainOutcome> {
        let mut tc: TrainConfig = cfg.train.clone();
        tc.steps = usize::MAX;
        tc.time_budget_seconds = Some(cfg.study.budget_seconds);
        tc.objective.kind = kind;
        Ok(train_preference(
            &base, &sched, &cfg.task, pairs, &tc, train_seed,
        )?)
    };
    let runs = [
        (NCP_FILTERED, run(ObjectiveKind::NcpDpo, &filtered)?),
        (SFT_FILTERED, run(ObjectiveKind::Sft, &filtered)?),
        (NCP_RAW, run(ObjectiveKind::NcpDpo, &raw)?),
    ];

    let prompts = held_out_prompts(
        &cfg.task,
        cfg.eval.prompts,
        derive_seed(seed, "study/held-out"),
    );
    let n_steps = cfg.eval.sampling_steps.unwrap_or(sched.timesteps());
    let mut rewards = BTreeMap::new();
    let mut steps = BTreeMap::new();
    for (name, out) in &runs {
        let sampler = DiffusionSampler {
            model: &out.model,
            sched: &sched,
            n_steps,
        };
        rewards.insert(*name, prompt_rewards(&sampler, &cfg.task, &prompts)?);
        steps.insert(name.to_string(), out.metrics.last().map_or(0, |m| m.step));
    }
    let mean = |r: &Vec<f64>| r.iter().sum::<f64>() / r.len() as f64;
    let [(_, ncp), ..] = runs;
    Ok(StudyOutcome {
        seed,
        pretrain: log,
        raw_pairs: raw.len(),
        filtered_pairs: filtered.len(),
        baseline_reward: ncp.baseline_reward.unwrap_or(f64::NAN),
        ncp_metrics: ncp.metrics,
        mean_rewards: rewards
            .iter()
            .map(|(k, r)| (k.to_string(), mean(r)))
            .collect(),
        steps,
        win_rate_vs_sft: win_rate_from_rewards(&rewards[NCP_FILTERED], &rewards[SFT_FILTERED])?,
        win_rate_filtered_vs_raw: win_rate_from_rewards(&rewards[NCP_FILTERED], &rewards[NCP_RAW])?,
    })
}
