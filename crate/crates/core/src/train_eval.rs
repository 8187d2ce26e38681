//! Toy conditional task, synthetic preferences, training loops and paired
//! evaluation.
//!
//! The task places one Gaussian mode per condition; the hidden reward is the
//! negative squared distance to that condition's mode, standing in for a
//! learned preference scorer.

use std::collections::BTreeMap;
use std::time::Instant;

use cpu_time::ThreadTime;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Arch, Condition, DenoiserModel, FrozenEncoder, NoisePredictor};
use crate::error::{check_dim, Error, Result};
use crate::objectives::{
    CleanPair, ObjectiveConfig, ObjectiveContext, ObjectiveKind, PairBatch, TermMap,
};
use crate::pref_graph::PreferenceRecord;
use crate::rng::{derive_indexed, derive_seed, gaussian_vec, rng_from};
use crate::schedule::{sq_dist, VarianceSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTask {
    pub num_conditions: usize,
    pub dim: usize,
    /// Side length of the square (or hypercube face) whose corners hold the modes.
    pub mode_side: f64,
    /// Standard deviation of the data around each mode.
    pub spread: f64,
    /// Scale on `spread` for candidates drawn when simulating annotations.
    pub candidate_sharpening: f64,
    /// Probability that a simulated annotator reverses a comparison.
    pub flip_prob: f64,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            num_conditions: 4,
            dim: 2,
            mode_side: 4.0,
            spread: 0.5,
            candidate_sharpening: 1.0,
            flip_prob: 0.1,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.num_conditions == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig(
                "task needs at least one condition and dimension".into(),
            ));
        }
        if self.dim < 63 && self.num_conditions > 1usize << self.dim {
            return Err(Error::InvalidConfig(format!(
                "{} conditions do not fit on the corners of a {}-cube",
                self.num_conditions, self.dim
            )));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::InvalidConfig("spread must be positive".into()));
        }
        if !(self.mode_side > 0.0 && self.mode_side.is_finite()) {
            return Err(Error::InvalidConfig("mode_side must be positive".into()));
        }
        if !(self.candidate_sharpening > 0.0 && self.candidate_sharpening.is_finite()) {
            return Err(Error::InvalidConfig(
                "candidate_sharpening must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::InvalidConfig("flip_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Mode of condition `c`: corner `c` of a cube of side `mode_side`
    /// centred at the origin (bit `k` of `c` picks the sign of axis `k`).
    /// The corner order walks the square's perimeter in 2-D.
    pub fn mode(&self, c: Condition) -> Vec<f64> {
        let h = self.mode_side / 2.0;
        // Gray code so consecutive conditions are adjacent corners.
        let g = c ^ (c >> 1);
        (0..self.dim)
            .map(|k| if (g >> k) & 1 == 1 { -h } else { h })
            .collect()
    }

    pub fn modes(&self) -> Vec<Vec<f64>> {
        (0..self.num_conditions).map(|c| self.mode(c)).collect()
    }

    fn check_condition(&self, c: Condition) -> Result<()> {
        if c < self.num_conditions {
            Ok(())
        } else {
            Err(Error::ConditionOutOfRange {
                c,
                count: self.num_conditions,
            })
        }
    }

    pub fn sample_data(&self, c: Condition, rng: &mut crate::rng::Rng) -> Vec<f64> {
        self.sample_scaled(c, self.spread, rng)
    }

    fn sample_scaled(&self, c: Condition, scale: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
        self.mode(c)
            .iter()
            .zip(gaussian_vec(rng, self.dim))
            .map(|(m, g)| m + scale * g)
            .collect()
    }
}

/// `-||x - mode_c||^2`: zero at the mode, decreasing with distance.
pub fn synth_reward(task: &ToyTask, c: Condition, x: &[f64]) -> Result<f64> {
    task.check_condition(c)?;
    check_dim("x", task.dim, x.len())?;
    Ok(-sq_dist(x, &task.mode(c)))
}

/// A candidate point referenced by preference records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyItem {
    pub item_id: String,
    pub prompt_id: String,
    pub condition: Condition,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub records: Vec<PreferenceRecord>,
    pub items: Vec<ToyItem>,
}

impl ToyCorpus {
    /// Resolves win records to clean pairs; draws are skipped.
    pub fn clean_pairs(records: &[PreferenceRecord], items: &[ToyItem]) -> Result<Vec<CleanPair>> {
        let index: BTreeMap<(&str, &str), &ToyItem> = items
            .iter()
            .map(|it| ((it.prompt_id.as_str(), it.item_id.as_str()), it))
            .collect();
        let lookup = |p: &str, id: &str| {
            index.get(&(p, id)).copied().ok_or_else(|| {
                Error::MalformedRecord(format!("unknown item `{id}` under prompt `{p}`"))
            })
        };
        records
            .iter()
            .filter(|r| r.outcome == crate::pref_graph::Outcome::Win)
            .map(|r| {
                let w = lookup(&r.prompt_id, &r.winner_id)?;
                let l = lookup(&r.prompt_id, &r.loser_id)?;
                if w.condition != l.condition {
                    return Err(Error::MalformedRecord(format!(
                        "items of prompt `{}` disagree on the condition",
                        r.prompt_id
                    )));
                }
                Ok(CleanPair {
                    c: w.condition,
                    x_w: w.x.clone(),
                    x_l: l.x.clone(),
                })
            })
            .collect()
    }
}

/// Number of records `make_toy_preferences` emits.
pub fn toy_record_count(n_prompts: usize, samples_per_prompt: usize) -> usize {
    n_prompts * samples_per_prompt * samples_per_prompt.saturating_sub(1) / 2
}

/// Simulated annotation: every prompt draws a condition and
/// `samples_per_prompt` candidates, and every candidate pair is compared by
/// `synth_reward`, reversed with probability `flip_prob`.
pub fn make_toy_preferences(
    task: &ToyTask,
    n_prompts: usize,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<ToyCorpus> {
    task.validate()?;
    if samples_per_prompt < 2 {
        return Err(Error::InvalidConfig(
            "samples_per_prompt must be at least 2".into(),
        ));
    }
    let mut records = Vec::with_capacity(toy_record_count(n_prompts, samples_per_prompt));
    let mut items = Vec::with_capacity(n_prompts * samples_per_prompt);
    let mut timestamp = 0i64;
    let width = samples_per_prompt.to_string().len();
    for p in 0..n_prompts {
        let mut rng = rng_from(derive_indexed(seed, "toy/prompt", p as u64));
        let c = rng.random_range(0..task.num_conditions);
        let prompt_id = format!("p{p:06}");
        let cands: Vec<ToyItem> = (0..samples_per_prompt)
            .map(|i| ToyItem {
                item_id: format!("{prompt_id}-i{i:0width$}"),
                prompt_id: prompt_id.clone(),
                condition: c,
                x: task.sample_scaled(c, task.spread * task.candidate_sharpening, &mut rng),
            })
            .collect();
        let scores: Vec<f64> = cands
            .iter()
            .map(|it| synth_reward(task, c, &it.x))
            .collect::<Result<_>>()?;
        for i in 0..cands.len() {
            for j in i + 1..cands.len() {
                let (mut w, mut l) = if scores[j] > scores[i] {
                    (j, i)
                } else {
                    (i, j)
                };
                if rng.random::<f64>() < task.flip_prob {
                    std::mem::swap(&mut w, &mut l);
                }
                records.push(PreferenceRecord::win(
                    &prompt_id,
                    &cands[w].item_id,
                    &cands[l].item_id,
                    timestamp,
                ));
                timestamp += 1;
            }
        }
        items.extend(cands);
    }
    Ok(ToyCorpus { records, items })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Parameter increment for one step.
    pub fn delta(&mut self, grad: &[f64]) -> Vec<f64> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .map(|((m, v), g)| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                -self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig(
                "optimizer moments must lie in [0, 1)".into(),
            ));
        }
        if self.eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidConfig(
                "optimizer eps must be positive".into(),
            ));
        }
        Ok(())
    }

    fn build(&self, n: usize) -> Adam {
        Adam::new(n, self.learning_rate, self.beta1, self.beta2, self.eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Size of the fixed batch used to report initial and final loss.
    pub eval_batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 64,
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                ..OptimizerConfig::default()
            },
            eval_batch: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLog {
    pub initial_loss: f64,
    pub final_loss: f64,
}

fn data_pairs(task: &ToyTask, n: usize, seed: u64) -> Vec<CleanPair> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..task.num_conditions);
            let x = task.sample_data(c, &mut rng);
            CleanPair {
                c,
                x_w: x.clone(),
                x_l: x,
            }
        })
        .collect()
}

/// Plain noise-prediction training on fresh task samples.
pub fn pretrain(
    task: &ToyTask,
    arch: Arch,
    sched: &VarianceSchedule,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(DenoiserModel, PretrainLog)> {
    task.validate()?;
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 || cfg.eval_batch == 0 {
        return Err(Error::InvalidConfig("batch sizes must be positive".into()));
    }
    if arch.input_dim != task.dim || arch.conditions != task.num_conditions {
        return Err(Error::ArchMismatch(
            "architecture does not match the task".into(),
        ));
    }
    let mut model = DenoiserModel::init(arch, derive_seed(seed, "pretrain/init"))?;
    model.check_schedule(sched)?;
    let obj = ObjectiveConfig::new(ObjectiveKind::Sft);
    let ctx = ObjectiveContext {
        sched,
        cfg: &obj,
        reference: None,
        encoder: None,
    };
    let eval = PairBatch::sample(
        &data_pairs(
            task,
            cfg.eval_batch,
            derive_seed(seed, "pretrain/eval-data"),
        ),
        sched.timesteps(),
        true,
        derive_seed(seed, "pretrain/eval-noise"),
    )?;
    let initial_loss = ctx.evaluate(&model, &eval)?.loss;
    let mut opt = cfg.optimizer.build(model.param_count());
    for step in 0..cfg.steps {
        let pairs = data_pairs(
            task,
            cfg.batch_size,
            derive_indexed(seed, "pretrain/data", step as u64),
        );
        let batch = PairBatch::sample(
            &pairs,
            sched.timesteps(),
            true,
            derive_indexed(seed, "pretrain/noise", step as u64),
        )?;
        let rep = ctx.evaluate(&model, &batch).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence {
                step,
                loss: f64::NAN,
            },
            e => e,
        })?;
        if !rep.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: rep.loss,
            });
        }
        model.apply_update(&opt.delta(&rep.grad))?;
    }
    let final_loss = ctx.evaluate(&model, &eval)?.loss;
    Ok((
        model,
        PretrainLog {
            initial_loss,
            final_loss,
        },
    ))
}

/// Something that produces one sample per `(condition, seed)`.
pub trait Generator: Sync {
    fn generate(&self, c: Condition, seed: u64) -> Result<Vec<f64>>;
}

/// Ancestral DDPM sampling with `n_steps` evenly spaced steps (all `T` steps
/// when `n_steps == T`).
pub fn sample_from(
    model: &dyn NoisePredictor,
    sched: &VarianceSchedule,
    c: Condition,
    n_steps: usize,
    seed: u64,
    dim: usize,
) -> Result<Vec<f64>> {
    let big_t = sched.timesteps();
    if n_steps == 0 || n_steps > big_t {
        return Err(Error::InvalidConfig(format!(
            "n_steps must lie in [1, {big_t}]"
        )));
    }
    let mut rng = rng_from(seed);
    let mut x = gaussian_vec(&mut rng, dim);
    if n_steps == big_t {
        for t in (1..=big_t).rev() {
            let eps_hat = model.predict_noise(&x, c, t)?;
            let z = gaussian_vec(&mut rng, dim);
            x = sched.reverse_raw(&x, t, &eps_hat, &z);
        }
        return Ok(x);
    }
    let taus: Vec<usize> = (1..=n_steps)
        .map(|i| (i * big_t).div_ceil(n_steps))
        .collect();
    for i in (0..n_steps).rev() {
        let t = taus[i];
        let ab = sched.alpha_bar(t);
        let ab_prev = if i == 0 {
            1.0
        } else {
            sched.alpha_bar(taus[i - 1])
        };
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let coef = if ab < 1.0 {
            beta / (1.0 - ab).sqrt()
        } else {
            0.0
        };
        let sigma = if ab < 1.0 {
            (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
        } else {
            0.0
        };
        let eps_hat = model.predict_noise(&x, c, t)?;
        let z = gaussian_vec(&mut rng, dim);
        let inv = 1.0 / alpha.sqrt();
        x = x
            .iter()
            .zip(&eps_hat)
            .zip(&z)
            .map(|((xi, e), zi)| inv * (xi - coef * e) + sigma * zi)
            .collect();
    }
    Ok(x)
}

pub struct DiffusionSampler<'a> {
    pub model: &'a DenoiserModel,
    pub sched: &'a VarianceSchedule,
    pub n_steps: usize,
}

impl Generator for DiffusionSampler<'_> {
    fn generate(&self, c: Condition, seed: u64) -> Result<Vec<f64>> {
        sample_from(
            self.model,
            self.sched,
            c,
            self.n_steps,
            seed,
            self.model.arch().input_dim,
        )
    }
}

/// A held-out evaluation prompt: a condition plus the sampling seed shared by
/// every model evaluated on it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalPrompt {
    pub c: Condition,
    pub seed: u64,
}

pub fn held_out_prompts(task: &ToyTask, n: usize, seed: u64) -> Vec<EvalPrompt> {
    (0..n)
        .map(|i| {
            let s = derive_indexed(seed, "eval/prompt", i as u64);
            let mut rng = rng_from(s);
            EvalPrompt {
                c: rng.random_range(0..task.num_conditions),
                seed: derive_seed(s, "eval/sample"),
            }
        })
        .collect()
}

/// Reward of one sample per prompt, in prompt order.
pub fn prompt_rewards(
    gen: &dyn Generator,
    task: &ToyTask,
    prompts: &[EvalPrompt],
) -> Result<Vec<f64>> {
    prompts
        .par_iter()
        .map(|p| synth_reward(task, p.c, &gen.generate(p.c, p.seed)?))
        .collect()
}

pub fn mean_reward(gen: &dyn Generator, task: &ToyTask, prompts: &[EvalPrompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidConfig("no evaluation prompts".into()));
    }
    let r = prompt_rewards(gen, task, prompts)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Paired win rate from precomputed per-prompt rewards; ties count 1/2.
pub fn win_rate_from_rewards(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::InvalidConfig("empty prompt set".into()));
    }
    check_dim("rewards", a.len(), b.len())?;
    let score: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => 0.0,
            _ => 0.5,
        })
        .sum();
    Ok(score / a.len() as f64)
}

/// Fraction of prompts on which `a`'s sample outscores `b`'s, with both
/// generators using the prompt's shared seed.
pub fn win_rate(
    a: &dyn Generator,
    b: &dyn Generator,
    task: &ToyTask,
    prompts: &[EvalPrompt],
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidConfig("empty prompt set".into()));
    }
    win_rate_from_rewards(
        &prompt_rewards(a, task, prompts)?,
        &prompt_rewards(b, task, prompts)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub eval_every: usize,
    /// Held-out prompts used for the metric log.
    pub eval_prompts: usize,
    /// Sampling steps used by the metric log.
    pub eval_sampling_steps: Option<usize>,
    /// Stop once the training thread has used this much CPU time
    /// (evaluation excluded). CPU time rather than wall time keeps equal
    /// budgets comparable on a loaded machine.
    pub time_budget_seconds: Option<f64>,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            eval_every: 100,
            eval_prompts: 200,
            eval_sampling_steps: None,
            time_budget_seconds: None,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_prompts == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, eval_every and eval_prompts must be positive".into(),
            ));
        }
        if let Some(b) = self.time_budget_seconds {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig(
                    "time_budget_seconds must be positive".into(),
                ));
            }
        }
        self.optimizer.validate()?;
        self.objective.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub wall_clock_seconds: f64,
    pub loss: f64,
    pub mean_reward: f64,
    /// Win rate of the current model against the starting checkpoint.
    pub win_rate: f64,
    pub per_term: TermMap,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DenoiserModel,
    pub metrics: Vec<MetricRecord>,
    /// Frozen copy of the starting checkpoint, used as reference and encoder.
    pub reference: DenoiserModel,
    /// Mean reward of the starting checkpoint on the metric prompts; `None`
    /// when no training step ran.
    pub baseline_reward: Option<f64>,
}

struct Evaluator<'a> {
    task: &'a ToyTask,
    sched: &'a VarianceSchedule,
    prompts: Vec<EvalPrompt>,
    n_steps: usize,
    baseline: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    fn new(
        task: &'a ToyTask,
        sched: &'a VarianceSchedule,
        base: &DenoiserModel,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let prompts = held_out_prompts(task, cfg.eval_prompts, derive_seed(seed, "train/eval"));
        let n_steps = cfg.eval_sampling_steps.unwrap_or(sched.timesteps());
        let baseline = prompt_rewards(
            &DiffusionSampler {
                model: base,
                sched,
                n_steps,
            },
            task,
            &prompts,
        )?;
        Ok(Self {
            task,
            sched,
            prompts,
            n_steps,
            baseline,
        })
    }

    fn baseline_mean(&self) -> f64 {
        self.baseline.iter().sum::<f64>() / self.baseline.len() as f64
    }

    fn score(&self, model: &DenoiserModel) -> Result<(f64, f64)> {
        let r = prompt_rewards(
            &DiffusionSampler {
                model,
                sched: self.sched,
                n_steps: self.n_steps,
            },
            self.task,
            &self.prompts,
        )?;
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        Ok((mean, win_rate_from_rewards(&r, &self.baseline)?))
    }
}

/// Preference fine-tuning of `base` on clean pairs.
///
/// The reference model and the perceptual encoder are both the frozen
/// starting checkpoint. Metrics are logged at step 0, every `eval_every`
/// steps and after the last step; the logged loss is that of the batch drawn
/// at that step, before the update.
pub fn train_preference(
    base: &DenoiserModel,
    sched: &VarianceSchedule,
    task: &ToyTask,
    pairs: &[CleanPair],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    base.check_schedule(sched)?;
    let reference = base.clone_frozen();
    if cfg.steps == 0 {
        return Ok(TrainOutcome {
            model: base.clone(),
            metrics: Vec::new(),
            reference,
            baseline_reward: None,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let encoder = FrozenEncoder::new(&reference);
    let mut model = base.clone_trainable();
    let ctx = ObjectiveContext {
        sched,
        cfg: &cfg.objective,
        reference: Some(&reference),
        encoder: Some(&encoder),
    };
    let evaluator = Evaluator::new(task, sched, base, cfg, seed)?;
    let mut opt = cfg.optimizer.build(model.param_count());
    let mut batch_rng = rng_from(derive_seed(seed, "train/batch"));
    let mut metrics = Vec::new();
    let mut train_time = 0.0f64;
    let mut cpu_time = 0.0f64;
    let mut step = 0;

    loop {
        let last = step == cfg.steps || cfg.time_budget_seconds.is_some_and(|b| cpu_time >= b);
        let started = Instant::now();
        let cpu_started = ThreadTime::now();
        let chosen: Vec<CleanPair> = (0..cfg.batch_size)
            .map(|_| pairs[batch_rng.random_range(0..pairs.len())].clone())
            .collect();
        let batch = PairBatch::sample(
            &chosen,
            sched.timesteps(),
            cfg.objective.share_t_within_pair,
            derive_indexed(seed, "train/noise", step as u64),
        )?;
        let rep = ctx.evaluate(&model, &batch).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Divergence {
                step,
                loss: f64::NAN,
            },
            e => e,
        })?;
        train_time += started.elapsed().as_secs_f64();
        cpu_time += cpu_started.elapsed().as_secs_f64();

        if step % cfg.eval_every == 0 || last {
            let (mean_reward, win_rate) = evaluator.score(&model)?;
            metrics.push(MetricRecord {
                step,
                wall_clock_seconds: train_time,
                loss: rep.loss,
                mean_reward,
                win_rate,
                per_term: rep.per_term.clone(),
            });
        }
        if last {
            break;
        }
        let started = Instant::now();
        let cpu_started = ThreadTime::now();
        model.apply_update(&opt.delta(&rep.grad))?;
        train_time += started.elapsed().as_secs_f64();
        cpu_time += cpu_started.elapsed().as_secs_f64();
        step += 1;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        reference,
        baseline_reward: Some(evaluator.baseline_mean()),
    })
}
