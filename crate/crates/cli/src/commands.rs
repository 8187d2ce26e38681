use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, ValueEnum};
use ncp_core::denoiser::{DenoiserModel, FrozenEncoder};
use ncp_core::gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
use ncp_core::io::{self, ParseMode};
use ncp_core::objectives::{
    CleanPair, ObjectiveConfig, ObjectiveContext, ObjectiveKind, PairBatch,
};
use ncp_core::pref_graph::{
    build_graph, build_scheme, cancellation_diagnostic, filter_dataset, Scheme,
};
use ncp_core::rng::{derive_seed, gaussian_vec, rng_from};
use ncp_core::schedule::VarianceSchedule;
use ncp_core::train_eval::{
    held_out_prompts, make_toy_preferences, pretrain, prompt_rewards, toy_record_count,
    train_preference, win_rate_from_rewards, DiffusionSampler, ToyCorpus,
};
use rand::Rng as _;

use crate::config::RunConfig;
use crate::output::OutputSet;
use crate::{Cli, Command, GlobalArgs};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const CURATED_FILE: &str = "curated.jsonl";
pub const REPORT_FILE: &str = "curation_report.json";
pub const SUMMARY_FILE: &str = "curation_summary.csv";
pub const BASE_FILE: &str = "base.ckpt.json";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.json";
pub const MODEL_FILE: &str = "model.ckpt.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVE_FILE: &str = "reward_curve.svg";
pub const WIN_RATES_FILE: &str = "win_rates.csv";
pub const REWARDS_FILE: &str = "rewards.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const CANCELLATION_FILE: &str = "cancellation.csv";

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n_prompts: Option<usize>,
    #[arg(long)]
    pub samples_per_prompt: Option<usize>,
    /// Probability that a simulated annotation is reversed.
    #[arg(long)]
    pub flip_prob: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CurateScheme {
    /// Keep every pair won by an absolute winner.
    Filter,
    Xy,
    XyXz,
    XyYz,
}

#[derive(Debug, Clone, Args)]
pub struct CurateArgs {
    /// Preference records (JSON lines).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CurateScheme::Filter)]
    pub scheme: CurateScheme,
    /// Skip malformed lines instead of failing on the first one.
    #[arg(long)]
    pub skip_malformed: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Starting checkpoint.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Preference records (JSON lines).
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Item vectors referenced by the records (JSON lines).
    #[arg(long)]
    pub items: Option<PathBuf>,
    /// sft, dpo, cpo, ncp-sft, ncp-dpo or ncp-cpo.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Stop after this many CPU seconds of training. The step count then
    /// depends on machine speed.
    #[arg(long)]
    pub time_budget: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub beta_t: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Also write the reward-versus-time curve as SVG.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoints to compare; all must share architecture and schedule.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub sampling_steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagArgs {
    /// Model to check; a fresh initialization when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub coords: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.global.threads {
        ensure!(n > 0, "--threads must be positive");
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::GenData(a) => cmd_gen_data(cfg, &cli.global, &a),
        Command::Curate(a) => cmd_curate(cfg, &cli.global, &a),
        Command::Pretrain(a) => cmd_pretrain(cfg, &cli.global, &a),
        Command::Train(a) => cmd_train(cfg, &cli.global, &a),
        Command::Eval(a) => cmd_eval(cfg, &cli.global, &a),
        Command::Diag(a) => cmd_diag(cfg, &cli.global, &a),
    }
}

fn out_dir(cfg: &RunConfig, g: &GlobalArgs) -> Result<PathBuf> {
    g.out
        .clone()
        .or_else(|| cfg.paths.out.clone())
        .ok_or_else(|| anyhow!("no output directory: pass --out or set paths.out"))
}

fn input(flag: &Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = flag
        .clone()
        .or_else(|| fallback.clone())
        .ok_or_else(|| anyhow!("missing {what} path"))?;
    ensure!(p.is_file(), "{what} file {} does not exist", p.display());
    Ok(p)
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(p).with_context(|| format!("opening {}", p.display()))?,
    ))
}

pub fn load_checkpoint(p: &Path) -> Result<(DenoiserModel, VarianceSchedule)> {
    io::read_checkpoint(open(p)?).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn check_task_fit(cfg: &RunConfig, model: &DenoiserModel) -> Result<()> {
    let a = model.arch();
    ensure!(
        a.input_dim == cfg.task.dim && a.conditions == cfg.task.num_conditions,
        "checkpoint architecture ({}-d, {} conditions) does not match the task ({}-d, {} conditions)",
        a.input_dim,
        a.conditions,
        cfg.task.dim,
        cfg.task.num_conditions
    );
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

pub fn cmd_gen_data(mut cfg: RunConfig, g: &GlobalArgs, a: &GenDataArgs) -> Result<()> {
    if let Some(n) = a.n_prompts {
        cfg.data.n_prompts = n;
    }
    if let Some(k) = a.samples_per_prompt {
        cfg.data.samples_per_prompt = k;
    }
    if let Some(f) = a.flip_prob {
        cfg.task.flip_prob = f;
    }
    cfg.validate()?;
    let mut out = OutputSet::new(&out_dir(&cfg, g)?)?;
    let corpus = make_toy_preferences(
        &cfg.task,
        cfg.data.n_prompts,
        cfg.data.samples_per_prompt,
        derive_seed(cfg.seed, "gen-data"),
    )?;
    debug_assert_eq!(
        corpus.records.len(),
        toy_record_count(cfg.data.n_prompts, cfg.data.samples_per_prompt)
    );
    let rec_path = out.write(RECORDS_FILE, |w| Ok(io::write_records(w, &corpus.records)?))?;
    out.write(ITEMS_FILE, |w| Ok(io::write_items(w, &corpus.items)?))?;
    out.commit()?;
    println!(
        "wrote {} records over {} prompts ({} candidates each, flip probability {}) to {}",
        corpus.records.len(),
        cfg.data.n_prompts,
        cfg.data.samples_per_prompt,
        cfg.task.flip_prob,
        rec_path.display()
    );
    Ok(())
}

pub fn cmd_curate(cfg: RunConfig, g: &GlobalArgs, a: &CurateArgs) -> Result<()> {
    let path = input(&a.input, &cfg.paths.records, "records")?;
    let mut out = OutputSet::new(&out_dir(&cfg, g)?)?;
    let mode = if a.skip_malformed {
        ParseMode::Skip
    } else {
        ParseMode::Strict
    };
    let (records, skipped) = io::read_records(open(&path)?, mode)
        .with_context(|| format!("reading {}", path.display()))?;
    for s in &skipped {
        eprintln!("skipping {}:{}: {}", path.display(), s.line, s.reason);
    }
    let (kept, report) = filter_dataset(&records)?;
    let pairs = match a.scheme {
        CurateScheme::Filter => kept,
        CurateScheme::Xy => build_scheme(&build_graph(&records)?, Scheme::Xy),
        CurateScheme::XyXz => build_scheme(&build_graph(&records)?, Scheme::XyXz),
        CurateScheme::XyYz => build_scheme(&build_graph(&records)?, Scheme::XyYz),
    };
    out.write(CURATED_FILE, |w| Ok(io::write_records(w, &pairs)?))?;
    out.write_bytes(REPORT_FILE, &to_json(&report)?)?;
    out.write(SUMMARY_FILE, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(ncp_core::pref_graph::CurationReport::CSV_HEADER)?;
        c.write_record(report.csv_row())?;
        c.flush()?;
        Ok(())
    })?;
    out.commit()?;
    let t = &report.totals;
    println!(
        "{} records ({} skipped), {} prompts, {} contradictory items; kept {} pairs over {} prompts",
        records.len(),
        skipped.len(),
        t.prompt_count,
        t.contradiction_count,
        pairs.len(),
        t.kept_prompt_count
    );
    Ok(())
}

pub fn cmd_pretrain(mut cfg: RunConfig, g: &GlobalArgs, a: &PretrainArgs) -> Result<()> {
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    cfg.validate()?;
    let mut out = OutputSet::new(&out_dir(&cfg, g)?)?;
    let sched = cfg.schedule()?;
    let (model, log) = pretrain(
        &cfg.task,
        cfg.arch(),
        &sched,
        &cfg.pretrain,
        derive_seed(cfg.seed, "pretrain"),
    )?;
    let path = out.write(BASE_FILE, |w| Ok(io::write_checkpoint(w, &model, &sched)?))?;
    let summary = serde_json::json!({
        "steps": cfg.pretrain.steps,
        "initial_loss": log.initial_loss,
        "final_loss": log.final_loss,
    });
    out.write_bytes(PRETRAIN_LOG_FILE, &to_json(&summary)?)?;
    out.commit()?;
    println!(
        "pretrained {} parameters for {} steps: loss {:.4} -> {:.4}; wrote {}",
        model.param_count(),
        cfg.pretrain.steps,
        log.initial_loss,
        log.final_loss,
        path.display()
    );
    Ok(())
}

pub fn cmd_train(mut cfg: RunConfig, g: &GlobalArgs, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    if let Some(o) = &a.objective {
        t.objective.kind = o.parse()?;
    }
    if let Some(s) = a.steps {
        t.steps = s;
    }
    if a.time_budget.is_some() {
        t.time_budget_seconds = a.time_budget;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(lr) = a.lr {
        t.optimizer.learning_rate = lr;
    }
    if let Some(b) = a.beta_t {
        t.objective.beta_t_product = b;
    }
    if let Some(l) = a.lambda {
        t.objective.lambda = l;
    }
    if let Some(e) = a.eval_every {
        t.eval_every = e;
    }
    cfg.validate()?;
    let base_path = input(&a.base, &cfg.paths.base, "base checkpoint")?;
    let rec_path = input(&a.records, &cfg.paths.records, "records")?;
    let items_path = input(&a.items, &cfg.paths.items, "items")?;
    let mut out = OutputSet::new(&out_dir(&cfg, g)?)?;

    let (base, sched) = load_checkpoint(&base_path)?;
    check_task_fit(&cfg, &base)?;
    let (records, _) = io::read_records(open(&rec_path)?, ParseMode::Strict)
        .with_context(|| format!("reading {}", rec_path.display()))?;
    let items = io::read_items(open(&items_path)?)
        .with_context(|| format!("reading {}", items_path.display()))?;
    let pairs: Vec<CleanPair> = ToyCorpus::clean_pairs(&records, &items)?;
    ensure!(
        cfg.train.steps == 0 || !pairs.is_empty(),
        "no win records to train on"
    );

    let outcome = train_preference(
        &base,
        &sched,
        &cfg.task,
        &pairs,
        &cfg.train,
        derive_seed(cfg.seed, "train"),
    )?;
    let path = out.write(MODEL_FILE, |w| {
        Ok(io::write_checkpoint(w, &outcome.model, &sched)?)
    })?;
    out.write(METRICS_FILE, |w| {
        Ok(io::write_metrics(w, &outcome.metrics)?)
    })?;
    if a.svg {
        let curve: Vec<(f64, f64)> = outcome
            .metrics
            .iter()
            .map(|m| (m.wall_clock_seconds, m.mean_reward))
            .collect();
        let mut series = vec![(cfg.train.objective.kind.to_string(), curve)];
        if let (Some(b), Some(first), Some(last)) = (
            outcome.baseline_reward,
            outcome.metrics.first(),
            outcome.metrics.last(),
        ) {
            series.push((
                "base".into(),
                vec![(first.wall_clock_seconds, b), (last.wall_clock_seconds, b)],
            ));
        }
        let svg = io::line_chart_svg("mean reward vs. training time (s)", &series);
        out.write_bytes(CURVE_FILE, svg.as_bytes())?;
    }
    out.commit()?;
    match outcome.metrics.last() {
        Some(m) => println!(
            "{} on {} pairs: {} steps, loss {:.4}, mean reward {:.4}, win rate vs base {:.3}; wrote {}",
            cfg.train.objective.kind,
            pairs.len(),
            m.step,
            m.loss,
            m.mean_reward,
            m.win_rate,
            path.display()
        ),
        None => println!("no training steps requested; wrote {}", path.display()),
    }
    Ok(())
}

pub fn cmd_eval(mut cfg: RunConfig, g: &GlobalArgs, a: &EvalArgs) -> Result<()> {
    if let Some(p) = a.prompts {
        cfg.eval.prompts = p;
    }
    if a.sampling_steps.is_some() {
        cfg.eval.sampling_steps = a.sampling_steps;
    }
    cfg.validate()?;
    for p in &a.checkpoints {
        ensure!(p.is_file(), "checkpoint {} does not exist", p.display());
    }
    let mut out = OutputSet::new(&out_dir(&cfg, g)?)?;
    let models = a
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let (first, sched) = &models[0];
    check_task_fit(&cfg, first)?;
    for ((m, s), p) in models.iter().zip(&a.checkpoints).skip(1) {
        m.check_compatible(first)
            .with_context(|| format!("{} vs {}", p.display(), a.checkpoints[0].display()))?;
        ensure!(
            s == sched,
            "{} uses a different schedule than {}",
            p.display(),
            a.checkpoints[0].display()
        );
    }
    let n_steps = cfg.eval.sampling_steps.unwrap_or(sched.timesteps());
    ensure!(
        n_steps <= sched.timesteps(),
        "sampling steps exceed the schedule length"
    );
    let prompts = held_out_prompts(&cfg.task, cfg.eval.prompts, derive_seed(cfg.seed, "eval"));
    let rewards = models
        .iter()
        .map(|(m, s)| {
            let sampler = DiffusionSampler {
                model: m,
                sched: s,
                n_steps,
            };
            Ok(prompt_rewards(&sampler, &cfg.task, &prompts)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let names = checkpoint_names(&a.checkpoints);

    out.write(WIN_RATES_FILE, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(std::iter::once("model").chain(names.iter().map(String::as_str)))?;
        for (i, ri) in rewards.iter().enumerate() {
            let mut row = vec![names[i].clone()];
            for rj in &rewards {
                row.push(win_rate_from_rewards(ri, rj)?.to_string());
            }
            c.write_record(&row)?;
        }
        c.flush()?;
        Ok(())
    })?;
    out.write(REWARDS_FILE, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["model", "mean_reward"])?;
        for (n, r) in names.iter().zip(&rewards) {
            c.write_record([
                n.clone(),
                (r.iter().sum::<f64>() / r.len() as f64).to_string(),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let paths = out.commit()?;
    println!(
        "compared {} checkpoints on {} prompts; wrote {}",
        models.len(),
        prompts.len(),
        paths[0].display()
    );
    Ok(())
}

/// Short names for matrix labels: file names, widened to full paths on clashes.
fn checkpoint_names(paths: &[PathBuf]) -> Vec<String> {
    let short: Vec<String> = paths
        .iter()
        .map(|p| {
            p.file_name().map_or_else(
                || p.display().to_string(),
                |f| f.to_string_lossy().into_owned(),
            )
        })
        .collect();
    let mut seen = BTreeMap::new();
    for s in &short {
        *seen.entry(s.clone()).or_insert(0) += 1;
    }
    short
        .iter()
        .zip(paths)
        .map(|(s, p)| {
            if seen[s] > 1 {
                p.display().to_string()
            } else {
                s.clone()
            }
        })
        .collect()
}

pub fn cmd_diag(mut cfg: RunConfig, g: &GlobalArgs, a: &DiagArgs) -> Result<()> {
    if let Some(c) = a.coords {
        cfg.diag.coords = c;
    }
    cfg.validate()?;
    ensure!(
        cfg.diag.pairs > 0 && cfg.diag.coords > 0,
        "diag.pairs and diag.coords must be positive"
    );
    if let Some(p) = &a.checkpoint {
        ensure!(p.is_file(), "checkpoint {} does not exist", p.display());
    }
    let mut out = OutputSet::new(&out_dir(&cfg, g)?)?;
    let seed = cfg.seed;
    let (model, sched) = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => (
            DenoiserModel::init(cfg.arch(), derive_seed(seed, "diag/model"))?,
            cfg.schedule()?,
        ),
    };
    check_task_fit(&cfg, &model)?;
    // A reference distinct from the model keeps the check away from the
    // symmetric point where the preference terms cancel.
    let reference =
        DenoiserModel::init(*model.arch(), derive_seed(seed, "diag/reference"))?.clone_frozen();
    let encoder = FrozenEncoder::new(&reference);
    let mut rng = rng_from(derive_seed(seed, "diag/pairs"));
    let pairs: Vec<CleanPair> = (0..cfg.diag.pairs)
        .map(|_| {
            let c = rng.random_range(0..cfg.task.num_conditions);
            CleanPair {
                c,
                x_w: cfg.task.sample_data(c, &mut rng),
                x_l: cfg.task.sample_data(c, &mut rng),
            }
        })
        .collect();
    let batch = PairBatch::sample(
        &pairs,
        sched.timesteps(),
        true,
        derive_seed(seed, "diag/batch"),
    )?;
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for kind in ObjectiveKind::ALL {
        let ocfg = ObjectiveConfig {
            kind,
            ..cfg.train.objective.clone()
        };
        let ctx = ObjectiveContext {
            sched: &sched,
            cfg: &ocfg,
            reference: Some(&reference),
            encoder: Some(&encoder),
        };
        let gc = GradCheckConfig {
            coords: cfg.diag.coords,
            tolerance: cfg.diag.tolerance,
            seed: derive_seed(seed, "diag/coords"),
            ..GradCheckConfig::default()
        };
        reports.push(check_gradient(&ctx, &model, &batch, &gc)?);
    }

    let beta = cfg.train.objective.beta;
    let mut rng = rng_from(derive_seed(seed, "diag/triples"));
    let mut rows = Vec::with_capacity(cfg.diag.triples + 1);
    let mut worst_cancel = 0.0f64;
    for i in 0..=cfg.diag.triples {
        // The last row is the fully cancelling equal-reward case.
        let r: Vec<f64> = if i == cfg.diag.triples {
            vec![0.5; 3]
        } else {
            gaussian_vec(&mut rng, 3)
        };
        let rewards: BTreeMap<String, f64> = ["x1", "x2", "x3"]
            .iter()
            .map(|k| k.to_string())
            .zip(r.iter().copied())
            .collect();
        let diag = cancellation_diagnostic(&rewards, ("x1", "x2", "x3"), beta)?;
        let closed = beta * (sigmoid(r[0] - r[1]) - sigmoid(r[1] - r[2]));
        worst_cancel = worst_cancel.max((diag - closed).abs());
        rows.push([r[0], r[1], r[2], diag, closed]);
    }

    out.write_bytes(GRADCHECK_FILE, &to_json(&reports)?)?;
    out.write(CANCELLATION_FILE, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["r1", "r2", "r3", "diagnostic", "closed_form"])?;
        for row in &rows {
            c.write_record(row.iter().map(f64::to_string))?;
        }
        c.flush()?;
        Ok(())
    })?;
    out.commit()?;

    for r in &reports {
        println!(
            "{:<8} {} max rel err {:.3e} over {} coords",
            r.objective,
            if r.passed { "pass" } else { "FAIL" },
            r.max_rel_err,
            r.checks.len()
        );
    }
    println!(
        "cancellation: max |diagnostic - closed form| = {worst_cancel:.3e} over {} triples",
        rows.len()
    );
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.objective.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    ensure!(
        worst_cancel <= 1e-12,
        "cancellation diagnostic deviates from its closed form"
    );
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
