//! Training objectives for preference optimization of the denoiser.
//!
//! Six objectives share one evaluation path. The noise-space family (SFT, DPO,
//! CPO) scores a model by its noise-prediction error `L`. The perceptual family
//! (NCP-SFT, NCP-DPO, NCP-CPO) replaces `L` by the embedding distance `PL`
//! between two one-step reconstructions at `t' = t - 1`: one driven by the
//! model's noise estimate, one by the true noise, both read through a frozen
//! encoder.
//!
//! Every evaluation returns the loss together with its exact gradient w.r.t.
//! the trainable model. Reference models, the encoder and the ground-truth
//! reconstruction are constants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, NoisePredictor, PerceptualEncoder};
use crate::error::{check_dim, Error, Result};
use crate::rng::{derive_indexed, gaussian_vec, rng_from};
use crate::schedule::{ddpm_reverse_step, forward_diffuse, sq_dist, Sample, VarianceSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Sft,
    Dpo,
    Cpo,
    NcpSft,
    NcpDpo,
    NcpCpo,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        ObjectiveKind::Sft,
        ObjectiveKind::Dpo,
        ObjectiveKind::Cpo,
        ObjectiveKind::NcpSft,
        ObjectiveKind::NcpDpo,
        ObjectiveKind::NcpCpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Sft => "sft",
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::Cpo => "cpo",
            ObjectiveKind::NcpSft => "ncp-sft",
            ObjectiveKind::NcpDpo => "ncp-dpo",
            ObjectiveKind::NcpCpo => "ncp-cpo",
        }
    }

    pub fn is_perceptual(self) -> bool {
        matches!(
            self,
            ObjectiveKind::NcpSft | ObjectiveKind::NcpDpo | ObjectiveKind::NcpCpo
        )
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, ObjectiveKind::Dpo | ObjectiveKind::NcpDpo)
    }

    pub fn uses_lambda(self) -> bool {
        matches!(self, ObjectiveKind::Cpo | ObjectiveKind::NcpCpo)
    }

    /// Perceptual counterpart of a noise-space objective and vice versa.
    pub fn baseline(self) -> ObjectiveKind {
        match self {
            ObjectiveKind::NcpSft => ObjectiveKind::Sft,
            ObjectiveKind::NcpDpo => ObjectiveKind::Dpo,
            ObjectiveKind::NcpCpo => ObjectiveKind::Cpo,
            k => k,
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::UnknownObjective(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Nominal preference temperature; only `beta_t_product` enters the loss.
    pub beta: f64,
    /// Weight of the winner-anchoring term for CPO variants.
    pub lambda: f64,
    pub beta_t_product: f64,
    /// Use one reverse-step draw for the model, reference and ground-truth
    /// reconstructions of a branch.
    pub share_z: bool,
    pub share_t_within_pair: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::NcpDpo,
            beta: 0.01,
            lambda: 1.0,
            beta_t_product: 1.0,
            share_z: true,
            share_t_within_pair: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidConfig("beta must be positive".into()));
        }
        if !(self.beta_t_product.is_finite() && self.beta_t_product > 0.0) {
            return Err(Error::InvalidConfig(
                "beta_t_product must be positive".into(),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Noise draws for one branch (winner or loser) of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchDraws {
    pub eps: Vec<f64>,
    /// Reverse-step noise for the trainable model's reconstruction.
    pub z_model: Vec<f64>,
    /// Used only when `share_z` is off.
    pub z_ref: Vec<f64>,
    /// Used only when `share_z` is off.
    pub z_truth: Vec<f64>,
}

impl BranchDraws {
    fn sample(dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        Self {
            eps: gaussian_vec(&mut rng, dim),
            z_model: gaussian_vec(&mut rng, dim),
            z_ref: gaussian_vec(&mut rng, dim),
            z_truth: gaussian_vec(&mut rng, dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairItem {
    pub c: Condition,
    pub x_w: Vec<f64>,
    pub x_l: Vec<f64>,
    pub t_w: usize,
    pub t_l: usize,
    pub w: BranchDraws,
    pub l: BranchDraws,
}

impl PairItem {
    /// Same item with the winner and loser columns exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            c: self.c,
            x_w: self.x_l.clone(),
            x_l: self.x_w.clone(),
            t_w: self.t_l,
            t_l: self.t_w,
            w: self.l.clone(),
            l: self.w.clone(),
        }
    }
}

/// A clean preference triple `(c, x_w, x_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPair {
    pub c: Condition,
    pub x_w: Vec<f64>,
    pub x_l: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub items: Vec<PairItem>,
    pub seed: u64,
}

impl PairBatch {
    /// Attaches timesteps (uniform on `[1, T]`) and all noise draws to clean
    /// pairs. Everything is a function of `seed`.
    pub fn sample(pairs: &[CleanPair], timesteps: usize, share_t: bool, seed: u64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        let items = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                check_dim("x_l", p.x_w.len(), p.x_l.len())?;
                let i = i as u64;
                let mut trng = rng_from(derive_indexed(seed, "batch/t", i));
                let t_w = rand::Rng::random_range(&mut trng, 1..=timesteps);
                let t_l = if share_t {
                    t_w
                } else {
                    rand::Rng::random_range(&mut trng, 1..=timesteps)
                };
                let dim = p.x_w.len();
                Ok(PairItem {
                    c: p.c,
                    x_w: p.x_w.clone(),
                    x_l: p.x_l.clone(),
                    t_w,
                    t_l,
                    w: BranchDraws::sample(dim, derive_indexed(seed, "batch/w", i)),
                    l: BranchDraws::sample(dim, derive_indexed(seed, "batch/l", i)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items, seed })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            items: self.items.iter().map(PairItem::swapped).collect(),
            seed: self.seed,
        }
    }
}

pub type TermMap = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Batch means of every named term.
    pub per_term: TermMap,
    /// The same terms for each item; the item losses average to `loss`.
    pub per_item: Vec<TermMap>,
    pub grad: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-log sigmoid(arg)`.
pub fn neg_log_sigmoid(arg: f64) -> f64 {
    softplus(-arg)
}

fn finite(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
        })
    }
}

/// `x_{theta,t'}`: noise `x_0` to `x_t`, then take one reverse step with the
/// model's noise estimate.
pub fn reverse_sample(
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    x0: &[f64],
    c: Condition,
    t: usize,
    eps: &[f64],
    z: &[f64],
) -> Result<Sample> {
    let xt = forward_diffuse(sched, &Sample::clean(x0.to_vec()), t, eps)?;
    let eps_hat = model.predict_noise(&xt.x, c, t)?;
    ddpm_reverse_step(sched, &xt, &eps_hat, z)
}

/// `x_{t'}`: the same reverse step driven by the true noise.
pub fn ground_truth_sample(
    sched: &VarianceSchedule,
    x0: &[f64],
    t: usize,
    eps: &[f64],
    z: &[f64],
) -> Result<Sample> {
    let xt = forward_diffuse(sched, &Sample::clean(x0.to_vec()), t, eps)?;
    ddpm_reverse_step(sched, &xt, eps, z)
}

/// Perceptual loss with one reverse-step draw shared by both reconstructions.
#[allow(clippy::too_many_arguments)]
pub fn perceptual_loss(
    encoder: &dyn PerceptualEncoder,
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    x0: &[f64],
    c: Condition,
    t: usize,
    eps: &[f64],
    z: &[f64],
) -> Result<f64> {
    let xt = forward_diffuse(sched, &Sample::clean(x0.to_vec()), t, eps)?;
    let truth = sched.reverse_raw(&xt.x, t, eps, z);
    let e_truth = encoder.encode(&truth, c, t - 1)?;
    Ok(perceptual_branch(sched, model, encoder, &xt.x, c, t, z, &e_truth)?.value)
}

/// A scalar term and its derivative w.r.t. the noise prediction it came from.
struct Term {
    value: f64,
    grad_eps_hat: Vec<f64>,
}

fn noise_branch(
    model: &dyn NoisePredictor,
    xt: &[f64],
    c: Condition,
    t: usize,
    eps: &[f64],
) -> Result<Term> {
    let eps_hat = model.predict_noise(xt, c, t)?;
    Ok(Term {
        value: sq_dist(eps, &eps_hat),
        grad_eps_hat: eps_hat
            .iter()
            .zip(eps)
            .map(|(p, e)| 2.0 * (p - e))
            .collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn perceptual_branch(
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    encoder: &dyn PerceptualEncoder,
    xt: &[f64],
    c: Condition,
    t: usize,
    z: &[f64],
    e_truth: &[f64],
) -> Result<Term> {
    let eps_hat = model.predict_noise(xt, c, t)?;
    let recon = sched.reverse_raw(xt, t, &eps_hat, z);
    let e = encoder.encode(&recon, c, t - 1)?;
    let value = sq_dist(&e, e_truth);
    let g_e: Vec<f64> = e.iter().zip(e_truth).map(|(a, b)| 2.0 * (a - b)).collect();
    let g_recon = encoder.input_grad(&recon, c, t - 1, &g_e)?;
    let k = sched.k(t);
    Ok(Term {
        value,
        grad_eps_hat: g_recon.iter().map(|g| -k * g).collect(),
    })
}

/// Everything an objective needs besides the trainable model and the batch.
#[derive(Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub sched: &'a VarianceSchedule,
    pub cfg: &'a ObjectiveConfig,
    pub reference: Option<&'a dyn NoisePredictor>,
    pub encoder: Option<&'a dyn PerceptualEncoder>,
}

/// The per-branch quantities of one pair: model term and (optionally)
/// reference term, with the model term's derivative.
struct BranchTerms {
    xt: Vec<f64>,
    t: usize,
    model: Term,
    reference: Option<f64>,
}

impl<'a> ObjectiveContext<'a> {
    fn branch(
        &self,
        model: &dyn NoisePredictor,
        x0: &[f64],
        c: Condition,
        t: usize,
        draws: &BranchDraws,
        with_reference: bool,
    ) -> Result<BranchTerms> {
        self.sched.check_t(t)?;
        check_dim("eps", x0.len(), draws.eps.len())?;
        let xt = self.sched.forward_raw(x0, t, &draws.eps);
        let reference = if with_reference {
            Some(self.reference.ok_or_else(|| {
                Error::InvalidConfig(format!("{} needs a reference model", self.cfg.kind))
            })?)
        } else {
            None
        };
        let (model_term, ref_value) = if self.cfg.kind.is_perceptual() {
            let encoder = self.encoder.ok_or_else(|| {
                Error::InvalidConfig(format!("{} needs a perceptual encoder", self.cfg.kind))
            })?;
            let (z_truth, z_ref) = if self.cfg.share_z {
                (&draws.z_model, &draws.z_model)
            } else {
                (&draws.z_truth, &draws.z_ref)
            };
            let truth = self.sched.reverse_raw(&xt, t, &draws.eps, z_truth);
            let e_truth = encoder.encode(&truth, c, t - 1)?;
            let m = perceptual_branch(
                self.sched,
                model,
                encoder,
                &xt,
                c,
                t,
                &draws.z_model,
                &e_truth,
            )?;
            let r = match reference {
                Some(r) => Some(
                    perceptual_branch(self.sched, r, encoder, &xt, c, t, z_ref, &e_truth)?.value,
                ),
                None => None,
            };
            (m, r)
        } else {
            let m = noise_branch(model, &xt, c, t, &draws.eps)?;
            let r = match reference {
                Some(r) => Some(noise_branch(r, &xt, c, t, &draws.eps)?.value),
                None => None,
            };
            (m, r)
        };
        Ok(BranchTerms {
            xt,
            t,
            model: model_term,
            reference: ref_value,
        })
    }

    /// Loss, named terms and exact gradient of the configured objective.
    pub fn evaluate(&self, model: &dyn NoisePredictor, batch: &PairBatch) -> Result<LossReport> {
        self.cfg.validate()?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let kind = self.cfg.kind;
        let prefix = if kind.is_perceptual() { "PL" } else { "L" };
        let name = |branch: &str, who: &str| format!("{prefix}_{branch}_{who}");
        let bt = self.cfg.beta_t_product;
        let n = batch.len() as f64;
        let mut grad = vec![0.0; model.param_count()];
        let mut per_item = Vec::with_capacity(batch.len());
        let with_ref = kind.needs_reference();
        let pairwise = !matches!(kind, ObjectiveKind::Sft | ObjectiveKind::NcpSft);

        for item in &batch.items {
            let mut terms = TermMap::new();
            let w = self.branch(model, &item.x_w, item.c, item.t_w, &item.w, with_ref)?;
            terms.insert(
                name("w", "theta"),
                finite(&name("w", "theta"), w.model.value)?,
            );
            // coefficients of d(item loss)/d(L_w_theta), d(item loss)/d(L_l_theta)
            let (coef_w, coef_l, l_branch, item_loss);
            if pairwise {
                let l = self.branch(model, &item.x_l, item.c, item.t_l, &item.l, with_ref)?;
                terms.insert(
                    name("l", "theta"),
                    finite(&name("l", "theta"), l.model.value)?,
                );
                let mut diff = w.model.value - l.model.value;
                if with_ref {
                    let (rw, rl) = (w.reference.unwrap_or(0.0), l.reference.unwrap_or(0.0));
                    terms.insert(name("w", "ref"), finite(&name("w", "ref"), rw)?);
                    terms.insert(name("l", "ref"), finite(&name("l", "ref"), rl)?);
                    diff -= rw - rl;
                }
                let arg = finite("sigmoid_arg", -bt * diff)?;
                terms.insert("sigmoid_arg".into(), arg);
                let pref = neg_log_sigmoid(arg);
                terms.insert("preference_loss".into(), finite("preference_loss", pref)?);
                // d/d(arg) of -log sigma(arg) is -sigma(-arg); d(arg)/d(L_w) = -bt
                let s = sigmoid(-arg);
                let mut cw = bt * s;
                let cl = -bt * s;
                let mut total = pref;
                if kind.uses_lambda() {
                    let anchor = self.cfg.lambda * w.model.value;
                    terms.insert("winner_anchor".into(), finite("winner_anchor", anchor)?);
                    total += anchor;
                    cw += self.cfg.lambda;
                }
                coef_w = cw;
                coef_l = cl;
                l_branch = Some(l);
                item_loss = total;
            } else {
                coef_w = 1.0;
                coef_l = 0.0;
                l_branch = None;
                item_loss = w.model.value;
            }
            terms.insert("loss".into(), finite("loss", item_loss)?);

            let scale_w: Vec<f64> = w
                .model
                .grad_eps_hat
                .iter()
                .map(|g| g * coef_w / n)
                .collect();
            model.accumulate_grad(&w.xt, item.c, w.t, &scale_w, &mut grad)?;
            if let Some(l) = l_branch {
                let scale_l: Vec<f64> = l
                    .model
                    .grad_eps_hat
                    .iter()
                    .map(|g| g * coef_l / n)
                    .collect();
                model.accumulate_grad(&l.xt, item.c, l.t, &scale_l, &mut grad)?;
            }
            per_item.push(terms);
        }

        let mut per_term = TermMap::new();
        for terms in &per_item {
            for (k, v) in terms {
                *per_term.entry(k.clone()).or_insert(0.0) += v / n;
            }
        }
        let loss = per_item.iter().map(|t| t["loss"]).sum::<f64>() / n;
        per_term.insert("loss".into(), loss);
        if let Some((i, _)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("grad[{i}]"),
            });
        }
        Ok(LossReport {
            loss: finite("loss", loss)?,
            per_term,
            per_item,
            grad,
        })
    }
}

/// Exact gradient of the configured objective w.r.t. the trainable model.
pub fn gradient(
    ctx: &ObjectiveContext<'_>,
    model: &dyn NoisePredictor,
    batch: &PairBatch,
) -> Result<Vec<f64>> {
    Ok(ctx.evaluate(model, batch)?.grad)
}

fn with_kind(cfg: &ObjectiveConfig, kind: ObjectiveKind) -> ObjectiveConfig {
    ObjectiveConfig {
        kind,
        ..cfg.clone()
    }
}

/// Mean noise-prediction loss over the winners.
pub fn sft_loss(
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    batch: &PairBatch,
) -> Result<LossReport> {
    let cfg = ObjectiveConfig::new(ObjectiveKind::Sft);
    ObjectiveContext {
        sched,
        cfg: &cfg,
        reference: None,
        encoder: None,
    }
    .evaluate(model, batch)
}

/// Mean perceptual loss over the winners.
pub fn ncp_sft_loss(
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    encoder: &dyn PerceptualEncoder,
    batch: &PairBatch,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    let cfg = with_kind(cfg, ObjectiveKind::NcpSft);
    ObjectiveContext {
        sched,
        cfg: &cfg,
        reference: None,
        encoder: Some(encoder),
    }
    .evaluate(model, batch)
}

pub fn dpo_loss(
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    reference: &dyn NoisePredictor,
    batch: &PairBatch,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    let cfg = with_kind(cfg, ObjectiveKind::Dpo);
    ObjectiveContext {
        sched,
        cfg: &cfg,
        reference: Some(reference),
        encoder: None,
    }
    .evaluate(model, batch)
}

pub fn ncp_dpo_loss(
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    reference: &dyn NoisePredictor,
    encoder: &dyn PerceptualEncoder,
    batch: &PairBatch,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    let cfg = with_kind(cfg, ObjectiveKind::NcpDpo);
    ObjectiveContext {
        sched,
        cfg: &cfg,
        reference: Some(reference),
        encoder: Some(encoder),
    }
    .evaluate(model, batch)
}

pub fn cpo_loss(
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    batch: &PairBatch,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    let cfg = with_kind(cfg, ObjectiveKind::Cpo);
    ObjectiveContext {
        sched,
        cfg: &cfg,
        reference: None,
        encoder: None,
    }
    .evaluate(model, batch)
}

pub fn ncp_cpo_loss(
    sched: &VarianceSchedule,
    model: &dyn NoisePredictor,
    encoder: &dyn PerceptualEncoder,
    batch: &PairBatch,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    let cfg = with_kind(cfg, ObjectiveKind::NcpCpo);
    ObjectiveContext {
        sched,
        cfg: &cfg,
        reference: None,
        encoder: Some(encoder),
    }
    .evaluate(model, batch)
}

/// Recomputes an item's loss from its named terms.
pub fn item_loss_from_terms(kind: ObjectiveKind, cfg: &ObjectiveConfig, terms: &TermMap) -> f64 {
    let p = if kind.is_perceptual() { "PL" } else { "L" };
    let get = |k: &str| terms.get(&format!("{p}_{k}")).copied().unwrap_or(0.0);
    let bt = cfg.beta_t_product;
    match kind {
        ObjectiveKind::Sft | ObjectiveKind::NcpSft => get("w_theta"),
        ObjectiveKind::Dpo | ObjectiveKind::NcpDpo => neg_log_sigmoid(
            -bt * ((get("w_theta") - get("w_ref")) - (get("l_theta") - get("l_ref"))),
        ),
        ObjectiveKind::Cpo | ObjectiveKind::NcpCpo => {
            neg_log_sigmoid(-bt * (get("w_theta") - get("l_theta"))) + cfg.lambda * get("w_theta")
        }
    }
}
