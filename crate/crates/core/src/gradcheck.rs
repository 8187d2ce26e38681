//! Central finite-difference check of objective gradients.
//!
//! The numeric side only ever evaluates losses on perturbed copies of the
//! parameter vector, so it shares nothing with the reverse-mode pass beyond
//! the forward computation.

use rand::seq::index;
use serde::Serialize;

use crate::denoiser::DenoiserModel;
use crate::error::Result;
use crate::objectives::{ObjectiveContext, PairBatch};
use crate::rng::rng_from;

pub const DEFAULT_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub coords: usize,
    pub steps: Vec<f64>,
    pub tolerance: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords: 64,
            steps: DEFAULT_STEPS.to_vec(),
            tolerance: DEFAULT_TOLERANCE,
            floor: DEFAULT_FLOOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub objective: String,
    pub checks: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn check_gradient(
    ctx: &ObjectiveContext<'_>,
    model: &DenoiserModel,
    batch: &PairBatch,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = ctx.evaluate(model, batch)?.grad;
    let n = model.param_count();
    let mut rng = rng_from(cfg.seed);
    let mut coords = index::sample(&mut rng, n, cfg.coords.min(n)).into_vec();
    coords.sort_unstable();
    let base = model.flatten_params();
    let arch = *model.arch();
    let loss_at = |v: Vec<f64>| -> Result<f64> {
        let m = DenoiserModel::from_params(arch, v)?;
        Ok(ctx.evaluate(&m, batch)?.loss)
    };

    let mut checks = Vec::with_capacity(coords.len());
    for i in coords {
        let mut best: Option<CoordCheck> = None;
        for &h in &cfg.steps {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let numeric = (loss_at(plus)? - loss_at(minus)?) / (2.0 * h);
            let err = rel_err(analytic[i], numeric, cfg.floor);
            if best.as_ref().is_none_or(|b| err < b.rel_err) {
                best = Some(CoordCheck {
                    index: i,
                    analytic: analytic[i],
                    numeric,
                    step: h,
                    rel_err: err,
                });
            }
        }
        checks.extend(best);
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        objective: ctx.cfg.kind.to_string(),
        passed: max_rel_err < cfg.tolerance,
        checks,
        max_rel_err,
    })
}
