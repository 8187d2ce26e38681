//! Variance schedule and the closed-form diffusion maths built on it:
//! forward corruption, the DDPM reverse step and the noise-prediction loss.
//!
//! Timesteps are 1-based. `alpha_bar(0)` is the conceptual clean endpoint and
//! always equals 1.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// A point in data space tagged with its diffusion timestep. `t == 0` means clean.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub t: usize,
}

impl Sample {
    pub fn clean(x: Vec<f64>) -> Self {
        Self { x, t: 0 }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl VarianceSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `timesteps` steps.
    ///
    /// A zero `beta_start` is accepted so the degenerate no-corruption schedule
    /// can be built; every other bound must lie in `(0, 1)`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::InvalidSchedule("non-finite beta bound".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) {
            return Err(Error::InvalidSchedule(format!(
                "beta bounds must lie in [0, 1), got [{beta_start}, {beta_end}]"
            )));
        }
        if beta_start > beta_end {
            return Err(Error::InvalidSchedule(format!(
                "beta_start {beta_start} exceeds beta_end {beta_end}"
            )));
        }
        let betas: Vec<f64> = if timesteps == 1 {
            vec![beta_start]
        } else {
            let span = (timesteps - 1) as f64;
            (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        Ok(Self::from_betas(
            ScheduleSpec {
                timesteps,
                beta_start,
                beta_end,
            },
            betas,
        ))
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        Self::linear(spec.timesteps, spec.beta_start, spec.beta_end)
    }

    fn from_betas(spec: ScheduleSpec, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                ratio_or_zero(betas[i] * (1.0 - prev), 1.0 - alpha_bars[i]).sqrt()
            })
            .collect();
        Self {
            spec,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        }
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if (1..=self.timesteps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.timesteps(),
            })
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Coefficient on the noise prediction inside the reverse step, before the
    /// `1/sqrt(alpha_t)` rescale: `(1 - alpha_t) / sqrt(1 - alpha_bar_t)`.
    pub fn eps_coef(&self, t: usize) -> f64 {
        ratio_or_zero(1.0 - self.alpha(t), (1.0 - self.alpha_bar(t)).sqrt())
    }

    /// Sensitivity of the reverse-step output to the noise prediction:
    /// `x_{t-1}` moves by `-k_t` per unit of `eps_hat`.
    pub fn k(&self, t: usize) -> f64 {
        self.eps_coef(t) / self.alpha(t).sqrt()
    }

    pub(crate) fn forward_raw(&self, x0: &[f64], t: usize, eps: &[f64]) -> Vec<f64> {
        let a = self.alpha_bar(t).sqrt();
        let b = (1.0 - self.alpha_bar(t)).sqrt();
        x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
    }

    pub(crate) fn reverse_raw(&self, xt: &[f64], t: usize, eps_hat: &[f64], z: &[f64]) -> Vec<f64> {
        let inv = 1.0 / self.alpha(t).sqrt();
        let coef = self.eps_coef(t);
        let sigma = self.sigma(t);
        xt.iter()
            .zip(eps_hat)
            .zip(z)
            .map(|((x, e), z)| inv * (x - coef * e) + sigma * z)
            .collect()
    }
}

/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(
    sched: &VarianceSchedule,
    x0: &Sample,
    t: usize,
    eps: &[f64],
) -> Result<Sample> {
    if x0.t != 0 {
        return Err(Error::NotClean(x0.t));
    }
    sched.check_t(t)?;
    check_dim("eps", x0.dim(), eps.len())?;
    Ok(Sample {
        x: sched.forward_raw(&x0.x, t, eps),
        t,
    })
}

/// One DDPM ancestral step from `x_t` to `x_{t-1}` given a noise estimate.
pub fn ddpm_reverse_step(
    sched: &VarianceSchedule,
    xt: &Sample,
    eps_hat: &[f64],
    z: &[f64],
) -> Result<Sample> {
    sched.check_t(xt.t)?;
    check_dim("eps_hat", xt.dim(), eps_hat.len())?;
    check_dim("z", xt.dim(), z.len())?;
    Ok(Sample {
        x: sched.reverse_raw(&xt.x, xt.t, eps_hat, z),
        t: xt.t - 1,
    })
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared L2 error between true and predicted noise, summed over components.
pub fn diffusion_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    check_dim("eps_hat", eps.len(), eps_hat.len())?;
    Ok(sq_dist(eps, eps_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_vec, rng_from};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn zero_beta_schedule_has_no_corruption() {
        let s = VarianceSchedule::linear(1, 0.0, 0.0).unwrap();
        assert_eq!(s.alphas(), &[1.0]);
        assert_eq!(s.alpha_bars(), &[1.0]);
        assert_eq!(s.sigmas(), &[0.0]);
        assert_eq!(s.eps_coef(1), 0.0);
    }

    #[test]
    fn two_step_alpha_bars() {
        let s = VarianceSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!(close(s.alpha_bars()[0], 0.9, 1e-15));
        assert!(close(s.alpha_bars()[1], 0.72, 1e-15));
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn default_thousand_step_schedule() {
        let s = VarianceSchedule::linear(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(*s.alpha_bars().last().unwrap() < 0.01);
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
        assert!(s.alphas().iter().all(|&a| a > 0.0 && a < 1.0));
        assert_eq!(s.sigma(1), 0.0);
        assert!(s.sigmas().iter().all(|&v| v >= 0.0));
        // sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)
        let t = 500;
        let expect = s.beta(t) * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
        assert!(close(s.sigma(t).powi(2), expect, 1e-14));
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(VarianceSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(VarianceSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 1e-4, 1.0).is_err());
        assert!(VarianceSchedule::linear(10, -1e-4, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, f64::NAN, 0.1).is_err());
        assert!(VarianceSchedule::linear(10, 1e-4, f64::INFINITY).is_err());
    }

    #[test]
    fn forward_examples() {
        let s = VarianceSchedule::linear(1, 0.0, 0.0).unwrap();
        let x0 = Sample::clean(vec![1.5, -2.0]);
        assert_eq!(forward_diffuse(&s, &x0, 1, &[3.0, 4.0]).unwrap().x, x0.x);

        // Two-step schedule with alpha_bar_2 = 0.25: beta = 0.5 at both steps.
        let s = VarianceSchedule::linear(2, 0.5, 0.5).unwrap();
        assert!(close(s.alpha_bar(2), 0.25, 1e-15));
        let xt = forward_diffuse(&s, &Sample::clean(vec![1.0, 0.0]), 2, &[0.0, 1.0]).unwrap();
        assert_eq!(xt.t, 2);
        assert!(close(xt.x[0], 0.5, 1e-15));
        assert!((xt.x[1] - 0.8660254037844386).abs() < 1e-12);

        let xt = forward_diffuse(&s, &Sample::clean(vec![2.0, -4.0]), 2, &[0.0, 0.0]).unwrap();
        assert_eq!(xt.x, vec![1.0, -2.0]);
    }

    #[test]
    fn forward_errors() {
        let s = VarianceSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = Sample::clean(vec![0.0; 2]);
        assert!(matches!(
            forward_diffuse(&s, &x0, 1, &[0.0; 3]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            forward_diffuse(&s, &x0, 0, &[0.0; 2]),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            forward_diffuse(&s, &x0, 11, &[0.0; 2]),
            Err(Error::TimestepOutOfRange { .. })
        ));
        let noisy = Sample {
            x: vec![0.0; 2],
            t: 3,
        };
        assert!(matches!(
            forward_diffuse(&s, &noisy, 1, &[0.0; 2]),
            Err(Error::NotClean(3))
        ));
    }

    #[test]
    fn single_step_inversion_is_exact() {
        let s = VarianceSchedule::linear(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = rng_from(3);
        for _ in 0..20 {
            let x0 = Sample::clean(gaussian_vec(&mut rng, 4));
            let eps = gaussian_vec(&mut rng, 4);
            let z = gaussian_vec(&mut rng, 4);
            let x1 = forward_diffuse(&s, &x0, 1, &eps).unwrap();
            let back = ddpm_reverse_step(&s, &x1, &eps, &z).unwrap();
            assert_eq!(back.t, 0);
            for (a, b) in back.x.iter().zip(&x0.x) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn reverse_pure_rescale() {
        let s = VarianceSchedule::linear(50, 1e-3, 0.05).unwrap();
        let xt = Sample {
            x: vec![1.0, -3.0],
            t: 17,
        };
        let out = ddpm_reverse_step(&s, &xt, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out.t, 16);
        let inv = 1.0 / s.alpha(17).sqrt();
        assert_eq!(out.x, vec![inv, -3.0 * inv]);
        assert!(ddpm_reverse_step(&s, &Sample::clean(vec![0.0; 2]), &[0.0; 2], &[0.0; 2]).is_err());
        assert!(ddpm_reverse_step(&s, &xt, &[0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn diffusion_loss_examples() {
        assert_eq!(diffusion_loss(&[0.3, -0.7], &[0.3, -0.7]).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(diffusion_loss(&[1.0, 2.0], &[-1.0, 1.0]).unwrap(), 5.0);
        assert!(diffusion_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn reverse_of_forward_matches_expansion(
            t in 1usize..=200,
            seed in any::<u64>(),
        ) {
            let s = VarianceSchedule::linear(200, 1e-4, 0.05).unwrap();
            let mut rng = rng_from(seed);
            let x0 = Sample::clean(gaussian_vec(&mut rng, 3));
            let eps = gaussian_vec(&mut rng, 3);
            let xt = forward_diffuse(&s, &x0, t, &eps).unwrap();
            let prev = ddpm_reverse_step(&s, &xt, &eps, &[0.0; 3]).unwrap();
            let c0 = s.alpha_bar(t - 1).sqrt();
            let c1 = s.alpha(t).sqrt() * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)).sqrt();
            for ((got, x), e) in prev.x.iter().zip(&x0.x).zip(&eps) {
                let expect = c0 * x + c1 * e;
                let rel = (got - expect).abs() / expect.abs().max(1e-12);
                prop_assert!(rel < 1e-9 || (got - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn diffusion_loss_is_a_squared_metric(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
        ) {
            let ab = diffusion_loss(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, diffusion_loss(&b, &a).unwrap());
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn schedules_are_monotone(t in 1usize..500, lo in 1e-5f64..0.01, span in 0.0f64..0.05) {
            let s = VarianceSchedule::linear(t, lo, lo + span).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
            prop_assert_eq!(s.sigma(1), 0.0);
        }
    }
}
