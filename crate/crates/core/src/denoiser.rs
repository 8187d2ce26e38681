//! Conditional noise-prediction MLP with an explicit encoder/decoder split.
//!
//! The encoder maps `(x, c, t)` to an `E`-dimensional embedding:
//!
//! ```text
//! u  = [x ; time_features(t)]
//! h1 = silu(W1 u + b1 + cond[c])
//! h2 = silu(W2 h1 + b2)
//! e  = silu(W3 h2 + b3)
//! ```
//!
//! and a linear head `eps_hat = Wd e + bd` decodes it back to data space.
//! Every weight lives in one flat vector; `Layout` records the offsets.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{gaussian_vec, rng_from};
use crate::schedule::VarianceSchedule;

pub type Condition = usize;

/// Number of sinusoid frequencies; the time feature has twice this many entries.
pub const TIME_FREQS: usize = 8;
pub const TIME_FEATURES: usize = 2 * TIME_FREQS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub conditions: usize,
    /// Largest timestep the model accepts (the schedule horizon).
    pub timesteps: usize,
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("conditions", self.conditions),
            ("timesteps", self.timesteps),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidArch(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    cond: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    wd: usize,
    bd: usize,
    total: usize,
}

impl Layout {
    fn new(a: &Arch) -> Self {
        let (d, h, e, c) = (a.input_dim, a.hidden, a.embed, a.conditions);
        let w1 = 0;
        let b1 = w1 + h * (d + TIME_FEATURES);
        let cond = b1 + h;
        let w2 = cond + c * h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + e * h;
        let wd = b3 + e;
        let bd = wd + d * e;
        let total = bd + d;
        Self {
            w1,
            b1,
            cond,
            w2,
            b2,
            w3,
            b3,
            wd,
            bd,
            total,
        }
    }
}

/// Output of the perceptual encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// Sinusoidal features of `t` with geometrically spaced frequencies between
/// 1 and `1 / horizon`.
pub fn time_features(t: usize, horizon: usize) -> [f64; TIME_FEATURES] {
    let mut out = [0.0; TIME_FEATURES];
    let base = (horizon.max(2) as f64).ln();
    for k in 0..TIME_FREQS {
        let freq = (-base * k as f64 / TIME_FREQS as f64).exp();
        let phase = t as f64 * freq;
        out[2 * k] = phase.sin();
        out[2 * k + 1] = phase.cos();
    }
    out
}

/// `out = W v + b`, `W` row-major with `out.len()` rows.
fn affine(w: &[f64], b: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o = b[i] + row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>();
    }
}

/// Backprop through `out = W v + b`: accumulates weight/bias grads (if any) and
/// returns `W^T g`.
fn affine_back(
    w: &[f64],
    v: &[f64],
    g: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let cols = v.len();
    let mut gv = vec![0.0; cols];
    for (i, gi) in g.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (acc, wij) in gv.iter_mut().zip(row) {
            *acc += wij * gi;
        }
    }
    if let Some((gw, gb)) = grads {
        for (i, gi) in g.iter().enumerate() {
            gb[i] += gi;
            for (acc, vj) in gw[i * cols..(i + 1) * cols].iter_mut().zip(v) {
                *acc += gi * vj;
            }
        }
    }
    gv
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    c: Condition,
    u: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    a3: Vec<f64>,
    e: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Arch,
    params: Vec<f64>,
    frozen: bool,
}

impl DenoiserModel {
    /// Fresh model: fan-in scaled Gaussian weights, zero biases.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = Layout::new(&arch);
        let mut rng = rng_from(seed);
        let mut params = vec![0.0; l.total];
        let (d, h, e, c) = (arch.input_dim, arch.hidden, arch.embed, arch.conditions);
        let mut fill = |range: std::ops::Range<usize>, scale: f64| {
            let draws = gaussian_vec(&mut rng, range.len());
            for (p, g) in params[range].iter_mut().zip(draws) {
                *p = g * scale;
            }
        };
        fill(l.w1..l.b1, (1.0 / (d + TIME_FEATURES) as f64).sqrt());
        fill(l.cond..l.cond + c * h, 0.5);
        fill(l.w2..l.b2, (1.0 / h as f64).sqrt());
        fill(l.w3..l.b3, (1.0 / h as f64).sqrt());
        fill(l.wd..l.bd, (1.0 / e as f64).sqrt());
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(Error::ParamLength {
                expected,
                found: params.len(),
            });
        }
        Ok(Self {
            arch,
            params,
            frozen: false,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn load_params(&mut self, v: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        if v.len() != self.params.len() {
            return Err(Error::ParamLength {
                expected: self.params.len(),
                found: v.len(),
            });
        }
        self.params.copy_from_slice(v);
        Ok(())
    }

    /// Applies `params += delta`. Rejected on frozen models.
    pub fn apply_update(&mut self, delta: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        check_dim("update", self.params.len(), delta.len())?;
        for (p, d) in self.params.iter_mut().zip(delta) {
            *p += d;
        }
        Ok(())
    }

    /// Independent copy that rejects all parameter updates.
    pub fn clone_frozen(&self) -> Self {
        Self {
            arch: self.arch,
            params: self.params.clone(),
            frozen: true,
        }
    }

    /// Trainable copy with the same weights.
    pub fn clone_trainable(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    /// Zeroes the decoder head (weights and bias).
    pub fn zero_decoder(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        let l = Layout::new(&self.arch);
        self.params[l.wd..l.total].fill(0.0);
        Ok(())
    }

    pub fn check_compatible(&self, other: &DenoiserModel) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch(format!(
                "{:?} vs {:?}",
                self.arch, other.arch
            )));
        }
        Ok(())
    }

    pub fn check_schedule(&self, sched: &VarianceSchedule) -> Result<()> {
        if sched.timesteps() != self.arch.timesteps {
            return Err(Error::ArchMismatch(format!(
                "model horizon {} vs schedule horizon {}",
                self.arch.timesteps,
                sched.timesteps()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &[f64], c: Condition, t: usize) -> Result<()> {
        check_dim("x", self.arch.input_dim, x.len())?;
        if c >= self.arch.conditions {
            return Err(Error::ConditionOutOfRange {
                c,
                count: self.arch.conditions,
            });
        }
        if t > self.arch.timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 0,
                max: self.arch.timesteps,
            });
        }
        Ok(())
    }

    fn encode_trace(&self, x: &[f64], c: Condition, t: usize) -> Trace {
        let l = Layout::new(&self.arch);
        let (h, e) = (self.arch.hidden, self.arch.embed);
        let p = &self.params;
        let mut u = x.to_vec();
        u.extend_from_slice(&time_features(t, self.arch.timesteps));
        let mut a1 = vec![0.0; h];
        affine(&p[l.w1..l.b1], &p[l.b1..l.cond], &u, &mut a1);
        let ce = &p[l.cond + c * h..l.cond + (c + 1) * h];
        for (a, b) in a1.iter_mut().zip(ce) {
            *a += b;
        }
        let h1: Vec<f64> = a1.iter().map(|&a| silu(a)).collect();
        let mut a2 = vec![0.0; h];
        affine(&p[l.w2..l.b2], &p[l.b2..l.w3], &h1, &mut a2);
        let h2: Vec<f64> = a2.iter().map(|&a| silu(a)).collect();
        let mut a3 = vec![0.0; e];
        affine(&p[l.w3..l.b3], &p[l.b3..l.wd], &h2, &mut a3);
        let emb: Vec<f64> = a3.iter().map(|&a| silu(a)).collect();
        Trace {
            c,
            u,
            a1,
            h1,
            a2,
            h2,
            a3,
            e: emb,
            y: Vec::new(),
        }
    }

    pub(crate) fn forward_trace(&self, x: &[f64], c: Condition, t: usize) -> Result<Trace> {
        self.check_inputs(x, c, t)?;
        let mut tr = self.encode_trace(x, c, t);
        tr.y = self.decode(&Embedding(tr.e.clone()));
        Ok(tr)
    }

    /// Noise-conditioned embedding `f(x, c, t)`.
    pub fn encode(&self, x: &[f64], c: Condition, t: usize) -> Result<Embedding> {
        self.check_inputs(x, c, t)?;
        Ok(Embedding(self.encode_trace(x, c, t).e))
    }

    /// Linear decoder head applied to an embedding.
    pub fn decode(&self, e: &Embedding) -> Vec<f64> {
        let l = Layout::new(&self.arch);
        let mut y = vec![0.0; self.arch.input_dim];
        affine(
            &self.params[l.wd..l.bd],
            &self.params[l.bd..l.total],
            &e.0,
            &mut y,
        );
        y
    }

    pub fn predict_noise(&self, x: &[f64], c: Condition, t: usize) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x, c, t)?.y)
    }

    /// Reverse-mode pass. `grad_y` is the loss gradient w.r.t. the decoder
    /// output, `grad_e` an extra gradient injected at the embedding. Parameter
    /// gradients are accumulated into `grad_params` when given. Returns the
    /// gradient w.r.t. the data input `x`.
    pub(crate) fn backprop(
        &self,
        tr: &Trace,
        grad_y: Option<&[f64]>,
        grad_e: Option<&[f64]>,
        mut grad_params: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let l = Layout::new(&self.arch);
        let (d, h) = (self.arch.input_dim, self.arch.hidden);
        let p = &self.params;

        let mut ge = grad_e.map_or_else(|| vec![0.0; self.arch.embed], <[f64]>::to_vec);
        if let Some(gy) = grad_y {
            let grads = grad_params.as_deref_mut().map(|g| {
                let (gw, gb) = g[l.wd..l.total].split_at_mut(l.bd - l.wd);
                (gw, gb)
            });
            let back = affine_back(&p[l.wd..l.bd], &tr.e, gy, grads);
            for (a, b) in ge.iter_mut().zip(back) {
                *a += b;
            }
        }

        let ga3: Vec<f64> = ge
            .iter()
            .zip(&tr.a3)
            .map(|(g, &a)| g * silu_grad(a))
            .collect();
        let grads = grad_params.as_deref_mut().map(|g| {
            let (gw, gb) = g[l.w3..l.wd].split_at_mut(l.b3 - l.w3);
            (gw, gb)
        });
        let gh2 = affine_back(&p[l.w3..l.b3], &tr.h2, &ga3, grads);

        let ga2: Vec<f64> = gh2
            .iter()
            .zip(&tr.a2)
            .map(|(g, &a)| g * silu_grad(a))
            .collect();
        let grads = grad_params.as_deref_mut().map(|g| {
            let (gw, gb) = g[l.w2..l.w3].split_at_mut(l.b2 - l.w2);
            (gw, gb)
        });
        let gh1 = affine_back(&p[l.w2..l.b2], &tr.h1, &ga2, grads);

        let ga1: Vec<f64> = gh1
            .iter()
            .zip(&tr.a1)
            .map(|(g, &a)| g * silu_grad(a))
            .collect();
        if let Some(g) = grad_params.as_deref_mut() {
            let row = &mut g[l.cond + tr.c * h..l.cond + (tr.c + 1) * h];
            for (acc, gi) in row.iter_mut().zip(&ga1) {
                *acc += gi;
            }
        }
        let grads = grad_params.map(|g| {
            let (gw, gb) = g[l.w1..l.cond].split_at_mut(l.b1 - l.w1);
            (gw, gb)
        });
        let mut gu = affine_back(&p[l.w1..l.b1], &tr.u, &ga1, grads);
        gu.truncate(d);
        gu
    }
}

/// Anything that predicts noise and can push a gradient on its prediction
/// back into its own parameters.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &[f64], c: Condition, t: usize) -> Result<Vec<f64>>;

    /// Length of the parameter gradient this predictor produces.
    fn param_count(&self) -> usize {
        0
    }

    /// Accumulates `d loss / d params` given `d loss / d eps_hat`. Predictors
    /// without trainable parameters leave `grad` untouched.
    fn accumulate_grad(
        &self,
        _x: &[f64],
        _c: Condition,
        _t: usize,
        _grad_eps_hat: &[f64],
        _grad: &mut [f64],
    ) -> Result<()> {
        Ok(())
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x: &[f64], c: Condition, t: usize) -> Result<Vec<f64>> {
        DenoiserModel::predict_noise(self, x, c, t)
    }

    fn param_count(&self) -> usize {
        self.params.len()
    }

    fn accumulate_grad(
        &self,
        x: &[f64],
        c: Condition,
        t: usize,
        grad_eps_hat: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        check_dim("grad", self.params.len(), grad.len())?;
        let tr = self.forward_trace(x, c, t)?;
        self.backprop(&tr, Some(grad_eps_hat), None, Some(grad));
        Ok(())
    }
}

/// Exact denoiser for data concentrated on one point per condition: with
/// `x_0 = mode[c]` the true noise is recoverable from `x_t` in closed form.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    schedule: VarianceSchedule,
    modes: Vec<Vec<f64>>,
}

impl OracleDenoiser {
    pub fn new(schedule: VarianceSchedule, modes: Vec<Vec<f64>>) -> Self {
        Self { schedule, modes }
    }
}

impl NoisePredictor for OracleDenoiser {
    fn predict_noise(&self, x: &[f64], c: Condition, t: usize) -> Result<Vec<f64>> {
        let mode = self.modes.get(c).ok_or(Error::ConditionOutOfRange {
            c,
            count: self.modes.len(),
        })?;
        self.schedule.check_t(t)?;
        check_dim("x", mode.len(), x.len())?;
        let a = self.schedule.alpha_bar(t).sqrt();
        let b = (1.0 - self.schedule.alpha_bar(t)).sqrt();
        Ok(x.iter().zip(mode).map(|(xi, m)| (xi - a * m) / b).collect())
    }
}

/// Frozen embedding function `f(x, c, t)` whose input gradient is available.
pub trait PerceptualEncoder {
    fn encode(&self, x: &[f64], c: Condition, t: usize) -> Result<Vec<f64>>;

    /// `d loss / d x` given `d loss / d f(x, c, t)`.
    fn input_grad(
        &self,
        x: &[f64],
        c: Condition,
        t: usize,
        grad_embedding: &[f64],
    ) -> Result<Vec<f64>>;
}

/// Encoder half of a frozen pretrained denoiser.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    model: DenoiserModel,
}

impl FrozenEncoder {
    pub fn new(model: &DenoiserModel) -> Self {
        Self {
            model: model.clone_frozen(),
        }
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }
}

impl PerceptualEncoder for FrozenEncoder {
    fn encode(&self, x: &[f64], c: Condition, t: usize) -> Result<Vec<f64>> {
        Ok(self.model.encode(x, c, t)?.0)
    }

    fn input_grad(
        &self,
        x: &[f64],
        c: Condition,
        t: usize,
        grad_embedding: &[f64],
    ) -> Result<Vec<f64>> {
        self.model.check_inputs(x, c, t)?;
        check_dim(
            "grad_embedding",
            self.model.arch.embed,
            grad_embedding.len(),
        )?;
        let tr = self.model.encode_trace(x, c, t);
        Ok(self.model.backprop(&tr, None, Some(grad_embedding), None))
    }
}

/// `f(x, c, t) = x`. Collapses the perceptual loss onto a rescaled noise loss,
/// which makes it a reference point for checking the perceptual objectives.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEncoder;

impl PerceptualEncoder for IdentityEncoder {
    fn encode(&self, x: &[f64], _c: Condition, _t: usize) -> Result<Vec<f64>> {
        Ok(x.to_vec())
    }

    fn input_grad(
        &self,
        x: &[f64],
        _c: Condition,
        _t: usize,
        grad_embedding: &[f64],
    ) -> Result<Vec<f64>> {
        check_dim("grad_embedding", x.len(), grad_embedding.len())?;
        Ok(grad_embedding.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Arch {
        Arch {
            input_dim: 2,
            hidden: 32,
            embed: 8,
            conditions: 4,
            timesteps: 100,
        }
    }

    #[test]
    fn param_count_closed_form() {
        // W1 32x(2+16) + b1 32 + cond 4x32 + W2 32x32 + b2 32 + W3 8x32 + b3 8 + Wd 2x8 + bd 2
        assert_eq!(arch().param_count(), 2074);
        let m = DenoiserModel::init(arch(), 1).unwrap();
        assert_eq!(m.flatten_params().len(), 2074);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = DenoiserModel::init(arch(), 5).unwrap();
        let b = DenoiserModel::init(arch(), 5).unwrap();
        let c = DenoiserModel::init(arch(), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.params().iter().zip(c.params()).any(|(x, y)| x != y));
    }

    #[test]
    fn init_rejects_zero_sizes() {
        let mut a = arch();
        a.hidden = 0;
        assert!(matches!(
            DenoiserModel::init(a, 0),
            Err(Error::InvalidArch(_))
        ));
        let mut a = arch();
        a.conditions = 0;
        assert!(DenoiserModel::init(a, 0).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_noise_conditioned() {
        let m = DenoiserModel::init(arch(), 2).unwrap();
        let x = [0.3, -1.2];
        let e1 = m.encode(&x, 1, 40).unwrap();
        let e2 = m.encode(&x, 1, 40).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.0.len(), 8);
        let e3 = m.encode(&x, 1, 39).unwrap();
        let dist: f64 = e1.0.iter().zip(&e3.0).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(dist > 0.0);
        let frozen = m.clone_frozen();
        assert_eq!(frozen.encode(&x, 1, 40).unwrap(), e1);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let m = DenoiserModel::init(arch(), 2).unwrap();
        assert!(matches!(
            m.encode(&[0.0, 0.0], 4, 1),
            Err(Error::ConditionOutOfRange { .. })
        ));
        assert!(matches!(
            m.encode(&[0.0, 0.0], 0, 101),
            Err(Error::TimestepOutOfRange { .. })
        ));
        assert!(m.predict_noise(&[0.0], 0, 1).is_err());
    }

    #[test]
    fn predict_factorizes_through_embedding() {
        let m = DenoiserModel::init(arch(), 3).unwrap();
        let x = [1.0, 2.0];
        let e = m.encode(&x, 2, 10).unwrap();
        assert_eq!(m.decode(&e), m.predict_noise(&x, 2, 10).unwrap());
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        let m = DenoiserModel::init(arch(), 3).unwrap();
        let r = 1e3 / 2f64.sqrt();
        for x in [[r, r], [-r, r], [-r, -r]] {
            let y = m.predict_noise(&x, 0, 100).unwrap();
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_decoder_gives_zero_output() {
        let mut m = DenoiserModel::init(arch(), 3).unwrap();
        m.zero_decoder().unwrap();
        assert_eq!(m.predict_noise(&[0.5, 0.5], 1, 7).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn load_round_trip_and_frozen_rejection() {
        let mut m = DenoiserModel::init(arch(), 3).unwrap();
        let before = m.clone();
        let v = m.flatten_params();
        m.load_params(&v).unwrap();
        assert_eq!(m, before);
        assert!(matches!(
            m.load_params(&v[1..]),
            Err(Error::ParamLength { .. })
        ));
        let mut f = m.clone_frozen();
        assert!(matches!(f.load_params(&v), Err(Error::FrozenModel)));
        assert!(matches!(f.apply_update(&v), Err(Error::FrozenModel)));
    }

    #[test]
    fn clone_frozen_is_independent() {
        let mut m = DenoiserModel::init(arch(), 4).unwrap();
        let f = m.clone_frozen();
        assert!(f.is_frozen());
        assert_eq!(f.params(), m.params());
        m.apply_update(&vec![0.1; m.param_count()]).unwrap();
        assert_ne!(f.params(), m.params());
        assert_eq!(f.clone_frozen(), f);
    }

    #[test]
    fn perturbing_a_condition_row_only_touches_that_condition() {
        let m = DenoiserModel::init(arch(), 8).unwrap();
        let l = Layout::new(m.arch());
        let idx = l.cond + 2 * 32 + 5; // condition 2, unit 5
        let mut v = m.flatten_params();
        v[idx] += 1e-3;
        let p = DenoiserModel::from_params(*m.arch(), v).unwrap();
        let x = [0.1, 0.2];
        assert_eq!(
            m.predict_noise(&x, 1, 5).unwrap(),
            p.predict_noise(&x, 1, 5).unwrap()
        );
        assert_ne!(
            m.predict_noise(&x, 2, 5).unwrap(),
            p.predict_noise(&x, 2, 5).unwrap()
        );
    }

    #[test]
    fn backprop_matches_finite_differences_on_params_and_input() {
        let m = DenoiserModel::init(arch(), 9).unwrap();
        let x = [0.4, -0.9];
        let (c, t) = (3, 60);
        // scalar probe: w . eps_hat
        let w = [0.7, -1.3];
        let f = |m: &DenoiserModel, x: &[f64]| {
            let y = m.predict_noise(x, c, t).unwrap();
            y[0] * w[0] + y[1] * w[1]
        };
        let mut grad = vec![0.0; m.param_count()];
        let tr = m.forward_trace(&x, c, t).unwrap();
        let gx = m.backprop(&tr, Some(&w), None, Some(&mut grad));
        let h = 1e-6;
        for i in (0..m.param_count()).step_by(37) {
            let mut vp = m.flatten_params();
            vp[i] += h;
            let mut vm = m.flatten_params();
            vm[i] -= h;
            let fp = f(&DenoiserModel::from_params(*m.arch(), vp).unwrap(), &x);
            let fm = f(&DenoiserModel::from_params(*m.arch(), vm).unwrap(), &x);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
        for j in 0..2 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fd = (f(&m, &xp) - f(&m, &xm)) / (2.0 * h);
            assert!((fd - gx[j]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn frozen_encoder_input_grad_matches_finite_differences() {
        let m = DenoiserModel::init(arch(), 10).unwrap();
        let enc = FrozenEncoder::new(&m);
        let x = [1.1, 0.2];
        let g = [0.5, -0.25, 1.0, 0.0, 0.3, -0.8, 0.9, 0.1];
        let gx = enc.input_grad(&x, 0, 12, &g).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let dot = |v: Vec<f64>| v.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            let fd = (dot(enc.encode(&xp, 0, 12).unwrap()) - dot(enc.encode(&xm, 0, 12).unwrap()))
                / (2.0 * h);
            assert!((fd - gx[j]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn oracle_recovers_true_noise() {
        let s = VarianceSchedule::linear(100, 1e-3, 0.2).unwrap();
        let modes = vec![vec![2.0, 2.0], vec![-2.0, 2.0]];
        let o = OracleDenoiser::new(s.clone(), modes);
        let eps = [0.3, -1.7];
        let xt = s.forward_raw(&[-2.0, 2.0], 35, &eps);
        let got = o.predict_noise(&xt, 1, 35).unwrap();
        for (a, b) in got.iter().zip(&eps) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
