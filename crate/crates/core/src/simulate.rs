//! Time stepping of the rescaled amplitude system and of the polar chart.
//!
//! The amplitude system is linear in the real coordinates
//! `X = (Re z, Im z, Re y_2, Im y_2, ..)`:
//!
//! ```text
//! dX = M_ε X dt + Σ_r B_r X dβ_r,   M_ε = ε⁻² diag(ρ_k) + diag(ρ_q, 0, ..)
//! ```
//!
//! `M_ε` is block diagonal with 2x2 rotation-scaling blocks, so its flow is
//! applied exactly. Three schemes are available:
//!
//! * `euler_maruyama`: explicit in both parts, guarded by a step bound.
//! * `exponential_euler`: exact linear flow over the full step, diffusion at
//!   the pre-step state.
//! * `exponential_midpoint`: half step of the exact flow, diffusion, half
//!   step. The diffusion sees the phase at the step midpoint, which removes
//!   the `O(ε⁻² dt)` phase lag of the pre-step evaluation against the fast
//!   rotation.
//! * `strang_weak2`: the same splitting with the noise substep replaced by
//!   the second order Itô–Taylor step (two-point Lévy area surrogates), so
//!   the scheme is of weak order two. Estimators default to this one.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::model::{Model, ModelError};

/// Upper and lower magnitude guards for an unrenormalized state.
pub const OVERFLOW_GUARD: f64 = 1e100;
pub const UNDERFLOW_GUARD: f64 = 1e-100;
/// Polar chart is abandoned once `‖η‖` exceeds this (i.e. `|z| < 1e-14 ‖(z,y)‖`).
pub const CHART_GUARD: f64 = 1e14;
/// Bound on `dt ε⁻² max|ρ_k|` accepted for explicit Euler–Maruyama.
pub const EXPLICIT_STEP_BOUND: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("state magnitude left [1e-100, 1e100] at t = {t}; renormalize more often")]
    RenormalizationRequired { t: f64 },
    #[error("polar chart degenerate at t = {t} (|z| vanishes relative to the stable part)")]
    ChartDegenerate { t: f64 },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    ExponentialEuler,
    ExponentialMidpoint,
    #[default]
    StrangWeak2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_renorm")]
    pub renorm_every: usize,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub include_er_term: bool,
}

fn default_renorm() -> usize {
    1
}

impl IntegratorConfig {
    pub fn new(dt: f64, epsilon: f64) -> Self {
        Self {
            dt,
            epsilon,
            scheme: Scheme::default(),
            renorm_every: 1,
            rng_seed: 0,
            include_er_term: false,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_renorm_every(mut self, every: usize) -> Self {
        self.renorm_every = every;
        self
    }

    pub fn validate(&self, model: &Model) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "epsilon = {} must lie in (0, 1)",
                self.epsilon
            )));
        }
        if self.renorm_every == 0 {
            return Err(SimError::InvalidConfig("renorm_every must be positive".into()));
        }
        if self.scheme == Scheme::EulerMaruyama {
            let max_rho = (1..=model.num_modes() as i64)
                .map(|k| model.rho(k).norm())
                .fold(0.0, f64::max);
            let stiff = self.dt * max_rho / (self.epsilon * self.epsilon);
            if stiff > EXPLICIT_STEP_BOUND {
                return Err(SimError::InvalidConfig(format!(
                    "explicit step dt ε⁻² max|ρ| = {stiff:.3} exceeds {EXPLICIT_STEP_BOUND}"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic per-path generator: one ChaCha stream per path index.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    rng
}

/// One Wiener increment per real noise degree of freedom (`2 K_W + 1`).
pub fn sample_wiener_increment<R: Rng + ?Sized>(rng: &mut R, k_w: usize, dt: f64) -> Vec<f64> {
    let mut out = vec![0.0; 2 * k_w + 1];
    fill_wiener_increment(rng, dt.max(0.0).sqrt(), &mut out);
    out
}

#[inline]
pub fn fill_wiener_increment<R: Rng + ?Sized>(rng: &mut R, sqrt_dt: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let n: f64 = rng.sample(StandardNormal);
        *v = sqrt_dt * n;
    }
}

/// Critical amplitude `z`, stable coefficients `y` (modes `2..=K`) and the
/// log of all norms factored out so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeState {
    pub z: Complex64,
    pub y: Vec<Complex64>,
    pub log_accum: f64,
    pub t: f64,
}

impl AmplitudeState {
    pub fn new(z: Complex64, y: Vec<Complex64>) -> Self {
        Self {
            z,
            y,
            log_accum: 0.0,
            t: 0.0,
        }
    }

    /// `z = 1`, `y_k = 2^{-k}`.
    pub fn default_initial(model: &Model) -> Self {
        let y = (2..=model.num_modes() as i32)
            .map(|k| Complex64::new(2f64.powi(-k), 0.0))
            .collect();
        Self::new(Complex64::new(1.0, 0.0), y)
    }

    pub fn to_real(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(2 + 2 * self.y.len());
        x.push(self.z.re);
        x.push(self.z.im);
        for v in &self.y {
            x.push(v.re);
            x.push(v.im);
        }
        x
    }

    fn from_real(x: &[f64], log_accum: f64, t: f64) -> Self {
        Self {
            z: Complex64::new(x[0], x[1]),
            y: x[2..].chunks(2).map(|c| Complex64::new(c[0], c[1])).collect(),
            log_accum,
            t,
        }
    }

    /// `𝔭 = ln|z| + log_accum`.
    pub fn log_radius(&self) -> f64 {
        self.z.norm().ln() + self.log_accum
    }

    /// Total log growth `ln‖(z, y)‖ + log_accum`.
    pub fn log_norm(&self) -> f64 {
        let n2 = self.z.norm_sqr() + self.y.iter().map(|v| v.norm_sqr()).sum::<f64>();
        0.5 * n2.ln() + self.log_accum
    }

    pub fn to_polar(&self) -> PolarState {
        let r = self.z.norm();
        PolarState {
            p: self.log_radius(),
            phi: wrap_phase(self.z.arg()),
            eta: self.y.iter().map(|v| v / r).collect(),
            t: self.t,
        }
    }
}

/// Polar chart state: `𝔭 = ln|z|`, `φ = arg z`, `η = y/|z|` (stable modes).
#[derive(Debug, Clone, PartialEq)]
pub struct PolarState {
    pub p: f64,
    pub phi: f64,
    pub eta: Vec<Complex64>,
    pub t: f64,
}

impl PolarState {
    pub fn eta_full(&self) -> Vec<Complex64> {
        let mut v = Vec::with_capacity(self.eta.len() + 1);
        v.push(Complex64::new(0.0, 0.0));
        v.extend_from_slice(&self.eta);
        v
    }

    pub fn to_amplitude(&self) -> AmplitudeState {
        let z = Complex64::from_polar(1.0, self.phi);
        AmplitudeState {
            z,
            y: self.eta.clone(),
            log_accum: self.p,
            t: self.t,
        }
    }
}

pub fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(std::f64::consts::TAU);
    if w >= std::f64::consts::TAU {
        0.0
    } else {
        w
    }
}

/// Weighted norm `‖η‖_α` of stable coefficients (modes `2..=K`).
pub fn eta_weighted_norm(model: &Model, eta: &[Complex64]) -> f64 {
    let w = &model.weights()[1..];
    (2.0 * eta
        .iter()
        .zip(w)
        .map(|(v, w)| w * w * v.norm_sqr())
        .sum::<f64>())
    .sqrt()
}

/// Precomputed linear flow and noise data for one `(model, cfg)` pair,
/// operating in place on real coordinates.
pub struct Stepper<'a> {
    model: &'a Model,
    cfg: IntegratorConfig,
    dim: usize,
    rates: Vec<Complex64>,
    flow_full: Vec<Complex64>,
    flow_half: Vec<Complex64>,
    a_q: f64,
    sqrt_dt: f64,
    /// Nonzero entries `(i, j, value)` of each active `B_r`, row-major.
    sparse: Vec<(usize, Vec<(usize, usize, f64)>)>,
    /// Coefficients `g_k`, `k ≥ 1`, of `F'(φ) = 2 Re Σ_k g_k e^{ikφ}`.
    phase_gradient: Vec<Complex64>,
}

/// Result of one step: `𝒬` and a zero-mean increment usable as a control
/// variate for the time average of `𝒬`.
///
/// `F` solves the phase equation of [`phase_poisson_gradient`] at `η = 0`,
/// and Itô's formula for `F(φ)` shows that `∫ F'(φ) dφ_noise` cancels the
/// fluctuation of `∫ 𝒬 dt` carried by the phase, up to the boundary term
/// `F(φ_T) - F(φ_0)` ([`Stepper::phase_potential`]). The increment is
/// built from the pre-noise state and centred products of the noise
/// increment, so its conditional mean is zero for every scheme and every
/// `F`. For `strang_weak2` it is matched through second order in the
/// noise, for the other schemes through first order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub q: f64,
    pub martingale: f64,
}

/// Scratch buffers for [`Stepper::step`].
pub struct Workspace {
    pub dw: Vec<f64>,
    /// Lévy area surrogates `V_rs = -V_sr = ±dt` over active channels
    /// (row-major, zero diagonal).
    pub area: Vec<f64>,
    eval: Vec<f64>,
    acc: Vec<f64>,
    rows: Vec<f64>,
    second: Vec<f64>,
    images: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a Model, cfg: IntegratorConfig) -> Result<Self, SimError> {
        cfg.validate(model)?;
        let eps2 = cfg.epsilon * cfg.epsilon;
        let cs = model.critical();
        let er = if cfg.include_er_term {
            eps2 * model.spectrum().er_bound
        } else {
            0.0
        };
        let rates: Vec<Complex64> = (1..=model.num_modes() as i64)
            .map(|k| {
                if k == 1 {
                    Complex64::new(cs.a_q + er, cs.b_c / eps2 + cs.b_q)
                } else {
                    model.rho(k) / eps2
                }
            })
            .collect();
        let flow_full = rates.iter().map(|r| (r * cfg.dt).exp()).collect();
        let flow_half = rates.iter().map(|r| (r * 0.5 * cfg.dt).exp()).collect();
        let rn = model.real_noise();
        let n = model.num_slots();
        let sparse = rn
            .active
            .iter()
            .map(|&r| {
                let nz = rn
                    .matrix(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(idx, v)| (idx / n, idx % n, *v))
                    .collect();
                (r, nz)
            })
            .collect();
        let phase_gradient = phase_poisson_gradient(model, cfg.epsilon, PHASE_HARMONICS)?;
        Ok(Self {
            model,
            cfg,
            dim: model.num_slots(),
            rates,
            flow_full,
            flow_half,
            a_q: cs.a_q + er,
            sqrt_dt: cfg.dt.sqrt(),
            sparse,
            phase_gradient,
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    pub fn workspace(&self) -> Workspace {
        let nr = self.model.num_channels();
        let na = self.model.real_noise().active.len();
        Workspace {
            dw: vec![0.0; nr],
            area: vec![0.0; na * na],
            eval: vec![0.0; self.dim],
            acc: vec![0.0; self.dim],
            rows: vec![0.0; 2 * nr],
            second: vec![0.0; self.dim],
            images: vec![0.0; na * self.dim],
        }
    }

    /// Draws the Wiener increment (and the area signs when the scheme needs
    /// them) for the next step.
    #[inline]
    pub fn sample_increment<R: Rng + ?Sized>(&self, rng: &mut R, ws: &mut Workspace) {
        fill_wiener_increment(rng, self.sqrt_dt, &mut ws.dw);
        if self.cfg.scheme == Scheme::StrangWeak2 {
            let na = self.sparse.len();
            let h = self.cfg.dt;
            let mut bits = 0u64;
            let mut left = 0;
            for r in 0..na {
                for s in r + 1..na {
                    if left == 0 {
                        bits = rng.random();
                        left = 64;
                    }
                    let v = if bits & 1 == 1 { h } else { -h };
                    bits >>= 1;
                    left -= 1;
                    ws.area[r * na + s] = v;
                    ws.area[s * na + r] = -v;
                }
            }
        }
    }

    #[inline]
    fn apply_flow(factors: &[Complex64], x: &mut [f64]) {
        for (k, f) in factors.iter().enumerate() {
            let (re, im) = (x[2 * k], x[2 * k + 1]);
            x[2 * k] = f.re * re - f.im * im;
            x[2 * k + 1] = f.re * im + f.im * re;
        }
    }

    /// Adds `Σ_r dw_r B_r v` to `acc` and stores the critical rows of each
    /// `B_r v` in `rows` (pairs `(re, im)` per channel).
    #[inline]
    fn diffusion(&self, v: &[f64], dw: &[f64], acc: &mut [f64], rows: &mut [f64]) {
        rows.iter_mut().for_each(|x| *x = 0.0);
        for (r, entries) in &self.sparse {
            let w = dw[*r];
            for &(i, j, val) in entries {
                let t = val * v[j];
                if i < 2 {
                    rows[2 * r + i] += t;
                }
                acc[i] += w * t;
            }
        }
    }

    /// Second order Itô–Taylor step of `dX = Σ_r B_r X dβ_r` applied to `x`:
    /// `X + Σ_r ΔW_r B_r X + ½ Σ_{r,s} B_s B_r X (ΔW_r ΔW_s + V_rs)` with
    /// `V_rr = -h` and `V_rs = -V_sr = ±h` for `r < s`.
    fn weak2_noise(&self, x: &mut [f64], ws: &mut Workspace) {
        let n = self.dim;
        let h = self.cfg.dt;
        let Workspace {
            dw,
            area,
            acc,
            second,
            images,
            eval: z,
            ..
        } = ws;
        let na = self.sparse.len();
        acc.iter_mut().for_each(|v| *v = 0.0);
        second.iter_mut().for_each(|v| *v = 0.0);
        images.iter_mut().for_each(|v| *v = 0.0);
        for (a, (r, entries)) in self.sparse.iter().enumerate() {
            let y = &mut images[a * n..(a + 1) * n];
            sparse_apply(entries, x, y);
            for (s, v) in acc.iter_mut().zip(y.iter()) {
                *s += dw[*r] * v;
            }
        }
        for (sa, (s, entries)) in self.sparse.iter().enumerate() {
            for i in 0..n {
                z[i] = dw[*s] * acc[i] - h * images[sa * n + i];
            }
            for ra in 0..na {
                // V_rs with r the inner (first) integration index
                let v = area[ra * na + sa];
                if v == 0.0 {
                    continue;
                }
                let y = &images[ra * n..(ra + 1) * n];
                for i in 0..n {
                    z[i] += v * y[i];
                }
            }
            sparse_apply(entries, z, second);
        }
        for i in 0..n {
            x[i] += acc[i] + 0.5 * second[i];
        }
    }

    /// Critical rows of `B_r v` into `rows`.
    #[inline]
    fn critical_rows(&self, v: &[f64], rows: &mut [f64]) {
        rows.iter_mut().for_each(|x| *x = 0.0);
        for (r, entries) in &self.sparse {
            for &(i, j, val) in entries {
                if i >= 2 {
                    break;
                }
                rows[2 * r + i] += val * v[j];
            }
        }
    }

    /// 𝒬 at the real state `v` from the critical rows of `B_r v`.
    #[inline]
    fn q_from_rows(&self, v: &[f64], rows: &[f64]) -> f64 {
        let z = Complex64::new(v[0], v[1]);
        let r2 = z.norm_sqr();
        let mut s = Complex64::new(0.0, 0.0);
        for c in rows.chunks_exact(2) {
            let psi = Complex64::new(c[0], c[1]);
            s += psi * psi;
        }
        let zc = z.conj();
        self.a_q - 0.5 * (zc * zc * s).re / (r2 * r2)
    }

    /// Advances `x` by one step with the increment in `ws.dw`; returns 𝒬 at
    /// the pre-step state (`strang_weak2`) or at the point where the
    /// diffusion was evaluated (other schemes).
    pub fn step(&self, x: &mut [f64], ws: &mut Workspace) -> f64 {
        self.step_detailed(x, ws).q
    }

    /// As [`Stepper::step`], also returning the phase martingale increment
    /// (see [`StepOutput`]).
    pub fn step_detailed(&self, x: &mut [f64], ws: &mut Workspace) -> StepOutput {
        if self.cfg.scheme == Scheme::StrangWeak2 {
            self.critical_rows(x, &mut ws.rows);
            let q = self.q_from_rows(x, &ws.rows);
            Self::apply_flow(&self.flow_half, x);
            let z = Complex64::new(x[0], x[1]);
            self.weak2_noise(x, ws);
            let martingale = self.phase_martingale_weak2(z, ws);
            Self::apply_flow(&self.flow_half, x);
            return StepOutput { q, martingale };
        }
        let Workspace {
            dw, eval, acc, rows, ..
        } = ws;
        match self.cfg.scheme {
            Scheme::StrangWeak2 => unreachable!(),
            Scheme::ExponentialMidpoint => {
                Self::apply_flow(&self.flow_half, x);
                acc.copy_from_slice(x);
                self.diffusion(x, dw, acc, rows);
                let q = self.q_from_rows(x, rows);
                let martingale = self.phase_martingale(x[0], x[1], acc[0] - x[0], acc[1] - x[1]);
                x.copy_from_slice(acc);
                Self::apply_flow(&self.flow_half, x);
                StepOutput { q, martingale }
            }
            Scheme::ExponentialEuler => {
                eval.copy_from_slice(x);
                acc.iter_mut().for_each(|v| *v = 0.0);
                self.diffusion(eval, dw, acc, rows);
                let q = self.q_from_rows(eval, rows);
                let martingale = self.phase_martingale(eval[0], eval[1], acc[0], acc[1]);
                Self::apply_flow(&self.flow_full, x);
                for (xi, a) in x.iter_mut().zip(acc.iter()) {
                    *xi += a;
                }
                StepOutput { q, martingale }
            }
            Scheme::EulerMaruyama => {
                eval.copy_from_slice(x);
                acc.iter_mut().for_each(|v| *v = 0.0);
                self.diffusion(eval, dw, acc, rows);
                let q = self.q_from_rows(eval, rows);
                let martingale = self.phase_martingale(eval[0], eval[1], acc[0], acc[1]);
                let h = self.cfg.dt;
                for (k, r) in self.rates.iter().enumerate() {
                    let (re, im) = (eval[2 * k], eval[2 * k + 1]);
                    x[2 * k] += h * (r.re * re - r.im * im) + acc[2 * k];
                    x[2 * k + 1] += h * (r.re * im + r.im * re) + acc[2 * k + 1];
                }
                StepOutput { q, martingale }
            }
        }
    }

    /// `F'(φ) dφ_noise / dt` for the critical amplitude `z` and its noise
    /// increment `dz`.
    #[inline]
    fn phase_martingale(&self, z_re: f64, z_im: f64, dz_re: f64, dz_im: f64) -> f64 {
        self.phase_gradient_at(z_re, z_im) * Self::phase_increment(z_re, z_im, dz_re, dz_im) / self.cfg.dt
    }

    /// Second order version for `strang_weak2`: with `a = Δz/z` the kick
    /// relative to the pre-kick amplitude and `a₁` its first order part,
    ///
    /// ```text
    /// F' [Im a - ½ Im(a₁² - E a₁²)] + ½ F'' [(Im a₁)² - E (Im a₁)²],
    /// ```
    ///
    /// which matches `F(φ + Δφ) - F(φ)` through second order in the noise and
    /// has zero conditional mean.
    fn phase_martingale_weak2(&self, z: Complex64, ws: &Workspace) -> f64 {
        let r2 = z.norm_sqr();
        if r2 == 0.0 || self.phase_gradient.is_empty() {
            return 0.0;
        }
        let (f1, f2) = self.phase_derivatives_at(z / r2.sqrt());
        let zi = z.conj() / r2;
        let n = self.dim;
        let h = self.cfg.dt;
        let a1 = Complex64::new(ws.acc[0], ws.acc[1]) * zi;
        let a = a1 + 0.5 * Complex64::new(ws.second[0], ws.second[1]) * zi;
        let (mut e_sq, mut e_im) = (Complex64::new(0.0, 0.0), 0.0);
        for k in 0..self.sparse.len() {
            let v = Complex64::new(ws.images[k * n], ws.images[k * n + 1]) * zi;
            e_sq += v * v;
            e_im += v.im * v.im;
        }
        let inc = f1 * (a.im - 0.5 * (a1 * a1 - h * e_sq).im) + 0.5 * f2 * (a1.im * a1.im - h * e_im);
        inc / h
    }

    /// `(F'(φ), F''(φ))` at `w = e^{iφ}`.
    #[inline]
    fn phase_derivatives_at(&self, w: Complex64) -> (f64, f64) {
        let mut wk = w;
        let (mut f1, mut f2) = (0.0, 0.0);
        for (k, g) in self.phase_gradient.iter().enumerate() {
            let t = g * wk;
            f1 += t.re;
            f2 -= (k + 1) as f64 * t.im;
            wk *= w;
        }
        (2.0 * f1, 2.0 * f2)
    }

    /// `F(φ)` at the phase of the state `x` (zero-mean primitive of `F'`).
    pub fn phase_potential(&self, x: &[f64]) -> f64 {
        let r2 = x[0] * x[0] + x[1] * x[1];
        if r2 == 0.0 {
            return 0.0;
        }
        let w = Complex64::new(x[0], x[1]) / r2.sqrt();
        let mut wk = w;
        let mut f = 0.0;
        for (k, g) in self.phase_gradient.iter().enumerate() {
            f += (g * wk / Complex64::new(0.0, (k + 1) as f64)).re;
            wk *= w;
        }
        2.0 * f
    }

    /// `F'(φ)` at the phase of `z`.
    #[inline]
    fn phase_gradient_at(&self, z_re: f64, z_im: f64) -> f64 {
        let r2 = z_re * z_re + z_im * z_im;
        if r2 == 0.0 {
            return 0.0;
        }
        self.phase_derivatives_at(Complex64::new(z_re, z_im) / r2.sqrt()).0
    }

    /// First order phase increment `Im(conj(z) dz)/|z|²`.
    #[inline]
    fn phase_increment(z_re: f64, z_im: f64, dz_re: f64, dz_im: f64) -> f64 {
        let r2 = z_re * z_re + z_im * z_im;
        if r2 == 0.0 {
            return 0.0;
        }
        (z_re * dz_im - z_im * dz_re) / r2
    }

    /// 𝒬 evaluated at an arbitrary real state (diagnostics and tests).
    pub fn q_at(&self, x: &[f64]) -> f64 {
        let mut ws = self.workspace();
        let zero = vec![0.0; self.model.num_channels()];
        let mut acc = vec![0.0; self.dim];
        self.diffusion(x, &zero, &mut acc, &mut ws.rows);
        self.q_from_rows(x, &ws.rows)
    }
}

/// `out += B v` for `B` given by its nonzero entries.
#[inline]
fn sparse_apply(entries: &[(usize, usize, f64)], v: &[f64], out: &mut [f64]) {
    for &(i, j, val) in entries {
        out[i] += val * v[j];
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Divides `x` by its Euclidean norm and returns the log of that norm.
#[inline]
pub fn renormalize(x: &mut [f64]) -> f64 {
    let n = norm(x);
    let inv = 1.0 / n;
    x.iter_mut().for_each(|v| *v *= inv);
    n.ln()
}

fn check_magnitude(x: &[f64], t: f64) -> Result<(), SimError> {
    let n = norm(x);
    if !n.is_finite() {
        return Err(SimError::NonFinite { t });
    }
    if !(UNDERFLOW_GUARD..=OVERFLOW_GUARD).contains(&n) {
        return Err(SimError::RenormalizationRequired { t });
    }
    Ok(())
}

/// One step of the amplitude system with a given increment; no renormalization.
pub fn step_amplitude(
    model: &Model,
    state: &AmplitudeState,
    cfg: &IntegratorConfig,
    dw: &[f64],
) -> Result<AmplitudeState, SimError> {
    let stepper = Stepper::new(model, *cfg)?;
    check_len(model.num_channels(), dw.len())?;
    check_len(model.num_modes() - 1, state.y.len())?;
    let mut ws = stepper.workspace();
    ws.dw.copy_from_slice(dw);
    let mut x = state.to_real();
    stepper.step(&mut x, &mut ws);
    let t = state.t + cfg.dt;
    check_magnitude(&x, t)?;
    Ok(AmplitudeState::from_real(&x, state.log_accum, t))
}

fn check_len(expected: usize, got: usize) -> Result<(), SimError> {
    if expected != got {
        return Err(SimError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Polar-chart coefficients at `(φ, η)`: drift and noise rows of 𝔭, φ and η.
pub struct PolarCoefficients {
    pub xi: f64,
    pub gamma: f64,
    pub gp: Vec<f64>,
    pub gphi: Vec<f64>,
    /// Per stable mode `j = 2..=K`: O(1) drift of `η_j`.
    pub eta_drift: Vec<Complex64>,
    /// Per stable mode: noise row of `η_j`.
    pub eta_noise: Vec<Vec<Complex64>>,
}

/// Itô coefficients of the chart `(𝔭, φ, η) = (ln|z|, arg z, y/|z|)`.
pub fn polar_coefficients(
    model: &Model,
    phi: f64,
    eta: &[Complex64],
    a_q: f64,
) -> Result<PolarCoefficients, SimError> {
    let mut full = Vec::with_capacity(eta.len() + 1);
    full.push(Complex64::new(0.0, 0.0));
    full.extend_from_slice(eta);
    let u = model.chart_point(phi, &full)?;
    let psi = model.row_action(0, &u);
    let gr: Vec<f64> = psi.iter().map(|c| c.re).collect();
    let gi: Vec<f64> = psi.iter().map(|c| c.im).collect();
    let (xi, gamma) = crate::model::xi_gamma_from_components(phi, &gr, &gi);
    let (s, c) = phi.sin_cos();
    let gp: Vec<f64> = gr.iter().zip(&gi).map(|(r, i)| r * c + i * s).collect();
    let gphi: Vec<f64> = gr.iter().zip(&gi).map(|(r, i)| r * s - i * c).collect();
    let gp2: f64 = gp.iter().map(|v| v * v).sum();
    let mut eta_drift = Vec::with_capacity(eta.len());
    let mut eta_noise = Vec::with_capacity(eta.len());
    for (i, e) in eta.iter().enumerate() {
        let rj = model.row_action(2 * (i + 1), &u);
        let rg: Complex64 = rj.iter().zip(&gp).map(|(r, g)| r * g).sum();
        eta_drift.push(e * (-a_q - xi + 0.5 * gp2) - rg);
        eta_noise.push(rj.iter().zip(&gp).map(|(r, g)| r - e * g).collect());
    }
    Ok(PolarCoefficients {
        xi,
        gamma,
        gp,
        gphi,
        eta_drift,
        eta_noise,
    })
}

/// One step of the polar chart: Euler–Maruyama for `(𝔭, φ)`, exact stiff
/// factor plus explicit O(1) terms for `η`.
pub fn step_polar(
    model: &Model,
    state: &PolarState,
    cfg: &IntegratorConfig,
    dw: &[f64],
) -> Result<PolarState, SimError> {
    cfg.validate(model)?;
    check_len(model.num_channels(), dw.len())?;
    check_len(model.num_modes() - 1, state.eta.len())?;
    let eps2 = cfg.epsilon * cfg.epsilon;
    let cs = model.critical();
    let a_q = if cfg.include_er_term {
        cs.a_q + eps2 * model.spectrum().er_bound
    } else {
        cs.a_q
    };
    let h = cfg.dt;
    let co = polar_coefficients(model, state.phi, &state.eta, a_q)?;
    let dot = |a: &[f64]| a.iter().zip(dw).map(|(x, w)| x * w).sum::<f64>();
    let p = state.p + h * (a_q + co.xi) + dot(&co.gp);
    let phi = state.phi + h * (cs.b_c / eps2 + cs.b_q + co.gamma) - dot(&co.gphi);
    let eta: Vec<Complex64> = state
        .eta
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let stiff = (model.rho(i as i64 + 2) * (h / eps2)).exp();
            let noise: Complex64 = co.eta_noise[i].iter().zip(dw).map(|(r, w)| r * w).sum();
            stiff * e + co.eta_drift[i] * h + noise
        })
        .collect();
    let t = state.t + h;
    let en = eta.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if !en.is_finite() || en > CHART_GUARD {
        return Err(SimError::ChartDegenerate { t });
    }
    if !(p.is_finite() && phi.is_finite()) {
        return Err(SimError::NonFinite { t });
    }
    Ok(PolarState {
        p,
        phi: wrap_phase(phi),
        eta,
        t,
    })
}

/// Number of steps covering `[0, t]`; `t` must be a multiple of `dt`.
pub fn step_count(t: f64, dt: f64) -> Result<usize, SimError> {
    if t < 0.0 || !t.is_finite() {
        return Err(SimError::InvalidConfig(format!("horizon {t} must be >= 0")));
    }
    let n = (t / dt).round();
    if (n * dt - t).abs() > 1e-9 * t.max(dt) {
        return Err(SimError::InvalidConfig(format!(
            "horizon {t} is not a multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub p: f64,
    pub phi: f64,
    pub eta_norm: f64,
    pub log_accum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSummary {
    pub final_state: AmplitudeState,
    pub samples: Vec<TrajectorySample>,
}

impl PathSummary {
    pub fn log_accum(&self) -> f64 {
        self.final_state.log_accum
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,p,phi,eta_norm,log_accum")?;
        for s in &self.samples {
            writeln!(w, "{},{},{},{},{}", s.t, s.p, s.phi, s.eta_norm, s.log_accum)?;
        }
        Ok(())
    }
}

fn sample_of(model: &Model, state: &AmplitudeState) -> TrajectorySample {
    let polar = state.to_polar();
    TrajectorySample {
        t: state.t,
        p: polar.p,
        phi: polar.phi,
        eta_norm: eta_weighted_norm(model, &polar.eta),
        log_accum: state.log_accum,
    }
}

/// Simulates one path of the amplitude system using stream 0 of
/// `cfg.rng_seed`; samples every `stride` steps (0 disables sampling).
pub fn simulate_path(
    model: &Model,
    init: &AmplitudeState,
    cfg: &IntegratorConfig,
    t_final: f64,
    stride: usize,
) -> Result<PathSummary, SimError> {
    let mut rng = path_rng(cfg.rng_seed, 0);
    simulate_path_with(model, init, cfg, t_final, stride, &mut rng)
}

pub fn simulate_path_with<R: Rng + ?Sized>(
    model: &Model,
    init: &AmplitudeState,
    cfg: &IntegratorConfig,
    t_final: f64,
    stride: usize,
    rng: &mut R,
) -> Result<PathSummary, SimError> {
    let stepper = Stepper::new(model, *cfg)?;
    check_len(model.num_modes() - 1, init.y.len())?;
    let n = step_count(t_final, cfg.dt)?;
    let mut samples = Vec::new();
    if stride > 0 {
        samples.push(sample_of(model, init));
    }
    if n == 0 {
        return Ok(PathSummary {
            final_state: init.clone(),
            samples,
        });
    }
    let mut ws = stepper.workspace();
    let mut x = init.to_real();
    let mut log_accum = init.log_accum;
    for i in 1..=n {
        stepper.sample_increment(rng, &mut ws);
        stepper.step(&mut x, &mut ws);
        let t = init.t + i as f64 * cfg.dt;
        if i % cfg.renorm_every == 0 {
            log_accum += renormalize(&mut x);
            if !log_accum.is_finite() {
                return Err(SimError::NonFinite { t });
            }
        } else {
            check_magnitude(&x, t)?;
        }
        if stride > 0 && i % stride == 0 {
            samples.push(sample_of(model, &AmplitudeState::from_real(&x, log_accum, t)));
        }
    }
    Ok(PathSummary {
        final_state: AmplitudeState::from_real(&x, log_accum, init.t + n as f64 * cfg.dt),
        samples,
    })
}

/// Harmonics kept in the phase control variate.
pub const PHASE_HARMONICS: usize = 24;

/// Periodic `F'` for the phase generator at `η = 0`,
///
/// ```text
/// (ε⁻² b_c + b_q + Γ(φ,0)) F' + ½ D(φ,0) F'' = Ξ(φ,0) - c,   D = |G^φ(φ,0)|²,
/// ```
///
/// with `c` fixed by periodicity of `F` (`F'` has zero mean). Galerkin in
/// the harmonics `|k| ≤ h`; returns `g_1..g_h` with `F' = 2 Re Σ g_k e^{ikφ}`,
/// trailing negligible coefficients dropped.
pub fn phase_poisson_gradient(
    model: &Model,
    epsilon: f64,
    harmonics: usize,
) -> Result<Vec<Complex64>, SimError> {
    use nalgebra::{DMatrix, DVector};
    use rustfft::FftPlanner;
    let cs = model.critical();
    let eps2 = epsilon * epsilon;
    let n = 4 * harmonics.max(4);
    let zeros = vec![Complex64::new(0.0, 0.0); model.num_modes()];
    let (mut drift, mut diff, mut xi) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let phi = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let (x, g) = model.eval_xi_gamma(phi, &zeros)?;
        let (gphi, _) = model.eval_gphi_gp(phi, &zeros)?;
        // scaled by ε²
        drift.push(Complex64::new(cs.b_c + eps2 * (cs.b_q + g), 0.0));
        diff.push(Complex64::new(0.5 * eps2 * gphi.iter().map(|v| v * v).sum::<f64>(), 0.0));
        xi.push(Complex64::new(eps2 * x, 0.0));
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    for v in [&mut drift, &mut diff, &mut xi] {
        fft.process(v);
        v.iter_mut().for_each(|c| *c /= n as f64);
    }
    let h = harmonics as i64;
    let coeff = |v: &[Complex64], k: i64| v[k.rem_euclid(n as i64) as usize];
    let m = 2 * harmonics + 2;
    let mut a = DMatrix::<Complex64>::zeros(m, m);
    let mut rhs = DVector::<Complex64>::zeros(m);
    for k in -h..=h {
        let row = (k + h) as usize;
        for j in -h..=h {
            let col = (j + h) as usize;
            a[(row, col)] = coeff(&drift, k - j) + coeff(&diff, k - j) * Complex64::new(0.0, j as f64);
        }
        if k == 0 {
            a[(row, m - 1)] = Complex64::new(eps2, 0.0);
        }
        rhs[row] = coeff(&xi, k);
    }
    a[(m - 1, h as usize)] = Complex64::new(1.0, 0.0);
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| SimError::InvalidConfig("singular phase equation".into()))?;
    let mut g: Vec<Complex64> = (1..=h).map(|k| sol[(k + h) as usize]).collect();
    let scale = g.iter().fold(0.0f64, |s, v| s.max(v.norm()));
    while g.last().is_some_and(|v| v.norm() <= 1e-17 * scale.max(1e-300)) {
        g.pop();
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NoiseEntry, NoiseTensor, SpectrumSpec};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn spec() -> SpectrumSpec {
        SpectrumSpec::from_lists(&[0.0, -1.0, -2.0], &[1.0, 2.0, 3.0], &[1.0; 3], &[0.3, 0.0, 0.0])
    }

    fn noisy() -> Model {
        let e = vec![
            NoiseEntry::new(1, 1, 1, c(0.3, 0.1)),
            NoiseEntry::new(1, -1, 1, c(0.1, 0.2)),
            NoiseEntry::new(2, 1, 1, c(0.2, -0.1)),
            NoiseEntry::new(1, 2, 2, c(0.1, 0.25)),
            NoiseEntry::new(3, 0, 2, c(0.15, 0.05)),
            NoiseEntry::new(2, 2, 2, c(0.3, 0.0)),
        ];
        Model::build(spec(), NoiseTensor::new(e, 2, 5.0, 5.0), 0.0, -0.4, 0.5).unwrap()
    }

    #[test]
    fn zero_dt_increment_is_zero() {
        let mut rng = path_rng(1, 0);
        assert!(sample_wiener_increment(&mut rng, 3, 0.0).iter().all(|v| *v == 0.0));
        assert_eq!(sample_wiener_increment(&mut rng, 3, 0.1).len(), 7);
    }

    #[test]
    fn zero_noise_single_step_is_exact_flow() {
        let m = Model::build(spec(), NoiseTensor::zero(2), 0.0, -0.4, 0.5).unwrap();
        let cs = m.critical();
        let (dt, eps) = (1e-2, 0.3);
        let init = AmplitudeState::new(c(1.0, 0.0), vec![c(0.0, 0.0); 2]);
        for scheme in [Scheme::ExponentialEuler, Scheme::ExponentialMidpoint] {
            let cfg = IntegratorConfig::new(dt, eps).with_scheme(scheme);
            let out = step_amplitude(&m, &init, &cfg, &[0.0; 5]).unwrap();
            let expect = (c(cs.a_q, cs.b_c / (eps * eps) + cs.b_q) * dt).exp();
            assert!((out.z - expect).norm() < 1e-15, "{scheme:?}");
        }
    }

    #[test]
    fn zero_noise_stable_decay() {
        let m = Model::build(spec(), NoiseTensor::zero(2), 0.0, 0.0, 0.5).unwrap();
        let eps = 0.5;
        let cfg = IntegratorConfig::new(1e-3, eps).with_renorm_every(usize::MAX);
        let init = AmplitudeState::new(c(0.0, 0.0), vec![c(0.6, 0.8), c(0.0, 0.0)]);
        let out = simulate_path(&m, &init, &cfg, 0.2, 0).unwrap();
        let expect = (-0.2f64 / (eps * eps)).exp();
        assert!((out.final_state.y[0].norm() - expect).abs() < 1e-13);
    }

    #[test]
    fn explicit_scheme_rejects_stiff_step() {
        let m = noisy();
        let cfg = IntegratorConfig::new(1e-2, 0.1).with_scheme(Scheme::EulerMaruyama);
        assert!(matches!(Stepper::new(&m, cfg), Err(SimError::InvalidConfig(_))));
        let cfg = IntegratorConfig::new(1e-4, 0.1).with_scheme(Scheme::EulerMaruyama);
        assert!(Stepper::new(&m, cfg).is_ok());
    }

    #[test]
    fn overflow_guard_without_renormalization() {
        let m = Model::build(spec(), NoiseTensor::zero(2), 0.0, 1.0, 0.5).unwrap();
        let cfg = IntegratorConfig::new(0.5, 0.5).with_renorm_every(usize::MAX);
        let init = AmplitudeState::new(c(1.0, 0.0), vec![c(0.0, 0.0); 2]);
        assert!(matches!(
            simulate_path(&m, &init, &cfg, 500.0, 0),
            Err(SimError::RenormalizationRequired { .. })
        ));
        let cfg = cfg.with_renorm_every(1);
        let out = simulate_path(&m, &init, &cfg, 500.0, 0).unwrap();
        assert!((out.final_state.log_radius() - 500.0).abs() < 1e-9);
    }

    #[test]
    fn zero_horizon_returns_init() {
        let m = noisy();
        let init = AmplitudeState::default_initial(&m);
        let cfg = IntegratorConfig::new(1e-3, 0.2);
        let out = simulate_path(&m, &init, &cfg, 0.0, 1).unwrap();
        assert_eq!(out.final_state, init);
        assert!(simulate_path(&m, &init, &cfg, 1.00005e-2, 0).is_err());
    }

    #[test]
    fn q_from_state_matches_model_evaluator() {
        let m = noisy();
        let stepper = Stepper::new(&m, IntegratorConfig::new(1e-3, 0.2)).unwrap();
        let state = AmplitudeState::new(c(0.7, -1.1), vec![c(0.3, 0.2), c(-0.5, 0.1)]);
        let polar = state.to_polar();
        let q = m.eval_q(polar.phi, &polar.eta_full()).unwrap();
        assert!((stepper.q_at(&state.to_real()) - q).abs() < 1e-13);
    }

    #[test]
    fn polar_zero_noise_is_linear() {
        let m = Model::build(spec(), NoiseTensor::zero(2), 0.0, -0.5, 0.5).unwrap();
        let cs = m.critical();
        let cfg = IntegratorConfig::new(1e-3, 0.4);
        let mut s = PolarState {
            p: 0.0,
            phi: 0.0,
            eta: vec![c(0.0, 0.0); 2],
            t: 0.0,
        };
        for _ in 0..1000 {
            s = step_polar(&m, &s, &cfg, &[0.0; 5]).unwrap();
        }
        assert!((s.p - cs.a_q).abs() < 1e-12);
        let rate = cs.b_c / 0.16 + cs.b_q;
        assert!((s.phi - wrap_phase(rate)).abs() < 1e-9);
    }

    #[test]
    fn eta_stays_zero_for_critical_only_outputs() {
        let e = vec![NoiseEntry::new(1, 1, 1, c(0.3, 0.1)), NoiseEntry::new(1, -1, 2, c(0.2, 0.0))];
        let m = Model::build(spec(), NoiseTensor::new(e, 1, 5.0, 5.0), 0.0, -0.2, 0.5).unwrap();
        let cfg = IntegratorConfig::new(1e-3, 0.3);
        let mut s = PolarState {
            p: 0.0,
            phi: 0.3,
            eta: vec![c(0.0, 0.0); 2],
            t: 0.0,
        };
        let mut rng = path_rng(3, 0);
        for _ in 0..500 {
            let dw = sample_wiener_increment(&mut rng, 1, cfg.dt);
            s = step_polar(&m, &s, &cfg, &dw).unwrap();
        }
        assert!(s.eta.iter().all(|v| *v == c(0.0, 0.0)));
        // a stable output row fed by the critical input does excite η
        let e = vec![NoiseEntry::new(2, 1, 1, c(0.3, 0.1))];
        let m = Model::build(spec(), NoiseTensor::new(e, 1, 5.0, 5.0), 0.0, -0.2, 0.5).unwrap();
        let dw = sample_wiener_increment(&mut rng, 1, cfg.dt);
        let s2 = step_polar(&m, &PolarState { p: 0.0, phi: 0.3, eta: vec![c(0.0, 0.0); 2], t: 0.0 }, &cfg, &dw).unwrap();
        assert!(s2.eta[0].norm() > 0.0);
    }

    #[test]
    fn polar_coefficients_match_amplitude_ito() {
        // d ln|z| = Re(dz/z) - ½ Re((dz/z)²) with dz/z = e^{-iφ} ψ·dβ
        let m = noisy();
        let phi = 0.9;
        let eta = vec![c(0.1, -0.2), c(0.05, 0.3)];
        let co = polar_coefficients(&m, phi, &eta, m.critical().a_q).unwrap();
        let mut full = vec![c(0.0, 0.0)];
        full.extend_from_slice(&eta);
        let u = m.chart_point(phi, &full).unwrap();
        let psi = m.row_action(0, &u);
        let e = Complex64::from_polar(1.0, -phi);
        let sq: Complex64 = psi.iter().map(|p| p * p).sum();
        let xi = -0.5 * (e * e * sq).re;
        assert!((xi - co.xi).abs() < 1e-14);
        for (r, p) in psi.iter().enumerate() {
            assert!(((e * p).re - co.gp[r]).abs() < 1e-14);
            assert!(((e * p).im + co.gphi[r]).abs() < 1e-14);
        }
    }

    #[test]
    fn phase_potential_solves_phase_equation() {
        let m = noisy();
        let eps = 0.2;
        let stepper = Stepper::new(&m, IntegratorConfig::new(1e-3, eps)).unwrap();
        let cs = m.critical();
        let zeros = vec![c(0.0, 0.0); m.num_modes()];
        let mut res = Vec::new();
        let mut scale = 0.0f64;
        for i in 0..200 {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / 200.0;
            let (xi, g) = m.eval_xi_gamma(phi, &zeros).unwrap();
            let (gphi, _) = m.eval_gphi_gp(phi, &zeros).unwrap();
            let d: f64 = gphi.iter().map(|v| v * v).sum();
            let (f1, f2) = stepper.phase_derivatives_at(Complex64::from_polar(1.0, phi));
            res.push((cs.b_c / (eps * eps) + cs.b_q + g) * f1 + 0.5 * d * f2 - xi);
            scale = scale.max(xi.abs());
        }
        // the residual is the constant -mean of Ξ
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let spread = res.iter().fold(0.0f64, |a, r| a.max((r - mean).abs()));
        assert!(spread < 1e-10 * scale, "spread {spread}");
        // F is a primitive of F'
        let x = |phi: f64| [phi.cos(), phi.sin(), 0.0, 0.0, 0.0, 0.0];
        let h = 1e-5;
        let fd = (stepper.phase_potential(&x(1.0 + h)) - stepper.phase_potential(&x(1.0 - h))) / (2.0 * h);
        let (f1, _) = stepper.phase_derivatives_at(Complex64::from_polar(1.0, 1.0));
        assert!((fd - f1).abs() < 1e-7 * f1.abs().max(1.0));
    }

    #[test]
    fn zero_noise_has_no_control_variate() {
        let m = Model::build(spec(), NoiseTensor::zero(2), 0.0, -0.4, 0.5).unwrap();
        assert!(phase_poisson_gradient(&m, 0.2, PHASE_HARMONICS).unwrap().is_empty());
        for scheme in [Scheme::StrangWeak2, Scheme::ExponentialMidpoint] {
            let stepper = Stepper::new(&m, IntegratorConfig::new(1e-3, 0.2).with_scheme(scheme)).unwrap();
            let mut ws = stepper.workspace();
            let mut x = vec![0.6, 0.8, 0.1, 0.0, 0.0, 0.2];
            let out = stepper.step_detailed(&mut x, &mut ws);
            assert_eq!(out.martingale, 0.0);
            assert_eq!(stepper.phase_potential(&x), 0.0);
        }
    }

    #[test]
    fn martingale_increment_has_zero_mean() {
        let m = noisy();
        let x0 = vec![0.7, -0.4, 0.2, 0.1, -0.3, 0.05];
        for scheme in [Scheme::StrangWeak2, Scheme::ExponentialMidpoint] {
            let stepper = Stepper::new(&m, IntegratorConfig::new(1e-3, 0.2).with_scheme(scheme)).unwrap();
            let mut ws = stepper.workspace();
            let mut rng = path_rng(11, 0);
            let n = 40_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let mut x = x0.clone();
                stepper.sample_increment(&mut rng, &mut ws);
                let v = stepper.step_detailed(&mut x, &mut ws).martingale;
                s1 += v;
                s2 += v * v;
            }
            let mean = s1 / n as f64;
            let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(se > 0.0);
            assert!(mean.abs() < 4.0 * se, "{scheme:?}: mean {mean} se {se}");
        }
    }
}
