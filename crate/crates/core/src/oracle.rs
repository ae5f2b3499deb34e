//! Independent checks for the expansion and the estimators, and the
//! remainder-order experiment.
//!
//! * [`ode_residual`]: residuals of the periodic equations for `κ`, `χ_k`
//!   and the moments, with right-hand sides rebuilt from the model
//!   evaluators.
//! * [`fokker_planck_1d`]: stationary phase density at `η = 0`, and
//!   [`lambda_fokker_planck`], which is the exact exponent whenever the
//!   critical rows do not see the stable modes ([`is_decoupled`]).
//! * [`lambda_asymptotic_shooting`]: the `O(ε²)` expansion rebuilt with RK4
//!   shooting on a fine grid and finite differences of the model.
//! * [`finite_difference_frechet`]: central sign-sum differences.
//! * [`fit_remainder_order`]: Monte Carlo residuals against the expansion
//!   and their log-log slope.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::asymptotics::{self, spectral, AsymptoticsError, KappaForm, PhiGrid};
use crate::lyapunov::{run_ensemble, LyapunovError, Method};
use crate::model::{slot_mode, Model, ModelError};
use crate::simulate::{AmplitudeState, IntegratorConfig, Scheme};

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("phase diffusion vanishes at phi = {phi} (value {value:e})")]
    DegenerateDiffusion { phi: f64, value: f64 },
    #[error("only {admissible} points above 3x the Monte Carlo floor {mc_floor:e}; need 3")]
    InsufficientSignal {
        admissible: usize,
        mc_floor: f64,
        points: Vec<OrderPoint>,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which periodic equation [`ode_residual`] checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    /// `-b_c κ' = rhs` for the given right-hand side form.
    Kappa(KappaForm),
    /// `(b_c ∂_φ - ρ_k + 1) χ_k = -Σ_j [G_s G_s^*]_{kj}` for mode `k`.
    Chi(i64),
    /// `b_c m' - ρ_k m = -R_k·G^p + ∂_φ(G^φ·R_k)` for mode `k`.
    FirstMoment(i64),
    /// `b_c P' - (ρ_j + ρ_k) P = R_j·R_k` for modes `(j, k)`.
    SecondMoment(i64, i64),
}

fn zero_eta(model: &Model) -> Vec<C> {
    vec![ZERO; model.num_modes()]
}

/// `R_a(c)` for every stable slot at `(φ, 0)`, from the model row action.
fn stable_rows(model: &Model, phi: f64) -> Vec<Vec<C>> {
    let mut u = vec![ZERO; model.num_slots()];
    u[0] = C::from_polar(1.0, phi);
    u[1] = C::from_polar(1.0, -phi);
    (2..model.num_slots()).map(|js| model.row_action(js, &u)).collect()
}

fn gphi_gp(model: &Model, phi: f64) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    model.eval_gphi_gp(phi, &zero_eta(model))
}

fn stable_slot(model: &Model, k: i64) -> Result<usize, OracleError> {
    if k.abs() < 2 || k.unsigned_abs() as usize > model.num_modes() {
        return Err(OracleError::InvalidRequest(format!("{k} is not a stable mode")));
    }
    Ok(crate::model::mode_slot(k) - 2)
}

fn dot_rc(a: &[f64], b: &[C]) -> C {
    a.iter().zip(b).map(|(x, y)| *x * y).sum()
}

fn bilinear(a: &[C], b: &[C]) -> C {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Right-hand side and operator `(b, shift)` of `b y' - shift y = rhs`,
/// sampled on `n` nodes. The κ equation is returned as `b = -b_c`,
/// `shift = 0`.
fn equation_data(model: &Model, n: usize, which: Equation) -> Result<(Vec<C>, f64, C), OracleError> {
    let b_c = model.critical().b_c;
    let nodes = asymptotics::grid_nodes(n);
    let real = |v: Vec<f64>| v.into_iter().map(|x| C::new(x, 0.0)).collect::<Vec<C>>();
    match which {
        Equation::Kappa(form) => {
            let mut gamma = Vec::with_capacity(n);
            let mut diff = Vec::with_capacity(n);
            let mut dphi = Vec::with_capacity(n);
            for &p in &nodes {
                gamma.push(model.eval_xi_gamma(p, &zero_eta(model))?.1);
                let (g, _) = gphi_gp(model, p)?;
                diff.push(g.iter().map(|v| v * v).sum::<f64>());
                dphi.push(g);
            }
            let gamma_p = spectral::derivative_real(&gamma);
            let rhs: Vec<f64> = match form {
                KappaForm::Generator => {
                    let d2 = spectral::derivative_real(&spectral::derivative_real(&diff));
                    gamma_p.iter().zip(&d2).map(|(g, d)| g - 0.5 * d).collect()
                }
                KappaForm::SquaredTrace => {
                    let nr = dphi[0].len();
                    let mut trace = vec![0.0; n];
                    for r in 0..nr {
                        let col: Vec<f64> = dphi.iter().map(|g| g[r]).collect();
                        let d = spectral::derivative_real(&col);
                        trace.iter_mut().zip(&d).for_each(|(t, v)| *t += v * v);
                    }
                    gamma_p.iter().zip(&trace).map(|(g, t)| g - t).collect()
                }
            };
            Ok((real(rhs), -b_c, ZERO))
        }
        Equation::Chi(k) => {
            let a = stable_slot(model, k)?;
            let rhs = nodes
                .iter()
                .map(|&p| {
                    let rows = stable_rows(model, p);
                    -rows
                        .iter()
                        .map(|rj| rj.iter().zip(&rows[a]).map(|(x, y)| x * y.conj()).sum::<C>())
                        .sum::<C>()
                })
                .collect();
            Ok((rhs, b_c, model.rho(k) - 1.0))
        }
        Equation::FirstMoment(k) => {
            let a = stable_slot(model, k)?;
            let mut cross = Vec::with_capacity(n);
            let mut drift = Vec::with_capacity(n);
            for &p in &nodes {
                let rows = stable_rows(model, p);
                let (gphi, gp) = gphi_gp(model, p)?;
                cross.push(dot_rc(&gphi, &rows[a]));
                drift.push(-dot_rc(&gp, &rows[a]));
            }
            let d = spectral::derivative(&cross);
            let rhs = drift.iter().zip(&d).map(|(x, y)| x + y).collect();
            Ok((rhs, b_c, model.rho(k)))
        }
        Equation::SecondMoment(j, k) => {
            let (a, b) = (stable_slot(model, j)?, stable_slot(model, k)?);
            let rhs = nodes
                .iter()
                .map(|&p| {
                    let rows = stable_rows(model, p);
                    bilinear(&rows[a], &rows[b])
                })
                .collect();
            Ok((rhs, b_c, model.rho(j) + model.rho(k)))
        }
    }
}

/// Max-norm residual of `b y' - shift y - rhs` with spectral differentiation.
pub fn periodic_residual(solution: &[C], rhs: &[C], b: f64, shift: C) -> f64 {
    let d = spectral::derivative(solution);
    solution
        .iter()
        .zip(&d)
        .zip(rhs)
        .map(|((y, dy), r)| (b * dy - shift * y - r).norm())
        .fold(0.0, f64::max)
}

/// Max-norm residual of `solution` in the chosen equation, together with
/// the max norm of its right-hand side (for relative tolerances).
pub fn ode_residual(model: &Model, solution: &[C], which: Equation) -> Result<(f64, f64), OracleError> {
    let (rhs, b, shift) = equation_data(model, solution.len(), which)?;
    let scale = rhs.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    Ok((periodic_residual(solution, &rhs, b, shift), scale))
}

/// Real solutions (κ) lifted to complex values for [`ode_residual`].
pub fn complexify(values: &[f64]) -> Vec<C> {
    values.iter().map(|v| C::new(*v, 0.0)).collect()
}

/// True when the critical rows of every channel ignore the stable modes,
/// so that `φ` is an autonomous diffusion and `𝒬` depends on `φ` only.
pub fn is_decoupled(model: &Model) -> bool {
    (0..2).all(|js| {
        (0..model.num_channels())
            .all(|r| (2..model.num_slots()).all(|ms| model.row_coeff(js, r, ms).norm() == 0.0))
    })
}

/// Harmonics used by the phase density solve.
pub const FP_HARMONICS: usize = 48;

/// Stationary density of `φ` at `η = 0` on `n` nodes, from the forward
/// equation
///
/// ```text
/// -((ε⁻² b_c + b_q + Γ(φ,0)) p)' + ½ (D(φ,0) p)'' = 0,   ∫ p dφ = 1,
/// ```
///
/// solved by Galerkin projection on harmonics `|k| ≤ FP_HARMONICS`.
pub fn fokker_planck_1d(model: &Model, epsilon: f64, n: usize) -> Result<PhiGrid, OracleError> {
    phase_density(model, epsilon, n, true)
}

/// Same density, accepting degenerate diffusion as long as the drift keeps
/// one sign.
pub fn stationary_phase_density(model: &Model, epsilon: f64, n: usize) -> Result<PhiGrid, OracleError> {
    phase_density(model, epsilon, n, false)
}

/// With `strict`, vanishing diffusion is an error; otherwise only a drift
/// that changes sign is rejected (the equation stays regular as long as
/// the drift keeps one sign).
fn phase_density(model: &Model, epsilon: f64, n: usize, strict: bool) -> Result<PhiGrid, OracleError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(OracleError::InvalidRequest(format!("epsilon = {epsilon} outside (0, 1)")));
    }
    let h = FP_HARMONICS as i64;
    let m = 4 * FP_HARMONICS;
    let cs = model.critical();
    let eps2 = epsilon * epsilon;
    let mut drift = Vec::with_capacity(m);
    let mut diff = Vec::with_capacity(m);
    for p in asymptotics::grid_nodes(m) {
        let gamma = model.eval_xi_gamma(p, &zero_eta(model))?.1;
        let (g, _) = gphi_gp(model, p)?;
        let d: f64 = g.iter().map(|v| v * v).sum();
        let a = cs.b_c + eps2 * (cs.b_q + gamma);
        if strict && d <= 1e-14 {
            return Err(OracleError::DegenerateDiffusion { phi: p, value: d });
        }
        if a * cs.b_c <= 0.0 {
            return Err(OracleError::InvalidRequest(format!("phase drift vanishes near phi = {p}")));
        }
        drift.push(C::new(a, 0.0));
        diff.push(C::new(eps2 * d, 0.0));
    }
    let drift = spectral::forward(&drift);
    let diff = spectral::forward(&diff);
    let coeff = |v: &[C], k: i64| v[k.rem_euclid(m as i64) as usize];
    // rows k ≠ 0: -ik (A p)_k - ½ k² (D p)_k = 0; row k = 0: p_0 = 1/2π
    let size = (2 * h + 1) as usize;
    let mut a = DMatrix::<C>::zeros(size, size);
    let mut rhs = DVector::<C>::zeros(size);
    for k in -h..=h {
        let row = (k + h) as usize;
        if k == 0 {
            a[(row, h as usize)] = C::new(1.0, 0.0);
            rhs[row] = C::new(1.0 / (2.0 * PI), 0.0);
            continue;
        }
        for j in -h..=h {
            let col = (j + h) as usize;
            a[(row, col)] = C::new(0.0, -(k as f64)) * coeff(&drift, k - j)
                - 0.5 * (k * k) as f64 * coeff(&diff, k - j);
        }
    }
    let p = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| OracleError::InvalidRequest("singular phase density system".into()))?;
    let values = asymptotics::grid_nodes(n)
        .into_iter()
        .map(|phi| {
            (-h..=h)
                .map(|k| (p[(k + h) as usize] * C::from_polar(1.0, k as f64 * phi)).re)
                .sum()
        })
        .collect();
    Ok(PhiGrid::from_values(values)?)
}

/// `∫ 𝒬(φ, 0) p(φ) dφ` with the density of [`fokker_planck_1d`]. This is the
/// exact exponent of the truncated system when [`is_decoupled`] holds.
/// Points of vanishing diffusion are allowed here.
pub fn lambda_fokker_planck(model: &Model, epsilon: f64, n: usize) -> Result<f64, OracleError> {
    let p = phase_density(model, epsilon, n, false)?;
    let mut acc = 0.0;
    for i in 0..n {
        acc += model.eval_q(p.node(i), &zero_eta(model))? * p.at(i);
    }
    Ok(acc * 2.0 * PI / n as f64)
}

/// Central sign-sum differences of `f(φ, η)` at `η = 0` along `dirs`
/// (`order = dirs.len() ∈ {1, 2, 3}`), with step `step`:
///
/// ```text
/// order k:  Σ_{s ∈ {±1}^k} s_1..s_k f(φ, step Σ_i s_i d_i) / (2 step)^k.
/// ```
///
/// Exact up to roundoff on polynomials of degree `k + 1`.
pub fn finite_difference_frechet(
    phi: f64,
    f: impl Fn(f64, &[C]) -> C,
    dirs: &[&[C]],
    step: f64,
) -> Result<C, OracleError> {
    let order = dirs.len();
    if !(1..=3).contains(&order) {
        return Err(OracleError::InvalidRequest(format!("order {order} not in 1..=3")));
    }
    let dim = dirs[0].len();
    if dirs.iter().any(|d| d.len() != dim) {
        return Err(OracleError::InvalidRequest("directions differ in length".into()));
    }
    let mut acc = ZERO;
    let mut point = vec![ZERO; dim];
    for mask in 0..(1usize << order) {
        let mut sign = 1.0;
        point.iter_mut().for_each(|v| *v = ZERO);
        for (i, d) in dirs.iter().enumerate() {
            let s = if mask >> i & 1 == 1 { -1.0 } else { 1.0 };
            sign *= s;
            for (p, v) in point.iter_mut().zip(d.iter()) {
                *p += s * step * v;
            }
        }
        acc += sign * f(phi, &point);
    }
    Ok(acc / (2.0 * step).powi(order as i32))
}

/// Functions of `φ` sampled by the shooting oracle.
struct ShootingData {
    q: f64,
    kappa_rhs: f64,
    first: Vec<C>,
    second: Vec<C>,
    grad: Vec<C>,
    hess: Vec<C>,
}

/// Fourth order central difference of `f` at `x`.
fn fd4<T>(f: impl Fn(f64) -> T, x: f64, h: f64) -> T
where
    T: std::ops::Sub<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    (f(x - 2.0 * h) - f(x + 2.0 * h) + (f(x + h) - f(x - h)) * 8.0) * (1.0 / (12.0 * h))
}

fn shooting_data(model: &Model, phi: f64) -> Result<ShootingData, OracleError> {
    let m = model.num_slots() - 2;
    let h = 1e-3;
    let z = zero_eta(model);
    let gamma = |p: f64| model.eval_xi_gamma(p, &z).map(|v| v.1).unwrap_or(f64::NAN);
    let diff = |p: f64| {
        gphi_gp(model, p)
            .map(|(g, _)| g.iter().map(|v| v * v).sum::<f64>())
            .unwrap_or(f64::NAN)
    };
    let gamma_p = fd4(gamma, phi, h);
    let diff_pp = fd4(|p| fd4(diff, p, h), phi, h);
    let rows = stable_rows(model, phi);
    let (gphi, gp) = gphi_gp(model, phi)?;
    let mut first = Vec::with_capacity(m);
    for a in 0..m {
        let cross = |p: f64| -> C {
            let rows = stable_rows(model, p);
            gphi_gp(model, p)
                .map(|(g, _)| dot_rc(&g, &rows[a]))
                .unwrap_or(C::new(f64::NAN, 0.0))
        };
        first.push(-dot_rc(&gp, &rows[a]) + fd4(cross, phi, h));
    }
    let _ = gphi;
    let mut second = Vec::with_capacity(m * m);
    for a in 0..m {
        for b in 0..m {
            second.push(bilinear(&rows[a], &rows[b]));
        }
    }
    // derivatives of the holomorphic extension of Ξ by polarization
    let xi = |eta: &[C]| {
        let mut full = vec![ZERO; m + 2];
        full[2..].copy_from_slice(eta);
        model.xi_extended(phi, &full)
    };
    let unit = |a: usize, s: f64| {
        let mut e = vec![ZERO; m];
        e[a] = C::new(s, 0.0);
        e
    };
    let grad = (0..m).map(|a| 0.5 * (xi(&unit(a, 1.0)) - xi(&unit(a, -1.0)))).collect();
    let mut hess = Vec::with_capacity(m * m);
    let x0 = xi(&vec![ZERO; m]);
    for a in 0..m {
        for b in 0..m {
            let mut s = unit(a, 1.0);
            s[b] += 1.0;
            hess.push(xi(&s) - xi(&unit(a, 1.0)) - xi(&unit(b, 1.0)) + x0);
        }
    }
    Ok(ShootingData {
        q: model.eval_q(phi, &z)?,
        kappa_rhs: gamma_p - 0.5 * diff_pp,
        first,
        second,
        grad,
        hess,
    })
}

/// Periodic solution of `y' = (shift y + r(φ)) / b` on `[0, 2π]` by RK4
/// shooting with `samples` of `r` at the `2 steps + 1` half-step nodes.
fn shoot(r: &[C], b: f64, shift: C, steps: usize) -> Vec<C> {
    let dphi = 2.0 * PI / steps as f64;
    let run = |y0: C| {
        let mut out = Vec::with_capacity(steps + 1);
        let mut y = y0;
        out.push(y);
        let f = |y: C, i: usize| (shift * y + r[i]) / b;
        for s in 0..steps {
            let (i0, i1, i2) = (2 * s, 2 * s + 1, 2 * s + 2);
            let k1 = f(y, i0);
            let k2 = f(y + 0.5 * dphi * k1, i1);
            let k3 = f(y + 0.5 * dphi * k2, i1);
            let k4 = f(y + dphi * k3, i2);
            y += dphi / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            out.push(y);
        }
        out
    };
    // y(2π) is affine in y(0): y(2π) = g y0 + p
    let p = run(ZERO)[steps];
    let g = run(C::new(1.0, 0.0))[steps] - p;
    let y0 = if shift.norm() == 0.0 { ZERO } else { p / (C::new(1.0, 0.0) - g) };
    run(y0)
}

/// Composite Simpson rule for the mean over one period of samples at
/// `2 steps + 1` equispaced nodes.
fn simpson_mean(f: &[C]) -> C {
    let n = f.len() - 1;
    let mut acc = f[0] + f[n];
    for (i, v) in f.iter().enumerate().take(n).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc / (3.0 * n as f64)
}

/// `λ` through `O(ε²)` with zero-mean `κ`, rebuilt by RK4 shooting on
/// `steps` intervals: `κ' = -rhs/b_c`, the first and second moment
/// equations as periodic linear ODEs, and Simpson quadrature for the
/// pairings. Derivatives of the model in `φ` are fourth order finite
/// differences; derivatives in `η` are exact polarizations.
pub fn lambda_asymptotic_shooting(model: &Model, epsilon: f64, steps: usize) -> Result<f64, OracleError> {
    let b_c = model.critical().b_c;
    if b_c == 0.0 {
        return Err(AsymptoticsError::DegenerateCritical.into());
    }
    let m = model.num_slots() - 2;
    let nodes = 2 * steps + 1;
    let data = (0..nodes)
        .map(|i| shooting_data(model, PI * i as f64 / steps as f64))
        .collect::<Result<Vec<_>, _>>()?;
    let q: Vec<C> = data.iter().map(|d| C::new(d.q, 0.0)).collect();
    let order0 = simpson_mean(&q).re;

    // κ by quadrature of κ' = -rhs/b_c, then zero mean
    let krhs: Vec<C> = data.iter().map(|d| C::new(-d.kappa_rhs / b_c, 0.0)).collect();
    let mut kappa = shoot(&krhs, 1.0, ZERO, steps);
    let k_mean = simpson_mean(&kappa);
    kappa.iter_mut().for_each(|k| *k -= k_mean);
    let half = |v: &[C]| v.iter().step_by(2).copied().collect::<Vec<_>>();
    let qk: Vec<C> = half(&q).iter().zip(&kappa).map(|(a, b)| a * b).collect();
    let mut order2 = trapezoid_mean(&qk);

    for a in 0..m {
        let rho = model.rho(slot_mode(a + 2));
        let r: Vec<C> = data.iter().map(|d| d.first[a]).collect();
        let ma = shoot(&r, b_c, rho, steps);
        let g: Vec<C> = half(&data.iter().map(|d| d.grad[a]).collect::<Vec<_>>())
            .iter()
            .zip(&ma)
            .map(|(x, y)| x * y)
            .collect();
        order2 += trapezoid_mean(&g);
        for b in 0..m {
            let shift = rho + model.rho(slot_mode(b + 2));
            let r: Vec<C> = data.iter().map(|d| d.second[a * m + b]).collect();
            let p = shoot(&r, b_c, shift, steps);
            let g: Vec<C> = half(&data.iter().map(|d| d.hess[a * m + b]).collect::<Vec<_>>())
                .iter()
                .zip(&p)
                .map(|(x, y)| x * y)
                .collect();
            order2 += 0.5 * trapezoid_mean(&g);
        }
    }
    Ok(order0 + epsilon * epsilon * order2.re)
}

/// Trapezoid mean over one period of samples at `steps + 1` nodes
/// (endpoints identified).
fn trapezoid_mean(f: &[C]) -> C {
    let n = f.len() - 1;
    f[..n].iter().sum::<C>() / n as f64
}

/// Asymptotic value the Monte Carlo estimates are compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsymptoticTarget {
    /// `⟨𝒬, μ₀⟩ + ε² ⟨𝒬, μ₁⟩`, zero-mean `κ`.
    #[default]
    Order2,
    /// `⟨𝒬, μ₀⟩` only (the planted control).
    Order0,
}

/// Monte Carlo setup for [`fit_remainder_order`]. At each `ε` the step is
/// `dt = dt_factor ε²`, each path runs `steps_per_path` steps and the
/// first `burn_fraction` of them are discarded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrderFitConfig {
    pub n_paths: usize,
    pub steps_per_path: usize,
    pub dt_factor: f64,
    pub burn_fraction: f64,
    pub seed: u64,
    pub method: Method,
    pub scheme: Scheme,
    pub grid: usize,
    pub target: AsymptoticTarget,
}

impl Default for OrderFitConfig {
    fn default() -> Self {
        Self {
            n_paths: 16,
            steps_per_path: 2_500_000,
            dt_factor: 0.05,
            burn_fraction: 0.05,
            seed: 20_240_917,
            method: Method::FkControlVariate,
            scheme: Scheme::StrangWeak2,
            grid: asymptotics::DEFAULT_GRID,
            target: AsymptoticTarget::Order2,
        }
    }
}

/// Monte Carlo estimate of `λ` at one `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McPoint {
    pub epsilon: f64,
    pub value: f64,
    pub stderr: f64,
}

/// One row of the order-fit report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrderPoint {
    pub epsilon: f64,
    pub lambda_mc: f64,
    pub stderr: f64,
    pub lambda_asym: f64,
    pub residual: f64,
    pub admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderFit {
    pub epsilons: Vec<f64>,
    pub residuals: Vec<f64>,
    pub slope: f64,
    /// 95% Student-t interval of the slope.
    pub slope_ci: (f64, f64),
    /// Largest standard error among the estimates.
    pub mc_floor: f64,
    pub points: Vec<OrderPoint>,
}

/// Monte Carlo estimate of `λ` at `epsilon` with the settings of `cfg`.
pub fn mc_estimate(model: &Model, epsilon: f64, cfg: &OrderFitConfig) -> Result<McPoint, OracleError> {
    if cfg.steps_per_path < 100 || !(0.0..1.0).contains(&cfg.burn_fraction) {
        return Err(OracleError::InvalidRequest(
            "need at least 100 steps per path and burn_fraction in [0, 1)".into(),
        ));
    }
    let dt = cfg.dt_factor * epsilon * epsilon;
    let icfg = IntegratorConfig::new(dt, epsilon)
        .with_scheme(cfg.scheme)
        .with_seed(cfg.seed);
    let t_final = dt * cfg.steps_per_path as f64;
    let burn = dt * (cfg.burn_fraction * cfg.steps_per_path as f64).floor();
    let init = AmplitudeState::default_initial(model);
    let est = run_ensemble(model, &icfg, &init, t_final, burn, cfg.n_paths)?.estimate(cfg.method)?;
    Ok(McPoint {
        epsilon,
        value: est.value,
        stderr: est.stderr,
    })
}

pub fn check_eps_list(eps: &[f64]) -> Result<(), OracleError> {
    if eps.len() < 4 {
        return Err(OracleError::InvalidRequest(format!("need at least 4 epsilons, got {}", eps.len())));
    }
    if eps.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
        return Err(OracleError::InvalidRequest("epsilons must lie in (0, 1)".into()));
    }
    let lo = eps.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eps.iter().cloned().fold(0.0, f64::max);
    if hi < 4.0 * lo {
        return Err(OracleError::InvalidRequest(format!(
            "epsilons span a factor {} < 4",
            hi / lo
        )));
    }
    Ok(())
}

/// Least-squares slope of `ln y` on `ln x` with a 95% Student-t interval.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> (f64, (f64, f64)) {
    let n = x.len();
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    if n < 3 {
        return (slope, (f64::NEG_INFINITY, f64::INFINITY));
    }
    let icpt = my - slope * mx;
    let sse: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let se = (sse / (n - 2) as f64 / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 2) as f64)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(f64::INFINITY);
    (slope, (slope - t * se, slope + t * se))
}

/// Residuals at or below this are roundoff and never admissible.
pub const RESIDUAL_FLOOR: f64 = 1e-12;

/// Residuals of Monte Carlo estimates against the chosen asymptotics and
/// the log-log fit over admissible points (`residual > 3 mc_floor`).
pub fn fit_from_estimates(
    model: &Model,
    estimates: &[McPoint],
    target: AsymptoticTarget,
    grid: usize,
) -> Result<OrderFit, OracleError> {
    let terms = asymptotics::lambda_terms(model, grid, asymptotics::Normalization::ZeroMean)?;
    let mc_floor = estimates.iter().map(|e| e.stderr).fold(0.0, f64::max);
    let points: Vec<OrderPoint> = estimates
        .iter()
        .map(|e| {
            let lambda_asym = match target {
                AsymptoticTarget::Order2 => terms.at(e.epsilon),
                AsymptoticTarget::Order0 => terms.order0,
            };
            let residual = (e.value - lambda_asym).abs();
            OrderPoint {
                epsilon: e.epsilon,
                lambda_mc: e.value,
                stderr: e.stderr,
                lambda_asym,
                residual,
                admissible: residual > 3.0 * mc_floor && residual > RESIDUAL_FLOOR,
            }
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter(|p| p.admissible)
        .map(|p| (p.epsilon, p.residual))
        .unzip();
    if xs.len() < 3 {
        return Err(OracleError::InsufficientSignal {
            admissible: xs.len(),
            mc_floor,
            points,
        });
    }
    let (slope, slope_ci) = loglog_slope(&xs, &ys);
    Ok(OrderFit {
        epsilons: xs,
        residuals: ys,
        slope,
        slope_ci,
        mc_floor,
        points,
    })
}

/// Runs the Monte Carlo estimator at each `ε` of `eps` and fits the
/// remainder order against `cfg.target`.
pub fn fit_remainder_order(model: &Model, eps: &[f64], cfg: &OrderFitConfig) -> Result<OrderFit, OracleError> {
    check_eps_list(eps)?;
    let estimates = eps
        .iter()
        .map(|&e| mc_estimate(model, e, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    fit_from_estimates(model, &estimates, cfg.target, cfg.grid)
}

pub const ORDER_FIT_HEADER: &str = "epsilon,lambda_mc,stderr,lambda_asym,residual,admissible";

pub fn write_order_fit_csv<W: Write>(mut w: W, points: &[OrderPoint]) -> std::io::Result<()> {
    writeln!(w, "{ORDER_FIT_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.epsilon, p.lambda_mc, p.stderr, p.lambda_asym, p.residual, p.admissible
        )?;
    }
    Ok(())
}

/// Summary line printed after the order-fit table.
pub fn order_fit_summary(fit: &OrderFit) -> String {
    format!(
        "slope {:.4} ci [{:.4}, {:.4}] mc_floor {:e} admissible {}",
        fit.slope,
        fit.slope_ci.0,
        fit.slope_ci.1,
        fit.mc_floor,
        fit.epsilons.len()
    )
}
