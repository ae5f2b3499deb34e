//! Small-noise expansion of the invariant measure of `(φ, η)` and the
//! resulting expansion of the Lyapunov exponent,
//!
//! ```text
//! λ^ε = ⟨𝒬, μ₀⟩ + ε² ⟨𝒬, μ₁⟩ + O(ε³),   μ₀ = dφ/2π ⊗ δ₀.
//! ```
//!
//! Everything is evaluated on a uniform periodic grid in `φ` and solved by
//! Fourier division. Two forms of `μ₁` are available:
//!
//! * the generator form used by [`lambda_asymptotic`]: `κ(φ) dφ ⊗ δ₀` plus
//!   a first moment `m_j(φ)` and a second moment `P_jk(φ)` of `η`, obtained
//!   from the order `ε⁰` equations of the generator;
//! * the literal form `κ dφ ⊗ δ₀ + ∂²δ₀(χ, h)` with `χ_k` and the fixed
//!   direction `h`, exposed through [`compute_chi`], [`build_h`],
//!   [`pair_mu1`] and [`lambda_asymptotic_literal`].
//!
//! Stable directions are indexed by their slot among the stable modes
//! (`2, -2, 3, -3, ..`), and η-derivatives are holomorphic (Wirtinger)
//! derivatives in these slot coordinates, so `η_{-k} = conj(η_k)` is not
//! imposed on directions.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{slot_mode, Model, ModelError};

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);

/// Smallest admissible Fourier denominator in periodic solves.
pub const RESONANCE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AsymptoticsError {
    #[error("grid size {0} must be even and at least 16")]
    InvalidGrid(usize),
    #[error("grid mismatch: expansion has {expected} nodes, got {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("critical frequency b_c vanishes")]
    DegenerateCritical,
    #[error("right-hand side has nonzero mean {mean:e}; no periodic solution")]
    NonSolvable { mean: f64 },
    #[error("resonance for mode {mode}, harmonic {harmonic}: |denominator| = {magnitude:e}")]
    ResonanceError {
        mode: i64,
        harmonic: i64,
        magnitude: f64,
    },
    #[error("unsupported test function: {0}")]
    UnsupportedTestFunction(String),
    #[error("epsilon = {0} outside [0, 1)")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Additive constant of `κ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `c = 1`.
    #[serde(alias = "paper")]
    PaperConstantOne,
    /// `∫ κ dφ/2π = 0`, so that `⟨1, μ₁⟩ = 0`.
    #[default]
    ZeroMean,
}

/// Right-hand side used for the `κ` equation `-b_c κ' = rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KappaForm {
    /// `Γ'(φ,0) - ½ D''(φ,0)` with `D = |G^φ|²`, from the generator.
    Generator,
    /// `Γ'(φ,0) - |∂_φ G^φ|²`, squared derivative in place of the mixed trace.
    SquaredTrace,
}

/// Values on the nodes `φ_i = 2πi/n`, periodic in `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiGrid<T = f64> {
    values: Vec<T>,
}

impl<T: Copy> PhiGrid<T> {
    pub fn from_values(values: Vec<T>) -> Result<Self, AsymptoticsError> {
        check_grid(values.len())?;
        Ok(Self { values })
    }

    pub fn sample(n: usize, f: impl Fn(f64) -> T) -> Result<Self, AsymptoticsError> {
        check_grid(n)?;
        Ok(Self {
            values: grid_nodes(n).into_iter().map(f).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Value at node `i`, read periodically.
    pub fn at(&self, i: usize) -> T {
        self.values[i % self.values.len()]
    }

    pub fn node(&self, i: usize) -> f64 {
        2.0 * PI * i as f64 / self.n() as f64
    }
}

impl PhiGrid<f64> {
    /// `∫ f dφ/2π` by the trapezoid rule.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.n() as f64
    }
}

impl PhiGrid<C> {
    pub fn mean(&self) -> C {
        self.values.iter().sum::<C>() / self.n() as f64
    }
}

fn check_grid(n: usize) -> Result<(), AsymptoticsError> {
    if n < 16 || !n.is_multiple_of(2) {
        return Err(AsymptoticsError::InvalidGrid(n));
    }
    Ok(())
}

pub fn grid_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
}

/// Fourier tools on the periodic grid. The Nyquist harmonic is given
/// wavenumber zero, so that differentiation is real on real data.
pub mod spectral {
    use super::*;

    pub fn wavenumbers(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let i = i as i64;
                let n = n as i64;
                if 2 * i < n {
                    i as f64
                } else if 2 * i == n {
                    0.0
                } else {
                    (i - n) as f64
                }
            })
            .collect()
    }

    /// Normalized coefficients `f̂_k = (1/n) Σ_i f_i e^{-ikφ_i}`.
    pub fn forward(values: &[C]) -> Vec<C> {
        let n = values.len();
        let mut buf = values.to_vec();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        buf.iter_mut().for_each(|v| *v /= n as f64);
        buf
    }

    pub fn inverse(coeffs: &[C]) -> Vec<C> {
        let mut buf = coeffs.to_vec();
        FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
        buf
    }

    pub fn derivative(values: &[C]) -> Vec<C> {
        let k = wavenumbers(values.len());
        let c: Vec<C> = forward(values)
            .iter()
            .zip(&k)
            .map(|(v, k)| v * C::new(0.0, *k))
            .collect();
        inverse(&c)
    }

    pub fn derivative_real(values: &[f64]) -> Vec<f64> {
        let c: Vec<C> = values.iter().map(|v| C::new(*v, 0.0)).collect();
        derivative(&c).iter().map(|v| v.re).collect()
    }

    /// Periodic solution of `b f' - shift f = rhs`; on a vanishing
    /// denominator returns the offending harmonic and its magnitude.
    pub fn solve_shifted(rhs: &[C], b: f64, shift: C) -> Result<Vec<C>, (i64, f64)> {
        let n = rhs.len();
        let k = wavenumbers(n);
        let mut c = forward(rhs);
        for (i, v) in c.iter_mut().enumerate() {
            let den = C::new(0.0, k[i] * b) - shift;
            if den.norm() < RESONANCE_TOL {
                if v.norm() == 0.0 && shift.norm() == 0.0 && i == 0 {
                    continue;
                }
                let harmonic = if 2 * i < n { i as i64 } else { i as i64 - n as i64 };
                return Err((harmonic, den.norm()));
            }
            *v /= den;
        }
        Ok(inverse(&c))
    }
}

/// Critical-chart quantities at `(φ, η = 0)`.
#[derive(Debug, Clone)]
pub struct ChartData {
    pub xi: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    /// `D = |G^φ|²`.
    pub diffusion: f64,
    /// `D' = 2 G^φ·∂_φG^φ`, the mixed trace term.
    pub diffusion_prime: f64,
    /// `|∂_φ G^φ|²`.
    pub dgphi_sq: f64,
    pub gphi: Vec<f64>,
    pub gp: Vec<f64>,
    /// `R_a(c)` per stable slot `a`, as a complex row over channels.
    pub stable_rows: Vec<Vec<C>>,
    /// `∂_a Ξ(φ, 0)` per stable slot.
    pub xi_grad: Vec<C>,
    /// `∂_a ∂_b Ξ(φ, 0)`, row-major over stable slots.
    pub xi_hess: Vec<C>,
}

/// Evaluates [`ChartData`] analytically from the critical coefficients
/// `ψ_r(φ) = L[1][r][1] e^{iφ} + L[1][r][-1] e^{-iφ}`.
pub fn chart_data(model: &Model, phi: f64) -> ChartData {
    let nr = model.num_channels();
    let ns = model.num_slots();
    let e = C::from_polar(1.0, phi);
    let ec = e.conj();
    let mut psi = vec![ZERO; nr];
    let mut dpsi = vec![ZERO; nr];
    for r in 0..nr {
        let (lp, lm) = (model.row_coeff(0, r, 0), model.row_coeff(0, r, 1));
        psi[r] = lp * e + lm * ec;
        dpsi[r] = C::i() * (lp * e - lm * ec);
    }
    let w: Vec<C> = psi.iter().map(|p| ec * p).collect();
    let dw: Vec<C> = psi.iter().zip(&dpsi).map(|(p, d)| ec * (d - C::i() * p)).collect();
    let gp: Vec<f64> = w.iter().map(|v| v.re).collect();
    let gphi: Vec<f64> = w.iter().map(|v| -v.im).collect();
    let dgphi: Vec<f64> = dw.iter().map(|v| -v.im).collect();
    let e2 = C::from_polar(1.0, -2.0 * phi);
    let s2: C = psi.iter().map(|p| p * p).sum();
    let sd: C = psi.iter().zip(&dpsi).map(|(p, d)| p * d).sum();
    let xg = -0.5 * e2 * s2;
    let xg_prime = -0.5 * e2 * (C::new(0.0, -2.0) * s2 + 2.0 * sd);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let c = {
        let mut u = vec![ZERO; ns];
        u[0] = e;
        u[1] = ec;
        u
    };
    let stable_rows: Vec<Vec<C>> = (2..ns).map(|js| model.row_action(js, &c)).collect();
    let psi_minus = model.row_action(1, &c);
    let e2c = e2.conj();
    let xi_grad = (2..ns)
        .map(|a| {
            let plus: C = (0..nr).map(|r| psi[r] * model.row_coeff(0, r, a)).sum();
            let minus: C = (0..nr).map(|r| psi_minus[r] * model.row_coeff(1, r, a)).sum();
            -0.5 * (e2 * plus + e2c * minus)
        })
        .collect();
    let m = ns - 2;
    let mut xi_hess = vec![ZERO; m * m];
    for a in 0..m {
        for b in 0..m {
            let plus: C = (0..nr)
                .map(|r| model.row_coeff(0, r, a + 2) * model.row_coeff(0, r, b + 2))
                .sum();
            let minus: C = (0..nr)
                .map(|r| model.row_coeff(1, r, a + 2) * model.row_coeff(1, r, b + 2))
                .sum();
            xi_hess[a * m + b] = -0.5 * (e2 * plus + e2c * minus);
        }
    }
    ChartData {
        xi: xg.re,
        gamma: xg.im,
        gamma_prime: xg_prime.im,
        diffusion: dot(&gphi, &gphi),
        diffusion_prime: 2.0 * dot(&gphi, &dgphi),
        dgphi_sq: dot(&dgphi, &dgphi),
        gphi,
        gp,
        stable_rows,
        xi_grad,
        xi_hess,
    }
}

fn bilinear(a: &[C], b: &[C]) -> C {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn real_dot(a: &[f64], b: &[C]) -> C {
    a.iter().zip(b).map(|(x, y)| *x * y).sum()
}

fn check_critical(model: &Model) -> Result<f64, AsymptoticsError> {
    let b_c = model.critical().b_c;
    if b_c == 0.0 {
        return Err(AsymptoticsError::DegenerateCritical);
    }
    Ok(b_c)
}

/// Grid values of [`ChartData`].
fn chart_grid(model: &Model, n: usize) -> Result<Vec<ChartData>, AsymptoticsError> {
    check_grid(n)?;
    Ok(grid_nodes(n).into_iter().map(|p| chart_data(model, p)).collect())
}

/// Right-hand side of the `κ` equation `-b_c κ' = rhs` on the grid.
pub fn kappa_rhs(model: &Model, n: usize, form: KappaForm) -> Result<PhiGrid, AsymptoticsError> {
    let data = chart_grid(model, n)?;
    let d: Vec<f64> = data.iter().map(|c| c.diffusion_prime).collect();
    let d2 = spectral::derivative_real(&d);
    let values = data
        .iter()
        .zip(&d2)
        .map(|(c, d2)| match form {
            KappaForm::Generator => c.gamma_prime - 0.5 * d2,
            KappaForm::SquaredTrace => c.gamma_prime - c.dgphi_sq,
        })
        .collect();
    PhiGrid::from_values(values)
}

/// Periodic density correction `κ`.
pub fn compute_kappa(
    model: &Model,
    n: usize,
    normalization: Normalization,
) -> Result<PhiGrid, AsymptoticsError> {
    compute_kappa_with(model, n, normalization, KappaForm::Generator)
}

/// `κ` for the chosen right-hand side. The solution is
/// `κ = (-Γ(φ,0) + ½ D'(φ,0))/b_c + c` for [`KappaForm::Generator`]; the
/// other form is integrated spectrally and fails when its mean is nonzero.
pub fn compute_kappa_with(
    model: &Model,
    n: usize,
    normalization: Normalization,
    form: KappaForm,
) -> Result<PhiGrid, AsymptoticsError> {
    let b_c = check_critical(model)?;
    let rhs = kappa_rhs(model, n, form)?;
    let scale = 1.0 + rhs.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mean = rhs.mean();
    if mean.abs() > 1e-10 * scale {
        return Err(AsymptoticsError::NonSolvable { mean });
    }
    let raw: Vec<f64> = match form {
        KappaForm::Generator => chart_grid(model, n)?
            .iter()
            .map(|c| (-c.gamma + 0.5 * c.diffusion_prime) / b_c)
            .collect(),
        KappaForm::SquaredTrace => {
            let r: Vec<C> = rhs.values().iter().map(|v| C::new(-v / b_c, 0.0)).collect();
            spectral::solve_shifted(&r, 1.0, ZERO)
                .map_err(|(harmonic, magnitude)| AsymptoticsError::ResonanceError {
                    mode: 1,
                    harmonic,
                    magnitude,
                })?
                .iter()
                .map(|v| v.re)
                .collect()
        }
    };
    let shift = match normalization {
        Normalization::PaperConstantOne => 1.0,
        Normalization::ZeroMean => -raw.iter().sum::<f64>() / n as f64,
    };
    PhiGrid::from_values(raw.into_iter().map(|v| v + shift).collect())
}

/// Right-hand side `r_k(φ) = -Σ_j [G_s G_s^*]_{kj}` with
/// `[G_s G_s^*]_{kj} = Σ_r R_{j,r} conj(R_{k,r})`, per stable slot `k`.
pub fn chi_rhs(model: &Model, n: usize) -> Result<Vec<PhiGrid<C>>, AsymptoticsError> {
    let data = chart_grid(model, n)?;
    let m = model.num_slots() - 2;
    (0..m)
        .map(|k| {
            PhiGrid::from_values(
                data.iter()
                    .map(|c| {
                        let rk = &c.stable_rows[k];
                        -c.stable_rows
                            .iter()
                            .map(|rj| rj.iter().zip(rk).map(|(a, b)| a * b.conj()).sum::<C>())
                            .sum::<C>()
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Periodic `χ_k` solving `(b_c ∂_φ - ρ_k + 1) χ_k = r_k`, keyed by mode.
pub fn compute_chi(model: &Model, n: usize) -> Result<BTreeMap<i64, PhiGrid<C>>, AsymptoticsError> {
    let b_c = check_critical(model)?;
    let rhs = chi_rhs(model, n)?;
    let mut out = BTreeMap::new();
    for (a, r) in rhs.iter().enumerate() {
        let k = slot_mode(a + 2);
        let shift = model.rho(k) - 1.0;
        let sol = spectral::solve_shifted(r.values(), b_c, shift).map_err(|(harmonic, magnitude)| {
            AsymptoticsError::ResonanceError {
                mode: k,
                harmonic,
                magnitude,
            }
        })?;
        out.insert(k, PhiGrid::from_values(sol)?);
    }
    Ok(out)
}

/// `h_k = 1/(2^{|k|+2} (1 - ρ_k))` for every stable mode `k`.
pub fn build_h(model: &Model) -> BTreeMap<i64, C> {
    model
        .stable_modes()
        .into_iter()
        .map(|k| {
            let p = 2f64.powi(k.unsigned_abs() as i32 + 2);
            (k, 1.0 / (p * (1.0 - model.rho(k))))
        })
        .collect()
}

/// First moments `m_a` solving `b_c m_a' - ρ_a m_a = -R_a·G^p + ∂_φ(G^φ·R_a)`,
/// per stable slot.
pub fn compute_first_moments(model: &Model, n: usize) -> Result<Vec<PhiGrid<C>>, AsymptoticsError> {
    let b_c = check_critical(model)?;
    let data = chart_grid(model, n)?;
    let m = model.num_slots() - 2;
    (0..m)
        .map(|a| {
            let cross: Vec<C> = data.iter().map(|c| real_dot(&c.gphi, &c.stable_rows[a])).collect();
            let dcross = spectral::derivative(&cross);
            let rhs: Vec<C> = data
                .iter()
                .zip(&dcross)
                .map(|(c, d)| -real_dot(&c.gp, &c.stable_rows[a]) + d)
                .collect();
            let k = slot_mode(a + 2);
            let sol = spectral::solve_shifted(&rhs, b_c, model.rho(k)).map_err(
                |(harmonic, magnitude)| AsymptoticsError::ResonanceError {
                    mode: k,
                    harmonic,
                    magnitude,
                },
            )?;
            PhiGrid::from_values(sol)
        })
        .collect()
}

/// Second moments `P_ab` solving `b_c P' - (ρ_a + ρ_b) P = R_a·R_b`,
/// row-major over stable slots.
pub fn compute_second_moments(model: &Model, n: usize) -> Result<Vec<PhiGrid<C>>, AsymptoticsError> {
    let b_c = check_critical(model)?;
    let data = chart_grid(model, n)?;
    let m = model.num_slots() - 2;
    let mut out = Vec::with_capacity(m * m);
    for a in 0..m {
        for b in 0..m {
            let rhs: Vec<C> = data
                .iter()
                .map(|c| bilinear(&c.stable_rows[a], &c.stable_rows[b]))
                .collect();
            let shift = model.rho(slot_mode(a + 2)) + model.rho(slot_mode(b + 2));
            let sol = spectral::solve_shifted(&rhs, b_c, shift).map_err(|(harmonic, magnitude)| {
                AsymptoticsError::ResonanceError {
                    mode: slot_mode(a + 2),
                    harmonic,
                    magnitude,
                }
            })?;
            out.push(PhiGrid::from_values(sol)?);
        }
    }
    Ok(out)
}

/// `μ₁` components on one grid.
#[derive(Debug, Clone)]
pub struct MeasureExpansion {
    pub kappa: PhiGrid,
    pub chi: BTreeMap<i64, PhiGrid<C>>,
    pub h: BTreeMap<i64, C>,
    pub normalization: Normalization,
    /// First moments `m_a`, per stable slot.
    pub mean: Vec<PhiGrid<C>>,
    /// Second moments `P_ab`, row-major over stable slots.
    pub second_moment: Vec<PhiGrid<C>>,
}

impl MeasureExpansion {
    pub fn build(model: &Model, n: usize, normalization: Normalization) -> Result<Self, AsymptoticsError> {
        Ok(Self {
            kappa: compute_kappa(model, n, normalization)?,
            chi: compute_chi(model, n)?,
            h: build_h(model),
            normalization,
            mean: compute_first_moments(model, n)?,
            second_moment: compute_second_moments(model, n)?,
        })
    }

    pub fn n(&self) -> usize {
        self.kappa.n()
    }

    pub fn stable_dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, n: usize) -> Result<(), AsymptoticsError> {
        if n != self.n() {
            return Err(AsymptoticsError::GridMismatch {
                expected: self.n(),
                got: n,
            });
        }
        Ok(())
    }

    /// `χ(φ_i) = Σ_k χ_k(φ_i) e_k` over stable slots.
    pub fn chi_vector(&self, i: usize) -> Vec<C> {
        self.chi.values().map(|g| g.at(i)).collect::<Vec<_>>()
    }

    pub fn h_vector(&self) -> Vec<C> {
        self.h.values().copied().collect()
    }
}

/// `⟨f, μ₀⟩ = ∫ f(φ, 0) dφ/2π` on `n` nodes.
pub fn pair_mu0(n: usize, f: impl Fn(f64) -> f64) -> Result<f64, AsymptoticsError> {
    check_grid(n)?;
    Ok(grid_nodes(n).into_iter().map(f).sum::<f64>() / n as f64)
}

/// Second variation of `𝒬(φ, ·)` at `η = 0` along stable directions
/// (slot-ordered over stable slots), by exact polarization of the
/// holomorphic extension of Ξ.
pub fn q_second_derivative(model: &Model, phi: f64, dir_a: &[C], dir_b: &[C]) -> Result<C, AsymptoticsError> {
    let m = model.num_slots() - 2;
    for d in [dir_a, dir_b] {
        if d.len() != m {
            return Err(ModelError::DimensionMismatch {
                expected: m,
                got: d.len(),
            }
            .into());
        }
    }
    let embed = |d: &[C]| {
        let mut u = vec![ZERO; m + 2];
        u[2..].copy_from_slice(d);
        u
    };
    let sum: Vec<C> = dir_a.iter().zip(dir_b).map(|(a, b)| a + b).collect();
    let q = |d: &[C]| model.xi_extended(phi, &embed(d));
    let zero = vec![ZERO; m];
    Ok(q(&sum) - q(dir_a) - q(dir_b) + q(&zero))
}

/// Value and second η-variation at `η = 0` of a function paired with `μ₁`.
pub trait SecondOrderPack {
    fn value(&self, phi: f64) -> f64;
    fn second(&self, phi: f64, a: &[C], b: &[C]) -> Result<C, AsymptoticsError>;
}

/// `𝒬` as a [`SecondOrderPack`].
pub struct QPack<'a>(pub &'a Model);

impl SecondOrderPack for QPack<'_> {
    fn value(&self, phi: f64) -> f64 {
        self.0.critical().a_q + chart_data(self.0, phi).xi
    }

    fn second(&self, phi: f64, a: &[C], b: &[C]) -> Result<C, AsymptoticsError> {
        q_second_derivative(self.0, phi, a, b)
    }
}

/// Literal pairing `∫ f(φ,0) κ dφ/2π + ∫ f''(φ,0; χ(φ), h) dφ/2π`. The
/// imaginary part comes only from the second term.
pub fn pair_mu1(expansion: &MeasureExpansion, f: &dyn SecondOrderPack) -> Result<C, AsymptoticsError> {
    let n = expansion.n();
    let h = expansion.h_vector();
    let mut acc = ZERO;
    for i in 0..n {
        let phi = expansion.kappa.node(i);
        acc += f.value(phi) * expansion.kappa.at(i);
        acc += f.second(phi, &expansion.chi_vector(i), &h)?;
    }
    Ok(acc / n as f64)
}

/// Derivatives at `η = 0` needed by the generator form of `μ₁` and by the
/// hierarchy check: `φ`-derivatives to order 2 and holomorphic
/// η-derivatives to order 2 together with their `φ`-derivatives.
#[derive(Debug, Clone)]
pub struct Jet {
    pub f: C,
    pub f_phi: C,
    pub f_phiphi: C,
    pub grad: Vec<C>,
    pub grad_phi: Vec<C>,
    pub hess: Vec<C>,
    pub hess_phi: Vec<C>,
}

/// `⟨f, μ₁⟩` for the generator form,
/// `∫ [f κ + Σ_a ∂_a f m_a + ½ Σ_ab ∂_a∂_b f P_ab] dφ/2π`.
pub fn pair_mu1_moments(expansion: &MeasureExpansion, jet: impl Fn(f64) -> Jet) -> C {
    let n = expansion.n();
    let m = expansion.stable_dim();
    let mut acc = ZERO;
    for i in 0..n {
        let j = jet(expansion.kappa.node(i));
        acc += j.f * expansion.kappa.at(i);
        for a in 0..m {
            acc += j.grad[a] * expansion.mean[a].at(i);
            for b in 0..m {
                acc += 0.5 * j.hess[a * m + b] * expansion.second_moment[a * m + b].at(i);
            }
        }
    }
    acc / n as f64
}

/// Jet of `𝒬` at `(φ, 0)`; `𝒬` is quadratic in η so the jet is exact.
pub fn q_jet(model: &Model, phi: f64) -> Jet {
    let c = chart_data(model, phi);
    let m = c.xi_grad.len();
    Jet {
        f: C::new(model.critical().a_q + c.xi, 0.0),
        f_phi: C::new(0.0, 0.0),
        f_phiphi: C::new(0.0, 0.0),
        grad: c.xi_grad,
        grad_phi: vec![ZERO; m],
        hess: c.xi_hess,
        hess_phi: vec![ZERO; m * m],
    }
}

fn check_epsilon(epsilon: f64) -> Result<(), AsymptoticsError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(AsymptoticsError::InvalidEpsilon(epsilon));
    }
    Ok(())
}

/// Terms of the expansion for one model and grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaTerms {
    /// `⟨𝒬, μ₀⟩ = a_q + ⟨Ξ(·,0)⟩`.
    pub order0: f64,
    /// `⟨𝒬, μ₁⟩`, generator form.
    pub order2: f64,
    /// Imaginary part of the pairing (zero for real-field models up to roundoff).
    pub order2_imag: f64,
}

impl LambdaTerms {
    pub fn at(&self, epsilon: f64) -> f64 {
        self.order0 + epsilon * epsilon * self.order2
    }
}

pub fn lambda_terms(model: &Model, n: usize, normalization: Normalization) -> Result<LambdaTerms, AsymptoticsError> {
    let exp = MeasureExpansion::build(model, n, normalization)?;
    lambda_terms_from(model, &exp)
}

pub fn lambda_terms_from(model: &Model, exp: &MeasureExpansion) -> Result<LambdaTerms, AsymptoticsError> {
    let a_q = model.critical().a_q;
    let order0 = pair_mu0(exp.n(), |p| a_q + chart_data(model, p).xi)?;
    let p = pair_mu1_moments(exp, |phi| q_jet(model, phi));
    Ok(LambdaTerms {
        order0,
        order2: p.re,
        order2_imag: p.im,
    })
}

/// Default grid for the λ expansion.
pub const DEFAULT_GRID: usize = 64;

/// `⟨𝒬, μ₀⟩ + ε² ⟨𝒬, μ₁⟩` with the generator form of `μ₁` and zero-mean `κ`.
pub fn lambda_asymptotic(model: &Model, epsilon: f64) -> Result<f64, AsymptoticsError> {
    lambda_asymptotic_with(model, epsilon, DEFAULT_GRID, Normalization::ZeroMean)
}

pub fn lambda_asymptotic_with(
    model: &Model,
    epsilon: f64,
    n: usize,
    normalization: Normalization,
) -> Result<f64, AsymptoticsError> {
    check_epsilon(epsilon)?;
    Ok(lambda_terms(model, n, normalization)?.at(epsilon))
}

/// `⟨𝒬, μ₀⟩ + ε² Re ⟨𝒬, μ₁⟩` with the literal `κ, χ, h` form of `μ₁`;
/// the imaginary part of the pairing is returned alongside.
pub fn lambda_asymptotic_literal(
    model: &Model,
    epsilon: f64,
    n: usize,
    normalization: Normalization,
) -> Result<(f64, f64), AsymptoticsError> {
    check_epsilon(epsilon)?;
    let exp = MeasureExpansion::build(model, n, normalization)?;
    let a_q = model.critical().a_q;
    let order0 = pair_mu0(n, |p| a_q + chart_data(model, p).xi)?;
    let p = pair_mu1(&exp, &QPack(model))?;
    Ok((order0 + epsilon * epsilon * p.re, p.im))
}

/// One row of the λ table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LambdaRow {
    pub epsilon: f64,
    pub q: f64,
    pub lambda_order0: f64,
    pub lambda_order2_paper_norm: f64,
    pub lambda_order2_zero_mean: f64,
}

pub const LAMBDA_TABLE_HEADER: &str =
    "epsilon,q,lambda_order0,lambda_order2_paper_norm,lambda_order2_zero_mean";

pub fn lambda_row(model: &Model, epsilon: f64, n: usize) -> Result<LambdaRow, AsymptoticsError> {
    check_epsilon(epsilon)?;
    let zero = lambda_terms(model, n, Normalization::ZeroMean)?;
    let paper = lambda_terms(model, n, Normalization::PaperConstantOne)?;
    Ok(LambdaRow {
        epsilon,
        q: model.q(),
        lambda_order0: zero.order0,
        lambda_order2_paper_norm: paper.at(epsilon),
        lambda_order2_zero_mean: zero.at(epsilon),
    })
}

pub fn write_lambda_table<W: Write>(mut w: W, rows: &[LambdaRow]) -> std::io::Result<()> {
    writeln!(w, "{LAMBDA_TABLE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epsilon, r.q, r.lambda_order0, r.lambda_order2_paper_norm, r.lambda_order2_zero_mean
        )?;
    }
    Ok(())
}

pub fn write_kappa_csv<W: Write>(mut w: W, kappa: &PhiGrid) -> std::io::Result<()> {
    writeln!(w, "phi,kappa")?;
    for (i, v) in kappa.values().iter().enumerate() {
        writeln!(w, "{},{}", kappa.node(i), v)?;
    }
    Ok(())
}

pub fn write_chi_csv<W: Write>(mut w: W, chi: &PhiGrid<C>) -> std::io::Result<()> {
    writeln!(w, "phi,re_chi_k,im_chi_k")?;
    for (i, v) in chi.values().iter().enumerate() {
        writeln!(w, "{},{},{}", chi.node(i), v.re, v.im)?;
    }
    Ok(())
}

/// `f(φ, η) = T(φ) · M(η)` with a trigonometric factor and a monomial in
/// stable slot coordinates; optionally the real part `T · Re M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub trig: Trig,
    /// Modes of the monomial, with repetition (`[2, 2, -3]` is `η_2² η_{-3}`).
    pub monomial: Vec<i64>,
    pub real_part: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trig {
    Cos(u32),
    Sin(u32),
}

impl Trig {
    /// `d^k/dφ^k` of the factor at `φ`.
    pub fn derivative(&self, phi: f64, k: u32) -> f64 {
        let (n, shift) = match *self {
            Trig::Cos(n) => (n as f64, 0.0),
            Trig::Sin(n) => (n as f64, -0.5 * PI),
        };
        // cos(nφ + shift) differentiated k times
        n.powi(k as i32) * (n * phi + shift + 0.5 * PI * k as f64).cos()
    }
}

impl TestFunction {
    pub fn new(trig: Trig, monomial: &[i64]) -> Self {
        Self {
            trig,
            monomial: monomial.to_vec(),
            real_part: false,
        }
    }

    pub fn real(mut self) -> Self {
        self.real_part = true;
        self
    }

    pub fn degree(&self) -> usize {
        self.monomial.len()
    }

    /// Stable slot indices of the monomial factors.
    fn slots(&self, model: &Model) -> Result<Vec<usize>, AsymptoticsError> {
        if self.degree() > 3 {
            return Err(AsymptoticsError::UnsupportedTestFunction(format!(
                "degree {} > 3",
                self.degree()
            )));
        }
        let kk = model.num_modes() as i64;
        self.monomial
            .iter()
            .map(|&k| {
                if k.abs() < 2 || k.abs() > kk {
                    Err(AsymptoticsError::UnsupportedTestFunction(format!(
                        "mode {k} is not a stable mode"
                    )))
                } else {
                    Ok(crate::model::mode_slot(k) - 2)
                }
            })
            .collect()
    }

    /// Value at a (complex) stable slot vector `eta`.
    pub fn eval(&self, model: &Model, phi: f64, eta: &[C]) -> Result<C, AsymptoticsError> {
        let slots = self.slots(model)?;
        let mono: C = slots.iter().map(|&a| eta[a]).product();
        let t = self.trig.derivative(phi, 0);
        if self.real_part {
            let conj: C = slots.iter().map(|&a| eta[a ^ 1]).product();
            // the real part on real-field vectors, extended holomorphically
            Ok(C::new(t, 0.0) * 0.5 * (mono + conj))
        } else {
            Ok(t * mono)
        }
    }

    /// Symmetric derivative tensor of the monomial part at `η = 0`, as a
    /// map from sorted slot tuples to coefficients (nonzero only at the
    /// order equal to the degree).
    fn monomial_terms(&self, model: &Model) -> Result<Vec<(Vec<usize>, f64)>, AsymptoticsError> {
        let slots = self.slots(model)?;
        let mut terms = vec![(slots.clone(), 1.0)];
        if self.real_part {
            terms[0].1 = 0.5;
            terms.push((slots.iter().map(|a| a ^ 1).collect(), 0.5));
        }
        Ok(terms)
    }

    /// `∂^{|s|} M / ∂η_{s_1}..∂η_{s_d}` at zero for a derivative multi-index
    /// of the same degree as the monomial.
    fn mono_derivative(term: &[usize], index: &[usize]) -> f64 {
        if term.len() != index.len() {
            return 0.0;
        }
        let mut a = term.to_vec();
        let mut b = index.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return 0.0;
        }
        // product of factorials of multiplicities
        let mut f = 1.0;
        let mut i = 0;
        while i < a.len() {
            let mut j = i;
            while j < a.len() && a[j] == a[i] {
                j += 1;
            }
            f *= (1..=(j - i)).product::<usize>() as f64;
            i = j;
        }
        f
    }

    pub fn jet(&self, model: &Model, phi: f64) -> Result<Jet, AsymptoticsError> {
        let m = model.num_slots() - 2;
        let terms = self.monomial_terms(model)?;
        let d = |index: &[usize]| -> f64 {
            terms.iter().map(|(t, c)| c * Self::mono_derivative(t, index)).sum()
        };
        let t0 = self.trig.derivative(phi, 0);
        let t1 = self.trig.derivative(phi, 1);
        let t2 = self.trig.derivative(phi, 2);
        let m0 = d(&[]);
        let grad: Vec<f64> = (0..m).map(|a| d(&[a])).collect();
        let hess: Vec<f64> = (0..m * m).map(|ab| d(&[ab / m, ab % m])).collect();
        let c = |x: f64| C::new(x, 0.0);
        Ok(Jet {
            f: c(t0 * m0),
            f_phi: c(t1 * m0),
            f_phiphi: c(t2 * m0),
            grad: grad.iter().map(|g| c(t0 * g)).collect(),
            grad_phi: grad.iter().map(|g| c(t1 * g)).collect(),
            hess: hess.iter().map(|h| c(t0 * h)).collect(),
            hess_phi: hess.iter().map(|h| c(t1 * h)).collect(),
        })
    }

    /// Third variation `f'''(φ, 0; a, b, c)` along stable slot vectors.
    pub fn third(&self, model: &Model, phi: f64, a: &[C], b: &[C], c: &[C]) -> Result<C, AsymptoticsError> {
        let m = model.num_slots() - 2;
        let terms = self.monomial_terms(model)?;
        let t0 = self.trig.derivative(phi, 0);
        let mut acc = ZERO;
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let w: f64 = terms.iter().map(|(t, co)| co * Self::mono_derivative(t, &[i, j, k])).sum();
                    if w != 0.0 {
                        acc += w * a[i] * b[j] * c[k];
                    }
                }
            }
        }
        Ok(t0 * acc)
    }
}

/// Default family for [`check_hierarchy`]: trigonometric factors times
/// monomials of degree 0 to 3 in the first two stable modes.
pub fn default_test_family(model: &Model) -> Vec<TestFunction> {
    let k2 = 2;
    let k3 = if model.num_modes() >= 3 { 3 } else { 2 };
    vec![
        TestFunction::new(Trig::Cos(0), &[]),
        TestFunction::new(Trig::Cos(1), &[]),
        TestFunction::new(Trig::Sin(2), &[]),
        TestFunction::new(Trig::Cos(3), &[]),
        TestFunction::new(Trig::Cos(0), &[k2]),
        TestFunction::new(Trig::Sin(1), &[-k3]),
        TestFunction::new(Trig::Cos(2), &[k3]).real(),
        TestFunction::new(Trig::Cos(0), &[k2, -k2]),
        TestFunction::new(Trig::Sin(2), &[k2, k3]),
        TestFunction::new(Trig::Cos(1), &[k3, k3]).real(),
        TestFunction::new(Trig::Sin(3), &[-k2, k3]),
        TestFunction::new(Trig::Cos(2), &[k2, k2, k3]),
        TestFunction::new(Trig::Sin(1), &[k2, -k3, k3]).real(),
        TestFunction::new(Trig::Cos(0), &[-k2, -k2, -k2]),
    ]
}

/// Residuals of the hierarchy for one test function.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyResidual {
    pub function: TestFunction,
    /// `|⟨𝔏₀ f, μ₀⟩|`.
    pub order0: f64,
    /// `|⟨𝔏₀ f, μ₁⟩ + ⟨𝔏₁ f, μ₀⟩|`.
    pub order1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyReport {
    pub residuals: Vec<HierarchyResidual>,
}

impl HierarchyReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.order0.max(r.order1))
            .fold(0.0, f64::max)
    }
}

/// Checks `⟨𝔏₀ f, μ₀⟩ = 0` and `⟨𝔏₀ f, μ₁⟩ = -⟨𝔏₁ f, μ₀⟩` over `family`,
/// with `𝔏₀ = b_c ∂_φ + Σ_a ρ_a η_a ∂_a` and `𝔏₁` the `O(1)` part of the
/// generator of `(φ, η)`:
///
/// ```text
/// 𝔏₁ f(φ,0) = (b_q + Γ) f_φ + ½ D f_φφ - Σ_a (R_a·G^p) ∂_a f
///            + ½ Σ_ab (R_a·R_b) ∂_a∂_b f - Σ_a (G^φ·R_a) ∂_φ∂_a f.
/// ```
///
/// `𝔏₀` maps the third-order part of `f` to a term that still vanishes at
/// `η = 0` after two η-derivatives, so only the jet of [`Jet`] enters.
pub fn check_hierarchy(
    model: &Model,
    expansion: &MeasureExpansion,
    family: &[TestFunction],
) -> Result<HierarchyReport, AsymptoticsError> {
    let n = expansion.n();
    let data = chart_grid(model, n)?;
    expansion.check(data.len())?;
    let b_c = model.critical().b_c;
    let b_q = model.critical().b_q;
    let m = model.num_slots() - 2;
    let rho: Vec<C> = (0..m).map(|a| model.rho(slot_mode(a + 2))).collect();
    let mut residuals = Vec::with_capacity(family.len());
    for f in family {
        let mut l0_mu0 = ZERO;
        let mut l0_mu1 = ZERO;
        let mut l1_mu0 = ZERO;
        for (i, c) in data.iter().enumerate() {
            let phi = expansion.kappa.node(i);
            let j = f.jet(model, phi)?;
            l0_mu0 += b_c * j.f_phi;
            // ⟨𝔏₀ f, μ₁⟩: κ, first and second moment parts
            l0_mu1 += b_c * j.f_phi * expansion.kappa.at(i);
            for a in 0..m {
                l0_mu1 += (b_c * j.grad_phi[a] + rho[a] * j.grad[a]) * expansion.mean[a].at(i);
                for b in 0..m {
                    let ab = a * m + b;
                    l0_mu1 += 0.5
                        * (b_c * j.hess_phi[ab] + (rho[a] + rho[b]) * j.hess[ab])
                        * expansion.second_moment[ab].at(i);
                }
            }
            // ⟨𝔏₁ f, μ₀⟩
            l1_mu0 += (b_q + c.gamma) * j.f_phi + 0.5 * c.diffusion * j.f_phiphi;
            for a in 0..m {
                let ra = &c.stable_rows[a];
                l1_mu0 -= real_dot(&c.gp, ra) * j.grad[a];
                l1_mu0 -= real_dot(&c.gphi, ra) * j.grad_phi[a];
                for b in 0..m {
                    l1_mu0 += 0.5 * bilinear(ra, &c.stable_rows[b]) * j.hess[a * m + b];
                }
            }
        }
        let nf = n as f64;
        residuals.push(HierarchyResidual {
            function: f.clone(),
            order0: (l0_mu0 / nf).norm(),
            order1: ((l0_mu1 + l1_mu0) / nf).norm(),
        });
    }
    Ok(HierarchyReport { residuals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NoiseEntry, NoiseTensor, SpectrumSpec};
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> C {
        C::new(re, im)
    }

    fn spec3() -> SpectrumSpec {
        SpectrumSpec::from_lists(&[0.0, -1.0, -2.0], &[1.0, 2.0, 3.0], &[1.0; 3], &[0.5, 0.0, 0.0])
    }

    fn coupled() -> Model {
        let entries = vec![
            NoiseEntry::new(1, 1, 1, c(0.2, 0.1)),
            NoiseEntry::new(1, -1, -1, c(0.15, 0.0)),
            NoiseEntry::new(1, 2, 2, c(0.1, -0.05)),
            NoiseEntry::new(1, 0, -3, c(0.05, 0.05)),
            NoiseEntry::new(2, 1, 1, c(0.1, 0.0)),
            NoiseEntry::new(2, 2, 2, c(0.2, 0.0)),
            NoiseEntry::new(3, -1, -1, c(0.0, 0.1)),
            NoiseEntry::new(3, 3, 2, c(0.1, 0.05)),
        ];
        Model::build(spec3(), NoiseTensor::new(entries, 3, 1.0, 1.0), 0.0, -0.2, 0.5).unwrap()
    }

    fn zero_model() -> Model {
        Model::build(spec3(), NoiseTensor::zero(2), 0.0, 0.3, 0.5).unwrap()
    }

    #[test]
    fn grid_rejects_bad_sizes() {
        assert!(PhiGrid::sample(15, |p| p).is_err());
        assert!(PhiGrid::sample(8, |p| p).is_err());
        let g = PhiGrid::sample(16, |p| p.cos()).unwrap();
        assert_eq!(g.at(16), g.at(0));
        assert_abs_diff_eq!(g.mean(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn chart_data_matches_model_evaluators() {
        let m = coupled();
        let zeros = vec![C::new(0.0, 0.0); m.num_modes()];
        for phi in [0.0, 0.7, 2.1, 4.4] {
            let d = chart_data(&m, phi);
            let (xi, gamma) = m.eval_xi_gamma(phi, &zeros).unwrap();
            assert_abs_diff_eq!(d.xi, xi, epsilon = 1e-14);
            assert_abs_diff_eq!(d.gamma, gamma, epsilon = 1e-14);
            let (gphi, gp) = m.eval_gphi_gp(phi, &zeros).unwrap();
            for r in 0..gphi.len() {
                assert_abs_diff_eq!(d.gphi[r], gphi[r], epsilon = 1e-14);
                assert_abs_diff_eq!(d.gp[r], gp[r], epsilon = 1e-14);
            }
            let s = 1e-5;
            let gm = |p: f64| chart_data(&m, p);
            let fd_gamma = (gm(phi + s).gamma - gm(phi - s).gamma) / (2.0 * s);
            let fd_d = (gm(phi + s).diffusion - gm(phi - s).diffusion) / (2.0 * s);
            assert_abs_diff_eq!(d.gamma_prime, fd_gamma, epsilon = 1e-8);
            assert_abs_diff_eq!(d.diffusion_prime, fd_d, epsilon = 1e-8);
        }
    }

    #[test]
    fn xi_derivatives_match_polarization() {
        let m = coupled();
        let ms = m.num_slots() - 2;
        let phi = 1.3;
        let d = chart_data(&m, phi);
        for a in 0..ms {
            let mut e = vec![C::new(0.0, 0.0); ms + 2];
            e[a + 2] = C::new(1.0, 0.0);
            let plus = m.xi_extended(phi, &e);
            e[a + 2] = C::new(-1.0, 0.0);
            let minus = m.xi_extended(phi, &e);
            assert_abs_diff_eq!((plus - minus).re / 2.0, d.xi_grad[a].re, epsilon = 1e-14);
            assert_abs_diff_eq!((plus - minus).im / 2.0, d.xi_grad[a].im, epsilon = 1e-14);
            for b in 0..ms {
                let mut ea = vec![C::new(0.0, 0.0); ms];
                let mut eb = ea.clone();
                ea[a] = C::new(1.0, 0.0);
                eb[b] = C::new(1.0, 0.0);
                let h = q_second_derivative(&m, phi, &ea, &eb).unwrap();
                assert_abs_diff_eq!(h.re, d.xi_hess[a * ms + b].re, epsilon = 1e-14);
                assert_abs_diff_eq!(h.im, d.xi_hess[a * ms + b].im, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn zero_tensor_expansion_is_trivial() {
        let m = zero_model();
        let k = compute_kappa(&m, 32, Normalization::ZeroMean).unwrap();
        assert!(k.values().iter().all(|v| *v == 0.0));
        let k1 = compute_kappa(&m, 32, Normalization::PaperConstantOne).unwrap();
        assert!(k1.values().iter().all(|v| *v == 1.0));
        for chi in compute_chi(&m, 32).unwrap().values() {
            assert!(chi.values().iter().all(|v| v.norm() == 0.0));
        }
        for eps in [0.0, 0.1, 0.5] {
            assert_abs_diff_eq!(lambda_asymptotic(&m, eps).unwrap(), 0.3, epsilon = 1e-14);
        }
    }

    #[test]
    fn h_formula() {
        let m = zero_model();
        let h = build_h(&m);
        let h2 = h[&2];
        assert_abs_diff_eq!(h2.re, 1.0 / 64.0, epsilon = 1e-16);
        assert_abs_diff_eq!(h2.im, 1.0 / 64.0, epsilon = 1e-16);
        assert_eq!(h[&-2], h2.conj());
        let spec = SpectrumSpec::from_lists(&[0.0, -1.0, -2.0], &[1.0, 2.0, 0.0], &[1.0; 3], &[0.5, 0.0, 0.0]);
        let m3 = Model::build(spec, NoiseTensor::zero(2), 0.0, 0.3, 0.5).unwrap();
        let h3 = build_h(&m3)[&3];
        assert_abs_diff_eq!(h3.re, 1.0 / 96.0, epsilon = 1e-16);
        assert_eq!(h3.im, 0.0);
        for (k, v) in &h {
            assert!(v.norm() <= 2f64.powi(-(k.unsigned_abs() as i32) - 2));
        }
    }

    #[test]
    fn solve_shifted_two_mode() {
        let n = 32;
        let (b, r) = (1.5, 0.8);
        let rho = c(-1.0, 2.0);
        let rhs: Vec<C> = grid_nodes(n).iter().map(|p| c(r * (2.0 * p).cos(), 0.0)).collect();
        let sol = spectral::solve_shifted(&rhs, b, rho - 1.0).unwrap();
        for (i, p) in grid_nodes(n).iter().enumerate() {
            let e = C::from_polar(1.0, 2.0 * p);
            let want = 0.5
                * r
                * (e / (c(0.0, 2.0 * b) - rho + 1.0) + e.conj() / (c(0.0, -2.0 * b) - rho + 1.0));
            assert_abs_diff_eq!(sol[i].re, want.re, epsilon = 1e-14);
            assert_abs_diff_eq!(sol[i].im, want.im, epsilon = 1e-14);
        }
        assert!(spectral::solve_shifted(&rhs, 1.0, c(0.0, 2.0)).is_err());
    }

    #[test]
    fn squared_trace_kappa_is_not_solvable() {
        let m = coupled();
        assert!(matches!(
            compute_kappa_with(&m, 64, Normalization::ZeroMean, KappaForm::SquaredTrace),
            Err(AsymptoticsError::NonSolvable { .. })
        ));
    }

    #[test]
    fn hierarchy_holds_on_coupled_model() {
        let m = coupled();
        let exp = MeasureExpansion::build(&m, 64, Normalization::ZeroMean).unwrap();
        let report = check_hierarchy(&m, &exp, &default_test_family(&m)).unwrap();
        assert!(report.max_residual() < 1e-12, "{report:?}");
    }

    #[test]
    fn literal_pairing_is_real_on_real_field_model() {
        let m = coupled();
        let (_, imag) = lambda_asymptotic_literal(&m, 0.1, 64, Normalization::ZeroMean).unwrap();
        assert!(imag.abs() < 1e-12, "{imag}");
        let t = lambda_terms(&m, 64, Normalization::ZeroMean).unwrap();
        assert!(t.order2_imag.abs() < 1e-12);
    }

    #[test]
    fn lambda_at_zero_is_mu0_pairing() {
        let m = coupled();
        let a_q = m.critical().a_q;
        let mu0 = pair_mu0(64, |p| a_q + chart_data(&m, p).xi).unwrap();
        assert_eq!(lambda_asymptotic(&m, 0.0).unwrap(), mu0);
    }

    #[test]
    fn grid_doubling_is_stable() {
        let m = coupled();
        let a = lambda_asymptotic_with(&m, 0.2, 32, Normalization::ZeroMean).unwrap();
        let b = lambda_asymptotic_with(&m, 0.2, 64, Normalization::ZeroMean).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn test_function_jet_matches_eval() {
        let m = coupled();
        let f = TestFunction::new(Trig::Sin(2), &[2, -3]).real();
        let phi = 0.4;
        let j = f.jet(&m, phi).unwrap();
        let ms = m.num_slots() - 2;
        let mut ea = vec![C::new(0.0, 0.0); ms];
        let mut eb = ea.clone();
        ea[0] = C::new(1.0, 0.0);
        eb[3] = C::new(1.0, 0.0);
        let s: Vec<C> = ea.iter().zip(&eb).map(|(a, b)| a + b).collect();
        let zero = vec![C::new(0.0, 0.0); ms];
        let e = |v: &[C]| f.eval(&m, phi, v).unwrap();
        let pol = e(&s) - e(&ea) - e(&eb) + e(&zero);
        assert_abs_diff_eq!(pol.re, j.hess[3].re, epsilon = 1e-14);
    }
}
