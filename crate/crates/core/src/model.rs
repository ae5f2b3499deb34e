//! Truncated spectral model: eigenvalue data at the Hopf point, the linear
//! multiplicative noise tensor, and the pointwise evaluators of the polar
//! chart (Ξ, Γ, 𝒬, G^φ, G^𝔭) shared by the simulator and the asymptotics.
//!
//! Modes are indexed by nonzero integers `±1..=±K`; `±1` is the critical pair.
//! Complex coefficient vectors over all modes are stored in *slot order*
//! `[1, -1, 2, -2, ..]` (see [`mode_slot`]). Real-field vectors satisfy
//! `u_{-k} = conj(u_k)` and are usually passed as the `K` positive-mode
//! coefficients only.
//!
//! Noise modes run over `|k| <= K_W`. Internally every complex noise mode
//! pair `(k, -k)` is realized by two real Brownian channels
//! `dW_k = (dβ_c + i dβ_s)/√2`, and `k = 0` by one real channel, so all
//! noise-row quantities are real vectors of length `2 K_W + 1`.

use std::collections::HashMap;
use std::f64::consts::FRAC_1_SQRT_2;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Relative slack allowed when comparing the tensor operator norm to `l1`/`l2`.
const LIPSCHITZ_SLACK: f64 = 1e-9;
/// Tolerance for conjugate-partner consistency of tensor entries.
const CONJUGACY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("spectrum violation ({assumption}) at mode {index}: {detail}")]
    SpectrumViolation {
        assumption: &'static str,
        index: i64,
        detail: String,
    },
    #[error("tensor shape mismatch: {0}")]
    TensorShapeMismatch(String),
    #[error("tensor entry ({j},{k},{m}) has no real-field conjugate partner: {detail}")]
    NonRealizableConjugacy {
        j: i64,
        k: i64,
        m: i64,
        detail: String,
    },
    #[error("noise operator norm {actual:.6e} exceeds declared {which} = {bound:.6e}")]
    LipschitzViolation {
        which: &'static str,
        bound: f64,
        actual: f64,
    },
    #[error("invalid parameter {name}: {detail}")]
    InvalidParameter { name: &'static str, detail: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("stable vector carries a critical component ({0:.3e})")]
    ProjectionError(f64),
    #[error("zero state")]
    ZeroState,
    #[error("cannot read model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse model document: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Slot of mode `k` (nonzero) in a complex coefficient vector.
pub fn mode_slot(k: i64) -> usize {
    debug_assert!(k != 0);
    let a = k.unsigned_abs() as usize;
    if k > 0 {
        2 * (a - 1)
    } else {
        2 * (a - 1) + 1
    }
}

/// Inverse of [`mode_slot`].
pub fn slot_mode(slot: usize) -> i64 {
    let k = (slot / 2 + 1) as i64;
    if slot.is_multiple_of(2) {
        k
    } else {
        -k
    }
}

/// Slot of noise mode `k` (`|k| <= K_W`, zero allowed).
pub fn noise_slot(k: i64) -> usize {
    let a = k.unsigned_abs() as usize;
    match k.signum() {
        0 => 0,
        1 => 2 * a - 1,
        _ => 2 * a,
    }
}

/// Eigenvalue data of one positive mode at the bifurcation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub k: i64,
    pub a: f64,
    pub b: f64,
    pub a_prime: f64,
    pub b_prime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    pub modes: Vec<ModeSpec>,
    pub er_bound: f64,
}

impl SpectrumSpec {
    pub fn new(modes: Vec<ModeSpec>) -> Self {
        Self {
            modes,
            er_bound: 0.0,
        }
    }

    /// Convenience constructor from parallel lists for modes `1..=K`.
    pub fn from_lists(a: &[f64], b: &[f64], a_prime: &[f64], b_prime: &[f64]) -> Self {
        let modes = (0..a.len())
            .map(|i| ModeSpec {
                k: i as i64 + 1,
                a: a[i],
                b: b[i],
                a_prime: a_prime.get(i).copied().unwrap_or(0.0),
                b_prime: b_prime.get(i).copied().unwrap_or(0.0),
            })
            .collect();
        Self::new(modes)
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }
}

/// One coefficient `T[j][k][m]` of the noise tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseEntry {
    pub j: i64,
    pub k: i64,
    pub m: i64,
    pub re: f64,
    pub im: f64,
}

impl NoiseEntry {
    pub fn new(j: i64, k: i64, m: i64, value: Complex64) -> Self {
        Self {
            j,
            k,
            m,
            re: value.re,
            im: value.im,
        }
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

/// Sparse noise tensor. Entries whose conjugate partner
/// `T[-j][-k][-m] = conj(T[j][k][m])` is missing are completed on build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseTensor {
    pub entries: Vec<NoiseEntry>,
    #[serde(rename = "K_W")]
    pub k_w: usize,
    pub l1: f64,
    pub l2: f64,
    #[serde(default)]
    pub lower_bound_m: f64,
}

impl NoiseTensor {
    pub fn zero(k_w: usize) -> Self {
        Self {
            entries: Vec::new(),
            k_w,
            l1: 0.0,
            l2: 0.0,
            lower_bound_m: 0.0,
        }
    }

    pub fn new(entries: Vec<NoiseEntry>, k_w: usize, l1: f64, l2: f64) -> Self {
        Self {
            entries,
            k_w,
            l1,
            l2,
            lower_bound_m: 0.0,
        }
    }
}

/// Critical-mode scalars derived from the spectrum and the unfolding `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalScalars {
    /// Imaginary part of the critical eigenvalue at the bifurcation point.
    pub b_c: f64,
    /// `q * a_1'`
    pub a_q: f64,
    /// `q * b_1'`
    pub b_q: f64,
}

/// Model document as stored on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub spectrum: Vec<ModeSpec>,
    pub noise: NoiseTensor,
    pub gamma_c: f64,
    pub q: f64,
    pub alpha: f64,
    #[serde(default)]
    pub er_bound: f64,
}

impl ModelDocument {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<Model, ModelError> {
        let spectrum = SpectrumSpec {
            modes: self.spectrum.clone(),
            er_bound: self.er_bound,
        };
        Model::build(spectrum, self.noise.clone(), self.gamma_c, self.q, self.alpha)
    }
}

/// Real-coordinate form of the noise: `dX = Σ_r B_r X dβ_r` with
/// `X = (Re u_1, Im u_1, Re u_2, Im u_2, ..)`.
#[derive(Debug, Clone)]
pub struct RealNoise {
    pub dim: usize,
    pub channels: usize,
    /// Row-major `dim x dim` blocks, one per channel.
    pub matrices: Vec<f64>,
    /// Channels whose matrix is not identically zero.
    pub active: Vec<usize>,
}

impl RealNoise {
    pub fn matrix(&self, r: usize) -> &[f64] {
        let n2 = self.dim * self.dim;
        &self.matrices[r * n2..(r + 1) * n2]
    }
}

/// Validated, immutable model.
#[derive(Debug, Clone)]
pub struct Model {
    spectrum: SpectrumSpec,
    noise: NoiseTensor,
    gamma_c: f64,
    q: f64,
    alpha: f64,
    critical: CriticalScalars,
    /// `w_k` for `k = 1..=K` (critical weight is 1).
    weights: Vec<f64>,
    /// Completed tensor, dense in slot order: `[j][k][m]`.
    tensor: Vec<Complex64>,
    /// Complex rows over real channels, dense: `[j][r][m]`.
    rows: Vec<Complex64>,
    real_noise: RealNoise,
    op_norm: f64,
}

impl Model {
    /// Validates the spectrum and tensor and caches all derived data.
    pub fn build(
        spectrum: SpectrumSpec,
        noise: NoiseTensor,
        gamma_c: f64,
        q: f64,
        alpha: f64,
    ) -> Result<Self, ModelError> {
        validate_spectrum(&spectrum)?;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ModelError::InvalidParameter {
                name: "alpha",
                detail: format!("{alpha} not in (0, 1]"),
            });
        }
        for (name, v) in [
            ("gamma_c", gamma_c),
            ("q", q),
            ("l1", noise.l1),
            ("l2", noise.l2),
            ("lower_bound_m", noise.lower_bound_m),
            ("er_bound", spectrum.er_bound),
        ] {
            if !v.is_finite() {
                return Err(ModelError::InvalidParameter {
                    name,
                    detail: "not finite".into(),
                });
            }
        }
        for (name, v) in [
            ("l1", noise.l1),
            ("l2", noise.l2),
            ("lower_bound_m", noise.lower_bound_m),
            ("er_bound", spectrum.er_bound),
        ] {
            if v < 0.0 {
                return Err(ModelError::InvalidParameter {
                    name,
                    detail: format!("{v} is negative"),
                });
            }
        }
        let kk = spectrum.num_modes();
        let tensor = complete_tensor(&noise, kk)?;
        let first = spectrum.modes[0];
        let critical = CriticalScalars {
            b_c: first.b,
            a_q: q * first.a_prime,
            b_q: q * first.b_prime,
        };
        let weights = spectrum
            .modes
            .iter()
            .map(|m| {
                if m.k == 1 {
                    1.0
                } else {
                    Complex64::new(m.a, m.b).norm().powf(alpha)
                }
            })
            .collect::<Vec<_>>();
        let rows = complex_rows(&tensor, kk, noise.k_w);
        let real_noise = real_form(&rows, kk, noise.k_w);
        let mut model = Self {
            spectrum,
            noise,
            gamma_c,
            q,
            alpha,
            critical,
            weights,
            tensor,
            rows,
            real_noise,
            op_norm: 0.0,
        };
        model.op_norm = model.noise_operator_norm();
        let bound = |b: f64| b * (1.0 + LIPSCHITZ_SLACK) + 1e-14;
        if model.op_norm > bound(model.noise.l1) {
            return Err(ModelError::LipschitzViolation {
                which: "l1",
                bound: model.noise.l1,
                actual: model.op_norm,
            });
        }
        // G is linear, so G'(u)v = G(v) and the same norm bounds l2.
        if model.op_norm > bound(model.noise.l2) {
            return Err(ModelError::LipschitzViolation {
                which: "l2",
                bound: model.noise.l2,
                actual: model.op_norm,
            });
        }
        Ok(model)
    }

    /// Same spectrum and tensor with a different unfolding parameter.
    pub fn with_q(&self, q: f64) -> Self {
        let mut m = self.clone();
        let first = m.spectrum.modes[0];
        m.q = q;
        m.critical.a_q = q * first.a_prime;
        m.critical.b_q = q * first.b_prime;
        m
    }

    pub fn spectrum(&self) -> &SpectrumSpec {
        &self.spectrum
    }

    pub fn noise(&self) -> &NoiseTensor {
        &self.noise
    }

    pub fn gamma_c(&self) -> f64 {
        self.gamma_c
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn critical(&self) -> CriticalScalars {
        self.critical
    }

    /// Number of positive modes `K`.
    pub fn num_modes(&self) -> usize {
        self.spectrum.num_modes()
    }

    /// Number of complex slots `2K`.
    pub fn num_slots(&self) -> usize {
        2 * self.num_modes()
    }

    /// Number of real noise channels `2 K_W + 1`.
    pub fn num_channels(&self) -> usize {
        2 * self.noise.k_w + 1
    }

    /// Norm weight of mode `k` (either sign).
    pub fn weight(&self, k: i64) -> f64 {
        self.weights[k.unsigned_abs() as usize - 1]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Eigenvalue `ρ_k` at the bifurcation point (conjugated for `k < 0`).
    pub fn rho(&self, k: i64) -> Complex64 {
        let m = self.spectrum.modes[k.unsigned_abs() as usize - 1];
        let r = Complex64::new(m.a, m.b);
        if k > 0 {
            r
        } else {
            r.conj()
        }
    }

    /// Stable modes of both signs in slot order.
    pub fn stable_modes(&self) -> Vec<i64> {
        (2..self.num_slots()).map(slot_mode).collect()
    }

    pub fn is_zero_noise(&self) -> bool {
        self.real_noise.active.is_empty()
    }

    /// Largest weighted Hilbert–Schmidt gain `sup ‖G(u)‖ / ‖u‖`.
    pub fn operator_norm(&self) -> f64 {
        self.op_norm
    }

    /// Completed tensor entry `T[j][k][m]`.
    pub fn tensor_entry(&self, j: i64, k: i64, m: i64) -> Complex64 {
        let (s, w) = (self.num_slots(), 2 * self.noise.k_w + 1);
        self.tensor[(mode_slot(j) * w + noise_slot(k)) * s + mode_slot(m)]
    }

    /// Complex row coefficient for output slot `js`, channel `r`, input slot `ms`.
    #[inline]
    pub fn row_coeff(&self, js: usize, r: usize, ms: usize) -> Complex64 {
        let (s, w) = (self.num_slots(), self.num_channels());
        self.rows[(js * w + r) * s + ms]
    }

    pub fn real_noise(&self) -> &RealNoise {
        &self.real_noise
    }

    /// `g_{jk}(u) = Σ_m T[j][k][m] u_m`; rows are output slots, columns noise slots.
    pub fn apply_g(&self, u: &[Complex64]) -> Result<Vec<Vec<Complex64>>, ModelError> {
        let s = self.num_slots();
        if u.len() != s {
            return Err(ModelError::DimensionMismatch {
                expected: s,
                got: u.len(),
            });
        }
        let w = self.num_channels();
        let out = (0..s)
            .map(|js| {
                (0..w)
                    .map(|ks| {
                        let base = (js * w + ks) * s;
                        (0..s).map(|ms| self.tensor[base + ms] * u[ms]).sum()
                    })
                    .collect()
            })
            .collect();
        Ok(out)
    }

    /// Expands positive-mode coefficients into a slot-ordered real-field vector.
    pub fn full_from_positive(&self, u: &[Complex64]) -> Result<Vec<Complex64>, ModelError> {
        let kk = self.num_modes();
        if u.len() != kk {
            return Err(ModelError::DimensionMismatch {
                expected: kk,
                got: u.len(),
            });
        }
        let mut full = vec![Complex64::new(0.0, 0.0); 2 * kk];
        for (i, v) in u.iter().enumerate() {
            full[2 * i] = *v;
            full[2 * i + 1] = v.conj();
        }
        Ok(full)
    }

    /// `u/|z|` in the polar chart: `e^{iφ} e_1 + e^{-iφ} e_{-1} + η`.
    pub fn chart_point(&self, phi: f64, eta: &[Complex64]) -> Result<Vec<Complex64>, ModelError> {
        let kk = self.num_modes();
        if eta.len() != kk {
            return Err(ModelError::DimensionMismatch {
                expected: kk,
                got: eta.len(),
            });
        }
        if eta[0].norm() > 0.0 {
            return Err(ModelError::ProjectionError(eta[0].norm()));
        }
        let mut u = self.full_from_positive(eta)?;
        let e = Complex64::from_polar(1.0, phi);
        u[0] = e;
        u[1] = e.conj();
        Ok(u)
    }

    /// Row of output slot `js` over real channels: `Σ_m L[j][r][m] u_m`.
    pub fn row_action(&self, js: usize, u: &[Complex64]) -> Vec<Complex64> {
        let s = self.num_slots();
        (0..self.num_channels())
            .map(|r| {
                let base = (js * self.num_channels() + r) * s;
                (0..s).map(|ms| self.rows[base + ms] * u[ms]).sum()
            })
            .collect()
    }

    /// Critical row `ψ = G_c^R + i G_c^I` at the chart point.
    pub fn critical_row(&self, phi: f64, eta: &[Complex64]) -> Result<Vec<Complex64>, ModelError> {
        let u = self.chart_point(phi, eta)?;
        Ok(self.row_action(0, &u))
    }

    pub fn eval_gc_components(
        &self,
        phi: f64,
        eta: &[Complex64],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let psi = self.critical_row(phi, eta)?;
        Ok((psi.iter().map(|c| c.re).collect(), psi.iter().map(|c| c.im).collect()))
    }

    pub fn eval_xi_gamma(&self, phi: f64, eta: &[Complex64]) -> Result<(f64, f64), ModelError> {
        let (gr, gi) = self.eval_gc_components(phi, eta)?;
        Ok(xi_gamma_from_components(phi, &gr, &gi))
    }

    pub fn eval_q(&self, phi: f64, eta: &[Complex64]) -> Result<f64, ModelError> {
        Ok(self.critical.a_q + self.eval_xi_gamma(phi, eta)?.0)
    }

    /// `(G^φ, G^𝔭)` noise rows.
    pub fn eval_gphi_gp(
        &self,
        phi: f64,
        eta: &[Complex64],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let (gr, gi) = self.eval_gc_components(phi, eta)?;
        let (s, c) = phi.sin_cos();
        let gphi = gr.iter().zip(&gi).map(|(r, i)| r * s - i * c).collect();
        let gp = gr.iter().zip(&gi).map(|(r, i)| r * c + i * s).collect();
        Ok((gphi, gp))
    }

    /// Holomorphic extension of Ξ to complex (not necessarily real-field)
    /// stable directions; `eta_full` is slot-ordered over all modes and must
    /// vanish on the critical slots.
    pub fn xi_extended(&self, phi: f64, eta_full: &[Complex64]) -> Complex64 {
        let mut u = eta_full.to_vec();
        u[0] = Complex64::from_polar(1.0, phi);
        u[1] = Complex64::from_polar(1.0, -phi);
        let plus: Complex64 = self.row_action(0, &u).iter().map(|v| v * v).sum();
        let minus: Complex64 = self.row_action(1, &u).iter().map(|v| v * v).sum();
        -0.25 * (Complex64::from_polar(1.0, -2.0 * phi) * plus + Complex64::from_polar(1.0, 2.0 * phi) * minus)
    }

    /// Smallest singular value of the weighted matrix of `G(u)` (noise
    /// channels to state) divided by `‖u‖_α`. `u` holds positive-mode
    /// coefficients of a real-field vector.
    pub fn check_invertibility_margin(&self, u: &[Complex64]) -> Result<f64, ModelError> {
        let kk = self.num_modes();
        if u.len() != kk {
            return Err(ModelError::DimensionMismatch {
                expected: kk,
                got: u.len(),
            });
        }
        let norm = self.weighted_norm(u);
        if norm == 0.0 {
            return Err(ModelError::ZeroState);
        }
        let x = real_coords(u);
        let dim = 2 * kk;
        let nr = self.num_channels();
        let mut m = DMatrix::<f64>::zeros(dim, nr);
        for r in 0..nr {
            let b = self.real_noise.matrix(r);
            for i in 0..dim {
                let v: f64 = (0..dim).map(|j| b[i * dim + j] * x[j]).sum();
                m[(i, r)] = self.weights[i / 2] * v;
            }
        }
        let sv = m.singular_values();
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        // ‖u‖_α carries a factor √2 relative to the weighted real coordinates,
        // and so does ‖G(u)ξ‖_α.
        Ok(smin * std::f64::consts::SQRT_2 / norm)
    }

    /// `‖u‖_α` of the real-field vector with the given positive-mode coefficients.
    pub fn weighted_norm(&self, u: &[Complex64]) -> f64 {
        (2.0 * u
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| w * w * v.norm_sqr())
            .sum::<f64>())
        .sqrt()
    }

    /// `|⟨A_c^q u, u⟩|` and `‖P_c u‖²` for a positive-mode vector.
    pub fn unfolding_form(&self, u: &[Complex64]) -> (f64, f64) {
        let rho_q = Complex64::new(self.critical.a_q, self.critical.b_q);
        let zc = u[0];
        let form = 2.0 * (rho_q * zc * zc.conj()).re;
        (form.abs(), 2.0 * zc.norm_sqr())
    }

    fn noise_operator_norm(&self) -> f64 {
        if self.is_zero_noise() {
            return 0.0;
        }
        let dim = self.real_noise.dim;
        let nr = self.num_channels();
        let mut stacked = DMatrix::<f64>::zeros(dim * nr, dim);
        for r in 0..nr {
            let b = self.real_noise.matrix(r);
            for i in 0..dim {
                for j in 0..dim {
                    stacked[(r * dim + i, j)] =
                        self.weights[i / 2] * b[i * dim + j] / self.weights[j / 2];
                }
            }
        }
        stacked.singular_values().iter().cloned().fold(0.0, f64::max)
    }
}

/// Real coordinates `(Re u_1, Im u_1, ..)` of positive-mode coefficients.
pub fn real_coords(u: &[Complex64]) -> Vec<f64> {
    u.iter().flat_map(|v| [v.re, v.im]).collect()
}

/// Ξ and Γ from the real and imaginary critical noise rows.
pub fn xi_gamma_from_components(phi: f64, gr: &[f64], gi: &[f64]) -> (f64, f64) {
    let rr: f64 = gr.iter().map(|x| x * x).sum();
    let ii: f64 = gi.iter().map(|x| x * x).sum();
    let ri: f64 = gr.iter().zip(gi).map(|(a, b)| a * b).sum();
    let (s2, c2) = (2.0 * phi).sin_cos();
    let xi = -0.5 * c2 * (rr - ii) - 0.5 * s2 * 2.0 * ri;
    let gamma = 0.5 * s2 * (rr - ii) - 0.5 * c2 * 2.0 * ri;
    (xi, gamma)
}

fn validate_spectrum(spec: &SpectrumSpec) -> Result<(), ModelError> {
    let viol = |assumption, index, detail: String| ModelError::SpectrumViolation {
        assumption,
        index,
        detail,
    };
    let modes = &spec.modes;
    if modes.len() < 2 {
        return Err(viol(
            "truncation",
            modes.len() as i64,
            "at least two positive modes are required".into(),
        ));
    }
    for (i, m) in modes.iter().enumerate() {
        if m.k != i as i64 + 1 {
            return Err(viol(
                "mode indexing",
                m.k,
                format!("expected mode {} at position {i}", i + 1),
            ));
        }
        if ![m.a, m.b, m.a_prime, m.b_prime].iter().all(|v| v.is_finite()) {
            return Err(viol("finiteness", m.k, "non-finite eigenvalue data".into()));
        }
    }
    let c = modes[0];
    if c.a != 0.0 {
        return Err(viol("criticality", 1, format!("a_1 = {} must vanish", c.a)));
    }
    if c.b == 0.0 {
        return Err(viol("criticality", 1, "b_1 must be nonzero".into()));
    }
    if c.a_prime == 0.0 {
        return Err(viol("transversality", 1, "a_1' must be nonzero".into()));
    }
    for m in &modes[1..] {
        if m.a >= 0.0 {
            return Err(viol(
                "stability",
                m.k,
                format!("a_{} = {} must be negative", m.k, m.a),
            ));
        }
    }
    for w in modes[1..].windows(2) {
        if w[1].a > w[0].a {
            return Err(viol(
                "ordering",
                w[1].k,
                format!("a_{} = {} exceeds a_{} = {}", w[1].k, w[1].a, w[0].k, w[0].a),
            ));
        }
    }
    if spec.er_bound < 0.0 || !spec.er_bound.is_finite() {
        return Err(viol("error bound", 1, "er_bound must be finite and >= 0".into()));
    }
    Ok(())
}

fn complete_tensor(noise: &NoiseTensor, kk: usize) -> Result<Vec<Complex64>, ModelError> {
    let kw = noise.k_w as i64;
    let kmax = kk as i64;
    let mut map: HashMap<(i64, i64, i64), Complex64> = HashMap::new();
    for e in &noise.entries {
        let in_modes = |x: i64| x != 0 && x.abs() <= kmax;
        if !in_modes(e.j) || !in_modes(e.m) || e.k.abs() > kw {
            return Err(ModelError::TensorShapeMismatch(format!(
                "entry ({},{},{}) outside modes ±1..±{kmax} / noise modes |k| <= {kw}",
                e.j, e.k, e.m
            )));
        }
        if !(e.re.is_finite() && e.im.is_finite()) {
            return Err(ModelError::TensorShapeMismatch(format!(
                "entry ({},{},{}) is not finite",
                e.j, e.k, e.m
            )));
        }
        if map.insert((e.j, e.k, e.m), e.value()).is_some() {
            return Err(ModelError::TensorShapeMismatch(format!(
                "duplicate entry ({},{},{})",
                e.j, e.k, e.m
            )));
        }
    }
    let keys: Vec<_> = map.keys().copied().collect();
    for (j, k, m) in keys {
        let v = map[&(j, k, m)];
        let partner = (-j, -k, -m);
        match map.get(&partner) {
            Some(p) => {
                let scale = 1.0 + v.norm();
                if (*p - v.conj()).norm() > CONJUGACY_TOL * scale {
                    return Err(ModelError::NonRealizableConjugacy {
                        j,
                        k,
                        m,
                        detail: format!("partner holds {p}, expected {}", v.conj()),
                    });
                }
            }
            None => {
                map.insert(partner, v.conj());
            }
        }
    }
    let s = 2 * kk;
    let w = 2 * noise.k_w + 1;
    let mut dense = vec![Complex64::new(0.0, 0.0); s * w * s];
    for ((j, k, m), v) in map {
        dense[(mode_slot(j) * w + noise_slot(k)) * s + mode_slot(m)] = v;
    }
    Ok(dense)
}

fn complex_rows(tensor: &[Complex64], kk: usize, k_w: usize) -> Vec<Complex64> {
    let s = 2 * kk;
    let w = 2 * k_w + 1;
    let t = |js: usize, ks: usize, ms: usize| tensor[(js * w + ks) * s + ms];
    let mut rows = vec![Complex64::new(0.0, 0.0); s * w * s];
    for js in 0..s {
        for ms in 0..s {
            rows[(js * w) * s + ms] = t(js, 0, ms);
            for k in 1..=k_w as i64 {
                let (p, n) = (noise_slot(k), noise_slot(-k));
                let (tp, tn) = (t(js, p, ms), t(js, n, ms));
                rows[(js * w + 2 * k as usize - 1) * s + ms] = (tp + tn) * FRAC_1_SQRT_2;
                rows[(js * w + 2 * k as usize) * s + ms] = I * (tp - tn) * FRAC_1_SQRT_2;
            }
        }
    }
    rows
}

fn real_form(rows: &[Complex64], kk: usize, k_w: usize) -> RealNoise {
    let s = 2 * kk;
    let w = 2 * k_w + 1;
    let dim = 2 * kk;
    let mut matrices = vec![0.0; w * dim * dim];
    for r in 0..w {
        let mat = &mut matrices[r * dim * dim..(r + 1) * dim * dim];
        for j in 0..kk {
            let js = 2 * j;
            for m in 0..kk {
                let l = rows[(js * w + r) * s + 2 * m];
                let lc = rows[(js * w + r) * s + 2 * m + 1];
                let (sum, diff) = (l + lc, l - lc);
                mat[(2 * j) * dim + 2 * m] = sum.re;
                mat[(2 * j) * dim + 2 * m + 1] = -diff.im;
                mat[(2 * j + 1) * dim + 2 * m] = sum.im;
                mat[(2 * j + 1) * dim + 2 * m + 1] = diff.re;
            }
        }
    }
    let active = (0..w)
        .filter(|&r| matrices[r * dim * dim..(r + 1) * dim * dim].iter().any(|v| *v != 0.0))
        .collect();
    RealNoise {
        dim,
        channels: w,
        matrices,
        active,
    }
}
