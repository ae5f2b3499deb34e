//! Monte Carlo estimators of the top Lyapunov exponent (rescaled time).
//!
//! Both estimators run the amplitude system path by path with independent
//! ChaCha streams. `lognorm` measures the growth of `ln|z|` directly; the
//! Furstenberg–Khasminskii route averages `𝒬(φ_t, η_t)` along the same
//! kind of path. `fk_control_variate` adds the zero-mean phase martingale of
//! [`StepOutput`](crate::simulate::StepOutput) to the FK average and
//! subtracts the bounded boundary term `F(φ_T) - F(φ_burn)`, which removes
//! the fluctuation carried by the phase.
//! Errors are batch means across paths, or across time segments when only
//! one path is run.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Model;
use crate::simulate::{
    path_rng, renormalize, step_count, AmplitudeState, IntegratorConfig,
    SimError, Stepper,
};

/// Time segments used for single-path batch means.
pub const SINGLE_PATH_SEGMENTS: usize = 20;

#[derive(Debug, Error)]
pub enum LyapunovError {
    #[error("batch means need at least 2 batches of equal size (got {samples} samples, {batches} batches)")]
    TooFewSamples { samples: usize, batches: usize },
    #[error("invalid estimator setup: {0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Lognorm,
    FkAverage,
    FkControlVariate,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Lognorm => "lognorm",
            Method::FkAverage => "fk_average",
            Method::FkControlVariate => "fk_control_variate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_batches: usize,
    pub burn_in: f64,
    pub total_time: f64,
    pub method: Method,
    pub n_paths: usize,
    pub steps_per_path: usize,
    pub wall_seconds: f64,
    /// Growth rate of `ln‖(z, y)‖` (lognorm only; `NaN` otherwise).
    pub full_norm_rate: f64,
}

/// Non-overlapping batch means: `(mean, std of batch means / √n_batches)`.
pub fn batch_ci(samples: &[f64], n_batches: usize) -> Result<(f64, f64), LyapunovError> {
    if n_batches < 2 || samples.len() < n_batches || !samples.len().is_multiple_of(n_batches) {
        return Err(LyapunovError::TooFewSamples {
            samples: samples.len(),
            batches: n_batches,
        });
    }
    let size = samples.len() / n_batches;
    let means: Vec<f64> = samples
        .chunks_exact(size)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let mean = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    Ok((mean, (var / n_batches as f64).sqrt()))
}

/// Per-path accumulations over `[burn_in, T]`.
#[derive(Debug, Clone)]
pub struct PathStats {
    pub lognorm_rate: f64,
    pub full_norm_rate: f64,
    pub fk_average: f64,
    pub fk_cv_average: f64,
    pub lognorm_segments: Vec<f64>,
    pub fk_segments: Vec<f64>,
    pub fk_cv_segments: Vec<f64>,
}

/// Ensemble run shared by both estimators.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub paths: Vec<PathStats>,
    pub burn_in: f64,
    pub total_time: f64,
    pub steps_per_path: usize,
    pub wall_seconds: f64,
}

impl EnsembleRun {
    pub fn estimate(&self, method: Method) -> Result<LyapunovEstimate, LyapunovError> {
        let (values, segments): (Vec<f64>, Vec<f64>) = match method {
            Method::Lognorm => (
                self.paths.iter().map(|p| p.lognorm_rate).collect(),
                self.paths[0].lognorm_segments.clone(),
            ),
            Method::FkAverage => (
                self.paths.iter().map(|p| p.fk_average).collect(),
                self.paths[0].fk_segments.clone(),
            ),
            Method::FkControlVariate => (
                self.paths.iter().map(|p| p.fk_cv_average).collect(),
                self.paths[0].fk_cv_segments.clone(),
            ),
        };
        let (value, stderr, n_batches) = if values.len() >= 2 {
            let (m, s) = batch_ci(&values, values.len())?;
            (m, s, values.len())
        } else {
            let (_, s) = batch_ci(&segments, segments.len())?;
            (values[0], s, segments.len())
        };
        let full_norm_rate = match method {
            Method::Lognorm => {
                self.paths.iter().map(|p| p.full_norm_rate).sum::<f64>() / self.paths.len() as f64
            }
            Method::FkAverage | Method::FkControlVariate => f64::NAN,
        };
        Ok(LyapunovEstimate {
            value,
            stderr,
            n_batches,
            burn_in: self.burn_in,
            total_time: self.total_time,
            method,
            n_paths: self.paths.len(),
            steps_per_path: self.steps_per_path,
            wall_seconds: self.wall_seconds,
            full_norm_rate,
        })
    }
}

/// Simulates `n_paths` paths (streams `0..n_paths` of `cfg.rng_seed`) from
/// `init` and accumulates both estimators over `[burn_in, T]`.
pub fn run_ensemble(
    model: &Model,
    cfg: &IntegratorConfig,
    init: &AmplitudeState,
    t_final: f64,
    burn_in: f64,
    n_paths: usize,
) -> Result<EnsembleRun, LyapunovError> {
    if n_paths == 0 {
        return Err(LyapunovError::InvalidSetup("n_paths must be positive".into()));
    }
    if !(burn_in >= 0.0 && t_final > burn_in) {
        return Err(LyapunovError::InvalidSetup(format!(
            "need T > burn_in >= 0 (T = {t_final}, burn_in = {burn_in})"
        )));
    }
    let stepper = Stepper::new(model, *cfg)?;
    let n_total = step_count(t_final, cfg.dt)?;
    let n_burn = ((burn_in / cfg.dt) - 1e-9).ceil().max(0.0) as usize;
    if n_total < n_burn + SINGLE_PATH_SEGMENTS {
        return Err(LyapunovError::InvalidSetup(format!(
            "only {} post-burn-in steps",
            n_total.saturating_sub(n_burn)
        )));
    }
    let start = Instant::now();
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|idx| run_single(&stepper, init, n_burn, n_total, idx))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EnsembleRun {
        paths,
        burn_in: n_burn as f64 * cfg.dt,
        total_time: n_total as f64 * cfg.dt,
        steps_per_path: n_total,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_single(
    stepper: &Stepper,
    init: &AmplitudeState,
    n_burn: usize,
    n_total: usize,
    index: u64,
) -> Result<PathStats, SimError> {
    let cfg = *stepper.config();
    let mut rng = path_rng(cfg.rng_seed, index);
    let mut ws = stepper.workspace();
    let mut x = init.to_real();
    let mut log_accum = init.log_accum;
    let n_post = n_total - n_burn;
    let seg_len = n_post / SINGLE_PATH_SEGMENTS;
    let mut fk_seg = [0.0; SINGLE_PATH_SEGMENTS];
    let mut cv_seg = [0.0; SINGLE_PATH_SEGMENTS];
    let mut ln_seg = [0.0; SINGLE_PATH_SEGMENTS];
    let log_z = |x: &[f64], acc: f64| 0.5 * (x[0] * x[0] + x[1] * x[1]).ln() + acc;
    let log_full = |x: &[f64], acc: f64| 0.5 * x.iter().map(|v| v * v).sum::<f64>().ln() + acc;
    let mut p_burn = log_z(&x, log_accum);
    let mut full_burn = log_full(&x, log_accum);
    let mut seg_start = p_burn;
    let mut fk_total = 0.0;
    let mut cv_total = 0.0;
    let mut f_burn = stepper.phase_potential(&x);
    let mut f_seg = f_burn;
    for i in 0..n_total {
        stepper.sample_increment(&mut rng, &mut ws);
        let out = stepper.step_detailed(&mut x, &mut ws);
        if (i + 1) % cfg.renorm_every == 0 {
            log_accum += renormalize(&mut x);
        }
        if i >= n_burn {
            let k = i - n_burn;
            fk_total += out.q;
            cv_total += out.q + out.martingale;
            let seg = (k / seg_len).min(SINGLE_PATH_SEGMENTS - 1);
            fk_seg[seg] += out.q;
            cv_seg[seg] += out.q + out.martingale;
            let last_of_seg = seg < SINGLE_PATH_SEGMENTS - 1 && (k + 1).is_multiple_of(seg_len);
            if last_of_seg || i + 1 == n_total {
                let p = log_z(&x, log_accum);
                ln_seg[seg] = p - seg_start;
                seg_start = p;
                let f = stepper.phase_potential(&x);
                cv_seg[seg] -= (f - f_seg) / cfg.dt;
                f_seg = f;
            }
        }
        if i + 1 == n_burn {
            p_burn = log_z(&x, log_accum);
            full_burn = log_full(&x, log_accum);
            seg_start = p_burn;
            f_burn = stepper.phase_potential(&x);
            f_seg = f_burn;
        }
    }
    let t = cfg.dt * n_post as f64;
    let p_end = log_z(&x, log_accum);
    if !p_end.is_finite() || !fk_total.is_finite() || !cv_total.is_finite() {
        return Err(SimError::NonFinite {
            t: cfg.dt * n_total as f64,
        });
    }
    let seg_time = |s: usize| {
        let n = if s == SINGLE_PATH_SEGMENTS - 1 {
            n_post - seg_len * (SINGLE_PATH_SEGMENTS - 1)
        } else {
            seg_len
        };
        n as f64
    };
    Ok(PathStats {
        lognorm_rate: (p_end - p_burn) / t,
        full_norm_rate: (log_full(&x, log_accum) - full_burn) / t,
        fk_average: fk_total / n_post as f64,
        fk_cv_average: (cv_total - (stepper.phase_potential(&x) - f_burn) / cfg.dt) / n_post as f64,
        lognorm_segments: ln_seg
            .iter()
            .enumerate()
            .map(|(s, v)| v / (seg_time(s) * cfg.dt))
            .collect(),
        fk_segments: fk_seg.iter().enumerate().map(|(s, v)| v / seg_time(s)).collect(),
        fk_cv_segments: cv_seg.iter().enumerate().map(|(s, v)| v / seg_time(s)).collect(),
    })
}

/// Growth rate of `ln|z|` averaged over paths from the default initial state.
pub fn estimate_lognorm(
    model: &Model,
    cfg: &IntegratorConfig,
    t_final: f64,
    burn_in: f64,
    n_paths: usize,
) -> Result<LyapunovEstimate, LyapunovError> {
    let init = AmplitudeState::default_initial(model);
    run_ensemble(model, cfg, &init, t_final, burn_in, n_paths)?.estimate(Method::Lognorm)
}

/// Time average of `𝒬` along the path, averaged over paths.
pub fn estimate_fk(
    model: &Model,
    cfg: &IntegratorConfig,
    t_final: f64,
    burn_in: f64,
    n_paths: usize,
) -> Result<LyapunovEstimate, LyapunovError> {
    let init = AmplitudeState::default_initial(model);
    run_ensemble(model, cfg, &init, t_final, burn_in, n_paths)?.estimate(Method::FkAverage)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub model_id: String,
    pub method: Method,
    pub q: f64,
    pub epsilon: f64,
    pub value: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub t: f64,
    pub dt: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn new(model_id: &str, est: &LyapunovEstimate, q: f64, cfg: &IntegratorConfig) -> Self {
        Self {
            model_id: model_id.to_string(),
            method: est.method,
            q,
            epsilon: cfg.epsilon,
            value: est.value,
            stderr: est.stderr,
            n_paths: est.n_paths,
            t: est.total_time,
            dt: cfg.dt,
            seed: cfg.rng_seed,
        }
    }
}

pub const RESULTS_HEADER: &str = "model_id,method,q,epsilon,value,stderr,n_paths,T,dt,seed";

pub fn write_results_csv<W: Write>(mut w: W, rows: &[ResultRow]) -> std::io::Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model_id,
            r.method.as_str(),
            r.q,
            r.epsilon,
            r.value,
            r.stderr,
            r.n_paths,
            r.t,
            r.dt,
            r.seed
        )?;
    }
    Ok(())
}
