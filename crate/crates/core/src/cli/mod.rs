//! Experiment driver behind the `spde-lyap` binary.
//!
//! A run reads an [`ExperimentConfig`] (JSON), applies command-line
//! overrides, writes `manifest.json` into the output directory and then
//! the result files of the chosen command. Files are written atomically.
//! Failures exit with code 2 (invalid input) or 3 (runtime or numerical
//! failure) and leave `error.json` next to the manifest.

pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::asymptotics::{self, AsymptoticsError, Normalization};
use crate::lyapunov::{run_ensemble, write_results_csv, LyapunovError, Method, ResultRow};
use crate::model::{Model, ModelDocument, ModelError};
use crate::oracle::{self, AsymptoticTarget, OracleError, OrderFit, OrderFitConfig};
use crate::simulate::{simulate_path, AmplitudeState, IntegratorConfig, Scheme, SimError};
use plot::{emit_plot, PlotError, PlotKind, Series};

/// Environment variable capping the worker count.
pub const THREADS_ENV: &str = "SPDE_LYAP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Validate,
    Simulate,
    Lyapunov,
    Asymptotics,
    Hierarchy,
    OrderFit,
    Sweep,
}

impl Command {
    fn default_epsilons(&self) -> Vec<f64> {
        match self {
            Command::OrderFit => vec![0.05, 0.08, 0.12, 0.2],
            Command::Asymptotics | Command::Sweep => vec![0.05, 0.1, 0.2],
            _ => vec![0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormalizationArg {
    Paper,
    ZeroMean,
}

impl From<NormalizationArg> for Normalization {
    fn from(n: NormalizationArg) -> Self {
        match n {
            NormalizationArg::Paper => Normalization::PaperConstantOne,
            NormalizationArg::ZeroMean => Normalization::ZeroMean,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spde-lyap", version, about = "Lyapunov exponents of Galerkin-truncated SPDEs near a Hopf point")]
pub struct Args {
    /// Command to run; overrides `command` in the config file.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Paths per estimate.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Comma-separated noise strengths.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub eps: Option<Vec<f64>>,
    /// Comma-separated bifurcation parameters.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub q: Option<Vec<f64>>,
    /// Also write SVG plots.
    #[arg(long)]
    pub plots: bool,
    /// Constant of the phase density correction.
    #[arg(long, value_enum)]
    pub normalization: Option<NormalizationArg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorSettings {
    /// Fixed step; when absent `dt = dt_factor ε²`.
    pub dt: Option<f64>,
    pub dt_factor: f64,
    pub scheme: Scheme,
    pub renorm_every: usize,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            dt: None,
            dt_factor: 0.1,
            scheme: Scheme::default(),
            renorm_every: IntegratorConfig::new(1.0, 0.1).renorm_every,
        }
    }
}

impl IntegratorSettings {
    fn config(&self, epsilon: f64, seed: u64) -> IntegratorConfig {
        IntegratorConfig::new(self.dt.unwrap_or(self.dt_factor * epsilon * epsilon), epsilon)
            .with_scheme(self.scheme)
            .with_seed(seed)
            .with_renorm_every(self.renorm_every)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSettings {
    pub methods: Vec<Method>,
    pub n_paths: usize,
    pub t_final: f64,
    pub burn_in: f64,
    /// Report λ on the original clock (times ε²) instead of rescaled time.
    pub original_time: bool,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            methods: vec![Method::Lognorm, Method::FkAverage],
            n_paths: 64,
            t_final: 100.0,
            burn_in: 10.0,
            original_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsymptoticSettings {
    pub grid: usize,
    pub normalization: Normalization,
}

impl Default for AsymptoticSettings {
    fn default() -> Self {
        Self {
            grid: asymptotics::DEFAULT_GRID,
            normalization: Normalization::ZeroMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    pub t_final: f64,
    /// Steps between trajectory samples.
    pub stride: usize,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            t_final: 10.0,
            stride: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Model document, relative paths resolved against the config file.
    pub model: PathBuf,
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default)]
    pub qs: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub plots: bool,
    #[serde(default)]
    pub integrator: IntegratorSettings,
    #[serde(default)]
    pub estimator: EstimatorSettings,
    #[serde(default)]
    pub asymptotics: AsymptoticSettings,
    #[serde(default)]
    pub order_fit: OrderFitConfig,
    #[serde(default)]
    pub simulate: SimulateSettings,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Asymptotics(#[from] AsymptoticsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model(_) => 2,
            CliError::Sim(SimError::InvalidConfig(_)) => 2,
            CliError::Lyapunov(LyapunovError::InvalidSetup(_)) => 2,
            CliError::Oracle(OracleError::InvalidRequest(_)) => 2,
            _ => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Model(ModelError::SpectrumViolation { .. }) => "spectrum_violation",
            CliError::Model(ModelError::LipschitzViolation { .. }) => "lipschitz_violation",
            CliError::Model(_) => "model",
            CliError::Sim(_) => "simulation",
            CliError::Lyapunov(_) => "estimator",
            CliError::Asymptotics(_) => "asymptotics",
            CliError::Oracle(OracleError::InsufficientSignal { .. }) => "insufficient_signal",
            CliError::Oracle(_) => "oracle",
            CliError::Plot(_) => "plot",
            CliError::Io { .. } => "io",
        }
    }

    /// Machine-readable description.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({
            "status": "error",
            "exit_code": self.exit_code(),
            "kind": self.kind(),
            "message": self.to_string(),
        });
        if let CliError::Model(ModelError::SpectrumViolation { assumption, index, .. }) = self {
            v["assumption"] = json!(assumption);
            v["index"] = json!(index);
        }
        v
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Config(format!("bad output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory");
    buf
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Config after overrides, with everything a run depends on made explicit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub command: Command,
    pub model: PathBuf,
    pub model_sha256: String,
    pub epsilons: Vec<f64>,
    pub qs: Vec<f64>,
    pub seed: u64,
    pub out: PathBuf,
    pub plots: bool,
    pub integrator: IntegratorSettings,
    pub estimator: EstimatorSettings,
    pub asymptotics: AsymptoticSettings,
    pub order_fit: OrderFitConfig,
    pub simulate: SimulateSettings,
}

impl ResolvedConfig {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }

    fn time_scale(&self, eps: f64) -> f64 {
        if self.estimator.original_time {
            eps * eps
        } else {
            1.0
        }
    }

    fn model_id(&self) -> String {
        self.model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
}

/// Applies overrides and checks the values a run needs.
pub fn resolve(cfg: ExperimentConfig, args: &Args, config_dir: &Path) -> Result<ResolvedConfig, CliError> {
    let command = args
        .command
        .or(cfg.command)
        .ok_or_else(|| CliError::Config("no command given".into()))?;
    let model = if cfg.model.is_absolute() {
        cfg.model.clone()
    } else {
        config_dir.join(&cfg.model)
    };
    let model_bytes = fs::read(&model).map_err(|e| CliError::Config(format!("cannot read model {}: {e}", model.display())))?;
    let epsilons = args
        .eps
        .clone()
        .or(cfg.epsilons)
        .unwrap_or_else(|| command.default_epsilons());
    if epsilons.is_empty() || epsilons.iter().any(|e| !(0.0..1.0).contains(e)) {
        return Err(CliError::Config(format!("epsilons must lie in [0, 1): {epsilons:?}")));
    }
    let qs = args.q.clone().or(cfg.qs).unwrap_or_default();
    if qs.iter().any(|q| !q.is_finite()) {
        return Err(CliError::Config("non-finite q".into()));
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let mut estimator = cfg.estimator;
    let mut order_fit = cfg.order_fit;
    order_fit.seed = args.seed.unwrap_or(order_fit.seed);
    if let Some(p) = args.paths {
        estimator.n_paths = p;
        order_fit.n_paths = p;
    }
    if estimator.methods.is_empty() {
        return Err(CliError::Config("estimator.methods is empty".into()));
    }
    let mut asym = cfg.asymptotics;
    if let Some(n) = args.normalization {
        asym.normalization = n.into();
    }
    Ok(ResolvedConfig {
        command,
        model,
        model_sha256: sha256_hex(&model_bytes),
        epsilons,
        qs,
        seed,
        out: args.out.clone().or(cfg.out).unwrap_or_else(|| PathBuf::from("out")),
        plots: args.plots || cfg.plots,
        integrator: cfg.integrator,
        estimator,
        asymptotics: asym,
        order_fit,
        simulate: cfg.simulate,
    })
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    status: &'static str,
    config_sha256: String,
    seed: u64,
    threads: usize,
    config: &'a ResolvedConfig,
    artifacts: Vec<String>,
    wall_seconds: Option<f64>,
}

/// Output directory with the artifact list of the run.
struct Outputs {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.dir.join(name), bytes)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }
}

fn fmt_tag(v: f64) -> String {
    format!("{v}")
}

/// Models for every `q` of the run (the document's own `q` when none given).
fn models(base: &Model, qs: &[f64]) -> Vec<Model> {
    if qs.is_empty() {
        vec![base.clone()]
    } else {
        qs.iter().map(|&q| base.with_q(q)).collect()
    }
}

/// Horizon and burn-in rounded up to whole steps.
fn horizon(t: f64, dt: f64) -> f64 {
    ((t / dt) - 1e-9).ceil().max(1.0) * dt
}

struct Cell {
    rows: Vec<ResultRow>,
}

fn lyapunov_cell(
    model: &Model,
    model_id: &str,
    eps: f64,
    cfg: &ResolvedConfig,
) -> Result<Cell, CliError> {
    let icfg = cfg.integrator.config(eps, cfg.seed);
    let t = horizon(cfg.estimator.t_final, icfg.dt);
    let burn = if cfg.estimator.burn_in > 0.0 {
        horizon(cfg.estimator.burn_in, icfg.dt)
    } else {
        0.0
    };
    let init = AmplitudeState::default_initial(model);
    let run = run_ensemble(model, &icfg, &init, t, burn, cfg.estimator.n_paths)?;
    let rows = cfg
        .estimator
        .methods
        .iter()
        .map(|&m| {
            let mut row = ResultRow::new(model_id, &run.estimate(m)?, model.q(), &icfg);
            row.value *= cfg.time_scale(eps);
            row.stderr *= cfg.time_scale(eps);
            Ok(row)
        })
        .collect::<Result<Vec<_>, LyapunovError>>()?;
    Ok(Cell { rows })
}

fn lambda_plot(rows: &[ResultRow], models: &[Model], cfg: &ResolvedConfig) -> Result<String, CliError> {
    let mut series = Vec::new();
    for m in models {
        for method in &cfg.estimator.methods {
            let pts: Vec<_> = rows
                .iter()
                .filter(|r| r.q == m.q() && r.method == *method)
                .map(|r| (r.epsilon, r.value, Some(r.stderr)))
                .collect();
            if !pts.is_empty() {
                series.push(Series::markers(&format!("{} q={}", method.as_str(), m.q()), pts));
            }
        }
        let hi = cfg.epsilons.iter().cloned().fold(0.0, f64::max);
        let terms = asymptotics::lambda_terms(m, cfg.asymptotics.grid, cfg.asymptotics.normalization)?;
        series.push(Series::line(
            &format!("asymptotic q={}", m.q()),
            (0..=50).map(|i| {
                let e = hi * i as f64 / 50.0;
                (e, terms.at(e) * cfg.time_scale(e))
            }),
        ));
    }
    Ok(emit_plot(&series, PlotKind::LambdaVsEps)?)
}

fn run_validate(model: &Model, out: &mut Outputs) -> Result<(), CliError> {
    let cs = model.critical();
    let summary = json!({
        "status": "valid",
        "num_modes": model.num_modes(),
        "num_channels": model.num_channels(),
        "operator_norm": model.operator_norm(),
        "b_c": cs.b_c,
        "a_q": cs.a_q,
        "b_q": cs.b_q,
        "q": model.q(),
        "decoupled": oracle::is_decoupled(model),
    });
    out.write("validation.json", serde_json::to_string_pretty(&summary).unwrap().as_bytes())
}

fn run_simulate(models: &[Model], cfg: &ResolvedConfig, out: &mut Outputs) -> Result<(), CliError> {
    for m in models {
        for &eps in &cfg.epsilons {
            let icfg = cfg.integrator.config(eps, cfg.seed);
            let t = horizon(cfg.simulate.t_final, icfg.dt);
            let path = simulate_path(m, &AmplitudeState::default_initial(m), &icfg, t, cfg.simulate.stride)?;
            let tag = format!("q{}_eps{}", fmt_tag(m.q()), fmt_tag(eps));
            out.write(&format!("trajectory_{tag}.csv"), &csv_bytes(|w| path.write_csv(w)))?;
            if cfg.plots && eps > 0.0 {
                let bins = 32;
                let mut hist = vec![0.0; bins];
                let width = 2.0 * std::f64::consts::PI / bins as f64;
                for s in &path.samples {
                    let b = ((s.phi.rem_euclid(2.0 * std::f64::consts::PI)) / width) as usize;
                    hist[b.min(bins - 1)] += 1.0;
                }
                let total = path.samples.len().max(1) as f64;
                let mut series = vec![Series::markers(
                    "simulated",
                    hist.iter()
                        .enumerate()
                        .map(|(i, c)| ((i as f64 + 0.5) * width, c / (total * width), None))
                        .collect(),
                )];
                if let Ok(p) = oracle::stationary_phase_density(m, eps, 128) {
                    series.push(Series::line(
                        "stationary (eta = 0)",
                        p.values().iter().enumerate().map(|(i, v)| (p.node(i), *v)),
                    ));
                }
                out.write(&format!("phi_density_{tag}.svg"), emit_plot(&series, PlotKind::PhiDensity)?.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn run_lyapunov(models: &[Model], cfg: &ResolvedConfig, out: &mut Outputs, with_asym: bool) -> Result<(), CliError> {
    let model_id = cfg.model_id();
    let cells: Vec<(usize, f64)> = (0..models.len())
        .flat_map(|i| cfg.epsilons.iter().map(move |&e| (i, e)))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(i, e)| lyapunov_cell(&models[i], &model_id, e, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<ResultRow> = results.into_iter().flat_map(|c| c.rows).collect();
    if with_asym {
        let mut buf = Vec::new();
        use std::io::Write;
        writeln!(buf, "{},lambda_order0,lambda_asym", crate::lyapunov::RESULTS_HEADER).unwrap();
        for r in &rows {
            let m = models.iter().find(|m| m.q() == r.q).expect("model for row");
            let terms = asymptotics::lambda_terms(m, cfg.asymptotics.grid, cfg.asymptotics.normalization)?;
            writeln!(
                buf,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.model_id,
                r.method.as_str(),
                r.q,
                r.epsilon,
                r.value,
                r.stderr,
                r.n_paths,
                r.t,
                r.dt,
                r.seed,
                terms.order0 * cfg.time_scale(r.epsilon),
                terms.at(r.epsilon) * cfg.time_scale(r.epsilon)
            )
            .unwrap();
        }
        out.write("sweep.csv", &buf)?;
    } else {
        out.write("results.csv", &csv_bytes(|w| write_results_csv(w, &rows)))?;
    }
    if cfg.plots {
        out.write(PlotKind::LambdaVsEps.file_name(), lambda_plot(&rows, models, cfg)?.as_bytes())?;
    }
    Ok(())
}

fn run_asymptotics(models: &[Model], cfg: &ResolvedConfig, out: &mut Outputs) -> Result<(), CliError> {
    let n = cfg.asymptotics.grid;
    let mut rows = Vec::new();
    for m in models {
        for &e in &cfg.epsilons {
            rows.push(asymptotics::lambda_row(m, e, n)?);
        }
    }
    out.write("lambda_table.csv", &csv_bytes(|w| asymptotics::write_lambda_table(w, &rows)))?;
    // κ and χ do not depend on q
    let m = &models[0];
    let kappa = asymptotics::compute_kappa(m, n, cfg.asymptotics.normalization)?;
    out.write("kappa.csv", &csv_bytes(|w| asymptotics::write_kappa_csv(w, &kappa)))?;
    for (k, chi) in asymptotics::compute_chi(m, n)? {
        out.write(&format!("chi_{k}.csv"), &csv_bytes(|w| asymptotics::write_chi_csv(w, &chi)))?;
    }
    if cfg.plots {
        let s = Series::line("kappa", kappa.values().iter().enumerate().map(|(i, v)| (kappa.node(i), *v)));
        out.write(PlotKind::KappaProfile.file_name(), emit_plot(&[s], PlotKind::KappaProfile)?.as_bytes())?;
    }
    Ok(())
}

fn run_hierarchy(models: &[Model], cfg: &ResolvedConfig, out: &mut Outputs) -> Result<(), CliError> {
    let m = &models[0];
    let exp = asymptotics::MeasureExpansion::build(m, cfg.asymptotics.grid, cfg.asymptotics.normalization)?;
    let report = asymptotics::check_hierarchy(m, &exp, &asymptotics::default_test_family(m))?;
    let mut buf = b"function,order0,order1\n".to_vec();
    for r in &report.residuals {
        let f = &r.function;
        let name = format!(
            "{:?}{}{:?}",
            f.trig,
            if f.real_part { "*re" } else { "*" },
            f.monomial
        )
        .replace(',', ";");
        buf.extend_from_slice(format!("{name},{},{}\n", r.order0, r.order1).as_bytes());
    }
    out.write("hierarchy.csv", &buf)?;
    let summary = json!({ "max_residual": report.max_residual(), "functions": report.residuals.len() });
    out.write("hierarchy_summary.json", serde_json::to_string_pretty(&summary).unwrap().as_bytes())
}

fn fit_plot(fit: &OrderFit) -> Result<String, CliError> {
    let pts: Vec<_> = fit
        .points
        .iter()
        .filter(|p| p.residual > 0.0)
        .map(|p| (p.epsilon, p.residual, None))
        .collect();
    let (mx, my) = {
        let n = fit.epsilons.len() as f64;
        (
            fit.epsilons.iter().map(|e| e.ln()).sum::<f64>() / n,
            fit.residuals.iter().map(|r| r.ln()).sum::<f64>() / n,
        )
    };
    let lo = fit.epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = fit.epsilons.iter().cloned().fold(0.0, f64::max);
    let line = Series::line(
        &format!("slope {:.2}", fit.slope),
        [lo, hi].map(|e| (e, (my + fit.slope * (e.ln() - mx)).exp())),
    );
    Ok(emit_plot(&[Series::markers("residual", pts), line], PlotKind::ResidualLoglog)?)
}

fn run_order_fit(models: &[Model], cfg: &ResolvedConfig, out: &mut Outputs) -> Result<String, CliError> {
    let m = &models[0];
    let ocfg = cfg.order_fit;
    oracle::check_eps_list(&cfg.epsilons)?;
    let estimates = cfg
        .epsilons
        .iter()
        .map(|&e| oracle::mc_estimate(m, e, &ocfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut lines = Vec::new();
    let mut failure = None;
    // the control is the order-0 truncation; it separates an order-2 fit from a mere ε² trend
    for (target, name) in [(ocfg.target, "order_fit"), (AsymptoticTarget::Order0, "order_fit_control")] {
        match oracle::fit_from_estimates(m, &estimates, target, ocfg.grid) {
            Ok(fit) => {
                out.write(&format!("{name}.csv"), &csv_bytes(|w| oracle::write_order_fit_csv(w, &fit.points)))?;
                let line = format!("{name}: {}", oracle::order_fit_summary(&fit));
                lines.push(line);
                out.write(&format!("{name}_summary.json"), serde_json::to_string_pretty(&fit).unwrap().as_bytes())?;
                if cfg.plots && name == "order_fit" {
                    out.write(PlotKind::ResidualLoglog.file_name(), fit_plot(&fit)?.as_bytes())?;
                }
            }
            Err(OracleError::InsufficientSignal { admissible, mc_floor, points }) => {
                out.write(&format!("{name}.csv"), &csv_bytes(|w| oracle::write_order_fit_csv(w, &points)))?;
                if name == "order_fit" {
                    failure = Some(OracleError::InsufficientSignal { admissible, mc_floor, points });
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(lines.join("\n"))
}

/// Sets the global worker count from [`THREADS_ENV`] (once per process).
pub fn init_threads() -> usize {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    rayon::current_num_threads()
}

/// Runs a resolved configuration; returns the summary printed on stdout.
pub fn execute(cfg: &ResolvedConfig) -> Result<String, CliError> {
    let start = Instant::now();
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let threads = rayon::current_num_threads();
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        status: "running",
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        threads,
        config: cfg,
        artifacts: Vec::new(),
        wall_seconds: None,
    };
    let manifest_path = cfg.out.join("manifest.json");
    write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;
    let _ = fs::remove_file(cfg.out.join("error.json"));
    let mut out = Outputs {
        dir: cfg.out.clone(),
        artifacts: Vec::new(),
    };
    let result = (|| -> Result<String, CliError> {
        let doc = ModelDocument::from_path(&cfg.model)?;
        let base = doc.build()?;
        let models = models(&base, &cfg.qs);
        match cfg.command {
            Command::Validate => run_validate(&base, &mut out).map(|_| "model valid".to_string()),
            Command::Simulate => run_simulate(&models, cfg, &mut out).map(|_| String::new()),
            Command::Lyapunov => run_lyapunov(&models, cfg, &mut out, false).map(|_| String::new()),
            Command::Sweep => run_lyapunov(&models, cfg, &mut out, true).map(|_| String::new()),
            Command::Asymptotics => run_asymptotics(&models, cfg, &mut out).map(|_| String::new()),
            Command::Hierarchy => run_hierarchy(&models, cfg, &mut out).map(|_| String::new()),
            Command::OrderFit => run_order_fit(&models, cfg, &mut out),
        }
    })();
    manifest.artifacts = out.artifacts;
    manifest.wall_seconds = Some(start.elapsed().as_secs_f64());
    manifest.status = if result.is_ok() { "ok" } else { "failed" };
    write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap().as_bytes())?;
    if let Err(e) = &result {
        write_atomic(&cfg.out.join("error.json"), serde_json::to_string_pretty(&e.to_json()).unwrap().as_bytes())?;
    }
    result
}

/// Entry point of the binary; returns the process exit code.
pub fn run(args: Args) -> i32 {
    init_threads();
    let outcome = load_config(&args.config).and_then(|c| {
        let dir = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
        resolve(c, &args, &dir)
    });
    let resolved = match outcome {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}", e.to_json());
            return e.exit_code();
        }
    };
    match execute(&resolved) {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
