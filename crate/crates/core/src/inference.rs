//! Posterior mode search and Laplace-approximation credible intervals.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{
    log_posterior, numerical_gradient, numerical_hessian, Cohort, DEFAULT_GRADIENT_STEP,
    DEFAULT_HESSIAN_STEP,
};
use crate::model::{
    decode, force_for_external_prob, rate_for_sitp, EpiParams, FeatureConfig, ModelParams, Role,
};
use crate::optim::{minimize, BfgsOptions};

/// Household sizes whose SITP is reported.
pub const REPORTED_SIZES: std::ops::RangeInclusive<usize> = 2..=6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub restarts: usize,
    /// Convergence threshold on the gradient norm of the negative
    /// log-posterior divided by the number of households.
    pub tol: f64,
    pub prior_sd: f64,
    pub ci_samples: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Standard deviation of the random restart points, drawn around zero.
    pub restart_sd: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 8,
            tol: 1e-6,
            prior_sd: 1.0,
            ci_samples: 100_000,
            seed: 0,
            max_iter: 500,
            restart_sd: 0.5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!(
                "tol = {} must be positive",
                self.tol
            )));
        }
        if !(self.prior_sd.is_finite() && self.prior_sd > 0.0) {
            return Err(Error::Config(format!(
                "prior_sd = {} must be positive",
                self.prior_sd
            )));
        }
        if self.ci_samples < 2 {
            return Err(Error::Config("ci_samples must be at least 2".into()));
        }
        if !(self.restart_sd >= 0.0) {
            return Err(Error::Config("restart_sd must be non-negative".into()));
        }
        Ok(())
    }
}

/// Outcome of one optimiser run.
#[derive(Debug, Clone, Serialize)]
pub struct RestartTrace {
    pub index: usize,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    /// Negative log-posterior at `end`.
    pub objective: f64,
    /// Gradient norm of the per-household mean objective, the quantity compared with `tol`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub message: String,
    pub history: Vec<f64>,
}

/// A reported quantity with its Laplace credible interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Interval {
    /// `baseline`, `alpha`, `beta` or `gamma`.
    pub group: String,
    pub label: String,
    /// Transform of the posterior mode.
    pub point: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub theta_map: ModelParams,
    pub epi_map: EpiParams,
    pub log_posterior: f64,
    pub covariance: Vec<Vec<f64>>,
    pub intervals: Vec<Interval>,
    pub best_restart: usize,
    pub restarts: Vec<RestartTrace>,
}

impl FitResult {
    pub fn n_converged(&self) -> usize {
        self.restarts.iter().filter(|r| r.converged).count()
    }
}

/// Start point from the observed positivity: Λ matching the overall
/// positive fraction, λ for a 30% SITP in pairs, ϑ = 1, η = 0, no effects.
pub fn initial_guess(cohort: &Cohort) -> Vec<f64> {
    let k = cohort.feature_config().n_params();
    let people = cohort.n_participants().max(1) as f64;
    let positives: usize = cohort.households().iter().map(|h| h.n_positive()).sum();
    let frac = (positives as f64 / people).clamp(1e-4, 0.5);
    let mut theta = vec![0.0; k];
    theta[0] = force_for_external_prob(frac).ln();
    theta[1] = rate_for_sitp(0.3, 2, 1.0, 0.0).ln();
    theta
}

/// Restart 0 begins at the data-driven guess; the others at `N(0, restart_sd²)` draws.
fn restart_start(base: &[f64], index: usize, cfg: &FitConfig) -> Vec<f64> {
    if index == 0 {
        return base.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    (0..base.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.restart_sd * z
        })
        .collect()
}

fn format_traces(traces: &[RestartTrace]) -> String {
    traces
        .iter()
        .map(|t| {
            format!(
                "  restart {}: objective {:.6}, |grad| {:.3e}, {} iterations, {}",
                t.index, t.objective, t.grad_norm, t.iterations, t.message
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Maximises the log-posterior from several starts and attaches the Laplace
/// covariance and credible intervals of the best converged run.
pub fn fit(cohort: &Cohort, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    let features = cohort.feature_config();
    let objective = |x: &[f64]| -> Result<f64> {
        Ok(-log_posterior(
            cohort,
            &ModelParams::new(x.to_vec())?,
            cfg.prior_sd,
        )?)
    };
    // The optimiser sees the per-household mean so that `tol` does not have to
    // shrink with cohort size to stay above finite-difference rounding noise.
    let scale = cohort.len().max(1) as f64;
    let scaled = |x: &[f64]| -> Result<f64> { Ok(objective(x)? / scale) };
    let gradient = |x: &[f64]| numerical_gradient(scaled, x, DEFAULT_GRADIENT_STEP);
    let opts = BfgsOptions {
        grad_tol: cfg.tol,
        max_iter: cfg.max_iter,
        ..BfgsOptions::default()
    };
    let base = initial_guess(cohort);

    let traces: Vec<RestartTrace> = (0..cfg.restarts)
        .into_par_iter()
        .map(|index| {
            let start = restart_start(&base, index, cfg);
            match minimize(scaled, gradient, &start, &opts) {
                Ok(m) => RestartTrace {
                    index,
                    start,
                    end: m.x,
                    objective: m.value * scale,
                    grad_norm: m.grad_norm,
                    iterations: m.iterations,
                    converged: m.converged,
                    message: m.message,
                    history: m.history.iter().map(|v| v * scale).collect(),
                },
                Err(e) => RestartTrace {
                    index,
                    end: start.clone(),
                    start,
                    objective: f64::INFINITY,
                    grad_norm: f64::INFINITY,
                    iterations: 0,
                    converged: false,
                    message: e.to_string(),
                    history: Vec::new(),
                },
            }
        })
        .collect();
    for t in &traces {
        log::info!(
            "restart {}: objective {:.6}, |grad| {:.2e}, {} iterations, {}",
            t.index,
            t.objective,
            t.grad_norm,
            t.iterations,
            t.message
        );
    }

    let best = traces
        .iter()
        .filter(|t| t.converged)
        .min_by(|a, b| {
            a.objective
                .total_cmp(&b.objective)
                .then(a.index.cmp(&b.index))
        })
        .ok_or_else(|| Error::FitFailed {
            restarts: traces.len(),
            trace: format_traces(&traces),
        })?;
    let theta_map = ModelParams::new(best.end.clone())?;
    let covariance = laplace_covariance(objective, theta_map.as_slice())?;
    let intervals = report_intervals(&theta_map, &covariance, features, cfg.ci_samples, cfg.seed)?;
    Ok(FitResult {
        epi_map: decode(&theta_map, features)?,
        log_posterior: -best.objective,
        best_restart: best.index,
        theta_map,
        covariance,
        intervals,
        restarts: traces,
    })
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Inverse of the finite-difference Hessian of `neg_log_post` at `mode`.
pub fn laplace_covariance<F>(neg_log_post: F, mode: &[f64]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let k = mode.len();
    let h = numerical_hessian(neg_log_post, mode, DEFAULT_HESSIAN_STEP)?;
    let m = DMatrix::from_fn(k, k, |i, j| 0.5 * (h[i][j] + h[j][i]));
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::IndefiniteHessian {
            min_eigenvalue: min_eigenvalue(&m),
        })?;
    let inv = chol.inverse();
    Ok((0..k)
        .map(|i| (0..k).map(|j| 0.5 * (inv[(i, j)] + inv[(j, i)])).collect())
        .collect())
}

/// Display name for a feature in result tables.
pub fn feature_label(name: &str) -> &str {
    match name {
        "age_2_11" => "2-11",
        "age_12_16" => "12-16",
        "age_0_16" => "16 and under",
        "adult" => "Adult",
        "patient_facing" => "PF",
        "pattern_or_n_s" => "OR+N+S",
        "pattern_or_n" => "OR+N",
        "pattern_other" => "CT-oth",
        other => other,
    }
}

/// `(group, label)` of every reported quantity, in output order.
pub fn interval_labels(cfg: &FeatureConfig) -> Vec<(String, String)> {
    let mut out = vec![("baseline".to_string(), "1-q".to_string())];
    out.extend(REPORTED_SIZES.map(|n| ("baseline".to_string(), format!("p_{n}"))));
    for role in Role::ALL {
        for name in cfg.role_features(role) {
            out.push((role.symbol().to_string(), feature_label(name).to_string()));
        }
    }
    out
}

/// Reported quantities for one parameter vector: external infection
/// probability and SITPs in percent, then odds-style multipliers `exp(coef)`.
pub fn reported_quantities(epi: &EpiParams) -> Vec<f64> {
    let mut out = vec![-100.0 * (-epi.external_force).exp_m1()];
    out.extend(REPORTED_SIZES.map(|n| 100.0 * epi.sitp(n)));
    for role in Role::ALL {
        out.extend(epi.coefficients(role).iter().map(|c| c.exp()));
    }
    out
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Samples `N(mode, covariance)`, maps every draw through
/// [`reported_quantities`] and summarises with the median and the central
/// 95% interval. The point estimate is the transformed mode, kept inside
/// its interval.
pub fn report_intervals(
    mode: &ModelParams,
    covariance: &[Vec<f64>],
    cfg: &FeatureConfig,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Interval>> {
    let k = mode.len();
    if covariance.len() != k || covariance.iter().any(|r| r.len() != k) {
        return Err(Error::Config(
            "covariance shape does not match the parameter vector".into(),
        ));
    }
    if n_samples < 2 {
        return Err(Error::Config(
            "at least two samples are needed for intervals".into(),
        ));
    }
    let cov = DMatrix::from_fn(k, k, |i, j| 0.5 * (covariance[i][j] + covariance[j][i]));
    let eig = SymmetricEigen::new(cov);
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
    let centre = DVector::from_column_slice(mode.as_slice());

    let point = reported_quantities(&decode(mode, cfg)?);
    let n_out = point.len();
    let mut columns = vec![Vec::with_capacity(n_samples); n_out];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    for _ in 0..n_samples {
        let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
        let draw = &centre + &root * z;
        let theta = ModelParams::new(draw.as_slice().to_vec())?;
        for (col, v) in columns
            .iter_mut()
            .zip(reported_quantities(&decode(&theta, cfg)?))
        {
            col.push(v);
        }
    }

    Ok(interval_labels(cfg)
        .into_iter()
        .zip(columns)
        .zip(point)
        .map(|(((group, label), mut col), point)| {
            col.sort_by(f64::total_cmp);
            let lower = quantile(&col, 0.025);
            let upper = quantile(&col, 0.975);
            Interval {
                group,
                label,
                point: point.clamp(lower, upper),
                median: quantile(&col, 0.5),
                lower,
                upper,
            }
        })
        .collect())
}
