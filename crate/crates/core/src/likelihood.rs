//! Cohort log-likelihood, log-posterior and finite-difference derivatives.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::finalsize::solve_rows;
use crate::model::{decode, FeatureConfig, FeatureRow, Household, ModelParams};

pub const DEFAULT_GRADIENT_STEP: f64 = 1e-5;
pub const DEFAULT_HESSIAN_STEP: f64 = 1e-4;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Households sharing one (canonically ordered) feature matrix.
#[derive(Debug, Clone)]
struct PatternGroup {
    rows: Vec<FeatureRow>,
    /// Id of the first household seen with this pattern, for error messages.
    representative: String,
    /// Canonical outcome mask and number of households observing it.
    outcomes: Vec<(u32, u64)>,
}

/// Sorts participants by feature row (ties by outcome bit) and returns the
/// sorted rows with the outcome mask permuted to match. Identical rows are
/// exchangeable, so this does not change the household's probability.
fn canonicalise(hh: &Household) -> (Vec<FeatureRow>, u32) {
    let mut people: Vec<(FeatureRow, u32)> = hh
        .rows()
        .iter()
        .enumerate()
        .map(|(i, &r)| (r, hh.outcome() >> i & 1))
        .collect();
    people.sort_unstable();
    let outcome = people
        .iter()
        .enumerate()
        .fold(0u32, |acc, (i, &(_, y))| acc | y << i);
    (people.into_iter().map(|(r, _)| r).collect(), outcome)
}

/// A set of independent households under one feature configuration.
///
/// Households are indexed once at construction by their feature matrix so
/// that every distinct matrix is solved a single time per evaluation.
#[derive(Debug, Clone)]
pub struct Cohort {
    households: Vec<Household>,
    feature_config: FeatureConfig,
    groups: Vec<PatternGroup>,
}

impl Cohort {
    pub fn new(households: Vec<Household>, feature_config: FeatureConfig) -> Result<Self> {
        for hh in &households {
            hh.check_features(&feature_config)?;
        }
        let mut index: HashMap<Vec<FeatureRow>, usize> = HashMap::new();
        let mut groups: Vec<PatternGroup> = Vec::new();
        let mut outcome_index: Vec<HashMap<u32, usize>> = Vec::new();
        for hh in &households {
            let (rows, y) = canonicalise(hh);
            let g = *index.entry(rows.clone()).or_insert_with(|| {
                groups.push(PatternGroup {
                    rows,
                    representative: hh.id().to_string(),
                    outcomes: Vec::new(),
                });
                outcome_index.push(HashMap::new());
                groups.len() - 1
            });
            let group = &mut groups[g];
            let slot = *outcome_index[g].entry(y).or_insert_with(|| {
                group.outcomes.push((y, 0));
                group.outcomes.len() - 1
            });
            group.outcomes[slot].1 += 1;
        }
        Ok(Cohort {
            households,
            feature_config,
            groups,
        })
    }

    pub fn empty(feature_config: FeatureConfig) -> Self {
        Cohort {
            households: Vec::new(),
            feature_config,
            groups: Vec::new(),
        }
    }

    pub fn households(&self) -> &[Household] {
        &self.households
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.feature_config
    }

    pub fn len(&self) -> usize {
        self.households.len()
    }

    pub fn is_empty(&self) -> bool {
        self.households.is_empty()
    }

    /// Number of distinct feature matrices, i.e. solves per evaluation.
    pub fn n_patterns(&self) -> usize {
        self.groups.len()
    }

    pub fn n_participants(&self) -> usize {
        self.households.iter().map(Household::size).sum()
    }

    /// This cohort followed by `other`'s households.
    pub fn concat(&self, other: &Cohort) -> Result<Cohort> {
        if self.feature_config != other.feature_config {
            return Err(Error::Config(
                "cohorts use different feature configurations".into(),
            ));
        }
        let mut hh = self.households.clone();
        hh.extend(other.households.iter().cloned());
        Cohort::new(hh, self.feature_config.clone())
    }
}

/// Neumaier-compensated sum; the order of `values` fixes the result.
pub(crate) fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Σ_a ln P_{y_a}(X_a, θ).
pub fn log_likelihood(cohort: &Cohort, theta: &ModelParams) -> Result<f64> {
    let cfg = &cohort.feature_config;
    let epi = decode(theta, cfg)?;
    let terms = cohort
        .groups
        .par_iter()
        .map(|g| {
            let solved =
                solve_rows(&g.rows, &epi, cfg).map_err(|detail| Error::NumericalInstability {
                    household: g.representative.clone(),
                    detail,
                    theta: theta.as_slice().to_vec(),
                })?;
            Ok(stable_sum(
                g.outcomes
                    .iter()
                    .map(|&(y, count)| count as f64 * solved.log_prob(y)),
            ))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(stable_sum(terms))
}

/// Independent `N(0, sd²)` log-density summed over the natural parameters.
pub fn log_prior(theta: &ModelParams, prior_sd: f64) -> f64 {
    let norm = -LN_SQRT_2PI - prior_sd.ln();
    stable_sum(
        theta
            .as_slice()
            .iter()
            .map(|t| norm - 0.5 * (t / prior_sd).powi(2)),
    )
}

pub fn log_posterior(cohort: &Cohort, theta: &ModelParams, prior_sd: f64) -> Result<f64> {
    if !(prior_sd.is_finite() && prior_sd > 0.0) {
        return Err(Error::Config(format!(
            "prior_sd = {prior_sd} must be positive"
        )));
    }
    Ok(log_likelihood(cohort, theta)? + log_prior(theta, prior_sd))
}

/// Central-difference gradient `(f(θ + h e_k) − f(θ − h e_k)) / 2h`.
pub fn numerical_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        x[k] = theta[k] + h;
        let up = f(&x)?;
        x[k] = theta[k] - h;
        let down = f(&x)?;
        x[k] = theta[k];
        let g = (up - down) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                coordinate: k,
                value: if up.is_finite() { down } else { up },
            });
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Central-difference Hessian, symmetric by construction.
pub fn numerical_hessian<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let k = theta.len();
    let mut x = theta.to_vec();
    let f0 = f(&x)?;
    let mut hess = vec![vec![0.0; k]; k];
    let check = |v: f64, coordinate: usize| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFiniteGradient {
                coordinate,
                value: v,
            })
        }
    };
    for a in 0..k {
        x[a] = theta[a] + h;
        let up = f(&x)?;
        x[a] = theta[a] - h;
        let down = f(&x)?;
        x[a] = theta[a];
        hess[a][a] = check((up - 2.0 * f0 + down) / (h * h), a)?;
        for b in 0..a {
            let mut corner = |sa: f64, sb: f64| {
                x[a] = theta[a] + sa * h;
                x[b] = theta[b] + sb * h;
                let v = f(&x);
                x[a] = theta[a];
                x[b] = theta[b];
                v
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * h * h);
            let v = check(v, a)?;
            hess[a][b] = v;
            hess[b][a] = v;
        }
    }
    Ok(hess)
}
