//! Households, feature configuration and the natural parameter space.
//!
//! The natural parameter vector is laid out as
//! `(log Λ, log λ, log ϑ, tan(πη/4), α…, β…, γ…)`; everything else in the
//! crate works either on that vector ([`ModelParams`]) or on its decoded,
//! interpretable form ([`EpiParams`]).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finalsize::{log_phi, phi};

pub const MAX_HOUSEHOLD_SIZE: usize = 6;

/// Number of natural parameters that do not depend on features.
pub const BASE_PARAMS: usize = 4;

/// Hard bound on the household-size exponent, |η| < 2.
pub const ETA_BOUND: f64 = 2.0;

const MAX_FEATURES: usize = 64;

/// Which linear predictor a coefficient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    External,
    Susceptibility,
    Transmissibility,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::External, Role::Susceptibility, Role::Transmissibility];

    fn index(self) -> usize {
        match self {
            Role::External => 0,
            Role::Susceptibility => 1,
            Role::Transmissibility => 2,
        }
    }

    /// Greek-letter prefix used in reports.
    pub fn symbol(self) -> &'static str {
        match self {
            Role::External => "alpha",
            Role::Susceptibility => "beta",
            Role::Transmissibility => "gamma",
        }
    }
}

/// One participant's binary feature vector, packed into a bitmask whose bit
/// `k` is feature column `k` of the owning [`FeatureConfig`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub struct FeatureRow(u64);

impl FeatureRow {
    pub const EMPTY: FeatureRow = FeatureRow(0);

    pub fn from_mask(mask: u64) -> Self {
        FeatureRow(mask)
    }

    /// Builds a row from 0/1 entries; anything else is rejected.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.len() > MAX_FEATURES {
            return Err(Error::Config(format!(
                "feature row has {} columns, at most {MAX_FEATURES} supported",
                bits.len()
            )));
        }
        let mut mask = 0u64;
        for (k, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => mask |= 1 << k,
                other => {
                    return Err(Error::Domain(format!(
                        "feature column {k} has value {other}; only 0/1 features are supported"
                    )))
                }
            }
        }
        Ok(FeatureRow(mask))
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn get(self, col: usize) -> bool {
        col < MAX_FEATURES && self.0 >> col & 1 == 1
    }

    pub fn with(self, col: usize, on: bool) -> Self {
        if on {
            FeatureRow(self.0 | 1 << col)
        } else {
            FeatureRow(self.0 & !(1 << col))
        }
    }

    pub fn to_bits(self, width: usize) -> Vec<u8> {
        (0..width).map(|k| self.get(k) as u8).collect()
    }
}

/// On-disk shape of a feature configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureConfigFile {
    #[serde(default)]
    schema_version: Option<u32>,
    /// Column order of the feature matrix; defaults to the ordered union of
    /// the three role lists.
    #[serde(default)]
    features: Option<Vec<String>>,
    #[serde(default)]
    external: Vec<String>,
    #[serde(default)]
    susceptibility: Vec<String>,
    #[serde(default)]
    transmissibility: Vec<String>,
}

/// Feature columns and their assignment to the three linear predictors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FeatureConfigFile", into = "FeatureConfigFile")]
pub struct FeatureConfig {
    features: Vec<String>,
    roles: [Vec<String>; 3],
    columns: [Vec<usize>; 3],
}

impl From<FeatureConfig> for FeatureConfigFile {
    fn from(cfg: FeatureConfig) -> Self {
        let [external, susceptibility, transmissibility] = cfg.roles;
        FeatureConfigFile {
            schema_version: Some(crate::SCHEMA_VERSION),
            features: Some(cfg.features),
            external,
            susceptibility,
            transmissibility,
        }
    }
}

impl TryFrom<FeatureConfigFile> for FeatureConfig {
    type Error = Error;

    fn try_from(file: FeatureConfigFile) -> Result<Self> {
        if let Some(v) = file.schema_version {
            if v != crate::SCHEMA_VERSION {
                return Err(Error::Config(format!(
                    "feature config schema_version {v} is not supported (expected {})",
                    crate::SCHEMA_VERSION
                )));
            }
        }
        FeatureConfig::new(
            file.features,
            file.external,
            file.susceptibility,
            file.transmissibility,
        )
    }
}

fn check_unique(list: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for name in list {
        if name.is_empty() {
            return Err(Error::Config(format!("empty feature name in {what}")));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Config(format!(
                "feature '{name}' listed twice in {what}"
            )));
        }
    }
    Ok(())
}

impl FeatureConfig {
    pub fn new(
        features: Option<Vec<String>>,
        external: Vec<String>,
        susceptibility: Vec<String>,
        transmissibility: Vec<String>,
    ) -> Result<Self> {
        check_unique(&external, "external")?;
        check_unique(&susceptibility, "susceptibility")?;
        check_unique(&transmissibility, "transmissibility")?;

        let features = match features {
            Some(f) => f,
            None => {
                let mut out: Vec<String> = Vec::new();
                for name in external
                    .iter()
                    .chain(&susceptibility)
                    .chain(&transmissibility)
                {
                    if !out.contains(name) {
                        out.push(name.clone());
                    }
                }
                out
            }
        };
        check_unique(&features, "features")?;
        if features.len() > MAX_FEATURES {
            return Err(Error::Config(format!(
                "{} feature columns configured, at most {MAX_FEATURES} supported",
                features.len()
            )));
        }

        let roles = [external, susceptibility, transmissibility];
        let mut columns: [Vec<usize>; 3] = Default::default();
        for (role, names) in Role::ALL.iter().zip(&roles) {
            for name in names {
                let col = features.iter().position(|f| f == name).ok_or_else(|| {
                    Error::Config(format!(
                        "{} feature '{name}' is not one of the configured feature columns {features:?}",
                        role.symbol()
                    ))
                })?;
                columns[role.index()].push(col);
            }
        }
        Ok(FeatureConfig {
            features,
            roles,
            columns,
        })
    }

    /// No covariates: κ = 4.
    pub fn empty() -> Self {
        FeatureConfig::new(Some(Vec::new()), Vec::new(), Vec::new(), Vec::new())
            .expect("empty config is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: FeatureConfigFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("feature config: {e}")))?;
        FeatureConfig::try_from(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&FeatureConfigFile::from(self.clone())).expect("config serialises")
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f == name)
    }

    pub fn role_features(&self, role: Role) -> &[String] {
        &self.roles[role.index()]
    }

    pub fn role_columns(&self, role: Role) -> &[usize] {
        &self.columns[role.index()]
    }

    /// κ = 4 + |α| + |β| + |γ|.
    pub fn n_params(&self) -> usize {
        BASE_PARAMS + self.roles.iter().map(Vec::len).sum::<usize>()
    }

    /// Linear predictor `coeffs · x` for one role.
    pub fn dot(&self, role: Role, coeffs: &[f64], row: FeatureRow) -> f64 {
        self.columns[role.index()]
            .iter()
            .zip(coeffs)
            .filter(|(&col, _)| row.get(col))
            .map(|(_, c)| c)
            .sum()
    }

    /// Offsets of the α, β and γ blocks inside the natural parameter vector.
    pub fn block_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let a = BASE_PARAMS;
        let b = a + self.roles[0].len();
        let c = b + self.roles[1].len();
        let d = c + self.roles[2].len();
        [a..b, b..c, c..d]
    }
}

impl Default for FeatureConfig {
    /// Age bands, patient-facing work and gene-pattern features.
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        FeatureConfig::new(
            Some(s(&[
                "age_2_11",
                "age_12_16",
                "patient_facing",
                "pattern_or_n",
                "pattern_other",
            ])),
            s(&["age_2_11", "age_12_16", "patient_facing"]),
            s(&["age_2_11", "age_12_16"]),
            s(&["age_2_11", "age_12_16", "pattern_or_n", "pattern_other"]),
        )
        .expect("default config is valid")
    }
}

/// A household of participants with their features and tranche outcome.
///
/// Outcomes are stored as a little-endian bitmask: participant `i` positive
/// ⇔ bit `i` set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Household {
    id: String,
    rows: Vec<FeatureRow>,
    outcome: u32,
}

impl Household {
    pub fn new(id: impl Into<String>, rows: Vec<FeatureRow>, outcome: u32) -> Result<Self> {
        let id = id.into();
        let n = rows.len();
        if n == 0 || n > MAX_HOUSEHOLD_SIZE {
            return Err(Error::Domain(format!(
                "household {id} has {n} participants; sizes 1..={MAX_HOUSEHOLD_SIZE} are supported"
            )));
        }
        if outcome >> n != 0 {
            return Err(Error::Domain(format!(
                "household {id}: outcome mask {outcome:#b} has bits beyond its {n} participants"
            )));
        }
        Ok(Household { id, rows, outcome })
    }

    /// Builds from a 0/1 outcome vector.
    pub fn from_outcomes(id: impl Into<String>, rows: Vec<FeatureRow>, y: &[u8]) -> Result<Self> {
        let id = id.into();
        if y.len() != rows.len() {
            return Err(Error::Domain(format!(
                "household {id}: {} outcomes for {} participants",
                y.len(),
                rows.len()
            )));
        }
        let mut mask = 0u32;
        for (i, &v) in y.iter().enumerate() {
            match v {
                0 => {}
                1 => mask |= 1 << i,
                other => {
                    return Err(Error::Domain(format!(
                        "household {id}: outcome value {other}"
                    )));
                }
            }
        }
        Household::new(id, rows, mask)
    }

    /// A household with no covariates.
    pub fn plain(id: impl Into<String>, size: usize, outcome: u32) -> Result<Self> {
        Household::new(id, vec![FeatureRow::EMPTY; size], outcome)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn outcome(&self) -> u32 {
        self.outcome
    }

    pub fn outcome_bits(&self) -> Vec<u8> {
        (0..self.size())
            .map(|i| (self.outcome >> i & 1) as u8)
            .collect()
    }

    pub fn n_positive(&self) -> usize {
        self.outcome.count_ones() as usize
    }

    pub(crate) fn check_features(&self, cfg: &FeatureConfig) -> Result<()> {
        let width = cfg.n_features();
        let allowed = if width == 64 {
            u64::MAX
        } else {
            (1u64 << width) - 1
        };
        for (i, row) in self.rows.iter().enumerate() {
            if row.mask() & !allowed != 0 {
                return Err(Error::Config(format!(
                    "household {}: participant {i} sets feature columns beyond the {width} configured",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Natural parameter vector θ ∈ ℝ^κ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(Vec<f64>);

impl ModelParams {
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if let Some(k) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "theta[{k}] = {} is not finite",
                theta[k]
            )));
        }
        Ok(ModelParams(theta))
    }

    pub fn zeros(len: usize) -> Self {
        ModelParams(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Interpretable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiParams {
    /// Baseline cumulative external force of infection, Λ.
    pub external_force: f64,
    /// Baseline within-household transmission rate, λ.
    pub household_rate: f64,
    /// Variance of the unit-mean Gamma infectious period, ϑ.
    pub period_variance: f64,
    /// Household-size exponent η of the `n^η` rate scaling.
    pub size_exponent: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Per-individual multipliers derived from a feature row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndividualRates {
    /// Λ_i = Λ·exp(α·x_i)
    pub external_force: f64,
    /// σ_i = exp(β·x_i)
    pub susceptibility: f64,
    /// τ_i = exp(γ·x_i)
    pub transmissibility: f64,
}

impl EpiParams {
    /// Baseline parameters with all coefficients zero.
    pub fn baseline(
        external_force: f64,
        household_rate: f64,
        period_variance: f64,
        size_exponent: f64,
        cfg: &FeatureConfig,
    ) -> Self {
        EpiParams {
            external_force,
            household_rate,
            period_variance,
            size_exponent,
            alpha: vec![0.0; cfg.role_features(Role::External).len()],
            beta: vec![0.0; cfg.role_features(Role::Susceptibility).len()],
            gamma: vec![0.0; cfg.role_features(Role::Transmissibility).len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check(false)
    }

    /// Like [`validate`](Self::validate) but admits zero external force and
    /// zero household rate, which simulation handles exactly.
    pub fn validate_for_simulation(&self) -> Result<()> {
        self.check(true)
    }

    fn check(&self, allow_zero_rates: bool) -> Result<()> {
        for (name, v, may_vanish) in [
            ("external_force", self.external_force, allow_zero_rates),
            ("household_rate", self.household_rate, allow_zero_rates),
            ("period_variance", self.period_variance, false),
        ] {
            let ok = v.is_finite() && (v > 0.0 || (may_vanish && v == 0.0));
            if !ok {
                return Err(Error::Domain(format!(
                    "{name} = {v} must be finite and positive"
                )));
            }
        }
        if !(self.size_exponent.abs() < ETA_BOUND) {
            return Err(Error::Domain(format!(
                "size_exponent = {} must lie in the open interval (-{ETA_BOUND}, {ETA_BOUND})",
                self.size_exponent
            )));
        }
        for (name, v) in [
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
        ] {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Domain(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    fn check_shape(&self, cfg: &FeatureConfig) -> Result<()> {
        for (role, coeffs) in Role::ALL.iter().zip([&self.alpha, &self.beta, &self.gamma]) {
            let want = cfg.role_features(*role).len();
            if coeffs.len() != want {
                return Err(Error::Config(format!(
                    "{} has {} coefficients but the feature config lists {want}",
                    role.symbol(),
                    coeffs.len()
                )));
            }
        }
        Ok(())
    }

    pub fn coefficients(&self, role: Role) -> &[f64] {
        match role {
            Role::External => &self.alpha,
            Role::Susceptibility => &self.beta,
            Role::Transmissibility => &self.gamma,
        }
    }

    pub fn coefficients_mut(&mut self, role: Role) -> &mut Vec<f64> {
        match role {
            Role::External => &mut self.alpha,
            Role::Susceptibility => &mut self.beta,
            Role::Transmissibility => &mut self.gamma,
        }
    }

    /// Sets the coefficient attached to `feature` for `role`.
    pub fn set_coefficient(
        &mut self,
        cfg: &FeatureConfig,
        role: Role,
        feature: &str,
        value: f64,
    ) -> Result<()> {
        let idx = cfg
            .role_features(role)
            .iter()
            .position(|f| f == feature)
            .ok_or_else(|| {
                Error::Config(format!("'{feature}' is not a {} feature", role.symbol()))
            })?;
        self.coefficients_mut(role)[idx] = value;
        Ok(())
    }

    pub fn individual(&self, cfg: &FeatureConfig, row: FeatureRow) -> IndividualRates {
        IndividualRates {
            external_force: self.external_force * cfg.dot(Role::External, &self.alpha, row).exp(),
            susceptibility: cfg.dot(Role::Susceptibility, &self.beta, row).exp(),
            transmissibility: cfg.dot(Role::Transmissibility, &self.gamma, row).exp(),
        }
    }

    /// Q_i = exp(−Λ·exp(α·x_i)).
    pub fn external_escape_prob(&self, cfg: &FeatureConfig, row: FeatureRow) -> f64 {
        (-self.individual(cfg, row).external_force).exp()
    }

    /// Baseline escape probability q = exp(−Λ).
    pub fn baseline_escape_prob(&self) -> f64 {
        (-self.external_force).exp()
    }

    /// `n^η λ`: the baseline pairwise rate in a household of size `n`.
    pub fn size_scaled_rate(&self, n: usize) -> f64 {
        (n as f64).powf(self.size_exponent) * self.household_rate
    }

    /// Rate of infection from `j` (row `xj`) to `i` (row `xi`) in a household of size `n`.
    pub fn pairwise_rate(
        &self,
        cfg: &FeatureConfig,
        n: usize,
        xi: FeatureRow,
        xj: FeatureRow,
    ) -> f64 {
        let log_rate = self.size_exponent * (n as f64).ln()
            + self.household_rate.ln()
            + cfg.dot(Role::Susceptibility, &self.beta, xi)
            + cfg.dot(Role::Transmissibility, &self.gamma, xj);
        log_rate.exp()
    }

    /// Susceptible-infectious transmission probability p_n = 1 − Φ(n^η λ).
    pub fn sitp(&self, n: usize) -> f64 {
        -log_phi(self.size_scaled_rate(n), self.period_variance).exp_m1()
    }
}

/// Baseline rate λ giving SITP `p` in households of size `n`.
pub fn rate_for_sitp(p: f64, n: usize, period_variance: f64, size_exponent: f64) -> f64 {
    // Invert (1 + ϑs)^(−1/ϑ) = 1 − p.
    let u = 1.0 - p;
    let s = if period_variance < crate::finalsize::SMALL_VARIANCE {
        -u.ln()
    } else {
        (-period_variance * u.ln()).exp_m1() / period_variance
    };
    debug_assert!((phi(s, period_variance) - u).abs() < 1e-9);
    s / (n as f64).powf(size_exponent)
}

/// Λ giving a baseline external infection probability `p` (= 1 − q).
pub fn force_for_external_prob(p: f64) -> f64 {
    -(-p).ln_1p()
}

/// Largest representable |η| strictly inside the bound.
fn eta_open_limit() -> f64 {
    f64::from_bits(ETA_BOUND.to_bits() - 1)
}

/// Maps natural parameters to interpretable ones.
pub fn decode(theta: &ModelParams, cfg: &FeatureConfig) -> Result<EpiParams> {
    let t = theta.as_slice();
    if t.len() != cfg.n_params() {
        return Err(Error::Config(format!(
            "parameter vector has length {} but the feature config implies {}",
            t.len(),
            cfg.n_params()
        )));
    }
    let eta = (4.0 / PI * t[3].atan()).clamp(-eta_open_limit(), eta_open_limit());
    let [a, b, c] = cfg.block_ranges();
    Ok(EpiParams {
        external_force: t[0].exp(),
        household_rate: t[1].exp(),
        period_variance: t[2].exp(),
        size_exponent: eta,
        alpha: t[a].to_vec(),
        beta: t[b].to_vec(),
        gamma: t[c].to_vec(),
    })
}

/// Inverse of [`decode`].
pub fn encode(epi: &EpiParams, cfg: &FeatureConfig) -> Result<ModelParams> {
    epi.validate()?;
    epi.check_shape(cfg)?;
    let mut theta = Vec::with_capacity(cfg.n_params());
    theta.push(epi.external_force.ln());
    theta.push(epi.household_rate.ln());
    theta.push(epi.period_variance.ln());
    theta.push((PI * epi.size_exponent / 4.0).tan());
    theta.extend_from_slice(&epi.alpha);
    theta.extend_from_slice(&epi.beta);
    theta.extend_from_slice(&epi.gamma);
    ModelParams::new(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg() -> FeatureConfig {
        FeatureConfig::default()
    }

    #[test]
    fn default_config_has_thirteen_parameters() {
        assert_eq!(cfg().n_params(), 13);
        assert_eq!(FeatureConfig::empty().n_params(), 4);
    }

    #[test]
    fn decode_zero_vector() {
        let epi = decode(&ModelParams::zeros(13), &cfg()).unwrap();
        assert_eq!(epi.external_force, 1.0);
        assert_eq!(epi.household_rate, 1.0);
        assert_eq!(epi.period_variance, 1.0);
        assert_eq!(epi.size_exponent, 0.0);
        assert_eq!(epi.alpha, vec![0.0; 3]);
        assert_eq!(epi.gamma, vec![0.0; 4]);
    }

    #[test]
    fn decode_eta_transform() {
        let mut t = vec![0.0; 4];
        t[3] = 1.0;
        let epi = decode(
            &ModelParams::new(t.clone()).unwrap(),
            &FeatureConfig::empty(),
        )
        .unwrap();
        assert_relative_eq!(epi.size_exponent, 1.0, epsilon = 1e-15);
        for big in [1e6, 1e12, 1e300, f64::MAX] {
            t[3] = big;
            let e = decode(
                &ModelParams::new(t.clone()).unwrap(),
                &FeatureConfig::empty(),
            )
            .unwrap();
            assert!(
                e.size_exponent < 2.0 && e.size_exponent > 1.99,
                "{big}: {}",
                e.size_exponent
            );
            t[3] = -big;
            let e = decode(
                &ModelParams::new(t.clone()).unwrap(),
                &FeatureConfig::empty(),
            )
            .unwrap();
            assert!(e.size_exponent > -2.0);
        }
    }

    #[test]
    fn decode_rejects_wrong_length() {
        assert!(matches!(
            decode(&ModelParams::zeros(5), &cfg()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn encode_baseline_is_zero_and_rejects_eta_bound() {
        let c = cfg();
        let epi = EpiParams::baseline(1.0, 1.0, 1.0, 0.0, &c);
        assert_eq!(encode(&epi, &c).unwrap().as_slice(), &[0.0; 13]);
        let bad = EpiParams::baseline(1.0, 1.0, 1.0, 2.0, &c);
        assert!(matches!(encode(&bad, &c), Err(Error::Domain(_))));
        let bad = EpiParams::baseline(0.0, 1.0, 1.0, 0.0, &c);
        assert!(matches!(encode(&bad, &c), Err(Error::Domain(_))));
    }

    #[test]
    fn escape_probabilities() {
        let c = cfg();
        let mut epi = EpiParams::baseline(0.01, 1.0, 1.0, 0.0, &c);
        assert_relative_eq!(
            epi.external_escape_prob(&c, FeatureRow::EMPTY),
            (-0.01f64).exp()
        );
        assert_relative_eq!(
            epi.external_escape_prob(&c, FeatureRow::EMPTY),
            0.990_05,
            epsilon = 1e-5
        );
        epi.set_coefficient(&c, Role::External, "patient_facing", 2f64.ln())
            .unwrap();
        let pf = FeatureRow::EMPTY.with(c.column("patient_facing").unwrap(), true);
        assert_relative_eq!(
            epi.external_escape_prob(&c, pf),
            (-0.02f64).exp(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn pairwise_rates() {
        let c = cfg();
        let mut epi = EpiParams::baseline(0.01, 1.0, 1.0, 0.0, &c);
        assert_relative_eq!(
            epi.pairwise_rate(&c, 3, FeatureRow::EMPTY, FeatureRow::EMPTY),
            1.0
        );
        epi.size_exponent = -1.0;
        assert_relative_eq!(
            epi.pairwise_rate(&c, 4, FeatureRow::EMPTY, FeatureRow::EMPTY),
            0.25
        );
        epi.size_exponent = 0.0;
        epi.set_coefficient(&c, Role::Transmissibility, "pattern_other", 0.1f64.ln())
            .unwrap();
        let other = FeatureRow::EMPTY.with(c.column("pattern_other").unwrap(), true);
        assert_relative_eq!(
            epi.pairwise_rate(&c, 2, FeatureRow::EMPTY, other),
            0.1,
            max_relative = 1e-14
        );
        // Susceptibility side is unaffected by a transmissibility feature.
        assert_relative_eq!(epi.pairwise_rate(&c, 2, other, FeatureRow::EMPTY), 1.0);
    }

    #[test]
    fn sitp_values() {
        let c = FeatureConfig::empty();
        let epi = EpiParams::baseline(0.01, 1.0, 1.0, 0.0, &c);
        for n in 2..=6 {
            assert_relative_eq!(epi.sitp(n), 0.5, epsilon = 1e-15);
        }
        let tiny = EpiParams::baseline(0.01, 1e-12, 1.0, 0.0, &c);
        assert!(tiny.sitp(2) > 0.0 && tiny.sitp(2) < 1e-11);
    }

    #[test]
    fn sitp_monotonicity_follows_eta() {
        let c = FeatureConfig::empty();
        for (eta, sign) in [(-0.7, -1), (0.0, 0), (0.4, 1)] {
            let epi = EpiParams::baseline(0.01, 0.4, 0.8, eta, &c);
            for n in 2..6 {
                let d = epi.sitp(n + 1) - epi.sitp(n);
                match sign {
                    -1 => assert!(d < 0.0),
                    0 => assert!(d.abs() < 1e-15),
                    _ => assert!(d > 0.0),
                }
            }
        }
    }

    #[test]
    fn rate_for_sitp_inverts() {
        for vt in [1e-10, 0.5, 1.0, 2.0] {
            let lam = rate_for_sitp(0.3, 2, vt, -0.3);
            let epi = EpiParams::baseline(0.01, lam, vt, -0.3, &FeatureConfig::empty());
            assert_relative_eq!(epi.sitp(2), 0.3, epsilon = 1e-12);
        }
        assert_relative_eq!(
            1.0 - (-force_for_external_prob(0.0135)).exp(),
            0.0135,
            epsilon = 1e-15
        );
    }

    #[test]
    fn feature_config_validation() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert!(FeatureConfig::new(None, s(&["a", "a"]), vec![], vec![]).is_err());
        assert!(FeatureConfig::new(Some(s(&["a"])), s(&["b"]), vec![], vec![]).is_err());
        let c = FeatureConfig::new(None, s(&["a", "b"]), s(&["b", "c"]), vec![]).unwrap();
        assert_eq!(c.features(), &s(&["a", "b", "c"])[..]);
        assert_eq!(c.n_params(), 8);
        assert!(FeatureConfig::from_toml_str("externl = []").is_err());
        let round = FeatureConfig::from_toml_str(&cfg().to_toml_string()).unwrap();
        assert_eq!(round, cfg());
    }

    #[test]
    fn feature_rows_reject_non_binary() {
        assert!(FeatureRow::from_bits(&[0, 1, 2]).is_err());
        let r = FeatureRow::from_bits(&[1, 0, 1]).unwrap();
        assert_eq!(r.to_bits(4), vec![1, 0, 1, 0]);
    }

    #[test]
    fn household_invariants() {
        assert!(Household::plain("h", 0, 0).is_err());
        assert!(Household::plain("h", 7, 0).is_err());
        assert!(Household::plain("h", 2, 0b100).is_err());
        let h = Household::from_outcomes("h", vec![FeatureRow::EMPTY; 3], &[1, 0, 1]).unwrap();
        assert_eq!(h.outcome(), 0b101);
        assert_eq!(h.outcome_bits(), vec![1, 0, 1]);
    }

    fn arb_epi() -> impl Strategy<Value = EpiParams> {
        (
            1e-6f64..50.0,
            1e-6f64..50.0,
            1e-4f64..20.0,
            -1.999f64..1.999,
            proptest::collection::vec(-3.0f64..3.0, 9),
        )
            .prop_map(|(l, r, v, e, c)| EpiParams {
                external_force: l,
                household_rate: r,
                period_variance: v,
                size_exponent: e,
                alpha: c[0..3].to_vec(),
                beta: c[3..5].to_vec(),
                gamma: c[5..9].to_vec(),
            })
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(epi in arb_epi()) {
            let c = cfg();
            let back = decode(&encode(&epi, &c).unwrap(), &c).unwrap();
            prop_assert!((back.external_force / epi.external_force - 1.0).abs() < 1e-12);
            prop_assert!((back.household_rate / epi.household_rate - 1.0).abs() < 1e-12);
            prop_assert!((back.period_variance / epi.period_variance - 1.0).abs() < 1e-12);
            prop_assert!((back.size_exponent - epi.size_exponent).abs() < 1e-12);
            prop_assert_eq!(back.alpha, epi.alpha);
            prop_assert_eq!(back.gamma, epi.gamma);
        }

        #[test]
        fn decoded_eta_is_inside_bounds(t3 in proptest::num::f64::NORMAL) {
            let e = decode(&ModelParams::new(vec![0.0, 0.0, 0.0, t3]).unwrap(), &FeatureConfig::empty()).unwrap();
            prop_assert!(e.size_exponent > -2.0 && e.size_exponent < 2.0);
        }

        #[test]
        fn pairwise_rate_is_log_linear(epi in arb_epi(), xi in 0u64..32, xj in 0u64..32, n in 1usize..=6) {
            let c = cfg();
            let (xi, xj, z) = (FeatureRow::from_mask(xi), FeatureRow::from_mask(xj), FeatureRow::EMPTY);
            let lhs = epi.pairwise_rate(&c, n, xi, xj) * epi.pairwise_rate(&c, n, z, z);
            let rhs = epi.pairwise_rate(&c, n, xi, z) * epi.pairwise_rate(&c, n, z, xj);
            prop_assert!((lhs / rhs - 1.0).abs() < 1e-12);
        }
    }
}
