//! Exact final-size distribution of a household.
//!
//! For outcome bitmasks ν and ω (bit `j` set ⇔ participant `j` ever
//! infected) the probabilities `P` solve the triangular system `B·P = 1` with
//!
//! ```text
//! B[ν, ω] = 1 / ( ∏_{j ∈ ω} Φ(Σ_{i ∉ ν} λ_ij) · ∏_{j ∉ ν} Q_j ),   ω ⊆ ν,
//! ```
//!
//! and zero elsewhere. Every submask of ν is numerically smaller than ν, so
//! visiting ν in increasing order solves each row from already known
//! entries. Dividing row ν by its diagonal turns every coefficient into a
//! product of Laplace transforms in (0, 1]:
//!
//! ```text
//! P_ν = ∏_{j ∉ ν} Q_j ∏_{j ∈ ν} Φ_j(ν) − Σ_{ω ⊊ ν} P_ω ∏_{j ∈ ν∖ω} Φ_j(ν)
//! ```
//!
//! which is what [`solve`] evaluates, so reciprocal products never have to be
//! formed explicitly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EpiParams, FeatureConfig, FeatureRow, Household, MAX_HOUSEHOLD_SIZE};

/// Below this infectious-period variance Φ is replaced by its limit `exp(−s)`.
pub const SMALL_VARIANCE: f64 = 1e-8;

/// Slack allowed for rounding before a negative probability is an error.
const NEGATIVE_SLACK: f64 = 1e-12;

/// `ln Φ(s)` for the unit-mean Gamma infectious period with variance `vartheta`.
pub fn log_phi(s: f64, vartheta: f64) -> f64 {
    if vartheta < SMALL_VARIANCE {
        -s
    } else {
        -(vartheta * s).ln_1p() / vartheta
    }
}

/// Laplace transform of the infectious-period density, `(1 + ϑs)^(−1/ϑ)`.
pub fn phi(s: f64, vartheta: f64) -> f64 {
    log_phi(s, vartheta).exp()
}

/// Probability of every outcome bitmask of one household.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeDistribution {
    n: usize,
    p: Vec<f64>,
}

impl OutcomeDistribution {
    pub fn from_probs(n: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != 1 << n {
            return Err(Error::Domain(format!(
                "distribution over {n} participants needs {} entries, got {}",
                1 << n,
                p.len()
            )));
        }
        if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("probability {bad} outside [0, 1]")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::Domain(format!("probabilities sum to {total}")));
        }
        Ok(OutcomeDistribution { n, p })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn prob(&self, outcome: u32) -> f64 {
        self.p[outcome as usize]
    }

    /// Distribution of the number infected.
    pub fn size_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n + 1];
        for (mask, &p) in self.p.iter().enumerate() {
            out[mask.count_ones() as usize] += p;
        }
        out
    }

    /// Probability that participant `i` is infected.
    pub fn marginal(&self, i: usize) -> f64 {
        self.p
            .iter()
            .enumerate()
            .filter(|(mask, _)| mask >> i & 1 == 1)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn total_variation(&self, other: &[f64]) -> f64 {
        assert_eq!(
            self.p.len(),
            other.len(),
            "distributions over different outcome sets"
        );
        0.5 * self
            .p
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Formats an outcome bitmask as `(y_0,…,y_{n−1})`.
pub fn outcome_label(outcome: u32, n: usize) -> String {
    let bits: Vec<String> = (0..n).map(|i| (outcome >> i & 1).to_string()).collect();
    format!("({})", bits.join(","))
}

/// Per-household ingredients of the system: `ln Q_j` and the rate matrix.
struct Rates {
    n: usize,
    log_escape: Vec<f64>,
    /// `rate[i * n + j]` = λ_ij, the rate from `j` to `i`; zero on the diagonal.
    rate: Vec<f64>,
    vartheta: f64,
}

impl Rates {
    fn new(rows: &[FeatureRow], epi: &EpiParams, cfg: &FeatureConfig) -> Self {
        let n = rows.len();
        let ind: Vec<_> = rows.iter().map(|&r| epi.individual(cfg, r)).collect();
        let scale = epi.size_scaled_rate(n);
        let mut rate = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    rate[i * n + j] = scale * ind[i].susceptibility * ind[j].transmissibility;
                }
            }
        }
        Rates {
            n,
            log_escape: ind.iter().map(|r| -r.external_force).collect(),
            rate,
            vartheta: epi.period_variance,
        }
    }

    /// `ln Φ_j(ν)` for every `j`: Φ of the total rate `j` exerts on those outside ν.
    fn log_phis(&self, nu: usize, out: &mut [f64; MAX_HOUSEHOLD_SIZE]) {
        let n = self.n;
        for (j, slot) in out.iter_mut().enumerate().take(n) {
            let s: f64 = (0..n)
                .filter(|i| nu >> i & 1 == 0)
                .map(|i| self.rate[i * n + j])
                .sum();
            *slot = log_phi(s, self.vartheta);
        }
    }
}

/// The triangular system in compressed-row form, entries stored as `ln B`.
#[derive(Debug, Clone)]
pub struct FinalSizeSystem {
    n: usize,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    log_values: Vec<f64>,
}

impl FinalSizeSystem {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        1 << self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Stored `(column, ln B)` pairs of a row, in increasing column order.
    pub fn row(&self, nu: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_start[nu]..self.row_start[nu + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.log_values[r])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `B[ν, ω]`, zero off the pattern.
    pub fn value(&self, nu: usize, omega: usize) -> f64 {
        self.row(nu)
            .find(|&(c, _)| c == omega)
            .map_or(0.0, |(_, v)| v.exp())
    }

    pub fn mul_vec(&self, p: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|nu| self.row(nu).map(|(c, lv)| lv.exp() * p[c]).sum())
            .collect()
    }
}

fn check_rows(rows: &[FeatureRow]) -> Result<()> {
    if rows.is_empty() || rows.len() > MAX_HOUSEHOLD_SIZE {
        return Err(Error::Domain(format!(
            "household size {} outside 1..={MAX_HOUSEHOLD_SIZE}",
            rows.len()
        )));
    }
    Ok(())
}

/// Assembles `B` for a household.
pub fn build_system(
    hh: &Household,
    epi: &EpiParams,
    cfg: &FeatureConfig,
) -> Result<FinalSizeSystem> {
    check_rows(hh.rows())?;
    let rates = Rates::new(hh.rows(), epi, cfg);
    let n = rates.n;
    let full = (1usize << n) - 1;
    let mut row_start = vec![0];
    let mut cols = Vec::new();
    let mut log_values = Vec::new();
    let mut lphi = [0.0; MAX_HOUSEHOLD_SIZE];
    for nu in 0..=full {
        rates.log_phis(nu, &mut lphi);
        let outside: f64 = (0..n)
            .filter(|j| nu >> j & 1 == 0)
            .map(|j| rates.log_escape[j])
            .sum();
        for omega in 0..=nu {
            if omega & !nu != 0 {
                continue;
            }
            let inside: f64 = (0..n)
                .filter(|j| omega >> j & 1 == 1)
                .map(|j| lphi[j])
                .sum();
            let lv = -(inside + outside);
            if !lv.is_finite() {
                return Err(Error::NumericalInstability {
                    household: hh.id().to_string(),
                    detail: format!("ln B[{nu}, {omega}] = {lv}"),
                    theta: Vec::new(),
                });
            }
            cols.push(omega as u32);
            log_values.push(lv);
        }
        row_start.push(cols.len());
    }
    Ok(FinalSizeSystem {
        n,
        row_start,
        cols,
        log_values,
    })
}

/// A solved household plus what is needed for accurate log-probabilities.
pub(crate) struct Solved {
    pub p: Vec<f64>,
    log_escape: Vec<f64>,
    /// ln Φ_j({j}) for every j.
    log_phi_single: Vec<f64>,
}

impl Solved {
    /// `ln P_y`. Outcomes with at most one positive use closed forms,
    /// `∏ Q_i` and `Φ_j({j}) (1 − Q_j) ∏_{i≠j} Q_i`, which avoid the
    /// cancellation in the triangular recursion.
    pub fn log_prob(&self, y: u32) -> f64 {
        let total: f64 = self.log_escape.iter().sum();
        match y.count_ones() {
            0 => total,
            1 => {
                let j = y.trailing_zeros() as usize;
                let lq = self.log_escape[j];
                self.log_phi_single[j] + (total - lq) + (-lq.exp_m1()).ln()
            }
            _ => self.p[y as usize].ln(),
        }
    }
}

/// Solves for the outcome distribution of a household given only its
/// feature rows. The error carries no household id; callers attach one.
pub(crate) fn solve_rows(
    rows: &[FeatureRow],
    epi: &EpiParams,
    cfg: &FeatureConfig,
) -> Result<Solved, String> {
    let rates = Rates::new(rows, epi, cfg);
    let n = rates.n;
    let dim = 1usize << n;
    let mut p = vec![0.0; dim];
    let mut prod = [0.0f64; 1 << MAX_HOUSEHOLD_SIZE];
    let mut phis = [0.0f64; MAX_HOUSEHOLD_SIZE];
    let mut lphi = [0.0; MAX_HOUSEHOLD_SIZE];
    let mut log_phi_single = vec![0.0; n];

    for nu in 0..dim {
        rates.log_phis(nu, &mut lphi);
        if nu.count_ones() == 1 {
            let j = nu.trailing_zeros() as usize;
            log_phi_single[j] = lphi[j];
        }
        let mut log_base = 0.0;
        for j in 0..n {
            if nu >> j & 1 == 1 {
                log_base += lphi[j];
                phis[j] = lphi[j].exp();
            } else {
                log_base += rates.log_escape[j];
            }
        }

        // prod[d] = ∏_{j ∈ d} Φ_j(ν) over submasks d of ν, visited in increasing order.
        prod[0] = 1.0;
        let mut acc = 0.0;
        let mut d = 0usize;
        loop {
            d = (d | !nu).wrapping_add(1) & nu;
            if d == 0 {
                break;
            }
            let low = d.trailing_zeros() as usize;
            prod[d] = prod[d & (d - 1)] * phis[low];
            acc += p[nu ^ d] * prod[d];
        }

        let value = log_base.exp() - acc;
        if !value.is_finite() {
            return Err(format!(
                "P{} is not finite ({value})",
                outcome_label(nu as u32, n)
            ));
        }
        p[nu] = if value < 0.0 {
            if value < -NEGATIVE_SLACK {
                return Err(format!(
                    "P{} = {value:e} is negative beyond rounding",
                    outcome_label(nu as u32, n)
                ));
            }
            0.0
        } else {
            value
        };
    }
    Ok(Solved {
        p,
        log_escape: rates.log_escape,
        log_phi_single,
    })
}

fn instability(hh: &Household, epi: &EpiParams, cfg: &FeatureConfig, detail: String) -> Error {
    Error::NumericalInstability {
        household: hh.id().to_string(),
        detail,
        theta: crate::model::encode(epi, cfg)
            .map(|t| t.into_vec())
            .unwrap_or_default(),
    }
}

/// Exact final-size distribution of `hh` under `epi`.
pub fn solve(hh: &Household, epi: &EpiParams, cfg: &FeatureConfig) -> Result<OutcomeDistribution> {
    check_rows(hh.rows())?;
    hh.check_features(cfg)?;
    let solved = solve_rows(hh.rows(), epi, cfg).map_err(|d| instability(hh, epi, cfg, d))?;
    Ok(OutcomeDistribution {
        n: hh.size(),
        p: solved.p,
    })
}

/// Probability of the household's observed outcome.
pub fn household_prob(hh: &Household, epi: &EpiParams, cfg: &FeatureConfig) -> Result<f64> {
    Ok(solve(hh, epi, cfg)?.prob(hh.outcome()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Role;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plain_epi(big: f64, lam: f64, vt: f64, eta: f64) -> (EpiParams, FeatureConfig) {
        let cfg = FeatureConfig::empty();
        (EpiParams::baseline(big, lam, vt, eta, &cfg), cfg)
    }

    fn random_household(rng: &mut ChaCha8Rng, n: usize, cfg: &FeatureConfig) -> Household {
        let rows = (0..n)
            .map(|_| FeatureRow::from_mask(rng.random_range(0..1u64 << cfg.n_features())))
            .collect();
        Household::new("rand", rows, 0).unwrap()
    }

    fn random_epi(rng: &mut ChaCha8Rng, cfg: &FeatureConfig) -> EpiParams {
        let mut epi = EpiParams::baseline(
            (rng.random_range(-6.0..0.5f64)).exp(),
            (rng.random_range(-4.0..1.5f64)).exp(),
            (rng.random_range(-3.0..1.5f64)).exp(),
            rng.random_range(-1.9..1.9),
            cfg,
        );
        for role in Role::ALL {
            for c in epi.coefficients_mut(role) {
                *c = rng.random_range(-1.5..1.5);
            }
        }
        epi
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.0, 3.7), 1.0);
        assert_eq!(phi(0.0, 1e-12), 1.0);
        assert_relative_eq!(phi(1.0, 1.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(phi(1.0, 0.5), 4.0 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(phi(0.7, 1e-9), (-0.7f64).exp(), epsilon = 1e-15);
        // Continuity across the small-variance switch.
        assert_relative_eq!(phi(0.7, 2e-8), (-0.7f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn single_person_household() {
        let (epi, cfg) = plain_epi(0.3, 1.0, 1.0, 0.0);
        let q = (-0.3f64).exp();
        let d = solve(&Household::plain("h", 1, 0).unwrap(), &epi, &cfg).unwrap();
        assert_relative_eq!(d.prob(0), q, epsilon = 1e-15);
        assert_relative_eq!(d.prob(1), 1.0 - q, epsilon = 1e-15);
        let hh = Household::plain("h", 1, 1).unwrap();
        assert_relative_eq!(
            household_prob(&hh, &epi, &cfg).unwrap(),
            1.0 - q,
            epsilon = 1e-15
        );
    }

    #[test]
    fn two_person_closed_form() {
        let (epi, cfg) = plain_epi(0.01, 0.5, 1.0, 0.0);
        let d = solve(&Household::plain("h", 2, 0).unwrap(), &epi, &cfg).unwrap();
        let q = (-0.01f64).exp();
        assert_relative_eq!(d.prob(0b00), (-0.02f64).exp(), epsilon = 1e-15);
        let single = q * (1.0 - q) / 1.5;
        assert_relative_eq!(d.prob(0b01), single, epsilon = 1e-15);
        assert_relative_eq!(d.prob(0b10), single, epsilon = 1e-15);
        assert_relative_eq!(d.prob(0b11), 1.0 - q * q - 2.0 * single, epsilon = 1e-15);
    }

    #[test]
    fn system_pattern_and_residual() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let epi = random_epi(&mut rng, &cfg);
        let hh = random_household(&mut rng, 3, &cfg);
        let sys = build_system(&hh, &epi, &cfg).unwrap();
        assert_eq!(sys.dim(), 8);
        assert_eq!(sys.nnz(), 27); // 3^n submask pairs
        for nu in 0..8 {
            for omega in 0..8 {
                let v = sys.value(nu, omega);
                assert_eq!(v != 0.0, omega & !nu == 0, "pattern at ({nu},{omega})");
            }
            assert!(sys.value(nu, nu) > 0.0);
        }
        let d = solve(&hh, &epi, &cfg).unwrap();
        for r in sys.mul_vec(d.probs()) {
            assert!((r - 1.0).abs() < 1e-10, "row residual {r}");
        }
    }

    #[test]
    fn all_negative_is_product_of_escapes() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=6 {
            let epi = random_epi(&mut rng, &cfg);
            let hh = random_household(&mut rng, n, &cfg);
            let want: f64 = hh
                .rows()
                .iter()
                .map(|&r| epi.external_escape_prob(&cfg, r))
                .product();
            assert_relative_eq!(
                household_prob(&hh, &epi, &cfg).unwrap(),
                want,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn normalisation_over_random_draws() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..=6);
            let epi = random_epi(&mut rng, &cfg);
            let hh = random_household(&mut rng, n, &cfg);
            let d = solve(&hh, &epi, &cfg).unwrap();
            let total: f64 = d.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!(d.probs().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn no_transmission_gives_independent_outcomes() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut epi = random_epi(&mut rng, &cfg);
        epi.household_rate = 1e-300;
        let hh = random_household(&mut rng, 5, &cfg);
        let q: Vec<f64> = hh
            .rows()
            .iter()
            .map(|&r| epi.external_escape_prob(&cfg, r))
            .collect();
        let d = solve(&hh, &epi, &cfg).unwrap();
        for y in 0..32u32 {
            let want: f64 = (0..5)
                .map(|i| if y >> i & 1 == 1 { 1.0 - q[i] } else { q[i] })
                .product();
            assert!(
                (d.prob(y) - want).abs() < 1e-14,
                "{y}: {} vs {want}",
                d.prob(y)
            );
        }
    }

    #[test]
    fn increasing_external_force_lowers_all_negative() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut epi = random_epi(&mut rng, &cfg);
        let hh = random_household(&mut rng, 4, &cfg);
        let mut last = f64::INFINITY;
        for big in [0.001, 0.01, 0.1, 0.5, 1.0, 3.0] {
            epi.external_force = big;
            let p0 = household_prob(&hh, &epi, &cfg).unwrap();
            assert!(p0 < last);
            last = p0;
        }
    }

    #[test]
    fn relabelling_identical_participants_permutes_consistently() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let epi = random_epi(&mut rng, &cfg);
        let a = FeatureRow::from_mask(0b00101);
        let b = FeatureRow::from_mask(0b10010);
        let h1 = Household::new("x", vec![a, b, a], 0).unwrap();
        let d = solve(&h1, &epi, &cfg).unwrap();
        // Swapping participants 0 and 2 (identical rows) must leave P unchanged
        // under the matching relabelling of outcomes.
        for y in 0..8u32 {
            let swapped = (y & 0b010) | (y >> 2 & 1) | (y & 1) << 2;
            assert_relative_eq!(d.prob(y), d.prob(swapped), max_relative = 1e-12);
        }
        // Reordering to (b, a, a) permutes the distribution accordingly.
        let h2 = Household::new("y", vec![b, a, a], 0).unwrap();
        let d2 = solve(&h2, &epi, &cfg).unwrap();
        for y in 0..8u32 {
            // participant 0 of h1 → 1 of h2, 1 → 0, 2 → 2
            let mapped = (y & 1) << 1 | (y >> 1 & 1) | (y & 0b100);
            assert_relative_eq!(d.prob(y), d2.prob(mapped), max_relative = 1e-12);
        }
    }

    #[test]
    fn closed_form_log_probs_agree_with_recursion() {
        let cfg = FeatureConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=6 {
            let epi = random_epi(&mut rng, &cfg);
            let hh = random_household(&mut rng, n, &cfg);
            let solved = solve_rows(hh.rows(), &epi, &cfg).unwrap();
            for y in 0..1u32 << n {
                let want = solved.p[y as usize].ln();
                assert_relative_eq!(
                    solved.log_prob(y),
                    want,
                    max_relative = 1e-9,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn extreme_parameters_stay_finite() {
        let cfg = FeatureConfig::empty();
        for (big, lam, vt) in [(50.0, 1e-6, 1e-3), (1e-9, 40.0, 30.0), (5.0, 60.0, 1e-10)] {
            let epi = EpiParams::baseline(big, lam, vt, 1.9, &cfg);
            let d = solve(&Household::plain("h", 6, 0).unwrap(), &epi, &cfg).unwrap();
            let total: f64 = d.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-10, "{big} {lam} {vt}: {total}");
        }
    }
}
