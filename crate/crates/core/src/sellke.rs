//! Direct stochastic simulation of household outbreaks by the Sellke
//! construction.
//!
//! Every member draws an exponential resistance threshold and a Gamma
//! infectious period. A member is infected when the external force plus the
//! accumulated pressure from infected housemates exceeds their threshold;
//! the final infected set is the smallest set closed under that rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finalsize::{solve, SMALL_VARIANCE};
use crate::model::{EpiParams, FeatureConfig, FeatureRow, Household, MAX_HOUSEHOLD_SIZE};

/// Largest household the simulator accepts.
pub const MAX_SIM_SIZE: usize = 64;
/// Largest household whose full outcome distribution is tabulated.
pub const MAX_TABULATED_SIZE: usize = 16;

/// Words of key stream reserved for each replicate.
const REPLICATE_WORDS_LOG2: u32 = 20;

/// RNG for one replicate: keyed by `seed`, with an independent stream per
/// `stream` index and a disjoint key-stream block per replicate, so results
/// do not depend on how work is scheduled.
pub fn replicate_rng(seed: u64, stream: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((replicate as u128) << REPLICATE_WORDS_LOG2);
    rng
}

/// Rates of one household, computed once and reused across replicates.
#[derive(Debug, Clone)]
pub struct PreparedHousehold {
    n: usize,
    external: Vec<f64>,
    /// `pressure[j * n + i]`: rate from infector `j` onto `i`.
    pressure: Vec<f64>,
    period: Option<Gamma<f64>>,
}

impl PreparedHousehold {
    pub fn new(epi: &EpiParams, cfg: &FeatureConfig, rows: &[FeatureRow]) -> Result<Self> {
        epi.validate_for_simulation()?;
        let n = rows.len();
        if n == 0 || n > MAX_SIM_SIZE {
            return Err(Error::Domain(format!(
                "household size {n} outside 1..={MAX_SIM_SIZE}"
            )));
        }
        if n > MAX_HOUSEHOLD_SIZE {
            log::warn!(
                "simulating a household of size {n}, larger than the model supports for inference"
            );
        }
        let external = rows
            .iter()
            .map(|&r| epi.individual(cfg, r).external_force)
            .collect();
        let mut pressure = vec![0.0; n * n];
        for j in 0..n {
            for i in 0..n {
                if i != j {
                    pressure[j * n + i] = epi.pairwise_rate(cfg, n, rows[i], rows[j]);
                }
            }
        }
        let period = if epi.period_variance < SMALL_VARIANCE {
            None
        } else {
            let v = epi.period_variance;
            Some(
                Gamma::new(1.0 / v, v)
                    .map_err(|e| Error::Domain(format!("infectious period: {e}")))?,
            )
        };
        Ok(PreparedHousehold {
            n,
            external,
            pressure,
            period,
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// One realisation; bit `i` of the result is set when member `i` is infected.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let n = self.n;
        let mut threshold = [0.0f64; MAX_SIM_SIZE];
        let mut period = [1.0f64; MAX_SIM_SIZE];
        for i in 0..n {
            threshold[i] = Exp1.sample(rng);
            if let Some(g) = &self.period {
                period[i] = g.sample(rng);
            }
        }
        let mut load = [0.0f64; MAX_SIM_SIZE];
        let mut infected = 0u64;
        let mut queue = [0usize; MAX_SIM_SIZE];
        let mut tail = 0;
        for i in 0..n {
            load[i] = self.external[i];
            if load[i] > threshold[i] {
                infected |= 1 << i;
                queue[tail] = i;
                tail += 1;
            }
        }
        let mut head = 0;
        while head < tail {
            let j = queue[head];
            head += 1;
            let row = &self.pressure[j * n..(j + 1) * n];
            for i in 0..n {
                if infected >> i & 1 == 0 {
                    load[i] += row[i] * period[j];
                    if load[i] > threshold[i] {
                        infected |= 1 << i;
                        queue[tail] = i;
                        tail += 1;
                    }
                }
            }
        }
        infected
    }
}

/// Simulates one household outbreak.
pub fn simulate_household<R: Rng + ?Sized>(
    epi: &EpiParams,
    cfg: &FeatureConfig,
    rows: &[FeatureRow],
    rng: &mut R,
) -> Result<u64> {
    Ok(PreparedHousehold::new(epi, cfg, rows)?.simulate(rng))
}

/// A household composition to simulate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    /// 0/1 feature matrix, one row per member.
    pub features: Vec<Vec<u8>>,
}

impl Template {
    pub fn plain(size: usize, n_features: usize) -> Self {
        Template {
            features: vec![vec![0; n_features]; size],
        }
    }

    pub fn rows(&self) -> Result<Vec<FeatureRow>> {
        self.features
            .iter()
            .map(|r| FeatureRow::from_bits(r))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub epi: EpiParams,
    pub feature_config: FeatureConfig,
    pub templates: Vec<Template>,
    pub replicates: u64,
    pub seed: u64,
}

/// Outcome counts of one template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Frequencies {
    pub template: usize,
    pub size: usize,
    pub replicates: u64,
    /// Indexed by outcome mask.
    pub counts: Vec<u64>,
}

impl Frequencies {
    pub fn probs(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.replicates as f64)
            .collect()
    }
}

/// Tabulates outcome frequencies of every template, in parallel over
/// replicates. Counts depend only on the seed, never on the thread count.
pub fn outcome_frequencies(sim: &SimConfig) -> Result<Vec<Frequencies>> {
    if sim.replicates == 0 {
        return Err(Error::Config("replicates must be positive".into()));
    }
    sim.templates
        .iter()
        .enumerate()
        .map(|(t, template)| {
            let rows = template.rows()?;
            let n = rows.len();
            if n > MAX_TABULATED_SIZE {
                return Err(Error::Domain(format!(
                    "template {t} has {n} members; outcome tables stop at {MAX_TABULATED_SIZE}"
                )));
            }
            let prepared = PreparedHousehold::new(&sim.epi, &sim.feature_config, &rows)?;
            let counts = (0..sim.replicates)
                .into_par_iter()
                .fold(
                    || vec![0u64; 1 << n],
                    |mut acc, r| {
                        let mut rng = replicate_rng(sim.seed, t as u64, r);
                        acc[prepared.simulate(&mut rng) as usize] += 1;
                        acc
                    },
                )
                .reduce(
                    || vec![0u64; 1 << n],
                    |mut a, b| {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        a
                    },
                );
            Ok(Frequencies {
                template: t,
                size: n,
                replicates: sim.replicates,
                counts,
            })
        })
        .collect()
}

/// Frequencies alongside exact probabilities and their total-variation distance.
pub fn compare_with_exact(sim: &SimConfig, freqs: &[Frequencies]) -> Result<Vec<(Vec<f64>, f64)>> {
    freqs
        .iter()
        .map(|f| {
            let rows = sim.templates[f.template].rows()?;
            let hh = Household::new(format!("template{}", f.template), rows, 0)?;
            let exact = solve(&hh, &sim.epi, &sim.feature_config)?;
            let tv = exact.total_variation(&f.probs());
            Ok((exact.probs().to_vec(), tv))
        })
        .collect()
}
