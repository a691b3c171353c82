//! Synthetic survey cohorts drawn from the transmission model.
//!
//! A generated cohort comes in two equivalent forms: the modelling [`Cohort`]
//! and a visit-level flat file that, once ingested over the generation
//! window, reproduces the same households.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    GeneSet, HouseholdSummary, ParticipantSummary, PatternClass, TestResult, Tranches, VisitRecord,
};
use crate::likelihood::Cohort;
use crate::model::{
    force_for_external_prob, rate_for_sitp, EpiParams, FeatureConfig, Role, MAX_HOUSEHOLD_SIZE,
};
use crate::sellke::{replicate_rng, PreparedHousehold, Template};

/// Stream index used for cohort generation (frequency tables use template indices).
const GENERATION_STREAM: u64 = 1 << 40;

/// How gene patterns are shared among infected housemates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clustering {
    /// One draw per participant.
    Individual,
    /// One draw per household, shared by all members.
    Household,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub households: usize,
    /// Relative frequency of household sizes 1, 2, ….
    pub size_weights: Vec<f64>,
    /// Probability that a member other than the first is aged 2-11.
    pub child_2_11: f64,
    /// Probability that a member other than the first is aged 12-16.
    pub child_12_16: f64,
    /// Probability that an adult works in a patient-facing role.
    pub patient_facing: f64,
    /// Relative frequency of OR+N+S, OR+N and other patterns.
    pub pattern_weights: [f64; 3],
    pub pattern_clustering: Clustering,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Chance a member skips a scheduled visit after enrolment.
    pub missed_visit_prob: f64,
    pub id_prefix: String,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        PopulationSpec {
            households: 10_000,
            size_weights: vec![0.30, 0.38, 0.14, 0.12, 0.045, 0.015],
            child_2_11: 0.15,
            child_12_16: 0.08,
            patient_facing: 0.05,
            pattern_weights: [0.72, 0.10, 0.18],
            pattern_clustering: Clustering::Household,
            start: NaiveDate::from_ymd_opt(2020, 9, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2020, 11, 14).unwrap(),
            missed_visit_prob: 0.1,
            id_prefix: "H".into(),
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size_weights.is_empty() || self.size_weights.len() > MAX_HOUSEHOLD_SIZE {
            return bad(format!(
                "size_weights needs 1 to {MAX_HOUSEHOLD_SIZE} entries"
            ));
        }
        for w in self.size_weights.iter().chain(&self.pattern_weights) {
            if !(w.is_finite() && *w >= 0.0) {
                return bad(format!("weight {w} must be finite and non-negative"));
            }
        }
        if self.size_weights.iter().sum::<f64>() <= 0.0
            || self.pattern_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("weights must not all be zero".into());
        }
        for (name, p) in [
            ("child_2_11", self.child_2_11),
            ("child_12_16", self.child_12_16),
            ("patient_facing", self.patient_facing),
            ("missed_visit_prob", self.missed_visit_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.child_2_11 + self.child_12_16 > 1.0 {
            return bad("child_2_11 + child_12_16 exceeds 1".into());
        }
        if self.end < self.start {
            return bad("population window ends before it starts".into());
        }
        Ok(())
    }

    /// The single tranche spanning the generation window.
    pub fn window(&self) -> Result<Tranches> {
        Tranches::single("synthetic", self.start, self.end)
    }
}

/// Ground-truth parameters on the interpretable scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    /// Baseline external infection probability 1 − q.
    pub external_prob: f64,
    /// Baseline SITP in a household of two.
    pub sitp_2: f64,
    pub period_variance: f64,
    pub size_exponent: f64,
    #[serde(default)]
    pub alpha: BTreeMap<String, f64>,
    #[serde(default)]
    pub beta: BTreeMap<String, f64>,
    #[serde(default)]
    pub gamma: BTreeMap<String, f64>,
}

impl TruthSpec {
    pub fn to_epi(&self, cfg: &FeatureConfig) -> Result<EpiParams> {
        if !(0.0..1.0).contains(&self.external_prob) || !(0.0..1.0).contains(&self.sitp_2) {
            return Err(Error::Config(
                "external_prob and sitp_2 must lie in [0, 1)".into(),
            ));
        }
        let mut epi = EpiParams::baseline(
            force_for_external_prob(self.external_prob),
            rate_for_sitp(self.sitp_2, 2, self.period_variance, self.size_exponent),
            self.period_variance,
            self.size_exponent,
            cfg,
        );
        for (role, map) in Role::ALL.iter().zip([&self.alpha, &self.beta, &self.gamma]) {
            for (name, value) in map {
                epi.set_coefficient(cfg, *role, name, *value)?;
            }
        }
        epi.validate_for_simulation()?;
        Ok(epi)
    }
}

/// Everything the `simulate` command reads from its spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    #[serde(default)]
    pub schema_version: Option<u32>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub features: Option<FeatureConfig>,
    pub truth: TruthSpec,
    #[serde(default)]
    pub population: Option<PopulationSpec>,
    /// Replicates per template for outcome-frequency tables.
    #[serde(default = "default_replicates")]
    pub replicates: u64,
    #[serde(default)]
    pub template: Vec<Template>,
}

fn default_replicates() -> u64 {
    100_000
}

impl SimulationSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SimulationSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("simulation spec: {e}")))?;
        if let Some(v) = spec.schema_version {
            if v != crate::SCHEMA_VERSION {
                return Err(Error::Config(format!(
                    "simulation spec schema_version {v} is not supported"
                )));
            }
        }
        if spec.population.is_none() && spec.template.is_empty() {
            return Err(Error::Config(
                "simulation spec needs a [population] table or [[template]] entries".into(),
            ));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn feature_config(&self) -> FeatureConfig {
        self.features.clone().unwrap_or_default()
    }
}

/// A generated cohort in modelling, summary and flat-file form.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub households: Vec<HouseholdSummary>,
    pub records: Vec<VisitRecord>,
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn pick_class(rng: &mut ChaCha8Rng, weights: &[f64; 3]) -> PatternClass {
    PatternClass::ALL[pick(rng, weights)]
}

/// Pattern strings consistent with each class, primary first.
fn visit_pattern(rng: &mut ChaCha8Rng, class: PatternClass, primary: bool) -> Option<GeneSet> {
    let or_n = GeneSet::OR.union(GeneSet::N);
    let others = [
        None,
        Some(GeneSet::N),
        Some(GeneSet::S),
        Some(GeneSet::OR),
        Some(GeneSet::N.union(GeneSet::S)),
        Some(GeneSet::OR.union(GeneSet::S)),
    ];
    match (class, primary) {
        (PatternClass::OrNS, true) => Some(GeneSet::ALL),
        (PatternClass::OrNS, false) => [
            Some(GeneSet::ALL),
            Some(or_n),
            Some(GeneSet::N.union(GeneSet::S)),
            Some(GeneSet::N),
        ][rng.random_range(0..4)],
        (PatternClass::OrN, true) => Some(or_n),
        (PatternClass::OrN, false) => {
            [Some(or_n), Some(GeneSet::OR), Some(GeneSet::N)][rng.random_range(0..3)]
        }
        (PatternClass::Other, _) => others[rng.random_range(0..others.len())],
    }
}

/// Weekly visits for the first five weeks, then monthly, inside the window.
fn schedule(enrol: NaiveDate, end: NaiveDate) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = enrol;
    let mut k = 0;
    while d <= end {
        out.push(d);
        let step = if k < 4 { 7 } else { 28 };
        d = d + Days::new(step);
        k += 1;
    }
    out
}

struct Member {
    age: u32,
    patient_facing: bool,
    class: PatternClass,
}

fn draw_member(rng: &mut ChaCha8Rng, pop: &PopulationSpec, first: bool) -> Member {
    let u: f64 = rng.random();
    let age = if first || u >= pop.child_2_11 + pop.child_12_16 {
        rng.random_range(17..=85)
    } else if u < pop.child_2_11 {
        rng.random_range(2..=11)
    } else {
        rng.random_range(12..=16)
    };
    let patient_facing = age > 16 && rng.random::<f64>() < pop.patient_facing;
    Member {
        age,
        patient_facing,
        class: PatternClass::Other,
    }
}

fn generate_household(
    index: usize,
    width: usize,
    pop: &PopulationSpec,
    epi: &EpiParams,
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<(HouseholdSummary, Vec<VisitRecord>)> {
    let mut rng = replicate_rng(seed, GENERATION_STREAM, index as u64);
    let size = pick(&mut rng, &pop.size_weights) + 1;
    let shared = pick_class(&mut rng, &pop.pattern_weights);
    let mut members: Vec<Member> = (0..size)
        .map(|i| draw_member(&mut rng, pop, i == 0))
        .collect();
    for m in &mut members {
        m.class = match pop.pattern_clustering {
            Clustering::Household => shared,
            Clustering::Individual => pick_class(&mut rng, &pop.pattern_weights),
        };
    }

    let hid = format!("{}{:0width$}", pop.id_prefix, index);
    let summary = |i: usize, m: &Member, positive: bool| ParticipantSummary {
        pid: format!("{hid}-{i}"),
        age: m.age,
        patient_facing: m.patient_facing,
        positive,
        pattern: positive.then_some(m.class),
        imputed: false,
    };
    // Latent rows treat everyone as a potential case so transmissibility
    // effects apply to whoever becomes infected.
    let latent = members
        .iter()
        .enumerate()
        .map(|(i, m)| summary(i, m, true).feature_row(cfg))
        .collect::<Result<Vec<_>>>()?;
    let infected = PreparedHousehold::new(epi, cfg, &latent)?.simulate(&mut rng);

    let span = (pop.end - pop.start).num_days().max(0) as u64;
    let enrol = pop.start + Days::new(rng.random_range(0..=span / 2));
    let visits = schedule(enrol, pop.end);
    let onset = rng.random_range(0..visits.len());

    let mut records = Vec::new();
    let mut participants = Vec::with_capacity(size);
    for (i, m) in members.iter().enumerate() {
        let positive = infected >> i & 1 == 1;
        let p = summary(i, m, positive);
        let birthday =
            (rng.random::<f64>() < 0.1).then(|| rng.random_range(1..visits.len().max(2)));
        let first_pos = if positive {
            (onset + usize::from(i > 0 && rng.random::<bool>())).min(visits.len() - 1)
        } else {
            usize::MAX
        };
        let second_pos = positive && first_pos + 1 < visits.len() && rng.random::<f64>() < 0.3;
        for (k, &date) in visits.iter().enumerate() {
            let pos_here = k == first_pos || (second_pos && k == first_pos + 1);
            if k > 0 && !pos_here && rng.random::<f64>() < pop.missed_visit_prob {
                continue;
            }
            let age = m.age + u32::from(birthday.is_some_and(|b| k >= b));
            let work_pf = m.patient_facing && (k == 0 || rng.random::<bool>());
            records.push(VisitRecord {
                hid: hid.clone(),
                pid: p.pid.clone(),
                visit_date: date,
                age,
                test_result: if pos_here {
                    TestResult::Positive
                } else {
                    TestResult::Negative
                },
                work_pf,
                pattern: if pos_here {
                    visit_pattern(&mut rng, m.class, k == first_pos)
                } else {
                    None
                },
                row: 0,
            });
        }
        participants.push(p);
    }
    records.sort_by(|a, b| {
        a.visit_date
            .cmp(&b.visit_date)
            .then_with(|| a.pid.cmp(&b.pid))
    });
    Ok((HouseholdSummary { hid, participants }, records))
}

/// Draws a cohort of households from `pop` under parameters `epi`.
/// Identical inputs give identical output regardless of thread count.
pub fn generate_cohort(
    pop: &PopulationSpec,
    epi: &EpiParams,
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<SyntheticCohort> {
    pop.validate()?;
    epi.validate_for_simulation()?;
    let width = pop.households.saturating_sub(1).max(1).to_string().len();
    let generated = (0..pop.households)
        .into_par_iter()
        .map(|a| generate_household(a, width, pop, epi, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut households = Vec::with_capacity(generated.len());
    let mut records = Vec::new();
    for (h, r) in generated {
        households.push(h);
        records.extend(r);
    }
    let hh = households
        .iter()
        .map(|h| h.to_household(cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCohort {
        cohort: Cohort::new(hh, cfg.clone())?,
        households,
        records,
    })
}
