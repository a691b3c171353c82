//! Visit-level flat file ingestion and per-tranche household construction.
//!
//! The flat file has one row per participant visit:
//!
//! ```text
//! HID,PID,visit_date,age,test_result,work_pf,pattern
//! 123,456,2020-10-02,8,Negative,No,NA
//! ```
//!
//! Rows are grouped by household then participant ([`Study::from_records`]).
//! A household's positives all belong to the tranche holding its earliest
//! positive visit; features are folded over the visits inside a tranche.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Cohort;
use crate::model::{FeatureConfig, FeatureRow, Household, MAX_HOUSEHOLD_SIZE};

pub const FLAT_HEADER: [&str; 7] = [
    "HID",
    "PID",
    "visit_date",
    "age",
    "test_result",
    "work_pf",
    "pattern",
];

/// Youngest age eligible for the survey.
pub const MIN_AGE: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestResult {
    Negative,
    Positive,
}

/// Set of PCR targets detected on one swab.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub struct GeneSet(u8);

impl GeneSet {
    pub const OR: GeneSet = GeneSet(1);
    pub const N: GeneSet = GeneSet(2);
    pub const S: GeneSet = GeneSet(4);
    pub const EMPTY: GeneSet = GeneSet(0);
    pub const ALL: GeneSet = GeneSet(7);

    pub fn union(self, other: GeneSet) -> GeneSet {
        GeneSet(self.0 | other.0)
    }

    pub fn contains(self, other: GeneSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    /// Ranking used to pick the maximal pattern: most targets detected, ties
    /// broken towards sets containing S, then OR, then N.
    fn rank(self) -> (u32, bool, bool, bool) {
        (
            self.count(),
            self.contains(GeneSet::S),
            self.contains(GeneSet::OR),
            self.contains(GeneSet::N),
        )
    }

    pub fn classify(self) -> PatternClass {
        if self == GeneSet::ALL {
            PatternClass::OrNS
        } else if self == GeneSet::OR.union(GeneSet::N) {
            PatternClass::OrN
        } else {
            PatternClass::Other
        }
    }
}

impl FromStr for GeneSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut set = GeneSet::EMPTY;
        for part in s.split('+') {
            let gene = match part.trim() {
                "OR" => GeneSet::OR,
                "N" => GeneSet::N,
                "S" => GeneSet::S,
                other => return Err(format!("unknown gene target '{other}' in pattern '{s}'")),
            };
            if set.contains(gene) {
                return Err(format!("gene target repeated in pattern '{s}'"));
            }
            set = set.union(gene);
        }
        Ok(set)
    }
}

impl fmt::Display for GeneSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(GeneSet::OR, "OR"), (GeneSet::N, "N"), (GeneSet::S, "S")]
            .iter()
            .filter(|(g, _)| self.contains(*g))
            .map(|(_, name)| *name)
            .collect();
        if parts.is_empty() {
            f.write_str("NA")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

/// Gene-positivity class of a positive participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatternClass {
    #[serde(rename = "OR+N+S")]
    OrNS,
    #[serde(rename = "OR+N")]
    OrN,
    Other,
}

impl PatternClass {
    pub const ALL: [PatternClass; 3] = [PatternClass::OrNS, PatternClass::OrN, PatternClass::Other];

    pub fn label(self) -> &'static str {
        match self {
            PatternClass::OrNS => "OR+N+S",
            PatternClass::OrN => "OR+N",
            PatternClass::Other => "Other",
        }
    }
}

/// Picks the visit pattern with the fewest target failures and classifies it.
/// A positive swab without a recorded pattern counts as no targets detected.
pub fn maximal_pattern(patterns: &[Option<GeneSet>]) -> Result<PatternClass> {
    patterns
        .iter()
        .map(|p| p.unwrap_or(GeneSet::EMPTY))
        .max_by_key(|g| g.rank())
        .map(GeneSet::classify)
        .ok_or_else(|| Error::Domain("maximal pattern of an empty list of positive visits".into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub hid: String,
    pub pid: String,
    pub visit_date: NaiveDate,
    pub age: u32,
    pub test_result: TestResult,
    pub work_pf: bool,
    pub pattern: Option<GeneSet>,
    /// 1-based data row in the source file (0 for records not read from a file).
    pub row: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedFile {
    pub records: Vec<VisitRecord>,
    pub warnings: Vec<String>,
}

fn parse_fields(fields: &csv::StringRecord, row: usize, source: &str) -> Result<VisitRecord> {
    let err = |message: String| Error::Parse {
        path: source.to_string(),
        row,
        message,
    };
    if fields.len() != FLAT_HEADER.len() {
        return Err(err(format!(
            "expected {} fields, found {}",
            FLAT_HEADER.len(),
            fields.len()
        )));
    }
    let hid = fields[0].trim().to_string();
    let pid = fields[1].trim().to_string();
    if hid.is_empty() || pid.is_empty() {
        return Err(err("empty HID or PID".into()));
    }
    let visit_date = NaiveDate::parse_from_str(fields[2].trim(), "%Y-%m-%d")
        .map_err(|e| err(format!("visit_date '{}': {e}", &fields[2])))?;
    let age: u32 = fields[3].trim().parse().map_err(|_| {
        err(format!(
            "age '{}' is not a whole number of years",
            &fields[3]
        ))
    })?;
    if age < MIN_AGE {
        return Err(err(format!(
            "age {age} is below the eligible minimum of {MIN_AGE}"
        )));
    }
    let test_result = match fields[4].trim() {
        "Negative" => TestResult::Negative,
        "Positive" => TestResult::Positive,
        other => {
            return Err(err(format!(
                "test_result '{other}' is not Negative/Positive"
            )))
        }
    };
    let work_pf = match fields[5].trim() {
        "Yes" => true,
        "No" => false,
        other => return Err(err(format!("work_pf '{other}' is not Yes/No"))),
    };
    let pattern = match fields[6].trim() {
        "NA" | "" => None,
        text => Some(text.parse::<GeneSet>().map_err(err)?),
    };
    if pattern.is_some() && test_result == TestResult::Negative {
        return Err(err("gene pattern recorded on a negative swab".into()));
    }
    Ok(VisitRecord {
        hid,
        pid,
        visit_date,
        age,
        test_result,
        work_pf,
        pattern,
        row,
    })
}

/// Parses a flat file from any reader. `source` names it in error messages.
pub fn parse_flat_reader<R: Read>(reader: R, source: &str) -> Result<ParsedFile> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != FLAT_HEADER {
        return Err(Error::Parse {
            path: source.to_string(),
            row: 0,
            message: format!("header {names:?} does not match {FLAT_HEADER:?}"),
        });
    }
    let mut parsed = ParsedFile::default();
    let mut seen: BTreeMap<(String, NaiveDate), usize> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            path: source.to_string(),
            row,
            message: e.to_string(),
        })?;
        let visit = parse_fields(&rec, row, source)?;
        if let Some(first) = seen.get(&(visit.pid.clone(), visit.visit_date)) {
            let msg = format!(
                "{source}, data row {row}: duplicate visit for participant {} on {}; keeping row {first}",
                visit.pid, visit.visit_date
            );
            warn!("{msg}");
            parsed.warnings.push(msg);
            continue;
        }
        seen.insert((visit.pid.clone(), visit.visit_date), row);
        parsed.records.push(visit);
    }
    Ok(parsed)
}

pub fn parse_flat_file(path: &Path) -> Result<ParsedFile> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_flat_reader(std::io::BufReader::new(file), &path.display().to_string())
}

/// Writes records in the canonical CSV dialect.
pub fn write_flat<W: Write>(records: &[VisitRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(FLAT_HEADER)?;
    for r in records {
        w.write_record([
            r.hid.as_str(),
            r.pid.as_str(),
            &r.visit_date.format("%Y-%m-%d").to_string(),
            &r.age.to_string(),
            match r.test_result {
                TestResult::Negative => "Negative",
                TestResult::Positive => "Positive",
            },
            if r.work_pf { "Yes" } else { "No" },
            &r.pattern
                .map_or_else(|| "NA".to_string(), |g| g.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<flat writer>", e))?;
    Ok(())
}

pub fn write_flat_file(records: &[VisitRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_flat(records, std::io::BufWriter::new(file))
}

/// A calendar window with inclusive ends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrancheSpec {
    pub name: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Descriptive metadata (prevalence, schools, variants, vaccination).
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl TrancheSpec {
    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    /// Days from `date` to the nearest day of the window (0 inside it).
    fn distance(&self, date: NaiveDate) -> i64 {
        if date < self.start {
            (self.start - date).num_days()
        } else if date > self.end {
            (date - self.end).num_days()
        } else {
            0
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrancheFile {
    #[serde(default)]
    schema_version: Option<u32>,
    tranche: Vec<TrancheSpec>,
}

/// Ordered, non-overlapping tranches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tranches(Vec<TrancheSpec>);

impl Tranches {
    pub fn new(list: Vec<TrancheSpec>) -> Result<Self> {
        if list.is_empty() {
            return Err(Error::Config("at least one tranche is required".into()));
        }
        let mut names = BTreeSet::new();
        for t in &list {
            if t.end < t.start {
                return Err(Error::Config(format!(
                    "tranche '{}' ends before it starts",
                    t.name
                )));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!(
                    "tranche name '{}' used twice",
                    t.name
                )));
            }
        }
        for w in list.windows(2) {
            if w[1].start <= w[0].end {
                return Err(Error::Config(format!(
                    "tranches '{}' and '{}' overlap or are out of order",
                    w[0].name, w[1].name
                )));
            }
        }
        Ok(Tranches(list))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: TrancheFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("tranche spec: {e}")))?;
        if let Some(v) = file.schema_version {
            if v != crate::SCHEMA_VERSION {
                return Err(Error::Config(format!(
                    "tranche spec schema_version {v} is not supported"
                )));
            }
        }
        Tranches::new(file.tranche)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&TrancheFile {
            schema_version: Some(crate::SCHEMA_VERSION),
            tranche: self.0.clone(),
        })
        .expect("tranches serialise")
    }

    /// One tranche covering `[start, end]`.
    pub fn single(name: &str, start: NaiveDate, end: NaiveDate) -> Result<Self> {
        Tranches::new(vec![TrancheSpec {
            name: name.to_string(),
            start,
            end,
            labels: BTreeMap::new(),
        }])
    }

    pub fn list(&self) -> &[TrancheSpec] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> &TrancheSpec {
        &self.0[index]
    }

    pub fn find(&self, date: NaiveDate) -> Option<usize> {
        self.0.iter().position(|t| t.contains(date))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|t| t.name == name)
    }
}

impl Default for Tranches {
    /// The six English survey periods, 26 April 2020 to 15 July 2021.
    fn default() -> Self {
        let rows = [
            (
                "T1",
                "2020-04-26",
                "2020-08-31",
                "Low",
                "Closed",
                "Not emerged",
                "Not emerged",
                "None",
            ),
            (
                "T2",
                "2020-09-01",
                "2020-11-14",
                "High",
                "Open",
                "Negligible",
                "Not emerged",
                "None",
            ),
            (
                "T3",
                "2020-11-15",
                "2020-12-31",
                "High",
                "Open",
                "Becomes dominant",
                "Not emerged",
                "Negligible",
            ),
            (
                "T4",
                "2021-01-01",
                "2021-02-14",
                "High",
                "Mainly closed",
                "Dominant",
                "Not emerged",
                ">10M 1st, negligible 2nd",
            ),
            (
                "T5",
                "2021-02-15",
                "2021-04-29",
                "Low",
                "Open",
                "Dominant",
                "Negligible",
                ">35M 1st, >15M 2nd",
            ),
            (
                "T6",
                "2021-04-30",
                "2021-07-15",
                "High",
                "Open",
                "Declining",
                "Becomes dominant",
                ">45M 1st, >35M 2nd",
            ),
        ];
        let list = rows
            .iter()
            .map(
                |&(name, s, e, prev, schools, alpha, delta, vacc)| TrancheSpec {
                    name: name.to_string(),
                    start: s.parse().unwrap(),
                    end: e.parse().unwrap(),
                    labels: [
                        ("prevalence", prev),
                        ("schools", schools),
                        ("alpha_variant", alpha),
                        ("delta_variant", delta),
                        ("vaccination", vacc),
                    ]
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect(),
                },
            )
            .collect();
        Tranches::new(list).expect("default tranches are valid")
    }
}

/// One participant's tranche-level summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParticipantSummary {
    pub pid: String,
    /// Minimum age recorded in the tranche.
    pub age: u32,
    pub patient_facing: bool,
    pub positive: bool,
    /// Maximal gene pattern over the positive visits of the household's episode.
    pub pattern: Option<PatternClass>,
    /// No visit inside the tranche; age and work status come from the nearest visit.
    pub imputed: bool,
}

/// Feature names understood by [`ParticipantSummary::feature`].
pub const KNOWN_FEATURES: [&str; 8] = [
    "age_2_11",
    "age_12_16",
    "age_0_16",
    "adult",
    "patient_facing",
    "pattern_or_n_s",
    "pattern_or_n",
    "pattern_other",
];

impl ParticipantSummary {
    pub fn feature(&self, name: &str) -> Option<bool> {
        let pat = |c| self.positive && self.pattern == Some(c);
        Some(match name {
            "age_2_11" => (2..=11).contains(&self.age),
            "age_12_16" => (12..=16).contains(&self.age),
            "age_0_16" => self.age <= 16,
            "adult" => self.age > 16,
            "patient_facing" => self.patient_facing,
            "pattern_or_n_s" => pat(PatternClass::OrNS),
            "pattern_or_n" => pat(PatternClass::OrN),
            "pattern_other" => pat(PatternClass::Other),
            _ => return None,
        })
    }

    pub fn feature_row(&self, cfg: &FeatureConfig) -> Result<FeatureRow> {
        let mut row = FeatureRow::EMPTY;
        for (col, name) in cfg.features().iter().enumerate() {
            let on = self.feature(name).ok_or_else(|| {
                Error::Config(format!(
                    "feature '{name}' cannot be derived from survey data; known features are {KNOWN_FEATURES:?}"
                ))
            })?;
            row = row.with(col, on);
        }
        Ok(row)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HouseholdSummary {
    pub hid: String,
    /// Participants ordered by PID.
    pub participants: Vec<ParticipantSummary>,
}

impl HouseholdSummary {
    pub fn size(&self) -> usize {
        self.participants.len()
    }

    pub fn n_positive(&self) -> usize {
        self.participants.iter().filter(|p| p.positive).count()
    }

    pub fn to_household(&self, cfg: &FeatureConfig) -> Result<Household> {
        let rows = self
            .participants
            .iter()
            .map(|p| p.feature_row(cfg))
            .collect::<Result<Vec<_>>>()?;
        let outcome = self
            .participants
            .iter()
            .enumerate()
            .fold(0u32, |acc, (i, p)| acc | (p.positive as u32) << i);
        Household::new(self.hid.clone(), rows, outcome)
    }
}

/// Households of one tranche, ready for modelling or exploration.
#[derive(Debug, Clone)]
pub struct TrancheData {
    pub tranche: TrancheSpec,
    pub households: Vec<HouseholdSummary>,
    /// Households left out for having more than six participants.
    pub dropped_oversize: usize,
}

impl TrancheData {
    pub fn build_cohort(&self, cfg: &FeatureConfig) -> Result<Cohort> {
        let hh = self
            .households
            .iter()
            .map(|h| h.to_household(cfg))
            .collect::<Result<Vec<_>>>()?;
        Cohort::new(hh, cfg.clone())
    }
}

/// Where a household's positives were assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HouseholdAssignment {
    pub first_positive: Option<NaiveDate>,
    /// Tranche holding the first positive, if any.
    pub positive_tranche: Option<usize>,
    /// Tranches with at least one visit by any member.
    pub visited: BTreeSet<usize>,
    /// Members with a positive visit at any time.
    pub positives: BTreeSet<String>,
    /// Excluded from every tranche (first positive precedes the first tranche).
    pub excluded: bool,
}

#[derive(Debug, Clone)]
struct Participant {
    pid: String,
    /// Visits sorted by date.
    visits: Vec<VisitRecord>,
}

#[derive(Debug, Clone)]
struct StudyHousehold {
    hid: String,
    participants: Vec<Participant>,
    assignment: HouseholdAssignment,
}

/// Records grouped by household and participant, with tranche assignment.
#[derive(Debug, Clone)]
pub struct Study {
    tranches: Tranches,
    households: Vec<StudyHousehold>,
    pub warnings: Vec<String>,
}

impl Study {
    pub fn from_records(records: Vec<VisitRecord>, tranches: Tranches) -> Result<Self> {
        let mut warnings = Vec::new();
        let mut by_hh: BTreeMap<String, BTreeMap<String, Vec<VisitRecord>>> = BTreeMap::new();
        let mut home: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for r in records {
            match home.get(&r.pid) {
                Some((hid, row)) if *hid != r.hid => {
                    return Err(Error::Parse {
                        path: "<records>".into(),
                        row: r.row,
                        message: format!(
                            "participant {} is in household {} but row {row} places them in {hid}",
                            r.pid, r.hid
                        ),
                    });
                }
                Some(_) => {}
                None => {
                    home.insert(r.pid.clone(), (r.hid.clone(), r.row));
                }
            }
            by_hh
                .entry(r.hid.clone())
                .or_default()
                .entry(r.pid.clone())
                .or_default()
                .push(r);
        }

        let mut households = Vec::with_capacity(by_hh.len());
        for (hid, members) in by_hh {
            let participants: Vec<Participant> = members
                .into_iter()
                .map(|(pid, mut visits)| {
                    visits.sort_by(|a, b| a.visit_date.cmp(&b.visit_date).then(a.row.cmp(&b.row)));
                    for w in visits.windows(2) {
                        if w[1].age + 1 < w[0].age {
                            let msg = format!(
                                "participant {pid}: age drops from {} on {} to {} on {}",
                                w[0].age, w[0].visit_date, w[1].age, w[1].visit_date
                            );
                            warn!("{msg}");
                            warnings.push(msg);
                            break;
                        }
                    }
                    Participant { pid, visits }
                })
                .collect();
            let assignment = assign(&hid, &participants, &tranches, &mut warnings);
            households.push(StudyHousehold {
                hid,
                participants,
                assignment,
            });
        }
        Ok(Study {
            tranches,
            households,
            warnings,
        })
    }

    pub fn tranches(&self) -> &Tranches {
        &self.tranches
    }

    pub fn n_households(&self) -> usize {
        self.households.len()
    }

    /// Household id → assignment of its positives.
    pub fn assign_tranche_positivity(&self) -> BTreeMap<&str, &HouseholdAssignment> {
        self.households
            .iter()
            .map(|h| (h.hid.as_str(), &h.assignment))
            .collect()
    }

    /// Per-tranche outcome map: household id → (participant id → tranche positivity).
    pub fn tranche_outcomes(&self, tranche: usize) -> BTreeMap<&str, BTreeMap<&str, bool>> {
        self.households
            .iter()
            .filter(|h| appears_in(&h.assignment, tranche))
            .map(|h| {
                let pos = h.assignment.positive_tranche == Some(tranche);
                let members = h
                    .participants
                    .iter()
                    .map(|p| {
                        (
                            p.pid.as_str(),
                            pos && h.assignment.positives.contains(&p.pid),
                        )
                    })
                    .collect();
                (h.hid.as_str(), members)
            })
            .collect()
    }

    /// Participant summaries of every household appearing in `tranche`,
    /// including households too large to model.
    pub fn build_features(&self, tranche: usize) -> Vec<HouseholdSummary> {
        let spec = self.tranches.get(tranche);
        self.households
            .iter()
            .filter(|h| appears_in(&h.assignment, tranche))
            .map(|h| {
                let episode = h.assignment.positive_tranche == Some(tranche);
                HouseholdSummary {
                    hid: h.hid.clone(),
                    participants: h
                        .participants
                        .iter()
                        .map(|p| summarise(p, spec, episode))
                        .collect(),
                }
            })
            .collect()
    }

    pub fn tranche_data(&self, tranche: usize) -> TrancheData {
        let all = self.build_features(tranche);
        let before = all.len();
        let households: Vec<_> = all
            .into_iter()
            .filter(|h| h.size() <= MAX_HOUSEHOLD_SIZE)
            .collect();
        TrancheData {
            tranche: self.tranches.get(tranche).clone(),
            dropped_oversize: before - households.len(),
            households,
        }
    }

    pub fn build_cohort(&self, tranche: usize, cfg: &FeatureConfig) -> Result<Cohort> {
        self.tranche_data(tranche).build_cohort(cfg)
    }
}

fn appears_in(a: &HouseholdAssignment, tranche: usize) -> bool {
    !a.excluded && (a.visited.contains(&tranche) || a.positive_tranche == Some(tranche))
}

fn assign(
    hid: &str,
    participants: &[Participant],
    tranches: &Tranches,
    warnings: &mut Vec<String>,
) -> HouseholdAssignment {
    let mut visited = BTreeSet::new();
    let mut positives = BTreeSet::new();
    let mut first_positive: Option<NaiveDate> = None;
    for p in participants {
        for v in &p.visits {
            if let Some(t) = tranches.find(v.visit_date) {
                visited.insert(t);
            }
            if v.test_result == TestResult::Positive {
                positives.insert(p.pid.clone());
                first_positive = Some(first_positive.map_or(v.visit_date, |d| d.min(v.visit_date)));
            }
        }
    }
    let mut excluded = false;
    let positive_tranche = first_positive.and_then(|d| {
        let t = tranches.find(d);
        if t.is_none() && d < tranches.get(0).start {
            let msg = format!("household {hid}: first positive {d} precedes the first tranche; household excluded");
            warn!("{msg}");
            warnings.push(msg);
            excluded = true;
        }
        t
    });
    HouseholdAssignment {
        first_positive,
        positive_tranche,
        visited,
        positives,
        excluded,
    }
}

fn summarise(p: &Participant, spec: &TrancheSpec, episode: bool) -> ParticipantSummary {
    let inside: Vec<&VisitRecord> = p
        .visits
        .iter()
        .filter(|v| spec.contains(v.visit_date))
        .collect();
    let (age, patient_facing, imputed) = if inside.is_empty() {
        let nearest = p
            .visits
            .iter()
            .min_by_key(|v| (spec.distance(v.visit_date), v.visit_date))
            .expect("participants have at least one visit");
        (nearest.age, nearest.work_pf, true)
    } else {
        (
            inside.iter().map(|v| v.age).min().unwrap(),
            inside.iter().any(|v| v.work_pf),
            false,
        )
    };
    let positive_patterns: Vec<Option<GeneSet>> = if episode {
        p.visits
            .iter()
            .filter(|v| v.test_result == TestResult::Positive)
            .map(|v| v.pattern)
            .collect()
    } else {
        Vec::new()
    };
    let positive = !positive_patterns.is_empty();
    ParticipantSummary {
        pid: p.pid.clone(),
        age,
        patient_facing,
        positive,
        pattern: if positive {
            maximal_pattern(&positive_patterns).ok()
        } else {
            None
        },
        imputed,
    }
}

/// Rows of the dataset-features summary.
pub const SUMMARY_ROWS: [&str; 9] = [
    "Number of participants",
    "Number of households",
    "Number of positive individuals",
    "Households with 1+ positive",
    "Children <12",
    "Children 12-16",
    "OR+N+S positives",
    "OR+N positives",
    "Patient-facing participants",
];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FeatureCounts {
    pub participants: usize,
    pub households: usize,
    pub positive_individuals: usize,
    pub households_with_positive: usize,
    pub children_under_12: usize,
    pub children_12_16: usize,
    pub or_n_s_positives: usize,
    pub or_n_positives: usize,
    pub patient_facing: usize,
}

impl FeatureCounts {
    pub fn values(&self) -> [usize; 9] {
        [
            self.participants,
            self.households,
            self.positive_individuals,
            self.households_with_positive,
            self.children_under_12,
            self.children_12_16,
            self.or_n_s_positives,
            self.or_n_positives,
            self.patient_facing,
        ]
    }
}

#[derive(Default)]
struct CountSets<'a> {
    participants: BTreeSet<&'a str>,
    households: BTreeSet<&'a str>,
    positives: BTreeSet<&'a str>,
    positive_households: BTreeSet<&'a str>,
    under_12: BTreeSet<&'a str>,
    age_12_16: BTreeSet<&'a str>,
    or_n_s: BTreeSet<&'a str>,
    or_n: BTreeSet<&'a str>,
    patient_facing: BTreeSet<&'a str>,
}

impl<'a> CountSets<'a> {
    fn add(&mut self, data: &'a [HouseholdSummary]) {
        for h in data {
            self.households.insert(&h.hid);
            if h.n_positive() > 0 {
                self.positive_households.insert(&h.hid);
            }
            for p in &h.participants {
                let id = p.pid.as_str();
                self.participants.insert(id);
                if p.positive {
                    self.positives.insert(id);
                }
                if p.feature("age_2_11") == Some(true) {
                    self.under_12.insert(id);
                }
                if p.feature("age_12_16") == Some(true) {
                    self.age_12_16.insert(id);
                }
                if p.feature("pattern_or_n_s") == Some(true) {
                    self.or_n_s.insert(id);
                }
                if p.feature("pattern_or_n") == Some(true) {
                    self.or_n.insert(id);
                }
                if p.patient_facing {
                    self.patient_facing.insert(id);
                }
            }
        }
    }

    fn counts(&self) -> FeatureCounts {
        FeatureCounts {
            participants: self.participants.len(),
            households: self.households.len(),
            positive_individuals: self.positives.len(),
            households_with_positive: self.positive_households.len(),
            children_under_12: self.under_12.len(),
            children_12_16: self.age_12_16.len(),
            or_n_s_positives: self.or_n_s.len(),
            or_n_positives: self.or_n.len(),
            patient_facing: self.patient_facing.len(),
        }
    }
}

/// Per-tranche counts plus an overall column over distinct participants and
/// households.
pub fn features_summary(data: &[TrancheData]) -> (Vec<FeatureCounts>, FeatureCounts) {
    let mut overall = CountSets::default();
    let per = data
        .iter()
        .map(|t| {
            let mut sets = CountSets::default();
            sets.add(&t.households);
            overall.add(&t.households);
            sets.counts()
        })
        .collect();
    (per, overall.counts())
}
