//! Exploratory household statistics: attack-rate histograms, two-group
//! positivity densities and within-household pair tables with Pearson
//! residuals.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{PatternClass, TrancheData};
use crate::SCHEMA_VERSION;

pub use crate::ingest::maximal_pattern;

/// Household sizes shown in the attack-rate histogram.
pub const HISTOGRAM_SIZES: std::ops::RangeInclusive<usize> = 2..=6;
pub const DEFAULT_KERNEL_WIDTH: f64 = 0.125;
pub const DEFAULT_GRID: usize = 100;
/// Split used for density plots: 16 and under versus over 16.
pub const DEFAULT_SPLIT_FEATURE: &str = "age_0_16";

/// Counts of households by size and number of positives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackHistogram {
    /// `counts[size][positives]`.
    counts: Vec<Vec<u64>>,
}

impl AttackHistogram {
    /// Number of size-`size` households with `positives` positives.
    pub fn get(&self, positives: usize, size: usize) -> u64 {
        self.counts
            .get(size)
            .and_then(|row| row.get(positives))
            .copied()
            .unwrap_or(0)
    }

    pub fn households_of_size(&self, size: usize) -> u64 {
        self.counts.get(size).map_or(0, |row| row.iter().sum())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["schema_version", "size", "positives", "count"])?;
        for size in HISTOGRAM_SIZES {
            for k in 0..=size {
                w.write_record([
                    SCHEMA_VERSION.to_string(),
                    size.to_string(),
                    k.to_string(),
                    self.get(k, size).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<histogram csv>", e))?;
        Ok(())
    }
}

/// Histogram from `(size, positives)` pairs; sizes outside 2..=6 are ignored.
pub fn histogram(households: impl IntoIterator<Item = (usize, usize)>) -> AttackHistogram {
    let max = *HISTOGRAM_SIZES.end();
    let mut counts: Vec<Vec<u64>> = (0..=max).map(|s| vec![0; s + 1]).collect();
    for (size, positives) in households {
        if HISTOGRAM_SIZES.contains(&size) && positives <= size {
            counts[size][positives] += 1;
        }
    }
    AttackHistogram { counts }
}

pub fn tranche_histogram(data: &TrancheData) -> AttackHistogram {
    histogram(data.households.iter().map(|h| (h.size(), h.n_positive())))
}

/// Square-kernel density estimate of household positivity points on a
/// cell-centred grid over the unit square.
#[derive(Debug, Clone, Serialize)]
pub struct DensityField {
    pub points: Vec<(f64, f64)>,
    /// Households without a positive or without members on both sides of the split.
    pub excluded: usize,
    pub width: f64,
    pub grid: usize,
    /// `values[i * grid + j]` at `(coord(i), coord(j))`.
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.grid as f64
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid + j]
    }

    /// Midpoint-rule integral over the unit square.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / (self.grid * self.grid) as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["schema_version", "x", "y", "value"])?;
        for i in 0..self.grid {
            for j in 0..self.grid {
                w.write_record([
                    SCHEMA_VERSION.to_string(),
                    format!("{:.6}", self.coord(i)),
                    format!("{:.6}", self.coord(j)),
                    format!("{:.9e}", self.value(i, j)),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<density csv>", e))?;
        Ok(())
    }
}

/// Positivity point of one household, given `(split, positive)` per member:
/// positive fraction among members with the split feature, then among those
/// without. `None` unless there is a positive and both groups are present.
pub fn positivity_point(members: &[(bool, bool)]) -> Option<(f64, f64)> {
    let count = |split: bool| members.iter().filter(|m| m.0 == split).count();
    let positive = |split: bool| members.iter().filter(|m| m.0 == split && m.1).count();
    let (n1, n0) = (count(true), count(false));
    if n1 == 0 || n0 == 0 || positive(true) + positive(false) == 0 {
        return None;
    }
    Some((
        positive(true) as f64 / n1 as f64,
        positive(false) as f64 / n0 as f64,
    ))
}

/// Sums a width-`width` square kernel around every eligible household point.
/// Each kernel is normalised over the grid cells it covers, so points on the
/// boundary keep unit mass and the field integrates to one.
pub fn density_points<I>(households: I, width: f64, grid: usize) -> Result<DensityField>
where
    I: IntoIterator,
    I::Item: AsRef<[(bool, bool)]>,
{
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::Config(format!(
            "kernel width {width} must be positive"
        )));
    }
    if grid == 0 {
        return Err(Error::Config("density grid needs at least one cell".into()));
    }
    let mut points = Vec::new();
    let mut excluded = 0;
    for h in households {
        match positivity_point(h.as_ref()) {
            Some(p) => points.push(p),
            None => excluded += 1,
        }
    }
    let coord = |i: usize| (i as f64 + 0.5) / grid as f64;
    let covered = |c: f64| -> Vec<usize> {
        let inside: Vec<usize> = (0..grid)
            .filter(|&i| (coord(i) - c).abs() < width)
            .collect();
        if inside.is_empty() {
            // Narrower than a cell: the nearest cell takes the mass.
            vec![((c * grid as f64).floor() as usize).min(grid - 1)]
        } else {
            inside
        }
    };
    let mut values = vec![0.0; grid * grid];
    let cell_area = 1.0 / (grid * grid) as f64;
    for &(x, y) in &points {
        let (xs, ys) = (covered(x), covered(y));
        let height = 1.0 / ((xs.len() * ys.len()) as f64 * cell_area * points.len() as f64);
        for &i in &xs {
            for &j in &ys {
                values[i * grid + j] += height;
            }
        }
    }
    Ok(DensityField {
        points,
        excluded,
        width,
        grid,
        values,
    })
}

/// Density field of a tranche, splitting members on a named feature.
pub fn tranche_density(
    data: &TrancheData,
    split_feature: &str,
    width: f64,
    grid: usize,
) -> Result<DensityField> {
    let households = data
        .households
        .iter()
        .map(|h| {
            h.participants
                .iter()
                .map(|p| {
                    let split = p.feature(split_feature).ok_or_else(|| {
                        Error::Config(format!("unknown split feature '{split_feature}'"))
                    })?;
                    Ok((split, p.positive))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    density_points(households, width, grid)
}

/// Within-household pair counts, the independence expectation and Pearson residuals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairTable {
    pub states: Vec<String>,
    /// Ordered pairs of distinct members: `y[a][b]`.
    pub y: Vec<Vec<u64>>,
    pub e: Vec<Vec<f64>>,
    /// `(y − e)/√e`; zero when both vanish, `+∞` when only `e` does.
    pub r: Vec<Vec<f64>>,
    /// Members in each state.
    pub z: Vec<u64>,
    /// Σ n(n − 1) over the households.
    pub denom: u64,
    pub households: usize,
}

impl PairTable {
    /// Cells with pairs observed where none are expected.
    pub fn flagged(&self) -> Vec<(usize, usize)> {
        let k = self.states.len();
        (0..k)
            .flat_map(|a| (0..k).map(move |b| (a, b)))
            .filter(|&(a, b)| self.r[a][b] == f64::INFINITY)
            .collect()
    }

    pub fn write_pairs_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "schema_version",
            "state_a",
            "state_b",
            "observed",
            "expected",
        ])?;
        for (a, sa) in self.states.iter().enumerate() {
            for (b, sb) in self.states.iter().enumerate() {
                w.write_record([
                    SCHEMA_VERSION.to_string(),
                    sa.clone(),
                    sb.clone(),
                    self.y[a][b].to_string(),
                    format!("{:.6}", self.e[a][b]),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<pairs csv>", e))?;
        Ok(())
    }

    pub fn write_residuals_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["schema_version", "state_a", "state_b", "residual"])?;
        for (a, sa) in self.states.iter().enumerate() {
            for (b, sb) in self.states.iter().enumerate() {
                w.write_record([
                    SCHEMA_VERSION.to_string(),
                    sa.clone(),
                    sb.clone(),
                    format!("{:.6}", self.r[a][b]),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<residuals csv>", e))?;
        Ok(())
    }
}

/// Builds the pair table from households given as lists of state indices
/// into `states`. Expected counts use `π̂_A = z_A / Σ n`.
pub fn pair_residuals(households: &[Vec<usize>], states: &[String]) -> Result<PairTable> {
    let k = states.len();
    if households.is_empty() {
        return Err(Error::Domain(
            "pair table needs at least one household".into(),
        ));
    }
    let mut y = vec![vec![0u64; k]; k];
    let mut z = vec![0u64; k];
    let mut denom = 0u64;
    let mut members = 0u64;
    for h in households {
        let mut counts = vec![0u64; k];
        for &s in h {
            if s >= k {
                return Err(Error::Domain(format!(
                    "state index {s} outside the {k} labels"
                )));
            }
            counts[s] += 1;
        }
        for a in 0..k {
            z[a] += counts[a];
            for b in 0..k {
                y[a][b] += counts[a] * (counts[b] - u64::from(a == b).min(counts[b]));
            }
        }
        let n = h.len() as u64;
        members += n;
        denom += n * n.saturating_sub(1);
    }
    let pi: Vec<f64> = z.iter().map(|&c| c as f64 / members as f64).collect();
    let e: Vec<Vec<f64>> = (0..k)
        .map(|a| (0..k).map(|b| pi[a] * pi[b] * denom as f64).collect())
        .collect();
    let r = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| {
                    let (obs, exp) = (y[a][b] as f64, e[a][b]);
                    if exp > 0.0 {
                        (obs - exp) / exp.sqrt()
                    } else if obs > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(PairTable {
        states: states.to_vec(),
        y,
        e,
        r,
        z,
        denom,
        households: households.len(),
    })
}

/// Labels of the gene-pattern pair table: the three positive classes then negative.
pub fn pattern_states() -> Vec<String> {
    PatternClass::ALL
        .iter()
        .map(|c| c.label().to_string())
        .chain(std::iter::once("Negative".to_string()))
        .collect()
}

/// Pattern pair table over the tranche's households with at least one positive.
pub fn tranche_pairs(data: &TrancheData) -> Result<PairTable> {
    let households: Vec<Vec<usize>> = data
        .households
        .iter()
        .filter(|h| h.n_positive() > 0)
        .map(|h| {
            h.participants
                .iter()
                .map(|p| match (p.positive, p.pattern) {
                    (true, Some(c)) => PatternClass::ALL.iter().position(|&x| x == c).unwrap(),
                    (true, None) => 2,
                    (false, _) => 3,
                })
                .collect()
        })
        .collect();
    pair_residuals(&households, &pattern_states())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn histogram_counts() {
        let h = histogram([(2, 0), (2, 1), (2, 2)]);
        assert_eq!((h.get(0, 2), h.get(1, 2), h.get(2, 2)), (1, 1, 1));
        let neg = histogram([(3, 0), (4, 0), (4, 0)]);
        assert_eq!(neg.get(0, 4), 2);
        assert_eq!(neg.households_of_size(4), 2);
        assert_eq!((1..=4).map(|k| neg.get(k, 4)).sum::<u64>(), 0);
        assert_eq!(histogram([(1, 1), (7, 2)]).households_of_size(1), 0);
    }

    #[test]
    fn positivity_point_examples() {
        // Two adults (one positive) and one child (positive); split = child.
        let p = positivity_point(&[(false, true), (false, false), (true, true)]);
        assert_eq!(p, Some((1.0, 0.5)));
        assert_eq!(positivity_point(&[(false, false), (true, false)]), None);
        assert_eq!(positivity_point(&[(false, true), (false, false)]), None);
    }

    #[test]
    fn single_point_kernel_is_flat_box() {
        let f = density_points(
            [vec![(true, true), (false, true), (false, false)]],
            0.25,
            100,
        )
        .unwrap();
        assert_eq!(f.points, vec![(1.0, 0.5)]);
        let centre = density_points(
            [vec![
                (true, true),
                (true, false),
                (false, true),
                (false, false),
            ]],
            0.25,
            100,
        )
        .unwrap();
        assert_eq!(centre.points, vec![(0.5, 0.5)]);
        let inside = centre.value(50, 50);
        for i in 0..100 {
            for j in 0..100 {
                let (x, y) = (centre.coord(i), centre.coord(j));
                let v = centre.value(i, j);
                if (x - 0.5).abs() < 0.25 && (y - 0.5).abs() < 0.25 {
                    assert_relative_eq!(v, inside);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        // Box of side 0.5 holds unit mass: height 4.
        assert_relative_eq!(inside, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn boundary_points_keep_unit_mass() {
        let f = density_points([vec![(true, true), (false, false)]], 0.125, 50).unwrap();
        assert_eq!(f.points, vec![(1.0, 0.0)]);
        assert!((f.integral() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_width_is_rejected() {
        assert!(density_points(Vec::<Vec<(bool, bool)>>::new(), 0.0, 10).is_err());
    }

    #[test]
    fn two_household_pair_table() {
        let t = pair_residuals(&[vec![0, 0], vec![0, 1]], &labels(2)).unwrap();
        assert_eq!(t.y, vec![vec![2, 1], vec![1, 0]]);
        assert_eq!(t.z, vec![3, 1]);
        assert_eq!(t.denom, 4);
        assert_relative_eq!(t.e[0][0], 2.25);
        assert_relative_eq!(t.r[0][0], -1.0 / 6.0, epsilon = 1e-12);
        assert_relative_eq!(t.r[0][1], 0.25 / 0.75f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn monochrome_households_cluster() {
        let hh: Vec<Vec<usize>> = (0..30).map(|i| vec![i % 3; 2 + i % 4]).collect();
        let t = pair_residuals(&hh, &labels(3)).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                if a == b {
                    assert!(t.r[a][b] > 0.0);
                } else {
                    assert!(t.r[a][b] < 0.0);
                }
            }
        }
    }

    #[test]
    fn unexpected_pairs_are_flagged() {
        // An impossible configuration by construction: tamper with expected counts.
        let mut t = pair_residuals(&[vec![0, 1]], &labels(3)).unwrap();
        assert_eq!(t.r[2][2], 0.0);
        assert!(t.flagged().is_empty());
        t.r[0][2] = f64::INFINITY;
        assert_eq!(t.flagged(), vec![(0, 2)]);
    }

    #[test]
    fn empty_household_set_is_an_error() {
        assert!(pair_residuals(&[], &labels(2)).is_err());
    }

    proptest! {
        #[test]
        fn pair_totals(hh in prop::collection::vec(prop::collection::vec(0usize..4, 1..=6), 1..40)) {
            let t = pair_residuals(&hh, &labels(4)).unwrap();
            let total: u64 = t.y.iter().flatten().sum();
            prop_assert_eq!(total, t.denom);
            for a in 0..4 {
                for b in 0..4 {
                    prop_assert_eq!(t.y[a][b], t.y[b][a]);
                }
            }
        }

        #[test]
        fn residuals_follow_state_relabelling(
            hh in prop::collection::vec(prop::collection::vec(0usize..3, 1..=6), 1..30),
        ) {
            let perm = [2usize, 0, 1];
            let relabelled: Vec<Vec<usize>> = hh.iter().map(|h| h.iter().map(|&s| perm[s]).collect()).collect();
            let t = pair_residuals(&hh, &labels(3)).unwrap();
            let u = pair_residuals(&relabelled, &labels(3)).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    let (x, y) = (t.r[a][b], u.r[perm[a]][perm[b]]);
                    prop_assert!(x == y || (x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn density_integrates_to_one(
            hh in prop::collection::vec(prop::collection::vec((any::<bool>(), any::<bool>()), 1..=6), 1..30),
            width in 0.01f64..0.6,
        ) {
            let f = density_points(&hh, width, 40).unwrap();
            prop_assert!(f.values.iter().all(|v| *v >= 0.0));
            if !f.points.is_empty() {
                prop_assert!((f.integral() - 1.0).abs() < 1e-6);
            }
        }
    }
}
