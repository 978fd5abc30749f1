//! Cumulative time series and the pure analytics computed over them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Metric {
    Confirmed,
    Deceased,
    Recovered,
    TestedPositive,
    TestedNegative,
    Hospitalized,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Confirmed,
        Metric::Deceased,
        Metric::Recovered,
        Metric::TestedPositive,
        Metric::TestedNegative,
        Metric::Hospitalized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Confirmed => "confirmed",
            Metric::Deceased => "deceased",
            Metric::Recovered => "recovered",
            Metric::TestedPositive => "tested_positive",
            Metric::TestedNegative => "tested_negative",
            Metric::Hospitalized => "hospitalized",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown metric `{0}`")]
pub struct UnknownMetric(pub String);

impl FromStr for Metric {
    type Err = UnknownMetric;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "confirmed" | "cases" | "positive_cases" => Metric::Confirmed,
            "deceased" | "deaths" | "death" => Metric::Deceased,
            "recovered" | "recoveries" => Metric::Recovered,
            "tested_positive" => Metric::TestedPositive,
            "tested_negative" => Metric::TestedNegative,
            "hospitalized" | "hospitalised" => Metric::Hospitalized,
            _ => return Err(UnknownMetric(s.to_string())),
        })
    }
}

/// Where a stored value came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub fetched_at: DateTime<Utc>,
}

impl Provenance {
    pub fn new(source_id: impl Into<String>, fetched_at: DateTime<Utc>) -> Self {
        Self {
            source_id: source_id.into(),
            fetched_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub value: u64,
    pub provenance: Provenance,
}

/// One (region, metric) row of the compact table: date → cumulative count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CumulativeSeries {
    pub region_id: String,
    pub metric: Metric,
    pub points: BTreeMap<NaiveDate, Point>,
}

impl CumulativeSeries {
    pub fn new(region_id: impl Into<String>, metric: Metric) -> Self {
        Self {
            region_id: region_id.into(),
            metric,
            points: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn last(&self) -> Option<(NaiveDate, &Point)> {
        self.points.iter().next_back().map(|(d, p)| (*d, p))
    }

    pub fn first(&self) -> Option<(NaiveDate, &Point)> {
        self.points.iter().next().map(|(d, p)| (*d, p))
    }

    /// Stored value at exactly `date`.
    pub fn get(&self, date: NaiveDate) -> Option<u64> {
        self.points.get(&date).map(|p| p.value)
    }

    /// Latest point on or before `date` (forward-fill semantics).
    pub fn point_at(&self, date: NaiveDate) -> Option<(NaiveDate, &Point)> {
        self.points.range(..=date).next_back().map(|(d, p)| (*d, p))
    }

    pub fn value_at(&self, date: NaiveDate) -> Option<u64> {
        self.point_at(date).map(|(_, p)| p.value)
    }

    /// Latest point strictly before `date`.
    pub fn point_before(&self, date: NaiveDate) -> Option<(NaiveDate, &Point)> {
        self.points.range(..date).next_back().map(|(d, p)| (*d, p))
    }

    /// Earliest point strictly after `date`.
    pub fn point_after(&self, date: NaiveDate) -> Option<(NaiveDate, &Point)> {
        use std::ops::Bound::{Excluded, Unbounded};
        self.points
            .range((Excluded(date), Unbounded))
            .next()
            .map(|(d, p)| (*d, p))
    }

    pub fn values(&self) -> Vec<(NaiveDate, u64)> {
        self.points.iter().map(|(d, p)| (*d, p.value)).collect()
    }

    pub fn is_non_decreasing(&self) -> bool {
        is_non_decreasing(self.points.values().map(|p| p.value))
    }
}

pub fn is_non_decreasing<I: IntoIterator<Item = u64>>(values: I) -> bool {
    let mut prev = None;
    for v in values {
        if prev.is_some_and(|p| v < p) {
            return false;
        }
        prev = Some(v);
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalyticsError {
    #[error("value {new} does not decrease from the last stored value {last}")]
    NotADecrease { last: u64, new: u64 },
    #[error("repair date {new} must be after the last stored date {last}")]
    DateNotAfterLast { last: NaiveDate, new: NaiveDate },
    #[error("population must be positive")]
    ZeroPopulation,
    #[error("threshold must be positive")]
    ZeroThreshold,
}

/// Restores monotonicity ahead of appending a lower total.
///
/// Walking backward from the most recent point, every value above
/// `new_value` is clamped down to it; the walk stops at the first value that
/// is already `<= new_value`. The new point is then appended. Equal values are
/// appended unchanged.
pub fn monotonic_repair(
    series: &CumulativeSeries,
    new_date: NaiveDate,
    new_value: u64,
) -> Result<Vec<(NaiveDate, u64)>, AnalyticsError> {
    let Some((last_date, last)) = series.last() else {
        return Err(AnalyticsError::NotADecrease { last: 0, new: new_value });
    };
    if new_value > last.value {
        return Err(AnalyticsError::NotADecrease {
            last: last.value,
            new: new_value,
        });
    }
    if new_date <= last_date {
        return Err(AnalyticsError::DateNotAfterLast {
            last: last_date,
            new: new_date,
        });
    }
    let mut points = series.values();
    for (_, value) in points.iter_mut().rev() {
        if *value <= new_value {
            break;
        }
        *value = new_value;
    }
    points.push((new_date, new_value));
    Ok(points)
}

/// First differences; the first point is kept as-is.
pub fn daily_new(series: &CumulativeSeries) -> BTreeMap<NaiveDate, i64> {
    let mut prev = 0i64;
    series
        .points
        .iter()
        .map(|(d, p)| {
            let v = p.value as i64;
            let diff = v - prev;
            prev = v;
            (*d, diff)
        })
        .collect()
}

/// Exact `value * 1_000_000 / population`.
pub fn per_million(value: u64, population: u64) -> Result<Ratio<u128>, AnalyticsError> {
    if population == 0 {
        return Err(AnalyticsError::ZeroPopulation);
    }
    Ok(Ratio::new(value as u128 * 1_000_000, population as u128))
}

pub fn ratio_to_f64(r: &Ratio<u128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Alignment {
    Aligned {
        /// Calendar date that became relative day 0.
        origin: NaiveDate,
        /// Relative day → value, for every stored point from the origin on.
        days: BTreeMap<i64, u64>,
    },
    BelowThreshold,
}

/// Re-indexes the series to days since the first value `>= threshold`.
pub fn align_at_threshold(
    series: &CumulativeSeries,
    threshold: u64,
) -> Result<Alignment, AnalyticsError> {
    if threshold == 0 {
        return Err(AnalyticsError::ZeroThreshold);
    }
    let Some((origin, _)) = series.points.iter().find(|(_, p)| p.value >= threshold) else {
        return Ok(Alignment::BelowThreshold);
    };
    let origin = *origin;
    let days = series
        .points
        .range(origin..)
        .map(|(d, p)| ((*d - origin).num_days(), p.value))
        .collect();
    Ok(Alignment::Aligned { origin, days })
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    fn repaired_values(values: &[u64], new: u64) -> Vec<u64> {
        let s = series_of(values);
        monotonic_repair(&s, day(values.len() as i64), new)
            .unwrap()
            .into_iter()
            .map(|(_, v)| v)
            .collect()
    }

    #[test]
    fn repair_clamps_minimal_suffix() {
        assert_eq!(repaired_values(&[10, 12, 15], 14), vec![10, 12, 14, 14]);
        assert_eq!(repaired_values(&[10, 12, 15], 11), vec![10, 11, 11, 11]);
    }

    #[test]
    fn repair_accepts_equality() {
        assert_eq!(repaired_values(&[10], 10), vec![10, 10]);
    }

    #[test]
    fn repair_rejects_increase_and_stale_date() {
        let s = series_of(&[10, 12]);
        assert_eq!(
            monotonic_repair(&s, day(5), 13).unwrap_err(),
            AnalyticsError::NotADecrease { last: 12, new: 13 }
        );
        assert!(matches!(
            monotonic_repair(&s, day(1), 11),
            Err(AnalyticsError::DateNotAfterLast { .. })
        ));
    }

    #[test]
    fn daily_new_differences() {
        let d: Vec<_> = daily_new(&series_of(&[10, 12, 15])).into_values().collect();
        assert_eq!(d, vec![10, 2, 3]);
    }

    #[test]
    fn per_million_arithmetic() {
        assert_eq!(per_million(500, 2_000_000).unwrap(), Ratio::from_integer(250));
        assert_eq!(per_million(1, 0).unwrap_err(), AnalyticsError::ZeroPopulation);
    }

    #[test]
    fn alignment_examples() {
        let s = series_of(&[80, 120, 200]);
        let Alignment::Aligned { origin, days } = align_at_threshold(&s, 100).unwrap() else {
            panic!("expected aligned");
        };
        assert_eq!(origin, day(1));
        assert_eq!(days, BTreeMap::from([(0, 120), (1, 200)]));

        let s = series_of(&[5, 7]);
        let Alignment::Aligned { origin, .. } = align_at_threshold(&s, 1).unwrap() else {
            panic!("expected aligned");
        };
        assert_eq!(origin, day(0));

        assert_eq!(
            align_at_threshold(&series_of(&[10, 99]), 100).unwrap(),
            Alignment::BelowThreshold
        );
        assert_eq!(
            align_at_threshold(&s, 0).unwrap_err(),
            AnalyticsError::ZeroThreshold
        );
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("Deaths".parse::<Metric>().unwrap(), Metric::Deceased);
        assert_eq!("tested-positive".parse::<Metric>().unwrap(), Metric::TestedPositive);
        assert!("foo".parse::<Metric>().is_err());
        for m in Metric::ALL {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn non_decreasing() -> impl Strategy<Value = Vec<u64>> {
            prop::collection::vec(0u64..50, 1..30).prop_map(|steps| {
                let mut acc = 0;
                steps
                    .into_iter()
                    .map(|s| {
                        acc += s;
                        acc
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn daily_new_telescopes(values in non_decreasing()) {
                let s = series_of(&values);
                let total: i64 = daily_new(&s).values().sum();
                prop_assert_eq!(total, *values.last().unwrap() as i64);
            }

            #[test]
            fn repair_is_monotone_and_ends_at_new(values in non_decreasing(), frac in 0.0f64..=1.0) {
                let last = *values.last().unwrap();
                let new = (last as f64 * frac) as u64;
                let s = series_of(&values);
                let out = monotonic_repair(&s, day(values.len() as i64), new).unwrap();
                prop_assert!(is_non_decreasing(out.iter().map(|(_, v)| *v)));
                prop_assert_eq!(out.last().unwrap().1, new);
            }
        }
    }
}
