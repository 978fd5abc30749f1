//! Committed data: the region tree, cumulative series (compact table) and
//! per-case records (expanded table).

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::region::{Region, RegionError, RegionTree};
use crate::series::{
    is_non_decreasing, monotonic_repair, per_million, CumulativeSeries, Metric, Point, Provenance,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("committing {value} at {date} to {region}/{metric} would break monotonic order")]
    MonotonicityViolation {
        region: String,
        metric: Metric,
        date: NaiveDate,
        value: u64,
    },
    #[error("history payload for {region}/{metric} is not sorted and non-decreasing")]
    NonMonotonicPayload { region: String, metric: Metric },
    #[error("history payload for {region}/{metric} is empty")]
    EmptyHistory { region: String, metric: Metric },
    #[error("date range is empty")]
    EmptyDateRange,
    #[error("invalid case record `{0}`: {1}")]
    InvalidRecord(String, String),
    #[error(transparent)]
    Region(#[from] RegionError),
}

/// One expanded-table row: a single case or a small cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub record_id: String,
    pub region_id: String,
    pub report_date: NaiveDate,
    pub cluster_size: u32,
    pub metric: Metric,
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
    #[serde(default)]
    pub summary: String,
    pub source_refs: Vec<String>,
}

impl CaseRecord {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.cluster_size == 0 {
            return Err(StoreError::InvalidRecord(
                self.record_id.clone(),
                "cluster_size must be at least 1".into(),
            ));
        }
        if self.source_refs.iter().all(|r| r.trim().is_empty()) {
            return Err(StoreError::InvalidRecord(
                self.record_id.clone(),
                "at least one source reference is required".into(),
            ));
        }
        Ok(())
    }
}

/// Summary row for presentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatRow {
    pub region_id: String,
    pub confirmed: u64,
    pub deceased: u64,
    pub recovered: Option<u64>,
    pub confirmed_per_million: Option<Ratio<u128>>,
    pub deceased_per_million: Option<Ratio<u128>>,
    pub fatality_rate: Option<Ratio<u128>>,
    pub health_dept_contact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ActiveCount {
    Active { value: u64 },
    DataInconsistent {
        confirmed: u64,
        deceased: u64,
        recovered: u64,
    },
}

/// Regions × dates matrix of forward-filled cumulative values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CompactTable {
    pub metric: Metric,
    pub dates: Vec<NaiveDate>,
    pub rows: Vec<(String, Vec<u64>)>,
}

impl CompactTable {
    /// Header `region_id,<date>,...` then one line per region, `\n` terminated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("region_id");
        for d in &self.dates {
            out.push(',');
            out.push_str(&d.format("%Y-%m-%d").to_string());
        }
        out.push('\n');
        for (region, values) in &self.rows {
            out.push_str(&csv_field(region));
            for v in values {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

type SeriesMap = BTreeMap<String, BTreeMap<Metric, CumulativeSeries>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Store {
    regions: RegionTree,
    series: SeriesMap,
    cases: BTreeMap<String, CaseRecord>,
    #[serde(default)]
    contacts: BTreeMap<String, String>,
}

impl Store {
    pub fn new(regions: RegionTree) -> Self {
        Self {
            regions,
            ..Self::default()
        }
    }

    pub fn regions(&self) -> &RegionTree {
        &self.regions
    }

    pub fn regions_mut(&mut self) -> &mut RegionTree {
        &mut self.regions
    }

    pub fn register_region(&mut self, region: Region) -> Result<Region, StoreError> {
        Ok(self.regions.register_region(region)?)
    }

    pub fn set_contact(&mut self, region_id: &str, contact: impl Into<String>) -> Result<(), StoreError> {
        self.require_region(region_id)?;
        self.contacts.insert(region_id.to_string(), contact.into());
        Ok(())
    }

    fn require_region(&self, region_id: &str) -> Result<&Region, StoreError> {
        self.regions
            .get(region_id)
            .ok_or_else(|| StoreError::UnknownRegion(region_id.to_string()))
    }

    pub fn series(&self, region_id: &str, metric: Metric) -> Option<&CumulativeSeries> {
        self.series.get(region_id)?.get(&metric)
    }

    pub fn all_series(&self) -> impl Iterator<Item = &CumulativeSeries> {
        self.series.values().flat_map(|m| m.values())
    }

    fn series_entry(&mut self, region_id: &str, metric: Metric) -> &mut CumulativeSeries {
        self.series
            .entry(region_id.to_string())
            .or_default()
            .entry(metric)
            .or_insert_with(|| CumulativeSeries::new(region_id, metric))
    }

    /// Stores one gate-approved value. Re-committing the same value is a no-op.
    pub fn commit_point(
        &mut self,
        region_id: &str,
        metric: Metric,
        date: NaiveDate,
        value: u64,
        provenance: Provenance,
    ) -> Result<&CumulativeSeries, StoreError> {
        self.require_region(region_id)?;
        if let Some(series) = self.series(region_id, metric) {
            if series.get(date) == Some(value) {
                return Ok(self.series(region_id, metric).expect("checked above"));
            }
            let below_ok = series.point_before(date).is_none_or(|(_, p)| p.value <= value);
            let above_ok = series.point_after(date).is_none_or(|(_, p)| p.value >= value);
            if !(below_ok && above_ok) {
                return Err(StoreError::MonotonicityViolation {
                    region: region_id.to_string(),
                    metric,
                    date,
                    value,
                });
            }
        }
        let series = self.series_entry(region_id, metric);
        series.points.insert(date, Point { value, provenance });
        Ok(series)
    }

    /// Atomically replaces the whole series with an authoritative revision.
    ///
    /// Returns `false` when the payload matches what is stored. Points whose
    /// value is unchanged keep their original provenance.
    pub fn replace_history(
        &mut self,
        region_id: &str,
        metric: Metric,
        full_points: &[(NaiveDate, u64)],
        provenance: Provenance,
    ) -> Result<bool, StoreError> {
        self.require_region(region_id)?;
        if full_points.is_empty() {
            return Err(StoreError::EmptyHistory {
                region: region_id.to_string(),
                metric,
            });
        }
        if !history_is_valid(full_points) {
            return Err(StoreError::NonMonotonicPayload {
                region: region_id.to_string(),
                metric,
            });
        }
        let current = self
            .series(region_id, metric)
            .map(CumulativeSeries::values)
            .unwrap_or_default();
        if current == full_points {
            return Ok(false);
        }
        let series = self.series_entry(region_id, metric);
        let old = std::mem::take(&mut series.points);
        for (date, value) in full_points {
            let provenance = match old.get(date) {
                Some(p) if p.value == *value => p.provenance.clone(),
                _ => provenance.clone(),
            };
            series.points.insert(*date, Point { value: *value, provenance });
        }
        Ok(true)
    }

    /// Commits `value` at `date`, clamping earlier history down where needed
    /// so the series stays non-decreasing. Returns how many earlier points
    /// were rewritten.
    ///
    /// Fails if a later stored point is below `value`.
    pub fn commit_with_repair(
        &mut self,
        region_id: &str,
        metric: Metric,
        date: NaiveDate,
        value: u64,
        provenance: Provenance,
    ) -> Result<usize, StoreError> {
        self.require_region(region_id)?;
        let Some(series) = self.series(region_id, metric) else {
            self.commit_point(region_id, metric, date, value, provenance)?;
            return Ok(0);
        };
        if series.point_after(date).is_some_and(|(_, p)| p.value < value) {
            return Err(StoreError::MonotonicityViolation {
                region: region_id.to_string(),
                metric,
                date,
                value,
            });
        }
        let mut head = CumulativeSeries::new(region_id, metric);
        head.points = series.points.range(..date).map(|(d, p)| (*d, p.clone())).collect();
        let needs_repair = head.last().is_some_and(|(_, p)| p.value > value);
        if !needs_repair {
            self.commit_point(region_id, metric, date, value, provenance)?;
            return Ok(0);
        }
        let repaired = monotonic_repair(&head, date, value).expect("decrease and later date checked");
        let series = self.series_entry(region_id, metric);
        let mut clamped = 0;
        for (d, v) in repaired {
            let point = series.points.entry(d).or_insert_with(|| Point {
                value: v,
                provenance: provenance.clone(),
            });
            if point.value != v || d == date {
                if d != date {
                    clamped += 1;
                }
                *point = Point {
                    value: v,
                    provenance: provenance.clone(),
                };
            }
        }
        Ok(clamped)
    }

    pub fn insert_case(&mut self, record: CaseRecord) -> Result<(), StoreError> {
        self.require_region(&record.region_id)?;
        record.validate()?;
        self.cases.insert(record.record_id.clone(), record);
        Ok(())
    }

    pub fn case(&self, record_id: &str) -> Option<&CaseRecord> {
        self.cases.get(record_id)
    }

    pub fn cases(&self) -> impl Iterator<Item = &CaseRecord> {
        self.cases.values()
    }

    pub fn cases_in_region<'a>(&'a self, region_id: &'a str) -> impl Iterator<Item = &'a CaseRecord> {
        self.cases.values().filter(move |c| c.region_id == region_id)
    }

    /// Per-(region, metric) cumulative counts from case records.
    pub fn aggregate_case_records<'a, I>(
        &self,
        records: I,
    ) -> Result<BTreeMap<(String, Metric), BTreeMap<NaiveDate, u64>>, StoreError>
    where
        I: IntoIterator<Item = &'a CaseRecord>,
    {
        let mut daily: BTreeMap<(String, Metric), BTreeMap<NaiveDate, u64>> = BTreeMap::new();
        for record in records {
            self.require_region(&record.region_id)?;
            *daily
                .entry((record.region_id.clone(), record.metric))
                .or_default()
                .entry(record.report_date)
                .or_default() += u64::from(record.cluster_size);
        }
        for counts in daily.values_mut() {
            let mut running = 0;
            for v in counts.values_mut() {
                running += *v;
                *v = running;
            }
        }
        Ok(daily)
    }

    pub fn to_compact_table(
        &self,
        region_ids: &[String],
        metric: Metric,
        from: NaiveDate,
        to: NaiveDate,
    ) -> Result<CompactTable, StoreError> {
        if from > to {
            return Err(StoreError::EmptyDateRange);
        }
        for id in region_ids {
            self.require_region(id)?;
        }
        let dates: Vec<NaiveDate> = from.iter_days().take_while(|d| *d <= to).collect();
        let rows = region_ids
            .iter()
            .map(|id| {
                let values = match self.series(id, metric) {
                    Some(s) => dates.iter().map(|d| s.value_at(*d).unwrap_or(0)).collect(),
                    None => vec![0; dates.len()],
                };
                (id.clone(), values)
            })
            .collect();
        Ok(CompactTable { metric, dates, rows })
    }

    /// CT export as text. `regions` defaults to every region holding a
    /// series for `metric`; the date range defaults to their stored span.
    /// With nothing to export the result is the bare header line.
    pub fn export_ct(
        &self,
        regions: Option<&[String]>,
        metric: Metric,
        from: Option<NaiveDate>,
        to: Option<NaiveDate>,
    ) -> Result<String, StoreError> {
        let ids: Vec<String> = match regions {
            Some(ids) => ids.to_vec(),
            None => self
                .series
                .iter()
                .filter(|(_, by_metric)| by_metric.contains_key(&metric))
                .map(|(id, _)| id.clone())
                .collect(),
        };
        let span = self.date_span(&ids, metric);
        let (Some(from), Some(to)) = (from.or(span.map(|s| s.0)), to.or(span.map(|s| s.1))) else {
            for id in &ids {
                self.require_region(id)?;
            }
            return Ok(CompactTable {
                metric,
                dates: Vec::new(),
                rows: ids.into_iter().map(|id| (id, Vec::new())).collect(),
            }
            .to_csv());
        };
        Ok(self.to_compact_table(&ids, metric, from, to)?.to_csv())
    }

    /// Earliest and latest stored dates for `metric` across `region_ids`.
    pub fn date_span(&self, region_ids: &[String], metric: Metric) -> Option<(NaiveDate, NaiveDate)> {
        let mut span: Option<(NaiveDate, NaiveDate)> = None;
        for id in region_ids {
            let Some(s) = self.series(id, metric) else { continue };
            if let (Some((first, _)), Some((last, _))) = (s.first(), s.last()) {
                span = Some(match span {
                    None => (first, last),
                    Some((a, b)) => (a.min(first), b.max(last)),
                });
            }
        }
        span
    }

    fn value_at(&self, region_id: &str, metric: Metric, date: NaiveDate) -> Option<u64> {
        self.series(region_id, metric)?.value_at(date)
    }

    /// Active cases at `date`; `None` when no confirmed count exists yet.
    pub fn derive_active(&self, region_id: &str, date: NaiveDate) -> Option<ActiveCount> {
        let confirmed = self.value_at(region_id, Metric::Confirmed, date)?;
        let deceased = self.value_at(region_id, Metric::Deceased, date).unwrap_or(0);
        let recovered = self.value_at(region_id, Metric::Recovered, date).unwrap_or(0);
        Some(match confirmed.checked_sub(deceased + recovered) {
            Some(value) => ActiveCount::Active { value },
            None => ActiveCount::DataInconsistent {
                confirmed,
                deceased,
                recovered,
            },
        })
    }

    /// Summary rows as of `date` (or each series' latest point when `None`).
    pub fn stat_rows(&self, region_ids: &[String], date: Option<NaiveDate>) -> Result<Vec<StatRow>, StoreError> {
        region_ids
            .iter()
            .map(|id| {
                let region = self.require_region(id)?;
                let read = |metric| {
                    let series = self.series(id, metric)?;
                    match date {
                        Some(d) => series.value_at(d),
                        None => series.last().map(|(_, p)| p.value),
                    }
                };
                let confirmed = read(Metric::Confirmed).unwrap_or(0);
                let deceased = read(Metric::Deceased).unwrap_or(0);
                let recovered = read(Metric::Recovered);
                let density = |v| {
                    region
                        .population
                        .and_then(|pop| per_million(v, pop).ok())
                };
                Ok(StatRow {
                    region_id: id.clone(),
                    confirmed,
                    deceased,
                    recovered,
                    confirmed_per_million: density(confirmed),
                    deceased_per_million: density(deceased),
                    fatality_rate: (confirmed > 0)
                        .then(|| Ratio::new(deceased as u128, confirmed as u128)),
                    health_dept_contact: self.contacts.get(id).cloned(),
                })
            })
            .collect()
    }

    /// Expanded-table export: one row per record, `source_refs` pipe-separated.
    pub fn write_et_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "record_id",
            "region_id",
            "report_date",
            "metric",
            "cluster_size",
            "summary",
            "demographics",
            "source_refs",
        ])?;
        for c in self.cases.values() {
            let demographics = c
                .demographics
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";");
            wtr.write_record([
                c.record_id.as_str(),
                c.region_id.as_str(),
                &c.report_date.format("%Y-%m-%d").to_string(),
                c.metric.as_str(),
                &c.cluster_size.to_string(),
                c.summary.as_str(),
                &demographics,
                &c.source_refs.join("|"),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("store serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn check_monotone(&self) -> Result<(), (String, Metric)> {
        for s in self.all_series() {
            if !s.is_non_decreasing() {
                return Err((s.region_id.clone(), s.metric));
            }
        }
        Ok(())
    }
}

/// Dates strictly increasing, values non-decreasing.
pub fn history_is_valid(points: &[(NaiveDate, u64)]) -> bool {
    points.windows(2).all(|w| w[0].0 < w[1].0) && is_non_decreasing(points.iter().map(|(_, v)| *v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::Level;
    use crate::series::test_support::{day, prov};

    fn store() -> Store {
        let mut tree = RegionTree::new();
        tree.register_region(Region::new("R", "Region", Level::Country).with_population(2_000_000))
            .unwrap();
        tree.register_region(Region::new("S", "Other", Level::Country)).unwrap();
        Store::new(tree)
    }

    fn values(store: &Store, region: &str) -> Vec<u64> {
        store
            .series(region, Metric::Confirmed)
            .map(|s| s.values().into_iter().map(|(_, v)| v).collect())
            .unwrap_or_default()
    }

    fn commit_all(store: &mut Store, vals: &[u64]) {
        for (i, v) in vals.iter().enumerate() {
            store
                .commit_point("R", Metric::Confirmed, day(i as i64), *v, prov())
                .unwrap();
        }
    }

    #[test]
    fn commit_sequence_and_guard() {
        let mut s = store();
        commit_all(&mut s, &[10, 12, 15]);
        assert_eq!(values(&s, "R"), vec![10, 12, 15]);
        let err = s
            .commit_point("R", Metric::Confirmed, day(3), 14, prov())
            .unwrap_err();
        assert!(matches!(err, StoreError::MonotonicityViolation { .. }));
        let before = s.digest();
        s.commit_point("R", Metric::Confirmed, day(2), 15, prov()).unwrap();
        assert_eq!(before, s.digest());
        assert!(matches!(
            s.commit_point("X", Metric::Confirmed, day(0), 1, prov()),
            Err(StoreError::UnknownRegion(_))
        ));
    }

    #[test]
    fn replace_history_revision() {
        let mut s = store();
        commit_all(&mut s, &[10, 12, 15]);
        let revision = [(day(0), 10), (day(1), 11), (day(2), 14)];
        assert!(s.replace_history("R", Metric::Confirmed, &revision, prov()).unwrap());
        assert_eq!(values(&s, "R"), vec![10, 11, 14]);
        let digest = s.digest();
        assert!(!s.replace_history("R", Metric::Confirmed, &revision, prov()).unwrap());
        assert_eq!(digest, s.digest());
        let bad = [(day(0), 10), (day(1), 12), (day(2), 9)];
        assert!(matches!(
            s.replace_history("R", Metric::Confirmed, &bad, prov()),
            Err(StoreError::NonMonotonicPayload { .. })
        ));
        let unsorted = [(day(1), 10), (day(0), 12)];
        assert!(s.replace_history("R", Metric::Confirmed, &unsorted, prov()).is_err());
    }

    #[test]
    fn commit_with_repair_clamps() {
        let mut s = store();
        commit_all(&mut s, &[10, 12, 15]);
        assert_eq!(s.commit_with_repair("R", Metric::Confirmed, day(3), 11, prov()).unwrap(), 2);
        assert_eq!(values(&s, "R"), vec![10, 11, 11, 11]);

        // same-day downward correction
        let mut s = store();
        commit_all(&mut s, &[10, 12, 15]);
        s.commit_with_repair("R", Metric::Confirmed, day(2), 11, prov()).unwrap();
        assert_eq!(values(&s, "R"), vec![10, 11, 11]);

        // later history above the new value is untouched; below is refused
        let mut s = store();
        commit_all(&mut s, &[10, 12, 15]);
        assert!(s.commit_with_repair("R", Metric::Confirmed, day(1), 16, prov()).is_err());
    }

    #[test]
    fn aggregate_two_records() {
        let s = store();
        let rec = |id: &str, d, n| CaseRecord {
            record_id: id.into(),
            region_id: "R".into(),
            report_date: d,
            cluster_size: n,
            metric: Metric::Confirmed,
            demographics: BTreeMap::new(),
            summary: String::new(),
            source_refs: vec!["http://x".into()],
        };
        let out = s
            .aggregate_case_records(&[rec("a", day(0), 2), rec("b", day(1), 3)])
            .unwrap();
        assert_eq!(
            out[&("R".to_string(), Metric::Confirmed)],
            BTreeMap::from([(day(0), 2), (day(1), 5)])
        );
        assert!(s.aggregate_case_records(&[]).unwrap().is_empty());
        let mut orphan = rec("c", day(0), 1);
        orphan.region_id = "Q".into();
        assert!(matches!(
            s.aggregate_case_records(&[orphan]),
            Err(StoreError::UnknownRegion(_))
        ));
    }

    #[test]
    fn compact_table_forward_fills() {
        let mut s = store();
        s.commit_point("R", Metric::Confirmed, day(0), 2, prov()).unwrap();
        s.commit_point("R", Metric::Confirmed, day(2), 5, prov()).unwrap();
        let ids = vec!["R".to_string(), "S".to_string()];
        let t = s.to_compact_table(&ids, Metric::Confirmed, day(0), day(3)).unwrap();
        assert_eq!(t.rows[0].1, vec![2, 2, 5, 5]);
        assert_eq!(t.rows[1].1, vec![0, 0, 0, 0]);
        assert_eq!(
            t.to_csv(),
            "region_id,2020-03-01,2020-03-02,2020-03-03,2020-03-04\nR,2,2,5,5\nS,0,0,0,0\n"
        );
        let one = s
            .to_compact_table(&ids[..1], Metric::Confirmed, day(2), day(2))
            .unwrap();
        assert_eq!(one.rows, vec![("R".to_string(), vec![5])]);
        assert_eq!(
            s.to_compact_table(&ids, Metric::Confirmed, day(3), day(0)).unwrap_err(),
            StoreError::EmptyDateRange
        );
    }

    #[test]
    fn ct_export_defaults() {
        let mut s = store();
        assert_eq!(s.export_ct(None, Metric::Confirmed, None, None).unwrap(), "region_id\n");
        s.commit_point("R", Metric::Confirmed, day(0), 2, prov()).unwrap();
        s.commit_point("R", Metric::Confirmed, day(1), 3, prov()).unwrap();
        assert_eq!(
            s.export_ct(None, Metric::Confirmed, None, None).unwrap(),
            "region_id,2020-03-01,2020-03-02\nR,2,3\n"
        );
        assert!(s.export_ct(Some(&["NOPE".to_string()]), Metric::Confirmed, None, None).is_err());
    }

    #[test]
    fn active_cases() {
        let mut s = store();
        s.commit_point("R", Metric::Confirmed, day(0), 100, prov()).unwrap();
        assert_eq!(s.derive_active("R", day(0)), Some(ActiveCount::Active { value: 100 }));
        s.commit_point("R", Metric::Deceased, day(0), 10, prov()).unwrap();
        s.commit_point("R", Metric::Recovered, day(0), 30, prov()).unwrap();
        assert_eq!(s.derive_active("R", day(0)), Some(ActiveCount::Active { value: 60 }));

        s.commit_point("S", Metric::Confirmed, day(0), 10, prov()).unwrap();
        s.commit_point("S", Metric::Recovered, day(0), 20, prov()).unwrap();
        assert!(matches!(
            s.derive_active("S", day(0)),
            Some(ActiveCount::DataInconsistent { .. })
        ));
        assert_eq!(s.derive_active("S", day(-5)), None);
    }

    #[test]
    fn stat_row_fields() {
        let mut s = store();
        s.commit_point("R", Metric::Confirmed, day(0), 200, prov()).unwrap();
        s.commit_point("R", Metric::Deceased, day(0), 10, prov()).unwrap();
        s.set_contact("R", "+1 555 0100").unwrap();
        let rows = s.stat_rows(&["R".into(), "S".into()], None).unwrap();
        assert_eq!(rows[0].fatality_rate, Some(Ratio::new(1, 20)));
        assert_eq!(rows[0].confirmed_per_million, Some(Ratio::from_integer(100)));
        assert_eq!(rows[0].recovered, None);
        assert_eq!(rows[0].health_dept_contact.as_deref(), Some("+1 555 0100"));
        assert_eq!(rows[1].fatality_rate, None);
        assert_eq!(rows[1].confirmed_per_million, None);
    }

    #[test]
    fn et_export_joins_refs() {
        let mut s = store();
        s.insert_case(CaseRecord {
            record_id: "c1".into(),
            region_id: "R".into(),
            report_date: day(0),
            cluster_size: 2,
            metric: Metric::Confirmed,
            demographics: BTreeMap::from([("age".into(), "40s".into())]),
            summary: "travel, household".into(),
            source_refs: vec!["http://a".into(), "http://b".into()],
        })
        .unwrap();
        let mut buf = Vec::new();
        s.write_et_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.ends_with("c1,R,2020-03-01,confirmed,2,\"travel, household\",age=40s,http://a|http://b\n"));
    }
}
