//! Cross-level consistency for federated reporting.
//!
//! County, state and national departments publish on their own schedules,
//! so a parent's figure and the sum of its children rarely agree at any
//! given moment. A parent above its children is normal: the gap is the
//! unassigned bucket. Children above their parent are tolerated while the
//! parent report is older than the children by at most the staleness
//! window; past that the gap goes into the inconsistency diary.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::Metric;
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconcileConfig {
    pub staleness_window_minutes: i64,
    pub diary_horizon_days: i64,
}

impl Default for ReconcileConfig {
    fn default() -> Self {
        Self {
            staleness_window_minutes: 24 * 60,
            diary_horizon_days: 7,
        }
    }
}

impl ReconcileConfig {
    pub fn staleness_window(&self) -> Duration {
        Duration::minutes(self.staleness_window_minutes)
    }

    pub fn horizon(&self) -> Duration {
        Duration::days(self.diary_horizon_days)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReconcileError {
    #[error("no report from `{0}` at that date")]
    NoParentReport(String),
    #[error("no child of `{0}` has data at that date")]
    NoChildData(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub parent_region: String,
    pub metric: Metric,
    pub date: NaiveDate,
    pub parent_value: u64,
    pub children_sum: u64,
    /// `parent_value - children_sum`; never zero.
    pub delta: i64,
    pub parent_updated_at: DateTime<Utc>,
    /// Child region → time of its latest value change.
    pub staleness_note: BTreeMap<String, DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum CheckOutcome {
    Consistent { unassigned: u64 },
    ChildLead { delta: u64 },
    Discrepancy(Discrepancy),
}

struct LevelSnapshot {
    parent_value: u64,
    parent_at: DateTime<Utc>,
    children_sum: u64,
    children_at: BTreeMap<String, DateTime<Utc>>,
}

fn snapshot(store: &Store, parent: &str, metric: Metric, date: NaiveDate) -> Result<LevelSnapshot, ReconcileError> {
    let regions = store.regions();
    if !regions.contains(parent) {
        return Err(ReconcileError::UnknownRegion(parent.to_string()));
    }
    let (_, parent_point) = store
        .series(parent, metric)
        .and_then(|s| s.point_at(date))
        .ok_or_else(|| ReconcileError::NoParentReport(parent.to_string()))?;
    let mut children_sum = 0;
    let mut children_at = BTreeMap::new();
    for child in regions.children(parent) {
        if child.is_unassigned {
            continue;
        }
        if let Some((_, p)) = store.series(&child.region_id, metric).and_then(|s| s.point_at(date)) {
            children_sum += p.value;
            children_at.insert(child.region_id.clone(), p.provenance.fetched_at);
        }
    }
    Ok(LevelSnapshot {
        parent_value: parent_point.value,
        parent_at: parent_point.provenance.fetched_at,
        children_sum,
        children_at,
    })
}

/// Compares a parent's own report with the sum of its real children.
pub fn cross_level_check(
    store: &Store,
    parent: &str,
    metric: Metric,
    date: NaiveDate,
    staleness_window: Duration,
) -> Result<CheckOutcome, ReconcileError> {
    let snap = snapshot(store, parent, metric, date)?;
    if snap.children_at.is_empty() {
        return Err(ReconcileError::NoChildData(parent.to_string()));
    }
    if snap.parent_value >= snap.children_sum {
        return Ok(CheckOutcome::Consistent {
            unassigned: snap.parent_value - snap.children_sum,
        });
    }
    let lead = snap
        .children_at
        .values()
        .all(|t| *t > snap.parent_at && *t - snap.parent_at <= staleness_window);
    if lead {
        return Ok(CheckOutcome::ChildLead {
            delta: snap.children_sum - snap.parent_value,
        });
    }
    Ok(CheckOutcome::Discrepancy(Discrepancy {
        parent_region: parent.to_string(),
        metric,
        date,
        parent_value: snap.parent_value,
        children_sum: snap.children_sum,
        delta: snap.parent_value as i64 - snap.children_sum as i64,
        parent_updated_at: snap.parent_at,
        staleness_note: snap.children_at,
    }))
}

/// `max(0, parent - Σ children)`, excluding the unassigned bucket itself.
pub fn compute_unassigned(store: &Store, parent: &str, metric: Metric, date: NaiveDate) -> Result<u64, ReconcileError> {
    let snap = snapshot(store, parent, metric, date)?;
    Ok(snap.parent_value.saturating_sub(snap.children_sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiaryStatus {
    Open,
    Resolved,
    Persistent,
}

impl std::str::FromStr for DiaryStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "OPEN" => Ok(DiaryStatus::Open),
            "RESOLVED" => Ok(DiaryStatus::Resolved),
            "PERSISTENT" => Ok(DiaryStatus::Persistent),
            other => Err(format!("unknown diary status `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiaryEntry {
    pub entry_id: u64,
    pub discrepancy: Discrepancy,
    pub first_seen: DateTime<Utc>,
    pub last_seen: DateTime<Utc>,
    pub status: DiaryStatus,
    pub notes: Vec<(DateTime<Utc>, String)>,
}

impl DiaryEntry {
    fn is_live(&self) -> bool {
        self.status != DiaryStatus::Resolved
    }

    fn refresh_status(&mut self, now: DateTime<Utc>, horizon: Duration) {
        if self.is_live() {
            self.status = if now - self.first_seen > horizon {
                DiaryStatus::Persistent
            } else {
                DiaryStatus::Open
            };
        }
    }
}

/// Log of unresolved cross-level discrepancies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diary {
    entries: BTreeMap<u64, DiaryEntry>,
    next_id: u64,
}

impl Diary {
    pub fn entries(&self) -> impl Iterator<Item = &DiaryEntry> {
        self.entries.values()
    }

    pub fn get(&self, id: u64) -> Option<&DiaryEntry> {
        self.entries.get(&id)
    }

    pub fn with_status(&self, status: Option<DiaryStatus>) -> Vec<&DiaryEntry> {
        self.entries
            .values()
            .filter(|e| status.is_none_or(|s| e.status == s))
            .collect()
    }

    /// Bumps the live entry for the same (parent, metric), or opens a new one.
    pub fn upsert(&mut self, discrepancy: Discrepancy, now: DateTime<Utc>, horizon: Duration) -> &DiaryEntry {
        let existing = self.entries.values().find(|e| {
            e.is_live()
                && e.discrepancy.parent_region == discrepancy.parent_region
                && e.discrepancy.metric == discrepancy.metric
        });
        let id = match existing {
            Some(e) => e.entry_id,
            None => {
                self.next_id += 1;
                let id = self.next_id;
                self.entries.insert(
                    id,
                    DiaryEntry {
                        entry_id: id,
                        discrepancy: discrepancy.clone(),
                        first_seen: now,
                        last_seen: now,
                        status: DiaryStatus::Open,
                        notes: Vec::new(),
                    },
                );
                id
            }
        };
        let entry = self.entries.get_mut(&id).expect("present");
        entry.discrepancy = discrepancy;
        entry.last_seen = entry.last_seen.max(now);
        entry.refresh_status(now, horizon);
        entry
    }

    pub fn add_note(&mut self, id: u64, now: DateTime<Utc>, note: impl Into<String>) -> bool {
        match self.entries.get_mut(&id) {
            Some(e) => {
                e.notes.push((now, note.into()));
                true
            }
            None => false,
        }
    }

    /// Re-checks every live entry with `check`. Entries whose discrepancy is
    /// gone become RESOLVED; the rest are bumped and aged toward PERSISTENT.
    pub fn periodic_revisit<F>(&mut self, now: DateTime<Utc>, horizon: Duration, mut check: F) -> Vec<DiaryEntry>
    where
        F: FnMut(&DiaryEntry) -> Option<Discrepancy>,
    {
        let mut revisited = Vec::new();
        for entry in self.entries.values_mut().filter(|e| e.is_live()) {
            match check(entry) {
                Some(current) => {
                    entry.discrepancy = current;
                    entry.last_seen = entry.last_seen.max(now);
                    entry.refresh_status(now, horizon);
                }
                None => {
                    entry.status = DiaryStatus::Resolved;
                    entry.last_seen = entry.last_seen.max(now);
                    entry.notes.push((now, "resolved on revisit".into()));
                }
            }
            revisited.push(entry.clone());
        }
        revisited
    }

    /// One JSON object per line.
    pub fn export_jsonl(&self) -> String {
        self.entries
            .values()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TotalSource {
    Own,
    Children,
    NoData,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTotal {
    pub value: u64,
    pub source: TotalSource,
    pub own: Option<u64>,
    pub children_total: Option<u64>,
    /// Children (plus unassigned) exceed the region's own report.
    pub child_lead: bool,
}

/// Display totals for `country` and everything under it.
///
/// A region with child data shows the sum of its children's display totals
/// plus its unassigned bucket, unless its own report is larger; exactly one
/// of the two is used.
pub fn finest_granularity_rollup(
    store: &Store,
    country: &str,
    metric: Metric,
    date: NaiveDate,
) -> BTreeMap<String, RegionTotal> {
    let mut out = BTreeMap::new();
    rollup_into(store, country, metric, date, &mut out);
    out
}

fn rollup_into(
    store: &Store,
    region: &str,
    metric: Metric,
    date: NaiveDate,
    out: &mut BTreeMap<String, RegionTotal>,
) -> RegionTotal {
    let own = store.series(region, metric).and_then(|s| s.value_at(date));
    let mut children_total: Option<u64> = None;
    for child in store.regions().child_ids(region) {
        let total = rollup_into(store, child, metric, date, out);
        if total.source != TotalSource::NoData {
            *children_total.get_or_insert(0) += total.value;
        }
    }
    let total = match (own, children_total) {
        (None, None) => RegionTotal {
            value: 0,
            source: TotalSource::NoData,
            own,
            children_total,
            child_lead: false,
        },
        (Some(o), None) => RegionTotal {
            value: o,
            source: TotalSource::Own,
            own,
            children_total,
            child_lead: false,
        },
        (o, Some(c)) if o.is_none_or(|o| c >= o) => RegionTotal {
            value: c,
            source: TotalSource::Children,
            own,
            children_total,
            child_lead: o.is_some_and(|o| c > o),
        },
        (Some(o), Some(_)) => RegionTotal {
            value: o,
            source: TotalSource::Own,
            own,
            children_total,
            child_lead: false,
        },
        (None, Some(_)) => unreachable!("guard covers missing own report"),
    };
    out.insert(region.to_string(), total.clone());
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{Level, Region, RegionTree};
    use crate::series::test_support::day;
    use crate::series::Provenance;
    use chrono::TimeZone;

    fn t(h: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 4, 1, 0, 0, 0).unwrap() + Duration::hours(h)
    }

    fn tree() -> Store {
        let mut r = RegionTree::new();
        r.register_region(Region::new("US", "United States", Level::Country)).unwrap();
        r.register_region(Region::new("US-WA", "Washington", Level::Division).with_parent("US")).unwrap();
        r.register_region(Region::new("US-WA-033", "King", Level::Subdivision).with_parent("US-WA")).unwrap();
        r.register_region(Region::new("US-WA-061", "Snohomish", Level::Subdivision).with_parent("US-WA")).unwrap();
        Store::new(r)
    }

    fn put(s: &mut Store, region: &str, v: u64, at: DateTime<Utc>) {
        s.commit_point(region, Metric::Confirmed, day(0), v, Provenance::new("x", at)).unwrap();
    }

    fn check(s: &Store) -> CheckOutcome {
        cross_level_check(s, "US-WA", Metric::Confirmed, day(0), Duration::hours(24)).unwrap()
    }

    #[test]
    fn parent_above_children_is_consistent() {
        let mut s = tree();
        put(&mut s, "US-WA", 100, t(0));
        put(&mut s, "US-WA-033", 40, t(1));
        put(&mut s, "US-WA-061", 50, t(1));
        assert_eq!(check(&s), CheckOutcome::Consistent { unassigned: 10 });
        assert_eq!(compute_unassigned(&s, "US-WA", Metric::Confirmed, day(0)).unwrap(), 10);
    }

    #[test]
    fn fresher_children_lead() {
        let mut s = tree();
        put(&mut s, "US-WA", 100, t(0));
        put(&mut s, "US-WA-033", 60, t(2));
        put(&mut s, "US-WA-061", 50, t(3));
        assert_eq!(check(&s), CheckOutcome::ChildLead { delta: 10 });
        assert_eq!(compute_unassigned(&s, "US-WA", Metric::Confirmed, day(0)).unwrap(), 0);
    }

    #[test]
    fn fresher_parent_is_a_discrepancy() {
        let mut s = tree();
        put(&mut s, "US-WA-033", 60, t(0));
        put(&mut s, "US-WA-061", 50, t(0));
        put(&mut s, "US-WA", 100, t(5));
        let CheckOutcome::Discrepancy(d) = check(&s) else { panic!("expected discrepancy") };
        assert_eq!(d.delta, -10);
        assert_eq!(d.staleness_note.len(), 2);
    }

    #[test]
    fn children_far_ahead_exceed_the_window() {
        let mut s = tree();
        put(&mut s, "US-WA", 100, t(0));
        put(&mut s, "US-WA-033", 60, t(30));
        put(&mut s, "US-WA-061", 50, t(2));
        assert!(matches!(check(&s), CheckOutcome::Discrepancy(_)));
    }

    #[test]
    fn missing_reports() {
        let mut s = tree();
        put(&mut s, "US-WA-033", 60, t(0));
        assert_eq!(
            cross_level_check(&s, "US-WA", Metric::Confirmed, day(0), Duration::hours(1)).unwrap_err(),
            ReconcileError::NoParentReport("US-WA".into())
        );
        let mut s = tree();
        put(&mut s, "US-WA", 60, t(0));
        assert_eq!(
            cross_level_check(&s, "US-WA", Metric::Confirmed, day(0), Duration::hours(1)).unwrap_err(),
            ReconcileError::NoChildData("US-WA".into())
        );
    }

    fn discrepancy(delta: i64) -> Discrepancy {
        Discrepancy {
            parent_region: "US-WA".into(),
            metric: Metric::Confirmed,
            date: day(0),
            parent_value: 100,
            children_sum: (100 - delta) as u64,
            delta,
            parent_updated_at: t(0),
            staleness_note: BTreeMap::new(),
        }
    }

    #[test]
    fn diary_upsert_and_revisit() {
        let horizon = Duration::days(7);
        let mut diary = Diary::default();
        let first = diary.upsert(discrepancy(-10), t(0), horizon).entry_id;
        let second = diary.upsert(discrepancy(-12), t(24), horizon).clone();
        assert_eq!(first, second.entry_id);
        assert_eq!(second.last_seen, t(24));
        assert_eq!(diary.entries().count(), 1);

        let out = diary.periodic_revisit(t(8 * 24), horizon, |_| Some(discrepancy(-12)));
        assert_eq!(out[0].status, DiaryStatus::Persistent);

        let out = diary.periodic_revisit(t(9 * 24), horizon, |_| None);
        assert_eq!(out[0].status, DiaryStatus::Resolved);
        // a resolved entry is not reused
        let again = diary.upsert(discrepancy(-3), t(10 * 24), horizon).entry_id;
        assert_ne!(again, first);
        assert_eq!(diary.export_jsonl().lines().count(), 2);
    }

    #[test]
    fn rollup_prefers_children() {
        let mut s = tree();
        s.regions_mut().ensure_unassigned("US-WA").unwrap();
        put(&mut s, "US-WA", 100, t(0));
        put(&mut s, "US-WA-033", 40, t(0));
        put(&mut s, "US-WA-061", 50, t(0));
        put(&mut s, "US-WA-UNASSIGNED", 10, t(0));
        let totals = finest_granularity_rollup(&s, "US", Metric::Confirmed, day(0));
        assert_eq!(totals["US-WA"].value, 100);
        assert_eq!(totals["US-WA"].source, TotalSource::Children);
        assert_eq!(totals["US"].value, 100);
        assert_eq!(totals["US"].source, TotalSource::Children);
    }

    #[test]
    fn rollup_without_children_uses_own() {
        let mut s = tree();
        put(&mut s, "US-WA", 70, t(0));
        let totals = finest_granularity_rollup(&s, "US", Metric::Confirmed, day(0));
        assert_eq!(totals["US-WA"].source, TotalSource::Own);
        assert_eq!(totals["US-WA"].value, 70);
        assert_eq!(totals["US-WA-033"].source, TotalSource::NoData);
        assert_eq!(totals["US"].value, 70);
    }

    #[test]
    fn rollup_flags_child_lead() {
        let mut s = tree();
        put(&mut s, "US-WA", 80, t(0));
        put(&mut s, "US-WA-033", 40, t(1));
        put(&mut s, "US-WA-061", 50, t(1));
        let totals = finest_granularity_rollup(&s, "US", Metric::Confirmed, day(0));
        assert_eq!(totals["US-WA"].value, 90);
        assert!(totals["US-WA"].child_lead);
    }
}
