//! Response payloads, built from a locked engine. Pure reads.

use std::collections::BTreeSet;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, Utc};
use epiqc_core::reconciler::{finest_granularity_rollup, RegionTotal};
use epiqc_core::series::{align_at_threshold, ratio_to_f64, Alignment};
use epiqc_core::store::ActiveCount;
use epiqc_core::{Engine, Metric};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub const CHILD_LEAD: &str = "CHILD_LEAD";
pub const DATA_INCONSISTENT: &str = "DATA_INCONSISTENT";

/// Presentation hint echoed back; values are always raw.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Scale::Linear),
            "log" => Ok(Scale::Log),
            other => Err(format!("unknown scale `{other}` (linear|log)")),
        }
    }
}

/// An exact ratio with its decimal approximation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exact {
    pub exact: String,
    pub value: f64,
}

impl From<Ratio<u128>> for Exact {
    fn from(r: Ratio<u128>) -> Self {
        Self {
            exact: format!("{}/{}", r.numer(), r.denom()),
            value: ratio_to_f64(&r),
        }
    }
}

impl Exact {
    pub fn parse(&self) -> Option<Ratio<u128>> {
        let (n, d) = self.exact.split_once('/')?;
        Some(Ratio::new(n.parse().ok()?, d.parse().ok()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointView {
    pub date: NaiveDate,
    pub value: u64,
    pub source_id: String,
    pub fetched_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesView {
    pub region_id: String,
    pub metric: Metric,
    pub scale: Scale,
    pub points: Vec<PointView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Alignment>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotView {
    pub region_id: String,
    pub date: Option<NaiveDate>,
    pub confirmed: u64,
    pub deceased: u64,
    pub recovered: Option<u64>,
    pub active: Option<ActiveCount>,
    pub confirmed_per_million: Option<Exact>,
    pub deceased_per_million: Option<Exact>,
    pub fatality_rate: Option<Exact>,
    pub health_dept_contact: Option<String>,
    /// Confirmed total shown to readers: the larger of the region's own
    /// report and its children's sum.
    pub display_confirmed: u64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildShare {
    pub region_id: String,
    pub name_en: String,
    pub is_unassigned: bool,
    pub value: u64,
    pub share: Option<Exact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildrenStatsView {
    pub region_id: String,
    pub metric: Metric,
    pub date: Option<NaiveDate>,
    pub total: u64,
    pub entries: Vec<ChildShare>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurndownPoint {
    pub date: NaiveDate,
    /// `None` when confirmed is missing or smaller than deceased + recovered.
    pub active: Option<u64>,
    pub deceased: u64,
    pub recovered: u64,
    pub data_inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurndownView {
    pub region_id: String,
    pub points: Vec<BurndownPoint>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSeries {
    pub region_id: String,
    pub origin: NaiveDate,
    /// `(relative day, value)` pairs.
    pub days: Vec<(i64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareView {
    pub metric: Metric,
    pub align_threshold: u64,
    pub aligned: Vec<AlignedSeries>,
    pub below_threshold: Vec<String>,
}

fn require(engine: &Engine, region: &str) -> Result<(), ApiError> {
    if engine.store().regions().contains(region) {
        Ok(())
    } else {
        Err(ApiError::unknown_region(region))
    }
}

/// Latest stored date of `metric` across the region and its children.
fn latest(engine: &Engine, region: &str, metric: Metric) -> Option<NaiveDate> {
    let store = engine.store();
    let mut ids = vec![region.to_string()];
    ids.extend(store.regions().child_ids(region).iter().cloned());
    store.date_span(&ids, metric).map(|(_, last)| last)
}

fn region_total(engine: &Engine, region: &str, metric: Metric, date: NaiveDate) -> (RegionTotal, Vec<(String, RegionTotal)>) {
    let store = engine.store();
    let totals = finest_granularity_rollup(store, region, metric, date);
    let children = store
        .regions()
        .child_ids(region)
        .iter()
        .map(|c| (c.clone(), totals[c].clone()))
        .collect();
    (totals[region].clone(), children)
}

/// User-facing notes for `region` at `date`.
pub fn flags(engine: &Engine, region: &str, date: Option<NaiveDate>) -> Vec<String> {
    let Some(date) = date else { return Vec::new() };
    let mut out = BTreeSet::new();
    for metric in Metric::ALL {
        if region_total(engine, region, metric, date).0.child_lead {
            out.insert(CHILD_LEAD);
        }
    }
    if matches!(engine.store().derive_active(region, date), Some(ActiveCount::DataInconsistent { .. })) {
        out.insert(DATA_INCONSISTENT);
    }
    out.into_iter().map(String::from).collect()
}

pub fn series_view(
    engine: &Engine,
    region: &str,
    metric: Metric,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
    scale: Scale,
    align_threshold: Option<u64>,
) -> Result<SeriesView, ApiError> {
    require(engine, region)?;
    let series = engine.store().series(region, metric);
    let points = series
        .map(|s| {
            s.points
                .iter()
                .filter(|(d, _)| from.is_none_or(|f| **d >= f) && to.is_none_or(|t| **d <= t))
                .map(|(d, p)| PointView {
                    date: *d,
                    value: p.value,
                    source_id: p.provenance.source_id.clone(),
                    fetched_at: p.provenance.fetched_at,
                })
                .collect()
        })
        .unwrap_or_default();
    let alignment = match align_threshold {
        None => None,
        Some(t) => Some(match series {
            Some(s) => align_at_threshold(s, t).map_err(|e| ApiError::validation(e.to_string()))?,
            None if t == 0 => return Err(ApiError::validation("threshold must be positive")),
            None => Alignment::BelowThreshold,
        }),
    };
    Ok(SeriesView {
        region_id: region.to_string(),
        metric,
        scale,
        points,
        alignment,
        flags: flags(engine, region, latest(engine, region, metric)),
    })
}

pub fn snapshot_view(engine: &Engine, region: &str, date: Option<NaiveDate>) -> Result<SnapshotView, ApiError> {
    require(engine, region)?;
    let store = engine.store();
    let row = store
        .stat_rows(&[region.to_string()], date)?
        .pop()
        .expect("one region in, one row out");
    let at = date.or_else(|| latest(engine, region, Metric::Confirmed));
    let display_confirmed = at.map_or(row.confirmed, |d| region_total(engine, region, Metric::Confirmed, d).0.value);
    Ok(SnapshotView {
        region_id: row.region_id,
        date: at,
        confirmed: row.confirmed,
        deceased: row.deceased,
        recovered: row.recovered,
        active: at.and_then(|d| store.derive_active(region, d)),
        confirmed_per_million: row.confirmed_per_million.map(Exact::from),
        deceased_per_million: row.deceased_per_million.map(Exact::from),
        fatality_rate: row.fatality_rate.map(Exact::from),
        health_dept_contact: row.health_dept_contact,
        display_confirmed,
        flags: flags(engine, region, at),
    })
}

pub fn children_stats_view(
    engine: &Engine,
    region: &str,
    metric: Metric,
    date: Option<NaiveDate>,
) -> Result<ChildrenStatsView, ApiError> {
    require(engine, region)?;
    let regions = engine.store().regions();
    let at = date.or_else(|| latest(engine, region, metric));
    let values: Vec<(String, u64)> = match at {
        Some(d) => region_total(engine, region, metric, d)
            .1
            .into_iter()
            .map(|(id, t)| (id, t.value))
            .collect(),
        None => regions.child_ids(region).iter().map(|c| (c.clone(), 0)).collect(),
    };
    let total: u64 = values.iter().map(|(_, v)| v).sum();
    let entries = values
        .into_iter()
        .map(|(id, value)| {
            let r = regions.get(&id).expect("child registered");
            ChildShare {
                region_id: id,
                name_en: r.name_en.clone(),
                is_unassigned: r.is_unassigned,
                value,
                share: (total > 0).then(|| Exact::from(Ratio::new(value as u128, total as u128))),
            }
        })
        .collect();
    Ok(ChildrenStatsView {
        region_id: region.to_string(),
        metric,
        date: at,
        total,
        entries,
        flags: flags(engine, region, at),
    })
}

pub fn burndown_view(engine: &Engine, region: &str) -> Result<BurndownView, ApiError> {
    require(engine, region)?;
    let store = engine.store();
    let metrics = [Metric::Confirmed, Metric::Deceased, Metric::Recovered];
    let dates: BTreeSet<NaiveDate> = metrics
        .iter()
        .filter_map(|m| store.series(region, *m))
        .flat_map(|s| s.points.keys().copied())
        .collect();
    let read = |m, d| store.series(region, m).and_then(|s| s.value_at(d)).unwrap_or(0);
    let points = dates
        .iter()
        .map(|d| {
            let active = store.derive_active(region, *d);
            BurndownPoint {
                date: *d,
                active: match active {
                    Some(ActiveCount::Active { value }) => Some(value),
                    _ => None,
                },
                deceased: read(Metric::Deceased, *d),
                recovered: read(Metric::Recovered, *d),
                data_inconsistent: matches!(active, Some(ActiveCount::DataInconsistent { .. })),
            }
        })
        .collect();
    Ok(BurndownView {
        region_id: region.to_string(),
        points,
        flags: flags(engine, region, dates.last().copied()),
    })
}

pub fn compare_view(engine: &Engine, regions: &[String], metric: Metric, threshold: u64) -> Result<CompareView, ApiError> {
    if threshold == 0 {
        return Err(ApiError::validation("align_threshold must be positive"));
    }
    let mut view = CompareView {
        metric,
        align_threshold: threshold,
        aligned: Vec::new(),
        below_threshold: Vec::new(),
    };
    for region in regions {
        require(engine, region)?;
        let alignment = match engine.store().series(region, metric) {
            Some(s) => align_at_threshold(s, threshold).map_err(|e| ApiError::validation(e.to_string()))?,
            None => Alignment::BelowThreshold,
        };
        match alignment {
            Alignment::Aligned { origin, days } => view.aligned.push(AlignedSeries {
                region_id: region.clone(),
                origin,
                days: days.into_iter().collect(),
            }),
            Alignment::BelowThreshold => view.below_threshold.push(region.clone()),
        }
    }
    Ok(view)
}
