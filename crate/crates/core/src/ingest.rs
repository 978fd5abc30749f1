//! Source descriptors, payload parsing and proposal generation.
//!
//! A source follows one of three reporting paradigms:
//!
//! - `FULL_HISTORY`: every payload republishes the whole (revisable) series.
//! - `SNAPSHOT`: every payload carries only the latest totals.
//! - `PER_CASE`: every payload lists individual cases or clusters.
//!
//! Parsing maps raw CSV/JSON through the descriptor's `field_map` into
//! [`Observation`]s. [`ingest`] then diffs those against the store and emits
//! [`ProposedChange`]s for the quality gate; nothing is written here.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Utc};
use chrono_tz::Tz;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gate::{dedupe_case, ChangeKind, ChangeTag, DedupeOutcome, ProposedChange};
use crate::region::RegionTree;
use crate::series::Metric;
use crate::store::{CaseRecord, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Paradigm {
    FullHistory,
    Snapshot,
    PerCase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PayloadFormat {
    Csv,
    Json,
}

/// What a source column means.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum FieldRole {
    Region,
    Date,
    /// Column holding the count for one fixed metric (wide layout).
    MetricValue(Metric),
    /// Column naming the metric of the row (long layout, paired with `Value`).
    MetricName,
    Value,
    ClusterSize,
    RecordId,
    Summary,
    SourceRefs,
    Ignore,
}

impl FromStr for FieldRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(m) = s.strip_prefix("metric:") {
            return m
                .parse::<Metric>()
                .map(FieldRole::MetricValue)
                .map_err(|e| e.to_string());
        }
        Ok(match s {
            "region" => FieldRole::Region,
            "date" => FieldRole::Date,
            "metric" => FieldRole::MetricName,
            "value" => FieldRole::Value,
            "cluster_size" => FieldRole::ClusterSize,
            "record_id" => FieldRole::RecordId,
            "summary" => FieldRole::Summary,
            "source_refs" => FieldRole::SourceRefs,
            "ignore" => FieldRole::Ignore,
            other => return Err(format!("unknown field role `{other}`")),
        })
    }
}

impl fmt::Display for FieldRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldRole::Region => f.write_str("region"),
            FieldRole::Date => f.write_str("date"),
            FieldRole::MetricValue(m) => write!(f, "metric:{m}"),
            FieldRole::MetricName => f.write_str("metric"),
            FieldRole::Value => f.write_str("value"),
            FieldRole::ClusterSize => f.write_str("cluster_size"),
            FieldRole::RecordId => f.write_str("record_id"),
            FieldRole::Summary => f.write_str("summary"),
            FieldRole::SourceRefs => f.write_str("source_refs"),
            FieldRole::Ignore => f.write_str("ignore"),
        }
    }
}

impl Serialize for FieldRole {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldRole {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_metric() -> Metric {
    Metric::Confirmed
}

fn default_timezone() -> String {
    "UTC".to_string()
}

/// Configuration of one feed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDescriptor {
    pub source_id: String,
    pub scope_region: String,
    pub paradigm: Paradigm,
    pub format: PayloadFormat,
    /// Source column → role.
    pub field_map: BTreeMap<String, FieldRole>,
    pub poll_interval_minutes: i64,
    #[serde(default = "default_timezone")]
    pub timezone: String,
    #[serde(default)]
    pub reported_delay_days: u32,
    pub endpoint: String,
    /// JSON pointer to the array of rows inside a JSON payload.
    #[serde(default)]
    pub json_pointer: Option<String>,
    /// Metric of per-case rows that carry no metric column.
    #[serde(default = "default_metric")]
    pub default_metric: Metric,
    /// Source region key → region code.
    #[serde(default)]
    pub region_aliases: BTreeMap<String, String>,
    /// Directory of dated archive payloads (`YYYY-MM-DD.csv|json`) for backfill.
    #[serde(default)]
    pub archive_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("source `{source_id}`: {message}")]
pub struct DescriptorError {
    pub source_id: String,
    pub message: String,
}

impl SourceDescriptor {
    pub fn poll_interval(&self) -> Duration {
        Duration::minutes(self.poll_interval_minutes)
    }

    pub fn tz(&self) -> Result<Tz, DescriptorError> {
        self.timezone.parse::<Tz>().map_err(|_| self.error(format!("unknown timezone `{}`", self.timezone)))
    }

    fn error(&self, message: impl Into<String>) -> DescriptorError {
        DescriptorError {
            source_id: self.source_id.clone(),
            message: message.into(),
        }
    }

    fn has_role(&self, pred: impl Fn(&FieldRole) -> bool) -> bool {
        self.field_map.values().any(pred)
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.source_id.trim().is_empty() {
            return Err(self.error("source_id is empty"));
        }
        if self.poll_interval_minutes <= 0 {
            return Err(self.error("poll interval must be positive"));
        }
        self.tz()?;
        if !self.has_role(|r| *r == FieldRole::Date) {
            return Err(self.error("field_map has no date column"));
        }
        let single = |role: FieldRole| self.field_map.values().filter(|r| **r == role).count() <= 1;
        for role in [
            FieldRole::Region,
            FieldRole::Date,
            FieldRole::MetricName,
            FieldRole::Value,
            FieldRole::ClusterSize,
            FieldRole::RecordId,
            FieldRole::Summary,
            FieldRole::SourceRefs,
        ] {
            if !single(role.clone()) {
                return Err(self.error(format!("field_map maps more than one column to `{role}`")));
            }
        }
        let long = self.has_role(|r| *r == FieldRole::MetricName);
        let value = self.has_role(|r| *r == FieldRole::Value);
        match self.paradigm {
            Paradigm::PerCase => {}
            _ => {
                if long != value {
                    return Err(self.error("`metric` and `value` columns must be mapped together"));
                }
                if !long && !self.has_role(|r| matches!(r, FieldRole::MetricValue(_))) {
                    return Err(self.error("field_map covers no metric"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RegistryFile {
    #[serde(default, rename = "source")]
    sources: Vec<SourceDescriptor>,
}

/// Parses a TOML source registry (`[[source]]` tables) and validates each entry.
pub fn parse_source_registry(text: &str) -> Result<Vec<SourceDescriptor>, DescriptorError> {
    let file: RegistryFile = toml::from_str(text).map_err(|e| DescriptorError {
        source_id: String::new(),
        message: e.to_string(),
    })?;
    let mut seen = BTreeSet::new();
    for d in &file.sources {
        d.validate()?;
        if !seen.insert(d.source_id.clone()) {
            return Err(d.error("duplicate source_id"));
        }
    }
    Ok(file.sources)
}

pub fn source_registry_to_toml(sources: &[SourceDescriptor]) -> String {
    toml::to_string(&RegistryFile {
        sources: sources.to_vec(),
    })
    .expect("registry serializes")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum Observation {
    Count {
        region_id: String,
        metric: Metric,
        date: NaiveDate,
        value: u64,
    },
    Case(CaseRecord),
}

impl Observation {
    pub fn region_id(&self) -> &str {
        match self {
            Observation::Count { region_id, .. } => region_id,
            Observation::Case(c) => &c.region_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchBatch {
    pub source_id: String,
    pub fetched_at: DateTime<Utc>,
    pub observations: Vec<Observation>,
    /// Hex SHA-256 of the raw payload bytes.
    pub payload_digest: String,
    /// Region keys that resolved to no known region, sorted.
    pub unmatched_keys: Vec<String>,
}

impl FetchBatch {
    pub fn is_partial(&self) -> bool {
        !self.unmatched_keys.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

fn malformed(msg: impl Into<String>) -> ParseError {
    ParseError::MalformedPayload(msg.into())
}

pub fn payload_digest(raw: &[u8]) -> String {
    hex::encode(Sha256::digest(raw))
}

type Row = BTreeMap<String, String>;

fn csv_rows(raw: &[u8]) -> Result<Vec<Row>, ParseError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(raw);
    let headers = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| malformed(format!("row {}: {e}", i + 1)))?;
        rows.push(
            headers
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect(),
        );
    }
    Ok(rows)
}

fn json_cell(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.trim().to_string(),
        Value::Array(items) => items.iter().map(json_cell).collect::<Vec<_>>().join("|"),
        other => other.to_string(),
    }
}

fn json_rows(raw: &[u8], pointer: Option<&str>) -> Result<Vec<Row>, ParseError> {
    let doc: serde_json::Value = serde_json::from_slice(raw).map_err(|e| malformed(e.to_string()))?;
    let target = match pointer {
        Some(p) => doc
            .pointer(p)
            .ok_or_else(|| malformed(format!("JSON pointer `{p}` not found")))?,
        None => &doc,
    };
    let items = target
        .as_array()
        .ok_or_else(|| malformed("expected an array of row objects"))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let obj = item
                .as_object()
                .ok_or_else(|| malformed(format!("element {i} is not an object")))?;
            Ok(obj.iter().map(|(k, v)| (k.clone(), json_cell(v))).collect())
        })
        .collect()
}

/// Parses a date cell. Plain dates are taken as source-local; instants with
/// an offset are converted into `tz` first.
pub fn parse_local_date(text: &str, tz: Tz) -> Option<NaiveDate> {
    let t = text.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(t) {
        return Some(dt.with_timezone(&tz).date_naive());
    }
    for fmt in ["%Y-%m-%d", "%Y/%m/%d", "%m/%d/%Y", "%Y%m%d", "%d.%m.%Y"] {
        if let Ok(d) = NaiveDate::parse_from_str(t, fmt) {
            return Some(d);
        }
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(t, fmt) {
            return Some(dt.date());
        }
    }
    None
}

/// Parses a non-negative count, tolerating thousands separators and `12.0`.
pub fn parse_count(text: &str) -> Option<u64> {
    let cleaned: String = text.trim().chars().filter(|c| *c != ',' && *c != '_').collect();
    if cleaned.is_empty() {
        return None;
    }
    if let Ok(v) = cleaned.parse::<u64>() {
        return Some(v);
    }
    let (int, frac) = cleaned.split_once('.')?;
    if !frac.is_empty() && frac.chars().all(|c| c == '0') {
        return int.parse().ok();
    }
    None
}

struct RegionResolver<'a> {
    descriptor: &'a SourceDescriptor,
    regions: &'a RegionTree,
    by_name: HashMap<String, String>,
}

impl<'a> RegionResolver<'a> {
    fn new(descriptor: &'a SourceDescriptor, regions: &'a RegionTree) -> Self {
        let mut by_name = HashMap::new();
        for r in regions.subtree(&descriptor.scope_region) {
            by_name.entry(r.name_en.to_lowercase()).or_insert_with(|| r.region_id.clone());
            by_name.entry(r.name_local.to_lowercase()).or_insert_with(|| r.region_id.clone());
        }
        Self {
            descriptor,
            regions,
            by_name,
        }
    }

    fn resolve(&self, key: &str) -> Option<String> {
        let key = key.trim();
        if let Some(code) = self.descriptor.region_aliases.get(key) {
            return self.regions.contains(code).then(|| code.clone());
        }
        if self.regions.contains(key) {
            return Some(key.to_string());
        }
        let scoped = format!("{}-{key}", self.descriptor.scope_region);
        if self.regions.contains(&scoped) {
            return Some(scoped);
        }
        self.by_name.get(&key.to_lowercase()).cloned()
    }
}

fn column_for(descriptor: &SourceDescriptor, role: &FieldRole) -> Option<String> {
    descriptor
        .field_map
        .iter()
        .find(|(_, r)| *r == role)
        .map(|(c, _)| c.clone())
}

/// Maps a raw payload through the descriptor's field map.
///
/// Rows whose region key cannot be resolved are skipped and their keys
/// reported in [`FetchBatch::unmatched_keys`]. Dates are shifted back by
/// `reported_delay_days`.
pub fn parse_payload(
    raw: &[u8],
    descriptor: &SourceDescriptor,
    regions: &RegionTree,
    fetched_at: DateTime<Utc>,
) -> Result<FetchBatch, ParseError> {
    descriptor.validate()?;
    if raw.iter().all(u8::is_ascii_whitespace) {
        return Err(ParseError::EmptyPayload);
    }
    let tz = descriptor.tz()?;
    let rows = match descriptor.format {
        PayloadFormat::Csv => csv_rows(raw)?,
        PayloadFormat::Json => json_rows(raw, descriptor.json_pointer.as_deref())?,
    };
    if rows.is_empty() {
        return Err(ParseError::EmptyPayload);
    }

    let region_col = column_for(descriptor, &FieldRole::Region);
    let date_col = column_for(descriptor, &FieldRole::Date).expect("validated");
    if descriptor.format == PayloadFormat::Csv {
        let first = &rows[0];
        for col in descriptor.field_map.keys() {
            let role = &descriptor.field_map[col];
            let required = matches!(role, FieldRole::Region | FieldRole::Date | FieldRole::Value | FieldRole::MetricName);
            if required && !first.contains_key(col) {
                return Err(malformed(format!("missing column `{col}`")));
            }
        }
    }

    let resolver = RegionResolver::new(descriptor, regions);
    let delay = Duration::days(i64::from(descriptor.reported_delay_days));
    let mut unmatched = BTreeSet::new();
    let mut observations = Vec::new();
    let mut occurrences: HashMap<String, usize> = HashMap::new();

    for (i, row) in rows.iter().enumerate() {
        let cell = |col: &str| row.get(col).map(String::as_str).unwrap_or("");
        let region_id = match &region_col {
            Some(col) => {
                let key = cell(col);
                match resolver.resolve(key) {
                    Some(id) => id,
                    None => {
                        unmatched.insert(key.to_string());
                        continue;
                    }
                }
            }
            None => {
                if !regions.contains(&descriptor.scope_region) {
                    unmatched.insert(descriptor.scope_region.clone());
                    continue;
                }
                descriptor.scope_region.clone()
            }
        };
        let raw_date = cell(&date_col);
        let date = parse_local_date(raw_date, tz)
            .ok_or_else(|| malformed(format!("row {}: unparseable date `{raw_date}`", i + 1)))?
            .checked_sub_signed(delay)
            .ok_or_else(|| malformed(format!("row {}: date out of range", i + 1)))?;

        match descriptor.paradigm {
            Paradigm::PerCase => {
                observations.push(Observation::Case(case_from_row(
                    descriptor,
                    row,
                    region_id,
                    date,
                    i,
                    &mut occurrences,
                )?));
            }
            Paradigm::FullHistory | Paradigm::Snapshot => {
                for (col, role) in &descriptor.field_map {
                    let metric = match role {
                        FieldRole::MetricValue(m) => *m,
                        FieldRole::MetricName => {
                            let name = cell(col);
                            let metric = name
                                .parse::<Metric>()
                                .map_err(|e| malformed(format!("row {}: {e}", i + 1)))?;
                            let value_col = column_for(descriptor, &FieldRole::Value).expect("validated");
                            if let Some(value) = count_cell(cell(&value_col), i)? {
                                observations.push(Observation::Count {
                                    region_id: region_id.clone(),
                                    metric,
                                    date,
                                    value,
                                });
                            }
                            continue;
                        }
                        _ => continue,
                    };
                    if let Some(value) = count_cell(cell(col), i)? {
                        observations.push(Observation::Count {
                            region_id: region_id.clone(),
                            metric,
                            date,
                            value,
                        });
                    }
                }
            }
        }
    }

    Ok(FetchBatch {
        source_id: descriptor.source_id.clone(),
        fetched_at,
        observations,
        payload_digest: payload_digest(raw),
        unmatched_keys: unmatched.into_iter().collect(),
    })
}

fn count_cell(text: &str, row: usize) -> Result<Option<u64>, ParseError> {
    if text.trim().is_empty() {
        return Ok(None);
    }
    parse_count(text)
        .map(Some)
        .ok_or_else(|| malformed(format!("row {}: `{text}` is not a non-negative count", row + 1)))
}

fn case_from_row(
    descriptor: &SourceDescriptor,
    row: &Row,
    region_id: String,
    report_date: NaiveDate,
    index: usize,
    occurrences: &mut HashMap<String, usize>,
) -> Result<CaseRecord, ParseError> {
    let mut metric = descriptor.default_metric;
    let mut cluster_size = 1u32;
    let mut summary = String::new();
    let mut source_refs = Vec::new();
    let mut record_id = None;
    let mut demographics = BTreeMap::new();

    for (col, value) in row {
        match descriptor.field_map.get(col) {
            Some(FieldRole::MetricName) if !value.is_empty() => {
                metric = value
                    .parse()
                    .map_err(|e: crate::series::UnknownMetric| malformed(format!("row {}: {e}", index + 1)))?;
            }
            Some(FieldRole::ClusterSize) if !value.is_empty() => {
                cluster_size = parse_count(value)
                    .and_then(|v| u32::try_from(v).ok())
                    .filter(|v| *v >= 1)
                    .ok_or_else(|| malformed(format!("row {}: bad cluster size `{value}`", index + 1)))?;
            }
            Some(FieldRole::Summary) => summary = value.clone(),
            Some(FieldRole::SourceRefs) => {
                source_refs = value
                    .split('|')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect();
            }
            Some(FieldRole::RecordId) if !value.is_empty() => record_id = Some(value.clone()),
            Some(_) => {}
            None => {
                if !value.is_empty() {
                    demographics.insert(col.clone(), value.clone());
                }
            }
        }
    }
    if source_refs.is_empty() {
        source_refs.push(descriptor.endpoint.clone());
    }
    let record_id = match record_id {
        Some(id) => format!("{}:{id}", descriptor.source_id),
        None => {
            let canonical = serde_json::to_string(row).expect("row serializes");
            let hash = hex::encode(&Sha256::digest(canonical.as_bytes())[..8]);
            let n = occurrences.entry(hash.clone()).or_default();
            *n += 1;
            format!("{}:{hash}:{n}", descriptor.source_id)
        }
    };
    Ok(CaseRecord {
        record_id,
        region_id,
        report_date,
        cluster_size,
        metric,
        demographics,
        summary,
        source_refs,
    })
}

/// Result of diffing one batch against the store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestPlan {
    pub proposals: Vec<ProposedChange>,
    /// Per-case records that passed deduplication, to be stored.
    pub new_cases: Vec<CaseRecord>,
    /// (candidate id, existing id) pairs dropped as duplicates.
    pub duplicates: Vec<(String, String)>,
    pub unknown_regions: Vec<String>,
}

/// Turns a parsed batch into proposals routed to the quality gate.
///
/// Proposals identical to stored data are dropped, so re-ingesting a batch
/// yields nothing new.
pub fn ingest(batch: &FetchBatch, descriptor: &SourceDescriptor, store: &Store) -> IngestPlan {
    let mut plan = IngestPlan::default();
    let mut unknown = BTreeSet::new();
    let proposal = |region_id: &str, metric, kind, tags| ProposedChange {
        source_id: batch.source_id.clone(),
        fetched_at: batch.fetched_at,
        region_id: region_id.to_string(),
        metric,
        kind,
        tags,
    };

    match descriptor.paradigm {
        Paradigm::FullHistory => {
            let mut grouped: BTreeMap<(String, Metric), BTreeMap<NaiveDate, u64>> = BTreeMap::new();
            for obs in &batch.observations {
                if let Observation::Count { region_id, metric, date, value } = obs {
                    if !store.regions().contains(region_id) {
                        unknown.insert(region_id.clone());
                        continue;
                    }
                    grouped.entry((region_id.clone(), *metric)).or_default().insert(*date, *value);
                }
            }
            for ((region_id, metric), points) in grouped {
                let points: Vec<(NaiveDate, u64)> = points.into_iter().collect();
                let stored = store.series(&region_id, metric).map(|s| s.values()).unwrap_or_default();
                if stored == points {
                    continue;
                }
                let incoming: BTreeMap<_, _> = points.iter().copied().collect();
                let mut tags = BTreeSet::new();
                for (d, old) in &stored {
                    match incoming.get(d) {
                        Some(new) if new == old => {}
                        Some(new) => {
                            tags.insert(ChangeTag::HistoricalEdit);
                            if new < old {
                                tags.insert(ChangeTag::Decrease);
                            }
                        }
                        None => {
                            tags.insert(ChangeTag::HistoricalEdit);
                        }
                    }
                }
                plan.proposals
                    .push(proposal(&region_id, metric, ChangeKind::History { points }, tags));
            }
        }
        Paradigm::Snapshot => {
            for obs in &batch.observations {
                let Observation::Count { region_id, metric, date, value } = obs else { continue };
                if !store.regions().contains(region_id) {
                    unknown.insert(region_id.clone());
                    continue;
                }
                let series = store.series(region_id, *metric);
                if series.and_then(|s| s.get(*date)) == Some(*value) {
                    continue;
                }
                let mut tags = BTreeSet::new();
                if let Some(s) = series {
                    let shown = s.value_at(*date).or_else(|| s.first().map(|(_, p)| p.value));
                    if shown.is_some_and(|v| *value < v) {
                        tags.insert(ChangeTag::Decrease);
                    }
                    if s.last().is_some_and(|(d, _)| *date < d) {
                        tags.insert(ChangeTag::HistoricalEdit);
                    }
                }
                plan.proposals.push(proposal(
                    region_id,
                    *metric,
                    ChangeKind::Point { date: *date, value: *value },
                    tags,
                ));
            }
        }
        Paradigm::PerCase => {
            let mut accepted: Vec<CaseRecord> = Vec::new();
            for obs in &batch.observations {
                let Observation::Case(candidate) = obs else { continue };
                if !store.regions().contains(&candidate.region_id) {
                    unknown.insert(candidate.region_id.clone());
                    continue;
                }
                if store.case(&candidate.record_id).is_some() {
                    plan.duplicates
                        .push((candidate.record_id.clone(), candidate.record_id.clone()));
                    continue;
                }
                let pool = store.cases_in_region(&candidate.region_id).chain(accepted.iter());
                match dedupe_case(candidate, pool) {
                    DedupeOutcome::Duplicate(existing) => {
                        plan.duplicates.push((candidate.record_id.clone(), existing));
                    }
                    DedupeOutcome::Unique => accepted.push(candidate.clone()),
                }
            }
            let touched: BTreeSet<(String, Metric)> =
                accepted.iter().map(|c| (c.region_id.clone(), c.metric)).collect();
            let all = store.cases().chain(accepted.iter());
            let totals = store.aggregate_case_records(all).unwrap_or_default();
            for key in touched {
                let Some(cumulative) = totals.get(&key) else { continue };
                let stored = store.series(&key.0, key.1);
                // Latest date first: values only grow here, so writing from the
                // end keeps every intermediate state non-decreasing.
                for (date, value) in cumulative.iter().rev() {
                    if stored.and_then(|s| s.get(*date)) == Some(*value) {
                        continue;
                    }
                    plan.proposals.push(proposal(
                        &key.0,
                        key.1,
                        ChangeKind::Point { date: *date, value: *value },
                        BTreeSet::new(),
                    ));
                }
            }
            plan.new_cases = accepted;
        }
    }
    plan.unknown_regions = unknown.into_iter().collect();
    plan
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FetchError {
    #[error("fetch of `{endpoint}` failed: {message}")]
    Failed { endpoint: String, message: String },
    #[error("`{endpoint}` answered HTTP {status}")]
    Status { endpoint: String, status: u16 },
}

/// Retrieves the raw payload for a source.
pub trait Fetcher: Send + Sync {
    fn fetch(&self, descriptor: &SourceDescriptor) -> Result<Vec<u8>, FetchError>;
}

/// Reads endpoints as file paths, relative to `base_dir` unless absolute.
#[derive(Debug, Clone)]
pub struct FileFetcher {
    pub base_dir: PathBuf,
}

impl FileFetcher {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            base_dir: base_dir.into(),
        }
    }

    pub fn resolve(&self, endpoint: &str) -> PathBuf {
        let path = Path::new(endpoint.strip_prefix("file://").unwrap_or(endpoint));
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}

impl Fetcher for FileFetcher {
    fn fetch(&self, descriptor: &SourceDescriptor) -> Result<Vec<u8>, FetchError> {
        let path = self.resolve(&descriptor.endpoint);
        std::fs::read(&path).map_err(|e| FetchError::Failed {
            endpoint: descriptor.endpoint.clone(),
            message: e.to_string(),
        })
    }
}

/// Loads `YYYY-MM-DD.*` files from a directory, ordered by date.
pub fn load_archives(dir: &Path) -> std::io::Result<Vec<(NaiveDate, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Ok(date) = NaiveDate::parse_from_str(stem, "%Y-%m-%d") else { continue };
        out.push((date, std::fs::read(&path)?));
    }
    out.sort_by_key(|(d, _)| *d);
    Ok(out)
}

/// Sources whose interval has elapsed, most overdue first; never-polled sources lead.
pub fn poll_due<'a>(
    sources: &'a [SourceDescriptor],
    last_polled: &BTreeMap<String, DateTime<Utc>>,
    now: DateTime<Utc>,
) -> Vec<&'a SourceDescriptor> {
    let mut due: Vec<(Option<Duration>, usize, &SourceDescriptor)> = sources
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match last_polled.get(&s.source_id) {
            None => Some((None, i, s)),
            Some(at) => {
                let elapsed = now - *at;
                (elapsed >= s.poll_interval()).then_some((Some(elapsed), i, s))
            }
        })
        .collect();
    // None sorts first; among polled sources the longest elapsed time wins.
    due.sort_by(|a, b| match (a.0, b.0) {
        (None, None) => a.1.cmp(&b.1),
        (None, Some(_)) => std::cmp::Ordering::Less,
        (Some(_), None) => std::cmp::Ordering::Greater,
        (Some(x), Some(y)) => y.cmp(&x).then(a.1.cmp(&b.1)),
    });
    due.into_iter().map(|(_, _, s)| s).collect()
}

/// Tracks poll times and in-flight fetches so a source is never polled twice at once.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollScheduler {
    pub last_polled: BTreeMap<String, DateTime<Utc>>,
    #[serde(skip)]
    in_flight: BTreeSet<String>,
}

impl PollScheduler {
    /// Due sources not already in flight; each returned id is marked in flight.
    pub fn claim_due(&mut self, sources: &[SourceDescriptor], now: DateTime<Utc>) -> Vec<String> {
        let ids: Vec<String> = poll_due(sources, &self.last_polled, now)
            .into_iter()
            .filter(|s| !self.in_flight.contains(&s.source_id))
            .map(|s| s.source_id.clone())
            .collect();
        self.in_flight.extend(ids.iter().cloned());
        ids
    }

    /// Releases a claim. Failed fetches keep the old poll time so they retry next cycle.
    pub fn complete(&mut self, source_id: &str, started_at: DateTime<Utc>, success: bool) {
        self.in_flight.remove(source_id);
        if success {
            self.last_polled.insert(source_id.to_string(), started_at);
        }
    }

    pub fn is_in_flight(&self, source_id: &str) -> bool {
        self.in_flight.contains(source_id)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn descriptor(paradigm: Paradigm, format: PayloadFormat, map: &[(&str, &str)]) -> SourceDescriptor {
        SourceDescriptor {
            source_id: "src".into(),
            scope_region: "IT".into(),
            paradigm,
            format,
            field_map: map
                .iter()
                .map(|(c, r)| (c.to_string(), r.parse().unwrap()))
                .collect(),
            poll_interval_minutes: 120,
            timezone: "Europe/Rome".into(),
            reported_delay_days: 0,
            endpoint: "fixtures/it.csv".into(),
            json_pointer: None,
            default_metric: Metric::Confirmed,
            region_aliases: BTreeMap::new(),
            archive_dir: None,
        }
    }
}
