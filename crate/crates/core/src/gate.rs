//! Quality gate: deployment guard rules, jump detection, decrease
//! classification, hold tickets and expanded-table deduplication.
//!
//! All comparisons are exact integer arithmetic. A growth rule "increase
//! more than X" with `X = p/q` fires when `(new - prev) * q > p * prev`,
//! and its floor is the strict `prev > floor`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::region::Level;
use crate::series::{CumulativeSeries, Metric};
use crate::store::CaseRecord;

/// Identifier of a gate rule. Rules 1–5 are the deployment guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "1")]
    Decrease,
    #[serde(rename = "2")]
    DailyCap,
    #[serde(rename = "3")]
    Growth300,
    #[serde(rename = "4")]
    Growth200,
    #[serde(rename = "5")]
    Growth50,
    #[serde(rename = "jump")]
    Jump,
    #[serde(rename = "history_decrease")]
    HistoryDecrease,
    #[serde(rename = "non_monotonic_payload")]
    NonMonotonicPayload,
    #[serde(rename = "out_of_order")]
    OutOfOrder,
}

impl RuleId {
    pub fn is_deployment_rule(self) -> bool {
        matches!(
            self,
            RuleId::Decrease | RuleId::DailyCap | RuleId::Growth300 | RuleId::Growth200 | RuleId::Growth50
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::Decrease => "1",
            RuleId::DailyCap => "2",
            RuleId::Growth300 => "3",
            RuleId::Growth200 => "4",
            RuleId::Growth50 => "5",
            RuleId::Jump => "jump",
            RuleId::HistoryDecrease => "history_decrease",
            RuleId::NonMonotonicPayload => "non_monotonic_payload",
            RuleId::OutOfOrder => "out_of_order",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn format_rules(rules: &[RuleId]) -> String {
    rules.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(",")
}

mod ratio_str {
    use num_rational::Ratio;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Ratio<u64>, s: S) -> Result<S::Ok, S::Error> {
        if *r.denom() == 1 {
            s.serialize_str(&r.numer().to_string())
        } else {
            s.serialize_str(&format!("{}/{}", r.numer(), r.denom()))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(u64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Ratio<u64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Int(n) => Ok(Ratio::from_integer(n)),
            Raw::Text(t) => super::parse_ratio(&t).map_err(de::Error::custom),
        }
    }
}

/// Parses `"3"`, `"0.10"` or `"1/10"` into an exact non-negative ratio.
pub fn parse_ratio(text: &str) -> Result<Ratio<u64>, String> {
    let t = text.trim();
    let bad = || format!("`{text}` is not a non-negative rational");
    if let Some((n, d)) = t.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| bad())?;
        let d: u64 = d.trim().parse().map_err(|_| bad())?;
        if d == 0 {
            return Err(bad());
        }
        return Ok(Ratio::new(n, d));
    }
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) || frac.len() > 18 {
        return Err(bad());
    }
    let denom = 10u64.pow(frac.len() as u32);
    let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
    let frac: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
    let numer = int
        .checked_mul(denom)
        .and_then(|v| v.checked_add(frac))
        .ok_or_else(bad)?;
    Ok(Ratio::new(numer, denom))
}

/// A growth rule: fires when `(new - prev) / prev > ratio` and `prev > floor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthRule {
    #[serde(with = "ratio_str")]
    pub ratio: Ratio<u64>,
    pub floor: u64,
}

impl GrowthRule {
    pub fn new(ratio: Ratio<u64>, floor: u64) -> Self {
        Self { ratio, floor }
    }

    pub fn fires(&self, prev: u64, new: u64) -> bool {
        if prev <= self.floor || new <= prev {
            return false;
        }
        let increase = (new - prev) as u128;
        increase * *self.ratio.denom() as u128 > *self.ratio.numer() as u128 * prev as u128
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    #[serde(with = "ratio_str")]
    pub jump_ratio: Ratio<u64>,
    pub jump_floor: u64,
    pub hold_window_min_minutes: i64,
    pub hold_window_max_minutes: i64,
    pub hold_window_minutes: i64,
    pub abs_daily_cap: u64,
    pub pct300: GrowthRule,
    pub pct200: GrowthRule,
    pub pct50: GrowthRule,
    #[serde(with = "ratio_str")]
    pub full_history_decrease_alarm_fraction: Ratio<u64>,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            jump_ratio: Ratio::from_integer(3),
            jump_floor: 100,
            hold_window_min_minutes: 120,
            hold_window_max_minutes: 360,
            hold_window_minutes: 240,
            abs_daily_cap: 4000,
            pct300: GrowthRule::new(Ratio::from_integer(3), 10),
            pct200: GrowthRule::new(Ratio::from_integer(2), 50),
            pct50: GrowthRule::new(Ratio::new(1, 2), 1000),
            full_history_decrease_alarm_fraction: Ratio::new(1, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid gate configuration: {0}")]
pub struct ConfigError(pub String);

impl GateConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("jump_ratio", *self.jump_ratio.numer() > 0),
            ("jump_floor", self.jump_floor > 0),
            ("hold_window_min_minutes", self.hold_window_min_minutes > 0),
            ("abs_daily_cap", self.abs_daily_cap > 0),
            ("pct300.ratio", *self.pct300.ratio.numer() > 0),
            ("pct200.ratio", *self.pct200.ratio.numer() > 0),
            ("pct50.ratio", *self.pct50.ratio.numer() > 0),
            ("pct300.floor", self.pct300.floor > 0),
            ("pct200.floor", self.pct200.floor > 0),
            ("pct50.floor", self.pct50.floor > 0),
            (
                "full_history_decrease_alarm_fraction",
                *self.full_history_decrease_alarm_fraction.numer() > 0,
            ),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(ConfigError(format!("{name} must be positive")));
        }
        if self.hold_window_min_minutes > self.hold_window_max_minutes {
            return Err(ConfigError("hold window min exceeds max".into()));
        }
        if !(self.hold_window_min_minutes..=self.hold_window_max_minutes).contains(&self.hold_window_minutes) {
            return Err(ConfigError("hold window outside [min, max]".into()));
        }
        Ok(())
    }

    pub fn hold_window(&self) -> Duration {
        Duration::minutes(self.hold_window_minutes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "decision", content = "detail")]
pub enum GateDecision {
    Allow,
    Block(Vec<RuleId>),
    Hold(u64),
}

impl GateDecision {
    pub fn label(&self) -> &'static str {
        match self {
            GateDecision::Allow => "ALLOW",
            GateDecision::Block(_) => "BLOCK",
            GateDecision::Hold(_) => "HOLD",
        }
    }
}

/// Evaluates the five deployment guard rules and reports every one that fires.
pub fn deployment_check(config: &GateConfig, prev: u64, new: u64, level: Level) -> GateDecision {
    let rules = deployment_rules(config, prev, new, level);
    if rules.is_empty() {
        GateDecision::Allow
    } else {
        GateDecision::Block(rules)
    }
}

pub fn deployment_rules(config: &GateConfig, prev: u64, new: u64, level: Level) -> Vec<RuleId> {
    let mut rules = Vec::new();
    if new < prev {
        rules.push(RuleId::Decrease);
    }
    if level == Level::Subdivision && new > prev && new - prev > config.abs_daily_cap {
        rules.push(RuleId::DailyCap);
    }
    if config.pct300.fires(prev, new) {
        rules.push(RuleId::Growth300);
    }
    if config.pct200.fires(prev, new) {
        rules.push(RuleId::Growth200);
    }
    if config.pct50.fires(prev, new) {
        rules.push(RuleId::Growth50);
    }
    rules
}

/// A change by more than `jump_ratio` in either direction from a base above `jump_floor`.
pub fn detect_jump(config: &GateConfig, prev: u64, new: u64) -> bool {
    if prev <= config.jump_floor {
        return false;
    }
    let (p, q) = (*config.jump_ratio.numer() as u128, *config.jump_ratio.denom() as u128);
    let (prev, new) = (prev as u128, new as u128);
    new * q > p * prev || new * p < q * prev
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecreaseClass {
    HistoryCorrection,
    JumpError,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{new} is not below the last committed value {last:?}")]
pub struct NotADecrease {
    pub last: Option<u64>,
    pub new: u64,
}

pub fn classify_decrease_value(config: &GateConfig, last: u64, new: u64) -> Result<DecreaseClass, NotADecrease> {
    if new >= last {
        return Err(NotADecrease { last: Some(last), new });
    }
    Ok(if detect_jump(config, last, new) {
        DecreaseClass::JumpError
    } else {
        DecreaseClass::HistoryCorrection
    })
}

pub fn classify_decrease(
    config: &GateConfig,
    series: &CumulativeSeries,
    new: u64,
) -> Result<DecreaseClass, NotADecrease> {
    match series.last() {
        Some((_, p)) => classify_decrease_value(config, p.value, new),
        None => Err(NotADecrease { last: None, new }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ChangeKind {
    Point { date: NaiveDate, value: u64 },
    History { points: Vec<(NaiveDate, u64)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChangeTag {
    HistoricalEdit,
    Decrease,
}

/// A candidate write to one series, produced by ingestion or reconciliation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedChange {
    pub source_id: String,
    pub fetched_at: DateTime<Utc>,
    pub region_id: String,
    pub metric: Metric,
    pub kind: ChangeKind,
    #[serde(default)]
    pub tags: BTreeSet<ChangeTag>,
}

impl ProposedChange {
    /// The value a reviewer sees: the point value or the latest history value.
    pub fn headline_value(&self) -> u64 {
        match &self.kind {
            ChangeKind::Point { value, .. } => *value,
            ChangeKind::History { points } => points.last().map(|(_, v)| *v).unwrap_or(0),
        }
    }

    pub fn headline_date(&self) -> Option<NaiveDate> {
        match &self.kind {
            ChangeKind::Point { date, .. } => Some(*date),
            ChangeKind::History { points } => points.last().map(|(d, _)| *d),
        }
    }

    /// Same target and payload, ignoring fetch metadata and tags.
    pub fn same_change(&self, other: &ProposedChange) -> bool {
        self.region_id == other.region_id && self.metric == other.metric && self.kind == other.kind
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TicketState {
    Held,
    Approved,
    Rejected,
    ExpiredRetried,
}

impl std::str::FromStr for TicketState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HELD" => Ok(TicketState::Held),
            "APPROVED" => Ok(TicketState::Approved),
            "REJECTED" => Ok(TicketState::Rejected),
            "EXPIRED_RETRIED" => Ok(TicketState::ExpiredRetried),
            other => Err(format!("unknown ticket state `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldTicket {
    pub ticket_id: u64,
    pub region_id: String,
    pub metric: Metric,
    pub proposed: ProposedChange,
    /// Committed value the proposal was compared against, if any.
    pub previous: Option<u64>,
    pub triggered_rules: Vec<RuleId>,
    pub created_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
    pub state: TicketState,
    pub resolved_by: Option<String>,
    pub resolved_at: Option<DateTime<Utc>>,
}

impl HoldTicket {
    pub fn deployment_rules(&self) -> Vec<RuleId> {
        self.triggered_rules
            .iter()
            .copied()
            .filter(|r| r.is_deployment_rule())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HoldDecision {
    Approve,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HoldError {
    #[error("unknown hold ticket {0}")]
    UnknownTicket(u64),
    #[error("hold ticket {0} is already resolved")]
    AlreadyResolved(u64),
    #[error("a hold needs at least one triggered rule")]
    NoRules,
}

/// All hold tickets, keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldBook {
    tickets: BTreeMap<u64, HoldTicket>,
    next_id: u64,
}

impl HoldBook {
    pub fn open_hold(
        &mut self,
        config: &GateConfig,
        proposal: ProposedChange,
        previous: Option<u64>,
        rules: Vec<RuleId>,
        now: DateTime<Utc>,
    ) -> Result<&HoldTicket, HoldError> {
        if rules.is_empty() {
            return Err(HoldError::NoRules);
        }
        self.next_id += 1;
        let id = self.next_id;
        let ticket = HoldTicket {
            ticket_id: id,
            region_id: proposal.region_id.clone(),
            metric: proposal.metric,
            proposed: proposal,
            previous,
            triggered_rules: rules,
            created_at: now,
            expires_at: now + config.hold_window(),
            state: TicketState::Held,
            resolved_by: None,
            resolved_at: None,
        };
        Ok(self.tickets.entry(id).or_insert(ticket))
    }

    pub fn get(&self, id: u64) -> Option<&HoldTicket> {
        self.tickets.get(&id)
    }

    pub fn tickets(&self) -> impl Iterator<Item = &HoldTicket> {
        self.tickets.values()
    }

    pub fn in_state(&self, state: TicketState) -> Vec<&HoldTicket> {
        self.tickets.values().filter(|t| t.state == state).collect()
    }

    /// A HELD ticket already carrying the same change, if any.
    pub fn find_pending(&self, proposal: &ProposedChange) -> Option<&HoldTicket> {
        self.tickets
            .values()
            .find(|t| t.state == TicketState::Held && t.proposed.same_change(proposal))
    }

    /// HELD → `to`. Fails if the ticket is missing or no longer HELD.
    pub fn transition(
        &mut self,
        id: u64,
        to: TicketState,
        actor: &str,
        now: DateTime<Utc>,
    ) -> Result<&HoldTicket, HoldError> {
        let ticket = self.tickets.get_mut(&id).ok_or(HoldError::UnknownTicket(id))?;
        if ticket.state != TicketState::Held || to == TicketState::Held {
            return Err(HoldError::AlreadyResolved(id));
        }
        ticket.state = to;
        ticket.resolved_by = Some(actor.to_string());
        ticket.resolved_at = Some(now);
        Ok(ticket)
    }

    pub fn check_held(&self, id: u64) -> Result<&HoldTicket, HoldError> {
        let ticket = self.tickets.get(&id).ok_or(HoldError::UnknownTicket(id))?;
        if ticket.state != TicketState::Held {
            return Err(HoldError::AlreadyResolved(id));
        }
        Ok(ticket)
    }

    /// Ids of HELD tickets whose window has elapsed at `now`.
    pub fn expired(&self, now: DateTime<Utc>) -> Vec<u64> {
        self.tickets
            .values()
            .filter(|t| t.state == TicketState::Held && t.expires_at <= now)
            .map(|t| t.ticket_id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "outcome", content = "existing_id")]
pub enum DedupeOutcome {
    Unique,
    Duplicate(String),
}

/// Looks for an already-recorded copy of `candidate` within its own subdivision.
///
/// A match needs the same region, report date, metric and cluster size, plus
/// either a shared source reference or identical demographics.
pub fn dedupe_case<'a, I>(candidate: &CaseRecord, existing: I) -> DedupeOutcome
where
    I: IntoIterator<Item = &'a CaseRecord>,
{
    for other in existing {
        if other.region_id != candidate.region_id {
            continue;
        }
        let same_attrs = other.report_date == candidate.report_date
            && other.metric == candidate.metric
            && other.cluster_size == candidate.cluster_size;
        if !same_attrs {
            continue;
        }
        let shares_ref = other
            .source_refs
            .iter()
            .any(|r| candidate.source_refs.iter().any(|c| c.trim() == r.trim()));
        if shares_ref || other.demographics == candidate.demographics {
            return DedupeOutcome::Duplicate(other.record_id.clone());
        }
    }
    DedupeOutcome::Unique
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn cfg() -> GateConfig {
        GateConfig::default()
    }

    fn rules(prev: u64, new: u64, level: Level) -> Vec<RuleId> {
        match deployment_check(&cfg(), prev, new, level) {
            GateDecision::Allow => vec![],
            GateDecision::Block(r) => r,
            GateDecision::Hold(_) => unreachable!(),
        }
    }

    #[test]
    fn okaloosa_transit_value() {
        use RuleId::*;
        assert_eq!(rules(102, 102_103, Level::Subdivision), vec![DailyCap, Growth300, Growth200]);
        assert_eq!(rules(102, 102_103, Level::Division), vec![Growth300, Growth200]);
    }

    #[test]
    fn guard_examples() {
        assert_eq!(rules(50, 49, Level::Subdivision), vec![RuleId::Decrease]);
        assert!(rules(10, 45, Level::Subdivision).is_empty());
        assert!(rules(1000, 1501, Level::Subdivision).is_empty());
        assert_eq!(rules(1001, 1503, Level::Subdivision), vec![RuleId::Growth50]);
        // first-ever report: only the absolute cap can fire
        assert_eq!(rules(0, 4001, Level::Subdivision), vec![RuleId::DailyCap]);
        assert!(rules(0, 4000, Level::Subdivision).is_empty());
    }

    #[test]
    fn growth_boundaries_are_strict() {
        // exactly +300% from 11 is 44
        assert!(rules(11, 44, Level::Division).is_empty());
        assert_eq!(rules(11, 45, Level::Division), vec![RuleId::Growth300]);
        // exactly +200% from 51 is 153
        assert!(!rules(51, 153, Level::Division).contains(&RuleId::Growth200));
        assert!(rules(51, 154, Level::Division).contains(&RuleId::Growth200));
    }

    #[test]
    fn jump_examples() {
        let c = cfg();
        assert!(detect_jump(&c, 150, 500));
        assert!(!detect_jump(&c, 150, 450));
        assert!(!detect_jump(&c, 80, 400));
        assert!(!detect_jump(&c, 100, 1000));
        assert!(detect_jump(&c, 500, 140));
        assert!(!detect_jump(&c, 300, 100));
    }

    #[test]
    fn decrease_classes() {
        let c = cfg();
        assert_eq!(classify_decrease_value(&c, 500, 140), Ok(DecreaseClass::JumpError));
        assert_eq!(classify_decrease_value(&c, 120, 110), Ok(DecreaseClass::HistoryCorrection));
        assert_eq!(classify_decrease_value(&c, 50, 40), Ok(DecreaseClass::HistoryCorrection));
        assert!(classify_decrease_value(&c, 50, 50).is_err());
        let empty = CumulativeSeries::new("R", Metric::Confirmed);
        assert!(classify_decrease(&c, &empty, 1).is_err());
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratio("3").unwrap(), Ratio::from_integer(3));
        assert_eq!(parse_ratio("0.10").unwrap(), Ratio::new(1, 10));
        assert_eq!(parse_ratio("1/2").unwrap(), Ratio::new(1, 2));
        assert_eq!(parse_ratio(".5").unwrap(), Ratio::new(1, 2));
        for bad in ["", ".", "-1", "1/0", "abc", "1.2.3"] {
            assert!(parse_ratio(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let text = toml::to_string(&cfg()).unwrap();
        let back: GateConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg());
        let partial: GateConfig = toml::from_str("jump_floor = 200\nfull_history_decrease_alarm_fraction = \"0.25\"").unwrap();
        assert_eq!(partial.jump_floor, 200);
        assert_eq!(partial.full_history_decrease_alarm_fraction, Ratio::new(1, 4));
        partial.validate().unwrap();
        let bad = GateConfig {
            hold_window_minutes: 400,
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }

    fn proposal(value: u64) -> ProposedChange {
        ProposedChange {
            source_id: "s".into(),
            fetched_at: Utc.with_ymd_and_hms(2020, 4, 15, 12, 0, 0).unwrap(),
            region_id: "US-FL-091".into(),
            metric: Metric::Confirmed,
            kind: ChangeKind::Point {
                date: NaiveDate::from_ymd_opt(2020, 4, 15).unwrap(),
                value,
            },
            tags: BTreeSet::new(),
        }
    }

    #[test]
    fn hold_lifecycle() {
        let now = Utc.with_ymd_and_hms(2020, 4, 15, 12, 0, 0).unwrap();
        let mut book = HoldBook::default();
        let t = book
            .open_hold(&cfg(), proposal(102_103), Some(102), vec![RuleId::DailyCap], now)
            .unwrap()
            .clone();
        assert_eq!(t.expires_at - t.created_at, Duration::hours(4));
        assert!(book.find_pending(&proposal(102_103)).is_some());
        assert!(book.expired(now + Duration::hours(3)).is_empty());
        assert_eq!(book.expired(now + Duration::hours(4)), vec![t.ticket_id]);

        book.transition(t.ticket_id, TicketState::Rejected, "op", now).unwrap();
        assert_eq!(
            book.transition(t.ticket_id, TicketState::Approved, "op", now).unwrap_err(),
            HoldError::AlreadyResolved(t.ticket_id)
        );
        assert_eq!(book.check_held(99).unwrap_err(), HoldError::UnknownTicket(99));
        assert!(book.find_pending(&proposal(102_103)).is_none());
        assert_eq!(
            book.open_hold(&cfg(), proposal(1), None, vec![], now).unwrap_err(),
            HoldError::NoRules
        );
    }

    fn record(id: &str, region: &str, size: u32, refs: &[&str], age: &str) -> CaseRecord {
        CaseRecord {
            record_id: id.into(),
            region_id: region.into(),
            report_date: NaiveDate::from_ymd_opt(2020, 3, 5).unwrap(),
            cluster_size: size,
            metric: Metric::Confirmed,
            demographics: BTreeMap::from([("age".to_string(), age.to_string())]),
            summary: String::new(),
            source_refs: refs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn dedupe_rules() {
        let existing = vec![record("a", "US-WA-033", 1, &["http://news/1"], "40s")];
        let same = record("b", "US-WA-033", 1, &["http://news/1"], "40s");
        assert_eq!(dedupe_case(&same, &existing), DedupeOutcome::Duplicate("a".into()));

        let disjoint = record("c", "US-WA-033", 1, &["http://news/2"], "60s");
        assert_eq!(dedupe_case(&disjoint, &existing), DedupeOutcome::Unique);

        let bigger = record("d", "US-WA-033", 3, &["http://news/1"], "40s");
        assert_eq!(dedupe_case(&bigger, &existing), DedupeOutcome::Unique);

        let same_demo = record("e", "US-WA-033", 1, &["http://other"], "40s");
        assert_eq!(dedupe_case(&same_demo, &existing), DedupeOutcome::Duplicate("a".into()));

        let elsewhere = record("f", "US-WA-061", 1, &["http://news/1"], "40s");
        assert_eq!(dedupe_case(&elsewhere, &existing), DedupeOutcome::Unique);
    }
}
