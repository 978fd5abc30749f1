//! The ingest → gate → store pipeline and its persistent state.
//!
//! [`Engine`] owns every mutable piece (store, hold tickets, diary, issue
//! desk, journal, poll schedule) and is the only place where gate decisions
//! turn into committed data. Mutating methods take `&mut self`, which
//! serializes evaluation and commit per series; callers that share an
//! engine wrap it in a lock.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::gate::{
    classify_decrease_value, deployment_rules, detect_jump, format_rules, ChangeKind, DecreaseClass, GateConfig,
    GateDecision, HoldBook, HoldDecision, HoldError, HoldTicket, ProposedChange, RuleId, TicketState,
};
use crate::ingest::{
    ingest, parse_payload, FetchBatch, FetchError, Fetcher, IngestPlan, ParseError, Paradigm, PollScheduler,
    SourceDescriptor,
};
use crate::issues::{IssueCategory, IssueDesk, IssueError, IssueReport, Outcome};
use crate::journal::{GateAction, Journal, JournalEvent};
use crate::reconciler::{
    compute_unassigned, cross_level_check, CheckOutcome, Diary, ReconcileConfig, ReconcileError,
};
use crate::region::{Level, RegionError};
use crate::series::{Metric, Provenance};
use crate::store::{history_is_valid, Store, StoreError};

/// Source id used for unassigned-bucket writes produced by reconciliation.
pub const RECONCILER_SOURCE: &str = "reconciler";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub gate: GateConfig,
    pub reconcile: ReconcileConfig,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("source `{0}` was already backfilled")]
    AlreadyBackfilled(String),
    #[error("archive dated {next} follows {prev}; archives must be strictly oldest-first")]
    OutOfOrderArchive { prev: NaiveDate, next: NaiveDate },
    #[error("source `{0}` is not a SNAPSHOT source")]
    WrongParadigm(String),
    #[error("ticket {0} conflicts with newer committed data")]
    Superseded(u64),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Hold(#[from] HoldError),
    #[error(transparent)]
    Issue(#[from] IssueError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error("state file: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What happened to one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disposition {
    Applied(GateAction),
    /// Identical to stored data.
    Unchanged,
    /// Identical to a change already waiting on a HELD ticket.
    AlreadyHeld,
    /// Identical to a change rejected since the series last changed.
    AlreadyRejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applied {
    pub region_id: String,
    pub metric: Metric,
    pub date: Option<NaiveDate>,
    pub prev: Option<u64>,
    pub proposed: u64,
    pub decision: GateDecision,
    pub rules: Vec<RuleId>,
    pub disposition: Disposition,
}

impl Applied {
    fn skipped(p: &ProposedChange, disposition: Disposition) -> Self {
        Self {
            region_id: p.region_id.clone(),
            metric: p.metric,
            date: p.headline_date(),
            prev: None,
            proposed: p.headline_value(),
            decision: GateDecision::Allow,
            rules: Vec::new(),
            disposition,
        }
    }

    pub fn summary(&self) -> String {
        let date = self.date.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
        let prev = self.prev.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
        let action = match self.disposition {
            Disposition::Applied(a) => serde_json::to_value(a).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
            Disposition::Unchanged => "unchanged".into(),
            Disposition::AlreadyHeld => "already_held".into(),
            Disposition::AlreadyRejected => "already_rejected".into(),
        };
        let rules = if self.rules.is_empty() {
            String::new()
        } else {
            format!(" rules={}", format_rules(&self.rules))
        };
        format!(
            "{} {} {} prev={} new={} {}{} -> {}",
            self.region_id,
            self.metric,
            date,
            prev,
            self.proposed,
            self.decision.label(),
            rules,
            action
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub source_id: String,
    pub payload_digest: String,
    pub observations: usize,
    pub unmatched_keys: Vec<String>,
    pub unknown_regions: Vec<String>,
    pub new_cases: usize,
    pub duplicates: Vec<(String, String)>,
    pub outcomes: Vec<Applied>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReconcileReport {
    pub unassigned: Vec<Applied>,
    pub child_lead: Vec<(String, Metric, u64)>,
    pub diary_entries: Vec<u64>,
    pub revisited: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct PersistedState {
    store: Store,
    holds: HoldBook,
    diary: Diary,
    issues: IssueDesk,
    scheduler: PollScheduler,
    backfilled: BTreeSet<String>,
    #[serde(default)]
    rejected: BTreeMap<String, Vec<ChangeKind>>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    store: Store,
    holds: HoldBook,
    diary: Diary,
    issues: IssueDesk,
    journal: Journal,
    scheduler: PollScheduler,
    backfilled: BTreeSet<String>,
    /// Changes rejected per series (`region/metric`), forgotten once that
    /// series changes, so re-ingesting rejected data is a no-op.
    rejected: BTreeMap<String, Vec<ChangeKind>>,
    sources: Vec<SourceDescriptor>,
    config: EngineConfig,
    persisted_journal_len: usize,
}

fn series_key(region_id: &str, metric: Metric) -> String {
    format!("{region_id}/{metric}")
}

const STATE_FILE: &str = "state.json";
const JOURNAL_FILE: &str = "journal.jsonl";

impl Engine {
    pub fn new(store: Store, sources: Vec<SourceDescriptor>, config: EngineConfig) -> Self {
        Self {
            store,
            holds: HoldBook::default(),
            diary: Diary::default(),
            issues: IssueDesk::default(),
            journal: Journal::default(),
            scheduler: PollScheduler::default(),
            backfilled: BTreeSet::new(),
            rejected: BTreeMap::new(),
            sources,
            config,
            persisted_journal_len: 0,
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut Store {
        &mut self.store
    }

    pub fn holds(&self) -> &HoldBook {
        &self.holds
    }

    pub fn diary(&self) -> &Diary {
        &self.diary
    }

    pub fn issues(&self) -> &IssueDesk {
        &self.issues
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn scheduler(&self) -> &PollScheduler {
        &self.scheduler
    }

    pub fn sources(&self) -> &[SourceDescriptor] {
        &self.sources
    }

    pub fn source(&self, id: &str) -> Result<&SourceDescriptor, EngineError> {
        self.sources
            .iter()
            .find(|s| s.source_id == id)
            .ok_or_else(|| EngineError::UnknownSource(id.to_string()))
    }

    pub fn is_backfilled(&self, source_id: &str) -> bool {
        self.backfilled.contains(source_id)
    }

    /// Digest over committed data plus gate, diary and issue state.
    pub fn state_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(&self.persisted()).expect("state serializes");
        hex::encode(Sha256::digest(bytes))
    }

    fn persisted(&self) -> PersistedState {
        PersistedState {
            store: self.store.clone(),
            holds: self.holds.clone(),
            diary: self.diary.clone(),
            issues: self.issues.clone(),
            scheduler: self.scheduler.clone(),
            backfilled: self.backfilled.clone(),
            rejected: self.rejected.clone(),
        }
    }

    /// Loads `state.json` and `journal.jsonl` from `dir`, or starts empty.
    pub fn open(dir: &Path, store: Store, sources: Vec<SourceDescriptor>, config: EngineConfig) -> Result<Self, EngineError> {
        let mut engine = Self::new(store, sources, config);
        let state_path = dir.join(STATE_FILE);
        if state_path.exists() {
            let text = fs::read_to_string(&state_path)?;
            let state: PersistedState =
                serde_json::from_str(&text).map_err(|e| EngineError::State(e.to_string()))?;
            let registry = std::mem::take(&mut engine.store);
            engine.store = state.store;
            for region in registry.regions().iter() {
                if !engine.store.regions().contains(&region.region_id) {
                    engine.store.register_region(region.clone())?;
                }
            }
            engine.holds = state.holds;
            engine.diary = state.diary;
            engine.issues = state.issues;
            engine.scheduler = state.scheduler;
            engine.backfilled = state.backfilled;
            engine.rejected = state.rejected;
        }
        let journal_path = dir.join(JOURNAL_FILE);
        if journal_path.exists() {
            let text = fs::read_to_string(&journal_path)?;
            engine.journal = Journal::from_jsonl(&text).map_err(|e| EngineError::State(e.to_string()))?;
            engine.persisted_journal_len = engine.journal.len();
        }
        Ok(engine)
    }

    /// Writes state atomically and appends new journal lines.
    pub fn save(&mut self, dir: &Path) -> Result<(), EngineError> {
        fs::create_dir_all(dir)?;
        let tmp: PathBuf = dir.join(format!("{STATE_FILE}.tmp"));
        let bytes = serde_json::to_vec_pretty(&self.persisted()).map_err(|e| EngineError::State(e.to_string()))?;
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, dir.join(STATE_FILE))?;
        let tail = self.journal.tail_jsonl(self.persisted_journal_len);
        if !tail.is_empty() {
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(JOURNAL_FILE))?;
            file.write_all(tail.as_bytes())?;
        }
        self.persisted_journal_len = self.journal.len();
        Ok(())
    }

    fn level_of(&self, region_id: &str) -> Result<Level, EngineError> {
        self.store
            .regions()
            .get(region_id)
            .map(|r| r.level)
            .ok_or_else(|| EngineError::UnknownRegion(region_id.to_string()))
    }

    fn journal_gate(&mut self, now: DateTime<Utc>, p: &ProposedChange, applied: &Applied, ticket_id: Option<u64>) {
        let action = match applied.disposition {
            Disposition::Applied(a) => a,
            _ => return,
        };
        self.journal.append(
            now,
            JournalEvent::Gate {
                source_id: p.source_id.clone(),
                region_id: p.region_id.clone(),
                metric: p.metric,
                date: applied.date,
                prev: applied.prev,
                proposed: applied.proposed,
                decision: applied.decision.label().to_string(),
                rules: applied.rules.clone(),
                action,
                ticket_id,
            },
        );
    }

    /// Runs one proposal through the gate and commits it when allowed.
    pub fn apply_proposal(&mut self, p: ProposedChange, now: DateTime<Utc>) -> Result<Applied, EngineError> {
        let level = self.level_of(&p.region_id)?;
        if self.holds.find_pending(&p).is_some() {
            return Ok(Applied::skipped(&p, Disposition::AlreadyHeld));
        }
        let key = series_key(&p.region_id, p.metric);
        if self.rejected.get(&key).is_some_and(|kinds| kinds.contains(&p.kind)) {
            return Ok(Applied::skipped(&p, Disposition::AlreadyRejected));
        }
        let applied = match p.kind.clone() {
            ChangeKind::Point { date, value } => self.gate_point(&p, level, date, value, now)?,
            ChangeKind::History { points } => self.gate_history(&p, level, &points, now)?,
        };
        match applied.disposition {
            Disposition::Applied(GateAction::Reject) => self.remember_rejection(&p),
            Disposition::Applied(GateAction::Hold) => {}
            Disposition::Applied(_) => {
                self.rejected.remove(&key);
            }
            _ => {}
        }
        debug!(proposal = %applied.summary(), "gate");
        Ok(applied)
    }

    fn hold(
        &mut self,
        p: &ProposedChange,
        prev: Option<u64>,
        rules: Vec<RuleId>,
        mut applied: Applied,
        now: DateTime<Utc>,
    ) -> Result<Applied, EngineError> {
        let id = self
            .holds
            .open_hold(&self.config.gate, p.clone(), prev, rules, now)?
            .ticket_id;
        applied.disposition = Disposition::Applied(GateAction::Hold);
        self.journal_gate(now, p, &applied, Some(id));
        applied.decision = GateDecision::Hold(id);
        Ok(applied)
    }

    fn gate_point(
        &mut self,
        p: &ProposedChange,
        level: Level,
        date: NaiveDate,
        value: u64,
        now: DateTime<Utc>,
    ) -> Result<Applied, EngineError> {
        let provenance = Provenance::new(&p.source_id, p.fetched_at);
        let series = self.store.series(&p.region_id, p.metric);
        if series.and_then(|s| s.get(date)) == Some(value) {
            return Ok(Applied::skipped(p, Disposition::Unchanged));
        }
        let prev_day = series.and_then(|s| s.point_before(date)).map_or(0, |(_, pt)| pt.value);
        let shown = series.and_then(|s| s.value_at(date));
        let later = series.and_then(|s| s.point_after(date)).map(|(_, pt)| pt.value);
        let cfg = self.config.gate.clone();

        let mut applied = Applied {
            region_id: p.region_id.clone(),
            metric: p.metric,
            date: Some(date),
            prev: Some(prev_day),
            proposed: value,
            decision: GateDecision::Allow,
            rules: Vec::new(),
            disposition: Disposition::Applied(GateAction::Commit),
        };

        if let Some(later) = later {
            if value < prev_day || value > later {
                applied.decision = GateDecision::Block(vec![RuleId::OutOfOrder]);
                applied.rules = vec![RuleId::OutOfOrder];
                applied.disposition = Disposition::Applied(GateAction::Reject);
                self.journal_gate(now, p, &applied, None);
                return Ok(applied);
            }
        } else if let Some(reference) = shown.filter(|r| value < *r) {
            // Decrease against what the series currently shows for this date.
            applied.prev = Some(reference);
            let rules = deployment_rules(&cfg, reference, value, level);
            applied.decision = GateDecision::Block(rules.clone());
            applied.rules = rules.clone();
            return match classify_decrease_value(&cfg, reference, value).expect("strict decrease") {
                DecreaseClass::JumpError => {
                    let mut rules = rules;
                    rules.push(RuleId::Jump);
                    applied.rules = rules.clone();
                    self.hold(p, Some(reference), rules, applied, now)
                }
                DecreaseClass::HistoryCorrection => {
                    self.store
                        .commit_with_repair(&p.region_id, p.metric, date, value, provenance)?;
                    applied.disposition = Disposition::Applied(GateAction::Repair);
                    self.journal_gate(now, p, &applied, None);
                    Ok(applied)
                }
            };
        }

        let mut rules = deployment_rules(&cfg, prev_day, value, level);
        applied.decision = if rules.is_empty() {
            GateDecision::Allow
        } else {
            GateDecision::Block(rules.clone())
        };
        if detect_jump(&cfg, prev_day, value) {
            rules.push(RuleId::Jump);
        }
        applied.rules = rules.clone();
        if !rules.is_empty() {
            return self.hold(p, Some(prev_day), rules, applied, now);
        }
        self.store
            .commit_point(&p.region_id, p.metric, date, value, provenance)?;
        self.journal_gate(now, p, &applied, None);
        Ok(applied)
    }

    fn gate_history(
        &mut self,
        p: &ProposedChange,
        level: Level,
        points: &[(NaiveDate, u64)],
        now: DateTime<Utc>,
    ) -> Result<Applied, EngineError> {
        let stored: BTreeMap<NaiveDate, u64> = self
            .store
            .series(&p.region_id, p.metric)
            .map(|s| s.values().into_iter().collect())
            .unwrap_or_default();
        if stored.iter().map(|(d, v)| (*d, *v)).eq(points.iter().copied()) {
            return Ok(Applied::skipped(p, Disposition::Unchanged));
        }
        let mut applied = Applied {
            region_id: p.region_id.clone(),
            metric: p.metric,
            date: p.headline_date(),
            prev: stored.values().next_back().copied(),
            proposed: p.headline_value(),
            decision: GateDecision::Allow,
            rules: Vec::new(),
            disposition: Disposition::Applied(GateAction::Replace),
        };
        if points.is_empty() || !history_is_valid(points) {
            applied.decision = GateDecision::Block(vec![RuleId::NonMonotonicPayload]);
            applied.rules = vec![RuleId::NonMonotonicPayload];
            applied.disposition = Disposition::Applied(GateAction::Reject);
            self.journal_gate(now, p, &applied, None);
            return Ok(applied);
        }

        let cfg = self.config.gate.clone();
        let alarm = cfg.full_history_decrease_alarm_fraction;
        let mut rules = BTreeSet::new();
        let mut prev = 0u64;
        for (date, value) in points {
            match stored.get(date) {
                Some(old) if old == value => {}
                old => {
                    if let Some(old) = old.filter(|o| value < o) {
                        let drop = (*old - *value) as u128;
                        if drop * *alarm.denom() as u128 > *alarm.numer() as u128 * *old as u128 {
                            rules.insert(RuleId::HistoryDecrease);
                        }
                    }
                    rules.extend(deployment_rules(&cfg, prev, *value, level));
                    if detect_jump(&cfg, prev, *value) {
                        rules.insert(RuleId::Jump);
                    }
                }
            }
            prev = *value;
        }
        let rules: Vec<RuleId> = rules.into_iter().collect();
        if !rules.is_empty() {
            applied.rules = rules.clone();
            applied.decision = GateDecision::Block(rules.clone());
            let prev = applied.prev;
            return self.hold(p, prev, rules, applied, now);
        }
        self.store.replace_history(
            &p.region_id,
            p.metric,
            points,
            Provenance::new(&p.source_id, p.fetched_at),
        )?;
        self.journal_gate(now, p, &applied, None);
        Ok(applied)
    }

    /// Applies a plan produced by [`ingest`]: stores new case records, then
    /// gates each proposal in order.
    pub fn apply_plan(&mut self, plan: IngestPlan, now: DateTime<Utc>) -> Result<Vec<Applied>, EngineError> {
        for record in plan.new_cases {
            self.store.insert_case(record)?;
        }
        plan.proposals
            .into_iter()
            .map(|p| self.apply_proposal(p, now))
            .collect()
    }

    pub fn ingest_batch(
        &mut self,
        batch: &FetchBatch,
        descriptor: &SourceDescriptor,
        now: DateTime<Utc>,
    ) -> Result<IngestReport, EngineError> {
        let plan = ingest(batch, descriptor, &self.store);
        let mut report = IngestReport {
            source_id: batch.source_id.clone(),
            payload_digest: batch.payload_digest.clone(),
            observations: batch.observations.len(),
            unmatched_keys: batch.unmatched_keys.clone(),
            unknown_regions: plan.unknown_regions.clone(),
            new_cases: plan.new_cases.len(),
            duplicates: plan.duplicates.clone(),
            outcomes: Vec::new(),
        };
        for region in &report.unknown_regions {
            warn!(source = %batch.source_id, region = %region, "observation for unknown region skipped");
        }
        report.outcomes = self.apply_plan(plan, now)?;
        Ok(report)
    }

    /// Parses a raw payload for `source_id` and ingests it.
    pub fn ingest_payload(
        &mut self,
        source_id: &str,
        raw: &[u8],
        fetched_at: DateTime<Utc>,
        now: DateTime<Utc>,
    ) -> Result<IngestReport, EngineError> {
        let descriptor = self.source(source_id)?.clone();
        let batch = parse_payload(raw, &descriptor, self.store.regions(), fetched_at)?;
        self.ingest_batch(&batch, &descriptor, now)
    }

    /// Fetches every due source once, concurrently, then ingests the
    /// payloads one at a time in scheduling order. A failed fetch leaves the
    /// source due so it is retried next cycle.
    pub fn poll_once(
        &mut self,
        fetcher: &dyn Fetcher,
        now: DateTime<Utc>,
    ) -> Vec<(String, Result<IngestReport, EngineError>)> {
        let due: Vec<SourceDescriptor> = self
            .scheduler
            .claim_due(&self.sources, now)
            .iter()
            .filter_map(|id| self.source(id).ok().cloned())
            .collect();
        let payloads: Vec<Result<Vec<u8>, FetchError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = due
                .iter()
                .map(|d| scope.spawn(move || fetcher.fetch(d)))
                .collect();
            handles
                .into_iter()
                .zip(&due)
                .map(|(h, d)| {
                    h.join().unwrap_or_else(|_| {
                        Err(FetchError::Failed {
                            endpoint: d.endpoint.clone(),
                            message: "fetch thread panicked".into(),
                        })
                    })
                })
                .collect()
        });
        let mut results = Vec::new();
        for (descriptor, payload) in due.iter().zip(payloads) {
            let id = descriptor.source_id.clone();
            let result = payload
                .map_err(EngineError::from)
                .and_then(|raw| self.ingest_payload(&id, &raw, now, now));
            self.scheduler.complete(&id, now, result.is_ok());
            if let Err(e) = &result {
                warn!(source = %id, error = %e, "poll failed; will retry next cycle");
            }
            results.push((id, result));
        }
        results
    }

    /// Applies dated archives of a SNAPSHOT source oldest-first, exactly once.
    pub fn backfill(
        &mut self,
        source_id: &str,
        archives: &[(NaiveDate, Vec<u8>)],
        now: DateTime<Utc>,
    ) -> Result<Vec<IngestReport>, EngineError> {
        let descriptor = self.source(source_id)?.clone();
        if descriptor.paradigm != Paradigm::Snapshot {
            return Err(EngineError::WrongParadigm(source_id.to_string()));
        }
        if self.backfilled.contains(source_id) {
            return Err(EngineError::AlreadyBackfilled(source_id.to_string()));
        }
        for w in archives.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(EngineError::OutOfOrderArchive {
                    prev: w[0].0,
                    next: w[1].0,
                });
            }
        }
        let batches = archives
            .iter()
            .map(|(date, raw)| {
                let fetched_at = date.and_hms_opt(0, 0, 0).expect("midnight").and_utc();
                parse_payload(raw, &descriptor, self.store.regions(), fetched_at)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut reports = Vec::new();
        for batch in &batches {
            reports.push(self.ingest_batch(batch, &descriptor, now)?);
        }
        self.backfilled.insert(source_id.to_string());
        self.journal.append(
            now,
            JournalEvent::Backfill {
                source_id: source_id.to_string(),
                archives: archives.len(),
            },
        );
        info!(source = %source_id, archives = archives.len(), "backfill complete");
        Ok(reports)
    }

    fn remember_rejection(&mut self, p: &ProposedChange) {
        let kinds = self.rejected.entry(series_key(&p.region_id, p.metric)).or_default();
        if !kinds.contains(&p.kind) {
            kinds.push(p.kind.clone());
        }
    }

    fn force_commit(&mut self, ticket: &HoldTicket) -> Result<(), EngineError> {
        let p = &ticket.proposed;
        self.rejected.remove(&series_key(&p.region_id, p.metric));
        let provenance = Provenance::new(&p.source_id, p.fetched_at);
        match &p.kind {
            ChangeKind::Point { date, value } => {
                self.store
                    .commit_with_repair(&p.region_id, p.metric, *date, *value, provenance)
                    .map_err(|e| match e {
                        StoreError::MonotonicityViolation { .. } => EngineError::Superseded(ticket.ticket_id),
                        other => other.into(),
                    })?;
            }
            ChangeKind::History { points } => {
                self.store
                    .replace_history(&p.region_id, p.metric, points, provenance)?;
            }
        }
        Ok(())
    }

    /// Operator decision on a HELD ticket. APPROVE commits past the gate.
    pub fn resolve_hold(
        &mut self,
        ticket_id: u64,
        decision: HoldDecision,
        operator: &str,
        now: DateTime<Utc>,
    ) -> Result<HoldTicket, EngineError> {
        let ticket = self.holds.check_held(ticket_id)?.clone();
        let (state, committed) = match decision {
            HoldDecision::Approve => {
                self.force_commit(&ticket)?;
                (TicketState::Approved, true)
            }
            HoldDecision::Reject => {
                self.remember_rejection(&ticket.proposed);
                (TicketState::Rejected, false)
            }
        };
        let resolved = self.holds.transition(ticket_id, state, operator, now)?.clone();
        self.journal.append(
            now,
            JournalEvent::HoldResolved {
                ticket_id,
                state,
                actor: operator.to_string(),
                committed,
            },
        );
        Ok(resolved)
    }

    fn source_agrees(&self, ticket: &HoldTicket, fetcher: &dyn Fetcher, now: DateTime<Utc>) -> bool {
        let p = &ticket.proposed;
        if p.source_id == RECONCILER_SOURCE {
            let Some(parent) = self
                .store
                .regions()
                .get(&p.region_id)
                .and_then(|r| r.parent_id.clone())
            else {
                return false;
            };
            return match &p.kind {
                ChangeKind::Point { date, value } => {
                    compute_unassigned(&self.store, &parent, p.metric, *date).ok() == Some(*value)
                }
                ChangeKind::History { .. } => false,
            };
        }
        let Ok(descriptor) = self.source(&p.source_id) else { return false };
        let batch = match fetcher
            .fetch(descriptor)
            .map_err(EngineError::from)
            .and_then(|raw| parse_payload(&raw, descriptor, self.store.regions(), now).map_err(Into::into))
        {
            Ok(b) => b,
            Err(e) => {
                warn!(ticket = ticket.ticket_id, error = %e, "re-fetch at expiry failed");
                return false;
            }
        };
        let plan = ingest(&batch, descriptor, &self.store);
        if descriptor.paradigm == Paradigm::PerCase {
            let ChangeKind::Point { date, value } = &p.kind else { return false };
            let all = self.store.cases().chain(plan.new_cases.iter());
            return self
                .store
                .aggregate_case_records(all)
                .ok()
                .and_then(|t| t.get(&(p.region_id.clone(), p.metric)).and_then(|s| s.get(date).copied()))
                == Some(*value);
        }
        plan.proposals.iter().any(|q| q.same_change(p))
    }

    /// Re-evaluates HELD tickets whose window has elapsed. A ticket whose
    /// source still reports the proposed data is committed (EXPIRED_RETRIED);
    /// any other is discarded as REJECTED.
    pub fn expire_holds(&mut self, fetcher: &dyn Fetcher, now: DateTime<Utc>) -> Vec<HoldTicket> {
        let mut out = Vec::new();
        for id in self.holds.expired(now) {
            let ticket = self.holds.get(id).expect("listed").clone();
            let agrees = self.source_agrees(&ticket, fetcher, now);
            let committed = agrees && self.force_commit(&ticket).is_ok();
            let state = if committed {
                TicketState::ExpiredRetried
            } else {
                self.remember_rejection(&ticket.proposed);
                TicketState::Rejected
            };
            if let Ok(t) = self.holds.transition(id, state, "expiry", now) {
                out.push(t.clone());
            }
            self.journal.append(
                now,
                JournalEvent::HoldResolved {
                    ticket_id: id,
                    state,
                    actor: "expiry".into(),
                    committed,
                },
            );
        }
        out
    }

    fn latest_date(&self, region: &str, metric: Metric) -> Option<NaiveDate> {
        let mut ids: Vec<String> = vec![region.to_string()];
        ids.extend(self.store.regions().child_ids(region).iter().cloned());
        self.store.date_span(&ids, metric).map(|(_, last)| last)
    }

    /// One reconciliation sweep over every parent with child data: revisits
    /// live diary entries, writes unassigned buckets through the gate and
    /// records new discrepancies.
    pub fn reconcile(&mut self, now: DateTime<Utc>) -> Result<ReconcileReport, EngineError> {
        let window = self.config.reconcile.staleness_window();
        let horizon = self.config.reconcile.horizon();
        let mut report = ReconcileReport::default();

        let store = &self.store;
        let latest = |region: &str, metric| {
            let mut ids = vec![region.to_string()];
            ids.extend(store.regions().child_ids(region).iter().cloned());
            store.date_span(&ids, metric).map(|(_, last)| last)
        };
        let revisited = self.diary.periodic_revisit(now, horizon, |entry| {
            let d = &entry.discrepancy;
            let date = latest(&d.parent_region, d.metric).unwrap_or(d.date);
            match cross_level_check(store, &d.parent_region, d.metric, date, window) {
                Ok(CheckOutcome::Discrepancy(current)) => Some(current),
                _ => None,
            }
        });
        report.revisited = revisited.len();

        let parents: Vec<String> = self
            .store
            .regions()
            .iter()
            .filter(|r| r.level != Level::Subdivision && !r.is_unassigned)
            .filter(|r| self.store.regions().child_ids(&r.region_id).iter().any(|c| !c.ends_with(crate::region::UNASSIGNED_SUFFIX)))
            .map(|r| r.region_id.clone())
            .collect();
        for parent in parents {
            for metric in Metric::ALL {
                if self.store.series(&parent, metric).is_none() {
                    continue;
                }
                let Some(date) = self.latest_date(&parent, metric) else { continue };
                match cross_level_check(&self.store, &parent, metric, date, window) {
                    Ok(CheckOutcome::Consistent { unassigned }) => {
                        let bucket = self.store.regions_mut().ensure_unassigned(&parent)?.region_id;
                        let has_series = self.store.series(&bucket, metric).is_some();
                        if unassigned == 0 && !has_series {
                            continue;
                        }
                        let proposal = ProposedChange {
                            source_id: RECONCILER_SOURCE.to_string(),
                            fetched_at: now,
                            region_id: bucket,
                            metric,
                            kind: ChangeKind::Point { date, value: unassigned },
                            tags: BTreeSet::new(),
                        };
                        let applied = self.apply_proposal(proposal, now)?;
                        if applied.disposition != Disposition::Unchanged {
                            report.unassigned.push(applied);
                        }
                    }
                    Ok(CheckOutcome::ChildLead { delta }) => report.child_lead.push((parent.clone(), metric, delta)),
                    Ok(CheckOutcome::Discrepancy(d)) => {
                        let id = self.diary.upsert(d, now, horizon).entry_id;
                        report.diary_entries.push(id);
                    }
                    Err(ReconcileError::NoChildData(_)) | Err(ReconcileError::NoParentReport(_)) => {}
                    Err(ReconcileError::UnknownRegion(r)) => return Err(EngineError::UnknownRegion(r)),
                }
            }
        }
        Ok(report)
    }

    pub fn submit_issue(
        &mut self,
        category: IssueCategory,
        region_id: Option<String>,
        links: Vec<String>,
        body: String,
        now: DateTime<Utc>,
    ) -> Result<IssueReport, EngineError> {
        let regions = self.store.regions();
        let issue = self
            .issues
            .submit(category, region_id, links, body, now, |r| regions.contains(r))?
            .clone();
        self.journal.append(
            now,
            JournalEvent::Issue {
                issue_id: issue.issue_id,
                action: "submit".into(),
                state: issue.state,
                actor: None,
            },
        );
        Ok(issue)
    }

    pub fn assign_issue(&mut self, id: u64, operator: &str, now: DateTime<Utc>) -> Result<IssueReport, EngineError> {
        let issue = self.issues.assign(id, operator)?.clone();
        self.journal.append(
            now,
            JournalEvent::Issue {
                issue_id: id,
                action: "assign".into(),
                state: issue.state,
                actor: Some(operator.to_string()),
            },
        );
        Ok(issue)
    }

    pub fn resolve_issue(
        &mut self,
        id: u64,
        outcome: Outcome,
        note: &str,
        resulting_records: Vec<String>,
        now: DateTime<Utc>,
    ) -> Result<IssueReport, EngineError> {
        for record in &resulting_records {
            if self.store.case(record).is_none() {
                return Err(IssueError::Validation(format!("unknown case record `{record}`")).into());
            }
        }
        let issue = self.issues.resolve(id, outcome, note, resulting_records)?.clone();
        self.journal.append(
            now,
            JournalEvent::Issue {
                issue_id: id,
                action: "resolve".into(),
                state: issue.state,
                actor: issue.assignee.clone(),
            },
        );
        Ok(issue)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::ChangeTag;
    use crate::ingest::test_support::descriptor;
    use crate::ingest::PayloadFormat;
    use crate::region::{Region, RegionTree};
    use chrono::{Duration, TimeZone};

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 4, 15, 12, 0, 0).unwrap()
    }

    fn d(n: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 4, 1).unwrap() + Duration::days(n)
    }

    fn engine() -> Engine {
        let mut r = RegionTree::new();
        r.register_region(Region::new("US", "United States", Level::Country)).unwrap();
        r.register_region(Region::new("US-FL", "Florida", Level::Division).with_parent("US")).unwrap();
        r.register_region(Region::new("US-FL-091", "Okaloosa", Level::Subdivision).with_parent("US-FL")).unwrap();
        let mut snap = descriptor(
            Paradigm::Snapshot,
            PayloadFormat::Csv,
            &[("region", "region"), ("date", "date"), ("confirmed", "metric:confirmed")],
        );
        snap.source_id = "fl".into();
        snap.scope_region = "US-FL".into();
        Engine::new(Store::new(r), vec![snap], EngineConfig::default())
    }

    fn point(region: &str, date: NaiveDate, value: u64) -> ProposedChange {
        ProposedChange {
            source_id: "fl".into(),
            fetched_at: now(),
            region_id: region.into(),
            metric: Metric::Confirmed,
            kind: ChangeKind::Point { date, value },
            tags: BTreeSet::new(),
        }
    }

    fn values(e: &Engine, region: &str) -> Vec<u64> {
        e.store()
            .series(region, Metric::Confirmed)
            .map(|s| s.values().into_iter().map(|(_, v)| v).collect())
            .unwrap_or_default()
    }

    #[test]
    fn okaloosa_transit_value_is_held() {
        let mut e = engine();
        e.apply_proposal(point("US-FL-091", d(13), 102), now()).unwrap();
        let digest = e.store().digest();
        let out = e.apply_proposal(point("US-FL-091", d(14), 102_103), now()).unwrap();
        assert_eq!(out.decision, GateDecision::Hold(1));
        assert_eq!(out.rules, vec![RuleId::DailyCap, RuleId::Growth300, RuleId::Growth200, RuleId::Jump]);
        assert_eq!(digest, e.store().digest());
        let again = e.apply_proposal(point("US-FL-091", d(14), 102_103), now()).unwrap();
        assert_eq!(again.disposition, Disposition::AlreadyHeld);

        let fixed = e.apply_proposal(point("US-FL-091", d(14), 103), now()).unwrap();
        assert_eq!(fixed.disposition, Disposition::Applied(GateAction::Commit));
        assert_eq!(values(&e, "US-FL-091"), vec![102, 103]);
        e.resolve_hold(1, HoldDecision::Reject, "vol", now()).unwrap();
        assert!(matches!(
            e.resolve_hold(1, HoldDecision::Approve, "vol", now()),
            Err(EngineError::Hold(HoldError::AlreadyResolved(1)))
        ));
    }

    #[test]
    fn approve_commits_past_the_gate() {
        let mut e = engine();
        e.apply_proposal(point("US-FL-091", d(0), 102), now()).unwrap();
        let out = e.apply_proposal(point("US-FL-091", d(1), 9000), now()).unwrap();
        let GateDecision::Hold(id) = out.decision else { panic!() };
        e.resolve_hold(id, HoldDecision::Approve, "vol", now()).unwrap();
        assert_eq!(values(&e, "US-FL-091"), vec![102, 9000]);
        assert_eq!(e.holds().get(id).unwrap().state, TicketState::Approved);
    }

    #[test]
    fn small_decrease_repairs_history() {
        let mut e = engine();
        for (i, v) in [10, 12, 15].iter().enumerate() {
            e.apply_proposal(point("US-FL-091", d(i as i64), *v), now()).unwrap();
        }
        let out = e.apply_proposal(point("US-FL-091", d(3), 11), now()).unwrap();
        assert_eq!(out.disposition, Disposition::Applied(GateAction::Repair));
        assert_eq!(out.rules, vec![RuleId::Decrease]);
        assert_eq!(values(&e, "US-FL-091"), vec![10, 11, 11, 11]);
    }

    #[test]
    fn large_decrease_is_held() {
        let mut e = engine();
        e.apply_proposal(point("US-FL", d(0), 500), now()).unwrap();
        let out = e.apply_proposal(point("US-FL", d(1), 140), now()).unwrap();
        assert!(matches!(out.decision, GateDecision::Hold(_)));
        assert_eq!(out.rules, vec![RuleId::Decrease, RuleId::Jump]);
        assert_eq!(values(&e, "US-FL"), vec![500]);
    }

    #[test]
    fn backdated_conflict_is_rejected() {
        let mut e = engine();
        e.apply_proposal(point("US-FL", d(0), 10), now()).unwrap();
        e.apply_proposal(point("US-FL", d(2), 20), now()).unwrap();
        let out = e.apply_proposal(point("US-FL", d(1), 25), now()).unwrap();
        assert_eq!(out.rules, vec![RuleId::OutOfOrder]);
        let journal = e.journal().len();
        let again = e.apply_proposal(point("US-FL", d(1), 25), now()).unwrap();
        assert_eq!(again.disposition, Disposition::AlreadyRejected);
        assert_eq!(journal, e.journal().len());
        let ok = e.apply_proposal(point("US-FL", d(1), 15), now()).unwrap();
        assert_eq!(ok.disposition, Disposition::Applied(GateAction::Commit));
        assert_eq!(values(&e, "US-FL"), vec![10, 15, 20]);
        // The series changed, so the old rejection is evaluated afresh.
        let fresh = e.apply_proposal(point("US-FL", d(1), 25), now()).unwrap();
        assert_eq!(fresh.rules, vec![RuleId::OutOfOrder]);
    }

    fn history(points: &[(i64, u64)]) -> ProposedChange {
        ProposedChange {
            source_id: "fl".into(),
            fetched_at: now(),
            region_id: "US-FL".into(),
            metric: Metric::Confirmed,
            kind: ChangeKind::History {
                points: points.iter().map(|(n, v)| (d(*n), *v)).collect(),
            },
            tags: BTreeSet::from([ChangeTag::HistoricalEdit]),
        }
    }

    #[test]
    fn history_revisions() {
        let mut e = engine();
        e.apply_proposal(history(&[(0, 10), (1, 12), (2, 15)]), now()).unwrap();
        let out = e.apply_proposal(history(&[(0, 10), (1, 11), (2, 14)]), now()).unwrap();
        assert_eq!(out.disposition, Disposition::Applied(GateAction::Replace));
        assert_eq!(values(&e, "US-FL"), vec![10, 11, 14]);

        let out = e.apply_proposal(history(&[(0, 10), (1, 11), (2, 12)]), now()).unwrap();
        assert_eq!(out.rules, vec![RuleId::HistoryDecrease]);
        assert!(matches!(out.decision, GateDecision::Hold(_)));

        let out = e.apply_proposal(history(&[(0, 10), (1, 12), (2, 9)]), now()).unwrap();
        assert_eq!(out.rules, vec![RuleId::NonMonotonicPayload]);
        assert_eq!(values(&e, "US-FL"), vec![10, 11, 14]);
        let unchanged = e.apply_proposal(history(&[(0, 10), (1, 11), (2, 14)]), now()).unwrap();
        assert_eq!(unchanged.disposition, Disposition::Unchanged);
    }

    struct Fixed(Vec<u8>);

    impl Fetcher for Fixed {
        fn fetch(&self, _: &SourceDescriptor) -> Result<Vec<u8>, FetchError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn expiry_commits_only_when_source_agrees() {
        let mut e = engine();
        e.apply_proposal(point("US-FL-091", d(0), 102), now()).unwrap();
        e.apply_proposal(point("US-FL-091", d(1), 9000), now()).unwrap();
        let later = now() + Duration::hours(5);
        let disagree = Fixed(b"region,date,confirmed\nUS-FL-091,2020-04-02,103\n".to_vec());
        let out = e.expire_holds(&disagree, later);
        assert_eq!(out[0].state, TicketState::Rejected);
        assert_eq!(values(&e, "US-FL-091"), vec![102]);

        // The discarded value is not raised again while the series is unchanged.
        let again = e.apply_proposal(point("US-FL-091", d(1), 9000), now()).unwrap();
        assert_eq!(again.disposition, Disposition::AlreadyRejected);

        e.apply_proposal(point("US-FL-091", d(1), 9100), now()).unwrap();
        let agree = Fixed(b"region,date,confirmed\nUS-FL-091,2020-04-02,9100\n".to_vec());
        assert!(e.expire_holds(&agree, now() + Duration::hours(1)).is_empty());
        let out = e.expire_holds(&agree, later);
        assert_eq!(out[0].state, TicketState::ExpiredRetried);
        assert_eq!(values(&e, "US-FL-091"), vec![102, 9100]);
    }

    #[test]
    fn backfill_once_in_order() {
        let mut e = engine();
        let archives: Vec<(NaiveDate, Vec<u8>)> = [(0, 5), (1, 9), (2, 14)]
            .iter()
            .map(|(n, v)| (d(*n), format!("region,date,confirmed\nUS-FL-091,{},{v}\n", d(*n)).into_bytes()))
            .collect();
        let reversed = vec![archives[1].clone(), archives[0].clone()];
        assert!(matches!(
            e.backfill("fl", &reversed, now()),
            Err(EngineError::OutOfOrderArchive { .. })
        ));
        e.backfill("fl", &archives, now()).unwrap();
        assert_eq!(values(&e, "US-FL-091"), vec![5, 9, 14]);
        let digest = e.state_digest();
        assert!(matches!(e.backfill("fl", &archives, now()), Err(EngineError::AlreadyBackfilled(_))));
        assert_eq!(digest, e.state_digest());
    }

    #[test]
    fn reconcile_writes_unassigned_and_diary() {
        let mut e = engine();
        let at = |h| now() + Duration::hours(h);
        let mut p = point("US-FL", d(0), 100);
        p.fetched_at = at(0);
        e.apply_proposal(p, now()).unwrap();
        let mut c = point("US-FL-091", d(0), 90);
        c.fetched_at = at(1);
        e.apply_proposal(c, now()).unwrap();
        let report = e.reconcile(now()).unwrap();
        assert_eq!(report.unassigned.len(), 1);
        assert_eq!(values(&e, "US-FL-UNASSIGNED"), vec![10]);
        // second sweep is a no-op
        let digest = e.state_digest();
        let journal = e.journal().len();
        e.reconcile(now()).unwrap();
        assert_eq!(digest, e.state_digest());
        assert_eq!(journal, e.journal().len());

        // parent refreshed later but still below children → discrepancy
        let mut c = point("US-FL-091", d(1), 120);
        c.fetched_at = at(2);
        e.apply_proposal(c, now()).unwrap();
        let mut p = point("US-FL", d(1), 110);
        p.fetched_at = at(3);
        e.apply_proposal(p, now()).unwrap();
        let report = e.reconcile(now()).unwrap();
        assert_eq!(report.diary_entries.len(), 1);
        assert_eq!(e.diary().entries().count(), 1);
    }

    #[test]
    fn save_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut e = engine();
        e.apply_proposal(point("US-FL-091", d(0), 102), now()).unwrap();
        e.apply_proposal(point("US-FL-091", d(1), 102_103), now()).unwrap();
        e.save(dir.path()).unwrap();
        let journal = std::fs::read_to_string(dir.path().join("journal.jsonl")).unwrap();
        assert_eq!(journal.lines().count(), 2);

        let fresh = engine();
        let mut back = Engine::open(dir.path(), fresh.store().clone(), fresh.sources().to_vec(), EngineConfig::default()).unwrap();
        assert_eq!(back.state_digest(), e.state_digest());
        back.resolve_hold(1, HoldDecision::Reject, "vol", now()).unwrap();
        back.save(dir.path()).unwrap();
        let journal = std::fs::read_to_string(dir.path().join("journal.jsonl")).unwrap();
        assert_eq!(journal.lines().count(), 3);
    }
}
