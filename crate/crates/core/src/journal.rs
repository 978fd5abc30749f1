//! Append-only audit journal.
//!
//! Serialized as JSON Lines. Every line carries `seq`, `at` (RFC 3339) and a
//! `kind` tag:
//!
//! - `gate`: one gate decision (`source_id`, `region_id`, `metric`, `date`,
//!   `prev`, `proposed`, `decision`, `rules`, `action`, `ticket_id`)
//! - `hold_resolved`: a ticket left HELD (`ticket_id`, `state`, `actor`, `committed`)
//! - `issue`: an issue desk transition (`issue_id`, `action`, `state`, `actor`)
//! - `backfill`: archives applied for a source (`source_id`, `archives`)

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::gate::{RuleId, TicketState};
use crate::issues::IssueState;
use crate::series::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateAction {
    Commit,
    Repair,
    Replace,
    Hold,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JournalEvent {
    Gate {
        source_id: String,
        region_id: String,
        metric: Metric,
        date: Option<NaiveDate>,
        prev: Option<u64>,
        proposed: u64,
        decision: String,
        rules: Vec<RuleId>,
        action: GateAction,
        ticket_id: Option<u64>,
    },
    HoldResolved {
        ticket_id: u64,
        state: TicketState,
        actor: String,
        committed: bool,
    },
    Issue {
        issue_id: u64,
        action: String,
        state: IssueState,
        actor: Option<String>,
    },
    Backfill {
        source_id: String,
        archives: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: JournalEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Journal {
    entries: Vec<JournalEntry>,
}

impl Journal {
    pub fn append(&mut self, at: DateTime<Utc>, event: JournalEvent) -> &JournalEntry {
        let seq = self.entries.last().map_or(1, |e| e.seq + 1);
        self.entries.push(JournalEntry { seq, at, event });
        self.entries.last().expect("just pushed")
    }

    pub fn entries(&self) -> &[JournalEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn line(entry: &JournalEntry) -> String {
        serde_json::to_string(entry).expect("journal entry serializes") + "\n"
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(Self::line).collect()
    }

    /// Lines from index `from` on, for appending to an existing file.
    pub fn tail_jsonl(&self, from: usize) -> String {
        self.entries.iter().skip(from).map(Self::line).collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn jsonl_round_trip() {
        let at = Utc.with_ymd_and_hms(2020, 4, 15, 12, 0, 0).unwrap();
        let mut j = Journal::default();
        j.append(
            at,
            JournalEvent::Gate {
                source_id: "fl".into(),
                region_id: "US-FL-091".into(),
                metric: Metric::Confirmed,
                date: NaiveDate::from_ymd_opt(2020, 4, 15),
                prev: Some(102),
                proposed: 102_103,
                decision: "BLOCK".into(),
                rules: vec![RuleId::DailyCap, RuleId::Growth300, RuleId::Growth200],
                action: GateAction::Hold,
                ticket_id: Some(1),
            },
        );
        j.append(
            at,
            JournalEvent::HoldResolved {
                ticket_id: 1,
                state: TicketState::Rejected,
                actor: "vol".into(),
                committed: false,
            },
        );
        let text = j.to_jsonl();
        assert!(text.starts_with("{\"seq\":1,\"at\":\"2020-04-15T12:00:00Z\",\"kind\":\"gate\""));
        assert!(text.contains("\"rules\":[\"2\",\"3\",\"4\"]"));
        let back = Journal::from_jsonl(&text).unwrap();
        assert_eq!(back, j);
        assert_eq!(j.tail_jsonl(1).lines().count(), 1);
    }
}
