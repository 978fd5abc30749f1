//! Crowd-sourced issue reports and their triage workflow.
//!
//! States move strictly `OPEN → ASSIGNED → {RESOLVED, INVALID}`; there is no
//! re-open. A follow-up is filed as a new issue.

use std::collections::BTreeMap;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueCategory {
    NewCase,
    RecoverCase,
    DeathCase,
    ErrorReport,
    FeatureRequest,
    BreakingNews,
    FurtherDetails,
    TestingLocation,
    Question,
}

impl IssueCategory {
    pub const ALL: [IssueCategory; 9] = [
        IssueCategory::NewCase,
        IssueCategory::RecoverCase,
        IssueCategory::DeathCase,
        IssueCategory::ErrorReport,
        IssueCategory::FeatureRequest,
        IssueCategory::BreakingNews,
        IssueCategory::FurtherDetails,
        IssueCategory::TestingLocation,
        IssueCategory::Question,
    ];

    /// New, recovered and death reports describe cases and need evidence.
    pub fn is_case_report(self) -> bool {
        matches!(
            self,
            IssueCategory::NewCase | IssueCategory::RecoverCase | IssueCategory::DeathCase
        )
    }
}

impl FromStr for IssueCategory {
    type Err = IssueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = serde_json::Value::String(s.trim().to_ascii_uppercase());
        serde_json::from_value(v).map_err(|_| IssueError::Validation(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueState {
    Open,
    Assigned,
    Resolved,
    Invalid,
}

impl IssueState {
    pub const ALL: [IssueState; 4] = [
        IssueState::Open,
        IssueState::Assigned,
        IssueState::Resolved,
        IssueState::Invalid,
    ];
}

impl FromStr for IssueState {
    type Err = IssueError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = serde_json::Value::String(s.trim().to_ascii_uppercase());
        serde_json::from_value(v).map_err(|_| IssueError::Validation(format!("unknown state `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Resolved,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueReport {
    pub issue_id: u64,
    pub category: IssueCategory,
    pub region_id: Option<String>,
    pub links: Vec<String>,
    pub body: String,
    pub submitted_at: DateTime<Utc>,
    pub state: IssueState,
    pub assignee: Option<String>,
    pub resolution_note: Option<String>,
    #[serde(default)]
    pub resulting_records: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IssueError {
    #[error("case reports need at least one supporting link")]
    MissingLink,
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("unknown issue {0}")]
    UnknownIssue(u64),
    #[error("issue {id} cannot go from {from:?} via {action}")]
    InvalidTransition {
        id: u64,
        from: IssueState,
        action: &'static str,
    },
    #[error("{0}")]
    Validation(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub total: usize,
    pub by_state: BTreeMap<IssueState, usize>,
    pub by_category: BTreeMap<IssueCategory, BTreeMap<IssueState, usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueDesk {
    issues: BTreeMap<u64, IssueReport>,
    next_id: u64,
}

impl IssueDesk {
    /// Files a new OPEN issue. `region_known` checks the optional region.
    pub fn submit(
        &mut self,
        category: IssueCategory,
        region_id: Option<String>,
        links: Vec<String>,
        body: String,
        now: DateTime<Utc>,
        region_known: impl Fn(&str) -> bool,
    ) -> Result<&IssueReport, IssueError> {
        if body.trim().is_empty() {
            return Err(IssueError::Validation("body must not be empty".into()));
        }
        let links: Vec<String> = links
            .into_iter()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        if category.is_case_report() {
            if links.is_empty() {
                return Err(IssueError::MissingLink);
            }
            if region_id.is_none() {
                return Err(IssueError::Validation("case reports need a region".into()));
            }
        }
        if let Some(r) = &region_id {
            if !region_known(r) {
                return Err(IssueError::UnknownRegion(r.clone()));
            }
        }
        self.next_id += 1;
        let id = self.next_id;
        let issue = IssueReport {
            issue_id: id,
            category,
            region_id,
            links,
            body,
            submitted_at: now,
            state: IssueState::Open,
            assignee: None,
            resolution_note: None,
            resulting_records: Vec::new(),
        };
        Ok(self.issues.entry(id).or_insert(issue))
    }

    pub fn get(&self, id: u64) -> Result<&IssueReport, IssueError> {
        self.issues.get(&id).ok_or(IssueError::UnknownIssue(id))
    }

    pub fn assign(&mut self, id: u64, operator: &str) -> Result<&IssueReport, IssueError> {
        if operator.trim().is_empty() {
            return Err(IssueError::Validation("operator must not be empty".into()));
        }
        let issue = self.issues.get_mut(&id).ok_or(IssueError::UnknownIssue(id))?;
        if issue.state != IssueState::Open {
            return Err(IssueError::InvalidTransition {
                id,
                from: issue.state,
                action: "assign",
            });
        }
        issue.state = IssueState::Assigned;
        issue.assignee = Some(operator.to_string());
        Ok(issue)
    }

    pub fn resolve(
        &mut self,
        id: u64,
        outcome: Outcome,
        note: &str,
        resulting_records: Vec<String>,
    ) -> Result<&IssueReport, IssueError> {
        let issue = self.issues.get_mut(&id).ok_or(IssueError::UnknownIssue(id))?;
        if issue.state != IssueState::Assigned {
            return Err(IssueError::InvalidTransition {
                id,
                from: issue.state,
                action: "resolve",
            });
        }
        if note.trim().is_empty() {
            return Err(IssueError::Validation("a resolution note is required".into()));
        }
        issue.state = match outcome {
            Outcome::Resolved => IssueState::Resolved,
            Outcome::Invalid => IssueState::Invalid,
        };
        issue.resolution_note = Some(note.to_string());
        issue.resulting_records = resulting_records;
        Ok(issue)
    }

    pub fn list(&self, state: Option<IssueState>, category: Option<IssueCategory>) -> Vec<&IssueReport> {
        self.issues
            .values()
            .filter(|i| state.is_none_or(|s| i.state == s))
            .filter(|i| category.is_none_or(|c| i.category == c))
            .collect()
    }

    pub fn queue_stats(&self) -> QueueStats {
        let mut stats = QueueStats {
            total: self.issues.len(),
            by_state: IssueState::ALL.iter().map(|s| (*s, 0)).collect(),
            by_category: IssueCategory::ALL
                .iter()
                .map(|c| (*c, IssueState::ALL.iter().map(|s| (*s, 0)).collect()))
                .collect(),
        };
        for issue in self.issues.values() {
            *stats.by_state.entry(issue.state).or_default() += 1;
            *stats
                .by_category
                .entry(issue.category)
                .or_default()
                .entry(issue.state)
                .or_default() += 1;
        }
        stats
    }

    pub fn export_jsonl(&self) -> String {
        self.issues
            .values()
            .map(|i| serde_json::to_string(i).expect("issue serializes") + "\n")
            .collect()
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        for i in self.issues.values() {
            let ok = match i.state {
                IssueState::Open => i.assignee.is_none() && i.resolution_note.is_none(),
                IssueState::Assigned => i.assignee.is_some(),
                IssueState::Resolved | IssueState::Invalid => i.resolution_note.is_some() && i.assignee.is_some(),
            };
            if !ok {
                return Err(format!("issue {} violates state invariants", i.issue_id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn now() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2020, 5, 14, 9, 0, 0).unwrap()
    }

    fn known(r: &str) -> bool {
        r.starts_with("US")
    }

    #[test]
    fn submission_rules() {
        let mut desk = IssueDesk::default();
        let issue = desk
            .submit(
                IssueCategory::NewCase,
                Some("US-WA-033".into()),
                vec!["https://news.example/king-county".into()],
                "two new cases".into(),
                now(),
                known,
            )
            .unwrap();
        assert_eq!(issue.state, IssueState::Open);
        desk.submit(IssueCategory::ErrorReport, None, vec![], "typo".into(), now(), known)
            .unwrap();
        assert_eq!(
            desk.submit(IssueCategory::DeathCase, Some("US-WA".into()), vec![], "x".into(), now(), known)
                .unwrap_err(),
            IssueError::MissingLink
        );
        assert!(matches!(
            desk.submit(IssueCategory::Question, Some("FR".into()), vec![], "x".into(), now(), known),
            Err(IssueError::UnknownRegion(_))
        ));
        assert!(matches!(
            desk.submit(IssueCategory::Question, None, vec![], "  ".into(), now(), known),
            Err(IssueError::Validation(_))
        ));
    }

    #[test]
    fn state_machine_walk() {
        let mut desk = IssueDesk::default();
        let id = desk
            .submit(IssueCategory::Question, None, vec![], "why?".into(), now(), known)
            .unwrap()
            .issue_id;
        assert!(matches!(
            desk.resolve(id, Outcome::Resolved, "done", vec![]),
            Err(IssueError::InvalidTransition { .. })
        ));
        desk.assign(id, "vol-1").unwrap();
        assert!(matches!(desk.resolve(id, Outcome::Resolved, " ", vec![]), Err(IssueError::Validation(_))));
        let done = desk.resolve(id, Outcome::Resolved, "answered", vec![]).unwrap();
        assert_eq!(done.state, IssueState::Resolved);
        assert!(matches!(desk.assign(id, "vol-2"), Err(IssueError::InvalidTransition { .. })));
        assert_eq!(desk.assign(42, "x").unwrap_err(), IssueError::UnknownIssue(42));
        desk.check_invariants().unwrap();
    }

    #[test]
    fn stats_tally() {
        let mut desk = IssueDesk::default();
        assert_eq!(desk.queue_stats().by_state.values().sum::<usize>(), 0);
        for _ in 0..3 {
            desk.submit(IssueCategory::BreakingNews, None, vec![], "news".into(), now(), known)
                .unwrap();
        }
        desk.assign(1, "a").unwrap();
        desk.assign(2, "a").unwrap();
        desk.resolve(2, Outcome::Resolved, "ok", vec![]).unwrap();
        let stats = desk.queue_stats();
        assert_eq!(stats.by_state[&IssueState::Open], 1);
        assert_eq!(stats.by_state[&IssueState::Assigned], 1);
        assert_eq!(stats.by_state[&IssueState::Resolved], 1);
        assert_eq!(stats.by_category[&IssueCategory::BreakingNews].values().sum::<usize>(), 3);
        assert_eq!(desk.list(None, Some(IssueCategory::BreakingNews)).len(), 3);
        assert_eq!(desk.list(Some(IssueState::Open), None).len(), 1);
    }

    #[test]
    fn parses_names() {
        assert_eq!("breaking_news".parse::<IssueCategory>().unwrap(), IssueCategory::BreakingNews);
        assert!("SPAM".parse::<IssueCategory>().is_err());
        assert_eq!("assigned".parse::<IssueState>().unwrap(), IssueState::Assigned);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tallies_are_conserved(ops in prop::collection::vec((0u8..4, 0usize..9, 0u64..20), 0..80)) {
                let mut desk = IssueDesk::default();
                let mut submitted = 0usize;
                for (op, cat, target) in ops {
                    match op {
                        0 => {
                            let c = IssueCategory::ALL[cat];
                            let links = vec!["http://l".to_string()];
                            if desk.submit(c, Some("US".into()), links, "b".into(), now(), known).is_ok() {
                                submitted += 1;
                            }
                        }
                        1 => { let _ = desk.assign(target, "op"); }
                        2 => { let _ = desk.resolve(target, Outcome::Resolved, "n", vec![]); }
                        _ => { let _ = desk.resolve(target, Outcome::Invalid, "", vec![]); }
                    }
                }
                let stats = desk.queue_stats();
                prop_assert_eq!(stats.total, submitted);
                prop_assert_eq!(stats.by_state.values().sum::<usize>(), submitted);
                let per_cat: usize = stats.by_category.values().flat_map(|m| m.values()).sum();
                prop_assert_eq!(per_cat, submitted);
                prop_assert!(desk.check_invariants().is_ok());
            }
        }
    }
}
