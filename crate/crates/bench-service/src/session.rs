//! Benchmark sessions as a fold over their event log.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Human,
    AgentReplay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub hole_id: String,
    pub ctf: f64,
    pub is_low: bool,
    pub at_ms: u64,
}

/// One line of a session's append-only log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        dataset_id: String,
        mode: Mode,
        budget_selections: u32,
        /// Minute budget the selection count stands for, for reporting.
        budget_minutes: f64,
        at_ms: u64,
    },
    Selected(Selection),
}

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("hole `{0}` was already selected")]
    Duplicate(String),
    #[error("selection budget exhausted")]
    Exhausted,
    #[error("corrupt event log: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub dataset_id: String,
    pub mode: Mode,
    pub budget_selections: u32,
    pub budget_minutes: f64,
    pub selections: Vec<Selection>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

impl Session {
    pub fn from_created(ev: &Event) -> Result<Self, SessionError> {
        match ev {
            Event::Created {
                session_id,
                dataset_id,
                mode,
                budget_selections,
                budget_minutes,
                at_ms,
            } => Ok(Self {
                id: session_id.clone(),
                dataset_id: dataset_id.clone(),
                mode: *mode,
                budget_selections: *budget_selections,
                budget_minutes: *budget_minutes,
                selections: Vec::new(),
                created_at_ms: *at_ms,
                updated_at_ms: *at_ms,
            }),
            Event::Selected(_) => Err(SessionError::Corrupt("log must start with a created event".into())),
        }
    }

    /// Replays a full log.
    pub fn fold<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Self, SessionError> {
        let mut it = events.into_iter();
        let first = it.next().ok_or_else(|| SessionError::Corrupt("empty log".into()))?;
        let mut s = Self::from_created(first)?;
        for ev in it {
            s.apply(ev)?;
        }
        Ok(s)
    }

    pub fn score(&self) -> usize {
        self.selections.iter().filter(|s| s.is_low).count()
    }

    pub fn remaining(&self) -> u32 {
        self.budget_selections.saturating_sub(self.selections.len() as u32)
    }

    pub fn is_complete(&self) -> bool {
        self.remaining() == 0
    }

    pub fn has_selected(&self, hole_id: &str) -> bool {
        self.selections.iter().any(|s| s.hole_id == hole_id)
    }

    /// Errors a selection of `hole_id` would raise, without applying it.
    pub fn check(&self, hole_id: &str) -> Result<(), SessionError> {
        if self.has_selected(hole_id) {
            return Err(SessionError::Duplicate(hole_id.to_string()));
        }
        if self.is_complete() {
            return Err(SessionError::Exhausted);
        }
        Ok(())
    }

    pub fn apply(&mut self, ev: &Event) -> Result<(), SessionError> {
        match ev {
            Event::Created { .. } => Err(SessionError::Corrupt(format!("second created event in {}", self.id))),
            Event::Selected(sel) => {
                self.check(&sel.hole_id)?;
                self.updated_at_ms = sel.at_ms;
                self.selections.push(sel.clone());
                Ok(())
            }
        }
    }
}

/// Minutes represented by a selection budget: 50 and 100 selections stand
/// for 120 and 240 minutes; other budgets scale linearly.
pub fn budget_minutes(selections: u32) -> f64 {
    f64::from(selections) * 2.4
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn created(budget: u32) -> Event {
        Event::Created {
            session_id: "s".into(),
            dataset_id: "d".into(),
            mode: Mode::Human,
            budget_selections: budget,
            budget_minutes: budget_minutes(budget),
            at_ms: 1,
        }
    }

    fn sel(h: &str, low: bool) -> Event {
        Event::Selected(Selection {
            hole_id: h.into(),
            ctf: if low { 4.0 } else { 9.0 },
            is_low: low,
            at_ms: 2,
        })
    }

    #[test]
    fn fold_scores_and_limits() {
        let log = [created(2), sel("a", true), sel("b", false)];
        let s = Session::fold(&log).unwrap();
        assert_eq!((s.score(), s.remaining()), (1, 0));
        assert_eq!(s.check("c"), Err(SessionError::Exhausted));
        assert_eq!(s.check("a"), Err(SessionError::Duplicate("a".into())));
        assert!(Session::fold(&[created(1), sel("a", true), sel("b", true)]).is_err());
        assert!(Session::fold(&[sel("a", true)]).is_err());
    }

    #[test]
    fn mapping() {
        assert_eq!(budget_minutes(50), 120.0);
        assert_eq!(budget_minutes(100), 240.0);
    }

    #[test]
    fn event_json_shape() {
        let line = serde_json::to_string(&sel("h1", true)).unwrap();
        assert!(line.starts_with(r#"{"event":"selected","hole_id":"h1""#));
        assert_eq!(serde_json::from_str::<Event>(&line).unwrap(), sel("h1", true));
    }
}
