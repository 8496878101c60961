//! Drives every (state, operation) pair through some session API and compares
//! the outcome against the documented table, plus a two-sided transcript check.

use std::collections::HashMap;

use telecare_core::consult::{SessionMessage, SessionOp, SessionState};
use telecare_core::error::ApiError;

/// One way of talking to sessions (service, gateway, HTTP). All operations on
/// an existing session are performed by its responder.
pub trait SessionDriver: Sync {
    /// Opens a new session in state Requested and returns its id.
    fn fresh(&self) -> String;
    /// Applies `op`; on success returns the session state afterwards.
    fn apply(&self, id: &str, op: SessionOp) -> Result<SessionState, ApiError>;
}

fn reach(d: &dyn SessionDriver, state: SessionState) -> String {
    let id = d.fresh();
    match state {
        SessionState::Requested => {}
        SessionState::Active => {
            d.apply(&id, SessionOp::Accept).unwrap();
        }
        SessionState::Terminated => {
            d.apply(&id, SessionOp::Terminate).unwrap();
        }
    }
    id
}

fn state_named(name: &str) -> SessionState {
    SessionState::ALL
        .into_iter()
        .find(|s| format!("{s:?}") == name)
        .unwrap_or_else(|| panic!("documented state {name} does not exist"))
}

/// Every cell of the documented session table where `d` disagrees.
pub fn session_mismatches(d: &dyn SessionDriver) -> Vec<String> {
    let rows = super::doc::session_rows();
    let mut bad = Vec::new();
    if rows.len() != SessionState::ALL.len() {
        bad.push(format!(
            "documented {} states, implemented {}",
            rows.len(),
            SessionState::ALL.len()
        ));
    }
    for (state, cells) in &rows {
        let state = state_named(state);
        for (op, expected) in SessionOp::ALL.into_iter().zip(cells.iter()) {
            let id = reach(d, state);
            let got = match d.apply(&id, op) {
                Ok(s) => format!("{s:?}"),
                Err(e) => e.code().to_string(),
            };
            if &got != expected {
                bad.push(format!(
                    "{state:?} × {op:?}: got {got}, documented {expected}"
                ));
            }
        }
    }
    bad
}

/// Both sides of one active session.
pub trait TranscriptSide: Sync {
    fn id(&self) -> &str;
    fn post(&self, text: String) -> u64;
    /// Long-polls for messages with seq > after.
    fn fetch(&self, after: i64) -> Vec<SessionMessage>;
}

/// Each side posts `n` messages concurrently while long-polling for the
/// other's; both must end with the same gap-free, duplicate-free transcript
/// in which every sender's messages keep their order. Returns the problems.
pub fn transcript_problems(
    a: &dyn TranscriptSide,
    b: &dyn TranscriptSide,
    n: usize,
) -> Vec<String> {
    let total = 2 * n;
    let views: Vec<Vec<SessionMessage>> = std::thread::scope(|s| {
        let readers: Vec<_> = [a, b]
            .into_iter()
            .map(|side| {
                s.spawn(move || {
                    let mut seen: Vec<SessionMessage> = Vec::new();
                    let mut idle = 0;
                    while seen.len() < total && idle < 50 {
                        let after = seen.last().map_or(-1, |m| m.seq as i64);
                        let batch = side.fetch(after);
                        if batch.is_empty() {
                            idle += 1;
                        }
                        seen.extend(batch);
                    }
                    seen
                })
            })
            .collect();
        for side in [a, b] {
            s.spawn(move || {
                for i in 0..n {
                    side.post(format!("{} #{i}", side.id()));
                }
            });
        }
        readers.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut problems = Vec::new();
    for (who, view) in [a.id(), b.id()].iter().zip(&views) {
        if view.len() != total {
            problems.push(format!("{who} saw {} of {total} messages", view.len()));
        }
        if view.iter().enumerate().any(|(i, m)| m.seq != i as u64) {
            problems.push(format!("{who} saw a gap or duplicate in seq"));
        }
        let mut next: HashMap<&str, usize> = HashMap::new();
        for m in view {
            let k = next.entry(m.sender.as_str()).or_default();
            if m.payload != format!("{} #{k}", m.sender) {
                problems.push(format!(
                    "{who}: out-of-order message {:?} from {}",
                    m.payload, m.sender
                ));
                break;
            }
            *k += 1;
        }
    }
    if views[0] != views[1] {
        problems.push("the two sides disagree on the transcript".into());
    }
    problems
}
