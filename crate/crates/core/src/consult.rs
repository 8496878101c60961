//! Two-party consultation sessions and their ordered message relay.
//!
//! Payloads are relayed verbatim. Audio/video signaling is an opaque blob
//! carried base64-encoded on the wire; media transport happens elsewhere.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use base64::Engine;
use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::error::ApiError;
use crate::rbac::{Principal, Role};
use crate::store::{EmrStore, StoreError, StreamKey};

/// Decoded payload cap for a single message.
pub const DEFAULT_PAYLOAD_CAP: usize = 64 * 1024;

const SESSION_KIND: &str = "session";
const MESSAGES_KIND: &str = "session-messages";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionMode {
    PatientPhysician,
    PhysicianPhysician,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Requested,
    Active,
    Terminated,
}

impl SessionState {
    pub const ALL: [SessionState; 3] = [
        SessionState::Requested,
        SessionState::Active,
        SessionState::Terminated,
    ];
}

/// Operations a participant may attempt on an existing session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionOp {
    Accept,
    Post,
    Fetch,
    Terminate,
}

impl SessionOp {
    pub const ALL: [SessionOp; 4] = [
        SessionOp::Accept,
        SessionOp::Post,
        SessionOp::Fetch,
        SessionOp::Terminate,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionError {
    InvalidTransition,
    SessionClosed,
}

/// The declared transition table. Role checks happen before this is consulted.
pub fn transition(state: SessionState, op: SessionOp) -> Result<SessionState, TransitionError> {
    use SessionOp::*;
    use SessionState::*;
    match (state, op) {
        (Requested, Accept) => Ok(Active),
        (Requested, Terminate) | (Active, Terminate) => Ok(Terminated),
        (Active, Post) => Ok(Active),
        (s, Fetch) => Ok(s),
        (Terminated, Post) => Err(TransitionError::SessionClosed),
        _ => Err(TransitionError::InvalidTransition),
    }
}

/// Which (initiator, responder, mode) combinations may open a session.
pub fn mode_allows(initiator: Role, responder: Role, mode: SessionMode) -> bool {
    use Role::*;
    match mode {
        SessionMode::PatientPhysician => matches!(
            (initiator, responder),
            (Patient, MedicalExpert) | (MedicalExpert, Patient)
        ),
        SessionMode::PhysicianPhysician => initiator == MedicalExpert && responder == MedicalExpert,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsultSession {
    pub id: String,
    pub mode: SessionMode,
    pub initiator: Principal,
    pub responder: Principal,
    pub state: SessionState,
    pub created_at: DateTime<Utc>,
    pub activated_at: Option<DateTime<Utc>>,
    pub terminated_at: Option<DateTime<Utc>>,
    pub terminated_by: Option<String>,
}

impl ConsultSession {
    pub fn is_participant(&self, id: &str) -> bool {
        self.initiator.id == id || self.responder.id == id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Text,
    ImageRef,
    AvSignal,
}

/// `payload` is the text body, a blob reference, or base64 signaling bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMessage {
    pub session_id: String,
    pub seq: u64,
    pub sender: String,
    pub kind: MessageKind,
    pub payload: String,
    pub sent_at: DateTime<Utc>,
}

impl SessionMessage {
    /// Raw payload bytes (base64-decoded for AvSignal).
    pub fn payload_bytes(&self) -> Result<Vec<u8>, ApiError> {
        match self.kind {
            MessageKind::AvSignal => base64::engine::general_purpose::STANDARD
                .decode(&self.payload)
                .map_err(|e| ApiError::Malformed(format!("AvSignal payload is not base64: {e}"))),
            _ => Ok(self.payload.as_bytes().to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEvents {
    pub state: SessionState,
    pub messages: Vec<SessionMessage>,
}

struct SlotData {
    session: ConsultSession,
    messages: Vec<SessionMessage>,
}

struct Slot {
    data: Mutex<SlotData>,
    changed: Condvar,
}

pub struct ConsultService {
    store: Arc<EmrStore>,
    clock: SharedClock,
    payload_cap: usize,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    next_id: Mutex<u64>,
}

fn map_transition(e: TransitionError, id: &str, state: SessionState, op: SessionOp) -> ApiError {
    match e {
        TransitionError::SessionClosed => ApiError::SessionClosed(id.to_string()),
        TransitionError::InvalidTransition => {
            ApiError::InvalidTransition(format!("{op:?} not allowed in state {state:?}"))
        }
    }
}

impl ConsultService {
    pub fn open(
        store: Arc<EmrStore>,
        clock: SharedClock,
        payload_cap: usize,
    ) -> Result<Self, StoreError> {
        let mut sessions = HashMap::new();
        let mut max_id = 0u64;
        for id in store.snapshot_ids(SESSION_KIND)? {
            let session = store
                .snapshot_get::<ConsultSession>(SESSION_KIND, &id)?
                .document;
            let messages = store.read_all_json(&StreamKey::new(MESSAGES_KIND, &id))?;
            if let Some(n) = id.strip_prefix("S-").and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            sessions.insert(
                id,
                Arc::new(Slot {
                    data: Mutex::new(SlotData { session, messages }),
                    changed: Condvar::new(),
                }),
            );
        }
        Ok(Self {
            store,
            clock,
            payload_cap,
            sessions: RwLock::new(sessions),
            next_id: Mutex::new(max_id),
        })
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub fn open_session(
        &self,
        caller: &Principal,
        target: &Principal,
        mode: SessionMode,
    ) -> Result<ConsultSession, ApiError> {
        if caller.id == target.id || !mode_allows(caller.role, target.role, mode) {
            return Err(ApiError::Forbidden(format!(
                "{} may not open a {mode:?} session with {}",
                caller.role, target.role
            )));
        }
        let id = {
            let mut n = self.next_id.lock();
            *n += 1;
            format!("S-{:06}", *n)
        };
        let session = ConsultSession {
            id: id.clone(),
            mode,
            initiator: caller.clone(),
            responder: target.clone(),
            state: SessionState::Requested,
            created_at: self.clock.now(),
            activated_at: None,
            terminated_at: None,
            terminated_by: None,
        };
        self.store.snapshot_upsert(SESSION_KIND, &id, &session)?;
        self.sessions.write().insert(
            id,
            Arc::new(Slot {
                data: Mutex::new(SlotData {
                    session: session.clone(),
                    messages: Vec::new(),
                }),
                changed: Condvar::new(),
            }),
        );
        Ok(session)
    }

    pub fn get(&self, caller: &Principal, id: &str) -> Result<ConsultSession, ApiError> {
        let slot = self.slot(id)?;
        let data = slot.data.lock();
        if !data.session.is_participant(&caller.id) {
            return Err(ApiError::Forbidden(format!("not a participant of {id}")));
        }
        Ok(data.session.clone())
    }

    /// Sessions the caller takes part in, oldest first.
    pub fn list_for(&self, caller: &Principal) -> Vec<ConsultSession> {
        let mut out: Vec<ConsultSession> = self
            .sessions
            .read()
            .values()
            .map(|s| s.data.lock().session.clone())
            .filter(|s| s.is_participant(&caller.id))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    fn apply(
        &self,
        caller: &Principal,
        id: &str,
        op: SessionOp,
    ) -> Result<ConsultSession, ApiError> {
        let slot = self.slot(id)?;
        let mut data = slot.data.lock();
        let s = &data.session;
        if !s.is_participant(&caller.id) {
            return Err(ApiError::Forbidden(format!("not a participant of {id}")));
        }
        if op == SessionOp::Accept && s.responder.id != caller.id {
            return Err(ApiError::Forbidden("only the responder may accept".into()));
        }
        let next = transition(s.state, op).map_err(|e| map_transition(e, id, s.state, op))?;
        let mut updated = s.clone();
        let now = self.clock.now();
        updated.state = next;
        match op {
            SessionOp::Accept => updated.activated_at = Some(now),
            SessionOp::Terminate => {
                updated.terminated_at = Some(now);
                updated.terminated_by = Some(caller.id.clone());
            }
            _ => {}
        }
        self.store.snapshot_upsert(SESSION_KIND, id, &updated)?;
        data.session = updated.clone();
        slot.changed.notify_all();
        Ok(updated)
    }

    pub fn accept(&self, caller: &Principal, id: &str) -> Result<ConsultSession, ApiError> {
        self.apply(caller, id, SessionOp::Accept)
    }

    pub fn terminate(&self, caller: &Principal, id: &str) -> Result<ConsultSession, ApiError> {
        self.apply(caller, id, SessionOp::Terminate)
    }

    /// Validates size and encoding; image references must name a stored blob.
    fn check_payload(&self, kind: MessageKind, payload: &str) -> Result<(), ApiError> {
        let size = match kind {
            MessageKind::AvSignal => base64::engine::general_purpose::STANDARD
                .decode(payload)
                .map_err(|e| ApiError::Malformed(format!("AvSignal payload is not base64: {e}")))?
                .len(),
            _ => payload.len(),
        };
        if size > self.payload_cap {
            return Err(ApiError::PayloadTooLarge {
                size,
                cap: self.payload_cap,
            });
        }
        if kind == MessageKind::ImageRef {
            self.store.get_blob(payload)?;
        }
        Ok(())
    }

    pub fn post(
        &self,
        caller: &Principal,
        id: &str,
        kind: MessageKind,
        payload: String,
    ) -> Result<u64, ApiError> {
        let slot = self.slot(id)?;
        let mut data = slot.data.lock();
        let s = &data.session;
        if !s.is_participant(&caller.id) {
            return Err(ApiError::Forbidden(format!("not a participant of {id}")));
        }
        transition(s.state, SessionOp::Post)
            .map_err(|e| map_transition(e, id, s.state, SessionOp::Post))?;
        self.check_payload(kind, &payload)?;
        let msg = SessionMessage {
            session_id: id.to_string(),
            seq: data.messages.len() as u64,
            sender: caller.id.clone(),
            kind,
            payload,
            sent_at: self.clock.now(),
        };
        self.store
            .append_json(&StreamKey::new(MESSAGES_KIND, id), &msg)?;
        let seq = msg.seq;
        data.messages.push(msg);
        slot.changed.notify_all();
        Ok(seq)
    }

    /// Messages with `seq > after` (use -1 for the full history). If none are
    /// available, waits up to `wait` for a post or a state change.
    pub fn fetch(
        &self,
        caller: &Principal,
        id: &str,
        after: i64,
        wait: Duration,
    ) -> Result<SessionEvents, ApiError> {
        let slot = self.slot(id)?;
        let deadline = std::time::Instant::now() + wait;
        let mut data = slot.data.lock();
        if !data.session.is_participant(&caller.id) {
            return Err(ApiError::Forbidden(format!("not a participant of {id}")));
        }
        let start = (after + 1).max(0) as usize;
        let initial_state = data.session.state;
        while data.messages.len() <= start && data.session.state == initial_state {
            if slot.changed.wait_until(&mut data, deadline).timed_out() {
                break;
            }
        }
        Ok(SessionEvents {
            state: data.session.state,
            messages: data
                .messages
                .get(start..)
                .map(<[_]>::to_vec)
                .unwrap_or_default(),
        })
    }
}
