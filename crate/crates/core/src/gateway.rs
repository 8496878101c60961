//! The medical-server front door: registration, login, vitals ingestion with
//! alerting, record queries, threshold management, consultation routing and
//! the health signal probed by availability measurement.
//!
//! Every method takes the caller's bearer token and enforces the permission
//! matrix in [`crate::rbac`]. The HTTP layer in [`crate::http`] is a thin
//! translation of these calls.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::SharedClock;
use crate::consult::{
    ConsultService, ConsultSession, MessageKind, SessionEvents, SessionMode, DEFAULT_PAYLOAD_CAP,
};
use crate::error::ApiError;
use crate::notifier::{Alert, AlertState, Notifier, NotifierWorker, Recipient, RetryPolicy, Sink};
use crate::rbac::{access, hash_secret, random_hex, Access, Endpoint, Principal, Role, TokenTable};
use crate::reliability::{self, ProbeLog, ReliabilityReport};
use crate::store::{Durability, EmrStore, StoreError, StreamKey};
use crate::vital::{classify, Bounds, Status, ThresholdPolicy, VitalKind, VitalReading};

const PRINCIPAL_KIND: &str = "principal";
const POLICY_KIND: &str = "policy";
const ALERT_KIND: &str = "alert";
const READINGS_KIND: &str = "readings";

pub fn readings_stream(patient_id: &str) -> StreamKey {
    StreamKey::new(READINGS_KIND, patient_id)
}

pub fn policy_history_stream(patient_id: &str) -> StreamKey {
    StreamKey::new("policies", patient_id)
}

pub fn audit_stream() -> StreamKey {
    StreamKey::new("audit", "log")
}

pub fn alert_log_stream() -> StreamKey {
    StreamKey::new("alerts", "log")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapAdmin {
    pub id: String,
    pub secret: String,
    #[serde(default = "default_admin_name")]
    pub name: String,
}

fn default_admin_name() -> String {
    "Bootstrap Administrator".into()
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub token_lifetime: Duration,
    pub long_poll_wait: Duration,
    pub payload_cap: usize,
    pub retry: RetryPolicy,
    pub durability: Durability,
    pub bootstrap_admin: Option<BootstrapAdmin>,
    /// Probe log served by the reliability metrics endpoint; the bundled
    /// reference log when absent.
    pub reliability_log: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            token_lifetime: Duration::from_secs(8 * 3600),
            long_poll_wait: Duration::from_secs(25),
            payload_cap: DEFAULT_PAYLOAD_CAP,
            retry: RetryPolicy::default(),
            durability: Durability::Fsync,
            bootstrap_admin: None,
            reliability_log: None,
        }
    }
}

/// Injected outages. While down, the gateway answers nothing: health gives
/// no acknowledgement and every other call fails as unavailable.
#[derive(Debug, Default)]
pub struct FaultSchedule {
    windows: RwLock<Vec<(DateTime<Utc>, DateTime<Utc>)>>,
    forced_down: AtomicBool,
}

impl FaultSchedule {
    /// Down for `start <= t < end`.
    pub fn add_window(&self, start: DateTime<Utc>, end: DateTime<Utc>) {
        self.windows.write().push((start, end));
    }

    pub fn clear(&self) {
        self.windows.write().clear();
        self.forced_down.store(false, Ordering::SeqCst);
    }

    pub fn set_down(&self, down: bool) {
        self.forced_down.store(down, Ordering::SeqCst);
    }

    pub fn is_down(&self, at: DateTime<Utc>) -> bool {
        self.forced_down.load(Ordering::SeqCst)
            || self.windows.read().iter().any(|(s, e)| *s <= at && at < *e)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date_of_birth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phone: Option<String>,
    /// Staff responsible for a patient; alert recipients.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub assigned_staff: Vec<String>,
}

impl Demographics {
    fn key(&self, role: Role) -> (Role, String, Option<String>) {
        (
            role,
            self.name.trim().to_lowercase(),
            self.date_of_birth.as_ref().map(|d| d.trim().to_string()),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PrincipalRecord {
    id: String,
    role: Role,
    demographics: Demographics,
    salt: String,
    secret_hash: String,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub role: Role,
    #[serde(flatten)]
    pub demographics: Demographics,
    /// Generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secret: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub id: String,
    pub role: Role,
    pub secret: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoginResponse {
    pub token: String,
    pub id: String,
    pub role: Role,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReading {
    pub patient_id: String,
    pub kind: String,
    /// Kept loose so fractional or non-numeric values are reported per item.
    pub value: serde_json::Value,
    pub taken_at: DateTime<Utc>,
    pub seq: u64,
}

impl From<&VitalReading> for WireReading {
    fn from(r: &VitalReading) -> Self {
        Self {
            patient_id: r.patient_id.clone(),
            kind: r.kind.to_string(),
            value: serde_json::Value::from(r.value),
            taken_at: r.taken_at,
            seq: r.seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestBatch {
    pub device_id: String,
    pub sent_at: DateTime<Utc>,
    pub readings: Vec<WireReading>,
}

impl IngestBatch {
    pub fn from_readings(
        device_id: &str,
        readings: &[VitalReading],
        sent_at: DateTime<Utc>,
    ) -> Self {
        Self {
            device_id: device_id.to_string(),
            sent_at,
            readings: readings.iter().map(WireReading::from).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemOutcome {
    Accepted,
    Duplicate,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemStatus {
    pub seq: u64,
    pub status: ItemOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestResult {
    pub accepted: usize,
    pub duplicates: usize,
    pub rejected: usize,
    pub alerts_raised: Vec<String>,
    pub items: Vec<ItemStatus>,
}

/// One persisted reading together with the policy version it was judged by.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingRecord {
    pub reading: VitalReading,
    pub policy_version: u64,
    pub status: Status,
}

/// `from` is inclusive and `to` exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitalsQuery {
    /// Stream offset cursor; records strictly after it are returned. -1 starts at the beginning.
    #[serde(default = "minus_one")]
    pub after: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
}

fn minus_one() -> i64 {
    -1
}

impl Default for VitalsQuery {
    fn default() -> Self {
        Self {
            after: -1,
            from: None,
            to: None,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PagedReading {
    pub cursor: u64,
    #[serde(flatten)]
    pub reading: VitalReading,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitalsPage {
    pub patient_id: String,
    pub readings: Vec<PagedReading>,
    /// Pass back as `after` for the next page.
    pub next_cursor: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdView {
    pub patient_id: String,
    pub version: u64,
    pub updated_by: String,
    pub updated_at: DateTime<Utc>,
    pub bounds: BTreeMap<VitalKind, Bounds>,
}

impl From<&ThresholdPolicy> for ThresholdView {
    fn from(p: &ThresholdPolicy) -> Self {
        Self {
            patient_id: p.patient_id.clone(),
            version: p.version,
            updated_by: p.updated_by.clone(),
            updated_at: p.updated_at,
            bounds: p.effective(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundPair {
    pub low: i64,
    pub high: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdUpdate {
    /// Kinds not listed keep their current bounds.
    pub bounds: BTreeMap<VitalKind, BoundPair>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<AlertState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_id: Option<String>,
}

/// Roster entry for staff consoles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub assigned_staff: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthAck {
    pub status: String,
    pub server_time: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub at: DateTime<Utc>,
    pub actor: Option<String>,
    pub action: String,
    pub target: String,
}

pub struct Gateway {
    config: GatewayConfig,
    clock: SharedClock,
    store: Arc<EmrStore>,
    tokens: TokenTable,
    faults: FaultSchedule,
    directory: RwLock<HashMap<String, PrincipalRecord>>,
    register_lock: Mutex<()>,
    role_counters: Mutex<HashMap<Role, u64>>,
    policies: RwLock<HashMap<String, ThresholdPolicy>>,
    policy_lock: Mutex<()>,
    last_seq: Mutex<HashMap<(String, String), u64>>,
    ingest_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    alerts: RwLock<BTreeMap<String, Alert>>,
    alert_counter: AtomicU64,
    consult: ConsultService,
    notifier: NotifierWorker,
}

fn numeric_suffix(id: &str) -> Option<u64> {
    id.rsplit_once('-').and_then(|(_, n)| n.parse().ok())
}

impl Gateway {
    /// Opens (or recovers) the gateway state under `data_dir`.
    pub fn open(
        data_dir: impl Into<PathBuf>,
        config: GatewayConfig,
        clock: SharedClock,
        sinks: Vec<Arc<dyn Sink>>,
    ) -> Result<Arc<Self>, ApiError> {
        let store = Arc::new(EmrStore::open(data_dir, clock.clone(), config.durability)?);

        let mut directory = HashMap::new();
        let mut role_counters: HashMap<Role, u64> = HashMap::new();
        for id in store.snapshot_ids(PRINCIPAL_KIND)? {
            let rec = store
                .snapshot_get::<PrincipalRecord>(PRINCIPAL_KIND, &id)?
                .document;
            if rec.id.starts_with(rec.role.id_prefix()) {
                if let Some(n) = numeric_suffix(&rec.id) {
                    let c = role_counters.entry(rec.role).or_default();
                    *c = (*c).max(n);
                }
            }
            directory.insert(rec.id.clone(), rec);
        }

        let mut policies = HashMap::new();
        for id in store.snapshot_ids(POLICY_KIND)? {
            let p = store
                .snapshot_get::<ThresholdPolicy>(POLICY_KIND, &id)?
                .document;
            policies.insert(id, p);
        }

        let mut alerts = BTreeMap::new();
        let mut max_alert = 0;
        for id in store.snapshot_ids(ALERT_KIND)? {
            let a = store.snapshot_get::<Alert>(ALERT_KIND, &id)?.document;
            max_alert = max_alert.max(numeric_suffix(&a.id).unwrap_or(0));
            alerts.insert(a.id.clone(), a);
        }

        let mut last_seq = HashMap::new();
        for patient in store.stream_ids(READINGS_KIND)? {
            for rec in store.read_all_json::<ReadingRecord>(&readings_stream(&patient))? {
                let key = (patient.clone(), rec.reading.device_id.clone());
                let e = last_seq.entry(key).or_insert(rec.reading.seq);
                *e = (*e).max(rec.reading.seq);
            }
        }

        let consult = ConsultService::open(store.clone(), clock.clone(), config.payload_cap)?;
        let notifier = Arc::new(Notifier::new(
            store.clone(),
            clock.clone(),
            sinks,
            config.retry,
        )?);

        let gw = Arc::new(Self {
            tokens: TokenTable::new(config.token_lifetime),
            config,
            clock,
            store,
            faults: FaultSchedule::default(),
            directory: RwLock::new(directory),
            register_lock: Mutex::new(()),
            role_counters: Mutex::new(role_counters),
            policies: RwLock::new(policies),
            policy_lock: Mutex::new(()),
            last_seq: Mutex::new(last_seq),
            ingest_locks: Mutex::new(HashMap::new()),
            alerts: RwLock::new(alerts),
            alert_counter: AtomicU64::new(max_alert),
            consult,
            notifier: NotifierWorker::spawn(notifier),
        });
        gw.bootstrap()?;
        gw.redispatch_undelivered();
        Ok(gw)
    }

    /// Re-queues alerts left without a Delivered record by an earlier run.
    fn redispatch_undelivered(&self) {
        let alerts: Vec<Alert> = self
            .alerts
            .read()
            .values()
            .filter(|a| a.state == AlertState::Open)
            .cloned()
            .collect();
        for alert in alerts {
            let recipients = self.recipients_for(&alert.patient_id);
            if self.notifier().needs_dispatch(&alert, &recipients) {
                self.notifier.submit(alert, recipients);
            }
        }
    }

    fn bootstrap(&self) -> Result<(), ApiError> {
        let Some(admin) = self.config.bootstrap_admin.clone() else {
            return Ok(());
        };
        if self.directory.read().contains_key(&admin.id) {
            return Ok(());
        }
        let demographics = Demographics {
            name: admin.name.clone(),
            ..Default::default()
        };
        self.create_principal(
            Some(admin.id.clone()),
            Role::Administrator,
            demographics,
            admin.secret.clone(),
            None,
        )?;
        Ok(())
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn store(&self) -> &Arc<EmrStore> {
        &self.store
    }

    pub fn faults(&self) -> &FaultSchedule {
        &self.faults
    }

    pub fn notifier(&self) -> &Arc<Notifier> {
        self.notifier.notifier()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Blocks until queued alert notifications have been dispatched.
    pub fn wait_notifications_idle(&self, timeout: Duration) -> bool {
        self.notifier.wait_idle(timeout)
    }

    /// Stops background work after draining queued notifications.
    pub fn shutdown(&self) {
        self.notifier.shutdown();
    }

    pub fn is_down(&self) -> bool {
        self.faults.is_down(self.clock.now())
    }

    fn ensure_up(&self) -> Result<(), ApiError> {
        if self.is_down() {
            Err(ApiError::Unavailable("gateway outage".into()))
        } else {
            Ok(())
        }
    }

    fn audit(&self, actor: Option<&str>, action: &str, target: &str) -> Result<(), ApiError> {
        let rec = AuditRecord {
            at: self.clock.now(),
            actor: actor.map(str::to_string),
            action: action.to_string(),
            target: target.to_string(),
        };
        self.store.append_json(&audit_stream(), &rec)?;
        Ok(())
    }

    pub fn audit_log(&self) -> Result<Vec<AuditRecord>, ApiError> {
        Ok(self.store.read_all_json(&audit_stream())?)
    }

    /// Resolves the token and checks the role against the matrix.
    pub fn authorize(
        &self,
        token: Option<&str>,
        endpoint: Endpoint,
    ) -> Result<(Principal, Access), ApiError> {
        self.ensure_up()?;
        let principal = token
            .and_then(|t| self.tokens.resolve(t, self.clock.now()))
            .ok_or(ApiError::Unauthorized)?;
        match access(principal.role, endpoint) {
            Access::Deny => Err(ApiError::Forbidden(format!(
                "{} may not call {endpoint:?}",
                principal.role
            ))),
            a => Ok((principal, a)),
        }
    }

    fn require_own(
        &self,
        principal: &Principal,
        access: Access,
        patient_id: &str,
    ) -> Result<(), ApiError> {
        if access == Access::OwnRecord && principal.id != patient_id {
            return Err(ApiError::Forbidden(format!(
                "{} may only access their own record",
                principal.id
            )));
        }
        Ok(())
    }

    fn require_patient(&self, patient_id: &str) -> Result<(), ApiError> {
        match self.directory.read().get(patient_id) {
            Some(r) if r.role == Role::Patient => Ok(()),
            _ => Err(ApiError::NotFound(format!("patient {patient_id}"))),
        }
    }

    fn create_principal(
        &self,
        fixed_id: Option<String>,
        role: Role,
        demographics: Demographics,
        secret: String,
        actor: Option<&str>,
    ) -> Result<RegisterResponse, ApiError> {
        let _g = self.register_lock.lock();
        let key = demographics.key(role);
        if self
            .directory
            .read()
            .values()
            .any(|r| r.demographics.key(r.role) == key)
        {
            return Err(ApiError::Conflict(format!(
                "{role} `{}` already registered",
                demographics.name
            )));
        }
        for staff in &demographics.assigned_staff {
            match self.directory.read().get(staff) {
                Some(r) if r.role.is_staff() => {}
                _ => return Err(ApiError::NotFound(format!("assigned staff {staff}"))),
            }
        }
        let id = match fixed_id {
            Some(id) => id,
            None => {
                let mut counters = self.role_counters.lock();
                let c = counters.entry(role).or_default();
                *c += 1;
                format!("{}-{:06}", role.id_prefix(), *c)
            }
        };
        if self.directory.read().contains_key(&id) {
            return Err(ApiError::Conflict(format!("id {id} already exists")));
        }
        let salt = random_hex(16);
        let rec = PrincipalRecord {
            id: id.clone(),
            role,
            secret_hash: hash_secret(&salt, &secret),
            salt,
            demographics,
            created_at: self.clock.now(),
        };
        self.store.snapshot_upsert(PRINCIPAL_KIND, &id, &rec)?;
        self.directory.write().insert(id.clone(), rec);
        self.audit(actor, "register", &id)?;
        Ok(RegisterResponse { id, role, secret })
    }

    pub fn register(
        &self,
        token: Option<&str>,
        req: RegisterRequest,
    ) -> Result<RegisterResponse, ApiError> {
        let (admin, _) = self.authorize(token, Endpoint::Register)?;
        if req.demographics.name.trim().is_empty() {
            return Err(ApiError::Malformed("name is required".into()));
        }
        let secret = req.secret.unwrap_or_else(|| random_hex(12));
        self.create_principal(None, req.role, req.demographics, secret, Some(&admin.id))
    }

    /// Unknown ids and wrong secrets are indistinguishable.
    pub fn login(&self, id: &str, secret: &str) -> Result<LoginResponse, ApiError> {
        self.ensure_up()?;
        let principal = {
            let dir = self.directory.read();
            let rec = dir.get(id).ok_or(ApiError::Unauthorized)?;
            if hash_secret(&rec.salt, secret) != rec.secret_hash {
                return Err(ApiError::Unauthorized);
            }
            Principal {
                id: rec.id.clone(),
                role: rec.role,
            }
        };
        let (token, expires_at) = self.tokens.issue(principal.clone(), self.clock.now());
        self.audit(Some(&principal.id), "login", &principal.id)?;
        Ok(LoginResponse {
            token,
            id: principal.id,
            role: principal.role,
            expires_at,
        })
    }

    pub fn health(&self) -> Option<HealthAck> {
        if self.is_down() {
            return None;
        }
        Some(HealthAck {
            status: "ok".into(),
            server_time: self.clock.now(),
        })
    }

    pub fn policy(&self, patient_id: &str) -> ThresholdPolicy {
        self.policies
            .read()
            .get(patient_id)
            .cloned()
            .unwrap_or_else(|| ThresholdPolicy::defaults(patient_id))
    }

    fn ingest_lock(&self, patient_id: &str) -> Arc<Mutex<()>> {
        self.ingest_locks
            .lock()
            .entry(patient_id.to_string())
            .or_default()
            .clone()
    }

    fn recipients_for(&self, patient_id: &str) -> Vec<Recipient> {
        let dir = self.directory.read();
        let to_recipient = |r: &PrincipalRecord| Recipient {
            id: r.id.clone(),
            phone: r.demographics.phone.clone(),
        };
        let assigned: Vec<Recipient> = dir
            .get(patient_id)
            .map(|p| {
                p.demographics
                    .assigned_staff
                    .iter()
                    .filter_map(|s| dir.get(s))
                    .map(to_recipient)
                    .collect()
            })
            .unwrap_or_default();
        if !assigned.is_empty() {
            return assigned;
        }
        let mut experts: Vec<Recipient> = dir
            .values()
            .filter(|r| r.role == Role::MedicalExpert)
            .map(to_recipient)
            .collect();
        experts.sort_by(|a, b| a.id.cmp(&b.id));
        experts
    }

    fn parse_reading(device_id: &str, w: &WireReading) -> Result<VitalReading, ApiError> {
        let kind: VitalKind = w.kind.parse()?;
        let value = w
            .value
            .as_i64()
            .ok_or_else(|| ApiError::Malformed(format!("value {} is not an integer", w.value)))?;
        let r = VitalReading {
            patient_id: w.patient_id.clone(),
            device_id: device_id.to_string(),
            kind,
            value,
            taken_at: w.taken_at,
            seq: w.seq,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn ingest(
        &self,
        token: Option<&str>,
        batch: &IngestBatch,
    ) -> Result<IngestResult, ApiError> {
        let (principal, acc) = self.authorize(token, Endpoint::IngestVitals)?;
        if batch.device_id.is_empty() {
            return Err(ApiError::Malformed("device_id is required".into()));
        }
        for r in &batch.readings {
            self.require_own(&principal, acc, &r.patient_id)?;
        }
        let mut result = IngestResult::default();
        let lock = self.ingest_lock(&principal.id);
        let _serial = lock.lock();
        for w in &batch.readings {
            let reading = match Self::parse_reading(&batch.device_id, w) {
                Ok(r) => r,
                Err(e) => {
                    result.rejected += 1;
                    result.items.push(ItemStatus {
                        seq: w.seq,
                        status: ItemOutcome::Malformed,
                        error: Some(e.to_string()),
                    });
                    continue;
                }
            };
            let key = (reading.patient_id.clone(), reading.device_id.clone());
            if self
                .last_seq
                .lock()
                .get(&key)
                .is_some_and(|last| reading.seq <= *last)
            {
                result.duplicates += 1;
                result.items.push(ItemStatus {
                    seq: reading.seq,
                    status: ItemOutcome::Duplicate,
                    error: None,
                });
                continue;
            }
            let policy = self.policy(&reading.patient_id);
            let class = classify(&reading, &policy)?;
            let record = ReadingRecord {
                reading: reading.clone(),
                policy_version: policy.version,
                status: class.status,
            };
            self.store
                .append_json(&readings_stream(&reading.patient_id), &record)?;
            self.last_seq.lock().insert(key, reading.seq);
            result.accepted += 1;
            result.items.push(ItemStatus {
                seq: reading.seq,
                status: ItemOutcome::Accepted,
                error: None,
            });
            if !class.is_normal() {
                let alert =
                    self.raise_alert(&reading, class.status, policy.bounds_for(reading.kind))?;
                result.alerts_raised.push(alert.id.clone());
                let recipients = self.recipients_for(&alert.patient_id);
                self.notifier.submit(alert, recipients);
            }
        }
        self.audit(
            Some(&principal.id),
            "ingest",
            &format!(
                "{}:{} accepted={} duplicates={}",
                principal.id, batch.device_id, result.accepted, result.duplicates
            ),
        )?;
        Ok(result)
    }

    fn raise_alert(
        &self,
        reading: &VitalReading,
        direction: Status,
        bounds: Bounds,
    ) -> Result<Alert, ApiError> {
        let n = self.alert_counter.fetch_add(1, Ordering::SeqCst) + 1;
        let alert = Alert {
            id: format!("AL-{n:06}"),
            patient_id: reading.patient_id.clone(),
            device_id: reading.device_id.clone(),
            seq: reading.seq,
            kind: reading.kind,
            value: reading.value,
            direction,
            bounds,
            taken_at: reading.taken_at,
            raised_at: self.clock.now(),
            state: AlertState::Open,
            acknowledged_by: None,
            acknowledged_at: None,
        };
        self.store.snapshot_upsert(ALERT_KIND, &alert.id, &alert)?;
        self.store.append_json(&alert_log_stream(), &alert)?;
        self.alerts.write().insert(alert.id.clone(), alert.clone());
        Ok(alert)
    }

    pub fn query_vitals(
        &self,
        token: Option<&str>,
        patient_id: &str,
        q: &VitalsQuery,
    ) -> Result<VitalsPage, ApiError> {
        let (principal, acc) = self.authorize(token, Endpoint::QueryVitals)?;
        self.require_own(&principal, acc, patient_id)?;
        self.require_patient(patient_id)?;
        let limit = q.limit.unwrap_or(500).clamp(1, 10_000);
        let mut from = (q.after + 1).max(0) as u64;
        let key = readings_stream(patient_id);
        let mut readings = Vec::new();
        let mut next_cursor = q.after;
        'scan: loop {
            let page = self.store.read(&key, from, 1024)?;
            if page.is_empty() {
                break;
            }
            for rec in page {
                from = rec.offset + 1;
                let r: ReadingRecord = rec.decode().map_err(ApiError::from)?;
                next_cursor = rec.offset as i64;
                let in_range = q.from.is_none_or(|f| r.reading.taken_at >= f)
                    && q.to.is_none_or(|t| r.reading.taken_at < t);
                if in_range {
                    readings.push(PagedReading {
                        cursor: rec.offset,
                        reading: r.reading,
                        status: r.status,
                    });
                    if readings.len() >= limit {
                        break 'scan;
                    }
                }
            }
        }
        Ok(VitalsPage {
            patient_id: patient_id.to_string(),
            readings,
            next_cursor,
        })
    }

    pub fn get_thresholds(
        &self,
        token: Option<&str>,
        patient_id: &str,
    ) -> Result<ThresholdView, ApiError> {
        let (principal, acc) = self.authorize(token, Endpoint::GetThresholds)?;
        self.require_own(&principal, acc, patient_id)?;
        self.require_patient(patient_id)?;
        Ok(ThresholdView::from(&self.policy(patient_id)))
    }

    pub fn update_thresholds(
        &self,
        token: Option<&str>,
        patient_id: &str,
        update: &ThresholdUpdate,
    ) -> Result<ThresholdView, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::PutThresholds)?;
        self.require_patient(patient_id)?;
        let _g = self.policy_lock.lock();
        let current = self.policy(patient_id);
        let mut bounds = current.bounds.clone();
        for (kind, pair) in &update.bounds {
            bounds.insert(*kind, Bounds::new(*kind, pair.low, pair.high)?);
        }
        let mut updated_at = self.clock.now();
        if updated_at <= current.updated_at {
            updated_at = current.updated_at + chrono::Duration::milliseconds(1);
        }
        let policy = ThresholdPolicy {
            patient_id: patient_id.to_string(),
            bounds,
            updated_by: principal.id.clone(),
            updated_at,
            version: current.version + 1,
        };
        policy.validate()?;
        self.store
            .snapshot_upsert(POLICY_KIND, patient_id, &policy)?;
        self.store
            .append_json(&policy_history_stream(patient_id), &policy)?;
        self.policies
            .write()
            .insert(patient_id.to_string(), policy.clone());
        self.audit(Some(&principal.id), "update_thresholds", patient_id)?;
        Ok(ThresholdView::from(&policy))
    }

    pub fn list_alerts(&self, token: Option<&str>, q: &AlertQuery) -> Result<Vec<Alert>, ApiError> {
        let (principal, acc) = self.authorize(token, Endpoint::ListAlerts)?;
        let patient = match (acc, &q.patient_id) {
            (Access::OwnRecord, Some(p)) => {
                self.require_own(&principal, acc, p)?;
                Some(p.clone())
            }
            (Access::OwnRecord, None) => Some(principal.id.clone()),
            (_, p) => p.clone(),
        };
        Ok(self
            .alerts
            .read()
            .values()
            .filter(|a| patient.as_ref().is_none_or(|p| &a.patient_id == p))
            .filter(|a| q.state.is_none_or(|s| a.state == s))
            .cloned()
            .collect())
    }

    pub fn acknowledge(&self, token: Option<&str>, alert_id: &str) -> Result<Alert, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::AckAlert)?;
        let mut alerts = self.alerts.write();
        let alert = alerts
            .get_mut(alert_id)
            .ok_or_else(|| ApiError::NotFound(format!("alert {alert_id}")))?;
        let mut updated = alert.clone();
        updated
            .acknowledge(&principal.id, self.clock.now())
            .map_err(|e| ApiError::InvalidTransition(e.to_string()))?;
        self.store.snapshot_upsert(ALERT_KIND, alert_id, &updated)?;
        *alert = updated.clone();
        drop(alerts);
        self.audit(Some(&principal.id), "ack_alert", alert_id)?;
        Ok(updated)
    }

    fn principal_of(&self, id: &str) -> Result<Principal, ApiError> {
        self.directory
            .read()
            .get(id)
            .map(|r| Principal {
                id: r.id.clone(),
                role: r.role,
            })
            .ok_or_else(|| ApiError::NotFound(format!("principal {id}")))
    }

    pub fn open_session(
        &self,
        token: Option<&str>,
        target: &str,
        mode: SessionMode,
    ) -> Result<ConsultSession, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::OpenSession)?;
        let target = self.principal_of(target)?;
        let s = self.consult.open_session(&principal, &target, mode)?;
        self.audit(Some(&principal.id), "open_session", &s.id)?;
        Ok(s)
    }

    pub fn list_sessions(&self, token: Option<&str>) -> Result<Vec<ConsultSession>, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::ListSessions)?;
        Ok(self.consult.list_for(&principal))
    }

    pub fn accept_session(
        &self,
        token: Option<&str>,
        id: &str,
    ) -> Result<ConsultSession, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::AcceptSession)?;
        let s = self.consult.accept(&principal, id)?;
        self.audit(Some(&principal.id), "accept_session", id)?;
        Ok(s)
    }

    pub fn post_message(
        &self,
        token: Option<&str>,
        id: &str,
        kind: MessageKind,
        payload: String,
    ) -> Result<u64, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::PostMessage)?;
        let seq = self.consult.post(&principal, id, kind, payload)?;
        self.audit(Some(&principal.id), "post_message", &format!("{id}#{seq}"))?;
        Ok(seq)
    }

    /// `wait` defaults to the configured long-poll wait and is capped by it.
    pub fn fetch_events(
        &self,
        token: Option<&str>,
        id: &str,
        after: i64,
        wait: Option<Duration>,
    ) -> Result<SessionEvents, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::FetchEvents)?;
        let wait = wait
            .unwrap_or(self.config.long_poll_wait)
            .min(self.config.long_poll_wait);
        self.consult.fetch(&principal, id, after, wait)
    }

    pub fn terminate_session(
        &self,
        token: Option<&str>,
        id: &str,
    ) -> Result<ConsultSession, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::TerminateSession)?;
        let s = self.consult.terminate(&principal, id)?;
        self.audit(Some(&principal.id), "terminate_session", id)?;
        Ok(s)
    }

    pub fn put_blob(&self, token: Option<&str>, bytes: &[u8]) -> Result<String, ApiError> {
        let (principal, _) = self.authorize(token, Endpoint::PutBlob)?;
        if bytes.len() > self.config.payload_cap * 16 {
            return Err(ApiError::PayloadTooLarge {
                size: bytes.len(),
                cap: self.config.payload_cap * 16,
            });
        }
        let reference = self.store.put_blob(bytes)?;
        self.audit(Some(&principal.id), "put_blob", &reference)?;
        Ok(reference)
    }

    pub fn get_blob(&self, token: Option<&str>, reference: &str) -> Result<Vec<u8>, ApiError> {
        self.authorize(token, Endpoint::GetBlob)?;
        Ok(self.store.get_blob(reference)?)
    }

    pub fn reliability_metrics(&self, token: Option<&str>) -> Result<ReliabilityReport, ApiError> {
        self.authorize(token, Endpoint::ReliabilityMetrics)?;
        let log = match &self.config.reliability_log {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ApiError::Unavailable(format!("{}: {e}", path.display())))?;
                ProbeLog::parse(&text).map_err(|e| ApiError::Unavailable(e.to_string()))?
            }
            None => reliability::bundled_evaluation_log(),
        };
        reliability::analyze(&log).map_err(|e| ApiError::Unavailable(e.to_string()))
    }

    /// Offline replay: classifies every stored reading under the policy
    /// version recorded with it and returns the non-Normal (device, seq) keys.
    pub fn replay_alert_keys(&self) -> Result<Vec<(String, String, u64)>, StoreError> {
        let mut keys = Vec::new();
        for patient in self.store.stream_ids(READINGS_KIND)? {
            let history: Vec<ThresholdPolicy> =
                self.store.read_all_json(&policy_history_stream(&patient))?;
            for rec in self
                .store
                .read_all_json::<ReadingRecord>(&readings_stream(&patient))?
            {
                let policy = history
                    .iter()
                    .find(|p| p.version == rec.policy_version)
                    .cloned()
                    .unwrap_or_else(|| ThresholdPolicy::defaults(&patient));
                if let Ok(c) = classify(&rec.reading, &policy) {
                    if !c.is_normal() {
                        keys.push((
                            patient.clone(),
                            rec.reading.device_id.clone(),
                            rec.reading.seq,
                        ));
                    }
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    /// All registered patients in id order.
    pub fn list_patients(&self, token: Option<&str>) -> Result<Vec<PatientSummary>, ApiError> {
        self.authorize(token, Endpoint::ListPatients)?;
        let mut out: Vec<PatientSummary> = self
            .directory
            .read()
            .values()
            .filter(|r| r.role == Role::Patient)
            .map(|r| PatientSummary {
                id: r.id.clone(),
                name: r.demographics.name.clone(),
                assigned_staff: r.demographics.assigned_staff.clone(),
            })
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    pub fn principal_role(&self, id: &str) -> Option<Role> {
        self.directory.read().get(id).map(|r| r.role)
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.notifier.shutdown();
    }
}
