//! Alert records and their delivery to staff through pluggable sinks.
//!
//! Delivery is at-least-once per `(alert, recipient, sink)` with bounded
//! retries, and the persisted attempt log guarantees at most one `Delivered`
//! record per key even across restarts.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SharedClock;
use crate::store::{EmrStore, StoreError, StreamKey};
use crate::vital::{Bounds, Status, VitalKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlertState {
    Open,
    Acknowledged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub id: String,
    pub patient_id: String,
    pub device_id: String,
    pub seq: u64,
    pub kind: VitalKind,
    pub value: i64,
    pub direction: Status,
    pub bounds: Bounds,
    pub taken_at: DateTime<Utc>,
    pub raised_at: DateTime<Utc>,
    pub state: AlertState,
    pub acknowledged_by: Option<String>,
    pub acknowledged_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("alert {0} is already acknowledged")]
pub struct AlreadyAcknowledged(pub String);

impl Alert {
    pub fn bound_crossed(&self) -> i64 {
        match self.direction {
            Status::BelowLow => self.bounds.low,
            _ => self.bounds.high,
        }
    }

    /// Open → Acknowledged. Acknowledged is terminal.
    pub fn acknowledge(&mut self, by: &str, at: DateTime<Utc>) -> Result<(), AlreadyAcknowledged> {
        if self.state == AlertState::Acknowledged {
            return Err(AlreadyAcknowledged(self.id.clone()));
        }
        self.state = AlertState::Acknowledged;
        self.acknowledged_by = Some(by.to_string());
        self.acknowledged_at = Some(at);
        Ok(())
    }

    /// The frozen SMS/console message text.
    pub fn message_text(&self) -> String {
        let dir = match self.direction {
            Status::BelowLow => "below low",
            Status::AboveHigh => "above high",
            Status::Normal => "within",
        };
        format!(
            "[TELECARE] Alert {}: patient {} {} {} {} {} bound {} {} (device {} seq {}) at {}",
            self.id,
            self.patient_id,
            self.kind,
            self.value,
            self.bounds.unit,
            dir,
            self.bound_crossed(),
            self.bounds.unit,
            self.device_id,
            self.seq,
            self.raised_at.to_rfc3339_opts(SecondsFormat::Millis, true),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recipient {
    pub id: String,
    pub phone: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Delivered,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationRecord {
    pub alert_id: String,
    pub recipient: String,
    pub sink: String,
    pub attempt: u32,
    pub outcome: Outcome,
    pub at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl NotificationRecord {
    pub fn dedup_key(&self) -> (String, String, String) {
        (
            self.alert_id.clone(),
            self.recipient.clone(),
            self.sink.clone(),
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutboundMessage<'a> {
    pub alert: &'a Alert,
    pub recipient: &'a Recipient,
    pub text: String,
}

#[derive(Debug, Error)]
#[error("sink {sink} unavailable: {reason}")]
pub struct SinkError {
    pub sink: String,
    pub reason: String,
}

pub trait Sink: Send + Sync {
    fn name(&self) -> &str;
    fn deliver(&self, message: &OutboundMessage<'_>) -> Result<(), SinkError>;
}

/// Simulated SMS gateway: appends one tab-separated line per message to an
/// outbox file: `<sent_at>\t<recipient id>\t<phone or ->\t<text>`.
pub struct SmsSimSink {
    path: PathBuf,
    clock: SharedClock,
    lock: Mutex<()>,
}

impl SmsSimSink {
    pub fn new(path: impl Into<PathBuf>, clock: SharedClock) -> Self {
        Self {
            path: path.into(),
            clock,
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &std::path::Path {
        &self.path
    }
}

impl Sink for SmsSimSink {
    fn name(&self) -> &str {
        "sms-sim"
    }

    fn deliver(&self, m: &OutboundMessage<'_>) -> Result<(), SinkError> {
        let err = |e: std::io::Error| SinkError {
            sink: "sms-sim".into(),
            reason: e.to_string(),
        };
        let _g = self.lock.lock();
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(err)?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(err)?;
        let line = format!(
            "{}\t{}\t{}\t{}\n",
            self.clock
                .now()
                .to_rfc3339_opts(SecondsFormat::Millis, true),
            m.recipient.id,
            m.recipient.phone.as_deref().unwrap_or("-"),
            m.text.replace(['\t', '\n'], " "),
        );
        f.write_all(line.as_bytes()).map_err(err)?;
        f.sync_data().map_err(err)
    }
}

pub struct ConsoleSink;

impl Sink for ConsoleSink {
    fn name(&self) -> &str {
        "console"
    }

    fn deliver(&self, m: &OutboundMessage<'_>) -> Result<(), SinkError> {
        tracing::warn!(recipient = %m.recipient.id, "{}", m.text);
        Ok(())
    }
}

/// POSTs `{"alert": .., "recipient": .., "text": ..}` as JSON; any 2xx is success.
pub struct WebhookSink {
    url: String,
    client: reqwest::blocking::Client,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(timeout)
                .build()
                .expect("http client"),
        }
    }
}

impl Sink for WebhookSink {
    fn name(&self) -> &str {
        "webhook"
    }

    fn deliver(&self, m: &OutboundMessage<'_>) -> Result<(), SinkError> {
        let err = |reason: String| SinkError {
            sink: "webhook".into(),
            reason,
        };
        let resp = self
            .client
            .post(&self.url)
            .json(m)
            .send()
            .map_err(|e| err(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(err(format!("status {}", resp.status())))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_backoff_ms: 200,
            max_backoff_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        let shift = failed_attempt.saturating_sub(1).min(16);
        Duration::from_millis((self.base_backoff_ms << shift).min(self.max_backoff_ms))
    }
}

#[derive(Debug, Error)]
pub enum NotifyError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("injected crash after delivery to {0}")]
    InjectedCrash(String),
}

fn log_key() -> StreamKey {
    StreamKey::new("notifications", "log")
}

pub struct Notifier {
    store: Arc<EmrStore>,
    clock: SharedClock,
    sinks: Vec<Arc<dyn Sink>>,
    retry: RetryPolicy,
    delivered: Mutex<HashSet<(String, String, String)>>,
    crash_after_send: Mutex<bool>,
}

impl Notifier {
    /// Rebuilds the delivered-key set from the persisted attempt log.
    pub fn new(
        store: Arc<EmrStore>,
        clock: SharedClock,
        sinks: Vec<Arc<dyn Sink>>,
        retry: RetryPolicy,
    ) -> Result<Self, StoreError> {
        let delivered = store
            .read_all_json::<NotificationRecord>(&log_key())?
            .into_iter()
            .filter(|r| r.outcome == Outcome::Delivered)
            .map(|r| r.dedup_key())
            .collect();
        Ok(Self {
            store,
            clock,
            sinks,
            retry,
            delivered: Mutex::new(delivered),
            crash_after_send: Mutex::new(false),
        })
    }

    pub fn sink_names(&self) -> Vec<String> {
        self.sinks.iter().map(|s| s.name().to_string()).collect()
    }

    /// Fault injection: the next successful send returns before its
    /// `Delivered` record is logged, as if the process died there.
    pub fn inject_crash_after_send(&self) {
        *self.crash_after_send.lock() = true;
    }

    /// One attempt sequence per `(recipient, sink)`. Returns every attempt made.
    pub fn dispatch(
        &self,
        alert: &Alert,
        recipients: &[Recipient],
    ) -> Result<Vec<NotificationRecord>, NotifyError> {
        if recipients.is_empty() {
            tracing::warn!(alert = %alert.id, "no recipients; alert stays open");
            return Ok(Vec::new());
        }
        let text = alert.message_text();
        let mut records = Vec::new();
        for recipient in recipients {
            for sink in &self.sinks {
                let key = (
                    alert.id.clone(),
                    recipient.id.clone(),
                    sink.name().to_string(),
                );
                if self.delivered.lock().contains(&key) {
                    continue;
                }
                let msg = OutboundMessage {
                    alert,
                    recipient,
                    text: text.clone(),
                };
                for attempt in 1..=self.retry.max_attempts.max(1) {
                    let result = sink.deliver(&msg);
                    if result.is_ok() && std::mem::take(&mut *self.crash_after_send.lock()) {
                        return Err(NotifyError::InjectedCrash(recipient.id.clone()));
                    }
                    let record = NotificationRecord {
                        alert_id: alert.id.clone(),
                        recipient: recipient.id.clone(),
                        sink: sink.name().to_string(),
                        attempt,
                        outcome: if result.is_ok() {
                            Outcome::Delivered
                        } else {
                            Outcome::Failed
                        },
                        at: self.clock.now(),
                        error: result.as_ref().err().map(|e| e.reason.clone()),
                    };
                    self.store.append_json(&log_key(), &record)?;
                    records.push(record);
                    match result {
                        Ok(()) => {
                            self.delivered.lock().insert(key.clone());
                            break;
                        }
                        Err(e) => {
                            tracing::warn!(alert = %alert.id, attempt, "{e}");
                            if attempt < self.retry.max_attempts {
                                std::thread::sleep(self.retry.backoff(attempt));
                            }
                        }
                    }
                }
            }
        }
        Ok(records)
    }

    /// True if some `(recipient, sink)` pair for `alert` has no Delivered record yet.
    pub fn needs_dispatch(&self, alert: &Alert, recipients: &[Recipient]) -> bool {
        let delivered = self.delivered.lock();
        recipients.iter().any(|r| {
            self.sinks.iter().any(|s| {
                !delivered.contains(&(alert.id.clone(), r.id.clone(), s.name().to_string()))
            })
        })
    }

    pub fn log(&self) -> Result<Vec<NotificationRecord>, StoreError> {
        self.store.read_all_json(&log_key())
    }
}

struct Pending {
    count: Mutex<usize>,
    idle: Condvar,
}

type Job = (Alert, Vec<Recipient>);

/// Runs dispatch on a background thread so ingestion never waits on sinks.
pub struct NotifierWorker {
    notifier: Arc<Notifier>,
    tx: Mutex<Option<mpsc::Sender<Job>>>,
    pending: Arc<Pending>,
    handle: Mutex<Option<std::thread::JoinHandle<()>>>,
}

impl NotifierWorker {
    pub fn spawn(notifier: Arc<Notifier>) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let pending = Arc::new(Pending {
            count: Mutex::new(0),
            idle: Condvar::new(),
        });
        let worker_notifier = notifier.clone();
        let worker_pending = pending.clone();
        let handle = std::thread::Builder::new()
            .name("notifier".into())
            .spawn(move || {
                for (alert, recipients) in rx {
                    if let Err(e) = worker_notifier.dispatch(&alert, &recipients) {
                        tracing::error!(alert = %alert.id, "dispatch failed: {e}");
                    }
                    let mut n = worker_pending.count.lock();
                    *n -= 1;
                    if *n == 0 {
                        worker_pending.idle.notify_all();
                    }
                }
            })
            .expect("spawn notifier thread");
        Self {
            notifier,
            tx: Mutex::new(Some(tx)),
            pending,
            handle: Mutex::new(Some(handle)),
        }
    }

    pub fn notifier(&self) -> &Arc<Notifier> {
        &self.notifier
    }

    pub fn submit(&self, alert: Alert, recipients: Vec<Recipient>) {
        let tx = self.tx.lock();
        if let Some(tx) = tx.as_ref() {
            *self.pending.count.lock() += 1;
            if tx.send((alert, recipients)).is_err() {
                *self.pending.count.lock() -= 1;
            }
        }
    }

    /// Waits until every submitted alert has been dispatched.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        let mut n = self.pending.count.lock();
        while *n > 0 {
            if self.pending.idle.wait_until(&mut n, deadline).timed_out() {
                return *n == 0;
            }
        }
        true
    }

    /// Drains the queue and stops the thread.
    pub fn shutdown(&self) {
        self.tx.lock().take();
        if let Some(h) = self.handle.lock().take() {
            let _ = h.join();
        }
    }
}

impl Drop for NotifierWorker {
    fn drop(&mut self) {
        self.shutdown();
    }
}
