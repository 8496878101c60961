//! Simulated sensors and smartphone hub.
//!
//! Each configured vital kind is one simulated device emitting one reading per
//! tick as a bounded random walk, overridden during anomaly episodes. The hub
//! buffers readings and forwards them in per-device batches; while the link or
//! the gateway is down readings accumulate and the oldest are evicted once the
//! buffer is full.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use chrono::{DateTime, Duration as ChronoDuration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::error::ApiError;
use crate::gateway::{Gateway, IngestBatch, IngestResult};
use crate::vital::{VitalKind, VitalReading, VALUE_CEILING};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProfileError {
    #[error("{kind}: baseline {baseline} outside clamp range [{min}, {max}]")]
    BaselineOutsideClamp {
        kind: VitalKind,
        baseline: i64,
        min: i64,
        max: i64,
    },
    #[error("{kind}: range [{min}, {max}] is empty or outside [0, {VALUE_CEILING}]")]
    BadRange { kind: VitalKind, min: i64, max: i64 },
    #[error("{kind}: episodes overlap at tick {tick}")]
    OverlappingEpisodes { kind: VitalKind, tick: u64 },
    #[error("episode for {0} which has no vital profile")]
    EpisodeWithoutVital(VitalKind),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindProfile {
    pub baseline: i64,
    /// Maximum absolute step per tick.
    pub jitter: i64,
    pub min: i64,
    pub max: i64,
}

/// Ticks `start..=end` draw uniformly from `[low, high]` instead of walking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub kind: VitalKind,
    pub start_tick: u64,
    pub end_tick: u64,
    pub low: i64,
    pub high: i64,
}

impl Episode {
    pub fn covers(&self, tick: u64) -> bool {
        self.start_tick <= tick && tick <= self.end_tick
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSimProfile {
    pub patient_id: String,
    pub seed: u64,
    pub vitals: BTreeMap<VitalKind, KindProfile>,
    #[serde(default)]
    pub episodes: Vec<Episode>,
}

fn check_range(kind: VitalKind, min: i64, max: i64) -> Result<(), ProfileError> {
    if min > max || min < 0 || max > VALUE_CEILING {
        return Err(ProfileError::BadRange { kind, min, max });
    }
    Ok(())
}

impl PatientSimProfile {
    /// A resting adult: heart rate 72, blood pressure 120/80, all well inside the defaults.
    pub fn resting(patient_id: impl Into<String>, seed: u64) -> Self {
        let mut vitals = BTreeMap::new();
        vitals.insert(
            VitalKind::HeartRate,
            KindProfile {
                baseline: 72,
                jitter: 3,
                min: 60,
                max: 90,
            },
        );
        vitals.insert(
            VitalKind::SystolicBP,
            KindProfile {
                baseline: 120,
                jitter: 4,
                min: 105,
                max: 150,
            },
        );
        vitals.insert(
            VitalKind::DiastolicBP,
            KindProfile {
                baseline: 80,
                jitter: 3,
                min: 65,
                max: 90,
            },
        );
        Self {
            patient_id: patient_id.into(),
            seed,
            vitals,
            episodes: Vec::new(),
        }
    }

    pub fn device_id(&self, kind: VitalKind) -> String {
        format!("{}-{}", self.patient_id, kind.slug())
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        for (kind, p) in &self.vitals {
            check_range(*kind, p.min, p.max)?;
            if p.baseline < p.min || p.baseline > p.max {
                return Err(ProfileError::BaselineOutsideClamp {
                    kind: *kind,
                    baseline: p.baseline,
                    min: p.min,
                    max: p.max,
                });
            }
        }
        for (i, e) in self.episodes.iter().enumerate() {
            if !self.vitals.contains_key(&e.kind) {
                return Err(ProfileError::EpisodeWithoutVital(e.kind));
            }
            check_range(e.kind, e.low, e.high)?;
            for other in &self.episodes[i + 1..] {
                if other.kind == e.kind
                    && other.start_tick <= e.end_tick
                    && e.start_tick <= other.end_tick
                {
                    return Err(ProfileError::OverlappingEpisodes {
                        kind: e.kind,
                        tick: e.start_tick.max(other.start_tick),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Incremental, deterministic reading generator.
#[derive(Debug, Clone)]
pub struct TraceGenerator {
    profile: PatientSimProfile,
    rng: ChaCha8Rng,
    current: BTreeMap<VitalKind, i64>,
    tick: u64,
    start: DateTime<Utc>,
    sample_interval: ChronoDuration,
}

impl TraceGenerator {
    pub fn new(
        profile: PatientSimProfile,
        start: DateTime<Utc>,
        sample_interval: std::time::Duration,
    ) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            current: profile
                .vitals
                .iter()
                .map(|(k, p)| (*k, p.baseline))
                .collect(),
            profile,
            tick: 0,
            start,
            sample_interval: ChronoDuration::from_std(sample_interval).expect("interval in range"),
        }
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn time_of(&self, tick: u64) -> DateTime<Utc> {
        self.start + self.sample_interval * tick as i32
    }

    /// Readings for the next tick, one per configured kind in kind order.
    pub fn next_tick(&mut self) -> Vec<VitalReading> {
        let tick = self.tick;
        let at = self.time_of(tick);
        let mut out = Vec::with_capacity(self.profile.vitals.len());
        for (kind, p) in &self.profile.vitals {
            let episode = self
                .profile
                .episodes
                .iter()
                .find(|e| e.kind == *kind && e.covers(tick));
            let prev = self.current[kind];
            let value = match episode {
                Some(e) => self.rng.random_range(e.low..=e.high),
                None if tick == 0 => p.baseline,
                None => {
                    let step = if p.jitter > 0 {
                        self.rng.random_range(-p.jitter..=p.jitter)
                    } else {
                        0
                    };
                    (prev.clamp(p.min, p.max) + step).clamp(p.min, p.max)
                }
            };
            self.current.insert(*kind, value);
            out.push(VitalReading {
                patient_id: self.profile.patient_id.clone(),
                device_id: self.profile.device_id(*kind),
                kind: *kind,
                value,
                taken_at: at,
                seq: tick,
            });
        }
        self.tick += 1;
        out
    }
}

/// The full trace for `ticks` ticks. Identical inputs give identical output.
pub fn generate_trace(
    profile: &PatientSimProfile,
    ticks: u64,
    start: DateTime<Utc>,
    sample_interval: std::time::Duration,
) -> Vec<VitalReading> {
    let mut g = TraceGenerator::new(profile.clone(), start, sample_interval);
    (0..ticks).flat_map(|_| g.next_tick()).collect()
}

/// Link outage, in seconds from the start of the run: `start <= t < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutageWindow {
    pub start_secs: u64,
    pub end_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HubConfig {
    pub sample_interval_secs: u64,
    pub transmit_interval_secs: u64,
    pub batch_cap: usize,
    pub buffer_capacity: usize,
    pub outages: Vec<OutageWindow>,
    /// Attempt one last transmission after the final tick.
    pub drain_at_end: bool,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            sample_interval_secs: 60,
            transmit_interval_secs: 60,
            batch_cap: 50,
            buffer_capacity: 1024,
            outages: Vec::new(),
            drain_at_end: true,
        }
    }
}

impl HubConfig {
    pub fn sample_interval(&self) -> std::time::Duration {
        std::time::Duration::from_secs(self.sample_interval_secs.max(1))
    }

    fn link_down(&self, elapsed_secs: u64) -> bool {
        self.outages
            .iter()
            .any(|o| o.start_secs <= elapsed_secs && elapsed_secs < o.end_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// Retry later; readings stay buffered.
    #[error("gateway unavailable: {0}")]
    Unavailable(String),
    /// Credentials refused; the hub stops.
    #[error("rejected: {0}")]
    Rejected(String),
}

impl From<ApiError> for TransportError {
    fn from(e: ApiError) -> Self {
        match e {
            ApiError::Unauthorized | ApiError::Forbidden(_) => {
                TransportError::Rejected(e.to_string())
            }
            other => TransportError::Unavailable(other.to_string()),
        }
    }
}

pub trait VitalsTransport: Send {
    fn send(&mut self, batch: &IngestBatch) -> Result<IngestResult, TransportError>;
}

/// Calls a gateway in the same process.
pub struct InProcessTransport {
    gateway: Arc<Gateway>,
    token: String,
}

impl InProcessTransport {
    pub fn new(gateway: Arc<Gateway>, token: impl Into<String>) -> Self {
        Self {
            gateway,
            token: token.into(),
        }
    }
}

impl VitalsTransport for InProcessTransport {
    fn send(&mut self, batch: &IngestBatch) -> Result<IngestResult, TransportError> {
        Ok(self.gateway.ingest(Some(&self.token), batch)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HubEvent {
    Sent {
        device: String,
        first_seq: u64,
        last_seq: u64,
        count: usize,
        accepted: usize,
        duplicates: usize,
        alerts: usize,
    },
    Failed {
        reason: String,
    },
    Evicted {
        device: String,
        seq: u64,
    },
    Halted {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HubLogEntry {
    pub tick: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub event: HubEvent,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransmissionReport {
    pub patient_id: String,
    pub generated: u64,
    pub sent: u64,
    pub evicted: u64,
    pub still_buffered: u64,
    pub buffered_peak: u64,
    pub retries: u64,
    pub alerts_raised: u64,
    pub halted: Option<String>,
    pub log: Vec<HubLogEntry>,
}

impl TransmissionReport {
    /// `sent + evicted + still_buffered == generated`.
    pub fn conserved(&self) -> bool {
        self.sent + self.evicted + self.still_buffered == self.generated
    }

    /// Canonical bytes of the transmission log, for determinism checks.
    pub fn log_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.log).expect("log serializes")
    }
}

/// Smartphone hub for one patient.
pub struct Hub {
    config: HubConfig,
    generator: TraceGenerator,
    start: DateTime<Utc>,
    buffer: VecDeque<VitalReading>,
    next_transmit_secs: u64,
    report: TransmissionReport,
    transport: Box<dyn VitalsTransport>,
}

impl Hub {
    pub fn new(
        profile: PatientSimProfile,
        config: HubConfig,
        start: DateTime<Utc>,
        transport: Box<dyn VitalsTransport>,
    ) -> Self {
        let report = TransmissionReport {
            patient_id: profile.patient_id.clone(),
            ..Default::default()
        };
        Self {
            generator: TraceGenerator::new(profile, start, config.sample_interval()),
            config,
            start,
            buffer: VecDeque::new(),
            next_transmit_secs: 0,
            report,
            transport,
        }
    }

    pub fn is_halted(&self) -> bool {
        self.report.halted.is_some()
    }

    pub fn buffered(&self) -> impl Iterator<Item = &VitalReading> {
        self.buffer.iter()
    }

    pub fn report(&self) -> &TransmissionReport {
        &self.report
    }

    fn log(&mut self, tick: u64, at: DateTime<Utc>, event: HubEvent) {
        self.report.log.push(HubLogEntry { tick, at, event });
    }

    /// Samples the next tick and transmits if a transmit slot is due.
    pub fn step(&mut self) {
        if self.is_halted() {
            return;
        }
        let tick = self.generator.tick();
        let at = self.generator.time_of(tick);
        for r in self.generator.next_tick() {
            self.report.generated += 1;
            self.buffer.push_back(r);
            if self.buffer.len() > self.config.buffer_capacity {
                let old = self.buffer.pop_front().expect("non-empty");
                self.report.evicted += 1;
                self.log(
                    tick,
                    at,
                    HubEvent::Evicted {
                        device: old.device_id,
                        seq: old.seq,
                    },
                );
            }
        }
        self.report.buffered_peak = self.report.buffered_peak.max(self.buffer.len() as u64);
        let elapsed = tick * self.config.sample_interval_secs.max(1);
        if elapsed >= self.next_transmit_secs {
            let every = self.config.transmit_interval_secs.max(1);
            while self.next_transmit_secs <= elapsed {
                self.next_transmit_secs += every;
            }
            self.transmit(tick, at, elapsed);
        }
        self.report.still_buffered = self.buffer.len() as u64;
    }

    /// Final transmission attempt at the end of the run.
    pub fn finish(mut self) -> TransmissionReport {
        if self.config.drain_at_end && !self.is_halted() && !self.buffer.is_empty() {
            let tick = self.generator.tick();
            let at = self.generator.time_of(tick);
            let elapsed = (at - self.start).num_seconds().max(0) as u64;
            self.transmit(tick, at, elapsed);
        }
        self.report.still_buffered = self.buffer.len() as u64;
        self.report
    }

    /// Oldest reading's device, up to `batch_cap` of its readings in buffer order.
    fn next_batch(&self) -> (String, Vec<usize>) {
        let device = self.buffer.front().expect("non-empty").device_id.clone();
        let idx = self
            .buffer
            .iter()
            .enumerate()
            .filter(|(_, r)| r.device_id == device)
            .map(|(i, _)| i)
            .take(self.config.batch_cap.max(1))
            .collect();
        (device, idx)
    }

    fn transmit(&mut self, tick: u64, at: DateTime<Utc>, elapsed_secs: u64) {
        if self.config.link_down(elapsed_secs) {
            self.report.retries += 1;
            self.log(
                tick,
                at,
                HubEvent::Failed {
                    reason: "link outage".into(),
                },
            );
            return;
        }
        while !self.buffer.is_empty() {
            let (device, idx) = self.next_batch();
            let readings: Vec<VitalReading> = idx.iter().map(|i| self.buffer[*i].clone()).collect();
            let batch = IngestBatch::from_readings(&device, &readings, at);
            match self.transport.send(&batch) {
                Ok(res) => {
                    for i in idx.iter().rev() {
                        self.buffer.remove(*i);
                    }
                    self.report.sent += readings.len() as u64;
                    self.report.alerts_raised += res.alerts_raised.len() as u64;
                    if !res.alerts_raised.is_empty() {
                        tracing::warn!(
                            patient = %self.report.patient_id,
                            device = %device,
                            "local alert mirror: {} out-of-range reading(s)",
                            res.alerts_raised.len()
                        );
                    }
                    self.log(
                        tick,
                        at,
                        HubEvent::Sent {
                            device,
                            first_seq: readings.first().map(|r| r.seq).unwrap_or(0),
                            last_seq: readings.last().map(|r| r.seq).unwrap_or(0),
                            count: readings.len(),
                            accepted: res.accepted,
                            duplicates: res.duplicates,
                            alerts: res.alerts_raised.len(),
                        },
                    );
                }
                Err(TransportError::Unavailable(reason)) => {
                    self.report.retries += 1;
                    self.log(tick, at, HubEvent::Failed { reason });
                    return;
                }
                Err(TransportError::Rejected(reason)) => {
                    self.report.halted = Some(reason.clone());
                    self.log(tick, at, HubEvent::Halted { reason });
                    return;
                }
            }
        }
    }
}

/// Runs one hub for `ticks` ticks, sleeping on `clock` between ticks.
pub fn run_hub(
    profile: PatientSimProfile,
    config: HubConfig,
    ticks: u64,
    transport: Box<dyn VitalsTransport>,
    clock: &dyn Clock,
) -> TransmissionReport {
    let start = clock.now();
    let interval = ChronoDuration::seconds(config.sample_interval_secs.max(1) as i64);
    let mut hub = Hub::new(profile, config, start, transport);
    for t in 0..ticks {
        clock.sleep_until(start + interval * t as i32);
        hub.step();
        if hub.is_halted() {
            break;
        }
    }
    if ticks > 0 {
        clock.sleep_until(start + interval * ticks as i32);
    }
    hub.finish()
}

/// Runs several hubs in lockstep: every hub samples tick `t` (concurrently)
/// before the clock moves on to `t + 1`.
pub fn run_fleet(
    hubs: Vec<Hub>,
    ticks: u64,
    sample_interval_secs: u64,
    clock: &dyn Clock,
) -> Vec<TransmissionReport> {
    let start = clock.now();
    let interval = ChronoDuration::seconds(sample_interval_secs.max(1) as i64);
    let mut hubs = hubs;
    for t in 0..ticks {
        clock.sleep_until(start + interval * t as i32);
        std::thread::scope(|s| {
            for hub in hubs.iter_mut() {
                s.spawn(move || hub.step());
            }
        });
    }
    if ticks > 0 {
        clock.sleep_until(start + interval * ticks as i32);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = hubs
            .into_iter()
            .map(|h| s.spawn(move || h.finish()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("hub thread"))
            .collect()
    })
}
