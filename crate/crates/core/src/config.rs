//! TOML configuration for `serve` and `simulate`, plus the rate-scaled clock
//! used by simulated-clock deployments.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{default_epoch, truncate_ms, Clock, SharedClock, SystemClock};
use crate::gateway::{BootstrapAdmin, GatewayConfig};
use crate::http::HttpConfig;
use crate::notifier::{ConsoleSink, RetryPolicy, Sink, SmsSimSink, WebhookSink};
use crate::sim::{Episode, HubConfig, KindProfile, PatientSimProfile, ProfileError};
use crate::store::Durability;
use crate::vital::VitalKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    System,
    /// Time starts at `start` and runs `time_scale` times faster than wall time.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClockConfig {
    pub mode: ClockMode,
    pub start: DateTime<Utc>,
    pub time_scale: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            mode: ClockMode::System,
            start: default_epoch(),
            time_scale: 60.0,
        }
    }
}

impl ClockConfig {
    pub fn build(&self) -> Result<SharedClock, ConfigError> {
        match self.mode {
            ClockMode::System => Ok(Arc::new(SystemClock)),
            ClockMode::Simulated => {
                if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
                    return Err(ConfigError::Invalid(format!(
                        "time_scale must be positive, got {}",
                        self.time_scale
                    )));
                }
                Ok(Arc::new(ScaledClock::new(self.start, self.time_scale)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SinkConfig {
    /// One tab-separated line per delivered message.
    SmsSim {
        path: PathBuf,
    },
    Console,
    Webhook {
        url: String,
        #[serde(default = "default_webhook_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_webhook_timeout_ms() -> u64 {
    2_000
}

impl SinkConfig {
    /// Relative paths resolve against `base`.
    pub fn build(&self, base: &Path, clock: &SharedClock) -> Arc<dyn Sink> {
        match self {
            SinkConfig::SmsSim { path } => {
                Arc::new(SmsSimSink::new(base.join(path), clock.clone()))
            }
            SinkConfig::Console => Arc::new(ConsoleSink),
            SinkConfig::Webhook { url, timeout_ms } => Arc::new(WebhookSink::new(
                url.clone(),
                Duration::from_millis(*timeout_ms),
            )),
        }
    }
}

/// Gateway outage, in seconds after startup, `start <= t < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultWindow {
    pub start_secs: u64,
    pub end_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    pub bootstrap_admin: Option<BootstrapAdmin>,
    pub token_lifetime_secs: u64,
    pub long_poll_wait_secs: u64,
    pub payload_cap_bytes: usize,
    pub durability: Durability,
    pub outage_hang_ms: u64,
    pub reliability_log: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub sinks: Vec<SinkConfig>,
    pub clock: ClockConfig,
    pub outages: Vec<FaultWindow>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GatewayConfig::default();
        let h = HttpConfig::default();
        Self {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("telecare-data"),
            bootstrap_admin: None,
            token_lifetime_secs: g.token_lifetime.as_secs(),
            long_poll_wait_secs: g.long_poll_wait.as_secs(),
            payload_cap_bytes: g.payload_cap,
            durability: g.durability,
            outage_hang_ms: h.outage_hang.as_millis() as u64,
            reliability_log: None,
            retry: g.retry,
            sinks: vec![SinkConfig::SmsSim {
                path: PathBuf::from("sms-outbox.log"),
            }],
            clock: ClockConfig::default(),
            outages: Vec::new(),
        }
    }
}

impl RunConfig {
    /// Loads a config; relative paths inside it resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data_dir = base.join(&cfg.data_dir);
        cfg.reliability_log = cfg.reliability_log.map(|p| base.join(p));
        for s in &mut cfg.sinks {
            if let SinkConfig::SmsSim { path } = s {
                *path = base.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.bind_addr()?;
        if self.token_lifetime_secs == 0 {
            return Err(ConfigError::Invalid(
                "token_lifetime_secs must be positive".into(),
            ));
        }
        if self.payload_cap_bytes == 0 {
            return Err(ConfigError::Invalid(
                "payload_cap_bytes must be positive".into(),
            ));
        }
        for w in &self.outages {
            if w.start_secs >= w.end_secs {
                return Err(ConfigError::Invalid(format!(
                    "outage window {}..{} is empty",
                    w.start_secs, w.end_secs
                )));
            }
        }
        Ok(())
    }

    pub fn bind_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.bind
            .parse()
            .map_err(|e| ConfigError::Invalid(format!("bind address `{}`: {e}", self.bind)))
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            token_lifetime: Duration::from_secs(self.token_lifetime_secs),
            long_poll_wait: Duration::from_secs(self.long_poll_wait_secs),
            payload_cap: self.payload_cap_bytes,
            retry: self.retry,
            durability: self.durability,
            bootstrap_admin: self.bootstrap_admin.clone(),
            reliability_log: self.reliability_log.clone(),
        }
    }

    pub fn http_config(&self) -> HttpConfig {
        HttpConfig {
            outage_hang: Duration::from_millis(self.outage_hang_ms),
            ..HttpConfig::default()
        }
    }

    pub fn build_sinks(&self, clock: &SharedClock) -> Vec<Arc<dyn Sink>> {
        self.sinks
            .iter()
            .map(|s| s.build(Path::new("."), clock))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub id: String,
    pub secret: String,
}

/// One simulated patient. Either `id` + `secret` of an existing patient, or
/// `name` (registered through `admin` before the run).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetPatient {
    pub id: Option<String>,
    pub secret: Option<String>,
    pub name: Option<String>,
    pub date_of_birth: Option<String>,
    pub assigned_staff: Vec<String>,
    pub seed: u64,
    /// Overrides of the resting profile, per kind.
    pub vitals: BTreeMap<VitalKind, KindProfile>,
    pub episodes: Vec<Episode>,
}

impl FleetPatient {
    pub fn profile(&self, patient_id: &str) -> Result<PatientSimProfile, ProfileError> {
        let mut p = PatientSimProfile::resting(patient_id, self.seed);
        for (k, v) in &self.vitals {
            p.vitals.insert(*k, v.clone());
        }
        p.episodes = self.episodes.clone();
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetConfig {
    /// Simulated run length; the tick count is `duration_secs / sample_interval_secs`.
    pub duration_secs: u64,
    /// Start of the simulated timeline; now when absent.
    pub start: Option<DateTime<Utc>>,
    pub admin: Option<Credentials>,
    pub hub: HubConfig,
    pub patients: Vec<FleetPatient>,
}

impl FleetConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg: FleetConfig = read_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (i, p) in self.patients.iter().enumerate() {
            match (&p.id, &p.secret, &p.name) {
                (Some(_), Some(_), _) => {}
                (None, _, Some(_)) if self.admin.is_some() => {}
                (None, _, Some(_)) => {
                    return Err(ConfigError::Invalid(format!(
                        "patient #{i} must be registered but no [admin] credentials are configured"
                    )))
                }
                _ => {
                    return Err(ConfigError::Invalid(format!(
                        "patient #{i} needs either id + secret or a name"
                    )))
                }
            }
            p.profile(p.id.as_deref().unwrap_or("P-000000"))?;
        }
        for o in &self.hub.outages {
            if o.start_secs >= o.end_secs {
                return Err(ConfigError::Invalid(format!(
                    "hub outage {}..{} is empty",
                    o.start_secs, o.end_secs
                )));
            }
        }
        Ok(())
    }

    pub fn ticks(&self) -> u64 {
        self.duration_secs / self.hub.sample_interval_secs.max(1)
    }
}

/// Simulated time that advances `scale` times faster than the wall clock.
#[derive(Debug)]
pub struct ScaledClock {
    origin: DateTime<Utc>,
    started: Instant,
    scale: f64,
}

impl ScaledClock {
    pub fn new(origin: DateTime<Utc>, scale: f64) -> Self {
        Self {
            origin: truncate_ms(origin),
            started: Instant::now(),
            scale,
        }
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> DateTime<Utc> {
        let sim_ms = (self.started.elapsed().as_secs_f64() * self.scale * 1000.0) as i64;
        self.origin + chrono::Duration::milliseconds(sim_ms)
    }

    fn sleep_until(&self, deadline: DateTime<Utc>) {
        let remaining = deadline - self.now();
        if let Ok(d) = remaining.to_std() {
            std::thread::sleep(d.div_f64(self.scale));
        }
    }

    fn is_simulated(&self) -> bool {
        true
    }
}
