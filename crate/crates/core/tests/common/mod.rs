#![allow(dead_code)]

pub mod doc;
pub mod scenarios;
pub mod sessions;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use tempfile::TempDir;

use telecare_core::clock::{Clock, SharedClock, SimClock};
use telecare_core::gateway::{
    BootstrapAdmin, Demographics, Gateway, GatewayConfig, RegisterRequest,
};
use telecare_core::notifier::{RetryPolicy, Sink, SmsSimSink};
use telecare_core::rbac::Role;
use telecare_core::store::Durability;

pub const ADMIN_ID: &str = "A-000001";
pub const ADMIN_SECRET: &str = "bootstrap-secret";

pub fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 5,
        base_backoff_ms: 1,
        max_backoff_ms: 4,
    }
}

pub fn test_config() -> GatewayConfig {
    GatewayConfig {
        long_poll_wait: Duration::from_secs(5),
        retry: fast_retry(),
        durability: Durability::Flush,
        bootstrap_admin: Some(BootstrapAdmin {
            id: ADMIN_ID.into(),
            secret: ADMIN_SECRET.into(),
            name: "Root".into(),
        }),
        ..GatewayConfig::default()
    }
}

/// A gateway on a simulated clock with an SMS-sim outbox in a temp directory.
pub struct Fixture {
    pub dir: TempDir,
    pub clock: Arc<SimClock>,
    pub gw: Arc<Gateway>,
    pub admin: String,
    pub outbox: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        Self::with_config(test_config())
    }

    pub fn with_config(config: GatewayConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(SimClock::at_default_epoch());
        let outbox = dir.path().join("outbox.log");
        let (gw, admin) = open(&dir, &clock, &outbox, config);
        Self {
            dir,
            clock,
            gw,
            admin,
            outbox,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    pub fn shared_clock(&self) -> SharedClock {
        self.clock.clone()
    }

    /// Drops the running gateway and opens a new one over the same directory.
    pub fn restart(&mut self, config: GatewayConfig) {
        self.gw.shutdown();
        let (gw, admin) = open(&self.dir, &self.clock, &self.outbox, config);
        self.gw = gw;
        self.admin = admin;
    }

    pub fn register(&self, role: Role, name: &str, assigned: &[&str]) -> (String, String) {
        let r = self
            .gw
            .register(
                Some(&self.admin),
                RegisterRequest {
                    role,
                    demographics: Demographics {
                        name: name.into(),
                        date_of_birth: None,
                        phone: Some(format!("+1555{:07}", name.len())),
                        assigned_staff: assigned.iter().map(|s| s.to_string()).collect(),
                    },
                    secret: None,
                },
            )
            .unwrap();
        (r.id, r.secret)
    }

    pub fn login(&self, id: &str, secret: &str) -> String {
        self.gw.login(id, secret).unwrap().token
    }

    /// Registers and logs in; returns (id, token).
    pub fn user(&self, role: Role, name: &str, assigned: &[&str]) -> (String, String) {
        let (id, secret) = self.register(role, name, assigned);
        let token = self.login(&id, &secret);
        (id, token)
    }

    pub fn outbox_lines(&self) -> Vec<String> {
        std::fs::read_to_string(&self.outbox)
            .unwrap_or_default()
            .lines()
            .map(str::to_string)
            .collect()
    }
}

fn open(
    dir: &TempDir,
    clock: &Arc<SimClock>,
    outbox: &Path,
    config: GatewayConfig,
) -> (Arc<Gateway>, String) {
    let shared: SharedClock = clock.clone();
    let sinks: Vec<Arc<dyn Sink>> = vec![Arc::new(SmsSimSink::new(outbox, shared.clone()))];
    let gw = Gateway::open(dir.path().join("data"), config, shared, sinks).unwrap();
    let admin = gw.login(ADMIN_ID, ADMIN_SECRET).unwrap().token;
    (gw, admin)
}

pub fn now(clock: &Arc<SimClock>) -> chrono::DateTime<chrono::Utc> {
    clock.now()
}
