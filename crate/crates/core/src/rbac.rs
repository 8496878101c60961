//! Roles, principals, session tokens and the role/endpoint permission matrix.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Patient,
    MedicalExpert,
    Administrator,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Patient, Role::MedicalExpert, Role::Administrator];

    pub fn is_staff(self) -> bool {
        matches!(self, Role::MedicalExpert | Role::Administrator)
    }

    pub fn id_prefix(self) -> char {
        match self {
            Role::Patient => 'P',
            Role::MedicalExpert => 'E',
            Role::Administrator => 'A',
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Patient => "Patient",
            Role::MedicalExpert => "MedicalExpert",
            Role::Administrator => "Administrator",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown role `{s}`"))
    }
}

/// Every protected operation the gateway exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    Register,
    IngestVitals,
    QueryVitals,
    GetThresholds,
    PutThresholds,
    ListAlerts,
    AckAlert,
    OpenSession,
    ListSessions,
    AcceptSession,
    PostMessage,
    FetchEvents,
    TerminateSession,
    PutBlob,
    GetBlob,
    ReliabilityMetrics,
    ListPatients,
}

impl Endpoint {
    pub const ALL: [Endpoint; 17] = [
        Endpoint::Register,
        Endpoint::IngestVitals,
        Endpoint::QueryVitals,
        Endpoint::GetThresholds,
        Endpoint::PutThresholds,
        Endpoint::ListAlerts,
        Endpoint::AckAlert,
        Endpoint::OpenSession,
        Endpoint::ListSessions,
        Endpoint::AcceptSession,
        Endpoint::PostMessage,
        Endpoint::FetchEvents,
        Endpoint::TerminateSession,
        Endpoint::PutBlob,
        Endpoint::GetBlob,
        Endpoint::ReliabilityMetrics,
        Endpoint::ListPatients,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Access {
    Deny,
    Allow,
    /// Allowed only on the caller's own patient record.
    OwnRecord,
    /// Allowed only for the two participants of the addressed session.
    Participant,
}

impl Access {
    pub fn is_deny(self) -> bool {
        self == Access::Deny
    }
}

/// The permission matrix. Any pair not listed is denied.
pub fn access(role: Role, endpoint: Endpoint) -> Access {
    use Access::*;
    use Endpoint::*;
    use Role::*;
    match (role, endpoint) {
        (Administrator, Register) => Allow,

        (Patient, IngestVitals) => OwnRecord,

        (Patient, QueryVitals | GetThresholds | ListAlerts) => OwnRecord,
        (MedicalExpert | Administrator, QueryVitals | GetThresholds | ListAlerts) => Allow,

        (MedicalExpert | Administrator, PutThresholds | AckAlert) => Allow,

        (Patient | MedicalExpert, OpenSession | ListSessions | PutBlob | GetBlob) => Allow,
        (Patient | MedicalExpert, AcceptSession | PostMessage | FetchEvents | TerminateSession) => {
            Participant
        }

        (MedicalExpert | Administrator, ReliabilityMetrics | ListPatients) => Allow,

        _ => Deny,
    }
}

pub fn hash_secret(salt: &str, secret: &str) -> String {
    let mut h = Sha256::new();
    h.update(salt.as_bytes());
    h.update([0u8]);
    h.update(secret.as_bytes());
    let mut digest = h.finalize();
    // Key stretching; cheap enough for interactive logins.
    for _ in 0..4096 {
        let mut h = Sha256::new();
        h.update(digest);
        h.update(secret.as_bytes());
        digest = h.finalize();
    }
    hex::encode(digest)
}

pub fn random_hex(bytes: usize) -> String {
    let mut buf = vec![0u8; bytes];
    rand::rng().fill_bytes(&mut buf);
    hex::encode(buf)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principal {
    pub id: String,
    pub role: Role,
}

#[derive(Debug, Clone)]
struct TokenEntry {
    principal: Principal,
    expires_at: DateTime<Utc>,
}

/// In-memory session credentials. Tokens do not survive a restart.
#[derive(Debug)]
pub struct TokenTable {
    lifetime: Duration,
    tokens: Mutex<HashMap<String, TokenEntry>>,
}

impl TokenTable {
    pub fn new(lifetime: std::time::Duration) -> Self {
        Self {
            lifetime: Duration::from_std(lifetime).expect("token lifetime in range"),
            tokens: Mutex::new(HashMap::new()),
        }
    }

    pub fn issue(&self, principal: Principal, now: DateTime<Utc>) -> (String, DateTime<Utc>) {
        let token = random_hex(32);
        let expires_at = now + self.lifetime;
        let mut tokens = self.tokens.lock();
        tokens.retain(|_, e| e.expires_at > now);
        tokens.insert(
            token.clone(),
            TokenEntry {
                principal,
                expires_at,
            },
        );
        (token, expires_at)
    }

    /// Expired tokens authorize nothing.
    pub fn resolve(&self, token: &str, now: DateTime<Utc>) -> Option<Principal> {
        let tokens = self.tokens.lock();
        tokens
            .get(token)
            .filter(|e| now < e.expires_at)
            .map(|e| e.principal.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_is_total_and_defaults_to_deny() {
        for role in Role::ALL {
            for ep in Endpoint::ALL {
                let _ = access(role, ep);
            }
        }
        assert_eq!(access(Role::Patient, Endpoint::Register), Access::Deny);
        assert_eq!(
            access(Role::Administrator, Endpoint::IngestVitals),
            Access::Deny
        );
        assert_eq!(access(Role::Patient, Endpoint::PutThresholds), Access::Deny);
        assert_eq!(
            access(Role::Patient, Endpoint::QueryVitals),
            Access::OwnRecord
        );
        assert_eq!(
            access(Role::MedicalExpert, Endpoint::QueryVitals),
            Access::Allow
        );
    }

    #[test]
    fn tokens_expire() {
        let t = TokenTable::new(std::time::Duration::from_secs(60));
        let now = crate::clock::default_epoch();
        let p = Principal {
            id: "P-000001".into(),
            role: Role::Patient,
        };
        let (tok, exp) = t.issue(p.clone(), now);
        assert_eq!(exp, now + Duration::seconds(60));
        assert_eq!(t.resolve(&tok, now + Duration::seconds(59)), Some(p));
        assert_eq!(t.resolve(&tok, now + Duration::seconds(60)), None);
        assert_eq!(t.resolve("bogus", now), None);
    }

    #[test]
    fn secret_hash_is_salted_and_one_way() {
        let a = hash_secret("s1", "pw");
        assert_eq!(a, hash_secret("s1", "pw"));
        assert_ne!(a, hash_secret("s2", "pw"));
        assert!(!a.contains("pw"));
    }
}
