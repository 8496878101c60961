//! Live role × endpoint sweep against an in-process gateway.

use std::sync::atomic::{AtomicU32, Ordering};

use telecare_core::consult::{MessageKind, SessionMode};
use telecare_core::error::ApiError;
use telecare_core::gateway::{
    AlertQuery, Demographics, IngestBatch, RegisterRequest, ThresholdUpdate, VitalsQuery,
    WireReading,
};
use telecare_core::rbac::{Endpoint, Role};

use super::Fixture;

pub struct World {
    pub fx: Fixture,
    pub patient: (String, String),
    pub other_patient: (String, String),
    pub expert: (String, String),
    pub other_expert: (String, String),
    pub alert_id: String,
    pub blob: String,
    counter: AtomicU32,
}

impl World {
    pub fn new() -> Self {
        let fx = Fixture::new();
        let expert = fx.user(Role::MedicalExpert, "Sweep Expert", &[]);
        let patient = fx.user(Role::Patient, "Sweep Patient", &[]);
        let other_patient = fx.user(Role::Patient, "Sweep Other", &[]);
        let other_expert = fx.user(Role::MedicalExpert, "Sweep Other Expert", &[]);
        let now = super::now(&fx.clock);
        let r = fx
            .gw
            .ingest(
                Some(&patient.1),
                &IngestBatch {
                    device_id: "sweep".into(),
                    sent_at: now,
                    readings: vec![WireReading {
                        patient_id: patient.0.clone(),
                        kind: "HeartRate".into(),
                        value: 180.into(),
                        taken_at: now,
                        seq: 1,
                    }],
                },
            )
            .unwrap();
        let blob = fx.gw.put_blob(Some(&patient.1), b"x-ray").unwrap();
        Self {
            alert_id: r.alerts_raised[0].clone(),
            fx,
            patient,
            other_patient,
            expert,
            other_expert,
            blob,
            counter: AtomicU32::new(0),
        }
    }

    pub fn token(&self, role: Role) -> String {
        match role {
            Role::Patient => self.patient.1.clone(),
            Role::MedicalExpert => self.expert.1.clone(),
            Role::Administrator => self.fx.admin.clone(),
        }
    }

    /// A fresh session in which `role`'s caller is the responder; patient and
    /// expert open it for each other. For the administrator (never a
    /// participant) a patient–expert session is returned.
    fn session_for(&self, role: Role, accept: bool) -> String {
        let (opener, responder) = match role {
            Role::Patient => (&self.expert, &self.patient),
            _ => (&self.patient, &self.expert),
        };
        let s = self
            .fx
            .gw
            .open_session(Some(&opener.1), &responder.0, SessionMode::PatientPhysician)
            .unwrap();
        if accept {
            self.fx
                .gw
                .accept_session(Some(&responder.1), &s.id)
                .unwrap();
        }
        s.id
    }

    /// The caller's own record for patients; any patient for staff.
    fn target_patient(&self) -> String {
        self.patient.0.clone()
    }

    /// Calls `endpoint` as `role` with the most favourable arguments the role
    /// could legitimately use.
    pub fn call(&self, role: Role, endpoint: Endpoint) -> Result<(), ApiError> {
        let t = self.token(role);
        let tok = Some(t.as_str());
        let gw = &self.fx.gw;
        let pid = self.target_patient();
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        match endpoint {
            Endpoint::Register => gw
                .register(
                    tok,
                    RegisterRequest {
                        role: Role::Patient,
                        demographics: Demographics {
                            name: format!("Sweep Registrant {n}"),
                            ..Default::default()
                        },
                        secret: None,
                    },
                )
                .map(drop),
            Endpoint::IngestVitals => {
                let now = super::now(&self.fx.clock);
                gw.ingest(
                    tok,
                    &IngestBatch {
                        device_id: format!("sweep-{n}"),
                        sent_at: now,
                        readings: vec![WireReading {
                            patient_id: pid,
                            kind: "HeartRate".into(),
                            value: 70.into(),
                            taken_at: now,
                            seq: 1,
                        }],
                    },
                )
                .map(drop)
            }
            Endpoint::QueryVitals => gw
                .query_vitals(tok, &pid, &VitalsQuery::default())
                .map(drop),
            Endpoint::GetThresholds => gw.get_thresholds(tok, &pid).map(drop),
            Endpoint::PutThresholds => gw
                .update_thresholds(tok, &pid, &ThresholdUpdate::default())
                .map(drop),
            Endpoint::ListAlerts => gw.list_alerts(tok, &AlertQuery::default()).map(drop),
            Endpoint::AckAlert => match gw.acknowledge(tok, &self.alert_id) {
                Err(ApiError::InvalidTransition(_)) => Ok(()),
                r => r.map(drop),
            },
            Endpoint::OpenSession => {
                let target = match role {
                    Role::Patient => self.expert.0.clone(),
                    _ => self.patient.0.clone(),
                };
                gw.open_session(tok, &target, SessionMode::PatientPhysician)
                    .map(drop)
            }
            Endpoint::ListSessions => gw.list_sessions(tok).map(drop),
            Endpoint::AcceptSession => gw
                .accept_session(tok, &self.session_for(role, false))
                .map(drop),
            Endpoint::PostMessage => gw
                .post_message(
                    tok,
                    &self.session_for(role, true),
                    MessageKind::Text,
                    "hi".into(),
                )
                .map(drop),
            Endpoint::FetchEvents => gw
                .fetch_events(
                    tok,
                    &self.session_for(role, true),
                    -1,
                    Some(std::time::Duration::ZERO),
                )
                .map(drop),
            Endpoint::TerminateSession => gw
                .terminate_session(tok, &self.session_for(role, false))
                .map(drop),
            Endpoint::PutBlob => gw.put_blob(tok, format!("blob {n}").as_bytes()).map(drop),
            Endpoint::GetBlob => gw.get_blob(tok, &self.blob).map(drop),
            Endpoint::ReliabilityMetrics => gw.reliability_metrics(tok).map(drop),
            Endpoint::ListPatients => gw.list_patients(tok).map(drop),
        }
    }

    /// Calls an `own`/`participant` endpoint on someone else's record or session.
    pub fn call_foreign(&self, role: Role, endpoint: Endpoint) -> Result<(), ApiError> {
        let t = self.token(role);
        let tok = Some(t.as_str());
        let gw = &self.fx.gw;
        let other = &self.other_patient;
        // Neither the sweep patient nor the sweep expert takes part.
        let foreign_session = || {
            gw.open_session(
                Some(&other.1),
                &self.other_expert.0,
                SessionMode::PatientPhysician,
            )
            .unwrap()
            .id
        };
        let now = super::now(&self.fx.clock);
        match endpoint {
            Endpoint::IngestVitals => gw
                .ingest(
                    tok,
                    &IngestBatch {
                        device_id: "foreign".into(),
                        sent_at: now,
                        readings: vec![WireReading {
                            patient_id: other.0.clone(),
                            kind: "HeartRate".into(),
                            value: 70.into(),
                            taken_at: now,
                            seq: 1,
                        }],
                    },
                )
                .map(drop),
            Endpoint::QueryVitals => gw
                .query_vitals(tok, &other.0, &VitalsQuery::default())
                .map(drop),
            Endpoint::GetThresholds => gw.get_thresholds(tok, &other.0).map(drop),
            Endpoint::ListAlerts => gw
                .list_alerts(
                    tok,
                    &AlertQuery {
                        state: None,
                        patient_id: Some(other.0.clone()),
                    },
                )
                .map(drop),
            Endpoint::AcceptSession => gw.accept_session(tok, &foreign_session()).map(drop),
            Endpoint::PostMessage => gw
                .post_message(tok, &foreign_session(), MessageKind::Text, "x".into())
                .map(drop),
            Endpoint::FetchEvents => gw
                .fetch_events(tok, &foreign_session(), -1, Some(std::time::Duration::ZERO))
                .map(drop),
            Endpoint::TerminateSession => gw.terminate_session(tok, &foreign_session()).map(drop),
            other => panic!("{other:?} is not record- or session-scoped"),
        }
    }
}

pub fn role_columns() -> [Role; 3] {
    [Role::Patient, Role::MedicalExpert, Role::Administrator]
}

pub fn endpoint_named(name: &str) -> Endpoint {
    Endpoint::ALL
        .into_iter()
        .find(|e| format!("{e:?}") == name)
        .unwrap_or_else(|| panic!("documented endpoint {name} does not exist"))
}

/// Every disagreement between the documented table and (a) the permission
/// matrix, (b) live calls. Empty means the sweep passed.
pub fn rbac_mismatches() -> Vec<String> {
    use telecare_core::rbac::{access, Access};
    let rows = super::doc::rbac_rows();
    let world = World::new();
    let mut bad = Vec::new();
    if rows.len() != Endpoint::ALL.len() {
        bad.push(format!(
            "documented {} endpoints, implemented {}",
            rows.len(),
            Endpoint::ALL.len()
        ));
    }
    for (name, cells) in &rows {
        let ep = endpoint_named(name);
        for (role, cell) in role_columns().into_iter().zip(cells.iter()) {
            let expected = match cell.as_str() {
                "allow" => Access::Allow,
                "own" => Access::OwnRecord,
                "participant" => Access::Participant,
                "deny" => Access::Deny,
                other => panic!("unknown cell {other}"),
            };
            if access(role, ep) != expected {
                bad.push(format!(
                    "matrix {role}/{name}: {:?} != documented {cell}",
                    access(role, ep)
                ));
            }
            let live = world.call(role, ep);
            let denied = matches!(live, Err(ApiError::Forbidden(_)));
            if denied != (expected == Access::Deny) {
                bad.push(format!(
                    "live {role}/{name}: {live:?} but documented {cell}"
                ));
            }
            if matches!(expected, Access::OwnRecord | Access::Participant) {
                let foreign = world.call_foreign(role, ep);
                if !matches!(foreign, Err(ApiError::Forbidden(_))) {
                    bad.push(format!(
                        "live {role}/{name} on foreign target: {foreign:?}, expected forbidden"
                    ));
                }
            }
        }
    }
    bad
}
