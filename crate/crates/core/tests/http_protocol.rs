mod common;

use std::time::{Duration, Instant};

use reqwest::Method;
use serde_json::json;

use telecare_core::client::{HttpClient, HttpHealthTarget};
use telecare_core::consult::{MessageKind, SessionMode, SessionState};
use telecare_core::error::ApiError;
use telecare_core::gateway::{
    AlertQuery, BoundPair, Demographics, IngestBatch, RegisterRequest, ThresholdUpdate,
    VitalsQuery, WireReading,
};
use telecare_core::http::{spawn_server, HttpConfig, ServerHandle};
use telecare_core::rbac::Role;
use telecare_core::reliability::HealthTarget;
use telecare_core::vital::VitalKind;

struct Served {
    fx: common::Fixture,
    server: ServerHandle,
}

impl Served {
    fn new() -> Self {
        let fx = common::Fixture::new();
        let cfg = HttpConfig {
            outage_hang: Duration::from_millis(50),
            ..HttpConfig::default()
        };
        let server = spawn_server(fx.gw.clone(), "127.0.0.1:0".parse().unwrap(), cfg).unwrap();
        Self { fx, server }
    }

    fn client_for(&self, id: &str, secret: &str) -> HttpClient {
        let mut c = HttpClient::new(self.server.base_url());
        c.login(id, secret).unwrap();
        c
    }

    fn admin(&self) -> HttpClient {
        self.client_for(common::ADMIN_ID, common::ADMIN_SECRET)
    }

    /// Registers over HTTP and returns a logged-in client for the new user.
    fn user(&self, role: Role, name: &str, assigned: &[&str]) -> (String, HttpClient) {
        let r = self
            .admin()
            .register(&RegisterRequest {
                role,
                demographics: Demographics {
                    name: name.into(),
                    assigned_staff: assigned.iter().map(|s| s.to_string()).collect(),
                    ..Default::default()
                },
                secret: None,
            })
            .unwrap();
        let c = self.client_for(&r.id, &r.secret);
        (r.id, c)
    }
}

fn reading(
    pid: &str,
    kind: &str,
    value: i64,
    seq: u64,
    at: chrono::DateTime<chrono::Utc>,
) -> WireReading {
    WireReading {
        patient_id: pid.into(),
        kind: kind.into(),
        value: value.into(),
        taken_at: at,
        seq,
    }
}

fn error_code(body: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert!(
        v["message"].is_string(),
        "error body carries a message: {body}"
    );
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn health_and_login_round_trip() {
    let s = Served::new();
    let anon = HttpClient::new(s.server.base_url());
    assert!(anon.health().is_ok());
    let mut c = HttpClient::new(s.server.base_url());
    assert!(matches!(
        c.login(common::ADMIN_ID, "wrong"),
        Err(ApiError::Unauthorized)
    ));
    assert!(c.token().is_none());
    c.login(common::ADMIN_ID, common::ADMIN_SECRET).unwrap();
    assert!(c.token().is_some());
}

#[test]
fn ingest_query_alert_and_acknowledge_over_http() {
    let s = Served::new();
    let (eid, expert) = s.user(Role::MedicalExpert, "Dr Http", &[]);
    let (pid, patient) = s.user(Role::Patient, "Pat Http", &[&eid]);
    let t0 = common::now(&s.fx.clock);
    let batch = IngestBatch {
        device_id: "hub-1".into(),
        sent_at: t0,
        readings: vec![
            reading(&pid, "HeartRate", 72, 1, t0),
            reading(
                &pid,
                "SystolicBP",
                168,
                2,
                t0 + chrono::Duration::seconds(60),
            ),
        ],
    };
    let r = patient.ingest(&batch).unwrap();
    assert_eq!((r.accepted, r.duplicates, r.alerts_raised.len()), (2, 0, 1));
    let again = patient.ingest(&batch).unwrap();
    assert_eq!((again.accepted, again.duplicates), (0, 2));

    let page = expert.query_vitals(&pid, &VitalsQuery::default()).unwrap();
    assert_eq!(page.readings.len(), 2);
    let alerts = expert.list_alerts(&AlertQuery::default()).unwrap();
    assert_eq!(alerts.len(), 1);
    let acked = expert.acknowledge(&alerts[0].id).unwrap();
    assert_eq!(acked.acknowledged_by.as_deref(), Some(eid.as_str()));
    assert!(matches!(
        expert.acknowledge(&alerts[0].id),
        Err(ApiError::InvalidTransition(_))
    ));
}

#[test]
fn status_codes_and_error_bodies() {
    let s = Served::new();
    let (eid, expert) = s.user(Role::MedicalExpert, "Dr Codes", &[]);
    let (pid, patient) = s.user(Role::Patient, "Pat Codes", &[&eid]);
    let (other, _) = s.user(Role::Patient, "Pat Other", &[]);
    let anon = HttpClient::new(s.server.base_url());

    let (st, body) = anon.raw(Method::GET, "/api/alerts", None).unwrap();
    assert_eq!((st, error_code(&body).as_str()), (401, "unauthorized"));

    let (st, body) = patient
        .raw(Method::GET, &format!("/api/patients/{other}/vitals"), None)
        .unwrap();
    assert_eq!((st, error_code(&body).as_str()), (403, "forbidden"));

    let (st, body) = expert
        .raw(Method::GET, "/api/patients/P-999999/thresholds", None)
        .unwrap();
    assert_eq!((st, error_code(&body).as_str()), (404, "not_found"));

    let (st, body) = expert.raw(Method::GET, "/api/no/such/route", None).unwrap();
    assert_eq!((st, error_code(&body).as_str()), (404, "not_found"));

    let (st, body) = expert
        .raw(
            Method::PUT,
            &format!("/api/patients/{pid}/thresholds"),
            Some(json!({"bounds": {"HeartRate": {"low": 120, "high": 60}}})),
        )
        .unwrap();
    assert_eq!((st, error_code(&body).as_str()), (422, "invalid_bounds"));

    let url = format!("{}/api/vitals", s.server.base_url());
    let resp = reqwest::blocking::Client::new()
        .post(url)
        .bearer_auth(patient.token().unwrap())
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    assert_eq!(error_code(&resp.text().unwrap()), "malformed");

    let sid = patient
        .open_session(&eid, SessionMode::PatientPhysician)
        .unwrap()
        .id;
    expert.accept_session(&sid).unwrap();
    let huge = "x".repeat(telecare_core::consult::DEFAULT_PAYLOAD_CAP + 1);
    let (st, body) = patient
        .raw(
            Method::POST,
            &format!("/api/sessions/{sid}/messages"),
            Some(json!({"kind": "Text", "payload": huge})),
        )
        .unwrap();
    assert_eq!((st, error_code(&body).as_str()), (413, "payload_too_large"));
    let (st, body) = expert
        .raw(Method::POST, &format!("/api/sessions/{sid}/accept"), None)
        .unwrap();
    assert_eq!(
        (st, error_code(&body).as_str()),
        (409, "invalid_transition")
    );
    patient.terminate_session(&sid).unwrap();
    assert!(matches!(
        patient.post_message(&sid, MessageKind::Text, "late"),
        Err(ApiError::SessionClosed(_))
    ));
    let (st, _) = patient
        .raw(
            Method::POST,
            &format!("/api/sessions/{sid}/messages"),
            Some(json!({"kind": "Text", "payload": "late"})),
        )
        .unwrap();
    assert_eq!(st, 410);
}

#[test]
fn thresholds_round_trip_and_change_classification() {
    let s = Served::new();
    let (eid, expert) = s.user(Role::MedicalExpert, "Dr Bounds", &[]);
    let (pid, patient) = s.user(Role::Patient, "Pat Bounds", &[&eid]);
    let update = ThresholdUpdate {
        bounds: [(VitalKind::HeartRate, BoundPair { low: 40, high: 100 })].into(),
    };
    let view = expert.update_thresholds(&pid, &update).unwrap();
    assert_eq!((view.version, view.updated_by.as_str()), (1, eid.as_str()));
    assert_eq!(patient.get_thresholds(&pid).unwrap(), view);
    let t0 = common::now(&s.fx.clock);
    let r = patient
        .ingest(&IngestBatch {
            device_id: "hub".into(),
            sent_at: t0,
            readings: vec![reading(&pid, "HeartRate", 45, 1, t0)],
        })
        .unwrap();
    assert!(
        r.alerts_raised.is_empty(),
        "45 bpm is inside the patient's bounds"
    );
}

#[test]
fn blobs_round_trip_by_content_hash() {
    let s = Served::new();
    let (_, patient) = s.user(Role::Patient, "Pat Blob", &[]);
    let bytes: Vec<u8> = (0..=255u8).cycle().take(10_000).collect();
    let r1 = patient.put_blob(bytes.clone()).unwrap();
    let r2 = patient.put_blob(bytes.clone()).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.len(), 64);
    assert_eq!(patient.get_blob(&r1).unwrap(), bytes);
    assert!(matches!(
        patient.get_blob(&"f".repeat(64)),
        Err(ApiError::NotFound(_))
    ));
}

#[test]
fn session_long_poll_over_http() {
    let s = Served::new();
    let (eid, expert) = s.user(Role::MedicalExpert, "Dr Poll", &[]);
    let (_, patient) = s.user(Role::Patient, "Pat Poll", &[&eid]);
    let sid = patient
        .open_session(&eid, SessionMode::PatientPhysician)
        .unwrap()
        .id;
    assert_eq!(expert.list_sessions().unwrap()[0].id, sid);
    expert.accept_session(&sid).unwrap();
    let waiter = {
        let expert = expert.clone();
        let sid = sid.clone();
        std::thread::spawn(move || {
            expert
                .fetch_events(&sid, -1, Some(Duration::from_secs(4)))
                .unwrap()
        })
    };
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(
        patient
            .post_message(&sid, MessageKind::Text, "hello doctor")
            .unwrap(),
        0
    );
    let ev = waiter.join().unwrap();
    assert_eq!(ev.state, SessionState::Active);
    assert_eq!(ev.messages[0].payload, "hello doctor");
}

#[test]
fn outage_holds_then_answers_unavailable() {
    let s = Served::new();
    let (_, patient) = s.user(Role::Patient, "Pat Outage", &[]);
    s.fx.gw.faults().set_down(true);

    let started = Instant::now();
    assert!(matches!(
        patient.list_sessions(),
        Err(ApiError::Unavailable(_))
    ));
    assert!(started.elapsed() >= Duration::from_millis(45));

    let probe = HttpHealthTarget::new(s.server.base_url());
    assert!(!probe.check(Duration::from_secs(2)));
    assert!(
        !probe.check(Duration::from_millis(10)),
        "a probe that times out counts as down"
    );

    s.fx.gw.faults().set_down(false);
    assert!(probe.check(Duration::from_secs(2)));
    assert!(patient.list_sessions().is_ok());
}

#[test]
fn server_stops_cleanly() {
    let s = Served::new();
    let base = s.server.base_url();
    let Served { fx, server } = s;
    server.stop().unwrap();
    assert!(HttpClient::with_timeout(base, Duration::from_millis(500))
        .health()
        .is_err());
    drop(fx);
}
