//! End-to-end scenarios shared by the acceptance run and the focused tests.
//! Each returns a one-line summary on success and the reason on failure.

use std::collections::{BTreeMap, BTreeSet};

use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};

use telecare_core::client::{HttpClient, HttpHealthTarget};
use telecare_core::consult::{MessageKind, SessionMessage, SessionMode, SessionOp, SessionState};
use telecare_core::error::ApiError;
use telecare_core::gateway::{AlertQuery, Gateway, VitalsQuery};
use telecare_core::http::{spawn_server, HttpConfig, ServerHandle};
use telecare_core::notifier::Outcome;
use telecare_core::rbac::Role;
use telecare_core::reliability::{self, analyze, evaluation_day_outages, probe_run};
use telecare_core::sim::{
    generate_trace, run_fleet, Episode, Hub, HubConfig, InProcessTransport, PatientSimProfile,
    TransmissionReport,
};
use telecare_core::survey;
use telecare_core::vital::{classify, ThresholdPolicy, VitalKind};

use super::sessions::{session_mismatches, transcript_problems, SessionDriver, TranscriptSide};
use super::Fixture;

pub type Verdict = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn evaluation_availability() -> Verdict {
    let started = Instant::now();
    let log = reliability::bundled_evaluation_log();
    let reference = reliability::parse_reference(reliability::BUNDLED_EVALUATION_REFERENCE)
        .map_err(|e| e.to_string())?;
    let full = reliability::full_report(&log, Some(&reference)).map_err(|e| e.to_string())?;
    let _text = reliability::render_text(&full);
    let elapsed = started.elapsed();
    let o = &full.overall;
    ensure!(
        close(o.availability_percent, 99.65, 0.01),
        "availability {}",
        o.availability_percent
    );
    ensure!(o.uptime_minutes == 2870.0, "uptime {}", o.uptime_minutes);
    ensure!(
        o.downtime_minutes == 10.0,
        "downtime {}",
        o.downtime_minutes
    );
    ensure!(o.failures == 6, "failures {}", o.failures);
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "availability {:.2}%, uptime {} min, downtime {} min, {} failures in {:?}",
        o.availability_percent, o.uptime_minutes, o.downtime_minutes, o.failures, elapsed
    ))
}

pub fn reliability_formula() -> Verdict {
    let exact = reliability::reliability(6, 48.0)
        .map_err(|e| e.to_string())?
        .value;
    ensure!(exact == 0.875, "reliability(6, 48) = {exact}");
    let full = reliability::full_report(&reliability::bundled_evaluation_log(), None)
        .map_err(|e| e.to_string())?;
    let text = reliability::render_text(&full);
    ensure!(
        full.overall.reliability == 0.875,
        "report reliability {}",
        full.overall.reliability
    );
    ensure!(
        full.overall.reliability_rounded_rate == 0.9,
        "rounded {}",
        full.overall.reliability_rounded_rate
    );
    ensure!(
        text.lines()
            .any(|l| l.contains("note:") && l.contains("0.9")),
        "report does not flag the rounded figure"
    );
    for t in [1u64, 7, 24, 48, 1000] {
        let h = t as f64;
        let r0 = reliability::reliability(0, h)
            .map_err(|e| e.to_string())?
            .value;
        let rt = reliability::reliability(t, h)
            .map_err(|e| e.to_string())?
            .value;
        ensure!(r0 == 1.0 && rt == 0.0, "endpoints at T={t}: {r0}, {rt}");
    }
    Ok("reliability(6, 48) = 0.875; rounded-rate 0.9 flagged; endpoints 1.0 / 0.0".into())
}

pub fn survey_reproduction() -> Verdict {
    let started = Instant::now();
    let items = survey::parse_dataset(survey::BUNDLED_QUESTIONNAIRE).map_err(|e| e.to_string())?;
    let r = survey::analyze(&items, &survey::default_composites()).map_err(|e| e.to_string())?;
    let _text = survey::render_text(&r);
    let elapsed = started.elapsed();
    let matched: Vec<&str> = r
        .items
        .iter()
        .filter(|i| i.mean_matches_printed == Some(true))
        .map(|i| i.id.as_str())
        .collect();
    let flagged: Vec<&str> = r
        .items
        .iter()
        .filter(|i| i.mean_matches_printed == Some(false))
        .map(|i| i.id.as_str())
        .collect();
    ensure!(
        r.items.len() == 9 && matched.len() == 8,
        "{} of {} items match",
        matched.len(),
        r.items.len()
    );
    ensure!(flagged == ["Q8"], "flagged {flagged:?}");
    let q8 = r.items.iter().find(|i| i.id == "Q8").unwrap();
    ensure!(
        q8.mean == 4.18 && q8.printed_mean == Some(4.30),
        "Q8 {} vs {:?}",
        q8.mean,
        q8.printed_mean
    );
    let comp = |name: &str| {
        r.composites
            .iter()
            .find(|c| c.name == name)
            .map(|c| &c.as_printed)
    };
    let seu = comp("SEU").ok_or("no SEU composite")?;
    let sdr = comp("SDR").ok_or("no SDR composite")?;
    ensure!(
        close(seu.mean, 4.22, 0.005) && close(seu.percent_agreement, 90.67, 0.005),
        "SEU {seu:?}"
    );
    ensure!(
        close(sdr.mean, 4.20, 0.005) && close(sdr.percent_agreement, 88.0, 0.005),
        "SDR {sdr:?}"
    );
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!(
        "8/9 item means match, Q8 flagged ({:.2} vs 4.30), SEU ({:.2}, {:.2}%), SDR ({:.2}, {:.2}%) in {elapsed:?}",
        q8.mean, seu.mean, seu.percent_agreement, sdr.mean, sdr.percent_agreement
    ))
}

/// Three patients on one gateway, each assigned to one expert.
pub struct Fleet {
    pub fx: Fixture,
    pub expert: String,
    pub patients: Vec<(PatientSimProfile, String)>,
    pub config: HubConfig,
    pub start: DateTime<Utc>,
}

impl Fleet {
    pub fn new(episode_patient: Option<usize>) -> Self {
        let fx = Fixture::new();
        let (expert, _) = fx.user(Role::MedicalExpert, "Dr Fleet", &[]);
        let patients = (0..3)
            .map(|i| {
                let (pid, token) =
                    fx.user(Role::Patient, &format!("Fleet Patient {i}"), &[&expert]);
                let mut profile = PatientSimProfile::resting(pid, 1000 + i as u64);
                if episode_patient == Some(i) {
                    profile.episodes.push(Episode {
                        kind: VitalKind::SystolicBP,
                        start_tick: 3,
                        end_tick: 6,
                        low: 162,
                        high: 170,
                    });
                }
                (profile, token)
            })
            .collect();
        let start = super::now(&fx.clock);
        Self {
            fx,
            expert,
            patients,
            config: HubConfig::default(),
            start,
        }
    }

    pub fn run(&self, ticks: u64) -> Vec<TransmissionReport> {
        let hubs = self
            .patients
            .iter()
            .map(|(p, token)| {
                let transport = InProcessTransport::new(self.fx.gw.clone(), token.clone());
                Hub::new(
                    p.clone(),
                    self.config.clone(),
                    self.start,
                    Box::new(transport),
                )
            })
            .collect();
        run_fleet(
            hubs,
            ticks,
            self.config.sample_interval_secs,
            self.fx.clock.as_ref(),
        )
    }

    /// Every stored reading of `patient`, following cursors to the end.
    pub fn stored(
        &self,
        patient: &str,
    ) -> Result<Vec<telecare_core::vital::VitalReading>, ApiError> {
        let mut out = Vec::new();
        let mut q = VitalsQuery::default();
        loop {
            let page = self.fx.gw.query_vitals(Some(&self.fx.admin), patient, &q)?;
            if page.readings.is_empty() {
                return Ok(out);
            }
            out.extend(page.readings.into_iter().map(|r| r.reading));
            q.after = page.next_cursor;
        }
    }
}

pub fn end_to_end_alerting() -> Verdict {
    let started = Instant::now();
    let fleet = Fleet::new(Some(0));
    let ticks = 10;
    let reports = fleet.run(ticks);
    let gw: &Gateway = &fleet.fx.gw;
    ensure!(
        gw.wait_notifications_idle(Duration::from_secs(30)),
        "notifications did not settle"
    );

    let interval = fleet.config.sample_interval();
    let mut expected = BTreeSet::new();
    for (p, _) in &fleet.patients {
        for r in generate_trace(p, ticks, fleet.start, interval) {
            let c = classify(&r, &ThresholdPolicy::defaults(&p.patient_id))
                .map_err(|e| e.to_string())?;
            if !c.is_normal() {
                expected.insert((r.device_id.clone(), r.seq));
            }
        }
    }
    let alerts = gw
        .list_alerts(Some(&fleet.fx.admin), &AlertQuery::default())
        .map_err(|e| e.to_string())?;
    let raised: BTreeSet<(String, u64)> = alerts
        .iter()
        .map(|a| (a.device_id.clone(), a.seq))
        .collect();
    ensure!(
        !expected.is_empty(),
        "the episode produced no out-of-range readings"
    );
    ensure!(
        raised.len() == alerts.len(),
        "duplicate alerts for one reading"
    );
    ensure!(
        raised == expected,
        "alerts {raised:?} but offline classification gives {expected:?}"
    );
    let hub_alerts: u64 = reports.iter().map(|r| r.alerts_raised).sum();
    ensure!(
        hub_alerts == alerts.len() as u64,
        "hubs saw {hub_alerts} alerts, gateway holds {}",
        alerts.len()
    );

    let log = gw.notifier().log().map_err(|e| e.to_string())?;
    let mut delivered: BTreeMap<&str, usize> = BTreeMap::new();
    for rec in log
        .iter()
        .filter(|r| r.outcome == Outcome::Delivered && r.sink == "sms-sim")
    {
        *delivered.entry(rec.alert_id.as_str()).or_default() += 1;
    }
    for a in &alerts {
        ensure!(
            delivered.get(a.id.as_str()) == Some(&1),
            "alert {} has {:?} delivered SMS records",
            a.id,
            delivered.get(a.id.as_str())
        );
        let lag = (a.raised_at - a.taken_at)
            .to_std()
            .map_err(|_| format!("alert {} raised before its reading", a.id))?;
        ensure!(
            lag <= Duration::from_secs(fleet.config.transmit_interval_secs),
            "alert {} lag {lag:?}",
            a.id
        );
    }
    let outbox = fleet.fx.outbox_lines();
    ensure!(
        outbox.len() == alerts.len(),
        "{} SMS lines for {} alerts",
        outbox.len(),
        alerts.len()
    );
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!(
        "{} alerts == offline classification, one delivered SMS each, all within one transmit interval, in {elapsed:?}",
        alerts.len()
    ))
}

pub fn store_and_forward() -> Verdict {
    let fleet = Fleet::new(None);
    let outage_start = fleet.start + chrono::Duration::minutes(4);
    fleet
        .fx
        .gw
        .faults()
        .add_window(outage_start, outage_start + chrono::Duration::minutes(2));
    let ticks = 10;
    let reports = fleet.run(ticks);
    let mut total = 0;
    for (report, (profile, _)) in reports.iter().zip(&fleet.patients) {
        ensure!(
            report.conserved(),
            "{}: conservation broken: {report:?}",
            report.patient_id
        );
        ensure!(
            report.retries > 0,
            "{}: the outage was never hit",
            report.patient_id
        );
        ensure!(
            report.still_buffered == 0 && report.evicted == 0,
            "{}: {report:?}",
            report.patient_id
        );
        let stored = fleet
            .stored(&profile.patient_id)
            .map_err(|e| e.to_string())?;
        let mut by_device: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
        for r in &stored {
            by_device
                .entry(r.device_id.as_str())
                .or_default()
                .push(r.seq);
        }
        ensure!(
            by_device.len() == VitalKind::ALL.len(),
            "{}: devices {:?}",
            report.patient_id,
            by_device.keys()
        );
        for (device, seqs) in &by_device {
            let mut sorted = seqs.clone();
            sorted.sort_unstable();
            let want: Vec<u64> = (0..ticks).collect();
            ensure!(sorted == want, "{device}: stored seqs {sorted:?}");
        }
        ensure!(
            stored.len() as u64 == report.generated,
            "{}: stored {} of {}",
            report.patient_id,
            stored.len(),
            report.generated
        );
        total += stored.len();
    }
    Ok(format!(
        "2-minute outage: {total} readings across {} devices stored gap- and duplicate-free; sent + evicted + buffered = generated",
        reports.len() * VitalKind::ALL.len()
    ))
}

pub fn reliability_harness() -> Verdict {
    let fx = Fixture::new();
    let server = serve(&fx);
    let start = super::now(&fx.clock);
    let minute = chrono::Duration::minutes(1);
    let (mut injected, mut injected_down) = (0u64, 0u64);
    for (day, (_, spans)) in evaluation_day_outages().into_iter().enumerate() {
        for s in spans {
            let begin = start + minute * (day * 480 + s.start) as i32;
            fx.gw
                .faults()
                .add_window(begin, begin + minute * s.len as i32);
            injected += 1;
            injected_down += s.len as u64;
        }
    }
    let target = HttpHealthTarget::new(server.base_url());
    let log = probe_run(
        &target,
        fx.clock.as_ref(),
        Duration::from_secs(60),
        Duration::from_secs(48 * 3600),
        Duration::from_secs(2),
    );
    let r = analyze(&log).map_err(|e| e.to_string())?;
    let total = 48.0 * 60.0;
    let expected_avail =
        reliability::availability(total - injected_down as f64, injected_down as f64)
            .map_err(|e| e.to_string())?;
    ensure!(
        r.failures == injected,
        "recovered {} failures, injected {injected}",
        r.failures
    );
    ensure!(
        r.downtime_minutes == injected_down as f64,
        "recovered {} min down, injected {injected_down}",
        r.downtime_minutes
    );
    ensure!(
        close(r.availability_percent, expected_avail, 0.01),
        "availability {} vs {expected_avail}",
        r.availability_percent
    );
    drop(server);
    Ok(format!(
        "{} probes over HTTP: {} failures, {} min down, availability {:.2}% (injected {injected}, {injected_down} min)",
        log.entries.len(),
        r.failures,
        r.downtime_minutes,
        r.availability_percent
    ))
}

pub fn rbac_matrix() -> Verdict {
    let bad = super::sweep::rbac_mismatches();
    ensure!(bad.is_empty(), "{}", bad.join("; "));
    let w = super::sweep::World::new();
    let q = VitalsQuery::default();
    let cross =
        w.fx.gw
            .query_vitals(Some(&w.token(Role::Patient)), &w.other_patient.0, &q);
    ensure!(
        matches!(cross, Err(ApiError::Forbidden(_))),
        "patient read another patient's vitals: {cross:?}"
    );
    for role in [Role::MedicalExpert, Role::Administrator] {
        let r =
            w.fx.gw
                .query_vitals(Some(&w.token(role)), &w.other_patient.0, &q);
        ensure!(r.is_ok(), "{role} could not read a patient's vitals: {r:?}");
    }
    let rows = super::doc::rbac_rows().len();
    Ok(format!("{rows} endpoints × 3 roles match the documented table; cross-patient read denied, staff read allowed"))
}

/// Session operations over HTTP, with the responder performing every operation.
struct HttpSessions {
    initiator: HttpClient,
    responder: HttpClient,
    responder_id: String,
}

impl SessionDriver for HttpSessions {
    fn fresh(&self) -> String {
        self.initiator
            .open_session(&self.responder_id, SessionMode::PatientPhysician)
            .unwrap()
            .id
    }

    fn apply(&self, id: &str, op: SessionOp) -> Result<SessionState, ApiError> {
        let c = &self.responder;
        match op {
            SessionOp::Accept => c.accept_session(id).map(|s| s.state),
            SessionOp::Terminate => c.terminate_session(id).map(|s| s.state),
            SessionOp::Fetch => c
                .fetch_events(id, -1, Some(Duration::ZERO))
                .map(|e| e.state),
            SessionOp::Post => {
                c.post_message(id, MessageKind::Text, "hello")?;
                Ok(c.fetch_events(id, -1, Some(Duration::ZERO))?.state)
            }
        }
    }
}

struct HttpSide {
    client: HttpClient,
    who: String,
    session: String,
}

impl TranscriptSide for HttpSide {
    fn id(&self) -> &str {
        &self.who
    }

    fn post(&self, text: String) -> u64 {
        self.client
            .post_message(&self.session, MessageKind::Text, &text)
            .unwrap()
    }

    fn fetch(&self, after: i64) -> Vec<SessionMessage> {
        self.client
            .fetch_events(&self.session, after, Some(Duration::from_millis(500)))
            .unwrap()
            .messages
    }
}

/// Serves the fixture's gateway on an ephemeral port with a short outage hang.
pub fn serve(fx: &Fixture) -> ServerHandle {
    let cfg = HttpConfig {
        outage_hang: Duration::from_millis(20),
        ..HttpConfig::default()
    };
    spawn_server(fx.gw.clone(), "127.0.0.1:0".parse().unwrap(), cfg).unwrap()
}

pub fn session_state_machine() -> Verdict {
    let fx = Fixture::new();
    let server = serve(&fx);
    let (eid, esecret) = fx.register(Role::MedicalExpert, "Dr Session", &[]);
    let (pid, psecret) = fx.register(Role::Patient, "Pat Session", &[&eid]);
    let login = |id: &str, secret: &str| {
        let mut c = HttpClient::new(server.base_url());
        c.login(id, secret).map(|_| c)
    };
    let patient = login(&pid, &psecret).map_err(|e| e.to_string())?;
    let expert = login(&eid, &esecret).map_err(|e| e.to_string())?;

    let driver = HttpSessions {
        initiator: patient.clone(),
        responder: expert.clone(),
        responder_id: eid.clone(),
    };
    let bad = session_mismatches(&driver);
    ensure!(bad.is_empty(), "{}", bad.join("; "));
    let rows = super::doc::session_rows().len();

    let session = driver.fresh();
    expert.accept_session(&session).map_err(|e| e.to_string())?;
    let side = |client: &HttpClient, who: &str| HttpSide {
        client: client.clone(),
        who: who.to_string(),
        session: session.clone(),
    };
    let problems = transcript_problems(&side(&patient, &pid), &side(&expert, &eid), 100);
    ensure!(problems.is_empty(), "{}", problems.join("; "));
    Ok(format!(
        "{rows} states × 4 operations match the declared table over HTTP; 2 × 100 concurrent messages, identical transcripts"
    ))
}

pub type Scenario = (&'static str, fn() -> Verdict);

pub fn all() -> Vec<Scenario> {
    vec![
        (
            "availability-reproduction",
            evaluation_availability as fn() -> Verdict,
        ),
        ("reliability-formula", reliability_formula),
        ("survey-reproduction", survey_reproduction),
        ("end-to-end-alerting", end_to_end_alerting),
        ("store-and-forward", store_and_forward),
        ("reliability-harness-round-trip", reliability_harness),
        ("rbac-matrix", rbac_matrix),
        ("session-state-machine", session_state_machine),
    ]
}
