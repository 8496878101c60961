use std::collections::BTreeMap;

use serde::Serialize;
use telecare_core::client::{HttpClient, HttpTransport};
use telecare_core::clock::Clock;
use telecare_core::config::{FleetConfig, FleetPatient, ScaledClock};
use telecare_core::gateway::{Demographics, RegisterRequest};
use telecare_core::rbac::Role;
use telecare_core::sim::{run_fleet, Hub, TransmissionReport};

use crate::exit::{print_json, CliError, Status};
use crate::SimulateArgs;

#[derive(Serialize)]
struct PatientSummary {
    patient_id: String,
    generated: u64,
    sent: u64,
    evicted: u64,
    still_buffered: u64,
    retries: u64,
    alerts_raised: u64,
    conserved: bool,
    halted: Option<String>,
}

impl From<&TransmissionReport> for PatientSummary {
    fn from(r: &TransmissionReport) -> Self {
        Self {
            patient_id: r.patient_id.clone(),
            generated: r.generated,
            sent: r.sent,
            evicted: r.evicted,
            still_buffered: r.still_buffered,
            retries: r.retries,
            alerts_raised: r.alerts_raised,
            conserved: r.conserved(),
            halted: r.halted.clone(),
        }
    }
}

#[derive(Serialize)]
struct FleetSummary {
    gateway: String,
    ticks: u64,
    patients: Vec<PatientSummary>,
}

/// Resolves a fleet entry to credentials, registering it when needed.
fn credentials(admin: Option<&HttpClient>, p: &FleetPatient) -> Result<(String, String), String> {
    if let (Some(id), Some(secret)) = (&p.id, &p.secret) {
        return Ok((id.clone(), secret.clone()));
    }
    let admin = admin.ok_or("no administrator session to register with")?;
    let req = RegisterRequest {
        role: Role::Patient,
        demographics: Demographics {
            name: p.name.clone().unwrap_or_default(),
            date_of_birth: p.date_of_birth.clone(),
            phone: None,
            assigned_staff: p.assigned_staff.clone(),
        },
        secret: p.secret.clone(),
    };
    let resp = admin
        .register(&req)
        .map_err(|e| format!("registration failed: {e}"))?;
    Ok((resp.id, resp.secret))
}

fn halted(patient_id: String, reason: String) -> TransmissionReport {
    TransmissionReport {
        patient_id,
        halted: Some(reason),
        ..Default::default()
    }
}

pub fn run(args: SimulateArgs, json: bool) -> Result<Status, CliError> {
    let mut fleet = FleetConfig::load(&args.config).map_err(|e| CliError::Input(e.to_string()))?;
    if let Some(d) = args.duration {
        fleet.duration_secs = d.as_secs();
    }
    if !(args.time_scale.is_finite() && args.time_scale > 0.0) {
        return Err(CliError::Input(format!(
            "time scale must be positive, got {}",
            args.time_scale
        )));
    }
    if fleet.patients.is_empty() {
        let summary = FleetSummary {
            gateway: args.gateway,
            ticks: 0,
            patients: Vec::new(),
        };
        if json {
            print_json(&summary)?;
        } else {
            println!("no patients configured");
        }
        return Ok(Status::Clean);
    }
    let probe = HttpClient::new(args.gateway.clone());
    let ack = probe
        .health()
        .map_err(|e| CliError::Runtime(format!("cannot reach {}: {e}", args.gateway)))?;
    let origin = fleet.start.unwrap_or(ack.server_time);
    let clock = ScaledClock::new(origin, args.time_scale);

    let admin = match &fleet.admin {
        Some(creds) => {
            let mut c = HttpClient::new(args.gateway.clone());
            c.login(&creds.id, &creds.secret)
                .map_err(|e| CliError::Runtime(format!("administrator login failed: {e}")))?;
            Some(c)
        }
        None => None,
    };

    // Patients whose credentials fail are reported as halted; the rest still run.
    let mut hubs = Vec::new();
    let mut order = Vec::new();
    let mut failed: BTreeMap<usize, TransmissionReport> = BTreeMap::new();
    let start = clock.now();
    for (i, p) in fleet.patients.iter().enumerate() {
        let label =
            p.id.clone()
                .or_else(|| p.name.clone())
                .unwrap_or_else(|| format!("#{i}"));
        let (id, secret) = match credentials(admin.as_ref(), p) {
            Ok(c) => c,
            Err(reason) => {
                failed.insert(i, halted(label, reason));
                continue;
            }
        };
        let mut client = HttpClient::new(args.gateway.clone());
        if let Err(e) = client.login(&id, &secret) {
            failed.insert(i, halted(id, format!("login failed: {e}")));
            continue;
        }
        let profile = p.profile(&id).map_err(|e| CliError::Input(e.to_string()))?;
        hubs.push(Hub::new(
            profile,
            fleet.hub.clone(),
            start,
            Box::new(HttpTransport::new(client)),
        ));
        order.push(i);
    }

    let ticks = fleet.ticks();
    let ran = run_fleet(hubs, ticks, fleet.hub.sample_interval_secs, &clock);
    let mut by_index: BTreeMap<usize, TransmissionReport> = order.into_iter().zip(ran).collect();
    by_index.append(&mut failed);
    let reports: Vec<TransmissionReport> = by_index.into_values().collect();

    let clean = reports.iter().all(|r| r.halted.is_none() && r.conserved());
    let summary = FleetSummary {
        gateway: args.gateway,
        ticks,
        patients: reports.iter().map(PatientSummary::from).collect(),
    };
    if json {
        print_json(&summary)?;
    } else {
        println!(
            "{:<16} {:>9} {:>6} {:>7} {:>8} {:>7} {:>6}  status",
            "patient", "generated", "sent", "evicted", "buffered", "retries", "alerts"
        );
        for p in &summary.patients {
            let status = match (&p.halted, p.conserved) {
                (Some(reason), _) => format!("halted: {reason}"),
                (None, false) => "count mismatch".to_string(),
                (None, true) => "ok".to_string(),
            };
            println!(
                "{:<16} {:>9} {:>6} {:>7} {:>8} {:>7} {:>6}  {status}",
                p.patient_id,
                p.generated,
                p.sent,
                p.evicted,
                p.still_buffered,
                p.retries,
                p.alerts_raised
            );
        }
    }
    Ok(if clean {
        Status::Clean
    } else {
        Status::Findings
    })
}
