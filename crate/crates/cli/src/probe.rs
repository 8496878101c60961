use std::sync::Arc;

use serde::Serialize;
use telecare_core::client::{HttpClient, HttpHealthTarget};
use telecare_core::clock::{SharedClock, SystemClock};
use telecare_core::config::ScaledClock;
use telecare_core::reliability::{self, ReliabilityReport};

use crate::exit::{print_json, CliError, Status};
use crate::ProbeArgs;

#[derive(Serialize)]
struct ProbeSummary {
    output: String,
    probes: usize,
    report: ReliabilityReport,
}

/// Simulated time when `time_scale != 1`, anchored at the gateway's clock so
/// probe timestamps line up with its outage windows.
pub fn clock_for(target: &str, time_scale: f64) -> Result<SharedClock, CliError> {
    if !(time_scale.is_finite() && time_scale > 0.0) {
        return Err(CliError::Input(format!(
            "time scale must be positive, got {time_scale}"
        )));
    }
    if time_scale == 1.0 {
        return Ok(Arc::new(SystemClock));
    }
    let ack = HttpClient::new(target)
        .health()
        .map_err(|e| CliError::Runtime(format!("cannot reach {target}: {e}")))?;
    Ok(Arc::new(ScaledClock::new(ack.server_time, time_scale)))
}

pub fn run(args: ProbeArgs, json: bool) -> Result<Status, CliError> {
    if args.interval.as_secs() == 0 {
        return Err(CliError::Input(
            "interval must be at least one second".into(),
        ));
    }
    if args.duration < args.interval {
        return Err(CliError::Input(
            "duration must cover at least one interval".into(),
        ));
    }
    let clock = clock_for(&args.target, args.time_scale)?;
    let target = HttpHealthTarget::new(args.target.clone());
    let log = reliability::probe_run(
        &target,
        clock.as_ref(),
        args.interval,
        args.duration,
        args.timeout,
    );
    std::fs::write(&args.output, log.to_text())
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.output.display())))?;
    let report = reliability::analyze(&log).map_err(|e| CliError::Input(e.to_string()))?;
    if json {
        print_json(&ProbeSummary {
            output: args.output.display().to_string(),
            probes: log.entries.len(),
            report,
        })?;
    } else {
        println!(
            "{} probes written to {}: {} failures, {:.0} min down, availability {:.2}%",
            log.entries.len(),
            args.output.display(),
            report.failures,
            report.downtime_minutes,
            report.availability_percent
        );
    }
    Ok(Status::Clean)
}
