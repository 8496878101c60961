use std::path::{Path, PathBuf};

use telecare_core::reliability::{self, ProbeLog};
use telecare_core::survey;

use crate::exit::{print_json, CliError, Status};
use crate::ReportKind;

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn findings(count: usize) -> Status {
    if count == 0 {
        Status::Clean
    } else {
        Status::Findings
    }
}

pub fn run(kind: ReportKind, json: bool) -> Result<Status, CliError> {
    match kind {
        ReportKind::Reliability {
            log,
            reference,
            no_reference,
        } => reliability_report(log, reference, no_reference, json),
        ReportKind::Survey {
            dataset,
            composites,
        } => survey_report(dataset, composites, json),
    }
}

fn reliability_report(
    log: Option<PathBuf>,
    reference: Option<PathBuf>,
    no_reference: bool,
    json: bool,
) -> Result<Status, CliError> {
    let (log_text, origin) = match &log {
        Some(p) => (read(p)?, p.display().to_string()),
        None => (
            reliability::BUNDLED_EVALUATION_LOG.to_string(),
            "bundled evaluation log".to_string(),
        ),
    };
    let probe_log =
        ProbeLog::parse(&log_text).map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
    let reference_text = match (&reference, &log, no_reference) {
        (_, _, true) => None,
        (Some(p), _, _) => Some((read(p)?, p.display().to_string())),
        (None, None, false) => Some((
            reliability::BUNDLED_EVALUATION_REFERENCE.to_string(),
            "bundled reference".to_string(),
        )),
        (None, Some(_), false) => None,
    };
    let reference = reference_text
        .map(|(text, origin)| {
            reliability::parse_reference(&text)
                .map_err(|e| CliError::Input(format!("{origin}: {e}")))
        })
        .transpose()?;
    let report = reliability::full_report(&probe_log, reference.as_ref())
        .map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
    if json {
        print_json(&report)?;
    } else {
        print!("{}", reliability::render_text(&report));
    }
    Ok(findings(report.discrepancies.len()))
}

fn survey_report(
    dataset: Option<PathBuf>,
    composites: Option<PathBuf>,
    json: bool,
) -> Result<Status, CliError> {
    let (text, origin) = match &dataset {
        Some(p) => (read(p)?, p.display().to_string()),
        None => (
            survey::BUNDLED_QUESTIONNAIRE.to_string(),
            "bundled questionnaire".to_string(),
        ),
    };
    let items =
        survey::parse_dataset(&text).map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
    let specs = match &composites {
        Some(p) => survey::parse_composites(&read(p)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        None => survey::default_composites(),
    };
    let report =
        survey::analyze(&items, &specs).map_err(|e| CliError::Input(format!("{origin}: {e}")))?;
    if json {
        print_json(&report)?;
    } else {
        print!("{}", survey::render_text(&report));
    }
    Ok(findings(report.discrepancies.len()))
}
