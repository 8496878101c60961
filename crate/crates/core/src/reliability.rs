//! Probe-based uptime measurement and the reliability/availability figures
//! derived from it.
//!
//! One probe attributes one interval of time to Up or Down. Failures are
//! Up→Down transitions (a log that opens Down counts one failure), so a
//! contiguous outage is one failure however long it lasts.

use std::fmt::Write as _;
use std::time::Duration;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;

pub const PROBELOG_HEADER: &str = "# telecare-probelog v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("test period must be positive, got {0} h")]
    InvalidPeriod(f64),
    #[error("uptime and downtime are both zero")]
    InvalidWindow,
    #[error("probe log is empty")]
    EmptyLog,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Rounds half away from zero to two decimals, the precision reports print.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityScore {
    pub value: f64,
    pub failure_rate: f64,
    /// Failure rate exceeded 1 per hour; `value` was clamped to 0.
    pub clamped: bool,
}

/// `1 - failures / period_hours`, unrounded.
pub fn reliability(
    failure_count: u64,
    period_hours: f64,
) -> Result<ReliabilityScore, MetricsError> {
    if !period_hours.is_finite() || period_hours <= 0.0 {
        return Err(MetricsError::InvalidPeriod(period_hours));
    }
    let rate = failure_count as f64 / period_hours;
    Ok(if rate > 1.0 {
        ReliabilityScore {
            value: 0.0,
            failure_rate: rate,
            clamped: true,
        }
    } else {
        ReliabilityScore {
            value: 1.0 - rate,
            failure_rate: rate,
            clamped: false,
        }
    })
}

/// Reliability computed with the failure rate first rounded to one decimal,
/// the way hand calculations commonly present it.
pub fn reliability_rounded_rate(
    failure_count: u64,
    period_hours: f64,
) -> Result<f64, MetricsError> {
    let s = reliability(failure_count, period_hours)?;
    let rate = (s.failure_rate * 10.0).round() / 10.0;
    Ok((1.0 - rate).max(0.0))
}

/// Exact availability percentage.
pub fn availability_exact(uptime_min: f64, downtime_min: f64) -> Result<f64, MetricsError> {
    let total = uptime_min + downtime_min;
    if total.is_nan() || total <= 0.0 {
        return Err(MetricsError::InvalidWindow);
    }
    Ok(uptime_min / total * 100.0)
}

/// Availability percentage rounded to two decimals.
pub fn availability(uptime_min: f64, downtime_min: f64) -> Result<f64, MetricsError> {
    availability_exact(uptime_min, downtime_min).map(round2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeOutcome {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub at: DateTime<Utc>,
    pub outcome: ProbeOutcome,
    /// Label of the segment (e.g. a test day) this probe opens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeLog {
    pub target: String,
    pub interval_secs: u64,
    pub entries: Vec<ProbeEntry>,
}

impl ProbeLog {
    pub fn new(target: impl Into<String>, interval: Duration) -> Self {
        Self {
            target: target.into(),
            interval_secs: interval.as_secs().max(1),
            entries: Vec::new(),
        }
    }

    pub fn interval_minutes(&self) -> f64 {
        self.interval_secs as f64 / 60.0
    }

    pub fn push(&mut self, at: DateTime<Utc>, outcome: ProbeOutcome) {
        self.entries.push(ProbeEntry {
            at,
            outcome,
            segment: None,
        });
    }

    /// Line-oriented text form:
    ///
    /// ```text
    /// # telecare-probelog v1
    /// # target: <label>
    /// # interval_seconds: <n>
    /// # segment: <label>            (optional, starts a segment at the next probe)
    /// <RFC 3339 timestamp> UP|DOWN
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{PROBELOG_HEADER}");
        let _ = writeln!(s, "# target: {}", self.target);
        let _ = writeln!(s, "# interval_seconds: {}", self.interval_secs);
        for e in &self.entries {
            if let Some(seg) = &e.segment {
                let _ = writeln!(s, "# segment: {seg}");
            }
            let outcome = match e.outcome {
                ProbeOutcome::Up => "UP",
                ProbeOutcome::Down => "DOWN",
            };
            let _ = writeln!(
                s,
                "{} {outcome}",
                e.at.to_rfc3339_opts(SecondsFormat::Millis, true)
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, MetricsError> {
        let err = |line: usize, message: String| MetricsError::Parse { line, message };
        let mut target = String::from("unknown");
        let mut interval: Option<u64> = None;
        let mut entries: Vec<ProbeEntry> = Vec::new();
        let mut pending_segment: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("target:") {
                    target = v.trim().to_string();
                } else if let Some(v) = comment.strip_prefix("interval_seconds:") {
                    let secs: u64 = v
                        .trim()
                        .parse()
                        .map_err(|e| err(n, format!("bad interval_seconds: {e}")))?;
                    if secs == 0 {
                        return Err(err(n, "interval_seconds must be at least 1".into()));
                    }
                    interval = Some(secs);
                } else if let Some(v) = comment.strip_prefix("interval_minutes:") {
                    let mins: u64 = v
                        .trim()
                        .parse()
                        .map_err(|e| err(n, format!("bad interval_minutes: {e}")))?;
                    if mins == 0 {
                        return Err(err(n, "interval_minutes must be at least 1".into()));
                    }
                    interval = Some(mins * 60);
                } else if let Some(v) = comment.strip_prefix("segment:") {
                    pending_segment = Some(v.trim().to_string());
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(ts), Some(outcome), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(
                    n,
                    format!("expected `<timestamp> UP|DOWN`, got `{line}`"),
                ));
            };
            let at = DateTime::parse_from_rfc3339(ts)
                .map_err(|e| err(n, format!("bad timestamp `{ts}`: {e}")))?
                .with_timezone(&Utc);
            let outcome = match outcome.to_ascii_uppercase().as_str() {
                "UP" => ProbeOutcome::Up,
                "DOWN" => ProbeOutcome::Down,
                other => return Err(err(n, format!("bad outcome `{other}`"))),
            };
            let Some(secs) = interval else {
                return Err(err(n, "probe before `# interval_seconds:` header".into()));
            };
            if let Some(prev) = entries.last() {
                let expected = prev.at + chrono::Duration::seconds(secs as i64);
                if at != expected {
                    return Err(err(
                        n,
                        format!(
                            "timestamp {ts} breaks the declared {secs}s spacing (expected {})",
                            expected.to_rfc3339_opts(SecondsFormat::Millis, true)
                        ),
                    ));
                }
            }
            entries.push(ProbeEntry {
                at,
                outcome,
                segment: pending_segment.take(),
            });
        }
        let interval_secs =
            interval.ok_or_else(|| err(0, "missing `# interval_seconds:` header".into()))?;
        Ok(Self {
            target,
            interval_secs,
            entries,
        })
    }

    /// Splits at segment markers. Probes before the first marker form an
    /// unlabeled leading segment.
    pub fn segments(&self) -> Vec<(String, ProbeLog)> {
        let mut out: Vec<(String, ProbeLog)> = Vec::new();
        for e in &self.entries {
            if e.segment.is_some() || out.is_empty() {
                let label = e.segment.clone().unwrap_or_else(|| "(unlabeled)".into());
                out.push((
                    label,
                    ProbeLog {
                        target: self.target.clone(),
                        interval_secs: self.interval_secs,
                        entries: Vec::new(),
                    },
                ));
            }
            let mut e = e.clone();
            e.segment = None;
            out.last_mut().unwrap().1.entries.push(e);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub target: String,
    pub period_hours: f64,
    pub uptime_minutes: f64,
    pub downtime_minutes: f64,
    pub failures: u64,
    pub mttr_minutes: f64,
    /// Absent when there were no failures.
    pub mtbf_minutes: Option<f64>,
    /// With no failures, uptime is a lower bound on the time between failures.
    pub mtbf_lower_bound_minutes: Option<f64>,
    pub reliability: f64,
    pub reliability_clamped: bool,
    pub reliability_rounded_rate: f64,
    pub availability_percent: f64,
    pub availability_exact: f64,
}

pub fn count_failures(log: &ProbeLog) -> u64 {
    let mut prev = ProbeOutcome::Up;
    let mut failures = 0;
    for e in &log.entries {
        if prev == ProbeOutcome::Up && e.outcome == ProbeOutcome::Down {
            failures += 1;
        }
        prev = e.outcome;
    }
    failures
}

pub fn analyze(log: &ProbeLog) -> Result<ReliabilityReport, MetricsError> {
    if log.entries.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let step = log.interval_minutes();
    let up = log
        .entries
        .iter()
        .filter(|e| e.outcome == ProbeOutcome::Up)
        .count() as f64;
    let down = log.entries.len() as f64 - up;
    let uptime = up * step;
    let downtime = down * step;
    let failures = count_failures(log);
    let period_hours = (uptime + downtime) / 60.0;
    let score = reliability(failures, period_hours)?;
    let (mttr, mtbf, mtbf_lb) = if failures == 0 {
        (0.0, None, Some(uptime))
    } else {
        (
            downtime / failures as f64,
            Some(uptime / failures as f64),
            None,
        )
    };
    Ok(ReliabilityReport {
        target: log.target.clone(),
        period_hours,
        uptime_minutes: uptime,
        downtime_minutes: downtime,
        failures,
        mttr_minutes: mttr,
        mtbf_minutes: mtbf,
        mtbf_lower_bound_minutes: mtbf_lb,
        reliability: score.value,
        reliability_clamped: score.clamped,
        reliability_rounded_rate: reliability_rounded_rate(failures, period_hours)?,
        availability_percent: availability(uptime, downtime)?,
        availability_exact: availability_exact(uptime, downtime)?,
    })
}

/// An outage in probe-index space: probes `[start, start + len)` are Down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutageSpan {
    pub start: usize,
    pub len: usize,
}

/// Builds a log of `probes` entries with the given outages.
pub fn synthesize(
    target: &str,
    start: DateTime<Utc>,
    interval: Duration,
    probes: usize,
    outages: &[OutageSpan],
) -> ProbeLog {
    let mut log = ProbeLog::new(target, interval);
    let step = chrono::Duration::seconds(log.interval_secs as i64);
    for i in 0..probes {
        let down = outages.iter().any(|o| i >= o.start && i < o.start + o.len);
        log.push(
            start + step * i as i32,
            if down {
                ProbeOutcome::Down
            } else {
                ProbeOutcome::Up
            },
        );
    }
    log
}

/// Outage placement for the six 8-hour test days of the reference
/// evaluation, as (day label, outages within the day in probe minutes).
pub fn evaluation_day_outages() -> Vec<(&'static str, Vec<OutageSpan>)> {
    let o = |start, len| OutageSpan { start, len };
    vec![
        ("Day 1", vec![o(200, 1)]),
        ("Day 2", vec![o(300, 2)]),
        ("Day 3", vec![o(120, 2), o(360, 2)]),
        ("Day 4", vec![o(240, 2)]),
        ("Day 5", vec![o(400, 1)]),
        ("Day 6", vec![]),
    ]
}

/// 48 one-minute-probe hours reproducing the reference uptime table:
/// 2870 minutes up, 10 down, 6 failures, one segment per day.
pub fn evaluation_equivalent_log() -> ProbeLog {
    let start = crate::clock::default_epoch();
    let mut log = ProbeLog::new("telecare-gateway", Duration::from_secs(60));
    for (d, (label, outages)) in evaluation_day_outages().into_iter().enumerate() {
        let day_start = start + chrono::Duration::hours(8 * d as i64);
        let mut day = synthesize("", day_start, Duration::from_secs(60), 480, &outages);
        day.entries[0].segment = Some(label.to_string());
        log.entries.extend(day.entries);
    }
    log
}

pub const BUNDLED_EVALUATION_LOG: &str = include_str!("../data/evaluation-probelog.txt");
pub const BUNDLED_EVALUATION_REFERENCE: &str = include_str!("../data/evaluation-reference.tsv");

pub fn bundled_evaluation_log() -> ProbeLog {
    ProbeLog::parse(BUNDLED_EVALUATION_LOG).expect("bundled probe log parses")
}

/// A row of a published uptime table, used to flag mismatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: String,
    pub period_hours: f64,
    pub uptime: f64,
    pub downtime: f64,
    pub failures: u64,
    pub mttr: f64,
    pub mtbf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub rows: Vec<ReferenceRow>,
    /// Reliability as printed alongside the table, if any.
    pub reliability: Option<f64>,
    pub availability: Option<f64>,
}

/// Tab-separated: `label hours uptime downtime failures mttr mtbf`, plus
/// optional `reliability<TAB>x` and `availability<TAB>x` lines.
pub fn parse_reference(text: &str) -> Result<ReferenceTable, MetricsError> {
    let mut rows = Vec::new();
    let mut rel = None;
    let mut avail = None;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let num = |s: &str| -> Result<f64, MetricsError> {
            s.parse::<f64>().map_err(|e| MetricsError::Parse {
                line: n,
                message: format!("bad number `{s}`: {e}"),
            })
        };
        match cols.as_slice() {
            ["reliability", v] => rel = Some(num(v)?),
            ["availability", v] => avail = Some(num(v)?),
            [label, h, up, down, f, mttr, mtbf] => rows.push(ReferenceRow {
                label: label.to_string(),
                period_hours: num(h)?,
                uptime: num(up)?,
                downtime: num(down)?,
                failures: num(f)? as u64,
                mttr: num(mttr)?,
                mtbf: num(mtbf)?,
            }),
            _ => {
                return Err(MetricsError::Parse {
                    line: n,
                    message: format!("expected 7 tab-separated columns, got {}", cols.len()),
                })
            }
        }
    }
    Ok(ReferenceTable {
        rows,
        reliability: rel,
        availability: avail,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub row: String,
    pub field: String,
    pub computed: f64,
    pub printed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub label: String,
    pub report: ReliabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReliabilityReport {
    pub overall: ReliabilityReport,
    pub segments: Vec<SegmentReport>,
    pub discrepancies: Vec<Discrepancy>,
}

const TOLERANCE: f64 = 0.005;

fn compare(out: &mut Vec<Discrepancy>, row: &str, field: &str, computed: f64, printed: f64) {
    if (computed - printed).abs() > TOLERANCE {
        out.push(Discrepancy {
            row: row.to_string(),
            field: field.to_string(),
            computed,
            printed,
        });
    }
}

fn compare_row(out: &mut Vec<Discrepancy>, r: &ReliabilityReport, row: &ReferenceRow) {
    let l = row.label.as_str();
    compare(out, l, "period_hours", r.period_hours, row.period_hours);
    compare(out, l, "uptime", r.uptime_minutes, row.uptime);
    compare(out, l, "downtime", r.downtime_minutes, row.downtime);
    compare(out, l, "failures", r.failures as f64, row.failures as f64);
    compare(out, l, "mttr", round2(r.mttr_minutes), row.mttr);
    // With no failures a printed MTBF equal to the uptime is the lower-bound convention.
    let mtbf = r.mtbf_minutes.or(r.mtbf_lower_bound_minutes).unwrap_or(0.0);
    compare(out, l, "mtbf", round2(mtbf), row.mtbf);
}

/// Overall and per-segment analysis, compared against a reference table when given.
pub fn full_report(
    log: &ProbeLog,
    reference: Option<&ReferenceTable>,
) -> Result<FullReliabilityReport, MetricsError> {
    let overall = analyze(log)?;
    let segments: Vec<SegmentReport> = if log.entries.iter().any(|e| e.segment.is_some()) {
        log.segments()
            .into_iter()
            .map(|(label, seg)| analyze(&seg).map(|report| SegmentReport { label, report }))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let mut discrepancies = Vec::new();
    if let Some(reference) = reference {
        for row in &reference.rows {
            if let Some(seg) = segments.iter().find(|s| s.label == row.label) {
                compare_row(&mut discrepancies, &seg.report, row);
            } else if row.label.eq_ignore_ascii_case("overall") {
                compare_row(&mut discrepancies, &overall, row);
            } else {
                discrepancies.push(Discrepancy {
                    row: row.label.clone(),
                    field: "missing segment".into(),
                    computed: f64::NAN,
                    printed: row.period_hours,
                });
            }
        }
        if let Some(r) = reference.reliability {
            compare(
                &mut discrepancies,
                "overall",
                "reliability",
                overall.reliability,
                r,
            );
        }
        if let Some(a) = reference.availability {
            compare(
                &mut discrepancies,
                "overall",
                "availability",
                overall.availability_percent,
                a,
            );
        }
    }
    Ok(FullReliabilityReport {
        overall,
        segments,
        discrepancies,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

pub fn render_text(r: &FullReliabilityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Reliability report for {}", r.overall.target);
    let _ = writeln!(
        s,
        "{:<10} {:>8} {:>10} {:>10} {:>9} {:>9} {:>10} {:>8} {:>8}",
        "segment", "hours", "uptime", "downtime", "failures", "MTTR", "MTBF", "R", "A(%)"
    );
    let mut row = |label: &str, x: &ReliabilityReport| {
        let mtbf = match (x.mtbf_minutes, x.mtbf_lower_bound_minutes) {
            (Some(m), _) => format!("{m:.2}"),
            (None, Some(lb)) => format!(">={lb:.0}"),
            _ => "-".into(),
        };
        let _ = writeln!(
            s,
            "{:<10} {:>8.2} {:>10.0} {:>10.0} {:>9} {:>9.2} {:>10} {:>8.4} {:>8.2}",
            label,
            x.period_hours,
            x.uptime_minutes,
            x.downtime_minutes,
            x.failures,
            x.mttr_minutes,
            mtbf,
            x.reliability,
            x.availability_percent
        );
    };
    for seg in &r.segments {
        row(&seg.label, &seg.report);
    }
    row("Overall", &r.overall);
    let o = &r.overall;
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "availability      {:.2}% (exact {:.4}%)",
        o.availability_percent, o.availability_exact
    );
    let _ = writeln!(s, "downtime share    {:.2}%", 100.0 - o.availability_exact);
    let _ = writeln!(
        s,
        "reliability       {} (1 - {}/{:.2})",
        o.reliability, o.failures, o.period_hours
    );
    if o.reliability_clamped {
        let _ = writeln!(
            s,
            "  note: failure rate exceeds 1 per hour; reliability clamped to 0"
        );
    }
    if (o.reliability_rounded_rate - o.reliability).abs() > 1e-12 {
        let _ = writeln!(
            s,
            "  note: with the failure rate rounded to one decimal the figure would read {} (not exact)",
            o.reliability_rounded_rate
        );
    }
    let _ = writeln!(s, "MTTR              {:.2} min", o.mttr_minutes);
    let _ = writeln!(s, "MTBF              {} min", fmt_opt(o.mtbf_minutes));
    if !r.discrepancies.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "Discrepancies against the reference table:");
        for d in &r.discrepancies {
            let _ = writeln!(
                s,
                "  {:<8} {:<13} computed {:>10.4}  printed {:>10.4}",
                d.row, d.field, d.computed, d.printed
            );
        }
    }
    s
}

/// Something that can be asked whether it is alive.
pub trait HealthTarget: Send + Sync {
    fn label(&self) -> String;
    /// True iff a well-formed acknowledgement arrived within `timeout`.
    fn check(&self, timeout: Duration) -> bool;
}

impl HealthTarget for crate::gateway::Gateway {
    fn label(&self) -> String {
        "in-process-gateway".into()
    }

    fn check(&self, _timeout: Duration) -> bool {
        self.health().is_some()
    }
}

impl<T: HealthTarget + ?Sized> HealthTarget for std::sync::Arc<T> {
    fn label(&self) -> String {
        (**self).label()
    }

    fn check(&self, timeout: Duration) -> bool {
        (**self).check(timeout)
    }
}

/// Probes `target` once per `interval` for `duration`, timestamped on `clock`.
pub fn probe_run(
    target: &dyn HealthTarget,
    clock: &dyn Clock,
    interval: Duration,
    duration: Duration,
    timeout: Duration,
) -> ProbeLog {
    let mut log = ProbeLog::new(target.label(), interval);
    let step = chrono::Duration::seconds(log.interval_secs as i64);
    let ticks = duration.as_secs() / log.interval_secs;
    let start = clock.now();
    for i in 0..ticks {
        let at = start + step * i as i32;
        clock.sleep_until(at);
        let outcome = if target.check(timeout) {
            ProbeOutcome::Up
        } else {
            ProbeOutcome::Down
        };
        log.push(at, outcome);
    }
    if ticks > 0 {
        clock.sleep_until(start + step * ticks as i32);
    }
    log
}
