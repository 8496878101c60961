//! Python bindings: an in-process gateway on a controllable clock, the
//! classification rules, the trace generator and the evaluation analyses.
//! Structured results cross the boundary as plain dicts and lists.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use telecare_core::clock::{default_epoch, SharedClock, SimClock};
use telecare_core::error::ApiError;
use telecare_core::gateway::{
    AlertQuery, BootstrapAdmin, BoundPair, Demographics, Gateway as CoreGateway, GatewayConfig,
    IngestBatch, RegisterRequest, ThresholdUpdate, VitalsQuery,
};
use telecare_core::http::{spawn_server, HttpConfig, ServerHandle};
use telecare_core::notifier::{Sink, SmsSimSink};
use telecare_core::rbac::Role;
use telecare_core::reliability;
use telecare_core::sim::{generate_trace, PatientSimProfile};
use telecare_core::store::Durability;
use telecare_core::survey;
use telecare_core::vital::{self, ThresholdPolicy, VitalKind, VitalReading};

create_exception!(
    telecare,
    GatewayError,
    PyException,
    "A gateway call was refused; args are (code, message)."
);

fn gateway_err(e: ApiError) -> PyErr {
    GatewayError::new_err((e.code().to_string(), e.detail()))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn kind(name: &str) -> PyResult<VitalKind> {
    name.parse().map_err(value_err)
}

/// Classifies one reading: `"Normal"`, `"BelowLow"` or `"AboveHigh"`.
/// Uses the default bounds for `kind` unless both `low` and `high` are given.
#[pyfunction]
#[pyo3(signature = (kind_name, value, low=None, high=None))]
fn classify(kind_name: &str, value: i64, low: Option<i64>, high: Option<i64>) -> PyResult<String> {
    let k = kind(kind_name)?;
    let mut policy = ThresholdPolicy::defaults("P-000000");
    match (low, high) {
        (Some(l), Some(h)) => {
            policy
                .bounds
                .insert(k, vital::Bounds::new(k, l, h).map_err(value_err)?);
        }
        (None, None) => {}
        _ => return Err(PyValueError::new_err("give both low and high, or neither")),
    }
    let reading = VitalReading {
        patient_id: "P-000000".into(),
        device_id: "py".into(),
        kind: k,
        value,
        taken_at: default_epoch(),
        seq: 0,
    };
    let c = vital::classify(&reading, &policy).map_err(value_err)?;
    Ok(format!("{:?}", c.status))
}

/// `(low, high, unit)` of the default normal range for `kind`.
#[pyfunction]
fn default_bounds(kind_name: &str) -> PyResult<(i64, i64, String)> {
    let b = vital::default_policy(kind(kind_name)?);
    Ok((b.low, b.high, b.unit))
}

/// `1 - failures / period_hours`, unrounded (0 when the rate exceeds one per hour).
#[pyfunction]
fn reliability_score(failures: u64, period_hours: f64) -> PyResult<f64> {
    Ok(reliability::reliability(failures, period_hours)
        .map_err(value_err)?
        .value)
}

/// Availability percentage, rounded to two decimals.
#[pyfunction]
fn availability(uptime_minutes: f64, downtime_minutes: f64) -> PyResult<f64> {
    reliability::availability(uptime_minutes, downtime_minutes).map_err(value_err)
}

/// Full reliability report for a probe log (the bundled evaluation log when
/// omitted), optionally checked against a reference table.
#[pyfunction]
#[pyo3(signature = (log_text=None, reference_text=None))]
fn reliability_report(
    py: Python<'_>,
    log_text: Option<&str>,
    reference_text: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let (log, reference) = match log_text {
        Some(t) => (t, reference_text),
        None => (
            reliability::BUNDLED_EVALUATION_LOG,
            reference_text.or(Some(reliability::BUNDLED_EVALUATION_REFERENCE)),
        ),
    };
    let log = reliability::ProbeLog::parse(log).map_err(value_err)?;
    let reference = reference
        .map(reliability::parse_reference)
        .transpose()
        .map_err(value_err)?;
    let report = reliability::full_report(&log, reference.as_ref()).map_err(value_err)?;
    to_py(py, &report)
}

/// Item statistics and composites for a Likert dataset (the bundled questionnaire when omitted).
#[pyfunction]
#[pyo3(signature = (dataset_text=None))]
fn survey_report(py: Python<'_>, dataset_text: Option<&str>) -> PyResult<Py<PyAny>> {
    let items = survey::parse_dataset(dataset_text.unwrap_or(survey::BUNDLED_QUESTIONNAIRE))
        .map_err(value_err)?;
    let report = survey::analyze(&items, &survey::default_composites()).map_err(value_err)?;
    to_py(py, &report)
}

/// Deterministic vital-sign trace for a resting patient: one reading per
/// kind per tick. `episodes` is a list of dicts with kind, start_tick,
/// end_tick, low and high.
#[pyfunction]
#[pyo3(signature = (patient_id, seed, ticks, sample_interval_secs=60, episodes=None, start=None))]
fn simulate_trace(
    py: Python<'_>,
    patient_id: &str,
    seed: u64,
    ticks: u64,
    sample_interval_secs: u64,
    episodes: Option<&Bound<'_, PyAny>>,
    start: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let mut profile = PatientSimProfile::resting(patient_id, seed);
    if let Some(e) = episodes {
        profile.episodes = from_py(e)?;
    }
    profile.validate().map_err(value_err)?;
    let start = match start {
        Some(s) => s.parse::<DateTime<Utc>>().map_err(value_err)?,
        None => default_epoch(),
    };
    let trace = generate_trace(
        &profile,
        ticks,
        start,
        Duration::from_secs(sample_interval_secs.max(1)),
    );
    to_py(py, &trace)
}

/// A gateway with its data under `data_dir`, running on a simulated clock
/// that only moves when `advance` is called. Alert SMS lines go to
/// `<data_dir>/sms-outbox.log`.
#[pyclass(module = "telecare")]
struct Gateway {
    inner: Arc<CoreGateway>,
    clock: Arc<SimClock>,
}

#[pymethods]
impl Gateway {
    #[new]
    #[pyo3(signature = (data_dir, admin_id="A-000001", admin_secret="admin-secret", start=None))]
    fn new(
        data_dir: PathBuf,
        admin_id: &str,
        admin_secret: &str,
        start: Option<&str>,
    ) -> PyResult<Self> {
        let start = match start {
            Some(s) => s.parse::<DateTime<Utc>>().map_err(value_err)?,
            None => default_epoch(),
        };
        let clock = Arc::new(SimClock::new(start));
        let shared: SharedClock = clock.clone();
        let config = GatewayConfig {
            durability: Durability::Flush,
            bootstrap_admin: Some(BootstrapAdmin {
                id: admin_id.into(),
                secret: admin_secret.into(),
                name: "Bootstrap Administrator".into(),
            }),
            ..GatewayConfig::default()
        };
        let sinks: Vec<Arc<dyn Sink>> = vec![Arc::new(SmsSimSink::new(
            data_dir.join("sms-outbox.log"),
            shared.clone(),
        ))];
        let inner = CoreGateway::open(data_dir, config, shared, sinks).map_err(gateway_err)?;
        Ok(Self { inner, clock })
    }

    /// Current simulated time, RFC 3339.
    fn now(&self) -> String {
        telecare_core::clock::Clock::now(self.clock.as_ref()).to_rfc3339()
    }

    fn advance(&self, seconds: f64) -> PyResult<()> {
        let d = Duration::try_from_secs_f64(seconds).map_err(value_err)?;
        self.clock.advance(d);
        Ok(())
    }

    /// Forces the gateway down (every call fails as unavailable) or back up.
    fn set_down(&self, down: bool) {
        self.inner.faults().set_down(down);
    }

    fn login(&self, id: &str, secret: &str) -> PyResult<String> {
        Ok(self.inner.login(id, secret).map_err(gateway_err)?.token)
    }

    /// Registers a principal; returns `(id, secret)`.
    #[pyo3(signature = (token, role, name, date_of_birth=None, assigned_staff=Vec::new(), secret=None))]
    fn register(
        &self,
        token: &str,
        role: &str,
        name: &str,
        date_of_birth: Option<String>,
        assigned_staff: Vec<String>,
        secret: Option<String>,
    ) -> PyResult<(String, String)> {
        let role: Role = role.parse().map_err(value_err)?;
        let req = RegisterRequest {
            role,
            demographics: Demographics {
                name: name.into(),
                date_of_birth,
                phone: None,
                assigned_staff,
            },
            secret,
        };
        let r = self.inner.register(Some(token), req).map_err(gateway_err)?;
        Ok((r.id, r.secret))
    }

    /// Ingests `(kind, value)` pairs for `patient_id`, timestamped now and
    /// numbered from `first_seq`. Returns the per-item result dict.
    #[pyo3(signature = (token, patient_id, device_id, readings, first_seq=0))]
    fn ingest(
        &self,
        py: Python<'_>,
        token: &str,
        patient_id: &str,
        device_id: &str,
        readings: Vec<(String, i64)>,
        first_seq: u64,
    ) -> PyResult<Py<PyAny>> {
        let now = telecare_core::clock::Clock::now(self.clock.as_ref());
        let mut batch_readings = Vec::with_capacity(readings.len());
        for (i, (k, v)) in readings.into_iter().enumerate() {
            batch_readings.push(VitalReading {
                patient_id: patient_id.into(),
                device_id: device_id.into(),
                kind: kind(&k)?,
                value: v,
                taken_at: now,
                seq: first_seq + i as u64,
            });
        }
        let batch = IngestBatch::from_readings(device_id, &batch_readings, now);
        let inner = self.inner.clone();
        let token = token.to_string();
        let r = py
            .detach(move || inner.ingest(Some(&token), &batch))
            .map_err(gateway_err)?;
        to_py(py, &r)
    }

    /// Every stored reading for `patient_id`, oldest first, with its status.
    fn vitals(&self, py: Python<'_>, token: &str, patient_id: &str) -> PyResult<Py<PyAny>> {
        let mut q = VitalsQuery::default();
        let mut out = Vec::new();
        loop {
            let page = self
                .inner
                .query_vitals(Some(token), patient_id, &q)
                .map_err(gateway_err)?;
            if page.readings.is_empty() {
                break;
            }
            q.after = page.next_cursor;
            out.extend(page.readings);
        }
        to_py(py, &out)
    }

    fn thresholds(&self, py: Python<'_>, token: &str, patient_id: &str) -> PyResult<Py<PyAny>> {
        to_py(
            py,
            &self
                .inner
                .get_thresholds(Some(token), patient_id)
                .map_err(gateway_err)?,
        )
    }

    /// `bounds` maps kind names to `(low, high)`; other kinds keep their bounds.
    fn update_thresholds(
        &self,
        py: Python<'_>,
        token: &str,
        patient_id: &str,
        bounds: BTreeMap<String, (i64, i64)>,
    ) -> PyResult<Py<PyAny>> {
        let mut update = ThresholdUpdate {
            bounds: BTreeMap::new(),
        };
        for (k, (low, high)) in bounds {
            update.bounds.insert(kind(&k)?, BoundPair { low, high });
        }
        to_py(
            py,
            &self
                .inner
                .update_thresholds(Some(token), patient_id, &update)
                .map_err(gateway_err)?,
        )
    }

    #[pyo3(signature = (token, patient_id=None))]
    fn alerts(
        &self,
        py: Python<'_>,
        token: &str,
        patient_id: Option<String>,
    ) -> PyResult<Py<PyAny>> {
        let q = AlertQuery {
            state: None,
            patient_id,
        };
        to_py(
            py,
            &self
                .inner
                .list_alerts(Some(token), &q)
                .map_err(gateway_err)?,
        )
    }

    fn acknowledge(&self, py: Python<'_>, token: &str, alert_id: &str) -> PyResult<Py<PyAny>> {
        to_py(
            py,
            &self
                .inner
                .acknowledge(Some(token), alert_id)
                .map_err(gateway_err)?,
        )
    }

    /// Blocks until queued alert notifications are delivered or `timeout` seconds pass.
    #[pyo3(signature = (timeout=5.0))]
    fn wait_notifications(&self, py: Python<'_>, timeout: f64) -> PyResult<bool> {
        let d = Duration::try_from_secs_f64(timeout).map_err(value_err)?;
        let inner = self.inner.clone();
        Ok(py.detach(move || inner.wait_notifications_idle(d)))
    }

    /// Serves the HTTP protocol on `bind` (port 0 picks a free port).
    #[pyo3(signature = (bind="127.0.0.1:0"))]
    fn serve(&self, bind: &str) -> PyResult<Server> {
        let addr = bind.parse().map_err(value_err)?;
        let handle = spawn_server(self.inner.clone(), addr, HttpConfig::default())
            .map_err(|e| PyRuntimeError::new_err(format!("cannot bind {bind}: {e}")))?;
        Ok(Server {
            url: handle.base_url(),
            handle: Mutex::new(Some(handle)),
        })
    }

    /// Stops notification delivery; the data directory stays consistent.
    fn shutdown(&self) {
        self.inner.shutdown();
    }
}

/// A running HTTP front end; `stop()` or garbage collection shuts it down.
#[pyclass(module = "telecare")]
struct Server {
    #[pyo3(get)]
    url: String,
    handle: Mutex<Option<ServerHandle>>,
}

#[pymethods]
impl Server {
    fn stop(&self, py: Python<'_>) -> PyResult<()> {
        let handle = self
            .handle
            .lock()
            .map_err(|_| PyRuntimeError::new_err("server lock poisoned"))?
            .take();
        if let Some(h) = handle {
            py.detach(move || h.stop())
                .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        }
        Ok(())
    }
}

#[pymodule]
fn telecare(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GatewayError", m.py().get_type::<GatewayError>())?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(default_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(reliability_score, m)?)?;
    m.add_function(wrap_pyfunction!(availability, m)?)?;
    m.add_function(wrap_pyfunction!(reliability_report, m)?)?;
    m.add_function(wrap_pyfunction!(survey_report, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_trace, m)?)?;
    m.add_class::<Gateway>()?;
    m.add_class::<Server>()?;
    Ok(())
}
