//! Blocking client for the gateway's HTTP protocol.

use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::consult::{ConsultSession, MessageKind, SessionEvents, SessionMode};
use crate::error::ApiError;
use crate::gateway::{
    AlertQuery, HealthAck, IngestBatch, IngestResult, LoginResponse, PatientSummary,
    RegisterRequest, RegisterResponse, ThresholdUpdate, ThresholdView, VitalsPage, VitalsQuery,
};
use crate::http::{
    BlobResponse, ErrorBody, LoginRequest, OpenSessionRequest, PostMessageRequest,
    PostMessageResponse,
};
use crate::notifier::Alert;
use crate::reliability::{HealthTarget, ReliabilityReport};
use crate::sim::{TransportError, VitalsTransport};

#[derive(Debug, Clone)]
pub struct HttpClient {
    base: String,
    http: Client,
    token: Option<String>,
}

fn transport_error(e: reqwest::Error) -> ApiError {
    ApiError::Unavailable(e.to_string())
}

impl HttpClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_timeout(base_url, Duration::from_secs(60))
    }

    pub fn with_timeout(base_url: impl Into<String>, timeout: Duration) -> Self {
        let http = Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client builds");
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            http,
            token: None,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn token(&self) -> Option<&str> {
        self.token.as_deref()
    }

    pub fn set_token(&mut self, token: Option<String>) {
        self.token = token;
    }

    fn request(&self, method: Method, path: &str) -> RequestBuilder {
        let mut rb = self.http.request(method, format!("{}{}", self.base, path));
        if let Some(t) = &self.token {
            rb = rb.bearer_auth(t);
        }
        rb
    }

    fn finish(resp: Response) -> Result<Response, ApiError> {
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        match resp.json::<ErrorBody>() {
            Ok(body) => Err(ApiError::from_code(&body.error, body.message)),
            Err(_) if status == StatusCode::PAYLOAD_TOO_LARGE => {
                Err(ApiError::PayloadTooLarge { size: 0, cap: 0 })
            }
            Err(_) => Err(ApiError::Unavailable(format!("HTTP {status}"))),
        }
    }

    fn send_json<T: DeserializeOwned>(&self, rb: RequestBuilder) -> Result<T, ApiError> {
        let resp = rb.send().map_err(transport_error)?;
        Self::finish(resp)?.json().map_err(transport_error)
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ApiError> {
        self.send_json(self.request(Method::GET, path))
    }

    fn post<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, ApiError> {
        self.send_json(self.request(Method::POST, path).json(body))
    }

    /// Escape hatch for protocol tests: status code and raw body text.
    pub fn raw(
        &self,
        method: Method,
        path: &str,
        body: Option<serde_json::Value>,
    ) -> Result<(u16, String), ApiError> {
        let mut rb = self.request(method, path);
        if let Some(b) = body {
            rb = rb.json(&b);
        }
        let resp = rb.send().map_err(transport_error)?;
        let status = resp.status().as_u16();
        Ok((status, resp.text().map_err(transport_error)?))
    }

    pub fn health(&self) -> Result<HealthAck, ApiError> {
        self.get("/api/health")
    }

    /// Logs in and keeps the token for subsequent calls.
    pub fn login(&mut self, id: &str, secret: &str) -> Result<LoginResponse, ApiError> {
        let body = LoginRequest {
            id: id.to_string(),
            secret: secret.to_string(),
        };
        let resp: LoginResponse = self.post("/api/login", &body)?;
        self.token = Some(resp.token.clone());
        Ok(resp)
    }

    pub fn register(&self, req: &RegisterRequest) -> Result<RegisterResponse, ApiError> {
        self.post("/api/register", req)
    }

    pub fn ingest(&self, batch: &IngestBatch) -> Result<IngestResult, ApiError> {
        self.post("/api/vitals", batch)
    }

    pub fn list_patients(&self) -> Result<Vec<PatientSummary>, ApiError> {
        self.get("/api/patients")
    }

    pub fn query_vitals(&self, patient_id: &str, q: &VitalsQuery) -> Result<VitalsPage, ApiError> {
        self.send_json(
            self.request(Method::GET, &format!("/api/patients/{patient_id}/vitals"))
                .query(q),
        )
    }

    pub fn get_thresholds(&self, patient_id: &str) -> Result<ThresholdView, ApiError> {
        self.get(&format!("/api/patients/{patient_id}/thresholds"))
    }

    pub fn update_thresholds(
        &self,
        patient_id: &str,
        update: &ThresholdUpdate,
    ) -> Result<ThresholdView, ApiError> {
        self.send_json(
            self.request(
                Method::PUT,
                &format!("/api/patients/{patient_id}/thresholds"),
            )
            .json(update),
        )
    }

    pub fn list_alerts(&self, q: &AlertQuery) -> Result<Vec<Alert>, ApiError> {
        self.send_json(self.request(Method::GET, "/api/alerts").query(q))
    }

    pub fn acknowledge(&self, alert_id: &str) -> Result<Alert, ApiError> {
        self.send_json(self.request(Method::POST, &format!("/api/alerts/{alert_id}/ack")))
    }

    pub fn open_session(
        &self,
        target: &str,
        mode: SessionMode,
    ) -> Result<ConsultSession, ApiError> {
        let body = OpenSessionRequest {
            target: target.to_string(),
            mode,
        };
        self.post("/api/sessions", &body)
    }

    pub fn list_sessions(&self) -> Result<Vec<ConsultSession>, ApiError> {
        self.get("/api/sessions")
    }

    pub fn accept_session(&self, id: &str) -> Result<ConsultSession, ApiError> {
        self.send_json(self.request(Method::POST, &format!("/api/sessions/{id}/accept")))
    }

    pub fn post_message(
        &self,
        id: &str,
        kind: MessageKind,
        payload: &str,
    ) -> Result<u64, ApiError> {
        let body = PostMessageRequest {
            kind,
            payload: payload.to_string(),
        };
        let r: PostMessageResponse = self.post(&format!("/api/sessions/{id}/messages"), &body)?;
        Ok(r.seq)
    }

    pub fn fetch_events(
        &self,
        id: &str,
        after: i64,
        wait: Option<Duration>,
    ) -> Result<SessionEvents, ApiError> {
        let mut q = vec![("after", after.to_string())];
        if let Some(w) = wait {
            q.push(("wait_ms", w.as_millis().to_string()));
        }
        self.send_json(
            self.request(Method::GET, &format!("/api/sessions/{id}/events"))
                .query(&q),
        )
    }

    pub fn terminate_session(&self, id: &str) -> Result<ConsultSession, ApiError> {
        self.send_json(self.request(Method::POST, &format!("/api/sessions/{id}/terminate")))
    }

    pub fn put_blob(&self, bytes: Vec<u8>) -> Result<String, ApiError> {
        let r: BlobResponse = self.send_json(
            self.request(Method::POST, "/api/blobs")
                .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
                .body(bytes),
        )?;
        Ok(r.reference)
    }

    pub fn get_blob(&self, reference: &str) -> Result<Vec<u8>, ApiError> {
        let resp = self
            .request(Method::GET, &format!("/api/blobs/{reference}"))
            .send()
            .map_err(transport_error)?;
        Ok(Self::finish(resp)?
            .bytes()
            .map_err(transport_error)?
            .to_vec())
    }

    pub fn reliability_metrics(&self) -> Result<ReliabilityReport, ApiError> {
        self.get("/api/metrics/reliability")
    }
}

/// Probes `GET /api/health` over the network.
#[derive(Debug, Clone)]
pub struct HttpHealthTarget {
    base: String,
}

impl HttpHealthTarget {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
        }
    }
}

impl HealthTarget for HttpHealthTarget {
    fn label(&self) -> String {
        self.base.clone()
    }

    fn check(&self, timeout: Duration) -> bool {
        HttpClient::with_timeout(self.base.clone(), timeout)
            .health()
            .is_ok()
    }
}

/// Sends hub batches to a remote gateway.
pub struct HttpTransport {
    client: HttpClient,
}

impl HttpTransport {
    /// `client` must already hold a token authorized to ingest.
    pub fn new(client: HttpClient) -> Self {
        Self { client }
    }
}

impl VitalsTransport for HttpTransport {
    fn send(&mut self, batch: &IngestBatch) -> Result<IngestResult, TransportError> {
        Ok(self.client.ingest(batch)?)
    }
}
