//! External data interface: turns data pushed to an incident's endpoint, or a
//! change noticed by polling a source, into a workflow message.
//!
//! Push bodies are stored in the data catalog first and the message carries
//! only the handle. Pull endpoints fetch source metadata (headers, never the
//! body), hash a configured subset into a signature, and emit a message the
//! first time they see a source and whenever its signature changes.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use crate::ids::{IncidentId, MessageId};
use crate::simenv::{DataId, SimEnv, SimError, LOCAL};
use crate::statestore::{IncidentStatus, StoreError};
use crate::wfcore::{IncidentListener, Outlet, PublishError};

pub const DEFAULT_MAX_PUSH_BYTES: usize = 8 * 1024 * 1024;

/// Header names hashed into a pull signature unless configured otherwise.
pub const DEFAULT_SIGNATURE_HEADERS: [&str; 2] = ["last-modified", "content-length"];

const MOCK_SCHEME: &str = "mock://";

#[derive(Debug, Error)]
pub enum EdiError {
    #[error("no active endpoint at {0:?}")]
    NotFound(String),
    #[error("push path {0:?} is already in use")]
    DuplicatePath(String),
    #[error("push path {0:?} must start with '/' and contain no whitespace")]
    InvalidPath(String),
    #[error("incident {incident_id} is {status:?}")]
    IncidentNotActive {
        incident_id: IncidentId,
        status: IncidentStatus,
    },
    #[error("unknown incident {0}")]
    UnknownIncident(IncidentId),
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(u64),
    #[error("unknown target queue {0:?}")]
    UnknownQueue(String),
    #[error("no metadata source for {0:?}")]
    UnknownSource(String),
    #[error("push body of {size} bytes exceeds the {cap} byte cap")]
    TooLarge { size: usize, cap: usize },
    #[error(transparent)]
    Publish(PublishError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<PublishError> for EdiError {
    fn from(e: PublishError) -> Self {
        match e {
            PublishError::IncidentNotActive {
                incident_id,
                status,
            } => Self::IncidentNotActive {
                incident_id,
                status,
            },
            PublishError::UnknownIncident(id) => Self::UnknownIncident(id),
            other => Self::Publish(other),
        }
    }
}

impl From<StoreError> for EdiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownIncident(id) => Self::UnknownIncident(id),
            other => Self::Store(other),
        }
    }
}

pub type Headers = BTreeMap<String, String>;

/// Where a pull endpoint reads metadata from.
pub trait MetadataSource: Send + Sync {
    fn fetch(&self) -> Result<Headers, String>;
}

/// Issues a HEAD request and returns the response headers, names lowercased.
pub struct HttpSource {
    url: String,
    agent: ureq::Agent,
}

impl HttpSource {
    pub fn new(url: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .into();
        Self {
            url: url.into(),
            agent,
        }
    }
}

impl MetadataSource for HttpSource {
    fn fetch(&self) -> Result<Headers, String> {
        let response = self.agent.head(&self.url).call().map_err(|e| e.to_string())?;
        Ok(response
            .headers()
            .iter()
            .filter_map(|(k, v)| Some((k.as_str().to_ascii_lowercase(), v.to_str().ok()?.to_owned())))
            .collect())
    }
}

/// Pending script steps and the last headers served.
type Script = (VecDeque<Result<Headers, String>>, Option<Headers>);

/// Test and demo source: returns a script of header maps one per fetch,
/// repeating the last entry once the script runs out. `Err` entries simulate
/// an unreachable source.
#[derive(Default)]
pub struct ScriptedSource {
    state: Mutex<Script>,
    fetches: AtomicU64,
}

impl ScriptedSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_script(script: impl IntoIterator<Item = Result<Headers, String>>) -> Self {
        let s = Self::new();
        s.state.lock().0.extend(script);
        s
    }

    pub fn push(&self, step: Result<Headers, String>) {
        self.state.lock().0.push_back(step);
    }

    /// Replace the steady-state headers and drop any pending script.
    pub fn set(&self, headers: Headers) {
        let mut state = self.state.lock();
        state.0.clear();
        state.1 = Some(headers);
    }

    pub fn fetch_count(&self) -> u64 {
        self.fetches.load(Ordering::Relaxed)
    }
}

impl MetadataSource for ScriptedSource {
    fn fetch(&self) -> Result<Headers, String> {
        self.fetches.fetch_add(1, Ordering::Relaxed);
        let mut state = self.state.lock();
        match state.0.pop_front() {
            Some(Ok(h)) => {
                state.1 = Some(h.clone());
                Ok(h)
            }
            Some(Err(e)) => Err(e),
            None => state.1.clone().ok_or_else(|| "source has no data yet".to_owned()),
        }
    }
}

pub fn headers<const N: usize>(pairs: [(&str, &str); N]) -> Headers {
    pairs
        .into_iter()
        .map(|(k, v)| (k.to_ascii_lowercase(), v.to_owned()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EndpointKind {
    Push,
    Pull,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Endpoint {
    pub endpoint_id: u64,
    pub incident_id: IncidentId,
    pub kind: EndpointKind,
    /// URI path for PUSH endpoints, source URL for PULL endpoints.
    pub path: String,
    pub target_queue: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub poll_interval_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_signature: Option<String>,
    pub active: bool,
    pub messages_emitted: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PollOutcome {
    Emitted(MessageId),
    Unchanged,
    /// The source could not be read; nothing was emitted.
    SourceError(String),
    /// The endpoint is inactive or its incident no longer admits messages.
    Rejected(String),
}

#[derive(Clone, Debug)]
pub struct EdiConfig {
    pub max_push_bytes: usize,
    pub signature_headers: Vec<String>,
    /// Start a background poller for every pull endpoint. Off for tests that
    /// drive polls with [`Edi::poll_once`].
    pub auto_poll: bool,
}

impl Default for EdiConfig {
    fn default() -> Self {
        Self {
            max_push_bytes: DEFAULT_MAX_PUSH_BYTES,
            signature_headers: DEFAULT_SIGNATURE_HEADERS.iter().map(|s| s.to_string()).collect(),
            auto_poll: true,
        }
    }
}

struct PullState {
    source: Arc<dyn MetadataSource>,
    /// Serializes polls of one endpoint.
    poll_lock: Arc<Mutex<()>>,
}

struct Registry {
    endpoints: BTreeMap<u64, Endpoint>,
    push_routes: HashMap<String, u64>,
    pulls: HashMap<u64, PullState>,
}

pub struct Edi {
    outlet: Outlet,
    simenv: Arc<SimEnv>,
    config: EdiConfig,
    registry: Mutex<Registry>,
    sources: RwLock<HashMap<String, Arc<dyn MetadataSource>>>,
    next_id: AtomicU64,
    pollers: Mutex<Vec<JoinHandle<()>>>,
    shutdown: Arc<AtomicBool>,
}

impl fmt::Debug for Edi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Edi").finish_non_exhaustive()
    }
}

/// Hex SHA-256 over `name: value` lines of the chosen headers. Missing
/// headers hash as empty values.
pub fn signature(metadata: &Headers, names: &[String]) -> String {
    let mut hasher = Sha256::new();
    for name in names {
        let value = metadata.get(&name.to_ascii_lowercase()).map_or("", String::as_str);
        hasher.update(name.as_bytes());
        hasher.update(b": ");
        hasher.update(value.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

fn valid_push_path(path: &str) -> bool {
    path.starts_with('/') && path.len() > 1 && !path.chars().any(char::is_whitespace)
}

impl Edi {
    pub fn new(outlet: Outlet, simenv: Arc<SimEnv>, config: EdiConfig) -> Arc<Self> {
        Arc::new(Self {
            outlet,
            simenv,
            config,
            registry: Mutex::new(Registry {
                endpoints: BTreeMap::new(),
                push_routes: HashMap::new(),
                pulls: HashMap::new(),
            }),
            sources: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            pollers: Mutex::new(Vec::new()),
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    /// Make `source` reachable as `mock://{name}`.
    pub fn register_source(&self, name: &str, source: Arc<dyn MetadataSource>) {
        self.sources.write().insert(name.to_owned(), source);
    }

    fn resolve_source(&self, url: &str) -> Result<Arc<dyn MetadataSource>, EdiError> {
        if let Some(name) = url.strip_prefix(MOCK_SCHEME) {
            return self
                .sources
                .read()
                .get(name)
                .cloned()
                .ok_or_else(|| EdiError::UnknownSource(url.to_owned()));
        }
        if url.starts_with("http://") || url.starts_with("https://") {
            return Ok(Arc::new(HttpSource::new(url)));
        }
        Err(EdiError::UnknownSource(url.to_owned()))
    }

    fn require_active(&self, incident_id: IncidentId) -> Result<(), EdiError> {
        let status = self.outlet.store().incident(incident_id)?.status;
        if status != IncidentStatus::Active {
            return Err(EdiError::IncidentNotActive {
                incident_id,
                status,
            });
        }
        Ok(())
    }

    fn check_queue(&self, queue: &str) -> Result<(), EdiError> {
        if self.outlet.broker().has_queue(queue) {
            Ok(())
        } else {
            Err(EdiError::UnknownQueue(queue.to_owned()))
        }
    }

    pub fn register_push_endpoint(
        &self,
        incident_id: IncidentId,
        path: &str,
        target_queue: &str,
    ) -> Result<u64, EdiError> {
        if !valid_push_path(path) {
            return Err(EdiError::InvalidPath(path.to_owned()));
        }
        self.check_queue(target_queue)?;
        self.require_active(incident_id)?;
        let mut reg = self.registry.lock();
        if reg.push_routes.contains_key(path) {
            return Err(EdiError::DuplicatePath(path.to_owned()));
        }
        let endpoint_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        reg.push_routes.insert(path.to_owned(), endpoint_id);
        reg.endpoints.insert(
            endpoint_id,
            Endpoint {
                endpoint_id,
                incident_id,
                kind: EndpointKind::Push,
                path: path.to_owned(),
                target_queue: target_queue.to_owned(),
                poll_interval_ms: None,
                last_signature: None,
                active: true,
                messages_emitted: 0,
            },
        );
        debug!(incident = %incident_id, path, "registered push endpoint");
        Ok(endpoint_id)
    }

    /// Store `body` in the data catalog and send its handle to the
    /// endpoint's target queue.
    pub fn handle_push(&self, path: &str, body: &[u8], metadata: &Headers) -> Result<MessageId, EdiError> {
        let endpoint = {
            let reg = self.registry.lock();
            let id = reg
                .push_routes
                .get(path)
                .ok_or_else(|| EdiError::NotFound(path.to_owned()))?;
            reg.endpoints[id].clone()
        };
        if body.len() > self.config.max_push_bytes {
            return Err(EdiError::TooLarge {
                size: body.len(),
                cap: self.config.max_push_bytes,
            });
        }
        self.require_active(endpoint.incident_id)?;
        let data_id = self.simenv.register_data(
            &format!("push{path}"),
            body,
            LOCAL,
            &format!("edi push to {path}"),
        )?;
        let payload = json!({
            "source": "push",
            "endpoint_id": endpoint.endpoint_id,
            "path": path,
            "data_id": data_id,
            "size_bytes": body.len(),
            "metadata": metadata,
        });
        let id = self
            .outlet
            .publish(endpoint.incident_id, &endpoint.target_queue, payload, None)?;
        if let Some(e) = self.registry.lock().endpoints.get_mut(&endpoint.endpoint_id) {
            e.messages_emitted += 1;
        }
        Ok(id)
    }

    pub fn register_pull_endpoint(
        self: &Arc<Self>,
        incident_id: IncidentId,
        url: &str,
        poll_interval: Duration,
        target_queue: &str,
    ) -> Result<u64, EdiError> {
        self.check_queue(target_queue)?;
        self.require_active(incident_id)?;
        let source = self.resolve_source(url)?;
        let endpoint_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        {
            let mut reg = self.registry.lock();
            reg.endpoints.insert(
                endpoint_id,
                Endpoint {
                    endpoint_id,
                    incident_id,
                    kind: EndpointKind::Pull,
                    path: url.to_owned(),
                    target_queue: target_queue.to_owned(),
                    poll_interval_ms: Some(poll_interval.as_millis() as u64),
                    last_signature: None,
                    active: true,
                    messages_emitted: 0,
                },
            );
            reg.pulls.insert(
                endpoint_id,
                PullState {
                    source,
                    poll_lock: Arc::new(Mutex::new(())),
                },
            );
        }
        if self.config.auto_poll {
            self.spawn_poller(endpoint_id, poll_interval);
        }
        debug!(incident = %incident_id, url, "registered pull endpoint");
        Ok(endpoint_id)
    }

    fn spawn_poller(self: &Arc<Self>, endpoint_id: u64, interval: Duration) {
        let edi = Arc::downgrade(self);
        let shutdown = Arc::clone(&self.shutdown);
        let handle = thread::Builder::new()
            .name(format!("edi-poll-{endpoint_id}"))
            .spawn(move || {
                let tick = Duration::from_millis(10).min(interval.max(Duration::from_millis(1)));
                loop {
                    if shutdown.load(Ordering::Acquire) {
                        return;
                    }
                    let Some(edi) = edi.upgrade() else { return };
                    match edi.poll_once(endpoint_id) {
                        Ok(PollOutcome::Rejected(_)) | Err(_) => return,
                        Ok(PollOutcome::SourceError(e)) => {
                            warn!(endpoint = endpoint_id, "pull source unreachable, retrying next cycle: {e}");
                        }
                        Ok(_) => {}
                    }
                    drop(edi);
                    let mut waited = Duration::ZERO;
                    while waited < interval {
                        if shutdown.load(Ordering::Acquire) {
                            return;
                        }
                        thread::sleep(tick);
                        waited += tick;
                    }
                }
            })
            .expect("spawn poller thread");
        let mut pollers = self.pollers.lock();
        pollers.retain(|h| !h.is_finished());
        pollers.push(handle);
    }

    /// Run one poll cycle for a pull endpoint.
    pub fn poll_once(&self, endpoint_id: u64) -> Result<PollOutcome, EdiError> {
        let (endpoint, source, poll_lock) = {
            let reg = self.registry.lock();
            let endpoint = reg
                .endpoints
                .get(&endpoint_id)
                .filter(|e| e.kind == EndpointKind::Pull)
                .cloned()
                .ok_or(EdiError::UnknownEndpoint(endpoint_id))?;
            let pull = &reg.pulls[&endpoint_id];
            (endpoint, Arc::clone(&pull.source), Arc::clone(&pull.poll_lock))
        };
        let _serial = poll_lock.lock();
        if !endpoint.active {
            return Ok(PollOutcome::Rejected("endpoint inactive".into()));
        }
        let metadata = match source.fetch() {
            Ok(m) => m,
            Err(e) => return Ok(PollOutcome::SourceError(e)),
        };
        let sig = signature(&metadata, &self.config.signature_headers);
        let last = self.registry.lock().endpoints[&endpoint_id].last_signature.clone();
        if last.as_deref() == Some(sig.as_str()) {
            return Ok(PollOutcome::Unchanged);
        }
        let payload = json!({
            "source": "pull",
            "endpoint_id": endpoint_id,
            "url": endpoint.path,
            "signature": sig,
            "metadata": metadata,
        });
        match self
            .outlet
            .publish(endpoint.incident_id, &endpoint.target_queue, payload, None)
        {
            Ok(id) => {
                let mut reg = self.registry.lock();
                let e = reg.endpoints.get_mut(&endpoint_id).expect("endpoints are never removed");
                e.last_signature = Some(sig);
                e.messages_emitted += 1;
                Ok(PollOutcome::Emitted(id))
            }
            Err(PublishError::IncidentNotActive { status, .. }) => {
                Ok(PollOutcome::Rejected(format!("incident is {status:?}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Deactivate every endpoint of an incident. Push paths become free.
    pub fn deregister_incident(&self, incident_id: IncidentId) -> usize {
        let mut reg = self.registry.lock();
        let mut count = 0;
        let Registry {
            endpoints,
            push_routes,
            ..
        } = &mut *reg;
        for e in endpoints.values_mut().filter(|e| e.incident_id == incident_id && e.active) {
            e.active = false;
            if e.kind == EndpointKind::Push {
                push_routes.remove(&e.path);
            }
            count += 1;
        }
        count
    }

    pub fn endpoints_for(&self, incident_id: IncidentId) -> Vec<Endpoint> {
        self.registry
            .lock()
            .endpoints
            .values()
            .filter(|e| e.incident_id == incident_id)
            .cloned()
            .collect()
    }

    pub fn endpoint(&self, endpoint_id: u64) -> Option<Endpoint> {
        self.registry.lock().endpoints.get(&endpoint_id).cloned()
    }

    /// Data handle carried by a push message payload.
    pub fn pushed_data(payload: &serde_json::Value) -> Option<DataId> {
        payload.get("data_id")?.as_str().map(DataId::from)
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::Release);
        let handles: Vec<_> = self.pollers.lock().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    /// Stop pollers without waiting for them, as if the process had died.
    pub fn halt(&self) {
        self.shutdown.store(true, Ordering::Release);
    }
}

impl IncidentListener for Edi {
    fn incident_cleared(&self, incident_id: IncidentId) {
        let n = self.deregister_incident(incident_id);
        if n > 0 {
            debug!(incident = %incident_id, endpoints = n, "deregistered endpoints");
        }
    }
}
