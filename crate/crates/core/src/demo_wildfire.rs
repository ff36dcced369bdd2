//! Wildfire demo workflow.
//!
//! Stage graph:
//!
//! ```text
//! init ─┬─ terrain_extract ─────────────────────────────┐
//!       ├─ (config) ────────────────────────────────────┤
//!       └─ registers EDI endpoints                      │
//! [push] hotspot_ingest ─ modis_extract | viirs_extract | ground_format ─┤
//! [pull] global_forecast_fetch ─ local_forecast_job ─ (BATCH) ─ local_forecast_done ─┤
//! [push] config_update ─────────────────────────────────┤
//!                                                      wfa_join ─ wfa_dispatch ─ (PERSISTENT)
//!                                                        forecast_result × emit_count, wfa_complete
//! ```
//!
//! Every transform is a labeled pass-through producing a small JSON document;
//! only the orchestration is real. The incident completes once the persistent
//! job has finished and each of its outputs has a forecast_result.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context as _};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{info, warn};

use crate::edi::{headers, Edi, EdiError, Headers, ScriptedSource};
use crate::ids::IncidentId;
use crate::simenv::{DataId, JobId, JobRequest, JobStatus, RuntimeSpec, SimEnv, SimError, LOCAL};
use crate::wfcore::{HandlerContext, JoinSpec, StageRegistration, WorkflowDefinition};

pub const KIND: &str = "wildfire";

pub const INIT: &str = "init";
pub const HOTSPOT_INGEST: &str = "hotspot_ingest";
pub const MODIS_EXTRACT: &str = "modis_extract";
pub const VIIRS_EXTRACT: &str = "viirs_extract";
pub const GROUND_FORMAT: &str = "ground_format";
pub const GLOBAL_FORECAST_FETCH: &str = "global_forecast_fetch";
pub const LOCAL_FORECAST_JOB: &str = "local_forecast_job";
pub const LOCAL_FORECAST_DONE: &str = "local_forecast_done";
pub const TERRAIN_EXTRACT: &str = "terrain_extract";
pub const CONFIG_UPDATE: &str = "config_update";
pub const WFA_JOIN: &str = "wfa_join";
pub const WFA_DISPATCH: &str = "wfa_dispatch";
pub const FORECAST_RESULT: &str = "forecast_result";
pub const WFA_COMPLETE: &str = "wfa_complete";

/// The three fire-position branch stages.
pub const BRANCH_STAGES: [&str; 3] = [MODIS_EXTRACT, VIIRS_EXTRACT, GROUND_FORMAT];

/// Name under which the mock global-forecast source is registered with EDI.
pub const GLOBAL_FORECAST_SOURCE: &str = "global-forecast";

const TERRAIN_ITEM: &str = "terrain/static-dem";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ForecastKind {
    Perimeter,
    ExposureShed,
}

impl ForecastKind {
    /// Label recorded by forecast_result for the output mode taken.
    pub fn output_mode(self) -> &'static str {
        match self {
            Self::Perimeter => "fire_perimeter",
            Self::ExposureShed => "probabilistic_exposure_shed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HotspotSource {
    Modis,
    Viirs,
    Ground,
}

impl HotspotSource {
    pub const ALL: [Self; 3] = [Self::Modis, Self::Viirs, Self::Ground];

    pub fn branch_stage(self) -> &'static str {
        match self {
            Self::Modis => MODIS_EXTRACT,
            Self::Viirs => VIIRS_EXTRACT,
            Self::Ground => GROUND_FORMAT,
        }
    }
}

#[derive(Debug, Error)]
#[error("unrecognized value {value:?}; expected one of {expected}")]
pub struct ParseEnumError {
    value: String,
    expected: &'static str,
}

impl FromStr for HotspotSource {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MODIS" => Ok(Self::Modis),
            "VIIRS" => Ok(Self::Viirs),
            "GROUND" => Ok(Self::Ground),
            _ => Err(ParseEnumError {
                value: s.to_owned(),
                expected: "MODIS, VIIRS, GROUND",
            }),
        }
    }
}

impl FromStr for ForecastKind {
    type Err = ParseEnumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "PERIMETER" => Ok(Self::Perimeter),
            "EXPOSURE_SHED" => Ok(Self::ExposureShed),
            _ => Err(ParseEnumError {
                value: s.to_owned(),
                expected: "PERIMETER, EXPOSURE_SHED",
            }),
        }
    }
}

impl fmt::Display for HotspotSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Modis => "MODIS",
            Self::Viirs => "VIIRS",
            Self::Ground => "GROUND",
        })
    }
}

impl fmt::Display for ForecastKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Perimeter => "PERIMETER",
            Self::ExposureShed => "EXPOSURE_SHED",
        })
    }
}

/// Rectangle in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaOfInterest {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl Default for AreaOfInterest {
    /// Around La Jonquera, Catalonia.
    fn default() -> Self {
        Self {
            min_lat: 42.30,
            min_lon: 2.75,
            max_lat: 42.50,
            max_lon: 3.05,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid {field}: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl AreaOfInterest {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("area_of_interest.min_lat", self.min_lat, 90.0),
            ("area_of_interest.max_lat", self.max_lat, 90.0),
            ("area_of_interest.min_lon", self.min_lon, 180.0),
            ("area_of_interest.max_lon", self.max_lon, 180.0),
        ];
        for (field, v, bound) in fields {
            if !v.is_finite() || v.abs() > bound {
                return Err(ConfigError {
                    field,
                    reason: format!("{v} is outside [-{bound}, {bound}]"),
                });
            }
        }
        if self.min_lat >= self.max_lat {
            return Err(ConfigError {
                field: "area_of_interest.min_lat",
                reason: format!("must be below max_lat ({} >= {})", self.min_lat, self.max_lat),
            });
        }
        if self.min_lon >= self.max_lon {
            return Err(ConfigError {
                field: "area_of_interest.min_lon",
                reason: format!("must be below max_lon ({} >= {})", self.min_lon, self.max_lon),
            });
        }
        Ok(())
    }
}

/// Per-incident configuration, carried as the initial payload. Missing
/// fields take their defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WildfireConfig {
    pub forecast_kind: ForecastKind,
    pub area_of_interest: AreaOfInterest,
    pub hotspot_source: HotspotSource,
}

impl Default for WildfireConfig {
    fn default() -> Self {
        Self {
            forecast_kind: ForecastKind::Perimeter,
            area_of_interest: AreaOfInterest::default(),
            hotspot_source: HotspotSource::Modis,
        }
    }
}

impl WildfireConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.area_of_interest.validate()
    }

    pub fn from_payload(payload: &Value) -> anyhow::Result<Self> {
        let config: Self = serde_json::from_value(payload.clone()).context("wildfire config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_payload(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Engine-level knobs for the simulated jobs and the forecast poller.
#[derive(Clone, Debug, PartialEq)]
pub struct WildfireSettings {
    pub machine: String,
    /// Nominal runtime of the local weather (BATCH) job.
    pub weather_runtime: Duration,
    /// Interval and count of the fire-spread (PERSISTENT) job's outputs.
    pub forecast_interval: Duration,
    pub forecast_count: u32,
    pub poll_interval: Duration,
    pub forecast_source_url: String,
}

impl Default for WildfireSettings {
    fn default() -> Self {
        Self {
            machine: "cluster-a".into(),
            weather_runtime: Duration::from_millis(150),
            forecast_interval: Duration::from_millis(100),
            forecast_count: 3,
            poll_interval: Duration::from_millis(250),
            forecast_source_url: format!("mock://{GLOBAL_FORECAST_SOURCE}"),
        }
    }
}

pub fn hotspot_path(incident_id: IncidentId) -> String {
    format!("/incident/{incident_id}/hotspots")
}

pub fn config_path(incident_id: IncidentId) -> String {
    format!("/incident/{incident_id}/config")
}

/// A scripted global-forecast source holding its first published forecast.
pub fn mock_global_forecast() -> Arc<ScriptedSource> {
    let source = Arc::new(ScriptedSource::new());
    source.set(forecast_headers(0));
    source
}

/// Headers of the `n`th published global forecast run.
pub fn forecast_headers(n: u32) -> Headers {
    let hour = n * 6;
    headers([
        (
            "last-modified",
            &format!("Tue, {:02} Jul 2012 {:02}:00:00 GMT", 22 + hour / 24, hour % 24),
        ),
        ("content-length", &(1_048_576 + u64::from(n) * 4096).to_string()),
    ])
}

/// A small fire-front polygon inside `aoi`, as GeoJSON bytes.
pub fn sample_fire_front(aoi: &AreaOfInterest) -> Vec<u8> {
    let (lat, lon) = ((aoi.min_lat + aoi.max_lat) / 2.0, (aoi.min_lon + aoi.max_lon) / 2.0);
    let d = (aoi.max_lat - aoi.min_lat).min(aoi.max_lon - aoi.min_lon) / 10.0;
    let ring = [(lon - d, lat - d), (lon + d, lat - d), (lon + d, lat + d), (lon - d, lat + d), (lon - d, lat - d)];
    serde_json::to_vec(&json!({
        "type": "Polygon",
        "coordinates": [ring.iter().map(|(x, y)| [x, y]).collect::<Vec<_>>()],
    }))
    .expect("static document")
}

/// Push a hotspot observation, retrying while the endpoint is still being
/// registered by the init stage.
pub fn push_hotspot(
    edi: &Edi,
    incident_id: IncidentId,
    body: &[u8],
    metadata: &Headers,
    timeout: Duration,
) -> Result<(), EdiError> {
    let deadline = std::time::Instant::now() + timeout;
    loop {
        match edi.handle_push(&hotspot_path(incident_id), body, metadata) {
            Err(EdiError::NotFound(_)) if std::time::Instant::now() < deadline => {
                std::thread::sleep(Duration::from_millis(5));
            }
            other => return other.map(drop),
        }
    }
}

/// Create the incident's hotspot and config push endpoints and its
/// global-forecast pull endpoint, unless it already has active endpoints.
/// Returns whether anything was registered.
pub fn register_endpoints(edi: &Arc<Edi>, incident: IncidentId, settings: &WildfireSettings) -> Result<bool, EdiError> {
    if edi.endpoints_for(incident).iter().any(|e| e.active) {
        return Ok(false);
    }
    edi.register_push_endpoint(incident, &hotspot_path(incident), HOTSPOT_INGEST)?;
    edi.register_push_endpoint(incident, &config_path(incident), CONFIG_UPDATE)?;
    edi.register_pull_endpoint(incident, &settings.forecast_source_url, settings.poll_interval, GLOBAL_FORECAST_FETCH)?;
    Ok(true)
}

fn join_spec() -> JoinSpec {
    JoinSpec::new(["fire_position", "weather", "terrain", "config"]).with_sticky(["terrain", "config"])
}

fn data_id(payload: &Value, field: &str) -> anyhow::Result<DataId> {
    payload
        .get(field)
        .and_then(Value::as_str)
        .map(DataId::from)
        .ok_or_else(|| anyhow!("payload has no {field:?} data handle"))
}

fn register_doc(simenv: &SimEnv, name: &str, doc: &Value, origin: &str) -> anyhow::Result<DataId> {
    let bytes = serde_json::to_vec(doc)?;
    Ok(simenv.register_data(name, &bytes, LOCAL, origin)?)
}

fn terrain_item(simenv: &SimEnv) -> anyhow::Result<DataId> {
    if let Some(item) = simenv.data().items().into_iter().find(|i| i.name == TERRAIN_ITEM) {
        return Ok(item.data_id);
    }
    let dem = json!({
        "kind": "digital_elevation_model",
        "resolution_m": 30,
        "bounds": { "min_lat": 40.5, "min_lon": 0.15, "max_lat": 42.9, "max_lon": 3.35 },
    });
    register_doc(simenv, TERRAIN_ITEM, &dem, "static catalog")
}

/// Configuration in force: the latest accepted update, else the initial one.
fn current_config(ctx: &HandlerContext<'_>) -> anyhow::Result<WildfireConfig> {
    let latest = ctx
        .retrieve_stage_data(CONFIG_UPDATE)?
        .into_iter()
        .rev()
        .chain(ctx.retrieve_stage_data(INIT)?.into_iter().rev())
        .find_map(|r| r.payload.get("config").cloned())
        .ok_or_else(|| anyhow!("incident has no recorded configuration"))?;
    WildfireConfig::from_payload(&latest)
}

fn join_input(tag: &str, mut data: Value) -> Value {
    data["tag"] = json!(tag);
    data
}

struct Stages {
    simenv: Arc<SimEnv>,
    edi: Arc<Edi>,
    settings: WildfireSettings,
    /// Serializes the submit-or-update decision across dispatch tasks.
    dispatch: Mutex<()>,
}

impl Stages {
    fn init(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let config = WildfireConfig::from_payload(ctx.payload())?;
        let incident = ctx.incident_id();
        if ctx.retrieve_stage_data(INIT)?.is_empty() {
            ctx.persist_stage_data(INIT, json!({ "config": config }))?;
        }
        register_endpoints(&self.edi, incident, &self.settings)?;
        ctx.send(TERRAIN_EXTRACT, json!({ "area_of_interest": config.area_of_interest }))?;
        ctx.send(WFA_JOIN, join_input("config", json!({ "config": config })))?;
        Ok(())
    }

    fn hotspot_ingest(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let data = data_id(ctx.payload(), "data_id")?;
        let source = match ctx.payload().pointer("/metadata/x-hotspot-source").and_then(Value::as_str) {
            Some(s) => s.parse()?,
            None => current_config(ctx)?.hotspot_source,
        };
        ctx.send(source.branch_stage(), json!({ "data_id": data, "hotspot_source": source }))
    }

    fn extract(&self, ctx: &mut HandlerContext<'_>, label: &str) -> anyhow::Result<()> {
        let raw = data_id(ctx.payload(), "data_id")?;
        let bytes = self.simenv.read_data(&raw)?;
        let doc = json!({
            "kind": "fire_position",
            "branch": ctx.queue(),
            "transform": label,
            "observation": raw,
            "observation_bytes": bytes.len(),
        });
        let out = register_doc(&self.simenv, "fire_position", &doc, ctx.queue())?;
        let branch = ctx.queue().to_owned();
        ctx.send(WFA_JOIN, join_input("fire_position", json!({ "data_id": out, "branch": branch })))
    }

    fn global_forecast_fetch(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let doc = json!({
            "kind": "global_forecast",
            "signature": ctx.payload().get("signature"),
            "metadata": ctx.payload().get("metadata"),
        });
        let out = register_doc(&self.simenv, "global_forecast", &doc, GLOBAL_FORECAST_FETCH)?;
        ctx.send(LOCAL_FORECAST_JOB, json!({ "data_id": out }))
    }

    fn local_forecast_job(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let global = data_id(ctx.payload(), "data_id")?;
        let machine = &self.settings.machine;
        self.simenv.move_data(&global, machine)?;
        let job = self.simenv.submit_job(JobRequest {
            machine: machine.clone(),
            inputs: vec![global],
            runtime: RuntimeSpec::Batch {
                nominal_runtime: self.settings.weather_runtime,
            },
            incident_id: ctx.incident_id(),
            notify_queue: LOCAL_FORECAST_DONE.into(),
            completion_queue: None,
            parameters: json!({ "model": "mesoscale-downscaling" }),
            origin: Some(ctx.message_id()),
        })?;
        ctx.persist_stage_data(LOCAL_FORECAST_JOB, json!({ "job_id": job }))?;
        Ok(())
    }

    fn local_forecast_done(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let payload = ctx.payload();
        if payload["status"] != json!(JobStatus::Completed) {
            bail!("local forecast job {} ended {}", payload["job_id"], payload["status"]);
        }
        let out = data_id(payload, "output")?;
        ctx.send(WFA_JOIN, join_input("weather", json!({ "data_id": out })))
    }

    fn terrain_extract(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let aoi: AreaOfInterest = serde_json::from_value(ctx.payload()["area_of_interest"].clone())?;
        let dem = terrain_item(&self.simenv)?;
        let bytes = self.simenv.read_data(&dem)?;
        let doc = json!({
            "kind": "terrain_extract",
            "source": dem,
            "source_bytes": bytes.len(),
            "area_of_interest": aoi,
        });
        let out = register_doc(&self.simenv, "terrain_extract", &doc, TERRAIN_EXTRACT)?;
        ctx.send(WFA_JOIN, join_input("terrain", json!({ "data_id": out })))
    }

    /// Accepts `{"forecast_kind": ...}` (and any other config field) pushed
    /// mid-incident. A bad document is recorded and ignored rather than
    /// failing the incident.
    fn config_update(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let body = self.simenv.read_data(&data_id(ctx.payload(), "data_id")?)?;
        let merged = serde_json::from_slice::<Value>(&body)
            .map_err(anyhow::Error::from)
            .and_then(|patch| {
                let mut config = current_config(ctx)?.to_payload();
                let Value::Object(fields) = patch else {
                    bail!("config update must be a JSON object");
                };
                for (k, v) in fields {
                    config[k] = v;
                }
                WildfireConfig::from_payload(&config)
            });
        match merged {
            Ok(config) => {
                ctx.persist_stage_data(CONFIG_UPDATE, json!({ "config": config }))?;
                ctx.send(WFA_JOIN, join_input("config", json!({ "config": config })))
            }
            Err(e) => {
                warn!(incident = %ctx.incident_id(), "ignoring config update: {e:#}");
                ctx.persist_stage_data(CONFIG_UPDATE, json!({ "rejected": format!("{e:#}") }))?;
                Ok(())
            }
        }
    }

    fn wfa_join(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let tag = ctx.payload()["tag"]
            .as_str()
            .ok_or_else(|| anyhow!("join input without tag"))?
            .to_owned();
        if let Some(inputs) = ctx.join_collect(&tag, &join_spec())? {
            ctx.send(WFA_DISPATCH, json!({ "inputs": inputs }))?;
        }
        Ok(())
    }

    fn wfa_dispatch(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let inputs = &ctx.payload()["inputs"];
        let config = WildfireConfig::from_payload(&inputs["config"]["config"])?;
        let machine = self.settings.machine.clone();
        let staged: Vec<DataId> = ["fire_position", "weather", "terrain"]
            .iter()
            .map(|tag| data_id(&inputs[*tag], "data_id"))
            .collect::<anyhow::Result<_>>()?;
        for d in &staged {
            self.simenv.move_data(d, &machine)?;
        }
        let _decision = self.dispatch.lock();
        let recorded = ctx
            .retrieve_stage_data(WFA_DISPATCH)?
            .into_iter()
            .rev()
            .find_map(|r| r.payload["job_id"].as_str().map(JobId::from));
        if let Some(job) = recorded {
            let mut pushed = Vec::new();
            let mut outcome = Ok(());
            for d in &staged {
                if self.simenv.job_status(&job)?.current_inputs().contains(d) {
                    continue;
                }
                if let Err(e) = self.simenv.push_data_to_job(&job, d) {
                    outcome = Err(e);
                    break;
                }
                pushed.push(d.clone());
            }
            match outcome {
                Ok(()) => {
                    ctx.persist_stage_data(
                        WFA_DISPATCH,
                        json!({ "action": "update", "job_id": job, "pushed": pushed, "forecast_kind": config.forecast_kind }),
                    )?;
                    info!(incident = %ctx.incident_id(), %job, "updated running fire-spread job");
                    return Ok(());
                }
                // The job ended or did not survive a restart; start over.
                Err(SimError::JobNotRunning { .. } | SimError::UnknownJob(_)) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let job = self.simenv.submit_job(JobRequest {
            machine,
            inputs: staged,
            runtime: RuntimeSpec::Persistent {
                emit_interval: self.settings.forecast_interval,
                emit_count: self.settings.forecast_count,
            },
            incident_id: ctx.incident_id(),
            notify_queue: FORECAST_RESULT.into(),
            completion_queue: Some(WFA_COMPLETE.into()),
            parameters: json!({ "model": "fire-spread", "forecast_kind": config.forecast_kind }),
            origin: Some(ctx.message_id()),
        })?;
        ctx.persist_stage_data(
            WFA_DISPATCH,
            json!({ "action": "submit", "job_id": job, "forecast_kind": config.forecast_kind }),
        )?;
        info!(incident = %ctx.incident_id(), %job, "submitted fire-spread job");
        Ok(())
    }

    fn forecast_result(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let payload = ctx.payload().clone();
        let job = payload["job_id"].as_str().ok_or_else(|| anyhow!("output without job_id"))?;
        let index = payload["index"].as_u64().ok_or_else(|| anyhow!("output without index"))?;
        let output = data_id(&payload, "output")?;
        let kind = ctx
            .retrieve_stage_data(WFA_DISPATCH)?
            .into_iter()
            .rev()
            .find_map(|r| serde_json::from_value::<ForecastKind>(r.payload["forecast_kind"].clone()).ok())
            .map_or_else(|| current_config(ctx).map(|c| c.forecast_kind), Ok)?;
        let doc = json!({
            "kind": "forecast",
            "output_mode": kind.output_mode(),
            "job_id": job,
            "index": index,
            "simulation_output": output,
            "inputs": payload["inputs"],
        });
        let name = format!("forecast/{}", kind.output_mode());
        let result = register_doc(&self.simenv, &name, &doc, &result_origin(ctx.incident_id()))?;
        ctx.persist_stage_data(
            FORECAST_RESULT,
            json!({
                "job_id": job,
                "index": index,
                "forecast_kind": kind,
                "output_mode": kind.output_mode(),
                "result": result,
            }),
        )?;
        maybe_complete(ctx, job)
    }

    fn wfa_complete(&self, ctx: &mut HandlerContext<'_>) -> anyhow::Result<()> {
        let payload = ctx.payload().clone();
        let job = payload["job_id"].as_str().ok_or_else(|| anyhow!("completion without job_id"))?;
        if payload["status"] != json!(JobStatus::Completed) {
            bail!("fire-spread job {job} ended {}", payload["status"]);
        }
        let outputs = payload["outputs"].as_array().map_or(0, Vec::len);
        ctx.persist_stage_data(WFA_COMPLETE, json!({ "job_id": job, "outputs": outputs }))?;
        maybe_complete(ctx, job)
    }
}

/// Complete the incident once `job` has finished and every output has a
/// result. forecast_result and wfa_complete both persist before checking, so
/// whichever runs last sees both sides.
fn maybe_complete(ctx: &mut HandlerContext<'_>, job: &str) -> anyhow::Result<()> {
    let Some(expected) = ctx
        .retrieve_stage_data(WFA_COMPLETE)?
        .iter()
        .find(|r| r.payload["job_id"] == json!(job))
        .and_then(|r| r.payload["outputs"].as_u64())
    else {
        return Ok(());
    };
    let indices: BTreeSet<u64> = ctx
        .retrieve_stage_data(FORECAST_RESULT)?
        .iter()
        .filter(|r| r.payload["job_id"] == json!(job))
        .filter_map(|r| r.payload["index"].as_u64())
        .collect();
    if indices.len() as u64 >= expected {
        ctx.complete_incident();
    }
    Ok(())
}

/// Build the wildfire workflow bound to an environment and EDI instance.
/// Registers the static terrain item if the catalog lacks it.
pub fn build_wildfire_workflow(
    simenv: Arc<SimEnv>,
    edi: Arc<Edi>,
    settings: WildfireSettings,
) -> anyhow::Result<WorkflowDefinition> {
    if !simenv.data().is_location(&settings.machine) {
        bail!("wildfire machine {:?} is not in the roster", settings.machine);
    }
    terrain_item(&simenv)?;
    let stages = Arc::new(Stages {
        simenv,
        edi,
        settings,
        dispatch: Mutex::new(()),
    });
    type Method = fn(&Stages, &mut HandlerContext<'_>) -> anyhow::Result<()>;
    let plain: [(&str, Method); 10] = [
        (INIT, Stages::init),
        (HOTSPOT_INGEST, Stages::hotspot_ingest),
        (GLOBAL_FORECAST_FETCH, Stages::global_forecast_fetch),
        (LOCAL_FORECAST_JOB, Stages::local_forecast_job),
        (LOCAL_FORECAST_DONE, Stages::local_forecast_done),
        (TERRAIN_EXTRACT, Stages::terrain_extract),
        (CONFIG_UPDATE, Stages::config_update),
        (WFA_DISPATCH, Stages::wfa_dispatch),
        (FORECAST_RESULT, Stages::forecast_result),
        (WFA_COMPLETE, Stages::wfa_complete),
    ];
    let mut def = WorkflowDefinition::new(KIND, INIT).on_init(|ctx| {
        WildfireConfig::from_payload(ctx.initial_payload)?;
        Ok(())
    });
    for (queue, method) in plain {
        let s = Arc::clone(&stages);
        def = def.stage(StageRegistration::new(queue, move |ctx| method(&s, ctx)));
    }
    let branches = [
        (MODIS_EXTRACT, "modis-hotspot-extract"),
        (VIIRS_EXTRACT, "viirs-hotspot-extract"),
        (GROUND_FORMAT, "ground-observation-format"),
    ];
    for (queue, label) in branches {
        let s = Arc::clone(&stages);
        def = def.stage(StageRegistration::new(queue, move |ctx| s.extract(ctx, label)));
    }
    let s = Arc::clone(&stages);
    def = def.stage(StageRegistration::critical(WFA_JOIN, move |ctx| s.wfa_join(ctx)));
    Ok(def)
}

fn result_origin(incident_id: IncidentId) -> String {
    format!("{FORECAST_RESULT} {incident_id}")
}

/// Result documents registered by forecast_result for an incident, keyed by
/// output index. Read from the catalog, so they outlive incident cleanup.
pub fn recorded_results(simenv: &SimEnv, incident_id: IncidentId) -> anyhow::Result<BTreeMap<u64, Value>> {
    let origin = result_origin(incident_id);
    let mut out = BTreeMap::new();
    for item in simenv.data().items().into_iter().filter(|i| i.origin == origin) {
        let doc: Value = serde_json::from_slice(&simenv.read_data(&item.data_id)?)?;
        if let Some(index) = doc["index"].as_u64() {
            out.insert(index, doc);
        }
    }
    Ok(out)
}
