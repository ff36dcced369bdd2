use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context as _};
use serde::Serialize;
use serde_json::Value;
use tracing::{info, warn};

use crate::broker::Broker;
use crate::demo_wildfire::{self, WildfireConfig};
use crate::edi::{Edi, Endpoint, Headers, ScriptedSource};
use crate::ids::IncidentId;
use crate::simenv::SimEnv;
use crate::statestore::{IncidentRecord, IncidentStatus, StageStatistics, StateStore, StatsScope, StoreError};
use crate::wfcore::{Runtime, WorkflowDefinition, WorkflowError};
use crate::workers::WorkerPool;

use super::config::EngineConfig;
use super::graph::TaskGraph;

/// Everything the API reports about one incident.
#[derive(Clone, Debug, Serialize)]
pub struct IncidentDetail {
    pub incident: IncidentRecord,
    pub task_graph: TaskGraph,
    pub statistics: Vec<StageStatistics>,
    /// Active EDI endpoints only.
    pub endpoints: Vec<Endpoint>,
}

#[derive(Clone, Debug)]
pub struct DemoRun {
    pub incident_id: IncidentId,
    pub record: IncidentRecord,
    pub graph: TaskGraph,
    pub elapsed: Duration,
}

/// Single-process engine: broker, state store, workflow runtime, simulated
/// environment, EDI and worker pool.
pub struct Engine {
    config: EngineConfig,
    broker: Arc<Broker>,
    store: Arc<StateStore>,
    runtime: Arc<Runtime>,
    simenv: Arc<SimEnv>,
    edi: Arc<Edi>,
    pool: WorkerPool,
    forecast_source: Arc<ScriptedSource>,
    recovered: usize,
    stopped: AtomicBool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("data_dir", &self.config.data_dir)
            .field("workers", &self.pool.worker_count())
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn start(config: EngineConfig) -> anyhow::Result<Arc<Self>> {
        Self::start_with(config, Vec::new())
    }

    /// Start with additional workflows registered next to the wildfire demo.
    ///
    /// Order matters: unacked deliveries are restored before any worker
    /// attaches, and stale stage locks are released before handlers run.
    pub fn start_with(config: EngineConfig, extra: Vec<WorkflowDefinition>) -> anyhow::Result<Arc<Self>> {
        config.validate()?;
        let dir = &config.data_dir;
        std::fs::create_dir_all(dir).with_context(|| format!("creating data dir {}", dir.display()))?;

        let broker = Arc::new(Broker::open(config.broker_config()).context("opening broker")?);
        let report = broker.recover().context("recovering broker")?;
        let store = Arc::new(StateStore::open(dir).context("opening state store")?);
        let stale = store.release_all_locks()?;
        if stale > 0 {
            warn!(stale, "released stage locks left by a previous run");
        }
        let runtime = Arc::new(Runtime::new(broker.clone(), store.clone())?);
        let simenv = Arc::new(SimEnv::open(dir, &config.simulation).context("opening simulated environment")?);
        simenv.set_notifier(Arc::new(runtime.outlet()));
        let edi = Edi::new(runtime.outlet(), simenv.clone(), config.edi_config());
        let forecast_source = demo_wildfire::mock_global_forecast();
        edi.register_source(demo_wildfire::GLOBAL_FORECAST_SOURCE, forecast_source.clone());
        runtime.add_incident_listener(edi.clone());

        let settings = config.wildfire.settings();
        runtime.register_workflow(demo_wildfire::build_wildfire_workflow(
            simenv.clone(),
            edi.clone(),
            settings.clone(),
        )?)?;
        for def in extra {
            runtime.register_workflow(def)?;
        }

        // Endpoints live in memory; give surviving wildfire incidents theirs back.
        for rec in store.incidents()? {
            let initialized = !store.retrieve_stage_data(rec.incident_id, demo_wildfire::INIT)?.is_empty();
            if rec.workflow_kind == demo_wildfire::KIND && rec.status == IncidentStatus::Active && initialized {
                demo_wildfire::register_endpoints(&edi, rec.incident_id, &settings)?;
            }
        }
        let cleanups = runtime.resume_cleanups()?;
        let pool = WorkerPool::new(runtime.clone(), config.pool_config())?;
        pool.start()?;
        info!(
            "{} recovered; {} workers; data dir {}",
            report.restored,
            config.workers,
            dir.display()
        );
        if cleanups > 0 {
            info!(cleanups, "resumed pending incident cleanups");
        }
        Ok(Arc::new(Self {
            config,
            broker,
            store,
            runtime,
            simenv,
            edi,
            pool,
            forecast_source,
            recovered: report.restored,
            stopped: AtomicBool::new(false),
        }))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn store(&self) -> &Arc<StateStore> {
        &self.store
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.runtime
    }

    pub fn simenv(&self) -> &Arc<SimEnv> {
        &self.simenv
    }

    pub fn edi(&self) -> &Arc<Edi> {
        &self.edi
    }

    pub fn pool(&self) -> &WorkerPool {
        &self.pool
    }

    /// The scripted source behind `mock://global-forecast`.
    pub fn forecast_source(&self) -> &Arc<ScriptedSource> {
        &self.forecast_source
    }

    /// Deliveries restored to their queues at startup.
    pub fn recovered(&self) -> usize {
        self.recovered
    }

    pub fn create_incident(&self, kind: &str, label: &str, payload: Value) -> Result<IncidentId, WorkflowError> {
        self.runtime.start_incident(kind, label, payload)
    }

    pub fn cancel_incident(&self, id: IncidentId) -> Result<(), WorkflowError> {
        self.runtime.cancel_incident(id)
    }

    pub fn incidents(&self) -> Result<Vec<IncidentRecord>, StoreError> {
        self.store.incidents()
    }

    pub fn task_graph(&self, id: IncidentId) -> Result<TaskGraph, StoreError> {
        Ok(TaskGraph::from_log(&self.store.message_log(id)?))
    }

    pub fn incident_detail(&self, id: IncidentId) -> Result<IncidentDetail, StoreError> {
        let incident = self.store.incident(id)?;
        Ok(IncidentDetail {
            incident,
            task_graph: self.task_graph(id)?,
            statistics: self.store.stage_statistics(&StatsScope::Incident(id))?,
            endpoints: self.edi.endpoints_for(id).into_iter().filter(|e| e.active).collect(),
        })
    }

    pub fn workflow_statistics(&self, kind: &str) -> Result<Vec<StageStatistics>, StoreError> {
        self.store.stage_statistics(&StatsScope::WorkflowKind(kind.to_owned()))
    }

    /// Poll until `pred` holds for the incident record.
    pub fn wait_for(
        &self,
        id: IncidentId,
        timeout: Duration,
        pred: impl Fn(&IncidentRecord) -> bool,
    ) -> anyhow::Result<IncidentRecord> {
        let deadline = Instant::now() + timeout;
        loop {
            let rec = self.store.incident(id)?;
            if pred(&rec) {
                return Ok(rec);
            }
            if Instant::now() >= deadline {
                bail!("incident {id} still {:?} after {timeout:?}", rec.status);
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    /// Wait until the incident is terminal and its cleanup has run.
    pub fn wait_until_cleared(&self, id: IncidentId, timeout: Duration) -> anyhow::Result<IncidentRecord> {
        self.wait_for(id, timeout, |r| r.status.is_terminal() && r.cleared_timestamp.is_some())
    }

    /// Start a wildfire incident, push one fire-front observation and wait
    /// for the run to finish.
    pub fn run_wildfire_demo(&self, config: WildfireConfig, label: &str, timeout: Duration) -> anyhow::Result<DemoRun> {
        let started = Instant::now();
        let id = self.create_incident(demo_wildfire::KIND, label, config.to_payload())?;
        let body = demo_wildfire::sample_fire_front(&config.area_of_interest);
        demo_wildfire::push_hotspot(&self.edi, id, &body, &Headers::new(), timeout)?;
        let record = self.wait_until_cleared(id, timeout)?;
        if record.status != IncidentStatus::Completed {
            return Err(anyhow!("wildfire incident {id} ended {:?}", record.status));
        }
        Ok(DemoRun {
            incident_id: id,
            graph: self.task_graph(id)?,
            record,
            elapsed: started.elapsed(),
        })
    }

    /// Graceful stop: workers finish their current task, pollers and the
    /// simulation clock stop.
    pub fn shutdown(&self) {
        if self.stopped.swap(true, Ordering::AcqRel) {
            return;
        }
        let _ = self.pool.stop(true);
        self.edi.shutdown();
        self.simenv.shutdown();
    }

    /// Stop as if the process died: nothing more is written, in-flight
    /// deliveries stay unacked for the next start to recover.
    pub fn kill(&self) {
        if self.stopped.swap(true, Ordering::AcqRel) {
            return;
        }
        self.broker.halt();
        self.store.halt();
        self.simenv.halt();
        self.edi.halt();
        let _ = self.pool.stop(false);
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}
