//! Simulated execution environment: a data catalog with movement between
//! locations, and a job scheduler for a roster of mock HPC machines.
//!
//! Jobs advance on a simulation clock. In [`ClockMode::Wall`] a background
//! thread fires job events as real time passes; in [`ClockMode::Manual`]
//! nothing happens until [`SimEnv::advance`] is called, which makes message
//! sequences reproducible.

mod data;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::ids::{IncidentId, MessageId};
use crate::journal::JournalError;
use crate::wfcore::Outlet;

pub use data::{sha256_hex, DataId, DataItem, DataManager, Transfer, LOCAL};

pub const DEFAULT_TRANSFER_RATE: u64 = 10 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown location {0:?}")]
    UnknownLocation(String),
    #[error("unknown data item {0}")]
    UnknownData(DataId),
    #[error("unknown machine {0:?}")]
    UnknownMachine(String),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("input {data_id} is at {location:?}, not staged on {machine:?}")]
    NotStaged {
        data_id: DataId,
        location: String,
        machine: String,
    },
    #[error("job {job_id} is {status:?}, not RUNNING")]
    JobNotRunning { job_id: JobId, status: JobStatus },
    #[error("job {0} is not a persistent job")]
    NotPersistent(JobId),
    #[error("invalid job runtime: {0}")]
    InvalidRuntime(String),
    #[error("invalid machine roster: {0}")]
    InvalidRoster(String),
    #[error("simulation environment has been halted")]
    Halted,
    #[error("data store i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(String);

impl JobId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for JobId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineConfig {
    pub name: String,
    pub max_concurrent_jobs: usize,
    pub speed_factor: f64,
    /// Chance that a job on this machine ends FAILED.
    #[serde(default)]
    pub failure_probability: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Wall,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_machines")]
    pub machines: Vec<MachineConfig>,
    #[serde(default = "default_rate")]
    pub transfer_bytes_per_second: u64,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_rate() -> u64 {
    DEFAULT_TRANSFER_RATE
}

fn default_machines() -> Vec<MachineConfig> {
    vec![
        MachineConfig {
            name: "cluster-a".into(),
            max_concurrent_jobs: 4,
            speed_factor: 1.0,
            failure_probability: 0.0,
        },
        MachineConfig {
            name: "cluster-b".into(),
            max_concurrent_jobs: 2,
            speed_factor: 2.0,
            failure_probability: 0.0,
        },
    ]
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            machines: default_machines(),
            transfer_bytes_per_second: DEFAULT_TRANSFER_RATE,
            clock: ClockMode::Wall,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidRoster(msg));
        if self.machines.is_empty() {
            return bad("machines: at least one machine is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        for (i, m) in self.machines.iter().enumerate() {
            if m.name.is_empty() || m.name == LOCAL || m.name.contains(['/', '\\']) || m.name.starts_with('.') {
                return bad(format!("machines[{i}].name: {:?} is not a usable machine name", m.name));
            }
            if !seen.insert(&m.name) {
                return bad(format!("machines[{i}].name: duplicate machine {:?}", m.name));
            }
            if m.max_concurrent_jobs == 0 {
                return bad(format!("machines[{i}].max_concurrent_jobs: must be at least 1"));
            }
            if !(m.speed_factor.is_finite() && m.speed_factor > 0.0) {
                return bad(format!("machines[{i}].speed_factor: must be a positive number"));
            }
            if !(0.0..=1.0).contains(&m.failure_probability) {
                return bad(format!("machines[{i}].failure_probability: must lie in [0, 1]"));
            }
        }
        if self.transfer_bytes_per_second == 0 {
            return bad("transfer_bytes_per_second: must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobKind {
    Batch,
    Persistent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Queued,
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuntimeSpec {
    Batch {
        #[serde(with = "millis")]
        nominal_runtime: Duration,
    },
    Persistent {
        #[serde(with = "millis")]
        emit_interval: Duration,
        emit_count: u32,
    },
}

impl RuntimeSpec {
    pub fn kind(&self) -> JobKind {
        match self {
            Self::Batch { .. } => JobKind::Batch,
            Self::Persistent { .. } => JobKind::Persistent,
        }
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobRequest {
    pub machine: String,
    pub inputs: Vec<DataId>,
    pub runtime: RuntimeSpec,
    pub incident_id: IncidentId,
    pub notify_queue: String,
    /// Where the final completion message goes; `notify_queue` if unset.
    pub completion_queue: Option<String>,
    /// Opaque parameters echoed in every notification.
    pub parameters: Value,
    /// Message whose handler submitted the job; parent of its notifications.
    pub origin: Option<MessageId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Job {
    pub job_id: JobId,
    pub machine: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub incident_id: IncidentId,
    pub notify_queue: String,
    pub completion_queue: Option<String>,
    pub input_data: Vec<DataId>,
    /// Inputs added while running, in push order.
    pub pushed_inputs: Vec<DataId>,
    pub runtime: RuntimeSpec,
    pub outputs: Vec<DataId>,
    pub parameters: Value,
    pub origin: Option<MessageId>,
    /// Simulation-clock instants in milliseconds.
    pub submitted_at_ms: u64,
    pub started_at_ms: Option<u64>,
    pub finished_at_ms: Option<u64>,
}

impl Job {
    /// Current input set: submitted inputs followed by pushed ones.
    pub fn current_inputs(&self) -> Vec<DataId> {
        self.input_data.iter().chain(&self.pushed_inputs).cloned().collect()
    }
}

/// A message the environment wants delivered to a workflow queue.
#[derive(Clone, Debug, PartialEq)]
pub struct JobNotification {
    pub incident_id: IncidentId,
    pub queue: String,
    pub payload: Value,
    pub parent: Option<MessageId>,
}

pub trait JobNotifier: Send + Sync {
    fn notify(&self, notification: JobNotification) -> Result<MessageId, String>;
}

impl JobNotifier for Outlet {
    fn notify(&self, n: JobNotification) -> Result<MessageId, String> {
        self.publish(n.incident_id, &n.queue, n.payload, n.parent)
            .map_err(|e| e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Emit,
    Finish,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    due_ms: u64,
    seq: u64,
    job: JobId,
    kind: EventKind,
}

struct MachineState {
    config: MachineConfig,
    running: usize,
    waiting: VecDeque<JobId>,
}

struct JobState {
    job: Job,
    emitted: u32,
    fails: bool,
}

struct Sched {
    machines: BTreeMap<String, MachineState>,
    jobs: BTreeMap<JobId, JobState>,
    events: BinaryHeap<Reverse<Event>>,
    next_job: u64,
    next_seq: u64,
    manual_now_ms: u64,
    rng: ChaCha8Rng,
    notifier: Option<Arc<dyn JobNotifier>>,
    /// Every notification handed to the notifier, in order.
    sent: Vec<JobNotification>,
    halted: bool,
    shutdown: bool,
}

struct Shared {
    data: DataManager,
    clock: ClockMode,
    started: Instant,
    sched: Mutex<Sched>,
    wake: Condvar,
}

pub struct SimEnv {
    shared: Arc<Shared>,
    ticker: Mutex<Option<JoinHandle<()>>>,
}

impl fmt::Debug for SimEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimEnv").field("clock", &self.shared.clock).finish_non_exhaustive()
    }
}

fn scaled_ms(d: Duration, speed: f64) -> u64 {
    (d.as_secs_f64() * 1000.0 / speed).round() as u64
}

impl Shared {
    fn now_ms(&self, sched: &Sched) -> u64 {
        match self.clock {
            ClockMode::Manual => sched.manual_now_ms,
            ClockMode::Wall => self.started.elapsed().as_millis() as u64,
        }
    }

    fn push_event(sched: &mut Sched, due_ms: u64, job: JobId, kind: EventKind) {
        sched.next_seq += 1;
        let seq = sched.next_seq;
        sched.events.push(Reverse(Event {
            due_ms,
            seq,
            job,
            kind,
        }));
    }

    fn start_job(&self, sched: &mut Sched, job_id: &JobId, now_ms: u64) {
        let Sched { machines, jobs, rng, .. } = &mut *sched;
        let state = jobs.get_mut(job_id).expect("scheduled job exists");
        let machine = machines.get_mut(&state.job.machine).expect("job machine exists");
        machine.running += 1;
        state.job.status = JobStatus::Running;
        state.job.started_at_ms = Some(now_ms);
        let p = machine.config.failure_probability;
        state.fails = p > 0.0 && rng.random::<f64>() < p;
        let speed = machine.config.speed_factor;
        let (due, kind) = match state.job.runtime {
            RuntimeSpec::Batch { nominal_runtime } => (now_ms + scaled_ms(nominal_runtime, speed), EventKind::Finish),
            RuntimeSpec::Persistent { emit_interval, .. } if state.fails => {
                (now_ms + scaled_ms(emit_interval, speed), EventKind::Finish)
            }
            RuntimeSpec::Persistent { emit_interval, .. } => (now_ms + scaled_ms(emit_interval, speed), EventKind::Emit),
        };
        debug!(job = %job_id, machine = %state.job.machine, "job running");
        Self::push_event(sched, due, job_id.clone(), kind);
    }

    fn notify(&self, sched: &mut Sched, notification: JobNotification) {
        sched.sent.push(notification.clone());
        if let Some(notifier) = &sched.notifier {
            if let Err(e) = notifier.notify(notification) {
                debug!("job notification not delivered: {e}");
            }
        }
    }

    fn output_name(job: &Job, index: Option<u32>) -> String {
        match index {
            Some(i) => format!("{}-output-{i}", job.job_id),
            None => format!("{}-output", job.job_id),
        }
    }

    fn register_output(&self, job: &Job, index: Option<u32>) -> Option<DataId> {
        let content = json!({
            "job_id": job.job_id,
            "index": index,
            "inputs": job.current_inputs(),
            "parameters": job.parameters,
        });
        match self.data.register_data(
            &Self::output_name(job, index),
            content.to_string().as_bytes(),
            &job.machine,
            &format!("job {}", job.job_id),
        ) {
            Ok(id) => Some(id),
            Err(e) => {
                warn!(job = %job.job_id, "could not register job output: {e}");
                None
            }
        }
    }

    fn process(&self, sched: &mut Sched, event: Event) {
        let now = event.due_ms;
        let Some(state) = sched.jobs.get(&event.job) else {
            return;
        };
        if state.job.status != JobStatus::Running {
            return;
        }
        match event.kind {
            EventKind::Emit => {
                let job = state.job.clone();
                let index = state.emitted + 1;
                let output = self.register_output(&job, Some(index));
                let state = sched.jobs.get_mut(&event.job).expect("checked above");
                state.emitted = index;
                if let Some(o) = &output {
                    state.job.outputs.push(o.clone());
                }
                let RuntimeSpec::Persistent {
                    emit_interval,
                    emit_count,
                } = job.runtime
                else {
                    unreachable!("only persistent jobs emit");
                };
                let speed = sched.machines[&job.machine].config.speed_factor;
                let next = if index >= emit_count {
                    EventKind::Finish
                } else {
                    EventKind::Emit
                };
                let due = if next == EventKind::Finish {
                    now
                } else {
                    now + scaled_ms(emit_interval, speed)
                };
                Self::push_event(sched, due, event.job.clone(), next);
                self.notify(
                    sched,
                    JobNotification {
                        incident_id: job.incident_id,
                        queue: job.notify_queue.clone(),
                        payload: json!({
                            "event": "output",
                            "job_id": job.job_id,
                            "index": index,
                            "output": output,
                            "inputs": job.current_inputs(),
                            "parameters": job.parameters,
                        }),
                        parent: job.origin,
                    },
                );
            }
            EventKind::Finish => {
                let fails = state.fails;
                let mut job = state.job.clone();
                let output = match (fails, job.kind) {
                    (false, JobKind::Batch) => self.register_output(&job, None),
                    _ => None,
                };
                job.status = if fails { JobStatus::Failed } else { JobStatus::Completed };
                job.finished_at_ms = Some(now);
                if let Some(o) = &output {
                    job.outputs.push(o.clone());
                }
                let machine = sched.machines.get_mut(&job.machine).expect("job machine exists");
                machine.running -= 1;
                let next = machine.waiting.pop_front();
                sched.jobs.get_mut(&event.job).expect("checked above").job = job.clone();
                debug!(job = %job.job_id, status = ?job.status, "job finished");
                self.notify(
                    sched,
                    JobNotification {
                        incident_id: job.incident_id,
                        queue: job.completion_queue.clone().unwrap_or_else(|| job.notify_queue.clone()),
                        payload: json!({
                            "event": "completion",
                            "job_id": job.job_id,
                            "status": job.status,
                            "output": output,
                            "outputs": job.outputs,
                            "inputs": job.current_inputs(),
                            "parameters": job.parameters,
                        }),
                        parent: job.origin,
                    },
                );
                if let Some(next) = next {
                    self.start_job(sched, &next, now);
                }
            }
        }
    }

    /// Fire every event due at or before `until_ms`, in order.
    fn run_due(&self, sched: &mut Sched, until_ms: u64) {
        while let Some(Reverse(head)) = sched.events.peek() {
            if head.due_ms > until_ms {
                break;
            }
            let Reverse(event) = sched.events.pop().expect("peeked");
            if self.clock == ClockMode::Manual {
                sched.manual_now_ms = event.due_ms;
            }
            self.process(sched, event);
        }
    }
}

fn ticker(shared: Arc<Shared>) {
    let mut sched = shared.sched.lock();
    loop {
        if sched.shutdown || sched.halted {
            return;
        }
        let now = shared.now_ms(&sched);
        shared.run_due(&mut sched, now);
        match sched.events.peek() {
            Some(Reverse(head)) => {
                let wait = head.due_ms.saturating_sub(shared.now_ms(&sched));
                if wait > 0 {
                    shared.wake.wait_for(&mut sched, Duration::from_millis(wait));
                }
            }
            None => {
                shared.wake.wait(&mut sched);
            }
        }
    }
}

impl SimEnv {
    pub fn open(data_dir: &Path, config: &SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let data = DataManager::open(
            data_dir,
            config.machines.iter().map(|m| m.name.clone()),
            config.transfer_bytes_per_second,
        )?;
        let machines = config
            .machines
            .iter()
            .map(|m| {
                (
                    m.name.clone(),
                    MachineState {
                        config: m.clone(),
                        running: 0,
                        waiting: VecDeque::new(),
                    },
                )
            })
            .collect();
        let shared = Arc::new(Shared {
            data,
            clock: config.clock,
            started: Instant::now(),
            sched: Mutex::new(Sched {
                machines,
                jobs: BTreeMap::new(),
                events: BinaryHeap::new(),
                next_job: 1,
                next_seq: 0,
                manual_now_ms: 0,
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                notifier: None,
                sent: Vec::new(),
                halted: false,
                shutdown: false,
            }),
            wake: Condvar::new(),
        });
        let ticker_handle = match config.clock {
            ClockMode::Wall => {
                let s = Arc::clone(&shared);
                Some(
                    thread::Builder::new()
                        .name("simenv-clock".into())
                        .spawn(move || ticker(s))
                        .expect("spawn simulation clock"),
                )
            }
            ClockMode::Manual => None,
        };
        Ok(Self {
            shared,
            ticker: Mutex::new(ticker_handle),
        })
    }

    pub fn set_notifier(&self, notifier: Arc<dyn JobNotifier>) {
        self.shared.sched.lock().notifier = Some(notifier);
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.shared.clock
    }

    pub fn data(&self) -> &DataManager {
        &self.shared.data
    }

    pub fn machines(&self) -> Vec<MachineConfig> {
        self.shared
            .sched
            .lock()
            .machines
            .values()
            .map(|m| m.config.clone())
            .collect()
    }

    /// Current simulation time in milliseconds.
    pub fn now_ms(&self) -> u64 {
        let sched = self.shared.sched.lock();
        self.shared.now_ms(&sched)
    }

    // ---- data ----

    pub fn register_data(&self, name: &str, content: &[u8], location: &str, origin: &str) -> Result<DataId, SimError> {
        self.shared.data.register_data(name, content, location, origin)
    }

    pub fn read_data(&self, data_id: &DataId) -> Result<Vec<u8>, SimError> {
        self.shared.data.read_data(data_id)
    }

    pub fn data_item(&self, data_id: &DataId) -> Result<DataItem, SimError> {
        self.shared.data.item(data_id)
    }

    /// Move an item to `destination`. In wall-clock mode the call blocks for
    /// the simulated transfer time; in manual mode it returns at once.
    pub fn move_data(&self, data_id: &DataId, destination: &str) -> Result<Transfer, SimError> {
        let transfer = self.shared.data.move_data(data_id, destination)?;
        if self.shared.clock == ClockMode::Wall && !transfer.delay.is_zero() {
            thread::sleep(transfer.delay);
        }
        Ok(transfer)
    }

    // ---- jobs ----

    pub fn submit_job(&self, request: JobRequest) -> Result<JobId, SimError> {
        let mut sched = self.shared.sched.lock();
        if sched.halted {
            return Err(SimError::Halted);
        }
        if !sched.machines.contains_key(&request.machine) {
            return Err(SimError::UnknownMachine(request.machine));
        }
        match request.runtime {
            RuntimeSpec::Persistent { emit_count: 0, .. } => {
                return Err(SimError::InvalidRuntime("emit_count must be at least 1".into()))
            }
            RuntimeSpec::Persistent { emit_interval, .. } if emit_interval.is_zero() => {
                return Err(SimError::InvalidRuntime("emit_interval must be positive".into()))
            }
            _ => {}
        }
        for data_id in &request.inputs {
            let item = self.shared.data.item(data_id)?;
            if item.location != request.machine {
                return Err(SimError::NotStaged {
                    data_id: data_id.clone(),
                    location: item.location,
                    machine: request.machine,
                });
            }
        }
        let now = self.shared.now_ms(&sched);
        let job_id = JobId(format!("job-{}-{:06}", self.shared.data.epoch(), sched.next_job));
        sched.next_job += 1;
        let job = Job {
            job_id: job_id.clone(),
            machine: request.machine.clone(),
            kind: request.runtime.kind(),
            status: JobStatus::Queued,
            incident_id: request.incident_id,
            notify_queue: request.notify_queue,
            completion_queue: request.completion_queue,
            input_data: request.inputs,
            pushed_inputs: Vec::new(),
            runtime: request.runtime,
            outputs: Vec::new(),
            parameters: request.parameters,
            origin: request.origin,
            submitted_at_ms: now,
            started_at_ms: None,
            finished_at_ms: None,
        };
        sched.jobs.insert(
            job_id.clone(),
            JobState {
                job,
                emitted: 0,
                fails: false,
            },
        );
        let machine = sched.machines.get_mut(&request.machine).expect("checked above");
        if machine.running < machine.config.max_concurrent_jobs {
            self.shared.start_job(&mut sched, &job_id, now);
        } else {
            machine.waiting.push_back(job_id.clone());
        }
        self.shared.wake.notify_all();
        Ok(job_id)
    }

    /// Add an input to a queued or running persistent job. Later outputs list
    /// it among their inputs.
    pub fn push_data_to_job(&self, job_id: &JobId, data_id: &DataId) -> Result<(), SimError> {
        let mut sched = self.shared.sched.lock();
        let state = sched
            .jobs
            .get_mut(job_id)
            .ok_or_else(|| SimError::UnknownJob(job_id.clone()))?;
        if state.job.kind != JobKind::Persistent {
            return Err(SimError::NotPersistent(job_id.clone()));
        }
        if !matches!(state.job.status, JobStatus::Queued | JobStatus::Running) {
            return Err(SimError::JobNotRunning {
                job_id: job_id.clone(),
                status: state.job.status,
            });
        }
        let item = self.shared.data.item(data_id)?;
        if item.location != state.job.machine {
            return Err(SimError::NotStaged {
                data_id: data_id.clone(),
                location: item.location,
                machine: state.job.machine.clone(),
            });
        }
        state.job.pushed_inputs.push(data_id.clone());
        Ok(())
    }

    pub fn job_status(&self, job_id: &JobId) -> Result<Job, SimError> {
        self.shared
            .sched
            .lock()
            .jobs
            .get(job_id)
            .map(|s| s.job.clone())
            .ok_or_else(|| SimError::UnknownJob(job_id.clone()))
    }

    pub fn jobs(&self) -> Vec<Job> {
        self.shared.sched.lock().jobs.values().map(|s| s.job.clone()).collect()
    }

    pub fn jobs_for_incident(&self, incident_id: IncidentId) -> Vec<Job> {
        self.shared
            .sched
            .lock()
            .jobs
            .values()
            .filter(|s| s.job.incident_id == incident_id)
            .map(|s| s.job.clone())
            .collect()
    }

    /// Notifications emitted so far, in order.
    pub fn notifications(&self) -> Vec<JobNotification> {
        self.shared.sched.lock().sent.clone()
    }

    /// Advance the manual clock by `d`, firing every event that falls due.
    /// Has no effect in wall-clock mode.
    pub fn advance(&self, d: Duration) {
        if self.shared.clock != ClockMode::Manual {
            return;
        }
        let mut sched = self.shared.sched.lock();
        if sched.halted {
            return;
        }
        let target = sched.manual_now_ms + d.as_millis() as u64;
        self.shared.run_due(&mut sched, target);
        sched.manual_now_ms = target;
    }

    /// Time until the next pending job event, if any.
    pub fn next_event_in(&self) -> Option<Duration> {
        let sched = self.shared.sched.lock();
        let now = self.shared.now_ms(&sched);
        sched
            .events
            .peek()
            .map(|Reverse(e)| Duration::from_millis(e.due_ms.saturating_sub(now)))
    }

    /// Stop firing events, as if the process had died. Jobs are abandoned.
    pub fn halt(&self) {
        self.shared.sched.lock().halted = true;
        self.shared.wake.notify_all();
    }

    pub fn shutdown(&self) {
        self.shared.sched.lock().shutdown = true;
        self.shared.wake.notify_all();
        if let Some(handle) = self.ticker.lock().take() {
            let _ = handle.join();
        }
    }
}

impl Drop for SimEnv {
    fn drop(&mut self) {
        self.shutdown();
    }
}
