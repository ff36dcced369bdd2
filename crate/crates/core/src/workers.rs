//! Task-farm pool: every worker subscribes to every queue, holds at most one
//! delivery at a time and runs it through [`Runtime::execute_delivery_with`].

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;
use tracing::{debug, warn};

use crate::broker::BrokerError;
use crate::ids::ConsumerId;
use crate::wfcore::{Runtime, WorkflowError};

pub const DEFAULT_WORKERS: usize = 4;
pub const DEFAULT_IDLE_POLL: Duration = Duration::from_millis(20);

static NEXT_WORKER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("worker pool is already running")]
    AlreadyRunning,
    #[error("worker pool is not running")]
    NotRunning,
    #[error("worker count must be at least 1, got {0}")]
    InvalidWorkerCount(usize),
}

#[derive(Clone, Debug)]
pub struct WorkerPoolConfig {
    pub worker_count: usize,
    pub idle_poll_interval: Duration,
}

impl Default for WorkerPoolConfig {
    fn default() -> Self {
        Self {
            worker_count: DEFAULT_WORKERS,
            idle_poll_interval: DEFAULT_IDLE_POLL,
        }
    }
}

/// Flags shared by all workers of one run of the pool.
#[derive(Default)]
struct RunFlags {
    stop: AtomicBool,
    /// Set on a hard stop: in-flight tasks finish their handler but record
    /// nothing and leave their delivery unacked.
    abort: AtomicBool,
    busy: AtomicUsize,
}

struct Worker {
    retire: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

struct Run {
    flags: Arc<RunFlags>,
    workers: Vec<Worker>,
    retired: Vec<JoinHandle<()>>,
}

pub struct WorkerPool {
    runtime: Arc<Runtime>,
    idle_poll_interval: Duration,
    target: AtomicUsize,
    run: Mutex<Option<Run>>,
}

impl std::fmt::Debug for WorkerPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkerPool")
            .field("workers", &self.target.load(Ordering::Relaxed))
            .field("running", &self.is_running())
            .finish()
    }
}

impl WorkerPool {
    pub fn new(runtime: Arc<Runtime>, config: WorkerPoolConfig) -> Result<Self, PoolError> {
        if config.worker_count == 0 {
            return Err(PoolError::InvalidWorkerCount(0));
        }
        Ok(Self {
            runtime,
            idle_poll_interval: config.idle_poll_interval,
            target: AtomicUsize::new(config.worker_count),
            run: Mutex::new(None),
        })
    }

    pub fn start(&self) -> Result<(), PoolError> {
        let mut run = self.run.lock();
        if run.is_some() {
            return Err(PoolError::AlreadyRunning);
        }
        let flags = Arc::new(RunFlags::default());
        let workers = (0..self.target.load(Ordering::Acquire))
            .map(|_| self.spawn(&flags))
            .collect();
        *run = Some(Run {
            flags,
            workers,
            retired: Vec::new(),
        });
        Ok(())
    }

    fn spawn(&self, flags: &Arc<RunFlags>) -> Worker {
        let retire = Arc::new(AtomicBool::new(false));
        let consumer = ConsumerId::new(format!("worker-{}", NEXT_WORKER.fetch_add(1, Ordering::Relaxed)));
        let ctx = WorkerLoop {
            runtime: Arc::clone(&self.runtime),
            flags: Arc::clone(flags),
            retire: Arc::clone(&retire),
            idle: self.idle_poll_interval,
        };
        let handle = thread::Builder::new()
            .name(consumer.to_string())
            .spawn(move || ctx.run(consumer))
            .expect("spawn worker thread");
        Worker { retire, handle }
    }

    /// Change the number of workers. New workers start at once; surplus
    /// workers exit after finishing their current message.
    pub fn scale(&self, new_count: usize) -> Result<(), PoolError> {
        if new_count == 0 {
            return Err(PoolError::InvalidWorkerCount(0));
        }
        let mut guard = self.run.lock();
        self.target.store(new_count, Ordering::Release);
        let Some(run) = guard.as_mut() else {
            return Ok(());
        };
        while run.workers.len() < new_count {
            let worker = self.spawn(&run.flags);
            run.workers.push(worker);
        }
        while run.workers.len() > new_count {
            let worker = run.workers.pop().expect("len > new_count >= 1");
            worker.retire.store(true, Ordering::Release);
            run.retired.push(worker.handle);
        }
        run.retired.retain(|h| !h.is_finished());
        debug!(workers = new_count, "scaled pool");
        Ok(())
    }

    /// Stop the pool. With `drain`, waits for every in-flight handler to
    /// finish and record its result. Without it, returns immediately; tasks
    /// still running leave their messages unacked for recovery on restart.
    pub fn stop(&self, drain: bool) -> Result<(), PoolError> {
        let run = self.run.lock().take().ok_or(PoolError::NotRunning)?;
        if !drain {
            run.flags.abort.store(true, Ordering::Release);
        }
        run.flags.stop.store(true, Ordering::Release);
        if drain {
            for handle in run.workers.into_iter().map(|w| w.handle).chain(run.retired) {
                let _ = handle.join();
            }
        }
        Ok(())
    }

    pub fn is_running(&self) -> bool {
        self.run.lock().is_some()
    }

    pub fn worker_count(&self) -> usize {
        self.target.load(Ordering::Acquire)
    }

    /// Workers currently executing a message.
    pub fn busy_workers(&self) -> usize {
        self.run
            .lock()
            .as_ref()
            .map_or(0, |r| r.flags.busy.load(Ordering::Acquire))
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        if let Some(run) = self.run.get_mut().take() {
            run.flags.stop.store(true, Ordering::Release);
        }
    }
}

struct WorkerLoop {
    runtime: Arc<Runtime>,
    flags: Arc<RunFlags>,
    retire: Arc<AtomicBool>,
    idle: Duration,
}

impl WorkerLoop {
    fn should_exit(&self) -> bool {
        self.flags.stop.load(Ordering::Acquire) || self.retire.load(Ordering::Acquire)
    }

    fn run(self, consumer: ConsumerId) {
        let broker = Arc::clone(self.runtime.broker());
        let mut subscriptions = self.runtime.subscriptions();
        while !self.should_exit() {
            match broker.fetch(&consumer, &subscriptions) {
                Ok(Some((tag, message))) => {
                    self.flags.busy.fetch_add(1, Ordering::AcqRel);
                    let result = self
                        .runtime
                        .execute_delivery_with(&tag, &message, &self.flags.abort);
                    self.flags.busy.fetch_sub(1, Ordering::AcqRel);
                    if let Err(e) = result {
                        if matches!(e, WorkflowError::Broker(BrokerError::Halted)) || self.flags.abort.load(Ordering::Acquire) {
                            break;
                        }
                        warn!(worker = %consumer, message = %message.message_id, "task failed to run: {e}");
                        // Hand the delivery back so this worker can fetch again.
                        let _ = broker.requeue(&tag);
                    }
                }
                Ok(None) => {
                    thread::sleep(self.idle);
                    subscriptions = self.runtime.subscriptions();
                }
                Err(BrokerError::Halted) => break,
                Err(e) => {
                    warn!(worker = %consumer, "fetch failed: {e}");
                    thread::sleep(self.idle);
                }
            }
        }
        debug!(worker = %consumer, "worker exiting");
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;
    use std::time::Instant;

    use serde_json::json;

    use super::*;
    use crate::broker::{Broker, BrokerConfig};
    use crate::statestore::{IncidentStatus, MessageStatus, StateStore};
    use crate::wfcore::{StageRegistration, WorkflowDefinition};

    fn runtime_in(dir: &std::path::Path) -> Arc<Runtime> {
        let mut config = BrokerConfig::new(dir);
        config.requeue_delay = Duration::from_millis(10);
        let broker = Arc::new(Broker::open(config).unwrap());
        broker.recover().unwrap();
        let store = Arc::new(StateStore::open(dir).unwrap());
        store.release_all_locks().unwrap();
        Arc::new(Runtime::new(broker, store).unwrap())
    }

    fn pool(rt: &Arc<Runtime>, n: usize) -> WorkerPool {
        WorkerPool::new(
            Arc::clone(rt),
            WorkerPoolConfig {
                worker_count: n,
                idle_poll_interval: Duration::from_millis(2),
            },
        )
        .unwrap()
    }

    /// Fan out `n` tasks that each sleep `ms` milliseconds.
    fn sleepers(rt: &Runtime, kind: &str, ms: u64) {
        let def = WorkflowDefinition::new(kind, format!("{kind}_start"))
            .stage(StageRegistration::new(format!("{kind}_start"), {
                let kind = kind.to_owned();
                move |ctx| {
                    let n = ctx.payload()["n"].as_u64().unwrap();
                    for i in 0..n {
                        ctx.send(&format!("{kind}_sleep"), json!({ "i": i }))?;
                    }
                    Ok(())
                }
            }))
            .stage(StageRegistration::new(format!("{kind}_sleep"), move |_| {
                thread::sleep(Duration::from_millis(ms));
                Ok(())
            }));
        rt.register_workflow(def).unwrap();
    }

    fn wait_idle(rt: &Runtime, inc: crate::ids::IncidentId, timeout: Duration) {
        let deadline = Instant::now() + timeout;
        while rt.store().incident(inc).unwrap().outstanding_messages > 0 {
            assert!(Instant::now() < deadline, "incident did not finish in time");
            thread::sleep(Duration::from_millis(2));
        }
    }

    fn run_sleepers(workers: usize) -> Duration {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime_in(dir.path());
        sleepers(&rt, "s", 100);
        let inc = rt.start_incident("s", "x", json!({ "n": 8 })).unwrap();
        let p = pool(&rt, workers);
        // Time from the first sleep task's send to the last completion.
        p.start().unwrap();
        wait_idle(&rt, inc, Duration::from_secs(5));
        p.stop(true).unwrap();
        let log = rt.store().message_log(inc).unwrap();
        let tasks: Vec<_> = log.iter().filter(|e| e.queue == "s_sleep").collect();
        assert_eq!(tasks.len(), 8);
        let start = tasks.iter().map(|e| e.sent_timestamp).min().unwrap();
        let end = tasks.iter().filter_map(|e| e.completed_timestamp).max().unwrap();
        end.saturating_since(start)
    }

    #[test]
    fn parallel_speedup() {
        let four = run_sleepers(4);
        let one = run_sleepers(1);
        assert!(four < Duration::from_millis(400), "4 workers took {four:?}");
        assert!(one >= Duration::from_millis(750), "1 worker took {one:?}");
    }

    #[test]
    fn single_worker_processes_in_fifo_order() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime_in(dir.path());
        let order = Arc::new(parking_lot::Mutex::new(Vec::new()));
        let o = Arc::clone(&order);
        let def = WorkflowDefinition::new("seq", "seq_start")
            .stage(StageRegistration::new("seq_start", |ctx| {
                for i in 0..3 {
                    ctx.send("seq_step", json!({ "i": i }))?;
                }
                Ok(())
            }))
            .stage(StageRegistration::new("seq_step", move |ctx| {
                o.lock().push(ctx.payload()["i"].as_u64().unwrap());
                Ok(())
            }));
        rt.register_workflow(def).unwrap();
        let inc = rt.start_incident("seq", "x", json!({})).unwrap();
        let p = pool(&rt, 1);
        p.start().unwrap();
        wait_idle(&rt, inc, Duration::from_secs(5));
        p.stop(true).unwrap();
        assert_eq!(*order.lock(), vec![0, 1, 2]);
    }

    #[test]
    fn lifecycle_errors() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime_in(dir.path());
        assert_eq!(
            WorkerPool::new(Arc::clone(&rt), WorkerPoolConfig { worker_count: 0, ..Default::default() }).unwrap_err(),
            PoolError::InvalidWorkerCount(0)
        );
        let p = pool(&rt, 2);
        assert_eq!(p.stop(true), Err(PoolError::NotRunning));
        p.start().unwrap();
        assert_eq!(p.start(), Err(PoolError::AlreadyRunning));
        assert_eq!(p.scale(0), Err(PoolError::InvalidWorkerCount(0)));
        let t = Instant::now();
        p.stop(true).unwrap();
        assert!(t.elapsed() < Duration::from_millis(200), "drain stop on empty queues is prompt");
        // Stop then start resumes normal operation.
        sleepers(&rt, "again", 1);
        p.start().unwrap();
        let inc = rt.start_incident("again", "x", json!({ "n": 3 })).unwrap();
        wait_idle(&rt, inc, Duration::from_secs(5));
        p.stop(true).unwrap();
    }

    #[test]
    fn scale_down_mid_processing_loses_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime_in(dir.path());
        sleepers(&rt, "sd", 20);
        let inc = rt.start_incident("sd", "x", json!({ "n": 40 })).unwrap();
        let p = pool(&rt, 4);
        p.start().unwrap();
        thread::sleep(Duration::from_millis(50));
        p.scale(1).unwrap();
        assert_eq!(p.worker_count(), 1);
        wait_idle(&rt, inc, Duration::from_secs(10));
        p.scale(8).unwrap();
        p.stop(true).unwrap();
        let log = rt.store().message_log(inc).unwrap();
        assert_eq!(log.len(), 41);
        assert!(log.iter().all(|e| e.status == MessageStatus::Completed));
        assert!(log.iter().all(|e| e.deliveries == 1), "no message delivered twice");
    }

    #[test]
    fn no_message_runs_on_two_workers_at_once() {
        let dir = tempfile::tempdir().unwrap();
        let rt = runtime_in(dir.path());
        let spans = Arc::new(parking_lot::Mutex::new(Vec::new()));
        let s = Arc::clone(&spans);
        let def = WorkflowDefinition::new("ov", "ov_start")
            .stage(StageRegistration::new("ov_start", |ctx| {
                for i in 0..100 {
                    ctx.send("ov_work", json!({ "i": i }))?;
                }
                Ok(())
            }))
            .stage(StageRegistration::new("ov_work", move |ctx| {
                let begin = Instant::now();
                thread::sleep(Duration::from_millis(1));
                s.lock().push((ctx.message_id(), begin, Instant::now()));
                Ok(())
            }));
        rt.register_workflow(def).unwrap();
        let inc = rt.start_incident("ov", "x", json!({})).unwrap();
        let p = pool(&rt, 4);
        p.start().unwrap();
        wait_idle(&rt, inc, Duration::from_secs(10));
        p.stop(true).unwrap();
        let mut per_message: HashMap<_, Vec<_>> = HashMap::new();
        for (id, b, e) in spans.lock().iter() {
            per_message.entry(*id).or_default().push((*b, *e));
        }
        assert_eq!(per_message.len(), 100);
        assert!(per_message.values().all(|v| v.len() == 1));
    }

    #[test]
    fn hard_stop_leaves_in_flight_for_recovery() {
        let dir = tempfile::tempdir().unwrap();
        let gate = Arc::new(AtomicBool::new(false));
        let inc = {
            let rt = runtime_in(dir.path());
            let g = Arc::clone(&gate);
            let def = WorkflowDefinition::new("hs", "hs_start")
                .stage(StageRegistration::new("hs_start", |ctx| {
                    ctx.send("hs_slow", json!({}))?;
                    ctx.send("hs_slow", json!({}))
                }))
                .stage(StageRegistration::new("hs_slow", move |_| {
                    while !g.load(Ordering::Acquire) {
                        thread::sleep(Duration::from_millis(1));
                    }
                    Ok(())
                }));
            rt.register_workflow(def).unwrap();
            let inc = rt.start_incident("hs", "x", json!({})).unwrap();
            let p = pool(&rt, 2);
            p.start().unwrap();
            let deadline = Instant::now() + Duration::from_secs(5);
            while p.busy_workers() < 2 {
                assert!(Instant::now() < deadline);
                thread::sleep(Duration::from_millis(1));
            }
            p.stop(false).unwrap();
            rt.broker().halt();
            rt.store().halt();
            gate.store(true, Ordering::Release);
            inc
        };
        thread::sleep(Duration::from_millis(20));

        // Restart on the same directory.
        let broker = Arc::new(Broker::open(BrokerConfig::new(dir.path())).unwrap());
        assert_eq!(broker.recover().unwrap().restored, 2);
        let store = Arc::new(StateStore::open(dir.path()).unwrap());
        store.release_all_locks().unwrap();
        let rt = Arc::new(Runtime::new(broker, store).unwrap());
        let def = WorkflowDefinition::new("hs", "hs_start")
            .stage(StageRegistration::new("hs_start", |_| Ok(())))
            .stage(StageRegistration::new("hs_slow", |_| Ok(())));
        rt.register_workflow(def).unwrap();
        let p = pool(&rt, 2);
        p.start().unwrap();
        wait_idle(&rt, inc, Duration::from_secs(5));
        p.stop(true).unwrap();
        let log = rt.store().message_log(inc).unwrap();
        let slow: Vec<_> = log.iter().filter(|e| e.queue == "hs_slow").collect();
        assert_eq!(slow.len(), 2);
        assert!(slow.iter().all(|e| e.status == MessageStatus::Completed && e.deliveries == 2));
        assert_eq!(rt.store().incident(inc).unwrap().status, IncidentStatus::Active);
    }
}
