//! Workflow runtime: stage registration, the per-delivery task wrapper,
//! deferred sends, critical-stage locking, joins, incident lifecycle and
//! cleanup.
//!
//! Every task runs through [`Runtime::execute_delivery`]. A task's sends are
//! buffered and published only if its handler returns `Ok`; a failing handler
//! moves the incident to ERROR, after which every remaining message of that
//! incident is DROPPED on delivery. Terminal incidents get one cleanup message
//! on [`CLEANUP_QUEUE`] that requeues itself until the incident's outstanding
//! counter reaches zero, then clears persisted stage data and locks.

mod context;
mod definition;
mod join;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, info_span, warn};

use crate::broker::{Broker, BrokerError, DeliveryTag, Message};
use crate::ids::{ConsumerId, IncidentId, MessageId};
use crate::statestore::{
    ClearOutcome, IncidentStatus, MessageEvent, StateStore, StoreError,
};
use crate::time::Timestamp;

pub use context::{HandlerContext, OutboxEntry};
pub use definition::{HandlerFn, InitContext, InitHook, JoinSpec, StageRegistration, WorkflowDefinition};
pub use join::GenerationKey;

use context::LifecycleRequest;

/// Reserved queue carrying one cleanup message per terminated incident.
pub const CLEANUP_QUEUE: &str = "__cleanup";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("workflow kind {0:?} is already registered")]
    DuplicateKind(String),
    #[error("workflow kind must be a non-empty name")]
    InvalidKind,
    #[error("queue {queue:?} is registered twice (workflow {kind:?})")]
    DuplicateQueue { kind: String, queue: String },
    #[error("queue {0:?} is reserved")]
    ReservedQueue(String),
    #[error("init queue {queue:?} is not a stage of workflow {kind:?}")]
    MissingInitQueue { kind: String, queue: String },
    #[error("unknown workflow kind {0:?}")]
    UnknownKind(String),
    #[error("incident {incident_id} is {status:?}, not ACTIVE")]
    NotActive {
        incident_id: IncidentId,
        status: IncidentStatus,
    },
    #[error("init hook for incident {incident_id} failed: {source:#}")]
    InitHook {
        incident_id: IncidentId,
        source: anyhow::Error,
    },
    #[error(transparent)]
    Publish(#[from] PublishError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for WorkflowError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::UnknownWorkflowKind(k) => Self::UnknownKind(k),
            StoreError::IllegalTransition {
                incident_id, from, ..
            } => Self::NotActive {
                incident_id,
                status: from,
            },
            other => Self::Store(other),
        }
    }
}

#[derive(Debug, Error)]
pub enum PublishError {
    #[error("incident {incident_id} is {status:?}; no new messages are admitted")]
    IncidentNotActive {
        incident_id: IncidentId,
        status: IncidentStatus,
    },
    #[error("unknown incident {0}")]
    UnknownIncident(IncidentId),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for PublishError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::IncidentState {
                incident_id,
                status,
                ..
            } => Self::IncidentNotActive {
                incident_id,
                status,
            },
            StoreError::UnknownIncident(id) => Self::UnknownIncident(id),
            other => Self::Store(other),
        }
    }
}

/// Entry point for messages that originate outside a handler: the initial
/// message of an incident, EDI pushes and polls, job notifications.
///
/// Each publish is logged SENT and counted as outstanding before it reaches
/// the broker, and only while the incident is ACTIVE.
#[derive(Clone, Debug)]
pub struct Outlet {
    broker: Arc<Broker>,
    store: Arc<StateStore>,
}

impl Outlet {
    pub fn new(broker: Arc<Broker>, store: Arc<StateStore>) -> Self {
        Self { broker, store }
    }

    pub fn publish(
        &self,
        incident_id: IncidentId,
        queue: &str,
        payload: Value,
        parent: Option<MessageId>,
    ) -> Result<MessageId, PublishError> {
        if !self.broker.has_queue(queue) {
            return Err(BrokerError::UnknownQueue(queue.to_owned()).into());
        }
        self.broker.check_payload(&payload)?;
        let message = Message::new(queue, incident_id, payload).with_parent(parent);
        let id = message.message_id;
        self.store.record_send(id, incident_id, queue, parent, true)?;
        if let Err(e) = self.broker.publish(message) {
            // Never enqueued: resolve the log entry so the counter balances.
            let _ = self.store.record_resolution(id, MessageEvent::Dropped);
            return Err(e.into());
        }
        Ok(id)
    }

    pub fn store(&self) -> &StateStore {
        &self.store
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }
}

/// Told when cleanup has cleared an incident, so per-incident resources
/// outside the store (EDI endpoints) can be released.
pub trait IncidentListener: Send + Sync {
    fn incident_cleared(&self, incident_id: IncidentId);
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageSummary {
    pub queue: String,
    pub critical: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkflowSummary {
    pub kind: String,
    pub init_queue: String,
    pub stages: Vec<StageSummary>,
}

/// What one call of [`Runtime::execute_delivery`] did with its message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DeliveryOutcome {
    Completed,
    /// The handler failed; the incident is now ERROR.
    Failed(String),
    Dropped,
    /// Critical stage busy; requeued for a later attempt.
    LockBusy,
    /// The message had already resolved on an earlier delivery.
    AlreadyResolved,
    CleanupDeferred,
    Cleared,
    /// No handler or log entry exists for the message.
    Discarded,
    /// The pool was aborted while the handler ran; nothing was recorded.
    Aborted,
}

struct Registered {
    definition: WorkflowDefinition,
    stages: HashMap<String, StageRegistration>,
}

pub struct Runtime {
    broker: Arc<Broker>,
    store: Arc<StateStore>,
    workflows: RwLock<BTreeMap<String, Arc<Registered>>>,
    queue_owner: RwLock<HashMap<String, String>>,
    listeners: RwLock<Vec<Arc<dyn IncidentListener>>>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("workflows", &self.workflows.read().keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Runtime {
    pub fn new(broker: Arc<Broker>, store: Arc<StateStore>) -> Result<Self, WorkflowError> {
        broker.declare_queue(CLEANUP_QUEUE)?;
        Ok(Self {
            broker,
            store,
            workflows: RwLock::new(BTreeMap::new()),
            queue_owner: RwLock::new(HashMap::new()),
            listeners: RwLock::new(Vec::new()),
        })
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn store(&self) -> &Arc<StateStore> {
        &self.store
    }

    pub fn outlet(&self) -> Outlet {
        Outlet::new(Arc::clone(&self.broker), Arc::clone(&self.store))
    }

    pub fn add_incident_listener(&self, listener: Arc<dyn IncidentListener>) {
        self.listeners.write().push(listener);
    }

    // ---- registration ----

    pub fn register_workflow(&self, definition: WorkflowDefinition) -> Result<(), WorkflowError> {
        let kind = definition.kind.clone();
        if kind.trim().is_empty() {
            return Err(WorkflowError::InvalidKind);
        }
        let mut workflows = self.workflows.write();
        let mut owners = self.queue_owner.write();
        if workflows.contains_key(&kind) {
            return Err(WorkflowError::DuplicateKind(kind));
        }
        let mut stages = HashMap::new();
        for stage in &definition.stages {
            crate::broker::validate_queue_name(&stage.queue)?;
            if stage.queue == CLEANUP_QUEUE {
                return Err(WorkflowError::ReservedQueue(stage.queue.clone()));
            }
            if owners.contains_key(&stage.queue)
                || stages.insert(stage.queue.clone(), stage.clone()).is_some()
            {
                return Err(WorkflowError::DuplicateQueue {
                    kind,
                    queue: stage.queue.clone(),
                });
            }
        }
        if !stages.contains_key(&definition.init_queue) {
            return Err(WorkflowError::MissingInitQueue {
                kind,
                queue: definition.init_queue.clone(),
            });
        }
        for queue in stages.keys() {
            self.broker.declare_queue(queue)?;
        }
        for queue in stages.keys() {
            owners.insert(queue.clone(), kind.clone());
        }
        self.store.register_workflow_kind(&kind);
        debug!(kind = %kind, stages = stages.len(), "registered workflow");
        workflows.insert(kind, Arc::new(Registered { definition, stages }));
        Ok(())
    }

    pub fn workflows(&self) -> Vec<WorkflowSummary> {
        self.workflows
            .read()
            .values()
            .map(|r| WorkflowSummary {
                kind: r.definition.kind.clone(),
                init_queue: r.definition.init_queue.clone(),
                stages: r
                    .definition
                    .stages
                    .iter()
                    .map(|s| StageSummary {
                        queue: s.queue.clone(),
                        critical: s.critical,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn has_workflow(&self, kind: &str) -> bool {
        self.workflows.read().contains_key(kind)
    }

    pub fn workflow_has_queue(&self, kind: &str, queue: &str) -> bool {
        self.queue_owner.read().get(queue).is_some_and(|k| k == kind)
    }

    /// Every queue a worker should subscribe to, the cleanup queue included.
    pub fn subscriptions(&self) -> Vec<String> {
        let mut queues: Vec<String> = self.queue_owner.read().keys().cloned().collect();
        queues.sort();
        queues.push(CLEANUP_QUEUE.to_owned());
        queues
    }

    fn stage_for(&self, queue: &str) -> Option<(Arc<Registered>, String)> {
        let kind = self.queue_owner.read().get(queue)?.clone();
        let registered = self.workflows.read().get(&kind)?.clone();
        Some((registered, kind))
    }

    // ---- incident lifecycle ----

    pub fn start_incident(
        &self,
        workflow_kind: &str,
        label: &str,
        initial_payload: Value,
    ) -> Result<IncidentId, WorkflowError> {
        let registered = self
            .workflows
            .read()
            .get(workflow_kind)
            .cloned()
            .ok_or_else(|| WorkflowError::UnknownKind(workflow_kind.to_owned()))?;
        self.broker.check_payload(&initial_payload)?;
        let incident_id = self.store.create_incident(workflow_kind, label)?;
        self.store.set_incident_status(incident_id, IncidentStatus::Active)?;
        if let Some(hook) = &registered.definition.on_init {
            let ctx = InitContext {
                incident_id,
                label,
                initial_payload: &initial_payload,
                runtime: self,
            };
            if let Err(source) = hook(&ctx) {
                warn!(incident = %incident_id, "init hook failed: {source:#}");
                self.terminate(incident_id, IncidentStatus::Error)?;
                return Err(WorkflowError::InitHook {
                    incident_id,
                    source,
                });
            }
        }
        self.outlet().publish(
            incident_id,
            &registered.definition.init_queue,
            initial_payload,
            None,
        )?;
        Ok(incident_id)
    }

    pub fn complete_incident(&self, incident_id: IncidentId) -> Result<(), WorkflowError> {
        self.terminate(incident_id, IncidentStatus::Completed)
    }

    pub fn cancel_incident(&self, incident_id: IncidentId) -> Result<(), WorkflowError> {
        self.terminate(incident_id, IncidentStatus::Cancelled)
    }

    /// Move an ACTIVE incident to a terminal status and enqueue its cleanup.
    fn terminate(&self, incident_id: IncidentId, status: IncidentStatus) -> Result<(), WorkflowError> {
        self.store.set_incident_status(incident_id, status)?;
        self.publish_cleanup(incident_id, status)
    }

    fn publish_cleanup(&self, incident_id: IncidentId, status: IncidentStatus) -> Result<(), WorkflowError> {
        let message = Message::new(CLEANUP_QUEUE, incident_id, json!({ "status": status }));
        self.broker.publish(message)?;
        Ok(())
    }

    /// Enqueue cleanup for terminated incidents that were never cleared and
    /// have no cleanup message pending, e.g. after a crash between the status
    /// change and the publish. Returns how many were enqueued.
    pub fn resume_cleanups(&self) -> Result<usize, WorkflowError> {
        let pending: HashSet<IncidentId> = self
            .broker
            .ready_messages(CLEANUP_QUEUE)
            .into_iter()
            .chain(self.broker.in_flight_messages())
            .filter(|m| m.queue == CLEANUP_QUEUE)
            .map(|m| m.incident_id)
            .collect();
        let mut enqueued = 0;
        for rec in self.store.incidents()? {
            if rec.status.is_terminal() && rec.cleared_timestamp.is_none() && !pending.contains(&rec.incident_id) {
                self.publish_cleanup(rec.incident_id, rec.status)?;
                enqueued += 1;
            }
        }
        Ok(enqueued)
    }

    // ---- task execution ----

    pub fn execute_delivery(&self, tag: &DeliveryTag, message: &Message) -> Result<DeliveryOutcome, WorkflowError> {
        self.execute_delivery_with(tag, message, &AtomicBool::new(false))
    }

    /// Run one delivered message through the task wrapper.
    ///
    /// If `abort` is set by the time the handler returns, the task leaves no
    /// trace beyond what the handler itself wrote; the message stays unacked.
    pub fn execute_delivery_with(
        &self,
        tag: &DeliveryTag,
        message: &Message,
        abort: &AtomicBool,
    ) -> Result<DeliveryOutcome, WorkflowError> {
        if message.queue == CLEANUP_QUEUE {
            return self.run_cleanup(tag, message);
        }
        let Some((registered, kind)) = self.stage_for(&message.queue) else {
            warn!(queue = %message.queue, message = %message.message_id, "no handler for queue; discarding");
            self.broker.ack(tag)?;
            return Ok(DeliveryOutcome::Discarded);
        };
        let stage = &registered.stages[&message.queue];
        let id = message.message_id;
        let incident_id = message.incident_id;

        match self.store.message(id)? {
            None => {
                warn!(message = %id, "message has no log entry; discarding");
                self.broker.ack(tag)?;
                return Ok(DeliveryOutcome::Discarded);
            }
            Some(entry) if entry.status.is_terminal() => {
                self.broker.ack(tag)?;
                return Ok(DeliveryOutcome::AlreadyResolved);
            }
            Some(_) => {}
        }

        self.store.log_message_event(
            id,
            MessageEvent::Delivered {
                consumer_id: tag.consumer_id.clone(),
            },
            Timestamp::now(),
        )?;

        let status = self.store.incident(incident_id)?.status;
        if status != IncidentStatus::Active {
            self.store.record_resolution(id, MessageEvent::Dropped)?;
            self.broker.ack(tag)?;
            return Ok(DeliveryOutcome::Dropped);
        }

        if stage.critical
            && !self
                .store
                .try_acquire_lock(incident_id, &message.queue, &tag.consumer_id)?
        {
            self.broker.requeue(tag)?;
            return Ok(DeliveryOutcome::LockBusy);
        }

        self.store
            .log_message_event(id, MessageEvent::Processing, Timestamp::now())?;

        let mut ctx = HandlerContext {
            runtime: self,
            message,
            stage,
            workflow_kind: &kind,
            consumer: &tag.consumer_id,
            outbox: Vec::new(),
            lifecycle: None,
            failure: None,
        };
        let result = {
            let span = info_span!("task", incident = %incident_id, queue = %message.queue, message = %id);
            let _entered = span.enter();
            match panic::catch_unwind(AssertUnwindSafe(|| (stage.handler)(&mut ctx))) {
                Ok(Ok(())) => ctx.failure.take().map_or(Ok(()), Err),
                Ok(Err(e)) => Err(format!("{e:#}")),
                Err(panic) => Err(panic_message(panic.as_ref())),
            }
        };
        if abort.load(Ordering::Acquire) {
            return Ok(DeliveryOutcome::Aborted);
        }
        let HandlerContext {
            outbox, lifecycle, ..
        } = ctx;

        match result {
            Ok(()) => {
                for entry in outbox {
                    let out = Message::new(entry.queue, incident_id, entry.payload).with_parent(Some(id));
                    self.store
                        .record_send(out.message_id, incident_id, &out.queue, Some(id), false)?;
                    self.broker.publish(out)?;
                }
                if let Some(request) = lifecycle {
                    let status = match request {
                        LifecycleRequest::Complete => IncidentStatus::Completed,
                        LifecycleRequest::Cancel => IncidentStatus::Cancelled,
                    };
                    match self.terminate(incident_id, status) {
                        Ok(()) | Err(WorkflowError::NotActive { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
                if stage.critical {
                    self.store.release_lock(incident_id, &message.queue)?;
                }
                self.store.record_resolution(id, MessageEvent::Completed)?;
                self.broker.ack(tag)?;
                Ok(DeliveryOutcome::Completed)
            }
            Err(reason) => {
                warn!(incident = %incident_id, queue = %message.queue, "handler failed: {reason}");
                if stage.critical {
                    self.store.release_lock(incident_id, &message.queue)?;
                }
                self.store.record_resolution(
                    id,
                    MessageEvent::Error {
                        reason: reason.clone(),
                    },
                )?;
                match self.terminate(incident_id, IncidentStatus::Error) {
                    Ok(()) | Err(WorkflowError::NotActive { .. }) => {}
                    Err(e) => return Err(e),
                }
                self.broker.ack(tag)?;
                Ok(DeliveryOutcome::Failed(reason))
            }
        }
    }

    fn run_cleanup(&self, tag: &DeliveryTag, message: &Message) -> Result<DeliveryOutcome, WorkflowError> {
        let incident_id = message.incident_id;
        let outcome = match self.store.clear_if_idle(incident_id) {
            Ok(outcome) => outcome,
            Err(StoreError::UnknownIncident(_) | StoreError::IncidentState { .. }) => {
                warn!(incident = %incident_id, "cleanup for unknown or live incident; discarding");
                self.broker.ack(tag)?;
                return Ok(DeliveryOutcome::Discarded);
            }
            Err(e) => return Err(e.into()),
        };
        match outcome {
            ClearOutcome::Busy(n) => {
                debug!(incident = %incident_id, outstanding = n, "cleanup deferred");
                self.broker.requeue(tag)?;
                Ok(DeliveryOutcome::CleanupDeferred)
            }
            ClearOutcome::Cleared(_) | ClearOutcome::AlreadyCleared(_) => {
                let listeners: Vec<_> = self.listeners.read().clone();
                for listener in listeners {
                    listener.incident_cleared(incident_id);
                }
                self.broker.ack(tag)?;
                Ok(DeliveryOutcome::Cleared)
            }
        }
    }
}

fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        format!("handler panicked: {s}")
    } else if let Some(s) = panic.downcast_ref::<String>() {
        format!("handler panicked: {s}")
    } else {
        "handler panicked".to_owned()
    }
}

/// Deliver and execute messages on the calling thread until every queue is
/// empty. Used by tests and tools that need deterministic, single-threaded
/// progress; requeued messages are retried after their delay.
pub fn drain_inline(runtime: &Runtime, consumer: &ConsumerId) -> Result<usize, WorkflowError> {
    let subscriptions = runtime.subscriptions();
    let mut executed = 0;
    loop {
        match runtime.broker().fetch(consumer, &subscriptions)? {
            Some((tag, message)) => {
                runtime.execute_delivery(&tag, &message)?;
                executed += 1;
            }
            None if runtime.broker().total_pending() == 0 => return Ok(executed),
            None => std::thread::sleep(std::time::Duration::from_millis(5)),
        }
    }
}
