//! Transactional store for incidents, the message status log, persisted stage
//! data, stage locks and outstanding-message counters.
//!
//! All tables live in memory behind one mutex, which makes every operation a
//! linearizable transaction. Each committed change is appended to
//! `<data_dir>/state.journal` before the lock is released; opening the store
//! replays that journal and rewrites it as a single snapshot record.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::ids::{ConsumerId, IncidentId, MessageId};
use crate::journal::{Journal, JournalError};
use crate::time::Timestamp;

const JOURNAL_FILE: &str = "state.journal";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown workflow kind {0:?}")]
    UnknownWorkflowKind(String),
    #[error("unknown incident {0}")]
    UnknownIncident(IncidentId),
    #[error("incident {incident_id}: illegal status transition {from:?} -> {to:?}")]
    IllegalTransition {
        incident_id: IncidentId,
        from: IncidentStatus,
        to: IncidentStatus,
    },
    #[error("incident {incident_id} is {status:?}, expected {expected}")]
    IncidentState {
        incident_id: IncidentId,
        status: IncidentStatus,
        expected: &'static str,
    },
    #[error("message {0} has no log entry")]
    UnknownMessage(MessageId),
    #[error("message {0} was already logged as sent")]
    DuplicateMessage(MessageId),
    #[error("message {message_id}: event {event} not allowed after {from:?}")]
    OutOfOrderEvent {
        message_id: MessageId,
        from: MessageStatus,
        event: &'static str,
    },
    #[error("message {0}: event timestamp precedes an earlier timestamp")]
    TimestampRegression(MessageId),
    #[error("incident {0}: outstanding message counter would drop below zero")]
    CounterUnderflow(IncidentId),
    #[error("state store has been halted")]
    Halted,
    #[error(transparent)]
    Journal(#[from] JournalError),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IncidentStatus {
    Pending,
    Active,
    Completed,
    Cancelled,
    Error,
}

impl IncidentStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Completed | Self::Cancelled | Self::Error)
    }

    pub fn can_become(self, next: IncidentStatus) -> bool {
        use IncidentStatus::*;
        matches!(
            (self, next),
            (Pending, Active) | (Active, Completed) | (Active, Cancelled) | (Active, Error)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub incident_id: IncidentId,
    pub workflow_kind: String,
    pub label: String,
    pub status: IncidentStatus,
    pub created_timestamp: Timestamp,
    pub status_changed_timestamp: Timestamp,
    pub outstanding_messages: u64,
    /// When cleanup removed persisted stage data and locks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleared_timestamp: Option<Timestamp>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageStatus {
    Sent,
    Delivered,
    Processing,
    Completed,
    Error,
    Dropped,
}

impl MessageStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Completed | Self::Error | Self::Dropped)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageLogEntry {
    pub message_id: MessageId,
    pub incident_id: IncidentId,
    pub queue: String,
    pub parent_message_id: Option<MessageId>,
    pub status: MessageStatus,
    pub sent_timestamp: Timestamp,
    pub delivered_timestamp: Option<Timestamp>,
    /// Set when the message resolves: COMPLETED, ERROR or DROPPED.
    pub completed_timestamp: Option<Timestamp>,
    pub consumer_id: Option<ConsumerId>,
    #[serde(default)]
    pub deliveries: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A status change for one message, with whatever context that step adds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageEvent {
    Sent {
        incident_id: IncidentId,
        queue: String,
        parent_message_id: Option<MessageId>,
    },
    Delivered {
        consumer_id: ConsumerId,
    },
    Processing,
    Completed,
    Error {
        reason: String,
    },
    Dropped,
}

impl MessageEvent {
    fn name(&self) -> &'static str {
        match self {
            Self::Sent { .. } => "SENT",
            Self::Delivered { .. } => "DELIVERED",
            Self::Processing => "PROCESSING",
            Self::Completed => "COMPLETED",
            Self::Error { .. } => "ERROR",
            Self::Dropped => "DROPPED",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistedStageRecord {
    pub incident_id: IncidentId,
    pub queue: String,
    pub sequence: u64,
    pub stored_timestamp: Timestamp,
    pub payload: Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLock {
    pub incident_id: IncidentId,
    pub queue: String,
    pub holder: ConsumerId,
    pub acquired_timestamp: Timestamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClearOutcome {
    Cleared(Timestamp),
    /// Messages still outstanding; nothing was removed.
    Busy(u64),
    AlreadyCleared(Timestamp),
}

/// Which messages `stage_statistics` aggregates over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StatsScope {
    WorkflowKind(String),
    Incident(IncidentId),
}

/// Per-queue timing summary over COMPLETED messages. Durations are in
/// milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatistics {
    pub queue: String,
    pub count: u64,
    pub mean_queue_wait_ms: f64,
    pub max_queue_wait_ms: f64,
    pub mean_processing_ms: f64,
    pub max_processing_ms: f64,
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Snapshot {
    incidents: Vec<IncidentRecord>,
    messages: Vec<MessageLogEntry>,
    stage_data: Vec<PersistedStageRecord>,
    locks: Vec<StageLock>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum StoreOp {
    Snapshot(Box<Snapshot>),
    CreateIncident(IncidentRecord),
    SetStatus {
        incident_id: IncidentId,
        status: IncidentStatus,
        timestamp: Timestamp,
    },
    MessageEvent {
        message_id: MessageId,
        event: MessageEvent,
        timestamp: Timestamp,
    },
    Adjust {
        incident_id: IncidentId,
        delta: i64,
    },
    Persist(PersistedStageRecord),
    AcquireLock(StageLock),
    ReleaseLock {
        incident_id: IncidentId,
        queue: String,
    },
    Clear {
        incident_id: IncidentId,
        timestamp: Timestamp,
    },
}

type StageKey = (IncidentId, String);

#[derive(Default)]
struct Tables {
    incidents: HashMap<IncidentId, IncidentRecord>,
    incident_order: Vec<IncidentId>,
    messages: HashMap<MessageId, MessageLogEntry>,
    messages_by_incident: HashMap<IncidentId, Vec<MessageId>>,
    stage_data: HashMap<StageKey, Vec<PersistedStageRecord>>,
    locks: HashMap<StageKey, StageLock>,
}

impl Tables {
    fn incident(&self, id: IncidentId) -> Result<&IncidentRecord> {
        self.incidents.get(&id).ok_or(StoreError::UnknownIncident(id))
    }

    fn next_sequence(&self, key: &StageKey) -> u64 {
        self.stage_data
            .get(key)
            .and_then(|v| v.last())
            .map_or(1, |r| r.sequence + 1)
    }

    /// Validate a message event against the current entry.
    fn check_event(&self, message_id: MessageId, event: &MessageEvent, ts: Timestamp) -> Result<()> {
        use MessageStatus::*;
        let entry = match (self.messages.get(&message_id), event) {
            (None, MessageEvent::Sent { incident_id, .. }) => {
                self.incident(*incident_id)?;
                return Ok(());
            }
            (Some(_), MessageEvent::Sent { .. }) => {
                return Err(StoreError::DuplicateMessage(message_id))
            }
            (None, _) => return Err(StoreError::UnknownMessage(message_id)),
            (Some(e), _) => e,
        };
        let allowed = match event {
            MessageEvent::Sent { .. } => unreachable!(),
            // Redelivery after a requeue or a crash restarts from DELIVERED.
            MessageEvent::Delivered { .. } => matches!(entry.status, Sent | Delivered | Processing),
            MessageEvent::Processing => entry.status == Delivered,
            MessageEvent::Completed | MessageEvent::Error { .. } => entry.status == Processing,
            MessageEvent::Dropped => matches!(entry.status, Sent | Delivered),
        };
        if !allowed {
            return Err(StoreError::OutOfOrderEvent {
                message_id,
                from: entry.status,
                event: event.name(),
            });
        }
        let latest = entry
            .completed_timestamp
            .or(entry.delivered_timestamp)
            .unwrap_or(entry.sent_timestamp);
        if ts < latest {
            return Err(StoreError::TimestampRegression(message_id));
        }
        Ok(())
    }

    fn apply(&mut self, op: StoreOp) {
        match op {
            StoreOp::Snapshot(snap) => {
                *self = Tables::default();
                for rec in snap.incidents {
                    self.incident_order.push(rec.incident_id);
                    self.incidents.insert(rec.incident_id, rec);
                }
                for entry in snap.messages {
                    self.messages_by_incident
                        .entry(entry.incident_id)
                        .or_default()
                        .push(entry.message_id);
                    self.messages.insert(entry.message_id, entry);
                }
                for rec in snap.stage_data {
                    self.stage_data
                        .entry((rec.incident_id, rec.queue.clone()))
                        .or_default()
                        .push(rec);
                }
                for lock in snap.locks {
                    self.locks.insert((lock.incident_id, lock.queue.clone()), lock);
                }
            }
            StoreOp::CreateIncident(rec) => {
                self.incident_order.push(rec.incident_id);
                self.incidents.insert(rec.incident_id, rec);
            }
            StoreOp::SetStatus {
                incident_id,
                status,
                timestamp,
            } => {
                if let Some(rec) = self.incidents.get_mut(&incident_id) {
                    rec.status = status;
                    rec.status_changed_timestamp = timestamp;
                }
            }
            StoreOp::MessageEvent {
                message_id,
                event,
                timestamp,
            } => self.apply_message_event(message_id, event, timestamp),
            StoreOp::Adjust { incident_id, delta } => {
                if let Some(rec) = self.incidents.get_mut(&incident_id) {
                    rec.outstanding_messages = rec.outstanding_messages.saturating_add_signed(delta);
                }
            }
            StoreOp::Persist(rec) => {
                self.stage_data
                    .entry((rec.incident_id, rec.queue.clone()))
                    .or_default()
                    .push(rec);
            }
            StoreOp::AcquireLock(lock) => {
                self.locks.insert((lock.incident_id, lock.queue.clone()), lock);
            }
            StoreOp::ReleaseLock { incident_id, queue } => {
                self.locks.remove(&(incident_id, queue));
            }
            StoreOp::Clear {
                incident_id,
                timestamp,
            } => {
                self.stage_data.retain(|(id, _), _| *id != incident_id);
                self.locks.retain(|(id, _), _| *id != incident_id);
                if let Some(rec) = self.incidents.get_mut(&incident_id) {
                    rec.cleared_timestamp = Some(timestamp);
                }
            }
        }
    }

    fn apply_message_event(&mut self, message_id: MessageId, event: MessageEvent, ts: Timestamp) {
        if let MessageEvent::Sent {
            incident_id,
            queue,
            parent_message_id,
        } = event
        {
            self.messages_by_incident
                .entry(incident_id)
                .or_default()
                .push(message_id);
            self.messages.insert(
                message_id,
                MessageLogEntry {
                    message_id,
                    incident_id,
                    queue,
                    parent_message_id,
                    status: MessageStatus::Sent,
                    sent_timestamp: ts,
                    delivered_timestamp: None,
                    completed_timestamp: None,
                    consumer_id: None,
                    deliveries: 0,
                    error: None,
                },
            );
            return;
        }
        let Some(entry) = self.messages.get_mut(&message_id) else {
            return;
        };
        match event {
            MessageEvent::Sent { .. } => unreachable!(),
            MessageEvent::Delivered { consumer_id } => {
                entry.status = MessageStatus::Delivered;
                entry.delivered_timestamp = Some(ts);
                entry.consumer_id = Some(consumer_id);
                entry.deliveries += 1;
            }
            MessageEvent::Processing => entry.status = MessageStatus::Processing,
            MessageEvent::Completed => {
                entry.status = MessageStatus::Completed;
                entry.completed_timestamp = Some(ts);
            }
            MessageEvent::Error { reason } => {
                entry.status = MessageStatus::Error;
                entry.completed_timestamp = Some(ts);
                entry.error = Some(reason);
            }
            MessageEvent::Dropped => {
                entry.status = MessageStatus::Dropped;
                entry.completed_timestamp = Some(ts);
            }
        }
    }

    fn snapshot(&self) -> Snapshot {
        let mut stage_data: Vec<PersistedStageRecord> =
            self.stage_data.values().flatten().cloned().collect();
        stage_data.sort_by(|a, b| {
            (a.incident_id, &a.queue, a.sequence).cmp(&(b.incident_id, &b.queue, b.sequence))
        });
        let mut messages: Vec<MessageLogEntry> = self.messages.values().cloned().collect();
        messages.sort_by_key(|m| (m.sent_timestamp, m.message_id));
        Snapshot {
            incidents: self
                .incident_order
                .iter()
                .filter_map(|id| self.incidents.get(id).cloned())
                .collect(),
            messages,
            stage_data,
            locks: self.locks.values().cloned().collect(),
        }
    }
}

struct Inner {
    tables: Tables,
    journal: Option<Journal<StoreOp>>,
}

impl Inner {
    fn commit(&mut self, op: StoreOp) -> Result<()> {
        if let Some(journal) = self.journal.as_mut() {
            journal.append(&op)?;
        }
        self.tables.apply(op);
        Ok(())
    }
}

pub struct StateStore {
    path: PathBuf,
    inner: Mutex<Inner>,
    kinds: parking_lot::RwLock<HashSet<String>>,
    halted: AtomicBool,
}

impl std::fmt::Debug for StateStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StateStore").field("path", &self.path).finish_non_exhaustive()
    }
}

fn replay_tables(path: &Path) -> Result<(Tables, u64)> {
    let replay = Journal::<StoreOp>::replay(path)?;
    if replay.truncated_bytes > 0 {
        warn!(bytes = replay.truncated_bytes, "truncated torn state journal tail");
    }
    let mut tables = Tables::default();
    for op in replay.records {
        tables.apply(op);
    }
    Ok((tables, replay.truncated_bytes))
}

impl StateStore {
    /// Open (or create) the store under `data_dir`, compacting its journal.
    pub fn open(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(JOURNAL_FILE);
        let (tables, _) = replay_tables(&path)?;
        let snapshot = StoreOp::Snapshot(Box::new(tables.snapshot()));
        let journal = Journal::rewrite(&path, std::iter::once(&snapshot), false)?;
        Ok(Self::with_tables(path, tables, Some(journal)))
    }

    /// Load the store for inspection without taking over its journal. Every
    /// mutation on the returned store is kept in memory only.
    pub fn open_read_only(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(JOURNAL_FILE);
        let (tables, _) = replay_tables(&path)?;
        Ok(Self::with_tables(path, tables, None))
    }

    fn with_tables(path: PathBuf, tables: Tables, journal: Option<Journal<StoreOp>>) -> Self {
        Self {
            path,
            inner: Mutex::new(Inner { tables, journal }),
            kinds: parking_lot::RwLock::new(HashSet::new()),
            halted: AtomicBool::new(false),
        }
    }

    /// Stop serving every operation, as if the process had died.
    pub fn halt(&self) {
        self.halted.store(true, Ordering::Release);
    }

    fn lock(&self) -> Result<parking_lot::MutexGuard<'_, Inner>> {
        if self.halted.load(Ordering::Acquire) {
            return Err(StoreError::Halted);
        }
        Ok(self.inner.lock())
    }

    pub fn register_workflow_kind(&self, kind: &str) {
        self.kinds.write().insert(kind.to_owned());
    }

    pub fn workflow_kind_registered(&self, kind: &str) -> bool {
        self.kinds.read().contains(kind)
    }

    // ---- incidents ----

    pub fn create_incident(&self, workflow_kind: &str, label: &str) -> Result<IncidentId> {
        if !self.workflow_kind_registered(workflow_kind) {
            return Err(StoreError::UnknownWorkflowKind(workflow_kind.to_owned()));
        }
        let now = Timestamp::now();
        let incident_id = IncidentId::new();
        let rec = IncidentRecord {
            incident_id,
            workflow_kind: workflow_kind.to_owned(),
            label: label.to_owned(),
            status: IncidentStatus::Pending,
            created_timestamp: now,
            status_changed_timestamp: now,
            outstanding_messages: 0,
            cleared_timestamp: None,
        };
        self.lock()?.commit(StoreOp::CreateIncident(rec))?;
        Ok(incident_id)
    }

    pub fn set_incident_status(&self, incident_id: IncidentId, status: IncidentStatus) -> Result<()> {
        let mut inner = self.lock()?;
        let from = inner.tables.incident(incident_id)?.status;
        if !from.can_become(status) {
            return Err(StoreError::IllegalTransition {
                incident_id,
                from,
                to: status,
            });
        }
        inner.commit(StoreOp::SetStatus {
            incident_id,
            status,
            timestamp: Timestamp::now(),
        })
    }

    pub fn incident(&self, incident_id: IncidentId) -> Result<IncidentRecord> {
        self.lock()?.tables.incident(incident_id).cloned()
    }

    /// All incidents in creation order.
    pub fn incidents(&self) -> Result<Vec<IncidentRecord>> {
        let inner = self.lock()?;
        Ok(inner
            .tables
            .incident_order
            .iter()
            .filter_map(|id| inner.tables.incidents.get(id).cloned())
            .collect())
    }

    // ---- message log ----

    pub fn log_message_event(
        &self,
        message_id: MessageId,
        event: MessageEvent,
        timestamp: Timestamp,
    ) -> Result<()> {
        let mut inner = self.lock()?;
        inner.tables.check_event(message_id, &event, timestamp)?;
        inner.commit(StoreOp::MessageEvent {
            message_id,
            event,
            timestamp,
        })
    }

    /// Log a SENT entry and count it as outstanding in one transaction.
    ///
    /// With `require_active`, the send is refused unless the incident is
    /// ACTIVE; external producers use this so nothing new is admitted once an
    /// incident has terminated.
    pub fn record_send(
        &self,
        message_id: MessageId,
        incident_id: IncidentId,
        queue: &str,
        parent_message_id: Option<MessageId>,
        require_active: bool,
    ) -> Result<()> {
        let mut inner = self.lock()?;
        let status = inner.tables.incident(incident_id)?.status;
        if require_active && status != IncidentStatus::Active {
            return Err(StoreError::IncidentState {
                incident_id,
                status,
                expected: "ACTIVE",
            });
        }
        let event = MessageEvent::Sent {
            incident_id,
            queue: queue.to_owned(),
            parent_message_id,
        };
        let timestamp = Timestamp::now();
        inner.tables.check_event(message_id, &event, timestamp)?;
        inner.commit(StoreOp::MessageEvent {
            message_id,
            event,
            timestamp,
        })?;
        inner.commit(StoreOp::Adjust {
            incident_id,
            delta: 1,
        })
    }

    /// Log a terminal event and decrement the incident's counter in one
    /// transaction.
    pub fn record_resolution(&self, message_id: MessageId, event: MessageEvent) -> Result<u64> {
        debug_assert!(matches!(
            event,
            MessageEvent::Completed | MessageEvent::Error { .. } | MessageEvent::Dropped
        ));
        let mut inner = self.lock()?;
        let timestamp = Timestamp::now();
        inner.tables.check_event(message_id, &event, timestamp)?;
        let incident_id = inner.tables.messages[&message_id].incident_id;
        let count = inner.tables.incident(incident_id)?.outstanding_messages;
        if count == 0 {
            return Err(StoreError::CounterUnderflow(incident_id));
        }
        inner.commit(StoreOp::MessageEvent {
            message_id,
            event,
            timestamp,
        })?;
        inner.commit(StoreOp::Adjust {
            incident_id,
            delta: -1,
        })?;
        Ok(count - 1)
    }

    pub fn message(&self, message_id: MessageId) -> Result<Option<MessageLogEntry>> {
        Ok(self.lock()?.tables.messages.get(&message_id).cloned())
    }

    /// Message log of one incident in send order.
    pub fn message_log(&self, incident_id: IncidentId) -> Result<Vec<MessageLogEntry>> {
        let inner = self.lock()?;
        inner.tables.incident(incident_id)?;
        let mut entries: Vec<MessageLogEntry> = inner
            .tables
            .messages_by_incident
            .get(&incident_id)
            .into_iter()
            .flatten()
            .filter_map(|id| inner.tables.messages.get(id).cloned())
            .collect();
        entries.sort_by_key(|e| e.sent_timestamp);
        Ok(entries)
    }

    // ---- outstanding counter ----

    pub fn adjust_outstanding(&self, incident_id: IncidentId, delta: i64) -> Result<u64> {
        let mut inner = self.lock()?;
        let count = inner.tables.incident(incident_id)?.outstanding_messages;
        let next = count
            .checked_add_signed(delta)
            .ok_or(StoreError::CounterUnderflow(incident_id))?;
        inner.commit(StoreOp::Adjust { incident_id, delta })?;
        Ok(next)
    }

    // ---- persisted stage data ----

    pub fn persist_stage_data(&self, incident_id: IncidentId, queue: &str, payload: Value) -> Result<u64> {
        let mut inner = self.lock()?;
        inner.tables.incident(incident_id)?;
        let key = (incident_id, queue.to_owned());
        let sequence = inner.tables.next_sequence(&key);
        inner.commit(StoreOp::Persist(PersistedStageRecord {
            incident_id,
            queue: queue.to_owned(),
            sequence,
            stored_timestamp: Timestamp::now(),
            payload,
        }))?;
        Ok(sequence)
    }

    pub fn retrieve_stage_data(&self, incident_id: IncidentId, queue: &str) -> Result<Vec<PersistedStageRecord>> {
        let inner = self.lock()?;
        inner.tables.incident(incident_id)?;
        Ok(inner
            .tables
            .stage_data
            .get(&(incident_id, queue.to_owned()))
            .cloned()
            .unwrap_or_default())
    }

    /// Every persisted record of an incident, grouped by queue.
    pub fn stage_data_for_incident(&self, incident_id: IncidentId) -> Result<BTreeMap<String, Vec<PersistedStageRecord>>> {
        let inner = self.lock()?;
        Ok(inner
            .tables
            .stage_data
            .iter()
            .filter(|((id, _), _)| *id == incident_id)
            .map(|((_, q), v)| (q.clone(), v.clone()))
            .collect())
    }

    // ---- locks ----

    /// Atomic test-and-set on the (incident, queue) lock.
    pub fn try_acquire_lock(&self, incident_id: IncidentId, queue: &str, holder: &ConsumerId) -> Result<bool> {
        let mut inner = self.lock()?;
        let key = (incident_id, queue.to_owned());
        if inner.tables.locks.contains_key(&key) {
            return Ok(false);
        }
        inner.commit(StoreOp::AcquireLock(StageLock {
            incident_id,
            queue: queue.to_owned(),
            holder: holder.clone(),
            acquired_timestamp: Timestamp::now(),
        }))?;
        Ok(true)
    }

    /// Delete the lock row; returns whether one existed.
    pub fn release_lock(&self, incident_id: IncidentId, queue: &str) -> Result<bool> {
        let mut inner = self.lock()?;
        let key = (incident_id, queue.to_owned());
        if !inner.tables.locks.contains_key(&key) {
            return Ok(false);
        }
        inner.commit(StoreOp::ReleaseLock {
            incident_id,
            queue: queue.to_owned(),
        })?;
        Ok(true)
    }

    pub fn locks_for(&self, incident_id: IncidentId) -> Result<Vec<StageLock>> {
        let inner = self.lock()?;
        Ok(inner
            .tables
            .locks
            .values()
            .filter(|l| l.incident_id == incident_id)
            .cloned()
            .collect())
    }

    /// Drop every lock. Locks never outlive the process that took them, so
    /// the engine calls this at startup.
    pub fn release_all_locks(&self) -> Result<usize> {
        let mut inner = self.lock()?;
        let keys: Vec<StageKey> = inner.tables.locks.keys().cloned().collect();
        for (incident_id, queue) in &keys {
            inner.commit(StoreOp::ReleaseLock {
                incident_id: *incident_id,
                queue: queue.clone(),
            })?;
        }
        Ok(keys.len())
    }

    // ---- cleanup ----

    /// Remove persisted stage data and locks of a terminated incident. The
    /// incident record and its message log are kept.
    pub fn clear_incident_state(&self, incident_id: IncidentId) -> Result<Timestamp> {
        let mut inner = self.lock()?;
        let status = inner.tables.incident(incident_id)?.status;
        if !status.is_terminal() {
            return Err(StoreError::IncidentState {
                incident_id,
                status,
                expected: "a terminal status",
            });
        }
        let timestamp = Timestamp::now();
        inner.commit(StoreOp::Clear {
            incident_id,
            timestamp,
        })?;
        Ok(timestamp)
    }

    /// Clear a terminated incident only if none of its messages are
    /// outstanding. The check and the clear happen in one transaction.
    pub fn clear_if_idle(&self, incident_id: IncidentId) -> Result<ClearOutcome> {
        let mut inner = self.lock()?;
        let rec = inner.tables.incident(incident_id)?;
        if !rec.status.is_terminal() {
            return Err(StoreError::IncidentState {
                incident_id,
                status: rec.status,
                expected: "a terminal status",
            });
        }
        if let Some(ts) = rec.cleared_timestamp {
            return Ok(ClearOutcome::AlreadyCleared(ts));
        }
        if rec.outstanding_messages > 0 {
            return Ok(ClearOutcome::Busy(rec.outstanding_messages));
        }
        let timestamp = Timestamp::now();
        inner.commit(StoreOp::Clear {
            incident_id,
            timestamp,
        })?;
        Ok(ClearOutcome::Cleared(timestamp))
    }

    // ---- statistics ----

    pub fn stage_statistics(&self, scope: &StatsScope) -> Result<Vec<StageStatistics>> {
        let inner = self.lock()?;
        let t = &inner.tables;
        let in_scope = |e: &MessageLogEntry| match scope {
            StatsScope::Incident(id) => e.incident_id == *id,
            StatsScope::WorkflowKind(kind) => t
                .incidents
                .get(&e.incident_id)
                .is_some_and(|i| &i.workflow_kind == kind),
        };

        #[derive(Default)]
        struct Acc {
            count: u64,
            wait_sum: f64,
            wait_max: f64,
            proc_sum: f64,
            proc_max: f64,
        }
        let mut per_queue: BTreeMap<String, Acc> = BTreeMap::new();
        for e in t.messages.values().filter(|e| e.status == MessageStatus::Completed && in_scope(e)) {
            let (Some(delivered), Some(completed)) = (e.delivered_timestamp, e.completed_timestamp) else {
                continue;
            };
            let wait = millis(delivered.saturating_since(e.sent_timestamp));
            let processing = millis(completed.saturating_since(delivered));
            let acc = per_queue.entry(e.queue.clone()).or_default();
            acc.count += 1;
            acc.wait_sum += wait;
            acc.wait_max = acc.wait_max.max(wait);
            acc.proc_sum += processing;
            acc.proc_max = acc.proc_max.max(processing);
        }
        Ok(per_queue
            .into_iter()
            .map(|(queue, a)| StageStatistics {
                queue,
                count: a.count,
                mean_queue_wait_ms: a.wait_sum / a.count as f64,
                max_queue_wait_ms: a.wait_max,
                mean_processing_ms: a.proc_sum / a.count as f64,
                max_processing_ms: a.proc_max,
            })
            .collect())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
