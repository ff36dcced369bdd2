//! Durable named FIFO queues with single-consumer delivery.
//!
//! Every mutation is appended to a per-queue log under `<data_dir>/queues/`
//! before the call returns, so a fresh [`Broker::open`] on the same directory
//! rebuilds exactly the pending and in-flight sets. Deliveries that were never
//! resolved are parked as orphans until [`Broker::recover`] puts them back at
//! the head of their queues.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

use crate::ids::{ConsumerId, IncidentId, MessageId};
use crate::journal::{Journal, JournalError};
use crate::time::Timestamp;

pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 64 * 1024;
pub const DEFAULT_REQUEUE_DELAY: Duration = Duration::from_millis(100);

const LOG_EXTENSION: &str = "log";
const COMPACT_MIN_RECORDS: usize = 1024;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("invalid queue name {0:?}: must be non-empty, without whitespace or path separators")]
    InvalidQueueName(String),
    #[error("unknown queue {0:?}")]
    UnknownQueue(String),
    #[error("payload of {size} bytes exceeds the {cap} byte cap")]
    PayloadTooLarge { size: usize, cap: usize },
    #[error("delivery tag {0} is not in flight")]
    UnknownTag(u64),
    #[error("consumer {0} already holds an unacknowledged delivery")]
    PrefetchExceeded(ConsumerId),
    #[error("broker has been halted")]
    Halted,
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error("broker i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BrokerError> = std::result::Result<T, E>;

/// Incident-tagged envelope. The payload carries handles to data, never the
/// data itself; its serialized size is capped at publish time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: MessageId,
    pub queue: String,
    pub incident_id: IncidentId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_message_id: Option<MessageId>,
    pub payload: Value,
    pub enqueue_timestamp: Timestamp,
    pub delivery_count: u32,
}

impl Message {
    pub fn new(queue: impl Into<String>, incident_id: IncidentId, payload: Value) -> Self {
        Self {
            message_id: MessageId::new(),
            queue: queue.into(),
            incident_id,
            parent_message_id: None,
            payload,
            enqueue_timestamp: Timestamp::now(),
            delivery_count: 0,
        }
    }

    pub fn with_parent(mut self, parent: Option<MessageId>) -> Self {
        self.parent_message_id = parent;
        self
    }
}

/// Token for one in-flight delivery.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeliveryTag {
    pub tag: u64,
    pub consumer_id: ConsumerId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordKind {
    Enqueue,
    Deliver,
    Ack,
    Requeue,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One entry of a queue log file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueueLogRecord {
    pub kind: RecordKind,
    pub message_id: MessageId,
    pub timestamp: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<Message>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub at_head: bool,
}

impl QueueLogRecord {
    fn new(kind: RecordKind, message_id: MessageId) -> Self {
        Self {
            kind,
            message_id,
            timestamp: Timestamp::now(),
            message: None,
            at_head: false,
        }
    }

    fn enqueue(message: &Message) -> Self {
        Self {
            message: Some(message.clone()),
            ..Self::new(RecordKind::Enqueue, message.message_id)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequeuePosition {
    #[default]
    Tail,
    Head,
}

#[derive(Clone, Debug)]
pub struct BrokerConfig {
    pub data_dir: PathBuf,
    pub max_payload_bytes: usize,
    pub requeue_delay: Duration,
    pub requeue_position: RequeuePosition,
    /// fsync every log append. Off by default: appends reach the OS before
    /// the call returns, which survives a process crash but not power loss.
    pub sync_writes: bool,
}

impl BrokerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            requeue_delay: DEFAULT_REQUEUE_DELAY,
            requeue_position: RequeuePosition::Tail,
            sync_writes: false,
        }
    }

    fn queue_dir(&self) -> PathBuf {
        self.data_dir.join("queues")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    /// Deliveries returned to their queues.
    pub restored: usize,
    /// Bytes dropped from torn log tails when the broker was opened.
    pub truncated_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueueDepth {
    pub queue: String,
    pub ready: usize,
    pub in_flight: usize,
}

struct Ready {
    message: Message,
    not_before: Option<Instant>,
}

struct QueueState {
    journal: Journal<QueueLogRecord>,
    ready: VecDeque<Ready>,
    in_flight: usize,
    records: usize,
}

struct InFlight {
    queue: String,
    message: Message,
    /// `None` for deliveries inherited from a previous process.
    consumer: Option<ConsumerId>,
}

#[derive(Default)]
struct Inner {
    queues: BTreeMap<String, QueueState>,
    in_flight: BTreeMap<u64, InFlight>,
    consumer_tags: HashMap<ConsumerId, u64>,
    cursors: HashMap<ConsumerId, usize>,
    next_tag: u64,
    truncated_bytes: u64,
}

pub struct Broker {
    config: BrokerConfig,
    inner: Mutex<Inner>,
    halted: AtomicBool,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("data_dir", &self.config.data_dir)
            .finish_non_exhaustive()
    }
}

pub fn validate_queue_name(name: &str) -> Result<()> {
    let bad = name.is_empty()
        || name.chars().any(|c| c.is_whitespace() || c == '/' || c == '\\')
        || name.starts_with('.');
    if bad {
        Err(BrokerError::InvalidQueueName(name.to_owned()))
    } else {
        Ok(())
    }
}

/// Replays one queue log into (ready order, orphaned deliveries in delivery order).
fn rebuild_queue(records: Vec<QueueLogRecord>) -> (Vec<Message>, Vec<Message>) {
    let mut messages: HashMap<MessageId, Message> = HashMap::new();
    let mut pending: BTreeMap<i64, MessageId> = BTreeMap::new();
    let mut position: HashMap<MessageId, i64> = HashMap::new();
    let mut delivered: BTreeMap<u64, MessageId> = BTreeMap::new();
    let mut delivered_seq: HashMap<MessageId, u64> = HashMap::new();
    let (mut head, mut tail, mut seq) = (0i64, 0i64, 0u64);

    for rec in records {
        let id = rec.message_id;
        match rec.kind {
            RecordKind::Enqueue => {
                let Some(msg) = rec.message else { continue };
                messages.insert(id, msg);
                tail += 1;
                pending.insert(tail, id);
                position.insert(id, tail);
            }
            RecordKind::Deliver => {
                let Some(msg) = messages.get_mut(&id) else { continue };
                if let Some(pos) = position.remove(&id) {
                    pending.remove(&pos);
                }
                msg.delivery_count += 1;
                seq += 1;
                delivered.insert(seq, id);
                delivered_seq.insert(id, seq);
            }
            RecordKind::Ack => {
                messages.remove(&id);
                if let Some(pos) = position.remove(&id) {
                    pending.remove(&pos);
                }
                if let Some(s) = delivered_seq.remove(&id) {
                    delivered.remove(&s);
                }
            }
            RecordKind::Requeue => {
                if !messages.contains_key(&id) {
                    continue;
                }
                if let Some(s) = delivered_seq.remove(&id) {
                    delivered.remove(&s);
                }
                if let Some(pos) = position.remove(&id) {
                    pending.remove(&pos);
                }
                let pos = if rec.at_head {
                    head -= 1;
                    head
                } else {
                    tail += 1;
                    tail
                };
                pending.insert(pos, id);
                position.insert(id, pos);
            }
        }
    }

    let take = |id: &MessageId, messages: &mut HashMap<MessageId, Message>| messages.remove(id);
    let ready = pending
        .values()
        .filter_map(|id| take(id, &mut messages))
        .collect();
    let orphans = delivered
        .values()
        .filter_map(|id| take(id, &mut messages))
        .collect();
    (ready, orphans)
}

impl Broker {
    /// Open the broker over `config.data_dir`, replaying any existing queue
    /// logs. Deliveries left unresolved by a previous process stay parked
    /// until [`Broker::recover`] is called.
    pub fn open(config: BrokerConfig) -> Result<Self> {
        let dir = config.queue_dir();
        fs::create_dir_all(&dir)?;
        let mut inner = Inner::default();

        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == LOG_EXTENSION))
            .collect();
        paths.sort();

        for path in paths {
            let Some(name) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
                continue;
            };
            if validate_queue_name(&name).is_err() {
                warn!(path = %path.display(), "skipping queue log with invalid name");
                continue;
            }
            let replay = Journal::<QueueLogRecord>::replay(&path)?;
            if replay.truncated_bytes > 0 {
                warn!(queue = %name, bytes = replay.truncated_bytes, "truncated torn queue log tail");
            }
            inner.truncated_bytes += replay.truncated_bytes;
            let records = replay.records.len();
            let (ready, orphans) = rebuild_queue(replay.records);
            let journal = Journal::open(&path, config.sync_writes)?;
            let state = QueueState {
                journal,
                ready: ready
                    .into_iter()
                    .map(|message| Ready {
                        message,
                        not_before: None,
                    })
                    .collect(),
                in_flight: orphans.len(),
                records,
            };
            for message in orphans {
                inner.next_tag += 1;
                inner.in_flight.insert(
                    inner.next_tag,
                    InFlight {
                        queue: name.clone(),
                        message,
                        consumer: None,
                    },
                );
            }
            inner.queues.insert(name, state);
        }

        Ok(Self {
            config,
            inner: Mutex::new(inner),
            halted: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    fn check_live(&self) -> Result<()> {
        if self.halted.load(Ordering::Acquire) {
            Err(BrokerError::Halted)
        } else {
            Ok(())
        }
    }

    /// Stop serving every operation, as if the hosting process had died.
    /// Used to simulate crashes; the on-disk logs are left as they are.
    pub fn halt(&self) {
        self.halted.store(true, Ordering::Release);
    }

    fn log_path(&self, name: &str) -> PathBuf {
        self.config
            .queue_dir()
            .join(format!("{name}.{LOG_EXTENSION}"))
    }

    pub fn declare_queue(&self, name: &str) -> Result<()> {
        validate_queue_name(name)?;
        self.check_live()?;
        let mut inner = self.inner.lock();
        if inner.queues.contains_key(name) {
            return Ok(());
        }
        let journal = Journal::open(&self.log_path(name), self.config.sync_writes)?;
        inner.queues.insert(
            name.to_owned(),
            QueueState {
                journal,
                ready: VecDeque::new(),
                in_flight: 0,
                records: 0,
            },
        );
        debug!(queue = name, "declared queue");
        Ok(())
    }

    pub fn has_queue(&self, name: &str) -> bool {
        self.inner.lock().queues.contains_key(name)
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.inner.lock().queues.keys().cloned().collect()
    }

    /// Reject payloads whose serialized size exceeds the configured cap.
    pub fn check_payload(&self, payload: &Value) -> Result<()> {
        let size = serde_json::to_vec(payload).map_err(JournalError::from)?.len();
        if size > self.config.max_payload_bytes {
            return Err(BrokerError::PayloadTooLarge {
                size,
                cap: self.config.max_payload_bytes,
            });
        }
        Ok(())
    }

    pub fn publish(&self, message: Message) -> Result<MessageId> {
        self.check_live()?;
        self.check_payload(&message.payload)?;
        let mut inner = self.inner.lock();
        let queue = inner
            .queues
            .get_mut(&message.queue)
            .ok_or_else(|| BrokerError::UnknownQueue(message.queue.clone()))?;
        queue.journal.append(&QueueLogRecord::enqueue(&message))?;
        queue.records += 1;
        let id = message.message_id;
        queue.ready.push_back(Ready {
            message,
            not_before: None,
        });
        Ok(id)
    }

    /// Hand the oldest ready message from `subscriptions` to `consumer`.
    ///
    /// Queues are scanned round-robin, starting one past the queue this
    /// consumer was last served from. A consumer may hold only one unresolved
    /// delivery at a time.
    pub fn fetch(
        &self,
        consumer: &ConsumerId,
        subscriptions: &[String],
    ) -> Result<Option<(DeliveryTag, Message)>> {
        self.check_live()?;
        let mut inner = self.inner.lock();
        if let Some(name) = subscriptions.iter().find(|q| !inner.queues.contains_key(*q)) {
            return Err(BrokerError::UnknownQueue(name.clone()));
        }
        if subscriptions.is_empty() {
            return Ok(None);
        }
        if inner.consumer_tags.contains_key(consumer) {
            return Err(BrokerError::PrefetchExceeded(consumer.clone()));
        }

        let now = Instant::now();
        let n = subscriptions.len();
        let start = inner.cursors.get(consumer).copied().unwrap_or(0) % n;
        for offset in 0..n {
            let idx = (start + offset) % n;
            let name = &subscriptions[idx];
            let queue = inner.queues.get_mut(name).expect("checked above");
            let Some(pos) = queue
                .ready
                .iter()
                .position(|r| r.not_before.is_none_or(|t| t <= now))
            else {
                continue;
            };
            let mut message = queue.ready.remove(pos).expect("position is in range").message;
            queue
                .journal
                .append(&QueueLogRecord::new(RecordKind::Deliver, message.message_id))?;
            queue.records += 1;
            queue.in_flight += 1;
            message.delivery_count += 1;

            inner.next_tag += 1;
            let tag = inner.next_tag;
            inner.in_flight.insert(
                tag,
                InFlight {
                    queue: name.clone(),
                    message: message.clone(),
                    consumer: Some(consumer.clone()),
                },
            );
            inner.consumer_tags.insert(consumer.clone(), tag);
            inner.cursors.insert(consumer.clone(), idx + 1);
            return Ok(Some((
                DeliveryTag {
                    tag,
                    consumer_id: consumer.clone(),
                },
                message,
            )));
        }
        Ok(None)
    }

    fn take_in_flight(inner: &mut Inner, tag: &DeliveryTag) -> Result<InFlight> {
        let owned = inner
            .in_flight
            .get(&tag.tag)
            .is_some_and(|f| f.consumer.as_ref() == Some(&tag.consumer_id));
        if !owned {
            return Err(BrokerError::UnknownTag(tag.tag));
        }
        inner.consumer_tags.remove(&tag.consumer_id);
        Ok(inner.in_flight.remove(&tag.tag).expect("checked above"))
    }

    pub fn ack(&self, tag: &DeliveryTag) -> Result<()> {
        self.check_live()?;
        let mut inner = self.inner.lock();
        let flight = Self::take_in_flight(&mut inner, tag)?;
        let queue = inner
            .queues
            .get_mut(&flight.queue)
            .expect("in-flight message belongs to a declared queue");
        queue
            .journal
            .append(&QueueLogRecord::new(RecordKind::Ack, flight.message.message_id))?;
        queue.records += 1;
        queue.in_flight -= 1;

        let live = queue.ready.len() + queue.in_flight;
        if queue.records >= COMPACT_MIN_RECORDS && queue.records > 4 * (live + 1) {
            let name = flight.queue;
            self.compact(&mut inner, &name)?;
        }
        Ok(())
    }

    /// Return an in-flight message to its queue. It becomes fetchable again
    /// after the configured requeue delay.
    pub fn requeue(&self, tag: &DeliveryTag) -> Result<()> {
        self.check_live()?;
        let mut inner = self.inner.lock();
        let flight = Self::take_in_flight(&mut inner, tag)?;
        let at_head = self.config.requeue_position == RequeuePosition::Head;
        let queue = inner
            .queues
            .get_mut(&flight.queue)
            .expect("in-flight message belongs to a declared queue");
        let mut rec = QueueLogRecord::new(RecordKind::Requeue, flight.message.message_id);
        rec.at_head = at_head;
        queue.journal.append(&rec)?;
        queue.records += 1;
        queue.in_flight -= 1;

        let ready = Ready {
            message: flight.message,
            not_before: Some(Instant::now() + self.config.requeue_delay),
        };
        if at_head {
            queue.ready.push_front(ready);
        } else {
            queue.ready.push_back(ready);
        }
        Ok(())
    }

    /// Return every unresolved delivery to the head of its queue, preserving
    /// their relative delivery order, then compact all queue logs.
    ///
    /// Must run before any consumer attaches; tags handed out earlier become
    /// invalid.
    pub fn recover(&self) -> Result<RecoveryReport> {
        self.check_live()?;
        let mut inner = self.inner.lock();
        let flights = std::mem::take(&mut inner.in_flight);
        inner.consumer_tags.clear();
        let restored = flights.len();

        // Reverse delivery order so push_front leaves the earliest delivery first.
        for (_, flight) in flights.into_iter().rev() {
            let queue = inner
                .queues
                .get_mut(&flight.queue)
                .expect("in-flight message belongs to a declared queue");
            queue.in_flight -= 1;
            queue.ready.push_front(Ready {
                message: flight.message,
                not_before: None,
            });
        }

        let names: Vec<String> = inner.queues.keys().cloned().collect();
        for name in names {
            self.compact(&mut inner, &name)?;
        }
        let truncated_bytes = std::mem::take(&mut inner.truncated_bytes);
        debug!(restored, "{restored} recovered");
        Ok(RecoveryReport {
            restored,
            truncated_bytes,
        })
    }

    fn compact(&self, inner: &mut Inner, name: &str) -> Result<()> {
        let mut records = Vec::new();
        for flight in inner.in_flight.values().filter(|f| f.queue == name) {
            let mut before = flight.message.clone();
            before.delivery_count = before.delivery_count.saturating_sub(1);
            records.push(QueueLogRecord::enqueue(&before));
            records.push(QueueLogRecord::new(RecordKind::Deliver, before.message_id));
        }
        let queue = inner.queues.get_mut(name).expect("compacting a declared queue");
        records.extend(queue.ready.iter().map(|r| QueueLogRecord::enqueue(&r.message)));
        queue.journal = Journal::rewrite(&self.log_path(name), records.iter(), self.config.sync_writes)?;
        queue.records = records.len();
        Ok(())
    }

    pub fn depth(&self, name: &str) -> Option<QueueDepth> {
        let inner = self.inner.lock();
        inner.queues.get(name).map(|q| QueueDepth {
            queue: name.to_owned(),
            ready: q.ready.len(),
            in_flight: q.in_flight,
        })
    }

    pub fn depths(&self) -> Vec<QueueDepth> {
        let inner = self.inner.lock();
        inner
            .queues
            .iter()
            .map(|(name, q)| QueueDepth {
                queue: name.clone(),
                ready: q.ready.len(),
                in_flight: q.in_flight,
            })
            .collect()
    }

    /// Total messages waiting or in flight across all queues.
    pub fn total_pending(&self) -> usize {
        let inner = self.inner.lock();
        inner
            .queues
            .values()
            .map(|q| q.ready.len() + q.in_flight)
            .sum()
    }

    pub fn in_flight_count(&self) -> usize {
        self.inner.lock().in_flight.len()
    }

    /// Snapshot of the ready messages of one queue, head first.
    pub fn ready_messages(&self, name: &str) -> Vec<Message> {
        let inner = self.inner.lock();
        inner
            .queues
            .get(name)
            .map(|q| q.ready.iter().map(|r| r.message.clone()).collect())
            .unwrap_or_default()
    }

    /// Snapshot of in-flight messages (including orphans awaiting recovery).
    pub fn in_flight_messages(&self) -> Vec<Message> {
        let inner = self.inner.lock();
        inner.in_flight.values().map(|f| f.message.clone()).collect()
    }

    pub fn data_dir(&self) -> &Path {
        &self.config.data_dir
    }
}
