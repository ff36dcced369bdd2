use std::collections::BTreeMap;

use anyhow::{anyhow, bail};
use serde_json::Value;

use crate::broker::Message;
use crate::ids::{ConsumerId, IncidentId, MessageId};
use crate::statestore::{PersistedStageRecord, StateStore};

use super::definition::{JoinSpec, StageRegistration};
use super::join::{self, Decision};
use super::{Outlet, Runtime};

#[derive(Clone, Debug, PartialEq)]
pub struct OutboxEntry {
    pub queue: String,
    pub payload: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LifecycleRequest {
    Complete,
    Cancel,
}

/// What a handler sees while it runs. Sends are buffered in the outbox and
/// published only if the handler returns `Ok`.
pub struct HandlerContext<'a> {
    pub(crate) runtime: &'a Runtime,
    pub(crate) message: &'a Message,
    pub(crate) stage: &'a StageRegistration,
    pub(crate) workflow_kind: &'a str,
    pub(crate) consumer: &'a ConsumerId,
    pub(crate) outbox: Vec<OutboxEntry>,
    pub(crate) lifecycle: Option<LifecycleRequest>,
    /// First send failure. The task fails even if the handler swallowed it.
    pub(crate) failure: Option<String>,
}

impl<'a> HandlerContext<'a> {
    pub fn incident_id(&self) -> IncidentId {
        self.message.incident_id
    }

    pub fn queue(&self) -> &str {
        &self.message.queue
    }

    pub fn message_id(&self) -> MessageId {
        self.message.message_id
    }

    pub fn message(&self) -> &Message {
        self.message
    }

    pub fn payload(&self) -> &Value {
        &self.message.payload
    }

    pub fn workflow_kind(&self) -> &str {
        self.workflow_kind
    }

    pub fn consumer_id(&self) -> &ConsumerId {
        self.consumer
    }

    pub fn is_critical(&self) -> bool {
        self.stage.critical
    }

    /// Queue a message for `queue`. It is published after the handler exits
    /// cleanly, with this message as its parent.
    pub fn send(&mut self, queue: &str, payload: Value) -> anyhow::Result<()> {
        let outcome = if !self.runtime.workflow_has_queue(self.workflow_kind, queue) {
            Err(anyhow!(
                "queue {queue:?} is not a stage of workflow {:?}",
                self.workflow_kind
            ))
        } else {
            self.runtime
                .broker()
                .check_payload(&payload)
                .map_err(anyhow::Error::from)
        };
        match outcome {
            Ok(()) => {
                self.outbox.push(OutboxEntry {
                    queue: queue.to_owned(),
                    payload,
                });
                Ok(())
            }
            Err(e) => {
                self.failure.get_or_insert_with(|| e.to_string());
                Err(e)
            }
        }
    }

    pub fn outbox(&self) -> &[OutboxEntry] {
        &self.outbox
    }

    pub fn persist_stage_data(&self, queue: &str, payload: Value) -> anyhow::Result<u64> {
        Ok(self.store().persist_stage_data(self.incident_id(), queue, payload)?)
    }

    pub fn retrieve_stage_data(&self, queue: &str) -> anyhow::Result<Vec<PersistedStageRecord>> {
        Ok(self.store().retrieve_stage_data(self.incident_id(), queue)?)
    }

    /// Record this message's input for `source_tag` and return the full input
    /// set if the join is complete for a generation that has not fired yet.
    pub fn join_collect(
        &mut self,
        source_tag: &str,
        spec: &JoinSpec,
    ) -> anyhow::Result<Option<BTreeMap<String, Value>>> {
        if !self.stage.critical {
            bail!("join on non-critical stage {:?}", self.stage.queue);
        }
        if !spec.required_sources.contains(source_tag) {
            bail!("source tag {source_tag:?} is not required by the join");
        }
        let incident = self.incident_id();
        let queue = self.message.queue.clone();
        let store = self.store();
        let records = join::parse(&store.retrieve_stage_data(incident, &queue)?);
        if !join::already_recorded(&records, self.message_id()) {
            store.persist_stage_data(
                incident,
                &queue,
                join::input_payload(source_tag, self.message_id(), self.payload()),
            )?;
        }
        let records = join::parse(&store.retrieve_stage_data(incident, &queue)?);
        match join::evaluate(&records, spec, self.message_id()) {
            Decision::Wait => Ok(None),
            Decision::Fire { key, inputs } => {
                store.persist_stage_data(incident, &queue, join::fired_payload(&key, self.message_id()))?;
                Ok(Some(inputs))
            }
            Decision::Replay { inputs } => Ok(Some(inputs)),
        }
    }

    /// Mark the incident COMPLETED once this handler exits cleanly.
    pub fn complete_incident(&mut self) {
        self.lifecycle = Some(LifecycleRequest::Complete);
    }

    /// Mark the incident CANCELLED once this handler exits cleanly.
    pub fn cancel_incident(&mut self) {
        self.lifecycle = Some(LifecycleRequest::Cancel);
    }

    pub fn store(&self) -> &StateStore {
        self.runtime.store()
    }

    pub fn outlet(&self) -> Outlet {
        self.runtime.outlet()
    }

    pub fn runtime(&self) -> &Runtime {
        self.runtime
    }
}
