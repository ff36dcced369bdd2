use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde_json::Value;

use crate::ids::IncidentId;

use super::context::HandlerContext;
use super::Runtime;

pub type HandlerFn = Arc<dyn Fn(&mut HandlerContext<'_>) -> anyhow::Result<()> + Send + Sync>;

/// Runs once per incident after it turns ACTIVE and before its initial
/// message is published.
pub type InitHook = Arc<dyn Fn(&InitContext<'_>) -> anyhow::Result<()> + Send + Sync>;

pub struct InitContext<'a> {
    pub incident_id: IncidentId,
    pub label: &'a str,
    pub initial_payload: &'a Value,
    pub runtime: &'a Runtime,
}

/// Binds a queue to its handler.
#[derive(Clone)]
pub struct StageRegistration {
    pub queue: String,
    pub handler: HandlerFn,
    /// Critical stages never run two handler bodies for the same incident at
    /// once. Joins must be critical.
    pub critical: bool,
}

impl StageRegistration {
    pub fn new<F>(queue: impl Into<String>, handler: F) -> Self
    where
        F: Fn(&mut HandlerContext<'_>) -> anyhow::Result<()> + Send + Sync + 'static,
    {
        Self {
            queue: queue.into(),
            handler: Arc::new(handler),
            critical: false,
        }
    }

    pub fn critical<F>(queue: impl Into<String>, handler: F) -> Self
    where
        F: Fn(&mut HandlerContext<'_>) -> anyhow::Result<()> + Send + Sync + 'static,
    {
        Self {
            critical: true,
            ..Self::new(queue, handler)
        }
    }
}

impl fmt::Debug for StageRegistration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StageRegistration")
            .field("queue", &self.queue)
            .field("critical", &self.critical)
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub struct WorkflowDefinition {
    pub kind: String,
    pub stages: Vec<StageRegistration>,
    pub init_queue: String,
    pub on_init: Option<InitHook>,
}

impl WorkflowDefinition {
    pub fn new(kind: impl Into<String>, init_queue: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            stages: Vec::new(),
            init_queue: init_queue.into(),
            on_init: None,
        }
    }

    pub fn stage(mut self, stage: StageRegistration) -> Self {
        self.stages.push(stage);
        self
    }

    pub fn on_init<F>(mut self, hook: F) -> Self
    where
        F: Fn(&InitContext<'_>) -> anyhow::Result<()> + Send + Sync + 'static,
    {
        self.on_init = Some(Arc::new(hook));
        self
    }

    pub fn queues(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().map(|s| s.queue.as_str())
    }
}

impl fmt::Debug for WorkflowDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorkflowDefinition")
            .field("kind", &self.kind)
            .field("stages", &self.stages)
            .field("init_queue", &self.init_queue)
            .field("on_init", &self.on_init.is_some())
            .finish()
    }
}

/// Inputs a join waits for.
///
/// A join fires once per generation. After it fires, the next generation needs
/// a record newer than the last firing for every required tag, except sticky
/// tags, whose latest record carries over.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JoinSpec {
    pub required_sources: BTreeSet<String>,
    pub sticky: BTreeSet<String>,
}

impl JoinSpec {
    pub fn new<I, S>(required: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            required_sources: required.into_iter().map(Into::into).collect(),
            sticky: BTreeSet::new(),
        }
    }

    pub fn with_sticky<I, S>(mut self, sticky: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.sticky.extend(sticky.into_iter().map(Into::into));
        self
    }
}
