//! Engine entry point: configuration, startup and recovery, the task graph
//! view and the HTTP API.

pub mod api;
pub mod config;
pub mod engine;
pub mod graph;

pub use api::{router, HttpServer};
pub use config::{ConfigError, EngineConfig};
pub use engine::{DemoRun, Engine, IncidentDetail};
pub use graph::{TaskEdge, TaskGraph, TaskNode};
