//! Engine configuration: a TOML document plus command-line overrides.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::broker::{BrokerConfig, DEFAULT_MAX_PAYLOAD_BYTES};
use crate::demo_wildfire::WildfireSettings;
use crate::edi::{EdiConfig, DEFAULT_MAX_PUSH_BYTES, DEFAULT_SIGNATURE_HEADERS};
use crate::simenv::SimConfig;
use crate::workers::{WorkerPoolConfig, DEFAULT_WORKERS};

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrokerSection {
    pub max_payload_bytes: usize,
    pub requeue_delay_ms: u64,
    pub sync_writes: bool,
}

impl Default for BrokerSection {
    fn default() -> Self {
        Self {
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            requeue_delay_ms: 50,
            sync_writes: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdiSection {
    pub max_push_bytes: usize,
    pub signature_headers: Vec<String>,
}

impl Default for EdiSection {
    fn default() -> Self {
        Self {
            max_push_bytes: DEFAULT_MAX_PUSH_BYTES,
            signature_headers: DEFAULT_SIGNATURE_HEADERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WildfireSection {
    pub machine: String,
    pub weather_runtime_ms: u64,
    pub forecast_interval_ms: u64,
    pub forecast_count: u32,
    pub poll_interval_ms: u64,
    pub forecast_source_url: String,
}

impl Default for WildfireSection {
    fn default() -> Self {
        let d = WildfireSettings::default();
        Self {
            machine: d.machine,
            weather_runtime_ms: d.weather_runtime.as_millis() as u64,
            forecast_interval_ms: d.forecast_interval.as_millis() as u64,
            forecast_count: d.forecast_count,
            poll_interval_ms: d.poll_interval.as_millis() as u64,
            forecast_source_url: d.forecast_source_url,
        }
    }
}

impl WildfireSection {
    pub fn settings(&self) -> WildfireSettings {
        WildfireSettings {
            machine: self.machine.clone(),
            weather_runtime: Duration::from_millis(self.weather_runtime_ms),
            forecast_interval: Duration::from_millis(self.forecast_interval_ms),
            forecast_count: self.forecast_count,
            poll_interval: Duration::from_millis(self.poll_interval_ms),
            forecast_source_url: self.forecast_source_url.clone(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub data_dir: PathBuf,
    pub workers: usize,
    pub bind: String,
    pub port: u16,
    pub idle_poll_ms: u64,
    pub broker: BrokerSection,
    pub edi: EdiSection,
    pub simulation: SimConfig,
    pub wildfire: WildfireSection,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("./data"),
            workers: DEFAULT_WORKERS,
            bind: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            idle_poll_ms: 5,
            broker: BrokerSection::default(),
            edi: EdiSection::default(),
            simulation: SimConfig::default(),
            wildfire: WildfireSection::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_owned(),
            source: Box::new(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    /// An engine rooted at `data_dir` with otherwise default settings.
    pub fn with_data_dir(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data_dir.as_os_str().is_empty() {
            return Err(invalid("data_dir", "must not be empty"));
        }
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        if self.idle_poll_ms == 0 {
            return Err(invalid("idle_poll_ms", "must be positive"));
        }
        if self.broker.max_payload_bytes < 1024 {
            return Err(invalid("broker.max_payload_bytes", "must be at least 1024"));
        }
        if self.edi.max_push_bytes == 0 {
            return Err(invalid("edi.max_push_bytes", "must be positive"));
        }
        if self.edi.signature_headers.is_empty() {
            return Err(invalid("edi.signature_headers", "must name at least one header"));
        }
        self.simulation.validate().map_err(|e| match e {
            crate::simenv::SimError::InvalidRoster(msg) => match msg.split_once(": ") {
                Some((field, reason)) => invalid(format!("simulation.{field}"), reason),
                None => invalid("simulation", msg),
            },
            other => invalid("simulation", other.to_string()),
        })?;
        let w = &self.wildfire;
        if !self.simulation.machines.iter().any(|m| m.name == w.machine) {
            return Err(invalid("wildfire.machine", format!("{:?} is not a configured machine", w.machine)));
        }
        for (field, v) in [
            ("wildfire.weather_runtime_ms", w.weather_runtime_ms),
            ("wildfire.forecast_interval_ms", w.forecast_interval_ms),
            ("wildfire.poll_interval_ms", w.poll_interval_ms),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if w.forecast_count == 0 {
            return Err(invalid("wildfire.forecast_count", "must be at least 1"));
        }
        Ok(())
    }

    pub fn broker_config(&self) -> BrokerConfig {
        BrokerConfig {
            max_payload_bytes: self.broker.max_payload_bytes,
            requeue_delay: Duration::from_millis(self.broker.requeue_delay_ms),
            sync_writes: self.broker.sync_writes,
            ..BrokerConfig::new(&self.data_dir)
        }
    }

    pub fn pool_config(&self) -> WorkerPoolConfig {
        WorkerPoolConfig {
            worker_count: self.workers,
            idle_poll_interval: Duration::from_millis(self.idle_poll_ms),
        }
    }

    pub fn edi_config(&self) -> EdiConfig {
        EdiConfig {
            max_push_bytes: self.edi.max_push_bytes,
            signature_headers: self.edi.signature_headers.iter().map(|h| h.to_ascii_lowercase()).collect(),
            auto_poll: true,
        }
    }
}
