//! TOML run configuration.
//!
//! ```toml
//! log_level = "info"
//!
//! [topology]
//! global_batch = 64
//! storage = ["127.0.0.1:7101", "127.0.0.1:7102"]   # unit i listens on storage[i]
//!
//! [[topology.task]]
//! name = "actor_rollout"
//! inputs = ["prompt"]
//! outputs = ["response"]
//! endpoint = "127.0.0.1:7201"
//!
//! [coordinator]                  # optional
//! endpoint = "127.0.0.1:7301"
//! mode = "asynchronous"          # or "synchronous"
//! instances = 4
//! stagger_k = 0                  # 0 disables staggering
//! sync_timeout_ms = 30000
//!
//! [scenario]                     # optional, same schema as a scenario file
//! mode = "streamed_async"
//! ...
//! ```

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::coordinator::{Coordinator, CoordError, TransferMode};
use crate::sim::SimScenario;
use crate::storage::{PartitionMap, StoreError};
use crate::types::{ColumnId, TaskSpec, TypeError};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("endpoint {0} is used more than once")]
    DuplicateEndpoint(String),
    #[error("task {0} is declared more than once")]
    DuplicateTask(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("no storage units configured")]
    NoStorage,
    #[error("no coordinator section")]
    NoCoordinator,
    #[error("no scenario section")]
    NoScenario,
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub inputs: Vec<ColumnId>,
    pub outputs: Vec<ColumnId>,
    pub endpoint: String,
}

impl TaskEntry {
    pub fn spec(&self) -> Result<TaskSpec, TypeError> {
        TaskSpec::new(self.name.clone(), self.inputs.clone(), self.outputs.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub global_batch: u64,
    pub storage: Vec<String>,
    #[serde(default, rename = "task")]
    pub tasks: Vec<TaskEntry>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoordinatorConfig {
    pub endpoint: String,
    pub mode: TransferMode,
    pub instances: u32,
    #[serde(default)]
    pub stagger_k: usize,
    #[serde(default = "default_timeout_ms")]
    pub sync_timeout_ms: u64,
}

impl CoordinatorConfig {
    pub fn sync_timeout(&self) -> Duration {
        Duration::from_millis(self.sync_timeout_ms)
    }

    pub fn build(&self) -> Result<Coordinator, CoordError> {
        let ids: Vec<u32> = (0..self.instances).collect();
        let c = Coordinator::new(self.mode, &ids);
        if self.stagger_k > 0 {
            c.with_stagger(self.stagger_k)
        } else {
            Ok(c)
        }
    }
}

fn default_log_level() -> String {
    "info".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_log_level")]
    pub log_level: String,
    pub topology: Topology,
    pub coordinator: Option<CoordinatorConfig>,
    pub scenario: Option<SimScenario>,
}

impl RunConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&read(path.as_ref())?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.topology;
        if t.storage.is_empty() {
            return Err(ConfigError::NoStorage);
        }
        PartitionMap::new(t.global_batch, t.storage.len() as u32)?;
        let mut endpoints = BTreeSet::new();
        let all = t
            .storage
            .iter()
            .chain(t.tasks.iter().map(|x| &x.endpoint))
            .chain(self.coordinator.iter().map(|c| &c.endpoint));
        for e in all {
            if !endpoints.insert(e.as_str()) {
                return Err(ConfigError::DuplicateEndpoint(e.clone()));
            }
        }
        let mut names = BTreeSet::new();
        for task in &t.tasks {
            task.spec()?;
            if !names.insert(task.name.as_str()) {
                return Err(ConfigError::DuplicateTask(task.name.clone()));
            }
        }
        if let Some(c) = &self.coordinator {
            c.build()?;
        }
        if let Some(s) = &self.scenario {
            s.validate().map_err(|e| ConfigError::Scenario(e.to_string()))?;
        }
        Ok(())
    }

    pub fn partition(&self) -> PartitionMap {
        PartitionMap::new(self.topology.global_batch, self.topology.storage.len() as u32)
            .expect("validated")
    }

    pub fn task(&self, name: &str) -> Result<&TaskEntry, ConfigError> {
        self.topology
            .tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ConfigError::UnknownTask(name.into()))
    }

    pub fn coordinator(&self) -> Result<&CoordinatorConfig, ConfigError> {
        self.coordinator.as_ref().ok_or(ConfigError::NoCoordinator)
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a scenario from either a bare scenario file or a run config with
/// a `[scenario]` table.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<SimScenario, ConfigError> {
    let text = read(path.as_ref())?;
    let value: toml::Table = toml::from_str(&text)?;
    let sc = if value.contains_key("topology") {
        RunConfig::parse(&text)?.scenario.ok_or(ConfigError::NoScenario)?
    } else {
        toml::from_str::<SimScenario>(&text)?
    };
    sc.validate().map_err(|e| ConfigError::Scenario(e.to_string()))?;
    Ok(sc)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        [topology]
        global_batch = 8
        storage = ["127.0.0.1:7101", "127.0.0.1:7102"]

        [[topology.task]]
        name = "actor_rollout"
        inputs = ["prompt"]
        outputs = ["response"]
        endpoint = "127.0.0.1:7201"
    "#;

    #[test]
    fn minimal_config_parses() {
        let cfg = RunConfig::parse(BASE).unwrap();
        assert_eq!(cfg.log_level, "info");
        assert_eq!(cfg.partition().num_units(), 2);
        assert_eq!(cfg.task("actor_rollout").unwrap().outputs[0].as_str(), "response");
        assert!(matches!(cfg.task("x"), Err(ConfigError::UnknownTask(_))));
    }

    #[test]
    fn duplicate_endpoint_rejected() {
        let text = BASE.replace("127.0.0.1:7201", "127.0.0.1:7102");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::DuplicateEndpoint(e)) if e == "127.0.0.1:7102"));
    }

    #[test]
    fn unknown_field_rejected() {
        let text = format!("bogus = 1\n{BASE}");
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn bad_stagger_rejected() {
        let text = format!(
            "{BASE}\n[coordinator]\nendpoint = \"127.0.0.1:7301\"\nmode = \"asynchronous\"\ninstances = 2\nstagger_k = 2\n"
        );
        assert!(matches!(RunConfig::parse(&text), Err(ConfigError::Coord(_))));
    }
}
