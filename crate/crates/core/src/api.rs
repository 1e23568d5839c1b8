//! User-level verbs: load prompts, pull experience, announce new weights.
//!
//! [`Service`] is built either over TCP from a [`RunConfig`] or directly
//! over in-process components; the verbs behave the same in both cases.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::client::{Batch, ClientError, IteratorConfig, StorageDirectory, StreamingBatchIterator, WriteAck};
use crate::config::{ConfigError, RunConfig};
use crate::controller::PackingPolicy;
use crate::coordinator::{CoordError, TransferHandle};
use crate::net::{RemoteController, RemoteCoordinator, RemoteStorage};
use crate::transport::{ControlApi, CoordinatorApi, StorageApi};
use crate::types::{Cell, CellValue, ColumnId, Epoch, GlobalIndex, TaskSpec, WeightVersion};

/// Column that prompts are written to.
pub const PROMPT_COLUMN: &str = "prompt";

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{got} prompts for a global batch of {expected}")]
    SizeMismatch { expected: u64, got: usize },
    #[error("no controller for task {0}")]
    UnknownTask(String),
    #[error("no coordinator configured")]
    NoCoordinator,
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

struct TaskHandle {
    spec: TaskSpec,
    controller: Arc<dyn ControlApi>,
}

pub struct Service {
    storage: StorageDirectory,
    tasks: BTreeMap<String, TaskHandle>,
    coordinator: Option<Arc<dyn CoordinatorApi>>,
}

impl Service {
    pub fn new(storage: StorageDirectory) -> Self {
        Service {
            storage,
            tasks: BTreeMap::new(),
            coordinator: None,
        }
    }

    pub fn with_task(mut self, spec: TaskSpec, controller: Arc<dyn ControlApi>) -> Self {
        self.tasks.insert(spec.task_name.clone(), TaskHandle { spec, controller });
        self
    }

    pub fn with_coordinator(mut self, coordinator: Arc<dyn CoordinatorApi>) -> Self {
        self.coordinator = Some(coordinator);
        self
    }

    /// Remote handles for every endpoint in `cfg`. Nothing is contacted
    /// until the first call.
    pub fn connect(cfg: &RunConfig) -> Result<Self, ApiError> {
        let units: Vec<Arc<dyn StorageApi>> = cfg
            .topology
            .storage
            .iter()
            .enumerate()
            .map(|(i, e)| Arc::new(RemoteStorage::new(i as u32, e.clone())) as Arc<dyn StorageApi>)
            .collect();
        let mut svc = Service::new(StorageDirectory::new(cfg.partition(), units)?);
        for t in &cfg.topology.tasks {
            let ctl = Arc::new(RemoteController::new(t.name.clone(), t.endpoint.clone()));
            svc = svc.with_task(t.spec().map_err(ConfigError::from)?, ctl);
        }
        if let Some(c) = &cfg.coordinator {
            svc = svc.with_coordinator(Arc::new(RemoteCoordinator::new(c.endpoint.clone())));
        }
        Ok(svc)
    }

    pub fn storage(&self) -> &StorageDirectory {
        &self.storage
    }

    /// Writes `prompts[i]` as the prompt cell of row `i`. The count must
    /// equal the global batch size.
    pub fn put_prompts_data(&self, epoch: Epoch, prompts: Vec<Vec<u8>>) -> Result<WriteAck, ApiError> {
        let expected = self.storage.partition().epoch_size();
        if prompts.len() as u64 != expected {
            return Err(ApiError::SizeMismatch {
                expected,
                got: prompts.len(),
            });
        }
        let column = ColumnId::new(PROMPT_COLUMN).expect("nonempty");
        let cells = prompts
            .into_iter()
            .enumerate()
            .map(|(i, p)| Cell::new(GlobalIndex(i as u64), column.clone(), CellValue::new(p)))
            .collect();
        Ok(self.storage.put_cells(epoch, cells)?)
    }

    /// A streaming iterator over `task`'s inputs for consumer group `group`.
    pub fn experience(
        &self,
        task: &str,
        group: u32,
        micro_batch_size: u32,
        policy: PackingPolicy,
    ) -> Result<StreamingBatchIterator, ApiError> {
        let h = self.tasks.get(task).ok_or_else(|| ApiError::UnknownTask(task.into()))?;
        let config = IteratorConfig::new(h.spec.clone(), group, micro_batch_size).policy(policy);
        Ok(StreamingBatchIterator::new(config, h.controller.clone(), self.storage.clone()))
    }

    /// Blocks for the next fifo micro-batch of `task` (consumer group 0).
    /// `None` once the epoch is exhausted.
    pub fn get_experience_data(&self, task: &str, micro_batch_size: u32) -> Result<Option<Batch>, ApiError> {
        Ok(self
            .experience(task, 0, micro_batch_size, PackingPolicy::Fifo)?
            .next_batch()?)
    }

    /// Announces that weights `version` are ready for the rollout instances.
    pub fn weight_sync_notify(&self, version: WeightVersion) -> Result<TransferHandle, ApiError> {
        let c = self.coordinator.as_ref().ok_or(ApiError::NoCoordinator)?;
        Ok(c.weight_sync_notify(version)?)
    }
}
