//! Interfaces between the planes. Every component talks to its peers
//! through these traits so the same logic runs over in-process handles and
//! over TCP (`crate::net`).

use std::collections::BTreeSet;

use bytes::Bytes;

use crate::controller::{ControlError, Grant, PackingPolicy};
use crate::coordinator::{CoordError, SwapResult, TransferHandle};
use crate::storage::{PutAck, StoreError};
use crate::types::{Cell, ColumnId, ConsumerGroupId, Epoch, GlobalIndex, WeightVersion};

/// Write notification broadcast by a storage unit to its controllers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub epoch: Epoch,
    pub unit_id: u32,
    /// Exactly the `(row, column)` coordinates written by one put.
    pub coords: Vec<(GlobalIndex, ColumnId)>,
}

impl Notification {
    pub fn rows(&self) -> BTreeSet<GlobalIndex> {
        self.coords.iter().map(|(r, _)| *r).collect()
    }

    pub fn columns(&self) -> BTreeSet<ColumnId> {
        self.coords.iter().map(|(_, c)| c.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("transport: {0}")]
pub struct TransportError(pub String);

/// Receiver side of storage notifications (a controller or a proxy to one).
pub trait NotificationSink: Send + Sync {
    /// Stable endpoint name; registration is keyed on it.
    fn endpoint(&self) -> String;

    fn deliver(&self, notification: &Notification) -> Result<(), TransportError>;
}

/// Read/write access to one storage unit.
pub trait StorageApi: Send + Sync {
    fn unit_id(&self) -> u32;

    fn put(&self, epoch: Epoch, cells: Vec<Cell>) -> Result<PutAck, StoreError>;

    fn get(
        &self,
        epoch: Epoch,
        rows: &[GlobalIndex],
        columns: &[ColumnId],
    ) -> Result<Vec<Cell>, StoreError>;
}

/// Batch-granting side of a task controller.
pub trait ControlApi: Send + Sync {
    fn task_name(&self) -> String;

    fn request_batch(
        &self,
        consumer: &ConsumerGroupId,
        micro_batch_size: u32,
        policy: &PackingPolicy,
    ) -> Result<Grant, ControlError>;
}

/// Trainer- and rollout-facing side of the weight coordinator.
pub trait CoordinatorApi: Send + Sync {
    fn submit_weights(&self, version: WeightVersion, payload: Bytes) -> Result<TransferHandle, CoordError>;

    /// The in-flight payload reached `instance`'s host memory.
    fn stage(&self, instance: u32, version: WeightVersion, payload: Bytes) -> Result<(), CoordError>;

    /// `instance` is at a generation-iteration boundary.
    fn swap_report(&self, instance: u32) -> Result<SwapResult, CoordError>;

    fn weight_sync_notify(&self, version: WeightVersion) -> Result<TransferHandle, CoordError>;
}
