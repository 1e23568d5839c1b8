//! Consumer side of the sample store.
//!
//! [`StreamingBatchIterator`] asks a task controller for micro-batch
//! vouchers, redeems them against the owning storage units and yields
//! assembled [`Batch`]es until the epoch is exhausted. Results go back
//! through [`StorageDirectory::write_back`], which routes each row to its
//! owning unit; the units' notifications then make the rows visible to
//! downstream tasks.

mod fanout;
mod varlen;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

pub use fanout::{
    decode_fanout, encode_fanout, leader_fetch_fanout, ChannelReplica, FanoutOutcome, LocalReplica,
    Replica,
};
pub use varlen::{decode_varlen, encode_varlen, VarlenEnvelope, VarlenError};

use crate::controller::{BatchMeta, ControlError, Grant, PackingPolicy};
use crate::storage::{PartitionMap, StoreError};
use crate::transport::{ControlApi, StorageApi};
use crate::types::{Cell, CellValue, ColumnId, ConsumerGroupId, Epoch, GlobalIndex, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("controller unreachable after {attempts} attempts: {last}")]
    ControllerUnreachable { attempts: u32, last: String },
    #[error("fetch inconsistent with controller metadata: {0}")]
    FetchInconsistent(StoreError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Control(ControlError),
    #[error("column {column} is not an output of task {task}")]
    InvalidColumn { task: String, column: ColumnId },
    #[error("{rows} rows but {values} values")]
    LengthMismatch { rows: usize, values: usize },
    #[error("group member {member} unreachable: {reason}")]
    MemberUnreachable { member: usize, reason: String },
    #[error("consumer group has no members")]
    EmptyGroup,
    #[error("no storage unit {0} in directory")]
    UnknownUnit(u32),
    #[error("no location recorded for row {0}")]
    MissingLocation(GlobalIndex),
    #[error(transparent)]
    Varlen(#[from] VarlenError),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<ControlError> for ClientError {
    fn from(e: ControlError) -> Self {
        ClientError::Control(e)
    }
}

/// A redeemed micro-batch: cells cover `meta.rows x columns`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub meta: BatchMeta,
    pub columns: Vec<ColumnId>,
    pub cells: Vec<Cell>,
}

impl Batch {
    pub fn rows(&self) -> &[GlobalIndex] {
        &self.meta.rows
    }

    pub fn get(&self, row: GlobalIndex, column: &ColumnId) -> Option<&CellValue> {
        let r = self.meta.rows.iter().position(|x| *x == row)?;
        let c = self.columns.iter().position(|x| x == column)?;
        self.cells.get(r * self.columns.len() + c).map(|cell| &cell.value)
    }

    /// Values of one column in row order.
    pub fn column(&self, column: &ColumnId) -> Vec<&CellValue> {
        self.meta
            .rows
            .iter()
            .filter_map(|r| self.get(*r, column))
            .collect()
    }

    pub fn payload_bytes(&self) -> usize {
        self.cells.iter().map(|c| c.value.len()).sum()
    }
}

/// Maps storage unit ids to their handles, plus the row partition.
#[derive(Clone)]
pub struct StorageDirectory {
    partition: PartitionMap,
    units: BTreeMap<u32, Arc<dyn StorageApi>>,
}

impl std::fmt::Debug for StorageDirectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StorageDirectory")
            .field("partition", &self.partition)
            .field("units", &self.units.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Acknowledgement for a routed write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteAck {
    pub puts: usize,
    pub cells: usize,
}

impl StorageDirectory {
    pub fn new(partition: PartitionMap, units: Vec<Arc<dyn StorageApi>>) -> Result<Self, ClientError> {
        let units: BTreeMap<_, _> = units.into_iter().map(|u| (u.unit_id(), u)).collect();
        for id in 0..partition.num_units() {
            if !units.contains_key(&id) {
                return Err(ClientError::UnknownUnit(id));
            }
        }
        Ok(StorageDirectory { partition, units })
    }

    pub fn partition(&self) -> &PartitionMap {
        &self.partition
    }

    pub fn unit(&self, id: u32) -> Result<&Arc<dyn StorageApi>, ClientError> {
        self.units.get(&id).ok_or(ClientError::UnknownUnit(id))
    }

    /// Redeems a voucher: one `get` per storage unit named in the metadata.
    pub fn fetch(&self, meta: &BatchMeta, columns: &[ColumnId]) -> Result<(Batch, usize), ClientError> {
        let mut by_cell: BTreeMap<(GlobalIndex, ColumnId), CellValue> = BTreeMap::new();
        let mut gets = 0;
        if !columns.is_empty() {
            let mut by_unit: BTreeMap<u32, Vec<GlobalIndex>> = BTreeMap::new();
            for row in &meta.rows {
                // Rows without a recorded location fall back to the partition map.
                let unit = meta
                    .locations
                    .get(row)
                    .copied()
                    .unwrap_or_else(|| self.partition.unit_of(*row));
                by_unit.entry(unit).or_default().push(*row);
            }
            for (unit, rows) in by_unit {
                let cells = self
                    .unit(unit)?
                    .get(meta.epoch, &rows, columns)
                    .map_err(|e| match e {
                        StoreError::MissingCell { .. } => ClientError::FetchInconsistent(e),
                        other => ClientError::Store(other),
                    })?;
                gets += 1;
                for c in cells {
                    by_cell.insert((c.row, c.column), c.value);
                }
            }
        }
        let mut cells = Vec::with_capacity(meta.rows.len() * columns.len());
        for row in &meta.rows {
            for column in columns {
                let value = by_cell
                    .remove(&(*row, column.clone()))
                    .ok_or_else(|| {
                        ClientError::FetchInconsistent(StoreError::MissingCell {
                            row: *row,
                            column: column.clone(),
                        })
                    })?;
                cells.push(Cell {
                    row: *row,
                    column: column.clone(),
                    value,
                });
            }
        }
        Ok((
            Batch {
                meta: meta.clone(),
                columns: columns.to_vec(),
                cells,
            },
            gets,
        ))
    }

    /// Writes arbitrary cells, one put per owning unit.
    pub fn put_cells(&self, epoch: Epoch, cells: Vec<Cell>) -> Result<WriteAck, ClientError> {
        let mut by_unit: BTreeMap<u32, Vec<Cell>> = BTreeMap::new();
        for c in cells {
            by_unit.entry(self.partition.unit_of(c.row)).or_default().push(c);
        }
        let mut ack = WriteAck::default();
        for (unit, cells) in by_unit {
            let n = self.unit(unit)?.put(epoch, cells)?.count;
            ack.puts += 1;
            ack.cells += n;
        }
        Ok(ack)
    }

    /// Writes one output column for `rows` on behalf of `task`.
    pub fn write_back(
        &self,
        task: &TaskSpec,
        epoch: Epoch,
        rows: &[GlobalIndex],
        column: &ColumnId,
        values: Vec<CellValue>,
    ) -> Result<WriteAck, ClientError> {
        if !task.is_output(column) {
            return Err(ClientError::InvalidColumn {
                task: task.task_name.clone(),
                column: column.clone(),
            });
        }
        if rows.len() != values.len() {
            return Err(ClientError::LengthMismatch {
                rows: rows.len(),
                values: values.len(),
            });
        }
        let cells = rows
            .iter()
            .zip(values)
            .map(|(r, v)| Cell {
                row: *r,
                column: column.clone(),
                value: v,
            })
            .collect();
        self.put_cells(epoch, cells)
    }
}

/// Iterator construction parameters.
#[derive(Debug, Clone)]
pub struct IteratorConfig {
    pub task: TaskSpec,
    pub consumer: ConsumerGroupId,
    pub micro_batch_size: u32,
    pub poll_interval: Duration,
    /// Columns to fetch; empty means "whatever the voucher lists".
    pub columns: Vec<ColumnId>,
    pub policy: PackingPolicy,
    /// Consecutive transport failures tolerated before giving up.
    pub max_retries: u32,
}

impl IteratorConfig {
    /// Defaults for in-process use: 5 ms polling, fifo packing.
    pub fn new(task: TaskSpec, group_ordinal: u32, micro_batch_size: u32) -> Self {
        IteratorConfig {
            consumer: ConsumerGroupId::new(task.task_name.clone(), group_ordinal),
            columns: task.input_columns.clone(),
            task,
            micro_batch_size,
            poll_interval: Duration::from_millis(5),
            policy: PackingPolicy::Fifo,
            max_retries: 3,
        }
    }

    pub fn poll_interval(mut self, d: Duration) -> Self {
        self.poll_interval = d;
        self
    }

    pub fn policy(mut self, p: PackingPolicy) -> Self {
        self.policy = p;
        self
    }
}

/// Outcome of a single non-blocking poll.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchPoll {
    Ready(Batch),
    Pending,
    EndOfEpoch,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IteratorStats {
    pub polls: u64,
    pub not_ready: u64,
    pub gets: u64,
    pub batches: u64,
}

/// Blocking micro-batch iterator for one consumer group.
pub struct StreamingBatchIterator {
    config: IteratorConfig,
    controller: Arc<dyn ControlApi>,
    storage: StorageDirectory,
    stats: IteratorStats,
    done: bool,
}

impl StreamingBatchIterator {
    pub fn new(
        config: IteratorConfig,
        controller: Arc<dyn ControlApi>,
        storage: StorageDirectory,
    ) -> Self {
        StreamingBatchIterator {
            config,
            controller,
            storage,
            stats: IteratorStats::default(),
            done: false,
        }
    }

    pub fn config(&self) -> &IteratorConfig {
        &self.config
    }

    pub fn stats(&self) -> IteratorStats {
        self.stats
    }

    pub fn storage(&self) -> &StorageDirectory {
        &self.storage
    }

    fn request(&mut self) -> Result<Grant, ClientError> {
        let mut failures = 0;
        loop {
            self.stats.polls += 1;
            match self.controller.request_batch(
                &self.config.consumer,
                self.config.micro_batch_size,
                &self.config.policy,
            ) {
                Ok(g) => return Ok(g),
                Err(ControlError::Transport(e)) => {
                    failures += 1;
                    if failures > self.config.max_retries {
                        return Err(ClientError::ControllerUnreachable {
                            attempts: failures,
                            last: e.to_string(),
                        });
                    }
                    std::thread::sleep(self.config.poll_interval);
                }
                Err(other) => return Err(other.into()),
            }
        }
    }

    /// One request round-trip; never sleeps on `NotReady`.
    pub fn poll_batch(&mut self) -> Result<BatchPoll, ClientError> {
        if self.done {
            return Ok(BatchPoll::EndOfEpoch);
        }
        match self.request()? {
            Grant::Batch(meta) => {
                let columns = if self.config.columns.is_empty() {
                    meta.columns.clone()
                } else {
                    self.config.columns.clone()
                };
                let (batch, gets) = self.storage.fetch(&meta, &columns)?;
                self.stats.gets += gets as u64;
                self.stats.batches += 1;
                Ok(BatchPoll::Ready(batch))
            }
            Grant::NotReady => {
                self.stats.not_ready += 1;
                Ok(BatchPoll::Pending)
            }
            Grant::EpochExhausted => {
                self.done = true;
                Ok(BatchPoll::EndOfEpoch)
            }
        }
    }

    /// Blocks (polling every `poll_interval`) until a batch is granted.
    /// `Ok(None)` marks the end of the epoch.
    pub fn next_batch(&mut self) -> Result<Option<Batch>, ClientError> {
        loop {
            match self.poll_batch()? {
                BatchPoll::Ready(b) => return Ok(Some(b)),
                BatchPoll::EndOfEpoch => return Ok(None),
                BatchPoll::Pending => std::thread::sleep(self.config.poll_interval),
            }
        }
    }

    /// Writes an output column for rows this consumer processed.
    pub fn write_back(
        &self,
        epoch: Epoch,
        rows: &[GlobalIndex],
        column: &ColumnId,
        values: Vec<CellValue>,
    ) -> Result<WriteAck, ClientError> {
        self.storage
            .write_back(&self.config.task, epoch, rows, column, values)
    }
}

impl Iterator for StreamingBatchIterator {
    type Item = Result<Batch, ClientError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_batch() {
            Ok(Some(b)) => Some(Ok(b)),
            Ok(None) => None,
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}
