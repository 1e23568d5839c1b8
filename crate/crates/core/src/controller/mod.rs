//! Control plane: one controller per task.
//!
//! A controller tracks which cells of its task's input columns are ready,
//! which rows have already been handed out, and answers batch requests with
//! [`BatchMeta`] vouchers that consumers redeem against storage. All state
//! changes go through one mutex, so scheduling decisions are applied in a
//! single total order no matter how many connections feed the controller.

mod packing;
mod status;

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;

pub use packing::{pack_batch, PackContext, PackingPolicy};
pub use status::{ConsumptionLedger, StatusMatrix, MAX_EPOCH_ROWS, MAX_REQUIRED_COLUMNS};

use crate::transport::{ControlApi, Notification, NotificationSink, TransportError};
use crate::types::{ColumnId, ConsumerGroupId, Epoch, GlobalIndex, TaskSpec};

/// Voucher for one micro-batch: which rows, which columns, and where they live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMeta {
    pub epoch: Epoch,
    pub task_name: String,
    pub rows: Vec<GlobalIndex>,
    pub columns: Vec<ColumnId>,
    pub locations: BTreeMap<GlobalIndex, u32>,
    pub issued_to: ConsumerGroupId,
}

impl BatchMeta {
    /// Rows grouped by owning storage unit, preserving batch order.
    pub fn rows_by_unit(&self) -> BTreeMap<u32, Vec<GlobalIndex>> {
        let mut out: BTreeMap<u32, Vec<GlobalIndex>> = BTreeMap::new();
        for row in &self.rows {
            out.entry(self.locations[row]).or_default().push(*row);
        }
        out
    }
}

/// Reply to a batch request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grant {
    Batch(BatchMeta),
    /// Not enough ready rows yet; more can still arrive.
    NotReady,
    /// Every row of the epoch has been issued.
    EpochExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControlError {
    #[error("consumer {consumer} does not belong to task {task}")]
    WrongTask {
        task: String,
        consumer: ConsumerGroupId,
    },
    #[error("micro-batch size must be at least 1")]
    InvalidBatchSize,
    #[error("row {row} outside 0..{num_rows}")]
    BadCoordinate { row: GlobalIndex, num_rows: u64 },
    #[error("epoch regression: current {current}, requested {requested}")]
    EpochRegression { current: Epoch, requested: Epoch },
    #[error("too many required columns ({0}, max {MAX_REQUIRED_COLUMNS})")]
    TooManyColumns(usize),
    #[error("{0} rows exceeds the per-epoch limit of {MAX_EPOCH_ROWS}")]
    TooManyRows(u64),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

struct State {
    epoch: Epoch,
    required: Vec<ColumnId>,
    matrix: StatusMatrix,
    ledger: ConsumptionLedger,
    token_totals: BTreeMap<ConsumerGroupId, u64>,
    /// Notifications for epochs the controller has not reached yet.
    early: Vec<Notification>,
}

impl State {
    fn fresh(epoch: Epoch, num_rows: u64, required: Vec<ColumnId>) -> Self {
        State {
            epoch,
            matrix: StatusMatrix::new(num_rows, required.clone()),
            ledger: ConsumptionLedger::new(num_rows),
            required,
            token_totals: BTreeMap::new(),
            early: Vec::new(),
        }
    }

    fn available(&self) -> BTreeSet<GlobalIndex> {
        self.matrix
            .complete_rows()
            .iter()
            .filter(|r| !self.ledger.is_consumed(**r))
            .copied()
            .collect()
    }

    fn apply(&mut self, n: &Notification) -> Result<(), ControlError> {
        let num_rows = self.matrix.num_rows();
        if let Some((row, _)) = n.coords.iter().find(|(r, _)| r.0 >= num_rows) {
            return Err(ControlError::BadCoordinate {
                row: *row,
                num_rows,
            });
        }
        for (row, column) in &n.coords {
            self.matrix.mark(*row, column, n.unit_id);
        }
        Ok(())
    }
}

/// Per-task scheduler over the readiness matrix and consumption ledger.
pub struct Controller {
    task: TaskSpec,
    endpoint: String,
    state: Mutex<State>,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("task", &self.task.task_name)
            .field("endpoint", &self.endpoint)
            .finish()
    }
}

impl Controller {
    /// A controller for `task` over `num_rows` rows; the required columns are
    /// the task's inputs.
    pub fn new(task: TaskSpec, epoch: Epoch, num_rows: u64) -> Result<Self, ControlError> {
        let endpoint = format!("controller:{}", task.task_name);
        Self::with_endpoint(task, epoch, num_rows, endpoint)
    }

    pub fn with_endpoint(
        task: TaskSpec,
        epoch: Epoch,
        num_rows: u64,
        endpoint: impl Into<String>,
    ) -> Result<Self, ControlError> {
        let required = task.input_columns.clone();
        if required.len() > MAX_REQUIRED_COLUMNS {
            return Err(ControlError::TooManyColumns(required.len()));
        }
        if num_rows > MAX_EPOCH_ROWS {
            return Err(ControlError::TooManyRows(num_rows));
        }
        Ok(Controller {
            endpoint: endpoint.into(),
            state: Mutex::new(State::fresh(epoch, num_rows, required)),
            task,
        })
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn epoch(&self) -> Epoch {
        self.state.lock().epoch
    }

    pub fn required_columns(&self) -> Vec<ColumnId> {
        self.state.lock().required.clone()
    }

    /// Applies a storage notification. Idempotent; columns the task does not
    /// read are ignored. Notifications for a later epoch are held until the
    /// controller is reset to it; those for an earlier epoch are dropped.
    pub fn on_notify(&self, n: &Notification) -> Result<(), ControlError> {
        let mut st = self.state.lock();
        if n.epoch < st.epoch {
            log::debug!(
                "{}: dropping notification for past {}",
                self.endpoint,
                n.epoch
            );
            return Ok(());
        }
        if n.epoch > st.epoch {
            st.early.push(n.clone());
            return Ok(());
        }
        st.apply(n)
    }

    /// Unconsumed rows whose every required column is ready.
    pub fn ready_rows(&self) -> BTreeSet<GlobalIndex> {
        self.state.lock().available()
    }

    pub fn status(&self, row: GlobalIndex, column: &ColumnId) -> u8 {
        let st = self.state.lock();
        if row.0 >= st.matrix.num_rows() {
            return 0;
        }
        st.matrix.status(row, column)
    }

    pub fn consumer_of(&self, row: GlobalIndex) -> Option<ConsumerGroupId> {
        self.state.lock().ledger.consumer_of(row).cloned()
    }

    pub fn consumed_count(&self) -> u64 {
        self.state.lock().ledger.consumed_count()
    }

    pub fn is_exhausted(&self) -> bool {
        self.state.lock().ledger.all_consumed()
    }

    pub fn token_totals(&self) -> BTreeMap<ConsumerGroupId, u64> {
        self.state.lock().token_totals.clone()
    }

    /// Issues a full micro-batch if enough rows are ready.
    ///
    /// A short batch is issued only when every remaining unconsumed row is
    /// already fully written, so no more data can arrive for this epoch.
    /// Selected rows are marked consumed before the lock is released.
    pub fn request_batch(
        &self,
        consumer: &ConsumerGroupId,
        micro_batch_size: u32,
        policy: &PackingPolicy,
    ) -> Result<Grant, ControlError> {
        if consumer.task_name != self.task.task_name {
            return Err(ControlError::WrongTask {
                task: self.task.task_name.clone(),
                consumer: consumer.clone(),
            });
        }
        if micro_batch_size == 0 {
            return Err(ControlError::InvalidBatchSize);
        }
        let mut st = self.state.lock();
        if st.ledger.all_consumed() {
            return Ok(Grant::EpochExhausted);
        }
        let ready = st.available();
        let unconsumed = st.matrix.num_rows() - st.ledger.consumed_count();
        let size = micro_batch_size as usize;
        let take = if ready.len() >= size {
            size
        } else if !ready.is_empty() && ready.len() as u64 == unconsumed {
            ready.len()
        } else {
            return Ok(Grant::NotReady);
        };

        st.token_totals.entry(consumer.clone()).or_insert(0);
        let ctx = PackContext {
            consumer_total: st.token_totals[consumer],
            mean_total: st.token_totals.values().sum::<u64>() as f64
                / st.token_totals.len() as f64,
        };
        let rows = pack_batch(&ready, take, policy, ctx);
        let mut tokens = 0;
        let mut locations = BTreeMap::new();
        for row in &rows {
            st.ledger.record(*row, consumer);
            tokens += policy.tokens_of(*row);
            if let Some(unit) = st.matrix.location(*row) {
                locations.insert(*row, unit);
            }
        }
        *st.token_totals.get_mut(consumer).expect("inserted above") += tokens;
        Ok(Grant::Batch(BatchMeta {
            epoch: st.epoch,
            task_name: self.task.task_name.clone(),
            rows,
            columns: st.required.clone(),
            locations,
            issued_to: consumer.clone(),
        }))
    }

    /// Starts a new epoch: matrix zeroed, ledger cleared. An empty
    /// `required_columns` keeps the current set.
    pub fn reset_epoch(
        &self,
        new_epoch: Epoch,
        num_rows: u64,
        required_columns: Vec<ColumnId>,
    ) -> Result<(), ControlError> {
        let mut st = self.state.lock();
        if new_epoch <= st.epoch {
            return Err(ControlError::EpochRegression {
                current: st.epoch,
                requested: new_epoch,
            });
        }
        let required = if required_columns.is_empty() {
            st.required.clone()
        } else {
            required_columns
        };
        if required.len() > MAX_REQUIRED_COLUMNS {
            return Err(ControlError::TooManyColumns(required.len()));
        }
        if num_rows > MAX_EPOCH_ROWS {
            return Err(ControlError::TooManyRows(num_rows));
        }
        let early = std::mem::take(&mut st.early);
        *st = State::fresh(new_epoch, num_rows, required);
        for n in early {
            if n.epoch == new_epoch {
                st.apply(&n)?;
            } else if n.epoch > new_epoch {
                st.early.push(n);
            }
        }
        Ok(())
    }
}

impl NotificationSink for Controller {
    fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    fn deliver(&self, notification: &Notification) -> Result<(), TransportError> {
        // A malformed coordinate will not improve on retry, so it is logged
        // and acknowledged.
        if let Err(e) = self.on_notify(notification) {
            log::warn!("{}: rejected notification: {e}", self.endpoint);
        }
        Ok(())
    }
}

impl ControlApi for Controller {
    fn task_name(&self) -> String {
        self.task.task_name.clone()
    }

    fn request_batch(
        &self,
        consumer: &ConsumerGroupId,
        micro_batch_size: u32,
        policy: &PackingPolicy,
    ) -> Result<Grant, ControlError> {
        Controller::request_batch(self, consumer, micro_batch_size, policy)
    }
}
