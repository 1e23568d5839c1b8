//! Data plane: storage units that each own a row subset of the columnar
//! sample table.
//!
//! A unit stores cells keyed by `(row, column)` for the current epoch. Cells
//! are write-once within an epoch. Each successful put produces exactly one
//! [`Notification`] per registered controller, dispatched after the cell
//! lock is released.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::transport::{Notification, NotificationSink, StorageApi, TransportError};
use crate::types::{Cell, CellValue, ColumnId, Epoch, GlobalIndex};

/// Delivery attempts per controller before a notification is given up on.
const NOTIFY_ATTEMPTS: usize = 3;

/// Deterministic modulo assignment of rows to storage units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionMap {
    num_units: u32,
    epoch_size: u64,
}

impl PartitionMap {
    pub fn new(epoch_size: u64, num_units: u32) -> Result<Self, StoreError> {
        if num_units == 0 {
            return Err(StoreError::InvalidPartition("num_units must be at least 1".into()));
        }
        Ok(PartitionMap {
            num_units,
            epoch_size,
        })
    }

    pub fn num_units(&self) -> u32 {
        self.num_units
    }

    pub fn epoch_size(&self) -> u64 {
        self.epoch_size
    }

    pub fn unit_of(&self, row: GlobalIndex) -> u32 {
        (row.0 % self.num_units as u64) as u32
    }

    pub fn rows_of(&self, unit_id: u32) -> BTreeSet<GlobalIndex> {
        (0..self.epoch_size)
            .filter(|r| r % self.num_units as u64 == unit_id as u64)
            .map(GlobalIndex)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutAck {
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("row {row} is not owned by storage unit {unit_id}")]
    NotOwnedRow { unit_id: u32, row: GlobalIndex },
    #[error("cell ({row}, {column}) already written this epoch")]
    DuplicateWrite { row: GlobalIndex, column: ColumnId },
    #[error("cell ({row}, {column}) has not been written")]
    MissingCell { row: GlobalIndex, column: ColumnId },
    #[error("controller {0} already registered")]
    AlreadyRegistered(String),
    #[error("epoch regression: current {current}, requested {requested}")]
    EpochRegression { current: Epoch, requested: Epoch },
    #[error("request for {requested} but unit is at {current}")]
    EpochMismatch { current: Epoch, requested: Epoch },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

struct UnitState {
    epoch: Epoch,
    owned_rows: BTreeSet<GlobalIndex>,
    cells: HashMap<(GlobalIndex, ColumnId), CellValue>,
}

/// One shard of the sample table.
pub struct StorageUnit {
    unit_id: u32,
    state: RwLock<UnitState>,
    controllers: Mutex<Vec<Arc<dyn NotificationSink>>>,
}

impl std::fmt::Debug for StorageUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = self.state.read();
        f.debug_struct("StorageUnit")
            .field("unit_id", &self.unit_id)
            .field("epoch", &st.epoch)
            .field("owned_rows", &st.owned_rows.len())
            .field("cells", &st.cells.len())
            .finish()
    }
}

impl StorageUnit {
    pub fn new(unit_id: u32, epoch: Epoch, owned_rows: BTreeSet<GlobalIndex>) -> Self {
        StorageUnit {
            unit_id,
            state: RwLock::new(UnitState {
                epoch,
                owned_rows,
                cells: HashMap::new(),
            }),
            controllers: Mutex::new(Vec::new()),
        }
    }

    /// Builds every unit of a partition for `epoch`.
    pub fn cluster(partition: &PartitionMap, epoch: Epoch) -> Vec<Arc<StorageUnit>> {
        (0..partition.num_units())
            .map(|u| Arc::new(StorageUnit::new(u, epoch, partition.rows_of(u))))
            .collect()
    }

    pub fn id(&self) -> u32 {
        self.unit_id
    }

    pub fn epoch(&self) -> Epoch {
        self.state.read().epoch
    }

    pub fn owned_rows(&self) -> BTreeSet<GlobalIndex> {
        self.state.read().owned_rows.clone()
    }

    pub fn cell_count(&self) -> usize {
        self.state.read().cells.len()
    }

    /// Writes `entries` atomically: either every cell is stored or none is.
    ///
    /// An empty write is acknowledged without notifying anyone.
    pub fn put(&self, epoch: Epoch, entries: Vec<Cell>) -> Result<PutAck, StoreError> {
        if entries.is_empty() {
            self.check_epoch(epoch)?;
            return Ok(PutAck { count: 0 });
        }
        let coords = {
            let mut st = self.state.write();
            if st.epoch != epoch {
                return Err(StoreError::EpochMismatch {
                    current: st.epoch,
                    requested: epoch,
                });
            }
            let mut batch_keys = BTreeSet::new();
            for cell in &entries {
                if !st.owned_rows.contains(&cell.row) {
                    return Err(StoreError::NotOwnedRow {
                        unit_id: self.unit_id,
                        row: cell.row,
                    });
                }
                let key = (cell.row, cell.column.clone());
                if st.cells.contains_key(&key) || !batch_keys.insert(key) {
                    return Err(StoreError::DuplicateWrite {
                        row: cell.row,
                        column: cell.column.clone(),
                    });
                }
            }
            let mut coords = Vec::with_capacity(entries.len());
            for cell in entries {
                coords.push((cell.row, cell.column.clone()));
                st.cells.insert((cell.row, cell.column), cell.value);
            }
            coords
        };
        let count = coords.len();
        self.broadcast(&Notification {
            epoch,
            unit_id: self.unit_id,
            coords,
        });
        Ok(PutAck { count })
    }

    /// Returns the requested cells, rows outer and columns inner.
    pub fn get(
        &self,
        epoch: Epoch,
        rows: &[GlobalIndex],
        columns: &[ColumnId],
    ) -> Result<Vec<Cell>, StoreError> {
        let st = self.state.read();
        if st.epoch != epoch {
            return Err(StoreError::EpochMismatch {
                current: st.epoch,
                requested: epoch,
            });
        }
        let mut out = Vec::with_capacity(rows.len() * columns.len());
        for &row in rows {
            for column in columns {
                match st.cells.get(&(row, column.clone())) {
                    Some(v) => out.push(Cell {
                        row,
                        column: column.clone(),
                        value: v.clone(),
                    }),
                    None => {
                        return Err(StoreError::MissingCell {
                            row,
                            column: column.clone(),
                        })
                    }
                }
            }
        }
        Ok(out)
    }

    /// Registers a controller for all future notifications.
    ///
    /// If cells already exist, the new controller first receives one snapshot
    /// notification listing every written coordinate.
    pub fn register_controller(&self, sink: Arc<dyn NotificationSink>) -> Result<(), StoreError> {
        let endpoint = sink.endpoint();
        {
            let mut regs = self.controllers.lock();
            if regs.iter().any(|s| s.endpoint() == endpoint) {
                return Err(StoreError::AlreadyRegistered(endpoint));
            }
            regs.push(sink.clone());
        }
        let snapshot = {
            let st = self.state.read();
            let mut coords: Vec<_> = st.cells.keys().cloned().collect();
            coords.sort();
            Notification {
                epoch: st.epoch,
                unit_id: self.unit_id,
                coords,
            }
        };
        if !snapshot.coords.is_empty() {
            deliver_with_retry(sink.as_ref(), &snapshot);
        }
        Ok(())
    }

    pub fn registered_endpoints(&self) -> Vec<String> {
        self.controllers.lock().iter().map(|s| s.endpoint()).collect()
    }

    /// Clears all cells and starts `new_epoch` with a fresh row set.
    pub fn reset_epoch(
        &self,
        new_epoch: Epoch,
        owned_rows: BTreeSet<GlobalIndex>,
    ) -> Result<(), StoreError> {
        let mut st = self.state.write();
        if new_epoch <= st.epoch {
            return Err(StoreError::EpochRegression {
                current: st.epoch,
                requested: new_epoch,
            });
        }
        st.epoch = new_epoch;
        st.owned_rows = owned_rows;
        st.cells.clear();
        Ok(())
    }

    fn check_epoch(&self, epoch: Epoch) -> Result<(), StoreError> {
        let current = self.state.read().epoch;
        if current != epoch {
            return Err(StoreError::EpochMismatch {
                current,
                requested: epoch,
            });
        }
        Ok(())
    }

    fn broadcast(&self, notification: &Notification) {
        let sinks: Vec<_> = self.controllers.lock().clone();
        for sink in sinks {
            deliver_with_retry(sink.as_ref(), notification);
        }
    }
}

fn deliver_with_retry(sink: &dyn NotificationSink, notification: &Notification) {
    for attempt in 1..=NOTIFY_ATTEMPTS {
        match sink.deliver(notification) {
            Ok(()) => return,
            Err(e) => log::warn!(
                "notify {} (unit {}, attempt {attempt}/{NOTIFY_ATTEMPTS}) failed: {e}",
                sink.endpoint(),
                notification.unit_id
            ),
        }
    }
    log::error!(
        "dropping notification of {} cells for {}",
        notification.coords.len(),
        sink.endpoint()
    );
}

impl StorageApi for StorageUnit {
    fn unit_id(&self) -> u32 {
        self.unit_id
    }

    fn put(&self, epoch: Epoch, cells: Vec<Cell>) -> Result<PutAck, StoreError> {
        StorageUnit::put(self, epoch, cells)
    }

    fn get(
        &self,
        epoch: Epoch,
        rows: &[GlobalIndex],
        columns: &[ColumnId],
    ) -> Result<Vec<Cell>, StoreError> {
        StorageUnit::get(self, epoch, rows, columns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::col;
    use proptest::prelude::*;

    #[derive(Default)]
    struct Recorder {
        name: String,
        seen: Mutex<Vec<Notification>>,
    }

    impl Recorder {
        fn named(name: &str) -> Arc<Self> {
            Arc::new(Recorder {
                name: name.into(),
                ..Default::default()
            })
        }
    }

    impl NotificationSink for Recorder {
        fn endpoint(&self) -> String {
            self.name.clone()
        }
        fn deliver(&self, n: &Notification) -> Result<(), TransportError> {
            self.seen.lock().push(n.clone());
            Ok(())
        }
    }

    fn unit0() -> StorageUnit {
        let p = PartitionMap::new(8, 2).unwrap();
        StorageUnit::new(0, Epoch(0), p.rows_of(0))
    }

    #[test]
    fn single_cell_put_notifies_once() {
        let unit = unit0();
        let rec = Recorder::named("c0");
        unit.register_controller(rec.clone()).unwrap();
        let ack = unit
            .put(Epoch(0), vec![Cell::new(0, col("prompt"), b"hi")])
            .unwrap();
        assert_eq!(ack.count, 1);
        let seen = rec.seen.lock();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].rows(), BTreeSet::from([GlobalIndex(0)]));
        assert_eq!(seen[0].columns(), BTreeSet::from([col("prompt")]));
    }

    #[test]
    fn empty_put_is_silent() {
        let unit = unit0();
        let rec = Recorder::named("c0");
        unit.register_controller(rec.clone()).unwrap();
        assert_eq!(unit.put(Epoch(0), vec![]).unwrap().count, 0);
        assert!(rec.seen.lock().is_empty());
    }

    #[test]
    fn foreign_row_rejected() {
        // G=8 over 2 units: unit 0 owns the even rows, 7 lives on unit 1.
        let unit = unit0();
        let err = unit
            .put(Epoch(0), vec![Cell::new(7, col("response"), b"x")])
            .unwrap_err();
        assert_eq!(
            err,
            StoreError::NotOwnedRow {
                unit_id: 0,
                row: GlobalIndex(7)
            }
        );
        assert_eq!(unit.cell_count(), 0);
    }

    #[test]
    fn get_orders_rows_then_columns() {
        let p = PartitionMap::new(4, 1).unwrap();
        let unit = StorageUnit::new(0, Epoch(0), p.rows_of(0));
        let cells = vec![
            Cell::new(1, col("response"), b"r1"),
            Cell::new(0, col("prompt"), b"p0"),
            Cell::new(1, col("prompt"), b"p1"),
            Cell::new(0, col("response"), b"r0"),
        ];
        unit.put(Epoch(0), cells).unwrap();
        let got = unit
            .get(
                Epoch(0),
                &[GlobalIndex(0), GlobalIndex(1)],
                &[col("prompt"), col("response")],
            )
            .unwrap();
        let order: Vec<_> = got
            .iter()
            .map(|c| (c.row.0, c.column.as_str().to_string()))
            .collect();
        assert_eq!(
            order,
            vec![
                (0, "prompt".to_string()),
                (0, "response".to_string()),
                (1, "prompt".to_string()),
                (1, "response".to_string())
            ]
        );
        assert_eq!(got[3].value.as_slice(), b"r1");
    }

    #[test]
    fn missing_cell_reported() {
        let unit = unit0();
        let err = unit
            .get(Epoch(0), &[GlobalIndex(2)], &[col("response")])
            .unwrap_err();
        assert!(matches!(err, StoreError::MissingCell { .. }));
    }

    #[test]
    fn write_once_per_epoch() {
        let unit = unit0();
        unit.put(Epoch(0), vec![Cell::new(0, col("p"), b"a")]).unwrap();
        let err = unit
            .put(Epoch(0), vec![Cell::new(0, col("p"), b"b")])
            .unwrap_err();
        assert!(matches!(err, StoreError::DuplicateWrite { .. }));
        // Duplicate inside a single put is also rejected, and nothing lands.
        let err = unit
            .put(
                Epoch(0),
                vec![Cell::new(2, col("p"), b"a"), Cell::new(2, col("p"), b"b")],
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::DuplicateWrite { .. }));
        let got = unit.get(Epoch(0), &[GlobalIndex(0)], &[col("p")]).unwrap();
        assert_eq!(got[0].value.as_slice(), b"a");
        assert!(unit.get(Epoch(0), &[GlobalIndex(2)], &[col("p")]).is_err());
    }

    #[test]
    fn register_twice_rejected() {
        let unit = unit0();
        unit.register_controller(Recorder::named("c")).unwrap();
        let err = unit.register_controller(Recorder::named("c")).unwrap_err();
        assert_eq!(err, StoreError::AlreadyRegistered("c".into()));
    }

    #[test]
    fn broadcast_reaches_every_controller() {
        let unit = unit0();
        let a = Recorder::named("a");
        let b = Recorder::named("b");
        unit.register_controller(a.clone()).unwrap();
        unit.register_controller(b.clone()).unwrap();
        unit.put(
            Epoch(0),
            vec![Cell::new(0, col("p"), b"x"), Cell::new(2, col("r"), b"y")],
        )
        .unwrap();
        assert_eq!(a.seen.lock().as_slice(), b.seen.lock().as_slice());
        assert_eq!(a.seen.lock().len(), 1);
    }

    #[test]
    fn late_registration_gets_snapshot() {
        let unit = unit0();
        unit.put(Epoch(0), vec![Cell::new(4, col("p"), b"x")]).unwrap();
        let late = Recorder::named("late");
        unit.register_controller(late.clone()).unwrap();
        let seen = late.seen.lock();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].coords, vec![(GlobalIndex(4), col("p"))]);
    }

    #[test]
    fn reset_epoch_clears_and_rejects_regression() {
        let unit = unit0();
        unit.put(Epoch(0), vec![Cell::new(0, col("p"), b"x")]).unwrap();
        assert!(matches!(
            unit.reset_epoch(Epoch(0), BTreeSet::new()),
            Err(StoreError::EpochRegression { .. })
        ));
        unit.reset_epoch(Epoch(1), BTreeSet::from([GlobalIndex(0)]))
            .unwrap();
        assert_eq!(unit.cell_count(), 0);
        unit.put(Epoch(1), vec![Cell::new(0, col("p"), b"y")]).unwrap();
        assert!(matches!(
            unit.put(Epoch(0), vec![Cell::new(0, col("q"), b"y")]),
            Err(StoreError::EpochMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn partition_is_total_and_disjoint(g in 0u64..300, units in 1u32..9) {
            let p = PartitionMap::new(g, units).unwrap();
            let mut union = BTreeSet::new();
            let mut total = 0usize;
            for u in 0..units {
                let rows = p.rows_of(u);
                for r in &rows {
                    prop_assert_eq!(p.unit_of(*r), u);
                }
                total += rows.len();
                union.extend(rows);
            }
            prop_assert_eq!(total as u64, g);
            prop_assert_eq!(union, (0..g).map(GlobalIndex).collect::<BTreeSet<_>>());
        }

        #[test]
        fn reads_are_deterministic(payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..16), 1..10)) {
            let n = payloads.len() as u64;
            let unit = StorageUnit::new(0, Epoch(0), (0..n).map(GlobalIndex).collect());
            let cells = payloads.iter().enumerate().map(|(i, p)| Cell::new(i as u64, col("c"), p.clone())).collect();
            unit.put(Epoch(0), cells).unwrap();
            let rows: Vec<_> = (0..n).map(GlobalIndex).collect();
            let a = unit.get(Epoch(0), &rows, &[col("c")]).unwrap();
            let b = unit.get(Epoch(0), &rows, &[col("c")]).unwrap();
            prop_assert_eq!(&a, &b);
            for (cell, p) in a.iter().zip(&payloads) {
                prop_assert_eq!(cell.value.as_slice(), p.as_slice());
            }
        }
    }
}
