use std::collections::BTreeSet;

use crate::types::{ColumnId, ConsumerGroupId, GlobalIndex};

/// Binary readiness matrix over `rows x required columns`.
///
/// Status bits only ever go from 0 to 1. The set of fully-ready rows is
/// maintained incrementally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusMatrix {
    columns: Vec<ColumnId>,
    bits: Vec<u64>,
    location: Vec<Option<u32>>,
    complete: BTreeSet<GlobalIndex>,
}

pub const MAX_REQUIRED_COLUMNS: usize = 64;

/// Upper bound on rows per epoch; the matrix is allocated eagerly.
pub const MAX_EPOCH_ROWS: u64 = 1 << 26;

impl StatusMatrix {
    pub fn new(num_rows: u64, columns: Vec<ColumnId>) -> Self {
        assert!(
            columns.len() <= MAX_REQUIRED_COLUMNS,
            "at most {MAX_REQUIRED_COLUMNS} required columns"
        );
        let n = num_rows as usize;
        // A task with no required inputs has every row ready from the start.
        let complete = if columns.is_empty() {
            (0..num_rows).map(GlobalIndex).collect()
        } else {
            BTreeSet::new()
        };
        StatusMatrix {
            columns,
            bits: vec![0; n],
            location: vec![None; n],
            complete,
        }
    }

    pub fn num_rows(&self) -> u64 {
        self.bits.len() as u64
    }

    pub fn columns(&self) -> &[ColumnId] {
        &self.columns
    }

    fn full_mask(&self) -> u64 {
        match self.columns.len() {
            64 => u64::MAX,
            n => (1u64 << n) - 1,
        }
    }

    pub fn column_position(&self, column: &ColumnId) -> Option<usize> {
        self.columns.iter().position(|c| c == column)
    }

    /// Sets `(row, column)` to 1. Returns false if the column is not tracked.
    pub fn mark(&mut self, row: GlobalIndex, column: &ColumnId, unit_id: u32) -> bool {
        let Some(pos) = self.column_position(column) else {
            return false;
        };
        let r = row.0 as usize;
        self.bits[r] |= 1 << pos;
        self.location[r] = Some(unit_id);
        if self.bits[r] == self.full_mask() {
            self.complete.insert(row);
        }
        true
    }

    pub fn status(&self, row: GlobalIndex, column: &ColumnId) -> u8 {
        match self.column_position(column) {
            Some(pos) => ((self.bits[row.0 as usize] >> pos) & 1) as u8,
            None => 0,
        }
    }

    pub fn location(&self, row: GlobalIndex) -> Option<u32> {
        self.location[row.0 as usize]
    }

    /// Rows whose every required column has status 1.
    pub fn complete_rows(&self) -> &BTreeSet<GlobalIndex> {
        &self.complete
    }

    pub fn is_complete(&self, row: GlobalIndex) -> bool {
        self.complete.contains(&row)
    }
}

/// Which consumer group took each row, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConsumptionLedger {
    consumed: Vec<Option<ConsumerGroupId>>,
    count: u64,
}

impl ConsumptionLedger {
    pub fn new(num_rows: u64) -> Self {
        ConsumptionLedger {
            consumed: vec![None; num_rows as usize],
            count: 0,
        }
    }

    pub fn consumer_of(&self, row: GlobalIndex) -> Option<&ConsumerGroupId> {
        self.consumed[row.0 as usize].as_ref()
    }

    pub fn is_consumed(&self, row: GlobalIndex) -> bool {
        self.consumed[row.0 as usize].is_some()
    }

    /// Records a consumption. Panics if the row was already taken: callers
    /// only pass rows drawn from the unconsumed set.
    pub fn record(&mut self, row: GlobalIndex, consumer: &ConsumerGroupId) {
        let slot = &mut self.consumed[row.0 as usize];
        assert!(slot.is_none(), "row {row} consumed twice");
        *slot = Some(consumer.clone());
        self.count += 1;
    }

    pub fn consumed_count(&self) -> u64 {
        self.count
    }

    pub fn all_consumed(&self) -> bool {
        self.count == self.consumed.len() as u64
    }
}
