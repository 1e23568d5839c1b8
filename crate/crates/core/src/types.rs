//! Shared vocabulary: row and column identifiers, task specs, consumer
//! groups and the weight-version / staleness types.

use std::collections::BTreeSet;
use std::fmt;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

/// Row address of a sample inside one global batch.
///
/// Indices are dense `0..G` for a batch of size `G`. Paired with an
/// [`Epoch`] they are unique across a whole run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct GlobalIndex(pub u64);

impl GlobalIndex {
    pub fn get(self) -> u64 {
        self.0
    }
}

impl From<u64> for GlobalIndex {
    fn from(v: u64) -> Self {
        GlobalIndex(v)
    }
}

impl fmt::Display for GlobalIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Batch epoch number. Storage and controllers are reset per epoch.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Epoch(pub u64);

impl fmt::Display for Epoch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {}", self.0)
    }
}

/// Name of a task-specific column ("prompt", "response", ...).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ColumnId(String);

impl ColumnId {
    pub fn new(name: impl Into<String>) -> Result<Self, TypeError> {
        let name = name.into();
        if name.is_empty() {
            return Err(TypeError::EmptyColumnName);
        }
        Ok(ColumnId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ColumnId {
    type Error = TypeError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        ColumnId::new(value)
    }
}

impl From<ColumnId> for String {
    fn from(c: ColumnId) -> Self {
        c.0
    }
}

impl fmt::Display for ColumnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Shorthand for building a column id from a literal. Panics on an empty name.
pub fn col(name: &str) -> ColumnId {
    ColumnId::new(name).expect("column name must be nonempty")
}

/// Opaque cell payload. Zero-length payloads are valid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct CellValue(Bytes);

impl CellValue {
    pub fn new(payload: impl Into<Bytes>) -> Self {
        CellValue(payload.into())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bytes(&self) -> &Bytes {
        &self.0
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

impl From<&[u8]> for CellValue {
    fn from(v: &[u8]) -> Self {
        CellValue(Bytes::copy_from_slice(v))
    }
}

impl From<Bytes> for CellValue {
    fn from(b: Bytes) -> Self {
        CellValue(b)
    }
}

impl From<Vec<u8>> for CellValue {
    fn from(v: Vec<u8>) -> Self {
        CellValue(Bytes::from(v))
    }
}

impl<const N: usize> From<&[u8; N]> for CellValue {
    fn from(v: &[u8; N]) -> Self {
        CellValue(Bytes::copy_from_slice(v))
    }
}

/// A single `(row, column, value)` triple as written to or read from storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub row: GlobalIndex,
    pub column: ColumnId,
    pub value: CellValue,
}

impl Cell {
    pub fn new(row: impl Into<GlobalIndex>, column: ColumnId, value: impl Into<CellValue>) -> Self {
        Cell {
            row: row.into(),
            column,
            value: value.into(),
        }
    }
}

/// Columns a task reads and the columns it produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_name: String,
    pub input_columns: Vec<ColumnId>,
    pub output_columns: Vec<ColumnId>,
}

impl TaskSpec {
    pub fn new(
        task_name: impl Into<String>,
        input_columns: Vec<ColumnId>,
        output_columns: Vec<ColumnId>,
    ) -> Result<Self, TypeError> {
        let spec = TaskSpec {
            task_name: task_name.into(),
            input_columns,
            output_columns,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.task_name.is_empty() {
            return Err(TypeError::EmptyTaskName);
        }
        let mut seen = BTreeSet::new();
        for c in self.input_columns.iter().chain(&self.output_columns) {
            if !seen.insert(c) {
                return Err(TypeError::OverlappingColumns {
                    task: self.task_name.clone(),
                    column: c.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn is_output(&self, column: &ColumnId) -> bool {
        self.output_columns.contains(column)
    }

    /// Validates that every output column is part of `schema`.
    pub fn check_schema(&self, schema: &[ColumnId]) -> Result<(), TypeError> {
        for c in self.input_columns.iter().chain(&self.output_columns) {
            if !schema.contains(c) {
                return Err(TypeError::UnknownColumn(c.clone()));
            }
        }
        Ok(())
    }
}

/// Identity of one data-parallel group of a task.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConsumerGroupId {
    pub task_name: String,
    pub group_ordinal: u32,
}

impl ConsumerGroupId {
    pub fn new(task_name: impl Into<String>, group_ordinal: u32) -> Self {
        ConsumerGroupId {
            task_name: task_name.into(),
            group_ordinal,
        }
    }
}

impl fmt::Display for ConsumerGroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.task_name, self.group_ordinal)
    }
}

/// Monotone weight version; 0 is the initial checkpoint.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct WeightVersion(pub u64);

impl WeightVersion {
    pub const INITIAL: WeightVersion = WeightVersion(0);

    pub fn next(self) -> WeightVersion {
        WeightVersion(self.0 + 1)
    }

    /// `self - older`, saturating at zero.
    pub fn gap_from(self, older: WeightVersion) -> u64 {
        self.0.saturating_sub(older.0)
    }
}

impl fmt::Display for WeightVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// Maximum allowed `trainer_version - data_version` for a consumed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StalenessBound(pub u64);

impl Default for StalenessBound {
    fn default() -> Self {
        StalenessBound(1)
    }
}

impl StalenessBound {
    pub fn allows(self, trainer: WeightVersion, data: WeightVersion) -> bool {
        trainer.gap_from(data) <= self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TypeError {
    #[error("column name must be nonempty")]
    EmptyColumnName,
    #[error("task name must be nonempty")]
    EmptyTaskName,
    #[error("task {task}: column {column} listed more than once across inputs and outputs")]
    OverlappingColumns { task: String, column: ColumnId },
    #[error("column {0} is not part of the schema")]
    UnknownColumn(ColumnId),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_column_rejected() {
        assert_eq!(ColumnId::new(""), Err(TypeError::EmptyColumnName));
    }

    #[test]
    fn task_inputs_and_outputs_disjoint() {
        let err = TaskSpec::new("t", vec![col("a")], vec![col("a")]).unwrap_err();
        assert!(matches!(err, TypeError::OverlappingColumns { .. }));
        let ok = TaskSpec::new("t", vec![col("a")], vec![col("b")]).unwrap();
        assert!(ok.is_output(&col("b")));
        assert!(ok.check_schema(&[col("a")]).is_err());
        ok.check_schema(&[col("a"), col("b")]).unwrap();
    }

    #[test]
    fn staleness_bound_boundary() {
        let s = StalenessBound(1);
        assert!(s.allows(WeightVersion(3), WeightVersion(2)));
        assert!(!s.allows(WeightVersion(3), WeightVersion(1)));
        assert!(StalenessBound(0).allows(WeightVersion(2), WeightVersion(2)));
        assert!(!StalenessBound(0).allows(WeightVersion(2), WeightVersion(1)));
    }

    #[test]
    fn versions_are_gap_free() {
        let mut v = WeightVersion::INITIAL;
        for i in 1..5 {
            v = v.next();
            assert_eq!(v, WeightVersion(i));
        }
    }

    #[test]
    fn column_id_serde_rejects_empty() {
        let r: Result<ColumnId, _> = serde_json::from_str("\"\"");
        assert!(r.is_err());
        let c: ColumnId = serde_json::from_str("\"prompt\"").unwrap();
        assert_eq!(c, col("prompt"));
    }
}
