//! Padding-free packing of variable-length cells: every payload is
//! concatenated into one buffer and the per-cell lengths travel alongside.

use bytes::{Bytes, BytesMut};

use crate::types::{Cell, CellValue, ColumnId, GlobalIndex};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VarlenEnvelope {
    pub concatenated: Bytes,
    pub lengths: Vec<u32>,
    pub order: Vec<(GlobalIndex, ColumnId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VarlenError {
    #[error("lengths sum to {declared} but {actual} bytes were concatenated")]
    LengthMismatch { declared: u64, actual: u64 },
    #[error("{lengths} lengths for {cells} cells")]
    CountMismatch { lengths: usize, cells: usize },
}

impl VarlenEnvelope {
    pub fn from_cells(cells: &[Cell]) -> Self {
        let total: usize = cells.iter().map(|c| c.value.len()).sum();
        let mut buf = BytesMut::with_capacity(total);
        let mut lengths = Vec::with_capacity(cells.len());
        let mut order = Vec::with_capacity(cells.len());
        for c in cells {
            buf.extend_from_slice(c.value.as_slice());
            lengths.push(c.value.len() as u32);
            order.push((c.row, c.column.clone()));
        }
        VarlenEnvelope {
            concatenated: buf.freeze(),
            lengths,
            order,
        }
    }

    pub fn check(&self) -> Result<(), VarlenError> {
        if self.lengths.len() != self.order.len() {
            return Err(VarlenError::CountMismatch {
                lengths: self.lengths.len(),
                cells: self.order.len(),
            });
        }
        let declared: u64 = self.lengths.iter().map(|&l| l as u64).sum();
        let actual = self.concatenated.len() as u64;
        if declared != actual {
            return Err(VarlenError::LengthMismatch { declared, actual });
        }
        Ok(())
    }

    /// Splits the buffer back into cells. Payloads share the envelope's
    /// allocation.
    pub fn into_cells(self) -> Result<Vec<Cell>, VarlenError> {
        self.check()?;
        let mut offset = 0usize;
        let mut cells = Vec::with_capacity(self.order.len());
        for ((row, column), len) in self.order.into_iter().zip(self.lengths) {
            let end = offset + len as usize;
            cells.push(Cell {
                row,
                column,
                value: CellValue::new(self.concatenated.slice(offset..end)),
            });
            offset = end;
        }
        Ok(cells)
    }

    pub fn payload_bytes(&self) -> usize {
        self.concatenated.len()
    }

    /// Bytes a padded layout would need: every cell stretched to the longest.
    pub fn padded_payload_bytes(&self) -> usize {
        let max = self.lengths.iter().copied().max().unwrap_or(0) as usize;
        max * self.lengths.len()
    }
}

pub fn encode_varlen(cells: &[Cell]) -> VarlenEnvelope {
    VarlenEnvelope::from_cells(cells)
}

pub fn decode_varlen(envelope: VarlenEnvelope) -> Result<Vec<Cell>, VarlenError> {
    envelope.into_cells()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::col;
    use proptest::prelude::*;

    #[test]
    fn single_cell() {
        let env = encode_varlen(&[Cell::new(0, col("p"), b"abc")]);
        assert_eq!(env.concatenated.as_ref(), b"abc");
        assert_eq!(env.lengths, vec![3]);
    }

    #[test]
    fn zero_length_cell_survives() {
        let cells = vec![Cell::new(0, col("p"), b""), Cell::new(1, col("p"), b"xy")];
        let env = encode_varlen(&cells);
        assert_eq!(env.concatenated.as_ref(), b"xy");
        assert_eq!(env.lengths, vec![0, 2]);
        assert_eq!(decode_varlen(env).unwrap(), cells);
    }

    #[test]
    fn length_mismatch_detected() {
        let mut env = encode_varlen(&[Cell::new(0, col("p"), b"abc")]);
        env.lengths[0] = 4;
        assert_eq!(
            decode_varlen(env),
            Err(VarlenError::LengthMismatch {
                declared: 4,
                actual: 3
            })
        );
    }

    proptest! {
        #[test]
        fn roundtrip(payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..64), 0..40)) {
            let cells: Vec<_> = payloads
                .iter()
                .enumerate()
                .map(|(i, p)| Cell::new(i as u64 / 2, col(if i % 2 == 0 { "a" } else { "b" }), p.clone()))
                .collect();
            let env = encode_varlen(&cells);
            prop_assert_eq!(env.payload_bytes(), payloads.iter().map(Vec::len).sum::<usize>());
            prop_assert!(env.payload_bytes() <= env.padded_payload_bytes());
            prop_assert_eq!(decode_varlen(env).unwrap(), cells);
        }
    }
}
