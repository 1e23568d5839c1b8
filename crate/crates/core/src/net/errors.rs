//! Mapping between module errors and wire `Error` frames.
//!
//! Cell-level errors carry their coordinate in `row`/`column`. Epoch and
//! version errors put the server's current value in `row`; the client
//! fills in what it asked for.

use crate::controller::ControlError;
use crate::coordinator::CoordError;
use crate::storage::StoreError;
use crate::transport::TransportError;
use crate::types::{ColumnId, ConsumerGroupId, Epoch, GlobalIndex, WeightVersion};
use crate::wire::{ErrorCode, WireError};

pub fn from_store(e: &StoreError) -> WireError {
    let msg = e.to_string();
    match e {
        StoreError::NotOwnedRow { row, .. } => WireError {
            row: row.0,
            ..WireError::new(ErrorCode::NotOwnedRow, msg)
        },
        StoreError::DuplicateWrite { row, column } => WireError::at(ErrorCode::DuplicateWrite, *row, column, msg),
        StoreError::MissingCell { row, column } => WireError::at(ErrorCode::MissingCell, *row, column, msg),
        StoreError::AlreadyRegistered(name) => WireError {
            column: name.clone(),
            ..WireError::new(ErrorCode::AlreadyRegistered, msg)
        },
        StoreError::EpochRegression { current, .. } => WireError {
            row: current.0,
            ..WireError::new(ErrorCode::EpochRegression, msg)
        },
        StoreError::EpochMismatch { current, .. } => WireError {
            row: current.0,
            ..WireError::new(ErrorCode::EpochMismatch, msg)
        },
        StoreError::InvalidPartition(_) => WireError::new(ErrorCode::Unsupported, msg),
        StoreError::Transport(_) => WireError::new(ErrorCode::Internal, msg),
    }
}

fn column(w: &WireError) -> Result<ColumnId, TransportError> {
    ColumnId::new(w.column.clone()).map_err(|_| TransportError(format!("error reply without column: {}", w.message)))
}

pub fn to_store(w: WireError, unit_id: u32, requested: Epoch) -> StoreError {
    let row = GlobalIndex(w.row);
    let r = match w.code {
        ErrorCode::NotOwnedRow => Ok(StoreError::NotOwnedRow { unit_id, row }),
        ErrorCode::DuplicateWrite => column(&w).map(|column| StoreError::DuplicateWrite { row, column }),
        ErrorCode::MissingCell => column(&w).map(|column| StoreError::MissingCell { row, column }),
        ErrorCode::AlreadyRegistered => Ok(StoreError::AlreadyRegistered(w.column.clone())),
        ErrorCode::EpochRegression => Ok(StoreError::EpochRegression {
            current: Epoch(w.row),
            requested,
        }),
        ErrorCode::EpochMismatch => Ok(StoreError::EpochMismatch {
            current: Epoch(w.row),
            requested,
        }),
        _ => Err(TransportError(format!("{:?}: {}", w.code, w.message))),
    };
    r.unwrap_or_else(StoreError::Transport)
}

pub fn from_control(e: &ControlError) -> WireError {
    let msg = e.to_string();
    match e {
        ControlError::WrongTask { task, .. } => WireError {
            column: task.clone(),
            ..WireError::new(ErrorCode::WrongTask, msg)
        },
        ControlError::InvalidBatchSize => WireError::new(ErrorCode::InvalidBatchSize, msg),
        ControlError::BadCoordinate { row, num_rows } => WireError {
            row: row.0,
            column: num_rows.to_string(),
            ..WireError::new(ErrorCode::BadCoordinate, msg)
        },
        ControlError::EpochRegression { current, .. } => WireError {
            row: current.0,
            ..WireError::new(ErrorCode::EpochRegression, msg)
        },
        ControlError::TooManyColumns(_) | ControlError::TooManyRows(_) => WireError::new(ErrorCode::Unsupported, msg),
        ControlError::Transport(_) => WireError::new(ErrorCode::Internal, msg),
    }
}

pub fn to_control(w: WireError, consumer: &ConsumerGroupId, requested: Epoch) -> ControlError {
    match w.code {
        ErrorCode::WrongTask => ControlError::WrongTask {
            task: w.column,
            consumer: consumer.clone(),
        },
        ErrorCode::InvalidBatchSize => ControlError::InvalidBatchSize,
        ErrorCode::BadCoordinate => ControlError::BadCoordinate {
            row: GlobalIndex(w.row),
            num_rows: w.column.parse().unwrap_or(0),
        },
        ErrorCode::EpochRegression => ControlError::EpochRegression {
            current: Epoch(w.row),
            requested,
        },
        _ => ControlError::Transport(TransportError(format!("{:?}: {}", w.code, w.message))),
    }
}

pub fn from_coord(e: &CoordError) -> WireError {
    let msg = e.to_string();
    let (code, row) = match e {
        CoordError::VersionRegression { current, .. } => (ErrorCode::VersionRegression, current.0),
        CoordError::StaleSubmission { last, .. } => (ErrorCode::StaleSubmission, last.0),
        CoordError::ChannelBusy { in_flight } => (ErrorCode::ChannelBusy, in_flight.0),
        CoordError::UnknownInstance(id) => (ErrorCode::UnknownInstance, *id as u64),
        CoordError::InvalidConcurrency { .. } => (ErrorCode::Unsupported, 0),
        CoordError::Timeout(v) => (ErrorCode::Internal, v.0),
        CoordError::Transport(_) => (ErrorCode::Internal, 0),
    };
    WireError {
        row,
        ..WireError::new(code, msg)
    }
}

pub fn to_coord(w: WireError, instance: u32, offered: WeightVersion) -> CoordError {
    let v = WeightVersion(w.row);
    match w.code {
        ErrorCode::VersionRegression => CoordError::VersionRegression {
            instance,
            current: v,
            offered,
        },
        ErrorCode::StaleSubmission => CoordError::StaleSubmission { version: offered, last: v },
        ErrorCode::ChannelBusy => CoordError::ChannelBusy { in_flight: v },
        ErrorCode::UnknownInstance => CoordError::UnknownInstance(w.row as u32),
        _ => TransportError(format!("{:?}: {}", w.code, w.message)).into(),
    }
}
