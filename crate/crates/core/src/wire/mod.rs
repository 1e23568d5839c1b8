//! Binary wire protocol shared by every plane.
//!
//! # Framing
//!
//! ```text
//! +----------------+--------+------------------+
//! | length: u32 BE | kind:u8| body (length-1)  |
//! +----------------+--------+------------------+
//! ```
//!
//! `length` counts the kind byte plus the body. All integers are big-endian.
//! Body primitives:
//!
//! | name    | encoding                              |
//! |---------|---------------------------------------|
//! | `u8..u64` | fixed width, big-endian             |
//! | `bool`  | one byte, 0 or 1                      |
//! | `str`   | `u16` byte length + UTF-8             |
//! | `bytes` | `u32` byte length + raw bytes         |
//! | `list<T>` | `u32` count + items                 |
//! | `cells` | `list<(row:u64, column:str)>`, then `list<u32>` lengths, then one `bytes` blob holding every value concatenated |
//!
//! Cell payloads are always shipped as a length list plus one concatenated
//! blob, never padded.
//!
//! # Message kinds
//!
//! | kind | message | body |
//! |------|---------|------|
//! | 0x01 | `Put` | epoch:u64, cells |
//! | 0x02 | `Get` | epoch:u64, rows:list<u64>, columns:list<str> |
//! | 0x03 | `Register` | endpoint:str |
//! | 0x04 | `ResetStorage` | epoch:u64, owned_rows:list<u64> |
//! | 0x10 | `Notify` | epoch:u64, unit:u32, coords:list<(u64,str)> |
//! | 0x11 | `RequestBatch` | task:str, ordinal:u32, size:u32, policy |
//! | 0x12 | `ResetController` | epoch:u64, num_rows:u64, required:list<str> |
//! | 0x20 | `WeightSubmit` | version:u64, payload:bytes |
//! | 0x21 | `WeightStaged` | instance:u32, version:u64, payload:bytes |
//! | 0x22 | `SwapReport` | instance:u32 |
//! | 0x23 | `WeightSyncNotify` | version:u64 |
//! | 0x30 | `Fanout` | batch_meta, columns:list<str>, cells |
//! | 0x80 | `Ack` | (empty) |
//! | 0x81 | `PutAck` | count:u64 |
//! | 0x82 | `Cells` | cells |
//! | 0x83 | `BatchGranted` | batch_meta |
//! | 0x84 | `NotReady` | (empty) |
//! | 0x85 | `EpochExhausted` | (empty) |
//! | 0x86 | `TransferAccepted` | version:u64, synchronous:bool |
//! | 0x87 | `SwapResult` | swapped:bool, version:u64 |
//! | 0xFF | `Error` | code:u16, row:u64, column:str, message:str |
//!
//! `policy` is `u8` (0 = fifo, 1 = token_balanced) followed, for
//! token_balanced, by `list<(row:u64, tokens:u64)>`. `batch_meta` is
//! epoch:u64, task:str, rows:list<u64>, columns:list<str>,
//! locations:list<(u64,u32)>, issued_task:str, issued_ordinal:u32.
//!
//! A frame with an unknown kind or a malformed body is answered with an
//! `Error` frame carrying [`ErrorCode::Protocol`]; the connection stays
//! usable. A length prefix larger than the server's limit is answered the
//! same way and the connection is then closed, because the stream can no
//! longer be resynchronised.

mod codec;
mod frame;

pub use codec::{decode_body, encode_body};
pub use frame::{read_frame, write_frame, FrameError, DEFAULT_MAX_FRAME};

use crate::client::VarlenEnvelope;
use crate::controller::{BatchMeta, PackingPolicy};
use crate::types::{Cell, ColumnId, ConsumerGroupId, Epoch, GlobalIndex, WeightVersion};

/// Every message that can travel on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Put {
        epoch: Epoch,
        cells: Vec<Cell>,
    },
    Get {
        epoch: Epoch,
        rows: Vec<GlobalIndex>,
        columns: Vec<ColumnId>,
    },
    Register {
        endpoint: String,
    },
    ResetStorage {
        epoch: Epoch,
        owned_rows: Vec<GlobalIndex>,
    },
    Notify {
        epoch: Epoch,
        unit_id: u32,
        coords: Vec<(GlobalIndex, ColumnId)>,
    },
    RequestBatch {
        consumer: ConsumerGroupId,
        micro_batch_size: u32,
        policy: PackingPolicy,
    },
    ResetController {
        epoch: Epoch,
        num_rows: u64,
        required: Vec<ColumnId>,
    },
    WeightSubmit {
        version: WeightVersion,
        payload: Vec<u8>,
    },
    WeightStaged {
        instance: u32,
        version: WeightVersion,
        payload: Vec<u8>,
    },
    SwapReport {
        instance: u32,
    },
    WeightSyncNotify {
        version: WeightVersion,
    },
    Fanout {
        meta: BatchMeta,
        columns: Vec<ColumnId>,
        envelope: VarlenEnvelope,
    },
    Ack,
    PutAck {
        count: u64,
    },
    Cells {
        cells: Vec<Cell>,
    },
    BatchGranted {
        meta: BatchMeta,
    },
    NotReady,
    EpochExhausted,
    TransferAccepted {
        version: WeightVersion,
        synchronous: bool,
    },
    SwapResult {
        swapped: bool,
        version: WeightVersion,
    },
    Error(WireError),
}

/// Structured error reply. `row` and `column` are only meaningful for the
/// cell-level codes and are zero / empty otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireError {
    pub code: ErrorCode,
    pub row: u64,
    pub column: String,
    pub message: String,
}

impl WireError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        WireError {
            code,
            row: 0,
            column: String::new(),
            message: message.into(),
        }
    }

    pub fn at(code: ErrorCode, row: GlobalIndex, column: &ColumnId, message: impl Into<String>) -> Self {
        WireError {
            code,
            row: row.0,
            column: column.as_str().to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    NotOwnedRow = 1,
    DuplicateWrite = 2,
    MissingCell = 3,
    AlreadyRegistered = 4,
    EpochRegression = 5,
    EpochMismatch = 6,
    WrongTask = 7,
    InvalidBatchSize = 8,
    BadCoordinate = 9,
    ChannelBusy = 10,
    StaleSubmission = 11,
    VersionRegression = 12,
    UnknownInstance = 13,
    Protocol = 14,
    Unsupported = 15,
    Internal = 16,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 16] = [
        ErrorCode::NotOwnedRow,
        ErrorCode::DuplicateWrite,
        ErrorCode::MissingCell,
        ErrorCode::AlreadyRegistered,
        ErrorCode::EpochRegression,
        ErrorCode::EpochMismatch,
        ErrorCode::WrongTask,
        ErrorCode::InvalidBatchSize,
        ErrorCode::BadCoordinate,
        ErrorCode::ChannelBusy,
        ErrorCode::StaleSubmission,
        ErrorCode::VersionRegression,
        ErrorCode::UnknownInstance,
        ErrorCode::Protocol,
        ErrorCode::Unsupported,
        ErrorCode::Internal,
    ];

    pub fn from_u16(v: u16) -> Option<ErrorCode> {
        ErrorCode::ALL.iter().copied().find(|c| *c as u16 == v)
    }
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Put { .. } => 0x01,
            Message::Get { .. } => 0x02,
            Message::Register { .. } => 0x03,
            Message::ResetStorage { .. } => 0x04,
            Message::Notify { .. } => 0x10,
            Message::RequestBatch { .. } => 0x11,
            Message::ResetController { .. } => 0x12,
            Message::WeightSubmit { .. } => 0x20,
            Message::WeightStaged { .. } => 0x21,
            Message::SwapReport { .. } => 0x22,
            Message::WeightSyncNotify { .. } => 0x23,
            Message::Fanout { .. } => 0x30,
            Message::Ack => 0x80,
            Message::PutAck { .. } => 0x81,
            Message::Cells { .. } => 0x82,
            Message::BatchGranted { .. } => 0x83,
            Message::NotReady => 0x84,
            Message::EpochExhausted => 0x85,
            Message::TransferAccepted { .. } => 0x86,
            Message::SwapResult { .. } => 0x87,
            Message::Error(_) => 0xFF,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Put { .. } => "PUT",
            Message::Get { .. } => "GET",
            Message::Register { .. } => "REGISTER",
            Message::ResetStorage { .. } => "RESET",
            Message::Notify { .. } => "NOTIFY",
            Message::RequestBatch { .. } => "REQUEST_BATCH",
            Message::ResetController { .. } => "RESET",
            Message::WeightSubmit { .. } => "WEIGHT_SUBMIT",
            Message::WeightStaged { .. } => "WEIGHT_STAGED",
            Message::SwapReport { .. } => "SWAP_REPORT",
            Message::WeightSyncNotify { .. } => "WEIGHT_SYNC_NOTIFY",
            Message::Fanout { .. } => "FANOUT",
            Message::Ack => "ACK",
            Message::PutAck { .. } => "PUT_ACK",
            Message::Cells { .. } => "CELLS",
            Message::BatchGranted { .. } => "BATCH_GRANTED",
            Message::NotReady => "NOT_READY",
            Message::EpochExhausted => "EPOCH_EXHAUSTED",
            Message::TransferAccepted { .. } => "TRANSFER_ACCEPTED",
            Message::SwapResult { .. } => "SWAP_RESULT",
            Message::Error(_) => "ERROR",
        }
    }

    /// Encodes a complete frame: length prefix, kind, body.
    pub fn encode(&self) -> Vec<u8> {
        let body = encode_body(self);
        let mut out = Vec::with_capacity(5 + body.len());
        out.extend_from_slice(&((body.len() + 1) as u32).to_be_bytes());
        out.push(self.kind());
        out.extend_from_slice(&body);
        out
    }

    /// Decodes a complete frame as produced by [`Message::encode`].
    pub fn decode(frame: &[u8]) -> Result<Message, DecodeError> {
        if frame.len() < 5 {
            return Err(DecodeError::Truncated);
        }
        let len = u32::from_be_bytes(frame[..4].try_into().expect("4 bytes")) as usize;
        if len != frame.len() - 4 {
            return Err(DecodeError::LengthPrefix {
                declared: len,
                actual: frame.len() - 4,
            });
        }
        decode_body(frame[4], &frame[5..])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("frame truncated")]
    Truncated,
    #[error("length prefix says {declared} bytes, frame has {actual}")]
    LengthPrefix { declared: usize, actual: usize },
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes after body")]
    TrailingBytes(usize),
    #[error("invalid utf-8 in string field")]
    InvalidUtf8,
    #[error("invalid field: {0}")]
    InvalidField(String),
}
