use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use bytes::Bytes;
use parking_lot::Mutex;

use crate::controller::{ControlError, Grant, PackingPolicy};
use crate::coordinator::{CoordError, SwapResult, TransferHandle};
use crate::storage::{PutAck, StoreError};
use crate::transport::{
    ControlApi, CoordinatorApi, Notification, NotificationSink, StorageApi, TransportError,
};
use crate::types::{Cell, ColumnId, ConsumerGroupId, Epoch, GlobalIndex, WeightVersion};
use crate::wire::{read_frame, write_frame, Message, WireError, DEFAULT_MAX_FRAME};

use super::errors::{to_control, to_coord, to_store};

struct Stream {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// One request/reply connection, opened lazily and reopened after a
/// transport failure.
pub struct Connection {
    endpoint: String,
    timeout: Option<Duration>,
    stream: Mutex<Option<Stream>>,
}

impl Connection {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Connection {
            endpoint: endpoint.into(),
            timeout: None,
            stream: Mutex::new(None),
        }
    }

    /// Read timeout per reply. `None` waits forever.
    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn open(&self) -> Result<Stream, TransportError> {
        let terr = |e: std::io::Error| TransportError(format!("{}: {e}", self.endpoint));
        let addr: SocketAddr = self
            .endpoint
            .to_socket_addrs()
            .map_err(terr)?
            .next()
            .ok_or_else(|| TransportError(format!("{}: no address", self.endpoint)))?;
        let s = TcpStream::connect_timeout(&addr, Duration::from_secs(5)).map_err(terr)?;
        s.set_nodelay(true).map_err(terr)?;
        s.set_read_timeout(self.timeout).map_err(terr)?;
        Ok(Stream {
            reader: BufReader::new(s.try_clone().map_err(terr)?),
            writer: BufWriter::new(s),
        })
    }

    /// Sends `msg` and waits for the reply.
    pub fn call(&self, msg: &Message) -> Result<Message, TransportError> {
        let mut guard = self.stream.lock();
        if guard.is_none() {
            *guard = Some(self.open()?);
        }
        let s = guard.as_mut().expect("just opened");
        let res = write_frame(&mut s.writer, msg)
            .map_err(|e| TransportError(format!("{}: write: {e}", self.endpoint)))
            .and_then(|_| {
                read_frame(&mut s.reader, DEFAULT_MAX_FRAME)
                    .map_err(|e| TransportError(format!("{}: read: {e}", self.endpoint)))
            });
        match res {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => {
                *guard = None;
                Err(TransportError(format!("{}: connection closed", self.endpoint)))
            }
            Err(e) => {
                *guard = None;
                Err(e)
            }
        }
    }
}

fn unexpected(reply: &Message, wanted: &str) -> TransportError {
    TransportError(format!("expected {wanted}, got {}", reply.name()))
}

/// A storage unit reached over TCP.
pub struct RemoteStorage {
    unit_id: u32,
    conn: Connection,
}

impl RemoteStorage {
    pub fn new(unit_id: u32, endpoint: impl Into<String>) -> Self {
        RemoteStorage {
            unit_id,
            conn: Connection::new(endpoint),
        }
    }

    pub fn endpoint(&self) -> &str {
        self.conn.endpoint()
    }

    /// Asks the unit to push notifications to the controller at `endpoint`.
    pub fn register(&self, endpoint: &str) -> Result<(), StoreError> {
        match self.conn.call(&Message::Register {
            endpoint: endpoint.to_string(),
        })? {
            Message::Ack => Ok(()),
            Message::Error(w) => Err(to_store(w, self.unit_id, Epoch(0))),
            other => Err(unexpected(&other, "ACK").into()),
        }
    }

    pub fn reset_epoch(&self, epoch: Epoch, owned_rows: Vec<GlobalIndex>) -> Result<(), StoreError> {
        match self.conn.call(&Message::ResetStorage { epoch, owned_rows })? {
            Message::Ack => Ok(()),
            Message::Error(w) => Err(to_store(w, self.unit_id, epoch)),
            other => Err(unexpected(&other, "ACK").into()),
        }
    }
}

impl StorageApi for RemoteStorage {
    fn unit_id(&self) -> u32 {
        self.unit_id
    }

    fn put(&self, epoch: Epoch, cells: Vec<Cell>) -> Result<PutAck, StoreError> {
        match self.conn.call(&Message::Put { epoch, cells })? {
            Message::PutAck { count } => Ok(PutAck { count: count as usize }),
            Message::Error(w) => Err(to_store(w, self.unit_id, epoch)),
            other => Err(unexpected(&other, "PUT_ACK").into()),
        }
    }

    fn get(&self, epoch: Epoch, rows: &[GlobalIndex], columns: &[ColumnId]) -> Result<Vec<Cell>, StoreError> {
        let msg = Message::Get {
            epoch,
            rows: rows.to_vec(),
            columns: columns.to_vec(),
        };
        match self.conn.call(&msg)? {
            Message::Cells { cells } => Ok(cells),
            Message::Error(w) => Err(to_store(w, self.unit_id, epoch)),
            other => Err(unexpected(&other, "CELLS").into()),
        }
    }
}

/// A task controller reached over TCP.
pub struct RemoteController {
    task: String,
    conn: Connection,
}

impl RemoteController {
    pub fn new(task: impl Into<String>, endpoint: impl Into<String>) -> Self {
        RemoteController {
            task: task.into(),
            conn: Connection::new(endpoint),
        }
    }

    pub fn reset_epoch(&self, epoch: Epoch, num_rows: u64, required: Vec<ColumnId>) -> Result<(), ControlError> {
        let consumer = ConsumerGroupId::new(self.task.clone(), 0);
        match self.conn.call(&Message::ResetController {
            epoch,
            num_rows,
            required,
        })? {
            Message::Ack => Ok(()),
            Message::Error(w) => Err(to_control(w, &consumer, epoch)),
            other => Err(unexpected(&other, "ACK").into()),
        }
    }
}

impl ControlApi for RemoteController {
    fn task_name(&self) -> String {
        self.task.clone()
    }

    fn request_batch(
        &self,
        consumer: &ConsumerGroupId,
        micro_batch_size: u32,
        policy: &PackingPolicy,
    ) -> Result<Grant, ControlError> {
        let msg = Message::RequestBatch {
            consumer: consumer.clone(),
            micro_batch_size,
            policy: policy.clone(),
        };
        match self.conn.call(&msg)? {
            Message::BatchGranted { meta } => Ok(Grant::Batch(meta)),
            Message::NotReady => Ok(Grant::NotReady),
            Message::EpochExhausted => Ok(Grant::EpochExhausted),
            Message::Error(w) => Err(to_control(w, consumer, Epoch(0))),
            other => Err(unexpected(&other, "BATCH_GRANTED").into()),
        }
    }
}

/// Storage-side proxy that forwards notifications to a controller server.
pub struct RemoteSink {
    conn: Connection,
}

impl RemoteSink {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteSink {
            conn: Connection::new(endpoint).with_timeout(Some(Duration::from_secs(10))),
        }
    }
}

impl NotificationSink for RemoteSink {
    fn endpoint(&self) -> String {
        self.conn.endpoint().to_string()
    }

    fn deliver(&self, n: &Notification) -> Result<(), TransportError> {
        let msg = Message::Notify {
            epoch: n.epoch,
            unit_id: n.unit_id,
            coords: n.coords.clone(),
        };
        match self.conn.call(&msg)? {
            Message::Ack => Ok(()),
            Message::Error(WireError { message, .. }) => Err(TransportError(message)),
            other => Err(unexpected(&other, "ACK")),
        }
    }
}

/// The weight coordinator reached over TCP.
pub struct RemoteCoordinator {
    conn: Connection,
}

impl RemoteCoordinator {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteCoordinator {
            conn: Connection::new(endpoint),
        }
    }

    fn accepted(&self, msg: Message, offered: WeightVersion) -> Result<TransferHandle, CoordError> {
        match self.conn.call(&msg)? {
            Message::TransferAccepted { version, synchronous } => Ok(TransferHandle { version, synchronous }),
            Message::Error(w) => Err(to_coord(w, 0, offered)),
            other => Err(unexpected(&other, "TRANSFER_ACCEPTED").into()),
        }
    }
}

impl CoordinatorApi for RemoteCoordinator {
    fn submit_weights(&self, version: WeightVersion, payload: Bytes) -> Result<TransferHandle, CoordError> {
        self.accepted(
            Message::WeightSubmit {
                version,
                payload: payload.to_vec(),
            },
            version,
        )
    }

    fn stage(&self, instance: u32, version: WeightVersion, payload: Bytes) -> Result<(), CoordError> {
        let msg = Message::WeightStaged {
            instance,
            version,
            payload: payload.to_vec(),
        };
        match self.conn.call(&msg)? {
            Message::Ack => Ok(()),
            Message::Error(w) => Err(to_coord(w, instance, version)),
            other => Err(unexpected(&other, "ACK").into()),
        }
    }

    fn swap_report(&self, instance: u32) -> Result<SwapResult, CoordError> {
        match self.conn.call(&Message::SwapReport { instance })? {
            Message::SwapResult { swapped, version } => Ok(SwapResult {
                swapped,
                new_version: version,
            }),
            Message::Error(w) => Err(to_coord(w, instance, WeightVersion(0))),
            other => Err(unexpected(&other, "SWAP_RESULT").into()),
        }
    }

    fn weight_sync_notify(&self, version: WeightVersion) -> Result<TransferHandle, CoordError> {
        self.accepted(Message::WeightSyncNotify { version }, version)
    }
}
