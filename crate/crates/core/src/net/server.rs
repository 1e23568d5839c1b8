use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use bytes::Bytes;
use parking_lot::Mutex;

use crate::controller::{Controller, Grant};
use crate::coordinator::Coordinator;
use crate::storage::StorageUnit;
use crate::wire::{read_frame, write_frame, ErrorCode, FrameError, Message, WireError};

use super::errors::{from_control, from_coord, from_store};
use super::remote::RemoteSink;

/// Turns one request into one reply.
pub type Handler = Arc<dyn Fn(Message) -> Message + Send + Sync>;

/// A running server. Dropping the handle leaves it running; call
/// [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, closes open connections and waits for the
    /// accept loop to exit.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(std::net::Shutdown::Both);
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn protocol_error(e: &FrameError) -> Message {
    Message::Error(WireError::new(ErrorCode::Protocol, e.to_string()))
}

/// Serves requests on `listener`, one thread per connection. Requests on a
/// connection are answered in order.
pub fn serve(listener: TcpListener, max_frame: usize, handler: Handler) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<TcpStream>>> = Arc::new(Mutex::new(Vec::new()));
    let accept = {
        let stop = stop.clone();
        let conns = conns.clone();
        std::thread::Builder::new()
            .name(format!("accept-{addr}"))
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let stream = match stream {
                        Ok(s) => s,
                        Err(e) => {
                            log::warn!("{addr}: accept failed: {e}");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    if let Ok(c) = stream.try_clone() {
                        let mut conns = conns.lock();
                        conns.retain(|c| c.peer_addr().is_ok());
                        conns.push(c);
                    }
                    let handler = handler.clone();
                    std::thread::spawn(move || connection(stream, max_frame, handler));
                }
            })?
    };
    Ok(ServerHandle {
        addr,
        stop,
        conns,
        accept: Some(accept),
    })
}

fn connection(stream: TcpStream, max_frame: usize, handler: Handler) {
    let peer = stream.peer_addr().ok();
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    loop {
        let reply = match read_frame(&mut reader, max_frame) {
            Ok(None) => return,
            Ok(Some(msg)) => handler(msg),
            Err(e) if !e.is_fatal() => {
                log::debug!("{peer:?}: bad frame: {e}");
                protocol_error(&e)
            }
            Err(e @ FrameError::TooLarge(..)) => {
                log::warn!("{peer:?}: {e}; closing");
                let _ = write_frame(&mut writer, &protocol_error(&e));
                return;
            }
            Err(e) => {
                log::debug!("{peer:?}: connection closed: {e}");
                return;
            }
        };
        if write_frame(&mut writer, &reply).is_err() {
            return;
        }
    }
}

fn unsupported(msg: &Message, plane: &str) -> Message {
    Message::Error(WireError::new(
        ErrorCode::Unsupported,
        format!("{} is not served by a {plane}", msg.name()),
    ))
}

pub fn bind(addr: impl ToSocketAddrs) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr)
}

/// Request handler for one storage unit.
pub fn storage_handler(unit: Arc<StorageUnit>) -> Handler {
    Arc::new(move |msg| match msg {
        Message::Put { epoch, cells } => match unit.put(epoch, cells) {
            Ok(ack) => Message::PutAck { count: ack.count as u64 },
            Err(e) => Message::Error(from_store(&e)),
        },
        Message::Get { epoch, rows, columns } => match unit.get(epoch, &rows, &columns) {
            Ok(cells) => Message::Cells { cells },
            Err(e) => Message::Error(from_store(&e)),
        },
        Message::Register { endpoint } => {
            match unit.register_controller(Arc::new(RemoteSink::new(endpoint))) {
                Ok(()) => Message::Ack,
                Err(e) => Message::Error(from_store(&e)),
            }
        }
        Message::ResetStorage { epoch, owned_rows } => {
            match unit.reset_epoch(epoch, owned_rows.into_iter().collect()) {
                Ok(()) => Message::Ack,
                Err(e) => Message::Error(from_store(&e)),
            }
        }
        other => unsupported(&other, "storage unit"),
    })
}

/// Request handler for one task controller.
pub fn controller_handler(ctl: Arc<Controller>) -> Handler {
    Arc::new(move |msg| match msg {
        Message::Notify { epoch, unit_id, coords } => {
            let n = crate::transport::Notification { epoch, unit_id, coords };
            match ctl.on_notify(&n) {
                Ok(()) => Message::Ack,
                Err(e) => Message::Error(from_control(&e)),
            }
        }
        Message::RequestBatch {
            consumer,
            micro_batch_size,
            policy,
        } => match ctl.request_batch(&consumer, micro_batch_size, &policy) {
            Ok(Grant::Batch(meta)) => Message::BatchGranted { meta },
            Ok(Grant::NotReady) => Message::NotReady,
            Ok(Grant::EpochExhausted) => Message::EpochExhausted,
            Err(e) => Message::Error(from_control(&e)),
        },
        Message::ResetController {
            epoch,
            num_rows,
            required,
        } => match ctl.reset_epoch(epoch, num_rows, required) {
            Ok(()) => Message::Ack,
            Err(e) => Message::Error(from_control(&e)),
        },
        other => unsupported(&other, "controller"),
    })
}

/// Request handler for the weight coordinator. Synchronous submissions
/// hold the connection until every instance has swapped or `sync_timeout`
/// passes.
pub fn coordinator_handler(coord: Arc<Coordinator>, sync_timeout: Duration) -> Handler {
    Arc::new(move |msg| {
        let accepted = |h: crate::coordinator::TransferHandle| Message::TransferAccepted {
            version: h.version,
            synchronous: h.synchronous,
        };
        match msg {
            Message::WeightSubmit { version, payload } => {
                match coord.submit_weights(version, Bytes::from(payload), Some(sync_timeout)) {
                    Ok(h) => accepted(h),
                    Err(e) => Message::Error(from_coord(&e)),
                }
            }
            Message::WeightStaged {
                instance,
                version,
                payload,
            } => match coord.stage(instance, version, Bytes::from(payload)) {
                Ok(()) => Message::Ack,
                Err(e) => Message::Error(from_coord(&e)),
            },
            Message::SwapReport { instance } => match coord.boundary(instance) {
                Ok(r) => Message::SwapResult {
                    swapped: r.swapped,
                    version: r.new_version,
                },
                Err(e) => Message::Error(from_coord(&e)),
            },
            Message::WeightSyncNotify { version } => {
                match coord.weight_sync_notify(version, Bytes::new(), Some(sync_timeout)) {
                    Ok(h) => accepted(h),
                    Err(e) => Message::Error(from_coord(&e)),
                }
            }
            other => unsupported(&other, "coordinator"),
        }
    })
}
