//! Consumer-group fan-out: one leader talks to the sample store and
//! broadcasts each batch to the other replicas of its group.

use std::sync::mpsc;

use parking_lot::Mutex;

use super::{Batch, ClientError};
use crate::wire::Message;

/// A non-leader member of a consumer group.
pub trait Replica: Send + Sync {
    fn name(&self) -> String;

    /// Receives one encoded `Fanout` frame and returns the batch it decoded.
    fn receive(&self, frame: &[u8]) -> Result<Batch, ClientError>;
}

/// Encodes `batch` as a `Fanout` frame.
pub fn encode_fanout(batch: &Batch) -> Vec<u8> {
    Message::Fanout {
        meta: batch.meta.clone(),
        columns: batch.columns.clone(),
        envelope: super::encode_varlen(&batch.cells),
    }
    .encode()
}

pub fn decode_fanout(frame: &[u8]) -> Result<Batch, ClientError> {
    match Message::decode(frame) {
        Ok(Message::Fanout {
            meta,
            columns,
            envelope,
        }) => {
            let cells = super::decode_varlen(envelope)?;
            Ok(Batch {
                meta,
                columns,
                cells,
            })
        }
        Ok(other) => Err(ClientError::Protocol(format!(
            "expected FANOUT, got {}",
            other.name()
        ))),
        Err(e) => Err(ClientError::Protocol(e.to_string())),
    }
}

/// Result of one fan-out round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FanoutOutcome {
    /// Batch as seen by each member; index 0 is the leader.
    pub batches: Vec<Batch>,
    /// Frame bytes sent to each non-leader member.
    pub bytes_per_member: usize,
}

/// The leader (member 0) already holds `batch`; every other member gets the
/// same encoded frame. A group of one broadcasts nothing.
pub fn leader_fetch_fanout(
    members: &[&dyn Replica],
    batch: &Batch,
) -> Result<FanoutOutcome, ClientError> {
    if members.is_empty() {
        return Err(ClientError::EmptyGroup);
    }
    let mut batches = vec![batch.clone()];
    if members.len() == 1 {
        return Ok(FanoutOutcome {
            batches,
            bytes_per_member: 0,
        });
    }
    let frame = encode_fanout(batch);
    for (i, member) in members.iter().enumerate().skip(1) {
        let got = member
            .receive(&frame)
            .map_err(|e| ClientError::MemberUnreachable {
                member: i,
                reason: match e {
                    ClientError::MemberUnreachable { reason, .. } => reason,
                    other => other.to_string(),
                },
            })?;
        batches.push(got);
    }
    Ok(FanoutOutcome {
        batches,
        bytes_per_member: frame.len(),
    })
}

/// In-process replica that decodes frames and keeps what it received.
#[derive(Default)]
pub struct LocalReplica {
    name: String,
    received: Mutex<Vec<Batch>>,
}

impl LocalReplica {
    pub fn new(name: impl Into<String>) -> Self {
        LocalReplica {
            name: name.into(),
            received: Mutex::new(Vec::new()),
        }
    }

    pub fn received(&self) -> Vec<Batch> {
        self.received.lock().clone()
    }
}

impl Replica for LocalReplica {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn receive(&self, frame: &[u8]) -> Result<Batch, ClientError> {
        let batch = decode_fanout(frame)?;
        self.received.lock().push(batch.clone());
        Ok(batch)
    }
}

/// Replica living on another thread; frames cross an mpsc channel and the
/// decoded batch comes back on a reply channel.
pub struct ChannelReplica {
    name: String,
    tx: Mutex<mpsc::Sender<(Vec<u8>, mpsc::Sender<Result<Batch, ClientError>>)>>,
}

impl ChannelReplica {
    /// Spawns the replica thread. It exits when the handle is dropped.
    pub fn spawn(name: impl Into<String>) -> (Self, std::thread::JoinHandle<Vec<Batch>>) {
        let (tx, rx) =
            mpsc::channel::<(Vec<u8>, mpsc::Sender<Result<Batch, ClientError>>)>();
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (frame, reply) in rx {
                let res = decode_fanout(&frame);
                if let Ok(b) = &res {
                    seen.push(b.clone());
                }
                let _ = reply.send(res);
            }
            seen
        });
        (
            ChannelReplica {
                name: name.into(),
                tx: Mutex::new(tx),
            },
            handle,
        )
    }
}

impl Replica for ChannelReplica {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn receive(&self, frame: &[u8]) -> Result<Batch, ClientError> {
        let (reply_tx, reply_rx) = mpsc::channel();
        // The member index is filled in by `leader_fetch_fanout`.
        let unreachable = |reason: &str| ClientError::MemberUnreachable {
            member: 0,
            reason: format!("{}: {reason}", self.name),
        };
        self.tx
            .lock()
            .send((frame.to_vec(), reply_tx))
            .map_err(|_| unreachable("channel closed"))?;
        reply_rx.recv().map_err(|_| unreachable("no reply"))?
    }
}
