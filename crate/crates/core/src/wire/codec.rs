use std::collections::BTreeMap;

use bytes::{Buf, BufMut, Bytes};

use super::{DecodeError, ErrorCode, Message, WireError};
use crate::client::VarlenEnvelope;
use crate::controller::{BatchMeta, PackingPolicy};
use crate::types::{Cell, ColumnId, ConsumerGroupId, Epoch, GlobalIndex, WeightVersion};

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.put_u8(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.put_u16(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.put_u32(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.put_u64(v);
    }
    fn bool(&mut self, v: bool) {
        self.0.put_u8(v as u8);
    }
    fn str(&mut self, s: &str) {
        assert!(s.len() <= u16::MAX as usize, "string field longer than 64 KiB");
        self.u16(s.len() as u16);
        self.0.put_slice(s.as_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.put_slice(b);
    }
    fn len(&mut self, n: usize) {
        self.u32(n as u32);
    }
    fn rows(&mut self, rows: &[GlobalIndex]) {
        self.len(rows.len());
        for r in rows {
            self.u64(r.0);
        }
    }
    fn columns(&mut self, cols: &[ColumnId]) {
        self.len(cols.len());
        for c in cols {
            self.str(c.as_str());
        }
    }
    fn coords(&mut self, coords: &[(GlobalIndex, ColumnId)]) {
        self.len(coords.len());
        for (r, c) in coords {
            self.u64(r.0);
            self.str(c.as_str());
        }
    }
    fn envelope(&mut self, env: &VarlenEnvelope) {
        self.coords(&env.order);
        self.len(env.lengths.len());
        for l in &env.lengths {
            self.u32(*l);
        }
        self.bytes(&env.concatenated);
    }
    fn cells(&mut self, cells: &[Cell]) {
        self.envelope(&VarlenEnvelope::from_cells(cells));
    }
    fn policy(&mut self, p: &PackingPolicy) {
        match p {
            PackingPolicy::Fifo => self.u8(0),
            PackingPolicy::TokenBalanced { token_counts } => {
                self.u8(1);
                self.len(token_counts.len());
                for (r, t) in token_counts {
                    self.u64(r.0);
                    self.u64(*t);
                }
            }
        }
    }
    fn meta(&mut self, m: &BatchMeta) {
        self.u64(m.epoch.0);
        self.str(&m.task_name);
        self.rows(&m.rows);
        self.columns(&m.columns);
        self.len(m.locations.len());
        for (r, u) in &m.locations {
            self.u64(r.0);
            self.u32(*u);
        }
        self.str(&m.issued_to.task_name);
        self.u32(m.issued_to.group_ordinal);
    }
}

/// Encodes a message body (no length prefix, no kind byte).
pub fn encode_body(msg: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match msg {
        Message::Put { epoch, cells } => {
            w.u64(epoch.0);
            w.cells(cells);
        }
        Message::Get {
            epoch,
            rows,
            columns,
        } => {
            w.u64(epoch.0);
            w.rows(rows);
            w.columns(columns);
        }
        Message::Register { endpoint } => w.str(endpoint),
        Message::ResetStorage { epoch, owned_rows } => {
            w.u64(epoch.0);
            w.rows(owned_rows);
        }
        Message::Notify {
            epoch,
            unit_id,
            coords,
        } => {
            w.u64(epoch.0);
            w.u32(*unit_id);
            w.coords(coords);
        }
        Message::RequestBatch {
            consumer,
            micro_batch_size,
            policy,
        } => {
            w.str(&consumer.task_name);
            w.u32(consumer.group_ordinal);
            w.u32(*micro_batch_size);
            w.policy(policy);
        }
        Message::ResetController {
            epoch,
            num_rows,
            required,
        } => {
            w.u64(epoch.0);
            w.u64(*num_rows);
            w.columns(required);
        }
        Message::WeightSubmit { version, payload } => {
            w.u64(version.0);
            w.bytes(payload);
        }
        Message::WeightStaged {
            instance,
            version,
            payload,
        } => {
            w.u32(*instance);
            w.u64(version.0);
            w.bytes(payload);
        }
        Message::SwapReport { instance } => w.u32(*instance),
        Message::WeightSyncNotify { version } => w.u64(version.0),
        Message::Fanout {
            meta,
            columns,
            envelope,
        } => {
            w.meta(meta);
            w.columns(columns);
            w.envelope(envelope);
        }
        Message::Ack | Message::NotReady | Message::EpochExhausted => {}
        Message::PutAck { count } => w.u64(*count),
        Message::Cells { cells } => w.cells(cells),
        Message::BatchGranted { meta } => w.meta(meta),
        Message::TransferAccepted {
            version,
            synchronous,
        } => {
            w.u64(version.0);
            w.bool(*synchronous);
        }
        Message::SwapResult { swapped, version } => {
            w.bool(*swapped);
            w.u64(version.0);
        }
        Message::Error(e) => {
            w.u16(e.code as u16);
            w.u64(e.row);
            w.str(&e.column);
            w.str(&e.message);
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn need(&self, n: usize) -> Result<(), DecodeError> {
        if self.buf.remaining() < n {
            Err(DecodeError::Truncated)
        } else {
            Ok(())
        }
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        self.need(1)?;
        Ok(self.buf.get_u8())
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        self.need(2)?;
        Ok(self.buf.get_u16())
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        self.need(4)?;
        Ok(self.buf.get_u32())
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        self.need(8)?;
        Ok(self.buf.get_u64())
    }
    fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(DecodeError::InvalidField(format!("bool byte {b}"))),
        }
    }
    fn raw(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        self.need(n)?;
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.u16()? as usize;
        let raw = self.raw(n)?;
        std::str::from_utf8(raw)
            .map(str::to_string)
            .map_err(|_| DecodeError::InvalidUtf8)
    }
    fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.u32()? as usize;
        self.raw(n)
    }
    /// Reads a list count and checks it against a minimum item size so a
    /// corrupt count cannot trigger a huge allocation.
    fn count(&mut self, min_item: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.buf.remaining() {
            return Err(DecodeError::Truncated);
        }
        Ok(n)
    }
    fn column(&mut self) -> Result<ColumnId, DecodeError> {
        ColumnId::new(self.str()?).map_err(|e| DecodeError::InvalidField(e.to_string()))
    }
    fn rows(&mut self) -> Result<Vec<GlobalIndex>, DecodeError> {
        let n = self.count(8)?;
        (0..n).map(|_| self.u64().map(GlobalIndex)).collect()
    }
    fn columns(&mut self) -> Result<Vec<ColumnId>, DecodeError> {
        let n = self.count(2)?;
        (0..n).map(|_| self.column()).collect()
    }
    fn coords(&mut self) -> Result<Vec<(GlobalIndex, ColumnId)>, DecodeError> {
        let n = self.count(10)?;
        (0..n)
            .map(|_| Ok((GlobalIndex(self.u64()?), self.column()?)))
            .collect()
    }
    fn envelope(&mut self) -> Result<VarlenEnvelope, DecodeError> {
        let order = self.coords()?;
        let n = self.count(4)?;
        if n != order.len() {
            return Err(DecodeError::InvalidField(format!(
                "{} lengths for {} cells",
                n,
                order.len()
            )));
        }
        let lengths = (0..n).map(|_| self.u32()).collect::<Result<Vec<_>, _>>()?;
        let concatenated = Bytes::copy_from_slice(self.bytes()?);
        let env = VarlenEnvelope {
            concatenated,
            lengths,
            order,
        };
        env.check().map_err(|e| DecodeError::InvalidField(e.to_string()))?;
        Ok(env)
    }
    fn cells(&mut self) -> Result<Vec<Cell>, DecodeError> {
        let env = self.envelope()?;
        env.into_cells()
            .map_err(|e| DecodeError::InvalidField(e.to_string()))
    }
    fn policy(&mut self) -> Result<PackingPolicy, DecodeError> {
        match self.u8()? {
            0 => Ok(PackingPolicy::Fifo),
            1 => {
                let n = self.count(16)?;
                let mut token_counts = BTreeMap::new();
                for _ in 0..n {
                    let r = GlobalIndex(self.u64()?);
                    let t = self.u64()?;
                    if token_counts.insert(r, t).is_some() {
                        return Err(DecodeError::InvalidField(format!(
                            "duplicate token count for row {r}"
                        )));
                    }
                }
                Ok(PackingPolicy::TokenBalanced { token_counts })
            }
            k => Err(DecodeError::InvalidField(format!("policy kind {k}"))),
        }
    }
    fn meta(&mut self) -> Result<BatchMeta, DecodeError> {
        let epoch = Epoch(self.u64()?);
        let task_name = self.str()?;
        let rows = self.rows()?;
        let columns = self.columns()?;
        let n = self.count(12)?;
        let mut locations = BTreeMap::new();
        for _ in 0..n {
            let r = GlobalIndex(self.u64()?);
            let u = self.u32()?;
            if locations.insert(r, u).is_some() {
                return Err(DecodeError::InvalidField(format!("duplicate location for {r}")));
            }
        }
        let issued_task = self.str()?;
        let ordinal = self.u32()?;
        Ok(BatchMeta {
            epoch,
            task_name,
            rows,
            columns,
            locations,
            issued_to: ConsumerGroupId::new(issued_task, ordinal),
        })
    }
}

/// Decodes a body for message `kind`. The body must be consumed exactly.
pub fn decode_body(kind: u8, body: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader { buf: body };
    let msg = match kind {
        0x01 => Message::Put {
            epoch: Epoch(r.u64()?),
            cells: r.cells()?,
        },
        0x02 => Message::Get {
            epoch: Epoch(r.u64()?),
            rows: r.rows()?,
            columns: r.columns()?,
        },
        0x03 => Message::Register { endpoint: r.str()? },
        0x04 => Message::ResetStorage {
            epoch: Epoch(r.u64()?),
            owned_rows: r.rows()?,
        },
        0x10 => Message::Notify {
            epoch: Epoch(r.u64()?),
            unit_id: r.u32()?,
            coords: r.coords()?,
        },
        0x11 => {
            let task = r.str()?;
            let ordinal = r.u32()?;
            Message::RequestBatch {
                consumer: ConsumerGroupId::new(task, ordinal),
                micro_batch_size: r.u32()?,
                policy: r.policy()?,
            }
        }
        0x12 => Message::ResetController {
            epoch: Epoch(r.u64()?),
            num_rows: r.u64()?,
            required: r.columns()?,
        },
        0x20 => Message::WeightSubmit {
            version: WeightVersion(r.u64()?),
            payload: r.bytes()?.to_vec(),
        },
        0x21 => Message::WeightStaged {
            instance: r.u32()?,
            version: WeightVersion(r.u64()?),
            payload: r.bytes()?.to_vec(),
        },
        0x22 => Message::SwapReport { instance: r.u32()? },
        0x23 => Message::WeightSyncNotify {
            version: WeightVersion(r.u64()?),
        },
        0x30 => Message::Fanout {
            meta: r.meta()?,
            columns: r.columns()?,
            envelope: r.envelope()?,
        },
        0x80 => Message::Ack,
        0x81 => Message::PutAck { count: r.u64()? },
        0x82 => Message::Cells { cells: r.cells()? },
        0x83 => Message::BatchGranted { meta: r.meta()? },
        0x84 => Message::NotReady,
        0x85 => Message::EpochExhausted,
        0x86 => Message::TransferAccepted {
            version: WeightVersion(r.u64()?),
            synchronous: r.bool()?,
        },
        0x87 => Message::SwapResult {
            swapped: r.bool()?,
            version: WeightVersion(r.u64()?),
        },
        0xFF => {
            let raw = r.u16()?;
            let code = ErrorCode::from_u16(raw)
                .ok_or_else(|| DecodeError::InvalidField(format!("error code {raw}")))?;
            Message::Error(WireError {
                code,
                row: r.u64()?,
                column: r.str()?,
                message: r.str()?,
            })
        }
        k => return Err(DecodeError::UnknownKind(k)),
    };
    if !r.buf.is_empty() {
        return Err(DecodeError::TrailingBytes(r.buf.len()));
    }
    Ok(msg)
}
