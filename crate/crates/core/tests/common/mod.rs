//! Shared helpers for the integration tests: a naive reference scheduler,
//! random wire messages and random simulator scenarios.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowqueue::client::VarlenEnvelope;
use flowqueue::controller::{BatchMeta, PackingPolicy};
use flowqueue::sim::{LengthDist, Mode, SimScenario};
use flowqueue::types::{Cell, CellValue, ColumnId, ConsumerGroupId, Epoch, GlobalIndex, WeightVersion};
use flowqueue::wire::{ErrorCode, Message, WireError};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn column(name: &str) -> ColumnId {
    ColumnId::new(name).unwrap()
}

// ---------------------------------------------------------------------------
// Reference scheduler
// ---------------------------------------------------------------------------

/// What the oracle says a request should return.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleGrant {
    Rows(Vec<u64>),
    NotReady,
    Exhausted,
}

/// Single-threaded model of one task's scheduler, written from the
/// contract rather than from the implementation: plain vectors, linear
/// scans, no incremental state.
pub struct Oracle {
    rows: u64,
    required: Vec<String>,
    written: Vec<BTreeSet<String>>,
    consumed: Vec<bool>,
    tokens: Vec<u64>,
    /// Consumer ordinal -> tokens issued so far, in first-request order.
    totals: Vec<(u32, u64)>,
}

impl Oracle {
    pub fn new(rows: u64, required: &[&str], tokens: Vec<u64>) -> Self {
        Oracle {
            rows,
            required: required.iter().map(|s| s.to_string()).collect(),
            written: vec![BTreeSet::new(); rows as usize],
            consumed: vec![false; rows as usize],
            tokens,
            totals: Vec::new(),
        }
    }

    pub fn write(&mut self, row: u64, col: &str) {
        self.written[row as usize].insert(col.to_string());
    }

    fn complete(&self, row: usize) -> bool {
        self.required.iter().all(|c| self.written[row].contains(c))
    }

    pub fn request(&mut self, ordinal: u32, size: usize, balanced: bool) -> OracleGrant {
        if self.consumed.iter().all(|&c| c) {
            return OracleGrant::Exhausted;
        }
        let ready: Vec<usize> = (0..self.rows as usize)
            .filter(|&r| !self.consumed[r] && self.complete(r))
            .collect();
        let left = self.consumed.iter().filter(|&&c| !c).count();
        let take = if ready.len() >= size {
            size
        } else if !ready.is_empty() && ready.len() == left {
            ready.len()
        } else {
            return OracleGrant::NotReady;
        };
        if !self.totals.iter().any(|(o, _)| *o == ordinal) {
            self.totals.push((ordinal, 0));
        }
        let picked = if balanced {
            self.balanced_pick(ordinal, &ready, take)
        } else {
            ready[..take].to_vec()
        };
        let mut got = 0;
        for &r in &picked {
            self.consumed[r] = true;
            got += self.tokens[r];
        }
        for (o, t) in self.totals.iter_mut() {
            if *o == ordinal {
                *t += got;
            }
        }
        OracleGrant::Rows(picked.into_iter().map(|r| r as u64).collect())
    }

    /// Largest-first (or smallest-first when ahead of the mean) seed pick,
    /// then repeatedly the row nearest the per-slot remainder of the fair
    /// share, corrected by the consumer's deficit.
    fn balanced_pick(&self, ordinal: u32, ready: &[usize], take: usize) -> Vec<usize> {
        let mine = self.totals.iter().find(|(o, _)| *o == ordinal).unwrap().1;
        let sum: u64 = self.totals.iter().map(|(_, t)| t).sum();
        let mean = sum as f64 / self.totals.len() as f64;
        let pool_tokens: u64 = ready.iter().map(|&r| self.tokens[r]).sum();
        let fair = pool_tokens as f64 * take as f64 / ready.len() as f64;
        let target = (fair + (mean - mine as f64)).max(0.0);

        let mut pool = ready.to_vec();
        let mut first = 0;
        for i in 1..pool.len() {
            let (a, b) = (self.tokens[pool[i]], self.tokens[pool[first]]);
            let better = if mine as f64 <= mean { a > b } else { a < b };
            if better {
                first = i;
            }
        }
        let mut picked = vec![pool.remove(first)];
        let mut acc = self.tokens[picked[0]] as f64;
        while picked.len() < take {
            let ideal = (target - acc) / (take - picked.len()) as f64;
            let mut best = 0;
            for i in 1..pool.len() {
                let d = (self.tokens[pool[i]] as f64 - ideal).abs();
                let e = (self.tokens[pool[best]] as f64 - ideal).abs();
                if d < e {
                    best = i;
                }
            }
            let r = pool.remove(best);
            acc += self.tokens[r] as f64;
            picked.push(r);
        }
        picked.sort();
        picked
    }
}

// ---------------------------------------------------------------------------
// Random wire messages
// ---------------------------------------------------------------------------

fn name(r: &mut impl Rng) -> String {
    const WORDS: [&str; 6] = ["prompt", "response", "ref_logp", "reward", "é", "x"];
    let mut s = WORDS[r.random_range(0..WORDS.len())].to_string();
    if r.random_bool(0.3) {
        s.push_str(&r.random_range(0..1000).to_string());
    }
    s
}

fn text(r: &mut impl Rng) -> String {
    (0..r.random_range(0..20)).map(|_| r.random_range('a'..='z')).collect()
}

fn payload(r: &mut impl Rng) -> Vec<u8> {
    let n = if r.random_bool(0.1) { 0 } else { r.random_range(0..64) };
    (0..n).map(|_| r.random()).collect()
}

fn cells(r: &mut impl Rng) -> Vec<Cell> {
    (0..r.random_range(0..6))
        .map(|_| Cell::new(r.random_range(0..1u64 << 40), column(&name(r)), CellValue::new(payload(r))))
        .collect()
}

fn rows(r: &mut impl Rng) -> Vec<GlobalIndex> {
    (0..r.random_range(0..8)).map(|_| GlobalIndex(r.random())).collect()
}

fn columns(r: &mut impl Rng) -> Vec<ColumnId> {
    (0..r.random_range(0..4)).map(|_| column(&name(r))).collect()
}

fn consumer(r: &mut impl Rng) -> ConsumerGroupId {
    ConsumerGroupId::new(name(r), r.random())
}

fn meta(r: &mut impl Rng) -> BatchMeta {
    let rows = rows(r);
    let locations: BTreeMap<GlobalIndex, u32> = rows.iter().map(|&g| (g, r.random_range(0..8))).collect();
    BatchMeta {
        epoch: Epoch(r.random()),
        task_name: name(r),
        rows,
        columns: columns(r),
        locations,
        issued_to: consumer(r),
    }
}

pub const KINDS: usize = 21;

/// A random message of kind number `which % KINDS`.
pub fn message(r: &mut impl Rng, which: usize) -> Message {
    match which % KINDS {
        0 => Message::Put { epoch: Epoch(r.random()), cells: cells(r) },
        1 => Message::Get { epoch: Epoch(r.random()), rows: rows(r), columns: columns(r) },
        2 => Message::Register { endpoint: format!("127.0.0.1:{}", r.random::<u16>()) },
        3 => Message::ResetStorage { epoch: Epoch(r.random()), owned_rows: rows(r) },
        4 => Message::Notify {
            epoch: Epoch(r.random()),
            unit_id: r.random(),
            coords: (0..r.random_range(0..5)).map(|_| (GlobalIndex(r.random()), column(&name(r)))).collect(),
        },
        5 => {
            let policy = if r.random() {
                PackingPolicy::Fifo
            } else {
                PackingPolicy::token_balanced((0..r.random_range(0..5)).map(|i| (i, r.random())))
            };
            Message::RequestBatch { consumer: consumer(r), micro_batch_size: r.random(), policy }
        }
        6 => Message::ResetController { epoch: Epoch(r.random()), num_rows: r.random(), required: columns(r) },
        7 => Message::WeightSubmit { version: WeightVersion(r.random()), payload: payload(r) },
        8 => Message::WeightStaged { instance: r.random(), version: WeightVersion(r.random()), payload: payload(r) },
        9 => Message::SwapReport { instance: r.random() },
        10 => Message::WeightSyncNotify { version: WeightVersion(r.random()) },
        11 => {
            let cs = cells(r);
            Message::Fanout { meta: meta(r), columns: columns(r), envelope: VarlenEnvelope::from_cells(&cs) }
        }
        12 => Message::Ack,
        13 => Message::PutAck { count: r.random() },
        14 => Message::Cells { cells: cells(r) },
        15 => Message::BatchGranted { meta: meta(r) },
        16 => Message::NotReady,
        17 => Message::EpochExhausted,
        18 => Message::TransferAccepted { version: WeightVersion(r.random()), synchronous: r.random() },
        19 => Message::SwapResult { swapped: r.random(), version: WeightVersion(r.random()) },
        _ => Message::Error(WireError {
            code: ErrorCode::ALL[r.random_range(0..ErrorCode::ALL.len())],
            row: r.random(),
            column: if r.random() { String::new() } else { name(r) },
            message: text(r),
        }),
    }
}

/// A random frame: valid, corrupted, truncated, or with a bad kind.
/// Returns the bytes and the message if the frame is valid as generated.
pub fn fuzz_frame(r: &mut impl Rng) -> (Vec<u8>, Option<Message>) {
    let which = r.random_range(0..KINDS);
    let m = message(r, which);
    let mut f = m.encode();
    match r.random_range(0..6) {
        0 | 1 => (f, Some(m)),
        2 => {
            // Flip body bytes but keep the length prefix consistent.
            for _ in 0..r.random_range(1..4) {
                if f.len() > 5 {
                    let i = r.random_range(5..f.len());
                    f[i] ^= r.random_range(1..=255u8);
                }
            }
            (f, None)
        }
        3 => {
            // Unknown or wrong kind byte.
            const BAD: [u8; 7] = [0x00, 0x05, 0x13, 0x31, 0x7f, 0x88, 0xfe];
            f[4] = BAD[r.random_range(0..BAD.len())];
            (f, None)
        }
        4 => {
            // Drop the tail and fix the prefix so the frame stays framed.
            let keep = r.random_range(5..=f.len());
            f.truncate(keep);
            let len = (keep - 4) as u32;
            f[..4].copy_from_slice(&len.to_be_bytes());
            (f, None)
        }
        _ => {
            // Garbage body of random length.
            let n = r.random_range(0..40);
            let mut g = ((n + 1) as u32).to_be_bytes().to_vec();
            g.push(r.random());
            g.extend((0..n).map(|_| r.random::<u8>()));
            (g, None)
        }
    }
}

// ---------------------------------------------------------------------------
// Random scenarios
// ---------------------------------------------------------------------------

/// A small random scenario with positive durations everywhere. The batch
/// is large enough that every instance handles at least two micro-batches
/// per step; below that, streaming has nothing to overlap.
pub fn scenario(r: &mut impl Rng, mode: Mode) -> SimScenario {
    let lengths = if r.random_bool(0.3) {
        LengthDist::Fixed { tokens: r.random_range(16..512) }
    } else {
        LengthDist::Lognormal {
            mu: r.random_range(3.0..6.0),
            sigma: r.random_range(0.2..1.2),
            max_tokens: 2048,
        }
    };
    let rollout_instances = if mode == Mode::StreamedAsyncStaggered { r.random_range(2..=4) } else { r.random_range(1..=4) };
    let train_instances = r.random_range(1..=3);
    let rollout_micro_batch = r.random_range(1..=8);
    let train_micro_batch = r.random_range(1..=8);
    let floor = 2 * (rollout_instances * rollout_micro_batch).max(train_instances * train_micro_batch) as u64;
    SimScenario {
        mode,
        global_batch: r.random_range(8..=64u64).max(floor),
        rollout_instances,
        train_instances,
        lengths,
        per_token_ns: r.random_range(5_000..40_000),
        per_sample_train_ns: r.random_range(500_000..5_000_000),
        weight_transfer_ns: r.random_range(1_000_000..20_000_000),
        h2d_ns: r.random_range(100_000..2_000_000),
        staleness: 1,
        iterations: r.random_range(4..=12),
        seed: r.random(),
        rollout_micro_batch,
        train_micro_batch,
        storage_units: r.random_range(1..=4),
        stagger_k: 1,
        ..SimScenario::desk(mode)
    }
}
