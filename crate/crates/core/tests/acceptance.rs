//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! cargo test --test acceptance

mod common;

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use flowqueue::client::{decode_varlen, encode_varlen, IteratorConfig, StorageDirectory, StreamingBatchIterator};
use flowqueue::controller::{BatchMeta, Controller, Grant, PackingPolicy};
use flowqueue::coordinator::{Coordinator, TransferMode};
use flowqueue::net;
use flowqueue::planner::{plan, scenario_for, Allocation, AnalyticModel, PlanOptions, PlanTask, TaskRole};
use flowqueue::sim::{run_sim, LengthDist, Mode, SimScenario};
use flowqueue::storage::{PartitionMap, StorageUnit};
use flowqueue::transport::{ControlApi, Notification, StorageApi};
use flowqueue::types::{Cell, CellValue, ConsumerGroupId, Epoch, GlobalIndex, TaskSpec};
use flowqueue::wire::{read_frame, write_frame, ErrorCode, Message, DEFAULT_MAX_FRAME};

use common::{column, rng, Oracle, OracleGrant};

type Outcome = Result<String, String>;

// ---------------------------------------------------------------------------
// Exactly-once consumption
// ---------------------------------------------------------------------------

const EO_ROWS: u64 = 256;
const EO_GROUPS: u32 = 4;

struct Stack {
    dir: StorageDirectory,
    rollout: Arc<Controller>,
    train: Arc<Controller>,
    rollout_spec: TaskSpec,
    train_spec: TaskSpec,
}

fn stack() -> Stack {
    let p = PartitionMap::new(EO_ROWS, 2).unwrap();
    let units = StorageUnit::cluster(&p, Epoch(0));
    let rollout_spec = TaskSpec::new("rollout", vec![column("prompt")], vec![column("response")]).unwrap();
    let train_spec = TaskSpec::new("train", vec![column("prompt"), column("response")], vec![]).unwrap();
    let rollout = Arc::new(Controller::new(rollout_spec.clone(), Epoch(0), EO_ROWS).unwrap());
    let train = Arc::new(Controller::new(train_spec.clone(), Epoch(0), EO_ROWS).unwrap());
    for u in &units {
        u.register_controller(rollout.clone()).unwrap();
        u.register_controller(train.clone()).unwrap();
    }
    let dir = StorageDirectory::new(p, units.iter().map(|u| u.clone() as Arc<dyn StorageApi>).collect()).unwrap();
    Stack { dir, rollout, train, rollout_spec, train_spec }
}

fn cell(row: u64, col: &str) -> Cell {
    Cell::new(row, column(col), CellValue::new(vec![row as u8; (row % 7) as usize]))
}

/// Checks that `issued` names every row exactly once and agrees with the
/// controller's ledger.
fn check_once(task: &str, issued: &[(u64, u32)], ctl: &Controller) -> Result<(), String> {
    let mut count = vec![0u32; EO_ROWS as usize];
    for &(row, group) in issued {
        count[row as usize] += 1;
        let owner = ctl.consumer_of(GlobalIndex(row));
        if owner != Some(ConsumerGroupId::new(task, group)) {
            return Err(format!("{task}: row {row} issued to {group} but ledger says {owner:?}"));
        }
    }
    if let Some(r) = count.iter().position(|&c| c != 1) {
        return Err(format!("{task}: row {r} issued {} times", count[r]));
    }
    Ok(())
}

/// One randomly scheduled single-threaded interleaving of prompt writes,
/// rollout grants, response writes and train grants.
fn scripted_interleaving(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let s = stack();
    let mut unwritten: Vec<u64> = (0..EO_ROWS).collect();
    unwritten.shuffle(&mut r);
    let mut pending: Vec<u64> = Vec::new();
    let (mut rollout_issued, mut train_issued) = (Vec::new(), Vec::new());
    let balanced = PackingPolicy::token_balanced((0..EO_ROWS).map(|i| (i, (i * 37) % 101)));
    let mut guard = 0;
    while !(s.rollout.is_exhausted() && s.train.is_exhausted()) {
        guard += 1;
        if guard > 1_000_000 {
            return Err("no progress".into());
        }
        match r.random_range(0..4) {
            0 if !unwritten.is_empty() => {
                let n = r.random_range(1..=8).min(unwritten.len());
                let cells = unwritten.drain(..n).map(|row| cell(row, "prompt")).collect();
                s.dir.put_cells(Epoch(0), cells).map_err(|e| e.to_string())?;
            }
            1 => {
                let g = r.random_range(0..EO_GROUPS);
                let mb = r.random_range(1..=8);
                let c = ConsumerGroupId::new("rollout", g);
                if let Grant::Batch(m) = s.rollout.request_batch(&c, mb, &PackingPolicy::Fifo).unwrap() {
                    for row in m.rows {
                        rollout_issued.push((row.0, g));
                        pending.push(row.0);
                    }
                }
            }
            2 if !pending.is_empty() => {
                pending.shuffle(&mut r);
                let n = r.random_range(1..=pending.len());
                let cells = pending.drain(..n).map(|row| cell(row, "response")).collect();
                s.dir.put_cells(Epoch(0), cells).map_err(|e| e.to_string())?;
            }
            3 => {
                let g = r.random_range(0..EO_GROUPS);
                let mb = r.random_range(1..=8);
                let policy = if seed % 2 == 0 { &PackingPolicy::Fifo } else { &balanced };
                let c = ConsumerGroupId::new("train", g);
                if let Grant::Batch(m) = s.train.request_batch(&c, mb, policy).unwrap() {
                    train_issued.extend(m.rows.iter().map(|row| (row.0, g)));
                }
            }
            _ => {}
        }
    }
    check_once("rollout", &rollout_issued, &s.rollout)?;
    check_once("train", &train_issued, &s.train)
}

/// Producer, four rollout groups and four train groups on real threads.
fn threaded_interleaving(seed: u64) -> Result<(), String> {
    let s = stack();
    let producer = {
        let dir = s.dir.clone();
        std::thread::spawn(move || {
            let mut r = rng(seed);
            let mut rows: Vec<u64> = (0..EO_ROWS).collect();
            rows.shuffle(&mut r);
            for chunk in rows.chunks(r.random_range(1..=16)) {
                dir.put_cells(Epoch(0), chunk.iter().map(|&row| cell(row, "prompt")).collect()).unwrap();
            }
        })
    };
    let spawn_group = |spec: &TaskSpec, ctl: &Arc<Controller>, g: u32, write: bool| {
        let cfg = IteratorConfig::new(spec.clone(), g, 1 + (seed as u32 + g) % 8).poll_interval(Duration::from_micros(20));
        let mut it = StreamingBatchIterator::new(cfg, ctl.clone() as Arc<dyn ControlApi>, s.dir.clone());
        std::thread::spawn(move || -> Result<Vec<(u64, u32)>, String> {
            let mut got = Vec::new();
            while let Some(b) = it.next_batch().map_err(|e| e.to_string())? {
                if write {
                    let values = b.rows().iter().map(|_| CellValue::new(vec![1])).collect();
                    it.write_back(Epoch(0), b.rows(), &column("response"), values).map_err(|e| e.to_string())?;
                }
                got.extend(b.rows().iter().map(|r| (r.0, g)));
            }
            Ok(got)
        })
    };
    let rollouts: Vec<_> = (0..EO_GROUPS).map(|g| spawn_group(&s.rollout_spec, &s.rollout, g, true)).collect();
    let trains: Vec<_> = (0..EO_GROUPS).map(|g| spawn_group(&s.train_spec, &s.train, g, false)).collect();
    producer.join().map_err(|_| "producer panicked")?;
    let mut ri = Vec::new();
    for h in rollouts {
        ri.extend(h.join().map_err(|_| "rollout panicked")??);
    }
    let mut ti = Vec::new();
    for h in trains {
        ti.extend(h.join().map_err(|_| "train panicked")??);
    }
    check_once("rollout", &ri, &s.rollout)?;
    check_once("train", &ti, &s.train)
}

fn exactly_once() -> Outcome {
    let t = Instant::now();
    let mut threaded = 0;
    for seed in 0..1000u64 {
        if seed % 10 == 0 {
            threaded += 1;
            threaded_interleaving(seed).map_err(|e| format!("seed {seed} (threaded): {e}"))?;
        } else {
            scripted_interleaving(seed).map_err(|e| format!("seed {seed}: {e}"))?;
        }
    }
    let el = t.elapsed();
    if el > Duration::from_secs(30) {
        return Err(format!("took {el:.1?}, limit 30 s"));
    }
    Ok(format!(
        "1000 interleavings ({threaded} threaded), G={EO_ROWS}, {EO_GROUPS} groups x 2 tasks, 0 violations, {el:.1?}"
    ))
}

// ---------------------------------------------------------------------------
// Scheduling oracle equivalence
// ---------------------------------------------------------------------------

fn oracle_script(seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    let rows = r.random_range(1..=16u64);
    let all_cols = ["a", "b", "c"];
    let ncols = r.random_range(1..=3);
    let required = &all_cols[..ncols];
    let tokens: Vec<u64> = (0..rows).map(|_| r.random_range(1..500)).collect();
    let balanced = r.random_bool(0.5);
    let policy = if balanced {
        PackingPolicy::token_balanced(tokens.iter().enumerate().map(|(i, &t)| (i as u64, t)))
    } else {
        PackingPolicy::Fifo
    };
    let spec = TaskSpec::new("t", required.iter().map(|c| column(c)).collect(), vec![]).unwrap();
    let ctl = Controller::new(spec, Epoch(0), rows).unwrap();
    let mut oracle = Oracle::new(rows, required, tokens);
    let mut requests = 0;
    for step in 0..r.random_range(20..80) {
        if r.random_bool(0.5) {
            // A put touching a few coordinates, sometimes an untracked column.
            let coords: Vec<(GlobalIndex, _)> = (0..r.random_range(1..4))
                .map(|_| {
                    let c = ["a", "b", "c", "zz"][r.random_range(0..4)];
                    (GlobalIndex(r.random_range(0..rows)), column(c))
                })
                .collect();
            for (row, c) in &coords {
                oracle.write(row.0, c.as_str());
            }
            ctl.on_notify(&Notification { epoch: Epoch(0), unit_id: r.random_range(0..3), coords }).unwrap();
        } else {
            requests += 1;
            let g = r.random_range(0..3);
            let size = r.random_range(1..=5);
            let want = oracle.request(g, size, balanced);
            let got = match ctl.request_batch(&ConsumerGroupId::new("t", g), size as u32, &policy).unwrap() {
                Grant::Batch(BatchMeta { rows, .. }) => OracleGrant::Rows(rows.iter().map(|r| r.0).collect()),
                Grant::NotReady => OracleGrant::NotReady,
                Grant::EpochExhausted => OracleGrant::Exhausted,
            };
            if got != want {
                return Err(format!("step {step}: controller {got:?}, oracle {want:?}"));
            }
        }
    }
    Ok(requests)
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut requests = 0;
    for seed in 0..200 {
        requests += oracle_script(1_000 + seed).map_err(|e| format!("script {seed}: {e}"))?;
    }
    let el = t.elapsed();
    if el > Duration::from_secs(10) {
        return Err(format!("took {el:.1?}, limit 10 s"));
    }
    Ok(format!("200 scripts, G<=16, {requests} grants identical to the reference, {el:.1?}"))
}

// ---------------------------------------------------------------------------
// Staleness bound
// ---------------------------------------------------------------------------

fn staleness_bound() -> Outcome {
    let mut runs = 0;
    let mut worst = [0u64; 2];
    for i in 0..100u64 {
        for mode in Mode::ALL {
            let mut r = rng(5_000 + i);
            let base = common::scenario(&mut r, mode);
            for (slot, s) in [1u64, 0].into_iter().enumerate() {
                let sc = SimScenario { staleness: s, ..base.clone() };
                let rep = run_sim(&sc).map_err(|e| format!("scenario {i} {} s={s}: {e}", mode.name()))?;
                runs += 1;
                let observed = rep.staleness_histogram.keys().copied().max().unwrap_or(0).max(rep.max_staleness);
                worst[slot] = worst[slot].max(observed);
                if observed > s {
                    return Err(format!("scenario {i} {} s={s}: staleness {observed}", mode.name()));
                }
            }
        }
    }
    Ok(format!("{runs} runs, max gap {} with s=1 and {} with s=0", worst[0], worst[1]))
}

// ---------------------------------------------------------------------------
// Ablation ordering
// ---------------------------------------------------------------------------

fn ablation_ordering() -> Outcome {
    let tput = |m: Mode| run_sim(&SimScenario::desk(m)).map(|r| r.samples_per_second);
    let (seq, st, asy) = (
        tput(Mode::Sequential).map_err(|e| e.to_string())?,
        tput(Mode::Streamed).map_err(|e| e.to_string())?,
        tput(Mode::StreamedAsync).map_err(|e| e.to_string())?,
    );
    let (a, b) = (st / seq, asy / st);
    if !(a > 1.3 && b > 1.1) {
        return Err(format!("desk: streamed/sequential {a:.3} (need >1.3), async/streamed {b:.3} (need >1.1)"));
    }
    let mut ordered = 0;
    for i in 0..100u64 {
        let mut r = rng(9_000 + i);
        let base = common::scenario(&mut r, Mode::Sequential);
        let t: Vec<f64> = [Mode::Sequential, Mode::Streamed, Mode::StreamedAsync]
            .iter()
            .map(|&m| run_sim(&base.with_mode(m)).map(|r| r.samples_per_second))
            .collect::<Result<_, _>>()
            .map_err(|e| format!("scenario {i}: {e}"))?;
        if t[0] < t[1] && t[1] < t[2] {
            ordered += 1;
        }
    }
    if ordered < 95 {
        return Err(format!("ordering held on {ordered}/100 random scenarios (need >= 95)"));
    }
    Ok(format!(
        "desk x{a:.2} streamed/sequential, x{b:.2} async/streamed; ordering on {ordered}/100 random scenarios"
    ))
}

// ---------------------------------------------------------------------------
// Bubble elimination
// ---------------------------------------------------------------------------

fn bubble_elimination() -> Outcome {
    let at = |n: u64| {
        let sc = SimScenario {
            lengths: LengthDist::Fixed { tokens: 256 },
            per_sample_train_ns: 2_560_000,
            iterations: n,
            ..SimScenario::desk(Mode::StreamedAsync)
        };
        run_sim(&sc).map(|r| r.bubble_ratio).map_err(|e| e.to_string())
    };
    let (b10, b100) = (at(10)?, at(100)?);
    let mut parts = Vec::new();
    for (class, &v100) in &b100 {
        let v10 = b10[class];
        if !(v100 < 0.05) {
            return Err(format!("{class}: bubble {v100:.4} at N=100 (need < 0.05)"));
        }
        if !(v100 < v10) {
            return Err(format!("{class}: bubble {v10:.4} at N=10 and {v100:.4} at N=100, not decreasing"));
        }
        parts.push(format!("{class} {v10:.4} -> {v100:.4}"));
    }
    Ok(format!("N=10 -> N=100: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// Sequential closed form
// ---------------------------------------------------------------------------

fn sequential_closed_form() -> Outcome {
    let mut checked = 0;
    for (g, tokens, per_token, per_sample, n) in [
        (64u64, 256u64, 20_000u64, 2_560_000u64, 5u64),
        (16, 100, 7_000, 300_000, 9),
        (33, 1, 1, 1, 3),
        (8, 2048, 50_000, 10_000_000, 2),
    ] {
        let sc = SimScenario {
            mode: Mode::Sequential,
            global_batch: g,
            rollout_instances: 1,
            train_instances: 1,
            lengths: LengthDist::Fixed { tokens },
            per_token_ns: per_token,
            per_sample_train_ns: per_sample,
            weight_transfer_ns: 0,
            h2d_ns: 0,
            iterations: n,
            ..SimScenario::desk(Mode::Sequential)
        };
        let rep = run_sim(&sc).map_err(|e| e.to_string())?;
        // One instance each: generation is G·L tokens back to back, training
        // is G samples back to back, and nothing overlaps.
        let expected = n * (g * tokens * per_token + g * per_sample);
        if rep.end_to_end_time_ns.abs_diff(expected) > 1 {
            return Err(format!(
                "G={g} L={tokens} N={n}: {} ns, closed form {expected} ns",
                rep.end_to_end_time_ns
            ));
        }
        checked += 1;
    }
    Ok(format!("{checked} configurations equal N*(T_gen+T_train) within 1 ns"))
}

// ---------------------------------------------------------------------------
// Varlen round trip
// ---------------------------------------------------------------------------

fn fanout_frame(cells: &[Cell]) -> Vec<u8> {
    let meta = BatchMeta {
        epoch: Epoch(0),
        task_name: "t".into(),
        rows: cells.iter().map(|c| c.row).collect(),
        columns: vec![column("response")],
        locations: BTreeMap::new(),
        issued_to: ConsumerGroupId::new("t", 0),
    };
    Message::Fanout { meta, columns: vec![column("response")], envelope: encode_varlen(cells) }.encode()
}

fn varlen_round_trip() -> Outcome {
    let mut r = rng(77);
    let mut non_uniform = 0;
    for i in 0..1000 {
        let n = r.random_range(1..=32);
        let cells: Vec<Cell> = (0..n)
            .map(|row| {
                let len = r.random_range(0..=512);
                Cell::new(row as u64, column("response"), CellValue::new((0..len).map(|_| r.random::<u8>()).collect::<Vec<_>>()))
            })
            .collect();
        let env = encode_varlen(&cells);
        let back = decode_varlen(env.clone()).map_err(|e| format!("batch {i}: {e}"))?;
        if back != cells {
            return Err(format!("batch {i}: decode(encode(x)) != x"));
        }
        let sum: usize = cells.iter().map(|c| c.value.len()).sum();
        let max = cells.iter().map(|c| c.value.len()).max().unwrap();
        let frame = fanout_frame(&cells);
        // Metadata is whatever the frame holds besides payload bytes; it
        // must not depend on payload sizes.
        let empty: Vec<Cell> = cells.iter().map(|c| Cell::new(c.row, c.column.clone(), CellValue::new(Vec::new()))).collect();
        let metadata = fanout_frame(&empty).len();
        if frame.len() != sum + metadata || env.payload_bytes() != sum {
            return Err(format!("batch {i}: frame {} bytes, payload {sum} + metadata {metadata}", frame.len()));
        }
        let padded: Vec<Cell> = cells
            .iter()
            .map(|c| Cell::new(c.row, c.column.clone(), CellValue::new(vec![0u8; max])))
            .collect();
        let padded_len = fanout_frame(&padded).len();
        if cells.iter().any(|c| c.value.len() != max) {
            non_uniform += 1;
            if frame.len() >= padded_len {
                return Err(format!("batch {i}: {} bytes, padded layout {padded_len}", frame.len()));
            }
        }
    }
    Ok(format!("1000 batches round-trip; bytes = sum(lengths) + metadata; {non_uniform} non-uniform all below padded size"))
}

// ---------------------------------------------------------------------------
// Planner exhaustive equivalence
// ---------------------------------------------------------------------------

fn compositions(total: u32, parts: usize) -> Vec<Vec<u32>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 1..=total - (parts as u32 - 1) {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn planner_equivalence() -> Outcome {
    let template = SimScenario {
        global_batch: 16,
        iterations: 3,
        lengths: LengthDist::Fixed { tokens: 64 },
        ..SimScenario::desk(Mode::StreamedAsync)
    };
    let model = AnalyticModel::default();
    let mut sims = 0;
    for draw in 0..50u64 {
        let mut r = rng(31_000 + draw);
        let k = r.random_range(2..=3usize);
        let roles: &[TaskRole] = if k == 2 {
            &[TaskRole::Rollout, TaskRole::Train]
        } else {
            &[TaskRole::Rollout, TaskRole::Stage, TaskRole::Train]
        };
        let tasks: Vec<PlanTask> = roles
            .iter()
            .enumerate()
            .map(|(i, &role)| PlanTask {
                name: format!("task{i}"),
                role,
                workload: r.random_range(0.05..1.0),
                coeff: r.random_range(0.5..2.0),
            })
            .collect();
        let budget = r.random_range(k as u32..=8);
        let opts = PlanOptions { model: model.clone(), ..Default::default() };
        let p = plan(budget, &tasks, &template, usize::MAX, &opts).map_err(|e| format!("draw {draw}: {e}"))?;

        let mut best: Option<(u64, Vec<u32>)> = None;
        for alloc in compositions(budget, k) {
            let sc = scenario_for(&template, &model, &tasks, &Allocation(alloc.clone()), None);
            let ns = run_sim(&sc).map_err(|e| format!("draw {draw} {alloc:?}: {e}"))?.end_to_end_time_ns;
            sims += 1;
            if best.as_ref().is_none_or(|(b, a)| (ns, &alloc) < (*b, a)) {
                best = Some((ns, alloc));
            }
        }
        let (ns, alloc) = best.unwrap();
        if p.allocation.0 != alloc || p.report.end_to_end_time_ns != ns {
            return Err(format!(
                "draw {draw} (D={budget}): planner {:?} at {} ns, brute force {alloc:?} at {ns} ns",
                p.allocation.0, p.report.end_to_end_time_ns
            ));
        }
    }
    Ok(format!("50 draws, D<=8, 2-3 tasks: planner matches brute force ({sims} brute-force simulations)"))
}

// ---------------------------------------------------------------------------
// Protocol fuzz
// ---------------------------------------------------------------------------

struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

fn connect(addr: std::net::SocketAddr) -> Client {
    let s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    Client { reader: BufReader::new(s.try_clone().unwrap()), writer: BufWriter::new(s) }
}

fn protocol_fuzz() -> Outcome {
    let p = PartitionMap::new(64, 1).unwrap();
    let unit = Arc::new(StorageUnit::new(0, Epoch(0), p.rows_of(0)));
    let spec = TaskSpec::new("t", vec![column("prompt")], vec![]).unwrap();
    let ctl = Arc::new(Controller::new(spec, Epoch(0), 64).unwrap());
    let coord = Arc::new(Coordinator::new(TransferMode::Asynchronous, &[0, 1]));
    let servers = [
        net::serve(net::bind("127.0.0.1:0").unwrap(), DEFAULT_MAX_FRAME, net::storage_handler(unit)).unwrap(),
        net::serve(net::bind("127.0.0.1:0").unwrap(), DEFAULT_MAX_FRAME, net::controller_handler(ctl)).unwrap(),
        net::serve(
            net::bind("127.0.0.1:0").unwrap(),
            DEFAULT_MAX_FRAME,
            net::coordinator_handler(coord, Duration::from_secs(1)),
        )
        .unwrap(),
    ];
    let addrs: Vec<_> = servers.iter().map(|s| s.addr()).collect();
    let mut clients: Vec<Client> = addrs.iter().map(|&a| connect(a)).collect();

    let mut r = rng(4242);
    let (mut valid, mut protocol_errors, mut replies) = (0, 0, 0);
    for i in 0..10_000 {
        let (frame, msg) = common::fuzz_frame(&mut r);
        if let Some(m) = &msg {
            valid += 1;
            let back = Message::decode(&frame).map_err(|e| format!("frame {i}: valid frame failed to decode: {e}"))?;
            if &back != m {
                return Err(format!("frame {i}: round trip changed {}", m.name()));
            }
            let streamed = read_frame(&mut &frame[..], DEFAULT_MAX_FRAME)
                .map_err(|e| format!("frame {i}: {e}"))?
                .ok_or("empty stream")?;
            if &streamed != m {
                return Err(format!("frame {i}: streamed decode differs"));
            }
        }
        // Registration would make the storage server dial random ports;
        // send those to the controller instead, which refuses them.
        let target = match &msg {
            Some(Message::Register { .. }) => 1,
            _ => i % 3,
        };
        let c = &mut clients[target];
        std::io::Write::write_all(&mut c.writer, &frame).map_err(|e| format!("frame {i}: write: {e}"))?;
        std::io::Write::flush(&mut c.writer).map_err(|e| format!("frame {i}: flush: {e}"))?;
        match read_frame(&mut c.reader, DEFAULT_MAX_FRAME) {
            Ok(Some(reply)) => {
                replies += 1;
                if let Message::Error(w) = &reply {
                    if w.code == ErrorCode::Protocol {
                        protocol_errors += 1;
                        if msg.is_some() {
                            return Err(format!("frame {i}: valid frame rejected: {}", w.message));
                        }
                    }
                }
            }
            Ok(None) | Err(_) => {
                // Closed cleanly; reconnect.
                clients[target] = connect(addrs[target]);
            }
        }
    }
    // Every server still answers a well-formed request.
    for (i, a) in addrs.iter().enumerate() {
        let mut c = connect(*a);
        let probe = if i == 0 {
            Message::Get { epoch: Epoch(0), rows: vec![], columns: vec![] }
        } else {
            Message::SwapReport { instance: 0 }
        };
        write_frame(&mut c.writer, &probe).map_err(|e| e.to_string())?;
        read_frame(&mut c.reader, DEFAULT_MAX_FRAME)
            .map_err(|e| format!("server {i} unhealthy after fuzz: {e}"))?
            .ok_or(format!("server {i} closed the probe"))?;
    }
    for s in servers {
        s.shutdown();
    }
    Ok(format!(
        "10000 frames ({valid} valid round-trip), {replies} replies, {protocol_errors} protocol errors, servers healthy"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("exactly-once consumption", exactly_once),
        ("scheduling oracle equivalence", oracle_equivalence),
        ("staleness bound", staleness_bound),
        ("ablation ordering", ablation_ordering),
        ("bubble elimination", bubble_elimination),
        ("sequential closed form", sequential_closed_form),
        ("varlen round trip and zero padding", varlen_round_trip),
        ("planner exhaustive equivalence", planner_equivalence),
        ("protocol fuzz", protocol_fuzz),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        match f() {
            Ok(detail) => println!("PASS {name}: {detail} [{:.1?}]", t.elapsed()),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why} [{:.1?}]", t.elapsed());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
