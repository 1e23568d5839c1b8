use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use bytes::Bytes;

use crate::client::{ClientError, StorageDirectory};
use crate::controller::{Controller, Grant, PackingPolicy};
use crate::coordinator::{
    Admission, RolloutInstanceState, StaggerGate, StalenessTracker, TransferMode, WeightChannel,
};
use crate::storage::{PartitionMap, StorageUnit};
use crate::transport::StorageApi;
use crate::types::{
    col, Cell, CellValue, ColumnId, ConsumerGroupId, Epoch, GlobalIndex, StalenessBound, TaskSpec,
    WeightVersion,
};

use super::report::{
    bubble_ratio, Conservation, Gantt, InstanceInfo, Segment, SegmentKind, SimReport,
};
use super::scenario::{epoch_lengths, Mode, SimScenario};
use super::SimError;

pub(crate) const ROLLOUT_TASK: &str = "actor_rollout";
pub(crate) const TRAIN_TASK: &str = "actor_update";

#[derive(Debug)]
enum Event {
    GenDone {
        inst: usize,
        epoch: u64,
        rows: Vec<GlobalIndex>,
        tokens: Vec<u64>,
        version: WeightVersion,
    },
    InferDone {
        stage: usize,
        inst: usize,
        epoch: u64,
        rows: Vec<GlobalIndex>,
    },
    TrainDone {
        group: usize,
    },
    SwapDone {
        inst: usize,
    },
    TransferDone,
    SyncDone,
}

struct Pending {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Storage and controllers for one open epoch.
struct Slot {
    epoch: u64,
    open: bool,
    units: Vec<Arc<StorageUnit>>,
    dir: StorageDirectory,
    rollout_ctl: Arc<Controller>,
    stage_ctls: Vec<Arc<Controller>>,
    train_ctl: Arc<Controller>,
    lengths: Vec<u64>,
    train_policy: PackingPolicy,
    generated: u64,
    consumed: u64,
    dropped: u64,
    versions: BTreeSet<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RolloutBusy {
    Idle,
    Generating,
    Swapping,
}

struct Rollout {
    name: String,
    state: RolloutInstanceState,
    busy: RolloutBusy,
    stalled: bool,
}

struct Worker {
    name: String,
    busy: bool,
}

pub(crate) struct Engine {
    sc: SimScenario,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Pending>>,
    nslots: u64,
    slots: Vec<Slot>,
    partition: PartitionMap,
    rollout_task: TaskSpec,
    stage_tasks: Vec<TaskSpec>,
    train_task: TaskSpec,
    rollouts: Vec<Rollout>,
    stages: Vec<Vec<Worker>>,
    trainers: Vec<Worker>,
    channel: WeightChannel,
    pending_submit: Option<WeightVersion>,
    gate: Option<StaggerGate>,
    tracker: StalenessTracker,
    trainer_version: u64,
    step_inflight: usize,
    syncing: bool,
    rollout_rows_issued: u64,
    segments: Vec<Segment>,
    version_stalls: Vec<u64>,
    versions_per_step: Vec<u64>,
    step_end_ns: Vec<u64>,
    conservation: Conservation,
    done: bool,
}

fn internal(e: impl std::fmt::Display) -> SimError {
    SimError::Internal(e.to_string())
}

fn violation(msg: impl Into<String>) -> SimError {
    SimError::InvariantViolation(msg.into())
}

fn encode_u64s(values: &[u64]) -> CellValue {
    let mut buf = Vec::with_capacity(8 * values.len());
    for v in values {
        buf.extend_from_slice(&v.to_be_bytes());
    }
    CellValue::from(buf)
}

fn decode_u64(bytes: &[u8], at: usize) -> Option<u64> {
    bytes
        .get(8 * at..8 * at + 8)
        .map(|b| u64::from_be_bytes(b.try_into().expect("8 bytes")))
}

impl Engine {
    pub(crate) fn new(sc: SimScenario) -> Result<Self, SimError> {
        sc.validate()?;
        let prompt = col("prompt");
        let response = col("response");
        let rollout_task =
            TaskSpec::new(ROLLOUT_TASK, vec![prompt.clone()], vec![response.clone()]).map_err(internal)?;
        let stage_tasks = sc
            .stages
            .iter()
            .map(|st| {
                TaskSpec::new(
                    st.name.clone(),
                    vec![prompt.clone(), response.clone()],
                    vec![col(&st.name)],
                )
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(internal)?;
        let mut train_inputs = vec![prompt, response];
        train_inputs.extend(sc.stages.iter().map(|st| col(&st.name)));
        let train_task = TaskSpec::new(TRAIN_TASK, train_inputs, vec![]).map_err(internal)?;

        let partition = PartitionMap::new(sc.global_batch, sc.storage_units).map_err(internal)?;
        let mode = if sc.mode.is_async() {
            TransferMode::Asynchronous
        } else {
            TransferMode::Synchronous
        };
        let gate = if sc.mode == Mode::StreamedAsyncStaggered {
            Some(StaggerGate::new(sc.stagger_k, sc.rollout_instances as usize).map_err(internal)?)
        } else {
            None
        };
        let nslots = (sc.lookahead() + 1).min(sc.iterations);
        let rollouts = (0..sc.rollout_instances)
            .map(|i| Rollout {
                name: format!("rollout-{i}"),
                state: RolloutInstanceState::new(i),
                busy: RolloutBusy::Idle,
                stalled: false,
            })
            .collect();
        let stages = sc
            .stages
            .iter()
            .map(|st| {
                (0..st.instances)
                    .map(|i| Worker {
                        name: format!("{}-{i}", st.name),
                        busy: false,
                    })
                    .collect()
            })
            .collect();
        let trainers = (0..sc.train_instances)
            .map(|i| Worker {
                name: format!("train-{i}"),
                busy: false,
            })
            .collect();
        let tracker = StalenessTracker::new(StalenessBound(sc.staleness), sc.reject_policy);
        let n = sc.iterations as usize;
        let mut engine = Engine {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nslots,
            slots: Vec::new(),
            partition,
            rollout_task,
            stage_tasks,
            train_task,
            rollouts,
            stages,
            trainers,
            channel: WeightChannel::new(mode),
            pending_submit: None,
            gate,
            tracker,
            trainer_version: 0,
            step_inflight: 0,
            syncing: false,
            rollout_rows_issued: 0,
            segments: Vec::new(),
            version_stalls: vec![0; n],
            versions_per_step: Vec::with_capacity(n),
            step_end_ns: Vec::with_capacity(n),
            conservation: Conservation::default(),
            done: false,
            sc,
        };
        for e in 0..nslots {
            let slot = engine.build_slot(e)?;
            engine.slots.push(slot);
            engine.write_prompts(e as usize)?;
        }
        Ok(engine)
    }

    fn build_slot(&self, epoch: u64) -> Result<Slot, SimError> {
        let g = self.sc.global_batch;
        let units = StorageUnit::cluster(&self.partition, Epoch(epoch));
        let ctl = |task: &TaskSpec| -> Result<Arc<Controller>, SimError> {
            let c = Arc::new(Controller::new(task.clone(), Epoch(epoch), g).map_err(internal)?);
            for u in &units {
                u.register_controller(c.clone()).map_err(internal)?;
            }
            Ok(c)
        };
        let rollout_ctl = ctl(&self.rollout_task)?;
        let stage_ctls = self.stage_tasks.iter().map(ctl).collect::<Result<Vec<_>, _>>()?;
        let train_ctl = ctl(&self.train_task)?;
        let dir = StorageDirectory::new(
            self.partition,
            units.iter().map(|u| u.clone() as Arc<dyn StorageApi>).collect(),
        )
        .map_err(internal)?;
        let lengths = epoch_lengths(&self.sc.lengths, g as usize, self.sc.seed, epoch);
        Ok(Slot {
            epoch,
            open: true,
            units,
            dir,
            rollout_ctl,
            stage_ctls,
            train_ctl,
            train_policy: self.sc.packing_policy(&lengths),
            lengths,
            generated: 0,
            consumed: 0,
            dropped: 0,
            versions: BTreeSet::new(),
        })
    }

    /// Loads the prompt column. Each prompt carries its response length.
    fn write_prompts(&mut self, slot: usize) -> Result<(), SimError> {
        let s = &self.slots[slot];
        let cells = s
            .lengths
            .iter()
            .enumerate()
            .map(|(row, tokens)| Cell::new(row as u64, col("prompt"), encode_u64s(&[*tokens])))
            .collect();
        s.dir.put_cells(Epoch(s.epoch), cells).map_err(internal)?;
        Ok(())
    }

    fn reopen_slot(&mut self, slot: usize, epoch: u64) -> Result<(), SimError> {
        let lengths = epoch_lengths(&self.sc.lengths, self.sc.global_batch as usize, self.sc.seed, epoch);
        let policy = self.sc.packing_policy(&lengths);
        let partition = self.partition;
        let s = &mut self.slots[slot];
        for u in &s.units {
            u.reset_epoch(Epoch(epoch), partition.rows_of(u.id())).map_err(internal)?;
        }
        for c in std::iter::once(&s.rollout_ctl)
            .chain(&s.stage_ctls)
            .chain(std::iter::once(&s.train_ctl))
        {
            c.reset_epoch(Epoch(epoch), self.sc.global_batch, vec![]).map_err(internal)?;
        }
        s.epoch = epoch;
        s.lengths = lengths;
        s.train_policy = policy;
        s.generated = 0;
        s.consumed = 0;
        s.dropped = 0;
        s.versions.clear();
        self.write_prompts(slot)
    }

    fn slot_of(&self, epoch: u64) -> usize {
        (epoch % self.nslots) as usize
    }

    /// Open slot indices ordered by epoch.
    fn open_slots(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.slots.len()).filter(|&i| self.slots[i].open).collect();
        v.sort_by_key(|&i| self.slots[i].epoch);
        v
    }

    fn schedule(&mut self, delay: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Pending {
            time: self.now + delay,
            seq: self.seq,
            event,
        }));
    }

    fn segment(&mut self, instance: &str, kind: SegmentKind, dur: u64, epoch: Option<u64>, version: Option<u64>) {
        if dur == 0 {
            return;
        }
        self.segments.push(Segment {
            instance: instance.to_string(),
            kind,
            start_ns: self.now,
            end_ns: self.now + dur,
            epoch,
            version,
        });
    }

    fn fetch(&self, slot: usize, meta: &crate::controller::BatchMeta) -> Result<crate::client::Batch, SimError> {
        let (batch, _) = self.slots[slot]
            .dir
            .fetch(meta, &meta.columns)
            .map_err(|e: ClientError| internal(e))?;
        Ok(batch)
    }

    pub(crate) fn run(mut self) -> Result<SimReport, SimError> {
        self.dispatch()?;
        while !self.done {
            let Some(Reverse(first)) = self.queue.pop() else {
                return Err(SimError::Deadlock {
                    time_ns: self.now,
                    step: self.trainer_version,
                });
            };
            self.now = first.time;
            self.handle(first.event)?;
            while !self.done
                && self
                    .queue
                    .peek()
                    .is_some_and(|Reverse(p)| p.time == self.now)
            {
                let Reverse(p) = self.queue.pop().expect("peeked");
                self.handle(p.event)?;
            }
            if !self.done {
                self.dispatch()?;
            }
        }
        self.finish()
    }

    fn dispatch(&mut self) -> Result<(), SimError> {
        loop {
            let mut progressed = false;
            for i in 0..self.rollouts.len() {
                progressed |= self.try_rollout(i)?;
            }
            for s in 0..self.stages.len() {
                for i in 0..self.stages[s].len() {
                    progressed |= self.try_stage(s, i)?;
                }
            }
            for g in 0..self.trainers.len() {
                progressed |= self.try_train(g)?;
            }
            if !progressed {
                return Ok(());
            }
        }
    }

    fn generation_left(&self) -> bool {
        self.rollout_rows_issued < self.sc.iterations * self.sc.global_batch
    }

    fn try_rollout(&mut self, i: usize) -> Result<bool, SimError> {
        if self.rollouts[i].busy != RolloutBusy::Idle || self.syncing {
            return Ok(false);
        }
        if self.rollouts[i].state.staged_version().is_some() && self.generation_left() {
            let id = self.rollouts[i].state.instance_id;
            let admitted = match self.gate.as_mut() {
                Some(g) => g.try_acquire(id),
                None => true,
            };
            if admitted {
                let r = self.rollouts[i].state.maybe_swap();
                debug_assert!(r.swapped);
                self.rollouts[i].busy = RolloutBusy::Swapping;
                self.rollouts[i].stalled = false;
                let name = self.rollouts[i].name.clone();
                let h2d = self.sc.h2d_ns;
                self.segment(&name, SegmentKind::H2d, h2d, None, Some(r.new_version.0));
                self.schedule(h2d, Event::SwapDone { inst: i });
                return Ok(true);
            }
        }
        let active = self.rollouts[i].state.active_version();
        let consumer = ConsumerGroupId::new(ROLLOUT_TASK, i as u32);
        for slot in self.open_slots() {
            let epoch = self.slots[slot].epoch;
            if active.0 + self.sc.lookahead() < epoch {
                break;
            }
            let grant = self.slots[slot]
                .rollout_ctl
                .request_batch(&consumer, self.sc.rollout_micro_batch, &PackingPolicy::Fifo)
                .map_err(internal)?;
            let Grant::Batch(meta) = grant else { continue };
            let batch = self.fetch(slot, &meta)?;
            let prompt = col("prompt");
            let tokens: Vec<u64> = batch
                .column(&prompt)
                .iter()
                .map(|v| decode_u64(v.as_slice(), 0).ok_or_else(|| violation("malformed prompt cell")))
                .collect::<Result<_, _>>()?;
            let cost = tokens.iter().sum::<u64>() * self.sc.per_token_ns;
            let version = self.rollouts[i].state.begin_iteration();
            self.rollout_rows_issued += meta.rows.len() as u64;
            let r = &mut self.rollouts[i];
            r.busy = RolloutBusy::Generating;
            r.stalled = false;
            let name = r.name.clone();
            self.segment(&name, SegmentKind::Generate, cost, Some(epoch), Some(version.0));
            self.schedule(
                cost,
                Event::GenDone {
                    inst: i,
                    epoch,
                    rows: meta.rows,
                    tokens,
                    version,
                },
            );
            return Ok(true);
        }
        // Idle with generation still outstanding: waiting on the trainer.
        if self.generation_left() && !self.rollouts[i].stalled {
            self.rollouts[i].stalled = true;
            let step = (self.trainer_version as usize).min(self.version_stalls.len() - 1);
            self.version_stalls[step] += 1;
        }
        Ok(false)
    }

    fn try_stage(&mut self, s: usize, i: usize) -> Result<bool, SimError> {
        if self.stages[s][i].busy || self.syncing {
            return Ok(false);
        }
        let spec = self.sc.stages[s].clone();
        let consumer = ConsumerGroupId::new(spec.name.clone(), i as u32);
        for slot in self.open_slots() {
            let grant = self.slots[slot].stage_ctls[s]
                .request_batch(&consumer, spec.micro_batch, &PackingPolicy::Fifo)
                .map_err(internal)?;
            let Grant::Batch(meta) = grant else { continue };
            self.fetch(slot, &meta)?;
            let epoch = self.slots[slot].epoch;
            let cost = spec.per_sample_ns * meta.rows.len() as u64;
            self.stages[s][i].busy = true;
            let name = self.stages[s][i].name.clone();
            self.segment(&name, SegmentKind::Infer, cost, Some(epoch), None);
            self.schedule(
                cost,
                Event::InferDone {
                    stage: s,
                    inst: i,
                    epoch,
                    rows: meta.rows,
                },
            );
            return Ok(true);
        }
        Ok(false)
    }

    fn try_train(&mut self, g: usize) -> Result<bool, SimError> {
        if self.trainers[g].busy || self.syncing || self.trainer_version >= self.sc.iterations {
            return Ok(false);
        }
        let epoch = self.trainer_version;
        let slot = self.slot_of(epoch);
        let s = &self.slots[slot];
        if !s.open || s.epoch != epoch {
            return Err(violation(format!("epoch {epoch} not open for training")));
        }
        if self.sc.mode == Mode::Sequential
            && (s.train_ctl.ready_rows().len() as u64 + s.train_ctl.consumed_count()) < self.sc.global_batch
        {
            return Ok(false);
        }
        let consumer = ConsumerGroupId::new(TRAIN_TASK, g as u32);
        let grant = s
            .train_ctl
            .request_batch(&consumer, self.sc.train_micro_batch, &s.train_policy)
            .map_err(internal)?;
        let Grant::Batch(meta) = grant else {
            return Ok(false);
        };
        let batch = self.fetch(slot, &meta)?;
        let response = col("response");
        let mut admitted = 0u64;
        let mut dropped = 0u64;
        for row in &meta.rows {
            let cell = batch
                .get(*row, &response)
                .ok_or_else(|| violation(format!("row {row} fetched without a response")))?;
            let version = decode_u64(cell.as_slice(), 1).ok_or_else(|| violation("malformed response cell"))?;
            self.tracker.record_sample(*row, WeightVersion(version));
            match self.tracker.admit_row(*row) {
                Admission::Admit => {
                    admitted += 1;
                    self.slots[slot].versions.insert(version);
                }
                Admission::Reject => dropped += 1,
            }
        }
        self.slots[slot].consumed += admitted;
        self.slots[slot].dropped += dropped;
        let cost = self.sc.per_sample_train_ns * admitted;
        self.trainers[g].busy = true;
        self.step_inflight += 1;
        let name = self.trainers[g].name.clone();
        self.segment(&name, SegmentKind::Train, cost, Some(epoch), Some(epoch));
        self.schedule(cost, Event::TrainDone { group: g });
        Ok(true)
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        match event {
            Event::GenDone {
                inst,
                epoch,
                rows,
                tokens,
                version,
            } => {
                let r = &mut self.rollouts[inst];
                r.state.end_iteration();
                r.busy = RolloutBusy::Idle;
                if r.state.active_version() != version {
                    return Err(violation(format!(
                        "{} changed weights mid-iteration ({} -> {})",
                        r.name,
                        version,
                        r.state.active_version()
                    )));
                }
                let slot = self.slot_of(epoch);
                let values = tokens.iter().map(|t| encode_u64s(&[*t, version.0])).collect();
                self.slots[slot]
                    .dir
                    .write_back(&self.rollout_task, Epoch(epoch), &rows, &col("response"), values)
                    .map_err(internal)?;
                self.slots[slot].generated += rows.len() as u64;
            }
            Event::InferDone {
                stage,
                inst,
                epoch,
                rows,
            } => {
                self.stages[stage][inst].busy = false;
                let slot = self.slot_of(epoch);
                let column: ColumnId = col(&self.sc.stages[stage].name);
                let values = rows.iter().map(|r| encode_u64s(&[r.0])).collect();
                self.slots[slot]
                    .dir
                    .write_back(&self.stage_tasks[stage], Epoch(epoch), &rows, &column, values)
                    .map_err(internal)?;
            }
            Event::TrainDone { group } => {
                self.trainers[group].busy = false;
                self.step_inflight -= 1;
                let slot = self.slot_of(self.trainer_version);
                if self.step_inflight == 0 && self.slots[slot].train_ctl.is_exhausted() {
                    self.complete_step(slot)?;
                }
            }
            Event::SwapDone { inst } => {
                self.rollouts[inst].busy = RolloutBusy::Idle;
                if let Some(g) = self.gate.as_mut() {
                    g.release(inst as u32);
                }
            }
            Event::TransferDone => {
                let (v, payload) = self
                    .channel
                    .complete_transfer()
                    .ok_or_else(|| violation("transfer completed with nothing in flight"))?;
                for r in &mut self.rollouts {
                    r.state.stage_weights(v, payload.clone()).map_err(internal)?;
                }
                if let Some(next) = self.pending_submit.take() {
                    self.submit_async(next)?;
                }
            }
            Event::SyncDone => {
                let (v, payload) = self
                    .channel
                    .complete_transfer()
                    .ok_or_else(|| violation("sync completed with nothing in flight"))?;
                for r in &mut self.rollouts {
                    r.state.stage_weights(v, payload.clone()).map_err(internal)?;
                    if !r.state.maybe_swap().swapped {
                        return Err(violation(format!("{} could not swap after sync", r.name)));
                    }
                }
                self.syncing = false;
            }
        }
        Ok(())
    }

    fn submit_async(&mut self, v: WeightVersion) -> Result<(), SimError> {
        match self.channel.begin_submit(v, Bytes::new()) {
            Ok(_) => {
                self.schedule(self.sc.weight_transfer_ns, Event::TransferDone);
                Ok(())
            }
            Err(crate::coordinator::CoordError::ChannelBusy { .. }) => {
                // Only the newest pending version matters.
                self.pending_submit = Some(v);
                Ok(())
            }
            Err(e) => Err(internal(e)),
        }
    }

    fn complete_step(&mut self, slot: usize) -> Result<(), SimError> {
        let g = self.sc.global_batch;
        let s = &self.slots[slot];
        for row in 0..g {
            let row = GlobalIndex(row);
            if s.rollout_ctl.consumer_of(row).is_none() || s.train_ctl.consumer_of(row).is_none() {
                return Err(violation(format!("epoch {}: row {row} never consumed", s.epoch)));
            }
            for c in &s.stage_ctls {
                if c.consumer_of(row).is_none() {
                    return Err(violation(format!("epoch {}: row {row} skipped a stage", s.epoch)));
                }
            }
        }
        if s.generated != g || s.rollout_ctl.consumed_count() != g || s.train_ctl.consumed_count() != g {
            return Err(violation(format!("epoch {}: counts off", s.epoch)));
        }
        self.conservation.generated += s.generated;
        self.conservation.consumed += s.consumed;
        self.conservation.dropped += s.dropped;
        self.versions_per_step.push(s.versions.len() as u64);
        self.step_end_ns.push(self.now);

        self.trainer_version += 1;
        let v = WeightVersion(self.trainer_version);
        self.tracker.set_trainer_version(v);
        self.tracker.clear_rows();

        let next_epoch = s.epoch + self.nslots;
        if next_epoch < self.sc.iterations {
            self.reopen_slot(slot, next_epoch)?;
        } else {
            self.slots[slot].open = false;
        }

        if self.trainer_version == self.sc.iterations {
            self.done = true;
            return Ok(());
        }
        if self.sc.mode.is_async() {
            return self.submit_async(v);
        }
        self.channel.begin_submit(v, Bytes::new()).map_err(internal)?;
        self.syncing = true;
        let w = self.sc.weight_transfer_ns;
        let names: Vec<String> = self
            .rollouts
            .iter()
            .map(|r| {
                if r.busy != RolloutBusy::Idle {
                    Err(violation(format!("{} busy during blocking sync", r.name)))
                } else {
                    Ok(r.name.clone())
                }
            })
            .chain(self.trainers.iter().map(|t| Ok(t.name.clone())))
            .collect::<Result<_, _>>()?;
        for n in names {
            self.segment(&n, SegmentKind::WeightSync, w, None, Some(v.0));
        }
        self.schedule(w, Event::SyncDone);
        Ok(())
    }

    fn finish(mut self) -> Result<SimReport, SimError> {
        let end = self.now;
        // Rows generated for epochs that never got trained.
        for s in self.slots.iter().filter(|s| s.open) {
            self.conservation.generated += s.generated;
            self.conservation.in_flight_at_end += s.generated - s.consumed - s.dropped;
        }
        for seg in &mut self.segments {
            seg.end_ns = seg.end_ns.min(end);
        }
        self.segments.retain(|s| s.end_ns > s.start_ns);
        let mut instances: Vec<InstanceInfo> = self
            .rollouts
            .iter()
            .map(|r| InstanceInfo {
                name: r.name.clone(),
                class: "rollout".into(),
            })
            .collect();
        for (s, workers) in self.stages.iter().enumerate() {
            for w in workers {
                instances.push(InstanceInfo {
                    name: w.name.clone(),
                    class: self.sc.stages[s].name.clone(),
                });
            }
        }
        for t in &self.trainers {
            instances.push(InstanceInfo {
                name: t.name.clone(),
                class: "train".into(),
            });
        }
        // Stable order: by instance position, then start time.
        let pos: BTreeMap<&str, usize> = instances
            .iter()
            .enumerate()
            .map(|(i, x)| (x.name.as_str(), i))
            .collect();
        let mut segments = std::mem::take(&mut self.segments);
        segments.sort_by_key(|s| (pos[s.instance.as_str()], s.start_ns, s.end_ns));
        let gantt = Gantt {
            instances,
            segments,
            end_ns: end,
        };
        let bubble = gantt
            .classes()
            .into_iter()
            .map(|c| {
                let b = bubble_ratio(&gantt, &c);
                (c, b)
            })
            .collect();
        let samples = self.sc.iterations * self.sc.global_batch;
        let report = SimReport {
            mode: self.sc.mode,
            iterations: self.sc.iterations,
            samples_per_second: if end == 0 {
                0.0
            } else {
                samples as f64 / (end as f64 / 1e9)
            },
            end_to_end_time_ns: end,
            bubble_ratio: bubble,
            staleness_histogram: self.tracker.histogram().clone(),
            max_staleness: self.tracker.max_gap().unwrap_or(0),
            version_stalls: self.version_stalls,
            versions_per_step: self.versions_per_step,
            step_end_ns: self.step_end_ns,
            conservation: self.conservation,
            gantt,
        };
        verify(&self.sc, &report)?;
        Ok(report)
    }
}

/// Post-run checks over the finished report.
pub fn verify(sc: &SimScenario, report: &SimReport) -> Result<(), SimError> {
    report.gantt.check_well_formed().map_err(violation)?;
    if !report.conservation.holds() {
        return Err(violation(format!("conservation broken: {:?}", report.conservation)));
    }
    if report.max_staleness > sc.staleness {
        return Err(violation(format!(
            "staleness {} exceeds bound {}",
            report.max_staleness, sc.staleness
        )));
    }
    if !sc.mode.is_async() && report.max_staleness != 0 {
        return Err(violation("synchronous mode consumed stale data"));
    }
    let mix = sc.lookahead() + 1;
    if let Some((step, n)) = report
        .versions_per_step
        .iter()
        .enumerate()
        .find(|(_, n)| **n > mix)
    {
        return Err(violation(format!("step {step} mixed {n} data versions")));
    }
    for (class, b) in &report.bubble_ratio {
        if !(0.0..=1.0).contains(b) {
            return Err(violation(format!("bubble ratio of {class} out of range: {b}")));
        }
    }
    Ok(())
}
