//! Weight-version bookkeeping between the trainer and rollout instances.
//!
//! The building blocks are plain state machines ([`WeightChannel`],
//! [`RolloutInstanceState`], [`StalenessTracker`], [`StaggerGate`]) so the
//! simulator can drive them event by event. [`Coordinator`] wraps them
//! behind a lock for multi-threaded use.
//!
//! New weights are staged next to the running ones and only swapped in at
//! a generation-iteration boundary, so an instance never changes version
//! in the middle of an iteration.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use bytes::Bytes;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::transport::{CoordinatorApi, TransportError};
use crate::types::{GlobalIndex, StalenessBound, WeightVersion};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoordError {
    #[error("instance {instance}: offered {offered} but already at {current}")]
    VersionRegression {
        instance: u32,
        current: WeightVersion,
        offered: WeightVersion,
    },
    #[error("submission {version} is not newer than {last}")]
    StaleSubmission {
        version: WeightVersion,
        last: WeightVersion,
    },
    #[error("transfer of {in_flight} still in flight")]
    ChannelBusy { in_flight: WeightVersion },
    #[error("unknown rollout instance {0}")]
    UnknownInstance(u32),
    #[error("stagger limit {k} must be in 1..{instances}")]
    InvalidConcurrency { k: usize, instances: usize },
    #[error("timed out waiting for instances to reach {0}")]
    Timeout(WeightVersion),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Synchronous,
    Asynchronous,
}

/// Receipt for an accepted submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferHandle {
    pub version: WeightVersion,
    pub synchronous: bool,
}

/// Trainer-side sender. Holds at most one transfer in flight.
#[derive(Debug, Clone)]
pub struct WeightChannel {
    mode: TransferMode,
    last_submitted: WeightVersion,
    in_flight: Option<(WeightVersion, Bytes)>,
}

impl WeightChannel {
    pub fn new(mode: TransferMode) -> Self {
        WeightChannel {
            mode,
            last_submitted: WeightVersion::INITIAL,
            in_flight: None,
        }
    }

    pub fn mode(&self) -> TransferMode {
        self.mode
    }

    pub fn last_submitted(&self) -> WeightVersion {
        self.last_submitted
    }

    pub fn in_flight(&self) -> Option<WeightVersion> {
        self.in_flight.as_ref().map(|(v, _)| *v)
    }

    pub fn begin_submit(
        &mut self,
        version: WeightVersion,
        payload: Bytes,
    ) -> Result<TransferHandle, CoordError> {
        if version <= self.last_submitted {
            return Err(CoordError::StaleSubmission {
                version,
                last: self.last_submitted,
            });
        }
        if let Some((v, _)) = &self.in_flight {
            return Err(CoordError::ChannelBusy { in_flight: *v });
        }
        self.last_submitted = version;
        self.in_flight = Some((version, payload));
        Ok(TransferHandle {
            version,
            synchronous: self.mode == TransferMode::Synchronous,
        })
    }

    /// Ends the in-flight transfer and hands back its payload for staging.
    pub fn complete_transfer(&mut self) -> Option<(WeightVersion, Bytes)> {
        self.in_flight.take()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapResult {
    pub swapped: bool,
    pub new_version: WeightVersion,
}

/// One rollout engine's view of its weights.
#[derive(Debug, Clone)]
pub struct RolloutInstanceState {
    pub instance_id: u32,
    active_version: WeightVersion,
    generating: bool,
    staged: Option<(WeightVersion, Bytes)>,
}

impl RolloutInstanceState {
    pub fn new(instance_id: u32) -> Self {
        RolloutInstanceState {
            instance_id,
            active_version: WeightVersion::INITIAL,
            generating: false,
            staged: None,
        }
    }

    pub fn active_version(&self) -> WeightVersion {
        self.active_version
    }

    pub fn staged_version(&self) -> Option<WeightVersion> {
        self.staged.as_ref().map(|(v, _)| *v)
    }

    pub fn is_generating(&self) -> bool {
        self.generating
    }

    /// Starts a generation iteration; returns the version it will run with.
    pub fn begin_iteration(&mut self) -> WeightVersion {
        self.generating = true;
        self.active_version
    }

    pub fn end_iteration(&mut self) {
        self.generating = false;
    }

    /// Parks `version` next to the active weights. A newer staged version
    /// replaces an older one.
    pub fn stage_weights(&mut self, version: WeightVersion, payload: Bytes) -> Result<(), CoordError> {
        let floor = self.staged_version().unwrap_or(self.active_version).max(self.active_version);
        if version <= floor {
            return Err(CoordError::VersionRegression {
                instance: self.instance_id,
                current: floor,
                offered: version,
            });
        }
        if let Some((old, _)) = &self.staged {
            log::debug!(
                "instance {}: staged {} replaced by {}",
                self.instance_id,
                old,
                version
            );
        }
        self.staged = Some((version, payload));
        Ok(())
    }

    /// Swaps in staged weights. Does nothing while an iteration is running.
    pub fn maybe_swap(&mut self) -> SwapResult {
        if self.generating || self.staged.is_none() {
            return SwapResult {
                swapped: false,
                new_version: self.active_version,
            };
        }
        let (v, _) = self.staged.take().expect("checked above");
        self.active_version = v;
        SwapResult {
            swapped: true,
            new_version: v,
        }
    }
}

/// What happens to a sample that is too stale to train on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectPolicy {
    #[default]
    Drop,
    RequeueForDiscard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Admit,
    Reject,
}

/// Checks consumed samples against the staleness bound and keeps a
/// histogram of observed gaps.
#[derive(Debug, Clone)]
pub struct StalenessTracker {
    trainer_version: WeightVersion,
    bound: StalenessBound,
    policy: RejectPolicy,
    data_version: BTreeMap<GlobalIndex, WeightVersion>,
    gaps: BTreeMap<u64, u64>,
    rejected: u64,
    discard_queue: Vec<GlobalIndex>,
}

impl StalenessTracker {
    pub fn new(bound: StalenessBound, policy: RejectPolicy) -> Self {
        StalenessTracker {
            trainer_version: WeightVersion::INITIAL,
            bound,
            policy,
            data_version: BTreeMap::new(),
            gaps: BTreeMap::new(),
            rejected: 0,
            discard_queue: Vec::new(),
        }
    }

    pub fn bound(&self) -> StalenessBound {
        self.bound
    }

    pub fn trainer_version(&self) -> WeightVersion {
        self.trainer_version
    }

    pub fn set_trainer_version(&mut self, v: WeightVersion) {
        debug_assert!(v >= self.trainer_version);
        self.trainer_version = v;
    }

    pub fn record_sample(&mut self, row: GlobalIndex, version: WeightVersion) {
        self.data_version.insert(row, version);
    }

    pub fn data_version(&self, row: GlobalIndex) -> Option<WeightVersion> {
        self.data_version.get(&row).copied()
    }

    /// Admission check for a sample produced with `sample_version`.
    pub fn admit_sample(&mut self, sample_version: WeightVersion) -> Admission {
        let gap = self.trainer_version.gap_from(sample_version);
        if gap <= self.bound.0 {
            *self.gaps.entry(gap).or_default() += 1;
            Admission::Admit
        } else {
            self.rejected += 1;
            Admission::Reject
        }
    }

    /// Admission check for a recorded row. Unknown rows count as current.
    pub fn admit_row(&mut self, row: GlobalIndex) -> Admission {
        let v = self.data_version(row).unwrap_or(self.trainer_version);
        let a = self.admit_sample(v);
        if a == Admission::Reject && self.policy == RejectPolicy::RequeueForDiscard {
            self.discard_queue.push(row);
        }
        a
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    /// Gap → count over admitted samples.
    pub fn histogram(&self) -> &BTreeMap<u64, u64> {
        &self.gaps
    }

    pub fn max_gap(&self) -> Option<u64> {
        self.gaps.keys().next_back().copied()
    }

    pub fn take_discarded(&mut self) -> Vec<GlobalIndex> {
        std::mem::take(&mut self.discard_queue)
    }

    /// Forget per-row versions (rows are reused each epoch).
    pub fn clear_rows(&mut self) {
        self.data_version.clear();
    }
}

/// Caps how many instances may be mid-swap at once.
#[derive(Debug, Clone)]
pub struct StaggerGate {
    limit: usize,
    swapping: BTreeSet<u32>,
}

impl StaggerGate {
    /// `k` must leave at least one instance producing.
    pub fn new(k: usize, instances: usize) -> Result<Self, CoordError> {
        if k == 0 || k >= instances {
            return Err(CoordError::InvalidConcurrency { k, instances });
        }
        Ok(StaggerGate {
            limit: k,
            swapping: BTreeSet::new(),
        })
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn try_acquire(&mut self, instance: u32) -> bool {
        if self.swapping.contains(&instance) {
            return true;
        }
        if self.swapping.len() >= self.limit {
            return false;
        }
        self.swapping.insert(instance);
        true
    }

    pub fn release(&mut self, instance: u32) {
        self.swapping.remove(&instance);
    }

    pub fn in_window(&self) -> usize {
        self.swapping.len()
    }
}

/// Rolls `version` out to every instance with at most `k` swapping at a
/// time. Returns the swap windows in order; each lists the instances that
/// swapped together.
pub fn staggered_update(
    instances: &mut [RolloutInstanceState],
    version: WeightVersion,
    payload: Bytes,
    k: usize,
) -> Result<Vec<Vec<u32>>, CoordError> {
    let mut gate = StaggerGate::new(k, instances.len())?;
    for inst in instances.iter_mut() {
        inst.stage_weights(version, payload.clone())?;
    }
    let mut windows = Vec::new();
    let mut pending: Vec<usize> = (0..instances.len()).collect();
    while !pending.is_empty() {
        let mut window = Vec::new();
        pending.retain(|&i| {
            let id = instances[i].instance_id;
            if gate.try_acquire(id) {
                window.push(i);
                false
            } else {
                true
            }
        });
        let mut ids = Vec::with_capacity(window.len());
        for i in window {
            let inst = &mut instances[i];
            inst.end_iteration();
            let r = inst.maybe_swap();
            debug_assert!(r.swapped);
            gate.release(inst.instance_id);
            ids.push(inst.instance_id);
        }
        windows.push(ids);
    }
    Ok(windows)
}

struct Shared {
    channel: WeightChannel,
    instances: BTreeMap<u32, RolloutInstanceState>,
    gate: Option<StaggerGate>,
}

/// Thread-safe coordinator. Transitions are serialised by one lock;
/// synchronous submitters wait on a condition variable until every
/// instance has swapped.
pub struct Coordinator {
    shared: Mutex<Shared>,
    swapped: Condvar,
}

impl Coordinator {
    pub fn new(mode: TransferMode, instance_ids: &[u32]) -> Self {
        Coordinator {
            shared: Mutex::new(Shared {
                channel: WeightChannel::new(mode),
                instances: instance_ids
                    .iter()
                    .map(|&id| (id, RolloutInstanceState::new(id)))
                    .collect(),
                gate: None,
            }),
            swapped: Condvar::new(),
        }
    }

    pub fn with_stagger(self, k: usize) -> Result<Self, CoordError> {
        {
            let mut s = self.shared.lock();
            s.gate = Some(StaggerGate::new(k, s.instances.len())?);
        }
        Ok(self)
    }

    pub fn mode(&self) -> TransferMode {
        self.shared.lock().channel.mode()
    }

    pub fn instance_ids(&self) -> Vec<u32> {
        self.shared.lock().instances.keys().copied().collect()
    }

    pub fn instance(&self, id: u32) -> Result<RolloutInstanceState, CoordError> {
        self.shared
            .lock()
            .instances
            .get(&id)
            .cloned()
            .ok_or(CoordError::UnknownInstance(id))
    }

    pub fn active_versions(&self) -> BTreeMap<u32, WeightVersion> {
        self.shared
            .lock()
            .instances
            .iter()
            .map(|(id, s)| (*id, s.active_version()))
            .collect()
    }

    pub fn in_flight(&self) -> Option<WeightVersion> {
        self.shared.lock().channel.in_flight()
    }

    /// Accepts new weights. In synchronous mode the payload is staged on
    /// every instance and the call returns once all of them have swapped
    /// (or `timeout` passes). In asynchronous mode it returns at once and
    /// the payload arrives later through [`Coordinator::stage`] or
    /// [`Coordinator::deliver`].
    pub fn submit_weights(
        &self,
        version: WeightVersion,
        payload: Bytes,
        timeout: Option<Duration>,
    ) -> Result<TransferHandle, CoordError> {
        let mut s = self.shared.lock();
        let handle = s.channel.begin_submit(version, payload)?;
        if !handle.synchronous {
            return Ok(handle);
        }
        let (v, payload) = s.channel.complete_transfer().expect("just submitted");
        for inst in s.instances.values_mut() {
            inst.stage_weights(v, payload.clone())?;
        }
        let deadline = timeout.map(|t| std::time::Instant::now() + t);
        while s.instances.values().any(|i| i.active_version() < v) {
            match deadline {
                Some(d) => {
                    if self.swapped.wait_until(&mut s, d).timed_out() {
                        return Err(CoordError::Timeout(v));
                    }
                }
                None => self.swapped.wait(&mut s),
            }
        }
        Ok(handle)
    }

    /// The in-flight payload has landed on one instance's host memory.
    /// The channel frees up once every instance holds it.
    pub fn stage(&self, instance: u32, version: WeightVersion, payload: Bytes) -> Result<(), CoordError> {
        let mut s = self.shared.lock();
        s.instances
            .get_mut(&instance)
            .ok_or(CoordError::UnknownInstance(instance))?
            .stage_weights(version, payload)?;
        if s.channel.in_flight() == Some(version)
            && s.instances
                .values()
                .all(|i| i.staged_version() >= Some(version) || i.active_version() >= version)
        {
            s.channel.complete_transfer();
        }
        Ok(())
    }

    /// Finishes the in-flight transfer by staging it on every instance.
    pub fn deliver(&self) -> Option<WeightVersion> {
        let mut s = self.shared.lock();
        let (v, payload) = s.channel.complete_transfer()?;
        for inst in s.instances.values_mut() {
            // Instances already past `v` keep what they have.
            let _ = inst.stage_weights(v, payload.clone());
        }
        Some(v)
    }

    pub fn begin_iteration(&self, instance: u32) -> Result<WeightVersion, CoordError> {
        let mut s = self.shared.lock();
        let inst = s
            .instances
            .get_mut(&instance)
            .ok_or(CoordError::UnknownInstance(instance))?;
        Ok(inst.begin_iteration())
    }

    /// Generation-iteration boundary: swaps staged weights if the stagger
    /// gate (when configured) has room.
    pub fn boundary(&self, instance: u32) -> Result<SwapResult, CoordError> {
        let mut s = self.shared.lock();
        let s = &mut *s;
        let inst = s
            .instances
            .get_mut(&instance)
            .ok_or(CoordError::UnknownInstance(instance))?;
        inst.end_iteration();
        if inst.staged_version().is_none() {
            return Ok(inst.maybe_swap());
        }
        if let Some(gate) = s.gate.as_mut() {
            if !gate.try_acquire(instance) {
                return Ok(SwapResult {
                    swapped: false,
                    new_version: inst.active_version(),
                });
            }
        }
        let r = inst.maybe_swap();
        if let Some(gate) = s.gate.as_mut() {
            gate.release(instance);
        }
        if r.swapped {
            self.swapped.notify_all();
        }
        Ok(r)
    }
}

impl Coordinator {
    /// User-level "new weights are ready" hook. Asynchronous channels
    /// stage the payload everywhere at once; synchronous ones block as in
    /// [`Coordinator::submit_weights`].
    pub fn weight_sync_notify(
        &self,
        version: WeightVersion,
        payload: Bytes,
        timeout: Option<Duration>,
    ) -> Result<TransferHandle, CoordError> {
        let h = self.submit_weights(version, payload, timeout)?;
        if !h.synchronous {
            self.deliver();
        }
        Ok(h)
    }
}

impl CoordinatorApi for Coordinator {
    fn submit_weights(&self, version: WeightVersion, payload: Bytes) -> Result<TransferHandle, CoordError> {
        Coordinator::submit_weights(self, version, payload, None)
    }

    fn stage(&self, instance: u32, version: WeightVersion, payload: Bytes) -> Result<(), CoordError> {
        Coordinator::stage(self, instance, version, payload)
    }

    fn swap_report(&self, instance: u32) -> Result<SwapResult, CoordError> {
        self.boundary(instance)
    }

    fn weight_sync_notify(&self, version: WeightVersion) -> Result<TransferHandle, CoordError> {
        Coordinator::weight_sync_notify(self, version, Bytes::new(), None)
    }
}
