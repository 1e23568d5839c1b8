//! Device allocation search across pipeline tasks.
//!
//! Every way of splitting `D` devices over the tasks is scored with a cheap
//! analytic model (`workload / (coeff · n^α)`, ranked by the slowest task),
//! the best `keep_k` survive, and each survivor is run through the
//! simulator. The fastest simulated allocation wins.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sim::{run_sim, LengthDist, SimError, SimReport, SimScenario, StageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRole {
    Rollout,
    /// Inference stage between rollout and training.
    Stage,
    Train,
}

/// One task to place. `workload` is in abstract units per iteration and
/// `coeff` in units per second per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTask {
    pub name: String,
    pub role: TaskRole,
    pub workload: f64,
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticModel {
    /// Scaling exponent in `(0, 1]`.
    pub alpha: f64,
    /// Constant added to every estimate, in seconds.
    pub comm_overhead_s: f64,
}

impl Default for AnalyticModel {
    fn default() -> Self {
        AnalyticModel {
            alpha: 0.9,
            comm_overhead_s: 0.0,
        }
    }
}

/// Seconds for `task` on `n` devices.
pub fn analytic_time(model: &AnalyticModel, task: &PlanTask, n: u32) -> f64 {
    if task.workload == 0.0 {
        return model.comm_overhead_s;
    }
    task.workload / (task.coeff * (n as f64).powf(model.alpha)) + model.comm_overhead_s
}

/// Measured durations that override the analytic estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    #[serde(default, rename = "entry")]
    pub entries: Vec<ProfileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub task: String,
    pub devices: u32,
    pub seconds: f64,
}

impl ProfileTable {
    pub fn lookup(&self, task: &str, devices: u32) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.task == task && e.devices == devices)
            .map(|e| e.seconds)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        for e in &self.entries {
            if !(e.seconds > 0.0) || e.devices == 0 {
                return Err(PlanError::InvalidInput(format!(
                    "profile entry {}@{} must be positive",
                    e.task, e.devices
                )));
            }
        }
        Ok(())
    }
}

/// Device count per task, in task order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Allocation(pub Vec<u32>);

impl Allocation {
    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn named(&self, tasks: &[PlanTask]) -> BTreeMap<String, u32> {
        tasks.iter().map(|t| t.name.clone()).zip(self.0.iter().copied()).collect()
    }

    pub fn describe(&self, tasks: &[PlanTask]) -> String {
        tasks
            .iter()
            .zip(&self.0)
            .map(|(t, n)| format!("{}:{n}", t.name))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("budget {budget} cannot give each of {tasks} tasks a device")]
    InfeasibleBudget { budget: u32, tasks: usize },
    #[error("invalid planner input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Every split of `budget` into `tasks` positive parts, in lexicographic order.
pub fn enumerate_allocations(budget: u32, tasks: usize) -> Vec<Allocation> {
    fn go(left: u32, slots: usize, prefix: &mut Vec<u32>, out: &mut Vec<Allocation>) {
        if slots == 1 {
            prefix.push(left);
            out.push(Allocation(prefix.clone()));
            prefix.pop();
            return;
        }
        for n in 1..=left - (slots as u32 - 1) {
            prefix.push(n);
            go(left - n, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if tasks == 0 || (budget as usize) < tasks {
        return out;
    }
    go(budget, tasks, &mut Vec::with_capacity(tasks), &mut out);
    out
}

/// Bottleneck estimate: the slowest task under `alloc`.
pub fn estimate(model: &AnalyticModel, profile: &ProfileTable, tasks: &[PlanTask], alloc: &Allocation) -> f64 {
    tasks
        .iter()
        .zip(&alloc.0)
        .map(|(t, &n)| profile.lookup(&t.name, n).unwrap_or_else(|| analytic_time(model, t, n)))
        .fold(0.0, f64::max)
}

/// Keeps the `keep_k` best candidates by bottleneck estimate, ties broken
/// by allocation order.
pub fn prune(
    candidates: &[Allocation],
    model: &AnalyticModel,
    profile: &ProfileTable,
    tasks: &[PlanTask],
    keep_k: usize,
) -> Vec<Allocation> {
    let mut scored: Vec<(f64, &Allocation)> = candidates
        .iter()
        .map(|a| (estimate(model, profile, tasks, a), a))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(keep_k).map(|(_, a)| a.clone()).collect()
}

fn validate_tasks(tasks: &[PlanTask]) -> Result<(), PlanError> {
    let count = |r: TaskRole| tasks.iter().filter(|t| t.role == r).count();
    if count(TaskRole::Rollout) != 1 || count(TaskRole::Train) != 1 {
        return Err(PlanError::InvalidInput(
            "need exactly one rollout and one train task".into(),
        ));
    }
    for t in tasks {
        if !(t.coeff > 0.0) || !(t.workload >= 0.0) || !t.workload.is_finite() {
            return Err(PlanError::InvalidInput(format!(
                "task {}: coeff must be > 0 and workload >= 0",
                t.name
            )));
        }
    }
    Ok(())
}

fn mean_tokens(d: &LengthDist) -> f64 {
    match *d {
        LengthDist::Fixed { tokens } => tokens as f64,
        LengthDist::Lognormal { mu, sigma, max_tokens } => {
            (mu + sigma * sigma / 2.0).exp().clamp(1.0, max_tokens as f64)
        }
    }
}

/// Turns `template` into the scenario for one allocation.
///
/// Each task's single-device time per iteration is `workload / coeff`.
/// That time is spread over the global batch to get per-token or
/// per-sample costs, and each instance is slowed by `n^(1-α)` so that
/// `n` instances deliver `n^α` times the throughput of one.
pub fn scenario_for(
    template: &SimScenario,
    model: &AnalyticModel,
    tasks: &[PlanTask],
    alloc: &Allocation,
    micro_batch: Option<u32>,
) -> SimScenario {
    let g = template.global_batch as f64;
    let mut sc = template.clone();
    sc.stages.clear();
    for (t, &n) in tasks.iter().zip(&alloc.0) {
        let single_ns = t.workload / t.coeff * 1e9;
        let slowdown = (n as f64).powf(1.0 - model.alpha);
        match t.role {
            TaskRole::Rollout => {
                sc.rollout_instances = n;
                sc.per_token_ns =
                    (single_ns / (g * mean_tokens(&template.lengths)) * slowdown).round() as u64;
            }
            TaskRole::Train => {
                sc.train_instances = n;
                sc.per_sample_train_ns = (single_ns / g * slowdown).round() as u64;
            }
            TaskRole::Stage => sc.stages.push(StageSpec {
                name: t.name.clone(),
                instances: n,
                per_sample_ns: (single_ns / g * slowdown).round() as u64,
                micro_batch: micro_batch.unwrap_or(template.train_micro_batch),
            }),
        }
    }
    if let Some(mb) = micro_batch {
        sc.rollout_micro_batch = mb;
        sc.train_micro_batch = mb;
    }
    // Staggering needs a spare rollout instance.
    if sc.mode == crate::sim::Mode::StreamedAsyncStaggered && sc.rollout_instances < 2 {
        sc.mode = crate::sim::Mode::StreamedAsync;
    }
    sc.stagger_k = sc.stagger_k.min(sc.rollout_instances.saturating_sub(1) as usize).max(1);
    sc
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub model: AnalyticModel,
    pub profile: ProfileTable,
    /// Micro-batch sizes to try for every finalist; empty keeps the template's.
    pub micro_batch_grid: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finalist {
    pub allocation: Allocation,
    pub micro_batch: Option<u32>,
    pub analytic_s: f64,
    pub simulated_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Plan {
    pub allocation: Allocation,
    pub micro_batch: Option<u32>,
    pub report: SimReport,
    /// Every simulated candidate, best first.
    pub finalists: Vec<Finalist>,
}

impl Plan {
    /// Plain-text table of the finalists.
    pub fn table(&self, tasks: &[PlanTask]) -> String {
        let mut out = format!(
            "{:<32} {:>6} {:>12} {:>14}\n",
            "allocation", "mb", "analytic_s", "simulated_s"
        );
        for f in &self.finalists {
            out.push_str(&format!(
                "{:<32} {:>6} {:>12.4} {:>14.4}\n",
                f.allocation.describe(tasks),
                f.micro_batch.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
                f.analytic_s,
                f.simulated_ns as f64 / 1e9
            ));
        }
        out
    }
}

fn rank(a: &Finalist, b: &Finalist) -> Ordering {
    a.simulated_ns
        .cmp(&b.simulated_ns)
        .then_with(|| a.allocation.cmp(&b.allocation))
        .then_with(|| a.micro_batch.cmp(&b.micro_batch))
}

/// Searches allocations of `budget` devices. `keep_k = usize::MAX` simulates
/// every candidate.
pub fn plan(
    budget: u32,
    tasks: &[PlanTask],
    template: &SimScenario,
    keep_k: usize,
    options: &PlanOptions,
) -> Result<Plan, PlanError> {
    validate_tasks(tasks)?;
    options.profile.validate()?;
    if (budget as usize) < tasks.len() {
        return Err(PlanError::InfeasibleBudget {
            budget,
            tasks: tasks.len(),
        });
    }
    if keep_k == 0 {
        return Err(PlanError::InvalidInput("keep_k must be >= 1".into()));
    }
    let candidates = enumerate_allocations(budget, tasks.len());
    let finalists = prune(&candidates, &options.model, &options.profile, tasks, keep_k);
    let grid: Vec<Option<u32>> = if options.micro_batch_grid.is_empty() {
        vec![None]
    } else {
        options.micro_batch_grid.iter().copied().map(Some).collect()
    };
    let jobs: Vec<(Allocation, Option<u32>)> = finalists
        .iter()
        .flat_map(|a| grid.iter().map(move |mb| (a.clone(), *mb)))
        .collect();
    let runs: Vec<Result<(Finalist, SimReport), PlanError>> = jobs
        .into_par_iter()
        .map(|(alloc, mb)| {
            let sc = scenario_for(template, &options.model, tasks, &alloc, mb);
            let report = run_sim(&sc)?;
            Ok((
                Finalist {
                    analytic_s: estimate(&options.model, &options.profile, tasks, &alloc),
                    allocation: alloc,
                    micro_batch: mb,
                    simulated_ns: report.end_to_end_time_ns,
                },
                report,
            ))
        })
        .collect();
    let mut runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    runs.sort_by(|a, b| rank(&a.0, &b.0));
    let finalists: Vec<Finalist> = runs.iter().map(|(f, _)| f.clone()).collect();
    let (best, report) = runs.into_iter().next().expect("at least one candidate");
    Ok(Plan {
        allocation: best.allocation,
        micro_batch: best.micro_batch,
        report,
        finalists,
    })
}

/// A planning request as read from a TOML file.
///
/// ```toml
/// budget = 8
/// keep_k = 4
/// micro_batch_grid = [2, 4]
///
/// [model]
/// alpha = 0.9
/// comm_overhead_s = 0.0
///
/// [[task]]
/// name = "actor_rollout"
/// role = "rollout"
/// workload = 2.0
/// coeff = 1.0
///
/// [[entry]]                  # optional measured times
/// task = "actor_rollout"
/// devices = 4
/// seconds = 0.6
///
/// [template]                 # scenario schema
/// ...
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRequest {
    pub budget: u32,
    #[serde(default = "default_keep_k")]
    pub keep_k: usize,
    #[serde(default)]
    pub micro_batch_grid: Vec<u32>,
    #[serde(default)]
    pub model: AnalyticModel,
    #[serde(rename = "task")]
    pub tasks: Vec<PlanTask>,
    #[serde(default, rename = "entry")]
    pub profile: Vec<ProfileEntry>,
    pub template: SimScenario,
}

fn default_keep_k() -> usize {
    4
}

impl PlanRequest {
    pub fn options(&self) -> PlanOptions {
        PlanOptions {
            model: self.model.clone(),
            profile: ProfileTable {
                entries: self.profile.clone(),
            },
            micro_batch_grid: self.micro_batch_grid.clone(),
        }
    }

    pub fn run(&self) -> Result<Plan, PlanError> {
        plan(self.budget, &self.tasks, &self.template, self.keep_k, &self.options())
    }
}
