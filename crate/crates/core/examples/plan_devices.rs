//! Splits a device budget across rollout, a reference stage and training.
//! Candidates are ranked with the analytic model and the best few are
//! simulated to pick the winner.
//!
//! cargo run --example plan_devices [budget]

use flowqueue::planner::{plan, PlanOptions, PlanTask, TaskRole};
use flowqueue::sim::{LengthDist, Mode, SimScenario};

fn main() {
    let budget = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let tasks = vec![
        PlanTask { name: "actor_rollout".into(), role: TaskRole::Rollout, workload: 4.0, coeff: 1.0 },
        PlanTask { name: "reference".into(), role: TaskRole::Stage, workload: 1.0, coeff: 1.0 },
        PlanTask { name: "actor_update".into(), role: TaskRole::Train, workload: 2.0, coeff: 1.0 },
    ];
    let template = SimScenario {
        global_batch: 32,
        iterations: 5,
        lengths: LengthDist::Fixed { tokens: 256 },
        ..SimScenario::desk(Mode::StreamedAsync)
    };
    let p = plan(budget, &tasks, &template, 4, &PlanOptions::default()).expect("planning failed");
    print!("{}", p.table(&tasks));
    println!("best allocation: {}", p.allocation.describe(&tasks));
    println!("{}", p.report.summary());
}
