//! Runs the default desk scenario in every pipeline mode and prints
//! throughput, bubble ratios and the staleness histogram.
//!
//! cargo run --example pipeline_modes [iterations]

use flowqueue::sim::{run_sim, Mode, SimScenario};

fn main() {
    let iterations = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let mut base = None;
    for mode in Mode::ALL {
        let scenario = SimScenario { iterations, ..SimScenario::desk(mode) };
        let report = run_sim(&scenario).expect("simulation failed");
        let speedup = match base {
            None => {
                base = Some(report.samples_per_second);
                1.0
            }
            Some(b) => report.samples_per_second / b,
        };
        println!("{}  (x{speedup:.2} vs sequential)", report.summary());
        println!("    staleness histogram: {:?}", report.staleness_histogram);
        println!("    version stalls per step: {:?}", report.version_stalls);
    }
}
