//! Writes the Gantt chart of a simulated run as a Chrome trace (open it in
//! chrome://tracing or Perfetto) and as JSON lines.
//!
//! cargo run --example trace_export [out_dir]

use std::path::PathBuf;

use flowqueue::sim::{export_trace, run_sim, Mode, SimScenario, TraceFormat};

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().display().to_string()));
    let report = run_sim(&SimScenario { iterations: 5, ..SimScenario::desk(Mode::StreamedAsyncStaggered) }).unwrap();
    for (format, name) in [(TraceFormat::ChromeTrace, "trace.json"), (TraceFormat::JsonLines, "trace.jsonl")] {
        let path = dir.join(name);
        export_trace(&report, &path, format).unwrap();
        println!("wrote {}", path.display());
    }
    println!("{} segments over {:.3} s", report.gantt.segments.len(), report.end_to_end_time_ns as f64 / 1e9);
}
