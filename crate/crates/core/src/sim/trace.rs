use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::SimReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    /// One JSON object per Gantt segment.
    JsonLines,
    /// Chrome / Perfetto "complete event" trace, one track per instance.
    ChromeTrace,
}

impl std::str::FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json_lines" | "jsonl" => Ok(TraceFormat::JsonLines),
            "chrome_trace" | "chrome" => Ok(TraceFormat::ChromeTrace),
            _ => Err(format!("unknown trace format {s:?}")),
        }
    }
}

pub fn render_trace(report: &SimReport, format: TraceFormat) -> String {
    let gantt = &report.gantt;
    match format {
        TraceFormat::JsonLines => {
            let mut out = String::new();
            for s in &gantt.segments {
                out.push_str(&serde_json::to_string(s).expect("segment serialises"));
                out.push('\n');
            }
            out
        }
        TraceFormat::ChromeTrace => {
            let class_of = |name: &str| {
                gantt
                    .instances
                    .iter()
                    .find(|i| i.name == name)
                    .map(|i| i.class.as_str())
                    .unwrap_or("unknown")
            };
            let classes = gantt.classes();
            let pid = |class: &str| classes.iter().position(|c| c == class).unwrap_or(usize::MAX);
            let mut events = Vec::new();
            for (tid, inst) in gantt.instances.iter().enumerate() {
                events.push(json!({
                    "name": "thread_name", "ph": "M", "pid": pid(&inst.class), "tid": tid,
                    "args": { "name": inst.name },
                }));
            }
            for (p, class) in classes.iter().enumerate() {
                events.push(json!({
                    "name": "process_name", "ph": "M", "pid": p, "args": { "name": class },
                }));
            }
            for s in &gantt.segments {
                let tid = gantt.instances.iter().position(|i| i.name == s.instance);
                events.push(json!({
                    "name": s.kind.name(),
                    "ph": "X",
                    "pid": pid(class_of(&s.instance)),
                    "tid": tid,
                    "ts": s.start_ns as f64 / 1e3,
                    "dur": (s.end_ns - s.start_ns) as f64 / 1e3,
                    "args": { "epoch": s.epoch, "version": s.version },
                }));
            }
            serde_json::to_string(&json!({ "traceEvents": events, "displayTimeUnit": "ms" }))
                .expect("trace serialises")
        }
    }
}

pub fn export_trace(report: &SimReport, path: &Path, format: TraceFormat) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(render_trace(report, format).as_bytes())?;
    f.flush()
}
