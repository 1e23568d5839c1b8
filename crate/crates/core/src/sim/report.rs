use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Generate,
    Infer,
    Train,
    /// Blocking weight transfer (synchronous modes).
    WeightSync,
    /// Host-to-device load of staged weights.
    H2d,
}

impl SegmentKind {
    /// Whether the segment counts as useful work for bubble accounting.
    pub fn is_busy(self) -> bool {
        matches!(self, SegmentKind::Generate | SegmentKind::Infer | SegmentKind::Train)
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::Generate => "generate",
            SegmentKind::Infer => "infer",
            SegmentKind::Train => "train",
            SegmentKind::WeightSync => "weight_sync",
            SegmentKind::H2d => "h2d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub instance: String,
    pub kind: SegmentKind,
    pub start_ns: u64,
    pub end_ns: u64,
    /// Epoch the work belongs to, if any.
    pub epoch: Option<u64>,
    /// Weight version the work ran with, if any.
    pub version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub name: String,
    /// "rollout", "train", or an inference stage name.
    pub class: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gantt {
    pub instances: Vec<InstanceInfo>,
    pub segments: Vec<Segment>,
    pub end_ns: u64,
}

impl Gantt {
    pub fn classes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for i in &self.instances {
            if !out.contains(&i.class) {
                out.push(i.class.clone());
            }
        }
        out
    }

    pub fn segments_of<'a>(&'a self, instance: &'a str) -> impl Iterator<Item = &'a Segment> + 'a {
        self.segments.iter().filter(move |s| s.instance == instance)
    }

    /// Segments of every instance are sorted by start and do not overlap.
    pub fn check_well_formed(&self) -> Result<(), String> {
        for inst in &self.instances {
            let mut prev_end = 0;
            for s in self.segments_of(&inst.name) {
                if s.end_ns < s.start_ns {
                    return Err(format!("{}: segment ends before it starts", inst.name));
                }
                if s.start_ns < prev_end {
                    return Err(format!(
                        "{}: {} segment at {} overlaps previous ending at {}",
                        inst.name,
                        s.kind.name(),
                        s.start_ns,
                        prev_end
                    ));
                }
                if s.end_ns > self.end_ns {
                    return Err(format!("{}: segment past end of run", inst.name));
                }
                prev_end = s.end_ns;
            }
        }
        Ok(())
    }
}

/// Idle share of `[0, end]` summed over the instances of `class`. Only
/// generate, infer and train segments count as busy.
pub fn bubble_ratio(gantt: &Gantt, class: &str) -> f64 {
    let members: Vec<&str> = gantt
        .instances
        .iter()
        .filter(|i| i.class == class)
        .map(|i| i.name.as_str())
        .collect();
    if members.is_empty() || gantt.end_ns == 0 {
        return 0.0;
    }
    let busy: u64 = gantt
        .segments
        .iter()
        .filter(|s| s.kind.is_busy() && members.contains(&s.instance.as_str()))
        .map(|s| s.end_ns - s.start_ns)
        .sum();
    let span = gantt.end_ns as f64 * members.len() as f64;
    (1.0 - busy as f64 / span).clamp(0.0, 1.0)
}

/// Sample accounting over the whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub generated: u64,
    pub consumed: u64,
    pub dropped: u64,
    pub in_flight_at_end: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.generated == self.consumed + self.dropped + self.in_flight_at_end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: Mode,
    pub iterations: u64,
    pub samples_per_second: f64,
    pub end_to_end_time_ns: u64,
    /// Instance class → bubble ratio.
    pub bubble_ratio: BTreeMap<String, f64>,
    /// `trainer_version - data_version` → number of consumed samples.
    pub staleness_histogram: BTreeMap<u64, u64>,
    pub max_staleness: u64,
    /// Rollout idles caused by waiting for newer weights, per trainer step.
    pub version_stalls: Vec<u64>,
    /// Distinct data versions seen by each trainer step.
    pub versions_per_step: Vec<u64>,
    /// Finish time of each trainer step.
    pub step_end_ns: Vec<u64>,
    pub conservation: Conservation,
    pub gantt: Gantt,
}

impl SimReport {
    /// Compact one-line summary for logs and the CLI.
    pub fn summary(&self) -> String {
        let bubbles: Vec<String> = self
            .bubble_ratio
            .iter()
            .map(|(k, v)| format!("{k}={v:.3}"))
            .collect();
        format!(
            "{}: {:.1} samples/s, end-to-end {:.3} s, bubble [{}], max staleness {}",
            self.mode.name(),
            self.samples_per_second,
            self.end_to_end_time_ns as f64 / 1e9,
            bubbles.join(" "),
            self.max_staleness
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
